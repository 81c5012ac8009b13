use std::process::ExitCode;

fn main() -> ExitCode {
    vistrim::cli::main()
}
