//! The four front-end commands as plain functions. Each one computes every
//! artifact in memory first and returns them as named files; writing is
//! left to [`write_artifacts`].

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analytics::{lazy_candidates, similarity_matrix, visual_share, SimilarityMatrix};
use crate::annealing::{overlap, AttenuationSpec};
use crate::cost::{calibrate_text_tokens, pipeline_flops, CostConfig, CostReport};
use crate::error::{Error, Result};
use crate::heredity::HereditySpec;
use crate::model::{AttentionRecord, GenerateOptions, GenerationTrace, Model, Policies};
use crate::pruning::{step_ratio_for_target, Fraction, PruneSchedule};

use super::config::{check_version, CostFile, Format, RunConfig, SweepConfig};

/// A rendered output file, relative to the output directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Artifact {
    pub name: String,
    pub contents: Vec<u8>,
}

impl Artifact {
    fn new(name: impl Into<String>, contents: impl Into<Vec<u8>>) -> Self {
        Self {
            name: name.into(),
            contents: contents.into(),
        }
    }
}

/// Writes every artifact under `dir`. If any write fails, files written so
/// far are removed.
pub fn write_artifacts(dir: &Path, artifacts: &[Artifact]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::with_capacity(artifacts.len());
    for a in artifacts {
        let path = dir.join(&a.name);
        if let Err(e) = fs::write(&path, &a.contents) {
            for p in &written {
                let _ = fs::remove_file(p);
            }
            let _ = fs::remove_file(&path);
            return Err(e.into());
        }
        written.push(path);
    }
    Ok(written)
}

/// Nine significant digits.
pub fn fmt_float(x: f64) -> String {
    format!("{x:.8e}")
}

fn csv_bytes(header: &[String], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.into_inner()
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
}

fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(value)?;
    v.push(b'\n');
    Ok(v)
}

fn layer_columns(prefix: &str, num_layers: usize) -> Vec<String> {
    (0..num_layers).map(|l| format!("{prefix}{l}")).collect()
}

/// Cost accounting for the engine's own dimensions (f64 cache, batch 1).
pub fn engine_cost_config(cfg: &RunConfig) -> CostConfig {
    CostConfig {
        num_layers: cfg.model.num_layers,
        model_dim: cfg.model.model_dim,
        mlp_dim: cfg.model.mlp_dim,
        kv_bytes_per_element: std::mem::size_of::<f64>(),
        batch: 1,
        n_text: cfg.prompt.n_system + cfg.prompt.n_instruction,
        n_visual: cfg.prompt.n_visual,
    }
}

/// Records as written to `attention.json` and read back by `analyze`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionDump {
    pub num_layers: usize,
    pub steps: usize,
    pub records: Vec<AttentionRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub policy: String,
    pub seed: u64,
    pub tokens: Vec<u32>,
    pub keep_counts: Vec<usize>,
    pub engine_ops: u64,
    pub clamp_warnings: usize,
    pub cost: CostReport,
    pub config: RunConfig,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub trace: GenerationTrace,
    pub summary: RunSummary,
    pub artifacts: Vec<Artifact>,
}

pub fn generate_trace(cfg: &RunConfig) -> Result<GenerationTrace> {
    cfg.validate()?;
    let model = Model::new(cfg.model_config())?;
    let prompt = model.build_prompt(
        cfg.prompt.n_system,
        cfg.prompt.n_visual,
        cfg.prompt.n_instruction,
        cfg.prompt_seed(),
    )?;
    let opts = GenerateOptions {
        max_new_tokens: cfg.generation.max_new_tokens,
        record_attention: cfg.generation.record_attention,
    };
    model.generate(&prompt, &cfg.policies(), &opts)
}

pub fn run(cfg: &RunConfig) -> Result<RunOutcome> {
    let trace = generate_trace(cfg)?;
    let policies = cfg.policies();
    let cost = pipeline_flops(
        &engine_cost_config(cfg),
        &policies.schedule,
        &policies.heredity,
        &policies.attenuation,
        cfg.generation.max_new_tokens,
    )?;
    let summary = RunSummary {
        policy: policies.label(),
        seed: cfg.seed,
        tokens: trace.tokens.clone(),
        keep_counts: trace.keep_counts.clone(),
        engine_ops: trace.total_ops(),
        clamp_warnings: trace.clamp_warnings,
        cost,
        config: cfg.clone(),
    };

    let mut artifacts = Vec::new();
    match cfg.output.format {
        Format::Csv => {
            let mut header = vec!["step".to_string(), "token".to_string()];
            header.extend(layer_columns("vis_l", cfg.model.num_layers));
            header.extend(["visual_share", "ops", "cumulative_ops"].map(String::from));
            let rows: Vec<Vec<String>> = trace
                .steps
                .iter()
                .map(|s| {
                    let mut r = vec![s.step.to_string(), s.token.to_string()];
                    r.extend(s.visual_cache.iter().map(|v| v.to_string()));
                    r.push(fmt_float(s.visual_share));
                    r.push(s.ops.to_string());
                    r.push(s.cumulative_ops.to_string());
                    r
                })
                .collect();
            artifacts.push(Artifact::new("trace.csv", csv_bytes(&header, &rows)?));
        }
        Format::Json => artifacts.push(Artifact::new("trace.json", json_bytes(&trace.steps)?)),
    }
    artifacts.push(Artifact::new("summary.json", json_bytes(&summary)?));
    if cfg.generation.record_attention {
        let dump = AttentionDump {
            num_layers: cfg.model.num_layers,
            steps: trace.steps.len(),
            records: trace.records.clone(),
        };
        artifacts.push(Artifact::new("attention.json", json_bytes(&dump)?));
    }
    Ok(RunOutcome {
        trace,
        summary,
        artifacts,
    })
}

/// One grid point of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub stride: usize,
    pub step_ratio: Option<Fraction>,
    pub first_ratio: Fraction,
    pub keep_fraction: Option<Fraction>,
    pub tau: Option<f64>,
    pub lazy_layers: HereditySpec,
    pub prefill_flops: Option<u64>,
    pub total_flops: Option<u64>,
    pub peak_kv_bytes: Option<u64>,
    pub wall_clock_ms: Option<f64>,
    pub checksum: Option<String>,
    pub status: String,
    pub reason: String,
}

impl SweepRow {
    pub const HEADER: [&'static str; 13] = [
        "S",
        "R",
        "P",
        "C",
        "tau",
        "lazy",
        "prefill_flops",
        "total_flops",
        "peak_kv_bytes",
        "wall_clock_ms",
        "checksum",
        "status",
        "reason",
    ];

    fn cells(&self) -> Vec<String> {
        fn opt<T: ToString>(v: &Option<T>) -> String {
            v.as_ref().map(T::to_string).unwrap_or_default()
        }
        vec![
            self.stride.to_string(),
            opt(&self.step_ratio),
            self.first_ratio.to_string(),
            opt(&self.keep_fraction),
            self.tau.map(fmt_float).unwrap_or_default(),
            self.lazy_layers.to_string(),
            opt(&self.prefill_flops),
            opt(&self.total_flops),
            opt(&self.peak_kv_bytes),
            self.wall_clock_ms.map(|t| format!("{t:.3}")).unwrap_or_default(),
            opt(&self.checksum),
            self.status.clone(),
            self.reason.clone(),
        ]
    }
}

struct GridPoint {
    stride: usize,
    ratio: std::result::Result<Fraction, String>,
    tau: Option<f64>,
    lazy: HereditySpec,
}

fn grid_points(cfg: &SweepConfig) -> Result<Vec<GridPoint>> {
    let g = &cfg.grid;
    if g.keep_fraction.is_some() && !g.ratios.is_empty() {
        return Err(Error::config("set either grid.ratios or grid.keep_fraction, not both"));
    }
    if g.keep_fraction.is_none() && g.ratios.is_empty() && !g.strides.is_empty() {
        return Err(Error::config("grid needs ratios or a keep_fraction"));
    }
    let taus: Vec<Option<f64>> = if g.taus.is_empty() {
        vec![None]
    } else {
        g.taus.iter().copied().map(Some).collect()
    };
    let lazy_sets = if g.lazy_sets.is_empty() {
        vec![HereditySpec::none()]
    } else {
        g.lazy_sets.clone()
    };
    let mut points = Vec::new();
    for &stride in &g.strides {
        let ratios: Vec<std::result::Result<Fraction, String>> = match g.keep_fraction {
            Some(target) => vec![step_ratio_for_target(
                cfg.cost.num_layers,
                g.start_layer,
                stride,
                g.first_ratio,
                target,
            )
            .map_err(|e| e.to_string())],
            None => g.ratios.iter().copied().map(Ok).collect(),
        };
        for ratio in ratios {
            for &tau in &taus {
                for lazy in &lazy_sets {
                    points.push(GridPoint {
                        stride,
                        ratio: ratio.clone(),
                        tau,
                        lazy: lazy.clone(),
                    });
                }
            }
        }
    }
    Ok(points)
}

/// SHA-256 over the emitted tokens and per-step visual cache sizes,
/// truncated to 16 hex digits.
pub fn trace_checksum(trace: &GenerationTrace) -> String {
    let mut h = Sha256::new();
    for s in &trace.steps {
        h.update(s.token.to_le_bytes());
        for &v in &s.visual_cache {
            h.update((v as u64).to_le_bytes());
        }
    }
    let digest = h.finalize();
    hex::encode(&digest[..8])
}

fn sweep_point(cfg: &SweepConfig, model: &Model, point: &GridPoint) -> SweepRow {
    let g = &cfg.grid;
    let mut row = SweepRow {
        stride: point.stride,
        step_ratio: point.ratio.as_ref().ok().copied(),
        first_ratio: g.first_ratio,
        keep_fraction: None,
        tau: point.tau,
        lazy_layers: point.lazy.clone(),
        prefill_flops: None,
        total_flops: None,
        peak_kv_bytes: None,
        wall_clock_ms: None,
        checksum: None,
        status: "skipped".to_string(),
        reason: String::new(),
    };
    let ratio = match &point.ratio {
        Ok(r) => *r,
        Err(e) => {
            row.reason = e.clone();
            return row;
        }
    };
    let mut schedule = PruneSchedule::pvtp(point.stride, ratio, g.first_ratio);
    schedule.start_layer = g.start_layer;
    let attenuation = point.tau.map_or(AttenuationSpec::none(), AttenuationSpec::cosine);
    let policies = Policies {
        schedule,
        attenuation,
        heredity: point.lazy.clone(),
    };
    let result = (|| -> Result<(CostReport, GenerationTrace, f64)> {
        policies.validate(cfg.cost.num_layers)?;
        let cost = pipeline_flops(
            &cfg.cost,
            &policies.schedule,
            &policies.heredity,
            &policies.attenuation,
            cfg.generation.max_new_tokens,
        )?;
        let prompt = model.build_prompt(
            cfg.prompt.n_system,
            cfg.prompt.n_visual,
            cfg.prompt.n_instruction,
            crate::tensor::Seed(cfg.seed).derive(0x5052_4f4d_5054),
        )?;
        let opts = GenerateOptions {
            max_new_tokens: cfg.generation.max_new_tokens,
            record_attention: false,
        };
        let start = Instant::now();
        let trace = model.generate(&prompt, &policies, &opts)?;
        let ms = start.elapsed().as_secs_f64() * 1e3;
        Ok((cost, trace, ms))
    })();
    match result {
        Ok((cost, trace, ms)) => {
            row.keep_fraction = Some(crate::pruning::final_keep_fraction(
                cfg.cost.num_layers,
                &policies.schedule,
            ));
            row.prefill_flops = Some(cost.prefill_flops);
            row.total_flops = Some(cost.total_flops);
            row.peak_kv_bytes = Some(cost.peak_kv_bytes);
            row.wall_clock_ms = Some(ms);
            row.checksum = Some(trace_checksum(&trace));
            row.status = "ok".to_string();
        }
        Err(e) => row.reason = e.to_string(),
    }
    row
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    pub artifacts: Vec<Artifact>,
}

/// Evaluates every grid point in parallel; rows keep grid order. Points
/// that fail validation are reported as `skipped` with a reason.
pub fn sweep(cfg: &SweepConfig) -> Result<SweepOutcome> {
    check_version(cfg.version)?;
    cfg.cost.validate()?;
    let points = grid_points(cfg)?;
    let model_cfg = cfg.model.to_config(cfg.seed);
    if model_cfg.num_layers != cfg.cost.num_layers {
        return Err(Error::config(format!(
            "sweep model depth {} differs from cost depth {}",
            model_cfg.num_layers, cfg.cost.num_layers
        )));
    }
    let model = Model::new(model_cfg)?;
    let rows: Vec<SweepRow> = points
        .par_iter()
        .map(|p| sweep_point(cfg, &model, p))
        .collect();

    let artifact = match cfg.output.format {
        Format::Csv => {
            let header: Vec<String> = SweepRow::HEADER.iter().map(|s| s.to_string()).collect();
            let cells: Vec<Vec<String>> = rows.iter().map(SweepRow::cells).collect();
            Artifact::new("sweep.csv", csv_bytes(&header, &cells)?)
        }
        Format::Json => Artifact::new("sweep.json", json_bytes(&rows)?),
    };
    Ok(SweepOutcome {
        rows,
        artifacts: vec![artifact],
    })
}

#[derive(Debug, Clone)]
pub struct AnalyzeOptions {
    pub step: usize,
    /// Defaults to the middle layer.
    pub layer: Option<usize>,
    pub top_fraction: f64,
    pub threshold: f64,
    pub format: Format,
}

impl Default for AnalyzeOptions {
    fn default() -> Self {
        Self {
            step: 0,
            layer: None,
            top_fraction: 0.5,
            threshold: 0.99,
            format: Format::Csv,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub step: usize,
    pub similarity: SimilarityMatrix,
    pub lazy_candidates: Vec<usize>,
    pub threshold: f64,
    /// `visual_share[step][layer]`.
    pub visual_share: Vec<Vec<f64>>,
    pub overlap_layer: usize,
    pub overlap_k: usize,
    pub overlap: Vec<f64>,
}

pub fn read_attention(dir: &Path) -> Result<AttentionDump> {
    let path = dir.join("attention.json");
    let text = fs::read_to_string(&path).map_err(|e| {
        Error::config(format!(
            "cannot read {}: {e} (run with record_attention = true)",
            path.display()
        ))
    })?;
    Ok(serde_json::from_str(&text)?)
}

pub fn analyze(dump: &AttentionDump, opts: &AnalyzeOptions) -> Result<(AnalysisReport, Vec<Artifact>)> {
    let num_layers = dump.num_layers;
    if dump.records.is_empty() || num_layers == 0 {
        return Err(Error::config("attention dump holds no records"));
    }
    if !(0.0..=1.0).contains(&opts.top_fraction) {
        return Err(Error::config("top_fraction must lie in [0, 1]"));
    }
    let mut by_key: HashMap<(usize, usize), &AttentionRecord> = HashMap::new();
    for r in &dump.records {
        by_key.insert((r.step, r.layer), r);
    }
    let layer_records = |step: usize| -> Result<Vec<&AttentionRecord>> {
        (0..num_layers)
            .map(|l| {
                by_key
                    .get(&(step, l))
                    .copied()
                    .ok_or_else(|| Error::config(format!("no record for layer {l} at step {step}")))
            })
            .collect()
    };

    let sim = similarity_matrix(&layer_records(opts.step)?);
    let candidates = lazy_candidates(&sim, opts.threshold);

    let mut shares = Vec::with_capacity(dump.steps);
    for s in 0..dump.steps {
        shares.push(layer_records(s)?.into_iter().map(visual_share).collect::<Vec<_>>());
    }

    let layer = opts.layer.unwrap_or(num_layers / 2);
    if layer >= num_layers {
        return Err(Error::config(format!("layer {layer} out of range for {num_layers} layers")));
    }
    let first = by_key
        .get(&(0, layer))
        .ok_or_else(|| Error::config(format!("no record for layer {layer} at step 0")))?;
    let base_positions = &first.visual_positions;
    let mut scores = Vec::with_capacity(dump.steps);
    for s in 0..dump.steps {
        let rec = by_key
            .get(&(s, layer))
            .ok_or_else(|| Error::config(format!("no record for layer {layer} at step {s}")))?;
        let at: HashMap<usize, f64> = rec
            .visual_positions
            .iter()
            .copied()
            .zip(rec.visual_slice.iter().copied())
            .collect();
        scores.push(
            base_positions
                .iter()
                .map(|p| at.get(p).copied().unwrap_or(0.0))
                .collect::<Vec<f64>>(),
        );
    }
    let k = (base_positions.len() as f64 * opts.top_fraction).floor() as usize;
    let overlaps = overlap(&scores, k)?;

    let report = AnalysisReport {
        step: opts.step,
        similarity: sim,
        lazy_candidates: candidates,
        threshold: opts.threshold,
        visual_share: shares,
        overlap_layer: layer,
        overlap_k: k,
        overlap: overlaps,
    };

    let artifacts = match opts.format {
        Format::Json => vec![Artifact::new("analysis.json", json_bytes(&report)?)],
        Format::Csv => {
            let mut header = vec!["layer".to_string()];
            header.extend(layer_columns("l", num_layers));
            let sim_rows: Vec<Vec<String>> = (0..num_layers)
                .map(|i| {
                    let mut r = vec![i.to_string()];
                    r.extend((0..num_layers).map(|j| {
                        report.similarity.get(i, j).map(fmt_float).unwrap_or_default()
                    }));
                    r
                })
                .collect();

            let mut share_header = vec!["step".to_string()];
            share_header.extend(layer_columns("l", num_layers));
            let share_rows: Vec<Vec<String>> = report
                .visual_share
                .iter()
                .enumerate()
                .map(|(s, v)| {
                    let mut r = vec![s.to_string()];
                    r.extend(v.iter().copied().map(fmt_float));
                    r
                })
                .collect();

            let overlap_header = vec!["step".to_string(), "overlap".to_string()];
            let overlap_rows: Vec<Vec<String>> = report
                .overlap
                .iter()
                .enumerate()
                .map(|(s, &o)| vec![s.to_string(), fmt_float(o)])
                .collect();

            vec![
                Artifact::new("similarity.csv", csv_bytes(&header, &sim_rows)?),
                Artifact::new("visual_share.csv", csv_bytes(&share_header, &share_rows)?),
                Artifact::new("overlap.csv", csv_bytes(&overlap_header, &overlap_rows)?),
                Artifact::new(
                    "lazy_candidates.json",
                    json_bytes(&serde_json::json!({
                        "threshold": report.threshold,
                        "layers": report.lazy_candidates,
                    }))?,
                ),
            ]
        }
    };
    Ok((report, artifacts))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostOutcome {
    /// `n_text` as solved by calibration, before rounding.
    pub calibrated_n_text: Option<f64>,
    pub config: CostConfig,
    pub report: CostReport,
}

pub fn cost(file: &CostFile) -> Result<CostOutcome> {
    check_version(file.version)?;
    let mut config = file.cost.clone();
    let mut calibrated = None;
    if let Some(target) = file.calibrate_flops {
        let n = calibrate_text_tokens(
            config.num_layers,
            config.model_dim,
            config.mlp_dim,
            config.n_visual,
            target,
        )?;
        config.n_text = n.round() as usize;
        calibrated = Some(n);
    }
    let report = pipeline_flops(
        &config,
        &file.prune,
        &file.heredity.lazy_layers,
        &file.attenuation,
        file.gen_len,
    )?;
    Ok(CostOutcome {
        calibrated_n_text: calibrated,
        config,
        report,
    })
}

pub fn render_cost(outcome: &CostOutcome, format: Format) -> Result<Artifact> {
    match format {
        Format::Json => Ok(Artifact::new("cost.json", json_bytes(outcome)?)),
        Format::Csv => {
            let header: Vec<String> = ["step", "flops", "kv_bytes"].map(String::from).to_vec();
            let r = &outcome.report;
            let mut rows = vec![vec![
                "0".to_string(),
                r.prefill_flops.to_string(),
                r.kv_bytes[0].to_string(),
            ]];
            for (i, f) in r.decode_flops.iter().enumerate() {
                rows.push(vec![(i + 1).to_string(), f.to_string(), r.kv_bytes[i + 1].to_string()]);
            }
            Ok(Artifact::new("cost.csv", csv_bytes(&header, &rows)?))
        }
    }
}
