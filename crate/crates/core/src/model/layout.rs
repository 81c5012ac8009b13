use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segment {
    System,
    Visual,
    Instruction,
    Output,
}

/// Position and segment of one sequence row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowMeta {
    pub position: usize,
    pub segment: Segment,
}

/// `[system | visual | instruction | output]` with the original positions of
/// the visual tokens still present.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLayout {
    pub n_system: usize,
    pub visual_original_indices: Vec<usize>,
    pub n_instruction: usize,
    pub n_output: usize,
    /// Visual count of the unpruned prompt; fixes instruction positions.
    pub visual_span: usize,
}

impl TokenLayout {
    pub fn new(n_system: usize, n_visual: usize, n_instruction: usize) -> Self {
        Self {
            n_system,
            visual_original_indices: (n_system..n_system + n_visual).collect(),
            n_instruction,
            n_output: 0,
            visual_span: n_visual,
        }
    }

    pub fn n_visual(&self) -> usize {
        self.visual_original_indices.len()
    }

    /// Current number of rows.
    pub fn len(&self) -> usize {
        self.n_system + self.n_visual() + self.n_instruction + self.n_output
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Prompt length before any pruning.
    pub fn original_prompt_len(&self) -> usize {
        self.n_system + self.visual_span + self.n_instruction
    }

    /// Row metadata for the prompt rows (outputs excluded), in row order.
    pub fn prompt_rows(&self) -> Vec<RowMeta> {
        let mut rows = Vec::with_capacity(self.len());
        rows.extend((0..self.n_system).map(|p| RowMeta {
            position: p,
            segment: Segment::System,
        }));
        rows.extend(self.visual_original_indices.iter().map(|&p| RowMeta {
            position: p,
            segment: Segment::Visual,
        }));
        let instr_start = self.n_system + self.visual_span;
        rows.extend((instr_start..instr_start + self.n_instruction).map(|p| RowMeta {
            position: p,
            segment: Segment::Instruction,
        }));
        rows
    }

    pub fn visual_strictly_increasing(&self) -> bool {
        self.visual_original_indices.windows(2).all(|w| w[0] < w[1])
    }
}
