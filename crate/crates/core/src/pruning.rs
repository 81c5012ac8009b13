//! Scheduled attention-ranked retention of visual tokens during prefill.
//!
//! All ratios are fractions of the ORIGINAL visual-token count, so the
//! keep fraction after the `j`-th scheduled layer is `1 - P - j·R` and the
//! final fraction is linear in the number of scheduled layers. Ratios are
//! held in fixed point (millionths) so that closed-form checks such as
//! `1 - 4·12.25% - 50% = 1%` are exact.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::model::TokenLayout;
use crate::tensor::Matrix;

const MICROS: i64 = 1_000_000;

/// A dimensionless ratio with 1e-6 resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Fraction(i64);

impl Fraction {
    pub const ZERO: Fraction = Fraction(0);
    pub const ONE: Fraction = Fraction(MICROS);

    pub const fn from_micros(micros: i64) -> Self {
        Fraction(micros)
    }

    pub fn micros(self) -> i64 {
        self.0
    }

    /// Nearest representable fraction to `x`.
    pub fn from_f64(x: f64) -> Self {
        Fraction((x * MICROS as f64).round() as i64)
    }

    pub fn as_f64(self) -> f64 {
        self.0 as f64 / MICROS as f64
    }

    pub fn checked_sub(self, other: Fraction) -> Fraction {
        Fraction(self.0 - other.0)
    }

    pub fn times(self, k: i64) -> Fraction {
        Fraction(self.0 * k)
    }

    pub fn is_unit_interval(self) -> bool {
        (0..=MICROS).contains(&self.0)
    }

    /// `floor(self × n)`, computed exactly. Negative fractions give 0.
    pub fn of(self, n: usize) -> usize {
        if self.0 <= 0 {
            return 0;
        }
        ((self.0 as i128 * n as i128) / MICROS as i128) as usize
    }
}

impl fmt::Display for Fraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_f64())
    }
}

impl FromStr for Fraction {
    type Err = Error;

    /// Accepts `"0.1225"` or `"12.25%"`.
    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        let (num, pct) = match t.strip_suffix('%') {
            Some(rest) => (rest.trim(), true),
            None => (t, false),
        };
        let x: f64 = num
            .parse()
            .map_err(|_| Error::config(format!("not a fraction or percentage: {s:?}")))?;
        if !x.is_finite() {
            return Err(Error::config(format!("non-finite ratio {s:?}")));
        }
        Ok(Fraction::from_f64(if pct { x / 100.0 } else { x }))
    }
}

impl Serialize for Fraction {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_f64(self.as_f64())
    }
}

impl<'de> Deserialize<'de> for Fraction {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(x) => Ok(Fraction::from_f64(x)),
            Raw::Text(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneKind {
    #[default]
    None,
    Pvtp,
    FastvLike,
    VtwLike,
}

impl FromStr for PruneKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(PruneKind::None),
            "pvtp" => Ok(PruneKind::Pvtp),
            "fastv_like" | "fastv" => Ok(PruneKind::FastvLike),
            "vtw_like" | "vtw" => Ok(PruneKind::VtwLike),
            other => Err(Error::config(format!("unknown prune kind {other:?}"))),
        }
    }
}

impl fmt::Display for PruneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PruneKind::None => "none",
            PruneKind::Pvtp => "pvtp",
            PruneKind::FastvLike => "fastv_like",
            PruneKind::VtwLike => "vtw_like",
        })
    }
}

/// Which layers prune and how much they keep.
///
/// Only the fields relevant to `kind` are consulted; the rest keep their
/// defaults so one flat record can describe every policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneSchedule {
    pub kind: PruneKind,
    /// First pruning layer (0-based) for pvtp.
    pub start_layer: usize,
    /// Layers between consecutive pvtp prunes.
    pub stride: usize,
    /// Fraction of the original visual count removed at each pvtp prune
    /// after the first.
    pub step_ratio: Fraction,
    /// Fraction of the original visual count removed at the first pvtp prune.
    pub first_ratio: Fraction,
    pub fastv_layer: usize,
    pub fastv_ratio: Fraction,
    /// Defaults to `L / 2` when unset.
    pub vtw_cut_layer: Option<usize>,
}

impl Default for PruneSchedule {
    fn default() -> Self {
        Self {
            kind: PruneKind::None,
            start_layer: 3,
            stride: 1,
            step_ratio: Fraction::ZERO,
            first_ratio: Fraction::from_micros(500_000),
            fastv_layer: 2,
            fastv_ratio: Fraction::from_micros(500_000),
            vtw_cut_layer: None,
        }
    }
}

impl PruneSchedule {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn pvtp(stride: usize, step_ratio: Fraction, first_ratio: Fraction) -> Self {
        Self {
            kind: PruneKind::Pvtp,
            stride,
            step_ratio,
            first_ratio,
            ..Self::default()
        }
    }

    pub fn fastv_like(layer: usize, ratio: Fraction) -> Self {
        Self {
            kind: PruneKind::FastvLike,
            fastv_layer: layer,
            fastv_ratio: ratio,
            ..Self::default()
        }
    }

    pub fn vtw_like(cut_layer: Option<usize>) -> Self {
        Self {
            kind: PruneKind::VtwLike,
            vtw_cut_layer: cut_layer,
            ..Self::default()
        }
    }

    pub fn vtw_cut(&self, num_layers: usize) -> usize {
        self.vtw_cut_layer.unwrap_or(num_layers / 2)
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if num_layers == 0 {
            return Err(Error::config("model has no layers"));
        }
        match self.kind {
            PruneKind::None => Ok(()),
            PruneKind::Pvtp => {
                if self.stride == 0 {
                    return Err(Error::config("pvtp stride must be at least 1"));
                }
                if self.start_layer == 0 || self.start_layer >= num_layers {
                    return Err(Error::config(format!(
                        "pvtp start layer {} must lie in [1, {num_layers})",
                        self.start_layer
                    )));
                }
                for (name, r) in [("step_ratio", self.step_ratio), ("first_ratio", self.first_ratio)] {
                    if !r.is_unit_interval() {
                        return Err(Error::config(format!("{name} {r} outside [0, 1]")));
                    }
                }
                let c = final_keep_fraction(num_layers, self);
                if c < Fraction::ZERO {
                    return Err(Error::config(format!(
                        "schedule keeps a negative fraction ({c}) at the last layer"
                    )));
                }
                Ok(())
            }
            PruneKind::FastvLike => {
                if self.fastv_layer == 0 || self.fastv_layer >= num_layers {
                    return Err(Error::config(format!(
                        "fastv layer {} must lie in [1, {num_layers})",
                        self.fastv_layer
                    )));
                }
                if !self.fastv_ratio.is_unit_interval() {
                    return Err(Error::config(format!(
                        "fastv ratio {} outside [0, 1]",
                        self.fastv_ratio
                    )));
                }
                Ok(())
            }
            PruneKind::VtwLike => {
                let cut = self.vtw_cut(num_layers);
                if cut == 0 || cut >= num_layers {
                    return Err(Error::config(format!(
                        "vtw cut layer {cut} must lie in [1, {num_layers})"
                    )));
                }
                Ok(())
            }
        }
    }

    /// Layers at which this schedule prunes, ascending.
    pub fn prune_layers(&self, num_layers: usize) -> Vec<usize> {
        (0..num_layers).filter(|&l| should_prune(l, self, num_layers)).collect()
    }
}

/// Whether `layer` is a scheduled prune point. The engine additionally
/// skips pruning when the input has a single row (decode).
pub fn should_prune(layer: usize, schedule: &PruneSchedule, num_layers: usize) -> bool {
    match schedule.kind {
        PruneKind::None => false,
        PruneKind::Pvtp => {
            schedule.stride > 0
                && layer >= schedule.start_layer
                && (layer - schedule.start_layer) % schedule.stride == 0
        }
        PruneKind::FastvLike => layer == schedule.fastv_layer,
        PruneKind::VtwLike => layer == schedule.vtw_cut(num_layers),
    }
}

/// Keep fraction in force at `layer` (after any prune at that layer).
fn keep_fraction_at(layer: usize, schedule: &PruneSchedule, num_layers: usize) -> Fraction {
    match schedule.kind {
        PruneKind::None => Fraction::ONE,
        PruneKind::Pvtp => {
            if schedule.stride == 0 || layer < schedule.start_layer {
                return Fraction::ONE;
            }
            let later_steps = ((layer - schedule.start_layer) / schedule.stride) as i64;
            Fraction::ONE
                .checked_sub(schedule.first_ratio)
                .checked_sub(schedule.step_ratio.times(later_steps))
        }
        PruneKind::FastvLike => {
            if layer >= schedule.fastv_layer {
                Fraction::ONE.checked_sub(schedule.fastv_ratio)
            } else {
                Fraction::ONE
            }
        }
        PruneKind::VtwLike => {
            if layer >= schedule.vtw_cut(num_layers) {
                Fraction::ZERO
            } else {
                Fraction::ONE
            }
        }
    }
}

/// Fraction of visual tokens that survive to the last layer.
pub fn final_keep_fraction(num_layers: usize, schedule: &PruneSchedule) -> Fraction {
    if num_layers == 0 {
        return Fraction::ONE;
    }
    keep_fraction_at(num_layers - 1, schedule, num_layers)
}

/// Closed form for pvtp's last-layer keep fraction:
/// `1 - P - floor((L - 1 - start) / S)·R`.
pub fn keep_fraction_closed_form(
    num_layers: usize,
    start_layer: usize,
    stride: usize,
    step_ratio: Fraction,
    first_ratio: Fraction,
) -> Fraction {
    let later = ((num_layers - 1 - start_layer) / stride) as i64;
    Fraction::ONE
        .checked_sub(first_ratio)
        .checked_sub(step_ratio.times(later))
}

/// Per-step ratio that lands a pvtp schedule on `target` at the last layer.
/// Truncates to the fraction grid when the division is inexact.
pub fn step_ratio_for_target(
    num_layers: usize,
    start_layer: usize,
    stride: usize,
    first_ratio: Fraction,
    target: Fraction,
) -> Result<Fraction> {
    if stride == 0 || start_layer >= num_layers {
        return Err(Error::config("stride must be >= 1 and start layer < L"));
    }
    let later = ((num_layers - 1 - start_layer) / stride) as i64;
    let budget = Fraction::ONE.checked_sub(first_ratio).checked_sub(target);
    if budget < Fraction::ZERO {
        return Err(Error::config(format!(
            "target keep fraction {target} exceeds 1 - P"
        )));
    }
    if later == 0 {
        return if budget == Fraction::ZERO {
            Ok(Fraction::ZERO)
        } else {
            Err(Error::config(format!(
                "stride {stride} leaves no later prune to reach {target}"
            )))
        };
    }
    Ok(Fraction::from_micros(budget.micros() / later))
}

/// Visual tokens retained at the input of every layer.
pub fn schedule_keep_counts(
    num_layers: usize,
    schedule: &PruneSchedule,
    n_visual: usize,
) -> Result<Vec<usize>> {
    schedule.validate(num_layers)?;
    let mut counts = Vec::with_capacity(num_layers);
    for l in 0..num_layers {
        let f = keep_fraction_at(l, schedule, num_layers);
        if f < Fraction::ZERO {
            return Err(Error::config(format!(
                "schedule keep fraction {f} at layer {l} is negative"
            )));
        }
        counts.push(f.of(n_visual));
    }
    Ok(counts)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopSelection {
    /// Indices of the kept scores, highest score first (ties: lower index).
    pub ranked: Vec<usize>,
    /// The same indices ascending.
    pub layout_order: Vec<usize>,
    /// Set when `keep_k` exceeded the number of scores and was clamped.
    pub clamped: bool,
}

/// The `keep_k` highest scores.
pub fn select_top(scores: &[f64], keep_k: usize) -> TopSelection {
    let clamped = keep_k > scores.len();
    let k = keep_k.min(scores.len());
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    let cmp = |&a: &usize, &b: &usize| scores[b].total_cmp(&scores[a]).then(a.cmp(&b));
    if k < idx.len() && k > 0 {
        idx.select_nth_unstable_by(k - 1, cmp);
    }
    idx.truncate(k);
    idx.sort_by(cmp);
    let mut layout_order = idx.clone();
    layout_order.sort_unstable();
    TopSelection {
        ranked: idx,
        layout_order,
        clamped,
    }
}

/// Drops the visual rows not in `keep` (indices into the layout's current
/// visual list, ascending) from both the layout and the hidden states.
pub fn apply_prune(
    layout: &TokenLayout,
    hidden: &Matrix,
    keep: &[usize],
) -> Result<(TokenLayout, Matrix)> {
    let n_vis = layout.n_visual();
    if keep.iter().any(|&k| k >= n_vis) || keep.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config(
            "keep set must be strictly increasing indices into the visual segment",
        ));
    }
    if hidden.rows() != layout.len() {
        return Err(Error::state(format!(
            "hidden has {} rows but layout describes {}",
            hidden.rows(),
            layout.len()
        )));
    }
    let vis_start = layout.n_system;
    let mut rows: Vec<usize> = (0..vis_start).collect();
    rows.extend(keep.iter().map(|&k| vis_start + k));
    rows.extend(vis_start + n_vis..layout.len());

    let mut pruned = layout.clone();
    pruned.visual_original_indices = keep
        .iter()
        .map(|&k| layout.visual_original_indices[k])
        .collect();
    Ok((pruned, hidden.select_rows(&rows)))
}
