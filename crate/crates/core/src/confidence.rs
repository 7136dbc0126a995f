//! Confidence from token log-probabilities and its per-backend calibration.
//!
//! The raw score is the mean token log-probability (always `<= 0`). The
//! adjusted score maps it into `[0, 1]`: a per-backend percentile rescaling
//! over a ring buffer of recent raw scores, blended with the geometric-mean
//! token probability `exp(x)` while the buffer is still warming up.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::state::ModelId;

pub const DEFAULT_WINDOW: usize = 512;
pub const WARMUP_OBSERVATIONS: u64 = 32;
pub const LOW_PERCENTILE: f64 = 5.0;
pub const HIGH_PERCENTILE: f64 = 95.0;
const DEGENERATE_SPREAD: f64 = 1e-9;

/// Per-token log-probabilities of one generation.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenLogProbs(Vec<f64>);

impl TokenLogProbs {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(bad) = values.iter().find(|v| !v.is_finite() || **v > 0.0) {
            return Err(Error::BackendConfig(format!(
                "token logprob {bad} is not a finite value <= 0"
            )));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfidenceScore {
    pub base: f64,
    pub adjusted: f64,
}

/// Mean token log-probability.
///
/// Averaged as offsets from the first token, so a constant sequence returns
/// that constant exactly.
pub fn conf_base(lp: &TokenLogProbs) -> Result<f64> {
    let Some(&first) = lp.0.first() else {
        return Err(Error::EmptyGeneration);
    };
    let offset = lp.0.iter().map(|x| x - first).sum::<f64>() / lp.0.len() as f64;
    let mean = first + offset;
    Ok(mean.min(0.0))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelStats {
    pub buffer: VecDeque<f64>,
    pub count: u64,
}

/// Ring buffers of recent raw confidences, one per backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub window: usize,
    pub models: BTreeMap<ModelId, ModelStats>,
}

impl Default for RunningStats {
    fn default() -> Self {
        Self::new(DEFAULT_WINDOW)
    }
}

impl RunningStats {
    pub fn new(window: usize) -> Self {
        Self {
            window: window.max(1),
            models: BTreeMap::new(),
        }
    }

    pub fn count(&self, model: &ModelId) -> u64 {
        self.models.get(model).map_or(0, |s| s.count)
    }

    pub fn buffer(&self, model: &ModelId) -> Option<&VecDeque<f64>> {
        self.models.get(model).map(|s| &s.buffer)
    }

    /// Records a raw confidence, evicting the oldest past the window.
    pub fn observe(&mut self, model: &ModelId, x: f64) {
        let x = clamp_raw(x);
        let window = self.window;
        let entry = self.models.entry(model.clone()).or_default();
        if entry.buffer.len() == window {
            entry.buffer.pop_front();
        }
        entry.buffer.push_back(x);
        entry.count += 1;
    }

    /// 5th and 95th percentiles of the model's buffer, if non-empty.
    pub fn percentile_band(&self, model: &ModelId) -> Option<(f64, f64)> {
        let buf = self.buffer(model)?;
        if buf.is_empty() {
            return None;
        }
        let mut sorted: Vec<f64> = buf.iter().copied().collect();
        sorted.sort_by(f64::total_cmp);
        Some((
            percentile(&sorted, LOW_PERCENTILE),
            percentile(&sorted, HIGH_PERCENTILE),
        ))
    }
}

/// Percentile of sorted data with linear interpolation between order statistics.
pub fn percentile(sorted: &[f64], pct: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let rank = pct / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

fn clamp_raw(x: f64) -> f64 {
    if x > 0.0 {
        tracing::warn!(x, "positive raw confidence clamped to 0");
        0.0
    } else {
        x
    }
}

/// Calibrated confidence in `[0, 1]` for raw confidence `x` on `model`.
pub fn conf_adj(x: f64, model: &ModelId, stats: &RunningStats) -> f64 {
    let x = clamp_raw(x);
    let fallback = x.exp();
    let n = stats.count(model);
    let Some((p_lo, p_hi)) = stats.percentile_band(model) else {
        return fallback;
    };
    let spread = p_hi - p_lo;
    if spread < DEGENERATE_SPREAD {
        return fallback;
    }
    let w = (n as f64 / WARMUP_OBSERVATIONS as f64).min(1.0);
    let scaled = ((x - p_lo) / spread).clamp(0.0, 1.0);
    ((1.0 - w) * fallback + w * scaled).clamp(0.0, 1.0)
}
