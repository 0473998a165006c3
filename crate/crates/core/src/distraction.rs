//! Attention-guided distraction identification and removal.
//!
//! For each head `h` and query row `i` the largest attention weight is the
//! row's relevance score `rho[h][i]`. The threshold is `tau = rho * d_f`
//! and every weight strictly below `tau` is a distractor: it is zeroed
//! before the weighted average over context vectors. Surviving weights are
//! left untouched (no renormalization), so masked rows sum to less than 1.
//!
//! Masks are computed independently per head, so one head can drop a
//! context vector's subspace while another head keeps it.

use crate::attention::AttentionWeights;
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Fraction of the relevance score used as the masking threshold.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct DistractionFactor(f64);

impl DistractionFactor {
    pub const ZERO: DistractionFactor = DistractionFactor(0.0);

    /// A factor in `[0, 1]`.
    pub fn new(value: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::InvalidFactor(value));
        }
        Ok(Self(value))
    }

    /// A factor that may exceed 1 (experimentation only: rows can be fully masked).
    pub fn unbounded(value: f64) -> Result<Self> {
        if !(value >= 0.0 && value.is_finite()) {
            return Err(Error::InvalidFactor(value));
        }
        Ok(Self(value))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistractionMask {
    /// `true` marks a distractor, laid out `[heads, n_q, n_ctx]`.
    mask: Vec<bool>,
    shape: [usize; 3],
    /// `[heads, n_q]`
    threshold: Tensor,
    /// `[heads, n_q]`
    rho: Tensor,
    d_f: DistractionFactor,
}

impl DistractionMask {
    /// Runs the full identification chain on one set of weights.
    pub fn identify(weights: &AttentionWeights, d_f: DistractionFactor) -> Result<Self> {
        let rho = relevance_scores(weights)?;
        let tau = threshold(&rho, d_f)?;
        let mut mask = distraction_mask(weights, &tau)?;
        mask.rho = rho;
        mask.d_f = d_f;
        Ok(mask)
    }

    /// A mask that removes nothing.
    pub fn empty(heads: usize, n_q: usize, n_ctx: usize) -> Self {
        Self {
            mask: vec![false; heads * n_q * n_ctx],
            shape: [heads, n_q, n_ctx],
            threshold: Tensor::zeros(&[heads, n_q]),
            rho: Tensor::zeros(&[heads, n_q]),
            d_f: DistractionFactor::ZERO,
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn is_masked(&self, head: usize, q: usize, ctx: usize) -> bool {
        let [_, n_q, n_ctx] = self.shape;
        self.mask[(head * n_q + q) * n_ctx + ctx]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.mask
    }

    /// The `[n_q, n_ctx]` block of one head.
    pub fn head(&self, head: usize) -> &[bool] {
        let [_, n_q, n_ctx] = self.shape;
        &self.mask[head * n_q * n_ctx..(head + 1) * n_q * n_ctx]
    }

    /// `1 - mu` for one head, as multiplicative weights.
    pub fn keep_factors(&self, head: usize) -> Vec<f64> {
        self.head(head)
            .iter()
            .map(|&m| if m { 0.0 } else { 1.0 })
            .collect()
    }

    pub fn threshold(&self) -> &Tensor {
        &self.threshold
    }

    pub fn rho(&self) -> &Tensor {
        &self.rho
    }

    pub fn factor(&self) -> DistractionFactor {
        self.d_f
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Fraction of masked entries.
    pub fn density(&self) -> f64 {
        self.masked_count() as f64 / self.mask.len() as f64
    }
}

/// Row maxima per head: `[heads, n_q]`.
pub fn relevance_scores(a: &AttentionWeights) -> Result<Tensor> {
    let (heads, n_q, n_ctx) = a.dims();
    if n_ctx == 0 {
        return Err(Error::EmptyContext);
    }
    let w = a.weights().data();
    let rho = w
        .chunks(n_ctx)
        .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    Tensor::new(vec![heads, n_q], rho)
}

pub fn threshold(rho: &Tensor, d_f: DistractionFactor) -> Result<Tensor> {
    let f = d_f.value();
    Ok(rho.map(|r| r * f))
}

/// Strict comparison: a weight equal to its threshold survives.
pub fn distraction_mask(a: &AttentionWeights, tau: &Tensor) -> Result<DistractionMask> {
    let (heads, n_q, n_ctx) = a.dims();
    if tau.shape() != [heads, n_q] {
        return Err(shape_err("distraction_mask", a.weights().shape(), tau.shape()));
    }
    let w = a.weights().data();
    let mask = w
        .chunks(n_ctx)
        .zip(tau.data())
        .flat_map(|(row, &t)| row.iter().map(move |&v| v < t))
        .collect();
    Ok(DistractionMask {
        mask,
        shape: [heads, n_q, n_ctx],
        threshold: tau.clone(),
        rho: relevance_scores(a)?,
        d_f: DistractionFactor::ZERO,
    })
}

/// Zeroes masked weights; everything else is copied unchanged.
pub fn apply_mask(a: &AttentionWeights, mask: &DistractionMask) -> Result<AttentionWeights> {
    let (heads, n_q, n_ctx) = a.dims();
    if mask.shape != [heads, n_q, n_ctx] {
        return Err(shape_err("apply_mask", a.weights().shape(), &mask.shape));
    }
    let data = a
        .weights()
        .data()
        .iter()
        .zip(&mask.mask)
        .map(|(&v, &m)| if m { 0.0 } else { v })
        .collect();
    AttentionWeights::new(Tensor::new(vec![heads, n_q, n_ctx], data)?, a.scale())
}

/// Factor used at encoder layer `layer` (1-based): `d_f0 + (layer - 1) * delta`,
/// clamped to 1 unless `allow_above_one`.
///
/// The sum is snapped to a 1e-12 grid so decimal settings land on the
/// nearest double (0.3 + 2 * 0.3 gives 0.9, not 0.8999999999999999).
pub fn schedule_df(
    initial: DistractionFactor,
    delta: f64,
    layer: usize,
    allow_above_one: bool,
) -> Result<DistractionFactor> {
    if delta < 0.0 || !delta.is_finite() {
        return Err(Error::NegativeDelta(delta));
    }
    if layer == 0 {
        return Err(Error::InvalidArgument {
            op: "schedule_df",
            msg: "layer index is 1-based".into(),
        });
    }
    let raw = initial.value() + (layer - 1) as f64 * delta;
    let raw = (raw * 1e12).round() / 1e12;
    if allow_above_one {
        DistractionFactor::unbounded(raw)
    } else {
        DistractionFactor::new(raw.min(1.0))
    }
}
