//! Per-forward-pass control over distraction masking.
//!
//! Every masking site (both directions of each cross-encoder layer and the
//! alignment attention of each fusion block) asks the [`ForwardCtx`] for a
//! mask. The context decides whether to compute a fresh one, replay a mask
//! recorded on an earlier pass, or skip masking entirely, and it keeps
//! density counters and optional traces as a side effect.

use serde::{Deserialize, Serialize};

use crate::attention::AttentionWeights;
use crate::distraction::{apply_mask, DistractionFactor, DistractionMask};
use crate::error::{Error, Result};
use crate::trace::{HeadTrace, TraceRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteKind {
    /// Stream 1 queries attending over stream 2.
    CrossForward,
    /// Stream 2 queries attending over stream 1.
    CrossBackward,
    Fusion,
}

impl SiteKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SiteKind::CrossForward => "cross_1to2",
            SiteKind::CrossBackward => "cross_2to1",
            SiteKind::Fusion => "fusion",
        }
    }
}

/// Where a mask is applied. `layer` is 1-based for encoder layers and 0 for fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskSite {
    pub stage: usize,
    pub layer: usize,
    pub kind: SiteKind,
}

#[derive(Debug, Clone)]
pub enum MaskMode {
    /// Identify distractors from the current weights.
    Live,
    /// Skip the distraction module entirely.
    Disabled,
    /// Reuse masks recorded by an earlier live pass, in site order.
    Replay(Vec<DistractionMask>),
}

/// Masked/total entry counts, per encoder layer and for fusion.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MaskStats {
    pub layers: Vec<(u64, u64)>,
    pub fusion: (u64, u64),
}

impl MaskStats {
    fn add(&mut self, site: MaskSite, mask: &DistractionMask) {
        let masked = mask.masked_count() as u64;
        let total = mask.as_slice().len() as u64;
        let slot = if site.kind == SiteKind::Fusion {
            &mut self.fusion
        } else {
            if self.layers.len() < site.layer {
                self.layers.resize(site.layer, (0, 0));
            }
            &mut self.layers[site.layer - 1]
        };
        slot.0 += masked;
        slot.1 += total;
    }

    pub fn merge(&mut self, other: &MaskStats) {
        if self.layers.len() < other.layers.len() {
            self.layers.resize(other.layers.len(), (0, 0));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.0 += b.0;
            a.1 += b.1;
        }
        self.fusion.0 += other.fusion.0;
        self.fusion.1 += other.fusion.1;
    }

    pub fn layer_density(&self) -> Vec<f64> {
        self.layers.iter().map(|&(m, t)| ratio(m, t)).collect()
    }

    pub fn fusion_density(&self) -> f64 {
        ratio(self.fusion.0, self.fusion.1)
    }
}

fn ratio(m: u64, t: u64) -> f64 {
    if t == 0 {
        0.0
    } else {
        m as f64 / t as f64
    }
}

#[derive(Debug)]
pub struct ForwardCtx {
    mode: MaskMode,
    cursor: usize,
    record: bool,
    recorded: Vec<DistractionMask>,
    trace: Option<Vec<TraceRecord>>,
    stats: MaskStats,
}

impl ForwardCtx {
    pub fn new(mode: MaskMode) -> Self {
        Self {
            mode,
            cursor: 0,
            record: false,
            recorded: Vec::new(),
            trace: None,
            stats: MaskStats::default(),
        }
    }

    pub fn live() -> Self {
        Self::new(MaskMode::Live)
    }

    pub fn disabled() -> Self {
        Self::new(MaskMode::Disabled)
    }

    pub fn replay(masks: Vec<DistractionMask>) -> Self {
        Self::new(MaskMode::Replay(masks))
    }

    /// Keep every mask produced so it can be replayed later.
    pub fn recording(mut self) -> Self {
        self.record = true;
        self
    }

    /// Collect per-head trace records (weights, thresholds, masks).
    pub fn tracing(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    pub fn stats(&self) -> &MaskStats {
        &self.stats
    }

    pub fn take_recorded(&mut self) -> Vec<DistractionMask> {
        std::mem::take(&mut self.recorded)
    }

    pub fn take_trace(&mut self) -> Vec<TraceRecord> {
        self.trace.take().unwrap_or_default()
    }

    /// The mask to apply at `site`, or `None` when masking is disabled.
    pub fn resolve(
        &mut self,
        site: MaskSite,
        weights: &AttentionWeights,
        d_f: DistractionFactor,
    ) -> Result<Option<DistractionMask>> {
        let mask = match &self.mode {
            MaskMode::Disabled => return Ok(None),
            MaskMode::Live => DistractionMask::identify(weights, d_f)?,
            MaskMode::Replay(masks) => {
                let m = masks.get(self.cursor).cloned().ok_or_else(|| Error::InvalidArgument {
                    op: "mask replay",
                    msg: format!("no recorded mask for site #{}", self.cursor),
                })?;
                self.cursor += 1;
                let (h, q, c) = weights.dims();
                if m.shape() != [h, q, c] {
                    return Err(Error::InvalidArgument {
                        op: "mask replay",
                        msg: format!("recorded mask {:?} does not fit weights {:?}", m.shape(), [h, q, c]),
                    });
                }
                m
            }
        };
        self.stats.add(site, &mask);
        if let Some(trace) = &mut self.trace {
            trace_site(trace, site, weights, &mask)?;
        }
        if self.record {
            self.recorded.push(mask.clone());
        }
        Ok(Some(mask))
    }
}

fn trace_site(
    out: &mut Vec<TraceRecord>,
    site: MaskSite,
    weights: &AttentionWeights,
    mask: &DistractionMask,
) -> Result<()> {
    let masked = apply_mask(weights, mask)?;
    let (heads, n_q, n_ctx) = weights.dims();
    let rows = |data: &[f64], h: usize| -> Vec<Vec<f64>> {
        data[h * n_q * n_ctx..(h + 1) * n_q * n_ctx]
            .chunks(n_ctx)
            .map(|r| r.to_vec())
            .collect()
    };
    for h in 0..heads {
        let head_mask: Vec<Vec<bool>> = mask.head(h).chunks(n_ctx).map(|r| r.to_vec()).collect();
        let masked_count = mask.head(h).iter().filter(|&&m| m).count();
        out.push(TraceRecord::Head(HeadTrace {
            stage: site.stage,
            layer: site.layer,
            site: site.kind,
            head: h,
            d_f: mask.factor().value(),
            rho: mask.rho().data()[h * n_q..(h + 1) * n_q].to_vec(),
            tau: mask.threshold().data()[h * n_q..(h + 1) * n_q].to_vec(),
            mask: head_mask,
            pre: rows(weights.weights().data(), h),
            post: rows(masked.weights().data(), h),
            density: masked_count as f64 / (n_q * n_ctx) as f64,
        }));
    }
    Ok(())
}
