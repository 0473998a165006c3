//! Cross-aligned fusion of an anchor sequence with a tailing sequence.
//!
//! The tail `X_t` (m rows) is carried into the anchor's row space through a
//! masked attention matrix built from anchor queries and tail keys; each
//! aligned row is a per-head combination of tail rows. The aligned tail is
//! concatenated with the anchor along features and fused by one affine map,
//! so the output always has the anchor's row count.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{attend, scaled_scores, AffineParams};
use crate::autodiff::{Tape, Var};
use crate::distraction::DistractionFactor;
use crate::error::{shape_err, Error, Result};
use crate::masking::{ForwardCtx, MaskSite, SiteKind};
use crate::params::{ParamBuilder, ParamId};

/// Direction of space projection at one fusion stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    /// `->`: the earlier sequence is projected into the new modality's space.
    IntoNew,
    /// `<-`: the new modality is projected into the earlier sequence's space.
    IntoPrevious,
}

/// One direction per fusion stage: appearance/motion, question, answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorAssignment {
    pub stages: [Direction; 3],
}

impl AnchorAssignment {
    /// Appearance→Motion←Question→Answer.
    pub const DEFAULT: AnchorAssignment = AnchorAssignment {
        stages: [Direction::IntoNew, Direction::IntoPrevious, Direction::IntoNew],
    };

    /// The three direction variants of the anchor ablation table.
    pub fn ablation_variants() -> [AnchorAssignment; 3] {
        use Direction::*;
        [
            AnchorAssignment {
                stages: [IntoNew, IntoNew, IntoNew],
            },
            AnchorAssignment {
                stages: [IntoNew, IntoNew, IntoPrevious],
            },
            AnchorAssignment {
                stages: [IntoNew, IntoPrevious, IntoPrevious],
            },
        ]
    }
}

impl Default for AnchorAssignment {
    fn default() -> Self {
        Self::DEFAULT
    }
}

impl fmt::Display for AnchorAssignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let arrow = |d: Direction| match d {
            Direction::IntoNew => "->",
            Direction::IntoPrevious => "<-",
        };
        write!(
            f,
            "A{}M{}Q{}A",
            arrow(self.stages[0]),
            arrow(self.stages[1]),
            arrow(self.stages[2])
        )
    }
}

impl FromStr for AnchorAssignment {
    type Err = Error;

    /// Parses the compact form `A->M<-Q->A`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("anchor directions `{s}` must look like A->M<-Q->A"));
        let compact: String = s.chars().filter(|c| !c.is_whitespace()).collect();
        let rest = compact.strip_prefix('A').ok_or_else(bad)?;
        let mut stages = [Direction::IntoNew; 3];
        let mut rest = rest;
        for (i, letter) in ['M', 'Q', 'A'].into_iter().enumerate() {
            let (dir, tail) = if let Some(t) = rest.strip_prefix("->") {
                (Direction::IntoNew, t)
            } else if let Some(t) = rest.strip_prefix("<-") {
                (Direction::IntoPrevious, t)
            } else {
                return Err(bad());
            };
            stages[i] = dir;
            rest = tail.strip_prefix(letter).ok_or_else(bad)?;
        }
        if !rest.is_empty() {
            return Err(bad());
        }
        Ok(Self { stages })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FusionParams {
    /// Anchor query projection.
    pub wq: ParamId,
    /// Tail key projection.
    pub wk: ParamId,
    /// `[2d, d]` map applied to the concatenation.
    pub fuse: AffineParams,
}

impl FusionParams {
    pub fn new<R: Rng>(b: &mut ParamBuilder<R>, prefix: &str, d: usize) -> Result<Self> {
        Ok(Self {
            wq: b.weight(&format!("{prefix}.wq"), d, d)?,
            wk: b.weight(&format!("{prefix}.wk"), d, d)?,
            fuse: AffineParams::new(b, &format!("{prefix}.fuse"), 2 * d, d)?,
        })
    }
}

/// Aligns `tail` (`[m, d]`) to the anchor's rows: `[n, d]`.
#[allow(clippy::too_many_arguments)]
pub fn vector_space_transform(
    tape: &mut Tape,
    ctx: &mut ForwardCtx,
    anchor: Var,
    tail: Var,
    p: &FusionParams,
    heads: usize,
    d_f: DistractionFactor,
    stage: usize,
) -> Result<Var> {
    if tape.shape(anchor)[1] != tape.shape(tail)[1] {
        return Err(shape_err("vector_space_transform", tape.shape(anchor), tape.shape(tail)));
    }
    let wq = tape.param(p.wq);
    let wk = tape.param(p.wk);
    let hw = scaled_scores(tape, anchor, tail, wq, wk, heads)?;
    let site = MaskSite {
        stage,
        layer: 0,
        kind: SiteKind::Fusion,
    };
    let mask = ctx.resolve(site, &hw.snapshot, d_f)?;
    attend(tape, &hw, tail, mask.as_ref())
}

/// `[X_a || X_t_align] · W_f + b`.
pub fn cross_aligned_fuse(tape: &mut Tape, anchor: Var, aligned: Var, p: &FusionParams) -> Result<Var> {
    if tape.shape(anchor)[0] != tape.shape(aligned)[0] {
        return Err(Error::IrreconcilableRows {
            anchor: tape.shape(anchor)[0],
            tail: tape.shape(aligned)[0],
        });
    }
    let cat = tape.concat_cols(&[anchor, aligned])?;
    p.fuse.apply(tape, cat)
}

/// Brings `tail` to `n` rows without attention: equal counts pass through,
/// a multiple of `n` is averaged in consecutive groups, a divisor of `n`
/// has each row repeated.
pub fn reconcile_rows(tape: &mut Tape, tail: Var, n: usize) -> Result<Var> {
    let m = tape.shape(tail)[0];
    if m == n {
        return Ok(tail);
    }
    if m.is_multiple_of(n) {
        let group = m / n;
        let parts = (0..n)
            .map(|g| {
                let block = tape.slice_rows(tail, g * group, group)?;
                tape.mean_rows(block)
            })
            .collect::<Result<Vec<_>>>()?;
        return tape.concat_rows(&parts);
    }
    if n.is_multiple_of(m) {
        let rep = n / m;
        let mut parts = Vec::with_capacity(n);
        for r in 0..m {
            let row = tape.slice_rows(tail, r, 1)?;
            parts.extend(std::iter::repeat_n(row, rep));
        }
        return tape.concat_rows(&parts);
    }
    Err(Error::IrreconcilableRows { anchor: n, tail: m })
}

/// Concatenation + affine projection with no alignment and no masking.
pub fn simple_concat_fuse(tape: &mut Tape, anchor: Var, tail: Var, p: &FusionParams) -> Result<Var> {
    let n = tape.shape(anchor)[0];
    let tail = reconcile_rows(tape, tail, n)?;
    let cat = tape.concat_cols(&[anchor, tail])?;
    p.fuse.apply(tape, cat)
}
