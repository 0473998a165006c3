//! Multi-head self-attention encoders and the bidirectional cross-modality
//! encoder, with hooks for distraction masking.
//!
//! Cross-encoder layer for streams 1 and 2 (Pre-LayerNorm, residual):
//!
//! ```text
//! P_j  = f_j(LN_j(X_j))                       affine, per stream
//! A_12 = softmax(Q(P_1) K(P_2)ᵀ / sqrt(d/h))  per head, over stream-2 rows
//! A_21 = softmax(Q(P_2) K(P_1)ᵀ / sqrt(d/h))  per head, over stream-1 rows
//! C_1  = mask(A_12) · V_2(P_2)                V_j = P_j · W_v_j
//! C_2  = mask(A_21) · V_1(P_1)
//! X_j' = X_j + g_j(C_j)                       affine, per stream
//! ```
//!
//! `W_q` and `W_k` are shared by both streams; value projections, layer
//! norms, `f_j` and `g_j` are per stream.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::distraction::{schedule_df, DistractionFactor, DistractionMask};
use crate::error::{shape_err, Error, Result};
use crate::masking::{ForwardCtx, MaskSite, SiteKind};
use crate::params::{ParamBuilder, ParamId};
use crate::sequence::ModalitySequence;
use crate::tensor::Tensor;

/// Per-head attention weights `[heads, n_q, n_ctx]`, detached from the tape.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    weights: Tensor,
    scale: f64,
}

impl AttentionWeights {
    pub fn new(weights: Tensor, scale: f64) -> Result<Self> {
        if weights.shape().len() != 3 {
            return Err(Error::InvalidArgument {
                op: "attention weights",
                msg: format!("expected [heads, n_q, n_ctx], got {:?}", weights.shape()),
            });
        }
        Ok(Self { weights, scale })
    }

    /// `(heads, n_q, n_ctx)`
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.weights.shape();
        (s[0], s[1], s[2])
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn head_count(&self) -> usize {
        self.dims().0
    }

    /// The `[n_q, n_ctx]` matrix of one head.
    pub fn head(&self, h: usize) -> Tensor {
        let (_, q, c) = self.dims();
        Tensor::new(vec![q, c], self.weights.data()[h * q * c..(h + 1) * q * c].to_vec())
            .expect("head block")
    }
}

/// Differentiable per-head weights plus their detached snapshot.
#[derive(Debug, Clone)]
pub struct HeadWeights {
    pub heads: Vec<Var>,
    pub snapshot: AttentionWeights,
}

/// Q = X_q·W_q, K = X_k·W_k, then per-head softmax(Q_h K_hᵀ / sqrt(d/h)) over context rows.
pub fn scaled_scores(
    tape: &mut Tape,
    xq: Var,
    xk: Var,
    wq: Var,
    wk: Var,
    heads: usize,
) -> Result<HeadWeights> {
    let q = tape.matmul(xq, wq)?;
    let k = tape.matmul(xk, wk)?;
    let d = tape.shape(q)[1];
    if tape.shape(k)[1] != d {
        return Err(shape_err("scaled_scores", tape.shape(q), tape.shape(k)));
    }
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::InvalidArgument {
            op: "scaled_scores",
            msg: format!("width {d} is not divisible by {heads} heads"),
        });
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (n_q, n_ctx) = (tape.shape(q)[0], tape.shape(k)[0]);
    let mut out = Vec::with_capacity(heads);
    let mut snap = Vec::with_capacity(heads * n_q * n_ctx);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let s = tape.matmul_nt(qh, kh)?;
        let s = tape.scale(s, scale);
        let a = tape.softmax(s, 1)?;
        snap.extend_from_slice(tape.value(a).data());
        out.push(a);
    }
    let snapshot = AttentionWeights::new(Tensor::new(vec![heads, n_q, n_ctx], snap)?, scale)?;
    Ok(HeadWeights {
        heads: out,
        snapshot,
    })
}

/// Per-head weighted sum of `values` column slices, masked entries zeroed.
pub fn attend(
    tape: &mut Tape,
    weights: &HeadWeights,
    values: Var,
    mask: Option<&DistractionMask>,
) -> Result<Var> {
    let heads = weights.heads.len();
    let d = tape.shape(values)[1];
    if !d.is_multiple_of(heads) {
        return Err(Error::InvalidArgument {
            op: "attend",
            msg: format!("value width {d} is not divisible by {heads} heads"),
        });
    }
    let dh = d / heads;
    let mut parts = Vec::with_capacity(heads);
    for (h, &a) in weights.heads.iter().enumerate() {
        let a = match mask {
            Some(m) => tape.mask_mul(a, m.keep_factors(h))?,
            None => a,
        };
        let vh = tape.slice_cols(values, h * dh, dh)?;
        parts.push(tape.matmul(a, vh)?);
    }
    tape.concat_cols(&parts)
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn new<R: Rng>(b: &mut ParamBuilder<R>, prefix: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gain: b.ones(&format!("{prefix}.gain"), d)?,
            bias: b.zeros(&format!("{prefix}.bias"), d)?,
        })
    }

    pub fn apply(&self, tape: &mut Tape, x: Var, eps: f64) -> Result<Var> {
        let g = tape.param(self.gain);
        let b = tape.param(self.bias);
        tape.layer_norm(x, g, b, eps)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AffineParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl AffineParams {
    pub fn new<R: Rng>(b: &mut ParamBuilder<R>, prefix: &str, rows: usize, cols: usize) -> Result<Self> {
        Ok(Self {
            weight: b.weight(&format!("{prefix}.weight"), rows, cols)?,
            bias: b.zeros(&format!("{prefix}.bias"), cols)?,
        })
    }

    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        tape.affine(x, w, b)
    }
}

/// One post-LN transformer encoder block (MSA → add&norm → FFN → add&norm).
#[derive(Debug, Clone, Copy)]
pub struct SelfEncoderParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub norm1: LayerNormParams,
    pub ffn_in: AffineParams,
    pub ffn_out: AffineParams,
    pub norm2: LayerNormParams,
}

impl SelfEncoderParams {
    pub fn new<R: Rng>(b: &mut ParamBuilder<R>, prefix: &str, d: usize, ffn: usize) -> Result<Self> {
        Ok(Self {
            wq: b.weight(&format!("{prefix}.wq"), d, d)?,
            wk: b.weight(&format!("{prefix}.wk"), d, d)?,
            wv: b.weight(&format!("{prefix}.wv"), d, d)?,
            wo: b.weight(&format!("{prefix}.wo"), d, d)?,
            norm1: LayerNormParams::new(b, &format!("{prefix}.norm1"), d)?,
            ffn_in: AffineParams::new(b, &format!("{prefix}.ffn_in"), d, ffn)?,
            ffn_out: AffineParams::new(b, &format!("{prefix}.ffn_out"), ffn, d)?,
            norm2: LayerNormParams::new(b, &format!("{prefix}.norm2"), d)?,
        })
    }
}

/// Self-attention sublayer then ELU feed-forward sublayer, each with residual and layer norm.
/// No distraction masking happens here.
pub fn self_attention_encoder(
    tape: &mut Tape,
    x: &ModalitySequence,
    p: &SelfEncoderParams,
    heads: usize,
    eps: f64,
) -> Result<ModalitySequence> {
    let d = tape.params().tensor(p.wq).shape()[0];
    if x.dim(tape) != d {
        return Err(shape_err("self_attention_encoder", tape.shape(x.tokens), &[d, d]));
    }
    let xv = x.tokens;
    let wq = tape.param(p.wq);
    let wk = tape.param(p.wk);
    let wv = tape.param(p.wv);
    let wo = tape.param(p.wo);
    let hw = scaled_scores(tape, xv, xv, wq, wk, heads)?;
    let v = tape.matmul(xv, wv)?;
    let att = attend(tape, &hw, v, None)?;
    let att = tape.matmul(att, wo)?;
    let h1 = tape.add(xv, att)?;
    let h1 = p.norm1.apply(tape, h1, eps)?;
    let f = p.ffn_in.apply(tape, h1)?;
    let f = tape.elu(f);
    let f = p.ffn_out.apply(tape, f)?;
    let h2 = tape.add(h1, f)?;
    let out = p.norm2.apply(tape, h2, eps)?;
    Ok(x.with_tokens(out))
}

#[derive(Debug, Clone, Copy)]
pub struct CrossStreamParams {
    pub norm: LayerNormParams,
    /// Projection into the cross-attention space.
    pub project: AffineParams,
    /// Back-projection to the stream's width.
    pub back: AffineParams,
    pub wv: ParamId,
}

impl CrossStreamParams {
    pub fn new<R: Rng>(b: &mut ParamBuilder<R>, prefix: &str, d: usize) -> Result<Self> {
        Ok(Self {
            norm: LayerNormParams::new(b, &format!("{prefix}.norm"), d)?,
            project: AffineParams::new(b, &format!("{prefix}.f"), d, d)?,
            back: AffineParams::new(b, &format!("{prefix}.g"), d, d)?,
            wv: b.weight(&format!("{prefix}.wv"), d, d)?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CrossEncoderParams {
    pub streams: [CrossStreamParams; 2],
    pub wq: ParamId,
    pub wk: ParamId,
}

impl CrossEncoderParams {
    pub fn new<R: Rng>(b: &mut ParamBuilder<R>, prefix: &str, d: usize) -> Result<Self> {
        Ok(Self {
            streams: [
                CrossStreamParams::new(b, &format!("{prefix}.s1"), d)?,
                CrossStreamParams::new(b, &format!("{prefix}.s2"), d)?,
            ],
            wq: b.weight(&format!("{prefix}.wq"), d, d)?,
            wk: b.weight(&format!("{prefix}.wk"), d, d)?,
        })
    }

    /// Same parameters with the per-stream halves exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            streams: [self.streams[1], self.streams[0]],
            ..*self
        }
    }
}

/// Bidirectional masked cross-attention with Pre-LN, projections and residuals.
#[allow(clippy::too_many_arguments)]
pub fn cross_encoder_layer(
    tape: &mut Tape,
    ctx: &mut ForwardCtx,
    x1: &ModalitySequence,
    x2: &ModalitySequence,
    p: &CrossEncoderParams,
    heads: usize,
    d_f: DistractionFactor,
    eps: f64,
    site: (usize, usize),
) -> Result<(ModalitySequence, ModalitySequence)> {
    if x1.dim(tape) != x2.dim(tape) {
        return Err(shape_err("cross_encoder_layer", tape.shape(x1.tokens), tape.shape(x2.tokens)));
    }
    let [s1, s2] = &p.streams;
    let n1 = s1.norm.apply(tape, x1.tokens, eps)?;
    let n2 = s2.norm.apply(tape, x2.tokens, eps)?;
    let p1 = s1.project.apply(tape, n1)?;
    let p2 = s2.project.apply(tape, n2)?;

    let wq = tape.param(p.wq);
    let wk = tape.param(p.wk);
    let a12 = scaled_scores(tape, p1, p2, wq, wk, heads)?;
    let a21 = scaled_scores(tape, p2, p1, wq, wk, heads)?;
    let wv1 = tape.param(s1.wv);
    let wv2 = tape.param(s2.wv);
    let v1 = tape.matmul(p1, wv1)?;
    let v2 = tape.matmul(p2, wv2)?;

    let (stage, layer) = site;
    let fwd = MaskSite {
        stage,
        layer,
        kind: SiteKind::CrossForward,
    };
    let bwd = MaskSite {
        kind: SiteKind::CrossBackward,
        ..fwd
    };
    let m12 = ctx.resolve(fwd, &a12.snapshot, d_f)?;
    let m21 = ctx.resolve(bwd, &a21.snapshot, d_f)?;
    let c1 = attend(tape, &a12, v2, m12.as_ref())?;
    let c2 = attend(tape, &a21, v1, m21.as_ref())?;

    let g1 = s1.back.apply(tape, c1)?;
    let g2 = s2.back.apply(tape, c2)?;
    let o1 = tape.add(x1.tokens, g1)?;
    let o2 = tape.add(x2.tokens, g2)?;
    Ok((x1.with_tokens(o1), x2.with_tokens(o2)))
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderLayerParams {
    pub self_encoders: [SelfEncoderParams; 2],
    pub cross: CrossEncoderParams,
}

/// K layers of (self-encoder per stream → cross-encoder).
#[derive(Debug, Clone)]
pub struct EncoderStack {
    pub layers: Vec<EncoderLayerParams>,
    pub d: usize,
    pub heads: usize,
    pub eps: f64,
}

impl EncoderStack {
    pub fn new<R: Rng>(
        b: &mut ParamBuilder<R>,
        prefix: &str,
        layers: usize,
        d: usize,
        heads: usize,
        ffn: usize,
        eps: f64,
    ) -> Result<Self> {
        if layers == 0 {
            return Err(Error::Config("encoder stack needs at least one layer".into()));
        }
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Config(format!("d = {d} is not divisible by {heads} heads")));
        }
        let layers = (0..layers)
            .map(|k| {
                Ok(EncoderLayerParams {
                    self_encoders: [
                        SelfEncoderParams::new(b, &format!("{prefix}.l{k}.sa1"), d, ffn)?,
                        SelfEncoderParams::new(b, &format!("{prefix}.l{k}.sa2"), d, ffn)?,
                    ],
                    cross: CrossEncoderParams::new(b, &format!("{prefix}.l{k}.cross"), d)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layers,
            d,
            heads,
            eps,
        })
    }
}

/// Factors for layers 1..=k.
pub fn layer_factors(
    initial: DistractionFactor,
    delta: f64,
    layers: usize,
    allow_above_one: bool,
) -> Result<Vec<DistractionFactor>> {
    (1..=layers)
        .map(|k| schedule_df(initial, delta, k, allow_above_one))
        .collect()
}

#[allow(clippy::too_many_arguments)]
pub fn run_encoder_stack(
    tape: &mut Tape,
    ctx: &mut ForwardCtx,
    x1: &ModalitySequence,
    x2: &ModalitySequence,
    stack: &EncoderStack,
    initial: DistractionFactor,
    delta: f64,
    allow_above_one: bool,
    stage: usize,
) -> Result<(ModalitySequence, ModalitySequence)> {
    let factors = layer_factors(initial, delta, stack.layers.len(), allow_above_one)?;
    let (mut a, mut b) = (*x1, *x2);
    for (k, (layer, d_f)) in stack.layers.iter().zip(factors).enumerate() {
        let s1 = self_attention_encoder(tape, &a, &layer.self_encoders[0], stack.heads, stack.eps)?;
        let s2 = self_attention_encoder(tape, &b, &layer.self_encoders[1], stack.heads, stack.eps)?;
        (a, b) = cross_encoder_layer(
            tape,
            ctx,
            &s1,
            &s2,
            &layer.cross,
            stack.heads,
            d_f,
            stack.eps,
            (stage, k + 1),
        )?;
    }
    Ok((a, b))
}
