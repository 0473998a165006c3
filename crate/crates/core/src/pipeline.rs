//! The three-stage hierarchy: appearance with motion, then the question,
//! then each answer candidate, followed by the answer decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{run_encoder_stack, AffineParams, EncoderStack};
use crate::autodiff::{Tape, Var};
use crate::config::{DraxConfig, LossMode};
use crate::error::{Error, Result};
use crate::fusion::{
    cross_aligned_fuse, reconcile_rows, vector_space_transform, Direction, FusionParams,
};
use crate::masking::{ForwardCtx, MaskStats};
use crate::params::{Gradients, ParamBuilder, ParamId, ParamStore};
use crate::sequence::{Modality, ModalitySequence, PosKind};
use crate::tensor::Tensor;

/// Number of answer candidates per question.
pub const CANDIDATES: usize = 4;

/// Raw features of one question.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    /// Frame features `[N, d_app]`.
    pub appearance: Tensor,
    /// Clip features `[C, d_mot]`.
    pub motion: Tensor,
    /// Word vectors `[L_q, d_q]`.
    pub question: Tensor,
    /// Word vectors `[L_a, d_a]`, one per candidate.
    pub answers: [Tensor; CANDIDATES],
    pub label: usize,
}

impl FeatureBundle {
    pub fn validate(&self, config: &DraxConfig) -> Result<()> {
        let check = |t: &Tensor, width: usize, what: &str| -> Result<()> {
            let (_, c) = t.dims2()?;
            if c != width {
                return Err(Error::InvalidArgument {
                    op: "feature bundle",
                    msg: format!("{what} width {c}, model expects {width}"),
                });
            }
            Ok(())
        };
        check(&self.appearance, config.dim_appearance, "appearance")?;
        check(&self.motion, config.dim_motion, "motion")?;
        check(&self.question, config.dim_question, "question")?;
        for a in &self.answers {
            check(a, config.dim_answer, "answer")?;
        }
        if self.label >= CANDIDATES {
            return Err(Error::InvalidLabel(self.label));
        }
        Ok(())
    }

    /// Same bundle with the candidates reordered: new slot `i` holds old candidate `perm[i]`.
    pub fn permuted(&self, perm: [usize; CANDIDATES]) -> Self {
        let answers = perm.map(|i| self.answers[i].clone());
        let label = perm.iter().position(|&i| i == self.label).unwrap_or(self.label);
        Self {
            answers,
            label,
            ..self.clone()
        }
    }
}

/// Per-stage CLS vectors, learned position tables, encoder stack and fusion block.
#[derive(Debug, Clone)]
pub struct StageParams {
    pub cls: [ParamId; 2],
    /// `[max_positions, d]` for streams with learned positions.
    pub pos: [Option<ParamId>; 2],
    pub encoder: EncoderStack,
    pub fusion: FusionParams,
    pub modalities: [Modality; 2],
}

impl StageParams {
    fn new<R: rand::Rng>(
        b: &mut ParamBuilder<R>,
        prefix: &str,
        config: &DraxConfig,
        modalities: [Modality; 2],
    ) -> Result<Self> {
        let d = config.d;
        let cls = [
            b.weight(&format!("{prefix}.cls1"), 1, d)?,
            b.weight(&format!("{prefix}.cls2"), 1, d)?,
        ];
        let mut pos = [None, None];
        for (j, m) in modalities.iter().enumerate() {
            if m.pos_kind() == PosKind::Learned {
                pos[j] = Some(b.weight(&format!("{prefix}.pos{}", j + 1), config.max_positions, d)?);
            }
        }
        let encoder = EncoderStack::new(
            b,
            &format!("{prefix}.enc"),
            config.layers,
            d,
            config.heads,
            config.ffn_multiple * d,
            config.ln_eps,
        )?;
        let fusion = FusionParams::new(b, &format!("{prefix}.fusion"), d)?;
        Ok(Self {
            cls,
            pos,
            encoder,
            fusion,
            modalities,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderParams {
    pub hidden: AffineParams,
    pub hidden2: AffineParams,
    pub out: AffineParams,
}

#[derive(Debug, Clone)]
pub struct ModelParams {
    /// Raw-to-d input maps: appearance, motion, question, answer.
    pub embed: [AffineParams; 4],
    pub stages: [StageParams; 3],
    pub decoder: DecoderParams,
}

/// Parameters plus the configuration they were built from.
#[derive(Debug, Clone)]
pub struct DraxModel {
    pub config: DraxConfig,
    pub store: ParamStore,
    pub params: ModelParams,
}

/// Decoder output for one bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct Scores {
    pub logits: [f64; CANDIDATES],
    pub probs: [f64; CANDIDATES],
}

impl Scores {
    pub fn predict(&self) -> usize {
        predict(&self.probs)
    }
}

/// Result of one forward (and optionally backward) pass.
#[derive(Debug, Clone)]
pub struct SampleOutcome {
    pub scores: Scores,
    pub loss: f64,
    pub stats: MaskStats,
}

impl DraxModel {
    /// Builds every parameter in a fixed order from `config.seed`.
    pub fn new(config: DraxConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut b = ParamBuilder::new(&mut store, &mut rng);
        let d = config.d;
        let embed = [
            AffineParams::new(&mut b, "embed.appearance", config.dim_appearance, d)?,
            AffineParams::new(&mut b, "embed.motion", config.dim_motion, d)?,
            AffineParams::new(&mut b, "embed.question", config.dim_question, d)?,
            AffineParams::new(&mut b, "embed.answer", config.dim_answer, d)?,
        ];
        let stages = [
            StageParams::new(&mut b, "stage1", &config, [Modality::Appearance, Modality::Motion])?,
            StageParams::new(&mut b, "stage2", &config, [Modality::Fused, Modality::Question])?,
            StageParams::new(&mut b, "stage3", &config, [Modality::Fused, Modality::Answer])?,
        ];
        let decoder = DecoderParams {
            hidden: AffineParams::new(&mut b, "decoder.a", d, d)?,
            hidden2: AffineParams::new(&mut b, "decoder.y", d, d)?,
            out: AffineParams::new(&mut b, "decoder.out", d, 1)?,
        };
        Ok(Self {
            config,
            store,
            params: ModelParams {
                embed,
                stages,
                decoder,
            },
        })
    }

    /// Masking context matching the `masking` switch.
    pub fn default_ctx(&self) -> ForwardCtx {
        if self.config.masking {
            ForwardCtx::live()
        } else {
            ForwardCtx::disabled()
        }
    }

    /// Candidate representations `[4, d]`.
    pub fn forward(&self, tape: &mut Tape, ctx: &mut ForwardCtx, bundle: &FeatureBundle) -> Result<Var> {
        bundle.validate(&self.config)?;
        let p = &self.params;
        let embed = |tape: &mut Tape, t: &Tensor, a: &AffineParams, m: Modality| -> Result<ModalitySequence> {
            let x = tape.constant(t.clone());
            Ok(ModalitySequence::new(a.apply(tape, x)?, m))
        };
        let app = embed(tape, &bundle.appearance, &p.embed[0], Modality::Appearance)?;
        let mot = embed(tape, &bundle.motion, &p.embed[1], Modality::Motion)?;
        let q = embed(tape, &bundle.question, &p.embed[2], Modality::Question)?;
        let dirs = self.config.anchors.stages;

        let s1 = self.stage(tape, ctx, &app, &mot, 0, dirs[0], false)?;
        let s2 = self.stage(tape, ctx, &s1, &q, 1, dirs[1], false)?;
        let mut rows = Vec::with_capacity(CANDIDATES);
        for a in &bundle.answers {
            let ans = embed(tape, a, &p.embed[3], Modality::Answer)?;
            let s3 = self.stage(tape, ctx, &s2, &ans, 2, dirs[2], true)?;
            rows.push(tape.mean_rows(s3.tokens)?);
        }
        tape.concat_rows(&rows)
    }

    /// One DRAX block: CLS and positions, encoder stack, fusion, CLS removal.
    #[allow(clippy::too_many_arguments)]
    pub fn stage(
        &self,
        tape: &mut Tape,
        ctx: &mut ForwardCtx,
        x1: &ModalitySequence,
        x2: &ModalitySequence,
        stage: usize,
        direction: Direction,
        keep_cls: bool,
    ) -> Result<ModalitySequence> {
        let sp = &self.params.stages[stage];
        let c = &self.config;
        let a = add_cls_and_pos(tape, x1, sp.cls[0], sp.pos[0], c.max_positions)?;
        let b = add_cls_and_pos(tape, x2, sp.cls[1], sp.pos[1], c.max_positions)?;
        let (e1, e2) = run_encoder_stack(
            tape,
            ctx,
            &a,
            &b,
            &sp.encoder,
            c.d_f_initial()?,
            c.delta,
            c.allow_df_above_one,
            stage + 1,
        )?;
        let (anchor, tail) = match direction {
            Direction::IntoNew => (e2, e1),
            Direction::IntoPrevious => (e1, e2),
        };
        let fused = if c.aligned_fusion {
            let aligned = vector_space_transform(
                tape,
                ctx,
                anchor.tokens,
                tail.tokens,
                &sp.fusion,
                c.heads,
                c.d_f_fusion()?,
                stage + 1,
            )?;
            cross_aligned_fuse(tape, anchor.tokens, aligned, &sp.fusion)?
        } else {
            concat_with_cls(tape, &anchor, &tail, &sp.fusion)?
        };
        let out = if keep_cls {
            fused
        } else {
            let n = tape.shape(fused)[0];
            tape.slice_rows(fused, 1, n - 1)?
        };
        Ok(ModalitySequence {
            tokens: out,
            modality: Modality::Fused,
            has_cls: keep_cls,
        })
    }

    /// Logits `[1, 4]` from candidate representations.
    pub fn decode(&self, tape: &mut Tape, reps: Var) -> Result<Var> {
        let dp = &self.params.decoder;
        let y = dp.hidden.apply(tape, reps)?;
        let y = tape.elu(y);
        let y = dp.hidden2.apply(tape, y)?;
        let y = tape.elu(y);
        let logits = dp.out.apply(tape, y)?;
        tape.transpose(logits)
    }

    /// Forward pass only.
    pub fn score(&self, ctx: &mut ForwardCtx, bundle: &FeatureBundle) -> Result<Scores> {
        let mut tape = Tape::new(&self.store);
        let reps = self.forward(&mut tape, ctx, bundle)?;
        let logits = self.decode(&mut tape, reps)?;
        Ok(scores_from_logits(tape.value(logits)))
    }

    /// Builds the loss on `tape` and returns `(loss, logits)`.
    pub fn loss_on_tape(
        &self,
        tape: &mut Tape,
        ctx: &mut ForwardCtx,
        bundle: &FeatureBundle,
    ) -> Result<(Var, Var)> {
        let reps = self.forward(tape, ctx, bundle)?;
        let logits = self.decode(tape, reps)?;
        let scores = match self.config.loss_mode {
            LossMode::LogitHinge => logits,
            LossMode::ProbabilityHinge => tape.softmax(logits, 1)?,
        };
        let loss = hinge_loss_var(tape, scores, bundle.label)?;
        Ok((loss, logits))
    }

    /// Loss, scores and parameter gradients for one sample.
    pub fn sample_gradients(
        &self,
        ctx: &mut ForwardCtx,
        bundle: &FeatureBundle,
    ) -> Result<(SampleOutcome, Gradients)> {
        let mut tape = Tape::new(&self.store);
        let (loss, logits) = self.loss_on_tape(&mut tape, ctx, bundle)?;
        let grads = tape.backward(loss)?;
        let outcome = SampleOutcome {
            scores: scores_from_logits(tape.value(logits)),
            loss: tape.value(loss).data()[0],
            stats: ctx.stats().clone(),
        };
        Ok((outcome, grads))
    }

    /// Loss and scores without a backward pass.
    pub fn sample_loss(&self, ctx: &mut ForwardCtx, bundle: &FeatureBundle) -> Result<SampleOutcome> {
        let mut tape = Tape::new(&self.store);
        let (loss, logits) = self.loss_on_tape(&mut tape, ctx, bundle)?;
        Ok(SampleOutcome {
            scores: scores_from_logits(tape.value(logits)),
            loss: tape.value(loss).data()[0],
            stats: ctx.stats().clone(),
        })
    }
}

fn scores_from_logits(logits: &Tensor) -> Scores {
    let mut l = [0.0; CANDIDATES];
    l.copy_from_slice(&logits.data()[..CANDIDATES]);
    let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e = l.map(|v| (v - m).exp());
    let s: f64 = e.iter().sum();
    Scores {
        logits: l,
        probs: e.map(|v| v / s),
    }
}

/// Fixed sinusoidal table `[n, d]`: sine on even channels, cosine on odd.
pub fn sinusoidal_positions(n: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; n * d];
    for p in 0..n {
        for c in 0..d {
            let i = (c / 2) as f64;
            let angle = p as f64 / 10000f64.powf(2.0 * i / d as f64);
            data[p * d + c] = if c % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![n, d], data).expect("positive extents")
}

/// Prepends the CLS vector and adds positional encodings (positions start at the CLS row).
pub fn add_cls_and_pos(
    tape: &mut Tape,
    x: &ModalitySequence,
    cls: ParamId,
    pos: Option<ParamId>,
    max_positions: usize,
) -> Result<ModalitySequence> {
    if x.has_cls {
        return Err(Error::DoubleCls);
    }
    let (n, d) = (x.rows(tape) + 1, x.dim(tape));
    let c = tape.param(cls);
    let rows = tape.concat_rows(&[c, x.tokens])?;
    let pe = match (x.pos_kind(), pos) {
        (PosKind::Sinusoidal, _) => tape.constant(sinusoidal_positions(n, d)),
        (PosKind::Learned, Some(table)) => {
            if n > max_positions {
                return Err(Error::SequenceTooLong {
                    len: n,
                    max: max_positions,
                });
            }
            let t = tape.param(table);
            tape.slice_rows(t, 0, n)?
        }
        (PosKind::Learned, None) => {
            return Err(Error::InvalidArgument {
                op: "add_cls_and_pos",
                msg: format!("{:?} stream has no position table", x.modality),
            })
        }
    };
    let out = tape.add(rows, pe)?;
    Ok(ModalitySequence {
        tokens: out,
        modality: x.modality,
        has_cls: true,
    })
}

/// Concatenation fusion when both inputs carry a CLS row.
///
/// If either stream is linguistic the tail's CLS row is repeated over every
/// anchor row. Otherwise the CLS rows are paired and the feature rows are
/// reconciled by group averaging or repetition.
pub fn concat_with_cls(
    tape: &mut Tape,
    anchor: &ModalitySequence,
    tail: &ModalitySequence,
    p: &FusionParams,
) -> Result<Var> {
    let n = anchor.rows(tape);
    let linguistic = |m: Modality| matches!(m, Modality::Question | Modality::Answer);
    let tail_rows = if linguistic(anchor.modality) || linguistic(tail.modality) {
        let cls = tape.slice_rows(tail.tokens, 0, 1)?;
        reconcile_rows(tape, cls, n)?
    } else {
        let m = tail.rows(tape);
        let cls = tape.slice_rows(tail.tokens, 0, 1)?;
        let feats = tape.slice_rows(tail.tokens, 1, m - 1)?;
        let feats = reconcile_rows(tape, feats, n - 1)?;
        tape.concat_rows(&[cls, feats])?
    };
    let cat = tape.concat_cols(&[anchor.tokens, tail_rows])?;
    p.fuse.apply(tape, cat)
}

/// `Σ_{n ≠ label} max(0, 1 + s_n − s_label)` over a `[1, 4]` score row.
pub fn hinge_loss_var(tape: &mut Tape, scores: Var, label: usize) -> Result<Var> {
    let n = tape.value(scores).len();
    if label >= n {
        return Err(Error::InvalidLabel(label));
    }
    let sp = tape.select(scores, label)?;
    let mut total: Option<Var> = None;
    for i in (0..n).filter(|&i| i != label) {
        let sn = tape.select(scores, i)?;
        let diff = tape.sub(sn, sp)?;
        let term = tape.add_scalar(diff, 1.0);
        let term = tape.relu(term);
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::InvalidArgument {
        op: "hinge_loss",
        msg: "need at least two candidates".into(),
    })
}

/// Plain-value version of [`hinge_loss_var`].
pub fn hinge_loss(scores: &[f64], label: usize) -> Result<f64> {
    let sp = *scores.get(label).ok_or(Error::InvalidLabel(label))?;
    Ok(scores
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != label)
        .map(|(_, &sn)| (1.0 + (sn - sp)).max(0.0))
        .sum())
}

/// Index of the largest entry; ties go to the lowest index.
pub fn predict(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hinge_examples() {
        assert!((hinge_loss(&[0.9, 0.2], 0).unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(hinge_loss(&[0.5, 0.5], 0).unwrap(), 1.0);
        assert_eq!(hinge_loss(&[3.0, 1.0, 2.0, 0.5], 0).unwrap(), 0.0);
        assert!(matches!(hinge_loss(&[0.0; 4], 4), Err(Error::InvalidLabel(4))));
    }

    #[test]
    fn predict_ties_go_low() {
        assert_eq!(predict(&[0.1, 0.7, 0.1, 0.1]), 1);
        assert_eq!(predict(&[0.25; 4]), 0);
    }

    #[test]
    fn sinusoid_position_zero() {
        let pe = sinusoidal_positions(3, 6);
        for c in 0..6 {
            let want = if c % 2 == 0 { 0.0 } else { 1.0 };
            assert_eq!(pe.at(0, c), want);
        }
        assert!((pe.at(1, 0) - 1f64.sin()).abs() < 1e-15);
    }
}
