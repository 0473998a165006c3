//! Planted-rule multiple-choice data.
//!
//! Every sample draws a signal vector `v` with `signal_dims` entries. `v` is
//! added to the leading dimensions of a minority of appearance and motion
//! tokens and of every token of the correct answer. All tokens get
//! independent Gaussian noise; the question carries noise only. High-variance
//! distractor tokens are inserted at random positions of both video
//! sequences. Values are rounded to f32 so that a dataset read back from
//! disk is identical to the generated one.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{predict, FeatureBundle, CANDIDATES};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub samples: usize,
    /// Appearance tokens before distractors.
    pub frames: usize,
    /// Motion tokens before distractors.
    pub clips: usize,
    pub question_len: usize,
    pub answer_len: usize,
    pub signal_dims: usize,
    /// Distractor tokens inserted into each video sequence.
    pub distractors: usize,
    pub noise: f64,
    pub signal_scale: f64,
    /// Share of video tokens carrying the signal.
    pub signal_fraction: f64,
    pub distractor_scale: f64,
    pub dim_appearance: usize,
    pub dim_motion: usize,
    pub dim_question: usize,
    pub dim_answer: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            samples: 200,
            frames: 16,
            clips: 6,
            question_len: 6,
            answer_len: 4,
            signal_dims: 8,
            distractors: 4,
            noise: 0.5,
            signal_scale: 2.5,
            signal_fraction: 0.25,
            distractor_scale: 2.0,
            dim_appearance: 512,
            dim_motion: 2048,
            dim_question: 300,
            dim_answer: 300,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument { op: "synthetic spec", msg });
        if self.samples == 0 {
            return Err(Error::EmptyDataset);
        }
        if [self.frames, self.clips, self.question_len, self.answer_len].contains(&0) {
            return bad("sequence lengths must be positive".into());
        }
        let min_dim = self
            .dim_appearance
            .min(self.dim_motion)
            .min(self.dim_question)
            .min(self.dim_answer);
        if self.signal_dims == 0 || self.signal_dims >= min_dim {
            return bad(format!(
                "signal_dims = {} must be in 1..{min_dim}",
                self.signal_dims
            ));
        }
        if self.distractors >= self.frames.min(self.clips) {
            return bad(format!(
                "distractors = {} must be below every video length",
                self.distractors
            ));
        }
        if !(self.signal_fraction > 0.0 && self.signal_fraction <= 1.0) {
            return bad("signal_fraction must be in (0, 1]".into());
        }
        for (name, v) in [
            ("noise", self.noise),
            ("signal_scale", self.signal_scale),
            ("distractor_scale", self.distractor_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be non-negative"));
            }
        }
        Ok(())
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn round32(v: f64) -> f64 {
    v as f32 as f64
}

fn noise_rows(rng: &mut ChaCha8Rng, rows: usize, dim: usize, sigma: f64) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..dim).map(|_| sigma * normal(rng)).collect())
        .collect()
}

fn plant(row: &mut [f64], v: &[f64]) {
    row.iter_mut().zip(v).for_each(|(x, s)| *x += s);
}

fn to_tensor(rows: Vec<Vec<f64>>) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = rows.into_iter().map(|r| r.into_iter().map(round32).collect()).collect();
    Tensor::from_rows(&rows)
}

/// Video sequence: signal in a random minority of `len` tokens, then distractors inserted.
fn video(rng: &mut ChaCha8Rng, spec: &SyntheticSpec, len: usize, dim: usize, v: &[f64]) -> Vec<Vec<f64>> {
    let mut rows = noise_rows(rng, len, dim, spec.noise);
    let carriers = ((spec.signal_fraction * len as f64).round() as usize).clamp(1, len);
    for i in sample(rng, len, carriers) {
        plant(&mut rows[i], v);
    }
    for _ in 0..spec.distractors {
        let at = rng.random_range(0..=rows.len());
        let d = noise_rows(rng, 1, dim, spec.distractor_scale).remove(0);
        rows.insert(at, d);
    }
    rows
}

/// Sample `index` of the stream defined by `spec.seed`.
pub fn generate_sample(spec: &SyntheticSpec, index: u64) -> Result<FeatureBundle> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    let label = rng.random_range(0..CANDIDATES);
    let v: Vec<f64> = (0..spec.signal_dims)
        .map(|_| spec.signal_scale * normal(&mut rng))
        .collect();
    let appearance = video(&mut rng, spec, spec.frames, spec.dim_appearance, &v);
    let motion = video(&mut rng, spec, spec.clips, spec.dim_motion, &v);
    let question = noise_rows(&mut rng, spec.question_len, spec.dim_question, spec.noise);
    let answers = [0, 1, 2, 3].map(|i| {
        let mut rows = noise_rows(&mut rng, spec.answer_len, spec.dim_answer, spec.noise);
        if i == label {
            rows.iter_mut().for_each(|r| plant(r, &v));
        }
        rows
    });
    let [a0, a1, a2, a3] = answers;
    Ok(FeatureBundle {
        appearance: to_tensor(appearance)?,
        motion: to_tensor(motion)?,
        question: to_tensor(question)?,
        answers: [to_tensor(a0)?, to_tensor(a1)?, to_tensor(a2)?, to_tensor(a3)?],
        label,
    })
}

/// Samples `start..start + count` of the seeded stream. Disjoint ranges give
/// disjoint splits drawn from the same generator.
pub fn generate_range(spec: &SyntheticSpec, start: u64, count: usize) -> Result<Vec<FeatureBundle>> {
    spec.validate()?;
    (start..start + count as u64)
        .map(|i| generate_sample(spec, i))
        .collect()
}

/// `spec.samples` samples starting at index 0.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<FeatureBundle>> {
    generate_range(spec, 0, spec.samples)
}

/// Picks the candidate whose summed signal dimensions best match the summed
/// video signal dimensions.
pub fn linear_oracle(bundle: &FeatureBundle, signal_dims: usize) -> usize {
    let sum_lead = |t: &Tensor| -> Vec<f64> {
        let mut acc = vec![0.0; signal_dims];
        for r in 0..t.shape()[0] {
            acc.iter_mut().zip(t.row(r)).for_each(|(a, x)| *a += x);
        }
        acc
    };
    let mut video = sum_lead(&bundle.appearance);
    video
        .iter_mut()
        .zip(sum_lead(&bundle.motion))
        .for_each(|(a, b)| *a += b);
    let scores: Vec<f64> = bundle
        .answers
        .iter()
        .map(|a| sum_lead(a).iter().zip(&video).map(|(x, y)| x * y).sum())
        .collect();
    predict(&scores)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> SyntheticSpec {
        SyntheticSpec {
            samples: 8,
            dim_appearance: 12,
            dim_motion: 16,
            dim_question: 10,
            dim_answer: 10,
            signal_dims: 4,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn shapes_and_determinism() {
        let spec = tiny_spec();
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].appearance.shape(), &[20, 12]);
        assert_eq!(a[0].motion.shape(), &[10, 16]);
        assert_eq!(a[0].answers[3].shape(), &[4, 10]);
    }

    #[test]
    fn invalid_specs() {
        let mut s = tiny_spec();
        s.distractors = 6;
        assert!(s.validate().is_err());
        let mut s = tiny_spec();
        s.signal_dims = 10;
        assert!(s.validate().is_err());
        let mut s = tiny_spec();
        s.samples = 0;
        assert!(matches!(s.validate(), Err(Error::EmptyDataset)));
    }
}
