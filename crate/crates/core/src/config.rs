//! Flat `key = value` configuration.
//!
//! Blank lines and `#` comments are ignored. Every key must be known;
//! an unknown key is an error. The same keys are accepted as overrides.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::synthetic::SyntheticSpec;
use crate::distraction::DistractionFactor;
use crate::error::{Error, Result};
use crate::fusion::AnchorAssignment;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossMode {
    /// Pairwise hinge on pre-softmax logits.
    LogitHinge,
    /// Pairwise hinge on softmax probabilities.
    ProbabilityHinge,
}

impl FromStr for LossMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logit-hinge" => Ok(LossMode::LogitHinge),
            "probability-hinge" => Ok(LossMode::ProbabilityHinge),
            _ => Err(Error::Config(format!(
                "loss_mode must be logit-hinge or probability-hinge, got `{s}`"
            ))),
        }
    }
}

impl LossMode {
    pub fn as_str(self) -> &'static str {
        match self {
            LossMode::LogitHinge => "logit-hinge",
            LossMode::ProbabilityHinge => "probability-hinge",
        }
    }
}

/// Model hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DraxConfig {
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub d_f_initial: f64,
    pub delta: f64,
    pub d_f_fusion: f64,
    pub anchors: AnchorAssignment,
    pub loss_mode: LossMode,
    pub ffn_multiple: usize,
    pub seed: u64,
    pub allow_df_above_one: bool,
    /// `false` bypasses the distraction module at every site.
    pub masking: bool,
    /// `false` swaps cross-aligned fusion for plain concatenation + projection.
    pub aligned_fusion: bool,
    pub ln_eps: f64,
    pub max_positions: usize,
    pub dim_appearance: usize,
    pub dim_motion: usize,
    pub dim_question: usize,
    pub dim_answer: usize,
}

impl Default for DraxConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl DraxConfig {
    /// d = 64, h = 4, K = 2 with the 0.3/0.3 schedule and fusion factor 0.4.
    pub fn desk() -> Self {
        Self {
            d: 64,
            heads: 4,
            layers: 2,
            d_f_initial: 0.3,
            delta: 0.3,
            d_f_fusion: 0.4,
            anchors: AnchorAssignment::DEFAULT,
            loss_mode: LossMode::LogitHinge,
            ffn_multiple: 2,
            seed: 0,
            allow_df_above_one: false,
            masking: true,
            aligned_fusion: true,
            ln_eps: 1e-5,
            max_positions: 256,
            dim_appearance: 512,
            dim_motion: 2048,
            dim_question: 300,
            dim_answer: 300,
        }
    }

    /// Three encoder layers.
    pub fn base() -> Self {
        Self {
            layers: 3,
            ..Self::desk()
        }
    }

    /// Six encoder layers.
    pub fn large() -> Self {
        Self {
            layers: 6,
            ..Self::desk()
        }
    }

    /// d = 8, h = 2, K = 1 with small raw feature widths, for gradient checks.
    pub fn tiny() -> Self {
        Self {
            d: 8,
            heads: 2,
            layers: 1,
            max_positions: 16,
            dim_appearance: 6,
            dim_motion: 10,
            dim_question: 5,
            dim_answer: 5,
            ..Self::desk()
        }
    }

    /// Every factor set to zero: the masking-off ablation.
    pub fn without_masking_factors(mut self) -> Self {
        self.d_f_initial = 0.0;
        self.delta = 0.0;
        self.d_f_fusion = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d = {} must be a positive multiple of heads = {}",
                self.d, self.heads
            )));
        }
        if self.layers == 0 {
            return Err(Error::Config("layers must be at least 1".into()));
        }
        for (name, v) in [("d_f_initial", self.d_f_initial), ("d_f_fusion", self.d_f_fusion)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} is outside [0, 1]")));
            }
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(Error::Config(format!("delta = {} must be non-negative", self.delta)));
        }
        if self.ln_eps.is_nan() || self.ln_eps <= 0.0 {
            return Err(Error::Config("ln_eps must be positive".into()));
        }
        if self.ffn_multiple == 0 || self.max_positions == 0 {
            return Err(Error::Config("ffn_multiple and max_positions must be positive".into()));
        }
        if [self.dim_appearance, self.dim_motion, self.dim_question, self.dim_answer].contains(&0) {
            return Err(Error::Config("feature widths must be positive".into()));
        }
        Ok(())
    }

    pub fn d_f_initial(&self) -> Result<DistractionFactor> {
        DistractionFactor::new(self.d_f_initial)
    }

    pub fn d_f_fusion(&self) -> Result<DistractionFactor> {
        DistractionFactor::new(self.d_f_fusion)
    }

    /// Applies one `key = value` pair. Returns `Ok(false)` if the key is not a model key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "d" => self.d = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "layers" => self.layers = parse(key, value)?,
            "d_f_initial" => self.d_f_initial = parse(key, value)?,
            "delta" => self.delta = parse(key, value)?,
            "d_f_fusion" => self.d_f_fusion = parse(key, value)?,
            "anchors" => self.anchors = value.parse()?,
            "loss_mode" => self.loss_mode = value.parse()?,
            "ffn_multiple" => self.ffn_multiple = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "allow_df_above_one" => self.allow_df_above_one = parse(key, value)?,
            "masking" => self.masking = parse(key, value)?,
            "aligned_fusion" => self.aligned_fusion = parse(key, value)?,
            "ln_eps" => self.ln_eps = parse(key, value)?,
            "max_positions" => self.max_positions = parse(key, value)?,
            "dim_appearance" => self.dim_appearance = parse(key, value)?,
            "dim_motion" => self.dim_motion = parse(key, value)?,
            "dim_question" => self.dim_question = parse(key, value)?,
            "dim_answer" => self.dim_answer = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("d", self.d.to_string());
        put("heads", self.heads.to_string());
        put("layers", self.layers.to_string());
        put("d_f_initial", self.d_f_initial.to_string());
        put("delta", self.delta.to_string());
        put("d_f_fusion", self.d_f_fusion.to_string());
        put("anchors", self.anchors.to_string());
        put("loss_mode", self.loss_mode.as_str().to_string());
        put("ffn_multiple", self.ffn_multiple.to_string());
        put("seed", self.seed.to_string());
        put("allow_df_above_one", self.allow_df_above_one.to_string());
        put("masking", self.masking.to_string());
        put("aligned_fusion", self.aligned_fusion.to_string());
        put("ln_eps", self.ln_eps.to_string());
        put("max_positions", self.max_positions.to_string());
        put("dim_appearance", self.dim_appearance.to_string());
        put("dim_motion", self.dim_motion.to_string());
        put("dim_question", self.dim_question.to_string());
        put("dim_answer", self.dim_answer.to_string());
        s
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut c = Self::desk();
        for (k, v) in parse_lines(text)? {
            if !c.set(&k, &v)? {
                return Err(Error::UnknownKey(k));
            }
        }
        c.validate()?;
        Ok(c)
    }
}

/// Optimizer and schedule settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Global-norm gradient clipping; `None` disables it.
    pub clip_norm: Option<f64>,
    /// Stop early once training-set accuracy reaches this value.
    pub target_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            epochs: 200,
            batch_size: 8,
            clip_norm: Some(1.0),
            target_accuracy: None,
        }
    }
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "lr" => self.lr = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "clip_norm" => {
                let v: f64 = parse(key, value)?;
                self.clip_norm = (v > 0.0).then_some(v);
            }
            "target_accuracy" => {
                let v: f64 = parse(key, value)?;
                self.target_accuracy = (v > 0.0).then_some(v);
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr = {} must be non-negative", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Everything a CLI run can configure.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Settings {
    pub model: DraxConfig,
    pub train: TrainConfig,
    pub data: DataSettings,
}

/// Synthetic-data keys; feature widths come from the model section.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSettings {
    pub samples: usize,
    pub frames: usize,
    pub clips: usize,
    pub question_len: usize,
    pub answer_len: usize,
    pub signal_dims: usize,
    pub distractors: usize,
    pub noise: f64,
    pub signal_scale: f64,
    pub signal_fraction: f64,
    pub distractor_scale: f64,
    pub data_seed: u64,
}

impl Default for DataSettings {
    fn default() -> Self {
        let s = SyntheticSpec::default();
        Self {
            samples: s.samples,
            frames: s.frames,
            clips: s.clips,
            question_len: s.question_len,
            answer_len: s.answer_len,
            signal_dims: s.signal_dims,
            distractors: s.distractors,
            noise: s.noise,
            signal_scale: s.signal_scale,
            signal_fraction: s.signal_fraction,
            distractor_scale: s.distractor_scale,
            data_seed: s.seed,
        }
    }
}

impl DataSettings {
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "samples" => self.samples = parse(key, value)?,
            "frames" => self.frames = parse(key, value)?,
            "clips" => self.clips = parse(key, value)?,
            "question_len" => self.question_len = parse(key, value)?,
            "answer_len" => self.answer_len = parse(key, value)?,
            "signal_dims" => self.signal_dims = parse(key, value)?,
            "distractors" => self.distractors = parse(key, value)?,
            "noise" => self.noise = parse(key, value)?,
            "signal_scale" => self.signal_scale = parse(key, value)?,
            "signal_fraction" => self.signal_fraction = parse(key, value)?,
            "distractor_scale" => self.distractor_scale = parse(key, value)?,
            "data_seed" => self.data_seed = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

impl Settings {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if self.model.set(key, value)? || self.train.set(key, value)? || self.data.set(key, value)? {
            Ok(())
        } else {
            Err(Error::UnknownKey(key.to_string()))
        }
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (k, v) in parse_lines(text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut s = Self::default();
        s.apply_text(&text)?;
        Ok(s)
    }

    /// Applies a `KEY=VALUE` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{kv}` is not KEY=VALUE")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        let d = &self.data;
        SyntheticSpec {
            samples: d.samples,
            frames: d.frames,
            clips: d.clips,
            question_len: d.question_len,
            answer_len: d.answer_len,
            signal_dims: d.signal_dims,
            distractors: d.distractors,
            noise: d.noise,
            signal_scale: d.signal_scale,
            signal_fraction: d.signal_fraction,
            distractor_scale: d.distractor_scale,
            dim_appearance: self.model.dim_appearance,
            dim_motion: self.model.dim_motion,
            dim_question: self.model.dim_question,
            dim_answer: self.model.dim_answer,
            seed: d.data_seed,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_lines(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", no + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}
