use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Appearance,
    Motion,
    Question,
    Answer,
    Fused,
}

impl Modality {
    /// Linguistic streams get fixed sinusoidal positions, everything else a learned table.
    pub fn pos_kind(self) -> PosKind {
        match self {
            Modality::Question | Modality::Answer => PosKind::Sinusoidal,
            _ => PosKind::Learned,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosKind {
    Sinusoidal,
    Learned,
}

/// Token matrix `[n, d]` on a tape, tagged with its modality.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModalitySequence {
    pub tokens: Var,
    pub modality: Modality,
    /// When set, row 0 is the CLS slot.
    pub has_cls: bool,
}

impl ModalitySequence {
    pub fn new(tokens: Var, modality: Modality) -> Self {
        Self {
            tokens,
            modality,
            has_cls: false,
        }
    }

    pub fn pos_kind(&self) -> PosKind {
        self.modality.pos_kind()
    }

    /// Same tags, new token matrix.
    pub fn with_tokens(&self, tokens: Var) -> Self {
        Self { tokens, ..*self }
    }

    pub fn rows(&self, tape: &Tape) -> usize {
        tape.shape(self.tokens)[0]
    }

    pub fn dim(&self, tape: &Tape) -> usize {
        tape.shape(self.tokens)[1]
    }
}
