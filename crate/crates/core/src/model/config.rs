use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grkan::DenominatorLayout;
use crate::initfit::ActivationTarget;
use crate::tensor::ops::Activation;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixerKind {
    #[default]
    GrKan,
    Mlp,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Positional {
    #[default]
    Learnable,
    Sinusoidal,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    #[default]
    Classification,
    Regression,
}

/// Named model sizes. The first three follow the published variants at
/// 224² input with 16² patches; the `desk-*` ones are small enough to train
/// on a CPU against 8×8 images cut into four 4×4 patches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "tiny")]
    Tiny,
    #[serde(rename = "small")]
    Small,
    #[serde(rename = "base")]
    Base,
    #[serde(rename = "desk-d64-l2")]
    DeskD64L2,
    #[serde(rename = "desk-d64-l4")]
    DeskD64L4,
    #[serde(rename = "desk-d128-l2")]
    DeskD128L2,
    #[serde(rename = "desk-d128-l4")]
    DeskD128L4,
}

impl Preset {
    pub const ALL: [Preset; 7] = [
        Preset::Tiny,
        Preset::Small,
        Preset::Base,
        Preset::DeskD64L2,
        Preset::DeskD64L4,
        Preset::DeskD128L2,
        Preset::DeskD128L4,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Tiny => "tiny",
            Preset::Small => "small",
            Preset::Base => "base",
            Preset::DeskD64L2 => "desk-d64-l2",
            Preset::DeskD64L4 => "desk-d64-l4",
            Preset::DeskD128L2 => "desk-d128-l2",
            Preset::DeskD128L4 => "desk-d128-l4",
        }
    }

    pub fn config(self) -> KatConfig {
        let published = |layers, dim, heads| KatConfig {
            layers,
            dim,
            mixer_hidden: 4 * dim,
            heads,
            tokens: 196,
            token_features: 16 * 16 * 3,
            outputs: 1000,
            ..KatConfig::default()
        };
        let desk = |dim: usize, layers| KatConfig {
            layers,
            dim,
            mixer_hidden: 4 * dim,
            heads: dim / 32,
            ..KatConfig::default()
        };
        match self {
            Preset::Tiny => published(12, 192, 3),
            Preset::Small => published(12, 384, 6),
            Preset::Base => published(12, 768, 12),
            Preset::DeskD64L2 => desk(64, 2),
            Preset::DeskD64L4 => desk(64, 4),
            Preset::DeskD128L2 => desk(128, 2),
            Preset::DeskD128L4 => desk(128, 4),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Preset::ALL.iter().map(|p| p.name()).collect();
                Error::Usage(format!(
                    "unknown preset '{s}' (expected one of {})",
                    names.join(", ")
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KatConfig {
    pub layers: usize,
    pub dim: usize,
    pub mixer_hidden: usize,
    pub heads: usize,
    pub mixer: MixerKind,
    /// Activation of the MLP mixer baseline.
    pub mlp_activation: Activation,
    pub groups: usize,
    pub m: usize,
    pub n: usize,
    pub denominator: DenominatorLayout,
    /// Starting shapes of the two rationals in each GR-KAN mixer.
    pub init_first: ActivationTarget,
    pub init_second: ActivationTarget,
    /// Tokens per example and features per token at the input.
    pub tokens: usize,
    pub token_features: usize,
    /// Classes for classification, target width for regression.
    pub outputs: usize,
    pub positional: Positional,
    pub task: Task,
    pub ln_eps: f64,
}

impl Default for KatConfig {
    /// Four blocks of width 64 on 4-token, 16-feature inputs with ten classes.
    fn default() -> Self {
        KatConfig {
            layers: 4,
            dim: 64,
            mixer_hidden: 256,
            heads: 2,
            mixer: MixerKind::GrKan,
            mlp_activation: Activation::Gelu,
            groups: 8,
            m: 5,
            n: 4,
            denominator: DenominatorLayout::Shared,
            init_first: ActivationTarget::Identity,
            init_second: ActivationTarget::Silu,
            tokens: 4,
            token_features: 16,
            outputs: 10,
            positional: Positional::Learnable,
            task: Task::Classification,
            ln_eps: 1e-6,
        }
    }
}

impl KatConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("dim", self.dim),
            ("mixer_hidden", self.mixer_hidden),
            ("heads", self.heads),
            ("tokens", self.tokens),
            ("token_features", self.token_features),
            ("outputs", self.outputs),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.mixer == MixerKind::GrKan {
            if self.groups == 0
                || !self.dim.is_multiple_of(self.groups)
                || !self.mixer_hidden.is_multiple_of(self.groups)
            {
                return Err(Error::config(format!(
                    "dim {} and mixer_hidden {} must both be divisible by {} groups",
                    self.dim, self.mixer_hidden, self.groups
                )));
            }
            if self.m == 0 || self.n == 0 {
                return Err(Error::config("GR-KAN mixers need m ≥ 1 and n ≥ 1"));
            }
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::config("ln_eps must be positive"));
        }
        Ok(())
    }

    pub fn with_mixer(mut self, mixer: MixerKind) -> Self {
        self.mixer = mixer;
        self
    }
}
