use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::tensor::ops::Activation;

/// Reference activations a rational function can be fitted to.
///
/// The gated entries are scalar: both branches see the same input, so
/// `geglu(x) = x·gelu(x)` and `swishglu(x) = x·silu(x)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationTarget {
    Identity,
    Relu,
    Gelu,
    #[serde(alias = "swish")]
    Silu,
    Geglu,
    #[serde(alias = "swiglu")]
    SwishGlu,
}

impl ActivationTarget {
    pub const ALL: [ActivationTarget; 6] = [
        ActivationTarget::Identity,
        ActivationTarget::Relu,
        ActivationTarget::Gelu,
        ActivationTarget::Silu,
        ActivationTarget::Geglu,
        ActivationTarget::SwishGlu,
    ];

    pub fn eval(self, x: f64) -> f64 {
        match self {
            ActivationTarget::Identity => x,
            ActivationTarget::Relu => Activation::Relu.eval(x),
            ActivationTarget::Gelu => Activation::Gelu.eval(x),
            ActivationTarget::Silu => Activation::Silu.eval(x),
            ActivationTarget::Geglu => x * Activation::Gelu.eval(x),
            ActivationTarget::SwishGlu => x * Activation::Silu.eval(x),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ActivationTarget::Identity => "identity",
            ActivationTarget::Relu => "relu",
            ActivationTarget::Gelu => "gelu",
            ActivationTarget::Silu => "silu",
            ActivationTarget::Geglu => "geglu",
            ActivationTarget::SwishGlu => "swishglu",
        }
    }

    /// The matching elementwise op, for targets an MLP can use directly.
    pub fn activation(self) -> Option<Activation> {
        match self {
            ActivationTarget::Identity => Some(Activation::Identity),
            ActivationTarget::Relu => Some(Activation::Relu),
            ActivationTarget::Gelu => Some(Activation::Gelu),
            ActivationTarget::Silu => Some(Activation::Silu),
            ActivationTarget::Geglu | ActivationTarget::SwishGlu => None,
        }
    }
}

impl From<Activation> for ActivationTarget {
    fn from(a: Activation) -> Self {
        match a {
            Activation::Identity => ActivationTarget::Identity,
            Activation::Relu => ActivationTarget::Relu,
            Activation::Gelu => ActivationTarget::Gelu,
            Activation::Silu => ActivationTarget::Silu,
        }
    }
}

impl fmt::Display for ActivationTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ActivationTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s.to_ascii_lowercase().as_str() {
            "identity" => Ok(ActivationTarget::Identity),
            "relu" => Ok(ActivationTarget::Relu),
            "gelu" => Ok(ActivationTarget::Gelu),
            "silu" | "swish" => Ok(ActivationTarget::Silu),
            "geglu" => Ok(ActivationTarget::Geglu),
            "swishglu" | "swiglu" => Ok(ActivationTarget::SwishGlu),
            other => Err(Error::Usage(format!(
                "unknown activation target '{other}' (expected identity, relu, gelu, silu/swish, geglu, swishglu)"
            ))),
        }
    }
}
