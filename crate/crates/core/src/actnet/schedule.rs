//! Per-layer activation schedules written as strings such as `ssrsl`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Activation applied after a layer's affine map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Sine,
    Rectifier,
    /// Identity; only valid for the output layer.
    Affine,
}

impl Activation {
    pub fn tag(self) -> char {
        match self {
            Activation::Sine => 's',
            Activation::Rectifier => 'r',
            Activation::Affine => 'l',
        }
    }
}

/// Ordered activation tags, one per layer. The last tag is always
/// [`Activation::Affine`] and it is the only affine tag.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ActivationSchedule {
    layers: Vec<Activation>,
}

impl ActivationSchedule {
    /// Parse a structure string: `s` = sine, `r` = rectifier, trailing `l` =
    /// affine output layer.
    pub fn parse(spec: &str) -> Result<Self> {
        let err = |position: usize, reason: &str| Error::Schedule {
            spec: spec.to_string(),
            position,
            reason: reason.to_string(),
        };
        let chars: Vec<char> = spec.chars().collect();
        if chars.len() < 2 {
            return Err(err(
                chars.len(),
                "need at least one hidden layer and the output layer",
            ));
        }
        let last = chars.len() - 1;
        let mut layers = Vec::with_capacity(chars.len());
        for (i, &c) in chars.iter().enumerate() {
            let act = match c {
                's' => Activation::Sine,
                'r' => Activation::Rectifier,
                'l' if i == last => Activation::Affine,
                'l' => return Err(err(i, "'l' is only allowed as the final layer")),
                other => return Err(err(i, &format!("illegal character {other:?}"))),
            };
            layers.push(act);
        }
        if layers[last] != Activation::Affine {
            return Err(err(last, "missing trailing 'l' output layer"));
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Activation] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn hidden_layers(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn sine_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|a| **a == Activation::Sine)
            .count()
    }

    pub fn render(&self) -> String {
        self.layers.iter().map(|a| a.tag()).collect()
    }
}

impl fmt::Display for ActivationSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

impl FromStr for ActivationSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s)
    }
}

/// Parse a structure string into a schedule.
pub fn parse_structure(spec: &str) -> Result<ActivationSchedule> {
    ActivationSchedule::parse(spec)
}
