//! Deep-to-shallow layer-dropping schedule.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::ProtocolError;
use crate::nn::ModelSpec;

/// Number of participations a boundary stays active before the schedule
/// moves one entry shallower. `Never` keeps the deepest entry forever.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DropRate {
    Every(u32),
    Never,
}

impl fmt::Display for DropRate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DropRate::Every(z) => write!(f, "{z}"),
            DropRate::Never => f.write_str("inf"),
        }
    }
}

impl Serialize for DropRate {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            DropRate::Every(z) => s.serialize_u32(*z),
            DropRate::Never => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for DropRate {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(i64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Int(z) if z >= 1 && z <= u32::MAX as i64 => Ok(DropRate::Every(z as u32)),
            Raw::Int(z) => Err(serde::de::Error::custom(format!("dropping rate must be >= 1, got {z}"))),
            Raw::Text(t) if matches!(t.as_str(), "inf" | "never" | "infinity") => Ok(DropRate::Never),
            Raw::Text(t) => {
                Err(serde::de::Error::custom(format!("dropping rate must be an integer or \"inf\", got '{t}'")))
            }
        }
    }
}

/// Legal distillation boundaries, stored shallow to deep, plus the rate.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DropConfig {
    boundaries: Vec<usize>,
    rate: DropRate,
}

impl DropConfig {
    /// Validates boundaries (1-based layer indices, any order).
    ///
    /// A flatten layer is not a boundary of its own: its output is the
    /// preceding conv output, reshaped.
    pub fn new(spec: &ModelSpec, mut boundaries: Vec<usize>, rate: DropRate) -> Result<Self, ProtocolError> {
        if boundaries.is_empty() {
            return Err(ProtocolError::Config("dropping set is empty".into()));
        }
        if let DropRate::Every(0) = rate {
            return Err(ProtocolError::Config("dropping rate must be at least 1".into()));
        }
        for &b in &boundaries {
            if b == 0 || b > spec.num_layers() {
                return Err(ProtocolError::Config(format!("boundary {b} outside 1..={}", spec.num_layers())));
            }
            if spec.is_flatten(b) {
                return Err(ProtocolError::Config(format!(
                    "layer {b} is a flatten layer; name the conv layer before it instead"
                )));
            }
        }
        boundaries.sort_unstable();
        if boundaries.windows(2).any(|w| w[0] == w[1]) {
            return Err(ProtocolError::Config("dropping set lists a layer twice".into()));
        }
        Ok(Self { boundaries, rate })
    }

    /// Boundaries given by layer labels such as `["C3", "F1", "F2", "F3"]`.
    pub fn from_names<S: AsRef<str>>(spec: &ModelSpec, names: &[S], rate: DropRate) -> Result<Self, ProtocolError> {
        let idx = names
            .iter()
            .map(|n| spec.resolve_layer(n.as_ref()).map_err(ProtocolError::from))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(spec, idx, rate)
    }

    /// The four standard dropping sets, generalized to the architecture:
    /// 1 = all dense layers, 2 = the last two dense layers, 3 = last conv plus
    /// all dense layers, 4 = last two convs plus all dense layers.
    pub fn preset(spec: &ModelSpec, set: u8, rate: DropRate) -> Result<Self, ProtocolError> {
        let names = preset_names(spec, set)?;
        Self::from_names(spec, &names, rate)
    }

    /// Shallow-to-deep boundary indices.
    pub fn boundaries(&self) -> &[usize] {
        &self.boundaries
    }

    pub fn rate(&self) -> DropRate {
        self.rate
    }

    pub fn deepest(&self) -> usize {
        *self.boundaries.last().unwrap()
    }

    pub fn shallowest(&self) -> usize {
        self.boundaries[0]
    }
}

/// Layer labels making up preset dropping set `set` (1 to 4).
pub fn preset_names(spec: &ModelSpec, set: u8) -> Result<Vec<String>, ProtocolError> {
    let names: Vec<String> = (1..=spec.num_layers()).map(|l| spec.layer_name(l)).collect();
    let convs: Vec<&String> = names.iter().filter(|n| n.starts_with('C')).collect();
    let dense: Vec<&String> = names.iter().filter(|n| n.starts_with('F')).collect();
    let pick = |c: usize, d: usize| -> Result<Vec<String>, ProtocolError> {
        if convs.len() < c || dense.len() < d {
            return Err(ProtocolError::Config(format!("dropping set {set} needs {c} conv and {d} dense layers")));
        }
        Ok(convs[convs.len() - c..].iter().chain(&dense[dense.len() - d..]).map(|s| s.to_string()).collect())
    };
    match set {
        1 => pick(0, dense.len()),
        2 => pick(0, 2),
        3 => pick(1, dense.len()),
        4 => pick(2, dense.len()),
        _ => Err(ProtocolError::Config(format!("unknown dropping set {set}"))),
    }
}

/// Distillation boundary for a client that has now participated `z` times.
///
/// Steps `⌊(z − 1) / Z₀⌋` entries down from the deepest boundary and stays
/// at the shallowest once the set is exhausted.
pub fn distillation_layer(z: u32, cfg: &DropConfig) -> usize {
    let steps = match cfg.rate {
        DropRate::Every(z0) => (z.saturating_sub(1) / z0) as usize,
        DropRate::Never => 0,
    };
    let n = cfg.boundaries.len();
    cfg.boundaries[n - 1 - steps.min(n - 1)]
}
