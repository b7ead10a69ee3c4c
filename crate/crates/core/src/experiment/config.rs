use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ExperimentError;
use crate::baselines::{ProtocolKind, ProtocolName};
use crate::data::{load_csv, load_idx, synth_blobs, Dataset};
use crate::nn::{KlOrder, ModelSpec};
use crate::protocol::{preset_names, BoundaryRule, DropConfig, DropRate, ProtocolConfig, Transfer};

/// A complete run description, read from a flat TOML file.
///
/// Unset fields take the defaults below. [`RunConfig::resolved`] fills the
/// data-dependent defaults (`z0`, `drop_set`) so that the stored snapshot
/// fully determines the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub protocol: ProtocolName,
    /// Boundary label used by `fedd2s_fixed_layer`.
    pub fixed_layer: String,
    pub rounds: u32,
    pub clients: usize,
    pub participation: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub temperature: f64,
    pub alpha: f64,
    /// Dropping rate; an integer or `"inf"`. Defaults from `alpha`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub z0: Option<DropRate>,
    /// Boundary labels; defaults to the last conv plus every dense layer.
    pub drop_set: Vec<String>,
    /// `desk`, `m1`, `m2`, or a layer list such as
    /// `conv(8,3); flatten; dense(32); dense(10)`.
    pub arch: String,
    /// `synth:classes,per_class,dims,separation`, `csv:path` or
    /// `idx:images,labels`.
    pub dataset: String,
    pub seed: u64,
    pub pre_local_epochs: usize,
    pub ua_window: usize,
    pub kl_order: KlOrder,
    pub temper_ce: bool,
    pub separate_distill_optimizer: bool,
    pub wire_roundtrip: bool,
    pub record_wall_clock: bool,
    /// Directory relative dataset paths are resolved against.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            protocol: ProtocolName::Fedd2s,
            fixed_layer: "C3".into(),
            rounds: 30,
            clients: 8,
            participation: 0.5,
            epochs: 2,
            batch_size: 16,
            lr: 0.005,
            temperature: 1.0,
            alpha: 0.1,
            z0: None,
            drop_set: Vec::new(),
            arch: "desk".into(),
            dataset: "synth:4,100,16,2.0".into(),
            seed: 0,
            pre_local_epochs: 0,
            ua_window: 10,
            kl_order: KlOrder::TeacherStudent,
            temper_ce: true,
            separate_distill_optimizer: false,
            wire_roundtrip: false,
            record_wall_clock: false,
            base_dir: None,
        }
    }
}

/// Where samples come from.
#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSource {
    Synth { classes: usize, per_class: usize, dims: usize, separation: f64 },
    Csv(PathBuf),
    Idx { images: PathBuf, labels: PathBuf },
}

impl DatasetSource {
    pub fn parse(text: &str, base: Option<&Path>) -> Result<Self, ExperimentError> {
        let bad = |msg: &str| ExperimentError::Config(format!("dataset '{text}': {msg}"));
        let resolve = |p: &str| {
            let p = PathBuf::from(p.trim());
            match base {
                Some(b) if p.is_relative() => b.join(p),
                _ => p,
            }
        };
        let (kind, rest) = text.split_once(':').ok_or_else(|| bad("expected kind:arguments"))?;
        match kind.trim() {
            "synth" => {
                let parts: Vec<&str> = rest.split(',').map(str::trim).collect();
                if parts.len() != 4 {
                    return Err(bad("synth takes classes,per_class,dims,separation"));
                }
                let int = |s: &str| s.parse::<usize>().map_err(|_| bad(&format!("'{s}' is not a count")));
                Ok(DatasetSource::Synth {
                    classes: int(parts[0])?,
                    per_class: int(parts[1])?,
                    dims: int(parts[2])?,
                    separation: parts[3].parse().map_err(|_| bad(&format!("'{}' is not a number", parts[3])))?,
                })
            }
            "csv" => Ok(DatasetSource::Csv(resolve(rest))),
            "idx" => {
                let (i, l) = rest.split_once(',').ok_or_else(|| bad("idx takes images,labels"))?;
                Ok(DatasetSource::Idx { images: resolve(i), labels: resolve(l) })
            }
            other => Err(bad(&format!("unknown kind '{other}'"))),
        }
    }

    pub fn load(&self, seed: u64) -> Result<Dataset, ExperimentError> {
        Ok(match self {
            DatasetSource::Synth { classes, per_class, dims, separation } => {
                synth_blobs(*classes, *per_class, *dims, *separation, seed)?
            }
            DatasetSource::Csv(p) => load_csv(p)?,
            DatasetSource::Idx { images, labels } => load_idx(images, labels)?,
        })
    }
}

/// Default dropping rate for a Dirichlet concentration: stronger skew drops
/// layers sooner.
pub fn default_z0(alpha: f64) -> DropRate {
    if alpha <= 0.3 {
        DropRate::Every(3)
    } else if alpha <= 0.75 {
        DropRate::Every(5)
    } else {
        DropRate::Every(7)
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ExperimentError> {
        toml::from_str(text).map_err(|e| ExperimentError::Config(e.message().to_string()))
    }

    /// Reads a TOML file; relative dataset paths resolve against its directory.
    pub fn from_file(path: &Path) -> Result<Self, ExperimentError> {
        let text =
            std::fs::read_to_string(path).map_err(|source| ExperimentError::Io { path: path.to_path_buf(), source })?;
        let mut cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| ExperimentError::Parse { path: path.to_path_buf(), msg: e.message().to_string() })?;
        cfg.base_dir = path.parent().map(Path::to_path_buf);
        Ok(cfg)
    }

    pub fn dataset_source(&self) -> Result<DatasetSource, ExperimentError> {
        DatasetSource::parse(&self.dataset, self.base_dir.as_deref())
    }

    pub fn load_dataset(&self) -> Result<Dataset, ExperimentError> {
        self.dataset_source()?.load(self.seed)
    }

    pub fn model_spec(&self, ds: &Dataset) -> Result<ModelSpec, ExperimentError> {
        let input = ds.sample_shape().to_vec();
        let classes = ds.num_classes();
        Ok(match self.arch.trim() {
            "desk" => ModelSpec::desk(input, classes)?,
            "m1" => ModelSpec::m1(input, classes)?,
            "m2" => ModelSpec::m2(input, classes)?,
            other => {
                let spec = ModelSpec::parse(other, input)?;
                if spec.num_classes() != classes {
                    return Err(ExperimentError::Config(format!(
                        "architecture has {} outputs but the dataset has {classes} classes",
                        spec.num_classes()
                    )));
                }
                spec
            }
        })
    }

    /// Checks ranges and fills `z0` and `drop_set`.
    pub fn resolved(&self, spec: &ModelSpec) -> Result<RunConfig, ExperimentError> {
        let mut cfg = self.clone();
        let cfg_err = |m: String| Err(ExperimentError::Config(m));
        if cfg.clients == 0 {
            return cfg_err("clients must be at least 1".into());
        }
        if cfg.epochs == 0 || cfg.batch_size == 0 {
            return cfg_err("epochs and batch_size must be at least 1".into());
        }
        if !(cfg.participation > 0.0 && cfg.participation <= 1.0) {
            return cfg_err(format!("participation must lie in (0, 1], got {}", cfg.participation));
        }
        if !(cfg.alpha > 0.0 && cfg.alpha.is_finite()) {
            return cfg_err(format!("alpha must be positive, got {}", cfg.alpha));
        }
        if cfg.ua_window == 0 || cfg.ua_window > (cfg.rounds as usize).max(1) {
            return cfg_err(format!("ua_window must lie in 1..={}, got {}", cfg.rounds.max(1), cfg.ua_window));
        }
        if cfg.z0.is_none() {
            cfg.z0 = Some(default_z0(cfg.alpha));
        }
        if cfg.drop_set.is_empty() {
            cfg.drop_set = preset_names(spec, 3).map_err(|e| ExperimentError::Config(e.to_string()))?;
        }
        cfg.protocol_config(spec)?.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        cfg.protocol_kind(spec)?;
        Ok(cfg)
    }

    pub fn protocol_kind(&self, spec: &ModelSpec) -> Result<ProtocolKind, ExperimentError> {
        Ok(match self.protocol {
            ProtocolName::Fedd2s => ProtocolKind::Fedd2s,
            ProtocolName::Fedd2sMse => ProtocolKind::Fedd2sMse,
            ProtocolName::Fedavg => ProtocolKind::Fedavg,
            ProtocolName::LocalOnly => ProtocolKind::LocalOnly,
            ProtocolName::Fedd2sFixedLayer => {
                let l = spec.resolve_layer(&self.fixed_layer)?;
                if spec.is_flatten(l) {
                    return Err(ExperimentError::Config(format!(
                        "fixed_layer '{}' is a flatten layer; use the conv layer before it",
                        self.fixed_layer
                    )));
                }
                ProtocolKind::Fedd2sFixedLayer(l)
            }
        })
    }

    pub fn protocol_config(&self, spec: &ModelSpec) -> Result<ProtocolConfig, ExperimentError> {
        let rate = self.z0.unwrap_or_else(|| default_z0(self.alpha));
        let drop = if self.drop_set.is_empty() {
            DropConfig::preset(spec, 3, rate)
        } else {
            DropConfig::from_names(spec, &self.drop_set, rate)
        }
        .map_err(|e| ExperimentError::Config(e.to_string()))?;
        Ok(ProtocolConfig {
            participation: self.participation,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            temperature: self.temperature,
            kl_order: self.kl_order,
            temper_ce: self.temper_ce,
            pre_local_epochs: self.pre_local_epochs,
            drop,
            boundary: BoundaryRule::Schedule,
            transfer: Transfer::HeadModel,
            separate_distill_optimizer: self.separate_distill_optimizer,
            wire_roundtrip: self.wire_roundtrip,
            seed: self.seed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let cfg = RunConfig::from_toml_str("rounds = 3\nprotocol = \"fedavg\"\nz0 = \"inf\"").unwrap();
        assert_eq!(cfg.rounds, 3);
        assert_eq!(cfg.protocol, ProtocolName::Fedavg);
        assert_eq!(cfg.z0, Some(DropRate::Never));
        assert_eq!(cfg.clients, RunConfig::default().clients);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_toml_str("roundz = 3").unwrap_err();
        assert!(err.to_string().contains("roundz"), "{err}");
    }

    #[test]
    fn z0_follows_alpha() {
        assert_eq!(default_z0(0.1), DropRate::Every(3));
        assert_eq!(default_z0(0.5), DropRate::Every(5));
        assert_eq!(default_z0(1.0), DropRate::Every(7));
    }

    #[test]
    fn resolution_fills_schedule() {
        let cfg = RunConfig::default();
        let ds = cfg.load_dataset().unwrap();
        let spec = cfg.model_spec(&ds).unwrap();
        let r = cfg.resolved(&spec).unwrap();
        assert_eq!(r.z0, Some(DropRate::Every(3)));
        assert_eq!(r.drop_set, ["C3", "F1", "F2", "F3"]);
        let bad = RunConfig { fixed_layer: "flatten".into(), protocol: ProtocolName::Fedd2sFixedLayer, ..cfg.clone() };
        assert!(bad.resolved(&spec).is_err());
        let bad = RunConfig { ua_window: 40, ..cfg };
        assert!(bad.resolved(&spec).is_err());
    }

    #[test]
    fn dataset_sources() {
        let base = Path::new("/data");
        assert_eq!(
            DatasetSource::parse("csv:x.csv", Some(base)).unwrap(),
            DatasetSource::Csv(PathBuf::from("/data/x.csv"))
        );
        assert!(matches!(
            DatasetSource::parse("synth:4,10,16,1.5", None).unwrap(),
            DatasetSource::Synth { classes: 4, per_class: 10, dims: 16, .. }
        ));
        assert!(DatasetSource::parse("synth:4,10", None).is_err());
        assert!(DatasetSource::parse("parquet:x", None).is_err());
    }
}
