use std::path::{Path, PathBuf};

use attnsync::alignment::CanonicalFaceModel;
use attnsync::dataset::SplitMode;
use attnsync::evaluation::{ChannelGroup, GroupMap};
use attnsync::landmark_io::{blendshape_names, parse_name_list};
use attnsync::model::{ModelConfig, TrainConfig};
use attnsync::pipeline::{Error, StreamSettings};
use attnsync::signal::WindowSpec;
use attnsync::synth::SynthConfig;
use serde::{Deserialize, Serialize};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub input_dir: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    /// Canonical face model JSON; the bundled model when absent.
    pub canonical_model: Option<PathBuf>,
    /// Blendshape name list JSON; must match the bundled order.
    pub blendshape_names: Option<PathBuf>,
    /// Feature group map JSON; the bundled map when absent.
    pub group_map: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Hybrid,
    Mlp,
}

/// Everything a run needs besides its inputs. Loaded from TOML, then
/// overridden by command-line flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub version: u32,
    pub seed: u64,
    pub paths: Paths,
    pub window: WindowSpec,
    pub stream: StreamSettings,
    pub split: SplitMode,
    pub architecture: Arch,
    /// Full layer description; replaces the `architecture` preset when set.
    pub model: Option<ModelConfig>,
    pub train: TrainConfig,
    pub clamp01: bool,
    pub synth: SynthConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            version: CONFIG_VERSION,
            seed: 0,
            paths: Paths::default(),
            window: WindowSpec::default(),
            stream: StreamSettings::default(),
            split: SplitMode::RandomSubjects { n_train: 4, n_val: 1, n_test: 1 },
            architecture: Arch::Hybrid,
            model: None,
            train: TrainConfig::default(),
            clamp01: false,
            synth: SynthConfig::default(),
        }
    }
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn read(path: &Path) -> Result<String, Error> {
    std::fs::read_to_string(path).map_err(|e| bad(format!("{}: {e}", path.display())))
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, Error> {
        let cfg: PipelineConfig = toml::from_str(&read(path)?).map_err(|e| bad(format!("{}: {e}", path.display())))?;
        if cfg.version != CONFIG_VERSION {
            return Err(bad(format!("config version {} is not supported (expected {CONFIG_VERSION})", cfg.version)));
        }
        cfg.check_paths()?;
        Ok(cfg)
    }

    /// Every referenced input must exist.
    pub fn check_paths(&self) -> Result<(), Error> {
        let p = &self.paths;
        for path in [&p.input_dir, &p.canonical_model, &p.blendshape_names, &p.group_map].into_iter().flatten() {
            if !path.exists() {
                return Err(bad(format!("{} does not exist", path.display())));
            }
        }
        Ok(())
    }

    /// Model layout with the run seed applied.
    pub fn model_config(&self) -> ModelConfig {
        let mut m = self.model.clone().unwrap_or_else(|| match self.architecture {
            Arch::Hybrid => ModelConfig::hybrid(self.seed),
            Arch::Mlp => ModelConfig::mlp(self.seed),
        });
        m.seed = self.seed;
        m
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train.clone() }
    }

    pub fn face_model(&self) -> Result<CanonicalFaceModel, Error> {
        if let Some(path) = &self.paths.blendshape_names {
            let names = parse_name_list(&read(path)?)?;
            if names != blendshape_names() {
                return Err(bad(format!("{}: names differ from the tracker order", path.display())));
            }
        }
        match &self.paths.canonical_model {
            Some(path) => Ok(CanonicalFaceModel::from_json(&read(path)?)?),
            None => Ok(CanonicalFaceModel::builtin()),
        }
    }

    pub fn groups(&self) -> Result<Vec<ChannelGroup>, Error> {
        let map = match &self.paths.group_map {
            Some(path) => GroupMap::from_json(&read(path)?)?,
            None => GroupMap::builtin(),
        };
        Ok(map.resolve()?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// `4,1,1` (subject counts) or `time:0.2` (held-out fraction, default purge).
pub fn parse_split(s: &str) -> Result<SplitMode, String> {
    if let Some(f) = s.strip_prefix("time:") {
        let fraction = f.parse().map_err(|e| format!("bad fraction {f:?}: {e}"))?;
        return Ok(SplitMode::ByTime { fraction, purge_s: attnsync::dataset::DEFAULT_PURGE_S });
    }
    let n: Vec<usize> = s
        .split(',')
        .map(|x| x.trim().parse().map_err(|e| format!("bad count {x:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match n[..] {
        [n_train, n_val, n_test] => Ok(SplitMode::RandomSubjects { n_train, n_val, n_test }),
        _ => Err(format!("expected train,val,test counts or time:<fraction>, got {s:?}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = PipelineConfig::default();
        let back: PipelineConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn split_flags() {
        assert_eq!(parse_split("8,2,2").unwrap(), SplitMode::RandomSubjects { n_train: 8, n_val: 2, n_test: 2 });
        assert!(matches!(parse_split("time:0.25").unwrap(), SplitMode::ByTime { fraction, .. } if fraction == 0.25));
        assert!(parse_split("8,2").is_err());
    }
}
