//! Layered configuration: built-in defaults, then a section of the TOML
//! config file, then command-line flags.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use pedloc::height_model::HeightMixture;
use pedloc::net::TrainConfig;
use pedloc::synthgen::SynthConfig;
use pedloc::uncertainty::UncertaintyConfig;

use crate::error::{CliError, Result};

pub const SECTIONS: [&str; 7] = ["gen", "train", "infer", "eval", "ablate", "taskerror", "calib"];

/// Parsed config file. An absent file behaves like an empty one.
#[derive(Debug, Default)]
pub struct ConfigFile {
    table: toml::Table,
    path: Option<PathBuf>,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(ConfigFile::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::parse(&text, Some(path))
    }

    pub fn parse(text: &str, path: Option<&Path>) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| CliError::Config {
            origin: describe(path),
            message: e.to_string(),
        })?;
        if let Some(unknown) = table.keys().find(|k| !SECTIONS.contains(&k.as_str())) {
            return Err(CliError::Config {
                origin: describe(path),
                message: format!("unknown section [{unknown}]; expected one of {SECTIONS:?}"),
            });
        }
        Ok(ConfigFile {
            table,
            path: path.map(Path::to_path_buf),
        })
    }

    /// The named section over the type's defaults.
    pub fn section<T: DeserializeOwned + Default>(&self, name: &str) -> Result<T> {
        match self.table.get(name) {
            None => Ok(T::default()),
            Some(value) => value.clone().try_into().map_err(|e: toml::de::Error| CliError::Config {
                origin: format!("{} [{name}]", describe(self.path.as_deref())),
                message: e.to_string(),
            }),
        }
    }
}

fn describe(path: Option<&Path>) -> String {
    path.map_or_else(|| "config".to_string(), |p| p.display().to_string())
}

/// Prints the resolved configuration and the seed(s) in effect.
pub fn announce<T: Serialize>(command: &str, cfg: &T, seed: &str) -> Result<()> {
    let text = toml::to_string(cfg).map_err(|e| CliError::Config {
        origin: command.to_string(),
        message: e.to_string(),
    })?;
    println!("# {command}: resolved configuration");
    print!("{text}");
    println!("# seed: {seed}");
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Pose {
    #[default]
    Standing,
    Lying,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub n: usize,
    pub seed: u64,
    pub out: PathBuf,
    /// Train, validation and test fractions.
    pub splits: [f64; 3],
    pub pose: Pose,
    pub synth: SynthConfig,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n: 5000,
            seed: 0,
            out: PathBuf::from("data"),
            splits: [0.7, 0.15, 0.15],
            pose: Pose::Standing,
            synth: SynthConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainCmdConfig {
    /// Directory holding `train.jsonl` and optionally `val.jsonl`.
    pub data: PathBuf,
    pub out: PathBuf,
    pub net: TrainConfig,
}

impl Default for TrainCmdConfig {
    fn default() -> Self {
        TrainCmdConfig {
            data: PathBuf::from("data"),
            out: PathBuf::from("model.json"),
            net: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// MC-dropout network with combined intervals.
    #[default]
    Network,
    /// Eval-mode network, aleatoric spread only.
    Point,
    /// Segment-length baseline, no interval.
    Geometric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferConfig {
    pub checkpoint: PathBuf,
    pub input: PathBuf,
    pub out: PathBuf,
    pub method: Method,
    pub mc: UncertaintyConfig,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            checkpoint: PathBuf::from("model.json"),
            input: PathBuf::from("data/test.jsonl"),
            out: PathBuf::from("predictions.jsonl"),
            method: Method::Network,
            mc: UncertaintyConfig::default(),
        }
    }
}

/// Shared by `eval` and `calib`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    pub predictions: PathBuf,
    pub gt: PathBuf,
    pub out_dir: PathBuf,
    pub iou_threshold: f64,
    /// Width of the distance bins used to compare spread with task error.
    pub bin_width: f64,
    pub mix: HeightMixture,
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig {
            predictions: PathBuf::from("predictions.jsonl"),
            gt: PathBuf::from("data/test.jsonl"),
            out_dir: PathBuf::from("reports"),
            iou_threshold: pedloc::evalkit::DEFAULT_IOU_THRESHOLD,
            bin_width: 5.0,
            mix: HeightMixture::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub data: PathBuf,
    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub losses: Vec<pedloc::net::LossKind>,
    pub net: TrainConfig,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            data: PathBuf::from("data"),
            out_dir: PathBuf::from("ablation"),
            seeds: vec![0, 1, 2],
            losses: pedloc::net::LossKind::ALL.to_vec(),
            net: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskErrorConfig {
    pub d_max: f64,
    pub points: usize,
    pub out: PathBuf,
    pub mix: HeightMixture,
}

impl Default for TaskErrorConfig {
    fn default() -> Self {
        TaskErrorConfig {
            d_max: 50.0,
            points: 101,
            out: PathBuf::from("taskerror.csv"),
            mix: HeightMixture::default(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_sections_fall_back_to_defaults() {
        let file = ConfigFile::parse("", None).unwrap();
        assert_eq!(file.section::<GenConfig>("gen").unwrap(), GenConfig::default());
    }

    #[test]
    fn file_values_override_defaults() {
        let file = ConfigFile::parse(
            "[gen]\nn = 12\n[gen.synth]\npixel_noise_std = 0.5\n[train.net]\nepochs = 3\n",
            None,
        )
        .unwrap();
        let gen: GenConfig = file.section("gen").unwrap();
        assert_eq!(gen.n, 12);
        assert_eq!(gen.synth.pixel_noise_std, 0.5);
        assert_eq!(gen.synth.d_range, (5.0, 40.0));
        let train: TrainCmdConfig = file.section("train").unwrap();
        assert_eq!(train.net.epochs, 3);
        assert_eq!(train.net.batch, 512);
    }

    #[test]
    fn typos_are_rejected() {
        let file = ConfigFile::parse("[gen]\nnn = 12\n", None).unwrap();
        assert!(file.section::<GenConfig>("gen").is_err());
        assert!(ConfigFile::parse("[generate]\n", None).is_err());
        assert!(ConfigFile::parse("[gen\n", None).is_err());
    }

    #[test]
    fn resolved_configs_serialize() {
        for text in [
            toml::to_string(&GenConfig::default()),
            toml::to_string(&TrainCmdConfig::default()),
            toml::to_string(&InferConfig::default()),
            toml::to_string(&ReportConfig::default()),
            toml::to_string(&AblateConfig::default()),
            toml::to_string(&TaskErrorConfig::default()),
        ] {
            text.unwrap();
        }
        let text = toml::to_string(&GenConfig::default()).unwrap();
        let back: GenConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, GenConfig::default());
    }
}
