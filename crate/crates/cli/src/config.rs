use std::path::{Path, PathBuf};

use acanet::data::{AugmentationConfig, BBox};
use acanet::trainer::TrainConfig;
use acanet::ModelConfig;
use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

/// Name of the effective configuration written into every output directory.
pub const CONFIG_ECHO: &str = "config.toml";

/// Environment variable naming the root under which per-command output
/// directories are created when no output directory is given.
pub const OUTPUT_ROOT_ENV: &str = "ACANET_OUTPUT_ROOT";

/// Output root used when the environment variable is unset.
pub const DEFAULT_OUTPUT_ROOT: &str = "runs";

/// Window size used when neither the file nor the flags set one.
pub const DEFAULT_WINDOW: usize = 480;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_manifest: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_manifest: Option<PathBuf>,
    /// Manifest scored by `evaluate`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Input of `predict`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image: Option<PathBuf>,
    /// Annotation whose object pixels locate the crop in `predict`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixtureConfig {
    pub count: usize,
    pub size: usize,
    pub seed: u64,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        FixtureConfig {
            count: 20,
            size: 128,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BBox>,
    pub overlay: bool,
}

impl Default for PredictConfig {
    fn default() -> Self {
        PredictConfig {
            bbox: None,
            overlay: true,
        }
    }
}

/// Every setting a command can use. Precedence: defaults, then the config
/// file, then command-line flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: PathsConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub augmentation: AugmentationConfig,
    pub fixtures: FixtureConfig,
    pub predict: PredictConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            paths: PathsConfig::default(),
            model: ModelConfig {
                input_size: DEFAULT_WINDOW,
                ..ModelConfig::default()
            },
            train: TrainConfig::default(),
            augmentation: AugmentationConfig::default(),
            fixtures: FixtureConfig::default(),
            predict: PredictConfig::default(),
        }
    }
}

/// A parsed config file and whether it pins the model architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfigFile {
    pub config: RunConfig,
    pub has_model_section: bool,
}

impl RunConfig {
    /// Parses a TOML config; missing keys take their defaults.
    pub fn parse(text: &str) -> anyhow::Result<ConfigFile> {
        let table: toml::Table = text.parse().context("config is not valid TOML")?;
        let has_model_section = table.contains_key("model");
        let config: RunConfig = toml::Value::Table(table)
            .try_into()
            .context("config does not match the expected layout")?;
        Ok(ConfigFile {
            config,
            has_model_section,
        })
    }

    pub fn read(path: &Path) -> anyhow::Result<ConfigFile> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        toml::to_string(self).context("cannot serialize config")
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.augmentation.validate()?;
        if self.fixtures.count == 0 {
            bail!("fixture count must be at least 1");
        }
        Ok(())
    }

    /// Sets every seed at once.
    pub fn set_seed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.train.seed = seed;
        self.augmentation.seed = seed;
        self.fixtures.seed = seed;
    }

    /// The configured output directory, else `<root>/<command>` where the
    /// root comes from `env_root` or [`DEFAULT_OUTPUT_ROOT`].
    pub fn output_dir(&self, env_root: Option<&Path>, command: &str) -> PathBuf {
        match &self.paths.output_dir {
            Some(d) => d.clone(),
            None => env_root
                .unwrap_or_else(|| Path::new(DEFAULT_OUTPUT_ROOT))
                .join(command),
        }
    }

    /// Writes the configuration to `dir/config.toml`, creating `dir`.
    pub fn echo(&self, dir: &Path) -> anyhow::Result<PathBuf> {
        std::fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))?;
        let path = dir.join(CONFIG_ECHO);
        std::fs::write(&path, self.to_toml()?).with_context(|| format!("cannot write {}", path.display()))?;
        Ok(path)
    }
}
