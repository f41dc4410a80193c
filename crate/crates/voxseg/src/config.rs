//! Flat `key=value` configuration documents. One format serves both the
//! operator-facing run config (training/preprocessing fields, grid lists)
//! and the model-config sidecar stored beside checkpoints. `#` starts a
//! comment; later keys override earlier ones; command-line flags override
//! file values.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use voxseg_core::model::ModelConfig;

#[derive(Debug)]
pub enum ConfigError {
    Parse(String),
    Io(std::io::Error),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Parse(msg) => write!(f, "bad config: {msg}"),
            ConfigError::Io(e) => write!(f, "I/O failure: {e}"),
        }
    }
}

impl std::error::Error for ConfigError {}

impl From<std::io::Error> for ConfigError {
    fn from(e: std::io::Error) -> Self {
        ConfigError::Io(e)
    }
}

#[derive(Clone, Debug, Default)]
pub struct ConfigMap {
    values: BTreeMap<String, String>,
}

impl ConfigMap {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut values = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::Parse(format!(
                    "line {}: expected key=value, got {raw:?}",
                    lineno + 1
                )));
            };
            values.insert(key.trim().to_owned(), value.trim().to_owned());
        }
        Ok(ConfigMap { values })
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: String) {
        self.values.insert(key.to_owned(), value);
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64, ConfigError> {
        match self.get(key) {
            None => Ok(default),
            Some(s) => s
                .parse()
                .map_err(|e| ConfigError::Parse(format!("{key}={s}: {e}"))),
        }
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize, ConfigError> {
        match self.get(key) {
            None => Ok(default),
            Some(s) => s
                .parse()
                .map_err(|e| ConfigError::Parse(format!("{key}={s}: {e}"))),
        }
    }

    pub fn u64_or(&self, key: &str, default: u64) -> Result<u64, ConfigError> {
        match self.get(key) {
            None => Ok(default),
            Some(s) => s
                .parse()
                .map_err(|e| ConfigError::Parse(format!("{key}={s}: {e}"))),
        }
    }

    pub fn bool_or(&self, key: &str, default: bool) -> Result<bool, ConfigError> {
        match self.get(key) {
            None => Ok(default),
            Some("true") | Some("1") => Ok(true),
            Some("false") | Some("0") => Ok(false),
            Some(other) => Err(ConfigError::Parse(format!(
                "{key}={other}: expected true/false"
            ))),
        }
    }

    /// Comma-separated f64 list, e.g. `lr_grid=0.01,0.001`.
    pub fn f64_list(&self, key: &str) -> Result<Option<Vec<f64>>, ConfigError> {
        match self.get(key) {
            None => Ok(None),
            Some(s) => s
                .split(',')
                .map(|part| {
                    part.trim()
                        .parse()
                        .map_err(|e| ConfigError::Parse(format!("{key}={s}: {e}")))
                })
                .collect::<Result<Vec<f64>, _>>()
                .map(Some),
        }
    }

    pub fn usize_list(&self, key: &str) -> Result<Option<Vec<usize>>, ConfigError> {
        match self.get(key) {
            None => Ok(None),
            Some(s) => s
                .split(',')
                .map(|part| {
                    part.trim()
                        .parse()
                        .map_err(|e| ConfigError::Parse(format!("{key}={s}: {e}")))
                })
                .collect::<Result<Vec<usize>, _>>()
                .map(Some),
        }
    }

    /// `D,H,W` triple.
    pub fn extent_or(&self, key: &str, default: [usize; 3]) -> Result<[usize; 3], ConfigError> {
        match self.usize_list(key)? {
            None => Ok(default),
            Some(list) if list.len() == 3 => Ok([list[0], list[1], list[2]]),
            Some(list) => Err(ConfigError::Parse(format!(
                "{key}: expected D,H,W, got {} items",
                list.len()
            ))),
        }
    }
}

/// Human-readable model-config sidecar stored beside checkpoints.
pub fn model_config_text(cfg: &ModelConfig) -> String {
    format!(
        "in_channels={}\nnum_classes={}\nbase_filters={}\nlevels={}\nkernel={}\nheads={}\nattention_token_limit={}\ninput_extent={},{},{}\nchannel_affine={}\n",
        cfg.in_channels,
        cfg.num_classes,
        cfg.base_filters,
        cfg.levels,
        cfg.kernel,
        cfg.heads,
        cfg.attention_token_limit,
        cfg.input_extent[0],
        cfg.input_extent[1],
        cfg.input_extent[2],
        cfg.channel_affine,
    )
}

pub fn model_config_from_map(map: &ConfigMap) -> Result<ModelConfig, ConfigError> {
    let defaults = ModelConfig::default();
    Ok(ModelConfig {
        in_channels: map.usize_or("in_channels", defaults.in_channels)?,
        num_classes: map.usize_or("num_classes", defaults.num_classes)?,
        base_filters: map.usize_or("base_filters", defaults.base_filters)?,
        levels: map.usize_or("levels", defaults.levels)?,
        kernel: map.usize_or("kernel", defaults.kernel)?,
        heads: map.usize_or("heads", defaults.heads)?,
        attention_token_limit: map
            .usize_or("attention_token_limit", defaults.attention_token_limit)?,
        input_extent: map.extent_or("input_extent", defaults.input_extent)?,
        channel_affine: map.bool_or("channel_affine", defaults.channel_affine)?,
    })
}

pub fn read_model_config(path: &Path) -> Result<ModelConfig, ConfigError> {
    model_config_from_map(&ConfigMap::from_file(path)?)
}
