use std::path::{Path, PathBuf};

use precofact::{ModelConfig, TrainConfig};
use serde::Deserialize;

use crate::error::{CliError, CliResult};

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub train: Option<PathBuf>,
    pub validation: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

/// `[model]`, `[train]` and `[paths]` tables; every key is optional and
/// unknown keys are rejected.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub paths: Paths,
}

impl RunConfigFile {
    pub fn parse(text: &str) -> CliResult<Self> {
        let config: Self = toml::from_str(text).map_err(|e| {
            let detail = match e.span() {
                Some(span) => format!(
                    "line {}: {}",
                    text[..span.start].matches('\n').count() + 1,
                    e.message()
                ),
                None => e.message().to_string(),
            };
            CliError::config(detail)
        })?;
        config.model.validate()?;
        config.train.validate()?;
        Ok(config)
    }

    /// Relative paths inside the file resolve against its directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| precofact::Error::io(path, e))?;
        let mut config = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut config.paths.train,
            &mut config.paths.validation,
            &mut config.paths.output,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = RunConfigFile::parse("").unwrap();
        assert_eq!(c.model, ModelConfig::default());
        assert_eq!(c.train, TrainConfig::default());
    }

    #[test]
    fn sections_and_lr_alias() {
        let c = RunConfigFile::parse(
            "[model]\nd = 8\nheads = 2\nvariant = \"no_coatt\"\nactivation = \"mish\"\n[train]\nlr = 1e-3\nseed = 42\n[paths]\ntrain = \"a.pcf1\"\n",
        )
        .unwrap();
        assert_eq!(c.model.d, 8);
        assert_eq!(c.train.learning_rate, 1e-3);
        assert_eq!(c.train.seed, 42);
        assert_eq!(c.paths.train.as_deref(), Some(Path::new("a.pcf1")));
    }

    #[test]
    fn unknown_keys_are_named() {
        for (text, key) in [
            ("[model]\nwidth = 3\n", "width"),
            ("[train]\nmomentum = 0.9\n", "momentum"),
            ("[paths]\ntest = \"x\"\n", "test"),
            ("[extra]\n", "extra"),
        ] {
            let err = RunConfigFile::parse(text).unwrap_err();
            assert_eq!(err.code, 3);
            assert!(err.detail.contains(key), "{}", err.detail);
        }
    }

    #[test]
    fn invalid_values_are_config_errors() {
        assert_eq!(
            RunConfigFile::parse("[model]\nd = 10\nheads = 4\n")
                .unwrap_err()
                .code,
            3
        );
        assert_eq!(
            RunConfigFile::parse("[train]\nbatch_size = 0\n")
                .unwrap_err()
                .code,
            3
        );
    }
}
