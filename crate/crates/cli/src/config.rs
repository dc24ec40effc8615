use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::failure::Failure;

/// Defaults read from `--config`. Every key is optional.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct FileConfig {
    pub lexicon: Option<PathBuf>,
    pub seed: Option<u64>,
    pub strict_tags: Option<bool>,
    pub preset: Option<String>,
    pub generator: Option<String>,
    pub size: Option<usize>,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub api_key_env: Option<String>,
    pub parallelism: Option<usize>,
    pub target: Option<String>,
    pub trees: Option<usize>,
    pub seeds: Option<usize>,
    pub rate: Option<f64>,
    pub pause_ms: Option<i64>,
    pub overlap_policy: Option<String>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
        let mut cfg: FileConfig = serde_json::from_str(&text)
            .map_err(|e| Failure::Usage(format!("{}:{}: {e}", path.display(), e.line())))?;
        // relative lexicon paths resolve against the config file
        if let (Some(lex), Some(dir)) = (&cfg.lexicon, path.parent()) {
            if lex.is_relative() {
                cfg.lexicon = Some(dir.join(lex));
            }
        }
        Ok(cfg)
    }
}
