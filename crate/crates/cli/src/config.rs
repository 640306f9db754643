//! TOML run configuration. Command-line flags override these values.

use std::path::{Path, PathBuf};

use headliner_core::corpus::FilterBounds;
use headliner_core::decoder::DecodeConfig;
use headliner_core::keywords::TrainParams;
use headliner_core::scorer::NGramParams;
use serde::Deserialize;

use crate::error::CliError;

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub df: Option<PathBuf>,
    pub ner: Option<PathBuf>,
    pub volumes: Option<PathBuf>,
    pub rank_model: Option<PathBuf>,
    pub scores: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub judgements: Option<PathBuf>,
    pub abbreviations: Option<PathBuf>,
    pub access_log: Option<PathBuf>,
}

impl Paths {
    fn resolve(&mut self, base: &Path) {
        for p in [
            &mut self.corpus,
            &mut self.vocab,
            &mut self.model,
            &mut self.df,
            &mut self.ner,
            &mut self.volumes,
            &mut self.rank_model,
            &mut self.scores,
            &mut self.embeddings,
            &mut self.judgements,
            &mut self.abbreviations,
            &mut self.access_log,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NGramSection {
    pub order: usize,
    pub kappa: f64,
    pub copy_bonus: f64,
}

impl Default for NGramSection {
    fn default() -> Self {
        let p = NGramParams::default();
        Self {
            order: p.order,
            kappa: p.kappa,
            copy_bonus: p.copy_bonus,
        }
    }
}

impl From<NGramSection> for NGramParams {
    fn from(s: NGramSection) -> Self {
        NGramParams {
            order: s.order,
            kappa: s.kappa,
            copy_bonus: s.copy_bonus,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VocabSection {
    pub words: usize,
}

impl Default for VocabSection {
    fn default() -> Self {
        Self { words: 4000 }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServeSection {
    pub bind: String,
    pub fsync: bool,
    pub allowed_origins: Vec<String>,
}

impl Default for ServeSection {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
            fsync: false,
            allowed_origins: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub sequential: bool,
    pub paths: Paths,
    pub filter: FilterBounds,
    pub vocab: VocabSection,
    pub ngram: NGramSection,
    pub ranker: TrainParams,
    pub decode: DecodeConfig,
    pub serve: ServeSection,
}

impl RunConfig {
    /// Parses a config file; relative paths are taken relative to its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path.display(), e))?;
        let mut cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.paths.resolve(base);
        Ok(cfg)
    }
}

/// The flag value if given, else the config value; the file must exist.
pub fn require_file(flag: &Option<PathBuf>, config: &Option<PathBuf>, what: &str) -> Result<PathBuf, CliError> {
    let p = flag
        .clone()
        .or_else(|| config.clone())
        .ok_or_else(|| CliError::Validation(format!("no {what} file given")))?;
    if !p.is_file() {
        return Err(CliError::Validation(format!("{what} file {} does not exist", p.display())));
    }
    Ok(p)
}

/// Like [`require_file`] but absence is fine.
pub fn optional_file(flag: &Option<PathBuf>, config: &Option<PathBuf>, what: &str) -> Result<Option<PathBuf>, CliError> {
    match flag.clone().or_else(|| config.clone()) {
        None => Ok(None),
        Some(p) if p.is_file() => Ok(Some(p)),
        Some(p) => Err(CliError::Validation(format!("{what} file {} does not exist", p.display()))),
    }
}
