//! Run configuration: a flat `key = value` file, overridable per key.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::geometry::{RansacConfig, StageConfig};
use crate::hashing::{
    build_hash_family, HashFamily, HashingError, SwitchRounds, DEFAULT_LONG_BITS,
    DEFAULT_SHORT_BITS, DEFAULT_TABLES, MAX_LONG_BITS, MAX_SHORT_BITS,
};
use crate::matcher::MatchConfig;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("`{key}`: cannot parse `{value}`")]
    BadValue { key: String, value: String },
    #[error("`{key}`: {message}")]
    OutOfRange { key: &'static str, message: String },
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
}

pub type Result<T, E = ConfigError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub short_bits: u32,
    pub long_bits: u32,
    pub tables: usize,
    pub seed: u64,
    pub top_k: usize,
    pub tau: u32,
    pub ratio: f32,
    pub min_candidates_for_ratio: usize,
    pub switch_rounds: u8,
    pub fraction: f64,
    pub ransac_iterations: usize,
    pub ransac_threshold: f64,
    pub ransac_confidence: f64,
    /// Epipolar band half-width in pixels; `inf` disables the filter.
    pub band: f64,
    /// Images per block; derived from `memory_budget_mb` when unset.
    pub block_images: Option<usize>,
    pub blocks_per_group: usize,
    pub workers: usize,
    pub memory_budget_mb: u64,
    pub manifest: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// Code caches; defaults to `<output_dir>/codes`.
    pub cache_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let stage = StageConfig::default();
        let m = MatchConfig::default();
        RunConfig {
            short_bits: DEFAULT_SHORT_BITS,
            long_bits: DEFAULT_LONG_BITS,
            tables: DEFAULT_TABLES,
            seed: 0,
            top_k: m.top_k,
            tau: m.hamming_threshold,
            ratio: m.ratio,
            min_candidates_for_ratio: m.min_candidates_for_ratio,
            switch_rounds: SwitchRounds::DEFAULT.get(),
            fraction: stage.fraction,
            ransac_iterations: stage.ransac.max_iterations,
            ransac_threshold: stage.ransac.inlier_threshold,
            ransac_confidence: stage.ransac.confidence,
            band: stage.band,
            block_images: None,
            blocks_per_group: 4,
            workers: 1,
            memory_budget_mb: 512,
            manifest: None,
            output_dir: PathBuf::from("out"),
            cache_dir: None,
        }
    }
}

pub const KEYS: &[&str] = &[
    "m",
    "n",
    "tables",
    "seed",
    "k",
    "tau",
    "ratio",
    "min_candidates_for_ratio",
    "switch_rounds",
    "fraction",
    "ransac_iterations",
    "ransac_threshold",
    "ransac_confidence",
    "band",
    "block_images",
    "blocks_per_group",
    "workers",
    "memory_budget_mb",
    "manifest",
    "output_dir",
    "cache_dir",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
    })
}

fn range(key: &'static str, ok: bool, message: impl Into<String>) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(ConfigError::OutOfRange {
            key,
            message: message.into(),
        })
    }
}

impl RunConfig {
    /// Parse a config file body; later keys override earlier ones.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or(ConfigError::Syntax { line: i + 1 })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Self::parse_str(&text)
    }

    /// Set one key from its text form. Bounds are checked by [`validate`].
    ///
    /// [`validate`]: RunConfig::validate
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "m" => self.short_bits = parse(key, value)?,
            "n" => self.long_bits = parse(key, value)?,
            "tables" => self.tables = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "k" => self.top_k = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "ratio" => self.ratio = parse(key, value)?,
            "min_candidates_for_ratio" => self.min_candidates_for_ratio = parse(key, value)?,
            "switch_rounds" => self.switch_rounds = parse(key, value)?,
            "fraction" => self.fraction = parse(key, value)?,
            "ransac_iterations" => self.ransac_iterations = parse(key, value)?,
            "ransac_threshold" => self.ransac_threshold = parse(key, value)?,
            "ransac_confidence" => self.ransac_confidence = parse(key, value)?,
            "band" => self.band = parse(key, value)?,
            "block_images" => {
                self.block_images = match value {
                    "auto" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "blocks_per_group" => self.blocks_per_group = parse(key, value)?,
            "workers" => self.workers = parse(key, value)?,
            "memory_budget_mb" => self.memory_budget_mb = parse(key, value)?,
            "manifest" => self.manifest = Some(PathBuf::from(value)),
            "output_dir" => self.output_dir = PathBuf::from(value),
            "cache_dir" => self.cache_dir = Some(PathBuf::from(value)),
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        range(
            "m",
            (1..=MAX_SHORT_BITS).contains(&self.short_bits),
            format!("{} outside 1..={MAX_SHORT_BITS}", self.short_bits),
        )?;
        range(
            "n",
            (1..=MAX_LONG_BITS).contains(&self.long_bits),
            format!("{} outside 1..={MAX_LONG_BITS}", self.long_bits),
        )?;
        range("tables", self.tables >= 1, "must be at least 1")?;
        range("k", self.top_k >= 2, "must be at least 2")?;
        range(
            "tau",
            self.tau <= self.long_bits,
            format!("{} exceeds n = {}", self.tau, self.long_bits),
        )?;
        range(
            "ratio",
            self.ratio > 0.0 && self.ratio < 1.0,
            format!("{} outside (0, 1)", self.ratio),
        )?;
        range(
            "min_candidates_for_ratio",
            self.min_candidates_for_ratio >= 2,
            "must be at least 2",
        )?;
        range("switch_rounds", self.switch_rounds <= 7, "outside 0..=7")?;
        range(
            "fraction",
            self.fraction > 0.0 && self.fraction <= 1.0,
            format!("{} outside (0, 1]", self.fraction),
        )?;
        range("ransac_iterations", self.ransac_iterations >= 1, "must be at least 1")?;
        range("ransac_threshold", self.ransac_threshold > 0.0, "must be positive")?;
        range(
            "ransac_confidence",
            self.ransac_confidence > 0.0 && self.ransac_confidence < 1.0,
            "outside (0, 1)",
        )?;
        range("band", self.band >= 0.0, "must be non-negative")?;
        range(
            "block_images",
            self.block_images != Some(0),
            "must be at least 1",
        )?;
        range("blocks_per_group", self.blocks_per_group >= 1, "must be at least 1")?;
        range("workers", self.workers >= 1, "must be at least 1")?;
        range("memory_budget_mb", self.memory_budget_mb >= 1, "must be at least 1")?;
        Ok(())
    }

    pub fn match_config(&self) -> MatchConfig {
        MatchConfig {
            top_k: self.top_k,
            hamming_threshold: self.tau,
            ratio: self.ratio,
            min_candidates_for_ratio: self.min_candidates_for_ratio,
            switch_rounds: SwitchRounds::new(self.switch_rounds).unwrap_or(SwitchRounds::DEFAULT),
        }
    }

    pub fn stage_config(&self) -> StageConfig {
        StageConfig {
            fraction: self.fraction,
            ransac: RansacConfig {
                max_iterations: self.ransac_iterations,
                inlier_threshold: self.ransac_threshold,
                confidence: self.ransac_confidence,
                seed: self.seed,
            },
            band: self.band,
        }
    }

    /// Hyperplanes for the configured family, without centering.
    pub fn hash_family(&self) -> Result<HashFamily, HashingError> {
        let rounds = SwitchRounds::new(self.switch_rounds)?;
        Ok(build_hash_family(self.seed, self.short_bits, self.long_bits, self.tables)?
            .with_switch_rounds(rounds))
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.cache_dir
            .clone()
            .unwrap_or_else(|| self.output_dir.join("codes"))
    }

    pub fn memory_budget_bytes(&self) -> u64 {
        self.memory_budget_mb * 1024 * 1024
    }
}

impl fmt::Display for RunConfig {
    /// Renders every key so the output parses back to an equal config.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "m = {}", self.short_bits)?;
        writeln!(f, "n = {}", self.long_bits)?;
        writeln!(f, "tables = {}", self.tables)?;
        writeln!(f, "seed = {}", self.seed)?;
        writeln!(f, "k = {}", self.top_k)?;
        writeln!(f, "tau = {}", self.tau)?;
        writeln!(f, "ratio = {}", self.ratio)?;
        writeln!(f, "min_candidates_for_ratio = {}", self.min_candidates_for_ratio)?;
        writeln!(f, "switch_rounds = {}", self.switch_rounds)?;
        writeln!(f, "fraction = {}", self.fraction)?;
        writeln!(f, "ransac_iterations = {}", self.ransac_iterations)?;
        writeln!(f, "ransac_threshold = {}", self.ransac_threshold)?;
        writeln!(f, "ransac_confidence = {}", self.ransac_confidence)?;
        writeln!(f, "band = {}", self.band)?;
        match self.block_images {
            Some(n) => writeln!(f, "block_images = {n}")?,
            None => writeln!(f, "block_images = auto")?,
        }
        writeln!(f, "blocks_per_group = {}", self.blocks_per_group)?;
        writeln!(f, "workers = {}", self.workers)?;
        writeln!(f, "memory_budget_mb = {}", self.memory_budget_mb)?;
        if let Some(m) = &self.manifest {
            writeln!(f, "manifest = {}", m.display())?;
        }
        writeln!(f, "output_dir = {}", self.output_dir.display())?;
        if let Some(c) = &self.cache_dir {
            writeln!(f, "cache_dir = {}", c.display())?;
        }
        Ok(())
    }
}
