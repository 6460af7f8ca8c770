//! Flat `key = value` run configuration covering data generation and
//! training. One `seed` key drives both halves so a single file pins a
//! whole experiment. Blank lines and `#` comments are allowed; unknown,
//! duplicate, and malformed keys are errors with line numbers.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::synth::SynthConfig;
use crate::train::{ReadoutMode, TrainConfig};

#[derive(Debug, Error)]
pub enum RunConfigError {
    #[error("line {line}: expected key = value, got {got:?}")]
    Syntax { line: usize, got: String },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: duplicate key {key:?}")]
    DuplicateKey { line: usize, key: String },
    #[error("line {line}: bad value for {key}: {what}")]
    BadValue { line: usize, key: String, what: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// Everything a reproducible run needs besides the input files.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub train: TrainConfig,
}

/// Recognized keys in serialization order. `seed` sets the generator and
/// trainer seeds together.
const KEYS: &[&str] = &[
    "image_size",
    "images_total",
    "radius_min",
    "radius_max",
    "circles_min",
    "circles_max",
    "intensity_mean_dominant",
    "intensity_mean_other",
    "intensity_std",
    "se_size",
    "num_classes",
    "base_filters",
    "epochs_init_clean",
    "epochs_transition",
    "epochs_alternate",
    "alternate_interval",
    "epochs_ntn_diffuse",
    "lr_main",
    "lr_final",
    "lr_trans",
    "lr_drop_epoch",
    "batch_size",
    "readout_mode",
    "ntn_weight_decay",
    "seed",
];

impl RunConfig {
    /// Applies one parsed assignment. Returns false for unknown keys.
    fn set(&mut self, key: &str, value: &str) -> Result<bool, String> {
        fn num<T: FromStr>(value: &str) -> Result<T, String>
        where
            T::Err: std::fmt::Display,
        {
            value.parse().map_err(|e: T::Err| e.to_string())
        }
        // No field meaningfully takes NaN or infinity, and NaN would break
        // the parse/serialize round trip.
        fn finite(value: &str) -> Result<f64, String> {
            let v: f64 = num(value)?;
            if v.is_finite() { Ok(v) } else { Err(format!("{v} is not finite")) }
        }
        match key {
            "image_size" => self.synth.image_size = num(value)?,
            "images_total" => self.synth.images_total = num(value)?,
            "radius_min" => self.synth.radius_min = finite(value)?,
            "radius_max" => self.synth.radius_max = finite(value)?,
            "circles_min" => self.synth.circles_min = num(value)?,
            "circles_max" => self.synth.circles_max = num(value)?,
            "intensity_mean_dominant" => self.synth.intensity_mean_dominant = finite(value)?,
            "intensity_mean_other" => self.synth.intensity_mean_other = finite(value)?,
            "intensity_std" => self.synth.intensity_std = finite(value)?,
            "se_size" => self.synth.se_size = num(value)?,
            "num_classes" => self.train.num_classes = num(value)?,
            "base_filters" => self.train.base_filters = num(value)?,
            "epochs_init_clean" => self.train.epochs_init_clean = num(value)?,
            "epochs_transition" => self.train.epochs_transition = num(value)?,
            "epochs_alternate" => self.train.epochs_alternate = num(value)?,
            "alternate_interval" => self.train.alternate_interval = num(value)?,
            "epochs_ntn_diffuse" => self.train.epochs_ntn_diffuse = num(value)?,
            "lr_main" => self.train.lr_main = finite(value)?,
            "lr_final" => self.train.lr_final = finite(value)?,
            "lr_trans" => self.train.lr_trans = Some(finite(value)?),
            "lr_drop_epoch" => self.train.lr_drop_epoch = num(value)?,
            "batch_size" => self.train.batch_size = num(value)?,
            "readout_mode" => {
                self.train.readout_mode =
                    value.parse::<ReadoutMode>().map_err(|e| e.to_string())?
            }
            "ntn_weight_decay" => self.train.ntn_weight_decay = finite(value)?,
            "seed" => {
                let seed: u64 = num(value)?;
                self.synth.seed = seed;
                self.train.seed = seed;
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn get(&self, key: &str) -> String {
        match key {
            "image_size" => self.synth.image_size.to_string(),
            "images_total" => self.synth.images_total.to_string(),
            "radius_min" => self.synth.radius_min.to_string(),
            "radius_max" => self.synth.radius_max.to_string(),
            "circles_min" => self.synth.circles_min.to_string(),
            "circles_max" => self.synth.circles_max.to_string(),
            "intensity_mean_dominant" => self.synth.intensity_mean_dominant.to_string(),
            "intensity_mean_other" => self.synth.intensity_mean_other.to_string(),
            "intensity_std" => self.synth.intensity_std.to_string(),
            "se_size" => self.synth.se_size.to_string(),
            "num_classes" => self.train.num_classes.to_string(),
            "base_filters" => self.train.base_filters.to_string(),
            "epochs_init_clean" => self.train.epochs_init_clean.to_string(),
            "epochs_transition" => self.train.epochs_transition.to_string(),
            "epochs_alternate" => self.train.epochs_alternate.to_string(),
            "alternate_interval" => self.train.alternate_interval.to_string(),
            "epochs_ntn_diffuse" => self.train.epochs_ntn_diffuse.to_string(),
            "lr_main" => self.train.lr_main.to_string(),
            "lr_final" => self.train.lr_final.to_string(),
            "lr_trans" => {
                self.train.lr_trans.expect("serialized only when set").to_string()
            }
            "lr_drop_epoch" => self.train.lr_drop_epoch.to_string(),
            "batch_size" => self.train.batch_size.to_string(),
            "readout_mode" => self.train.readout_mode.to_string(),
            "ntn_weight_decay" => self.train.ntn_weight_decay.to_string(),
            "seed" => self.train.seed.to_string(),
            other => unreachable!("unlisted key {other}"),
        }
    }

    /// Parses a config text. Every recognized key is optional and defaults
    /// as in [`SynthConfig::default`] and [`TrainConfig::default`].
    pub fn parse_str(text: &str) -> Result<RunConfig, RunConfigError> {
        let mut cfg = RunConfig::default();
        let mut seen: Vec<String> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let stripped = raw.trim();
            if stripped.is_empty() || stripped.starts_with('#') {
                continue;
            }
            let Some((key, value)) = stripped.split_once('=') else {
                return Err(RunConfigError::Syntax { line, got: stripped.to_string() });
            };
            let key = key.trim();
            let value = value.trim();
            if key.is_empty() {
                return Err(RunConfigError::Syntax { line, got: stripped.to_string() });
            }
            if seen.iter().any(|s| s == key) {
                return Err(RunConfigError::DuplicateKey { line, key: key.to_string() });
            }
            match cfg.set(key, value) {
                Ok(true) => seen.push(key.to_string()),
                Ok(false) => {
                    return Err(RunConfigError::UnknownKey { line, key: key.to_string() })
                }
                Err(what) => {
                    return Err(RunConfigError::BadValue { line, key: key.to_string(), what })
                }
            }
        }
        // The seed key is shared, so a file that set it leaves both halves
        // equal; a file that never set it keeps both defaults. Either way
        // the struct stays serializable to one line.
        cfg.synth.seed = cfg.train.seed;
        Ok(cfg)
    }

    /// Canonical text form: keys in a fixed order. `lr_trans` is written
    /// only when set, so "follow lr_main" survives a round trip.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            if *key == "lr_trans" && self.train.lr_trans.is_none() {
                continue;
            }
            let _ = writeln!(out, "{key} = {}", self.get(key));
        }
        out
    }

    pub fn read(path: &Path) -> Result<RunConfig, RunConfigError> {
        let text = fs::read_to_string(path)
            .map_err(|source| RunConfigError::Io { path: path.to_path_buf(), source })?;
        Self::parse_str(&text)
    }

    pub fn write(&self, path: &Path) -> Result<(), RunConfigError> {
        fs::write(path, self.serialize())
            .map_err(|source| RunConfigError::Io { path: path.to_path_buf(), source })
    }
}
