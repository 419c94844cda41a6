//! Declarative run configuration.
//!
//! A config is a TOML document. An optional `preset` names a dataset whose
//! published hyperparameters become the defaults; any key in the document
//! overrides them. The fully resolved config is written next to the outputs
//! and loads back to the same value.

use std::fs;
use std::path::{Path, PathBuf};

use nas_rec::data::MeanSource;
use nas_rec::snapshot::ModelTag;
use nas_rec::train::TrainConfig;
use nas_rec::{NasError, Result};
use serde::{Deserialize, Serialize};

pub const RESOLVED_NAME: &str = "config.resolved.toml";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// d = 50, h = 3, 9 negatives per positive.
    Epinions,
    /// d = 80, h = 4, 6 negatives per positive.
    Flixster,
}

impl Preset {
    fn apply(self, train: &mut TrainConfig) {
        let (d, h, neg) = match self {
            Preset::Epinions => (50, 3, 9),
            Preset::Flixster => (80, 4, 6),
        };
        train.d = d;
        train.h = h;
        train.neg_per_pos = neg;
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Validation,
    #[default]
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSettings {
    pub train_frac: f64,
    pub val_frac: f64,
    pub seed: u64,
}

impl Default for SplitSettings {
    fn default() -> Self {
        SplitSettings {
            train_frac: 0.75,
            val_frac: 0.10,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    /// Cutoff of recall@N and NDCG@N.
    pub n: usize,
    /// Repetitions; run `r` samples friends with seed `seed + r`.
    pub runs: usize,
    pub seed: u64,
    pub partition: Partition,
    pub mean_source: MeanSource,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            n: 10,
            runs: 5,
            seed: 0,
            partition: Partition::Test,
            mean_source: MeanSource::Labeled,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<Preset>,
    pub model: ModelTag,
    /// Weights of the ablation: 1/k when true, 1 otherwise.
    pub nas_star_mean: bool,
    /// Directory written by `prepare`.
    pub data_dir: PathBuf,
    pub output_dir: PathBuf,
    pub split: SplitSettings,
    pub train: TrainConfig,
    pub eval: EvalSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            preset: None,
            model: ModelTag::Nas,
            nas_star_mean: false,
            data_dir: PathBuf::from("data"),
            output_dir: PathBuf::from("runs"),
            split: SplitSettings::default(),
            train: TrainConfig::default(),
            eval: EvalSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn defaults_for(preset: Option<Preset>) -> Self {
        let mut c = RunConfig {
            preset,
            ..RunConfig::default()
        };
        if let Some(p) = preset {
            p.apply(&mut c.train);
        }
        c
    }

    /// Parses a document, filling unspecified keys from the preset named in
    /// `preset_override` or in the document itself.
    pub fn from_toml(text: &str, preset_override: Option<Preset>) -> Result<Self> {
        let mut doc: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| NasError::Config(format!("invalid TOML: {e}")))?;
        if let Some(p) = preset_override {
            let name = toml::Value::try_from(p).expect("preset serializes");
            doc.insert("preset".into(), name);
        }
        let preset: Option<Preset> = match doc.get("preset") {
            None => None,
            Some(v) => Some(
                v.clone()
                    .try_into()
                    .map_err(|e: toml::de::Error| NasError::Config(format!("preset: {e}")))?,
            ),
        };
        let mut merged =
            toml::Table::try_from(Self::defaults_for(preset)).expect("defaults serialize");
        merge(&mut merged, doc);
        toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| NasError::Config(e.message().to_string()))
    }

    pub fn load(path: &Path, preset_override: Option<Preset>) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| NasError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text, preset_override).map_err(|e| match e {
            NasError::Config(msg) => NasError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Every violated constraint across all sections.
    pub fn problems(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .train
            .problems()
            .into_iter()
            .map(|p| format!("train.{p}"))
            .collect();
        let s = &self.split;
        if !(s.train_frac > 0.0 && s.val_frac > 0.0 && s.train_frac + s.val_frac < 1.0) {
            out.push(format!(
                "split fractions must be positive with train_frac + val_frac < 1 (got {} + {})",
                s.train_frac, s.val_frac
            ));
        }
        if self.eval.n == 0 {
            out.push("eval.n must be at least 1".into());
        }
        if self.eval.runs == 0 {
            out.push("eval.runs must be at least 1".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(NasError::Config(p.join("; ")))
        }
    }

    pub fn eval_seeds(&self) -> Vec<u64> {
        (0..self.eval.runs as u64)
            .map(|r| self.eval.seed + r)
            .collect()
    }
}

/// Recursively overlays `over` onto `base`.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Resolves relative output paths under `NAS_OUTPUT_ROOT` when it is set.
pub fn output_path(path: &Path) -> PathBuf {
    match std::env::var_os("NAS_OUTPUT_ROOT") {
        Some(root) if path.is_relative() => Path::new(&root).join(path),
        _ => path.to_path_buf(),
    }
}
