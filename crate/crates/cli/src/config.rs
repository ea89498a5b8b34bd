//! Run configuration: a TOML file, overridden by command-line flags.

use std::path::{Path, PathBuf};

use embinv::defense::{DEFAULT_DEFENSE_ROUNDS, DEFAULT_LAMBDAS};
use embinv::metrics::F1Mode;
use embinv::models::{AugmentConfig, ModelRole};
use embinv::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Run directory; every output of the command lands here.
    pub out: Option<PathBuf>,
    /// Worker threads for per-example parallelism (0 = all cores).
    pub workers: usize,
    pub dataset: DatasetSection,
    pub embedder: Option<EmbedderSpec>,
    pub model: ModelSection,
    pub train: TrainSection,
    pub search: SearchSection,
    pub eval: EvalSection,
    pub defense: DefenseSection,
    pub analyze: AnalyzeSection,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    /// JSONL corpus to ingest (`build-dataset`).
    pub corpus: Option<PathBuf>,
    /// Generate a synthetic corpus instead of reading one.
    pub synthetic: Option<SyntheticCorpus>,
    /// `synthetic:<n>`, `vocab:<path>`, or `fit:<max_words>`.
    pub tokenizer: String,
    pub max_tokens: usize,
    /// An existing dataset directory (for every command but `build-dataset`).
    pub dir: Option<PathBuf>,
    pub eval_fraction: f64,
    pub split_seed: u64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            corpus: None,
            synthetic: None,
            tokenizer: "fit:30000".into(),
            max_tokens: 32,
            dir: None,
            eval_fraction: 0.1,
            split_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticCorpus {
    pub count: usize,
    pub vocab: usize,
    #[serde(default = "one")]
    pub min_len: usize,
    pub max_len: usize,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "kebab-case")]
pub enum EmbedderSpec {
    Synthetic {
        dim: usize,
        #[serde(default)]
        seed: u64,
    },
    Table {
        path: PathBuf,
        #[serde(default = "yes")]
        unit_norm: bool,
        #[serde(default = "default_max_input")]
        max_input_tokens: usize,
    },
    Remote {
        model: String,
        dim: usize,
        #[serde(default = "yes")]
        unit_norm: bool,
        #[serde(default = "default_batch")]
        batch_size: usize,
        #[serde(default = "default_in_flight")]
        max_in_flight: usize,
    },
}

fn yes() -> bool {
    true
}

fn default_max_input() -> usize {
    512
}

fn default_batch() -> usize {
    128
}

fn default_in_flight() -> usize {
    4
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d_model: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ff_hidden: usize,
    pub projection_len: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            d_model: 128,
            heads: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            ff_hidden: 512,
            projection_len: 16,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub role: Option<ModelRole>,
    /// Base checkpoint whose hypotheses the corrector learns to fix.
    pub base: Option<PathBuf>,
    /// Give the corrector the hypothesis embedding.
    pub feedback: bool,
    pub resume: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_fraction: f64,
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub clip_norm: Option<f64>,
    pub eval_every: usize,
    pub augment: AugmentConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        let hp = embinv::models::TrainHyperparams::default();
        Self {
            role: None,
            base: None,
            feedback: true,
            resume: false,
            epochs: hp.epochs,
            batch_size: hp.batch_size,
            learning_rate: hp.learning_rate,
            warmup_fraction: hp.warmup_fraction,
            max_steps: hp.max_steps,
            seed: hp.seed,
            clip_norm: hp.clip_norm,
            eval_every: hp.eval_every,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainSection {
    pub fn hyperparams(&self) -> embinv::models::TrainHyperparams {
        embinv::models::TrainHyperparams {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            warmup_fraction: self.warmup_fraction,
            max_steps: self.max_steps,
            seed: self.seed,
            clip_norm: self.clip_norm,
            eval_every: self.eval_every,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodKind {
    /// Base initializer plus corrector search.
    Correction,
    BaseGreedy,
    BaseBeam,
    BaseNucleus,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSection {
    pub method: MethodKind,
    pub base: Option<PathBuf>,
    pub corrector: Option<PathBuf>,
    pub rounds: usize,
    pub beam_width: usize,
    pub feedback: bool,
    /// `base`, `random`, or `fixed:<text>`.
    pub init: String,
    /// When nonempty, one evaluation per initializer.
    pub inits: Vec<String>,
    pub seed: u64,
    /// Candidates decoded by the base-model baselines.
    pub num_return: usize,
    pub rerank: bool,
    pub top_p: f64,
}

impl Default for SearchSection {
    fn default() -> Self {
        Self {
            method: MethodKind::Correction,
            base: None,
            corrector: None,
            rounds: 20,
            beam_width: 1,
            feedback: true,
            init: "base".into(),
            inits: Vec::new(),
            seed: 0,
            num_return: 1,
            rerank: false,
            top_p: 0.9,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Eval,
    All,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub split: Split,
    pub offset: usize,
    pub limit: Option<usize>,
    pub f1_mode: F1Mode,
    pub records: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            split: Split::Eval,
            offset: 0,
            limit: None,
            f1_mode: F1Mode::Multiset,
            records: true,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DefenseSection {
    pub lambdas: Vec<f64>,
    pub noise_seed: u64,
    pub rounds: usize,
    /// Retrieval task JSON; defaults to self-retrieval over the evaluated texts.
    pub retrieval: Option<PathBuf>,
}

impl Default for DefenseSection {
    fn default() -> Self {
        Self {
            lambdas: DEFAULT_LAMBDAS.to_vec(),
            noise_seed: 0,
            rounds: DEFAULT_DEFENSE_ROUNDS,
            retrieval: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnalysisKind {
    HypothesisCloseness,
    Frequency,
    Scatter,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalyzeSection {
    pub kind: Option<AnalysisKind>,
    /// A `report.json` written by `evaluate` with per-example records.
    pub report: Option<PathBuf>,
    /// Corpus whose word counts define the frequency buckets.
    pub train_corpus: Option<PathBuf>,
    pub bins: usize,
}

impl Default for AnalyzeSection {
    fn default() -> Self {
        Self {
            kind: None,
            report: None,
            train_corpus: None,
            bins: 40,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let raw = std::fs::read_to_string(path).map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&raw).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    pub fn out_dir(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::config("missing required key `out` (or --out)"))
    }

    pub fn dataset_dir(&self) -> Result<&Path> {
        self.dataset
            .dir
            .as_deref()
            .ok_or_else(|| Error::config("missing required key `dataset.dir`"))
    }
}

/// `Some(x)` from a flag wins over the file value.
pub fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<RunConfig>("bogus = 1").is_err());
        assert!(toml::from_str::<RunConfig>("[search]\nwidth = 4").is_err());
    }

    #[test]
    fn sections_parse() {
        let cfg: RunConfig = toml::from_str(
            r#"
out = "runs/a"
[dataset]
synthetic = { count = 10, vocab = 16, max_len = 3 }
tokenizer = "synthetic:16"
max_tokens = 3
[embedder]
kind = "synthetic"
dim = 8
[search]
beam_width = 4
inits = ["base", "random"]
[defense]
lambdas = [0.0, 0.5]
"#,
        )
        .unwrap();
        assert_eq!(cfg.search.beam_width, 4);
        assert_eq!(cfg.search.rounds, 20);
        assert_eq!(cfg.embedder, Some(EmbedderSpec::Synthetic { dim: 8, seed: 0 }));
        assert_eq!(cfg.dataset.synthetic.unwrap().min_len, 1);
        assert_eq!(cfg.defense.lambdas, vec![0.0, 0.5]);
    }
}
