use std::path::{Path, PathBuf};

use clap::Args;
use metaikg::dataset::DatasetLayout;
use metaikg::subgraph::DirectionMode;
use metaikg::trainer::{TrainConfig, TrainMode};
use serde::{Deserialize, Serialize};

use crate::failure::{config_error, Failure};

/// Evaluation settings shared by `train`, `eval` and `ksweep`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    pub negatives_per_side: usize,
    pub hits_k: usize,
    pub filtered: bool,
    /// Slice thresholds; `None` entries stand for the few-shot threshold K_T.
    pub slices: Vec<Option<usize>>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            negatives_per_side: metaikg::evaluator::DEFAULT_NEGATIVES_PER_SIDE,
            hits_k: metaikg::evaluator::DEFAULT_HITS_K,
            filtered: true,
            slices: vec![Some(5), Some(10), None],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seeds: Vec<u64>,
    pub layout: DatasetLayout,
    pub train: TrainConfig,
    pub eval: EvalSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            out: None,
            seeds: vec![0, 1, 2, 3],
            layout: DatasetLayout::default(),
            train: TrainConfig::default(),
            eval: EvalSettings::default(),
        }
    }
}

/// Parses `5,10,kt` style slice lists.
pub fn parse_slice(s: &str) -> Result<Option<usize>, String> {
    match s.trim().to_ascii_lowercase().as_str() {
        "kt" | "k_t" => Ok(None),
        other => other
            .parse::<usize>()
            .map(Some)
            .map_err(|_| format!("`{s}` is neither a count nor `kt`")),
    }
}

#[derive(Args, Clone, Debug, Default)]
pub struct RunArgs {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub mode: Option<TrainMode>,
    /// Hop radius of the enclosing subgraphs.
    #[arg(long = "h")]
    pub hops: Option<u32>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    /// Few-shot factor.
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub beta_prime: Option<f64>,
    #[arg(long)]
    pub alpha_init: Option<f64>,
    /// Step size of the learning-rate update (defaults to beta).
    #[arg(long)]
    pub alpha_lr: Option<f64>,
    #[arg(long)]
    pub margin: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub meta_updates: Option<usize>,
    #[arg(long)]
    pub max_nodes: Option<usize>,
    #[arg(long)]
    pub negatives: Option<usize>,
    /// Comma-separated seed list.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Comma-separated slice thresholds; `kt` is the few-shot threshold.
    #[arg(long, value_delimiter = ',', value_parser = parse_slice)]
    pub slices: Option<Vec<Option<usize>>>,
    #[arg(long)]
    pub paper_literal_directions: bool,
    #[arg(long)]
    pub unfiltered_negatives: bool,
    /// Use Adam on the large-shot correction step.
    #[arg(long)]
    pub adam_lrup: bool,
}

pub fn read_config(path: &Path) -> Result<RunConfig, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| config_error(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))
}

impl RunArgs {
    /// Loads `--config` (if any) and applies the flags on top. Returns the
    /// merged config plus warnings about ignored settings.
    pub fn resolve(&self) -> Result<(RunConfig, Vec<String>), Failure> {
        let mut cfg = match &self.config {
            Some(p) => read_config(p)?,
            None => RunConfig::default(),
        };
        let mut warnings = Vec::new();
        let t = &mut cfg.train;
        macro_rules! set {
            ($flag:expr, $field:expr) => {
                if let Some(v) = $flag {
                    $field = v;
                }
            };
        }
        if self.dataset.is_some() {
            cfg.dataset = self.dataset.clone();
        }
        if self.out.is_some() {
            cfg.out = self.out.clone();
        }
        set!(self.mode, t.mode);
        set!(self.hops, t.extract.hops);
        set!(self.layers, t.layers);
        set!(self.dim, t.dim);
        set!(self.gamma, t.gamma);
        set!(self.beta, t.beta);
        set!(self.beta_prime, t.beta_prime);
        set!(self.alpha_init, t.alpha_init);
        set!(self.margin, t.margin);
        set!(self.epochs, t.epochs);
        set!(self.meta_updates, t.meta_updates);
        set!(self.max_nodes, t.extract.max_nodes);
        set!(self.negatives, t.negatives_per_positive);
        if self.alpha_lr.is_some() {
            t.alpha_lr = self.alpha_lr;
        }
        if self.paper_literal_directions {
            t.extract.directions = DirectionMode::PaperLiteral;
        }
        if self.adam_lrup {
            t.adam_lrup = true;
        }
        set!(self.seeds.clone(), cfg.seeds);
        set!(self.slices.clone(), cfg.eval.slices);
        if self.unfiltered_negatives {
            cfg.eval.filtered = false;
        }

        let default_beta_prime = TrainConfig::default().beta_prime;
        match cfg.train.mode {
            TrainMode::NoLrup
                if self.beta_prime.is_some() || cfg.train.beta_prime != default_beta_prime =>
            {
                warnings.push(format!(
                    "mode no-lrup skips the large-shot correction; beta' = {} is ignored",
                    cfg.train.beta_prime
                ));
            }
            TrainMode::NoRpo if self.gamma.is_some() => {
                return Err(config_error(
                    "mode no-rpo does not split relations; --gamma is not allowed",
                ));
            }
            _ => {}
        }
        if cfg.seeds.is_empty() {
            return Err(config_error("at least one seed is required"));
        }
        cfg.train
            .validate()
            .map_err(|e| config_error(e.to_string()))?;
        if cfg.eval.negatives_per_side == 0 || cfg.eval.hits_k == 0 {
            return Err(config_error(
                "negatives_per_side and hits_k must be positive",
            ));
        }
        Ok((cfg, warnings))
    }
}

impl RunConfig {
    pub fn dataset(&self) -> Result<&Path, Failure> {
        self.dataset
            .as_deref()
            .ok_or_else(|| config_error("no dataset given (use --dataset or the config file)"))
    }

    pub fn out(&self) -> Result<&Path, Failure> {
        self.out
            .as_deref()
            .ok_or_else(|| config_error("no output directory given (use --out or the config file)"))
    }

    /// Training config for one seed.
    pub fn for_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.train.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        let file = RunConfig {
            seeds: vec![7],
            train: TrainConfig {
                dim: 8,
                epochs: 3,
                ..TrainConfig::default()
            },
            ..RunConfig::default()
        };
        std::fs::write(&path, serde_json::to_string(&file).unwrap()).unwrap();
        let args = RunArgs {
            config: Some(path),
            epochs: Some(5),
            ..RunArgs::default()
        };
        let (cfg, warnings) = args.resolve().unwrap();
        assert!(warnings.is_empty());
        assert_eq!(cfg.train.dim, 8);
        assert_eq!(cfg.train.epochs, 5);
        assert_eq!(cfg.seeds, vec![7]);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, r#"{"train": {"dim": 4}, "seeds": [1, 2]}"#).unwrap();
        let cfg = read_config(&path).unwrap();
        assert_eq!(cfg.train.dim, 4);
        assert_eq!(cfg.train.layers, TrainConfig::default().layers);
        assert_eq!(cfg.eval, EvalSettings::default());
    }

    #[test]
    fn mode_consistency() {
        let args = RunArgs {
            mode: Some(TrainMode::NoLrup),
            beta_prime: Some(0.01),
            ..RunArgs::default()
        };
        let (_, warnings) = args.resolve().unwrap();
        assert_eq!(warnings.len(), 1);

        let args = RunArgs {
            mode: Some(TrainMode::NoRpo),
            gamma: Some(0.2),
            ..RunArgs::default()
        };
        assert!(args.resolve().is_err());
    }

    #[test]
    fn slice_parsing() {
        assert_eq!(parse_slice("5"), Ok(Some(5)));
        assert_eq!(parse_slice("KT"), Ok(None));
        assert!(parse_slice("five").is_err());
    }
}
