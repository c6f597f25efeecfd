//! Flat TOML experiment configuration.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::models::Activation;
use crate::spectral::SketchLayout;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Stats,
    Recommend,
    Lissa,
    Convergence,
    PbrfCompare,
    ConditionC1,
    Counterexample,
    TfidfCheck,
    Similarity,
}

impl Command {
    pub const ALL: [Command; 9] = [
        Command::Stats,
        Command::Recommend,
        Command::Lissa,
        Command::Convergence,
        Command::PbrfCompare,
        Command::ConditionC1,
        Command::Counterexample,
        Command::TfidfCheck,
        Command::Similarity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::Stats => "stats",
            Command::Recommend => "recommend",
            Command::Lissa => "lissa",
            Command::Convergence => "convergence",
            Command::PbrfCompare => "pbrf-compare",
            Command::ConditionC1 => "condition-c1",
            Command::Counterexample => "counterexample",
            Command::TfidfCheck => "tfidf-check",
            Command::Similarity => "similarity",
        }
    }
}

impl FromStr for Command {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Command::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown subcommand {s:?}")))
    }
}

impl std::fmt::Display for Command {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelChoice {
    SoftmaxLinear,
    Mlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HvpChoice {
    Fd,
    Exact,
}

/// Every key is optional in the file; defaults describe a small
/// softmax-linear problem on synthetic data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub command: Option<Command>,
    pub seed: u64,
    pub out_dir: Option<PathBuf>,

    pub model: ModelChoice,
    pub input_dim: usize,
    pub n_classes: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Trained model manifest; when absent the model is trained on the fly.
    pub checkpoint: Option<PathBuf>,

    pub train_data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    pub n_train: usize,
    pub n_test: usize,
    pub separation: f64,
    pub train_lr: f64,
    pub train_steps: usize,
    pub weight_decay: f64,

    pub hvp: HvpChoice,
    pub fd_delta: f64,

    pub trace_probes: usize,
    pub frobenius_probes: usize,
    pub sketch_dim: usize,
    pub sketch_layout: SketchLayout,
    pub c: f64,
    pub t_multiplier: f64,

    /// Absolute damping; takes precedence over `lambda_ratio`.
    pub lambda_damp: Option<f64>,
    /// Damping as a fraction of the estimated `λ_max`.
    pub lambda_ratio: f64,
    pub eta: Option<f64>,
    pub batch_size: Option<usize>,
    pub t_steps: Option<usize>,
    pub snapshot_every: usize,
    /// Training point whose loss gradient is the right-hand side.
    pub train_index: usize,
    /// Fail the run when `‖u − u⋆‖/‖u⋆‖` exceeds this.
    pub tolerance: Option<f64>,

    pub trace_per_param: Option<f64>,
    pub n_params: Option<usize>,
    pub lambda_max: Option<f64>,

    pub small_batch_divisor: usize,
    pub small_batch_trials: usize,
    pub large_batch_factor: usize,
    pub corr_threshold: f64,

    pub n_influence_train: usize,
    pub epsilon: f64,
    pub near_zero: f64,
    pub agree_residual: f64,

    pub c1_batch_sizes: Vec<usize>,
    pub c1_probes: usize,

    pub eigenvalues: Vec<f64>,
    pub ce_batch_size: usize,
    pub runs: usize,
    pub t_max: usize,

    pub corpus: Option<PathBuf>,
    pub vocab_size: usize,
    pub n_docs: usize,
    pub doc_len: usize,
    pub smoothing: f64,
    pub tfidf_lambdas: Vec<f64>,

    pub n_items: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            command: None,
            seed: 0,
            out_dir: None,
            model: ModelChoice::SoftmaxLinear,
            input_dim: 10,
            n_classes: 3,
            hidden: Vec::new(),
            activation: Activation::Tanh,
            checkpoint: None,
            train_data: None,
            test_data: None,
            n_train: 500,
            n_test: 100,
            separation: 1.0,
            train_lr: 0.5,
            train_steps: 200,
            weight_decay: 1e-3,
            hvp: HvpChoice::Fd,
            fd_delta: crate::models::DEFAULT_FD_DELTA,
            trace_probes: 200,
            frobenius_probes: 0,
            sketch_dim: 64,
            sketch_layout: SketchLayout::Summed,
            c: crate::spectral::DEFAULT_C,
            t_multiplier: crate::spectral::DEFAULT_T_MULTIPLIER,
            lambda_damp: None,
            lambda_ratio: 0.05,
            eta: None,
            batch_size: None,
            t_steps: None,
            snapshot_every: 10,
            train_index: 0,
            tolerance: None,
            trace_per_param: None,
            n_params: None,
            lambda_max: None,
            small_batch_divisor: 10,
            small_batch_trials: 10,
            large_batch_factor: 2,
            corr_threshold: 0.99,
            n_influence_train: 5,
            epsilon: crate::pbrf::DEFAULT_EPSILON,
            near_zero: 1e-3,
            agree_residual: 0.25,
            c1_batch_sizes: vec![8, 16, 32, 64],
            c1_probes: 1000,
            eigenvalues: vec![1.0; 10],
            ce_batch_size: 1,
            runs: 2000,
            t_max: 8,
            corpus: None,
            vocab_size: 20,
            n_docs: 50,
            doc_len: 20,
            smoothing: 1.0,
            tfidf_lambdas: vec![1e-8, 1e-6, 1e-4],
            n_items: 20,
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads the file and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.checkpoint,
            &mut cfg.train_data,
            &mut cfg.test_data,
            &mut cfg.corpus,
            &mut cfg.out_dir,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok((cfg, text))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.input_dim == 0 || self.n_classes < 2 {
            return bad("need input_dim ≥ 1 and n_classes ≥ 2".into());
        }
        if self.model == ModelChoice::Mlp && self.hidden.is_empty() {
            return bad("model = \"mlp\" needs at least one hidden width".into());
        }
        if self.n_train == 0 || self.n_test == 0 {
            return bad("n_train and n_test must be positive".into());
        }
        if !(self.fd_delta > 0.0) {
            return bad(format!("fd_delta must be positive, got {}", self.fd_delta));
        }
        if self.trace_probes < 2 {
            return bad("trace_probes must be at least 2".into());
        }
        if !(self.c > 0.0) || !(self.t_multiplier > 0.0) {
            return bad("c and t_multiplier must be positive".into());
        }
        if let Some(l) = self.lambda_damp {
            if !(l >= 0.0) {
                return bad(format!("lambda_damp must be ≥ 0, got {l}"));
            }
        }
        if !(self.lambda_ratio > 0.0) {
            return bad(format!("lambda_ratio must be positive, got {}", self.lambda_ratio));
        }
        if let Some(e) = self.eta {
            if !(e > 0.0) {
                return bad(format!("eta must be positive, got {e}"));
            }
        }
        if self.batch_size == Some(0) || self.t_steps == Some(0) {
            return bad("batch_size and t_steps must be positive".into());
        }
        if !(self.epsilon > 0.0) {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if self.small_batch_divisor == 0 || self.small_batch_trials == 0 || self.large_batch_factor == 0 {
            return bad("convergence batch settings must be positive".into());
        }
        if self.c1_batch_sizes.contains(&0) {
            return bad("c1_batch_sizes must be positive".into());
        }
        if self.eigenvalues.is_empty() || self.eigenvalues.iter().any(|&l| !(l >= 0.0)) {
            return bad("eigenvalues must be a non-empty list of non-negative numbers".into());
        }
        if self.tfidf_lambdas.iter().any(|&l| !(l > 0.0)) {
            return bad("tfidf_lambdas must be positive".into());
        }
        if self.n_items < 2 {
            return bad("n_items must be at least 2".into());
        }
        Ok(())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(ExperimentConfig::parse("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn parses_flat_keys() {
        let cfg = ExperimentConfig::parse(
            "command = \"pbrf-compare\"\nseed = 4\nmodel = \"mlp\"\nhidden = [8]\nactivation = \"tanh\"\nlambda_damp = 0.5\nsketch_layout = \"concatenated\"\n",
        )
        .unwrap();
        assert_eq!(cfg.command, Some(Command::PbrfCompare));
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.model, ModelChoice::Mlp);
        assert_eq!(cfg.lambda_damp, Some(0.5));
        assert_eq!(cfg.sketch_layout, SketchLayout::Concatenated);
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(matches!(ExperimentConfig::parse("etaa = 0.1"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::parse("command = \"fit\""), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::parse("eta = -1.0"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::parse("model = \"mlp\""), Err(Error::Config(_))));
        assert!("train".parse::<Command>().is_err());
    }

    #[test]
    fn round_trips_and_names() {
        let cfg = ExperimentConfig {
            command: Some(Command::TfidfCheck),
            lambda_damp: Some(0.1),
            ..Default::default()
        };
        assert_eq!(ExperimentConfig::parse(&cfg.to_toml().unwrap()).unwrap(), cfg);
        for c in Command::ALL {
            assert_eq!(c.name().parse::<Command>().unwrap(), c);
        }
    }

    #[test]
    fn hash_is_stable() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
