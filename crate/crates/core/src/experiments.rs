//! Seeded end-to-end runs behind each CLI subcommand.
//!
//! Every run writes CSV files with a header row plus one `manifest.json`
//! recording the config hash, seed and a digest of each output.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::config::{sha256_hex, Command, ExperimentConfig, HvpChoice, ModelChoice};
use crate::error::{Error, Result};
use crate::gnh::{gnh_matrix_exact, BatchSource, GnhOperator, HvpMode, ORACLE_MAX_PARAMS};
use crate::influence::{
    similarity_matrix, write_labeled_matrix, DenseSolver, IhvpSolver, InfluenceRecord, Method, SimilarityKind,
};
use crate::linalg::{DenseMatrix, DenseVector};
use crate::lissa::counterexample::CounterExample;
use crate::lissa::{batch_size_study, exact_ihvp, lissa_solve, BatchSetting, LissaConfig};
use crate::models::io::load_checkpoint;
use crate::models::train::{train_full_batch, TrainConfig};
use crate::models::{loss_gradient, test_gradient, Dataset, Example, ModelSpec, ParamVector, SyntheticSpec};
use crate::pbrf::{compare_influences, pbrf_finetune, pbrf_influence, Agreement, PboConfig, Thresholds};
use crate::rng::SeededRng;
use crate::spectral::{
    check_condition_c1, recommend_hyperparams, spectral_stats, stats_report, HyperParams, SketchConfig,
    SpectralStats, StatsConfig, StatsRecord,
};
use crate::stats::{fit_line, MeanSe};
use crate::tfidf::{tfidf_equivalence_check, BowParams, Corpus};

pub const MANIFEST_FILE: &str = "manifest.json";

/// What a run produced, for the caller to print.
#[derive(Clone, Debug, Default)]
pub struct RunSummary {
    pub outputs: Vec<PathBuf>,
    pub lines: Vec<String>,
    pub warnings: Vec<String>,
}

/// A trained model with its train and held-out data.
#[derive(Clone, Debug)]
pub struct Fixture {
    pub spec: ModelSpec,
    pub theta: ParamVector,
    pub train: Arc<Dataset>,
    pub test: Dataset,
}

impl Fixture {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        let (spec, trained) = match &cfg.checkpoint {
            Some(path) => {
                let (spec, theta) = load_checkpoint(path)?;
                (spec, Some(theta))
            }
            None => {
                let spec = match cfg.model {
                    ModelChoice::SoftmaxLinear => ModelSpec::softmax_linear(cfg.input_dim, cfg.n_classes)?,
                    ModelChoice::Mlp => {
                        let mut layers = vec![cfg.input_dim];
                        layers.extend(&cfg.hidden);
                        layers.push(cfg.n_classes);
                        ModelSpec::mlp(layers, cfg.activation)?
                    }
                };
                (spec, None)
            }
        };
        let (train, test) = match (&cfg.train_data, &cfg.test_data) {
            (Some(tr), Some(te)) => (
                Dataset::load_csv(tr, Some(spec.n_classes()))?,
                Dataset::load_csv(te, Some(spec.n_classes()))?,
            ),
            (None, None) => {
                let all = SyntheticSpec {
                    n_classes: spec.n_classes(),
                    dim: spec.input_dim(),
                    n_examples: cfg.n_train + cfg.n_test,
                    separation: cfg.separation,
                }
                .generate(&mut SeededRng::for_component(cfg.seed, "dataset"))?;
                let train: Vec<usize> = (0..cfg.n_train).collect();
                let test: Vec<usize> = (cfg.n_train..cfg.n_train + cfg.n_test).collect();
                (all.subset(&train)?, all.subset(&test)?)
            }
            _ => return Err(Error::Config("give both train_data and test_data, or neither".into())),
        };
        let theta = match trained {
            Some(t) => t,
            None => {
                let theta0 = spec.init_params(&mut SeededRng::for_component(cfg.seed, "init"));
                let tc = TrainConfig {
                    lr: cfg.train_lr,
                    steps: cfg.train_steps,
                    weight_decay: cfg.weight_decay,
                };
                train_full_batch(&spec, &theta0, &train, &tc)?.0
            }
        };
        Ok(Self {
            spec,
            theta,
            train: Arc::new(train),
            test,
        })
    }

    pub fn operator(&self, cfg: &ExperimentConfig, source: BatchSource) -> Result<GnhOperator> {
        let mode = match cfg.hvp {
            HvpChoice::Fd => HvpMode::Fd { delta: cfg.fd_delta },
            HvpChoice::Exact => HvpMode::Exact,
        };
        GnhOperator::new(self.spec.clone(), self.theta.clone(), self.train.clone(), source, mode)
    }

    /// Right-hand side `−∇ℓ(train point)`.
    pub fn rhs(&self, index: usize) -> Result<DenseVector> {
        let ex = self
            .train
            .examples()
            .get(index)
            .ok_or_else(|| Error::Config(format!("train_index {index} outside 0..{}", self.train.len())))?;
        Ok(-loss_gradient(&self.spec, &self.theta, ex)?.values)
    }

    pub fn test_gradients(&self) -> Result<Vec<DenseVector>> {
        self.test
            .examples()
            .iter()
            .map(|ex| Ok(test_gradient(&self.spec, &self.theta, ex)?.values))
            .collect()
    }

    /// Dense GNH, if the model is small enough.
    pub fn oracle(&self) -> Result<Option<DenseMatrix>> {
        if self.theta.len() > ORACLE_MAX_PARAMS {
            return Ok(None);
        }
        gnh_matrix_exact(&self.spec, &self.theta, &self.train).map(Some)
    }
}

/// Spectral statistics of the full-data GNH and the LiSSA settings that
/// follow from them, with any explicit overrides applied.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub stats: SpectralStats,
    pub recommended: HyperParams,
    pub lissa: LissaConfig,
    pub batch_size: usize,
}

pub fn resolve_hyperparams(cfg: &ExperimentConfig, fx: &Fixture) -> Result<Resolved> {
    let full = fx.operator(cfg, BatchSource::Full)?;
    let sc = StatsConfig {
        trace_probes: cfg.trace_probes,
        frobenius_probes: cfg.frobenius_probes,
        sketch: SketchConfig {
            layout: cfg.sketch_layout,
            ..SketchConfig::new(cfg.sketch_dim, cfg.seed)
        },
    };
    let stats = spectral_stats(&full, &sc, &mut SeededRng::for_component(cfg.seed, "spectral-probes"))?;
    let lambda = cfg.lambda_damp.unwrap_or(cfg.lambda_ratio * stats.lambda_max);
    let recommended = recommend_hyperparams(&stats, lambda, cfg.c, cfg.t_multiplier)?;
    let t_steps = cfg
        .t_steps
        .or(recommended.t_steps)
        .ok_or_else(|| Error::Config("λ = 0 gives no step count; set t_steps".into()))?;
    let mut lissa = LissaConfig::new(cfg.eta.unwrap_or(recommended.eta), lambda, t_steps, cfg.seed);
    lissa.snapshot_every = cfg.snapshot_every;
    Ok(Resolved {
        stats,
        batch_size: cfg.batch_size.unwrap_or(recommended.batch_size_min),
        recommended,
        lissa,
    })
}

struct Run<'a> {
    dir: &'a Path,
    summary: RunSummary,
}

impl Run<'_> {
    fn path(&mut self, name: &str) -> PathBuf {
        let p = self.dir.join(name);
        self.summary.outputs.push(p.clone());
        p
    }

    fn csv<S: Serialize>(&mut self, name: &str, rows: &[S]) -> Result<()> {
        let path = self.path(name);
        let mut w = csv::Writer::from_path(&path)?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    fn text(&mut self, name: &str, body: &str) -> Result<()> {
        let path = self.path(name);
        std::fs::write(path, body)?;
        Ok(())
    }

    fn say(&mut self, line: impl Into<String>) {
        self.summary.lines.push(line.into());
    }
}

#[derive(Serialize)]
struct ManifestOutput {
    file: String,
    sha256: String,
    bytes: u64,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    seed: u64,
    config_sha256: String,
    outputs: Vec<ManifestOutput>,
}

fn write_manifest(dir: &Path, command: Command, cfg: &ExperimentConfig, outputs: &[PathBuf]) -> Result<PathBuf> {
    let resolved = cfg.to_toml()?;
    let outputs = outputs
        .iter()
        .map(|p| {
            let bytes = std::fs::read(p)?;
            Ok(ManifestOutput {
                file: p.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default(),
                sha256: sha256_hex(&bytes),
                bytes: bytes.len() as u64,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let m = Manifest {
        tool: "lissa",
        version: env!("CARGO_PKG_VERSION"),
        command: command.name(),
        seed: cfg.seed,
        config_sha256: sha256_hex(resolved.as_bytes()),
        outputs,
    };
    let path = dir.join(MANIFEST_FILE);
    let body = serde_json::to_string_pretty(&m).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(&path, body + "\n")?;
    Ok(path)
}

/// Runs `cfg.command` into `out_dir` and writes the manifest. An error raised
/// after outputs exist (tolerance failure, overflow) still leaves a manifest.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    let command = cfg
        .command
        .ok_or_else(|| Error::Config("no command given".into()))?;
    std::fs::create_dir_all(out_dir)?;
    let mut run = Run {
        dir: out_dir,
        summary: RunSummary::default(),
    };
    let outcome = match command {
        Command::Stats => run_stats(cfg, &mut run),
        Command::Recommend => run_recommend(cfg, &mut run),
        Command::Lissa => run_lissa(cfg, &mut run),
        Command::Convergence => run_convergence(cfg, &mut run),
        Command::PbrfCompare => run_pbrf_compare(cfg, &mut run),
        Command::ConditionC1 => run_condition_c1(cfg, &mut run),
        Command::Counterexample => run_counterexample(cfg, &mut run),
        Command::TfidfCheck => run_tfidf(cfg, &mut run),
        Command::Similarity => run_similarity(cfg, &mut run),
    };
    if run.summary.outputs.is_empty() {
        return outcome.map(|_| run.summary);
    }
    let manifest = write_manifest(out_dir, command, cfg, &run.summary.outputs)?;
    run.summary.outputs.push(manifest);
    outcome.map(|_| run.summary)
}

#[derive(Serialize)]
struct HyperRow {
    model: String,
    n_params: usize,
    trace_per_param: f64,
    lambda_max: f64,
    lambda_damp: f64,
    eta: f64,
    batch_size: usize,
    t_steps: Option<usize>,
}

fn hyper_line(hp: &HyperParams) -> String {
    let t = hp.t_steps.map_or("undefined".to_string(), |t| t.to_string());
    format!("eta={:.6} batch_size={} t_steps={}", hp.eta, hp.batch_size_min, t)
}

fn run_stats(cfg: &ExperimentConfig, run: &mut Run) -> Result<()> {
    let fx = Fixture::build(cfg)?;
    let r = resolve_hyperparams(cfg, &fx)?;
    let name = format!("{:?}", fx.spec.kind).to_lowercase();
    let record = StatsRecord::new(name, &r.stats, &r.recommended);
    run.text("stats.toml", &stats_report(std::slice::from_ref(&record))?)?;
    run.csv("stats.csv", &[record])?;
    run.say(format!(
        "N={} Tr/N={:.6e} (se {:.2e}) lambda_max={:.6e}",
        r.stats.n_params, r.stats.trace_per_param.mean, r.stats.trace_per_param.se, r.stats.lambda_max
    ));
    run.say(hyper_line(&r.recommended));
    Ok(())
}

fn run_recommend(cfg: &ExperimentConfig, run: &mut Run) -> Result<()> {
    let (stats, model) = match (cfg.trace_per_param, cfg.n_params, cfg.lambda_max) {
        (Some(tr), Some(n), Some(lmax)) => (
            SpectralStats {
                trace_per_param: MeanSe { mean: tr, se: 0.0, n: 0 },
                frobenius_sq_per_param: None,
                lambda_max: lmax,
                n_params: n,
            },
            "given".to_string(),
        ),
        (None, None, None) => {
            let fx = Fixture::build(cfg)?;
            (resolve_hyperparams(cfg, &fx)?.stats, "estimated".to_string())
        }
        _ => return Err(Error::Config("give all of trace_per_param, n_params, lambda_max or none".into())),
    };
    let lambda = cfg.lambda_damp.unwrap_or(cfg.lambda_ratio * stats.lambda_max);
    let hp = recommend_hyperparams(&stats, lambda, cfg.c, cfg.t_multiplier)?;
    run.csv(
        "recommend.csv",
        &[HyperRow {
            model,
            n_params: stats.n_params,
            trace_per_param: stats.trace_per_param.mean,
            lambda_max: stats.lambda_max,
            lambda_damp: lambda,
            eta: hp.eta,
            batch_size: hp.batch_size_min,
            t_steps: hp.t_steps,
        }],
    )?;
    run.say(hyper_line(&hp));
    Ok(())
}

#[derive(Serialize)]
struct TraceRow {
    step: usize,
    norm: f64,
    rel_error: Option<f64>,
}

#[derive(Serialize)]
struct SolutionRow {
    index: usize,
    u: f64,
    u_exact: Option<f64>,
}

fn run_lissa(cfg: &ExperimentConfig, run: &mut Run) -> Result<()> {
    let fx = Fixture::build(cfg)?;
    let r = resolve_hyperparams(cfg, &fx)?;
    let op = fx.operator(cfg, BatchSource::Sampled { batch_size: r.batch_size })?;
    let g = fx.rhs(cfg.train_index)?;
    let oracle = fx.oracle()?;
    let u_star = oracle
        .as_ref()
        .map(|h| exact_ihvp(h, r.lissa.lambda_damp, &g))
        .transpose()?;
    let (u, trace) = lissa_solve(&op, &g, &r.lissa)?;
    if op.fd_step_too_large(&u) {
        run.summary.warnings.push(format!(
            "finite-difference step δ‖u‖ = {:.3} exceeds 1; consider a smaller fd_delta",
            cfg.fd_delta * u.norm()
        ));
    }
    let rel = |v: &DenseVector| u_star.as_ref().map(|s| (v - s).norm() / s.norm());
    let rows: Vec<TraceRow> = trace
        .snapshots
        .iter()
        .map(|(step, v)| TraceRow {
            step: *step,
            norm: v.norm(),
            rel_error: rel(v),
        })
        .collect();
    run.csv("lissa_trace.csv", &rows)?;
    let sol: Vec<SolutionRow> = (0..u.len())
        .map(|i| SolutionRow {
            index: i,
            u: u[i],
            u_exact: u_star.as_ref().map(|s| s[i]),
        })
        .collect();
    run.csv("lissa_solution.csv", &sol)?;
    run.say(hyper_line(&HyperParams {
        eta: r.lissa.eta,
        batch_size_min: r.batch_size,
        t_steps: Some(r.lissa.t_steps),
        ..r.recommended
    }));
    let final_rel = rel(&u);
    if let Some(e) = final_rel {
        run.say(format!("relative error vs exact: {e:.4e}"));
    }
    if let Some(tol) = cfg.tolerance {
        let e = final_rel.ok_or_else(|| {
            Error::Config(format!("tolerance needs the dense oracle (≤ {ORACLE_MAX_PARAMS} parameters)"))
        })?;
        if !(e <= tol) {
            return Err(Error::OracleMismatch(format!(
                "LiSSA relative error {e:.4e} exceeds tolerance {tol:.4e}"
            )));
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct SeriesRow {
    batch_size: usize,
    trials: usize,
    step: usize,
    corr: f64,
}

#[derive(Serialize)]
struct ArmRow {
    batch_size: usize,
    trials: usize,
    steps_to_threshold: Option<usize>,
    diverged: usize,
}

fn run_convergence(cfg: &ExperimentConfig, run: &mut Run) -> Result<()> {
    let fx = Fixture::build(cfg)?;
    let r = resolve_hyperparams(cfg, &fx)?;
    let op = fx.operator(cfg, BatchSource::Sampled { batch_size: r.batch_size })?;
    let settings = [
        BatchSetting {
            batch_size: (r.batch_size / cfg.small_batch_divisor).max(1),
            trials: cfg.small_batch_trials,
        },
        BatchSetting {
            batch_size: r.batch_size,
            trials: 1,
        },
        BatchSetting {
            batch_size: r.batch_size * cfg.large_batch_factor,
            trials: 1,
        },
    ];
    let mut lissa = r.lissa.clone();
    lissa.snapshot_every = cfg.snapshot_every.max(1);
    let study = batch_size_study(
        &op,
        &fx.rhs(cfg.train_index)?,
        &lissa,
        &settings,
        &fx.test_gradients()?,
        cfg.corr_threshold,
    )?;
    let rows: Vec<SeriesRow> = study
        .iter()
        .flat_map(|s| {
            s.series.iter().map(move |&(step, corr)| SeriesRow {
                batch_size: s.setting.batch_size,
                trials: s.setting.trials,
                step,
                corr,
            })
        })
        .collect();
    run.csv("convergence.csv", &rows)?;
    let arms: Vec<ArmRow> = study
        .iter()
        .map(|s| ArmRow {
            batch_size: s.setting.batch_size,
            trials: s.setting.trials,
            steps_to_threshold: s.steps_to_threshold,
            diverged: s.diverged,
        })
        .collect();
    for a in &arms {
        let reach = a.steps_to_threshold.map_or("never".into(), |s| s.to_string());
        run.say(format!(
            "batch_size={} trials={} steps_to_{}={} diverged={}",
            a.batch_size, a.trials, cfg.corr_threshold, reach, a.diverged
        ));
    }
    run.csv("convergence_summary.csv", &arms)
}

#[derive(Serialize)]
struct PbrfSummaryRow {
    train_id: usize,
    pearson: Option<f64>,
    slope: Option<f64>,
    relative_residual: Option<f64>,
    class: String,
    pbrf_overflow: bool,
    lissa_diverged: bool,
}

#[derive(Serialize)]
struct PbrfSummary<'a> {
    points: &'a [PbrfSummaryRow],
    counts: BTreeMap<String, usize>,
    mean_pearson: Option<f64>,
}

struct PointOutcome {
    records: Vec<InfluenceRecord>,
    row: PbrfSummaryRow,
}

fn pbrf_point(
    fx: &Fixture,
    op: &GnhOperator,
    base: &LissaConfig,
    pbo: PboConfig,
    position: usize,
    seed: u64,
    tests: &[DenseVector],
    thresholds: &Thresholds,
) -> Result<PointOutcome> {
    let ex: &Example = fx.train.get(position);
    let train_id = fx.train.ids()[position];
    let lissa = LissaConfig { seed, ..base.clone() };
    let g = -loss_gradient(&fx.spec, &fx.theta, ex)?.values;
    let mut row = PbrfSummaryRow {
        train_id,
        pearson: None,
        slope: None,
        relative_residual: None,
        class: "overflow".into(),
        pbrf_overflow: false,
        lissa_diverged: false,
    };
    let u = match lissa_solve(op, &g, &lissa) {
        Ok((u, _)) => Some(u),
        Err(Error::Divergence { .. }) => {
            row.lissa_diverged = true;
            None
        }
        Err(e) => return Err(e),
    };
    let pbo = PboConfig {
        seed,
        epsilon: pbo.epsilon,
        ..PboConfig::matched(&lissa, pbo.batch)
    };
    let result = pbrf_finetune(&fx.spec, &fx.theta, ex, &fx.train, &pbo)?;
    row.pbrf_overflow = result.overflow;
    let test_ids = fx.test.ids();
    let lissa_scores: Option<BTreeMap<usize, f64>> =
        u.map(|u| test_ids.iter().zip(tests).map(|(id, t)| (*id, u.dot(t))).collect());
    let pbrf_scores = if result.overflow {
        None
    } else {
        Some(pbrf_influence(&fx.spec, &result, &fx.theta, &fx.test, pbo.epsilon)?)
    };
    let mut records = Vec::new();
    for (k, &test_id) in test_ids.iter().enumerate() {
        let l = lissa_scores.as_ref().map_or(f64::INFINITY, |m| m[&test_id]);
        let p = pbrf_scores.as_ref().map_or(f64::INFINITY, |m| m[&test_id]);
        records.push(InfluenceRecord::new(train_id, test_id, l, Method::Lissa));
        records.push(InfluenceRecord::new(train_id, test_id, p, Method::Pbrf));
        let _ = k;
    }
    if let (Some(l), Some(p)) = (&lissa_scores, &pbrf_scores) {
        let c = compare_influences(train_id, l, p)?;
        row.class = match c.classify(thresholds) {
            Agreement::Agreeing => "agreeing",
            Agreement::NearZero => "near-zero",
            Agreement::Disagreeing => "disagreeing",
        }
        .into();
        row.pearson = Some(c.pearson);
        row.slope = Some(c.slope);
        row.relative_residual = Some(c.relative_residual);
    }
    Ok(PointOutcome { records, row })
}

#[derive(Serialize)]
struct ScatterCsvRow {
    train_id: usize,
    test_id: usize,
    lissa: f64,
    pbrf: f64,
}

fn run_pbrf_compare(cfg: &ExperimentConfig, run: &mut Run) -> Result<()> {
    let fx = Fixture::build(cfg)?;
    let r = resolve_hyperparams(cfg, &fx)?;
    let source = BatchSource::Sampled { batch_size: r.batch_size };
    let op = fx.operator(cfg, source)?;
    let tests = fx.test_gradients()?;
    let n_points = cfg.n_influence_train.min(fx.train.len());
    let seeds = SeededRng::for_component(cfg.seed, "pbrf-points");
    let thresholds = Thresholds {
        near_zero: cfg.near_zero,
        residual: cfg.agree_residual,
    };
    let pbo = PboConfig {
        epsilon: cfg.epsilon,
        ..PboConfig::matched(&r.lissa, source)
    };
    let outcomes: Vec<PointOutcome> = (0..n_points)
        .into_par_iter()
        .map(|i| {
            let seed = seeds.substream(i as u64).next_u64();
            pbrf_point(&fx, &op, &r.lissa, pbo, i, seed, &tests, &thresholds)
        })
        .collect::<Result<_>>()?;

    let scatter: Vec<ScatterCsvRow> = outcomes
        .iter()
        .flat_map(|o| {
            o.records.chunks(2).map(|pair| ScatterCsvRow {
                train_id: pair[0].train_id,
                test_id: pair[0].test_id,
                lissa: pair[0].score,
                pbrf: pair[1].score,
            })
        })
        .collect();
    run.csv("pbrf_scatter.csv", &scatter)?;
    let records: Vec<InfluenceRecord> = outcomes.iter().flat_map(|o| o.records.iter().copied()).collect();
    run.csv("influences.csv", &records)?;
    let rows: Vec<PbrfSummaryRow> = outcomes.into_iter().map(|o| o.row).collect();
    let mut counts = BTreeMap::new();
    for row in &rows {
        *counts.entry(row.class.clone()).or_insert(0) += 1;
    }
    let pearsons: Vec<f64> = rows.iter().filter_map(|r| r.pearson).collect();
    let mean_pearson = (!pearsons.is_empty()).then(|| pearsons.iter().sum::<f64>() / pearsons.len() as f64);
    let summary = PbrfSummary {
        points: &rows,
        counts: counts.clone(),
        mean_pearson,
    };
    let json = serde_json::to_string_pretty(&summary).map_err(|e| Error::Config(e.to_string()))?;
    run.text("pbrf_summary.json", &(json + "\n"))?;
    for row in &rows {
        run.say(format!(
            "train {}: pearson={} slope={} class={}",
            row.train_id,
            row.pearson.map_or("-".into(), |v| format!("{v:.4}")),
            row.slope.map_or("-".into(), |v| format!("{v:.4}")),
            row.class
        ));
    }
    run.say(format!("classes: {counts:?}"));
    let overflowed = rows.iter().filter(|r| r.pbrf_overflow || r.lissa_diverged).count();
    if overflowed > 0 {
        return Err(Error::NonFinite(format!("{overflowed} training point(s) overflowed")));
    }
    Ok(())
}

#[derive(Serialize)]
struct C1Row {
    batch_size: usize,
    lhs_trace: f64,
    lhs_se: f64,
    rhs_trace: f64,
}

fn run_condition_c1(cfg: &ExperimentConfig, run: &mut Run) -> Result<()> {
    let fx = Fixture::build(cfg)?;
    let op = fx.operator(cfg, BatchSource::Full)?;
    let mut sources: Vec<BatchSource> = cfg
        .c1_batch_sizes
        .iter()
        .map(|&b| BatchSource::Sampled { batch_size: b })
        .collect();
    sources.push(BatchSource::Full);
    let points = check_condition_c1(
        &op,
        &sources,
        cfg.c1_probes,
        &mut SeededRng::for_component(cfg.seed, "condition-c1"),
    )?;
    let rows: Vec<C1Row> = points
        .iter()
        .map(|p| C1Row {
            batch_size: p.batch_size,
            lhs_trace: p.lhs_trace.mean,
            lhs_se: p.lhs_trace.se,
            rhs_trace: p.rhs_trace,
        })
        .collect();
    run.csv("condition_c1.csv", &rows)?;
    let sampled = &points[..cfg.c1_batch_sizes.len()];
    if sampled.len() >= 2 && sampled.iter().all(|p| p.lhs_trace.mean > 0.0) {
        let x: Vec<f64> = sampled.iter().map(|p| (p.batch_size as f64).ln()).collect();
        let y: Vec<f64> = sampled.iter().map(|p| p.lhs_trace.mean.ln()).collect();
        run.say(format!("log-log slope of lhs_trace vs batch size: {:.4}", fit_line(&x, &y)?.slope));
    }
    for p in &points {
        run.say(format!(
            "batch_size={} lhs={:.4e}±{:.1e} rhs={:.4e}",
            p.batch_size, p.lhs_trace.mean, p.lhs_trace.se, p.rhs_trace
        ));
    }
    Ok(())
}

#[derive(Serialize)]
struct MomentCsvRow {
    step: usize,
    monte_carlo: f64,
    monte_carlo_se: f64,
    exact: f64,
    power: f64,
    mean_iterate_norm: f64,
    mean_iterate_bound: f64,
    mean_iterate_se: f64,
}

fn run_counterexample(cfg: &ExperimentConfig, run: &mut Run) -> Result<()> {
    let lmax = cfg.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let lambda = cfg.lambda_damp.unwrap_or(cfg.lambda_ratio * lmax);
    let eta = cfg.eta.unwrap_or(1.0 / (lmax + lambda));
    let ce = CounterExample::build(
        cfg.eigenvalues.len(),
        &cfg.eigenvalues,
        cfg.ce_batch_size,
        lambda,
        eta,
        cfg.seed,
    )?;
    let rows = ce.simulate(cfg.runs, cfg.t_max, cfg.seed)?;
    let csv_rows: Vec<MomentCsvRow> = rows
        .iter()
        .map(|r| MomentCsvRow {
            step: r.step,
            monte_carlo: r.monte_carlo.mean,
            monte_carlo_se: r.monte_carlo.se,
            exact: r.exact,
            power: r.power,
            mean_iterate_norm: r.mean_iterate.error,
            mean_iterate_bound: r.mean_iterate.bound,
            mean_iterate_se: r.mean_iterate.mc_se,
        })
        .collect();
    run.csv("counterexample.csv", &csv_rows)?;
    run.say(format!(
        "growth factor {:.4}, divergence threshold {:.3}, batch size {} ({})",
        ce.growth_factor()?,
        ce.divergence_threshold(),
        ce.batch_size,
        if ce.below_divergence_threshold() { "second moment can diverge" } else { "above threshold" }
    ));
    Ok(())
}

#[derive(Serialize)]
struct TfidfRow {
    lambda_damp: f64,
    d1: usize,
    d2: usize,
    influence_exact: f64,
    tfidf_form: f64,
    plain_form: f64,
    abs_diff: f64,
    rate: f64,
}

fn run_tfidf(cfg: &ExperimentConfig, run: &mut Run) -> Result<()> {
    let corpus = match &cfg.corpus {
        Some(path) => Corpus::load(path, None)?,
        None => {
            let mut rng = SeededRng::for_component(cfg.seed, "tfidf-corpus");
            let logits = rng.gaussian_vector(cfg.vocab_size, 1.0)?;
            let p = BowParams::from_logits(logits)?.p;
            Corpus::sample(&p, cfg.n_docs, cfg.doc_len, &mut rng)?
        }
    };
    let params = BowParams::fit(&corpus, cfg.smoothing)?;
    let len_sq = (corpus.doc_len() as f64).powi(2);
    let mut rows = Vec::new();
    for &lambda in &cfg.tfidf_lambdas {
        let checks = tfidf_equivalence_check(&corpus, &params, lambda)?;
        let worst = checks.iter().map(|c| c.abs_diff).fold(0.0, f64::max);
        run.say(format!("lambda={lambda:e} max|exact − tfidf|/|d|²={:.3e}", worst / len_sq));
        rows.extend(checks.into_iter().map(|c| TfidfRow {
            lambda_damp: lambda,
            d1: c.d1,
            d2: c.d2,
            influence_exact: c.influence_exact,
            tfidf_form: c.tfidf_form,
            plain_form: c.plain_form,
            abs_diff: c.abs_diff,
            rate: c.rate,
        }));
    }
    run.csv("tfidf_pairs.csv", &rows)
}

/// `k` base training points followed by one perturbed copy of each.
fn planted_items(fx: &Fixture, n_items: usize, rng: &mut SeededRng) -> Result<(Vec<Example>, Vec<String>)> {
    let k = n_items / 2;
    if k > fx.train.len() {
        return Err(Error::Config(format!("n_items {n_items} needs {k} training points")));
    }
    let mut items: Vec<Example> = fx.train.examples()[..k].to_vec();
    let mut labels: Vec<String> = (0..k).map(|i| format!("item{i}")).collect();
    for i in 0..k {
        let ex = &fx.train.examples()[i];
        let noise = rng.gaussian_vector(ex.x.len(), 1e-4)?;
        items.push(Example {
            x: &ex.x + noise,
            y: ex.y,
        });
        labels.push(format!("item{i}-para"));
    }
    Ok((items, labels))
}

fn run_similarity(cfg: &ExperimentConfig, run: &mut Run) -> Result<()> {
    let fx = Fixture::build(cfg)?;
    let (items, labels) = planted_items(&fx, cfg.n_items, &mut SeededRng::for_component(cfg.seed, "similarity-items"))?;
    let grads: Vec<DenseVector> = items
        .iter()
        .map(|ex| Ok(loss_gradient(&fx.spec, &fx.theta, ex)?.values))
        .collect::<Result<_>>()?;
    let r = resolve_hyperparams(cfg, &fx)?;
    let lambda = r.lissa.lambda_damp;
    let dense = fx.oracle()?.map(|h| DenseSolver { h, lambda_damp: lambda });
    let op = fx.operator(cfg, BatchSource::Sampled { batch_size: r.batch_size })?;
    let lissa_cfg = r.lissa.clone();
    let lissa_solver = move |g: &DenseVector| -> Result<DenseVector> { Ok(lissa_solve(&op, g, &lissa_cfg)?.0) };
    let solver: &dyn IhvpSolver = match &dense {
        Some(d) => d,
        None => &lissa_solver,
    };
    let grad_sim = similarity_matrix(&grads, labels.clone(), SimilarityKind::Gradient, None)?;
    let inf_sim = similarity_matrix(&grads, labels.clone(), SimilarityKind::Influence, Some(solver))?;
    let diff = grad_sim.difference(&inf_sim)?;
    let path = run.path("similarity_gradient.csv");
    grad_sim.write_csv(&path)?;
    let path = run.path("similarity_influence.csv");
    inf_sim.write_csv(&path)?;
    let path = run.path("similarity_difference.csv");
    write_labeled_matrix(&path, &labels, &diff)?;
    let k = cfg.n_items / 2;
    let mut unrelated = Vec::new();
    for i in 0..2 * k {
        for j in i + 1..2 * k {
            if j != i + k {
                unrelated.push(diff[(i, j)]);
            }
        }
    }
    let paired: Vec<f64> = (0..k).map(|i| diff[(i, i + k)]).collect();
    let mean = |v: &[f64]| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
    run.say(format!(
        "mean gradient − influence similarity: unrelated {:.4}, planted pairs {:.4}",
        mean(&unrelated),
        mean(&paired)
    ));
    Ok(())
}
