use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use serde_json::Value;
use toplora::analysis::{ablation_dispersion, decompose, sigma_dispersion, AblationDispersion, DecompositionResiduals};
use toplora::gradcheck::{analytic_gradients, compare, numeric_gradients, random_instance, GroupErrors, Variant};
use toplora::linalg::numerical_rank;
use toplora::training::{make_teacher_dataset, train, Dataset, RunMetrics, TeacherTaskSpec, TrainConfig};
use toplora::weights::{adapter_from_entries, read_weights_file, write_weights};
use toplora::{param_count, Adapter, AdapterConfig, AdapterKind, AnyAdapter, Matrix, TopLoraAdapter};

use crate::config::{
    AnalyzeConfig, ConfigFile, FactorSource, GradcheckConfig, ParamsConfig, RunBudget, SweepConfig, TrainSection,
};
use crate::error::{CliError, Result};
use crate::report::{Report, TOOL_VERSION};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Gradcheck,
    Analyze,
    Train,
    Params,
    Sweep,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Gradcheck => "gradcheck",
            Command::Analyze => "analyze",
            Command::Train => "train",
            Command::Params => "params",
            Command::Sweep => "sweep",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Invocation {
    pub command: Command,
    /// Sections absent from the file fall back to their defaults.
    pub config: ConfigFile,
    /// TPLW1 file to analyze instead of a generated adapter.
    pub weights: Option<PathBuf>,
    /// Replaces every seed list (or single seed) in the selected section.
    pub seed_override: Option<u64>,
}

impl Invocation {
    pub fn new(command: Command, config: ConfigFile) -> Self {
        Self {
            command,
            config,
            weights: None,
            seed_override: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Outcome {
    pub report: Report,
    /// 0 success, 1 threshold failure, 3 numeric failure.
    pub exit_code: u8,
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("report types serialize to JSON")
}

pub fn execute(inv: &Invocation) -> Result<Outcome> {
    if inv.weights.is_some() && inv.command != Command::Analyze {
        return Err(CliError::Usage("--weights only applies to analyze".into()));
    }
    let start = Instant::now();
    let cfg = &inv.config;
    let (config, results, exit_code) = match inv.command {
        Command::Gradcheck => {
            let mut c = cfg.gradcheck.clone().unwrap_or_default();
            if let Some(s) = inv.seed_override {
                c.seeds = vec![s];
            }
            let (res, code) = run_gradcheck(&c)?;
            (to_value(&c), to_value(&res), code)
        }
        Command::Analyze => {
            let mut c = cfg.analyze.clone().unwrap_or_default();
            if let Some(s) = inv.seed_override {
                c.seed = s;
                c.ablation.seed = s;
            }
            let res = run_analyze(&c, inv.weights.as_deref())?;
            (to_value(&c), to_value(&res), 0)
        }
        Command::Train => {
            let mut c = cfg.train.clone().unwrap_or_default();
            if let Some(s) = inv.seed_override {
                c.seeds = vec![s];
            }
            let (res, code) = run_train(&c)?;
            (to_value(&c), to_value(&res), code)
        }
        Command::Params => {
            let c = cfg.params.clone().unwrap_or_default();
            (to_value(&c), to_value(&run_params(&c)?), 0)
        }
        Command::Sweep => {
            let mut c = cfg.sweep.clone().unwrap_or_default();
            if let Some(s) = inv.seed_override {
                c.seeds = vec![s];
            }
            let (res, code) = run_sweep(&c)?;
            (to_value(&c), to_value(&res), code)
        }
    };
    Ok(Outcome {
        report: Report {
            tool_version: TOOL_VERSION,
            command: inv.command.name(),
            config,
            results,
            wall_clock_seconds: start.elapsed().as_secs_f64(),
        },
        exit_code,
    })
}

// ---------------------------------------------------------------- gradcheck

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckCase {
    pub variant: Variant,
    pub seed: u64,
    pub errors: GroupErrors,
    pub max_error: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckResults {
    pub cases: Vec<GradcheckCase>,
    pub worst_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Like [`GroupErrors::max`] but NaN-propagating, so a NaN can never pass.
fn max_error(e: &GroupErrors) -> f64 {
    let all = [e.a, e.b, e.theta.unwrap_or(0.0), e.x];
    if all.iter().any(|v| v.is_nan()) {
        f64::NAN
    } else {
        e.max()
    }
}

pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<(GradcheckResults, u8)> {
    cfg.validate()?;
    let mut cases = Vec::new();
    for &variant in &cfg.variants {
        for &seed in &cfg.seeds {
            let (adapter, x) = random_instance(variant, cfg.m, cfg.n, cfg.rank, cfg.tokens, seed)?;
            let mut analytic = analytic_gradients(&adapter, &x)?;
            if cfg.corrupt_gradient {
                let v = analytic.d_a.get(0, 0);
                analytic.d_a.set(0, 0, v * 1.01 + 1e-3);
            }
            let numeric = numeric_gradients(&adapter, &x, cfg.step)?;
            let errors = compare(&analytic, &numeric);
            let max = max_error(&errors);
            cases.push(GradcheckCase {
                variant,
                seed,
                pass: max <= cfg.tolerance,
                max_error: max,
                errors,
            });
        }
    }
    let worst_error = cases.iter().map(|c| c.max_error).fold(0.0, |a: f64, b| if b.is_nan() { b } else { a.max(b) });
    let pass = cases.iter().all(|c| c.pass);
    let code = if pass { 0 } else { 1 };
    Ok((
        GradcheckResults {
            cases,
            worst_error,
            tolerance: cfg.tolerance,
            pass,
        },
        code,
    ))
}

// ------------------------------------------------------------------ analyze

#[derive(Clone, Debug, Serialize)]
pub struct ProjectionReport {
    pub residuals: DecompositionResiduals,
    pub projection_rank: usize,
    /// `max_j ‖Q_B·P·Q_A·x_j − B·A·x_j‖ / (‖B‖_F·‖A‖_F·‖x_j‖)` over probe tokens.
    pub path_identity_error: f64,
    /// `max_j ‖B·A·x̂_j‖ / (‖B‖_F·‖A‖_F·‖x̂_j‖)` for the parts orthogonal to the
    /// input space; absent when the input space is all of `ℝⁿ`.
    pub orthogonal_capture: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct DispersionSummary {
    pub mean_log_sigma: Vec<f64>,
    pub std_log_sigma: Vec<f64>,
    pub mean_std_log_sigma: f64,
    pub max_abs_dev_from_one: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct TokenWiseReport {
    /// Largest numerical rank of a single token's update.
    pub max_token_update_rank: usize,
    pub dispersion: DispersionSummary,
}

#[derive(Clone, Debug, Serialize)]
pub struct AnalyzeResults {
    pub kind: AdapterKind,
    pub m: usize,
    pub n: usize,
    pub rank: usize,
    pub source: &'static str,
    /// Numerical rank of `(α/r)·B·A`.
    pub delta_rank: usize,
    pub projection: Option<ProjectionReport>,
    /// Why the projection analysis was skipped (rank-deficient factors).
    pub projection_skipped: Option<String>,
    pub token_wise: Option<TokenWiseReport>,
    pub ablation: AblationDispersion,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| {
        scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
    })
}

fn load_or_build(cfg: &AnalyzeConfig, weights: Option<&Path>) -> Result<(AnyAdapter, &'static str)> {
    let make_config = |rank: usize| AdapterConfig {
        rank,
        alpha: cfg.alpha.unwrap_or(2.0 * rank as f64),
        dropout_rate: 0.0,
        use_exp: cfg.use_exp,
        use_rmsnorm: cfg.use_rmsnorm,
        seed: cfg.seed,
        ..AdapterConfig::new(rank)
    };
    let mut adapter = if let Some(path) = weights {
        let entries = read_weights_file(path)?;
        let rank = entries
            .iter()
            .find(|(name, _)| name == "A")
            .map_or(cfg.rank, |(_, a)| a.rows());
        adapter_from_entries(entries, make_config(rank))?
    } else {
        let (m, n, r) = (cfg.m, cfg.n, cfg.rank);
        let mut rng = stream_rng(cfg.seed, 0);
        let base = gaussian(&mut rng, m, n, 1.0 / (n as f64).sqrt());
        match cfg.factors {
            FactorSource::Init => AnyAdapter::init(cfg.kind, make_config(r), base)?,
            FactorSource::Random => {
                let a = gaussian(&mut rng, r, n, 1.0 / (n as f64).sqrt());
                let b = gaussian(&mut rng, m, r, 1.0 / (r as f64).sqrt());
                let theta = gaussian(&mut rng, r, n, 1.0 / (n as f64).sqrt());
                match cfg.kind {
                    AdapterKind::Lora => toplora::LoraAdapter::from_parts(make_config(r), base, a, b)?.into(),
                    AdapterKind::TopLora => TopLoraAdapter::from_parts(make_config(r), base, a, b, theta)?.into(),
                }
            }
        }
    };
    if cfg.zero_theta {
        if let AnyAdapter::TopLora(top) = &mut adapter {
            let shape = top.lora_a().shape();
            top.set_theta(Matrix::zeros(shape.0, shape.1))?;
        }
    }
    Ok((adapter, if weights.is_some() { "weights" } else { "generated" }))
}

fn projection_report(adapter: &AnyAdapter, tokens: &Matrix) -> toplora::Result<ProjectionReport> {
    let (a, b) = (adapter.lora_a(), adapter.lora_b());
    let pa = decompose(a, b)?;
    let residuals = pa.residuals(a, b)?;
    let ba = b.matmul(a)?;
    let norm = b.frobenius_norm() * a.frobenius_norm();
    let mut path_identity_error: f64 = 0.0;
    let mut orthogonal_capture: f64 = 0.0;
    for j in 0..tokens.cols() {
        let x = tokens.column(j);
        let direct = ba.mul_vec(&x)?;
        let via = pa.output_via_projection(&x)?;
        path_identity_error = path_identity_error.max(via.sub(&direct)?.norm() / (norm * x.norm()));
        if pa.rank() < a.cols() {
            let perp = pa.orthogonal_component(&x)?;
            orthogonal_capture = orthogonal_capture.max(ba.mul_vec(&perp)?.norm() / (norm * perp.norm()));
        }
    }
    Ok(ProjectionReport {
        residuals,
        projection_rank: numerical_rank(&pa.projection),
        path_identity_error,
        orthogonal_capture: (pa.rank() < a.cols()).then_some(orthogonal_capture),
    })
}

fn token_wise_report(top: &TopLoraAdapter, tokens: &Matrix) -> toplora::Result<TokenWiseReport> {
    let mut max_token_update_rank = 0;
    for j in 0..tokens.cols() {
        let w = top.effective_weight(&tokens.column(j))?;
        max_token_update_rank = max_token_update_rank.max(numerical_rank(&w));
    }
    let d = sigma_dispersion(top, tokens)?;
    Ok(TokenWiseReport {
        max_token_update_rank,
        dispersion: DispersionSummary {
            mean_std_log_sigma: d.mean_std_log_sigma(),
            mean_log_sigma: d.mean_log_sigma,
            std_log_sigma: d.std_log_sigma,
            max_abs_dev_from_one: d.max_abs_dev_from_one,
        },
    })
}

pub fn run_analyze(cfg: &AnalyzeConfig, weights: Option<&Path>) -> Result<AnalyzeResults> {
    cfg.validate()?;
    let (adapter, source) = load_or_build(cfg, weights)?;
    let (m, n) = adapter.base().shape();
    let rank = adapter.config().rank;
    let mut rng = stream_rng(cfg.seed, 1);
    let tokens = gaussian(&mut rng, n, cfg.tokens, 1.0);

    let delta = adapter.lora_b().matmul(adapter.lora_a())?.scale(adapter.config().scaling());
    let (projection, projection_skipped) = match projection_report(&adapter, &tokens) {
        Ok(p) => (Some(p), None),
        Err(e @ toplora::Error::RankDeficient { .. }) => (None, Some(e.to_string())),
        Err(e) => return Err(e.into()),
    };
    let token_wise = match &adapter {
        AnyAdapter::TopLora(top) => Some(token_wise_report(top, &tokens)?),
        AnyAdapter::Lora(_) => None,
    };
    let ab = &cfg.ablation;
    let ablation = ablation_dispersion(ab.rank, ab.n, ab.tokens, ab.target_rms, ab.seed)?;
    Ok(AnalyzeResults {
        kind: adapter.kind(),
        m,
        n,
        rank,
        source,
        delta_rank: numerical_rank(&delta),
        projection,
        projection_skipped,
        token_wise,
        ablation,
    })
}

// ------------------------------------------------------------------- params

#[derive(Clone, Debug, Serialize)]
pub struct ParamsResults {
    pub lora: u64,
    pub toplora: u64,
    /// `toplora / lora`.
    pub ratio: f64,
}

pub fn run_params(cfg: &ParamsConfig) -> Result<ParamsResults> {
    if cfg.m == 0 || cfg.n == 0 || cfg.rank == 0 || cfg.modules == 0 {
        return Err(CliError::Config("params: m, n, rank and modules must be >= 1".into()));
    }
    let lora = param_count(AdapterKind::Lora, cfg.m, cfg.n, cfg.rank, cfg.modules);
    let toplora = param_count(AdapterKind::TopLora, cfg.m, cfg.n, cfg.rank, cfg.modules);
    Ok(ParamsResults {
        lora,
        toplora,
        ratio: toplora as f64 / lora as f64,
    })
}

// ------------------------------------------------------------ train / sweep

#[derive(Clone, Debug, Serialize)]
pub struct Divergence {
    pub step: usize,
    pub loss: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunRecord {
    pub kind: AdapterKind,
    pub rank: usize,
    pub seed: u64,
    pub metrics: Option<RunMetrics>,
    pub diverged: Option<Divergence>,
}

impl RunRecord {
    fn final_loss(&self) -> Option<f64> {
        self.metrics.as_ref().map(|m| m.final_eval_loss)
    }
}

#[derive(Clone, Copy, Debug)]
struct Job {
    kind: AdapterKind,
    rank: usize,
    seed: u64,
}

struct Finished {
    record: RunRecord,
    adapter: AnyAdapter,
}

fn run_job(job: Job, budget: &RunBudget, base: &Matrix, train_set: &Dataset, eval_set: &Dataset) -> Result<Finished> {
    let config = AdapterConfig::new(job.rank).with_dropout(budget.dropout).with_seed(job.seed);
    let mut adapter = AnyAdapter::init(job.kind, config, base.clone())?;
    let tc = train_config(budget, job.seed);
    let (metrics, diverged) = match train(&mut adapter, train_set, eval_set, &tc) {
        Ok(m) => (Some(m), None),
        Err(toplora::Error::Divergence { step, loss }) => (None, Some(Divergence { step, loss })),
        Err(e) => return Err(e.into()),
    };
    Ok(Finished {
        record: RunRecord {
            kind: job.kind,
            rank: job.rank,
            seed: job.seed,
            metrics,
            diverged,
        },
        adapter,
    })
}

fn train_config(budget: &RunBudget, seed: u64) -> TrainConfig {
    TrainConfig {
        steps: budget.steps,
        batch_size: budget.batch_size,
        learning_rate: budget.learning_rate,
        seed,
    }
}

/// Runs independent jobs on a small thread pool; results come back in job order.
fn run_jobs(task: &TeacherTaskSpec, budget: &RunBudget, jobs: &[Job]) -> Result<Vec<Finished>> {
    train_config(budget, 0).validate()?;
    AdapterConfig::new(1).with_dropout(budget.dropout).validate()?;
    let (train_set, eval_set, teacher) = make_teacher_dataset(task)?;
    // Surface configuration errors before any work starts.
    for job in jobs {
        AnyAdapter::init(job.kind, AdapterConfig::new(job.rank), teacher.base.clone())?;
    }

    let workers = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(jobs.len())
        .max(1);
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<Finished>>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&job) = jobs.get(i) else { break };
                let out = run_job(job, budget, &teacher.base, &train_set, &eval_set);
                *slots[i].lock().expect("worker panicked") = Some(out);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("worker panicked").expect("every job ran"))
        .collect()
}

/// Median of the finite values; the mean of the middle pair for even counts.
pub fn median(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let mut v: Vec<f64> = values.into_iter().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let k = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[k] } else { 0.5 * (v[k - 1] + v[k]) })
}

#[derive(Clone, Debug, Serialize)]
pub struct KindSummary {
    pub kind: AdapterKind,
    pub rank: usize,
    pub median_final_eval_loss: Option<f64>,
    pub completed: usize,
    pub diverged: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainResults {
    pub runs: Vec<RunRecord>,
    pub summary: Vec<KindSummary>,
    pub weights_written: Vec<PathBuf>,
}

fn summarize(records: &[RunRecord], kind: AdapterKind, rank: usize) -> KindSummary {
    let mine: Vec<&RunRecord> = records.iter().filter(|r| r.kind == kind && r.rank == rank).collect();
    KindSummary {
        kind,
        rank,
        median_final_eval_loss: median(mine.iter().filter_map(|r| r.final_loss())),
        completed: mine.iter().filter(|r| r.metrics.is_some()).count(),
        diverged: mine.iter().filter(|r| r.diverged.is_some()).count(),
    }
}

pub fn run_train(cfg: &TrainSection) -> Result<(TrainResults, u8)> {
    cfg.validate()?;
    let jobs: Vec<Job> = cfg
        .kinds
        .iter()
        .flat_map(|&kind| cfg.seeds.iter().map(move |&seed| Job { kind, rank: cfg.rank, seed }))
        .collect();
    let finished = run_jobs(&cfg.task, &cfg.budget, &jobs)?;

    let mut weights_written = Vec::new();
    if let Some(dir) = &cfg.weights_dir {
        std::fs::create_dir_all(dir)?;
        for f in finished.iter().filter(|f| f.record.metrics.is_some()) {
            let r = &f.record;
            let path = dir.join(format!("{}-r{}-seed{}.tplw", r.kind, r.rank, r.seed));
            let mut file = std::io::BufWriter::new(std::fs::File::create(&path)?);
            write_weights(&mut file, &f.adapter.named_matrices())?;
            std::io::Write::flush(&mut file)?;
            weights_written.push(path);
        }
    }

    let runs: Vec<RunRecord> = finished.into_iter().map(|f| f.record).collect();
    let summary = cfg.kinds.iter().map(|&k| summarize(&runs, k, cfg.rank)).collect();
    let code = if runs.iter().any(|r| r.diverged.is_some()) { 3 } else { 0 };
    Ok((
        TrainResults {
            runs,
            summary,
            weights_written,
        },
        code,
    ))
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub kind: AdapterKind,
    pub rank: usize,
    /// Per seed, in config order; `None` for diverged runs.
    pub final_eval_losses: Vec<Option<f64>>,
    pub median_final_eval_loss: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct TrendCheck {
    pub kind: AdapterKind,
    /// Median final loss never increases as rank grows.
    pub non_increasing: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepChecks {
    pub trends: Vec<TrendCheck>,
    /// Present when both kinds were swept.
    pub toplora_le_lora_every_rank: Option<bool>,
}

impl SweepChecks {
    pub fn all_hold(&self) -> bool {
        self.trends.iter().all(|t| t.non_increasing) && self.toplora_le_lora_every_rank != Some(false)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepResults {
    pub table: Vec<SweepRow>,
    pub checks: SweepChecks,
}

impl SweepResults {
    pub fn median(&self, kind: AdapterKind, rank: usize) -> Option<f64> {
        self.table
            .iter()
            .find(|r| r.kind == kind && r.rank == rank)
            .and_then(|r| r.median_final_eval_loss)
    }
}

pub fn run_sweep(cfg: &SweepConfig) -> Result<(SweepResults, u8)> {
    cfg.validate()?;
    let mut ranks = cfg.ranks.clone();
    ranks.sort_unstable();
    let mut jobs = Vec::new();
    for &kind in &cfg.kinds {
        for &rank in &ranks {
            for &seed in &cfg.seeds {
                jobs.push(Job { kind, rank, seed });
            }
        }
    }
    let records: Vec<RunRecord> = run_jobs(&cfg.task, &cfg.budget, &jobs)?
        .into_iter()
        .map(|f| f.record)
        .collect();

    let mut table = Vec::new();
    for &kind in &cfg.kinds {
        for &rank in &ranks {
            let losses: Vec<Option<f64>> = records
                .iter()
                .filter(|r| r.kind == kind && r.rank == rank)
                .map(RunRecord::final_loss)
                .collect();
            table.push(SweepRow {
                kind,
                rank,
                median_final_eval_loss: median(losses.iter().flatten().copied()),
                final_eval_losses: losses,
            });
        }
    }
    let results_for = |kind| -> Vec<Option<f64>> {
        table
            .iter()
            .filter(|r| r.kind == kind)
            .map(|r| r.median_final_eval_loss)
            .collect()
    };
    let trends = cfg
        .kinds
        .iter()
        .map(|&kind| {
            let meds = results_for(kind);
            let non_increasing = meds.windows(2).all(|w| matches!((w[0], w[1]), (Some(a), Some(b)) if b <= a))
                && meds.iter().all(Option::is_some);
            TrendCheck { kind, non_increasing }
        })
        .collect();
    let both = cfg.kinds.contains(&AdapterKind::Lora) && cfg.kinds.contains(&AdapterKind::TopLora);
    let toplora_le_lora_every_rank = both.then(|| {
        results_for(AdapterKind::TopLora)
            .iter()
            .zip(results_for(AdapterKind::Lora))
            .all(|(t, l)| matches!((t, l), (Some(t), Some(l)) if *t <= l))
    });
    let checks = SweepChecks {
        trends,
        toplora_le_lora_every_rank,
    };

    let code = if records.iter().any(|r| r.diverged.is_some()) {
        3
    } else if cfg.enforce_checks && !checks.all_hold() {
        1
    } else {
        0
    };
    Ok((SweepResults { table, checks }, code))
}
