use std::path::PathBuf;
use std::sync::Arc;

use clap::{Args, ValueEnum};
use serde::Serialize;

use medtmle::data::Dataset;
use medtmle::gcomp::{psi_all, TargetSpec};
use medtmle::haleic::{haleic_tmle, HalConfig, Sampling};
use medtmle::inference::{simultaneous_ci, with_contrasts, CiRow, DEFAULT_MC_DRAWS};
use medtmle::likelihood::{fit_initial, FitWarning, ModelSpec, DEFAULT_P_MIN};
use medtmle::schema::NodeSchema;
use medtmle::tmle::{run_tmle, Mode, StopRule, TmleConfig, TraceEntry};

use crate::{create, out_dir, read, require_seed, write_json, CliResult, Status};

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorMode {
    Onestep,
    Iterative,
    Haleic,
}

#[derive(Args)]
pub struct EstimateArgs {
    /// Schema JSON.
    #[arg(long)]
    schema: PathBuf,
    /// Data CSV with one column per node; NA marks undefined values.
    #[arg(long)]
    data: PathBuf,
    /// Targets JSON.
    #[arg(long)]
    targets: PathBuf,
    /// Initial model spec JSON (default: main-term logistic everywhere).
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "onestep")]
    mode: EstimatorMode,
    #[arg(long, default_value_t = 0.01)]
    dx: f64,
    #[arg(long = "max-iter", default_value_t = 500)]
    max_iter: usize,
    /// Iterative mode: refresh directions after every node update.
    #[arg(long)]
    sequential: bool,
    /// Stop when every |P_n D| is below this value instead of sd/(sqrt(n) log n).
    #[arg(long = "stop-tol")]
    stop_tol: Option<f64>,
    /// HAL resample size (default: the number of rows).
    #[arg(long = "hal-N")]
    hal_n: Option<usize>,
    #[arg(long = "hal-folds", default_value_t = 5)]
    hal_folds: usize,
    #[arg(long = "hal-knot-cap", default_value_t = 2000)]
    hal_knot_cap: usize,
    #[arg(long = "hal-max-degree", default_value_t = 3)]
    hal_max_degree: usize,
    #[arg(long = "hal-refits", default_value_t = 1)]
    hal_refits: usize,
    #[arg(long = "p-min", default_value_t = DEFAULT_P_MIN)]
    p_min: f64,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    #[arg(long = "mc-draws", default_value_t = DEFAULT_MC_DRAWS)]
    mc_draws: usize,
    #[arg(long, env = "MEDT_SEED")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize)]
struct ProjectionSummary {
    node: String,
    target: String,
    knots: usize,
    nonzero: usize,
    r_squared: f64,
    lambda: f64,
    sample_size: usize,
}

#[derive(Serialize)]
struct ScoreCheck {
    target: String,
    mean: f64,
    sd: f64,
    threshold: f64,
    satisfied: bool,
}

#[derive(Serialize)]
struct EstimateReport {
    mode: EstimatorMode,
    n: usize,
    seed: u64,
    converged: bool,
    iterations: usize,
    positivity_breaches: usize,
    initial_estimates: Vec<f64>,
    rows: Vec<CiRow>,
    z: f64,
    q_simultaneous: f64,
    correlation: Vec<Vec<f64>>,
    covariance_regularized: bool,
    score_checks: Vec<ScoreCheck>,
    fit_warnings: Vec<FitWarning>,
    hal_fits: Option<usize>,
    projections: Vec<ProjectionSummary>,
    trace: Vec<TraceEntry>,
}

impl EstimateArgs {
    fn tmle_config(&self) -> TmleConfig {
        TmleConfig {
            mode: match self.mode {
                EstimatorMode::Iterative => Mode::Iterative,
                _ => Mode::OneStep,
            },
            dx: self.dx,
            max_iterations: self.max_iter,
            sequential: self.sequential,
            stop: self.stop_tol.map_or(StopRule::SdOverRootNLogN, StopRule::Absolute),
            ..TmleConfig::default()
        }
    }

    fn hal_config(&self, seed: u64) -> HalConfig {
        let mut hal = HalConfig {
            sampling: Sampling::Resample(self.hal_n),
            max_degree: self.hal_max_degree,
            knot_cap: self.hal_knot_cap,
            refits: self.hal_refits,
            seed,
            ..HalConfig::default()
        };
        hal.lasso.folds = self.hal_folds;
        hal
    }
}

pub fn run(args: EstimateArgs) -> CliResult<Status> {
    let seed = require_seed(args.seed)?;
    let tmle = args.tmle_config();
    tmle.validate()?;
    let hal = args.hal_config(seed);
    if let EstimatorMode::Haleic = args.mode {
        hal.validate()?;
    }
    if !(args.level > 0.0 && args.level < 1.0) {
        return Err(medtmle::Error::Config("level must lie in (0, 1)".into()).into());
    }
    let schema = Arc::new(NodeSchema::from_json(&read(&args.schema)?)?);
    let targets = TargetSpec::from_json(&schema, &read(&args.targets)?)?;
    let mut model = match &args.model {
        Some(p) => serde_json::from_str::<ModelSpec>(&read(p)?).map_err(medtmle::Error::from)?,
        None => ModelSpec::default(),
    };
    model.p_min = args.p_min;
    let data = Dataset::read_csv(&schema, read(&args.data)?.as_bytes())?;
    let (init, fit_warnings) = fit_initial(&data, schema.clone(), &model)?;
    let initial_estimates = psi_all(&init, &targets);

    let (result, hal_fits, projections) = match args.mode {
        EstimatorMode::Haleic => {
            let h = haleic_tmle(&init, &data, &targets, &hal, &tmle)?;
            let pr = h
                .projections
                .iter()
                .map(|p| ProjectionSummary {
                    node: schema.node(p.node).name.clone(),
                    target: targets.entries[p.target].label.clone(),
                    knots: p.knots.len(),
                    nonzero: p.nonzero,
                    r_squared: p.r_squared,
                    lambda: p.lambda,
                    sample_size: p.sample_size,
                })
                .collect();
            (h.result, Some(h.fits), pr)
        }
        _ => (run_tmle(&init, &data, &targets, &tmle)?, None, Vec::new()),
    };

    let (labels, estimates, ic) = with_contrasts(&targets, &result.estimates, &result.totals)?;
    let table = simultaneous_ci(&labels, &estimates, &ic, args.level, args.mc_draws, seed)?;
    let n = data.len();
    let nf = n as f64;
    let score_checks = targets
        .entries
        .iter()
        .zip(&result.totals)
        .map(|(t, d)| {
            let mean = d.iter().sum::<f64>() / nf;
            let sd = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / nf).sqrt();
            let threshold = match tmle.stop {
                StopRule::SdOverRootNLogN => sd / (nf.sqrt() * nf.ln()),
                StopRule::Absolute(tol) => tol,
            };
            ScoreCheck {
                target: t.label.clone(),
                mean,
                sd,
                threshold,
                satisfied: mean.abs() <= threshold,
            }
        })
        .collect();

    out_dir(&args.out)?;
    table.write_csv(create(&args.out.join("ci.csv"))?)?;
    write_trace(&args.out.join("trace.csv"), &result.trace, &targets)?;
    std::fs::write(args.out.join("likelihood.json"), result.likelihood.to_json()?).map_err(|source| {
        crate::CliError::Io {
            path: args.out.join("likelihood.json"),
            source,
        }
    })?;
    let converged = result.converged;
    let report = EstimateReport {
        mode: args.mode,
        n,
        seed,
        converged,
        iterations: result.trace.len().saturating_sub(1),
        positivity_breaches: result.positivity_breaches,
        initial_estimates,
        rows: table.rows,
        z: table.covariance.z,
        q_simultaneous: table.covariance.q_simultaneous,
        correlation: table.covariance.correlation,
        covariance_regularized: table.covariance.regularized,
        score_checks,
        fit_warnings,
        hal_fits,
        projections,
        trace: result.trace,
    };
    write_json(&args.out.join("estimates.json"), &report)?;
    Ok(if converged { Status::Done } else { Status::NotConverged })
}

fn write_trace(path: &std::path::Path, trace: &[TraceEntry], targets: &TargetSpec) -> CliResult<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(create(path)?);
    let io = |source| crate::CliError::Io {
        path: path.to_path_buf(),
        source,
    };
    let labels: Vec<String> = targets.entries.iter().map(|t| format!("\"score:{}\"", t.label)).collect();
    writeln!(f, "iteration,log_likelihood,score_norm,dx,{}", labels.join(",")).map_err(io)?;
    for e in trace {
        let scores: Vec<String> = e.scores.iter().map(|v| format!("{v:e}")).collect();
        writeln!(
            f,
            "{},{:.12},{:e},{:e},{}",
            e.iteration,
            e.log_likelihood,
            e.score_norm,
            e.dx,
            scores.join(",")
        )
        .map_err(io)?;
    }
    f.flush().map_err(io)
}
