use std::io::Write;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use medtmle::gcomp::{OutcomeDoc, TargetsDoc};
use medtmle::simstudy::{run_study, simulate_dataset, true_targets, MetricsRow, MetricsTable, ScenarioSpec, TruthRow};

use crate::{create, out_dir, read, require_seed, write_json, CliError, CliResult, Status};

#[derive(Args)]
pub struct SimulateArgs {
    /// Scenario JSON (default: the built-in design at lambda 1).
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, env = "MEDT_SEED")]
    seed: Option<u64>,
    /// Output directory for data.csv, schema.json, targets.json, truth.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
pub struct StudyArgs {
    #[arg(long)]
    scenario: PathBuf,
    /// Replicate count (overrides the scenario).
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Base seed (overrides the scenario; MEDT_SEED is used when unset).
    #[arg(long, env = "MEDT_SEED")]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
pub struct ReportArgs {
    /// Study summary JSON files, or directories containing them.
    #[arg(long, required = true, num_args = 1..)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

/// Machine-readable result of one replicate study.
#[derive(Serialize, Deserialize)]
pub struct StudySummary {
    pub kind: String,
    pub spec: ScenarioSpec,
    pub truth: Vec<TruthRow>,
    pub table: MetricsTable,
    pub failures: Vec<FailureRecord>,
}

#[derive(Serialize, Deserialize)]
pub struct FailureRecord {
    pub replicate: usize,
    pub estimator: String,
    pub message: String,
}

const SUMMARY_KIND: &str = "medtmle-study";

fn load_scenario(path: &Path) -> CliResult<ScenarioSpec> {
    Ok(ScenarioSpec::from_json(&read(path)?)?)
}

pub fn simulate(args: SimulateArgs) -> CliResult<Status> {
    let seed = require_seed(args.seed)?;
    let mut spec = match &args.scenario {
        Some(p) => load_scenario(p)?,
        None => ScenarioSpec::default(),
    };
    if let Some(n) = args.n {
        spec.n = n;
    }
    if let Some(l) = args.lambda {
        spec.lambda = l;
    }
    spec.validate()?;
    let schema = spec.schema()?;
    let data = simulate_dataset(&spec, seed)?;
    out_dir(&args.out)?;
    data.write_csv(&schema, create(&args.out.join("data.csv"))?)?;
    write_json(&args.out.join("schema.json"), &schema.to_spec())?;
    let doc = TargetsDoc {
        outcomes: (1..=spec.k)
            .map(|t| OutcomeDoc {
                name: format!("Y{t}"),
                node: format!("Y{t}"),
                level: Some(1),
            })
            .collect(),
        treatment: Some(vec![1; spec.k]),
        control: Some(vec![0; spec.k]),
        pairs: Vec::new(),
    };
    write_json(&args.out.join("targets.json"), &doc)?;
    write_json(&args.out.join("truth.json"), &true_targets(&spec)?)?;
    Ok(Status::Done)
}

pub fn replicate_study(args: StudyArgs) -> CliResult<Status> {
    let mut spec = load_scenario(&args.scenario)?;
    if let Some(r) = args.reps {
        spec.replicates = r;
    }
    if let Some(s) = args.seed {
        spec.seed = s;
    }
    if args.jobs == 0 {
        return Err(CliError::Usage("--jobs must be at least 1".into()));
    }
    let out = run_study(&spec, args.jobs)?;
    out_dir(&args.out)?;
    let stem = file_stem(&spec.name);
    out.table.write_csv(create(&args.out.join(format!("{stem}.csv")))?)?;
    write_replicates(&args.out.join(format!("{stem}_replicates.csv")), &spec, &out)?;
    let failures = out
        .replicates
        .iter()
        .flat_map(|r| {
            r.failures.iter().map(move |(e, m)| FailureRecord {
                replicate: r.replicate,
                estimator: e.as_str().into(),
                message: m.clone(),
            })
        })
        .collect();
    let summary = StudySummary {
        kind: SUMMARY_KIND.into(),
        truth: true_targets(&spec)?,
        spec,
        table: out.table,
        failures,
    };
    write_json(&args.out.join(format!("{stem}.json")), &summary)?;
    Ok(Status::Done)
}

fn file_stem(name: &str) -> String {
    let s: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    if s.is_empty() {
        "study".into()
    } else {
        s
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_replicates(path: &Path, spec: &ScenarioSpec, out: &medtmle::simstudy::StudyOutput) -> CliResult<()> {
    let labels: Vec<String> = true_targets(spec)?.into_iter().map(|t| t.target).collect();
    let mut f = std::io::BufWriter::new(create(path)?);
    let e = io_err(path);
    writeln!(f, "replicate,estimator,target,estimate,se,converged").map_err(&e)?;
    for r in &out.replicates {
        for o in &r.outcomes {
            for (k, label) in labels.iter().enumerate() {
                writeln!(
                    f,
                    "{},{},\"{}\",{:.12},{:.12},{}",
                    r.replicate,
                    o.estimator.as_str(),
                    label,
                    o.estimates[k],
                    o.se[k],
                    o.converged
                )
                .map_err(&e)?;
            }
        }
    }
    f.flush().map_err(&e)
}

fn collect_inputs(inputs: &[PathBuf]) -> CliResult<Vec<StudySummary>> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(io_err(p))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "json"))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    let mut out = Vec::new();
    for f in files {
        let text = read(&f)?;
        let v: serde_json::Value = serde_json::from_str(&text).map_err(medtmle::Error::from)?;
        if v.get("kind").and_then(|k| k.as_str()) != Some(SUMMARY_KIND) {
            continue;
        }
        out.push(serde_json::from_value(v).map_err(medtmle::Error::from)?);
    }
    if out.is_empty() {
        return Err(CliError::Usage("no study summaries found in the inputs".into()));
    }
    Ok(out)
}

fn fmt(v: Option<f64>) -> String {
    v.map_or("NA".into(), |x| format!("{x:.4}"))
}

fn fmt6(v: Option<f64>) -> String {
    v.map_or("NA".into(), |x| format!("{x:.6}"))
}

fn misspec_name(t: &MetricsTable) -> String {
    serde_json::to_value(t.misspecification)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

pub fn report(args: ReportArgs) -> CliResult<Status> {
    let studies = collect_inputs(&args.inputs)?;
    out_dir(&args.out)?;

    // All metric rows, one line per scenario, target and estimator.
    let path = args.out.join("comparison.csv");
    let mut f = std::io::BufWriter::new(create(&path)?);
    let e = io_err(&path);
    writeln!(
        f,
        "scenario,lambda,misspecification,target,estimator,Bias,SD,MSE,Coverage,Width,truth,replicates,failures"
    )
    .map_err(&e)?;
    for s in &studies {
        let t = &s.table;
        for r in &t.rows {
            writeln!(
                f,
                "{},{},{},\"{}\",{},{},{},{},{},{},{:.6},{},{}",
                t.scenario,
                t.lambda,
                misspec_name(t),
                r.target,
                r.estimator,
                fmt6(r.bias),
                fmt6(r.sd),
                fmt6(r.mse),
                fmt6(r.coverage),
                fmt6(r.width),
                r.truth,
                r.replicates,
                r.failures
            )
            .map_err(&e)?;
        }
    }
    f.flush().map_err(&e)?;

    // MSE and coverage against lambda for plotting.
    let mut grid: Vec<(&str, f64, &str, &MetricsRow)> = studies
        .iter()
        .flat_map(|s| {
            s.table
                .rows
                .iter()
                .map(move |r| (r.target.as_str(), s.table.lambda, s.table.scenario.as_str(), r))
        })
        .collect();
    grid.sort_by(|a, b| {
        (a.0, &a.3.estimator, a.1, a.2)
            .partial_cmp(&(b.0, &b.3.estimator, b.1, b.2))
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let path = args.out.join("lambda_grid.csv");
    let mut f = std::io::BufWriter::new(create(&path)?);
    let e = io_err(&path);
    writeln!(f, "target,estimator,lambda,scenario,MSE,Coverage,Bias,Width").map_err(&e)?;
    for (target, lambda, scenario, r) in grid {
        writeln!(
            f,
            "\"{}\",{},{},{},{},{},{},{}",
            target,
            r.estimator,
            lambda,
            scenario,
            fmt6(r.mse),
            fmt6(r.coverage),
            fmt6(r.bias),
            fmt6(r.width)
        )
        .map_err(&e)?;
    }
    f.flush().map_err(&e)?;

    // Per-scenario tables: one block per target, one row per estimator.
    let path = args.out.join("report.md");
    let mut f = std::io::BufWriter::new(create(&path)?);
    let e = io_err(&path);
    for s in &studies {
        let t = &s.table;
        writeln!(
            f,
            "## {} (lambda {}, misspecification {})\n",
            t.scenario,
            t.lambda,
            misspec_name(t)
        )
        .map_err(&e)?;
        let mut targets: Vec<&str> = Vec::new();
        for r in &t.rows {
            if !targets.contains(&r.target.as_str()) {
                targets.push(&r.target);
            }
        }
        for target in targets {
            writeln!(f, "| {target} | Bias | SD | MSE | Coverage | Width |\n|---|---|---|---|---|---|").map_err(&e)?;
            for r in t.rows.iter().filter(|r| r.target == target) {
                writeln!(
                    f,
                    "| {} | {} | {} | {} | {} | {} |",
                    r.estimator,
                    fmt(r.bias),
                    fmt(r.sd),
                    fmt(r.mse),
                    fmt(r.coverage),
                    fmt(r.width)
                )
                .map_err(&e)?;
            }
            writeln!(f).map_err(&e)?;
        }
    }
    f.flush().map_err(&e)?;
    Ok(Status::Done)
}
