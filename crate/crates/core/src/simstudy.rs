//! Simulation harness: the two-time-point survival mediation design with
//! baseline covariates, censoring, treatment, a covariate, a mediator and a
//! survival outcome per time point; replicate runs and metric tables.

use std::io::Write;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, RowIndex};
use crate::eic::eic_tables;
use crate::error::{Error, Result};
use crate::gcomp::{psi_all, OutcomeFn, TargetSpec};
use crate::haleic::{haleic_tmle, HalConfig, HalSource};
use crate::likelihood::{fit_initial, misspecify, FactorizedLikelihood, ModelSpec, DEFAULT_P_MIN};
use crate::logistic::expit;
use crate::schema::{build_schema, Level, NodeKind, NodeSchema, NodeSpec};
use crate::tmle::{onestep_tmle, DirectionSource, Scores, TmleConfig};

/// Coefficients of the structural equations. Lagged terms apply from the
/// second time point on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DgpCoefficients {
    pub p_l01: f64,
    pub p_l02: f64,
    /// Remaining uncensored: intercept, L01, L02, lagged treatment.
    pub censor: [f64; 4],
    /// Treatment (scaled by lambda): intercept, L01, L02, lagged treatment.
    pub treat: [f64; 4],
    /// Covariate R: intercept, L01, L02 (first time point only), lagged R, treatment.
    pub r: [f64; 5],
    /// Mediator: intercept, L02, treatment, R.
    pub z: [f64; 4],
    /// Outcome: intercept, L02, R, treatment, mediator, lagged R.
    pub y: [f64; 6],
}

impl Default for DgpCoefficients {
    fn default() -> Self {
        DgpCoefficients {
            p_l01: 0.4,
            p_l02: 0.6,
            censor: [1.5, -0.4, -0.8, 0.5],
            treat: [-0.55, 0.35, 0.6, -0.05],
            r: [-0.8, 0.1, 0.3, 0.3, 1.0],
            z: [-0.25, 0.4, 0.4, 0.5],
            y: [0.05, 0.375, 0.25, -0.075, -0.075, -0.025],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Misspecification {
    #[serde(rename = "none")]
    None,
    /// Treatment and censoring factors.
    #[serde(alias = "a")]
    A,
    /// Mediator factors.
    #[serde(alias = "z")]
    Z,
    /// Outcome factors.
    #[serde(alias = "y")]
    Y,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    /// Plug-in at the initial fit, exact-EIC standard errors.
    ExactInitial,
    /// Plug-in at the initial fit, HAL-EIC standard errors.
    HalInitial,
    ExactTmle,
    HalTmle,
}

impl Estimator {
    pub fn as_str(self) -> &'static str {
        match self {
            Estimator::ExactInitial => "exact-initial",
            Estimator::HalInitial => "hal-initial",
            Estimator::ExactTmle => "exact-tmle",
            Estimator::HalTmle => "hal-tmle",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioSpec {
    pub name: String,
    pub k: usize,
    pub coefficients: DgpCoefficients,
    pub lambda: f64,
    pub misspecification: Misspecification,
    pub n: usize,
    pub replicates: usize,
    pub seed: u64,
    pub estimators: Vec<Estimator>,
    pub bias: f64,
    pub bounds: (f64, f64),
    pub p_min: f64,
    pub level: f64,
    pub tmle: TmleConfig,
    pub hal: HalConfig,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        ScenarioSpec {
            name: "none".into(),
            k: 2,
            coefficients: DgpCoefficients::default(),
            lambda: 1.0,
            misspecification: Misspecification::None,
            n: 1000,
            replicates: 300,
            seed: 1,
            estimators: vec![Estimator::ExactInitial, Estimator::ExactTmle, Estimator::HalTmle],
            bias: 0.05,
            bounds: (0.01, 0.99),
            p_min: DEFAULT_P_MIN,
            level: 0.95,
            tmle: TmleConfig::default(),
            hal: HalConfig::default(),
        }
    }
}

impl ScenarioSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let s: ScenarioSpec = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 1.0) {
            return Err(Error::Config("lambda must be at least 1".into()));
        }
        if self.n < 50 {
            return Err(Error::Config("n must be at least 50".into()));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        self.tmle.validate()?;
        self.hal.validate()
    }

    pub fn schema(&self) -> Result<Arc<NodeSchema>> {
        dgp_schema(self.k)
    }

    /// Outcomes Y1..YK under the pairs (1,1), (1,0), (0,0).
    pub fn targets(&self, schema: &NodeSchema) -> Result<TargetSpec> {
        let outcomes = (1..=self.k)
            .map(|t| {
                let name = format!("Y{t}");
                let node = schema.index_of(&name)?;
                Ok((name, OutcomeFn::Indicator { node, level: 1 }))
            })
            .collect::<Result<Vec<_>>>()?;
        TargetSpec::mediation(schema, outcomes, &vec![1; self.k], &vec![0; self.k])
    }

    fn misspecified_nodes(&self, s: &NodeSchema) -> Vec<usize> {
        (0..s.len())
            .filter(|&i| {
                let k = s.node(i).kind;
                match self.misspecification {
                    Misspecification::None => false,
                    Misspecification::A => k.is_intervened(),
                    Misspecification::Z => k == NodeKind::Mediator,
                    Misspecification::Y => k == NodeKind::Outcome,
                }
            })
            .collect()
    }
}

/// Node order per time point: censoring, treatment, R, Z, Y.
pub fn dgp_schema(k: usize) -> Result<Arc<NodeSchema>> {
    let mut specs = vec![
        NodeSpec::binary("L01", NodeKind::Baseline, 0),
        NodeSpec::binary("L02", NodeKind::Baseline, 0),
    ];
    for t in 1..=k {
        specs.push(NodeSpec::binary(&format!("C{t}"), NodeKind::Censoring, t).with_censored_level(0));
        specs.push(NodeSpec::binary(&format!("A{t}"), NodeKind::Treatment, t));
        specs.push(NodeSpec::binary(&format!("R{t}"), NodeKind::CovariateR, t));
        specs.push(NodeSpec::binary(&format!("Z{t}"), NodeKind::Mediator, t));
        specs.push(NodeSpec::binary(&format!("Y{t}"), NodeKind::Outcome, t).with_absorbing(vec![1]));
    }
    Ok(Arc::new(build_schema(k, specs)?))
}

/// Probability of level 1 of node `i` given its parents under the design.
fn dgp_prob(c: &DgpCoefficients, lambda: f64, i: usize, pa: &[Level]) -> f64 {
    let v = |j: usize| pa[j] as f64;
    if i == 0 {
        return c.p_l01;
    }
    if i == 1 {
        return c.p_l02;
    }
    let (t, pos) = ((i - 2) / 5 + 1, (i - 2) % 5);
    let base = 2 + (t - 1) * 5;
    let (l01, l02) = (v(0), v(1));
    let lag = |off: usize| if t > 1 { v(base - 5 + off) } else { 0.0 };
    let later = (t > 1) as u8 as f64;
    let first = (t == 1) as u8 as f64;
    match pos {
        0 => expit(c.censor[0] + c.censor[1] * l01 + c.censor[2] * l02 + c.censor[3] * lag(1)),
        1 => expit(lambda * (c.treat[0] + c.treat[1] * l01 + c.treat[2] * l02 + c.treat[3] * lag(1))),
        2 => expit(c.r[0] + c.r[1] * l01 + c.r[2] * first * l02 + c.r[3] * later * lag(2) + c.r[4] * v(base + 1)),
        3 => expit(c.z[0] + c.z[1] * l02 + c.z[2] * v(base + 1) + c.z[3] * v(base + 2)),
        _ => expit(
            c.y[0] + c.y[1] * l02 + c.y[2] * v(base + 2) + c.y[3] * v(base + 1) + c.y[4] * v(base + 3)
                + c.y[5] * later * lag(2),
        ),
    }
}

/// The true likelihood of the design.
pub fn truth_likelihood(spec: &ScenarioSpec) -> Result<FactorizedLikelihood> {
    let s = spec.schema()?;
    let c = spec.coefficients.clone();
    FactorizedLikelihood::from_fn(s, spec.p_min, |i, pa, out| {
        let p = dgp_prob(&c, spec.lambda, i, pa);
        out[0] = 1.0 - p;
        out[1] = p;
    })
}

/// `spec.n` IID trajectories; deterministic per seed.
pub fn simulate_dataset(spec: &ScenarioSpec, seed: u64) -> Result<Dataset> {
    let truth = truth_likelihood(spec)?;
    Ok(truth.sample(spec.n, &mut ChaCha8Rng::seed_from_u64(seed)))
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TruthRow {
    pub target: String,
    pub value: f64,
}

/// Exact target values under the design.
pub fn true_targets(spec: &ScenarioSpec) -> Result<Vec<TruthRow>> {
    let truth = truth_likelihood(spec)?;
    let t = spec.targets(truth.schema())?;
    Ok(t.entries
        .iter()
        .zip(psi_all(&truth, &t))
        .map(|(e, v)| TruthRow {
            target: e.label.clone(),
            value: v,
        })
        .collect())
}

/// Estimates and standard errors of one estimator in one replicate.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EstimatorOutcome {
    pub estimator: Estimator,
    pub estimates: Vec<f64>,
    pub se: Vec<f64>,
    pub converged: bool,
    pub breaches: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ReplicateResult {
    pub replicate: usize,
    pub outcomes: Vec<EstimatorOutcome>,
    pub failures: Vec<(Estimator, String)>,
}

fn replicate_seed(base: u64, rep: usize, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(rep as u64);
    rng.set_word_pos(stream as u128 * 16);
    rand::RngCore::next_u64(&mut rng)
}

fn se_from(totals: &[Vec<f64>]) -> Vec<f64> {
    totals
        .iter()
        .map(|t| {
            let n = t.len() as f64;
            let mean = t.iter().sum::<f64>() / n;
            (t.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt() / n.sqrt()
        })
        .collect()
}

/// Runs every estimator of `spec` on one simulated dataset.
pub fn run_replicate(spec: &ScenarioSpec, rep: usize) -> Result<ReplicateResult> {
    let data = simulate_dataset(spec, replicate_seed(spec.seed, rep, 0))?;
    let s = spec.schema()?;
    let targets = spec.targets(&s)?;
    let model = ModelSpec {
        p_min: spec.p_min,
        ..ModelSpec::default()
    };
    let (init, _) = fit_initial(&data, s.clone(), &model)?;
    let init = misspecify(&init, &spec.misspecified_nodes(&s), spec.bias, spec.bounds)?;
    let hal = HalConfig {
        seed: replicate_seed(spec.seed, rep, 1),
        ..spec.hal.clone()
    };
    let mut outcomes = Vec::new();
    let mut failures = Vec::new();
    for &est in &spec.estimators {
        let r = match est {
            Estimator::ExactInitial => {
                let tabs = eic_tables(&init, &targets);
                let ix = RowIndex::new(&s, &data);
                let sc = Scores::compute(&s, &ix, &tabs.clone().into(), &[]);
                Ok(EstimatorOutcome {
                    estimator: est,
                    se: se_from(&sc.totals),
                    estimates: tabs.psi,
                    converged: true,
                    breaches: tabs.breaches,
                })
            }
            Estimator::HalInitial => crate::haleic::fit_hal_eic(&init, &targets, data.len(), &hal, hal.seed).and_then(
                |pr| {
                    let mut src = HalSource {
                        targets: &targets,
                        projections: pr,
                    };
                    let dirs = src.evaluate(&init)?;
                    let ix = RowIndex::new(&s, &data);
                    let sc = Scores::compute(&s, &ix, &dirs, &[]);
                    Ok(EstimatorOutcome {
                        estimator: est,
                        se: se_from(&sc.totals),
                        estimates: dirs.psi,
                        converged: true,
                        breaches: 0,
                    })
                },
            ),
            Estimator::ExactTmle => onestep_tmle(&init, &data, &targets, &spec.tmle).map(|r| EstimatorOutcome {
                estimator: est,
                se: se_from(&r.totals),
                estimates: r.estimates,
                converged: r.converged,
                breaches: r.positivity_breaches,
            }),
            Estimator::HalTmle => haleic_tmle(&init, &data, &targets, &hal, &spec.tmle).map(|h| EstimatorOutcome {
                estimator: est,
                se: se_from(&h.result.totals),
                estimates: h.result.estimates,
                converged: h.result.converged,
                breaches: h.result.positivity_breaches,
            }),
        };
        match r {
            Ok(o) => outcomes.push(o),
            Err(e) => failures.push((est, e.to_string())),
        }
    }
    Ok(ReplicateResult {
        replicate: rep,
        outcomes,
        failures,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MetricsRow {
    pub target: String,
    pub estimator: String,
    #[serde(rename = "Bias")]
    pub bias: Option<f64>,
    #[serde(rename = "SD")]
    pub sd: Option<f64>,
    #[serde(rename = "MSE")]
    pub mse: Option<f64>,
    #[serde(rename = "Coverage")]
    pub coverage: Option<f64>,
    #[serde(rename = "Width")]
    pub width: Option<f64>,
    pub truth: f64,
    pub replicates: usize,
    pub failures: usize,
    pub nonconverged: usize,
    pub breaches: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MetricsTable {
    pub scenario: String,
    pub lambda: f64,
    pub misspecification: Misspecification,
    pub rows: Vec<MetricsRow>,
}

impl MetricsTable {
    pub fn get(&self, target: &str, estimator: Estimator) -> Option<&MetricsRow> {
        self.rows
            .iter()
            .find(|r| r.target == target && r.estimator == estimator.as_str())
    }

    /// CSV with columns in the order target, estimator, Bias, SD, MSE,
    /// Coverage, Width, then bookkeeping; undefined values are written as NA.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record([
            "target",
            "estimator",
            "Bias",
            "SD",
            "MSE",
            "Coverage",
            "Width",
            "truth",
            "replicates",
            "failures",
            "nonconverged",
            "breaches",
        ])?;
        let f = |v: Option<f64>| v.map_or("NA".to_string(), |x| format!("{x:.6}"));
        for r in &self.rows {
            w.write_record([
                r.target.clone(),
                r.estimator.clone(),
                f(r.bias),
                f(r.sd),
                f(r.mse),
                f(r.coverage),
                f(r.width),
                format!("{:.6}", r.truth),
                r.replicates.to_string(),
                r.failures.to_string(),
                r.nonconverged.to_string(),
                r.breaches.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Aggregates replicate results (in replicate order) into metrics.
pub fn aggregate(spec: &ScenarioSpec, truth: &[TruthRow], reps: &[ReplicateResult]) -> MetricsTable {
    let z = crate::inference::normal_quantile(1.0 - (1.0 - spec.level) / 2.0);
    let mut rows = Vec::new();
    for (k, tr) in truth.iter().enumerate() {
        for &est in &spec.estimators {
            let outs: Vec<&EstimatorOutcome> = reps
                .iter()
                .flat_map(|r| r.outcomes.iter().filter(|o| o.estimator == est))
                .collect();
            let failures = reps
                .iter()
                .map(|r| r.failures.iter().filter(|f| f.0 == est).count())
                .sum();
            let m = outs.len();
            let mf = m as f64;
            let (bias, sd, mse, coverage, width) = if m == 0 {
                (None, None, None, None, None)
            } else {
                let mean = outs.iter().map(|o| o.estimates[k]).sum::<f64>() / mf;
                let sd = (m > 1).then(|| {
                    (outs.iter().map(|o| (o.estimates[k] - mean).powi(2)).sum::<f64>() / (mf - 1.0)).sqrt()
                });
                let mse = outs.iter().map(|o| (o.estimates[k] - tr.value).powi(2)).sum::<f64>() / mf;
                let cov = outs
                    .iter()
                    .filter(|o| (o.estimates[k] - tr.value).abs() <= z * o.se[k])
                    .count() as f64
                    / mf;
                let width = outs.iter().map(|o| 2.0 * z * o.se[k]).sum::<f64>() / mf;
                (Some(mean - tr.value), sd, Some(mse), Some(cov), Some(width))
            };
            rows.push(MetricsRow {
                target: tr.target.clone(),
                estimator: est.as_str().into(),
                bias,
                sd,
                mse,
                coverage,
                width,
                truth: tr.value,
                replicates: m,
                failures,
                nonconverged: outs.iter().filter(|o| !o.converged).count(),
                breaches: outs.iter().map(|o| o.breaches).sum(),
            });
        }
    }
    MetricsTable {
        scenario: spec.name.clone(),
        lambda: spec.lambda,
        misspecification: spec.misspecification,
        rows,
    }
}

#[derive(Clone, Debug)]
pub struct StudyOutput {
    pub table: MetricsTable,
    pub replicates: Vec<ReplicateResult>,
}

/// Runs all replicates on `jobs` threads. Seeds depend only on the base
/// seed and the replicate index.
pub fn run_study(spec: &ScenarioSpec, jobs: usize) -> Result<StudyOutput> {
    spec.validate()?;
    let truth = true_targets(spec)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let reps: Vec<ReplicateResult> = pool.install(|| {
        (0..spec.replicates)
            .into_par_iter()
            .map(|r| {
                run_replicate(spec, r).unwrap_or_else(|e| ReplicateResult {
                    replicate: r,
                    outcomes: Vec::new(),
                    failures: spec.estimators.iter().map(|&est| (est, e.to_string())).collect(),
                })
            })
            .collect()
    });
    Ok(StudyOutput {
        table: aggregate(spec, &truth, &reps),
        replicates: reps,
    })
}
