//! Iterative and one-step targeting of the factor tables.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, RowIndex, NO_ENTRY};
use crate::eic::{eic_tables, EicTables};
use crate::error::{Error, Result};
use crate::gcomp::TargetSpec;
use crate::likelihood::{apply_fluctuations, FactorizedLikelihood, FluctuationLayer};
use crate::schema::{NodeKind, NodeSchema};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Iterative,
    #[serde(alias = "onestep")]
    OneStep,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopRule {
    /// |P_n D| <= sd_n(D) / (sqrt(n) log n) for every target.
    SdOverRootNLogN,
    /// |P_n D| <= tol for every target.
    Absolute(f64),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TmleConfig {
    pub mode: Mode,
    pub dx: f64,
    pub max_iterations: usize,
    /// Iterative mode: refresh directions after each node update.
    pub sequential: bool,
    pub newton_max: usize,
    pub newton_tol: f64,
    pub min_dx: f64,
    pub stop: StopRule,
}

impl Default for TmleConfig {
    fn default() -> Self {
        TmleConfig {
            mode: Mode::OneStep,
            dx: 0.01,
            max_iterations: 500,
            sequential: false,
            newton_max: 50,
            newton_tol: 1e-10,
            min_dx: 1e-12,
            stop: StopRule::SdOverRootNLogN,
        }
    }
}

impl TmleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dx > 0.0) || self.max_iterations == 0 {
            return Err(Error::Config("dx must be positive and max_iterations at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub log_likelihood: f64,
    /// Euclidean norm of all per-node empirical scores.
    pub score_norm: f64,
    /// P_n D per target.
    pub scores: Vec<f64>,
    /// Plug-in estimate per target at this iteration's likelihood.
    pub estimates: Vec<f64>,
    pub dx: f64,
}

#[derive(Clone, Debug)]
pub struct TmleResult {
    pub likelihood: FactorizedLikelihood,
    pub trace: Vec<TraceEntry>,
    pub estimates: Vec<f64>,
    pub converged: bool,
    pub positivity_breaches: usize,
    /// Per-target influence values of each row at the final likelihood
    /// (totals[k][row]), from the directions used for targeting.
    pub totals: Vec<Vec<f64>>,
}

/// Fluctuation directions at one likelihood.
#[derive(Clone, Debug)]
pub struct Directions {
    /// tables[i][k][entry]; the inner tables are empty for intervened nodes.
    pub tables: Vec<Vec<Vec<f64>>>,
    pub psi: Vec<f64>,
    pub breaches: usize,
}

impl From<EicTables> for Directions {
    fn from(t: EicTables) -> Self {
        Directions {
            tables: t.comps,
            psi: t.psi,
            breaches: t.breaches,
        }
    }
}

/// Source of fluctuation directions (exact EIC or an approximation).
pub trait DirectionSource {
    fn evaluate(&mut self, lik: &FactorizedLikelihood) -> Result<Directions>;
}

pub struct ExactSource<'a> {
    pub targets: &'a TargetSpec,
}

impl DirectionSource for ExactSource<'_> {
    fn evaluate(&mut self, lik: &FactorizedLikelihood) -> Result<Directions> {
        Ok(eic_tables(lik, self.targets).into())
    }
}

/// Nodes whose factors are updated: covariates, mediators and outcomes.
pub fn fluctuated_nodes(s: &NodeSchema) -> Vec<usize> {
    (0..s.len())
        .filter(|&i| {
            let k = s.node(i).kind;
            !k.is_intervened() && k != NodeKind::Baseline && !s.stochastic_cfgs(i).is_empty()
        })
        .collect()
}

/// Empirical score summaries of a direction set.
#[derive(Clone, Debug)]
pub struct Scores {
    /// per_node[j][k] = P_n D_{k, node j} over fluctuated nodes.
    pub per_node: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    pub totals: Vec<Vec<f64>>,
}

impl Scores {
    pub fn compute(s: &NodeSchema, ix: &RowIndex, dirs: &Directions, nodes: &[usize]) -> Self {
        let kk = dirs.psi.len();
        let n = ix.n as f64;
        let per_node = nodes
            .iter()
            .map(|&i| {
                (0..kk)
                    .map(|k| {
                        let t = &dirs.tables[i][k];
                        ix.counts(i).iter().map(|&(e, c)| c * t[e as usize]).sum::<f64>() / n
                    })
                    .collect()
            })
            .collect();
        let mut totals = vec![vec![0.0; ix.n]; kk];
        for i in 0..s.len() {
            if dirs.tables[i].first().is_none_or(|t| t.is_empty()) {
                continue;
            }
            for r in 0..ix.n {
                let e = ix.entry(r, i);
                if e == NO_ENTRY {
                    continue;
                }
                for (k, tot) in totals.iter_mut().enumerate() {
                    tot[r] += dirs.tables[i][k][e as usize];
                }
            }
        }
        let mean: Vec<f64> = totals.iter().map(|t| t.iter().sum::<f64>() / n).collect();
        let sd = totals
            .iter()
            .zip(&mean)
            .map(|(t, mu)| (t.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n).sqrt())
            .collect();
        Scores {
            per_node,
            mean,
            sd,
            totals,
        }
    }

    pub fn norm(&self) -> f64 {
        self.per_node.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn satisfied(&self, rule: StopRule, n: usize) -> bool {
        let nf = n as f64;
        self.mean.iter().zip(&self.sd).all(|(m, sd)| match rule {
            StopRule::SdOverRootNLogN => m.abs() <= sd / (nf.sqrt() * nf.ln()),
            StopRule::Absolute(tol) => m.abs() <= tol,
        })
    }
}

pub fn iterative_tmle(
    lik0: &FactorizedLikelihood,
    data: &Dataset,
    targets: &TargetSpec,
    config: &TmleConfig,
) -> Result<TmleResult> {
    let ix = RowIndex::new(lik0.schema(), data);
    let cfg = TmleConfig {
        mode: Mode::Iterative,
        ..config.clone()
    };
    run_tmle_with(lik0, &ix, &mut ExactSource { targets }, &cfg)
}

pub fn onestep_tmle(
    lik0: &FactorizedLikelihood,
    data: &Dataset,
    targets: &TargetSpec,
    config: &TmleConfig,
) -> Result<TmleResult> {
    let ix = RowIndex::new(lik0.schema(), data);
    let cfg = TmleConfig {
        mode: Mode::OneStep,
        ..config.clone()
    };
    run_tmle_with(lik0, &ix, &mut ExactSource { targets }, &cfg)
}

/// Runs the configured mode with an arbitrary direction source.
pub fn run_tmle_with(
    lik0: &FactorizedLikelihood,
    ix: &RowIndex,
    source: &mut dyn DirectionSource,
    config: &TmleConfig,
) -> Result<TmleResult> {
    config.validate()?;
    if ix.n == 0 {
        return Err(Error::Data("no rows".into()));
    }
    match config.mode {
        Mode::OneStep => onestep_loop(lik0, ix, source, config),
        Mode::Iterative => iterative_loop(lik0, ix, source, config),
    }
}

fn layers_for(nodes: &[usize], dirs: &Directions, eps: &[Vec<f64>]) -> Vec<FluctuationLayer> {
    nodes
        .iter()
        .zip(eps)
        .map(|(&i, e)| FluctuationLayer {
            node: i,
            epsilon: e.clone(),
            directions: dirs.tables[i].clone(),
        })
        .collect()
}

fn entry(iteration: usize, ll: f64, sc: &Scores, dirs: &Directions, dx: f64) -> TraceEntry {
    TraceEntry {
        iteration,
        log_likelihood: ll,
        score_norm: sc.norm(),
        scores: sc.mean.clone(),
        estimates: dirs.psi.clone(),
        dx,
    }
}

fn onestep_loop(
    lik0: &FactorizedLikelihood,
    ix: &RowIndex,
    source: &mut dyn DirectionSource,
    config: &TmleConfig,
) -> Result<TmleResult> {
    let s = lik0.schema();
    let nodes = fluctuated_nodes(s);
    let mut lik = lik0.clone();
    let mut dirs = source.evaluate(&lik)?;
    let mut breaches = dirs.breaches;
    let mut ll = lik.log_likelihood_indexed(ix)?;
    let mut dx = config.dx;
    let mut sc = Scores::compute(s, ix, &dirs, &nodes);
    let mut trace = vec![entry(0, ll, &sc, &dirs, dx)];
    let mut converged = false;
    for iteration in 1..=config.max_iterations {
        if sc.satisfied(config.stop, ix.n) {
            converged = true;
            break;
        }
        let norm = sc.norm();
        if norm == 0.0 {
            break;
        }
        let next = loop {
            let eps: Vec<Vec<f64>> = sc
                .per_node
                .iter()
                .map(|h| h.iter().map(|v| v * dx / norm).collect())
                .collect();
            match apply_fluctuations(&lik, &layers_for(&nodes, &dirs, &eps)) {
                Ok(cand) => {
                    let cll = cand.log_likelihood_indexed(ix)?;
                    if cll >= ll {
                        break Some((cand, cll));
                    }
                }
                Err(Error::NegativeMultiplier { .. }) | Err(Error::Renormalization { .. }) => {}
                Err(e) => return Err(e),
            }
            dx /= 2.0;
            if dx < config.min_dx {
                break None;
            }
        };
        let Some((cand, cll)) = next else {
            break;
        };
        lik = cand;
        ll = cll;
        dirs = source.evaluate(&lik)?;
        breaches += dirs.breaches;
        sc = Scores::compute(s, ix, &dirs, &nodes);
        trace.push(entry(iteration, ll, &sc, &dirs, dx));
    }
    if !converged {
        converged = sc.satisfied(config.stop, ix.n);
    }
    Ok(TmleResult {
        likelihood: lik,
        trace,
        estimates: dirs.psi,
        converged,
        positivity_breaches: breaches,
        totals: sc.totals,
    })
}

/// Maximizes sum_e c_e log(1 + eps . D_e) / n over eps, keeping every
/// multiplier at stochastic configurations positive.
fn solve_node(
    s: &NodeSchema,
    i: usize,
    ix: &RowIndex,
    dirs: &[Vec<f64>],
    config: &TmleConfig,
) -> Result<Vec<f64>> {
    let kk = dirs.len();
    let n = ix.n as f64;
    let m = s.node(i).m();
    let counts = ix.counts(i);
    let feasible = |eps: &[f64]| {
        s.stochastic_cfgs(i).iter().all(|&c| {
            (0..m).all(|x| {
                let e = c as usize * m + x;
                1.0 + (0..kk).map(|k| eps[k] * dirs[k][e]).sum::<f64>() > 0.0
            })
        })
    };
    let objective = |eps: &[f64]| -> f64 {
        counts
            .iter()
            .map(|&(e, c)| {
                let v = 1.0 + (0..kk).map(|k| eps[k] * dirs[k][e as usize]).sum::<f64>();
                c * v.ln()
            })
            .sum::<f64>()
            / n
    };
    let mut eps = vec![0.0; kk];
    let mut f = 0.0;
    for _ in 0..config.newton_max {
        let mut g = DVector::<f64>::zeros(kk);
        let mut h = DMatrix::<f64>::zeros(kk, kk);
        for &(e, c) in counts {
            let e = e as usize;
            let v = 1.0 + (0..kk).map(|k| eps[k] * dirs[k][e]).sum::<f64>();
            for a in 0..kk {
                let da = dirs[a][e];
                g[a] += c * da / v / n;
                for b in 0..kk {
                    h[(a, b)] += c * da * dirs[b][e] / (v * v) / n;
                }
            }
        }
        if g.amax() <= config.newton_tol {
            return Ok(eps);
        }
        let scale = h.amax().max(1e-300);
        let step = h
            .pseudo_inverse(1e-12 * scale)
            .map_err(|_| Error::Divergence {
                node: s.node(i).name.clone(),
            })?
            * &g;
        let mut t = 1.0;
        loop {
            let cand: Vec<f64> = eps.iter().zip(step.iter()).map(|(a, b)| a + t * b).collect();
            if feasible(&cand) {
                let fc = objective(&cand);
                if fc >= f {
                    eps = cand;
                    f = fc;
                    break;
                }
            }
            t /= 2.0;
            if t < 1e-12 {
                return Ok(eps);
            }
        }
        if eps.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                node: s.node(i).name.clone(),
            });
        }
    }
    Ok(eps)
}

fn iterative_loop(
    lik0: &FactorizedLikelihood,
    ix: &RowIndex,
    source: &mut dyn DirectionSource,
    config: &TmleConfig,
) -> Result<TmleResult> {
    let s = lik0.schema();
    let nodes = fluctuated_nodes(s);
    let mut lik = lik0.clone();
    let mut dirs = source.evaluate(&lik)?;
    let mut breaches = dirs.breaches;
    let mut sc = Scores::compute(s, ix, &dirs, &nodes);
    let mut trace = vec![entry(0, lik.log_likelihood_indexed(ix)?, &sc, &dirs, 0.0)];
    let mut converged = false;
    for iteration in 1..=config.max_iterations {
        if sc.satisfied(config.stop, ix.n) {
            converged = true;
            break;
        }
        if config.sequential {
            for &i in &nodes {
                let eps = solve_node(s, i, ix, &dirs.tables[i], config)?;
                lik = apply_fluctuations(&lik, &layers_for(&[i], &dirs, &[eps]))?;
                dirs = source.evaluate(&lik)?;
                breaches += dirs.breaches;
            }
        } else {
            let eps = nodes
                .iter()
                .map(|&i| solve_node(s, i, ix, &dirs.tables[i], config))
                .collect::<Result<Vec<_>>>()?;
            lik = apply_fluctuations(&lik, &layers_for(&nodes, &dirs, &eps))?;
            dirs = source.evaluate(&lik)?;
            breaches += dirs.breaches;
        }
        sc = Scores::compute(s, ix, &dirs, &nodes);
        trace.push(entry(iteration, lik.log_likelihood_indexed(ix)?, &sc, &dirs, 0.0));
    }
    if !converged {
        converged = sc.satisfied(config.stop, ix.n);
    }
    Ok(TmleResult {
        likelihood: lik,
        trace,
        estimates: dirs.psi,
        converged,
        positivity_breaches: breaches,
        totals: sc.totals,
    })
}

pub fn run_tmle(
    lik0: &FactorizedLikelihood,
    data: &Dataset,
    targets: &TargetSpec,
    config: &TmleConfig,
) -> Result<TmleResult> {
    let ix = RowIndex::new(lik0.schema(), data);
    run_tmle_with(lik0, &ix, &mut ExactSource { targets }, config)
}
