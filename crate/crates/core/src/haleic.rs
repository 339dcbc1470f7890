//! Projection of initial gradients onto centered indicator bases (HAL-EIC)
//! and the one-step TMLE that uses them with delayed coefficient refits.
//!
//! A basis function of node X at knot (x_u, pa_u) is
//! `1{pa >= pa_u} (1{X >= x_u} - P(X >= x_u | pa))`, where `pa_u` fixes a
//! section of at most `max_degree` parents. Every such function has
//! conditional mean zero under P given the parents.

use std::collections::HashMap;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, RowIndex, NO_ENTRY};
use crate::eic::path_weights;
use crate::error::{Error, Result};
use crate::gcomp::{q_tables, Target, TargetSpec};
use crate::lasso::{cv_lasso, least_squares, LassoConfig, Moments};
use crate::likelihood::FactorizedLikelihood;
use crate::schema::{Level, NodeKind, NodeSchema};
use crate::tmle::{fluctuated_nodes, run_tmle_with, DirectionSource, Directions, Mode, Scores, TmleConfig, TmleResult};

/// Relative squared residual below which a basis column counts as
/// linearly dependent on earlier columns.
const DEPENDENCE_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Penalty {
    /// Penalty chosen by K-fold cross-validation over a log grid.
    CrossValidated,
    /// Minimum-norm least squares.
    Zero,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// IID resample of the given size (None: the observed sample size).
    Resample(Option<usize>),
    /// Every trajectory weighted by its probability.
    Exact,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct HalConfig {
    pub sampling: Sampling,
    pub max_degree: usize,
    pub knot_cap: usize,
    pub penalty: Penalty,
    pub lasso: LassoConfig,
    /// Most coefficient refits after the first fit. After each inner loop
    /// the coefficients are refit and the run stops once the stopping rule
    /// holds with them.
    pub refits: usize,
    pub seed: u64,
}

impl Default for HalConfig {
    fn default() -> Self {
        HalConfig {
            sampling: Sampling::Resample(None),
            max_degree: 3,
            knot_cap: 2000,
            penalty: Penalty::CrossValidated,
            lasso: LassoConfig::default(),
            refits: 1,
            seed: 0,
        }
    }
}

impl HalConfig {
    pub fn validate(&self) -> Result<()> {
        if let Sampling::Resample(Some(0)) = self.sampling {
            return Err(Error::Config("HAL resample size must be at least 1".into()));
        }
        if self.knot_cap == 0 {
            return Err(Error::Config("HAL knot cap must be at least 1".into()));
        }
        if self.penalty == Penalty::CrossValidated && self.lasso.folds < 2 {
            return Err(Error::Config("HAL cross-validation needs at least 2 folds".into()));
        }
        if self.lasso.n_lambda == 0 {
            return Err(Error::Config("lasso grid must be nonempty".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Knot {
    pub x: Level,
    /// (parent node, minimum level) pairs.
    pub parents: Vec<(usize, Level)>,
}

impl Knot {
    #[inline]
    fn active(&self, pa: &[Level]) -> bool {
        self.parents.iter().all(|&(j, u)| pa[j] >= u)
    }
}

/// Lasso projection of one target's initial gradient at one node.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HalProjection {
    pub node: usize,
    pub target: usize,
    pub knots: Vec<Knot>,
    pub beta: Vec<f64>,
    pub lambda: f64,
    pub r_squared: f64,
    pub nonzero: usize,
    pub sample_size: usize,
}

impl HalProjection {
    /// Table of the projection at `lik` (basis re-centered under `lik`).
    pub fn table(&self, lik: &FactorizedLikelihood) -> Vec<f64> {
        let s = lik.schema();
        let i = self.node;
        let m = s.node(i).m();
        let t = lik.table(i);
        let mut out = vec![0.0; s.cfg_count(i) * m];
        let active: Vec<(&Knot, f64)> = self
            .knots
            .iter()
            .zip(&self.beta)
            .filter(|(_, b)| **b != 0.0)
            .map(|(k, b)| (k, *b))
            .collect();
        if active.is_empty() {
            return out;
        }
        let mut pa = vec![0; i];
        let mut surv = vec![0.0; m + 1];
        for &c in s.stochastic_cfgs(i) {
            let c = c as usize;
            s.decode_cfg(i, c, &mut pa);
            for x in (0..m).rev() {
                surv[x] = surv[x + 1] + t[c * m + x];
            }
            for &(k, b) in &active {
                if !k.active(&pa) {
                    continue;
                }
                let xu = k.x as usize;
                for x in 0..m {
                    out[c * m + x] += b * ((x >= xu) as u8 as f64 - surv[xu]);
                }
            }
        }
        out
    }
}

/// Initial gradients of one trajectory: the covariate-group value (outcome
/// times arm-`a` weight) and the mediator-group value (outcome times
/// arm-`a_prime` weight), with weights accumulated through the outcome node.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InitialGradient {
    pub covariate: f64,
    pub mediator: f64,
}

pub fn initial_gradient(lik: &FactorizedLikelihood, target: &Target, traj: &[Level]) -> InitialGradient {
    let o = target.outcome.node();
    let y = target.outcome.eval(lik.schema(), traj);
    let w = path_weights(lik, target, &traj[..=o]);
    let nw = w.last().expect("final weight entry");
    InitialGradient {
        covariate: y * nw.main,
        mediator: y * nw.alt,
    }
}

/// Draws an IID sample of size `n` from `lik`.
pub fn resample(lik: &FactorizedLikelihood, n: usize, seed: u64) -> Dataset {
    lik.sample(n, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Weighted trajectories used to fit projections.
struct FitSample {
    data: Dataset,
    weights: Vec<f64>,
    folds: Vec<usize>,
    n_folds: usize,
}

fn fit_sample(lik: &FactorizedLikelihood, n: usize, config: &HalConfig, seed: u64) -> FitSample {
    match config.sampling {
        Sampling::Exact => {
            let s = lik.schema();
            let trajs: Vec<Vec<Level>> = s
                .trajectories()
                .into_iter()
                .filter(|t| lik.joint_prob(t) > 0.0)
                .collect();
            let weights = trajs.iter().map(|t| lik.joint_prob(t)).collect();
            let flat = trajs.concat();
            let len = trajs.len();
            FitSample {
                data: Dataset::from_flat(s.len(), flat),
                weights,
                folds: vec![0; len],
                n_folds: 1,
            }
        }
        Sampling::Resample(size) => {
            let size = size.unwrap_or(n);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data = lik.sample(size, &mut rng);
            let n_folds = match config.penalty {
                Penalty::CrossValidated => config.lasso.folds.min(size).max(1),
                Penalty::Zero => 1,
            };
            let mut order: Vec<usize> = (0..size).collect();
            order.shuffle(&mut rng);
            let mut folds = vec![0; size];
            for (pos, &r) in order.iter().enumerate() {
                folds[r] = pos % n_folds;
            }
            FitSample {
                data,
                weights: vec![1.0; size],
                folds,
                n_folds,
            }
        }
    }
}

/// Per-entry weighted response sums: (weight, sum w y per target, sum w y^2 per target).
type EntryStats = (f64, Vec<f64>, Vec<f64>);

fn sections(nonzero: &[(usize, Level)], max_degree: usize, out: &mut Vec<Vec<(usize, Level)>>) {
    fn rec(
        items: &[(usize, Level)],
        start: usize,
        left: usize,
        cur: &mut Vec<(usize, Level)>,
        out: &mut Vec<Vec<(usize, Level)>>,
    ) {
        out.push(cur.clone());
        if left == 0 {
            return;
        }
        for k in start..items.len() {
            cur.push(items[k]);
            rec(items, k + 1, left - 1, cur, out);
            cur.pop();
        }
    }
    rec(nonzero, 0, max_degree, &mut Vec::new(), out);
}

/// Knots from the observed entries of node `i`: the observed node level
/// combined with every section of at most `max_degree` varying parents at
/// their observed (nonzero) levels; ranked by weight and capped.
fn knots_for(s: &NodeSchema, i: usize, entries: &[(usize, f64)], config: &HalConfig) -> Vec<Knot> {
    let m = s.node(i).m();
    let mut pa = vec![0; i];
    let mut first: Option<Vec<Level>> = None;
    let mut varying = vec![false; i];
    for &(e, _) in entries {
        s.decode_cfg(i, e / m, &mut pa);
        match &first {
            None => first = Some(pa.clone()),
            Some(f) => {
                for j in 0..i {
                    varying[j] |= f[j] != pa[j];
                }
            }
        }
    }
    let mut freq: HashMap<Knot, f64> = HashMap::new();
    let mut secs = Vec::new();
    for &(e, w) in entries {
        let x = (e % m) as Level;
        if x == 0 {
            continue;
        }
        s.decode_cfg(i, e / m, &mut pa);
        let nonzero: Vec<(usize, Level)> = (0..i).filter(|&j| varying[j] && pa[j] > 0).map(|j| (j, pa[j])).collect();
        secs.clear();
        sections(&nonzero, config.max_degree, &mut secs);
        for sec in &secs {
            for xu in 1..=x {
                *freq
                    .entry(Knot {
                        x: xu,
                        parents: sec.clone(),
                    })
                    .or_insert(0.0) += w;
            }
        }
    }
    let mut knots: Vec<(Knot, f64)> = freq.into_iter().collect();
    knots.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    knots.truncate(config.knot_cap);
    knots.into_iter().map(|k| k.0).collect()
}

/// Design rows of the knots at the given entries under `lik`; identical and
/// all-zero columns are dropped.
fn design(
    lik: &FactorizedLikelihood,
    i: usize,
    knots: Vec<Knot>,
    entries: &[usize],
    weights: &[f64],
) -> (Vec<Knot>, Vec<Vec<f64>>) {
    let s = lik.schema();
    let m = s.node(i).m();
    let t = lik.table(i);
    let mut pa = vec![0; i];
    let cols: Vec<Vec<f64>> = knots
        .iter()
        .map(|k| {
            entries
                .iter()
                .map(|&e| {
                    let (c, x) = (e / m, e % m);
                    s.decode_cfg(i, c, &mut pa);
                    if !k.active(&pa) {
                        return 0.0;
                    }
                    let xu = k.x as usize;
                    let surv: f64 = (xu..m).map(|y| t[c * m + y]).sum();
                    (x >= xu) as u8 as f64 - surv
                })
                .collect()
        })
        .collect();
    // Gram-Schmidt under the entry weights, in knot order: columns already
    // in the span of earlier ones (zero, duplicate or collinear) are dropped.
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut keep_knots = Vec::new();
    let mut keep_cols = Vec::new();
    let dot = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).zip(weights).map(|((x, y), w)| x * y * w).sum() };
    for (k, col) in knots.into_iter().zip(cols) {
        let norm2 = dot(&col, &col);
        if norm2 <= 0.0 {
            continue;
        }
        let mut r = col.clone();
        // Two passes keep the basis orthogonal to working precision.
        for _ in 0..2 {
            for q in &basis {
                let a = dot(&r, q);
                r.iter_mut().zip(q).for_each(|(v, qv)| *v -= a * qv);
            }
        }
        let rn = dot(&r, &r);
        if rn > DEPENDENCE_TOL * norm2 {
            let inv = 1.0 / rn.sqrt();
            basis.push(r.iter().map(|v| v * inv).collect());
            keep_knots.push(k);
            keep_cols.push(col);
        }
    }
    let rows = (0..entries.len())
        .map(|r| keep_cols.iter().map(|c| c[r]).collect())
        .collect();
    (keep_knots, rows)
}

/// Fits projections of every target's initial gradient at every
/// fluctuated node up to the target's outcome.
pub fn fit_hal_eic(
    lik: &FactorizedLikelihood,
    targets: &TargetSpec,
    n: usize,
    config: &HalConfig,
    seed: u64,
) -> Result<Vec<HalProjection>> {
    config.validate()?;
    let s = lik.schema();
    let sample = fit_sample(lik, n, config, seed);
    let ix = RowIndex::new(s, &sample.data);
    let kk = targets.len();
    let rows = sample.data.len();
    let grads: Vec<Vec<InitialGradient>> = targets
        .entries
        .iter()
        .map(|t| (0..rows).map(|r| initial_gradient(lik, t, sample.data.row(r))).collect())
        .collect();
    let mut out = Vec::new();
    for i in fluctuated_nodes(s) {
        let wanted: Vec<usize> = (0..kk).filter(|&k| i <= targets.entries[k].outcome.node()).collect();
        if wanted.is_empty() {
            continue;
        }
        let mediator = s.node(i).kind == NodeKind::Mediator;
        // entry -> per-fold stats
        let mut stats: HashMap<usize, Vec<EntryStats>> = HashMap::new();
        for r in 0..rows {
            let e = ix.entry(r, i);
            if e == NO_ENTRY {
                continue;
            }
            let w = sample.weights[r];
            let st = stats
                .entry(e as usize)
                .or_insert_with(|| vec![(0.0, vec![0.0; kk], vec![0.0; kk]); sample.n_folds]);
            let f = &mut st[sample.folds[r]];
            f.0 += w;
            for &k in &wanted {
                let g = if mediator { grads[k][r].mediator } else { grads[k][r].covariate };
                f.1[k] += w * g;
                f.2[k] += w * g * g;
            }
        }
        let mut entries: Vec<usize> = stats.keys().copied().collect();
        entries.sort_unstable();
        let weighted: Vec<(usize, f64)> = entries
            .iter()
            .map(|e| (*e, stats[e].iter().map(|f| f.0).sum()))
            .collect();
        let w: Vec<f64> = weighted.iter().map(|(_, w)| *w).collect();
        let (knots, rows_x) = design(lik, i, knots_for(s, i, &weighted, config), &entries, &w);
        let p = knots.len();
        for &k in &wanted {
            let mut folds = vec![Moments::zeros(p); sample.n_folds];
            let mut total = Moments::zeros(p);
            for (x, e) in rows_x.iter().zip(&entries) {
                for (f, st) in stats[e].iter().enumerate() {
                    if st.0 > 0.0 {
                        folds[f].add_group(x, st.0, st.1[k], st.2[k]);
                        total.add_group(x, st.0, st.1[k], st.2[k]);
                    }
                }
            }
            let (beta, lambda) = match config.penalty {
                Penalty::Zero => (least_squares(&total).iter().copied().collect::<Vec<f64>>(), 0.0),
                Penalty::CrossValidated => {
                    let fit = cv_lasso(&total, &folds, &config.lasso)?;
                    (fit.beta, fit.lambda)
                }
            };
            let b = DVector::from_vec(beta.clone());
            // Share of the response's second moment explained; the basis has no
            // intercept, so the zero fit is the reference.
            let base = total.mse(&DVector::zeros(p));
            let r_squared = if base > 0.0 { 1.0 - total.mse(&b) / base } else { 1.0 };
            out.push(HalProjection {
                node: i,
                target: k,
                nonzero: beta.iter().filter(|v| **v != 0.0).count(),
                knots: knots.clone(),
                beta,
                lambda,
                r_squared,
                sample_size: rows,
            });
        }
    }
    Ok(out)
}

/// Directions from frozen projections; baseline components are exact.
pub struct HalSource<'a> {
    pub targets: &'a TargetSpec,
    pub projections: Vec<HalProjection>,
}

impl DirectionSource for HalSource<'_> {
    fn evaluate(&mut self, lik: &FactorizedLikelihood) -> Result<Directions> {
        let s = lik.schema();
        let kk = self.targets.len();
        let mut tables: Vec<Vec<Vec<f64>>> = (0..s.len())
            .map(|i| {
                let width = if s.node(i).kind.is_intervened() {
                    0
                } else {
                    s.cfg_count(i) * s.node(i).m()
                };
                vec![vec![0.0; width]; kk]
            })
            .collect();
        let mut psi = Vec::with_capacity(kk);
        for (k, t) in self.targets.entries.iter().enumerate() {
            let q = q_tables(lik, t, None);
            psi.push(q.psi());
            for i in (0..s.len()).take_while(|&i| s.node(i).kind == NodeKind::Baseline) {
                let m = s.node(i).m();
                let t = lik.table(i);
                for c in 0..s.cfg_count(i) {
                    let qs: Vec<f64> = (0..m).map(|x| q.get(i + 1, c * m + x)).collect();
                    for x in 0..m {
                        let v: f64 = (0..m).map(|y| t[c * m + y] * (qs[x] - qs[y])).sum();
                        tables[i][k][c * m + x] = if v.is_finite() { v } else { 0.0 };
                    }
                }
            }
        }
        for pr in &self.projections {
            tables[pr.node][pr.target] = pr.table(lik);
        }
        Ok(Directions {
            tables,
            psi,
            breaches: 0,
        })
    }
}

#[derive(Clone, Debug)]
pub struct HalTmleResult {
    pub result: TmleResult,
    /// Projections of the final fit.
    pub projections: Vec<HalProjection>,
    pub fits: usize,
}

/// One-step TMLE with HAL-EIC directions: coefficients are fitted at the
/// current likelihood and frozen during the inner loop. After each inner
/// loop they are refitted, and the run ends once the stopping rule holds
/// with the refitted coefficients or after `config.refits` refits.
pub fn haleic_tmle(
    lik0: &FactorizedLikelihood,
    data: &Dataset,
    targets: &TargetSpec,
    hal: &HalConfig,
    tmle: &TmleConfig,
) -> Result<HalTmleResult> {
    hal.validate()?;
    let s = lik0.schema();
    let ix = RowIndex::new(s, data);
    let nodes = fluctuated_nodes(s);
    let cfg = TmleConfig {
        mode: Mode::OneStep,
        ..tmle.clone()
    };
    let mut lik = lik0.clone();
    let mut trace = Vec::new();
    let mut breaches = 0;
    let mut projections = fit_hal_eic(&lik, targets, data.len(), hal, hal.seed)?;
    let mut fits = 1;
    loop {
        let mut source = HalSource {
            targets,
            projections,
        };
        let mut r = run_tmle_with(&lik, &ix, &mut source, &cfg)?;
        let offset = trace.len();
        trace.extend(r.trace.iter().cloned().map(|mut e| {
            e.iteration += offset;
            e
        }));
        breaches += r.positivity_breaches;
        lik = r.likelihood.clone();
        if fits > hal.refits {
            r.trace = trace;
            r.positivity_breaches = breaches;
            return Ok(HalTmleResult {
                result: r,
                projections: source.projections,
                fits,
            });
        }
        // Refit at the updated likelihood; done if the rule holds with the
        // new coefficients.
        let seed = hal.seed.wrapping_add(fits as u64);
        fits += 1;
        let mut refit = HalSource {
            targets,
            projections: fit_hal_eic(&lik, targets, data.len(), hal, seed)?,
        };
        let dirs = refit.evaluate(&lik)?;
        let sc = Scores::compute(s, &ix, &dirs, &nodes);
        if sc.satisfied(cfg.stop, ix.n) {
            r.trace = trace;
            r.positivity_breaches = breaches;
            r.totals = sc.totals;
            r.converged = true;
            return Ok(HalTmleResult {
                result: r,
                projections: refit.projections,
                fits,
            });
        }
        projections = refit.projections;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eic::eic_tables;
    use crate::gcomp::OutcomeFn;
    use crate::likelihood::DEFAULT_P_MIN;
    use crate::schema::{build_schema, NodeSpec};
    use std::sync::Arc;

    fn k1() -> Arc<NodeSchema> {
        Arc::new(
            build_schema(
                1,
                vec![
                    NodeSpec::binary("L0", NodeKind::Baseline, 0),
                    NodeSpec::binary("A1", NodeKind::Treatment, 1),
                    NodeSpec::binary("R1", NodeKind::CovariateR, 1),
                    NodeSpec::binary("Z1", NodeKind::Mediator, 1),
                    NodeSpec::binary("Y1", NodeKind::Outcome, 1),
                ],
            )
            .unwrap(),
        )
    }

    fn lik(s: Arc<NodeSchema>, shift: f64) -> FactorizedLikelihood {
        FactorizedLikelihood::from_fn(s, DEFAULT_P_MIN, |i, pa, out| {
            let sum: f64 = pa.iter().enumerate().map(|(j, &v)| (j as f64 + 1.0) * 0.3 * v as f64).sum();
            let p = 0.2 + 0.6 * ((i as f64 * 0.37 + sum + shift).sin() * 0.5 + 0.5);
            out[0] = 1.0 - p;
            out[1] = p;
        })
        .unwrap()
    }

    fn targets(s: &NodeSchema) -> TargetSpec {
        TargetSpec::mediation(s, vec![("Y1".into(), OutcomeFn::Indicator { node: 4, level: 1 })], &[1], &[0])
            .unwrap()
    }

    fn exact_config() -> HalConfig {
        HalConfig {
            sampling: Sampling::Exact,
            max_degree: 4,
            penalty: Penalty::Zero,
            ..HalConfig::default()
        }
    }

    #[test]
    fn saturated_projection_equals_exact_eic() {
        let s = k1();
        let p = lik(s.clone(), 0.3);
        let t = targets(&s);
        let exact = eic_tables(&p, &t);
        let pr = fit_hal_eic(&p, &t, 0, &exact_config(), 0).unwrap();
        let mut src = HalSource {
            targets: &t,
            projections: pr,
        };
        let hal = src.evaluate(&p).unwrap();
        for i in fluctuated_nodes(&s) {
            for &c in s.stochastic_cfgs(i) {
                for x in 0..2 {
                    let e = c as usize * 2 + x;
                    for k in 0..t.len() {
                        let d = (hal.tables[i][k][e] - exact.comps[i][k][e]).abs();
                        assert!(d < 1e-8, "node {i} target {k} entry {e}: {d}");
                    }
                }
            }
        }
        assert_eq!(hal.tables[0], exact.comps[0]);
    }

    #[test]
    fn projections_are_conditionally_centered() {
        let s = k1();
        let p = lik(s.clone(), 0.1);
        let t = targets(&s);
        let pr = fit_hal_eic(&p, &t, 300, &HalConfig::default(), 4).unwrap();
        let q = lik(s.clone(), 0.9);
        for proj in &pr {
            let tab = proj.table(&q);
            let m = s.node(proj.node).m();
            for &c in s.stochastic_cfgs(proj.node) {
                let c = c as usize;
                let mean: f64 = (0..m).map(|x| tab[c * m + x] * q.table(proj.node)[c * m + x]).sum();
                assert!(mean.abs() < 1e-12);
            }
            assert!(proj.nonzero <= proj.sample_size.saturating_sub(1));
        }
    }

    #[test]
    fn zero_outcome_gives_zero_coefficients() {
        let s = k1();
        let p = lik(s.clone(), 0.1);
        // A level the outcome never takes: the gradient is identically zero.
        let mut t = targets(&s);
        for e in &mut t.entries {
            e.outcome = OutcomeFn::Indicator { node: 4, level: 7 };
        }
        let pr = fit_hal_eic(&p, &t, 200, &HalConfig::default(), 1).unwrap();
        assert!(pr.iter().all(|p| p.beta.iter().all(|b| *b == 0.0)));
    }

    #[test]
    fn resample_is_deterministic() {
        let s = k1();
        let p = lik(s, 0.0);
        assert_eq!(resample(&p, 50, 9), resample(&p, 50, 9));
    }
}
