//! Property checks shared by the proptest suite and the acceptance run.
//! Each returns Err with a description of the first violation.

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{entries, random_lik, schema, small_k1, support, targets};
use medtmle::data::RowIndex;
use medtmle::eic::{eic_components, eic_tables, exact_remainder};
use medtmle::gcomp::{psi, psi_all, sequential_regression_psi, ContrastKind, OutcomeFn, Target, TargetSpec};
use medtmle::haleic::{fit_hal_eic, initial_gradient, HalConfig, HalSource, Penalty, Sampling};
use medtmle::lasso::{lasso_cd, objective, Moments};
use medtmle::likelihood::{apply_fluctuations, fit_initial, misspecify, FactorizedLikelihood, FluctuationLayer, ModelSpec};
use medtmle::schema::{build_schema, NodeKind, NodeSchema, NodeSpec};
use medtmle::tmle::{fluctuated_nodes, run_tmle, DirectionSource, Directions, Mode, Scores, TmleConfig};

pub type Check = Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn eic_total(lik: &FactorizedLikelihood, t: &Target, traj: &[u8]) -> f64 {
    eic_components(lik, t, traj).unwrap().iter().map(|c| c.1).sum()
}

/// E[f | X = x, parents] - E[f | parents] per table entry of node `i`.
fn projection(s: &NodeSchema, sup: &[(Vec<u8>, f64)], values: &[f64], i: usize) -> HashMap<usize, f64> {
    let m = s.node(i).m();
    let mut by_entry: HashMap<usize, (f64, f64)> = HashMap::new();
    let mut by_cfg: HashMap<usize, (f64, f64)> = HashMap::new();
    for ((t, p), v) in sup.iter().zip(values) {
        if let Some(e) = entries(s, t)[i] {
            let a = by_entry.entry(e).or_default();
            a.0 += p * v;
            a.1 += p;
            let b = by_cfg.entry(e / m).or_default();
            b.0 += p * v;
            b.1 += p;
        }
    }
    by_entry
        .into_iter()
        .map(|(e, (num, den))| {
            let (cn, cd) = by_cfg[&(e / m)];
            (e, num / den - cn / cd)
        })
        .collect()
}

/// Every component table has conditional mean zero at every stochastic
/// parent configuration.
pub fn eic_centered(seed: u64, k: usize) -> Check {
    let s = schema(k);
    let lik = random_lik(s.clone(), seed, 0.05);
    let t = targets(&s);
    let tabs = eic_tables(&lik, &t);
    for i in (0..s.len()).filter(|&i| !s.node(i).kind.is_intervened()) {
        let m = s.node(i).m();
        for &c in s.stochastic_cfgs(i) {
            let c = c as usize;
            for k in 0..t.len() {
                let mean: f64 = (0..m).map(|x| tabs.comps[i][k][c * m + x] * lik.table(i)[c * m + x]).sum();
                ensure!(mean.abs() <= 1e-8, "node {i} cfg {c} target {k}: conditional mean {mean:e}");
            }
        }
    }
    Ok(())
}

/// d/de psi((1 + e h) p) at 0 equals P[D h] for a random score h that is
/// conditionally centered at every node, treatment nodes included.
pub fn pathwise_derivative(seed: u64, k: usize) -> Check {
    let s = schema(k);
    let lik = random_lik(s.clone(), seed, 0.05);
    let t = targets(&s);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let h: Vec<Vec<f64>> = (0..s.len())
        .map(|i| {
            let m = s.node(i).m();
            let mut tab = vec![0.0; s.cfg_count(i) * m];
            for &c in s.stochastic_cfgs(i) {
                let c = c as usize;
                let raw: Vec<f64> = (0..m).map(|_| rng.random::<f64>() - 0.5).collect();
                let mean: f64 = (0..m).map(|x| raw[x] * lik.table(i)[c * m + x]).sum();
                for x in 0..m {
                    tab[c * m + x] = raw[x] - mean;
                }
            }
            tab
        })
        .collect();
    let layers = |eps: f64| -> Vec<FluctuationLayer> {
        (0..s.len())
            .filter(|&i| !s.stochastic_cfgs(i).is_empty())
            .map(|i| FluctuationLayer {
                node: i,
                epsilon: vec![eps],
                directions: vec![h[i].clone()],
            })
            .collect()
    };
    let step = 1e-5;
    let up = apply_fluctuations(&lik, &layers(step)).map_err(|e| e.to_string())?;
    let down = apply_fluctuations(&lik, &layers(-step)).map_err(|e| e.to_string())?;
    let sup = support(&lik);
    for e in &t.entries {
        let fd = (psi(&up, e) - psi(&down, e)) / (2.0 * step);
        let inner: f64 = sup
            .iter()
            .map(|(traj, p)| {
                let hv: f64 = entries(&s, traj)
                    .iter()
                    .enumerate()
                    .filter_map(|(i, en)| en.map(|en| h[i][en]))
                    .sum();
                p * eic_total(&lik, e, traj) * hv
            })
            .sum();
        ensure!(
            (fd - inner).abs() <= 1e-4 * inner.abs().max(1e-3),
            "{}: finite difference {fd} vs <D,h> {inner}",
            e.label
        );
    }
    Ok(())
}

/// Forward plug-in and backward sequential regression agree.
pub fn gcomp_vs_sequential(seed: u64, k: usize) -> Check {
    let s = schema(k);
    let lik = random_lik(s.clone(), seed, 0.02);
    for e in &targets(&s).entries {
        let (a, b) = (psi(&lik, e), sequential_regression_psi(&lik, e));
        ensure!((a - b).abs() <= 1e-10, "{}: {a} vs {b}", e.label);
    }
    Ok(())
}

/// On K=1 each component equals the projection of the full EIC, and of
/// its group's initial gradient, onto the node's tangent space.
pub fn projection_identity(seed: u64, small: bool) -> Check {
    let s = if small { small_k1() } else { schema(1) };
    let lik = random_lik(s.clone(), seed, 0.05);
    let sup = support(&lik);
    for e in &targets(&s).entries {
        let total: Vec<f64> = sup.iter().map(|(traj, _)| eic_total(&lik, e, traj)).collect();
        let grads: Vec<_> = sup.iter().map(|(traj, _)| initial_gradient(&lik, e, traj)).collect();
        let one = TargetSpec {
            entries: vec![e.clone()],
            contrasts: Vec::new(),
        };
        let tabs = eic_tables(&lik, &one);
        for i in (0..s.len()).filter(|&i| !s.node(i).kind.is_intervened()) {
            let mediator = s.node(i).kind == NodeKind::Mediator;
            let g: Vec<f64> = grads.iter().map(|g| if mediator { g.mediator } else { g.covariate }).collect();
            let of_grad = projection(&s, &sup, &g, i);
            for (en, v) in projection(&s, &sup, &total, i) {
                let d = tabs.comps[i][0][en];
                ensure!((d - v).abs() <= 1e-8, "{} node {i} entry {en}: component {d} vs projection {v}", e.label);
                ensure!(
                    (d - of_grad[&en]).abs() <= 1e-8,
                    "{} node {i} entry {en}: component {d} vs gradient projection {}",
                    e.label,
                    of_grad[&en]
                );
            }
        }
    }
    Ok(())
}

/// Saturated HAL fitted with exact trajectory weights and no penalty
/// reproduces the exact components.
pub fn saturated_hal(seed: u64, small: bool) -> Check {
    let s = if small { small_k1() } else { schema(1) };
    let lik = random_lik(s.clone(), seed, 0.05);
    let t = targets(&s);
    let cfg = HalConfig {
        sampling: Sampling::Exact,
        max_degree: s.len(),
        penalty: Penalty::Zero,
        ..HalConfig::default()
    };
    let mut src = HalSource {
        targets: &t,
        projections: fit_hal_eic(&lik, &t, 0, &cfg, 0).map_err(|e| e.to_string())?,
    };
    let hal: Directions = src.evaluate(&lik).map_err(|e| e.to_string())?;
    let exact = eic_tables(&lik, &t);
    for i in fluctuated_nodes(&s) {
        let m = s.node(i).m();
        for &c in s.stochastic_cfgs(i) {
            for x in 0..m {
                let e = c as usize * m + x;
                for k in 0..t.len() {
                    let d = (hal.tables[i][k][e] - exact.comps[i][k][e]).abs();
                    ensure!(d <= 1e-6, "node {i} target {k} entry {e}: |HAL - exact| = {d:e}");
                }
            }
        }
    }
    Ok(())
}

/// Likelihood with each factor group (treatment and censoring, mediators,
/// the rest) taken from `truth` when its flag is set, else from `other`.
fn mix(truth: &FactorizedLikelihood, other: &FactorizedLikelihood, a: bool, z: bool, l: bool) -> FactorizedLikelihood {
    let s = truth.schema();
    let mut out = other.clone();
    for i in 0..s.len() {
        let kind = s.node(i).kind;
        let take = if kind.is_intervened() {
            a
        } else if kind == NodeKind::Mediator {
            z
        } else {
            l
        };
        if take {
            out = out.with_factor_from(truth, i);
        }
    }
    out
}

/// The remainder vanishes when two of the three groups are correct and
/// not when only one is.
pub fn remainder_scenarios(seed: u64, k: usize) -> Check {
    let s = schema(k);
    let p0 = random_lik(s.clone(), seed, 0.05);
    let p1 = random_lik(s.clone(), seed.wrapping_add(17), 0.05);
    let t = targets(&s);
    for (a, z, l) in [(true, true, false), (true, false, true), (false, true, true)] {
        let p = mix(&p0, &p1, a, z, l);
        for e in &t.entries {
            let r = exact_remainder(&p, &p0, e).map_err(|e| e.to_string())?;
            ensure!(r.direct.abs() <= 1e-8, "correct groups {:?}, {}: remainder {:e}", (a, z, l), e.label, r.direct);
        }
    }
    for (a, z, l) in [(true, false, false), (false, true, false), (false, false, true)] {
        let p = mix(&p0, &p1, a, z, l);
        let worst = t
            .entries
            .iter()
            .map(|e| exact_remainder(&p, &p0, e).map(|r| r.direct.abs()).unwrap_or(f64::NAN))
            .fold(0.0, f64::max);
        ensure!(worst > 1e-6, "only {:?} correct: remainder {worst:e}", (a, z, l));
    }
    Ok(())
}

/// (Y1, Y2) entry indices under the same intervention pair.
fn survival_pairs(t: &TargetSpec) -> Vec<(usize, usize)> {
    t.entries
        .iter()
        .enumerate()
        .filter(|(_, e)| e.outcome_name == "Y1")
        .filter_map(|(a, ea)| {
            t.entries
                .iter()
                .position(|eb| eb.pair == ea.pair && eb.outcome_name == "Y2")
                .map(|b| (a, b))
        })
        .collect()
}

fn competing_schema() -> Arc<NodeSchema> {
    let mut specs = vec![NodeSpec::binary("L0", NodeKind::Baseline, 0)];
    for t in 1..=2 {
        specs.push(NodeSpec::binary(&format!("A{t}"), NodeKind::Treatment, t));
        specs.push(NodeSpec::binary(&format!("R{t}"), NodeKind::CovariateR, t));
        specs.push(NodeSpec::binary(&format!("Z{t}"), NodeKind::Mediator, t));
        specs.push(NodeSpec::new(&format!("Y{t}"), NodeKind::Outcome, t, vec![0, 1, 2]).with_absorbing(vec![1, 2]));
    }
    Arc::new(build_schema(2, specs).unwrap())
}

/// Survival plug-ins are nondecreasing in t; competing incidences are
/// nondecreasing and sum to at most one.
pub fn parameter_space(seed: u64) -> Check {
    let s = schema(2);
    let lik = random_lik(s.clone(), seed, 0.01);
    let t = targets(&s);
    let v = psi_all(&lik, &t);
    for (a, b) in survival_pairs(&t) {
        ensure!(
            (0.0..=1.0).contains(&v[a]) && v[a] <= v[b] + 1e-15 && v[b] <= 1.0,
            "survival plug-ins {} then {}",
            v[a],
            v[b]
        );
    }
    let cr = competing_schema();
    let lik = random_lik(cr.clone(), seed, 0.01);
    let outcomes = (0..cr.len())
        .filter(|&i| cr.node(i).kind == NodeKind::Outcome)
        .flat_map(|i| (1..=2u8).map(move |lv| (format!("Y{i}.{lv}"), OutcomeFn::Indicator { node: i, level: lv })))
        .collect();
    let t = TargetSpec::mediation(&cr, outcomes, &[1, 1], &[0, 0]).map_err(|e| e.to_string())?;
    // Per pair: [Y1 type 1, Y1 type 2, Y2 type 1, Y2 type 2].
    for c in psi_all(&lik, &t).chunks(4) {
        ensure!(c[0] + c[1] <= 1.0 + 1e-12 && c[2] + c[3] <= 1.0 + 1e-12, "incidences sum above one: {c:?}");
        ensure!(c[0] <= c[2] + 1e-15 && c[1] <= c[3] + 1e-15, "incidence decreases in t: {c:?}");
    }
    Ok(())
}

/// One TMLE run on data from a random K=2 truth with one misspecified
/// factor group. At every iteration the survival plug-ins are monotone
/// and TE = NIE + NDE; one-step log-likelihoods never decrease; a
/// converged run satisfies the stopping rule. Returns whether it converged.
pub fn tmle_run(seed: u64, iterative: bool, miss: usize) -> Result<bool, String> {
    let s = schema(2);
    let truth = random_lik(s.clone(), seed, 0.15);
    let data = truth.sample(400, &mut ChaCha8Rng::seed_from_u64(seed));
    let (init, _) = fit_initial(&data, s.clone(), &ModelSpec::default()).map_err(|e| e.to_string())?;
    let kind = [NodeKind::Outcome, NodeKind::Mediator, NodeKind::CovariateR][miss % 3];
    let nodes: Vec<usize> = (0..s.len()).filter(|&i| s.node(i).kind == kind).collect();
    let init = misspecify(&init, &nodes, 0.05, (0.01, 0.99)).map_err(|e| e.to_string())?;
    let t = targets(&s);
    let cfg = TmleConfig {
        mode: if iterative { Mode::Iterative } else { Mode::OneStep },
        max_iterations: 200,
        ..TmleConfig::default()
    };
    let r = run_tmle(&init, &data, &t, &cfg).map_err(|e| e.to_string())?;
    let pairs = survival_pairs(&t);
    for e in &r.trace {
        for &(a, b) in &pairs {
            let (va, vb) = (e.estimates[a], e.estimates[b]);
            ensure!(
                (0.0..=1.0).contains(&va) && va <= vb + 1e-12 && vb <= 1.0,
                "iteration {}: survival plug-ins {va} then {vb}",
                e.iteration
            );
        }
        for (c, v) in t.contrasts.iter().zip(t.contrast_values(&e.estimates)) {
            if c.kind == ContrastKind::Te {
                let direct = e.estimates[c.plus] - e.estimates[c.minus];
                ensure!((v - direct).abs() <= 4.0 * f64::EPSILON, "iteration {}: TE {v} vs {direct}", e.iteration);
            }
        }
    }
    if !iterative {
        ensure!(
            r.trace.windows(2).all(|w| w[1].log_likelihood >= w[0].log_likelihood - 1e-12),
            "one-step log-likelihood decreased"
        );
    }
    if r.converged {
        let n = data.len() as f64;
        for (k, tot) in r.totals.iter().enumerate() {
            let mean = tot.iter().sum::<f64>() / n;
            let sd = (tot.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            ensure!(mean.abs() <= sd / (n.sqrt() * n.ln()), "target {k}: |P_n D| = {mean:e} above the threshold");
        }
    }
    Ok(r.converged)
}

/// d/dx of the empirical log-likelihood along the one-step path at 0
/// equals the norm of the per-node empirical scores.
pub fn onestep_derivative(seed: u64) -> Check {
    let s = schema(2);
    let truth = random_lik(s.clone(), seed, 0.1);
    let data = truth.sample(500, &mut ChaCha8Rng::seed_from_u64(seed));
    let (init, _) = fit_initial(&data, s.clone(), &ModelSpec::default()).map_err(|e| e.to_string())?;
    let ys: Vec<usize> = (0..s.len()).filter(|&i| s.node(i).kind == NodeKind::Outcome).collect();
    let init = misspecify(&init, &ys, 0.05, (0.01, 0.99)).map_err(|e| e.to_string())?;
    let t = targets(&s);
    let ix = RowIndex::new(&s, &data);
    let dirs: Directions = eic_tables(&init, &t).into();
    let nodes = fluctuated_nodes(&s);
    let sc = Scores::compute(&s, &ix, &dirs, &nodes);
    let norm = sc.norm();
    let path = |x: f64| -> Result<f64, String> {
        let layers: Vec<FluctuationLayer> = nodes
            .iter()
            .zip(&sc.per_node)
            .map(|(&i, h)| FluctuationLayer {
                node: i,
                epsilon: h.iter().map(|v| v * x / norm).collect(),
                directions: dirs.tables[i].clone(),
            })
            .collect();
        let lik = apply_fluctuations(&init, &layers).map_err(|e| e.to_string())?;
        lik.log_likelihood_indexed(&ix).map_err(|e| e.to_string())
    };
    let h = 1e-6;
    let fd = (path(h)? - path(-h)?) / (2.0 * h);
    ensure!((fd - norm).abs() <= 1e-3 * norm, "derivative {fd} vs score norm {norm}");
    Ok(())
}

/// Lasso by exhaustive search over sign patterns: for each pattern solve
/// the restricted stationarity equations and keep the best solution that
/// is consistent with its pattern and satisfies the KKT conditions.
fn brute_force_lasso(g: &DMatrix<f64>, c: &DVector<f64>, lambda: f64) -> Option<DVector<f64>> {
    let p = c.len();
    let mut best: Option<(f64, DVector<f64>)> = None;
    for code in 0..3usize.pow(p as u32) {
        let mut signs = vec![0i8; p];
        let mut rest = code;
        for s in signs.iter_mut() {
            *s = (rest % 3) as i8 - 1;
            rest /= 3;
        }
        let act: Vec<usize> = (0..p).filter(|&j| signs[j] != 0).collect();
        let mut b = DVector::zeros(p);
        if !act.is_empty() {
            let ga = DMatrix::from_fn(act.len(), act.len(), |a, bb| g[(act[a], act[bb])]);
            let rhs = DVector::from_fn(act.len(), |a, _| c[act[a]] - lambda * signs[act[a]] as f64);
            let Some(sol) = ga.lu().solve(&rhs) else { continue };
            if act.iter().zip(sol.iter()).any(|(&j, v)| v.signum() != signs[j] as f64 || *v == 0.0) {
                continue;
            }
            for (a, &j) in act.iter().enumerate() {
                b[j] = sol[a];
            }
        }
        let grad = c - g * &b;
        if (0..p).any(|j| signs[j] == 0 && grad[j].abs() > lambda * (1.0 + 1e-9)) {
            continue;
        }
        let f = 0.5 * b.dot(&(g * &b)) - c.dot(&b) + lambda * b.iter().map(|v| v.abs()).sum::<f64>();
        if best.as_ref().is_none_or(|(bf, _)| f < *bf) {
            best = Some((f, b));
        }
    }
    best.map(|(_, b)| b)
}

/// Coordinate descent agrees with the exhaustive oracle on a random design
/// with at most 8 columns.
pub fn lasso_matches_oracle(seed: u64, p: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = 40;
    let mut m = Moments::zeros(p);
    let truth: Vec<f64> = (0..p).map(|j| if j % 2 == 0 { rng.random::<f64>() * 2.0 - 1.0 } else { 0.0 }).collect();
    for _ in 0..rows {
        let x: Vec<f64> = (0..p).map(|_| StandardNormal.sample(&mut rng)).collect();
        let noise: f64 = StandardNormal.sample(&mut rng);
        let y: f64 = x.iter().zip(&truth).map(|(a, b)| a * b).sum::<f64>() + 0.5 * noise;
        let w = 0.5 + rng.random::<f64>();
        m.add_group(&x, w, w * y, w * y * y);
    }
    let g = &m.gram / m.weight;
    let c = &m.xty / m.weight;
    let lmax = c.amax();
    for frac in [0.5, 0.1, 0.01] {
        let lambda = lmax * frac;
        let oracle = brute_force_lasso(&g, &c, lambda).ok_or("oracle found no KKT point")?;
        let mut b = DVector::zeros(p);
        lasso_cd(&m, lambda, &mut b, 1e-10, 100_000).map_err(|e| e.to_string())?;
        let diff = (&b - &oracle).amax();
        ensure!(diff <= 1e-6, "lambda {lambda}: max coefficient difference {diff:e}");
        let (fo, fb) = (objective(&m, lambda, &oracle), objective(&m, lambda, &b));
        ensure!(fb <= fo + 1e-9 * fo.abs().max(1.0), "lambda {lambda}: objective {fb} above oracle {fo}");
    }
    Ok(())
}
