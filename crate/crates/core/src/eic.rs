//! Efficient influence curve components, per-trajectory propensity
//! weights and the exact second-order remainder.
//!
//! Component of a non-treatment node X with value x and parents pa:
//! `w(pa) * (Q_after(pa, x) - Q_before(pa))`. For covariate nodes the weight
//! is the inverse probability of following arm `a` times the mediator
//! density ratio (arm `a_prime` over arm `a`) accumulated so far; for
//! mediators it is the inverse probability of following arm `a_prime` times
//! the covariate density ratio (arm `a` over arm `a_prime`). Baseline nodes
//! have weight 1, so their components telescope to `Q(L0) - psi`.

use crate::data::{Dataset, RowIndex, NO_ENTRY};
use crate::error::{Error, Result};
use crate::gcomp::{q_tables, MediatorLaw, QTable, Target, TargetSpec};
use crate::likelihood::FactorizedLikelihood;
use crate::schema::{Absorption, Level, NodeKind, NodeSchema, EMPTY};

/// Component tables of every target at one likelihood.
#[derive(Clone, Debug)]
pub struct EicTables {
    /// comps[i][k][entry]; empty for treatment and censoring nodes.
    pub comps: Vec<Vec<Vec<f64>>>,
    pub psi: Vec<f64>,
    /// Number of table entries whose weight used a floored denominator.
    pub breaches: usize,
}

struct DWalker<'a> {
    lik: &'a FactorizedLikelihood,
    s: &'a NodeSchema,
    main: Vec<Level>,
    alt: Vec<Level>,
    q: &'a QTable,
    law: Option<&'a MediatorLaw>,
    out: Vec<Vec<f64>>,
    p_min: f64,
    breaches: usize,
}

impl DWalker<'_> {
    #[inline]
    fn floor(&mut self, p: f64) -> f64 {
        if p < self.p_min {
            self.breaches += 1;
            self.p_min
        } else {
            p
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn visit(
        &mut self,
        i: usize,
        cfg: usize,
        cm: Option<usize>,
        ca: Option<usize>,
        st: Absorption,
        wm: Option<f64>,
        wa: Option<f64>,
    ) {
        let s = self.s;
        if i == s.len() || (wm.is_none() && wa.is_none()) {
            return;
        }
        let node = s.node(i);
        let m = node.m();
        if let Some(f) = s.forced(i, st) {
            if f != EMPTY {
                self.visit(
                    i + 1,
                    cfg * m + f as usize,
                    s.extend(i, cm, f),
                    s.extend(i, ca, f),
                    s.advance(i, st, f),
                    wm,
                    wa,
                );
            }
            return;
        }
        let table = self.lik.table(i);
        if node.kind.is_intervened() {
            let (vm, va) = (self.main[i], self.alt[i]);
            for a in 0..m as Level {
                let p = table[cfg * m + a as usize];
                let wm2 = if a == vm { wm } else { None };
                let wa2 = if a == va { wa } else { None };
                if wm2.is_none() && wa2.is_none() {
                    continue;
                }
                let p = self.floor(p);
                self.visit(
                    i + 1,
                    cfg * m + a as usize,
                    s.extend(i, cm, vm),
                    s.extend(i, ca, va),
                    s.advance(i, st, a),
                    wm2.map(|w| w / p),
                    wa2.map(|w| w / p),
                );
            }
            return;
        }
        let (cmv, cav) = (cm.unwrap(), ca.unwrap());
        let row = &table[cfg * m..(cfg + 1) * m];
        let qs: Vec<f64> = (0..m).map(|x| self.q.get(i + 1, cmv * m + x)).collect();
        for x in 0..m as Level {
            let e = cfg * m + x as usize;
            let em = cmv * m + x as usize;
            let ea = cav * m + x as usize;
            // Q_after - Q_before as sum_x' p(x') (Q(x) - Q(x')): no
            // cancellation between two O(1) values when p(x) is tiny, so
            // the component stays centered under huge weights.
            let qn = qs[x as usize];
            let diff: f64 = row.iter().zip(&qs).map(|(p, q)| p * (qn - q)).sum();
            let (mut wm2, mut wa2) = (wm, wa);
            match node.kind {
                NodeKind::Mediator => {
                    if let (Some(w), None) = (wa, self.law) {
                        self.out[i][e] = w * diff;
                    }
                    if let Some(w) = wm {
                        let num = match self.law {
                            Some(l) => l.prob(i, em),
                            None => table[ea],
                        };
                        let den = self.floor(table[em]);
                        wm2 = Some(w * num / den);
                    }
                }
                _ => {
                    if let Some(w) = wm {
                        self.out[i][e] = w * diff;
                    }
                    if node.kind != NodeKind::Baseline {
                        if let Some(w) = wa {
                            let den = self.floor(table[ea]);
                            wa2 = Some(w * table[em] / den);
                        }
                    }
                }
            }
            self.visit(
                i + 1,
                e,
                s.extend(i, cm, x),
                s.extend(i, ca, x),
                s.advance(i, st, x),
                wm2,
                wa2,
            );
        }
    }
}

/// Component tables of one target given its Q table.
pub fn target_tables(
    lik: &FactorizedLikelihood,
    target: &Target,
    q: &QTable,
    law: Option<&MediatorLaw>,
) -> (Vec<Vec<f64>>, usize) {
    let s = lik.schema();
    let (main, alt) = target.pair.arm_levels(s);
    let out = (0..s.len())
        .map(|i| {
            if s.node(i).kind.is_intervened() {
                Vec::new()
            } else {
                vec![0.0; s.cfg_count(i) * s.node(i).m()]
            }
        })
        .collect();
    let mut w = DWalker {
        lik,
        s,
        main,
        alt,
        q,
        law,
        out,
        p_min: lik.p_min(),
        breaches: 0,
    };
    w.visit(0, 0, Some(0), Some(0), Absorption::default(), Some(1.0), Some(1.0));
    (w.out, w.breaches)
}

/// Exact component tables of every target.
pub fn eic_tables(lik: &FactorizedLikelihood, targets: &TargetSpec) -> EicTables {
    let s = lik.schema();
    let mut comps: Vec<Vec<Vec<f64>>> = vec![Vec::new(); s.len()];
    let mut psi = Vec::with_capacity(targets.len());
    let mut breaches = 0;
    for t in &targets.entries {
        let q = q_tables(lik, t, None);
        psi.push(q.psi());
        let (tabs, b) = target_tables(lik, t, &q, None);
        breaches += b;
        for (i, tab) in tabs.into_iter().enumerate() {
            comps[i].push(tab);
        }
    }
    EicTables {
        comps,
        psi,
        breaches,
    }
}

/// Component tables of a static treatment with a known mediator law; the
/// mediator components vanish.
pub fn stochastic_intervention_tables(
    lik: &FactorizedLikelihood,
    target: &Target,
    law: &MediatorLaw,
) -> (f64, Vec<Vec<f64>>) {
    let q = q_tables(lik, target, Some(law));
    let (tabs, _) = target_tables(lik, target, &q, Some(law));
    (q.psi(), tabs)
}

fn lookup(s: &NodeSchema, tabs: &[Vec<f64>], obs: &[Level]) -> Vec<(usize, f64)> {
    let mut out = Vec::new();
    let mut cfg = Some(0usize);
    let mut st = Absorption::default();
    for (i, &x) in obs.iter().enumerate() {
        if !s.node(i).kind.is_intervened() {
            let v = match (s.forced(i, st), cfg) {
                (None, Some(c)) => tabs[i][c * s.node(i).m() + x as usize],
                _ => 0.0,
            };
            out.push((i, v));
        }
        cfg = s.extend(i, cfg, x);
        st = s.advance(i, st, x);
    }
    out
}

/// Per-node components (node index, value) of one observation.
pub fn eic_components(
    lik: &FactorizedLikelihood,
    target: &Target,
    observation: &[Level],
) -> Result<Vec<(usize, f64)>> {
    let s = lik.schema();
    s.validate_trajectory(observation)
        .map_err(|v| Error::InvalidRow { row: 0, violation: v.to_string() })?;
    let q = q_tables(lik, target, None);
    let (tabs, _) = target_tables(lik, target, &q, None);
    Ok(lookup(s, &tabs, observation))
}

/// Per-node components of one observation under a known mediator law.
pub fn stochastic_intervention_eic(
    lik: &FactorizedLikelihood,
    target: &Target,
    law: &MediatorLaw,
    observation: &[Level],
) -> Result<Vec<(usize, f64)>> {
    let s = lik.schema();
    s.validate_trajectory(observation)
        .map_err(|v| Error::InvalidRow { row: 0, violation: v.to_string() })?;
    let (_, tabs) = stochastic_intervention_tables(lik, target, law);
    Ok(lookup(s, &tabs, observation))
}

/// Per-observation components for a target set.
#[derive(Clone, Debug)]
pub struct EicBundle {
    pub n: usize,
    pub n_targets: usize,
    /// Non-intervened node indices, in schema order.
    pub nodes: Vec<usize>,
    values: Vec<f64>,
    pub psi: Vec<f64>,
    pub breaches: usize,
}

impl EicBundle {
    pub fn from_tables(s: &NodeSchema, ix: &RowIndex, tables: &EicTables) -> Self {
        let nodes: Vec<usize> = (0..s.len()).filter(|&i| !s.node(i).kind.is_intervened()).collect();
        let kk = tables.psi.len();
        let mut values = vec![0.0; ix.n * kk * nodes.len()];
        for r in 0..ix.n {
            for (j, &i) in nodes.iter().enumerate() {
                let e = ix.entry(r, i);
                if e == NO_ENTRY {
                    continue;
                }
                for k in 0..kk {
                    values[(r * kk + k) * nodes.len() + j] = tables.comps[i][k][e as usize];
                }
            }
        }
        EicBundle {
            n: ix.n,
            n_targets: kk,
            nodes,
            values,
            psi: tables.psi.clone(),
            breaches: tables.breaches,
        }
    }

    #[inline]
    pub fn component(&self, row: usize, k: usize, j: usize) -> f64 {
        self.values[(row * self.n_targets + k) * self.nodes.len() + j]
    }

    pub fn total(&self, row: usize, k: usize) -> f64 {
        let base = (row * self.n_targets + k) * self.nodes.len();
        self.values[base..base + self.nodes.len()].iter().sum()
    }

    /// totals[k][row]
    pub fn totals(&self) -> Vec<Vec<f64>> {
        (0..self.n_targets)
            .map(|k| (0..self.n).map(|r| self.total(r, k)).collect())
            .collect()
    }

    pub fn mean_component(&self, k: usize, j: usize) -> f64 {
        (0..self.n).map(|r| self.component(r, k, j)).sum::<f64>() / self.n as f64
    }

    pub fn mean(&self, k: usize) -> f64 {
        (0..self.n).map(|r| self.total(r, k)).sum::<f64>() / self.n as f64
    }

    /// Empirical variance with divisor n.
    pub fn variance(&self, k: usize) -> f64 {
        let mu = self.mean(k);
        (0..self.n).map(|r| (self.total(r, k) - mu).powi(2)).sum::<f64>() / self.n as f64
    }
}

/// Evaluates all components of all targets on every row.
pub fn empirical_scores(
    lik: &FactorizedLikelihood,
    data: &Dataset,
    targets: &TargetSpec,
) -> EicBundle {
    let s = lik.schema();
    let ix = RowIndex::new(s, data);
    EicBundle::from_tables(s, &ix, &eic_tables(lik, targets))
}

/// Weights of each non-intervened stochastic node along one trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeWeight {
    pub node: usize,
    /// Weight for covariate components (arm `a` indicator and mediator ratios).
    pub main: f64,
    /// Weight for mediator components (arm `a_prime` indicator and covariate ratios).
    pub alt: f64,
}

/// Propensity weights before each non-intervened stochastic node of a
/// trajectory, computed directly from the factor tables. The final entry
/// (node = schema length) holds the weights after the whole trajectory.
pub fn path_weights(lik: &FactorizedLikelihood, target: &Target, traj: &[Level]) -> Vec<NodeWeight> {
    let s = lik.schema();
    let (main, alt) = target.pair.arm_levels(s);
    let mut out = Vec::new();
    let (mut cfg, mut cm, mut ca) = (Some(0usize), Some(0usize), Some(0usize));
    let mut st = Absorption::default();
    let (mut wm, mut wa) = (1.0f64, 1.0f64);
    for (i, &x) in traj.iter().enumerate() {
        let node = s.node(i);
        let m = node.m();
        let forced = s.forced(i, st);
        if forced.is_none() {
            let t = lik.table(i);
            if node.kind.is_intervened() {
                let p = t[cfg.unwrap() * m + x as usize];
                wm = if x == main[i] { wm / p } else { 0.0 };
                wa = if x == alt[i] { wa / p } else { 0.0 };
            } else {
                out.push(NodeWeight { node: i, main: wm, alt: wa });
                let (em, ea) = (cm.unwrap() * m + x as usize, ca.unwrap() * m + x as usize);
                match node.kind {
                    NodeKind::Mediator => wm *= t[ea] / t[em],
                    NodeKind::Baseline => {}
                    _ => wa *= t[em] / t[ea],
                }
            }
        }
        let (vm, va) = if node.kind.is_intervened() && forced.is_none() {
            (main[i], alt[i])
        } else {
            (x, x)
        };
        cfg = s.extend(i, cfg, x);
        cm = s.extend(i, cm, vm);
        ca = s.extend(i, ca, va);
        st = s.advance(i, st, x);
    }
    out.push(NodeWeight { node: s.len(), main: wm, alt: wa });
    out
}

#[derive(Clone, Copy, Debug)]
pub struct Remainder {
    /// psi(P) - psi(P0) + P0 D(P).
    pub direct: f64,
    /// Sum over nodes of P0[(w(P) - w(P0)) (Q_after(P) - Q_before(P))].
    pub factorized: f64,
}

/// Exact second-order remainder between a working likelihood `p` and the
/// truth `p0`, by summation over all trajectories.
pub fn exact_remainder(
    p: &FactorizedLikelihood,
    p0: &FactorizedLikelihood,
    target: &Target,
) -> Result<Remainder> {
    let s = p.schema();
    let q = q_tables(p, target, None);
    let q0 = q_tables(p0, target, None);
    let (tabs, _) = target_tables(p, target, &q, None);
    let (main, _) = target.pair.arm_levels(s);
    let mut p0_d = 0.0;
    let mut fact = 0.0;
    for traj in s.trajectories() {
        let prob = p0.joint_prob(&traj);
        if prob == 0.0 {
            continue;
        }
        p0_d += prob * lookup(s, &tabs, &traj).iter().map(|e| e.1).sum::<f64>();
        let wp = path_weights(p, target, &traj);
        let w0 = path_weights(p0, target, &traj);
        // Q differences along the arm-imputed history.
        let mut cm = Some(0usize);
        let mut st = Absorption::default();
        let mut j = 0;
        for (i, &x) in traj.iter().enumerate() {
            let node = s.node(i);
            let forced = s.forced(i, st);
            let vm = if node.kind.is_intervened() && forced.is_none() { main[i] } else { x };
            if forced.is_none() && !node.kind.is_intervened() {
                let c = cm.unwrap();
                let diff = q.get(i + 1, c * node.m() + x as usize) - q.get(i, c);
                let dw = if node.kind == NodeKind::Mediator {
                    wp[j].alt - w0[j].alt
                } else {
                    wp[j].main - w0[j].main
                };
                fact += prob * dw * diff;
                j += 1;
            }
            cm = s.extend(i, cm, vm);
            st = s.advance(i, st, x);
        }
    }
    let direct = q.psi() - q0.psi() + p0_d;
    if !direct.is_finite() || !fact.is_finite() {
        return Err(Error::NonFinite("remainder".into()));
    }
    Ok(Remainder {
        direct,
        factorized: fact,
    })
}
