//! Plug-in mediation parameters by exact nested summation, their NIE/NDE
//! contrasts, and a sequential-regression cross-check.
//!
//! Recursion convention: treatment/censoring nodes are imputed with the
//! intervention arm; covariate-R and covariate-L nodes are drawn from
//! their factors with treatment set to `a`, mediators with treatment set to
//! `a_prime`. Treatment factors never enter the parameter.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood::FactorizedLikelihood;
use crate::schema::{Absorption, InterventionPair, Level, NodeKind, NodeSchema, EMPTY};

/// Real-valued outcome functional of a complete trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OutcomeFn {
    /// 1{node == level}, with level a support position.
    Indicator { node: usize, level: Level },
    /// The literal level of `node` (0 when degenerate).
    Value { node: usize },
}

impl OutcomeFn {
    #[inline]
    pub fn eval(&self, schema: &NodeSchema, traj: &[Level]) -> f64 {
        match *self {
            OutcomeFn::Indicator { node, level } => (traj[node] == level) as u8 as f64,
            OutcomeFn::Value { node } => {
                let v = traj[node];
                if v == EMPTY {
                    0.0
                } else {
                    schema.node(node).literal(v).unwrap() as f64
                }
            }
        }
    }

    pub fn node(&self) -> usize {
        match *self {
            OutcomeFn::Indicator { node, .. } | OutcomeFn::Value { node } => node,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub label: String,
    pub outcome_name: String,
    pub outcome: OutcomeFn,
    pub pair: InterventionPair,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ContrastKind {
    #[serde(rename = "NIE")]
    Nie,
    #[serde(rename = "NDE")]
    Nde,
    #[serde(rename = "TE")]
    Te,
}

impl ContrastKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ContrastKind::Nie => "NIE",
            ContrastKind::Nde => "NDE",
            ContrastKind::Te => "TE",
        }
    }
}

/// Difference of two target entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Contrast {
    pub kind: ContrastKind,
    pub label: String,
    pub plus: usize,
    pub minus: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub entries: Vec<Target>,
    pub contrasts: Vec<Contrast>,
}

/// Outcome declaration in the targets JSON document.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OutcomeDoc {
    pub name: String,
    pub node: String,
    #[serde(default)]
    pub level: Option<i64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PairDoc {
    pub a: Vec<i64>,
    pub a_prime: Vec<i64>,
}

/// Targets JSON document: outcomes plus either a treatment/control pair
/// (expanded to the three mediation pairs with contrasts) or explicit pairs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TargetsDoc {
    pub outcomes: Vec<OutcomeDoc>,
    #[serde(default)]
    pub treatment: Option<Vec<i64>>,
    #[serde(default)]
    pub control: Option<Vec<i64>>,
    #[serde(default)]
    pub pairs: Vec<PairDoc>,
}

fn arm_tag(levels: &[i64]) -> String {
    if levels.iter().all(|v| (0..10).contains(v)) {
        levels.iter().map(|v| v.to_string()).collect()
    } else {
        levels.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("-")
    }
}

impl TargetSpec {
    /// For each pair (pair-major) and each outcome, one entry; contrasts
    /// are added when the pairs are (a,a), (a,a'), (a',a').
    pub fn new(
        schema: &NodeSchema,
        outcomes: Vec<(String, OutcomeFn)>,
        pairs: Vec<InterventionPair>,
    ) -> Result<Self> {
        if outcomes.is_empty() || pairs.is_empty() {
            return Err(Error::Target("at least one outcome and one pair are required".into()));
        }
        for (name, o) in &outcomes {
            let n = o.node();
            if n >= schema.len() {
                return Err(Error::Target(format!("outcome `{name}` refers to an unknown node")));
            }
            if let OutcomeFn::Indicator { level, .. } = o {
                if *level as usize >= schema.node(n).m() {
                    return Err(Error::Target(format!("outcome `{name}` level is out of support")));
                }
            }
        }
        let mut entries = Vec::new();
        for pair in &pairs {
            let (a, ap) = pair.literals(schema);
            for (name, o) in &outcomes {
                entries.push(Target {
                    label: format!("{name}({},G{})", arm_tag(&a), arm_tag(&ap)),
                    outcome_name: name.clone(),
                    outcome: o.clone(),
                    pair: pair.clone(),
                });
            }
        }
        let mut spec = TargetSpec {
            entries,
            contrasts: Vec::new(),
        };
        spec.add_mediation_contrasts();
        Ok(spec)
    }

    /// The three mediation pairs for a treatment/control arm.
    pub fn mediation(
        schema: &NodeSchema,
        outcomes: Vec<(String, OutcomeFn)>,
        a: &[Level],
        a_prime: &[Level],
    ) -> Result<Self> {
        let pairs = vec![
            InterventionPair::new(schema, a.to_vec(), a.to_vec())?,
            InterventionPair::new(schema, a.to_vec(), a_prime.to_vec())?,
            InterventionPair::new(schema, a_prime.to_vec(), a_prime.to_vec())?,
        ];
        Self::new(schema, outcomes, pairs)
    }

    pub fn from_doc(schema: &NodeSchema, doc: &TargetsDoc) -> Result<Self> {
        let mut outcomes = Vec::new();
        for o in &doc.outcomes {
            let node = schema.index_of(&o.node)?;
            let f = match o.level {
                Some(lit) => OutcomeFn::Indicator {
                    node,
                    level: schema.node(node).position(lit).ok_or_else(|| {
                        Error::Target(format!("level {lit} not in support of `{}`", o.node))
                    })?,
                },
                None => OutcomeFn::Value { node },
            };
            outcomes.push((o.name.clone(), f));
        }
        let mut pairs = Vec::new();
        match (&doc.treatment, &doc.control) {
            (Some(a), Some(c)) => {
                pairs.push(InterventionPair::from_literals(schema, a, a)?);
                pairs.push(InterventionPair::from_literals(schema, a, c)?);
                pairs.push(InterventionPair::from_literals(schema, c, c)?);
            }
            (None, None) => {}
            _ => return Err(Error::Target("treatment and control must be given together".into())),
        }
        for p in &doc.pairs {
            pairs.push(InterventionPair::from_literals(schema, &p.a, &p.a_prime)?);
        }
        Self::new(schema, outcomes, pairs)
    }

    pub fn from_json(schema: &NodeSchema, text: &str) -> Result<Self> {
        Self::from_doc(schema, &serde_json::from_str(text)?)
    }

    fn find(&self, outcome: &str, a: &[Level], ap: &[Level]) -> Option<usize> {
        self.entries
            .iter()
            .position(|t| t.outcome_name == outcome && t.pair.a == a && t.pair.a_prime == ap)
    }

    fn add_mediation_contrasts(&mut self) {
        let mut seen = Vec::new();
        let mut contrasts = Vec::new();
        for t in &self.entries {
            let (a, ap) = (&t.pair.a, &t.pair.a_prime);
            if a == ap {
                continue;
            }
            let key = (t.outcome_name.clone(), a.clone(), ap.clone());
            if seen.contains(&key) {
                continue;
            }
            seen.push(key);
            let name = &t.outcome_name;
            let (Some(tt), Some(tc), Some(cc)) =
                (self.find(name, a, a), self.find(name, a, ap), self.find(name, ap, ap))
            else {
                continue;
            };
            for (kind, plus, minus) in [
                (ContrastKind::Nie, tt, tc),
                (ContrastKind::Nde, tc, cc),
                (ContrastKind::Te, tt, cc),
            ] {
                contrasts.push(Contrast {
                    kind,
                    label: format!("{}:{}", kind.as_str(), self.entries[tc].label),
                    plus,
                    minus,
                });
            }
        }
        self.contrasts = contrasts;
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Contrast values; TE is reported as NIE + NDE when both exist.
    pub fn contrast_values(&self, psi: &[f64]) -> Vec<f64> {
        let diff = |c: &Contrast| psi[c.plus] - psi[c.minus];
        self.contrasts
            .iter()
            .map(|c| {
                if c.kind != ContrastKind::Te {
                    return diff(c);
                }
                let nie = self.contrasts.iter().find(|x| x.kind == ContrastKind::Nie && x.plus == c.plus);
                let nde = self.contrasts.iter().find(|x| x.kind == ContrastKind::Nde && x.minus == c.minus);
                match (nie, nde) {
                    (Some(a), Some(b)) if a.minus == b.plus => diff(a) + diff(b),
                    _ => diff(c),
                }
            })
            .collect()
    }
}

/// A known conditional law for every mediator given its parents, used for
/// controlled or stochastic mediator interventions. Tables use the
/// likelihood layout and are evaluated at parent configurations in which
/// treatment is set to the arm `a`.
#[derive(Clone, Debug)]
pub struct MediatorLaw {
    tables: Vec<Option<Vec<f64>>>,
}

impl MediatorLaw {
    pub fn from_fn<F>(schema: &NodeSchema, mut f: F) -> Self
    where
        F: FnMut(usize, &[Level], &mut [f64]),
    {
        let mut parents = vec![0; schema.len()];
        let tables = (0..schema.len())
            .map(|i| {
                if schema.node(i).kind != NodeKind::Mediator {
                    return None;
                }
                let m = schema.node(i).m();
                let mut t = vec![1.0 / m as f64; schema.cfg_count(i) * m];
                for &cfg in schema.stochastic_cfgs(i) {
                    let c = cfg as usize;
                    schema.decode_cfg(i, c, &mut parents);
                    f(i, &parents[..i], &mut t[c * m..(c + 1) * m]);
                }
                Some(t)
            })
            .collect();
        MediatorLaw { tables }
    }

    /// Point mass at the given mediator positions (one per mediator node,
    /// in schema order).
    pub fn point_mass(schema: &NodeSchema, levels: &[Level]) -> Self {
        let meds: Vec<usize> = (0..schema.len())
            .filter(|&i| schema.node(i).kind == NodeKind::Mediator)
            .collect();
        Self::from_fn(schema, |i, _, out| {
            let j = meds.iter().position(|&m| m == i).unwrap();
            out.fill(0.0);
            out[levels[j] as usize] = 1.0;
        })
    }

    /// The likelihood's own mediator law under arm `a_prime`, indexed by
    /// parent configurations in which treatment takes the arm `a`.
    pub fn from_likelihood(lik: &FactorizedLikelihood, pair: &InterventionPair) -> Self {
        let s = lik.schema();
        let (_, alt) = pair.arm_levels(s);
        Self::from_fn(s, |i, parents, out| {
            let mut swapped = parents.to_vec();
            for (j, v) in swapped.iter_mut().enumerate() {
                if s.node(j).kind.is_intervened() && *v != EMPTY {
                    *v = alt[j];
                }
            }
            match s.encode_cfg(i, &swapped) {
                Some(c) => {
                    let m = s.node(i).m();
                    out.copy_from_slice(&lik.table(i)[c * m..(c + 1) * m]);
                }
                None => out.fill(1.0 / out.len() as f64),
            }
        })
    }

    #[inline]
    pub(crate) fn prob(&self, node: usize, entry: usize) -> f64 {
        self.tables[node].as_ref().expect("mediator node")[entry]
    }
}

/// Q values of one target. `values[i][cfg]` is the conditional expectation
/// of the outcome given the history before node `i`, with treatment
/// coordinates of `cfg` imputed from the arm `a`; NaN where unreachable.
#[derive(Clone, Debug)]
pub struct QTable {
    pub values: Vec<Vec<f64>>,
}

impl QTable {
    pub fn psi(&self) -> f64 {
        self.values[0][0]
    }

    #[inline]
    pub fn get(&self, node: usize, cfg: usize) -> f64 {
        self.values[node][cfg]
    }
}

struct QWalker<'a> {
    lik: &'a FactorizedLikelihood,
    schema: &'a NodeSchema,
    main: Vec<Level>,
    alt: Vec<Level>,
    outcome: &'a OutcomeFn,
    law: Option<&'a MediatorLaw>,
    values: Vec<Vec<f64>>,
    traj: Vec<Level>,
    store: bool,
}

impl QWalker<'_> {
    fn visit(&mut self, i: usize, cm: Option<usize>, ca: Option<usize>, st: Absorption) -> f64 {
        let s = self.schema;
        if i == s.len() {
            let v = self.outcome.eval(s, &self.traj);
            if let (true, Some(c)) = (self.store, cm) {
                self.values[i][c] = v;
            }
            return v;
        }
        let node = s.node(i);
        let q = if let Some(f) = s.forced(i, st) {
            self.traj[i] = f;
            self.visit(i + 1, s.extend(i, cm, f), s.extend(i, ca, f), s.advance(i, st, f))
        } else if node.kind.is_intervened() {
            let (vm, va) = (self.main[i], self.alt[i]);
            self.traj[i] = vm;
            self.visit(i + 1, s.extend(i, cm, vm), s.extend(i, ca, va), s.advance(i, st, vm))
        } else {
            let m = node.m();
            let (cm_v, ca_v) = (cm.unwrap(), ca.unwrap());
            let mut acc = 0.0;
            for x in 0..m as Level {
                let p = if node.kind == NodeKind::Mediator {
                    match self.law {
                        Some(l) => l.prob(i, cm_v * m + x as usize),
                        None => self.lik.table(i)[ca_v * m + x as usize],
                    }
                } else {
                    self.lik.table(i)[cm_v * m + x as usize]
                };
                self.traj[i] = x;
                let v = self.visit(i + 1, s.extend(i, cm, x), s.extend(i, ca, x), s.advance(i, st, x));
                acc += p * v;
            }
            acc
        };
        if let (true, Some(c)) = (self.store, cm) {
            self.values[i][c] = q;
        }
        q
    }
}

/// Q values of every node for one target; `law` replaces the natural
/// mediator law when given.
pub fn q_tables(lik: &FactorizedLikelihood, target: &Target, law: Option<&MediatorLaw>) -> QTable {
    let s = lik.schema();
    let (main, alt) = target.pair.arm_levels(s);
    let mut w = QWalker {
        lik,
        schema: s,
        main,
        alt,
        outcome: &target.outcome,
        law,
        values: (0..=s.len()).map(|i| vec![f64::NAN; s.cfg_count(i)]).collect(),
        traj: vec![0; s.len()],
        store: true,
    };
    w.visit(0, Some(0), Some(0), Absorption::default());
    QTable { values: w.values }
}

/// Plug-in parameter of one target.
pub fn psi(lik: &FactorizedLikelihood, target: &Target) -> f64 {
    let s = lik.schema();
    let (main, alt) = target.pair.arm_levels(s);
    let mut w = QWalker {
        lik,
        schema: s,
        main,
        alt,
        outcome: &target.outcome,
        law: None,
        values: Vec::new(),
        traj: vec![0; s.len()],
        store: false,
    };
    w.visit(0, Some(0), Some(0), Absorption::default())
}

pub fn psi_all(lik: &FactorizedLikelihood, targets: &TargetSpec) -> Vec<f64> {
    targets.entries.iter().map(|t| psi(lik, t)).collect()
}

/// Q of `node` at a given history (values of all earlier nodes; the
/// treatment coordinates are ignored and re-imputed from the target's arms).
pub fn q_functional(
    lik: &FactorizedLikelihood,
    target: &Target,
    node: usize,
    history: &[Level],
) -> Result<f64> {
    let s = lik.schema();
    if node > s.len() || history.len() != node {
        return Err(Error::Data("history must give every node before `node`".into()));
    }
    let (main, alt) = target.pair.arm_levels(s);
    let mut traj = vec![0; s.len()];
    let (mut cm, mut ca) = (Some(0usize), Some(0usize));
    let mut st = Absorption::default();
    for (i, &h) in history.iter().enumerate() {
        let forced = s.forced(i, st);
        let (vm, va) = match forced {
            Some(f) => (f, f),
            None if s.node(i).kind.is_intervened() => (main[i], alt[i]),
            None if h == EMPTY || h as usize >= s.node(i).m() => {
                return Err(Error::Data(format!(
                    "history value of `{}` is invalid",
                    s.node(i).name
                )))
            }
            None => (h, h),
        };
        traj[i] = vm;
        cm = s.extend(i, cm, vm);
        ca = s.extend(i, ca, va);
        st = s.advance(i, st, vm);
    }
    let mut w = QWalker {
        lik,
        schema: s,
        main,
        alt,
        outcome: &target.outcome,
        law: None,
        values: Vec::new(),
        traj,
        store: false,
    };
    let v = w.visit(node, cm, ca, st);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite("Q functional".into()))
    }
}

/// NIE, NDE and TE from the three plug-ins (a,a), (a,a'), (a',a').
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MediationContrasts {
    pub nie: f64,
    pub nde: f64,
    pub te: f64,
}

pub fn nie_nde(treated: f64, cross: f64, control: f64) -> MediationContrasts {
    let nie = treated - cross;
    let nde = cross - control;
    MediationContrasts {
        nie,
        nde,
        te: nie + nde,
    }
}

/// Computes the parameter by backward sequential regression: each step
/// takes the conditional mean of the next regression given the non-
/// treatment history and the treatment prefix set to the node's arm, with
/// conditional means formed as ratios of sums of joint trajectory
/// probabilities.
pub fn sequential_regression_psi(lik: &FactorizedLikelihood, target: &Target) -> f64 {
    let s = lik.schema();
    let (main, alt) = target.pair.arm_levels(s);
    let trajs = s.trajectories();
    let probs: Vec<f64> = trajs.iter().map(|t| lik.joint_prob(t)).collect();
    let non_a: Vec<usize> = (0..s.len()).filter(|&i| !s.node(i).kind.is_intervened()).collect();
    let key = |t: &[Level], upto: usize| -> Vec<Level> {
        non_a.iter().take_while(|&&j| j < upto).map(|&j| t[j]).collect()
    };
    let matches = |t: &[Level], arm: &[Level], upto: usize| -> bool {
        (0..upto).all(|j| !s.node(j).kind.is_intervened() || t[j] == arm[j] || t[j] == EMPTY)
    };
    // Current regression evaluated per trajectory.
    let mut current: Vec<f64> = trajs.iter().map(|t| target.outcome.eval(s, t)).collect();
    for &i in non_a.iter().rev() {
        let arm = if s.node(i).kind == NodeKind::Mediator { &alt } else { &main };
        let mut sums: HashMap<Vec<Level>, (f64, f64)> = HashMap::new();
        for (t, (&p, &q)) in trajs.iter().zip(probs.iter().zip(&current)) {
            if p > 0.0 && matches(t, arm, i) {
                let e = sums.entry(key(t, i)).or_insert((0.0, 0.0));
                e.0 += p * q;
                e.1 += p;
            }
        }
        current = trajs
            .iter()
            .map(|t| match sums.get(&key(t, i)) {
                Some(&(num, den)) if den > 0.0 => num / den,
                _ => 0.0,
            })
            .collect();
    }
    current.first().copied().unwrap_or(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
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

    fn targets(s: &NodeSchema) -> TargetSpec {
        TargetSpec::mediation(
            s,
            vec![("Y1".into(), OutcomeFn::Indicator { node: 4, level: 1 })],
            &[1],
            &[0],
        )
        .unwrap()
    }

    #[test]
    fn closed_form_k1() {
        let s = k1();
        // p(L0=1)=0.3; R|A: 0.2+0.5A; Z|A,R: 0.1+0.4A+0.3R; Y|Z,R: 0.2+0.3Z+0.1R
        let lik = FactorizedLikelihood::from_fn(s.clone(), DEFAULT_P_MIN, |i, pa, out| {
            let p = match i {
                0 => 0.3,
                1 => 0.5,
                2 => 0.2 + 0.5 * pa[1] as f64,
                3 => 0.1 + 0.4 * pa[1] as f64 + 0.3 * pa[2] as f64,
                _ => 0.2 + 0.3 * pa[3] as f64 + 0.1 * pa[2] as f64,
            };
            out[0] = 1.0 - p;
            out[1] = p;
        })
        .unwrap();
        let t = targets(&s);
        let oracle = |a: f64, ap: f64| {
            let mut v = 0.0;
            for r in [0.0, 1.0] {
                let pr = if r == 1.0 { 0.2 + 0.5 * a } else { 0.8 - 0.5 * a };
                for z in [0.0, 1.0] {
                    let pz1 = 0.1 + 0.4 * ap + 0.3 * r;
                    let pz = if z == 1.0 { pz1 } else { 1.0 - pz1 };
                    v += pr * pz * (0.2 + 0.3 * z + 0.1 * r);
                }
            }
            v
        };
        let vals = psi_all(&lik, &t);
        assert!((vals[0] - oracle(1.0, 1.0)).abs() < 1e-14);
        assert!((vals[1] - oracle(1.0, 0.0)).abs() < 1e-14);
        assert!((vals[2] - oracle(0.0, 0.0)).abs() < 1e-14);
        for (k, e) in t.entries.iter().enumerate() {
            assert!((sequential_regression_psi(&lik, e) - vals[k]).abs() < 1e-12);
            let q = q_tables(&lik, e, None);
            assert_eq!(q.psi(), vals[k]);
        }
        assert_eq!(t.contrasts.len(), 3);
    }

    #[test]
    fn contrast_arithmetic() {
        let c = nie_nde(0.7, 0.6, 0.5);
        assert!((c.nie - 0.1).abs() < 1e-15 && (c.nde - 0.1).abs() < 1e-15);
        assert!((c.te - 0.2).abs() < 1e-15);
    }

    #[test]
    fn degenerate_history_returns_absorbed_value() {
        let s = Arc::new(
            build_schema(
                2,
                vec![
                    NodeSpec::binary("A1", NodeKind::Treatment, 1),
                    NodeSpec::binary("Y1", NodeKind::Outcome, 1).with_absorbing(vec![1]),
                    NodeSpec::binary("A2", NodeKind::Treatment, 2),
                    NodeSpec::binary("Y2", NodeKind::Outcome, 2).with_absorbing(vec![1]),
                ],
            )
            .unwrap(),
        );
        let lik = FactorizedLikelihood::from_fn(s.clone(), DEFAULT_P_MIN, |_, _, out| {
            out[0] = 0.6;
            out[1] = 0.4;
        })
        .unwrap();
        let pair = InterventionPair::new(&s, vec![1, 1], vec![1, 1]).unwrap();
        let t = Target {
            label: "Y2".into(),
            outcome_name: "Y2".into(),
            outcome: OutcomeFn::Indicator { node: 3, level: 1 },
            pair,
        };
        let q = q_functional(&lik, &t, 2, &[1, 1]).unwrap();
        assert_eq!(q, 1.0);
        assert!((psi(&lik, &t) - (1.0 - 0.36)).abs() < 1e-14);
    }
}
