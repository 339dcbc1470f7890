//! Node ordering, supports and the degenerate-value rules.
//!
//! Values are stored as positions into each node's support, not as the
//! literal integer levels. [`EMPTY`] marks a variable that is undefined
//! because of censoring or an earlier absorbing event.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Position of a value within a node's support.
pub type Level = u8;

/// The degenerate value.
pub const EMPTY: Level = u8::MAX;

/// Largest number of entries allowed across all conditional tables.
const MAX_TABLE_ENTRIES: usize = 1 << 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Baseline,
    Treatment,
    Censoring,
    CovariateR,
    Mediator,
    CovariateL,
    Outcome,
}

impl NodeKind {
    fn block_rank(self) -> u8 {
        match self {
            NodeKind::Baseline => 0,
            NodeKind::Treatment | NodeKind::Censoring => 1,
            NodeKind::CovariateR => 2,
            NodeKind::Mediator => 3,
            NodeKind::CovariateL | NodeKind::Outcome => 4,
        }
    }

    /// Treatment and censoring nodes, which are set by the intervention.
    pub fn is_intervened(self) -> bool {
        matches!(self, NodeKind::Treatment | NodeKind::Censoring)
    }
}

/// User-facing node description with literal support levels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub name: String,
    pub kind: NodeKind,
    pub time: usize,
    pub support: Vec<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub censored_level: Option<i64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub absorbing: Vec<i64>,
}

impl NodeSpec {
    pub fn new(name: &str, kind: NodeKind, time: usize, support: Vec<i64>) -> Self {
        NodeSpec {
            name: name.to_string(),
            kind,
            time,
            support,
            censored_level: None,
            absorbing: Vec::new(),
        }
    }

    pub fn binary(name: &str, kind: NodeKind, time: usize) -> Self {
        Self::new(name, kind, time, vec![0, 1])
    }

    pub fn with_censored_level(mut self, level: i64) -> Self {
        self.censored_level = Some(level);
        self
    }

    pub fn with_absorbing(mut self, levels: Vec<i64>) -> Self {
        self.absorbing = levels;
        self
    }
}

/// JSON document describing a schema.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SchemaSpec {
    #[serde(rename = "K", alias = "k")]
    pub k: usize,
    pub nodes: Vec<NodeSpec>,
}

#[derive(Clone, Debug)]
pub struct Node {
    pub name: String,
    pub kind: NodeKind,
    pub time: usize,
    levels: Vec<i64>,
    censored: Option<Level>,
    absorbing: Vec<Level>,
}

impl Node {
    /// Number of non-degenerate levels.
    pub fn m(&self) -> usize {
        self.levels.len()
    }

    pub fn levels(&self) -> &[i64] {
        &self.levels
    }

    pub fn position(&self, literal: i64) -> Option<Level> {
        self.levels.iter().position(|&v| v == literal).map(|p| p as Level)
    }

    pub fn literal(&self, pos: Level) -> Option<i64> {
        self.levels.get(pos as usize).copied()
    }

    /// Position of the censored level for censoring nodes.
    pub fn censored_level(&self) -> Option<Level> {
        self.censored
    }

    /// Position of the uncensored level for censoring nodes.
    pub fn uncensored_level(&self) -> Option<Level> {
        self.censored.map(|c| 1 - c)
    }

    pub fn absorbing(&self) -> &[Level] {
        &self.absorbing
    }

    pub fn is_survival_outcome(&self) -> bool {
        self.kind == NodeKind::Outcome && !self.absorbing.is_empty()
    }
}

/// Running state of the degeneracy rules along a trajectory.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Absorption {
    pub censored: bool,
    pub event: Option<Level>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ViolationKind {
    WrongLength { expected: usize, found: usize },
    OutOfSupport(Level),
    MustBe(Level),
    UnexpectedEmpty,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub node: String,
    pub index: usize,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            ViolationKind::WrongLength { expected, found } => {
                write!(f, "expected {expected} values, found {found}")
            }
            ViolationKind::OutOfSupport(v) => {
                write!(f, "node `{}`: value position {v} is outside the support", self.node)
            }
            ViolationKind::MustBe(v) if *v == EMPTY => {
                write!(f, "node `{}` must be empty (NA) here", self.node)
            }
            ViolationKind::MustBe(v) => {
                write!(f, "node `{}` must retain level position {v}", self.node)
            }
            ViolationKind::UnexpectedEmpty => {
                write!(f, "node `{}` is empty (NA) but no rule forces it", self.node)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct NodeSchema {
    k: usize,
    nodes: Vec<Node>,
    by_name: HashMap<String, usize>,
    /// cfg_count[i] = number of parent configurations of node i; the last
    /// entry counts full trajectories without degenerate values.
    cfg_count: Vec<usize>,
    treatments: Vec<usize>,
    stochastic_cfgs: Vec<Vec<u32>>,
}

/// Builds and validates a schema from node specifications.
pub fn build_schema(k: usize, specs: Vec<NodeSpec>) -> Result<NodeSchema> {
    if k == 0 {
        return Err(Error::Schema("K must be at least 1".into()));
    }
    let mut by_name = HashMap::new();
    let mut nodes = Vec::with_capacity(specs.len());
    let mut last = (0usize, 0u8);
    let mut treatments = Vec::new();
    let mut survival: Option<(Vec<i64>, Vec<i64>)> = None;
    for (i, s) in specs.into_iter().enumerate() {
        if by_name.insert(s.name.clone(), i).is_some() {
            return Err(Error::DuplicateNode(s.name));
        }
        let mut uniq = s.support.clone();
        uniq.sort_unstable();
        uniq.dedup();
        if s.support.len() < 2 || uniq.len() != s.support.len() || s.support.len() >= EMPTY as usize {
            return Err(Error::EmptySupport(s.name));
        }
        if s.kind == NodeKind::Outcome && s.time == 0 {
            return Err(Error::OutcomeOutsideBlock(s.name));
        }
        if (s.kind == NodeKind::Baseline) != (s.time == 0) || s.time > k {
            return Err(Error::Schema(format!(
                "node `{}` has time {} which does not fit its kind",
                s.name, s.time
            )));
        }
        let key = (s.time, s.kind.block_rank());
        if key < last {
            return Err(Error::Schema(format!("node `{}` is out of order", s.name)));
        }
        last = key;
        let pos = |lit: i64| s.support.iter().position(|&v| v == lit).map(|p| p as Level);
        let censored = match s.kind {
            NodeKind::Censoring => {
                let lit = s.censored_level.unwrap_or(0);
                if s.support.len() != 2 {
                    return Err(Error::Schema(format!(
                        "censoring node `{}` must be binary",
                        s.name
                    )));
                }
                Some(pos(lit).ok_or_else(|| {
                    Error::Schema(format!("censored level of `{}` is not in its support", s.name))
                })?)
            }
            _ => None,
        };
        let mut absorbing = Vec::new();
        if !s.absorbing.is_empty() {
            if s.kind != NodeKind::Outcome {
                return Err(Error::Schema(format!(
                    "only outcome nodes may have absorbing levels (`{}`)",
                    s.name
                )));
            }
            for &lit in &s.absorbing {
                absorbing.push(pos(lit).ok_or_else(|| {
                    Error::Schema(format!("absorbing level of `{}` is not in its support", s.name))
                })?);
            }
            let sig = (s.support.clone(), s.absorbing.clone());
            match &survival {
                None => survival = Some(sig),
                Some(prev) if *prev != sig => {
                    return Err(Error::Schema(
                        "survival outcome nodes must share support and absorbing levels".into(),
                    ))
                }
                _ => {}
            }
        }
        if s.kind == NodeKind::Treatment {
            treatments.push(i);
        }
        nodes.push(Node {
            name: s.name,
            kind: s.kind,
            time: s.time,
            levels: s.support,
            censored,
            absorbing,
        });
    }
    for t in 1..=k {
        let count = treatments.iter().filter(|&&i| nodes[i].time == t).count();
        if count != 1 {
            return Err(Error::Schema(format!(
                "time {t} must have exactly one treatment node, found {count}"
            )));
        }
    }
    let mut cfg_count = vec![1usize];
    let mut total = 0usize;
    for n in &nodes {
        let c = cfg_count.last().unwrap().saturating_mul(n.m());
        total = total.saturating_add(c);
        cfg_count.push(c);
    }
    if total > MAX_TABLE_ENTRIES {
        return Err(Error::Schema(format!(
            "conditional tables would need {total} entries (limit {MAX_TABLE_ENTRIES})"
        )));
    }
    let mut schema = NodeSchema {
        k,
        nodes,
        by_name,
        cfg_count,
        treatments,
        stochastic_cfgs: Vec::new(),
    };
    schema.stochastic_cfgs = schema.collect_stochastic_cfgs();
    Ok(schema)
}

impl NodeSchema {
    pub fn from_spec(spec: SchemaSpec) -> Result<Self> {
        build_schema(spec.k, spec.nodes)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_spec(serde_json::from_str(text)?)
    }

    pub fn to_spec(&self) -> SchemaSpec {
        SchemaSpec {
            k: self.k,
            nodes: self
                .nodes
                .iter()
                .map(|n| NodeSpec {
                    name: n.name.clone(),
                    kind: n.kind,
                    time: n.time,
                    support: n.levels.clone(),
                    censored_level: n.censored.map(|c| n.levels[c as usize]),
                    absorbing: n.absorbing.iter().map(|&a| n.levels[a as usize]).collect(),
                })
                .collect(),
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, i: usize) -> &Node {
        &self.nodes[i]
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownNode(name.to_string()))
    }

    /// Parents are every node strictly earlier in the ordering.
    pub fn parents(&self, i: usize) -> std::ops::Range<usize> {
        0..i
    }

    /// Treatment node indices, one per time point.
    pub fn treatments(&self) -> &[usize] {
        &self.treatments
    }

    /// Number of parent configurations of node `i` (`i == len()` counts
    /// complete trajectories).
    pub fn cfg_count(&self, i: usize) -> usize {
        self.cfg_count[i]
    }

    /// Parent configurations at which node `i` is reachable and stochastic.
    pub fn stochastic_cfgs(&self, i: usize) -> &[u32] {
        &self.stochastic_cfgs[i]
    }

    /// Extends a parent configuration index of node `i` by the value of
    /// node `i`, giving the configuration index of node `i + 1`.
    #[inline]
    pub fn extend(&self, i: usize, cfg: Option<usize>, value: Level) -> Option<usize> {
        match cfg {
            Some(c) if value != EMPTY => Some(c * self.nodes[i].m() + value as usize),
            _ => None,
        }
    }

    /// Decodes a parent configuration of node `i` into parent positions.
    pub fn decode_cfg(&self, i: usize, mut cfg: usize, out: &mut [Level]) {
        for j in (0..i).rev() {
            let m = self.nodes[j].m();
            out[j] = (cfg % m) as Level;
            cfg /= m;
        }
    }

    /// Configuration index of the first `i` values, if none is empty.
    pub fn encode_cfg(&self, i: usize, values: &[Level]) -> Option<usize> {
        let mut cfg = Some(0);
        for (j, &v) in values.iter().enumerate().take(i) {
            cfg = self.extend(j, cfg, v);
        }
        cfg
    }

    /// The forced value of node `i` given the state, if any.
    #[inline]
    pub fn forced(&self, i: usize, st: Absorption) -> Option<Level> {
        if st.censored {
            return Some(EMPTY);
        }
        match st.event {
            Some(v) if self.nodes[i].is_survival_outcome() => Some(v),
            Some(_) => Some(EMPTY),
            None => None,
        }
    }

    #[inline]
    pub fn advance(&self, i: usize, st: Absorption, value: Level) -> Absorption {
        let node = &self.nodes[i];
        let mut next = st;
        if node.censored == Some(value) {
            next.censored = true;
        }
        if next.event.is_none() && node.absorbing.contains(&value) {
            next.event = Some(value);
        }
        next
    }

    /// Returns the first violated support or degeneracy rule.
    pub fn validate_trajectory(&self, traj: &[Level]) -> std::result::Result<(), Violation> {
        if traj.len() != self.nodes.len() {
            return Err(Violation {
                node: String::new(),
                index: 0,
                kind: ViolationKind::WrongLength {
                    expected: self.nodes.len(),
                    found: traj.len(),
                },
            });
        }
        let mut st = Absorption::default();
        for (i, &v) in traj.iter().enumerate() {
            let fail = |kind| Violation {
                node: self.nodes[i].name.clone(),
                index: i,
                kind,
            };
            match self.forced(i, st) {
                Some(f) if f != v => return Err(fail(ViolationKind::MustBe(f))),
                Some(_) => {}
                None if v == EMPTY => return Err(fail(ViolationKind::UnexpectedEmpty)),
                None if v as usize >= self.nodes[i].m() => {
                    return Err(fail(ViolationKind::OutOfSupport(v)))
                }
                None => {}
            }
            st = self.advance(i, st, v);
        }
        Ok(())
    }

    /// Overwrites every forced coordinate with its forced value.
    pub fn apply_degeneracy(&self, traj: &mut [Level]) {
        let mut st = Absorption::default();
        for (i, v) in traj.iter_mut().enumerate() {
            if let Some(f) = self.forced(i, st) {
                *v = f;
            }
            st = self.advance(i, st, *v);
        }
    }

    /// All valid trajectories, in lexicographic order of positions.
    pub fn trajectories(&self) -> Vec<Vec<Level>> {
        let mut out = Vec::new();
        let mut buf = vec![0; self.nodes.len()];
        self.enumerate(0, Absorption::default(), &mut buf, &mut |t| out.push(t.to_vec()));
        out
    }

    fn enumerate(
        &self,
        i: usize,
        st: Absorption,
        buf: &mut Vec<Level>,
        f: &mut dyn FnMut(&[Level]),
    ) {
        if i == self.nodes.len() {
            f(buf);
            return;
        }
        if let Some(v) = self.forced(i, st) {
            buf[i] = v;
            self.enumerate(i + 1, self.advance(i, st, v), buf, f);
            return;
        }
        for x in 0..self.nodes[i].m() as Level {
            buf[i] = x;
            self.enumerate(i + 1, self.advance(i, st, x), buf, f);
        }
    }

    fn collect_stochastic_cfgs(&self) -> Vec<Vec<u32>> {
        let mut out = vec![Vec::new(); self.nodes.len()];
        self.walk_cfgs(0, Some(0), Absorption::default(), &mut out);
        out
    }

    fn walk_cfgs(&self, i: usize, cfg: Option<usize>, st: Absorption, out: &mut [Vec<u32>]) {
        if i == self.nodes.len() || cfg.is_none() {
            return;
        }
        if let Some(v) = self.forced(i, st) {
            self.walk_cfgs(i + 1, self.extend(i, cfg, v), self.advance(i, st, v), out);
            return;
        }
        out[i].push(cfg.unwrap() as u32);
        for x in 0..self.nodes[i].m() as Level {
            self.walk_cfgs(i + 1, self.extend(i, cfg, x), self.advance(i, st, x), out);
        }
    }

    /// Converts a row of literal values (None for the degenerate token) to
    /// positions.
    pub fn positions_from_literals(&self, row: &[Option<i64>]) -> Result<Vec<Level>> {
        if row.len() != self.nodes.len() {
            return Err(Error::Data(format!(
                "expected {} values, found {}",
                self.nodes.len(),
                row.len()
            )));
        }
        row.iter()
            .zip(&self.nodes)
            .map(|(v, n)| match v {
                None => Ok(EMPTY),
                Some(lit) => n.position(*lit).ok_or_else(|| {
                    Error::Data(format!("value {lit} is not in the support of `{}`", n.name))
                }),
            })
            .collect()
    }
}

/// A pair of static treatment regimes. Levels are positions, one per
/// treatment node; censoring nodes are always set to uncensored.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InterventionPair {
    pub a: Vec<Level>,
    pub a_prime: Vec<Level>,
}

impl InterventionPair {
    pub fn new(schema: &NodeSchema, a: Vec<Level>, a_prime: Vec<Level>) -> Result<Self> {
        let t = schema.treatments();
        if a.len() != schema.k() || a_prime.len() != schema.k() {
            return Err(Error::Target(format!(
                "intervention vectors must have length K = {}",
                schema.k()
            )));
        }
        for (j, &i) in t.iter().enumerate() {
            let m = schema.node(i).m() as Level;
            if a[j] >= m || a_prime[j] >= m {
                return Err(Error::Target(format!(
                    "intervention level outside the support of `{}`",
                    schema.node(i).name
                )));
            }
        }
        Ok(InterventionPair { a, a_prime })
    }

    /// Builds a pair from literal treatment levels.
    pub fn from_literals(schema: &NodeSchema, a: &[i64], a_prime: &[i64]) -> Result<Self> {
        let conv = |v: &[i64]| -> Result<Vec<Level>> {
            if v.len() != schema.treatments().len() {
                return Err(Error::Target(format!(
                    "intervention vectors must have length K = {}",
                    schema.k()
                )));
            }
            v.iter()
                .zip(schema.treatments())
                .map(|(&lit, &i)| {
                    schema.node(i).position(lit).ok_or_else(|| {
                        Error::Target(format!(
                            "level {lit} not in the support of `{}`",
                            schema.node(i).name
                        ))
                    })
                })
                .collect()
        };
        Self::new(schema, conv(a)?, conv(a_prime)?)
    }

    pub fn literals(&self, schema: &NodeSchema) -> (Vec<i64>, Vec<i64>) {
        let lit = |v: &[Level]| {
            v.iter()
                .zip(schema.treatments())
                .map(|(&p, &i)| schema.node(i).literal(p).unwrap())
                .collect()
        };
        (lit(&self.a), lit(&self.a_prime))
    }

    /// Per-node imputed levels for both arms (EMPTY at non-intervened nodes).
    pub fn arm_levels(&self, schema: &NodeSchema) -> (Vec<Level>, Vec<Level>) {
        let mut main = vec![EMPTY; schema.len()];
        let mut alt = vec![EMPTY; schema.len()];
        let mut j = 0;
        for (i, n) in schema.nodes().iter().enumerate() {
            match n.kind {
                NodeKind::Treatment => {
                    main[i] = self.a[j];
                    alt[i] = self.a_prime[j];
                    j += 1;
                }
                NodeKind::Censoring => {
                    main[i] = n.uncensored_level().unwrap();
                    alt[i] = main[i];
                }
                _ => {}
            }
        }
        (main, alt)
    }
}
