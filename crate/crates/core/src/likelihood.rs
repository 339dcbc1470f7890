//! Factorized conditional densities stored as dense probability tables over
//! parent configurations.
//!
//! Table layout for node `i`: entry `cfg * m + x`, where `cfg` is the
//! mixed-radix index of the parent values (earliest node most significant)
//! and `x` the position of the node's value. Only configurations at which
//! the node is reachable and stochastic carry fitted values; the others
//! hold the uniform distribution and are never read.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, RowIndex, NO_ENTRY};
use crate::error::{Error, Result};
use crate::logistic::{self, expit};
use crate::schema::{Absorption, Level, NodeKind, NodeSchema, SchemaSpec, EMPTY};

pub const DEFAULT_P_MIN: f64 = 1e-6;
const RENORM_TOL: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Logistic,
    Saturated,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelSpec {
    pub default: ModelKind,
    #[serde(default)]
    pub overrides: HashMap<String, ModelKind>,
    #[serde(default = "default_p_min")]
    pub p_min: f64,
}

fn default_p_min() -> f64 {
    DEFAULT_P_MIN
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            default: ModelKind::Logistic,
            overrides: HashMap::new(),
            p_min: DEFAULT_P_MIN,
        }
    }
}

impl ModelSpec {
    pub fn saturated() -> Self {
        ModelSpec {
            default: ModelKind::Saturated,
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FactorModel {
    /// Main-terms logistic regression; one coefficient vector per
    /// continuation split (a single split for binary nodes).
    Logistic {
        terms: Vec<String>,
        coefficients: Vec<Vec<f64>>,
    },
    Saturated {
        add_one: bool,
    },
    Constant {
        probs: Vec<f64>,
    },
    Perturbed {
        base: Box<FactorModel>,
        updates: usize,
    },
    Table,
}

#[derive(Clone, Debug)]
pub struct Factor {
    pub model: FactorModel,
    table: Vec<f64>,
    /// Marginal level frequencies among the rows used in fitting.
    marginal: Option<Vec<f64>>,
}

impl Factor {
    pub fn table(&self) -> &[f64] {
        &self.table
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitWarning {
    pub node: String,
    pub message: String,
}

#[derive(Clone, Debug)]
pub struct FactorizedLikelihood {
    schema: Arc<NodeSchema>,
    factors: Vec<Arc<Factor>>,
    p_min: f64,
}

/// A multiplicative update `(1 + eps . D) p` of one node's factor.
#[derive(Clone, Debug)]
pub struct FluctuationLayer {
    pub node: usize,
    pub epsilon: Vec<f64>,
    /// directions[k][entry], evaluated at the likelihood being updated.
    pub directions: Vec<Vec<f64>>,
}

fn uniform_table(schema: &NodeSchema, i: usize) -> Vec<f64> {
    let m = schema.node(i).m();
    vec![1.0 / m as f64; schema.cfg_count(i) * m]
}

/// Clamps a probability vector into [p_min, 1 - p_min] and renormalizes.
fn clamp_probs(p: &mut [f64], p_min: f64) {
    if p.len() == 2 {
        let p1 = p[1].clamp(p_min, 1.0 - p_min);
        p[1] = p1;
        p[0] = 1.0 - p1;
        return;
    }
    for _ in 0..4 {
        for v in p.iter_mut() {
            *v = v.clamp(p_min, 1.0 - p_min);
        }
        let s: f64 = p.iter().sum();
        for v in p.iter_mut() {
            *v /= s;
        }
        if p.iter().all(|&v| v >= p_min * (1.0 - 1e-12)) {
            break;
        }
    }
}

/// Per stochastic configuration of node `i`: level counts among rows.
fn stratum_counts(schema: &NodeSchema, ix: &RowIndex, i: usize) -> HashMap<usize, Vec<f64>> {
    let m = schema.node(i).m();
    let mut out: HashMap<usize, Vec<f64>> = HashMap::new();
    for &(e, c) in ix.counts(i) {
        let (cfg, x) = (e as usize / m, e as usize % m);
        out.entry(cfg).or_insert_with(|| vec![0.0; m])[x] += c;
    }
    out
}

fn fit_saturated(
    schema: &NodeSchema,
    i: usize,
    strata: &HashMap<usize, Vec<f64>>,
    add_one: bool,
    p_min: f64,
) -> Vec<f64> {
    let m = schema.node(i).m();
    let mut table = uniform_table(schema, i);
    for &cfg in schema.stochastic_cfgs(i) {
        let cfg = cfg as usize;
        let row = &mut table[cfg * m..(cfg + 1) * m];
        match strata.get(&cfg) {
            Some(c) => {
                let extra = if add_one { 1.0 } else { 0.0 };
                let tot: f64 = c.iter().sum::<f64>() + extra * m as f64;
                for x in 0..m {
                    row[x] = (c[x] + extra) / tot;
                }
            }
            None => row.fill(1.0 / m as f64),
        }
        clamp_probs(row, p_min);
    }
    table
}

/// Dummy-coded main-terms design row for a parent configuration.
fn design_row(terms: &[(usize, Level)], parents: &[Level]) -> Vec<f64> {
    let mut row = Vec::with_capacity(terms.len() + 1);
    row.push(1.0);
    row.extend(terms.iter().map(|&(j, l)| if parents[j] == l { 1.0 } else { 0.0 }));
    row
}

fn fit_logistic(
    schema: &NodeSchema,
    i: usize,
    strata: &HashMap<usize, Vec<f64>>,
    p_min: f64,
) -> std::result::Result<(FactorModel, Vec<f64>), logistic::IrlsFailure> {
    let m = schema.node(i).m();
    let mut cfgs: Vec<usize> = strata.keys().copied().collect();
    cfgs.sort_unstable();
    let mut parents = vec![0; i];
    let decoded: Vec<Vec<Level>> = cfgs
        .iter()
        .map(|&c| {
            schema.decode_cfg(i, c, &mut parents);
            parents.clone()
        })
        .collect();
    // Keep dummies that vary across the observed strata.
    let mut terms = Vec::new();
    for j in 0..i {
        for l in 1..schema.node(j).m() as Level {
            let first = decoded.first().map(|p| p[j] == l);
            if decoded.iter().any(|p| Some(p[j] == l) != first) {
                terms.push((j, l));
            }
        }
    }
    let x: Vec<Vec<f64>> = decoded.iter().map(|p| design_row(&terms, p)).collect();
    let mut coefficients = Vec::new();
    // Split l models P(X = l | X is 0 or >= l), so a binary node models P(X = 1).
    for split in 1..m {
        let mut trials = Vec::with_capacity(cfgs.len());
        let mut events = Vec::with_capacity(cfgs.len());
        for c in &cfgs {
            let cnt = &strata[c];
            trials.push(cnt[0] + cnt[split..].iter().sum::<f64>());
            events.push(cnt[split]);
        }
        coefficients.push(logistic::fit_grouped(&x, &trials, &events)?);
    }
    let mut table = uniform_table(schema, i);
    for &cfg in schema.stochastic_cfgs(i) {
        let cfg = cfg as usize;
        schema.decode_cfg(i, cfg, &mut parents);
        let row_x = design_row(&terms, &parents);
        let row = &mut table[cfg * m..(cfg + 1) * m];
        let mut remaining = 1.0;
        for (split, beta) in coefficients.iter().enumerate() {
            let eta: f64 = row_x.iter().zip(beta).map(|(a, b)| a * b).sum();
            let h = expit(eta);
            row[split + 1] = remaining * h;
            remaining *= 1.0 - h;
        }
        row[0] = remaining;
        clamp_probs(row, p_min);
    }
    let names = std::iter::once("intercept".to_string())
        .chain(terms.iter().map(|&(j, l)| {
            let n = schema.node(j);
            format!("{}={}", n.name, n.literal(l).unwrap())
        }))
        .collect();
    Ok((
        FactorModel::Logistic {
            terms: names,
            coefficients,
        },
        table,
    ))
}

/// Fits every factor by maximum likelihood within its model kind.
///
/// Baseline nodes are always fit saturated so that the baseline margin is
/// the empirical distribution.
pub fn fit_initial(
    data: &Dataset,
    schema: Arc<NodeSchema>,
    spec: &ModelSpec,
) -> Result<(FactorizedLikelihood, Vec<FitWarning>)> {
    if data.is_empty() {
        return Err(Error::Data("no rows".into()));
    }
    if !(spec.p_min > 0.0 && spec.p_min < 0.5) {
        return Err(Error::Config("p_min must lie in (0, 0.5)".into()));
    }
    for name in spec.overrides.keys() {
        schema.index_of(name)?;
    }
    let ix = RowIndex::new(&schema, data);
    let mut warnings = Vec::new();
    let mut factors = Vec::with_capacity(schema.len());
    for (i, node) in schema.nodes().iter().enumerate() {
        let strata = stratum_counts(&schema, &ix, i);
        let mut marginal = vec![0.0; node.m()];
        for c in strata.values() {
            for (a, b) in marginal.iter_mut().zip(c) {
                *a += b;
            }
        }
        let tot: f64 = marginal.iter().sum();
        if tot > 0.0 {
            marginal.iter_mut().for_each(|v| *v /= tot);
        }
        let kind = if node.kind == NodeKind::Baseline {
            ModelKind::Saturated
        } else {
            *spec.overrides.get(&node.name).unwrap_or(&spec.default)
        };
        if strata.is_empty() && !schema.stochastic_cfgs(i).is_empty() {
            warnings.push(FitWarning {
                node: node.name.clone(),
                message: "no rows reach this node; using the uniform distribution".into(),
            });
        }
        let (model, table) = match kind {
            ModelKind::Saturated => (
                FactorModel::Saturated { add_one: false },
                fit_saturated(&schema, i, &strata, false, spec.p_min),
            ),
            ModelKind::Logistic if strata.is_empty() => (
                FactorModel::Saturated { add_one: true },
                fit_saturated(&schema, i, &strata, true, spec.p_min),
            ),
            ModelKind::Logistic => match fit_logistic(&schema, i, &strata, spec.p_min) {
                Ok(r) => r,
                Err(e) => {
                    warnings.push(FitWarning {
                        node: node.name.clone(),
                        message: format!(
                            "logistic fit failed ({e:?}); using saturated fit with add-one smoothing"
                        ),
                    });
                    (
                        FactorModel::Saturated { add_one: true },
                        fit_saturated(&schema, i, &strata, true, spec.p_min),
                    )
                }
            },
        };
        factors.push(Arc::new(Factor {
            model,
            table,
            marginal: Some(marginal),
        }));
    }
    Ok((
        FactorizedLikelihood {
            schema,
            factors,
            p_min: spec.p_min,
        },
        warnings,
    ))
}

impl FactorizedLikelihood {
    /// Builds a likelihood by evaluating `f(node, parents, probs_out)` at
    /// every stochastic parent configuration. Probabilities are used as
    /// given (no clamping) and must be normalized.
    pub fn from_fn<F>(schema: Arc<NodeSchema>, p_min: f64, mut f: F) -> Result<Self>
    where
        F: FnMut(usize, &[Level], &mut [f64]),
    {
        let mut factors = Vec::with_capacity(schema.len());
        let mut parents = vec![0; schema.len()];
        for i in 0..schema.len() {
            let m = schema.node(i).m();
            let mut table = uniform_table(&schema, i);
            for &cfg in schema.stochastic_cfgs(i) {
                let cfg = cfg as usize;
                schema.decode_cfg(i, cfg, &mut parents);
                let row = &mut table[cfg * m..(cfg + 1) * m];
                f(i, &parents[..i], row);
                check_row(&schema, i, row)?;
            }
            factors.push(Arc::new(Factor {
                model: FactorModel::Table,
                table,
                marginal: None,
            }));
        }
        Ok(FactorizedLikelihood {
            schema,
            factors,
            p_min,
        })
    }

    pub fn schema(&self) -> &NodeSchema {
        &self.schema
    }

    pub fn schema_arc(&self) -> Arc<NodeSchema> {
        self.schema.clone()
    }

    pub fn p_min(&self) -> f64 {
        self.p_min
    }

    pub fn factor(&self, i: usize) -> &Factor {
        &self.factors[i]
    }

    #[inline]
    pub fn table(&self, i: usize) -> &[f64] {
        &self.factors[i].table
    }

    /// Whether two likelihoods share the same factor object for node `i`.
    pub fn shares_factor(&self, other: &Self, i: usize) -> bool {
        Arc::ptr_eq(&self.factors[i], &other.factors[i])
    }

    /// Returns a copy with node `i`'s factor taken from `other`.
    pub fn with_factor_from(&self, other: &Self, i: usize) -> Self {
        let mut out = self.clone();
        out.factors[i] = other.factors[i].clone();
        out
    }

    /// p(x | parents) with the degeneracy rules applied. `parents` holds
    /// the values of all nodes before `node`.
    pub fn conditional_prob(&self, node: usize, x: Level, parents: &[Level]) -> Result<f64> {
        let s = &self.schema;
        if node >= s.len() {
            return Err(Error::UnknownNode(format!("#{node}")));
        }
        if parents.len() != node {
            return Err(Error::Data(format!(
                "node `{}` needs {} parent values",
                s.node(node).name,
                node
            )));
        }
        let mut st = Absorption::default();
        for (j, &v) in parents.iter().enumerate() {
            st = s.advance(j, st, v);
        }
        if let Some(f) = s.forced(node, st) {
            return Ok(if f == x { 1.0 } else { 0.0 });
        }
        if x == EMPTY || x as usize >= s.node(node).m() {
            return Ok(0.0);
        }
        let cfg = s.encode_cfg(node, parents).ok_or_else(|| {
            Error::Data("parent configuration holds an unforced empty value".into())
        })?;
        Ok(self.table(node)[cfg * s.node(node).m() + x as usize])
    }

    /// Mean over rows of the summed log conditional probabilities of the
    /// stochastic coordinates.
    pub fn log_likelihood(&self, data: &Dataset) -> Result<f64> {
        let ix = RowIndex::new(&self.schema, data);
        let mut total = 0.0;
        for r in 0..ix.n {
            for i in 0..self.schema.len() {
                let e = ix.entry(r, i);
                if e == NO_ENTRY {
                    continue;
                }
                let p = self.table(i)[e as usize];
                if !(p > 0.0) {
                    return Err(Error::ZeroProbability {
                        row: r,
                        node: self.schema.node(i).name.clone(),
                    });
                }
                total += p.ln();
            }
        }
        Ok(total / ix.n as f64)
    }

    /// Log-likelihood from precomputed observation counts.
    pub fn log_likelihood_indexed(&self, ix: &RowIndex) -> Result<f64> {
        let mut total = 0.0;
        for i in 0..self.schema.len() {
            let t = self.table(i);
            for &(e, c) in ix.counts(i) {
                let p = t[e as usize];
                if !(p > 0.0) {
                    return Err(Error::ZeroProbability {
                        row: 0,
                        node: self.schema.node(i).name.clone(),
                    });
                }
                total += c * p.ln();
            }
        }
        Ok(total / ix.n as f64)
    }

    /// Draws one trajectory by ancestral sampling.
    pub fn sample_row<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [Level]) {
        let s = &self.schema;
        let mut cfg = Some(0usize);
        let mut st = Absorption::default();
        for i in 0..s.len() {
            let x = match s.forced(i, st) {
                Some(f) => f,
                None => {
                    let m = s.node(i).m();
                    let c = cfg.expect("stochastic node with empty parent");
                    draw(&self.table(i)[c * m..(c + 1) * m], rng.random::<f64>())
                }
            };
            out[i] = x;
            cfg = s.extend(i, cfg, x);
            st = s.advance(i, st, x);
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Dataset {
        let w = self.schema.len();
        let mut values = vec![0; n * w];
        for row in values.chunks_mut(w.max(1)) {
            self.sample_row(rng, row);
        }
        Dataset::from_flat(w, values)
    }

    /// Probability of a complete valid trajectory.
    pub fn joint_prob(&self, traj: &[Level]) -> f64 {
        let s = &self.schema;
        let mut cfg = Some(0usize);
        let mut st = Absorption::default();
        let mut p = 1.0;
        for (i, &x) in traj.iter().enumerate() {
            match s.forced(i, st) {
                Some(f) => {
                    if f != x {
                        return 0.0;
                    }
                }
                None => {
                    let m = s.node(i).m();
                    p *= self.table(i)[cfg.unwrap() * m + x as usize];
                }
            }
            cfg = s.extend(i, cfg, x);
            st = s.advance(i, st, x);
        }
        p
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = LikelihoodDoc {
            schema: self.schema.to_spec(),
            p_min: self.p_min,
            factors: self
                .schema
                .nodes()
                .iter()
                .zip(&self.factors)
                .map(|(n, f)| FactorDoc {
                    node: n.name.clone(),
                    model: f.model.clone(),
                    marginal: f.marginal.clone(),
                    table: f.table.clone(),
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: LikelihoodDoc = serde_json::from_str(text)?;
        let schema = Arc::new(NodeSchema::from_spec(doc.schema)?);
        if doc.factors.len() != schema.len() {
            return Err(Error::Data("one factor per node is required".into()));
        }
        let mut factors = Vec::new();
        for (i, f) in doc.factors.into_iter().enumerate() {
            if f.node != schema.node(i).name {
                return Err(Error::Data(format!("factor for `{}` is out of order", f.node)));
            }
            let m = schema.node(i).m();
            if f.table.len() != schema.cfg_count(i) * m {
                return Err(Error::Data(format!("table of `{}` has the wrong size", f.node)));
            }
            for &cfg in schema.stochastic_cfgs(i) {
                let c = cfg as usize;
                check_row(&schema, i, &f.table[c * m..(c + 1) * m])?;
            }
            factors.push(Arc::new(Factor {
                model: f.model,
                table: f.table,
                marginal: f.marginal,
            }));
        }
        Ok(FactorizedLikelihood {
            schema,
            factors,
            p_min: doc.p_min,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct LikelihoodDoc {
    schema: SchemaSpec,
    p_min: f64,
    factors: Vec<FactorDoc>,
}

#[derive(Serialize, Deserialize)]
struct FactorDoc {
    node: String,
    model: FactorModel,
    #[serde(default)]
    marginal: Option<Vec<f64>>,
    table: Vec<f64>,
}

fn check_row(schema: &NodeSchema, i: usize, row: &[f64]) -> Result<()> {
    let s: f64 = row.iter().sum();
    if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) || (s - 1.0).abs() > 1e-10 {
        return Err(Error::Data(format!(
            "probabilities of `{}` are not a distribution",
            schema.node(i).name
        )));
    }
    Ok(())
}

#[inline]
pub(crate) fn draw(probs: &[f64], u: f64) -> Level {
    let mut acc = 0.0;
    for (x, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return x as Level;
        }
    }
    (probs.len() - 1) as Level
}

/// Replaces the listed binary factors by constants equal to the marginal
/// fitted frequency of level 1 plus `bias`, clamped into `bounds`.
pub fn misspecify(
    lik: &FactorizedLikelihood,
    nodes: &[usize],
    bias: f64,
    bounds: (f64, f64),
) -> Result<FactorizedLikelihood> {
    if !(bias > -0.5 && bias < 0.5) || !(0.0 < bounds.0 && bounds.0 < bounds.1 && bounds.1 < 1.0) {
        return Err(Error::Config("bias must lie in (-0.5, 0.5) and bounds inside (0, 1)".into()));
    }
    let s = lik.schema();
    let mut out = lik.clone();
    for &i in nodes {
        if i >= s.len() {
            return Err(Error::UnknownNode(format!("#{i}")));
        }
        let node = s.node(i);
        if node.m() != 2 {
            return Err(Error::Config(format!(
                "constant misspecification needs a binary node (`{}`)",
                node.name
            )));
        }
        let marginal = lik.factors[i].marginal.clone().ok_or_else(|| {
            Error::Config(format!("no sample mean recorded for `{}`", node.name))
        })?;
        let p1 = (marginal[1] + bias).clamp(bounds.0, bounds.1);
        let mut table = uniform_table(s, i);
        for &cfg in s.stochastic_cfgs(i) {
            let c = cfg as usize;
            table[2 * c] = 1.0 - p1;
            table[2 * c + 1] = p1;
        }
        out.factors[i] = Arc::new(Factor {
            model: FactorModel::Constant {
                probs: vec![1.0 - p1, p1],
            },
            table,
            marginal: Some(marginal),
        });
    }
    Ok(out)
}

/// Applies a set of layers (distinct nodes) to `lik`, returning a new
/// likelihood; the input is not modified.
pub fn apply_fluctuations(
    lik: &FactorizedLikelihood,
    layers: &[FluctuationLayer],
) -> Result<FactorizedLikelihood> {
    let s = lik.schema();
    let mut out = lik.clone();
    for layer in layers {
        let i = layer.node;
        let m = s.node(i).m();
        let base = &lik.factors[i];
        let mut table = base.table.clone();
        for &cfg in s.stochastic_cfgs(i) {
            let c = cfg as usize;
            let mut sum = 0.0;
            for x in 0..m {
                let e = c * m + x;
                let mut shift = 0.0;
                for (eps, d) in layer.epsilon.iter().zip(&layer.directions) {
                    shift += eps * d[e];
                }
                let mult = 1.0 + shift;
                if !(mult > 0.0) || !mult.is_finite() {
                    return Err(Error::NegativeMultiplier {
                        node: s.node(i).name.clone(),
                    });
                }
                table[e] *= mult;
                sum += table[e];
            }
            let drift = (sum - 1.0).abs();
            if drift > RENORM_TOL {
                return Err(Error::Renormalization {
                    node: s.node(i).name.clone(),
                    drift,
                });
            }
            for x in 0..m {
                table[c * m + x] /= sum;
            }
        }
        let model = match &base.model {
            FactorModel::Perturbed { base, updates } => FactorModel::Perturbed {
                base: base.clone(),
                updates: updates + 1,
            },
            other => FactorModel::Perturbed {
                base: Box::new(other.clone()),
                updates: 1,
            },
        };
        out.factors[i] = Arc::new(Factor {
            model,
            table,
            marginal: base.marginal.clone(),
        });
    }
    Ok(out)
}

pub fn apply_fluctuation(
    lik: &FactorizedLikelihood,
    layer: &FluctuationLayer,
) -> Result<FactorizedLikelihood> {
    apply_fluctuations(lik, std::slice::from_ref(layer))
}
