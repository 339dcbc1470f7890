#![allow(dead_code)]

pub mod checks;

use std::sync::Arc;

use medtmle::gcomp::{OutcomeFn, TargetSpec};
use medtmle::likelihood::{FactorizedLikelihood, DEFAULT_P_MIN};
use medtmle::schema::{build_schema, Absorption, Level, NodeKind, NodeSchema, NodeSpec};
use medtmle::simstudy::dgp_schema;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// The simulation design's node layout at `k` time points.
pub fn schema(k: usize) -> Arc<NodeSchema> {
    dgp_schema(k).unwrap()
}

/// L0, A1, R1, Z1, Y1 with no censoring.
pub fn small_k1() -> Arc<NodeSchema> {
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

/// Every conditional distribution drawn independently, each probability
/// at least `floor`.
pub fn random_lik(s: Arc<NodeSchema>, seed: u64, floor: f64) -> FactorizedLikelihood {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FactorizedLikelihood::from_fn(s, DEFAULT_P_MIN, |_, _, out| {
        let m = out.len() as f64;
        let raw: Vec<f64> = out.iter().map(|_| rng.random::<f64>() + 1e-3).collect();
        let total: f64 = raw.iter().sum();
        for (o, r) in out.iter_mut().zip(raw) {
            *o = floor + (1.0 - m * floor) * r / total;
        }
    })
    .unwrap()
}

/// Y_t = 1 under (1,1), (1,0) and (0,0) for every outcome node.
pub fn targets(s: &NodeSchema) -> TargetSpec {
    let outcomes = (0..s.len())
        .filter(|&i| s.node(i).kind == NodeKind::Outcome)
        .map(|i| (s.node(i).name.clone(), OutcomeFn::Indicator { node: i, level: 1 }))
        .collect();
    TargetSpec::mediation(s, outcomes, &vec![1; s.k()], &vec![0; s.k()]).unwrap()
}

/// Table entry (cfg * m + x) of every node along a trajectory, None where
/// the node is forced.
pub fn entries(s: &NodeSchema, traj: &[Level]) -> Vec<Option<usize>> {
    let mut out = Vec::with_capacity(traj.len());
    let mut cfg = Some(0usize);
    let mut st = Absorption::default();
    for (i, &x) in traj.iter().enumerate() {
        out.push(match (s.forced(i, st), cfg) {
            (None, Some(c)) => Some(c * s.node(i).m() + x as usize),
            _ => None,
        });
        cfg = s.extend(i, cfg, x);
        st = s.advance(i, st, x);
    }
    out
}

/// Trajectories with positive probability and their probabilities.
pub fn support(lik: &FactorizedLikelihood) -> Vec<(Vec<Level>, f64)> {
    lik.schema()
        .trajectories()
        .into_iter()
        .map(|t| {
            let p = lik.joint_prob(&t);
            (t, p)
        })
        .filter(|(_, p)| *p > 0.0)
        .collect()
}
