//! Pointwise and simultaneous confidence intervals from influence values.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::gcomp::{Contrast, TargetSpec};

pub const DEFAULT_MC_DRAWS: usize = 100_000;
const MC_CHUNK: usize = 10_000;
const RIDGE: f64 = 1e-8;

/// Influence values of a contrast: the row-wise difference of its two
/// targets.
pub fn delta_eic(totals: &[Vec<f64>], contrast: &Contrast) -> Result<Vec<f64>> {
    let (p, m) = (
        totals.get(contrast.plus).ok_or_else(|| missing(contrast))?,
        totals.get(contrast.minus).ok_or_else(|| missing(contrast))?,
    );
    Ok(p.iter().zip(m).map(|(a, b)| a - b).collect())
}

fn missing(c: &Contrast) -> Error {
    Error::Target(format!("contrast `{}` refers to a missing target", c.label))
}

/// Targets followed by contrasts: labels, estimates and influence values.
pub fn with_contrasts(
    targets: &TargetSpec,
    estimates: &[f64],
    totals: &[Vec<f64>],
) -> Result<(Vec<String>, Vec<f64>, Vec<Vec<f64>>)> {
    let mut labels: Vec<String> = targets.entries.iter().map(|t| t.label.clone()).collect();
    let mut est = estimates.to_vec();
    let mut ic = totals.to_vec();
    for (c, v) in targets.contrasts.iter().zip(targets.contrast_values(estimates)) {
        labels.push(c.label.clone());
        est.push(v);
        ic.push(delta_eic(totals, c)?);
    }
    Ok((labels, est, ic))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CovarianceEstimate {
    /// P_n D D^T.
    pub sigma: Vec<Vec<f64>>,
    pub sd: Vec<f64>,
    pub correlation: Vec<Vec<f64>>,
    pub z: f64,
    pub q_simultaneous: f64,
    /// A ridge was added to factor the correlation matrix.
    pub regularized: bool,
}

impl CovarianceEstimate {
    pub fn new(ic: &[Vec<f64>], level: f64, mc_draws: usize, seed: u64) -> Result<Self> {
        if !(level > 0.0 && level < 1.0) {
            return Err(Error::Config("confidence level must lie in (0, 1)".into()));
        }
        let k = ic.len();
        let n = ic.first().map_or(0, Vec::len);
        if n == 0 {
            return Err(Error::Data("no influence values".into()));
        }
        let sigma: Vec<Vec<f64>> = (0..k)
            .map(|a| {
                (0..k)
                    .map(|b| ic[a].iter().zip(&ic[b]).map(|(x, y)| x * y).sum::<f64>() / n as f64)
                    .collect()
            })
            .collect();
        let sd: Vec<f64> = (0..k).map(|a| sigma[a][a].max(0.0).sqrt()).collect();
        let correlation: Vec<Vec<f64>> = (0..k)
            .map(|a| {
                (0..k)
                    .map(|b| {
                        if a == b {
                            1.0
                        } else if sd[a] > 0.0 && sd[b] > 0.0 {
                            (sigma[a][b] / (sd[a] * sd[b])).clamp(-1.0, 1.0)
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect();
        let z = normal_quantile(1.0 - (1.0 - level) / 2.0);
        let (q_simultaneous, regularized) = max_abs_quantile(&correlation, level, mc_draws, seed)?;
        Ok(CovarianceEstimate {
            sigma,
            sd,
            correlation,
            z,
            q_simultaneous,
            regularized,
        })
    }
}

pub fn normal_quantile(p: f64) -> f64 {
    Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(p)
}

/// Monte Carlo quantile of max_k |Z_k| for Z ~ N(0, corr). Draws are split
/// into fixed chunks with their own RNG streams, so the result does not
/// depend on the thread count.
pub fn max_abs_quantile(corr: &[Vec<f64>], level: f64, draws: usize, seed: u64) -> Result<(f64, bool)> {
    let k = corr.len();
    if k == 0 {
        return Ok((0.0, false));
    }
    if draws == 0 {
        return Err(Error::Config("Monte Carlo draws must be positive".into()));
    }
    let c = DMatrix::from_fn(k, k, |a, b| corr[a][b]);
    let (l, regularized) = match c.clone().cholesky() {
        Some(ch) => (ch.l(), false),
        None => {
            let mut ridge = RIDGE;
            loop {
                let r = &c + DMatrix::identity(k, k) * ridge;
                if let Some(ch) = r.cholesky() {
                    break (ch.l(), true);
                }
                ridge *= 10.0;
                if ridge > 1.0 {
                    return Err(Error::NonFinite("correlation matrix".into()));
                }
            }
        }
    };
    let chunks = draws.div_ceil(MC_CHUNK);
    let mut maxima: Vec<f64> = (0..chunks)
        .into_par_iter()
        .flat_map_iter(|ci| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(ci as u64);
            let len = MC_CHUNK.min(draws - ci * MC_CHUNK);
            let l = &l;
            (0..len)
                .map(move |_| {
                    let e = DVector::from_fn(k, |_, _| StandardNormal.sample(&mut rng));
                    (l * e).amax()
                })
                .collect::<Vec<f64>>()
        })
        .collect();
    maxima.sort_by(f64::total_cmp);
    let idx = ((level * draws as f64).ceil() as usize).clamp(1, draws) - 1;
    Ok((maxima[idx], regularized))
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CiRow {
    pub target: String,
    pub estimate: f64,
    pub se: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub ci_lo_simul: f64,
    pub ci_hi_simul: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CiTable {
    pub rows: Vec<CiRow>,
    pub covariance: CovarianceEstimate,
}

/// Pointwise intervals `est +- z se` and simultaneous intervals
/// `est +- q se` with `se = sd / sqrt(n)`.
pub fn simultaneous_ci(
    labels: &[String],
    estimates: &[f64],
    ic: &[Vec<f64>],
    level: f64,
    mc_draws: usize,
    seed: u64,
) -> Result<CiTable> {
    if labels.len() != estimates.len() || ic.len() != estimates.len() {
        return Err(Error::Config("labels, estimates and influence values differ in length".into()));
    }
    let cov = CovarianceEstimate::new(ic, level, mc_draws, seed)?;
    let n = ic[0].len() as f64;
    let rows = labels
        .iter()
        .zip(estimates)
        .zip(&cov.sd)
        .map(|((l, &e), &sd)| {
            let se = sd / n.sqrt();
            CiRow {
                target: l.clone(),
                estimate: e,
                se,
                ci_lo: e - cov.z * se,
                ci_hi: e + cov.z * se,
                ci_lo_simul: e - cov.q_simultaneous * se,
                ci_hi_simul: e + cov.q_simultaneous * se,
            }
        })
        .collect();
    Ok(CiTable {
        rows,
        covariance: cov,
    })
}

impl CiTable {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::Normal as RNormal;

    fn independent(k: usize) -> Vec<Vec<f64>> {
        (0..k).map(|a| (0..k).map(|b| (a == b) as u8 as f64).collect()).collect()
    }

    #[test]
    fn single_target_quantile_is_normal() {
        let (q, _) = max_abs_quantile(&independent(1), 0.95, DEFAULT_MC_DRAWS, 1).unwrap();
        assert!((q - 1.96).abs() < 0.02, "{q}");
    }

    #[test]
    fn sidak_for_independent_targets() {
        let (q, _) = max_abs_quantile(&independent(6), 0.95, DEFAULT_MC_DRAWS, 2).unwrap();
        let sidak = normal_quantile(1.0 - (1.0 - 0.95f64.powf(1.0 / 6.0)) / 2.0);
        assert!((sidak - 2.631).abs() < 1e-3);
        assert!((q - sidak).abs() < 0.02, "{q}");
    }

    #[test]
    fn perfectly_correlated_targets_need_no_adjustment() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = RNormal::new(0.0, 1.0).unwrap();
        let x: Vec<f64> = (0..500).map(|_| d.sample(&mut rng)).collect();
        let ic = vec![x.clone(), x.iter().map(|v| 2.0 * v).collect()];
        let cov = CovarianceEstimate::new(&ic, 0.95, DEFAULT_MC_DRAWS, 4).unwrap();
        assert!(cov.regularized);
        assert!((cov.q_simultaneous - 1.96).abs() < 0.02);
    }

    #[test]
    fn simultaneous_contains_pointwise() {
        let ic = vec![vec![1.0, -1.0, 0.5, -0.5], vec![0.3, 0.2, -0.1, -0.4]];
        let t = simultaneous_ci(&["a".into(), "b".into()], &[0.2, 0.4], &ic, 0.95, 20_000, 5).unwrap();
        for r in &t.rows {
            assert!(r.ci_lo_simul <= r.ci_lo && r.ci_hi <= r.ci_hi_simul);
        }
    }

    #[test]
    fn deterministic_for_seed() {
        let a = max_abs_quantile(&independent(3), 0.95, 30_000, 9).unwrap();
        let b = max_abs_quantile(&independent(3), 0.95, 30_000, 9).unwrap();
        assert_eq!(a, b);
    }
}
