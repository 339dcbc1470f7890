use nalgebra::{DMatrix, DVector};

pub(crate) const MAX_ITER: usize = 100;
pub(crate) const TOL: f64 = 1e-8;
const SEPARATION_BOUND: f64 = 30.0;

pub(crate) fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug)]
pub(crate) enum IrlsFailure {
    NoConvergence,
    Separation,
}

/// Binomial logistic regression on grouped rows: `x[g]` is the design row,
/// `trials[g]` the number of rows and `events[g]` the number of successes.
pub(crate) fn fit_grouped(
    x: &[Vec<f64>],
    trials: &[f64],
    events: &[f64],
) -> Result<Vec<f64>, IrlsFailure> {
    let p = x.first().map_or(0, Vec::len);
    let mut beta = DVector::<f64>::zeros(p);
    for _ in 0..MAX_ITER {
        let mut h = DMatrix::<f64>::zeros(p, p);
        let mut g = DVector::<f64>::zeros(p);
        for ((row, &n), &y) in x.iter().zip(trials).zip(events) {
            let eta: f64 = row.iter().zip(beta.iter()).map(|(a, b)| a * b).sum();
            let mu = expit(eta);
            let w = n * mu * (1.0 - mu);
            let r = y - n * mu;
            for a in 0..p {
                if row[a] == 0.0 {
                    continue;
                }
                g[a] += row[a] * r;
                for b in 0..=a {
                    h[(a, b)] += w * row[a] * row[b];
                }
            }
        }
        let scale = (0..p).map(|a| h[(a, a)]).fold(0.0, f64::max).max(1.0);
        for a in 0..p {
            for b in 0..a {
                h[(b, a)] = h[(a, b)];
            }
            h[(a, a)] += 1e-10 * scale;
        }
        let step = match h.cholesky() {
            Some(c) => c.solve(&g),
            None => return Err(IrlsFailure::NoConvergence),
        };
        beta += &step;
        if beta.iter().any(|b| !b.is_finite() || b.abs() > SEPARATION_BOUND) {
            return Err(IrlsFailure::Separation);
        }
        if step.amax() <= TOL {
            return Ok(beta.iter().copied().collect());
        }
    }
    Err(IrlsFailure::NoConvergence)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_saturated_log_odds() {
        // One binary covariate: the fit reproduces the two stratum proportions.
        let x = vec![vec![1.0, 0.0], vec![1.0, 1.0]];
        let beta = fit_grouped(&x, &[100.0, 50.0], &[30.0, 40.0]).unwrap();
        assert!((expit(beta[0]) - 0.3).abs() < 1e-9);
        assert!((expit(beta[0] + beta[1]) - 0.8).abs() < 1e-9);
    }

    #[test]
    fn detects_separation() {
        let x = vec![vec![1.0, 0.0], vec![1.0, 1.0]];
        assert!(fit_grouped(&x, &[10.0, 10.0], &[0.0, 10.0]).is_err());
    }
}
