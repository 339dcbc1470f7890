//! Coordinate-descent lasso on sufficient statistics.
//!
//! The objective is `0.5 b'Gb - c'b + lambda |b|_1` with `G = X'WX / sum(W)`
//! and `c = X'Wy / sum(W)`, the weighted least-squares loss up to a constant.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ridge added to the normalized Gram diagonal, relative to its mean.
const RIDGE_REL: f64 = 1e-8;
pub const DEFAULT_TOL: f64 = 1e-7;
pub const DEFAULT_MAX_SWEEPS: usize = 10_000;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct LassoConfig {
    pub n_lambda: usize,
    /// Smallest penalty as a fraction of the smallest all-zero penalty.
    pub lambda_ratio: f64,
    pub folds: usize,
    pub tol: f64,
    pub max_sweeps: usize,
}

impl Default for LassoConfig {
    fn default() -> Self {
        LassoConfig {
            n_lambda: 30,
            lambda_ratio: 1e-4,
            folds: 5,
            tol: DEFAULT_TOL,
            max_sweeps: DEFAULT_MAX_SWEEPS,
        }
    }
}

/// Weighted second moments of a design and response.
#[derive(Clone, Debug)]
pub struct Moments {
    pub gram: DMatrix<f64>,
    pub xty: DVector<f64>,
    pub yty: f64,
    pub weight: f64,
}

impl Moments {
    pub fn zeros(p: usize) -> Self {
        Moments {
            gram: DMatrix::zeros(p, p),
            xty: DVector::zeros(p),
            yty: 0.0,
            weight: 0.0,
        }
    }

    /// Adds a group of rows sharing the design row `x`: total weight `w`,
    /// weighted response sum `wy` and weighted squared response sum `wyy`.
    pub fn add_group(&mut self, x: &[f64], w: f64, wy: f64, wyy: f64) {
        let nz: Vec<usize> = (0..x.len()).filter(|&j| x[j] != 0.0).collect();
        for &a in &nz {
            self.xty[a] += x[a] * wy;
            for &b in &nz {
                self.gram[(a, b)] += w * x[a] * x[b];
            }
        }
        self.yty += wyy;
        self.weight += w;
    }

    pub fn minus(&self, other: &Moments) -> Moments {
        Moments {
            gram: &self.gram - &other.gram,
            xty: &self.xty - &other.xty,
            yty: self.yty - other.yty,
            weight: self.weight - other.weight,
        }
    }

    /// Weighted mean squared error of coefficients `b`.
    pub fn mse(&self, b: &DVector<f64>) -> f64 {
        if self.weight <= 0.0 {
            return 0.0;
        }
        let quad = b.dot(&(&self.gram * b));
        ((self.yty - 2.0 * self.xty.dot(b) + quad) / self.weight).max(0.0)
    }
}

/// Penalty at which every coefficient is zero, on the normalized scale.
pub fn lambda_max(m: &Moments) -> f64 {
    if m.weight <= 0.0 {
        return 0.0;
    }
    m.xty.amax() / m.weight
}

pub fn lambda_grid(lmax: f64, n: usize, ratio: f64) -> Vec<f64> {
    if n == 1 || lmax <= 0.0 {
        return vec![lmax.max(0.0)];
    }
    (0..n)
        .map(|i| lmax * ratio.powf(i as f64 / (n - 1) as f64))
        .collect()
}

/// Coordinate descent on normalized moments, starting from `beta`.
/// Every few sweeps an active-set search on the sign pattern (exact solves
/// of the restricted quadratic with a line search over sign changes) is
/// run; it terminates finitely where plain sweeps crawl on ill-conditioned
/// designs. Converged when a full sweep changes no coefficient by more than
/// `tol`. Returns the number of sweeps used.
pub fn lasso_cd(
    m: &Moments,
    lambda: f64,
    beta: &mut DVector<f64>,
    tol: f64,
    max_sweeps: usize,
) -> Result<usize> {
    let p = beta.len();
    if p == 0 || m.weight <= 0.0 {
        return Ok(0);
    }
    let w = m.weight;
    let mut g = &m.gram / w;
    // A tiny ridge keeps the problem strictly convex; training folds are
    // often rank deficient.
    let ridge = RIDGE_REL * (0..p).map(|j| g[(j, j)]).sum::<f64>() / p as f64;
    for j in 0..p {
        if g[(j, j)] > 0.0 {
            g[(j, j)] += ridge;
        }
    }
    let c = &m.xty / w;
    let all: Vec<usize> = (0..p).filter(|&j| g[(j, j)] > 0.0).collect();
    let mut sweeps = 0;
    while sweeps < max_sweeps {
        // grad[j] = c_j - (G b)_j, refreshed on every full sweep
        let mut grad = &c - &g * &*beta;
        sweeps += 1;
        if cd_pass(&g, &mut grad, beta, lambda, &all) <= tol {
            return Ok(sweeps);
        }
        // Cycle over the nonzero coefficients until they settle.
        let active: Vec<usize> = all.iter().copied().filter(|&j| beta[j] != 0.0).collect();
        while sweeps < max_sweeps {
            sweeps += 1;
            if cd_pass(&g, &mut grad, beta, lambda, &active) <= tol {
                break;
            }
            if sweeps % 10 == 0 {
                sign_search(&g, &c, lambda, beta);
                break;
            }
        }
    }
    Err(Error::LassoNoConvergence { sweeps: max_sweeps })
}

/// Active-set search on the sign pattern. Returns false if it stalls.
fn sign_search(g: &DMatrix<f64>, c: &DVector<f64>, lambda: f64, beta: &mut DVector<f64>) -> bool {
    let p = beta.len();
    let kkt_tol = 1e-10 * (1.0 + c.amax());
    let mut theta: Vec<f64> = beta.iter().map(|v| if *v == 0.0 { 0.0 } else { v.signum() }).collect();
    let mut single = false;
    for _ in 0..(10 * p + 100) {
        let mut added = 0;
        // d = G b - c, the gradient of the smooth part.
        let d = g * &*beta - c;
        let nz_ok = (0..p).all(|j| theta[j] == 0.0 || (d[j] + lambda * theta[j]).abs() <= kkt_tol);
        if nz_ok {
            let violators: Vec<usize> = (0..p)
                .filter(|&j| theta[j] == 0.0 && g[(j, j)] > 0.0 && d[j].abs() > lambda + kkt_tol)
                .collect();
            let Some(&worst) = violators.iter().max_by(|&&a, &&b| d[a].abs().total_cmp(&d[b].abs())) else {
                return true;
            };
            // All violators at once, or only the worst after a failed joint step.
            if single {
                theta[worst] = -d[worst].signum();
            } else {
                for &j in &violators {
                    theta[j] = -d[j].signum();
                }
            }
            added = violators.len();
        }
        let act: Vec<usize> = (0..p).filter(|&j| theta[j] != 0.0).collect();
        let k = act.len();
        let ga = DMatrix::from_fn(k, k, |a, b| g[(act[a], act[b])]);
        let rhs = DVector::from_fn(k, |a, _| c[act[a]] - lambda * theta[act[a]]);
        let target = match ga.clone().cholesky() {
            Some(ch) => ch.solve(&rhs),
            None => {
                let scale = ga.amax().max(1e-300);
                match ga.svd(true, true).solve(&rhs, 1e-12 * scale) {
                    Ok(t) => t,
                    Err(_) => return false,
                }
            }
        };
        let mut step = DVector::zeros(p);
        for (a, &j) in act.iter().enumerate() {
            step[j] = target[a] - beta[j];
        }
        // Objective along beta + t step, relative to t = 0.
        let lin = step.dot(&d);
        let quad = step.dot(&(g * &step));
        let l1 = |t: f64| -> f64 { beta.iter().zip(step.iter()).map(|(b, s)| (b + t * s).abs()).sum() };
        let l1_0 = l1(0.0);
        let f = |t: f64| t * lin + 0.5 * t * t * quad + lambda * (l1(t) - l1_0);
        // Candidates: the target and each point where a coefficient crosses zero.
        let mut best = (1.0, f(1.0), None);
        for &j in &act {
            let (b0, b1) = (beta[j], beta[j] + step[j]);
            if b0 != 0.0 && b0 * b1 < 0.0 {
                let t = b0 / -step[j];
                let v = f(t);
                if v < best.1 {
                    best = (t, v, Some(j));
                }
            }
        }
        let (t, gain, crossing) = best;
        if gain > 1e-15 || (gain >= 0.0 && added > 1 && !single) {
            if added > 1 && !single {
                single = true;
                for j in 0..p {
                    theta[j] = if beta[j] == 0.0 { 0.0 } else { beta[j].signum() };
                }
                continue;
            }
            return false;
        }
        single = false;
        for j in 0..p {
            beta[j] = if crossing == Some(j) { 0.0 } else { beta[j] + t * step[j] };
            theta[j] = if beta[j] == 0.0 { 0.0 } else { beta[j].signum() };
        }
        if gain >= 0.0 && !nz_ok {
            // No progress on a fixed pattern: at the optimum to rounding.
            return true;
        }
    }
    false
}

fn cd_pass(g: &DMatrix<f64>, grad: &mut DVector<f64>, beta: &mut DVector<f64>, lambda: f64, coords: &[usize]) -> f64 {
    let mut max_change = 0.0f64;
    for &j in coords {
        let d = g[(j, j)];
        let old = beta[j];
        let new = soft(grad[j] + d * old, lambda) / d;
        let delta = new - old;
        if delta != 0.0 {
            beta[j] = new;
            grad.axpy(-delta, &g.column(j), 1.0);
            max_change = max_change.max(delta.abs());
        }
    }
    max_change
}

fn soft(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

/// Minimum-norm weighted least squares (the zero-penalty limit).
pub fn least_squares(m: &Moments) -> DVector<f64> {
    let p = m.xty.len();
    if p == 0 || m.weight <= 0.0 {
        return DVector::zeros(p);
    }
    let scale = m.gram.amax().max(1e-300);
    let svd = m.gram.clone().svd(true, true);
    svd.solve(&m.xty, 1e-12 * scale).unwrap_or_else(|_| DVector::zeros(p))
}

/// Lasso objective on normalized moments.
pub fn objective(m: &Moments, lambda: f64, b: &DVector<f64>) -> f64 {
    let w = m.weight;
    0.5 * b.dot(&(&m.gram * b)) / w - m.xty.dot(b) / w + lambda * b.iter().map(|v| v.abs()).sum::<f64>()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CvFit {
    pub lambda: f64,
    pub beta: Vec<f64>,
    pub cv_mse: Vec<f64>,
    pub lambdas: Vec<f64>,
}

/// Cross-validated lasso: `folds[f]` holds the moments of fold `f`, `total`
/// their sum. Columns are standardized to unit second moment internally;
/// returned coefficients are on the original scale.
pub fn cv_lasso(total: &Moments, folds: &[Moments], config: &LassoConfig) -> Result<CvFit> {
    let p = total.xty.len();
    let scale: Vec<f64> = (0..p)
        .map(|j| {
            let v = total.gram[(j, j)] / total.weight.max(1e-300);
            if v > 0.0 {
                v.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let std = |m: &Moments| {
        let mut out = m.clone();
        for a in 0..p {
            let sa = if scale[a] > 0.0 { 1.0 / scale[a] } else { 0.0 };
            out.xty[a] *= sa;
            for b in 0..p {
                let sb = if scale[b] > 0.0 { 1.0 / scale[b] } else { 0.0 };
                out.gram[(a, b)] *= sa * sb;
            }
        }
        out
    };
    let total_s = std(total);
    let lambdas = lambda_grid(lambda_max(&total_s), config.n_lambda, config.lambda_ratio);
    let mut cv_mse = vec![0.0; lambdas.len()];
    if folds.len() >= 2 {
        for fold in folds {
            let valid = std(fold);
            let train = total_s.minus(&valid);
            let mut b = DVector::zeros(p);
            for (l, &lam) in lambdas.iter().enumerate() {
                lasso_cd(&train, lam, &mut b, config.tol, config.max_sweeps)?;
                cv_mse[l] += valid.mse(&b) * valid.weight;
            }
        }
        for v in &mut cv_mse {
            *v /= total.weight;
        }
    }
    let best = cv_mse
        .iter()
        .enumerate()
        .fold(0, |bi, (i, v)| if *v < cv_mse[bi] { i } else { bi });
    let mut b = DVector::zeros(p);
    for &lam in &lambdas[..=best] {
        lasso_cd(&total_s, lam, &mut b, config.tol, config.max_sweeps)?;
    }
    let beta = (0..p)
        .map(|j| if scale[j] > 0.0 { b[j] / scale[j] } else { 0.0 })
        .collect();
    Ok(CvFit {
        lambda: lambdas[best],
        beta,
        cv_mse,
        lambdas,
    })
}
