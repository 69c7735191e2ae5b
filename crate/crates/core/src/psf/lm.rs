//! Damped least-squares (Levenberg-Marquardt) engine.

use nalgebra::{DMatrix, DVector};

use super::{FitError, Profile1D};

/// A parametric curve `y = f(x; p)` with an analytic gradient.
pub trait Model {
    fn n_params(&self) -> usize;
    fn eval(&self, x: f64, p: &[f64]) -> f64;
    /// Writes `df/dp` at `x` into `grad`.
    fn gradient(&self, x: f64, p: &[f64], grad: &mut [f64]);
    /// Whether `p` lies inside the admissible parameter region.
    fn admissible(&self, _p: &[f64]) -> bool {
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmOptions {
    /// Threshold on the scaled gradient (cosine between residual and
    /// Jacobian columns).
    pub gradient_tol: f64,
    /// Relative step size below which the iteration stops.
    pub step_tol: f64,
    pub max_iterations: usize,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self {
            gradient_tol: 1e-8,
            step_tol: 1e-10,
            max_iterations: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmResult {
    pub params: Vec<f64>,
    /// Parameter covariance scaled by the reduced chi-square.
    pub covariance: DMatrix<f64>,
    pub chi2: f64,
    pub initial_chi2: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl LmResult {
    pub fn residual_norm(&self) -> f64 {
        self.chi2.sqrt()
    }

    pub fn std_error(&self, i: usize) -> f64 {
        self.covariance[(i, i)].max(0.0).sqrt()
    }
}

const LAMBDA_START: f64 = 1e-3;
const LAMBDA_MAX: f64 = 1e16;

struct Linearised {
    chi2: f64,
    jtj: DMatrix<f64>,
    jtr: DVector<f64>,
}

fn chi2_of<M: Model>(model: &M, data: &Profile1D, sigma: &[f64], p: &[f64]) -> f64 {
    data.positions
        .iter()
        .zip(&data.values)
        .zip(sigma)
        .map(|((&x, &y), &s)| {
            let r = (y - model.eval(x, p)) / s;
            r * r
        })
        .sum()
}

fn linearise<M: Model>(model: &M, data: &Profile1D, sigma: &[f64], p: &[f64]) -> Linearised {
    let m = model.n_params();
    let mut jtj = DMatrix::zeros(m, m);
    let mut jtr = DVector::zeros(m);
    let mut grad = vec![0.0; m];
    let mut chi2 = 0.0;
    for ((&x, &y), &s) in data.positions.iter().zip(&data.values).zip(sigma) {
        let r = (y - model.eval(x, p)) / s;
        chi2 += r * r;
        model.gradient(x, p, &mut grad);
        for a in 0..m {
            let ga = grad[a] / s;
            jtr[a] += ga * r;
            for b in 0..=a {
                jtj[(a, b)] += ga * grad[b] / s;
            }
        }
    }
    for a in 0..m {
        for b in 0..a {
            jtj[(b, a)] = jtj[(a, b)];
        }
    }
    Linearised { chi2, jtj, jtr }
}

fn scaled_gradient(lin: &Linearised) -> f64 {
    if lin.chi2 == 0.0 {
        return 0.0;
    }
    let rn = lin.chi2.sqrt();
    (0..lin.jtr.len())
        .map(|a| {
            let col = lin.jtj[(a, a)].sqrt();
            if col > 0.0 {
                (lin.jtr[a] / (col * rn)).abs()
            } else {
                0.0
            }
        })
        .fold(0.0, f64::max)
}

/// Minimises the weighted sum of squared residuals of `model` against
/// `data`, starting from `init`.
///
/// Non-convergence within the iteration budget is not an error: the best
/// parameters found are returned with `converged == false`.
pub fn lm_fit<M: Model>(
    model: &M,
    data: &Profile1D,
    init: &[f64],
    opts: &LmOptions,
) -> Result<LmResult, FitError> {
    let m = model.n_params();
    if init.len() != m {
        return Err(FitError::InvalidInit(format!(
            "expected {m} parameters, got {}",
            init.len()
        )));
    }
    if data.len() <= m {
        return Err(FitError::TooFewPoints {
            points: data.len(),
            params: m,
        });
    }
    if !model.admissible(init) || init.iter().any(|v| !v.is_finite()) {
        return Err(FitError::InvalidInit("initial parameters outside the model domain".into()));
    }
    let sigma = data.sigma();
    let mut p = init.to_vec();
    let mut lin = linearise(model, data, &sigma, &p);
    if !lin.chi2.is_finite() {
        return Err(FitError::InvalidInit("model is not finite at the initial point".into()));
    }
    let initial_chi2 = lin.chi2;
    let mut lambda = LAMBDA_START;
    let mut converged = scaled_gradient(&lin) < opts.gradient_tol;
    let mut iterations = 0;

    'outer: while !converged && iterations < opts.max_iterations {
        iterations += 1;
        loop {
            let mut a = lin.jtj.clone();
            for k in 0..m {
                let d = lin.jtj[(k, k)].max(1e-300);
                a[(k, k)] += lambda * d;
            }
            let step = match a.cholesky() {
                Some(ch) => ch.solve(&lin.jtr),
                None => {
                    lambda *= 10.0;
                    if lambda > LAMBDA_MAX {
                        return Err(FitError::Singular);
                    }
                    continue;
                }
            };
            let trial: Vec<f64> = p.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            let chi2 = if model.admissible(&trial) {
                chi2_of(model, data, &sigma, &trial)
            } else {
                f64::INFINITY
            };
            if chi2.is_finite() && chi2 <= lin.chi2 {
                let pnorm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
                let snorm = step.norm();
                p = trial;
                lin = linearise(model, data, &sigma, &p);
                lambda = (lambda / 10.0).max(1e-12);
                if scaled_gradient(&lin) < opts.gradient_tol
                    || snorm < opts.step_tol * (pnorm + opts.step_tol)
                {
                    converged = true;
                }
                continue 'outer;
            }
            lambda *= 10.0;
            if lambda > LAMBDA_MAX {
                // no downhill step exists at machine precision
                converged = scaled_gradient(&lin) < 1e-4;
                break 'outer;
            }
        }
    }

    let dof = (data.len() - m) as f64;
    let scale = lin.chi2 / dof;
    let inverse = match lin.jtj.clone().try_inverse() {
        Some(inv) if inv.iter().all(|v| v.is_finite()) => inv,
        // parameters pinned at a bound leave directions unconstrained
        _ => lin
            .jtj
            .clone()
            .pseudo_inverse(1e-12 * lin.jtj.diagonal().max())
            .map_err(|_| FitError::Singular)?,
    };
    let covariance = inverse * scale;
    let covariance = (covariance.clone() + covariance.transpose()) * 0.5;
    Ok(LmResult {
        params: p,
        covariance,
        chi2: lin.chi2,
        initial_chi2,
        iterations,
        converged,
    })
}

/// Central finite-difference gradient with step `h * max(|p_i|, 1)`.
pub fn numeric_gradient<M: Model>(model: &M, x: f64, p: &[f64], h: f64) -> Vec<f64> {
    let mut q = p.to_vec();
    (0..p.len())
        .map(|i| {
            let step = h * p[i].abs().max(1.0);
            q[i] = p[i] + step;
            let hi = model.eval(x, &q);
            q[i] = p[i] - step;
            let lo = model.eval(x, &q);
            q[i] = p[i];
            (hi - lo) / (2.0 * step)
        })
        .collect()
}
