//! Propensity fits in a reproducing kernel Hilbert space.
//!
//! The linear predictor is `f(x) = b + sum_i gamma_i K(x, X_i)` and the fit
//! maximizes `(1/n) sum S(f(X_i), T_i) - (lambda/2) gamma^T K gamma` with the
//! intercept `b` unpenalized. At the optimum `s/n = lambda * gamma`, where
//! `s_i` is the score derivative, so the averaged imbalance of any `g` with
//! RKHS norm at most one is bounded by `lambda * ||f||_H`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::check_groups;
use crate::error::{Error, Result};
use crate::glm::NewtonOptions;
use crate::regularized::{search_lambda_for_cv, CvChoice, CvSearch};
use crate::scoring::{link_inv, score_grad, score_hess, score_on_f, ScoringRule};
use crate::{Provenance, WeightSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Kernel {
    /// `exp(-sigma ||x - x'||^2)`
    Gaussian { sigma: f64 },
    /// `exp(-sigma ||x - x'||)`
    Laplace { sigma: f64 },
    /// `(x^T x' + offset)^degree`
    Polynomial { degree: u32, offset: f64 },
    Linear,
}

impl Kernel {
    pub fn polynomial(degree: u32) -> Self {
        Kernel::Polynomial { degree, offset: 0.5 }
    }

    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        match *self {
            Kernel::Gaussian { sigma } => (-sigma * sq_dist(a, b)).exp(),
            Kernel::Laplace { sigma } => (-sigma * sq_dist(a, b).sqrt()).exp(),
            Kernel::Polynomial { degree, offset } => (dot(a, b) + offset).powi(degree as i32),
            Kernel::Linear => dot(a, b),
        }
    }

    pub fn label(&self) -> String {
        match *self {
            Kernel::Gaussian { sigma } => format!("gaussian(sigma={sigma})"),
            Kernel::Laplace { sigma } => format!("laplace(sigma={sigma})"),
            Kernel::Polynomial { degree, offset } => format!("polynomial(degree={degree}, offset={offset})"),
            Kernel::Linear => "linear".into(),
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rows(x: &DMatrix<f64>) -> Vec<Vec<f64>> {
    x.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Kernel matrix `K_ij = k(a_i, b_j)`.
pub fn cross_gram(kernel: Kernel, a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let ra = rows(a);
    let rb = rows(b);
    let filled = crate::par_map(&ra, |ai| rb.iter().map(|bj| kernel.eval(ai, bj)).collect::<Vec<_>>());
    DMatrix::from_fn(ra.len(), rb.len(), |i, j| filled[i][j])
}

/// Symmetric Gram matrix of the rows of `x` (no jitter).
pub fn gram(kernel: Kernel, x: &DMatrix<f64>) -> DMatrix<f64> {
    let r = rows(x);
    let n = r.len();
    let idx: Vec<usize> = (0..n).collect();
    let upper = crate::par_map(&idx, |&i| (i..n).map(|j| kernel.eval(&r[i], &r[j])).collect::<Vec<_>>());
    let mut k = DMatrix::zeros(n, n);
    for (i, row) in upper.iter().enumerate() {
        for (off, &v) in row.iter().enumerate() {
            k[(i, i + off)] = v;
            k[(i + off, i)] = v;
        }
    }
    k
}

/// Adds `1e-8 * mean(diag)` to the diagonal.
pub fn jitter(k: &mut DMatrix<f64>) {
    let n = k.nrows();
    let eps = 1e-8 * k.diagonal().mean().abs().max(f64::MIN_POSITIVE);
    for i in 0..n {
        k[(i, i)] += eps;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelFit {
    pub gamma: Vec<f64>,
    pub intercept: f64,
    pub kernel: Kernel,
    pub lambda: f64,
    /// `sqrt(gamma^T K gamma)`.
    pub hnorm: f64,
    pub fitted_f: Vec<f64>,
    pub fitted_p: Vec<f64>,
    pub rule: ScoringRule,
    pub converged: bool,
    pub grad_norm: f64,
    pub tol_grad: f64,
    pub iterations: usize,
    pub objective: f64,
    #[serde(skip)]
    centers: Option<DMatrix<f64>>,
}

impl KernelFit {
    pub fn weights(&self, t: &[bool]) -> WeightSet {
        WeightSet::from_linear_predictor(&self.fitted_f, t, Provenance::new(self.rule, "rkhs", Some(self.lambda)))
    }

    /// Worst-case averaged imbalance over the unit ball of the RKHS.
    pub fn max_bias(&self) -> f64 {
        rkhs_max_bias(self)
    }

    /// Linear predictor at new points.
    pub fn predict_f(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        let centers = self
            .centers
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("fit has no stored training points".into()))?;
        let k = cross_gram(self.kernel, x, centers);
        let f = k * DVector::from_column_slice(&self.gamma);
        Ok(f.iter().map(|v| v + self.intercept).collect())
    }
}

/// `lambda * ||f||_H`.
pub fn rkhs_max_bias(fit: &KernelFit) -> f64 {
    fit.lambda * fit.hnorm
}

/// Training data and jittered Gram matrix, reusable across rules and
/// penalties.
#[derive(Debug, Clone)]
pub struct KernelProblem {
    pub x: DMatrix<f64>,
    pub t: Vec<bool>,
    pub kernel: Kernel,
    pub gram: DMatrix<f64>,
}

impl KernelProblem {
    pub fn new(x: &DMatrix<f64>, t: &[bool], kernel: Kernel) -> Result<Self> {
        if x.nrows() != t.len() {
            return Err(Error::InvalidInput("covariate and treatment lengths differ".into()));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite covariate".into()));
        }
        check_groups(t)?;
        let mut g = gram(kernel, x);
        jitter(&mut g);
        Ok(Self {
            x: x.clone(),
            t: t.to_vec(),
            kernel,
            gram: g,
        })
    }

    fn objective(&self, rule: ScoringRule, lambda: f64, gamma: &DVector<f64>, b: f64) -> (f64, DVector<f64>, f64) {
        let kg = &self.gram * gamma;
        let n = self.t.len() as f64;
        let s: f64 = kg.iter().zip(&self.t).map(|(&v, &ti)| score_on_f(rule, v + b, ti)).sum();
        let quad = gamma.dot(&kg);
        (s / n - 0.5 * lambda * quad, kg, quad)
    }

    /// Newton ascent on `(gamma, b)`; see the module docs for the objective.
    pub fn fit(&self, rule: ScoringRule, lambda: f64, warm: Option<&KernelFit>, opts: &NewtonOptions) -> Result<KernelFit> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidInput(format!("kernel fits need lambda > 0, got {lambda}")));
        }
        rule.require_concave()?;
        let n = self.t.len();
        let nf = n as f64;
        let (mut gamma, mut b) = match warm {
            Some(w) if w.gamma.len() == n => (DVector::from_column_slice(&w.gamma), w.intercept),
            _ => (DVector::zeros(n), 0.0),
        };
        let (mut val, mut kg, mut quad) = self.objective(rule, lambda, &gamma, b);
        let mut last = f64::INFINITY;
        for iter in 0..=opts.max_iter {
            let s = DVector::from_iterator(n, kg.iter().zip(&self.t).map(|(&v, &ti)| score_grad(rule, v + b, ti)));
            let r_gamma = &s / nf - &gamma * lambda;
            let r_b = s.sum() / nf;
            let g_gamma = &self.gram * &r_gamma;
            let gnorm = g_gamma.amax().max(r_b.abs());
            last = gnorm;
            let abs_s = s.abs();
            let scale = (self.gram.abs() * &abs_s).amax().max(abs_s.sum()) / nf;
            let tol = opts.tol_grad * 10.0 * scale;
            if gnorm <= tol {
                let f: Vec<f64> = kg.iter().map(|v| v + b).collect();
                return Ok(KernelFit {
                    gamma: gamma.iter().copied().collect(),
                    intercept: b,
                    kernel: self.kernel,
                    lambda,
                    hnorm: quad.max(0.0).sqrt(),
                    fitted_p: f.iter().map(|&v| link_inv(v)).collect(),
                    fitted_f: f,
                    rule,
                    converged: true,
                    grad_norm: gnorm,
                    tol_grad: tol,
                    iterations: iter,
                    objective: val,
                    centers: Some(self.x.clone()),
                });
            }
            if iter == opts.max_iter {
                break;
            }
            // reduced system [D K + lambda I, D 1; 1^T D K, 1^T D 1]
            let d = DVector::from_iterator(n, kg.iter().zip(&self.t).map(|(&v, &ti)| -score_hess(rule, v + b, ti) / nf));
            let mut a = DMatrix::zeros(n + 1, n + 1);
            for i in 0..n {
                for j in 0..n {
                    a[(i, j)] = d[i] * self.gram[(i, j)];
                }
                a[(i, i)] += lambda;
                a[(i, n)] = d[i];
            }
            for j in 0..n {
                a[(n, j)] = (0..n).map(|i| d[i] * self.gram[(i, j)]).sum();
            }
            a[(n, n)] = d.sum();
            let mut rhs = r_gamma.clone().insert_row(n, 0.0);
            rhs[n] = r_b;
            let step = a.lu().solve(&rhs).ok_or(Error::IllConditioned(lambda))?;
            if step.iter().any(|v| !v.is_finite()) {
                return Err(Error::IllConditioned(lambda));
            }
            let dg = step.rows(0, n).into_owned();
            let db = step[n];
            let slope = g_gamma.dot(&dg) + r_b * db;
            let mut t_step = 1.0;
            let mut accepted = false;
            if 0.5 * slope <= 1e-13 * (1.0 + val.abs()) {
                let cg = &gamma + &dg;
                let cb = b + db;
                let (v, ckg, cq) = self.objective(rule, lambda, &cg, cb);
                if v.is_finite() {
                    gamma = cg;
                    b = cb;
                    val = v;
                    kg = ckg;
                    quad = cq;
                    continue;
                }
            }
            while t_step > 1e-12 {
                let cg = &gamma + &dg * t_step;
                let cb = b + db * t_step;
                let (v, ckg, cq) = self.objective(rule, lambda, &cg, cb);
                if v.is_finite() && v >= val + opts.armijo * t_step * slope {
                    gamma = cg;
                    b = cb;
                    val = v;
                    kg = ckg;
                    quad = cq;
                    accepted = true;
                    break;
                }
                t_step *= 0.5;
            }
            if !accepted {
                let cg = &gamma + &dg;
                let cb = b + db;
                let (v, ckg, cq) = self.objective(rule, lambda, &cg, cb);
                let s2 = DVector::from_iterator(n, ckg.iter().zip(&self.t).map(|(&u, &ti)| score_grad(rule, u + cb, ti)));
                let r2 = &s2 / nf - &cg * lambda;
                let g2 = (&self.gram * r2).amax().max((s2.sum() / nf).abs());
                if v.is_finite() && g2 < gnorm {
                    gamma = cg;
                    b = cb;
                    val = v;
                    kg = ckg;
                    quad = cq;
                } else {
                    break;
                }
            }
        }
        Err(Error::NotConverged {
            iterations: opts.max_iter,
            grad_norm: last,
        })
    }

    /// Smallest lambda whose weights have CV at most the target.
    pub fn fit_until_cv(&self, rule: ScoringRule, search: &CvSearch, opts: &NewtonOptions) -> Result<CvChoice<KernelFit>> {
        search_lambda_for_cv(search, |lambda, warm: Option<&KernelFit>| {
            let fit = self.fit(rule, lambda, warm, opts)?;
            let cv = fit.weights(&self.t).coefficient_of_variation();
            Ok((fit, cv))
        })
    }
}

/// Kernel fit at a single penalty.
pub fn fit_rkhs(x: &DMatrix<f64>, t: &[bool], kernel: Kernel, rule: ScoringRule, lambda: f64, opts: &NewtonOptions) -> Result<KernelFit> {
    KernelProblem::new(x, t, kernel)?.fit(rule, lambda, None, opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> (DMatrix<f64>, Vec<bool>) {
        let x = DMatrix::from_row_slice(
            8,
            2,
            &[-1.0, 0.2, -0.5, -0.7, 0.1, 0.4, 0.8, -0.1, 1.2, 0.9, -0.3, 1.1, 0.5, -1.2, 1.6, 0.3],
        );
        (x, vec![false, false, true, true, true, false, false, true])
    }

    #[test]
    fn gram_examples() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, -0.5, 0.3, 0.0, 1.0]);
        let g = gram(Kernel::Gaussian { sigma: 1.0 }, &x);
        assert!((0..3).all(|i| g[(i, i)] == 1.0));
        let p = gram(Kernel::polynomial(1), &x);
        let expect = &x * x.transpose() + DMatrix::from_element(3, 3, 0.5);
        assert!((p - expect).amax() < 1e-14);
        assert_eq!(gram(Kernel::Linear, &x), &x * x.transpose());
    }

    #[test]
    fn stationarity_and_bound() {
        let (x, t) = toy();
        let prob = KernelProblem::new(&x, &t, Kernel::Gaussian { sigma: 0.5 }).unwrap();
        let fit = prob.fit(ScoringRule::ATE, 0.01, None, &NewtonOptions::default()).unwrap();
        assert!(fit.grad_norm <= 1e-8);
        // averaged imbalance of each normalized column of K is within the bound
        let ws = fit.weights(&t);
        for j in 0..t.len() {
            let col = prob.gram.column(j);
            let norm = prob.gram[(j, j)].sqrt();
            let g: Vec<f64> = col.iter().map(|v| v / norm).collect();
            let imb = ws.weighted_difference(&g, false) / t.len() as f64;
            assert!(imb.abs() <= fit.max_bias() + 1e-8);
        }
    }

    #[test]
    fn large_lambda_gives_group_constant_weights() {
        let (x, t) = toy();
        let fit = fit_rkhs(&x, &t, Kernel::Laplace { sigma: 1.0 }, ScoringRule::ATE, 1e6, &NewtonOptions::default()).unwrap();
        let ws = fit.weights(&t);
        assert!(ws.coefficient_of_variation() < 1e-4);
    }

    #[test]
    fn rejects_zero_lambda() {
        let (x, t) = toy();
        assert!(fit_rkhs(&x, &t, Kernel::Linear, ScoringRule::ATT, 0.0, &NewtonOptions::default()).is_err());
    }
}
