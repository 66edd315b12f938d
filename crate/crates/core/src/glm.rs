//! Logistic propensity fits that maximize a Beta-family scoring rule.
//!
//! The same damped Newton engine also serves the ridge and sign-fixed L1
//! subproblems of [`crate::regularized`].

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::balance::{std_diff, Provenance, WeightSet};
use crate::data::{check_groups, Design};
use crate::error::{Error, Result};
use crate::scoring::{link_inv, score_grad, score_hess, score_on_f, ScoringRule};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NewtonOptions {
    /// Convergence threshold on the gradient sup-norm, relative to the
    /// largest per-coordinate sum of absolute gradient terms.
    pub tol_grad: f64,
    pub max_iter: usize,
    pub armijo: f64,
    /// An unpenalized fit that fails to converge with `max |f_i|` beyond
    /// this is reported as separation.
    pub separation_f: f64,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            tol_grad: 1e-12,
            max_iter: 100,
            armijo: 1e-4,
            separation_f: 30.0,
        }
    }
}

/// A fitted logistic propensity model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityFit {
    pub theta: Vec<f64>,
    pub names: Vec<String>,
    pub fitted_f: Vec<f64>,
    pub fitted_p: Vec<f64>,
    pub rule: ScoringRule,
    pub fitter: String,
    pub lambda: Option<f64>,
    pub converged: bool,
    pub grad_norm: f64,
    /// Absolute gradient tolerance the fit was held to.
    pub tol_grad: f64,
    pub iterations: usize,
    /// Penalized mean score at `theta`.
    pub objective: f64,
}

impl PropensityFit {
    pub fn weights(&self, t: &[bool]) -> WeightSet {
        self.weights_under(self.rule, t)
    }

    /// Weights implied by the fitted propensities under another rule.
    pub fn weights_under(&self, rule: ScoringRule, t: &[bool]) -> WeightSet {
        WeightSet::from_linear_predictor(
            &self.fitted_f,
            t,
            Provenance::new(rule, self.fitter.clone(), self.lambda),
        )
    }

    pub fn predict_f(&self, design: &DMatrix<f64>) -> Vec<f64> {
        (design * DVector::from_column_slice(&self.theta)).iter().copied().collect()
    }
}

/// Smooth penalty `(ridge/2) sum_{mask} theta^2 + sum_k linear_k theta_k`
/// subtracted from the mean score.
pub(crate) struct Penalty<'a> {
    pub ridge: f64,
    pub ridge_mask: &'a [bool],
    pub linear: &'a [f64],
}

impl Penalty<'_> {
    fn is_zero(&self) -> bool {
        self.ridge == 0.0 && self.linear.iter().all(|&c| c == 0.0)
    }

    fn value(&self, theta: &DVector<f64>) -> f64 {
        let mut v = 0.0;
        for (k, &th) in theta.iter().enumerate() {
            if self.ridge_mask[k] {
                v += 0.5 * self.ridge * th * th;
            }
            v += self.linear[k] * th;
        }
        v
    }
}

pub(crate) struct NewtonOutcome {
    pub theta: DVector<f64>,
    pub f: DVector<f64>,
    pub objective: f64,
    pub grad_norm: f64,
    pub tol: f64,
    pub iterations: usize,
}

pub(crate) fn objective(phi: &DMatrix<f64>, t: &[bool], rule: ScoringRule, pen: &Penalty, theta: &DVector<f64>) -> (f64, DVector<f64>) {
    let f = phi * theta;
    let n = t.len() as f64;
    let s: f64 = f.iter().zip(t).map(|(&fi, &ti)| score_on_f(rule, fi, ti)).sum();
    (s / n - pen.value(theta), f)
}

/// Gradient of the penalized mean score and its natural magnitude.
pub(crate) fn gradient(phi: &DMatrix<f64>, t: &[bool], rule: ScoringRule, pen: &Penalty, theta: &DVector<f64>, f: &DVector<f64>) -> (DVector<f64>, f64) {
    let n = t.len() as f64;
    let m = phi.ncols();
    let mut g = DVector::zeros(m);
    let mut scale: f64 = 0.0;
    for k in 0..m {
        let col = phi.column(k);
        let mut acc = 0.0;
        let mut mag = 0.0;
        for i in 0..t.len() {
            let term = score_grad(rule, f[i], t[i]) * col[i];
            acc += term;
            mag += term.abs();
        }
        let mut pk = pen.linear[k];
        if pen.ridge_mask[k] {
            pk += pen.ridge * theta[k];
        }
        g[k] = acc / n - pk;
        scale = scale.max(mag / n + pk.abs());
    }
    (g, scale)
}

/// Negative Hessian of the penalized mean score (positive semidefinite).
fn neg_hessian(phi: &DMatrix<f64>, t: &[bool], rule: ScoringRule, pen: &Penalty, f: &DVector<f64>) -> DMatrix<f64> {
    let n = t.len() as f64;
    let m = phi.ncols();
    let mut h = DMatrix::zeros(m, m);
    for i in 0..t.len() {
        let hi = -score_hess(rule, f[i], t[i]) / n;
        if hi != 0.0 {
            let row = phi.row(i).transpose();
            h.ger(hi, &row, &row, 1.0);
        }
    }
    for k in 0..m {
        if pen.ridge_mask[k] {
            h[(k, k)] += pen.ridge;
        }
    }
    h
}

fn newton_direction(h: DMatrix<f64>, g: &DVector<f64>) -> Result<DVector<f64>> {
    let m = h.nrows();
    if let Some(ch) = h.clone().cholesky() {
        return Ok(ch.solve(g));
    }
    let diag_max = h.diagonal().amax().max(1.0);
    let jittered = h + DMatrix::identity(m, m) * (1e-10 * diag_max);
    jittered
        .cholesky()
        .map(|ch| ch.solve(g))
        .ok_or(Error::SingularHessian)
}

/// Damped Newton ascent on the penalized mean score from `theta`.
pub(crate) fn newton_ascent(
    phi: &DMatrix<f64>,
    t: &[bool],
    rule: ScoringRule,
    pen: &Penalty,
    mut theta: DVector<f64>,
    opts: &NewtonOptions,
) -> Result<NewtonOutcome> {
    let unpenalized = pen.is_zero();
    let (mut val, mut f) = objective(phi, t, rule, pen, &theta);
    let mut last_gnorm = f64::INFINITY;
    for iter in 0..=opts.max_iter {
        let (g, scale) = gradient(phi, t, rule, pen, &theta, &f);
        let gnorm = g.amax();
        last_gnorm = gnorm;
        let tol = opts.tol_grad * scale;
        if gnorm <= tol {
            return Ok(NewtonOutcome {
                theta,
                f,
                objective: val,
                grad_norm: gnorm,
                tol,
                iterations: iter,
            });
        }
        if iter == opts.max_iter {
            break;
        }
        let dir = newton_direction(neg_hessian(phi, t, rule, pen, &f), &g)?;
        let slope = g.dot(&dir);
        let mut step = 1.0;
        let mut accepted = false;
        if 0.5 * slope <= 1e-13 * (1.0 + val.abs()) {
            // predicted gain is below roundoff in the objective: take the
            // full step and let the gradient test decide
            let cand = &theta + &dir;
            let (v, fc) = objective(phi, t, rule, pen, &cand);
            if v.is_finite() {
                theta = cand;
                val = v;
                f = fc;
                continue;
            }
        }
        while step > 1e-12 {
            let cand = &theta + &dir * step;
            let (v, fc) = objective(phi, t, rule, pen, &cand);
            if v.is_finite() && v >= val + opts.armijo * step * slope {
                theta = cand;
                val = v;
                f = fc;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // Objective differences are at roundoff level; fall back on the
            // gradient to judge the full step.
            let cand = &theta + &dir;
            let (v, fc) = objective(phi, t, rule, pen, &cand);
            let (g2, _) = gradient(phi, t, rule, pen, &cand, &fc);
            if v.is_finite() && g2.amax() < gnorm {
                theta = cand;
                val = v;
                f = fc;
            } else {
                break;
            }
        }
    }
    let max_f = f.amax();
    if unpenalized && max_f > opts.separation_f {
        Err(Error::Separated {
            iterations: opts.max_iter,
            max_abs_f: max_f,
        })
    } else {
        Err(Error::NotConverged {
            iterations: opts.max_iter,
            grad_norm: last_gnorm,
        })
    }
}

pub(crate) fn build_fit(
    out: NewtonOutcome,
    names: &[String],
    rule: ScoringRule,
    fitter: &str,
    lambda: Option<f64>,
) -> PropensityFit {
    PropensityFit {
        theta: out.theta.iter().copied().collect(),
        names: names.to_vec(),
        fitted_p: out.f.iter().map(|&f| link_inv(f)).collect(),
        fitted_f: out.f.iter().copied().collect(),
        rule,
        fitter: fitter.to_string(),
        lambda,
        converged: true,
        grad_norm: out.grad_norm,
        tol_grad: out.tol,
        iterations: out.iterations,
        objective: out.objective,
    }
}

pub(crate) fn check_problem(design: &Design, t: &[bool]) -> Result<()> {
    if design.matrix.nrows() != t.len() {
        return Err(Error::InvalidInput("design and treatment lengths differ".into()));
    }
    if design.ncols() == 0 {
        return Err(Error::InvalidInput("design has no columns".into()));
    }
    check_groups(t)
}

/// Maximizes the mean score of `rule` over a linear logistic model. At the
/// optimum the implied weights balance every design column exactly.
pub fn fit_mle_score(design: &Design, t: &[bool], rule: ScoringRule, opts: &NewtonOptions) -> Result<PropensityFit> {
    fit_mle_from(design, t, rule, DVector::zeros(design.ncols()), opts)
}

fn fit_mle_from(design: &Design, t: &[bool], rule: ScoringRule, theta0: DVector<f64>, opts: &NewtonOptions) -> Result<PropensityFit> {
    check_problem(design, t)?;
    rule.require_concave()?;
    let m = design.ncols();
    let mask = vec![false; m];
    let linear = vec![0.0; m];
    let pen = Penalty {
        ridge: 0.0,
        ridge_mask: &mask,
        linear: &linear,
    };
    let out = newton_ascent(&design.matrix, t, rule, &pen, theta0, opts)?;
    Ok(build_fit(out, &design.names, rule, "glm", None))
}

/// `sum_{T=1} w phi - sum_{T=0} w phi` for each design column, with the
/// fit's own weights.
pub fn balance_residual(fit: &PropensityFit, design: &Design, t: &[bool]) -> Vec<f64> {
    crate::balance::imbalance(&design.matrix, &fit.weights(t), false)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepwiseStep {
    /// Active design columns, intercept first.
    pub active: Vec<usize>,
    pub added: Option<String>,
    pub objective: f64,
    pub theta: Vec<f64>,
    /// Standardized differences (percent) of every non-intercept column,
    /// under the diagnostic weights.
    pub std_diffs: Vec<f64>,
    pub max_abs_std_diff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepwisePath {
    pub rule: ScoringRule,
    pub diagnostic_rule: ScoringRule,
    pub steps: Vec<StepwiseStep>,
    /// Why the path ended before `k_max` steps, if it did.
    pub stopped: Option<String>,
}

impl StepwisePath {
    pub fn last(&self) -> &StepwiseStep {
        self.steps.last().expect("path has at least the intercept step")
    }
}

/// Forward selection over the non-intercept columns of `design` (column 0
/// must be the intercept). Each step adds the column whose inclusion gives
/// the largest maximized score; ties go to the lower index. Balance is
/// evaluated with weights implied by the fitted propensities under
/// `diagnostic_rule`.
pub fn forward_stepwise(
    design: &Design,
    t: &[bool],
    rule: ScoringRule,
    k_max: usize,
    diagnostic_rule: ScoringRule,
    opts: &NewtonOptions,
) -> Result<StepwisePath> {
    check_problem(design, t)?;
    if !design.intercept {
        return Err(Error::InvalidInput("stepwise selection needs an intercept column".into()));
    }
    let record = |active: Vec<usize>, added: Option<String>, fit: &PropensityFit| -> Result<StepwiseStep> {
        let ws = fit.weights_under(diagnostic_rule, t);
        let std_diffs = (1..design.ncols())
            .map(|j| std_diff(design.matrix.column(j).as_slice(), &design.names[j], &ws))
            .collect::<Result<Vec<_>>>()?;
        Ok(StepwiseStep {
            active,
            added,
            objective: fit.objective,
            theta: fit.theta.clone(),
            max_abs_std_diff: std_diffs.iter().fold(0.0, |a: f64, d| a.max(d.abs())),
            std_diffs,
        })
    };

    let mut active = vec![0usize];
    let mut fit = fit_mle_score(&design.select(&active), t, rule, opts)?;
    let mut steps = vec![record(active.clone(), None, &fit)?];
    let mut stopped = None;
    for _ in 0..k_max {
        let candidates: Vec<usize> = (1..design.ncols()).filter(|j| !active.contains(j)).collect();
        if candidates.is_empty() {
            break;
        }
        let warm = fit.theta.clone();
        let results = crate::par_map(&candidates, |&c| {
            let mut cols = active.clone();
            cols.push(c);
            let mut th = warm.clone();
            th.push(0.0);
            fit_mle_from(&design.select(&cols), t, rule, DVector::from_vec(th), opts)
        });
        let mut best: Option<(usize, PropensityFit)> = None;
        let mut failure = None;
        for (&c, r) in candidates.iter().zip(results) {
            match r {
                Ok(f) => {
                    if best.as_ref().map_or(true, |(_, b)| f.objective > b.objective) {
                        best = Some((c, f));
                    }
                }
                Err(e) if e.is_numeric() => {
                    failure.get_or_insert(format!("adding `{}`: {e}", design.names[c]));
                }
                Err(e) => return Err(e),
            }
        }
        if let Some(msg) = failure {
            stopped = Some(msg);
            break;
        }
        let (c, f) = best.expect("at least one candidate");
        active.push(c);
        fit = f;
        steps.push(record(active.clone(), Some(design.names[c].clone()), &fit)?);
    }
    Ok(StepwisePath {
        rule,
        diagnostic_rule,
        steps,
        stopped,
    })
}
