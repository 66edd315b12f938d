//! Penalized scoring-rule fits and their imbalance bounds.
//!
//! The fit maximizes `(1/n) sum S - lambda * J(theta)` with
//! `J = ||theta||_2^2 / 2` (L2) or `J = ||theta||_1` (L1); the intercept is
//! never penalized. At the optimum the averaged imbalance
//! `(1/n) sum (2T-1) w phi_k` equals `lambda * dJ/dtheta_k`, which gives the
//! bounds reported in [`ImbalanceBound`].

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Design;
use crate::error::{Error, Result};
use crate::glm::{self, build_fit, check_problem, newton_ascent, NewtonOptions, Penalty, PropensityFit};
use crate::scoring::ScoringRule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    L1,
    L2,
}

impl NormKind {
    pub fn exponent(&self) -> f64 {
        match self {
            NormKind::L1 => 1.0,
            NormKind::L2 => 2.0,
        }
    }
}

/// Bounds on the averaged imbalance implied by the optimality conditions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceBound {
    /// Bound on `|(1/n) sum (2T-1) w phi_k|` for each column.
    pub per_coordinate: Vec<f64>,
    /// `lambda * ||theta||_a^(a-1)` over the penalized coordinates: the
    /// largest imbalance of `beta^T phi` over `||beta||_a <= 1`.
    pub aggregate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegularizedFit {
    pub fit: PropensityFit,
    pub lambda: f64,
    pub norm: NormKind,
    pub bound: ImbalanceBound,
}

fn penalty_mask(design: &Design) -> Vec<bool> {
    (0..design.ncols()).map(|k| !(design.intercept && k == 0)).collect()
}

/// Imbalance bounds implied by `theta` at penalty `lambda`.
pub fn imbalance_bound(theta: &[f64], penalized: &[bool], lambda: f64, norm: NormKind) -> ImbalanceBound {
    let per_coordinate = theta
        .iter()
        .zip(penalized)
        .map(|(&th, &p)| match (p, norm) {
            (false, _) => 0.0,
            (true, NormKind::L2) => lambda * th.abs(),
            (true, NormKind::L1) => lambda,
        })
        .collect();
    let aggregate = match norm {
        NormKind::L1 => lambda,
        NormKind::L2 => {
            lambda
                * theta
                    .iter()
                    .zip(penalized)
                    .filter(|(_, &p)| p)
                    .map(|(th, _)| th * th)
                    .sum::<f64>()
                    .sqrt()
        }
    };
    ImbalanceBound {
        per_coordinate,
        aggregate,
    }
}

/// Penalized fit at a single `lambda`, optionally warm-started.
pub fn fit_penalized(
    design: &Design,
    t: &[bool],
    rule: ScoringRule,
    lambda: f64,
    norm: NormKind,
    opts: &NewtonOptions,
    warm: Option<&[f64]>,
) -> Result<RegularizedFit> {
    check_problem(design, t)?;
    rule.require_concave()?;
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidInput(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    let m = design.ncols();
    let theta0 = match warm {
        Some(w) if w.len() == m => DVector::from_column_slice(w),
        Some(_) => return Err(Error::InvalidInput("warm start has wrong length".into())),
        None => DVector::zeros(m),
    };
    let mask = penalty_mask(design);
    let tag = match norm {
        NormKind::L1 => "l1",
        NormKind::L2 => "l2",
    };
    let fit = match norm {
        NormKind::L2 => {
            let linear = vec![0.0; m];
            let pen = Penalty {
                ridge: lambda,
                ridge_mask: &mask,
                linear: &linear,
            };
            let out = newton_ascent(&design.matrix, t, rule, &pen, theta0, opts)?;
            build_fit(out, &design.names, rule, tag, Some(lambda))
        }
        NormKind::L1 if lambda == 0.0 => {
            let linear = vec![0.0; m];
            let pen = Penalty {
                ridge: 0.0,
                ridge_mask: &mask,
                linear: &linear,
            };
            let out = newton_ascent(&design.matrix, t, rule, &pen, theta0, opts)?;
            build_fit(out, &design.names, rule, tag, Some(lambda))
        }
        NormKind::L1 => fit_l1(design, t, rule, lambda, &mask, theta0, opts)?,
    };
    let bound = imbalance_bound(&fit.theta, &mask, lambda, norm);
    Ok(RegularizedFit {
        fit,
        lambda,
        norm,
        bound,
    })
}

/// Largest violation of the L1 optimality conditions.
fn kkt_l1(g: &DVector<f64>, theta: &DVector<f64>, lambda: f64, mask: &[bool]) -> f64 {
    let mut worst: f64 = 0.0;
    for k in 0..g.len() {
        let v = if !mask[k] {
            g[k].abs()
        } else if theta[k] != 0.0 {
            (g[k] - lambda * theta[k].signum()).abs()
        } else {
            (g[k].abs() - lambda).max(0.0)
        };
        worst = worst.max(v);
    }
    worst
}

fn soft_threshold(v: f64, a: f64) -> f64 {
    if v > a {
        v - a
    } else if v < -a {
        v + a
    } else {
        0.0
    }
}

/// Accelerated proximal gradient to locate the support, followed by Newton
/// on the support with the signs held fixed.
fn fit_l1(
    design: &Design,
    t: &[bool],
    rule: ScoringRule,
    lambda: f64,
    mask: &[bool],
    theta0: DVector<f64>,
    opts: &NewtonOptions,
) -> Result<PropensityFit> {
    let phi = &design.matrix;
    let m = phi.ncols();
    let zeros = vec![0.0; m];
    let no_mask = vec![false; m];
    let smooth = Penalty {
        ridge: 0.0,
        ridge_mask: &no_mask,
        linear: &zeros,
    };
    let l1 = |th: &DVector<f64>| -> f64 {
        th.iter().zip(mask).filter(|(_, &p)| p).map(|(v, _)| v.abs()).sum::<f64>() * lambda
    };
    let eval = |th: &DVector<f64>| {
        let (v, f) = glm::objective(phi, t, rule, &smooth, th);
        let (g, scale) = glm::gradient(phi, t, rule, &smooth, th, &f);
        (v, g, scale)
    };

    let mut theta = theta0;
    let mut last_kkt = f64::INFINITY;
    let mut iterations = 0;
    for _outer in 0..20 {
        // proximal phase
        let mut y = theta.clone();
        let mut momentum = 1.0f64;
        let mut step = 1.0f64;
        let (mut val_theta, _, _) = eval(&theta);
        for _ in 0..20_000 {
            iterations += 1;
            let (val_y, g_y, _) = eval(&y);
            let mut z;
            loop {
                z = DVector::from_iterator(
                    m,
                    (0..m).map(|k| {
                        let v = y[k] + step * g_y[k];
                        if mask[k] {
                            soft_threshold(v, step * lambda)
                        } else {
                            v
                        }
                    }),
                );
                let (val_z, _) = glm::objective(phi, t, rule, &smooth, &z);
                let d = &z - &y;
                if val_z.is_finite() && -val_z <= -val_y - g_y.dot(&d) + d.norm_squared() / (2.0 * step) + 1e-15 * val_y.abs() {
                    break;
                }
                step *= 0.5;
                if step < 1e-20 {
                    return Err(Error::NotConverged {
                        iterations,
                        grad_norm: last_kkt,
                    });
                }
            }
            let (val_z, g_z, scale) = eval(&z);
            let max_f = (phi * &z).amax();
            if max_f > opts.separation_f {
                return Err(Error::Separated {
                    iterations,
                    max_abs_f: max_f,
                });
            }
            if val_z - l1(&z) < val_theta - l1(&theta) {
                // restart momentum
                y = theta.clone();
                momentum = 1.0;
                continue;
            }
            let next_m = (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt()) / 2.0;
            y = &z + (&z - &theta) * ((momentum - 1.0) / next_m);
            momentum = next_m;
            theta = z;
            val_theta = val_z;
            step *= 1.25;
            last_kkt = kkt_l1(&g_z, &theta, lambda, mask);
            if last_kkt <= 1e-7 * scale.max(lambda) {
                break;
            }
        }

        // Newton polish on the current support with fixed signs
        let active: Vec<usize> = (0..m).filter(|&k| !mask[k] || theta[k] != 0.0).collect();
        let sub = design.select(&active);
        let linear: Vec<f64> = active.iter().map(|&k| if mask[k] { lambda * theta[k].signum() } else { 0.0 }).collect();
        let sub_mask = vec![false; active.len()];
        let pen = Penalty {
            ridge: 0.0,
            ridge_mask: &sub_mask,
            linear: &linear,
        };
        let start = DVector::from_iterator(active.len(), active.iter().map(|&k| theta[k]));
        let polished = match newton_ascent(&sub.matrix, t, rule, &pen, start, opts) {
            Ok(p) => p,
            Err(Error::Separated { .. }) | Err(Error::NotConverged { .. }) | Err(Error::SingularHessian) => continue,
            Err(e) => return Err(e),
        };
        let mut cand = DVector::zeros(m);
        let mut sign_ok = true;
        for (j, &k) in active.iter().enumerate() {
            cand[k] = polished.theta[j];
            if mask[k] && cand[k].signum() != theta[k].signum() {
                sign_ok = false;
                cand[k] = 0.0;
            }
        }
        let (val, g, scale) = eval(&cand);
        let kkt = kkt_l1(&g, &cand, lambda, mask);
        last_kkt = kkt;
        theta = cand;
        let tol = opts.tol_grad.max(1e-13) * scale.max(lambda);
        if sign_ok && kkt <= tol.max(polished.tol) {
            let f = phi * &theta;
            let objective = val - l1(&theta);
            let outcome = glm::NewtonOutcome {
                theta,
                f,
                objective,
                grad_norm: kkt,
                tol: tol.max(polished.tol),
                iterations: iterations + polished.iterations,
            };
            return Ok(build_fit(outcome, &design.names, rule, "l1", Some(lambda)));
        }
    }
    Err(Error::NotConverged {
        iterations,
        grad_norm: last_kkt,
    })
}

/// One point of a regularization path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathPoint {
    pub lambda: f64,
    pub fit: Option<RegularizedFit>,
    pub error: Option<String>,
    /// Aggregate imbalance bound on the averaged scale.
    pub max_bias: Option<f64>,
    /// Largest within-group coefficient of variation of the weights.
    pub cv: Option<f64>,
}

/// Fits along `lambdas` from largest to smallest with warm starts; the
/// result is in ascending order of lambda.
pub fn lambda_path(
    design: &Design,
    t: &[bool],
    rule: ScoringRule,
    norm: NormKind,
    lambdas: &[f64],
    opts: &NewtonOptions,
) -> Vec<PathPoint> {
    let mut grid = lambdas.to_vec();
    grid.sort_by(|a, b| b.total_cmp(a));
    let mut warm: Option<Vec<f64>> = None;
    let mut out = Vec::with_capacity(grid.len());
    for lambda in grid {
        match fit_penalized(design, t, rule, lambda, norm, opts, warm.as_deref()) {
            Ok(fit) => {
                warm = Some(fit.fit.theta.clone());
                let cv = fit.fit.weights(t).coefficient_of_variation();
                out.push(PathPoint {
                    lambda,
                    max_bias: Some(fit.bound.aggregate),
                    cv: Some(cv),
                    fit: Some(fit),
                    error: None,
                });
            }
            Err(e) => out.push(PathPoint {
                lambda,
                fit: None,
                error: Some(e.to_string()),
                max_bias: None,
                cv: None,
            }),
        }
    }
    out.reverse();
    out
}

/// Settings for choosing lambda by a target coefficient of variation of the
/// weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvSearch {
    pub target: f64,
    /// Stop once the achieved CV is within this distance below the target.
    pub tol: f64,
    pub max_iter: usize,
    pub lambda_lo: f64,
    pub lambda_hi: f64,
}

impl CvSearch {
    pub fn new(target: f64) -> Self {
        Self {
            target,
            tol: 0.01,
            max_iter: 40,
            lambda_lo: 1e-6,
            lambda_hi: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CvChoice<T> {
    pub lambda: f64,
    pub cv: f64,
    pub fit: T,
    pub evaluations: usize,
}

/// Smallest lambda (up to bisection on log lambda) whose fit has weight CV at
/// most `search.target`. Failed fits count as infinite CV.
pub fn search_lambda_for_cv<T>(
    search: &CvSearch,
    mut fit_at: impl FnMut(f64, Option<&T>) -> Result<(T, f64)>,
) -> Result<CvChoice<T>> {
    let mut evaluations = 0;
    let mut eval = |lambda: f64, warm: Option<&T>| {
        evaluations += 1;
        match fit_at(lambda, warm) {
            Ok((fit, cv)) if cv.is_finite() => Some((fit, cv)),
            Ok(_) => None,
            Err(_) => None,
        }
    };
    let mut hi = search.lambda_hi;
    let mut best = None;
    for _ in 0..12 {
        match eval(hi, None) {
            Some((fit, cv)) if cv <= search.target => {
                best = Some((hi, fit, cv));
                break;
            }
            _ => hi *= 10.0,
        }
    }
    let (mut hi, mut fit, mut cv) = best.ok_or_else(|| {
        Error::InvalidInput(format!("no lambda reaches weight CV <= {}", search.target))
    })?;
    let mut lo = search.lambda_lo.min(hi);
    if search.target - cv > search.tol {
        if let Some((f_lo, cv_lo)) = eval(lo, Some(&fit)) {
            if cv_lo <= search.target {
                hi = lo;
                fit = f_lo;
                cv = cv_lo;
            }
        }
    }
    if hi > lo {
        for _ in 0..search.max_iter {
            if search.target - cv <= search.tol || hi / lo < 1.0 + 1e-9 {
                break;
            }
            let mid = (lo * hi).sqrt();
            match eval(mid, Some(&fit)) {
                Some((f_mid, cv_mid)) if cv_mid <= search.target => {
                    hi = mid;
                    fit = f_mid;
                    cv = cv_mid;
                }
                _ => lo = mid,
            }
        }
    }
    Ok(CvChoice {
        lambda: hi,
        cv,
        fit,
        evaluations,
    })
}

/// Penalized fit with lambda chosen by [`search_lambda_for_cv`].
pub fn fit_until_cv(
    design: &Design,
    t: &[bool],
    rule: ScoringRule,
    norm: NormKind,
    search: &CvSearch,
    opts: &NewtonOptions,
) -> Result<CvChoice<RegularizedFit>> {
    check_problem(design, t)?;
    search_lambda_for_cv(search, |lambda, warm: Option<&RegularizedFit>| {
        let fit = fit_penalized(design, t, rule, lambda, norm, opts, warm.map(|w| w.fit.theta.as_slice()))?;
        let cv = fit.fit.weights(t).coefficient_of_variation();
        Ok((fit, cv))
    })
}

/// Averaged imbalance `(1/n) sum (2T-1) w phi_k` of a fit.
pub fn averaged_imbalance(fit: &PropensityFit, design: &DMatrix<f64>, t: &[bool]) -> Vec<f64> {
    let n = t.len() as f64;
    crate::balance::imbalance(design, &fit.weights(t), false)
        .into_iter()
        .map(|v| v / n)
        .collect()
}
