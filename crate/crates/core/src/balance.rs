//! Balancing weights, dual solvers and balance diagnostics.
//!
//! The dual solvers work directly on the calibration problems
//!
//! ```text
//! ATT:  min  sum_{T=0} w log w
//!       s.t. sum_{T=0} w phi = sum_{T=1} phi
//!
//! ATE:  min  sum_i (w_i - 1) log(w_i - 1) - w_i
//!       s.t. sum_{T=0} w phi = sum_{T=1} w phi,  w >= 1
//! ```
//!
//! by Newton's method on their Lagrange multipliers. They share no code with
//! the primal fitters in [`crate::glm`], so agreement between the two is a
//! genuine check.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Design;
use crate::error::{Error, Result};
use crate::scoring::{link_inv, weight, ScoringRule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub rule: ScoringRule,
    pub fitter: String,
    pub lambda: Option<f64>,
}

impl Provenance {
    pub fn new(rule: ScoringRule, fitter: impl Into<String>, lambda: Option<f64>) -> Self {
        Self {
            rule,
            fitter: fitter.into(),
            lambda,
        }
    }
}

/// Per-unit weights with a copy normalized to sum to one within each group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSet {
    pub t: Vec<bool>,
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
    pub provenance: Provenance,
}

impl WeightSet {
    /// Weights implied by a fitted linear predictor. This is the only place
    /// fitted propensities become weights.
    pub fn from_linear_predictor(f: &[f64], t: &[bool], provenance: Provenance) -> Self {
        let rule = provenance.rule;
        let raw = f
            .iter()
            .zip(t)
            .map(|(&fi, &ti)| weight(rule, link_inv(fi), ti))
            .collect();
        Self::build(raw, t.to_vec(), provenance)
    }

    pub fn from_raw(raw: Vec<f64>, t: &[bool], provenance: Provenance) -> Result<Self> {
        if raw.len() != t.len() {
            return Err(Error::InvalidInput("weight length mismatch".into()));
        }
        if raw.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidInput("weights must be finite and nonnegative".into()));
        }
        crate::data::check_groups(t)?;
        Ok(Self::build(raw, t.to_vec(), provenance))
    }

    fn build(raw: Vec<f64>, t: Vec<bool>, provenance: Provenance) -> Self {
        let (s1, s0) = group_sums(&raw, &t);
        let normalized = raw
            .iter()
            .zip(&t)
            .map(|(&w, &ti)| if ti { w / s1 } else { w / s0 })
            .collect();
        Self {
            t,
            raw,
            normalized,
            provenance,
        }
    }

    pub fn n(&self) -> usize {
        self.raw.len()
    }

    /// `(sum over treated, sum over control)` of the raw weights.
    pub fn group_sums(&self) -> (f64, f64) {
        group_sums(&self.raw, &self.t)
    }

    /// Largest within-group coefficient of variation (population SD over
    /// mean) of the raw weights.
    pub fn coefficient_of_variation(&self) -> f64 {
        [true, false]
            .iter()
            .map(|&g| {
                let ws: Vec<f64> = self
                    .raw
                    .iter()
                    .zip(&self.t)
                    .filter(|(_, &ti)| ti == g)
                    .map(|(&w, _)| w)
                    .collect();
                let m = ws.iter().sum::<f64>() / ws.len() as f64;
                let v = ws.iter().map(|w| (w - m).powi(2)).sum::<f64>() / ws.len() as f64;
                v.sqrt() / m
            })
            .fold(0.0, f64::max)
    }

    /// Factor converting an imbalance measured on the averaged scale
    /// `(1/n) sum (2T-1) w phi` into the group-normalized scale used by the
    /// effect estimators: `n / sum_{T=1} w`.
    pub fn normalization_factor(&self) -> f64 {
        self.n() as f64 / self.group_sums().0
    }

    /// Euclidean norm of the normalized weights.
    pub fn normalized_l2(&self) -> f64 {
        self.normalized.iter().map(|w| w * w).sum::<f64>().sqrt()
    }

    /// `sum_{T=1} w v - sum_{T=0} w v` for raw or normalized weights.
    pub fn weighted_difference(&self, v: &[f64], normalized: bool) -> f64 {
        let w = if normalized { &self.normalized } else { &self.raw };
        let mut treated = 0.0;
        let mut control = 0.0;
        for ((&wi, &vi), &ti) in w.iter().zip(v).zip(&self.t) {
            if ti {
                treated += wi * vi;
            } else {
                control += wi * vi;
            }
        }
        treated - control
    }
}

fn group_sums(raw: &[f64], t: &[bool]) -> (f64, f64) {
    let mut s1 = 0.0;
    let mut s0 = 0.0;
    for (&w, &ti) in raw.iter().zip(t) {
        if ti {
            s1 += w;
        } else {
            s0 += w;
        }
    }
    (s1, s0)
}

/// Per-column `sum_{T=1} w phi - sum_{T=0} w phi`.
pub fn imbalance(design: &DMatrix<f64>, ws: &WeightSet, normalized: bool) -> Vec<f64> {
    design
        .column_iter()
        .map(|c| ws.weighted_difference(c.as_slice(), normalized))
        .collect()
}

/// Standardized difference in percent: weighted mean difference (normalized
/// weights) over the pooled SD of the unweighted group variances.
pub fn std_diff(column: &[f64], name: &str, ws: &WeightSet) -> Result<f64> {
    let stats = |g: bool| {
        let v: Vec<f64> = column
            .iter()
            .zip(&ws.t)
            .filter(|(_, &ti)| ti == g)
            .map(|(&x, _)| x)
            .collect();
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let denom = (v.len() as f64 - 1.0).max(1.0);
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / denom
    };
    let pooled = ((stats(true) + stats(false)) / 2.0).sqrt();
    if !(pooled > 0.0) {
        return Err(Error::Degenerate(name.to_string()));
    }
    Ok(100.0 * ws.weighted_difference(column, true) / pooled)
}

/// Weighted two-sample Kolmogorov-Smirnov statistic using the normalized
/// weights of each group.
pub fn weighted_ks(column: &[f64], ws: &WeightSet) -> f64 {
    let mut idx: Vec<usize> = (0..column.len()).collect();
    idx.sort_by(|&a, &b| column[a].total_cmp(&column[b]));
    let mut f1 = 0.0;
    let mut f0 = 0.0;
    let mut best: f64 = 0.0;
    for (k, &i) in idx.iter().enumerate() {
        if ws.t[i] {
            f1 += ws.normalized[i];
        } else {
            f0 += ws.normalized[i];
        }
        let last_of_tie = idx.get(k + 1).map_or(true, |&j| column[j] != column[i]);
        if last_of_tie {
            best = best.max((f1 - f0).abs());
        }
    }
    best.min(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureBalance {
    pub name: String,
    pub std_diff: f64,
    pub ks: f64,
    /// Normalized-weight imbalance `sum_{T=1} w* phi - sum_{T=0} w* phi`.
    pub imbalance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub features: Vec<FeatureBalance>,
    pub max_abs_std_diff: f64,
    pub max_ks: f64,
    pub max_abs_imbalance: f64,
    pub dual_gap: Option<f64>,
}

/// Balance of every non-intercept column of `design` under `ws`.
pub fn balance_report(design: &Design, ws: &WeightSet) -> Result<BalanceReport> {
    let start = usize::from(design.intercept);
    let mut features = Vec::new();
    for j in start..design.ncols() {
        let col = design.matrix.column(j);
        let col = col.as_slice();
        features.push(FeatureBalance {
            name: design.names[j].clone(),
            std_diff: std_diff(col, &design.names[j], ws)?,
            ks: weighted_ks(col, ws),
            imbalance: ws.weighted_difference(col, true),
        });
    }
    let max_of = |f: fn(&FeatureBalance) -> f64| features.iter().map(f).fold(0.0, f64::max);
    Ok(BalanceReport {
        max_abs_std_diff: max_of(|b| b.std_diff.abs()),
        max_ks: max_of(|b| b.ks),
        max_abs_imbalance: max_of(|b| b.imbalance.abs()),
        features,
        dual_gap: None,
    })
}

/// Output of a dual solver.
#[derive(Debug, Clone)]
pub struct DualSolution {
    pub weights: WeightSet,
    pub multipliers: Vec<f64>,
    /// Calibration objective at the solution.
    pub objective: f64,
    pub iterations: usize,
    /// Sup-norm of the balance constraint violation (sum scale).
    pub constraint_violation: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct DualOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Multiplier exponents beyond this signal an infeasible problem.
    pub max_exponent: f64,
}

impl Default for DualOptions {
    fn default() -> Self {
        Self {
            tol: 1e-12,
            max_iter: 200,
            max_exponent: 30.0,
        }
    }
}

fn require_intercept(design: &DMatrix<f64>) -> Result<()> {
    if design.ncols() == 0 || design.column(0).iter().any(|&v| v != 1.0) {
        return Err(Error::InvalidInput(
            "dual solvers require an intercept in column 0".into(),
        ));
    }
    Ok(())
}

/// Convex dual function of a calibration problem in the multipliers `mu`.
trait DualFunction {
    /// Value, gradient and Hessian at `mu`, plus the largest exponent reached
    /// and the natural magnitude of the gradient terms.
    fn eval(&self, mu: &DVector<f64>) -> (f64, DVector<f64>, DMatrix<f64>, f64, f64);
    fn value(&self, mu: &DVector<f64>) -> f64;
}

fn minimize_dual(func: &impl DualFunction, m: usize, opts: &DualOptions) -> Result<(DVector<f64>, usize, f64)> {
    let mut mu = DVector::zeros(m);
    for iter in 0..opts.max_iter {
        let (val, grad, hess, max_exp, scale) = func.eval(&mu);
        if max_exp > opts.max_exponent || !val.is_finite() {
            return Err(Error::Infeasible);
        }
        let gnorm = grad.amax();
        if gnorm <= opts.tol * scale.max(1.0) {
            return Ok((mu, iter, gnorm));
        }
        let step = match hess.clone().cholesky() {
            Some(ch) => ch.solve(&grad),
            None => {
                let jittered = hess + DMatrix::identity(m, m) * 1e-10;
                jittered.cholesky().ok_or(Error::Infeasible)?.solve(&grad)
            }
        };
        let slope = grad.dot(&step);
        if 0.5 * slope <= 1e-13 * (1.0 + val.abs()) {
            let cand = &mu - &step;
            if func.value(&cand).is_finite() {
                mu = cand;
                continue;
            }
        }
        let mut s = 1.0;
        let mut accepted = false;
        while s > 1e-14 {
            let cand = &mu - &step * s;
            let v = func.value(&cand);
            if v.is_finite() && v <= val - 1e-4 * s * slope {
                mu = cand;
                accepted = true;
                break;
            }
            s *= 0.5;
        }
        if !accepted {
            // roundoff regime: take the full step if it shrinks the gradient
            let cand = &mu - &step;
            let (_, g2, _, _, _) = func.eval(&cand);
            if g2.amax() < gnorm {
                mu = cand;
            } else if gnorm <= 1e-8 * scale.max(1.0) {
                return Ok((mu, iter, gnorm));
            } else {
                return Err(Error::Infeasible);
            }
        }
    }
    Err(Error::Infeasible)
}

struct AttDual<'a> {
    controls: Vec<usize>,
    design: &'a DMatrix<f64>,
    target: DVector<f64>,
}

impl AttDual<'_> {
    fn exponents(&self, mu: &DVector<f64>) -> Vec<f64> {
        self.controls
            .iter()
            .map(|&i| self.design.row(i).transpose().dot(mu) - 1.0)
            .collect()
    }
}

impl DualFunction for AttDual<'_> {
    fn eval(&self, mu: &DVector<f64>) -> (f64, DVector<f64>, DMatrix<f64>, f64, f64) {
        let m = self.design.ncols();
        let mut grad = -self.target.clone();
        let mut hess = DMatrix::zeros(m, m);
        let mut val = -self.target.dot(mu);
        let mut max_exp: f64 = 0.0;
        let mut scale = self.target.amax();
        for (&i, a) in self.controls.iter().zip(self.exponents(mu)) {
            max_exp = max_exp.max(a.abs());
            let w = a.exp();
            val += w;
            let row = self.design.row(i).transpose();
            grad.axpy(w, &row, 1.0);
            hess.ger(w, &row, &row, 1.0);
            scale = scale.max(w * row.amax());
        }
        (val, grad, hess, max_exp, scale)
    }

    fn value(&self, mu: &DVector<f64>) -> f64 {
        self.exponents(mu).iter().map(|a| a.exp()).sum::<f64>() - self.target.dot(mu)
    }
}

/// Entropy-balancing weights for the ATT: treated weights are 1, control
/// weights minimize `sum w log w` subject to exact balance of every column.
pub fn solve_dual_att(design: &DMatrix<f64>, t: &[bool], opts: &DualOptions) -> Result<DualSolution> {
    require_intercept(design)?;
    crate::data::check_groups(t)?;
    let m = design.ncols();
    let mut target = DVector::zeros(m);
    for (i, _) in t.iter().enumerate().filter(|(_, &ti)| ti) {
        target += design.row(i).transpose();
    }
    let controls: Vec<usize> = (0..t.len()).filter(|&i| !t[i]).collect();
    let func = AttDual {
        controls,
        design,
        target,
    };
    let (mu, iterations, violation) = minimize_dual(&func, m, opts)?;
    let mut raw = vec![1.0; t.len()];
    for (&i, a) in func.controls.iter().zip(func.exponents(&mu)) {
        raw[i] = a.exp();
    }
    let objective = func
        .controls
        .iter()
        .map(|&i| raw[i] * raw[i].ln())
        .sum();
    let weights = WeightSet::from_raw(raw, t, Provenance::new(ScoringRule::ATT, "dual_att", None))?;
    Ok(DualSolution {
        weights,
        multipliers: mu.iter().copied().collect(),
        objective,
        iterations,
        constraint_violation: violation,
    })
}

struct AteDual<'a> {
    design: &'a DMatrix<f64>,
    sign: Vec<f64>,
}

impl AteDual<'_> {
    fn exponents(&self, mu: &DVector<f64>) -> DVector<f64> {
        let mut a = self.design * mu;
        for (ai, s) in a.iter_mut().zip(&self.sign) {
            *ai *= s;
        }
        a
    }
}

impl DualFunction for AteDual<'_> {
    fn eval(&self, mu: &DVector<f64>) -> (f64, DVector<f64>, DMatrix<f64>, f64, f64) {
        let m = self.design.ncols();
        let a = self.exponents(mu);
        let mut grad = DVector::zeros(m);
        let mut hess = DMatrix::zeros(m, m);
        let mut val = 0.0;
        let mut max_exp: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for (i, &ai) in a.iter().enumerate() {
            max_exp = max_exp.max(ai.abs());
            let e = ai.exp();
            val += e + ai;
            let row = self.design.row(i).transpose();
            grad.axpy(self.sign[i] * (e + 1.0), &row, 1.0);
            hess.ger(e, &row, &row, 1.0);
            scale = scale.max((e + 1.0) * row.amax());
        }
        (val, grad, hess, max_exp, scale)
    }

    fn value(&self, mu: &DVector<f64>) -> f64 {
        self.exponents(mu).iter().map(|&a| a.exp() + a).sum()
    }
}

/// Calibration weights for the ATE: every weight is at least 1 and the
/// weighted column sums of the two groups agree exactly.
pub fn solve_dual_ate(design: &DMatrix<f64>, t: &[bool], opts: &DualOptions) -> Result<DualSolution> {
    require_intercept(design)?;
    crate::data::check_groups(t)?;
    let sign = t.iter().map(|&ti| if ti { 1.0 } else { -1.0 }).collect();
    let func = AteDual { design, sign };
    let (mu, iterations, violation) = minimize_dual(&func, design.ncols(), opts)?;
    let raw: Vec<f64> = func.exponents(&mu).iter().map(|a| 1.0 + a.exp()).collect();
    let objective = raw.iter().map(|&w| (w - 1.0) * (w - 1.0).ln() - w).sum();
    let weights = WeightSet::from_raw(raw, t, Provenance::new(ScoringRule::ATE, "dual_ate", None))?;
    Ok(DualSolution {
        weights,
        multipliers: mu.iter().copied().collect(),
        objective,
        iterations,
        constraint_violation: violation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prov() -> Provenance {
        Provenance::new(ScoringRule::ATT, "test", None)
    }

    #[test]
    fn normalized_sums_to_one_per_group() {
        let t = vec![true, false, true, false, false];
        let ws = WeightSet::from_raw(vec![1.0, 2.0, 3.0, 0.5, 0.25], &t, prov()).unwrap();
        let s1: f64 = ws.normalized.iter().zip(&t).filter(|(_, &ti)| ti).map(|(w, _)| w).sum();
        let s0: f64 = ws.normalized.iter().zip(&t).filter(|(_, &ti)| !ti).map(|(w, _)| w).sum();
        assert!((s1 - 1.0).abs() < 1e-12 && (s0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn std_diff_definition() {
        // treated {0, 2} mean 1 var 2; control {-1, 1} mean 0 var 2 => pooled sd sqrt(2)
        let t = vec![true, true, false, false];
        let ws = WeightSet::from_raw(vec![1.0; 4], &t, prov()).unwrap();
        let d = std_diff(&[0.0, 2.0, -1.0, 1.0], "x", &ws).unwrap();
        assert!((d - 100.0 / 2f64.sqrt()).abs() < 1e-12);
        // means 1 vs 0 with unit pooled sd -> 100%
        let x = [1.0 - 0.5f64.sqrt(), 1.0 + 0.5f64.sqrt(), -(0.5f64.sqrt()), 0.5f64.sqrt()];
        let d = std_diff(&x, "x", &ws).unwrap();
        assert!((d - 100.0).abs() < 1e-12);
        let same = std_diff(&[1.0, 2.0, 2.0, 1.0], "x", &ws).unwrap();
        assert!(same.abs() < 1e-12);
        assert!(matches!(std_diff(&[3.0; 4], "z", &ws), Err(Error::Degenerate(n)) if n == "z"));
    }

    #[test]
    fn ks_extremes() {
        let t = vec![true, true, false, false];
        let ws = WeightSet::from_raw(vec![1.0; 4], &t, prov()).unwrap();
        assert_eq!(weighted_ks(&[1.0, 2.0, 1.0, 2.0], &ws), 0.0);
        assert_eq!(weighted_ks(&[1.0, 2.0, 3.0, 4.0], &ws), 1.0);
        assert_eq!(weighted_ks(&[5.0, 6.0, 3.0, 4.0], &ws), 1.0);
    }

    #[test]
    fn matched_groups_give_uniform_control_weights() {
        let x = [-1.0, 0.3, 2.0];
        let mut rows = Vec::new();
        let mut t = Vec::new();
        for &g in &[true, false] {
            for &v in &x {
                rows.extend_from_slice(&[1.0, v, v * v]);
                t.push(g);
            }
        }
        let design = DMatrix::from_row_slice(6, 3, &rows);
        let sol = solve_dual_att(&design, &t, &DualOptions::default()).unwrap();
        for (w, &ti) in sol.weights.raw.iter().zip(&t) {
            assert!((w - 1.0).abs() < 1e-10, "{w} (treated={ti})");
        }
        let ate = solve_dual_ate(&design, &t, &DualOptions::default()).unwrap();
        for w in &ate.weights.raw {
            assert!((w - 2.0).abs() < 1e-10);
        }
    }

    #[test]
    fn dual_requires_intercept() {
        let design = DMatrix::from_row_slice(2, 1, &[0.5, 2.0]);
        assert!(solve_dual_att(&design, &[true, false], &DualOptions::default()).is_err());
    }

    #[test]
    fn separated_design_is_infeasible() {
        let design = DMatrix::from_row_slice(4, 2, &[1.0, -1.0, 1.0, -1.0, 1.0, 1.0, 1.0, 1.0]);
        let t = [false, false, true, true];
        assert!(matches!(
            solve_dual_att(&design, &t, &DualOptions::default()),
            Err(Error::Infeasible)
        ));
        assert!(matches!(
            solve_dual_ate(&design, &t, &DualOptions::default()),
            Err(Error::Infeasible)
        ));
    }
}
