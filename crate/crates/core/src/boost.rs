//! Gradient boosting of the mean score with shallow regression trees.
//!
//! Each iteration fits a least-squares tree to the per-unit score derivatives
//! `s_i`, which picks the most imbalanced piecewise-constant direction, then
//! steps along it by `nu` times the exact line-search optimum.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glm::{fit_mle_score, NewtonOptions};
use crate::scoring::{mean_score, score_grad, score_hess, ScoringRule};
use crate::{Design, Provenance, WeightSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "lowercase")]
pub enum Tree {
    Leaf {
        value: f64,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: Box<Tree>,
        right: Box<Tree>,
    },
}

impl Tree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        match self {
            Tree::Leaf { value } => *value,
            Tree::Split {
                feature,
                threshold,
                left,
                right,
            } => {
                if x[*feature] <= *threshold {
                    left.predict(x)
                } else {
                    right.predict(x)
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            Tree::Leaf { .. } => 0,
            Tree::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    /// `(feature, threshold)` of the root split, if any.
    pub fn root_split(&self) -> Option<(usize, f64)> {
        match self {
            Tree::Leaf { .. } => None,
            Tree::Split { feature, threshold, .. } => Some((*feature, *threshold)),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct SplitChoice {
    feature: usize,
    threshold: f64,
    gain: f64,
}

/// Best least-squares split of `target` over the rows `idx`. Thresholds are
/// midpoints between consecutive distinct values; ties go to the lower
/// feature, then the lower threshold.
fn best_split(x: &DMatrix<f64>, target: &[f64], idx: &[usize]) -> Option<SplitChoice> {
    let n = idx.len() as f64;
    let total: f64 = idx.iter().map(|&i| target[i]).sum();
    let base = total * total / n;
    let features: Vec<usize> = (0..x.ncols()).collect();
    let per_feature = crate::par_map(&features, |&j| {
        let mut order = idx.to_vec();
        order.sort_by(|&a, &b| x[(a, j)].total_cmp(&x[(b, j)]));
        let mut left = 0.0;
        let mut best: Option<SplitChoice> = None;
        for k in 0..order.len() - 1 {
            left += target[order[k]];
            let (a, b) = (x[(order[k], j)], x[(order[k + 1], j)]);
            if a == b {
                continue;
            }
            let nl = (k + 1) as f64;
            let right = total - left;
            let gain = left * left / nl + right * right / (n - nl) - base;
            if best.map_or(true, |s| gain > s.gain) {
                best = Some(SplitChoice {
                    feature: j,
                    threshold: 0.5 * (a + b),
                    gain,
                });
            }
        }
        best
    });
    per_feature
        .into_iter()
        .flatten()
        .fold(None, |acc: Option<SplitChoice>, s| match acc {
            Some(a) if a.gain >= s.gain => Some(a),
            _ => Some(s),
        })
        .filter(|s| s.gain > 0.0)
}

fn grow(x: &DMatrix<f64>, target: &[f64], idx: &[usize], depth: usize) -> Tree {
    let mean = idx.iter().map(|&i| target[i]).sum::<f64>() / idx.len() as f64;
    if depth == 0 || idx.len() < 2 {
        return Tree::Leaf { value: mean };
    }
    match best_split(x, target, idx) {
        None => Tree::Leaf { value: mean },
        Some(s) => {
            let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| x[(i, s.feature)] <= s.threshold);
            Tree::Split {
                feature: s.feature,
                threshold: s.threshold,
                left: Box::new(grow(x, target, &l, depth - 1)),
                right: Box::new(grow(x, target, &r, depth - 1)),
            }
        }
    }
}

/// Least-squares regression tree of depth at most `depth` fit to `target`.
pub fn fit_tree(x: &DMatrix<f64>, target: &[f64], depth: usize) -> Tree {
    let idx: Vec<usize> = (0..x.nrows()).collect();
    grow(x, target, &idx, depth)
}

/// Largest change `max_i |eta h_i|` a single line search may make.
pub const MAX_STEP_F: f64 = 10.0;

/// Maximizer of `mean S(f + eta h)` over `0 <= eta <= MAX_STEP_F / max |h|`,
/// found by safeguarded Newton iteration on the (decreasing) derivative. The
/// bound is reached only when the score grows without limit along `h`, as
/// happens for the ATT rule on a leaf holding treated units alone.
pub fn line_search(f: &[f64], h: &[f64], t: &[bool], rule: ScoringRule) -> f64 {
    let n = t.len() as f64;
    let deriv = |eta: f64| -> (f64, f64) {
        let mut d1 = 0.0;
        let mut d2 = 0.0;
        for i in 0..t.len() {
            let fi = f[i] + eta * h[i];
            d1 += score_grad(rule, fi, t[i]) * h[i];
            d2 += score_hess(rule, fi, t[i]) * h[i] * h[i];
        }
        (d1 / n, d2 / n)
    };
    const TOL: f64 = 1e-12;
    let h_max = h.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let (d0, _) = deriv(0.0);
    if d0 <= TOL || h_max == 0.0 {
        return 0.0;
    }
    let eta_max = MAX_STEP_F / h_max;
    if deriv(eta_max).0 >= 0.0 {
        return eta_max;
    }
    let mut lo = 0.0;
    let mut hi = 1.0;
    loop {
        let (d, _) = deriv(hi);
        if d < 0.0 {
            break;
        }
        if d <= TOL {
            return hi;
        }
        lo = hi;
        hi = (2.0 * hi).min(eta_max);
    }
    let mut eta = 0.5 * (lo + hi);
    for _ in 0..200 {
        let (d1, d2) = deriv(eta);
        if d1.abs() <= TOL {
            break;
        }
        if d1 > 0.0 {
            lo = eta;
        } else {
            hi = eta;
        }
        let newton = if d2 < 0.0 { eta - d1 / d2 } else { f64::NAN };
        eta = if newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    eta
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoostOptions {
    pub depth: usize,
    pub n_trees: usize,
    pub nu: f64,
    /// Stop before the first update that pushes the weight CV above this.
    pub cv_target: Option<f64>,
}

impl Default for BoostOptions {
    fn default() -> Self {
        Self {
            depth: 1,
            n_trees: 100,
            nu: 0.1,
            cv_target: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeEnsemble {
    pub f0: f64,
    pub nu: f64,
    pub depth: usize,
    pub rule: ScoringRule,
    pub trees: Vec<Tree>,
    /// Line-search step of each tree; the applied step is `nu * eta`.
    pub steps: Vec<f64>,
    /// Mean score before any tree and after each applied tree.
    pub objective_path: Vec<f64>,
    /// Iterations skipped because no useful direction was found.
    pub skipped: usize,
    /// Applied steps whose line search stopped at the step bound, meaning
    /// the score grows without limit along that tree.
    pub capped: usize,
    pub stopped_early: bool,
    pub fitted_f: Vec<f64>,
}

impl TreeEnsemble {
    pub fn predict_f(&self, x: &DMatrix<f64>) -> Vec<f64> {
        x.row_iter()
            .map(|r| {
                let row: Vec<f64> = r.iter().copied().collect();
                self.f0
                    + self
                        .trees
                        .iter()
                        .zip(&self.steps)
                        .map(|(tr, eta)| self.nu * eta * tr.predict(&row))
                        .sum::<f64>()
            })
            .collect()
    }

    pub fn weights(&self, t: &[bool]) -> WeightSet {
        WeightSet::from_linear_predictor(&self.fitted_f, t, Provenance::new(self.rule, "boost", None))
    }
}

/// Intercept-only fit: the starting constant for boosting.
pub fn intercept_only(t: &[bool], rule: ScoringRule) -> Result<f64> {
    let design = Design::from_matrix(DMatrix::from_element(t.len(), 1, 1.0));
    Ok(fit_mle_score(&design, t, rule, &NewtonOptions::default())?.theta[0])
}

/// Boosted propensity model on the raw covariates `x`. `on_iter` is called
/// after every iteration with the current linear predictor.
pub fn fit_boost_with(
    x: &DMatrix<f64>,
    t: &[bool],
    rule: ScoringRule,
    opts: &BoostOptions,
    mut on_iter: impl FnMut(usize, &[f64]),
) -> Result<TreeEnsemble> {
    if !(1..=3).contains(&opts.depth) {
        return Err(Error::InvalidInput(format!("tree depth must be 1, 2 or 3, got {}", opts.depth)));
    }
    if !(opts.nu > 0.0 && opts.nu <= 1.0) {
        return Err(Error::InvalidInput(format!("shrinkage must lie in (0, 1], got {}", opts.nu)));
    }
    if x.nrows() != t.len() {
        return Err(Error::InvalidInput("covariate and treatment lengths differ".into()));
    }
    crate::data::check_groups(t)?;
    rule.require_concave()?;
    let f0 = intercept_only(t, rule)?;
    let n = t.len();
    let mut f = vec![f0; n];
    let mut objective = mean_score(rule, &f, t);
    let mut ens = TreeEnsemble {
        f0,
        nu: opts.nu,
        depth: opts.depth,
        rule,
        trees: Vec::new(),
        steps: Vec::new(),
        objective_path: vec![objective],
        skipped: 0,
        capped: 0,
        stopped_early: false,
        fitted_f: Vec::new(),
    };
    for m in 0..opts.n_trees {
        let s: Vec<f64> = f.iter().zip(t).map(|(&fi, &ti)| score_grad(rule, fi, ti)).collect();
        let tree = fit_tree(x, &s, opts.depth);
        if tree.depth() == 0 {
            ens.skipped += 1;
            on_iter(m, &f);
            continue;
        }
        let h: Vec<f64> = x
            .row_iter()
            .map(|r| tree.predict(r.iter().copied().collect::<Vec<_>>().as_slice()))
            .collect();
        let eta = line_search(&f, &h, t, rule);
        let cand: Vec<f64> = f.iter().zip(&h).map(|(fi, hi)| fi + opts.nu * eta * hi).collect();
        let cand_obj = mean_score(rule, &cand, t);
        if eta == 0.0 || !(cand_obj >= objective) {
            ens.skipped += 1;
            on_iter(m, &f);
            continue;
        }
        if let Some(target) = opts.cv_target {
            let cv = WeightSet::from_linear_predictor(&cand, t, Provenance::new(rule, "boost", None)).coefficient_of_variation();
            if cv > target {
                ens.stopped_early = true;
                break;
            }
        }
        let h_max = h.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if eta * h_max >= MAX_STEP_F * (1.0 - 1e-12) {
            ens.capped += 1;
        }
        f = cand;
        objective = cand_obj;
        ens.trees.push(tree);
        ens.steps.push(eta);
        ens.objective_path.push(objective);
        on_iter(m, &f);
    }
    ens.fitted_f = f;
    Ok(ens)
}

pub fn fit_boost(x: &DMatrix<f64>, t: &[bool], rule: ScoringRule, opts: &BoostOptions) -> Result<TreeEnsemble> {
    fit_boost_with(x, t, rule, opts, |_, _| {})
}

/// Per-unit score derivatives at `f`: the imbalance direction a tree fits.
pub fn gradient_at(f: &[f64], t: &[bool], rule: ScoringRule) -> DVector<f64> {
    DVector::from_iterator(f.len(), f.iter().zip(t).map(|(&fi, &ti)| score_grad(rule, fi, ti)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> (DMatrix<f64>, Vec<bool>) {
        let x = DMatrix::from_row_slice(
            10,
            2,
            &[
                -1.0, 0.2, -0.5, -0.7, 0.1, 0.4, 0.8, -0.1, 1.2, 0.9, -0.3, 1.1, 0.5, -1.2, 1.6, 0.3, -1.4, 0.0, 0.2, 0.6,
            ],
        );
        (x, vec![false, false, true, true, true, false, false, true, false, true])
    }

    #[test]
    fn zero_trees_is_intercept_fit() {
        let (x, t) = toy();
        let opts = BoostOptions {
            n_trees: 0,
            ..Default::default()
        };
        let ens = fit_boost(&x, &t, ScoringRule::ATE, &opts).unwrap();
        assert!((link_share(ens.f0) - 0.5).abs() < 1e-12);
    }

    fn link_share(f: f64) -> f64 {
        crate::scoring::link_inv(f)
    }

    #[test]
    fn objective_never_decreases() {
        let (x, t) = toy();
        for depth in 1..=3 {
            let opts = BoostOptions {
                depth,
                n_trees: 30,
                nu: 0.5,
                cv_target: None,
            };
            let ens = fit_boost(&x, &t, ScoringRule::ATT, &opts).unwrap();
            assert!(ens.objective_path.windows(2).all(|w| w[1] >= w[0]));
            assert!(ens.trees.iter().all(|tr| tr.depth() <= depth));
            let pred = ens.predict_f(&x);
            for (a, b) in pred.iter().zip(&ens.fitted_f) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn line_search_scaling() {
        let (x, t) = toy();
        let f = vec![0.1; 10];
        let g = gradient_at(&f, &t, ScoringRule::OWATE);
        let mut h: Vec<f64> = x.column(0).iter().copied().collect();
        if g.iter().zip(&h).map(|(a, b)| a * b).sum::<f64>() < 0.0 {
            h.iter_mut().for_each(|v| *v = -*v);
        }
        let h2: Vec<f64> = h.iter().map(|v| 2.0 * v).collect();
        let a = line_search(&f, &h, &t, ScoringRule::OWATE);
        let b = line_search(&f, &h2, &t, ScoringRule::OWATE);
        assert!(a > 0.0);
        assert!((a - 2.0 * b).abs() < 1e-6);
    }

    #[test]
    fn constant_features_skip() {
        let x = DMatrix::from_element(6, 1, 3.0);
        let t = vec![true, false, true, false, true, false];
        let ens = fit_boost(&x, &t, ScoringRule::ATE, &BoostOptions::default()).unwrap();
        assert_eq!(ens.trees.len(), 0);
        assert_eq!(ens.skipped, 100);
    }
}
