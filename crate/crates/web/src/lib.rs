//! Browser demo: three computations exposed to JavaScript, each returning a
//! JSON string for the page in `www/` to draw.

use cbsr::balance::weighted_ks;
use cbsr::boost::{fit_boost_with, intercept_only, BoostOptions};
use cbsr::glm::{forward_stepwise, NewtonOptions};
use cbsr::scoring::{link_inv, score_grad, score_hess, weight};
use cbsr::simulate::{gen_kang_schafer, kang_schafer_design};
use cbsr::{Provenance, ScoringRule, WeightSet};
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Serialize)]
pub struct Curves {
    pub f: Vec<f64>,
    pub grad_treated: Vec<f64>,
    pub grad_control: Vec<f64>,
    pub hess_treated: Vec<f64>,
    pub hess_control: Vec<f64>,
    pub weight_treated: Vec<f64>,
    pub weight_control: Vec<f64>,
    pub concave: bool,
}

#[derive(Serialize)]
pub struct StepwiseContrast {
    pub added_tailored: Vec<Option<String>>,
    pub tailored: Vec<f64>,
    pub added_bernoulli: Vec<Option<String>>,
    pub bernoulli: Vec<f64>,
    pub stopped: Vec<Option<String>>,
}

#[derive(Serialize)]
pub struct KsPath {
    /// Max weighted KS over the covariates, before any tree and after each.
    pub max_ks: Vec<f64>,
    pub capped: usize,
}

#[derive(Serialize)]
struct Failure {
    error: String,
}

fn to_json<T: Serialize>(r: Result<T, String>) -> String {
    match r {
        Ok(v) => serde_json::to_string(&v),
        Err(error) => serde_json::to_string(&Failure { error }),
    }
    .unwrap_or_else(|e| format!("{{\"error\":\"{e}\"}}"))
}

/// Score derivatives and implied weights on an even grid of the linear
/// predictor.
pub fn curves(alpha: f64, beta: f64, f_min: f64, f_max: f64, points: usize) -> Result<Curves, String> {
    let rule = ScoringRule::new(alpha, beta).map_err(|e| e.to_string())?;
    if !(f_min < f_max) || points < 2 || points > 10_000 {
        return Err("need f_min < f_max and 2..=10000 points".into());
    }
    let f: Vec<f64> = (0..points)
        .map(|i| f_min + (f_max - f_min) * i as f64 / (points - 1) as f64)
        .collect();
    let map = |g: &dyn Fn(f64) -> f64| f.iter().map(|&v| g(v)).collect::<Vec<_>>();
    Ok(Curves {
        grad_treated: map(&|v| score_grad(rule, v, true)),
        grad_control: map(&|v| score_grad(rule, v, false)),
        hess_treated: map(&|v| score_hess(rule, v, true)),
        hess_control: map(&|v| score_hess(rule, v, false)),
        weight_treated: map(&|v| weight(rule, link_inv(v), true)),
        weight_control: map(&|v| weight(rule, link_inv(v), false)),
        concave: rule.is_concave(),
        f,
    })
}

/// Forward stepwise on one Kang-Schafer sample under the tailored ATE rule
/// and the Bernoulli likelihood; balance is the largest absolute
/// standardized difference (percent) under inverse-probability ATE weights.
pub fn stepwise_contrast(seed: u64, n: usize, steps: usize) -> Result<StepwiseContrast, String> {
    let ks = gen_kang_schafer(n, seed).map_err(|e| e.to_string())?;
    let design = kang_schafer_design(&ks.data).map_err(|e| e.to_string())?;
    let opts = NewtonOptions::default();
    let run = |rule| forward_stepwise(&design, &ks.data.t, rule, steps.min(8), ScoringRule::ATE, &opts);
    let tailored = run(ScoringRule::ATE).map_err(|e| e.to_string())?;
    let bernoulli = run(ScoringRule::OWATE).map_err(|e| e.to_string())?;
    Ok(StepwiseContrast {
        added_tailored: tailored.steps.iter().map(|s| s.added.clone()).collect(),
        tailored: tailored.steps.iter().map(|s| s.max_abs_std_diff).collect(),
        added_bernoulli: bernoulli.steps.iter().map(|s| s.added.clone()).collect(),
        bernoulli: bernoulli.steps.iter().map(|s| s.max_abs_std_diff).collect(),
        stopped: vec![tailored.stopped, bernoulli.stopped],
    })
}

/// Boosting for the ATT on one Kang-Schafer sample, tracking covariate
/// balance after every tree.
pub fn boosting_ks(seed: u64, n: usize, trees: usize, nu: f64) -> Result<KsPath, String> {
    if trees > 2000 {
        return Err("at most 2000 trees".into());
    }
    let ks = gen_kang_schafer(n, seed).map_err(|e| e.to_string())?;
    let (x, t) = (&ks.data.x, &ks.data.t);
    let rule = ScoringRule::ATT;
    let max_ks = |f: &[f64]| {
        let ws = WeightSet::from_linear_predictor(f, t, Provenance::new(rule, "boost", None));
        x.column_iter().map(|c| weighted_ks(c.as_slice(), &ws)).fold(0.0, f64::max)
    };
    let f0 = intercept_only(t, rule).map_err(|e| e.to_string())?;
    let mut path = vec![max_ks(&vec![f0; t.len()])];
    let opts = BoostOptions {
        depth: 1,
        n_trees: trees,
        nu,
        cv_target: None,
    };
    let ens = fit_boost_with(x, t, rule, &opts, |_, f| path.push(max_ks(f))).map_err(|e| e.to_string())?;
    Ok(KsPath {
        max_ks: path,
        capped: ens.capped,
    })
}

#[wasm_bindgen]
pub fn score_curves_json(alpha: f64, beta: f64, f_min: f64, f_max: f64, points: usize) -> String {
    to_json(curves(alpha, beta, f_min, f_max, points))
}

#[wasm_bindgen]
pub fn stepwise_json(seed: u32, n: usize, steps: usize) -> String {
    to_json(stepwise_contrast(u64::from(seed), n, steps))
}

#[wasm_bindgen]
pub fn boosting_ks_json(seed: u32, n: usize, trees: usize, nu: f64) -> String {
    to_json(boosting_ks(u64::from(seed), n, trees, nu))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curves_have_requested_shape() {
        let c = curves(-1.0, -1.0, -4.0, 4.0, 41).unwrap();
        assert_eq!(c.f.len(), 41);
        assert!(c.concave);
        assert!(c.hess_treated.iter().chain(&c.hess_control).all(|&h| h <= 0.0));
        // ATE weights are 1/p and 1/(1-p); at f = 0 both equal 2
        assert!((c.weight_treated[20] - 2.0).abs() < 1e-12);
        assert!((c.weight_control[20] - 2.0).abs() < 1e-12);
        assert!(!curves(0.5, -1.0, -1.0, 1.0, 5).unwrap().concave);
    }

    #[test]
    fn bad_inputs_become_json_errors() {
        let s = score_curves_json(2.0, 0.0, -1.0, 1.0, 10);
        assert!(s.contains("\"error\""));
        let s = score_curves_json(0.0, 0.0, 1.0, -1.0, 10);
        assert!(s.contains("\"error\""));
        assert!(boosting_ks_json(1, 200, 5000, 0.1).contains("\"error\""));
    }

    #[test]
    fn stepwise_paths_start_at_intercept() {
        let s = stepwise_contrast(3, 200, 4).unwrap();
        assert_eq!(s.tailored.len(), s.added_tailored.len());
        assert!(s.added_tailored[0].is_none() && s.added_bernoulli[0].is_none());
        assert!(s.tailored.len() <= 5);
        assert!(s.tailored.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn boosting_path_has_one_entry_per_tree_plus_start() {
        let p = boosting_ks(4, 150, 25, 0.1).unwrap();
        assert_eq!(p.max_ks.len(), 26);
        assert!(p.max_ks.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let json = boosting_ks_json(4, 150, 25, 0.1);
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["max_ks"].as_array().unwrap().len(), 26);
    }
}
