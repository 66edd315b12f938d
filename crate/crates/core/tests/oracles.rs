//! Fitted quantities checked against independent computations: derivative-free
//! optimizers, first-order dual solvers, brute-force enumeration and Monte
//! Carlo.

mod common;

use cbsr::balance::{imbalance, solve_dual_ate, std_diff, weighted_ks, DualOptions};
use cbsr::boost::line_search;
use cbsr::data::Design;
use cbsr::estimators::{aipw_ate, aipw_att, ipw_estimate, OutcomeModel};
use cbsr::glm::{fit_mle_score, forward_stepwise, NewtonOptions};
use cbsr::inference::sigma_hat;
use cbsr::kernel::{Kernel, KernelProblem};
use cbsr::regularized::{fit_penalized, lambda_path, NormKind};
use cbsr::scoring::{mean_score, score_on_f};
use cbsr::simulate::{
    gen_gp_lowdim, gen_highdim, gen_kang_schafer, highdim_replicate, kang_schafer_design, replicate_seed,
    run_replications, GpSpec, HighDimSpec, Method, SimRng,
};
use cbsr::{Dataset, Provenance, ScoringRule, WeightSet};
use common::{feasible_instances, instance, nelder_mead, row, sup};
use nalgebra::{DMatrix, DVector};

fn linear_predictor(design: &Design, theta: &[f64]) -> Vec<f64> {
    (&design.matrix * DVector::from_column_slice(theta)).iter().copied().collect()
}

#[test]
fn glm_matches_nelder_mead() {
    for rule in [ScoringRule::ATT, ScoringRule::ATE, ScoringRule::OWATE] {
        for (design, t) in feasible_instances(3, 50, |_| 3, 0.6, 11, &[rule]) {
            let fit = fit_mle_score(&design, &t, rule, &NewtonOptions::default()).unwrap();
            let nm = nelder_mead(vec![0.0; 3], |th| -mean_score(rule, &linear_predictor(&design, th), &t), 0.5, 1e-10);
            for (a, b) in fit.theta.iter().zip(&nm) {
                assert!((a - b).abs() <= 1e-4, "{rule}: {:?} vs {nm:?}", fit.theta);
            }
        }
    }
}

#[test]
fn ridge_fit_matches_nelder_mead() {
    let lambda = 0.1;
    for (design, t) in feasible_instances(3, 30, |_| 4, 0.6, 12, &[]) {
        for rule in [ScoringRule::ATT, ScoringRule::ATE] {
            let fit = fit_penalized(&design, &t, rule, lambda, NormKind::L2, &NewtonOptions::default(), None).unwrap();
            let objective = |th: &[f64]| {
                let pen: f64 = th[1..].iter().map(|v| v * v).sum::<f64>() * lambda / 2.0;
                pen - mean_score(rule, &linear_predictor(&design, th), &t)
            };
            let nm = nelder_mead(vec![0.0; 4], objective, 0.5, 1e-10);
            for (a, b) in fit.fit.theta.iter().zip(&nm) {
                assert!((a - b).abs() <= 1e-4, "{rule}: {:?} vs {nm:?}", fit.fit.theta);
            }
        }
    }
}

#[test]
fn warm_path_equals_cold_fits() {
    let lambdas = [0.003, 0.01, 0.03, 0.1, 0.3];
    for (design, t) in feasible_instances(3, 120, |_| 5, 0.6, 13, &[]) {
        for norm in [NormKind::L1, NormKind::L2] {
            let path = lambda_path(&design, &t, ScoringRule::ATT, norm, &lambdas, &NewtonOptions::default());
            for point in path {
                let warm = point.fit.expect("path point fits");
                let cold = fit_penalized(&design, &t, ScoringRule::ATT, point.lambda, norm, &NewtonOptions::default(), None)
                    .unwrap();
                for (a, b) in warm.fit.theta.iter().zip(&cold.fit.theta) {
                    assert!((a - b).abs() <= 1e-8, "{norm:?} lambda {}: {a} vs {b}", point.lambda);
                }
            }
        }
    }
}

#[test]
fn lasso_imbalance_is_bounded_by_lambda() {
    for (design, t) in feasible_instances(5, 150, |k| 3 + k, 0.8, 14, &[]) {
        for lambda in [0.01, 0.05, 0.2] {
            let fit = fit_penalized(&design, &t, ScoringRule::ATT, lambda, NormKind::L1, &NewtonOptions::default(), None)
                .unwrap();
            let n = t.len() as f64;
            let imb: Vec<f64> = imbalance(&design.matrix, &fit.fit.weights(&t), false).iter().map(|v| v / n).collect();
            assert!(imb[0].abs() <= 1e-8);
            assert!(sup(&imb[1..]) <= lambda + 1e-8, "{imb:?}");
        }
    }
}

#[test]
fn stepwise_first_step_matches_independent_refits() {
    let ks = gen_kang_schafer(200, 5).unwrap();
    let design = kang_schafer_design(&ks.data).unwrap();
    let t = &ks.data.t;
    let opts = NewtonOptions::default();
    let path = forward_stepwise(&design, t, ScoringRule::ATE, 1, ScoringRule::ATE, &opts).unwrap();
    let mut best = (0, f64::NEG_INFINITY);
    for c in 1..design.ncols() {
        if let Ok(fit) = fit_mle_score(&design.select(&[0, c]), t, ScoringRule::ATE, &opts) {
            if fit.objective > best.1 {
                best = (c, fit.objective);
            }
        }
    }
    assert_eq!(path.steps[1].active, vec![0, best.0]);
    assert!((path.steps[1].objective - best.1).abs() <= 1e-12 * best.1.abs().max(1.0));
}

#[test]
fn stepwise_active_columns_are_exactly_balanced() {
    for seed in 0..4 {
        let ks = gen_kang_schafer(200, replicate_seed(31, seed)).unwrap();
        let design = kang_schafer_design(&ks.data).unwrap();
        let t = &ks.data.t;
        let path = forward_stepwise(&design, t, ScoringRule::ATE, 8, ScoringRule::ATE, &NewtonOptions::default()).unwrap();
        let last = path.last();
        let fit = fit_mle_score(&design.select(&last.active), t, ScoringRule::ATE, &NewtonOptions::default()).unwrap();
        let ws = fit.weights(t);
        for &j in &last.active[1..] {
            let d = std_diff(design.matrix.column(j).as_slice(), &design.names[j], &ws).unwrap();
            assert!(d.abs() <= 1e-6, "seed {seed}, {}: {d:e}", design.names[j]);
        }
    }
}

fn toy_x(n: usize, d: usize, seed: u64) -> (DMatrix<f64>, Vec<bool>) {
    let (design, t) = instance(n, d + 1, 0.8, seed);
    (design.matrix.columns(1, d).into_owned(), t)
}

#[test]
fn linear_kernel_reproduces_glm_weights() {
    let (x, t) = toy_x(80, 3, 15);
    let design = Design::from_matrix(x.clone().insert_column(0, 1.0));
    let glm = fit_mle_score(&design, &t, ScoringRule::ATT, &NewtonOptions::default()).unwrap();
    let prob = KernelProblem::new(&x, &t, Kernel::Linear).unwrap();
    let kfit = prob.fit(ScoringRule::ATT, 1e-5, None, &NewtonOptions::default()).unwrap();
    let (a, b) = (glm.weights(&t), kfit.weights(&t));
    for (u, v) in a.normalized.iter().zip(&b.normalized) {
        assert!((u - v).abs() <= 1e-4, "{u} vs {v}");
    }
}

/// `sum_C (w log w - w) + (1 / (2 n lambda)) u' K u` with `u = (1 on
/// treated, -w on control)`, minimized over `w > 0` with `sum_C w = n_1` by
/// exponentiated gradient.
fn rkhs_att_dual(k: &DMatrix<f64>, t: &[bool], lambda: f64) -> Vec<f64> {
    let n = t.len();
    let n1 = t.iter().filter(|&&b| b).count() as f64;
    let controls: Vec<usize> = (0..n).filter(|&i| !t[i]).collect();
    let c = 1.0 / (n as f64 * lambda);
    let u_of = |w: &[f64]| -> DVector<f64> {
        let mut u = DVector::from_element(n, 1.0);
        for (&i, &wi) in controls.iter().zip(w) {
            u[i] = -wi;
        }
        u
    };
    let value = |w: &[f64]| {
        let u = u_of(w);
        w.iter().map(|&v| v * v.ln() - v).sum::<f64>() + 0.5 * c * (u.transpose() * k * &u)[(0, 0)]
    };
    let mut w = vec![n1 / controls.len() as f64; controls.len()];
    let mut eta: f64 = 0.5;
    let mut fw = value(&w);
    for _ in 0..200_000 {
        let ku = k * u_of(&w);
        let g: Vec<f64> = controls.iter().zip(&w).map(|(&i, &wi)| wi.ln() - c * ku[i]).collect();
        // the gradient is defined up to a constant on the simplex
        let mean = g.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() / n1;
        if g.iter().zip(&w).map(|(gi, wi)| wi * (gi - mean).powi(2)).sum::<f64>() < 1e-26 {
            break;
        }
        loop {
            let mut cand: Vec<f64> = w.iter().zip(&g).map(|(wi, gi)| wi * (-eta * gi).exp()).collect();
            let s: f64 = cand.iter().sum();
            cand.iter_mut().for_each(|v| *v *= n1 / s);
            let fc = value(&cand);
            if fc <= fw {
                w = cand;
                fw = fc;
                eta = (eta * 1.5).min(10.0);
                break;
            }
            eta *= 0.5;
            if eta < 1e-14 {
                return w;
            }
        }
    }
    w
}

#[test]
fn rkhs_att_weights_match_dual_oracle() {
    for seed in 0..3 {
        let (x, t) = toy_x(20, 2, replicate_seed(16, seed));
        let lambda = 0.1;
        let prob = KernelProblem::new(&x, &t, Kernel::Gaussian { sigma: 0.5 }).unwrap();
        let fit = prob.fit(ScoringRule::ATT, lambda, None, &NewtonOptions::default()).unwrap();
        let oracle = rkhs_att_dual(&prob.gram, &t, lambda);
        let raw = fit.weights(&t).raw;
        let controls = (0..t.len()).filter(|&i| !t[i]);
        for (i, w) in controls.zip(&oracle) {
            assert!((raw[i] - w).abs() <= 1e-5, "seed {seed}, unit {i}: {} vs {w}", raw[i]);
        }
    }
}

#[test]
fn rkhs_bias_bound_certified_by_random_directions() {
    let (x, t) = toy_x(120, 3, 17);
    let prob = KernelProblem::new(&x, &t, Kernel::Laplace { sigma: 1.0 }).unwrap();
    let n = t.len();
    let mut rng = SimRng::new(171);
    let mut last_bound = 0.0;
    for lambda in [0.003, 0.01, 0.03, 0.1, 0.3] {
        for rule in [ScoringRule::ATT, ScoringRule::ATE] {
            let fit = prob.fit(rule, lambda, None, &NewtonOptions::default()).unwrap();
            let bound = fit.max_bias();
            if rule == ScoringRule::ATT {
                assert!(bound > last_bound, "bound must grow with lambda");
                last_bound = bound;
            }
            let ws = fit.weights(&t);
            for _ in 0..100 {
                let delta = rng.normal_vec(n);
                let g = &prob.gram * &delta;
                let norm = delta.dot(&g).sqrt();
                let g: Vec<f64> = g.iter().map(|v| v / norm).collect();
                let b = ws.weighted_difference(&g, false) / n as f64;
                assert!(b.abs() <= bound * (1.0 + 1e-9), "{rule} lambda {lambda}: {b} > {bound}");
            }
        }
    }
}

/// Golden-section search for the maximizer of a unimodal function on [a, b].
fn golden_max(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    while b - a > 1e-12 * (1.0 + b.abs()) {
        if f(c) > f(d) {
            b = d;
        } else {
            a = c;
        }
        c = b - r * (b - a);
        d = a + r * (b - a);
    }
    0.5 * (a + b)
}

#[test]
fn line_search_matches_golden_section() {
    let mut rng = SimRng::new(18);
    for rule in [ScoringRule::OWATE, ScoringRule::ATE, ScoringRule::ATT] {
        for _ in 0..10 {
            let n = 60;
            let f: Vec<f64> = (0..n).map(|_| 0.5 * rng.normal()).collect();
            let t: Vec<bool> = (0..n).map(|_| rng.bernoulli(0.5)).collect();
            let h: Vec<f64> = (0..n).map(|i| if t[i] == (rng.uniform() < 0.7) { 1.0 } else { -1.0 }).collect();
            let objective = |eta: f64| {
                (0..n).map(|i| score_on_f(rule, f[i] + eta * h[i], t[i])).sum::<f64>() / n as f64
            };
            let eta = line_search(&f, &h, &t, rule);
            let oracle = golden_max(objective, 0.0, 10.0);
            assert!((eta - oracle).abs() <= 1e-6, "{rule}: {eta} vs {oracle}");
        }
    }
}

#[test]
fn weighted_ks_matches_brute_force() {
    let mut rng = SimRng::new(19);
    for _ in 0..20 {
        let n = 40;
        // ties on a coarse grid
        let x: Vec<f64> = (0..n).map(|_| (rng.normal() * 3.0).round()).collect();
        let t: Vec<bool> = (0..n).map(|i| i % 3 == 0 || rng.bernoulli(0.3)).collect();
        let raw: Vec<f64> = (0..n).map(|_| 0.1 + rng.uniform()).collect();
        let ws = WeightSet::from_raw(raw.clone(), &t, Provenance::new(ScoringRule::ATT, "test", None)).unwrap();
        let cdf = |g: bool, c: f64| {
            let tot: f64 = (0..n).filter(|&i| t[i] == g).map(|i| raw[i]).sum();
            (0..n).filter(|&i| t[i] == g && x[i] <= c).map(|i| raw[i]).sum::<f64>() / tot
        };
        let brute = x.iter().map(|&c| (cdf(true, c) - cdf(false, c)).abs()).fold(0.0, f64::max);
        assert!((weighted_ks(&x, &ws) - brute).abs() <= 1e-12);
    }
}

#[test]
fn ate_dual_is_locally_optimal() {
    for (design, t) in feasible_instances(3, 80, |_| 4, 0.6, 20, &[ScoringRule::ATE]) {
        let sol = solve_dual_ate(&design.matrix, &t, &DualOptions::default()).unwrap();
        let w = &sol.weights.raw;
        let objective = |w: &[f64]| w.iter().map(|&v| (v - 1.0) * (v - 1.0).ln() - v).sum::<f64>();
        let base = objective(w);
        assert!((base - sol.objective).abs() <= 1e-9 * base.abs());
        // perturbations in the null space of the balance constraints
        let a = DMatrix::from_fn(design.ncols(), t.len(), |k, i| if t[i] { 1.0 } else { -1.0 } * design.matrix[(i, k)]);
        let proj = a.transpose() * (&a * a.transpose()).try_inverse().unwrap() * &a;
        let mut rng = SimRng::new(201);
        for _ in 0..10 {
            let z = rng.normal_vec(t.len());
            let delta = &z - &proj * &z;
            let room = w.iter().zip(delta.iter()).map(|(wi, di)| if *di < 0.0 { (wi - 1.0) / -di } else { f64::INFINITY });
            let s = 0.5 * room.fold(1e-2, f64::min);
            let moved: Vec<f64> = w.iter().zip(delta.iter()).map(|(wi, di)| wi + s * di).collect();
            assert!(sup((&a * DVector::from_column_slice(&moved)).as_slice()) <= 1e-8 * t.len() as f64);
            assert!(objective(&moved) >= base - 1e-10 * base.abs());
        }
    }
}

fn with_outcome(design: &Design, t: &[bool], y: Vec<f64>) -> Dataset {
    let x = design.matrix.columns(1, design.ncols() - 1).into_owned();
    Dataset::new(x, t.to_vec(), Some(y)).unwrap()
}

#[test]
fn sharp_null_in_balanced_span_estimates_zero() {
    for (design, t) in feasible_instances(5, 200, |_| 4, 0.6, 21, &[ScoringRule::ATT, ScoringRule::ATE]) {
        let beta = [0.7, -1.0, 2.0, 0.3];
        let y = linear_predictor(&design, &beta);
        let ds = with_outcome(&design, &t, y);
        for rule in [ScoringRule::ATT, ScoringRule::ATE] {
            let ws = fit_mle_score(&design, &t, rule, &NewtonOptions::default()).unwrap().weights(&t);
            assert!(ipw_estimate(&ds, &ws, true).unwrap().tau_hat.abs() <= 1e-8);
        }
    }
}

#[test]
fn aipw_matches_direct_formulas() {
    let mut rng = SimRng::new(22);
    for (design, t) in feasible_instances(5, 100, |_| 3, 0.6, 22, &[ScoringRule::ATE]) {
        let n = t.len();
        let y: Vec<f64> = (0..n).map(|i| row(&design.matrix, i)[1] + rng.normal()).collect();
        let ds = with_outcome(&design, &t, y.clone());
        let ws = fit_mle_score(&design, &t, ScoringRule::ATE, &NewtonOptions::default()).unwrap().weights(&t);
        let ctl: Vec<bool> = t.iter().map(|v| !v).collect();
        let g0 = OutcomeModel::fit(&design.matrix, &y, &ctl, 0.0).unwrap().predict(&design.matrix);
        let g1 = OutcomeModel::fit(&design.matrix, &y, &t, 0.0).unwrap().predict(&design.matrix);
        let w = &ws.normalized;
        let (mut att, mut ate) = (0.0, (0..n).map(|i| g1[i] - g0[i]).sum::<f64>() / n as f64);
        for i in 0..n {
            if t[i] {
                att += w[i] * (y[i] - g0[i]);
                ate += w[i] * (y[i] - g1[i]);
            } else {
                att -= w[i] * (y[i] - g0[i]);
                ate -= w[i] * (y[i] - g0[i]);
            }
        }
        assert!((aipw_att(&ds, &ws, &g0).unwrap().tau_hat - att).abs() <= 1e-12);
        assert!((aipw_ate(&ds, &ws, &g0, &g1).unwrap().tau_hat - ate).abs() <= 1e-12);
        // residualized IPW plus the treated-mean correction
        let resid: Vec<f64> = y.iter().zip(&g0).map(|(a, b)| a - b).collect();
        let resid_ds = with_outcome(&design, &t, resid);
        assert!((ipw_estimate(&resid_ds, &ws, true).unwrap().tau_hat - att).abs() <= 1e-12);
    }
}

#[test]
fn kang_schafer_mean_propensity_is_one_half() {
    let ks = gen_kang_schafer(100_000, 23).unwrap();
    let mean = ks.p.iter().sum::<f64>() / ks.p.len() as f64;
    assert!((mean - 0.5).abs() <= 0.01, "{mean}");
}

#[test]
fn highdim_adjacent_correlation_is_one_half() {
    let spec = HighDimSpec {
        n: 100_000,
        d: 2,
        rho: 1.0,
        s_t: 1,
        s_y: 1,
        sigma: 5.0,
    };
    let x = gen_highdim(&spec, 24).unwrap().data.x;
    let n = x.nrows() as f64;
    let (a, b) = (x.column(0), x.column(1));
    let (ma, mb) = (a.mean(), b.mean());
    let cov = a.iter().zip(b.iter()).map(|(u, v)| (u - ma) * (v - mb)).sum::<f64>() / n;
    let corr = cov / (a.variance() * b.variance()).sqrt();
    let se = (1.0 - 0.25) / n.sqrt();
    assert!((corr - 0.5).abs() <= 3.0 * se, "{corr}");
}

#[test]
fn gp_draws_have_the_kernel_covariance() {
    let kernel = Kernel::Gaussian { sigma: 0.3 };
    let spec = GpSpec::new(30, kernel, Kernel::polynomial(1));
    let mut diffs = Vec::new();
    for r in 0..500 {
        let sim = gen_gp_lowdim(&spec, replicate_seed(25, r)).unwrap();
        let x = &sim.data.x;
        let (a, b) = (row(x, 0), row(x, 1));
        diffs.push(sim.f[0] * sim.f[1] - kernel.eval(&a, &b));
        diffs.push(sim.f[0] * sim.f[0] - kernel.eval(&a, &a));
    }
    for k in 0..2 {
        let d: Vec<f64> = diffs.iter().skip(k).step_by(2).copied().collect();
        let m = d.iter().sum::<f64>() / d.len() as f64;
        let sd = (d.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (d.len() - 1) as f64).sqrt();
        assert!(m.abs() <= 3.0 * sd / (d.len() as f64).sqrt(), "entry {k}: mean diff {m}, sd {sd}");
    }
}

#[test]
fn sigma_hat_recovers_known_noise() {
    let spec = HighDimSpec {
        n: 1000,
        d: 20,
        rho: 1.0,
        s_t: 5,
        s_y: 5,
        sigma: 5.0,
    };
    let sim = gen_highdim(&spec, 26).unwrap();
    let y = sim.data.outcome().unwrap();
    let pooled = sigma_hat(y, &sim.data.t, None).unwrap();
    assert!((pooled - 5.0).abs() <= 0.75, "{pooled}");
    let perfect = sigma_hat(y, &sim.data.t, Some(&sim.g0)).unwrap();
    // sd of the estimate is about 5 / sqrt(2n)
    assert!((perfect - 5.0).abs() <= 4.0 * 5.0 / (2000f64).sqrt(), "{perfect}");
}

#[test]
fn oracle_weights_are_unbiased_and_honest_covers_more() {
    let spec = HighDimSpec {
        n: 400,
        d: 20,
        rho: 1.0,
        s_t: 5,
        s_y: 5,
        sigma: 5.0,
    };
    let oracle = run_replications("oracle", 60, 27, |s| highdim_replicate(&spec, &Method::Oracle, s, 0.95)).unwrap();
    assert_eq!(oracle.failures, 0);
    assert!(oracle.abs_bias <= 3.0 * oracle.rmse / 60f64.sqrt(), "{oracle:?}");
    let l2 = Method::Regularized {
        norm: NormKind::L2,
        cv_target: 1.0,
    };
    let cell = run_replications("l2", 30, 28, |s| highdim_replicate(&spec, &l2, s, 0.95)).unwrap();
    assert!(cell.coverage_honest >= cell.coverage_naive);
    assert!(cell.ci_ratio > 1.0);
}

#[test]
fn full_scale_ci_ratio_is_in_the_reported_band() {
    let spec = HighDimSpec::new(1.0, 100, 100);
    let l2 = Method::Regularized {
        norm: NormKind::L2,
        cv_target: 1.0,
    };
    let cell = run_replications("dense", 8, 29, |s| highdim_replicate(&spec, &l2, s, 0.95)).unwrap();
    assert!((2.0..=7.0).contains(&cell.ci_ratio), "{cell:?}");
}
