#![allow(dead_code)]

use cbsr::data::Design;
use cbsr::glm::{fit_mle_score, NewtonOptions};
use cbsr::scoring::{link_inv, ScoringRule};
use cbsr::simulate::{replicate_seed, SimRng};
use nalgebra::DMatrix;

/// Covariates `N(0, I)` with `m - 1` columns plus an intercept, and a
/// logistic treatment with coefficients `strength * (1, -1/2, 1/3, ...)`.
pub fn instance(n: usize, m: usize, strength: f64, seed: u64) -> (Design, Vec<bool>) {
    let mut rng = SimRng::new(seed);
    loop {
        let mut x = DMatrix::from_element(n, m, 1.0);
        let mut t = Vec::with_capacity(n);
        for i in 0..n {
            let mut lin = 0.0;
            for j in 1..m {
                let v = rng.normal();
                x[(i, j)] = v;
                let sign = if j % 2 == 1 { 1.0 } else { -1.0 };
                lin += strength * sign * v / j as f64;
            }
            t.push(rng.bernoulli(link_inv(lin)));
        }
        let n1 = t.iter().filter(|&&b| b).count();
        if n1 >= m + 2 && n - n1 >= m + 2 {
            return (Design::from_matrix(x), t);
        }
    }
}

/// The `k`-th instance (counting from 0) of a seeded stream for which every
/// rule in `rules` admits an unregularized fit.
pub fn feasible_instances(
    count: usize,
    n: usize,
    m_of: impl Fn(usize) -> usize,
    strength: f64,
    seed: u64,
    rules: &[ScoringRule],
) -> Vec<(Design, Vec<bool>)> {
    let mut out = Vec::with_capacity(count);
    let mut r = 0;
    while out.len() < count {
        let (d, t) = instance(n, m_of(out.len()), strength, replicate_seed(seed, r));
        r += 1;
        if rules.iter().all(|&rule| fit_mle_score(&d, &t, rule, &NewtonOptions::default()).is_ok()) {
            out.push((d, t));
        }
        assert!(r < 20 * count + 100, "too many infeasible draws");
    }
    out
}

pub const NAMED_RULES: [ScoringRule; 4] = [ScoringRule::ATE, ScoringRule::ATT, ScoringRule::ATC, ScoringRule::OWATE];

pub fn sup(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a: f64, b| a.max(b.abs()))
}

/// Minimizes a smooth convex function by gradient descent with
/// Barzilai-Borwein step lengths and an Armijo backtracking safeguard.
pub fn gradient_descent(
    x0: Vec<f64>,
    f: impl Fn(&[f64]) -> f64,
    grad: impl Fn(&[f64]) -> Vec<f64>,
    tol: f64,
    max_iter: usize,
) -> Vec<f64> {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut x = x0;
    let mut fx = f(&x);
    let mut g = grad(&x);
    let mut step = 1e-2;
    for _ in 0..max_iter {
        let gg = dot(&g, &g);
        if gg.sqrt() < tol {
            break;
        }
        let mut a = step;
        let (cand, fc) = loop {
            let cand: Vec<f64> = x.iter().zip(&g).map(|(xi, gi)| xi - a * gi).collect();
            let fc = f(&cand);
            if fc <= fx - 1e-4 * a * gg {
                break (cand, fc);
            }
            a *= 0.5;
            if a < 1e-300 {
                return x;
            }
        };
        let gc = grad(&cand);
        let s: Vec<f64> = cand.iter().zip(&x).map(|(p, q)| p - q).collect();
        let y: Vec<f64> = gc.iter().zip(&g).map(|(p, q)| p - q).collect();
        let sy = dot(&s, &y);
        step = if sy > 0.0 { (dot(&s, &s) / sy).clamp(1e-10, 1e10) } else { 2.0 * a };
        x = cand;
        fx = fc;
        g = gc;
    }
    x
}

/// Row `i` of a matrix as a vector.
pub fn row(d: &DMatrix<f64>, i: usize) -> Vec<f64> {
    d.row(i).iter().copied().collect()
}

/// Minimizes `f` by Nelder-Mead, restarting from the best vertex until a
/// restart no longer moves it.
pub fn nelder_mead(x0: Vec<f64>, f: impl Fn(&[f64]) -> f64, scale: f64, tol: f64) -> Vec<f64> {
    let m = x0.len();
    let mut best = x0;
    let mut size = scale;
    for _restart in 0..50 {
        let mut simplex: Vec<Vec<f64>> = vec![best.clone()];
        for k in 0..m {
            let mut v = best.clone();
            v[k] += size;
            simplex.push(v);
        }
        let mut vals: Vec<f64> = simplex.iter().map(|v| f(v)).collect();
        for _ in 0..20_000 {
            let mut order: Vec<usize> = (0..=m).collect();
            order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
            simplex = order.iter().map(|&i| simplex[i].clone()).collect();
            vals = order.iter().map(|&i| vals[i]).collect();
            let diam = simplex[1..]
                .iter()
                .map(|v| v.iter().zip(&simplex[0]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
                .fold(0.0, f64::max);
            if diam < tol {
                break;
            }
            let centroid: Vec<f64> = (0..m).map(|k| simplex[..m].iter().map(|v| v[k]).sum::<f64>() / m as f64).collect();
            let along = |c: f64| -> Vec<f64> { (0..m).map(|k| centroid[k] + c * (simplex[m][k] - centroid[k])).collect() };
            let xr = along(-1.0);
            let fr = f(&xr);
            if fr < vals[0] {
                let xe = along(-2.0);
                let fe = f(&xe);
                if fe < fr {
                    simplex[m] = xe;
                    vals[m] = fe;
                } else {
                    simplex[m] = xr;
                    vals[m] = fr;
                }
            } else if fr < vals[m - 1] {
                simplex[m] = xr;
                vals[m] = fr;
            } else {
                let xc = if fr < vals[m] { along(-0.5) } else { along(0.5) };
                let fc = f(&xc);
                if fc < vals[m].min(fr) {
                    simplex[m] = xc;
                    vals[m] = fc;
                } else {
                    for i in 1..=m {
                        simplex[i] = (0..m).map(|k| simplex[0][k] + 0.5 * (simplex[i][k] - simplex[0][k])).collect();
                        vals[i] = f(&simplex[i]);
                    }
                }
            }
        }
        let i = (0..=m).min_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap();
        let moved = simplex[i].iter().zip(&best).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        best = simplex[i].clone();
        if moved < tol {
            break;
        }
        size = (size * 0.5).max(100.0 * tol);
    }
    best
}
