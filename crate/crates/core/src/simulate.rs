//! Seeded data generators and a Monte Carlo replication runner.
//!
//! Randomness comes from ChaCha20 (`rand_chacha`) seeded with a `u64`.
//! Uniforms take the top 53 bits of each output, offset by half a unit so
//! they lie strictly inside (0, 1); Gaussians are obtained by inversion
//! through [`normal_quantile`]. Replicate `r` of a study seeded with `s` uses
//! the seed [`replicate_seed`]`(s, r)`.

use nalgebra::{DMatrix, DVector};
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::balance::{Provenance, WeightSet};
use crate::data::{check_groups, standardize_columns, Dataset, Design};
use crate::error::{Error, Result};
use crate::estimators::bias_decompose;
use crate::glm::NewtonOptions;
use crate::inference::{honest_ci, naive_ci, normal_quantile, sigma_hat, NormClMode};
use crate::kernel::{gram, jitter, Kernel, KernelProblem};
use crate::regularized::{fit_until_cv, CvSearch, NormKind};
use crate::scoring::{link, link_inv, ScoringRule};

pub struct SimRng(ChaCha20Rng);

impl SimRng {
    pub fn new(seed: u64) -> Self {
        Self(ChaCha20Rng::seed_from_u64(seed))
    }

    /// Uniform on the open interval (0, 1).
    pub fn uniform(&mut self) -> f64 {
        ((self.0.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    pub fn normal(&mut self) -> f64 {
        normal_quantile(self.uniform())
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Uniform integer in `0..k`.
    pub fn below(&mut self, k: usize) -> usize {
        ((self.uniform() * k as f64) as usize).min(k - 1)
    }

    pub fn normal_vec(&mut self, n: usize) -> DVector<f64> {
        DVector::from_iterator(n, (0..n).map(|_| self.normal()))
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of replicate `r` in a study seeded with `seed`.
pub fn replicate_seed(seed: u64, r: usize) -> u64 {
    splitmix64(splitmix64(seed) ^ (r as u64).wrapping_mul(0xD1B5_4A32_D192_ED03))
}

/// The latent-variable design with nonlinearly transformed observed
/// covariates.
#[derive(Debug, Clone)]
pub struct KangSchafer {
    pub data: Dataset,
    pub z: DMatrix<f64>,
    pub p: Vec<f64>,
}

/// Observed covariates for one latent row.
pub fn kang_schafer_transform(z: [f64; 4]) -> [f64; 4] {
    [
        (z[0] / 2.0).exp(),
        z[1] / (1.0 + z[0].exp()) + 10.0,
        (z[0] * z[2] / 25.0 + 0.6).powi(3),
        (z[1] + z[3] + 20.0).powi(2),
    ]
}

pub fn kang_schafer_propensity(z: [f64; 4]) -> f64 {
    link_inv(-z[0] + 0.5 * z[1] - 0.25 * z[2] - 0.1 * z[3])
}

/// Per row: four latent normals, then one uniform for the treatment.
pub fn gen_kang_schafer(n: usize, seed: u64) -> Result<KangSchafer> {
    if n < 10 {
        return Err(Error::InvalidInput(format!("n must be at least 10, got {n}")));
    }
    let mut rng = SimRng::new(seed);
    let mut z = DMatrix::zeros(n, 4);
    let mut x = DMatrix::zeros(n, 4);
    let mut p = Vec::with_capacity(n);
    let mut t = Vec::with_capacity(n);
    for i in 0..n {
        let zi = [rng.normal(), rng.normal(), rng.normal(), rng.normal()];
        let xi = kang_schafer_transform(zi);
        for j in 0..4 {
            z[(i, j)] = zi[j];
            x[(i, j)] = xi[j];
        }
        let pi = kang_schafer_propensity(zi);
        p.push(pi);
        t.push(rng.bernoulli(pi));
    }
    let names = (1..=4).map(|j| format!("X{j}")).collect();
    let data = Dataset::with_names(x, t, None, names)?;
    Ok(KangSchafer { data, z, p })
}

/// Intercept, `X1..X4` and their squares, each non-intercept column
/// standardized.
pub fn kang_schafer_design(data: &Dataset) -> Result<Design> {
    let n = data.n();
    let d = data.d();
    let mut m = DMatrix::from_element(n, 1 + 2 * d, 1.0);
    let mut names = vec!["(intercept)".to_string()];
    for j in 0..d {
        names.push(data.names[j].clone());
    }
    for j in 0..d {
        names.push(format!("{}^2", data.names[j]));
    }
    for i in 0..n {
        for j in 0..d {
            let v = data.x[(i, j)];
            m[(i, 1 + j)] = v;
            m[(i, 1 + d + j)] = v * v;
        }
    }
    standardize_columns(&mut m, 1, &names)?;
    Ok(Design {
        matrix: m,
        names,
        intercept: true,
    })
}

fn chol_factor(kernel: Kernel, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut k = gram(kernel, x);
    jitter(&mut k);
    if let Some(ch) = k.clone().cholesky() {
        return Ok(ch.l());
    }
    let extra = 1e-5 * k.diagonal().mean().abs().max(1.0);
    for i in 0..k.nrows() {
        k[(i, i)] += extra;
    }
    k.cholesky()
        .map(|ch| ch.l())
        .ok_or_else(|| Error::InvalidInput(format!("cannot factor the {} Gram matrix", kernel.label())))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpSpec {
    pub n: usize,
    pub d: usize,
    pub kernel_f: Kernel,
    pub kernel_g: Kernel,
    pub sigma_noise: f64,
    /// Multiplier on the outcome surface draw.
    pub g_scale: f64,
}

impl GpSpec {
    pub fn new(n: usize, kernel_f: Kernel, kernel_g: Kernel) -> Self {
        Self {
            n,
            d: 5,
            kernel_f,
            kernel_g,
            sigma_noise: 1.0,
            g_scale: 1.0,
        }
    }
}

/// Gaussian-process propensity and outcome surfaces under the sharp null.
#[derive(Debug, Clone)]
pub struct GpData {
    pub data: Dataset,
    pub f: Vec<f64>,
    pub p: Vec<f64>,
    pub g0: Vec<f64>,
    /// RKHS norm of the interpolating outcome surface.
    pub g0_norm: f64,
}

/// Draws `X ~ N(0, I_d)`, then `f` and `g0` at the sample points as `L z`
/// with `L` the Cholesky factor of the jittered Gram matrix, `T ~ Bern(expit f)`
/// and `Y = g0 + sigma eps`.
pub fn gen_gp_lowdim(spec: &GpSpec, seed: u64) -> Result<GpData> {
    let mut rng = SimRng::new(seed);
    let mut x = DMatrix::zeros(spec.n, spec.d);
    for i in 0..spec.n {
        for j in 0..spec.d {
            x[(i, j)] = rng.normal();
        }
    }
    let lf = chol_factor(spec.kernel_f, &x)?;
    let f: Vec<f64> = (&lf * rng.normal_vec(spec.n)).iter().copied().collect();
    let p: Vec<f64> = f.iter().map(|&v| link_inv(v)).collect();
    let t: Vec<bool> = p.iter().map(|&pi| rng.bernoulli(pi)).collect();
    let lg = chol_factor(spec.kernel_g, &x)?;
    let zg = rng.normal_vec(spec.n) * spec.g_scale;
    let g0: Vec<f64> = (&lg * &zg).iter().copied().collect();
    let y: Vec<f64> = g0.iter().map(|g| g + spec.sigma_noise * rng.normal()).collect();
    check_groups(&t)?;
    Ok(GpData {
        data: Dataset::new(x, t, Some(y))?,
        f,
        p,
        g0,
        g0_norm: zg.norm(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HighDimSpec {
    pub n: usize,
    pub d: usize,
    pub rho: f64,
    pub s_t: usize,
    pub s_y: usize,
    pub sigma: f64,
}

impl HighDimSpec {
    pub fn new(rho: f64, s_t: usize, s_y: usize) -> Self {
        Self {
            n: 1000,
            d: 100,
            rho,
            s_t,
            s_y,
            sigma: 5.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct HighDimData {
    pub data: Dataset,
    pub p: Vec<f64>,
    pub theta: Vec<f64>,
    pub beta: Vec<f64>,
    pub g0: Vec<f64>,
}

/// AR(1) covariates with correlation `0.5^|i-j|`, `logit p = rho X theta`,
/// `Y = X beta + sigma eps` and no treatment effect.
pub fn gen_highdim(spec: &HighDimSpec, seed: u64) -> Result<HighDimData> {
    let HighDimSpec { n, d, rho, s_t, s_y, sigma } = *spec;
    if s_t == 0 || s_y == 0 || s_t > d || s_y > d {
        return Err(Error::InvalidInput(format!("sparsities must lie in 1..={d}")));
    }
    let coef = |s: usize| -> Vec<f64> { (0..d).map(|j| if j < s { 1.0 / (s as f64).sqrt() } else { 0.0 }).collect() };
    let theta = coef(s_t);
    let beta = coef(s_y);
    let mut rng = SimRng::new(seed);
    let mut x = DMatrix::zeros(n, d);
    let c = (1.0f64 - 0.25).sqrt();
    for i in 0..n {
        let mut prev = rng.normal();
        x[(i, 0)] = prev;
        for j in 1..d {
            prev = 0.5 * prev + c * rng.normal();
            x[(i, j)] = prev;
        }
    }
    let lin = &x * DVector::from_column_slice(&theta);
    let p: Vec<f64> = lin.iter().map(|&v| link_inv(rho * v)).collect();
    let t: Vec<bool> = p.iter().map(|&pi| rng.bernoulli(pi)).collect();
    let g0: Vec<f64> = (&x * DVector::from_column_slice(&beta)).iter().copied().collect();
    let y: Vec<f64> = g0.iter().map(|g| g + sigma * rng.normal()).collect();
    check_groups(&t)?;
    Ok(HighDimData {
        data: Dataset::new(x, t, Some(y))?,
        p,
        theta,
        beta,
        g0,
    })
}

/// Results of one replicate for one method.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplicateOutcome {
    pub tau_hat: f64,
    pub tau_star: f64,
    /// Conditional bias `sum_{T=1} w g0 - sum_{T=0} w g0`.
    pub bias: f64,
    /// Worst-case bias bound `bias_factor * norm_cl`.
    pub max_bias: f64,
    pub naive_covers: bool,
    pub honest_covers: bool,
    pub naive_half_width: f64,
    pub honest_half_width: f64,
    pub lambda: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    pub label: String,
    pub replicates: usize,
    pub failures: usize,
    /// More than 10% of replicates failed.
    pub flagged: bool,
    pub rmse: f64,
    /// `|mean(tau_hat - tau_star)|`.
    pub abs_bias: f64,
    /// Mean of the absolute conditional bias.
    pub mean_abs_cond_bias: f64,
    pub mean_max_bias: f64,
    pub coverage_naive: f64,
    pub coverage_honest: f64,
    /// Mean ratio of honest to naive interval width.
    pub ci_ratio: f64,
    pub errors: Vec<String>,
}

/// Aggregates replicate outcomes in replicate order.
pub fn summarize(label: &str, results: &[Result<ReplicateOutcome>]) -> CellMetrics {
    let ok: Vec<&ReplicateOutcome> = results.iter().filter_map(|r| r.as_ref().ok()).collect();
    let errors: Vec<String> = results.iter().filter_map(|r| r.as_ref().err().map(|e| e.to_string())).collect();
    let m = ok.len() as f64;
    let mean = |f: &dyn Fn(&ReplicateOutcome) -> f64| ok.iter().map(|o| f(o)).sum::<f64>() / m;
    CellMetrics {
        label: label.to_string(),
        replicates: results.len(),
        failures: errors.len(),
        flagged: errors.len() * 10 > results.len(),
        rmse: mean(&|o| (o.tau_hat - o.tau_star).powi(2)).sqrt(),
        abs_bias: mean(&|o| o.tau_hat - o.tau_star).abs(),
        mean_abs_cond_bias: mean(&|o| o.bias.abs()),
        mean_max_bias: mean(&|o| o.max_bias),
        coverage_naive: mean(&|o| f64::from(u8::from(o.naive_covers))),
        coverage_honest: mean(&|o| f64::from(u8::from(o.honest_covers))),
        ci_ratio: mean(&|o| o.honest_half_width / o.naive_half_width),
        errors,
    }
}

/// Runs `replicate` on the seeds `replicate_seed(seed, 0..r)` (concurrently
/// when enabled) and summarizes in replicate order.
pub fn run_replications<F>(label: &str, r: usize, seed: u64, replicate: F) -> Result<CellMetrics>
where
    F: Fn(u64) -> Result<ReplicateOutcome> + Sync + Send,
{
    if r < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 replicates, got {r}")));
    }
    let seeds: Vec<u64> = (0..r).map(|i| replicate_seed(seed, i)).collect();
    let results = crate::par_map(&seeds, |&s| replicate(s));
    Ok(summarize(label, &results))
}

/// How a replicate turns data into weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Method {
    /// Weights from the true propensity.
    Oracle,
    /// Penalized linear fit with lambda chosen by weight CV.
    Regularized { norm: NormKind, cv_target: f64 },
    /// Kernel fit with lambda chosen by weight CV.
    Kernel { kernel: Kernel, cv_target: f64 },
}

/// Weights, bias factor on the normalized scale, and chosen lambda.
pub struct MethodFit {
    pub weights: WeightSet,
    pub bias_factor: f64,
    pub lambda: Option<f64>,
}

/// Fits `method` for `rule` on covariates `x` (an intercept is added for
/// linear fits) with the true propensities `p` used by the oracle.
pub fn fit_method(method: &Method, x: &DMatrix<f64>, t: &[bool], p: &[f64], rule: ScoringRule) -> Result<MethodFit> {
    match *method {
        Method::Oracle => {
            let f: Vec<f64> = p.iter().map(|&pi| link(pi)).collect::<Result<_>>()?;
            Ok(MethodFit {
                weights: WeightSet::from_linear_predictor(&f, t, Provenance::new(rule, "oracle", None)),
                bias_factor: 0.0,
                lambda: None,
            })
        }
        Method::Regularized { norm, cv_target } => {
            let design = Design::from_matrix(x.clone().insert_column(0, 1.0));
            let choice = fit_until_cv(&design, t, rule, norm, &CvSearch::new(cv_target), &NewtonOptions::default())?;
            let ws = choice.fit.fit.weights(t);
            let bias_factor = ws.normalization_factor() * choice.fit.bound.aggregate;
            Ok(MethodFit {
                weights: ws,
                bias_factor,
                lambda: Some(choice.lambda),
            })
        }
        Method::Kernel { kernel, cv_target } => {
            let prob = KernelProblem::new(x, t, kernel)?;
            let choice = prob.fit_until_cv(rule, &CvSearch::new(cv_target), &NewtonOptions::default())?;
            let ws = choice.fit.weights(t);
            let bias_factor = ws.normalization_factor() * choice.fit.max_bias();
            Ok(MethodFit {
                weights: ws,
                bias_factor,
                lambda: Some(choice.lambda),
            })
        }
    }
}

/// Scores a fitted method on a sharp-null replicate (all unit effects zero).
pub fn evaluate_sharp_null(
    data: &Dataset,
    fit: &MethodFit,
    g0: &[f64],
    norm_cl: f64,
    sigma: Option<f64>,
    level: f64,
) -> Result<ReplicateOutcome> {
    let zeros = vec![0.0; data.n()];
    let dec = bias_decompose(data, &fit.weights, g0, &zeros)?;
    let y = data.outcome()?;
    let s = match sigma {
        Some(s) => s,
        None => sigma_hat(y, &data.t, None)?,
    };
    let w2 = fit.weights.normalized_l2();
    let naive = naive_ci(dec.tau_hat, s, w2, level)?;
    let honest = honest_ci(dec.tau_hat, fit.bias_factor, norm_cl, NormClMode::Oracle, s, w2, level)?;
    Ok(ReplicateOutcome {
        tau_hat: dec.tau_hat,
        tau_star: dec.tau_star,
        bias: dec.bias,
        max_bias: fit.bias_factor * norm_cl,
        naive_covers: naive.contains(dec.tau_star),
        honest_covers: honest.interval.contains(dec.tau_star),
        naive_half_width: naive.half_width,
        honest_half_width: honest.interval.half_width,
        lambda: fit.lambda,
    })
}

/// One replicate of the high-dimensional design for the ATT, with oracle
/// outcome norm and noise level.
pub fn highdim_replicate(spec: &HighDimSpec, method: &Method, seed: u64, level: f64) -> Result<ReplicateOutcome> {
    let sim = gen_highdim(spec, seed)?;
    let fit = fit_method(method, &sim.data.x, &sim.data.t, &sim.p, ScoringRule::ATT)?;
    let norm_cl = sim.beta.iter().map(|b| b * b).sum::<f64>().sqrt();
    evaluate_sharp_null(&sim.data, &fit, &sim.g0, norm_cl, Some(spec.sigma), level)
}

/// One replicate of the Gaussian-process design for the ATT, with oracle
/// outcome norm and noise level.
pub fn gp_replicate(spec: &GpSpec, method: &Method, seed: u64, level: f64) -> Result<ReplicateOutcome> {
    let sim = gen_gp_lowdim(spec, seed)?;
    let fit = fit_method(method, &sim.data.x, &sim.data.t, &sim.p, ScoringRule::ATT)?;
    evaluate_sharp_null(&sim.data, &fit, &sim.g0, sim.g0_norm, Some(spec.sigma_noise), level)
}
