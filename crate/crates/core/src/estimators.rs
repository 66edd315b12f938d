//! Weighted effect estimators, augmented variants and bias decomposition.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::balance::{Provenance, WeightSet};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::scoring::Estimand;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectEstimate {
    pub tau_hat: f64,
    pub normalized: bool,
    pub estimand: Estimand,
    pub provenance: Provenance,
    pub augmented: bool,
    /// Euclidean norm of the weights the estimate was formed with.
    pub weight_l2: f64,
    /// `sigma_hat * weight_l2`, when a noise level was supplied.
    pub se_plugin: Option<f64>,
}

impl EffectEstimate {
    pub fn with_sigma(mut self, sigma_hat: f64) -> Self {
        self.se_plugin = Some(sigma_hat * self.weight_l2);
        self
    }
}

fn check_len(v: &[f64], n: usize, what: &str) -> Result<()> {
    if v.len() != n {
        return Err(Error::InvalidInput(format!("{what} has length {}, expected {n}", v.len())));
    }
    Ok(())
}

fn make(ws: &WeightSet, tau_hat: f64, normalized: bool, augmented: bool) -> EffectEstimate {
    let n = ws.n() as f64;
    let weight_l2 = if normalized {
        ws.normalized_l2()
    } else {
        ws.raw.iter().map(|w| (w / n).powi(2)).sum::<f64>().sqrt()
    };
    EffectEstimate {
        tau_hat,
        normalized,
        estimand: ws.provenance.rule.estimand(),
        provenance: ws.provenance.clone(),
        augmented,
        weight_l2,
        se_plugin: None,
    }
}

/// `sum_{T=1} w Y - sum_{T=0} w Y`. With `normalized` the weights sum to one
/// within each group; otherwise the raw weights are divided by `n`.
pub fn ipw_estimate(ds: &Dataset, ws: &WeightSet, normalized: bool) -> Result<EffectEstimate> {
    let y = ds.outcome()?;
    check_len(&ws.raw, ds.n(), "weights")?;
    let tau = if normalized {
        ws.weighted_difference(y, true)
    } else {
        ws.weighted_difference(y, false) / ds.n() as f64
    };
    Ok(make(ws, tau, normalized, false))
}

/// `sum_{T=1} w (Y - g0) - sum_{T=0} w (Y - g0)` with normalized weights.
pub fn aipw_att(ds: &Dataset, ws: &WeightSet, g0_hat: &[f64]) -> Result<EffectEstimate> {
    let y = ds.outcome()?;
    check_len(g0_hat, ds.n(), "control predictions")?;
    let resid: Vec<f64> = y.iter().zip(g0_hat).map(|(yi, gi)| yi - gi).collect();
    Ok(make(ws, ws.weighted_difference(&resid, true), true, true))
}

/// `(1/n) sum (g1 - g0) + sum_{T=1} w (Y - g1) - sum_{T=0} w (Y - g0)` with
/// normalized weights.
pub fn aipw_ate(ds: &Dataset, ws: &WeightSet, g0_hat: &[f64], g1_hat: &[f64]) -> Result<EffectEstimate> {
    let y = ds.outcome()?;
    let n = ds.n();
    check_len(g0_hat, n, "control predictions")?;
    check_len(g1_hat, n, "treated predictions")?;
    let plug_in = g1_hat.iter().zip(g0_hat).map(|(a, b)| a - b).sum::<f64>() / n as f64;
    let resid: Vec<f64> = (0..n)
        .map(|i| if ds.t[i] { y[i] - g1_hat[i] } else { y[i] - g0_hat[i] })
        .collect();
    Ok(make(ws, plug_in + ws.weighted_difference(&resid, true), true, true))
}

/// Split of a normalized-weight estimate into bias and noise, given the
/// outcome surface and unit-level effects used to generate the data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasDecomposition {
    pub tau_hat: f64,
    /// `sum_{T=1} w tau(X)`: the conditional weighted effect.
    pub tau_star: f64,
    /// `sum_{T=1} w g0 - sum_{T=0} w g0`.
    pub bias: f64,
    /// `sum_{T=1} w eps - sum_{T=0} w eps` with `eps = Y - g0 - T tau(X)`.
    pub noise: f64,
}

pub fn bias_decompose(ds: &Dataset, ws: &WeightSet, g0: &[f64], tau_x: &[f64]) -> Result<BiasDecomposition> {
    let y = ds.outcome()?;
    let n = ds.n();
    check_len(g0, n, "g0")?;
    check_len(tau_x, n, "unit effects")?;
    let eps: Vec<f64> = (0..n)
        .map(|i| y[i] - g0[i] - if ds.t[i] { tau_x[i] } else { 0.0 })
        .collect();
    let tau_star = (0..n).filter(|&i| ds.t[i]).map(|i| ws.normalized[i] * tau_x[i]).sum();
    Ok(BiasDecomposition {
        tau_hat: ws.weighted_difference(y, true),
        tau_star,
        bias: ws.weighted_difference(g0, true),
        noise: ws.weighted_difference(&eps, true),
    })
}

/// Least-squares (optionally ridge) outcome regression fit on one group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeModel {
    pub coefficients: Vec<f64>,
    pub ridge: f64,
}

impl OutcomeModel {
    /// Fits `y ~ design` on the rows where `rows[i]` is true. The first
    /// column is left unpenalized when it is an intercept.
    pub fn fit(design: &DMatrix<f64>, y: &[f64], rows: &[bool], ridge: f64) -> Result<Self> {
        let idx: Vec<usize> = (0..y.len()).filter(|&i| rows[i]).collect();
        let m = design.ncols();
        if idx.len() < m.min(2) {
            return Err(Error::InvalidInput("too few rows for the outcome model".into()));
        }
        let x = design.select_rows(idx.iter());
        let yv = DVector::from_iterator(idx.len(), idx.iter().map(|&i| y[i]));
        let mut xtx = x.transpose() * &x;
        let intercept = m > 0 && design.column(0).iter().all(|&v| v == 1.0);
        for k in usize::from(intercept)..m {
            xtx[(k, k)] += ridge;
        }
        let xty = x.transpose() * yv;
        let beta = match xtx.clone().cholesky() {
            Some(ch) => ch.solve(&xty),
            None => xtx
                .svd(true, true)
                .solve(&xty, 1e-12)
                .map_err(|e| Error::InvalidInput(e.to_string()))?,
        };
        Ok(Self {
            coefficients: beta.iter().copied().collect(),
            ridge,
        })
    }

    pub fn predict(&self, design: &DMatrix<f64>) -> Vec<f64> {
        (design * DVector::from_column_slice(&self.coefficients)).iter().copied().collect()
    }
}
