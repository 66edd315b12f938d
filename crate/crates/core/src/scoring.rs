//! Beta family of covariate balancing scoring rules under the logistic link.
//!
//! A rule `(alpha, beta)` has `G''(p) = p^(alpha-1) (1-p)^(beta-1)`. With the
//! logistic link the induced sample weights are
//!
//! ```text
//! w(x, 1) = p^alpha (1-p)^(beta+1)
//! w(x, 0) = p^(alpha+1) (1-p)^beta
//! ```
//!
//! and the derivative of the score in the linear predictor `f` is `+w` for
//! treated and `-w` for control units. Everything the fitters optimize is
//! expressed on the `f` scale.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` by [`link_inv`].
pub const PROB_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimand {
    Ate,
    Atc,
    Att,
    Owate,
    Custom,
}

impl fmt::Display for Estimand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Estimand::Ate => "ate",
            Estimand::Atc => "atc",
            Estimand::Att => "att",
            Estimand::Owate => "owate",
            Estimand::Custom => "custom",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoringRule {
    alpha: f64,
    beta: f64,
}

impl ScoringRule {
    pub const ATE: ScoringRule = ScoringRule {
        alpha: -1.0,
        beta: -1.0,
    };
    pub const ATC: ScoringRule = ScoringRule {
        alpha: -1.0,
        beta: 0.0,
    };
    pub const ATT: ScoringRule = ScoringRule {
        alpha: 0.0,
        beta: -1.0,
    };
    /// Bernoulli likelihood.
    pub const OWATE: ScoringRule = ScoringRule {
        alpha: 0.0,
        beta: 0.0,
    };

    /// Rules outside `[-1, 1]^2` are rejected.
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        let ok = |v: f64| v.is_finite() && (-1.0..=1.0).contains(&v);
        if !ok(alpha) || !ok(beta) {
            return Err(Error::InvalidInput(format!(
                "scoring rule ({alpha}, {beta}) outside [-1, 1]^2"
            )));
        }
        Ok(Self { alpha, beta })
    }

    pub fn for_estimand(e: Estimand) -> Option<Self> {
        match e {
            Estimand::Ate => Some(Self::ATE),
            Estimand::Atc => Some(Self::ATC),
            Estimand::Att => Some(Self::ATT),
            Estimand::Owate => Some(Self::OWATE),
            Estimand::Custom => None,
        }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn estimand(&self) -> Estimand {
        match (self.alpha, self.beta) {
            (a, b) if a == -1.0 && b == -1.0 => Estimand::Ate,
            (a, b) if a == -1.0 && b == 0.0 => Estimand::Atc,
            (a, b) if a == 0.0 && b == -1.0 => Estimand::Att,
            (a, b) if a == 0.0 && b == 0.0 => Estimand::Owate,
            _ => Estimand::Custom,
        }
    }

    /// Both score branches are concave in `f` exactly when
    /// `-1 <= alpha, beta <= 0`.
    pub fn is_concave(&self) -> bool {
        self.alpha <= 0.0 && self.beta <= 0.0
    }

    /// Fitting needs a concave objective.
    pub fn require_concave(&self) -> Result<()> {
        if self.is_concave() {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!(
                "scoring rule ({}, {}) is not concave in f; fitting needs alpha, beta <= 0",
                self.alpha, self.beta
            )))
        }
    }

    /// The rule with `alpha` and `beta` swapped (relabeling treated/control).
    pub fn reflected(&self) -> Self {
        Self {
            alpha: self.beta,
            beta: self.alpha,
        }
    }
}

impl fmt::Display for ScoringRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.estimand() {
            Estimand::Custom => write!(f, "custom({}, {})", self.alpha, self.beta),
            e => write!(f, "{e}"),
        }
    }
}

/// Logit.
pub fn link(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(p));
    }
    Ok((p / (1.0 - p)).ln())
}

/// Expit, clamped to `[PROB_EPS, 1 - PROB_EPS]`.
pub fn link_inv(f: f64) -> f64 {
    let p = if f >= 0.0 {
        1.0 / (1.0 + (-f).exp())
    } else {
        let e = f.exp();
        e / (1.0 + e)
    };
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Sample weight of a unit with propensity `p` and treatment `t`.
pub fn weight(rule: ScoringRule, p: f64, t: bool) -> f64 {
    let (a, b) = (rule.alpha, rule.beta);
    let q = 1.0 - p;
    if t {
        p.powf(a) * q.powf(b + 1.0)
    } else {
        p.powf(a + 1.0) * q.powf(b)
    }
}

/// `dS(link_inv(f), t) / df`.
pub fn score_grad(rule: ScoringRule, f: f64, t: bool) -> f64 {
    let w = weight(rule, link_inv(f), t);
    if t {
        w
    } else {
        -w
    }
}

/// `d^2 S(link_inv(f), t) / df^2`.
pub fn score_hess(rule: ScoringRule, f: f64, t: bool) -> f64 {
    let (a, b) = (rule.alpha, rule.beta);
    let p = link_inv(f);
    let q = 1.0 - p;
    if t {
        a * p.powf(a) * q.powf(b + 2.0) - (b + 1.0) * p.powf(a + 1.0) * q.powf(b + 1.0)
    } else {
        -(a + 1.0) * p.powf(a + 1.0) * q.powf(b + 1.0) + b * p.powf(a + 2.0) * q.powf(b)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Score value on the linear-predictor scale.
///
/// Named rules use the closed forms (fixing the affine constants as in the
/// usual tabulation, e.g. ATE treated: `log(p/(1-p)) - 1/p`). Custom rules
/// are integrated numerically from `f = 0`, so `S(0, t) = 0` for them.
pub fn score_on_f(rule: ScoringRule, f: f64, t: bool) -> f64 {
    match (rule.estimand(), t) {
        // log p/(1-p) - 1/p = f - (1 + e^-f)
        (Estimand::Ate, true) => f - 1.0 - (-f).exp(),
        (Estimand::Ate, false) => -f - 1.0 - f.exp(),
        (Estimand::Atc, true) => -1.0 - (-f).exp(),
        (Estimand::Atc, false) => -f,
        (Estimand::Att, true) => f,
        (Estimand::Att, false) => -1.0 - f.exp(),
        (Estimand::Owate, true) => -softplus(-f),
        (Estimand::Owate, false) => -softplus(f),
        (Estimand::Custom, _) => score_by_quadrature(rule, f, t),
    }
}

/// Score value at probability `p`.
pub fn score_value(rule: ScoringRule, p: f64, t: bool) -> Result<f64> {
    let f = link(p)?;
    Ok(score_on_f(rule, f, t))
}

/// `\int_0^f score_grad(rule, u, t) du` by composite Gauss-Legendre
/// quadrature on pieces of length at most 1/8.
pub fn score_by_quadrature(rule: ScoringRule, f: f64, t: bool) -> f64 {
    if f == 0.0 {
        return 0.0;
    }
    let (nodes, weights) = gauss_legendre();
    let pieces = ((8.0 * f.abs()).ceil() as usize).max(1);
    let h = f / pieces as f64;
    (0..pieces)
        .map(|k| {
            let mid = (k as f64 + 0.5) * h;
            nodes
                .iter()
                .zip(weights)
                .map(|(x, w)| w * score_grad(rule, mid + 0.5 * h * x, t))
                .sum::<f64>()
                * 0.5
                * h
        })
        .sum()
}

const GL_POINTS: usize = 16;

/// Nodes and weights of the 16-point Gauss-Legendre rule on [-1, 1].
fn gauss_legendre() -> &'static ([f64; GL_POINTS], [f64; GL_POINTS]) {
    static RULE: std::sync::OnceLock<([f64; GL_POINTS], [f64; GL_POINTS])> = std::sync::OnceLock::new();
    RULE.get_or_init(|| {
        let n = GL_POINTS;
        let mut x = [0.0; GL_POINTS];
        let mut w = [0.0; GL_POINTS];
        for i in 0..n {
            let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                // Legendre recurrence for P_n(z) and its derivative
                let (mut p0, mut p1) = (1.0, z);
                for k in 2..=n {
                    let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                    p0 = p1;
                    p1 = p2;
                }
                dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
                let dz = p1 / dp;
                z -= dz;
                if dz.abs() < 1e-16 {
                    break;
                }
            }
            x[i] = z;
            w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
        }
        (x, w)
    })
}

/// Average score `(1/n) sum S(f_i, t_i)`.
pub fn mean_score(rule: ScoringRule, f: &[f64], t: &[bool]) -> f64 {
    f.iter()
        .zip(t)
        .map(|(&fi, &ti)| score_on_f(rule, fi, ti))
        .sum::<f64>()
        / f.len() as f64
}
