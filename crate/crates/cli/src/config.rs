//! Command-line arguments and their validation.
//!
//! The parsed argument structs double as the run configuration: they are
//! serialized verbatim into every report, so a run can be repeated from its
//! output alone.

use std::path::PathBuf;

use cbsr::kernel::Kernel;
use cbsr::regularized::NormKind;
use cbsr::{FeatureMap, ScoringRule};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "cbsr", version, about = "Propensity scores and weights by tailored scoring rules")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a propensity model and write a JSON report.
    Fit(FitArgs),
    /// Fit and write per-unit weights as CSV.
    Weights(WeightsArgs),
    /// Fit and report covariate balance before and after weighting.
    Diagnose(FitArgs),
    /// Fit, then estimate the effect with naive and honest intervals.
    Estimate(EstimateArgs),
    /// Run a seeded simulation study, or emit one simulated dataset.
    Simulate(SimulateArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Fit(_) => "fit",
            Command::Weights(_) => "weights",
            Command::Diagnose(_) => "diagnose",
            Command::Estimate(_) => "estimate",
            Command::Simulate(_) => "simulate",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Fitter {
    Glm,
    Stepwise,
    L1,
    L2,
    Rkhs,
    Boost,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum NormArg {
    L1,
    L2,
}

impl From<NormArg> for NormKind {
    fn from(n: NormArg) -> Self {
        match n {
            NormArg::L1 => NormKind::L1,
            NormArg::L2 => NormKind::L2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelName {
    Gaussian,
    Laplace,
    Poly,
    Linear,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DataArgs {
    /// CSV file with a header row.
    #[arg(long)]
    pub input: PathBuf,
    /// Column holding the 0/1 treatment indicator.
    #[arg(long, default_value = "t")]
    pub treatment_col: String,
    /// Regressors: linear (intercept + covariates), raw, poly:Q or std:Q
    /// (standardized monomials up to degree Q, with intercept).
    #[arg(long, default_value = "linear")]
    pub features: String,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ModelArgs {
    /// ate, att, atc, owate or custom:ALPHA,BETA.
    #[arg(long, default_value = "att")]
    pub estimand: String,
    #[arg(long, value_enum, default_value_t = Fitter::Glm)]
    pub fitter: Fitter,
    /// Penalty weight for l1, l2 and rkhs.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Choose lambda (l1, l2, rkhs) or stop boosting by this weight CV.
    #[arg(long)]
    pub cv_target: Option<f64>,
    /// Norm in which the outcome-function bound is stated (linear fitters).
    #[arg(long, value_enum)]
    pub norm: Option<NormArg>,
    #[arg(long, value_enum)]
    pub kernel: Option<KernelName>,
    /// Bandwidth parameter of the gaussian and laplace kernels.
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Degree of the polynomial kernel.
    #[arg(long)]
    pub degree: Option<u32>,
    /// Boosting shrinkage.
    #[arg(long)]
    pub nu: Option<f64>,
    /// Boosting tree depth (1 to 3).
    #[arg(long)]
    pub depth: Option<usize>,
    /// Number of boosting iterations.
    #[arg(long)]
    pub trees: Option<usize>,
    /// Maximum number of stepwise additions.
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct FitArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    /// Report path; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct WeightsArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    /// Weights CSV path. The JSON summary goes to standard output.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormClModeArg {
    User,
    ResidualPlugin,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EstimateArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value = "y")]
    pub outcome_col: String,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    /// Bound on the outcome-function norm (of the residual function with
    /// --aipw), on the scale of the regressors.
    #[arg(long)]
    pub norm_cl: Option<f64>,
    #[arg(long, value_enum)]
    pub norm_cl_mode: Option<NormClModeArg>,
    /// Augment with an outcome regression (needs --outcome-model).
    #[arg(long)]
    pub aipw: bool,
    /// ols or ridge:LAMBDA, fit per treatment group on the regressors.
    #[arg(long)]
    pub outcome_model: Option<String>,
    /// Fit the outcome model on one half of the sample and the propensity
    /// model and estimate on the other, split by --seed.
    #[arg(long)]
    pub split: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Known noise standard deviation; estimated from the data when absent.
    #[arg(long)]
    pub noise_sd: Option<f64>,
    /// Use raw weights divided by n instead of group-normalized weights.
    #[arg(long)]
    pub raw_weights: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum DesignName {
    Highdim,
    Gp,
    KangSchafer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SimMethod {
    Oracle,
    L1,
    L2,
    Rkhs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SimulateArgs {
    #[arg(long, value_enum)]
    pub design: DesignName,
    #[arg(long, default_value_t = 400)]
    pub n: usize,
    #[arg(long, default_value_t = 100)]
    pub reps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    #[arg(long, value_enum, default_value_t = SimMethod::L2)]
    pub method: SimMethod,
    #[arg(long, default_value_t = 1.0)]
    pub cv_target: f64,
    /// Fitting kernel for --method rkhs, e.g. laplace:0.1, gaussian:1, poly:2, linear.
    #[arg(long)]
    pub kernel: Option<String>,
    /// Covariate dimension (highdim).
    #[arg(long, default_value_t = 100)]
    pub dim: usize,
    #[arg(long, default_value_t = 1.0)]
    pub rho: f64,
    #[arg(long, default_value_t = 5)]
    pub s_t: usize,
    #[arg(long, default_value_t = 5)]
    pub s_y: usize,
    /// Noise standard deviation; 5 for highdim and 1 for gp when absent.
    #[arg(long)]
    pub noise_sd: Option<f64>,
    /// Kernel of the propensity surface (gp).
    #[arg(long, default_value = "poly:1")]
    pub kernel_f: String,
    /// Kernel of the outcome surface (gp).
    #[arg(long, default_value = "laplace:0.1")]
    pub kernel_g: String,
    /// Write the dataset of one replicate instead of running the study.
    #[arg(long)]
    pub emit_data: bool,
    #[arg(long, default_value_t = 0)]
    pub replicate: usize,
    /// CSV output path (metrics, or the dataset with --emit-data).
    #[arg(long)]
    pub out: PathBuf,
}

pub type ConfigResult<T> = std::result::Result<T, String>;

pub fn parse_estimand(s: &str) -> ConfigResult<ScoringRule> {
    let s = s.trim().to_ascii_lowercase();
    let rule = match s.as_str() {
        "ate" => ScoringRule::ATE,
        "att" => ScoringRule::ATT,
        "atc" => ScoringRule::ATC,
        "owate" => ScoringRule::OWATE,
        _ => {
            let rest = s
                .strip_prefix("custom:")
                .ok_or_else(|| format!("unknown estimand `{s}`; expected ate, att, atc, owate or custom:a,b"))?;
            let (a, b) = rest
                .split_once(',')
                .ok_or_else(|| format!("custom estimand needs `custom:alpha,beta`, got `{s}`"))?;
            let num = |v: &str| v.trim().parse::<f64>().map_err(|_| format!("cannot parse `{v}` as a number"));
            ScoringRule::new(num(a)?, num(b)?).map_err(|e| e.to_string())?
        }
    };
    rule.require_concave().map_err(|e| e.to_string())?;
    Ok(rule)
}

pub fn parse_features(s: &str) -> ConfigResult<FeatureMap> {
    let degree = |q: &str| -> ConfigResult<usize> {
        match q.parse::<usize>() {
            Ok(d) if d >= 1 => Ok(d),
            _ => Err(format!("feature degree must be a positive integer, got `{q}`")),
        }
    };
    match s {
        "linear" => Ok(FeatureMap::RawIntercept),
        "raw" => Ok(FeatureMap::Raw),
        _ => {
            if let Some(q) = s.strip_prefix("poly:") {
                Ok(FeatureMap::Polynomial { degree: degree(q)?, intercept: true })
            } else if let Some(q) = s.strip_prefix("std:") {
                Ok(FeatureMap::Standardized { degree: degree(q)? })
            } else {
                Err(format!("unknown feature map `{s}`; expected linear, raw, poly:Q or std:Q"))
            }
        }
    }
}

/// Parses `name[:param]` kernel strings used by `simulate`.
pub fn parse_kernel_spec(s: &str) -> ConfigResult<Kernel> {
    let (name, param) = match s.split_once(':') {
        Some((a, b)) => (a, Some(b)),
        None => (s, None),
    };
    let num = |p: Option<&str>| -> ConfigResult<f64> {
        let p = p.ok_or_else(|| format!("kernel `{name}` needs a parameter, e.g. `{name}:1`"))?;
        p.parse::<f64>().map_err(|_| format!("cannot parse kernel parameter `{p}`"))
    };
    match name {
        "gaussian" => positive(num(param)?, "sigma").map(|sigma| Kernel::Gaussian { sigma }),
        "laplace" => positive(num(param)?, "sigma").map(|sigma| Kernel::Laplace { sigma }),
        "poly" => {
            let d = num(param)?;
            if d < 1.0 || d.fract() != 0.0 {
                return Err(format!("polynomial degree must be a positive integer, got {d}"));
            }
            Ok(Kernel::polynomial(d as u32))
        }
        "linear" if param.is_none() => Ok(Kernel::Linear),
        _ => Err(format!("unknown kernel `{s}`")),
    }
}

fn positive(v: f64, what: &str) -> ConfigResult<f64> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("{what} must be positive, got {v}"))
    }
}

/// Fitter settings after cross-flag validation.
#[derive(Debug, Clone, Serialize)]
pub struct Resolved {
    pub rule: ScoringRule,
    pub features: FeatureMap,
    pub kernel: Option<Kernel>,
    /// Norm for the bias factor of linear outcome classes; `None` for rkhs.
    pub norm: Option<NormKind>,
}

impl ModelArgs {
    pub fn resolve(&self, data: &DataArgs) -> ConfigResult<Resolved> {
        let rule = parse_estimand(&self.estimand)?;
        let features = parse_features(&data.features)?;
        let f = self.fitter;
        let name = format!("{f:?}").to_lowercase();
        let reject = |present: bool, flag: &str| -> ConfigResult<()> {
            if present {
                Err(format!("--{flag} does not apply to --fitter {name}"))
            } else {
                Ok(())
            }
        };
        let penalized = matches!(f, Fitter::L1 | Fitter::L2 | Fitter::Rkhs);
        reject(!penalized && self.lambda.is_some(), "lambda")?;
        reject(!penalized && f != Fitter::Boost && self.cv_target.is_some(), "cv-target")?;
        if penalized {
            match (self.lambda, self.cv_target) {
                (Some(_), Some(_)) => return Err("give either --lambda or --cv-target, not both".into()),
                (None, None) => return Err(format!("--fitter {name} needs --lambda or --cv-target")),
                (Some(l), None) if !(l > 0.0 && l.is_finite()) => {
                    return Err(format!("--lambda must be positive, got {l}"));
                }
                _ => {}
            }
        }
        if let Some(c) = self.cv_target {
            positive(c, "--cv-target")?;
        }
        let boost = f == Fitter::Boost;
        reject(!boost && self.nu.is_some(), "nu")?;
        reject(!boost && self.depth.is_some(), "depth")?;
        reject(!boost && self.trees.is_some(), "trees")?;
        reject(f != Fitter::Stepwise && self.steps.is_some(), "steps")?;
        if f == Fitter::Stepwise && !features.has_intercept() {
            return Err("--fitter stepwise needs a feature map with an intercept".into());
        }
        let rkhs = f == Fitter::Rkhs;
        reject(!rkhs && self.kernel.is_some(), "kernel")?;
        reject(rkhs && self.norm.is_some(), "norm")?;
        let kernel = if rkhs {
            let k = self.kernel.ok_or("--fitter rkhs needs --kernel")?;
            reject(!matches!(k, KernelName::Gaussian | KernelName::Laplace) && self.sigma.is_some(), "sigma")?;
            reject(k != KernelName::Poly && self.degree.is_some(), "degree")?;
            Some(match k {
                KernelName::Gaussian => Kernel::Gaussian { sigma: positive(self.sigma.unwrap_or(1.0), "--sigma")? },
                KernelName::Laplace => Kernel::Laplace { sigma: positive(self.sigma.unwrap_or(1.0), "--sigma")? },
                KernelName::Poly => {
                    let d = self.degree.unwrap_or(2);
                    if d == 0 {
                        return Err("--degree must be at least 1".into());
                    }
                    Kernel::polynomial(d)
                }
                KernelName::Linear => Kernel::Linear,
            })
        } else {
            reject(self.sigma.is_some(), "sigma")?;
            reject(self.degree.is_some(), "degree")?;
            None
        };
        let norm = if rkhs {
            None
        } else {
            Some(match (self.norm, f) {
                (Some(n), _) => n.into(),
                (None, Fitter::L1) => NormKind::L1,
                (None, _) => NormKind::L2,
            })
        };
        Ok(Resolved { rule, features, kernel, norm })
    }
}

/// Outcome regression choice: `ols` or `ridge:LAMBDA`.
pub fn parse_outcome_model(s: &str) -> ConfigResult<f64> {
    if s == "ols" {
        return Ok(0.0);
    }
    let l = s
        .strip_prefix("ridge:")
        .ok_or_else(|| format!("unknown outcome model `{s}`; expected ols or ridge:LAMBDA"))?;
    let l: f64 = l.parse().map_err(|_| format!("cannot parse ridge penalty `{l}`"))?;
    positive(l, "ridge penalty")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn estimands_parse() {
        assert_eq!(parse_estimand("ATT").unwrap(), ScoringRule::ATT);
        let r = parse_estimand("custom:-0.5,-0.25").unwrap();
        assert_eq!((r.alpha(), r.beta()), (-0.5, -0.25));
        assert!(parse_estimand("custom:0.5,-1").is_err());
        assert!(parse_estimand("custom:-1").is_err());
        assert!(parse_estimand("late").is_err());
    }

    #[test]
    fn kernels_parse() {
        assert_eq!(parse_kernel_spec("laplace:0.1").unwrap(), Kernel::Laplace { sigma: 0.1 });
        assert_eq!(parse_kernel_spec("poly:3").unwrap(), Kernel::polynomial(3));
        assert_eq!(parse_kernel_spec("linear").unwrap(), Kernel::Linear);
        assert!(parse_kernel_spec("poly:1.5").is_err());
        assert!(parse_kernel_spec("gaussian").is_err());
        assert!(parse_kernel_spec("gaussian:-1").is_err());
    }

    #[test]
    fn features_parse() {
        assert_eq!(parse_features("std:2").unwrap(), FeatureMap::Standardized { degree: 2 });
        assert!(parse_features("poly:0").is_err());
    }

    #[test]
    fn outcome_models_parse() {
        assert_eq!(parse_outcome_model("ols").unwrap(), 0.0);
        assert_eq!(parse_outcome_model("ridge:2").unwrap(), 2.0);
        assert!(parse_outcome_model("lasso").is_err());
    }
}
