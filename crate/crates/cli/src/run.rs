use std::io::Write;
use std::path::Path;

use cbsr::balance::{balance_report, imbalance, BalanceReport};
use cbsr::boost::{fit_boost, BoostOptions};
use cbsr::data::{expand, load_csv};
use cbsr::estimators::{aipw_ate, aipw_att, ipw_estimate, EffectEstimate, OutcomeModel};
use cbsr::glm::{fit_mle_score, forward_stepwise, NewtonOptions, PropensityFit};
use cbsr::inference::{honest_ci, naive_ci, sample_split, sigma_hat, HonestCI, Interval, NormClMode};
use cbsr::kernel::KernelProblem;
use cbsr::regularized::{fit_penalized, fit_until_cv, CvSearch, NormKind};
use cbsr::simulate::{
    gen_gp_lowdim, gen_highdim, gen_kang_schafer, gp_replicate, highdim_replicate, replicate_seed, run_replications,
    CellMetrics, GpSpec, HighDimSpec, Method,
};
use cbsr::{Dataset, Design, Estimand, Provenance, WeightSet};
use serde::Serialize;

use crate::config::*;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Core(cbsr::Error),
}

impl From<cbsr::Error> for CliError {
    fn from(e: cbsr::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(std::io::Error::other(e).into())
    }
}

impl CliError {
    /// 2 for configuration, 3 for input/output, 4 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(e) if e.is_numeric() => 4,
            CliError::Core(cbsr::Error::Io(_) | cbsr::Error::Csv(_) | cbsr::Error::Cell { .. }) => 3,
            CliError::Core(_) => 2,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "Config",
            CliError::Core(e) => e.kind(),
        }
    }

    pub fn message(&self) -> String {
        match self {
            CliError::Config(m) => m.clone(),
            CliError::Core(e) => e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn config<T>(r: ConfigResult<T>) -> CliResult<T> {
    r.map_err(CliError::Config)
}

#[derive(Debug, Clone, Serialize)]
pub struct Named {
    pub name: String,
    pub value: f64,
}

fn named(names: &[String], values: &[f64]) -> Vec<Named> {
    names
        .iter()
        .zip(values)
        .map(|(n, &v)| Named { name: n.clone(), value: v })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct StepSummary {
    pub added: Option<String>,
    pub objective: f64,
    pub max_abs_std_diff: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FitSummary {
    pub fitter: Fitter,
    pub lambda: Option<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub objective: Option<f64>,
    /// Largest within-group coefficient of variation of the weights.
    pub weight_cv: f64,
    pub coefficients: Option<Vec<Named>>,
    pub hnorm: Option<f64>,
    /// Imbalance bound on the averaged scale, per unit outcome norm.
    pub max_bias: Option<f64>,
    /// Worst-case bias of the normalized estimator per unit outcome norm.
    pub bias_factor: Option<f64>,
    pub trees: Option<usize>,
    pub capped_steps: Option<usize>,
    pub stopped_early: Option<bool>,
    pub stepwise: Option<Vec<StepSummary>>,
    pub stopped: Option<String>,
    /// `(1/n) sum (2T-1) w phi_k` for every regressor.
    pub balance_residuals: Vec<Named>,
    pub max_abs_balance_residual: f64,
}

pub struct Fitted {
    pub weights: WeightSet,
    pub summary: FitSummary,
}

fn glm_parts(fit: &PropensityFit) -> (bool, usize, Option<f64>, Option<Vec<Named>>) {
    (
        fit.converged,
        fit.iterations,
        Some(fit.objective),
        Some(named(&fit.names, &fit.theta)),
    )
}

/// `||v||` in the dual of `norm` over the non-intercept entries.
fn dual_norm(v: &[f64], skip_first: bool, norm: NormKind) -> f64 {
    let v = &v[usize::from(skip_first)..];
    match norm {
        NormKind::L2 => v.iter().map(|a| a * a).sum::<f64>().sqrt(),
        NormKind::L1 => v.iter().fold(0.0, |m, a| m.max(a.abs())),
    }
}

pub fn fit_model(ds: &Dataset, design: &Design, m: &ModelArgs, r: &Resolved) -> CliResult<Fitted> {
    let t = &ds.t;
    let rule = r.rule;
    let opts = NewtonOptions::default();
    let mut lambda = None;
    let mut hnorm = None;
    let mut max_bias = None;
    let mut trees = None;
    let mut capped = None;
    let mut stopped_early = None;
    let mut stepwise = None;
    let mut stopped = None;
    let (weights, converged, iterations, objective, coefficients) = match m.fitter {
        Fitter::Glm => {
            let fit = fit_mle_score(design, t, rule, &opts)?;
            let (c, i, o, th) = glm_parts(&fit);
            (fit.weights(t), c, i, o, th)
        }
        Fitter::Stepwise => {
            let k_max = m.steps.unwrap_or(design.ncols().saturating_sub(1));
            let path = forward_stepwise(design, t, rule, k_max, rule, &opts)?;
            let active = path.last().active.clone();
            let fit = fit_mle_score(&design.select(&active), t, rule, &opts)?;
            stepwise = Some(
                path.steps
                    .iter()
                    .map(|s| StepSummary {
                        added: s.added.clone(),
                        objective: s.objective,
                        max_abs_std_diff: s.max_abs_std_diff,
                    })
                    .collect(),
            );
            stopped = path.stopped.clone();
            let (c, i, o, th) = glm_parts(&fit);
            (fit.weights(t), c, i, o, th)
        }
        Fitter::L1 | Fitter::L2 => {
            let norm = if m.fitter == Fitter::L1 { NormKind::L1 } else { NormKind::L2 };
            let fit = match (m.lambda, m.cv_target) {
                (Some(l), _) => fit_penalized(design, t, rule, l, norm, &opts, None)?,
                (None, Some(c)) => fit_until_cv(design, t, rule, norm, &CvSearch::new(c), &opts)?.fit,
                (None, None) => unreachable!("validated"),
            };
            lambda = Some(fit.lambda);
            max_bias = Some(fit.bound.aggregate);
            let (c, i, o, th) = glm_parts(&fit.fit);
            (fit.fit.weights(t), c, i, o, th)
        }
        Fitter::Rkhs => {
            let kernel = r.kernel.expect("validated");
            let prob = KernelProblem::new(&ds.x, t, kernel)?;
            let fit = match (m.lambda, m.cv_target) {
                (Some(l), _) => prob.fit(rule, l, None, &opts)?,
                (None, Some(c)) => prob.fit_until_cv(rule, &CvSearch::new(c), &opts)?.fit,
                (None, None) => unreachable!("validated"),
            };
            lambda = Some(fit.lambda);
            hnorm = Some(fit.hnorm);
            max_bias = Some(fit.max_bias());
            (fit.weights(t), fit.converged, fit.iterations, Some(fit.objective), None)
        }
        Fitter::Boost => {
            let d = BoostOptions::default();
            let opts = BoostOptions {
                depth: m.depth.unwrap_or(d.depth),
                n_trees: m.trees.unwrap_or(d.n_trees),
                nu: m.nu.unwrap_or(d.nu),
                cv_target: m.cv_target,
            };
            let ens = fit_boost(&ds.x, t, rule, &opts)?;
            trees = Some(ens.trees.len());
            capped = Some(ens.capped);
            stopped_early = Some(ens.stopped_early);
            let objective = ens.objective_path.last().copied();
            (ens.weights(t), true, ens.trees.len(), objective, None)
        }
    };
    let n = ds.n() as f64;
    let residuals: Vec<f64> = imbalance(&design.matrix, &weights, false).iter().map(|v| v / n).collect();
    let bias_factor = match (m.fitter, r.norm) {
        (Fitter::Rkhs, _) => max_bias.map(|b| b * weights.normalization_factor()),
        (_, Some(norm)) => Some(dual_norm(&imbalance(&design.matrix, &weights, true), design.intercept, norm)),
        (_, None) => None,
    };
    let summary = FitSummary {
        fitter: m.fitter,
        lambda,
        converged,
        iterations,
        objective,
        weight_cv: weights.coefficient_of_variation(),
        coefficients,
        hnorm,
        max_bias,
        bias_factor,
        trees,
        capped_steps: capped,
        stopped_early,
        stepwise,
        stopped,
        max_abs_balance_residual: residuals.iter().fold(0.0, |a, v| a.max(v.abs())),
        balance_residuals: named(&design.names, &residuals),
    };
    Ok(Fitted { weights, summary })
}

fn load(data: &DataArgs, outcome: Option<&str>) -> CliResult<Dataset> {
    Ok(load_csv(&data.input, &data.treatment_col, outcome)?)
}

fn emit_json<T: Serialize>(value: &T, out: Option<&Path>) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

#[derive(Serialize)]
struct Header<'a, C: Serialize> {
    command: &'a str,
    version: &'a str,
    config: &'a C,
}

fn header<'a, C: Serialize>(command: &'a str, config: &'a C) -> Header<'a, C> {
    Header {
        command,
        version: env!("CARGO_PKG_VERSION"),
        config,
    }
}

#[derive(Serialize)]
struct FitReport<'a> {
    #[serde(flatten)]
    header: Header<'a, FitArgs>,
    resolved: &'a Resolved,
    n: usize,
    n_treated: usize,
    fit: &'a FitSummary,
}

pub fn cmd_fit(args: &FitArgs) -> CliResult<()> {
    let resolved = config(args.model.resolve(&args.data))?;
    let ds = load(&args.data, None)?;
    let design = expand(&ds, resolved.features)?;
    let fitted = fit_model(&ds, &design, &args.model, &resolved)?;
    let report = FitReport {
        header: header("fit", args),
        resolved: &resolved,
        n: ds.n(),
        n_treated: ds.n_treated(),
        fit: &fitted.summary,
    };
    emit_json(&report, args.out.as_deref())
}

#[derive(Serialize)]
struct WeightsReport<'a> {
    #[serde(flatten)]
    header: Header<'a, WeightsArgs>,
    resolved: &'a Resolved,
    n: usize,
    weight_cv: f64,
    treated_sum: f64,
    control_sum: f64,
    written: String,
}

pub fn cmd_weights(args: &WeightsArgs) -> CliResult<()> {
    let resolved = config(args.model.resolve(&args.data))?;
    let ds = load(&args.data, None)?;
    let design = expand(&ds, resolved.features)?;
    let fitted = fit_model(&ds, &design, &args.model, &resolved)?;
    let ws = &fitted.weights;
    let mut w = csv::Writer::from_path(&args.out)?;
    w.write_record(["row", "t", "raw", "normalized"])?;
    for i in 0..ws.n() {
        w.write_record([
            (i + 1).to_string(),
            u8::from(ws.t[i]).to_string(),
            format!("{:?}", ws.raw[i]),
            format!("{:?}", ws.normalized[i]),
        ])?;
    }
    w.flush()?;
    let (treated_sum, control_sum) = ws.group_sums();
    emit_json(
        &WeightsReport {
            header: header("weights", args),
            resolved: &resolved,
            n: ds.n(),
            weight_cv: ws.coefficient_of_variation(),
            treated_sum,
            control_sum,
            written: args.out.display().to_string(),
        },
        None,
    )
}

#[derive(Serialize)]
struct GroupSizes {
    treated: f64,
    control: f64,
}

/// `(sum w)^2 / sum w^2` within each group.
fn effective_sizes(ws: &WeightSet) -> GroupSizes {
    let ess = |g: bool| {
        let (s, s2) = ws
            .raw
            .iter()
            .zip(&ws.t)
            .filter(|(_, &ti)| ti == g)
            .fold((0.0, 0.0), |(a, b), (&w, _)| (a + w, b + w * w));
        s * s / s2
    };
    GroupSizes {
        treated: ess(true),
        control: ess(false),
    }
}

#[derive(Serialize)]
struct DiagnoseReport<'a> {
    #[serde(flatten)]
    header: Header<'a, FitArgs>,
    resolved: &'a Resolved,
    n: usize,
    n_treated: usize,
    effective_sample_size: GroupSizes,
    unweighted: BalanceReport,
    weighted: BalanceReport,
    fit: &'a FitSummary,
}

pub fn cmd_diagnose(args: &FitArgs) -> CliResult<()> {
    let resolved = config(args.model.resolve(&args.data))?;
    let ds = load(&args.data, None)?;
    let design = expand(&ds, resolved.features)?;
    let fitted = fit_model(&ds, &design, &args.model, &resolved)?;
    let uniform = WeightSet::from_raw(vec![1.0; ds.n()], &ds.t, Provenance::new(resolved.rule, "unweighted", None))?;
    let report = DiagnoseReport {
        header: header("diagnose", args),
        resolved: &resolved,
        n: ds.n(),
        n_treated: ds.n_treated(),
        effective_sample_size: effective_sizes(&fitted.weights),
        unweighted: balance_report(&design, &uniform)?,
        weighted: balance_report(&design, &fitted.weights)?,
        fit: &fitted.summary,
    };
    emit_json(&report, args.out.as_deref())
}

#[derive(Serialize)]
struct OutcomeSummary {
    ridge: f64,
    rows: usize,
    control: Vec<Named>,
    treated: Option<Vec<Named>>,
}

#[derive(Serialize)]
struct EstimateReport<'a> {
    #[serde(flatten)]
    header: Header<'a, EstimateArgs>,
    resolved: &'a Resolved,
    n: usize,
    n_estimation: usize,
    estimate: EffectEstimate,
    sigma_hat: f64,
    sigma_source: &'static str,
    weight_l2: f64,
    naive_ci: Interval,
    honest_ci: Option<HonestCI>,
    outcome_model: Option<OutcomeSummary>,
    fit: &'a FitSummary,
}

fn rows_of(design: &Design, rows: &[usize]) -> Design {
    Design {
        matrix: design.matrix.select_rows(rows.iter()),
        names: design.names.clone(),
        intercept: design.intercept,
    }
}

pub fn cmd_estimate(args: &EstimateArgs) -> CliResult<()> {
    let resolved = config(args.model.resolve(&args.data))?;
    let ridge = args.outcome_model.as_deref().map(parse_outcome_model).transpose();
    let ridge = config(ridge)?;
    let estimand = resolved.rule.estimand();
    if args.aipw {
        if ridge.is_none() {
            return Err(CliError::Config("--aipw needs --outcome-model (ols or ridge:LAMBDA)".into()));
        }
        if !matches!(estimand, Estimand::Att | Estimand::Ate) {
            return Err(CliError::Config(format!("--aipw supports att and ate, not {estimand}")));
        }
        if args.raw_weights {
            return Err(CliError::Config("--aipw uses normalized weights; drop --raw-weights".into()));
        }
    }
    if args.split && ridge.is_none() {
        return Err(CliError::Config("--split needs --outcome-model".into()));
    }
    let mode = match (args.norm_cl, args.norm_cl_mode) {
        (None, None) => None,
        (Some(v), None | Some(NormClModeArg::User)) => Some((NormClMode::User, Some(v))),
        (None, Some(NormClModeArg::User)) => {
            return Err(CliError::Config("--norm-cl-mode user needs --norm-cl".into()));
        }
        (Some(_), Some(NormClModeArg::ResidualPlugin)) => {
            return Err(CliError::Config("--norm-cl conflicts with --norm-cl-mode residual-plugin".into()));
        }
        (None, Some(NormClModeArg::ResidualPlugin)) => {
            if ridge.is_none() || args.aipw || resolved.norm.is_none() {
                return Err(CliError::Config(
                    "residual-plugin needs --outcome-model, a linear fitter and no --aipw".into(),
                ));
            }
            Some((NormClMode::ResidualPlugin, None))
        }
    };
    if mode.is_some() && args.raw_weights {
        return Err(CliError::Config("honest intervals need normalized weights; drop --raw-weights".into()));
    }

    let full = load(&args.data, Some(&args.outcome_col))?;
    let full_design = expand(&full, resolved.features)?;
    let (model_rows, est_rows): (Vec<usize>, Vec<usize>) = if args.split {
        sample_split(full.n(), args.seed)
    } else {
        ((0..full.n()).collect(), (0..full.n()).collect())
    };
    let ds = full.subset(&est_rows)?;
    let design = rows_of(&full_design, &est_rows);
    let fitted = fit_model(&ds, &design, &args.model, &resolved)?;
    let ws = &fitted.weights;

    let mut outcome_summary = None;
    let mut preds: Option<(Vec<f64>, Option<Vec<f64>>)> = None;
    if let Some(ridge) = ridge {
        let md = rows_of(&full_design, &model_rows);
        let my = full.outcome()?;
        let my: Vec<f64> = model_rows.iter().map(|&i| my[i]).collect();
        let mt: Vec<bool> = model_rows.iter().map(|&i| full.t[i]).collect();
        let control: Vec<bool> = mt.iter().map(|v| !v).collect();
        let g0 = OutcomeModel::fit(&md.matrix, &my, &control, ridge)?;
        let g1 = if estimand == Estimand::Ate {
            Some(OutcomeModel::fit(&md.matrix, &my, &mt, ridge)?)
        } else {
            None
        };
        preds = Some((g0.predict(&design.matrix), g1.as_ref().map(|g| g.predict(&design.matrix))));
        outcome_summary = Some(OutcomeSummary {
            ridge,
            rows: model_rows.len(),
            control: named(&md.names, &g0.coefficients),
            treated: g1.as_ref().map(|g| named(&md.names, &g.coefficients)),
        });
    }

    let estimate = match (&preds, args.aipw) {
        (Some((g0, None)), true) => aipw_att(&ds, ws, g0)?,
        (Some((g0, Some(g1))), true) => aipw_ate(&ds, ws, g0, g1)?,
        _ => ipw_estimate(&ds, ws, !args.raw_weights)?,
    };
    let y = ds.outcome()?;
    let (sigma, sigma_source) = match (args.noise_sd, &preds) {
        (Some(s), _) => (s, "given"),
        (None, Some((g0, Some(g1)))) => {
            let g: Vec<f64> = (0..ds.n()).map(|i| if ds.t[i] { g1[i] } else { g0[i] }).collect();
            (sigma_hat(y, &ds.t, Some(&g))?, "outcome_model_residuals")
        }
        (None, _) => (sigma_hat(y, &ds.t, None)?, "pooled_within_group"),
    };
    let weight_l2 = if args.raw_weights {
        ws.raw.iter().map(|w| w * w).sum::<f64>().sqrt() / ds.n() as f64
    } else {
        ws.normalized_l2()
    };
    let naive = naive_ci(estimate.tau_hat, sigma, weight_l2, args.level)?;
    let honest = match mode {
        None => None,
        Some((mode, given)) => {
            let bias_factor = fitted
                .summary
                .bias_factor
                .ok_or_else(|| CliError::Config("this fitter has no bias bound".into()))?;
            let norm_cl = match given {
                Some(v) => v,
                None => {
                    let s = outcome_summary.as_ref().expect("checked above");
                    let coef: Vec<f64> = s.control.iter().map(|c| c.value).collect();
                    match resolved.norm.expect("checked above") {
                        NormKind::L2 => dual_norm(&coef, design.intercept, NormKind::L2),
                        NormKind::L1 => coef[usize::from(design.intercept)..].iter().map(|c| c.abs()).sum(),
                    }
                }
            };
            Some(honest_ci(estimate.tau_hat, bias_factor, norm_cl, mode, sigma, weight_l2, args.level)?)
        }
    };
    let report = EstimateReport {
        header: header("estimate", args),
        resolved: &resolved,
        n: full.n(),
        n_estimation: ds.n(),
        estimate,
        sigma_hat: sigma,
        sigma_source,
        weight_l2,
        naive_ci: naive,
        honest_ci: honest,
        outcome_model: outcome_summary,
        fit: &fitted.summary,
    };
    emit_json(&report, args.out.as_deref())
}

#[derive(Serialize)]
struct SimulateReport<'a> {
    #[serde(flatten)]
    header: Header<'a, SimulateArgs>,
    metrics: Option<CellMetrics>,
    dataset_seed: Option<u64>,
    written: String,
}

fn sim_method(args: &SimulateArgs) -> CliResult<Method> {
    if args.method != SimMethod::Rkhs && args.kernel.is_some() {
        return Err(CliError::Config("--kernel applies to --method rkhs only".into()));
    }
    let cv_target = args.cv_target;
    Ok(match args.method {
        SimMethod::Oracle => Method::Oracle,
        SimMethod::L1 => Method::Regularized { norm: NormKind::L1, cv_target },
        SimMethod::L2 => Method::Regularized { norm: NormKind::L2, cv_target },
        SimMethod::Rkhs => {
            let k = args.kernel.as_deref().ok_or_else(|| CliError::Config("--method rkhs needs --kernel".into()))?;
            Method::Kernel { kernel: config(parse_kernel_spec(k))?, cv_target }
        }
    })
}

fn highdim_spec(args: &SimulateArgs) -> HighDimSpec {
    HighDimSpec {
        n: args.n,
        d: args.dim,
        rho: args.rho,
        s_t: args.s_t,
        s_y: args.s_y,
        sigma: args.noise_sd.unwrap_or(5.0),
    }
}

fn gp_spec(args: &SimulateArgs) -> CliResult<GpSpec> {
    let mut spec = GpSpec::new(
        args.n,
        config(parse_kernel_spec(&args.kernel_f))?,
        config(parse_kernel_spec(&args.kernel_g))?,
    );
    if let Some(s) = args.noise_sd {
        spec.sigma_noise = s;
    }
    Ok(spec)
}

const METRIC_COLUMNS: [&str; 11] = [
    "label",
    "replicates",
    "failures",
    "flagged",
    "rmse",
    "abs_bias",
    "mean_abs_cond_bias",
    "mean_max_bias",
    "coverage_naive",
    "coverage_honest",
    "ci_ratio",
];

fn write_metrics(path: &Path, m: &CellMetrics) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(METRIC_COLUMNS)?;
    w.write_record([
        m.label.clone(),
        m.replicates.to_string(),
        m.failures.to_string(),
        m.flagged.to_string(),
        format!("{:?}", m.rmse),
        format!("{:?}", m.abs_bias),
        format!("{:?}", m.mean_abs_cond_bias),
        format!("{:?}", m.mean_max_bias),
        format!("{:?}", m.coverage_naive),
        format!("{:?}", m.coverage_honest),
        format!("{:?}", m.ci_ratio),
    ])?;
    w.flush()?;
    Ok(())
}

pub fn cmd_simulate(args: &SimulateArgs) -> CliResult<()> {
    if args.noise_sd.is_some_and(|s| !(s >= 0.0 && s.is_finite())) {
        return Err(CliError::Config("--noise-sd must be finite and >= 0".into()));
    }
    let written = args.out.display().to_string();
    if args.emit_data {
        let seed = replicate_seed(args.seed, args.replicate);
        let data = match args.design {
            DesignName::Highdim => gen_highdim(&highdim_spec(args), seed)?.data,
            DesignName::Gp => gen_gp_lowdim(&gp_spec(args)?, seed)?.data,
            DesignName::KangSchafer => gen_kang_schafer(args.n, seed)?.data,
        };
        data.write_csv(&args.out)?;
        return emit_json(
            &SimulateReport {
                header: header("simulate", args),
                metrics: None,
                dataset_seed: Some(seed),
                written,
            },
            None,
        );
    }
    let method = sim_method(args)?;
    let label = format!("{:?}/{:?}", args.design, args.method).to_lowercase();
    let metrics = match args.design {
        DesignName::Highdim => {
            let spec = highdim_spec(args);
            run_replications(&label, args.reps, args.seed, |s| highdim_replicate(&spec, &method, s, args.level))?
        }
        DesignName::Gp => {
            let spec = gp_spec(args)?;
            run_replications(&label, args.reps, args.seed, |s| gp_replicate(&spec, &method, s, args.level))?
        }
        DesignName::KangSchafer => {
            return Err(CliError::Config(
                "kang-schafer data have no outcome; use --emit-data and the fit or diagnose commands".into(),
            ));
        }
    };
    write_metrics(&args.out, &metrics)?;
    emit_json(
        &SimulateReport {
            header: header("simulate", args),
            metrics: Some(metrics),
            dataset_seed: None,
            written,
        },
        None,
    )
}

/// Writes `err` as JSON to standard error.
pub fn report_error(command: &str, err: &CliError) {
    #[derive(Serialize)]
    struct Body<'a> {
        kind: &'a str,
        message: String,
        exit_code: i32,
        command: &'a str,
    }
    #[derive(Serialize)]
    struct Wrapper<'a> {
        error: Body<'a>,
    }
    let body = Wrapper {
        error: Body {
            kind: err.kind(),
            message: err.message(),
            exit_code: err.exit_code(),
            command,
        },
    };
    let text = serde_json::to_string(&body).unwrap_or_else(|_| format!("{{\"error\":{{\"kind\":\"{}\"}}}}", err.kind()));
    let _ = writeln!(std::io::stderr(), "{text}");
}
