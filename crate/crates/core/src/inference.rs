//! Confidence intervals that account for worst-case imbalance bias.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Standard normal quantile by Wichura's algorithm AS 241 (PPND16), accurate
/// to about 1e-16 relative.
pub fn normal_quantile(p: f64) -> f64 {
    const A: [f64; 8] = [
        3.387_132_872_796_366_5,
        1.331_416_678_917_843_8e2,
        1.971_590_950_306_551_3e3,
        1.373_169_376_550_946e4,
        4.592_195_393_154_987e4,
        6.726_577_092_700_87e4,
        3.343_057_558_358_813e4,
        2.509_080_928_730_122_7e3,
    ];
    const B: [f64; 8] = [
        1.0,
        4.231_333_070_160_091e1,
        6.871_870_074_920_579e2,
        5.394_196_021_424_751e3,
        2.121_379_430_158_659_7e4,
        3.930_789_580_009_271e4,
        2.872_908_573_572_194_3e4,
        5.226_495_278_852_545e3,
    ];
    const C: [f64; 8] = [
        1.423_437_110_749_683_5,
        4.630_337_846_156_545_4,
        5.769_497_221_460_691,
        3.647_848_324_763_204_5,
        1.270_458_252_452_368_4,
        2.417_807_251_774_506e-1,
        2.272_384_498_926_918_4e-2,
        7.745_450_142_783_414e-4,
    ];
    const D: [f64; 8] = [
        1.0,
        2.053_191_626_637_759,
        1.676_384_830_183_803_8,
        6.897_673_349_851e-1,
        1.481_039_764_274_800_8e-1,
        1.519_866_656_361_645_7e-2,
        5.475_938_084_995_345e-4,
        1.050_750_071_644_416_9e-9,
    ];
    const E: [f64; 8] = [
        6.657_904_643_501_103,
        5.463_784_911_164_114,
        1.784_826_539_917_291_3,
        2.965_605_718_285_048_7e-1,
        2.653_218_952_657_612_4e-2,
        1.242_660_947_388_078_4e-3,
        2.711_555_568_743_487_6e-5,
        2.010_334_399_292_288_1e-7,
    ];
    const F: [f64; 8] = [
        1.0,
        5.998_322_065_558_88e-1,
        1.369_298_809_227_358e-1,
        1.487_536_129_085_061_5e-2,
        7.868_691_311_456_133e-4,
        1.846_318_317_510_054_8e-5,
        1.421_511_758_316_446e-7,
        2.044_263_103_389_939_7e-15,
    ];
    fn poly(c: &[f64; 8], x: f64) -> f64 {
        c.iter().rev().fold(0.0, |acc, &k| acc * x + k)
    }
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        return q * poly(&A, r) / poly(&B, r);
    }
    let r = if q < 0.0 { p } else { 1.0 - p };
    let r = (-r.ln()).sqrt();
    let val = if r <= 5.0 {
        let r = r - 1.6;
        poly(&C, r) / poly(&D, r)
    } else {
        let r = r - 5.0;
        poly(&E, r) / poly(&F, r)
    };
    if q < 0.0 {
        -val
    } else {
        val
    }
}

/// Where the bound on the outcome-function norm came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormClMode {
    /// True norm, known in simulations.
    Oracle,
    /// Bound supplied by the user.
    User,
    /// Norm of a fitted outcome regression. Not a confidence limit, so the
    /// resulting interval is not honest.
    ResidualPlugin,
}

impl NormClMode {
    pub fn is_honest(&self) -> bool {
        !matches!(self, NormClMode::ResidualPlugin)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub center: f64,
    pub lower: f64,
    pub upper: f64,
    pub half_width: f64,
    pub level: f64,
}

impl Interval {
    fn new(center: f64, half_width: f64, level: f64) -> Self {
        Self {
            center,
            lower: center - half_width,
            upper: center + half_width,
            half_width,
            level,
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lower <= v && v <= self.upper
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HonestCI {
    pub interval: Interval,
    pub half_width_bias: f64,
    pub half_width_noise: f64,
    pub norm_cl: f64,
    pub norm_cl_mode: NormClMode,
    pub honest: bool,
}

fn check_level(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidInput(format!("level must lie in (0, 1), got {level}")));
    }
    Ok(normal_quantile(1.0 - (1.0 - level) / 2.0))
}

fn check_nonneg(v: f64, what: &str) -> Result<()> {
    if !(v >= 0.0 && v.is_finite()) {
        return Err(Error::InvalidInput(format!("{what} must be finite and >= 0, got {v}")));
    }
    Ok(())
}

/// `center +- sigma_hat * ||w||_2 * z`.
pub fn naive_ci(center: f64, sigma_hat: f64, weight_l2: f64, level: f64) -> Result<Interval> {
    let z = check_level(level)?;
    check_nonneg(sigma_hat, "sigma_hat")?;
    check_nonneg(weight_l2, "weight norm")?;
    Ok(Interval::new(center, sigma_hat * weight_l2 * z, level))
}

/// `center +- [bias_factor * norm_cl + sigma_hat * ||w||_2 * z]`, where
/// `bias_factor` is the worst-case imbalance per unit outcome-function norm
/// on the estimator's weight scale.
pub fn honest_ci(
    center: f64,
    bias_factor: f64,
    norm_cl: f64,
    norm_cl_mode: NormClMode,
    sigma_hat: f64,
    weight_l2: f64,
    level: f64,
) -> Result<HonestCI> {
    check_nonneg(bias_factor, "bias factor")?;
    check_nonneg(norm_cl, "norm_cl")?;
    let naive = naive_ci(center, sigma_hat, weight_l2, level)?;
    let bias = bias_factor * norm_cl;
    Ok(HonestCI {
        interval: Interval::new(center, bias + naive.half_width, level),
        half_width_bias: bias,
        half_width_noise: naive.half_width,
        norm_cl,
        norm_cl_mode,
        honest: norm_cl_mode.is_honest(),
    })
}

/// Residual standard deviation: with predictions, `sqrt(sum (y - g)^2 / n)`;
/// otherwise the pooled within-group SD with `n - 2` degrees of freedom.
pub fn sigma_hat(y: &[f64], t: &[bool], g_hat: Option<&[f64]>) -> Result<f64> {
    let n = y.len();
    if n < 4 {
        return Err(Error::InvalidInput(format!("need at least 4 outcomes, got {n}")));
    }
    if t.len() != n {
        return Err(Error::InvalidInput("treatment and outcome lengths differ".into()));
    }
    if let Some(g) = g_hat {
        if g.len() != n {
            return Err(Error::InvalidInput("prediction length mismatch".into()));
        }
        let ss: f64 = y.iter().zip(g).map(|(a, b)| (a - b).powi(2)).sum();
        return Ok((ss / n as f64).sqrt());
    }
    let mut ss = 0.0;
    for g in [true, false] {
        let v: Vec<f64> = y.iter().zip(t).filter(|(_, &ti)| ti == g).map(|(&a, _)| a).collect();
        let m = v.iter().sum::<f64>() / v.len().max(1) as f64;
        ss += v.iter().map(|a| (a - m).powi(2)).sum::<f64>();
    }
    Ok((ss / (n as f64 - 2.0)).sqrt())
}

/// Deterministic split of `0..n` into two halves of sizes `floor(n/2)` and
/// `n - floor(n/2)`, shuffled by `seed`.
pub fn sample_split(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = crate::simulate::SimRng::new(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.below(i + 1);
        idx.swap(i, j);
    }
    let second = idx.split_off(n / 2);
    (idx, second)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantile_values() {
        assert!((normal_quantile(0.975) - 1.959_963_984_540_054).abs() < 1e-12);
        assert!((normal_quantile(0.5)).abs() < 1e-16);
        assert!((normal_quantile(0.025) + 1.959_963_984_540_054).abs() < 1e-12);
        assert!((normal_quantile(1e-10) + 6.361_340_902_404_056).abs() < 1e-9);
    }

    #[test]
    fn trivial_interval() {
        let ci = honest_ci(0.0, 0.0, 3.0, NormClMode::User, 1.0, 1.0, 0.95).unwrap();
        assert!((ci.interval.half_width - 1.959_963_984_540_054).abs() < 1e-12);
        let naive = naive_ci(0.0, 1.0, 1.0, 0.95).unwrap();
        let zero = honest_ci(0.0, 0.7, 0.0, NormClMode::User, 1.0, 1.0, 0.95).unwrap();
        assert_eq!(zero.interval, naive);
        assert!(honest_ci(0.0, -1.0, 1.0, NormClMode::User, 1.0, 1.0, 0.95).is_err());
    }

    #[test]
    fn sigma_examples() {
        let t = [true, false, true, false];
        assert_eq!(sigma_hat(&[2.0; 4], &t, None).unwrap(), 0.0);
        assert!(sigma_hat(&[1.0; 3], &t[..3], None).is_err());
    }

    #[test]
    fn split_is_a_partition() {
        let (a, b) = sample_split(11, 3);
        assert_eq!(a.len(), 5);
        let mut all: Vec<usize> = a.into_iter().chain(b).collect();
        all.sort();
        assert_eq!(all, (0..11).collect::<Vec<_>>());
    }
}
