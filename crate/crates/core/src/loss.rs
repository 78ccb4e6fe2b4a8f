//! Batch-adaptive minor-class penalties and the losses built on them.
//!
//! The weighted cross-entropy puts a penalty `q(alpha)` on the positive
//! (crack) term only:
//!
//! ```text
//! L = -sum_j [ q * y_j * ln p_j + (1 - y_j) * ln(1 - p_j) ]
//! ```
//!
//! where `alpha` is the share of negative pixels in the whole batch. The soft
//! Jaccard index `(sum y p + lambda) / (sum y + sum p - sum y p + lambda)`
//! enters the holistic loss as the distance `1 - d_J`.

use serde::{Deserialize, Serialize};

use crate::numkit::{ensure_binary, log_sigmoid, sigmoid};
use crate::{Error, Result, Tensor};

/// Logits are clamped to this magnitude before forming raw probabilities.
pub const LOGIT_CLAMP: f64 = 30.0;

/// Tolerance when validating that probabilities lie in `[0, 1]`.
const PROB_TOLERANCE: f64 = 1e-9;

/// Penalty schedule for the minor class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum WeightFamily {
    /// `alpha / (1 - alpha)`.
    Xie,
    /// `beta * (alpha / (1 - alpha))^gamma`.
    Power { beta: f64, gamma: f64 },
    /// `beta * ln(alpha / (1 - alpha))`.
    Log { beta: f64 },
    /// `beta * base^(gamma * (2 alpha - 1))`.
    Exp { beta: f64, base: f64, gamma: f64 },
    /// Fixed penalty, independent of the batch.
    Constant { q: f64 },
}

impl WeightFamily {
    /// The exponential schedule with `base = 10`, `gamma = 1`.
    pub fn exp10(beta: f64) -> Self {
        WeightFamily::Exp {
            beta,
            base: 10.0,
            gamma: 1.0,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            WeightFamily::Xie => "xie",
            WeightFamily::Power { .. } => "power",
            WeightFamily::Log { .. } => "log",
            WeightFamily::Exp { .. } => "exp",
            WeightFamily::Constant { .. } => "constant",
        }
    }

    pub fn beta(&self) -> Option<f64> {
        match *self {
            WeightFamily::Power { beta, .. }
            | WeightFamily::Log { beta }
            | WeightFamily::Exp { beta, .. } => Some(beta),
            _ => None,
        }
    }

    pub fn gamma(&self) -> Option<f64> {
        match *self {
            WeightFamily::Power { gamma, .. } | WeightFamily::Exp { gamma, .. } => Some(gamma),
            _ => None,
        }
    }

    /// Same family with `beta` replaced; `None` for families without one.
    pub fn with_beta(&self, beta: f64) -> Option<Self> {
        match *self {
            WeightFamily::Power { gamma, .. } => Some(WeightFamily::Power { beta, gamma }),
            WeightFamily::Log { .. } => Some(WeightFamily::Log { beta }),
            WeightFamily::Exp { base, gamma, .. } => Some(WeightFamily::Exp { beta, base, gamma }),
            _ => None,
        }
    }
}

/// Penalty family plus the additive pixel-count smoothing used for `alpha`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightSpec {
    #[serde(flatten)]
    pub family: WeightFamily,
    #[serde(default = "default_count_smoothing")]
    pub count_smoothing: f64,
}

fn default_count_smoothing() -> f64 {
    1.0
}

impl WeightSpec {
    pub fn new(family: WeightFamily, count_smoothing: f64) -> Result<Self> {
        let spec = Self {
            family,
            count_smoothing,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Family with the default add-one count smoothing.
    pub fn smoothed(family: WeightFamily) -> Self {
        Self {
            family,
            count_smoothing: default_count_smoothing(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| v > 0.0 && v <= 1.0;
        if !(self.count_smoothing >= 0.0 && self.count_smoothing.is_finite()) {
            return Err(Error::config(
                "count_smoothing",
                format!("must be finite and >= 0, got {}", self.count_smoothing),
            ));
        }
        match self.family {
            WeightFamily::Xie => {}
            WeightFamily::Power { beta, gamma } => {
                if !in_unit(beta) {
                    return Err(Error::config("beta", format!("power needs 0 < beta <= 1, got {beta}")));
                }
                if !in_unit(gamma) {
                    return Err(Error::config("gamma", format!("power needs 0 < gamma <= 1, got {gamma}")));
                }
            }
            WeightFamily::Log { beta } => {
                if !in_unit(beta) {
                    return Err(Error::config("beta", format!("log needs 0 < beta <= 1, got {beta}")));
                }
            }
            WeightFamily::Exp { beta, base, gamma } => {
                if !in_unit(beta) {
                    return Err(Error::config("beta", format!("exp needs 0 < beta <= 1, got {beta}")));
                }
                if !(base > 1.0 && base.is_finite()) {
                    return Err(Error::config("base", format!("exp needs base > 1, got {base}")));
                }
                if !(0.0..=1.0).contains(&gamma) {
                    return Err(Error::config("gamma", format!("exp needs 0 <= gamma <= 1, got {gamma}")));
                }
            }
            WeightFamily::Constant { q } => {
                if !(q > 0.0 && q.is_finite()) {
                    return Err(Error::config("q", format!("constant needs q > 0, got {q}")));
                }
            }
        }
        Ok(())
    }
}

/// Trade-off coefficients of `a * WCE + b * (1 - d_J)` and the Jaccard smoothing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HolisticConfig {
    pub a: f64,
    pub b: f64,
    pub lambda: f64,
}

impl Default for HolisticConfig {
    fn default() -> Self {
        Self {
            a: 1.0,
            b: 0.0,
            lambda: 1.0,
        }
    }
}

impl HolisticConfig {
    pub fn new(a: f64, b: f64, lambda: f64) -> Result<Self> {
        let cfg = Self { a, b, lambda };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a >= 0.0 && self.a.is_finite()) {
            return Err(Error::config("a", format!("must be >= 0, got {}", self.a)));
        }
        if !(self.b >= 0.0 && self.b.is_finite()) {
            return Err(Error::config("b", format!("must be >= 0, got {}", self.b)));
        }
        if self.a + self.b <= 0.0 {
            return Err(Error::config("a", "a + b must be positive"));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("lambda", format!("must be > 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Sum,
    MeanPerPixel,
}

impl Reduction {
    fn factor(self, n: usize) -> f64 {
        match self {
            Reduction::Sum => 1.0,
            Reduction::MeanPerPixel => 1.0 / n as f64,
        }
    }
}

/// Pixel counts of a batch and its (smoothed) negative share.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchStats {
    pub neg_count: u64,
    pub pos_count: u64,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grad_logits: Tensor,
}

/// Counts negatives and positives over the whole batch and returns
/// `alpha = (neg + eps) / (neg + pos + 2 eps)`.
pub fn compute_alpha(masks: &Tensor, count_smoothing: f64) -> Result<BatchStats> {
    ensure_binary(masks)?;
    if !(count_smoothing >= 0.0 && count_smoothing.is_finite()) {
        return Err(Error::Validation(format!(
            "count smoothing must be finite and >= 0, got {count_smoothing}"
        )));
    }
    let pos_count = masks.data().iter().filter(|&&v| v == 1.0).count() as u64;
    let neg_count = masks.len() as u64 - pos_count;
    let alpha = (neg_count as f64 + count_smoothing)
        / ((neg_count + pos_count) as f64 + 2.0 * count_smoothing);
    Ok(BatchStats {
        neg_count,
        pos_count,
        alpha,
    })
}

/// Minor-class penalty for a given negative share `alpha`.
pub fn weight_q(spec: &WeightSpec, alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Domain(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    let ratio = || -> Result<f64> {
        if alpha == 1.0 {
            let hint = if spec.count_smoothing == 0.0 {
                "; set count_smoothing > 0"
            } else {
                ""
            };
            return Err(Error::Domain(format!(
                "alpha == 1 makes alpha/(1-alpha) singular{hint}"
            )));
        }
        Ok(alpha / (1.0 - alpha))
    };
    let q = match spec.family {
        WeightFamily::Xie => ratio()?,
        WeightFamily::Power { beta, gamma } => beta * ratio()?.powf(gamma),
        WeightFamily::Log { beta } => {
            let q = beta * ratio()?.ln();
            if q <= 0.0 {
                return Err(Error::Domain(format!(
                    "log penalty is non-positive for alpha = {alpha} (needs alpha > 0.5)"
                )));
            }
            q
        }
        WeightFamily::Exp { beta, base, gamma } => beta * base.powf(gamma * (2.0 * alpha - 1.0)),
        WeightFamily::Constant { q } => q,
    };
    Ok(q)
}

fn check_pair(logits: &Tensor, mask: &Tensor) -> Result<()> {
    logits.check_same_shape(mask)?;
    ensure_binary(mask)
}

fn check_q(q: f64) -> Result<()> {
    if q > 0.0 && q.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("penalty q must be finite and > 0, got {q}")))
    }
}

/// Weighted cross-entropy with penalty `q` on the positive term.
pub fn wce_forward(logits: &Tensor, mask: &Tensor, q: f64, reduction: Reduction) -> Result<f64> {
    check_pair(logits, mask)?;
    check_q(q)?;
    let total = logits
        .data()
        .iter()
        .zip(mask.data())
        .fold(0.0, |acc, (&z, &y)| {
            let term = if y == 1.0 {
                q * log_sigmoid(z)
            } else {
                log_sigmoid(-z)
            };
            acc - term
        });
    Ok(total * reduction.factor(logits.len()))
}

/// Gradient of [`wce_forward`] with respect to each logit:
/// `p` on negatives and `-q (1 - p)` on positives.
pub fn wce_grad_logits(
    logits: &Tensor,
    mask: &Tensor,
    q: f64,
    reduction: Reduction,
) -> Result<Tensor> {
    check_pair(logits, mask)?;
    check_q(q)?;
    let k = reduction.factor(logits.len());
    logits.zip_with(mask, |z, y| {
        if y == 1.0 {
            -q * sigmoid(-z) * k
        } else {
            sigmoid(z) * k
        }
    })
}

/// Class-balanced form weighting positives by `alpha` and negatives by
/// `1 - alpha`. Equals `(1 - alpha) * wce_forward(q = alpha / (1 - alpha))`.
pub fn balanced_wce_forward(
    logits: &Tensor,
    mask: &Tensor,
    alpha: f64,
    reduction: Reduction,
) -> Result<f64> {
    check_pair(logits, mask)?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Domain(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    let total = logits
        .data()
        .iter()
        .zip(mask.data())
        .fold(0.0, |acc, (&z, &y)| {
            let term = if y == 1.0 {
                alpha * log_sigmoid(z)
            } else {
                (1.0 - alpha) * log_sigmoid(-z)
            };
            acc - term
        });
    Ok(total * reduction.factor(logits.len()))
}

fn check_probs(probs: &Tensor, mask: &Tensor, lambda: f64) -> Result<()> {
    check_pair(probs, mask)?;
    if let Some(i) = probs
        .data()
        .iter()
        .position(|&p| !(-PROB_TOLERANCE..=1.0 + PROB_TOLERANCE).contains(&p))
    {
        return Err(Error::Validation(format!(
            "probability {} at index {i} outside [0, 1]",
            probs.data()[i]
        )));
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::Domain(format!("lambda must be > 0, got {lambda}")));
    }
    Ok(())
}

/// Smoothed intersection and union sums `(I, U)`.
fn jaccard_terms(probs: &Tensor, mask: &Tensor, lambda: f64) -> (f64, f64) {
    let (mut inter, mut sum_y, mut sum_p) = (0.0, 0.0, 0.0);
    for (&p, &y) in probs.data().iter().zip(mask.data()) {
        inter += y * p;
        sum_y += y;
        sum_p += p;
    }
    (inter + lambda, sum_y + sum_p - inter + lambda)
}

/// Soft Jaccard index over the whole batch, in `(0, 1]`.
pub fn soft_jaccard(probs: &Tensor, mask: &Tensor, lambda: f64) -> Result<f64> {
    check_probs(probs, mask, lambda)?;
    let (i, u) = jaccard_terms(probs, mask, lambda);
    Ok(i / u)
}

/// Gradient of the Jaccard distance `1 - d_J` with respect to each probability.
pub fn jaccard_distance_grad(probs: &Tensor, mask: &Tensor, lambda: f64) -> Result<Tensor> {
    check_probs(probs, mask, lambda)?;
    let (i, u) = jaccard_terms(probs, mask, lambda);
    let u2 = u * u;
    probs.zip_with(mask, |_, y| -(y * u - (1.0 - y) * i) / u2)
}

/// Probabilities fed to the Jaccard term: `sigmoid(clamp(z, -30, 30))`.
pub fn jaccard_probs(logits: &Tensor) -> Tensor {
    logits.map(|z| sigmoid(z.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)))
}

/// `a * WCE + b * (1 - d_J)` with `alpha` taken from `mask`, plus its logit gradient.
pub fn holistic(
    logits: &Tensor,
    mask: &Tensor,
    spec: &WeightSpec,
    cfg: &HolisticConfig,
    reduction: Reduction,
) -> Result<LossOutput> {
    spec.validate()?;
    cfg.validate()?;
    check_pair(logits, mask)?;
    let stats = compute_alpha(mask, spec.count_smoothing)?;
    let q = weight_q(spec, stats.alpha)?;
    holistic_with_q(logits, mask, q, cfg, reduction)
}

/// [`holistic`] with an explicit penalty instead of one derived from the mask.
pub fn holistic_with_q(
    logits: &Tensor,
    mask: &Tensor,
    q: f64,
    cfg: &HolisticConfig,
    reduction: Reduction,
) -> Result<LossOutput> {
    let mut value = 0.0;
    let mut grad = Tensor::zeros(logits.shape().to_vec());
    if cfg.a != 0.0 {
        value += cfg.a * wce_forward(logits, mask, q, reduction)?;
        grad.axpy(cfg.a, &wce_grad_logits(logits, mask, q, reduction)?)?;
    }
    if cfg.b != 0.0 {
        let probs = jaccard_probs(logits);
        value += cfg.b * (1.0 - soft_jaccard(&probs, mask, cfg.lambda)?);
        let dp = jaccard_distance_grad(&probs, mask, cfg.lambda)?;
        for ((g, &d), &p) in grad.data_mut().iter_mut().zip(dp.data()).zip(probs.data()) {
            *g += cfg.b * d * p * (1.0 - p);
        }
    }
    if !value.is_finite() {
        return Err(Error::Numerical(format!("holistic loss is {value}")));
    }
    Ok(LossOutput {
        value,
        grad_logits: grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::SeededRng;
    use proptest::prelude::*;

    const LN2: f64 = std::f64::consts::LN_2;

    fn t(v: &[f64]) -> Tensor {
        Tensor::from_vec(v.to_vec()).unwrap()
    }

    fn exp10(beta: f64) -> WeightSpec {
        WeightSpec::new(WeightFamily::exp10(beta), 0.0).unwrap()
    }

    #[test]
    fn alpha_examples() {
        let mut m = vec![0.0; 100];
        m[17] = 1.0;
        let s = compute_alpha(&t(&m), 0.0).unwrap();
        assert_eq!((s.neg_count, s.pos_count), (99, 1));
        assert!((s.alpha - 0.99).abs() < 1e-15);

        let s = compute_alpha(&t(&[1.0; 8]), 0.0).unwrap();
        assert_eq!(s.alpha, 0.0);

        // 1.11% positives in a 10,000-pixel batch.
        let mut m = vec![0.0; 10_000];
        m.iter_mut().take(111).for_each(|v| *v = 1.0);
        let s = compute_alpha(&t(&m), 0.0).unwrap();
        assert!((s.alpha - 0.9889).abs() < 1e-12);

        let s = compute_alpha(&t(&[0.0; 4]), 1.0).unwrap();
        assert!((s.alpha - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn alpha_rejects_non_binary_with_index() {
        let err = compute_alpha(&t(&[0.0, 1.0, 0.5]), 0.0).unwrap_err();
        match err {
            Error::NonBinary { value, index } => {
                assert_eq!(value, 0.5);
                assert_eq!(index, 2);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn weight_examples() {
        let xie = WeightSpec::new(WeightFamily::Xie, 0.0).unwrap();
        assert!((weight_q(&xie, 0.96).unwrap() - 24.0).abs() < 1e-12);
        assert_eq!(weight_q(&exp10(1.0), 1.0).unwrap(), 10.0);
        assert_eq!(weight_q(&exp10(1.0), 0.5).unwrap(), 1.0);
        let pow = WeightSpec::new(WeightFamily::Power { beta: 1.0, gamma: 1.0 }, 0.0).unwrap();
        assert!((weight_q(&pow, 0.9).unwrap() - 9.0).abs() < 1e-12);
        assert_eq!(weight_q(&pow, 0.9).unwrap(), weight_q(&xie, 0.9).unwrap());
    }

    #[test]
    fn weight_errors() {
        let xie = WeightSpec::new(WeightFamily::Xie, 0.0).unwrap();
        let msg = weight_q(&xie, 1.0).unwrap_err().to_string();
        assert!(msg.contains("count_smoothing"), "{msg}");
        let log = WeightSpec::new(WeightFamily::Log { beta: 0.9 }, 0.0).unwrap();
        assert!(weight_q(&log, 0.5).is_err());
        assert!(weight_q(&log, 0.3).is_err());
        assert!(weight_q(&log, 0.99).unwrap() > 0.0);
        assert!(weight_q(&xie, 1.5).is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(WeightSpec::new(WeightFamily::Power { beta: 0.0, gamma: 0.5 }, 1.0).is_err());
        assert!(WeightSpec::new(WeightFamily::Power { beta: 0.5, gamma: 1.5 }, 1.0).is_err());
        assert!(WeightSpec::new(WeightFamily::Log { beta: 1.2 }, 1.0).is_err());
        assert!(WeightSpec::new(WeightFamily::Exp { beta: 0.5, base: 1.0, gamma: 1.0 }, 1.0).is_err());
        assert!(WeightSpec::new(WeightFamily::Exp { beta: 0.5, base: 10.0, gamma: 0.0 }, 1.0).is_ok());
        assert!(WeightSpec::new(WeightFamily::Constant { q: 0.0 }, 1.0).is_err());
        assert!(WeightSpec::new(WeightFamily::Xie, -1.0).is_err());
        assert!(HolisticConfig::new(0.0, 0.0, 1.0).is_err());
        assert!(HolisticConfig::new(1.0, 0.0, 0.0).is_err());
        assert!(HolisticConfig::new(20.0, 1.0, 1.0).is_ok());
    }

    #[test]
    fn wce_examples() {
        let v = wce_forward(&t(&[30.0]), &t(&[1.0]), 5.0, Reduction::Sum).unwrap();
        assert!(v.abs() < 1e-12);
        let v = wce_forward(&t(&[0.0]), &t(&[0.0]), 7.0, Reduction::Sum).unwrap();
        assert!((v - LN2).abs() < 1e-15);
        let v = wce_forward(&t(&[0.0, 0.0]), &t(&[1.0, 0.0]), 2.0, Reduction::Sum).unwrap();
        assert!((v - 3.0 * LN2).abs() < 1e-15);
        let m = wce_forward(&t(&[0.0, 0.0]), &t(&[1.0, 0.0]), 2.0, Reduction::MeanPerPixel).unwrap();
        assert!((m - 1.5 * LN2).abs() < 1e-15);
        assert!(wce_forward(&t(&[0.0]), &t(&[0.3]), 1.0, Reduction::Sum).is_err());
        assert!(wce_forward(&t(&[0.0, 1.0]), &t(&[1.0]), 1.0, Reduction::Sum).is_err());
    }

    #[test]
    fn wce_grad_examples() {
        let g = wce_grad_logits(&t(&[800.0]), &t(&[1.0]), 4.0, Reduction::Sum).unwrap();
        assert_eq!(g.data()[0], 0.0);
        let g = wce_grad_logits(&t(&[0.0]), &t(&[0.0]), 4.0, Reduction::Sum).unwrap();
        assert_eq!(g.data()[0], 0.5);
        let g = wce_grad_logits(&t(&[0.0, 0.0]), &t(&[1.0, 0.0]), 4.0, Reduction::MeanPerPixel).unwrap();
        assert_eq!(g.data(), &[-1.0, 0.25]);
    }

    #[test]
    fn jaccard_examples() {
        let m = t(&[1.0, 0.0, 1.0, 0.0]);
        assert!((soft_jaccard(&m, &m, 1.0).unwrap() - 1.0).abs() < 1e-15);
        let z = t(&[0.0; 4]);
        assert_eq!(soft_jaccard(&z, &z, 0.3).unwrap(), 1.0);
        let v = soft_jaccard(&t(&[0.5, 0.5]), &t(&[1.0, 0.0]), 1.0).unwrap();
        assert!((v - 0.6).abs() < 1e-15);
        assert!(soft_jaccard(&t(&[1.2]), &t(&[1.0]), 1.0).is_err());
        assert!(soft_jaccard(&t(&[0.5]), &t(&[1.0]), 0.0).is_err());
    }

    #[test]
    fn jaccard_grad_examples() {
        let lambda = 0.25;
        let g = jaccard_distance_grad(&t(&[0.0]), &t(&[0.0]), lambda).unwrap();
        assert!((g.data()[0] - 1.0 / lambda).abs() < 1e-12);
        // I == U when probs == mask, so positives get -1/U and negatives I/U^2 = 1/U.
        let m = t(&[1.0, 0.0, 1.0]);
        let g = jaccard_distance_grad(&m, &m, 1.0).unwrap();
        let u = 3.0;
        assert!((g.data()[0] + 1.0 / u).abs() < 1e-15);
        assert!((g.data()[1] - 1.0 / u).abs() < 1e-15);
    }

    #[test]
    fn holistic_examples() {
        let mut rng = SeededRng::new(3);
        let logits = rng.normal_tensor([2, 8, 8], 0.0, 2.0);
        let mask = rng.uniform_tensor([2, 8, 8], 0.0, 1.0).map(|u| (u < 0.2) as u8 as f64);
        let spec = WeightSpec::smoothed(WeightFamily::exp10(0.75));
        let q = weight_q(&spec, compute_alpha(&mask, 1.0).unwrap().alpha).unwrap();

        let only_wce = holistic(&logits, &mask, &spec, &HolisticConfig::new(1.0, 0.0, 1.0).unwrap(), Reduction::Sum).unwrap();
        assert_eq!(only_wce.value, wce_forward(&logits, &mask, q, Reduction::Sum).unwrap());
        assert_eq!(only_wce.grad_logits, wce_grad_logits(&logits, &mask, q, Reduction::Sum).unwrap());

        let mixed = holistic(&logits, &mask, &spec, &HolisticConfig::new(20.0, 1.0, 1.0).unwrap(), Reduction::Sum).unwrap();
        let expected = 20.0 * wce_forward(&logits, &mask, q, Reduction::Sum).unwrap()
            + (1.0 - soft_jaccard(&jaccard_probs(&logits), &mask, 1.0).unwrap());
        assert!((mixed.value - expected).abs() <= 1e-12 * expected.abs().max(1.0));

        // Perfectly separated logits: distance term vanishes.
        let perfect = mask.map(|y| if y == 1.0 { 40.0 } else { -40.0 });
        let out = holistic(&perfect, &mask, &spec, &HolisticConfig::new(0.0, 1.0, 1.0).unwrap(), Reduction::Sum).unwrap();
        assert!(out.value.abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn exp_bound(beta in 1e-6f64..=1.0, alpha in 0.0f64..=1.0) {
            let q = weight_q(&exp10(beta), alpha).unwrap();
            prop_assert!(q <= 10.0);
            prop_assert!(q <= 10.0 * beta);
        }

        #[test]
        fn power_one_is_xie(alpha in 0.0f64..0.999_999) {
            let xie = WeightSpec::new(WeightFamily::Xie, 0.0).unwrap();
            let pow = WeightSpec::new(WeightFamily::Power { beta: 1.0, gamma: 1.0 }, 0.0).unwrap();
            let (a, b) = (weight_q(&xie, alpha).unwrap(), weight_q(&pow, alpha).unwrap());
            prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
        }

        #[test]
        fn families_increase_above_half(lo in 0.501f64..0.99, step in 1e-4f64..0.009) {
            let hi = lo + step;
            for family in [
                WeightFamily::Xie,
                WeightFamily::Power { beta: 0.5, gamma: 0.5 },
                WeightFamily::Log { beta: 0.9 },
                WeightFamily::exp10(0.75),
                WeightFamily::Exp { beta: 0.3, base: 2.5, gamma: 0.4 },
            ] {
                let spec = WeightSpec::new(family, 0.0).unwrap();
                prop_assert!(weight_q(&spec, hi).unwrap() > weight_q(&spec, lo).unwrap(), "{:?}", family);
            }
        }

        #[test]
        fn jaccard_in_unit_interval(seed in any::<u64>(), lambda in 1e-3f64..10.0) {
            let mut rng = SeededRng::new(seed);
            let p = rng.uniform_tensor([16], 0.0, 1.0);
            let y = rng.uniform_tensor([16], 0.0, 1.0).map(|u| (u < 0.3) as u8 as f64);
            let j = soft_jaccard(&p, &y, lambda).unwrap();
            prop_assert!(j > 0.0 && j <= 1.0);
        }
    }
}
