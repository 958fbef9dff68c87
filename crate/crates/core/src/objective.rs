//! Loss terms of the aWAE objective and their gradients.
//!
//! The total loss minimized for a batch is
//!
//! ```text
//! total = reconstruction + beta * smv + alpha * mi + delta * sparse
//! ```
//!
//! Reconstruction costs are negated log-likelihoods (or the missing
//! information loss) averaged over the batch. `smv` pools one mean and one
//! variance over every latent entry of the batch. `mi` is an unbiased MMD^2
//! estimate between the encoded batch and samples from the N(0, I) prior.
//! `sparse` is `(lambda1 ||Z - SA||_F^2 + lambda2 ||S||_1) / n` with S and A
//! held fixed.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::log_softmax_rows;
use crate::nn::{ForwardTape, OutputActivation};

/// Lower bound applied to the pooled latent variance.
pub const VARIANCE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostKind {
    Multinomial,
    MultinomialNonclick,
    Mil,
}

impl CostKind {
    pub fn output_activation(self) -> OutputActivation {
        match self {
            CostKind::Multinomial | CostKind::MultinomialNonclick => OutputActivation::Softmax,
            CostKind::Mil => OutputActivation::Sigmoid,
        }
    }
}

impl fmt::Display for CostKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CostKind::Multinomial => "multinomial",
            CostKind::MultinomialNonclick => "multinomial_nonclick",
            CostKind::Mil => "mil",
        })
    }
}

impl FromStr for CostKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multinomial" => Ok(CostKind::Multinomial),
            "multinomial_nonclick" => Ok(CostKind::MultinomialNonclick),
            "mil" => Ok(CostKind::Mil),
            _ => Err(Error::InvalidArgument(format!("unknown cost kind `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveConfig {
    pub cost_kind: CostKind,
    /// Weight of the SMV divergence.
    pub beta: f64,
    /// Weight of the mutual-information (MMD) term.
    pub alpha: f64,
    /// Weight of the sparse-coding penalty.
    pub delta: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Non-click weight for [`CostKind::MultinomialNonclick`].
    pub gamma: f64,
    /// Use `log(1 - x')` for the non-click term instead of `log x'`.
    pub nonclick_complement: bool,
    pub gamma_plus: f64,
    pub a_mi: f64,
    pub gamma_mi: i32,
    pub mmd_bandwidth: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            cost_kind: CostKind::Multinomial,
            beta: 1.0,
            alpha: 0.05,
            delta: 0.1,
            lambda1: 1.0,
            lambda2: 0.1,
            gamma: 0.1,
            nonclick_complement: false,
            gamma_plus: 1.0,
            a_mi: 1e6,
            gamma_mi: 12,
            mmd_bandwidth: 1.0,
        }
    }
}

impl ObjectiveConfig {
    /// Same reconstruction cost with every regularizer switched off.
    pub fn unregularized(&self) -> Self {
        Self {
            beta: 0.0,
            alpha: 0.0,
            delta: 0.0,
            ..*self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("beta", self.beta),
            ("alpha", self.alpha),
            ("delta", self.delta),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("gamma", self.gamma),
        ];
        for (name, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidArgument(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !(self.mmd_bandwidth > 0.0 && self.mmd_bandwidth.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "mmd_bandwidth must be positive, got {}",
                self.mmd_bandwidth
            )));
        }
        if self.gamma_mi < 1 {
            return Err(Error::InvalidArgument("gamma_mi must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub reconstruction: f64,
    pub smv: f64,
    pub mi: f64,
    pub sparse: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn compose(reconstruction: f64, smv: f64, mi: f64, sparse: f64, cfg: &ObjectiveConfig) -> Self {
        let total = reconstruction + cfg.beta * smv + cfg.alpha * mi + cfg.delta * sparse;
        Self {
            reconstruction,
            smv,
            mi,
            sparse,
            total,
        }
    }

    /// Name of the first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [
            ("reconstruction", self.reconstruction),
            ("smv", self.smv),
            ("mi", self.mi),
            ("sparse", self.sparse),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

fn check_same_shape(a: &DMatrix<f64>, b: &DMatrix<f64>, what: &str) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())))
    }
}

/// Negative multinomial log-likelihood from softmax logits, averaged over
/// the batch. Returns the value and its gradient w.r.t. the logits,
/// `(M_i * softmax - x) / n`.
pub fn cost_multinomial(x: &DMatrix<f64>, logits: &DMatrix<f64>) -> Result<(f64, DMatrix<f64>)> {
    weighted_multinomial(x, logits, |xv| xv)
}

/// Weighted multinomial cost `-(1/n) sum [x + gamma (1 - x)] log softmax`.
/// With `complement`, the non-click part uses `log(1 - softmax)` instead.
pub fn cost_multinomial_nonclick(
    x: &DMatrix<f64>,
    logits: &DMatrix<f64>,
    gamma: f64,
    complement: bool,
) -> Result<(f64, DMatrix<f64>)> {
    if !complement {
        return weighted_multinomial(x, logits, |xv| xv + gamma * (1.0 - xv));
    }
    let (click_value, mut grad) = weighted_multinomial(x, logits, |xv| xv)?;
    let n = x.nrows() as f64;
    let log_p = log_softmax_rows(logits);
    let mut value = 0.0;
    for r in 0..x.nrows() {
        // s = sum_j c_j p_j / (1 - p_j) with c = 1 - x.
        let mut s = 0.0;
        for c in 0..x.ncols() {
            let p = log_p[(r, c)].exp();
            let q = (1.0 - p).max(f64::MIN_POSITIVE);
            let w = 1.0 - x[(r, c)];
            value -= gamma * w * q.ln();
            s += w * p / q;
        }
        for c in 0..x.ncols() {
            let p = log_p[(r, c)].exp();
            let q = (1.0 - p).max(f64::MIN_POSITIVE);
            let w = 1.0 - x[(r, c)];
            // d/dl_k of -gamma * sum_j c_j log(1 - p_j)
            grad[(r, c)] += gamma * (w * p / q - p * s) / n;
        }
    }
    Ok((click_value + value / n, grad))
}

fn weighted_multinomial(
    x: &DMatrix<f64>,
    logits: &DMatrix<f64>,
    weight: impl Fn(f64) -> f64,
) -> Result<(f64, DMatrix<f64>)> {
    check_same_shape(x, logits, "multinomial cost")?;
    let n = x.nrows() as f64;
    let log_p = log_softmax_rows(logits);
    let mut grad = DMatrix::zeros(x.nrows(), x.ncols());
    let mut value = 0.0;
    for r in 0..x.nrows() {
        let mut total_weight = 0.0;
        for c in 0..x.ncols() {
            let w = weight(x[(r, c)]);
            if w != 0.0 {
                value -= w * log_p[(r, c)];
            }
            total_weight += w;
        }
        for c in 0..x.ncols() {
            let w = weight(x[(r, c)]);
            grad[(r, c)] = (total_weight * log_p[(r, c)].exp() - w) / n;
        }
    }
    Ok((value / n, grad))
}

/// Missing information loss on sigmoid outputs, averaged over the batch:
///
/// ```text
/// 0.5 x (1 + x) (1 - x')^gamma_plus + 0.5 (1 + x) (1 - x') A_MI (x' - 0.5)^(2 gamma_MI)
/// ```
///
/// Returns the value and its gradient w.r.t. the activated output x'.
pub fn cost_mil(
    x: &DMatrix<f64>,
    x_prime: &DMatrix<f64>,
    cfg: &ObjectiveConfig,
) -> Result<(f64, DMatrix<f64>)> {
    check_same_shape(x, x_prime, "MIL cost")?;
    if let Some(bad) = x_prime.iter().find(|&&v| !(v > 0.0 && v < 1.0)) {
        return Err(Error::InvalidArgument(format!(
            "MIL needs outputs strictly inside (0, 1), got {bad}"
        )));
    }
    let n = x.nrows() as f64;
    let gp = cfg.gamma_plus;
    let two_g = 2 * cfg.gamma_mi;
    let mut value = 0.0;
    let grad = x.zip_map(x_prime, |xv, p| {
        let miss = 1.0 - p;
        let centered = p - 0.5;
        let pow_hi = centered.powi(two_g);
        let t1 = 0.5 * xv * (1.0 + xv) * miss.powf(gp);
        let t2 = 0.5 * (1.0 + xv) * miss * cfg.a_mi * pow_hi;
        value += t1 + t2;
        let d1 = if gp == 0.0 {
            0.0
        } else {
            -0.5 * xv * (1.0 + xv) * gp * miss.powf(gp - 1.0)
        };
        let d2 = 0.5
            * (1.0 + xv)
            * cfg.a_mi
            * (-pow_hi + miss * two_g as f64 * centered.powi(two_g - 1));
        (d1 + d2) / n
    });
    Ok((value / n, grad))
}

/// `(J/2)(mu^2 + var - ln var - 1)`, the SMV divergence for pooled moments.
pub fn smv_from_moments(mean: f64, var: f64, latent_dim: usize) -> f64 {
    let var = var.max(VARIANCE_FLOOR);
    0.5 * latent_dim as f64 * (mean * mean + var - var.ln() - 1.0)
}

/// Sample mean-variance divergence of a latent batch from N(0, 1).
///
/// A single mean and a single (population) variance are computed over all
/// `n * h` entries; `J = h`.
pub fn smv_divergence(z: &DMatrix<f64>) -> Result<(f64, DMatrix<f64>)> {
    let count = z.len();
    if count < 2 {
        return Err(Error::InvalidArgument(
            "SMV divergence needs at least two latent entries".into(),
        ));
    }
    let j = z.ncols() as f64;
    let nf = count as f64;
    let mean = z.iter().sum::<f64>() / nf;
    let raw_var = z.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nf;
    let floored = raw_var < VARIANCE_FLOOR;
    let var = raw_var.max(VARIANCE_FLOOR);
    let value = smv_from_moments(mean, var, z.ncols());
    // dmu/dz = 1/N, dvar/dz = 2 (z - mu) / N
    let var_coef = if floored { 0.0 } else { 1.0 - 1.0 / var };
    let grad = z.map(|v| j / nf * (mean + var_coef * (v - mean)));
    Ok((value, grad))
}

fn imq(sq_dist: f64, c: f64) -> f64 {
    c / (c + sq_dist)
}

/// Gradient of `imq(||a - b||^2)` w.r.t. `a`, accumulated into `out`.
fn imq_grad_into(a: &[f64], b: &[f64], c: f64, scale: f64, out: &mut [f64]) {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    let denom = c + d2;
    let f = -2.0 * c / (denom * denom) * scale;
    for k in 0..a.len() {
        out[k] += f * (a[k] - b[k]);
    }
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Unbiased MMD^2 between the encoded batch and prior samples with the
/// inverse multiquadratic kernel `k(a, b) = C / (C + ||a - b||^2)`,
/// `C = 2 h bandwidth^2`. Pairs with equal indices are excluded from every
/// sum, so identical batches score exactly zero.
pub fn mi_regularizer(
    z: &DMatrix<f64>,
    prior: &DMatrix<f64>,
    bandwidth: f64,
) -> Result<(f64, DMatrix<f64>)> {
    check_same_shape(z, prior, "MMD batches")?;
    let n = z.nrows();
    if n < 2 {
        return Err(Error::InvalidArgument("MMD needs a batch of at least two".into()));
    }
    let h = z.ncols();
    let c = 2.0 * h as f64 * bandwidth * bandwidth;
    let zs = rows_of(z);
    let ps = rows_of(prior);
    let norm = 1.0 / (n * (n - 1)) as f64;

    let mut value = 0.0;
    let mut grad_rows = vec![vec![0.0; h]; n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            value += norm
                * (imq(sq_dist(&zs[i], &zs[j]), c) + imq(sq_dist(&ps[i], &ps[j]), c)
                    - 2.0 * imq(sq_dist(&zs[i], &ps[j]), c));
            // k(z_i, z_j) appears for (i, j) and (j, i): gradient wrt z_i twice.
            imq_grad_into(&zs[i], &zs[j], c, 2.0 * norm, &mut grad_rows[i]);
            imq_grad_into(&zs[i], &ps[j], c, -2.0 * norm, &mut grad_rows[i]);
        }
    }
    let grad = DMatrix::from_fn(n, h, |r, k| grad_rows[r][k]);
    Ok((value, grad))
}

/// `(lambda1 ||Z - S A||_F^2 + lambda2 ||S||_1) / n` and its gradient
/// w.r.t. Z, with S and A held constant.
pub fn sparse_penalty(
    z: &DMatrix<f64>,
    s: &DMatrix<f64>,
    a: &DMatrix<f64>,
    lambda1: f64,
    lambda2: f64,
) -> Result<(f64, DMatrix<f64>)> {
    if s.nrows() != z.nrows() || s.ncols() != a.nrows() || a.ncols() != z.ncols() {
        return Err(Error::Shape(format!(
            "sparse penalty: Z {:?}, S {:?}, A {:?}",
            z.shape(),
            s.shape(),
            a.shape()
        )));
    }
    let n = z.nrows() as f64;
    let resid = z - s * a;
    let l1: f64 = s.iter().map(|v| v.abs()).sum();
    let value = (lambda1 * resid.norm_squared() + lambda2 * l1) / n;
    Ok((value, resid * (2.0 * lambda1 / n)))
}

/// Everything needed to evaluate the total loss on one batch.
pub struct LossInputs<'a> {
    pub x: &'a DMatrix<f64>,
    pub tape: &'a ForwardTape,
    /// Batch codes S and dictionary A; the sparse term is skipped when absent.
    pub codes: Option<(&'a DMatrix<f64>, &'a DMatrix<f64>)>,
    /// Prior samples; the MI term is skipped when absent.
    pub prior: Option<&'a DMatrix<f64>>,
}

#[derive(Debug, Clone)]
pub struct TotalLoss {
    pub breakdown: LossBreakdown,
    /// Gradient to hand to `nn::backward` as `d_output`.
    pub d_output: DMatrix<f64>,
    /// Gradient of the latent-attached terms.
    pub d_z: DMatrix<f64>,
}

pub fn total_loss(inputs: &LossInputs<'_>, cfg: &ObjectiveConfig) -> Result<TotalLoss> {
    let tape = inputs.tape;
    let z = &tape.z;
    let (reconstruction, d_output) = match cfg.cost_kind {
        CostKind::Multinomial => cost_multinomial(inputs.x, tape.logits())?,
        CostKind::MultinomialNonclick => cost_multinomial_nonclick(
            inputs.x,
            tape.logits(),
            cfg.gamma,
            cfg.nonclick_complement,
        )?,
        CostKind::Mil => cost_mil(inputs.x, &tape.output, cfg)?,
    };

    let mut d_z = DMatrix::zeros(z.nrows(), z.ncols());
    let smv = if cfg.beta > 0.0 {
        let (v, g) = smv_divergence(z)?;
        d_z += g * cfg.beta;
        v
    } else {
        0.0
    };
    let mi = match inputs.prior {
        Some(prior) => {
            let (v, g) = mi_regularizer(z, prior, cfg.mmd_bandwidth)?;
            d_z += g * cfg.alpha;
            v
        }
        None => 0.0,
    };
    let sparse = match inputs.codes {
        Some((s, a)) => {
            let (v, g) = sparse_penalty(z, s, a, cfg.lambda1, cfg.lambda2)?;
            d_z += g * cfg.delta;
            v
        }
        None => 0.0,
    };
    Ok(TotalLoss {
        breakdown: LossBreakdown::compose(reconstruction, smv, mi, sparse, cfg),
        d_output,
        d_z,
    })
}
