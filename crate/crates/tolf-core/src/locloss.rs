//! Localization losses over anchor-relative regression targets.
//!
//! Plain squared error, Gaussian negative log-likelihood with a
//! predicted per-coordinate uncertainty, discretized-grid cross-entropy
//! with two-hot targets, and the flow-based negative log-likelihood
//! over normalized residuals, plus its two single-ingredient ablations
//! and closed-form gradient oracles.
//!
//! Every loss exists twice on purpose: a plain `f64` form for
//! evaluation and reporting, and a tape form for training. The pairs
//! are written to agree to machine precision and tests keep them
//! pinned together; the closed-form gradient oracles are checked
//! against the tape, with the flow's input-gradient obtained by finite
//! differences so the two routes share no differentiation code.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::boxgeom::RegressionTarget;
use crate::flowdist::{FlowError, FlowModel, TapeParams, LN_2PI};
use crate::gradcore::{GradError, Tape, Var};

/// Clamp bounds for the log-uncertainty parameter `u`, giving
/// `sigma_hat = exp(u)` in roughly `[2.5e-3, 20]`. Structural
/// positivity plus overflow safety for the `1/sigma^2` terms.
pub const LOG_SIGMA_MIN: f64 = -6.0;
pub const LOG_SIGMA_MAX: f64 = 3.0;

/// Default weight on the flow NLL term inside [`total_loss`].
pub const DEFAULT_LAMBDA: f64 = 0.1;

#[derive(Debug)]
pub enum LossError {
    NonPositiveSigma { index: usize, value: f64 },
    TargetOutOfRange { value: f64, alpha: f64 },
    BadLogits { want: usize, got: usize },
    InvalidConfig { detail: String },
    Flow(FlowError),
    Grad(GradError),
}

impl fmt::Display for LossError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossError::NonPositiveSigma { index, value } => {
                write!(f, "sigma_hat[{index}] must be positive and finite, got {value}")
            }
            LossError::TargetOutOfRange { value, alpha } => {
                write!(f, "target {value} outside the grid range [-{alpha}, {alpha}]")
            }
            LossError::BadLogits { want, got } => {
                write!(f, "logit array has length {got}, grid needs {want}")
            }
            LossError::InvalidConfig { detail } => write!(f, "invalid loss config: {detail}"),
            LossError::Flow(e) => write!(f, "{e}"),
            LossError::Grad(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for LossError {}

impl From<FlowError> for LossError {
    fn from(e: FlowError) -> Self {
        LossError::Flow(e)
    }
}

impl From<GradError> for LossError {
    fn from(e: GradError) -> Self {
        LossError::Grad(e)
    }
}

/// Predicted mean and per-coordinate uncertainty.
///
/// Invariant: every `sigma_hat` entry strictly positive and finite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub t_hat: RegressionTarget,
    sigma_hat: [f64; 4],
}

impl Prediction {
    pub fn new(t_hat: RegressionTarget, sigma_hat: [f64; 4]) -> Result<Self, LossError> {
        for (index, &value) in sigma_hat.iter().enumerate() {
            if !(value > 0.0 && value.is_finite()) {
                return Err(LossError::NonPositiveSigma { index, value });
            }
        }
        Ok(Prediction { t_hat, sigma_hat })
    }

    /// The internal parameterization: `sigma_hat = exp(clamp(u))`.
    /// Total on finite input, positivity is structural.
    pub fn from_log_sigma(t_hat: RegressionTarget, log_sigma: [f64; 4]) -> Self {
        Prediction {
            t_hat,
            sigma_hat: log_sigma.map(|u| u.clamp(LOG_SIGMA_MIN, LOG_SIGMA_MAX).exp()),
        }
    }

    pub fn sigma_hat(&self) -> &[f64; 4] {
        &self.sigma_hat
    }
}

/// The uncertainty-scaled prediction error `(T - T_hat) / sigma_hat`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizedResidual {
    pub t_bar: [f64; 4],
}

pub fn normalized_residual(target: &RegressionTarget, pred: &Prediction) -> NormalizedResidual {
    let t = target.as_array();
    let m = pred.t_hat.as_array();
    let s = pred.sigma_hat;
    NormalizedResidual {
        t_bar: [
            (t[0] - m[0]) / s[0],
            (t[1] - m[1]) / s[1],
            (t[2] - m[2]) / s[2],
            (t[3] - m[3]) / s[3],
        ],
    }
}

/// How a continuous target is spread over its two bracketing grid points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TwoHotMode {
    /// Convex-combination weights: they sum to 1 and the weighted grid
    /// points reproduce the target exactly.
    #[default]
    Convex,
    /// Weights proportional to the distance from each bracketing point,
    /// `|y_i - T| * (n+1) / (2 alpha)`. These do not sum to 1 and weight
    /// the farther point more; kept selectable for comparison only.
    DistanceScaled,
}

/// Grid for discretized supervision: `n + 1` points evenly spaced over
/// `[-alpha, alpha]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GflConfig {
    pub n: usize,
    pub alpha: f64,
    #[serde(default)]
    pub two_hot_mode: TwoHotMode,
}

impl Default for GflConfig {
    fn default() -> Self {
        GflConfig {
            n: 16,
            alpha: 1.0,
            two_hot_mode: TwoHotMode::Convex,
        }
    }
}

impl GflConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if self.n < 1 {
            return Err(LossError::InvalidConfig {
                detail: "grid resolution n must be >= 1".to_string(),
            });
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(LossError::InvalidConfig {
                detail: format!("grid bound alpha must be positive, got {}", self.alpha),
            });
        }
        Ok(())
    }

    pub fn points(&self) -> usize {
        self.n + 1
    }

    /// Grid point `k`; endpoints are exactly `-alpha` and `alpha`.
    pub fn grid_point(&self, k: usize) -> f64 {
        self.alpha * (2.0 * k as f64 - self.n as f64) / self.n as f64
    }

    pub fn grid(&self) -> Vec<f64> {
        (0..=self.n).map(|k| self.grid_point(k)).collect()
    }
}

/// Sparse two-hot weights at the bracketing grid indices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoHot {
    pub i_left: usize,
    pub i_right: usize,
    pub w_left: f64,
    pub w_right: f64,
}

/// Encodes a scalar target onto the grid. Errors when the target lies
/// outside `[-alpha, alpha]`; callers that prefer clamping do it first.
pub fn gfl_encode_twohot(t: f64, cfg: &GflConfig) -> Result<TwoHot, LossError> {
    cfg.validate()?;
    if !t.is_finite() || t < -cfg.alpha || t > cfg.alpha {
        return Err(LossError::TargetOutOfRange {
            value: t,
            alpha: cfg.alpha,
        });
    }
    let step = 2.0 * cfg.alpha / cfg.n as f64;
    let k = (((t + cfg.alpha) / step).floor() as usize).min(cfg.n - 1);
    let y_l = cfg.grid_point(k);
    let y_r = cfg.grid_point(k + 1);
    let (w_left, w_right) = match cfg.two_hot_mode {
        TwoHotMode::Convex => ((y_r - t) / (y_r - y_l), (t - y_l) / (y_r - y_l)),
        TwoHotMode::DistanceScaled => {
            let c = (cfg.n + 1) as f64 / (2.0 * cfg.alpha);
            ((y_l - t).abs() * c, (y_r - t).abs() * c)
        }
    };
    Ok(TwoHot {
        i_left: k,
        i_right: k + 1,
        w_left,
        w_right,
    })
}

fn logsumexp_plain(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Cross-entropy of softmaxed logits against the two-hot encoding of
/// one coordinate. `clamped` reports whether the target had to be
/// pulled into range.
pub struct GflEval {
    pub loss: f64,
    pub clamped: bool,
}

pub fn gfl_coordinate_loss(t: f64, logits: &[f64], cfg: &GflConfig) -> Result<GflEval, LossError> {
    cfg.validate()?;
    if logits.len() != cfg.points() {
        return Err(LossError::BadLogits {
            want: cfg.points(),
            got: logits.len(),
        });
    }
    let clamped_t = t.clamp(-cfg.alpha, cfg.alpha);
    let hot = gfl_encode_twohot(clamped_t, cfg)?;
    let lse = logsumexp_plain(logits);
    let picked = hot.w_left * logits[hot.i_left] + hot.w_right * logits[hot.i_right];
    Ok(GflEval {
        loss: lse * (hot.w_left + hot.w_right) - picked,
        clamped: clamped_t != t,
    })
}

/// Sum of per-coordinate grid cross-entropies. `logits` is row-major
/// `4 x (n+1)`. Out-of-range coordinates are clamped and counted.
pub fn gfl_loss(
    target: &RegressionTarget,
    logits: &[f64],
    cfg: &GflConfig,
) -> Result<GflEval, LossError> {
    cfg.validate()?;
    let pts = cfg.points();
    if logits.len() != 4 * pts {
        return Err(LossError::BadLogits {
            want: 4 * pts,
            got: logits.len(),
        });
    }
    let t = target.as_array();
    let mut loss = 0.0;
    let mut clamped = false;
    for (i, &ti) in t.iter().enumerate() {
        let eval = gfl_coordinate_loss(ti, &logits[i * pts..(i + 1) * pts], cfg)?;
        loss += eval.loss;
        clamped |= eval.clamped;
    }
    Ok(GflEval { loss, clamped })
}

/// Sum of squared coordinate errors.
pub fn l2_loss(target: &RegressionTarget, t_hat: &RegressionTarget) -> f64 {
    let t = target.as_array();
    let m = t_hat.as_array();
    let mut acc = 0.0;
    for i in 0..4 {
        let d = t[i] - m[i];
        acc += d * d;
    }
    acc
}

/// Gaussian negative log-likelihood with predicted uncertainty:
/// `(T - T_hat)^2 / (2 sigma^2) + log sigma + log(2 pi) / 2` summed
/// over coordinates.
pub fn gaussian_kl_loss(target: &RegressionTarget, pred: &Prediction) -> f64 {
    let t = target.as_array();
    let m = pred.t_hat.as_array();
    let s = pred.sigma_hat;
    let mut acc = 0.0;
    for i in 0..4 {
        let d = t[i] - m[i];
        acc += d * d / (2.0 * s[i] * s[i]) + s[i].ln() + 0.5 * LN_2PI;
    }
    acc
}

/// Flow NLL over the normalized residual plus the uncertainty
/// shrinkage term: `-log p(t_bar) + sum_i log sigma_i`.
pub fn tolf_loss(
    target: &RegressionTarget,
    pred: &Prediction,
    flow: &FlowModel,
) -> Result<f64, LossError> {
    let residual = normalized_residual(target, pred);
    let lp = flow.log_prob(&residual.t_bar)?;
    let log_sigma_sum: f64 = pred.sigma_hat.iter().map(|s| s.ln()).sum();
    Ok(-lp + log_sigma_sum)
}

/// Flow NLL of the raw residual, no uncertainty normalization.
pub fn ablation_flow_only_loss(
    target: &RegressionTarget,
    t_hat: &RegressionTarget,
    flow: &FlowModel,
) -> Result<f64, LossError> {
    let t = target.as_array();
    let m = t_hat.as_array();
    let residual = [t[0] - m[0], t[1] - m[1], t[2] - m[2], t[3] - m[3]];
    Ok(-flow.log_prob(&residual)?)
}

/// Uncertainty-weighted absolute error, `sum_i |T_i - T_hat_i| / sigma_i`.
/// Degenerate as a training objective (sigma wants to grow without
/// bound); see [`ablation_uncertainty_only_training_loss`].
pub fn ablation_uncertainty_only_loss(target: &RegressionTarget, pred: &Prediction) -> f64 {
    let t = target.as_array();
    let m = pred.t_hat.as_array();
    let s = pred.sigma_hat;
    let mut acc = 0.0;
    for i in 0..4 {
        acc += (t[i] - m[i]).abs() / s[i];
    }
    acc
}

/// The trainable form: adds `log sigma` per coordinate, giving the
/// stationary point `sigma* = |T - T_hat|`.
pub fn ablation_uncertainty_only_training_loss(
    target: &RegressionTarget,
    pred: &Prediction,
) -> f64 {
    let log_sigma_sum: f64 = pred.sigma_hat.iter().map(|s| s.ln()).sum();
    ablation_uncertainty_only_loss(target, pred) + log_sigma_sum
}

/// Base losses that the flow NLL term can be added onto. Each selector
/// uses its trainable form, so any choice works standalone as well.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BaseLoss {
    None,
    #[default]
    L2,
    Kl,
    FlowOnly,
    UncertaintyOnly,
}

/// `base + lambda * tolf`. `lambda = 0` reduces to the base loss
/// exactly (the flow term is skipped, not multiplied by zero).
pub fn total_loss(
    target: &RegressionTarget,
    pred: &Prediction,
    flow: &FlowModel,
    lambda: f64,
    base: BaseLoss,
) -> Result<f64, LossError> {
    if !(lambda >= 0.0) {
        return Err(LossError::InvalidConfig {
            detail: format!("lambda must be >= 0, got {lambda}"),
        });
    }
    let base_value = match base {
        BaseLoss::None => 0.0,
        BaseLoss::L2 => l2_loss(target, &pred.t_hat),
        BaseLoss::Kl => gaussian_kl_loss(target, pred),
        BaseLoss::FlowOnly => ablation_flow_only_loss(target, &pred.t_hat, flow)?,
        BaseLoss::UncertaintyOnly => ablation_uncertainty_only_training_loss(target, pred),
    };
    if lambda == 0.0 {
        return Ok(base_value);
    }
    Ok(base_value + lambda * tolf_loss(target, pred, flow)?)
}

/// Closed-form `dL/dT_hat` per coordinate: `(dlogq + dlogg) / sigma`.
/// Oracle against autodiff; the density gradients come in as data so
/// this function shares nothing with the tape.
pub fn tolf_grad_mu_analytic(
    _residual: &NormalizedResidual,
    sigma_hat: &[f64; 4],
    dlogq: &[f64; 4],
    dlogg: &[f64; 4],
) -> [f64; 4] {
    let mut g = [0.0; 4];
    for i in 0..4 {
        g[i] = (dlogq[i] + dlogg[i]) / sigma_hat[i];
    }
    g
}

/// Closed-form `dL/dsigma` per coordinate:
/// `((T - T_hat) / sigma^2) (dlogq + dlogg) + 1/sigma`. The `1/sigma`
/// term is what keeps the uncertainty from collapsing to zero.
pub fn tolf_grad_sigma_analytic(
    target: &RegressionTarget,
    t_hat: &RegressionTarget,
    sigma_hat: &[f64; 4],
    dlogq: &[f64; 4],
    dlogg: &[f64; 4],
) -> [f64; 4] {
    let t = target.as_array();
    let m = t_hat.as_array();
    let mut g = [0.0; 4];
    for i in 0..4 {
        let s = sigma_hat[i];
        g[i] = (t[i] - m[i]) / (s * s) * (dlogq[i] + dlogg[i]) + 1.0 / s;
    }
    g
}

/// Central-difference gradient of `log_prob` with respect to its input,
/// independent of the tape. Splitting off the base-density part
/// (`-t_bar` for the standard normal) gives the `dlogq`/`dlogg` pair
/// the closed-form oracles consume.
pub fn flow_log_prob_grad_fd(
    flow: &FlowModel,
    t_bar: &[f64],
    step: f64,
) -> Result<Vec<f64>, LossError> {
    if !(step > 0.0) {
        return Err(LossError::InvalidConfig {
            detail: format!("finite-difference step must be positive, got {step}"),
        });
    }
    let mut probe = t_bar.to_vec();
    let mut grad = vec![0.0; t_bar.len()];
    for i in 0..t_bar.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let hi = flow.log_prob(&probe)?;
        probe[i] = orig - step;
        let lo = flow.log_prob(&probe)?;
        probe[i] = orig;
        grad[i] = (hi - lo) / (2.0 * step);
    }
    Ok(grad)
}

/// Training-objective selector; the names are the CLI vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    L2,
    Kl,
    Gfl,
    Tolf,
    FlowOnly,
    UncertaintyOnly,
}

impl LossKind {
    pub fn name(&self) -> &'static str {
        match self {
            LossKind::L2 => "l2",
            LossKind::Kl => "kl",
            LossKind::Gfl => "gfl",
            LossKind::Tolf => "tolf",
            LossKind::FlowOnly => "flow_only",
            LossKind::UncertaintyOnly => "uncertainty_only",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = LossError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "l2" => Ok(LossKind::L2),
            "kl" => Ok(LossKind::Kl),
            "gfl" => Ok(LossKind::Gfl),
            "tolf" => Ok(LossKind::Tolf),
            "flow_only" => Ok(LossKind::FlowOnly),
            "uncertainty_only" => Ok(LossKind::UncertaintyOnly),
            other => Err(LossError::InvalidConfig {
                detail: format!(
                    "unknown loss `{other}`; expected one of l2, kl, gfl, tolf, flow_only, uncertainty_only"
                ),
            }),
        }
    }
}

// ---------------------------------------------------------------------
// Tape forms. Each mirrors its plain counterpart operation-for-
// operation; `u` is the raw log-uncertainty, clamped here so the plain
// and tape parameterizations cannot drift apart.
// ---------------------------------------------------------------------

fn clamped_sigma(tape: &mut Tape<'_>, u: Var) -> Result<(Var, Var), GradError> {
    let u_c = tape.clamp(u, LOG_SIGMA_MIN, LOG_SIGMA_MAX)?;
    let sigma = tape.exp(u_c)?;
    Ok((u_c, sigma))
}

pub fn l2_tape(tape: &mut Tape<'_>, target: &[f64; 4], t_hat: Var) -> Result<Var, GradError> {
    let t = tape.constant(target.to_vec())?;
    let d = tape.sub(t, t_hat)?;
    let sq = tape.mul(d, d)?;
    tape.sum(sq)
}

pub fn kl_tape(
    tape: &mut Tape<'_>,
    target: &[f64; 4],
    t_hat: Var,
    u: Var,
) -> Result<Var, GradError> {
    let (u_c, sigma) = clamped_sigma(tape, u)?;
    let t = tape.constant(target.to_vec())?;
    let d = tape.sub(t, t_hat)?;
    let ratio = tape.div(d, sigma)?;
    let sq = tape.mul(ratio, ratio)?;
    let half_sq = tape.scale(sq, 0.5)?;
    let data_term = tape.sum(half_sq)?;
    let shrink = tape.sum(u_c)?;
    let partial = tape.add(data_term, shrink)?;
    tape.add_scalar(partial, 2.0 * LN_2PI)
}

pub fn tolf_tape(
    tape: &mut Tape<'_>,
    target: &[f64; 4],
    t_hat: Var,
    u: Var,
    flow: &FlowModel,
    source: &TapeParams<'_>,
) -> Result<Var, GradError> {
    let (u_c, sigma) = clamped_sigma(tape, u)?;
    let t = tape.constant(target.to_vec())?;
    let d = tape.sub(t, t_hat)?;
    let t_bar = tape.div(d, sigma)?;
    let lp = flow.log_prob_tape(tape, t_bar, source)?;
    let nll = tape.neg(lp)?;
    let shrink = tape.sum(u_c)?;
    tape.add(nll, shrink)
}

pub fn flow_only_tape(
    tape: &mut Tape<'_>,
    target: &[f64; 4],
    t_hat: Var,
    flow: &FlowModel,
    source: &TapeParams<'_>,
) -> Result<Var, GradError> {
    let t = tape.constant(target.to_vec())?;
    let d = tape.sub(t, t_hat)?;
    let lp = flow.log_prob_tape(tape, d, source)?;
    tape.neg(lp)
}

pub fn uncertainty_only_training_tape(
    tape: &mut Tape<'_>,
    target: &[f64; 4],
    t_hat: Var,
    u: Var,
) -> Result<Var, GradError> {
    let (u_c, sigma) = clamped_sigma(tape, u)?;
    let t = tape.constant(target.to_vec())?;
    let d = tape.sub(t, t_hat)?;
    let a = tape.abs(d)?;
    let weighted = tape.div(a, sigma)?;
    let data_term = tape.sum(weighted)?;
    let shrink = tape.sum(u_c)?;
    tape.add(data_term, shrink)
}

/// Tape form of [`gfl_loss`]; returns the loss node and whether any
/// coordinate target was clamped into range.
pub fn gfl_tape(
    tape: &mut Tape<'_>,
    target: &[f64; 4],
    logits: Var,
    cfg: &GflConfig,
) -> Result<(Var, bool), LossError> {
    cfg.validate()?;
    let pts = cfg.points();
    if tape.len_of(logits) != 4 * pts {
        return Err(LossError::BadLogits {
            want: 4 * pts,
            got: tape.len_of(logits),
        });
    }
    let mut clamped = false;
    let mut total: Option<Var> = None;
    for (i, &ti) in target.iter().enumerate() {
        let clamped_t = ti.clamp(-cfg.alpha, cfg.alpha);
        clamped |= clamped_t != ti;
        let hot = gfl_encode_twohot(clamped_t, cfg)?;
        let row = tape.slice(logits, i * pts..(i + 1) * pts)?;
        let lse = tape.logsumexp(row)?;
        let lse_w = tape.scale(lse, hot.w_left + hot.w_right)?;
        let x_l = tape.index(row, hot.i_left)?;
        let x_r = tape.index(row, hot.i_right)?;
        let picked_l = tape.scale(x_l, hot.w_left)?;
        let picked_r = tape.scale(x_r, hot.w_right)?;
        let picked = tape.add(picked_l, picked_r)?;
        let ce = tape.sub(lse_w, picked)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, ce)?,
            None => ce,
        });
    }
    Ok((total.expect("four coordinates"), clamped))
}

/// Tape form of [`total_loss`]. With `lambda = 0` the flow term is not
/// built at all, so the reduction to the base loss is exact.
#[allow(clippy::too_many_arguments)]
pub fn total_tape(
    tape: &mut Tape<'_>,
    target: &[f64; 4],
    t_hat: Var,
    u: Var,
    flow: &FlowModel,
    source: &TapeParams<'_>,
    lambda: f64,
    base: BaseLoss,
) -> Result<Var, GradError> {
    let base_var = match base {
        BaseLoss::None => tape.scalar(0.0)?,
        BaseLoss::L2 => l2_tape(tape, target, t_hat)?,
        BaseLoss::Kl => kl_tape(tape, target, t_hat, u)?,
        BaseLoss::FlowOnly => flow_only_tape(tape, target, t_hat, flow, source)?,
        BaseLoss::UncertaintyOnly => uncertainty_only_training_tape(tape, target, t_hat, u)?,
    };
    if lambda == 0.0 {
        return Ok(base_var);
    }
    let tolf = tolf_tape(tape, target, t_hat, u, flow, source)?;
    let weighted = tape.scale(tolf, lambda)?;
    tape.add(base_var, weighted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowdist::FlowConfig;
    use crate::gradcore::{eval_scalar, finite_diff_grad, value_and_grad, ParamVector, FD_STEP};
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_flow_config() -> FlowConfig {
        FlowConfig {
            dim: 4,
            num_coupling_layers: 2,
            subnet_layers: 3,
            subnet_width: 8,
        }
    }

    fn identity_flow() -> FlowModel {
        FlowModel::init(small_flow_config(), 0).unwrap()
    }

    fn perturbed_flow(seed: u64) -> FlowModel {
        let mut model = FlowModel::init(small_flow_config(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
        for v in model.params_mut().values_mut() {
            *v = rng.random_range(-0.3..0.3);
        }
        model
    }

    fn rt(v: [f64; 4]) -> RegressionTarget {
        RegressionTarget::from_array(v)
    }

    fn random_target(rng: &mut ChaCha8Rng) -> RegressionTarget {
        rt([
            rng.random_range(-1.5..1.5),
            rng.random_range(-1.5..1.5),
            rng.random_range(-1.5..1.5),
            rng.random_range(-1.5..1.5),
        ])
    }

    /// u kept strictly inside the clamp interval so subgradients and
    /// finite differences agree.
    fn random_u(rng: &mut ChaCha8Rng) -> [f64; 4] {
        [
            rng.random_range(-1.5..1.0),
            rng.random_range(-1.5..1.0),
            rng.random_range(-1.5..1.0),
            rng.random_range(-1.5..1.0),
        ]
    }

    fn pred_params(t_hat: [f64; 4], u: [f64; 4]) -> ParamVector {
        let mut b = ParamVector::builder();
        b.push("t_hat", t_hat.to_vec()).unwrap();
        b.push("u", u.to_vec()).unwrap();
        b.build()
    }

    #[test]
    fn l2_worked_examples() {
        assert_eq!(l2_loss(&rt([1.0, 0.0, 0.0, 0.0]), &rt([0.0; 4])), 1.0);
        let t = rt([0.3, -0.7, 0.2, 1.1]);
        assert_eq!(l2_loss(&t, &t), 0.0);
    }

    #[test]
    fn l2_gradient_is_minus_two_errors() {
        let target = [0.5, -0.25, 1.0, 0.0];
        let p = pred_params([0.1, 0.1, 0.1, 0.1], [0.0; 4]);
        let (_, g) = value_and_grad(&p, |tape| {
            let t_hat = tape.param("t_hat")?;
            l2_tape(tape, &target, t_hat)
        })
        .unwrap();
        for i in 0..4 {
            let expected = -2.0 * (target[i] - 0.1);
            assert_relative_eq!(g[i], expected, epsilon = 1e-12);
        }
    }

    // 2 log(2 pi): four coordinates, each contributing log(2 pi) / 2.
    const FOUR_C: f64 = 2.0 * LN_2PI;

    #[test]
    fn kl_at_zero_error_unit_sigma() {
        let t = rt([0.4, -0.2, 0.9, 0.0]);
        let pred = Prediction::new(t, [1.0; 4]).unwrap();
        assert_relative_eq!(gaussian_kl_loss(&t, &pred), FOUR_C, epsilon = 1e-12);
        assert_relative_eq!(FOUR_C, 3.6757541328186906, epsilon = 1e-12);
    }

    #[test]
    fn kl_minimized_at_sigma_equal_abs_error() {
        let t = rt([0.7, 0.0, 0.0, 0.0]);
        let t_hat = rt([0.0; 4]);
        let e = 0.7;
        let at = |s: f64| {
            gaussian_kl_loss(&t, &Prediction::new(t_hat, [s, 1.0, 1.0, 1.0]).unwrap())
        };
        assert!(at(e) < at(e * 1.05));
        assert!(at(e) < at(e * 0.95));
    }

    #[test]
    fn prediction_rejects_bad_sigma_and_clamps_log_form() {
        assert!(Prediction::new(rt([0.0; 4]), [1.0, 0.0, 1.0, 1.0]).is_err());
        assert!(Prediction::new(rt([0.0; 4]), [1.0, -2.0, 1.0, 1.0]).is_err());
        let p = Prediction::from_log_sigma(rt([0.0; 4]), [-100.0, 100.0, 0.0, 1.0]);
        assert_relative_eq!(p.sigma_hat()[0], LOG_SIGMA_MIN.exp(), epsilon = 1e-15);
        assert_relative_eq!(p.sigma_hat()[1], LOG_SIGMA_MAX.exp(), epsilon = 1e-15);
    }

    #[test]
    fn twohot_grid_point_and_midpoint() {
        let cfg = GflConfig::default();
        // k = 4 is an interior grid point.
        let y4 = cfg.grid_point(4);
        let hot = gfl_encode_twohot(y4, &cfg).unwrap();
        assert_eq!((hot.i_left, hot.i_right), (4, 5));
        assert_eq!((hot.w_left, hot.w_right), (1.0, 0.0));
        // Right endpoint lands entirely on the last grid point.
        let hot = gfl_encode_twohot(cfg.alpha, &cfg).unwrap();
        assert_eq!(hot.i_right, cfg.n);
        assert_eq!((hot.w_left, hot.w_right), (0.0, 1.0));
        // Interval midpoint splits evenly.
        let mid = 0.5 * (cfg.grid_point(7) + cfg.grid_point(8));
        let hot = gfl_encode_twohot(mid, &cfg).unwrap();
        assert_relative_eq!(hot.w_left, 0.5, epsilon = 1e-12);
        assert_relative_eq!(hot.w_right, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn twohot_recovers_target_in_expectation() {
        let cfg = GflConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let t = rng.random_range(-cfg.alpha..cfg.alpha);
            let hot = gfl_encode_twohot(t, &cfg).unwrap();
            assert!((hot.w_left + hot.w_right - 1.0).abs() < 1e-12);
            let recovered =
                hot.w_left * cfg.grid_point(hot.i_left) + hot.w_right * cfg.grid_point(hot.i_right);
            assert!((recovered - t).abs() < 1e-12);
        }
    }

    #[test]
    fn twohot_rejects_out_of_range() {
        let cfg = GflConfig::default();
        assert!(matches!(
            gfl_encode_twohot(1.5, &cfg),
            Err(LossError::TargetOutOfRange { .. })
        ));
        assert!(matches!(
            gfl_encode_twohot(f64::NAN, &cfg),
            Err(LossError::TargetOutOfRange { .. })
        ));
    }

    #[test]
    fn distance_scaled_mode_matches_its_formula() {
        let cfg = GflConfig {
            two_hot_mode: TwoHotMode::DistanceScaled,
            ..GflConfig::default()
        };
        let t = 0.3 * cfg.grid_point(9) + 0.7 * cfg.grid_point(10);
        let hot = gfl_encode_twohot(t, &cfg).unwrap();
        let c = (cfg.n + 1) as f64 / (2.0 * cfg.alpha);
        assert_relative_eq!(hot.w_left, (cfg.grid_point(9) - t).abs() * c, epsilon = 1e-12);
        assert_relative_eq!(hot.w_right, (cfg.grid_point(10) - t).abs() * c, epsilon = 1e-12);
        // The farther bracketing point gets the larger weight; the pair
        // does not form a distribution. Both are why this mode is not
        // the default.
        assert!(hot.w_left > hot.w_right);
        assert!((hot.w_left + hot.w_right - 1.0).abs() > 1e-3);
    }

    #[test]
    fn gfl_uniform_logits_at_grid_point() {
        let cfg = GflConfig::default();
        let pts = cfg.points();
        let per = gfl_coordinate_loss(cfg.grid_point(3), &vec![0.0; pts], &cfg).unwrap();
        assert!((per.loss - (pts as f64).ln()).abs() < 1e-12);
        assert!(!per.clamped);

        let target = rt([cfg.grid_point(2), cfg.grid_point(8), 0.0, cfg.grid_point(16)]);
        let full = gfl_loss(&target, &vec![0.25; 4 * pts], &cfg).unwrap();
        assert!((full.loss - 4.0 * (pts as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn gfl_approaches_entropy_lower_bound() {
        let cfg = GflConfig::default();
        let pts = cfg.points();
        let t = 0.62 * cfg.grid_point(5) + 0.38 * cfg.grid_point(6);
        let hot = gfl_encode_twohot(t, &cfg).unwrap();
        let mut logits = vec![-40.0; pts];
        logits[hot.i_left] = hot.w_left.ln();
        logits[hot.i_right] = hot.w_right.ln();
        let eval = gfl_coordinate_loss(t, &logits, &cfg).unwrap();
        let entropy = -hot.w_left * hot.w_left.ln() - hot.w_right * hot.w_right.ln();
        assert!((eval.loss - entropy).abs() < 1e-6);
    }

    #[test]
    fn gfl_clamps_and_counts_out_of_range_targets() {
        let cfg = GflConfig::default();
        let pts = cfg.points();
        let target = rt([3.0, 0.0, 0.0, 0.0]);
        let eval = gfl_loss(&target, &vec![0.0; 4 * pts], &cfg).unwrap();
        assert!(eval.clamped);
        let in_range = gfl_loss(&rt([1.0, 0.0, 0.0, 0.0]), &vec![0.0; 4 * pts], &cfg).unwrap();
        assert!(!in_range.clamped);
        assert!((eval.loss - in_range.loss).abs() < 1e-12);
    }

    #[test]
    fn gfl_tape_matches_plain_and_finite_differences() {
        let cfg = GflConfig::default();
        let pts = cfg.points();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..50 {
            let target = random_target(&mut rng);
            let logits: Vec<f64> = (0..4 * pts).map(|_| rng.random_range(-2.0..2.0)).collect();
            let mut b = ParamVector::builder();
            b.push("logits", logits.clone()).unwrap();
            let p = b.build();

            let plain = gfl_loss(&target, &logits, &cfg).unwrap().loss;
            let build = |tape: &mut Tape<'_>| {
                let l = tape.param("logits")?;
                let (loss, _) = gfl_tape(tape, &target.as_array(), l, &cfg)
                    .map_err(|e| match e {
                        LossError::Grad(g) => g,
                        other => GradError::ShapeMismatch {
                            op: "gfl_tape",
                            detail: other.to_string(),
                        },
                    })?;
                Ok(loss)
            };
            let (tape_value, analytic) = value_and_grad(&p, build).unwrap();
            assert!((plain - tape_value).abs() < 1e-12);

            let fd = finite_diff_grad(&p, FD_STEP, |q| eval_scalar(q, build)).unwrap();
            for (a, f) in analytic.iter().zip(&fd) {
                let diff = (a - f).abs();
                assert!(diff <= 1e-6 || diff <= 1e-4 * f.abs().max(a.abs()));
            }
        }
    }

    #[test]
    fn tolf_reduces_to_gaussian_nll_under_identity_flow() {
        let flow = identity_flow();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..1000 {
            let target = random_target(&mut rng);
            let t_hat = random_target(&mut rng);
            let pred = Prediction::from_log_sigma(t_hat, random_u(&mut rng));
            let tolf = tolf_loss(&target, &pred, &flow).unwrap();
            let kl = gaussian_kl_loss(&target, &pred);
            assert!(
                (tolf - kl).abs() < 1e-12,
                "bridge violated: tolf {tolf} vs kl {kl}"
            );
        }
    }

    #[test]
    fn tolf_at_zero_error_unit_sigma_matches_kl_constant() {
        let flow = identity_flow();
        let t = rt([0.2, -0.4, 0.6, -0.8]);
        let pred = Prediction::new(t, [1.0; 4]).unwrap();
        let v = tolf_loss(&t, &pred, &flow).unwrap();
        assert_relative_eq!(v, FOUR_C, epsilon = 1e-12);
    }

    #[test]
    fn tolf_grad_mu_identity_flow_examples() {
        // t_bar = 1 with sigma = 2: dL/dT_hat = -t_bar / sigma = -0.5.
        let target = rt([2.0, 0.0, 0.0, 0.0]);
        let t_hat = rt([0.0; 4]);
        let sigma = [2.0, 2.0, 2.0, 2.0];
        let pred = Prediction::new(t_hat, sigma).unwrap();
        let residual = normalized_residual(&target, &pred);
        let dlogq = residual.t_bar.map(|t| -t);
        let dlogg = [0.0; 4];
        let g = tolf_grad_mu_analytic(&residual, &sigma, &dlogq, &dlogg);
        assert_relative_eq!(g[0], -0.5, epsilon = 1e-12);

        // Doubling sigma at fixed t_bar halves the gradient magnitude.
        let sigma2 = [4.0; 4];
        let g2 = tolf_grad_mu_analytic(&residual, &sigma2, &dlogq, &dlogg);
        for i in 0..4 {
            assert_relative_eq!(g2[i], 0.5 * g[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn tolf_grad_sigma_shrinkage_and_stationarity() {
        // Zero error: gradient is exactly 1/sigma, always positive.
        let t = rt([0.3, 0.3, 0.3, 0.3]);
        let sigma = [0.5, 1.0, 2.0, 4.0];
        let g = tolf_grad_sigma_analytic(&t, &t, &sigma, &[0.0; 4], &[0.0; 4]);
        for i in 0..4 {
            assert_relative_eq!(g[i], 1.0 / sigma[i], epsilon = 1e-12);
        }

        // Identity flow: stationary exactly where sigma = |error|.
        let target = rt([0.9, 0.0, 0.0, 0.0]);
        let t_hat = rt([0.0; 4]);
        let sigma = [0.9, 1.0, 1.0, 1.0];
        let pred = Prediction::new(t_hat, sigma).unwrap();
        let residual = normalized_residual(&target, &pred);
        let dlogq = residual.t_bar.map(|t| -t);
        let g = tolf_grad_sigma_analytic(&target, &t_hat, &sigma, &dlogq, &[0.0; 4]);
        assert!(g[0].abs() < 1e-12, "not stationary: {}", g[0]);
    }

    #[test]
    fn tolf_tape_gradients_match_closed_forms_on_trained_flow() {
        let flow = perturbed_flow(29);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..25 {
            let target = random_target(&mut rng);
            let t_hat_v = random_target(&mut rng).as_array();
            let u_v = random_u(&mut rng);
            let p = pred_params(t_hat_v, u_v);

            let (_, autodiff) = value_and_grad(&p, |tape| {
                let t_hat = tape.param("t_hat")?;
                let u = tape.param("u")?;
                tolf_tape(tape, &target.as_array(), t_hat, u, &flow, &TapeParams::Frozen)
            })
            .unwrap();

            let pred = Prediction::from_log_sigma(RegressionTarget::from_array(t_hat_v), u_v);
            let sigma = *pred.sigma_hat();
            let residual = normalized_residual(&target, &pred);
            let total_grad = flow_log_prob_grad_fd(&flow, &residual.t_bar, 1e-6).unwrap();
            let dlogq = residual.t_bar.map(|t| -t);
            let dlogg: [f64; 4] = std::array::from_fn(|i| total_grad[i] - dlogq[i]);

            let mu = tolf_grad_mu_analytic(&residual, &sigma, &dlogq, &dlogg);
            let sg = tolf_grad_sigma_analytic(&target, &pred.t_hat, &sigma, &dlogq, &dlogg);
            for i in 0..4 {
                let a = autodiff[i];
                let diff = (a - mu[i]).abs();
                assert!(
                    diff <= 1e-6 || diff <= 1e-4 * mu[i].abs().max(a.abs()),
                    "mu[{i}]: closed form {} vs autodiff {a}",
                    mu[i]
                );
                // The tape differentiates w.r.t. u, and dL/du =
                // dL/dsigma * sigma through the exp.
                let a_u = autodiff[4 + i];
                let want = sg[i] * sigma[i];
                let diff = (a_u - want).abs();
                assert!(
                    diff <= 1e-6 || diff <= 1e-4 * want.abs().max(a_u.abs()),
                    "sigma[{i}]: closed form {want} vs autodiff {a_u}"
                );
            }
        }
    }

    #[test]
    fn flow_only_examples_and_translation_invariance() {
        let flow = identity_flow();
        let t = rt([0.5, -0.5, 0.5, -0.5]);
        let v = ablation_flow_only_loss(&t, &t, &flow).unwrap();
        assert_relative_eq!(v, FOUR_C, epsilon = 1e-12);

        // Integer-valued inputs make the subtraction exact, so the
        // invariance is bitwise.
        let flow = perturbed_flow(37);
        let a = rt([3.0, -2.0, 1.0, 5.0]);
        let b = rt([1.0, 1.0, -1.0, 2.0]);
        let shifted_a = rt([11.0, 6.0, 17.0, -27.0]);
        let shifted_b = rt([9.0, 9.0, 15.0, -30.0]);
        let v1 = ablation_flow_only_loss(&a, &b, &flow).unwrap();
        let v2 = ablation_flow_only_loss(&shifted_a, &shifted_b, &flow).unwrap();
        assert_eq!(v1.to_bits(), v2.to_bits());

        // Generic floats: invariance up to subtraction rounding.
        let a = rt([0.31, -0.77, 0.12, 0.9]);
        let b = rt([0.11, 0.27, -0.44, 0.35]);
        let c = 0.625; // exactly representable
        let sa = rt([0.31 + c, -0.77 + c, 0.12 + c, 0.9 + c]);
        let sb = rt([0.11 + c, 0.27 + c, -0.44 + c, 0.35 + c]);
        let v1 = ablation_flow_only_loss(&a, &b, &flow).unwrap();
        let v2 = ablation_flow_only_loss(&sa, &sb, &flow).unwrap();
        assert!((v1 - v2).abs() < 1e-9);
    }

    #[test]
    fn uncertainty_only_examples() {
        let t = rt([0.4, 0.1, -0.2, 0.0]);
        let pred = Prediction::new(t, [1.0; 4]).unwrap();
        assert_eq!(ablation_uncertainty_only_loss(&t, &pred), 0.0);

        let t_hat = rt([0.0; 4]);
        let p1 = Prediction::new(t_hat, [1.0; 4]).unwrap();
        let p3 = Prediction::new(t_hat, [3.0; 4]).unwrap();
        let v1 = ablation_uncertainty_only_loss(&t, &p1);
        let v3 = ablation_uncertainty_only_loss(&t, &p3);
        assert_relative_eq!(v3, v1 / 3.0, epsilon = 1e-12);

        // Training form has a stationary point at sigma = |error|.
        let target = rt([0.8, 0.0, 0.0, 0.0]);
        let at = |s: f64| {
            ablation_uncertainty_only_training_loss(
                &target,
                &Prediction::new(t_hat, [s, 1.0, 1.0, 1.0]).unwrap(),
            )
        };
        assert!(at(0.8) < at(0.8 * 1.05));
        assert!(at(0.8) < at(0.8 * 0.95));
    }

    #[test]
    fn total_loss_composition() {
        let flow = perturbed_flow(41);
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let target = random_target(&mut rng);
        let pred = Prediction::from_log_sigma(random_target(&mut rng), random_u(&mut rng));

        let base = total_loss(&target, &pred, &flow, 0.0, BaseLoss::L2).unwrap();
        assert_eq!(base.to_bits(), l2_loss(&target, &pred.t_hat).to_bits());

        let tolf = tolf_loss(&target, &pred, &flow).unwrap();
        for lambda in [0.01, 0.1, 1.0] {
            let total = total_loss(&target, &pred, &flow, lambda, BaseLoss::L2).unwrap();
            assert_relative_eq!(total - base, lambda * tolf, epsilon = 1e-12);
        }
        let pure = total_loss(&target, &pred, &flow, 1.0, BaseLoss::None).unwrap();
        assert_relative_eq!(pure, tolf, epsilon = 1e-12);

        assert!(total_loss(&target, &pred, &flow, -0.5, BaseLoss::L2).is_err());
    }

    #[test]
    fn all_loss_tapes_match_plain_values_and_finite_differences() {
        let flow = perturbed_flow(47);
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        for trial in 0..100 {
            let target = random_target(&mut rng);
            let t_hat_v = random_target(&mut rng).as_array();
            let u_v = random_u(&mut rng);
            let p = pred_params(t_hat_v, u_v);
            let pred = Prediction::from_log_sigma(RegressionTarget::from_array(t_hat_v), u_v);

            type LossBuild<'f> =
                Box<dyn Fn(&mut Tape<'_>, Var, Var) -> Result<Var, GradError> + 'f>;
            let target_arr = target.as_array();
            let flow_ref = &flow;
            let cases: Vec<(&str, f64, LossBuild<'_>)> = vec![
                (
                    "l2",
                    l2_loss(&target, &pred.t_hat),
                    Box::new(move |tape, t_hat, _| l2_tape(tape, &target_arr, t_hat)),
                ),
                (
                    "kl",
                    gaussian_kl_loss(&target, &pred),
                    Box::new(move |tape, t_hat, u| kl_tape(tape, &target_arr, t_hat, u)),
                ),
                (
                    "tolf",
                    tolf_loss(&target, &pred, &flow).unwrap(),
                    Box::new(move |tape, t_hat, u| {
                        tolf_tape(tape, &target_arr, t_hat, u, flow_ref, &TapeParams::Frozen)
                    }),
                ),
                (
                    "flow_only",
                    ablation_flow_only_loss(&target, &pred.t_hat, &flow).unwrap(),
                    Box::new(move |tape, t_hat, _| {
                        flow_only_tape(tape, &target_arr, t_hat, flow_ref, &TapeParams::Frozen)
                    }),
                ),
                (
                    "uncertainty_only",
                    ablation_uncertainty_only_training_loss(&target, &pred),
                    Box::new(move |tape, t_hat, u| {
                        uncertainty_only_training_tape(tape, &target_arr, t_hat, u)
                    }),
                ),
                (
                    "total",
                    total_loss(&target, &pred, &flow, 0.1, BaseLoss::L2).unwrap(),
                    Box::new(move |tape, t_hat, u| {
                        total_tape(
                            tape,
                            &target_arr,
                            t_hat,
                            u,
                            flow_ref,
                            &TapeParams::Frozen,
                            0.1,
                            BaseLoss::L2,
                        )
                    }),
                ),
            ];

            for (name, plain, build) in &cases {
                let run = |tape: &mut Tape<'_>| {
                    let t_hat = tape.param("t_hat")?;
                    let u = tape.param("u")?;
                    build(tape, t_hat, u)
                };
                let (tape_value, analytic) = value_and_grad(&p, run).unwrap();
                assert!(
                    (plain - tape_value).abs() < 1e-12,
                    "{name} trial {trial}: plain {plain} vs tape {tape_value}"
                );
                let fd = finite_diff_grad(&p, FD_STEP, |q| eval_scalar(q, run)).unwrap();
                for (i, (a, f)) in analytic.iter().zip(&fd).enumerate() {
                    let diff = (a - f).abs();
                    assert!(
                        diff <= 1e-6 || diff <= 1e-4 * f.abs().max(a.abs()),
                        "{name} trial {trial} param {i}: analytic {a} vs fd {f}"
                    );
                }
            }
        }
    }

    #[test]
    fn loss_kind_names_are_stable() {
        let kinds = [
            (LossKind::L2, "l2"),
            (LossKind::Kl, "kl"),
            (LossKind::Gfl, "gfl"),
            (LossKind::Tolf, "tolf"),
            (LossKind::FlowOnly, "flow_only"),
            (LossKind::UncertaintyOnly, "uncertainty_only"),
        ];
        for (kind, name) in kinds {
            assert_eq!(kind.name(), name);
            assert_eq!(kind.to_string(), name);
            assert_eq!(LossKind::from_str(name).unwrap(), kind);
            assert_eq!(serde_json::to_string(&kind).unwrap(), format!("\"{name}\""));
        }
        assert!(LossKind::from_str("smooth_l1").is_err());
    }
}
