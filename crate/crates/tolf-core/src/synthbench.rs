//! Synthetic tiny-object localization benchmark.
//!
//! Scenes are abstract: each sample is a clean box, a corrupted
//! annotation of it, a nearby anchor, and a feature vector that
//! observes the clean regression target through a fixed random linear
//! mix plus observation noise that grows as objects shrink. A small
//! tanh MLP head maps features to a localization prediction, and a
//! minibatch SGD trainer optimizes any of the selectable losses,
//! updating head and flow parameters jointly through one tape.
//!
//! Everything is deterministic per seed: datasets, initialization,
//! shuffling, and the training loop itself.

use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::boxgeom::{encode, Anchor, BoundingBox, RegressionTarget};
use crate::flowdist::{FlowError, FlowModel, TapeParams};
use crate::gradcore::{value_and_grad, GradError, ParamVector, Tape, Var};
use crate::locloss::{
    flow_only_tape, gfl_tape, kl_tape, l2_tape, total_tape, uncertainty_only_training_tape,
    BaseLoss, GflConfig, LossError, LossKind, Prediction, DEFAULT_LAMBDA,
};
use crate::noisegen::{corrupt, NoiseError, NoiseModel};

/// Feature vector length: 14 mixed observations of the clean target
/// plus 2 anchor-size channels.
pub const FEATURE_DIM: usize = 16;

/// Seed of the fixed target-to-feature mixing matrix. Part of the
/// benchmark definition, not of any experiment config.
const FEATURE_MIX_SEED: u64 = 0x7c3a_11e5;

const MIXED_FEATURES: usize = 14;

#[derive(Debug)]
pub enum BenchError {
    InvalidConfig { detail: String },
    HeadLossMismatch { detail: String },
    Diverged { epoch: usize, batch: usize, loss: f64, initial: f64 },
    Io { path: PathBuf, detail: String },
    Json { path: PathBuf, detail: String },
    Grad(GradError),
    Flow(FlowError),
    Loss(LossError),
    Noise(NoiseError),
}

impl fmt::Display for BenchError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BenchError::InvalidConfig { detail } => write!(f, "invalid benchmark config: {detail}"),
            BenchError::HeadLossMismatch { detail } => write!(f, "{detail}"),
            BenchError::Diverged {
                epoch,
                batch,
                loss,
                initial,
            } => write!(
                f,
                "training diverged at epoch {epoch}, batch {batch}: loss {loss} exceeds 10x the initial {initial}"
            ),
            BenchError::Io { path, detail } => write!(f, "io error at {}: {detail}", path.display()),
            BenchError::Json { path, detail } => {
                write!(f, "json error at {}: {detail}", path.display())
            }
            BenchError::Grad(e) => write!(f, "{e}"),
            BenchError::Flow(e) => write!(f, "{e}"),
            BenchError::Loss(e) => write!(f, "{e}"),
            BenchError::Noise(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for BenchError {}

impl From<GradError> for BenchError {
    fn from(e: GradError) -> Self {
        BenchError::Grad(e)
    }
}

impl From<FlowError> for BenchError {
    fn from(e: FlowError) -> Self {
        BenchError::Flow(e)
    }
}

impl From<LossError> for BenchError {
    fn from(e: LossError) -> Self {
        BenchError::Loss(e)
    }
}

impl From<NoiseError> for BenchError {
    fn from(e: NoiseError) -> Self {
        BenchError::Noise(e)
    }
}

/// Object-size category by geometric mean side, sqrt(w * h).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleBin {
    VeryTiny,
    Tiny,
    Small,
    Medium,
}

impl ScaleBin {
    pub const ALL: [ScaleBin; 4] = [
        ScaleBin::VeryTiny,
        ScaleBin::Tiny,
        ScaleBin::Small,
        ScaleBin::Medium,
    ];

    /// Half-open side ranges in pixels: [2,8), [8,16), [16,32), [32,64).
    pub fn side_range(&self) -> (f64, f64) {
        match self {
            ScaleBin::VeryTiny => (2.0, 8.0),
            ScaleBin::Tiny => (8.0, 16.0),
            ScaleBin::Small => (16.0, 32.0),
            ScaleBin::Medium => (32.0, 64.0),
        }
    }

    pub fn from_side(side: f64) -> Option<ScaleBin> {
        Self::ALL
            .into_iter()
            .find(|b| {
                let (lo, hi) = b.side_range();
                side >= lo && side < hi
            })
    }

    pub fn index(&self) -> usize {
        match self {
            ScaleBin::VeryTiny => 0,
            ScaleBin::Tiny => 1,
            ScaleBin::Small => 2,
            ScaleBin::Medium => 3,
        }
    }

    pub fn from_index(i: usize) -> Option<ScaleBin> {
        Self::ALL.get(i).copied()
    }

    pub fn name(&self) -> &'static str {
        match self {
            ScaleBin::VeryTiny => "very_tiny",
            ScaleBin::Tiny => "tiny",
            ScaleBin::Small => "small",
            ScaleBin::Medium => "medium",
        }
    }
}

/// One benchmark sample. Training sees `feature` and the target encoded
/// from `noisy_box`; evaluation scores decoded predictions against
/// `gt_box` only.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub feature: Vec<f64>,
    pub gt_box: BoundingBox,
    pub noisy_box: BoundingBox,
    pub anchor: Anchor,
    pub scale_bin: ScaleBin,
}

impl SceneSample {
    /// The supervision target: clean geometry encoded against the anchor.
    pub fn clean_target(&self) -> RegressionTarget {
        encode(&self.gt_box, &self.anchor)
    }

    /// The training target: corrupted annotation encoded against the anchor.
    pub fn noisy_target(&self) -> RegressionTarget {
        encode(&self.noisy_box, &self.anchor)
    }
}

/// Fixed mixing matrix (14 x 4, row-major) from targets to features.
fn feature_mix_matrix() -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(FEATURE_MIX_SEED);
    (0..MIXED_FEATURES * 4)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect()
}

/// Generates `n` scenes. Boxes are drawn per `scale_mix` proportions
/// over the four size bins; features observe the clean target through
/// the fixed mix with additive noise of standard deviation
/// `feature_noise * sqrt(8 / side)`, so smaller objects are observed
/// less precisely. Anchors are the clean boxes jittered by 10% of the
/// object side. Annotations are corrupted by `noise`.
pub fn generate_dataset(
    n: usize,
    scale_mix: [f64; 4],
    feature_noise: f64,
    noise: &NoiseModel,
    seed: u64,
) -> Result<Vec<SceneSample>, BenchError> {
    if scale_mix.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
        return Err(BenchError::InvalidConfig {
            detail: format!("scale_mix proportions must be >= 0, got {scale_mix:?}"),
        });
    }
    let total: f64 = scale_mix.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(BenchError::InvalidConfig {
            detail: format!("scale_mix proportions must sum to 1, got {total}"),
        });
    }
    if !(feature_noise >= 0.0 && feature_noise.is_finite()) {
        return Err(BenchError::InvalidConfig {
            detail: format!("feature_noise must be >= 0, got {feature_noise}"),
        });
    }
    noise.validate()?;

    let mix = feature_mix_matrix();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ln_aspect = 1.5f64.ln();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let pick: f64 = rng.random();
        let mut acc = 0.0;
        let mut bin = ScaleBin::Medium;
        for b in ScaleBin::ALL {
            acc += scale_mix[b.index()];
            if pick < acc {
                bin = b;
                break;
            }
        }
        let (lo, hi) = bin.side_range();
        let side = rng.random_range(lo..hi);
        // w * h = side^2, so the geometric mean side stays in the bin.
        let a = (rng.random_range(-ln_aspect..ln_aspect) / 2.0).exp();
        let (w, h) = (side * a, side / a);
        let cx = rng.random_range(0.0..256.0);
        let cy = rng.random_range(0.0..256.0);
        let gt_box = BoundingBox::new_unchecked(cx, cy, w, h);

        let jx = rng.random_range(-0.1..0.1) * side;
        let jy = rng.random_range(-0.1..0.1) * side;
        let jw = rng.random_range(-0.1..0.1f64).exp();
        let jh = rng.random_range(-0.1..0.1f64).exp();
        let anchor = Anchor::new_unchecked(cx + jx, cy + jy, w * jw, h * jh);

        let noisy_box = corrupt(&gt_box, noise, &mut rng);

        let t = encode(&gt_box, &anchor).as_array();
        let s_obs = feature_noise * (8.0 / side).sqrt();
        let mut feature = Vec::with_capacity(FEATURE_DIM);
        for i in 0..MIXED_FEATURES {
            let mut v = 0.0;
            for (j, &tj) in t.iter().enumerate() {
                v += mix[i * 4 + j] * tj;
            }
            if s_obs > 0.0 {
                let e: f64 = StandardNormal.sample(&mut rng);
                v += s_obs * e;
            }
            feature.push(v);
        }
        feature.push(anchor.w().ln() / 4.0);
        feature.push(anchor.h().ln() / 4.0);

        out.push(SceneSample {
            feature,
            gt_box,
            noisy_box,
            anchor,
            scale_bin: bin,
        });
    }
    Ok(out)
}

/// What the head's final layer emits.
#[derive(Debug, Clone, PartialEq)]
pub enum HeadMode {
    /// 8 outputs: predicted target mean and raw log-uncertainty.
    MeanLogSigma,
    /// `4 * (n+1)` grid logits, decoded by softmax expectation.
    Gfl(GflConfig),
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadConfig {
    pub feature_dim: usize,
    pub hidden: usize,
    pub mode: HeadMode,
}

impl HeadConfig {
    pub fn mean_log_sigma() -> Self {
        HeadConfig {
            feature_dim: FEATURE_DIM,
            hidden: 64,
            mode: HeadMode::MeanLogSigma,
        }
    }

    pub fn gfl(cfg: GflConfig) -> Self {
        HeadConfig {
            feature_dim: FEATURE_DIM,
            hidden: 64,
            mode: HeadMode::Gfl(cfg),
        }
    }

    pub fn output_dim(&self) -> usize {
        match &self.mode {
            HeadMode::MeanLogSigma => 8,
            HeadMode::Gfl(cfg) => 4 * cfg.points(),
        }
    }

    fn validate(&self) -> Result<(), BenchError> {
        if self.feature_dim == 0 || self.hidden == 0 {
            return Err(BenchError::InvalidConfig {
                detail: "head dimensions must be positive".to_string(),
            });
        }
        if let HeadMode::Gfl(cfg) = &self.mode {
            cfg.validate()?;
        }
        Ok(())
    }
}

/// Two-hidden-layer tanh MLP from features to localization outputs.
///
/// The final layer initializes to zero, so a fresh head predicts the
/// anchor itself (target 0) with unit uncertainty, and a fresh GFL head
/// emits the uniform grid distribution.
#[derive(Debug, Clone)]
pub struct RegressionHead {
    config: HeadConfig,
    params: ParamVector,
}

impl RegressionHead {
    pub fn init(config: HeadConfig, seed: u64) -> Result<Self, BenchError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut xavier = |rows: usize, cols: usize| -> Vec<f64> {
            let bound = (6.0 / (rows + cols) as f64).sqrt();
            (0..rows * cols)
                .map(|_| rng.random_range(-bound..bound))
                .collect()
        };
        let (f, hid, out) = (config.feature_dim, config.hidden, config.output_dim());
        let w0 = xavier(hid, f);
        let w1 = xavier(hid, hid);
        let mut b = ParamVector::builder();
        b.push("w0", w0)?;
        b.push("b0", vec![0.0; hid])?;
        b.push("w1", w1)?;
        b.push("b1", vec![0.0; hid])?;
        b.push("w2", vec![0.0; out * hid])?;
        b.push("b2", vec![0.0; out])?;
        Ok(RegressionHead {
            config,
            params: b.build(),
        })
    }

    pub fn config(&self) -> &HeadConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    /// Raw network outputs; mirrors the tape path operation-for-operation.
    pub fn raw_outputs(&self, feature: &[f64]) -> Result<Vec<f64>, BenchError> {
        if feature.len() != self.config.feature_dim {
            return Err(BenchError::InvalidConfig {
                detail: format!(
                    "feature length {} does not match head input {}",
                    feature.len(),
                    self.config.feature_dim
                ),
            });
        }
        let (f, hid, out) = (
            self.config.feature_dim,
            self.config.hidden,
            self.config.output_dim(),
        );
        let affine = |w: &[f64], b: &[f64], x: &[f64], rows: usize, cols: usize| {
            let mut y = vec![0.0; rows];
            for i in 0..rows {
                let mut acc = b[i];
                for j in 0..cols {
                    acc += w[i * cols + j] * x[j];
                }
                y[i] = acc;
            }
            y
        };
        let h0: Vec<f64> = affine(
            self.params.segment("w0")?,
            self.params.segment("b0")?,
            feature,
            hid,
            f,
        )
        .iter()
        .map(|v| v.tanh())
        .collect();
        let h1: Vec<f64> = affine(
            self.params.segment("w1")?,
            self.params.segment("b1")?,
            &h0,
            hid,
            hid,
        )
        .iter()
        .map(|v| v.tanh())
        .collect();
        Ok(affine(
            self.params.segment("w2")?,
            self.params.segment("b2")?,
            &h1,
            out,
            hid,
        ))
    }

    /// Tape forward pass reading parameters named `prefix` + {w0..b2}
    /// from the tape's bound vector. Returns the raw output node.
    pub fn forward_tape(
        config: &HeadConfig,
        tape: &mut Tape<'_>,
        prefix: &str,
        feature: &[f64],
    ) -> Result<Var, GradError> {
        let (f, hid, out) = (config.feature_dim, config.hidden, config.output_dim());
        let x = tape.constant(feature.to_vec())?;
        let w0 = tape.param(&format!("{prefix}w0"))?;
        let b0 = tape.param(&format!("{prefix}b0"))?;
        let a0 = tape.affine(w0, b0, x, hid, f)?;
        let h0 = tape.tanh(a0)?;
        let w1 = tape.param(&format!("{prefix}w1"))?;
        let b1 = tape.param(&format!("{prefix}b1"))?;
        let a1 = tape.affine(w1, b1, h0, hid, hid)?;
        let h1 = tape.tanh(a1)?;
        let w2 = tape.param(&format!("{prefix}w2"))?;
        let b2 = tape.param(&format!("{prefix}b2"))?;
        tape.affine(w2, b2, h1, out, hid)
    }

    /// Decodes the network output into a mean-and-uncertainty
    /// prediction. GFL heads decode by softmax expectation with the
    /// categorical standard deviation (floored at 1e-3) as uncertainty.
    pub fn predict(&self, feature: &[f64]) -> Result<Prediction, BenchError> {
        let raw = self.raw_outputs(feature)?;
        match &self.config.mode {
            HeadMode::MeanLogSigma => {
                let t_hat = RegressionTarget::from_array([raw[0], raw[1], raw[2], raw[3]]);
                Ok(Prediction::from_log_sigma(
                    t_hat,
                    [raw[4], raw[5], raw[6], raw[7]],
                ))
            }
            HeadMode::Gfl(cfg) => {
                let pts = cfg.points();
                let mut mean = [0.0; 4];
                let mut sigma = [0.0; 4];
                for c in 0..4 {
                    let logits = &raw[c * pts..(c + 1) * pts];
                    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let weights: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                    let z: f64 = weights.iter().sum();
                    let mut mu = 0.0;
                    for (k, w) in weights.iter().enumerate() {
                        mu += w / z * cfg.grid_point(k);
                    }
                    let mut var = 0.0;
                    for (k, w) in weights.iter().enumerate() {
                        let d = cfg.grid_point(k) - mu;
                        var += w / z * d * d;
                    }
                    mean[c] = mu;
                    sigma[c] = var.sqrt().max(1e-3);
                }
                Ok(Prediction::new(RegressionTarget::from_array(mean), sigma)
                    .expect("floored sigma is positive"))
            }
        }
    }

    pub fn predict_batch(&self, features: &[Vec<f64>]) -> Result<Vec<Prediction>, BenchError> {
        features.iter().map(|f| self.predict(f)).collect()
    }
}

fn default_lambda() -> f64 {
    DEFAULT_LAMBDA
}

/// Training hyperparameters. `base` and `lambda` only matter for the
/// `tolf` selector, which optimizes `base + lambda * tolf`; every other
/// selector is the pure named loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossKind,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub base: BaseLoss,
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    #[serde(default)]
    pub gfl: GflConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossKind::Tolf,
            lambda: DEFAULT_LAMBDA,
            base: BaseLoss::L2,
            lr: 0.01,
            momentum: 0.9,
            epochs: 30,
            batch: 64,
            seed: 0,
            gfl: GflConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), BenchError> {
        let fail = |detail: String| Err(BenchError::InvalidConfig { detail });
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.momentum >= 0.0 && self.momentum < 1.0) {
            return fail(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.epochs == 0 {
            return fail("epochs must be >= 1".to_string());
        }
        if self.batch == 0 {
            return fail("batch must be >= 1".to_string());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return fail(format!("lambda must be >= 0, got {}", self.lambda));
        }
        self.gfl.validate()?;
        Ok(())
    }
}

pub struct TrainOutcome {
    pub head: RegressionHead,
    pub flow: FlowModel,
    /// Mean training loss per epoch.
    pub trace: Vec<f64>,
    /// Samples whose GFL target needed clamping into the grid range.
    pub clamped_targets: usize,
}

/// Minibatch SGD with momentum over one flat parameter vector.
/// Per-sample tapes, fixed-order batch reduction, per-epoch seeded
/// shuffle. Aborts when a batch loss is non-finite or exceeds 10x the
/// first batch's loss.
fn run_sgd<F>(
    mut params: ParamVector,
    lr: f64,
    momentum: f64,
    epochs: usize,
    batch: usize,
    seed: u64,
    n: usize,
    mut per_sample: F,
) -> Result<(ParamVector, Vec<f64>), BenchError>
where
    F: FnMut(&mut Tape<'_>, usize) -> Result<Var, GradError>,
{
    let mut velocity = vec![0.0; params.len()];
    let mut grad_acc = vec![0.0; params.len()];
    let mut indices: Vec<usize> = (0..n).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut initial: Option<f64> = None;
    let mut trace = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        indices.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for (batch_index, chunk) in indices.chunks(batch).enumerate() {
            grad_acc.iter_mut().for_each(|g| *g = 0.0);
            let mut batch_loss = 0.0;
            for &idx in chunk {
                let (value, grad) = value_and_grad(&params, |tape| per_sample(tape, idx))?;
                batch_loss += value;
                for (acc, g) in grad_acc.iter_mut().zip(&grad) {
                    *acc += g;
                }
            }
            let scale = 1.0 / chunk.len() as f64;
            let mean_loss = batch_loss * scale;
            let reference = *initial.get_or_insert(mean_loss);
            if !mean_loss.is_finite() || mean_loss > 10.0 * reference.abs().max(1.0) {
                return Err(BenchError::Diverged {
                    epoch,
                    batch: batch_index,
                    loss: mean_loss,
                    initial: reference,
                });
            }
            let values = params.values_mut();
            for k in 0..values.len() {
                velocity[k] = momentum * velocity[k] + grad_acc[k] * scale;
                values[k] -= lr * velocity[k];
            }
            epoch_loss += mean_loss * chunk.len() as f64;
        }
        trace.push(epoch_loss / n as f64);
    }
    Ok((params, trace))
}

/// Trains head and flow jointly on the selected loss. Supervision comes
/// from the corrupted annotations; the clean boxes are never visible to
/// the optimizer. Flow parameters ride along in the same parameter
/// vector and simply receive zero gradient under flow-free losses.
pub fn train(
    head: RegressionHead,
    flow: FlowModel,
    data: &[SceneSample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, BenchError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(BenchError::InvalidConfig {
            detail: "training data is empty".to_string(),
        });
    }
    match (&head.config.mode, cfg.loss) {
        (HeadMode::Gfl(g), LossKind::Gfl) => {
            if *g != cfg.gfl {
                return Err(BenchError::HeadLossMismatch {
                    detail: format!(
                        "head grid {g:?} does not match training grid {:?}",
                        cfg.gfl
                    ),
                });
            }
        }
        (HeadMode::MeanLogSigma, LossKind::Gfl) => {
            return Err(BenchError::HeadLossMismatch {
                detail: "gfl loss requires a grid-logit head".to_string(),
            });
        }
        (HeadMode::Gfl(_), other) => {
            return Err(BenchError::HeadLossMismatch {
                detail: format!("loss `{other}` requires a mean/log-sigma head"),
            });
        }
        (HeadMode::MeanLogSigma, _) => {}
    }
    if data[0].feature.len() != head.config.feature_dim {
        return Err(BenchError::InvalidConfig {
            detail: format!(
                "feature length {} does not match head input {}",
                data[0].feature.len(),
                head.config.feature_dim
            ),
        });
    }

    let targets: Vec<[f64; 4]> = data.iter().map(|s| s.noisy_target().as_array()).collect();
    let clamped_targets = if cfg.loss == LossKind::Gfl {
        targets
            .iter()
            .filter(|t| t.iter().any(|v| v.abs() > cfg.gfl.alpha))
            .count()
    } else {
        0
    };

    let mut b = ParamVector::builder();
    b.push_vector("head.", head.params())?;
    b.push_vector("flow.", flow.params())?;
    let joint = b.build();

    let head_config = head.config.clone();
    let flow_ref = &flow;
    let source = TapeParams::Named("flow.");
    let gfl_cfg = cfg.gfl;
    let (loss_kind, lambda, base) = (cfg.loss, cfg.lambda, cfg.base);
    let build = |tape: &mut Tape<'_>, idx: usize| -> Result<Var, GradError> {
        let out = RegressionHead::forward_tape(&head_config, tape, "head.", &data[idx].feature)?;
        let target = &targets[idx];
        if loss_kind == LossKind::Gfl {
            let (v, _) = gfl_tape(tape, target, out, &gfl_cfg).map_err(|e| match e {
                LossError::Grad(g) => g,
                other => GradError::ShapeMismatch {
                    op: "gfl",
                    detail: other.to_string(),
                },
            })?;
            return Ok(v);
        }
        let t_hat = tape.slice(out, 0..4)?;
        let u = tape.slice(out, 4..8)?;
        match loss_kind {
            LossKind::L2 => l2_tape(tape, target, t_hat),
            LossKind::Kl => kl_tape(tape, target, t_hat, u),
            LossKind::Tolf => {
                total_tape(tape, target, t_hat, u, flow_ref, &source, lambda, base)
            }
            LossKind::FlowOnly => flow_only_tape(tape, target, t_hat, flow_ref, &source),
            LossKind::UncertaintyOnly => {
                uncertainty_only_training_tape(tape, target, t_hat, u)
            }
            LossKind::Gfl => unreachable!("handled above"),
        }
    };

    let (joint, trace) = run_sgd(
        joint,
        cfg.lr,
        cfg.momentum,
        cfg.epochs,
        cfg.batch,
        cfg.seed,
        data.len(),
        build,
    )?;

    let head_params = joint.extract_prefix("head.")?;
    let flow_params = joint.extract_prefix("flow.")?;
    let mut trained_flow = flow;
    trained_flow
        .params_mut()
        .values_mut()
        .copy_from_slice(flow_params.values());
    Ok(TrainOutcome {
        head: RegressionHead {
            config: head_config,
            params: head_params,
        },
        flow: trained_flow,
        trace,
        clamped_targets,
    })
}

/// Hyperparameters for fitting a flow directly to raw samples by
/// negative log-likelihood.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            lr: 0.02,
            momentum: 0.9,
            epochs: 40,
            batch: 64,
            seed: 0,
        }
    }
}

pub struct FitOutcome {
    pub flow: FlowModel,
    pub trace: Vec<f64>,
}

/// Maximum-likelihood flow fit on raw vectors with known dimension;
/// the density-recovery oracle for the noise models.
pub fn fit_flow_to_samples(
    flow: FlowModel,
    samples: &[Vec<f64>],
    cfg: &FitConfig,
) -> Result<FitOutcome, BenchError> {
    if !(cfg.lr > 0.0 && cfg.lr.is_finite()) || cfg.epochs == 0 || cfg.batch == 0 {
        return Err(BenchError::InvalidConfig {
            detail: "fit needs positive lr, epochs >= 1, batch >= 1".to_string(),
        });
    }
    if !(cfg.momentum >= 0.0 && cfg.momentum < 1.0) {
        return Err(BenchError::InvalidConfig {
            detail: format!("momentum must lie in [0, 1), got {}", cfg.momentum),
        });
    }
    if samples.is_empty() {
        return Err(BenchError::InvalidConfig {
            detail: "no samples to fit".to_string(),
        });
    }
    let dim = flow.config().dim;
    if samples.iter().any(|s| s.len() != dim) {
        return Err(BenchError::InvalidConfig {
            detail: format!("every sample must have the flow dimension {dim}"),
        });
    }

    let params = flow.params().clone();
    let flow_ref = &flow;
    let source = TapeParams::Named("");
    let build = |tape: &mut Tape<'_>, idx: usize| -> Result<Var, GradError> {
        let x = tape.constant(samples[idx].clone())?;
        let lp = flow_ref.log_prob_tape(tape, x, &source)?;
        tape.neg(lp)
    };
    let (params, trace) = run_sgd(
        params,
        cfg.lr,
        cfg.momentum,
        cfg.epochs,
        cfg.batch,
        cfg.seed,
        samples.len(),
        build,
    )?;
    let mut fitted = flow;
    fitted.params_mut().values_mut().copy_from_slice(params.values());
    Ok(FitOutcome {
        flow: fitted,
        trace,
    })
}

#[derive(Serialize, Deserialize)]
struct DatasetManifest {
    count: usize,
    feature_dim: usize,
    values_file: String,
    bin_counts: [usize; 4],
}

/// Values per sample in the snapshot array: feature, gt, noisy, anchor,
/// bin index.
fn snapshot_stride(feature_dim: usize) -> usize {
    feature_dim + 13
}

/// Writes a dataset snapshot: a JSON manifest at `path` plus a sibling
/// array of consecutive little-endian f64 values.
pub fn save_dataset(data: &[SceneSample], path: &Path) -> Result<PathBuf, BenchError> {
    let feature_dim = data.first().map_or(FEATURE_DIM, |s| s.feature.len());
    let values_path = path.with_extension("f64");
    let mut bin_counts = [0usize; 4];
    let mut bytes = Vec::with_capacity(data.len() * snapshot_stride(feature_dim) * 8);
    for s in data {
        bin_counts[s.scale_bin.index()] += 1;
        let boxes = [
            (s.gt_box.cx(), s.gt_box.cy(), s.gt_box.w(), s.gt_box.h()),
            (
                s.noisy_box.cx(),
                s.noisy_box.cy(),
                s.noisy_box.w(),
                s.noisy_box.h(),
            ),
            (s.anchor.cx(), s.anchor.cy(), s.anchor.w(), s.anchor.h()),
        ];
        for &v in &s.feature {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        for (cx, cy, w, h) in boxes {
            for v in [cx, cy, w, h] {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        bytes.extend_from_slice(&(s.scale_bin.index() as f64).to_le_bytes());
    }
    std::fs::write(&values_path, &bytes).map_err(|e| BenchError::Io {
        path: values_path.clone(),
        detail: e.to_string(),
    })?;
    let manifest = DatasetManifest {
        count: data.len(),
        feature_dim,
        values_file: values_path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        bin_counts,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| BenchError::Json {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    std::fs::write(path, json).map_err(|e| BenchError::Io {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    Ok(values_path)
}

pub fn load_dataset(path: &Path) -> Result<Vec<SceneSample>, BenchError> {
    let text = std::fs::read_to_string(path).map_err(|e| BenchError::Io {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| BenchError::Json {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let values_path = path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&manifest.values_file);
    let bytes = std::fs::read(&values_path).map_err(|e| BenchError::Io {
        path: values_path.clone(),
        detail: e.to_string(),
    })?;
    let stride = snapshot_stride(manifest.feature_dim);
    if bytes.len() != manifest.count * stride * 8 {
        return Err(BenchError::Io {
            path: values_path,
            detail: format!(
                "expected {} bytes for {} samples, found {}",
                manifest.count * stride * 8,
                manifest.count,
                bytes.len()
            ),
        });
    }
    let mut values = Vec::with_capacity(manifest.count * stride);
    for chunk in bytes.chunks_exact(8) {
        values.push(f64::from_le_bytes(chunk.try_into().expect("8-byte chunk")));
    }
    let mut out = Vec::with_capacity(manifest.count);
    for row in values.chunks_exact(stride) {
        let f = manifest.feature_dim;
        let b = |o: usize| BoundingBox::new_unchecked(row[o], row[o + 1], row[o + 2], row[o + 3]);
        let anchor = Anchor::new_unchecked(row[f + 8], row[f + 9], row[f + 10], row[f + 11]);
        let bin = ScaleBin::from_index(row[f + 12] as usize).ok_or_else(|| BenchError::Io {
            path: values_path.clone(),
            detail: format!("invalid scale bin index {}", row[f + 12]),
        })?;
        out.push(SceneSample {
            feature: row[..f].to_vec(),
            gt_box: b(f),
            noisy_box: b(f + 4),
            anchor,
            scale_bin: bin,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowdist::FlowConfig;
    use crate::locloss::l2_loss;
    use approx::assert_relative_eq;

    fn small_flow() -> FlowModel {
        FlowModel::init(
            FlowConfig {
                dim: 4,
                num_coupling_layers: 2,
                subnet_layers: 3,
                subnet_width: 8,
            },
            0,
        )
        .unwrap()
    }

    fn uniform_mix() -> [f64; 4] {
        [0.25, 0.25, 0.25, 0.25]
    }

    #[test]
    fn scale_bin_boundaries() {
        assert_eq!(ScaleBin::from_side(2.0), Some(ScaleBin::VeryTiny));
        assert_eq!(ScaleBin::from_side(7.999), Some(ScaleBin::VeryTiny));
        assert_eq!(ScaleBin::from_side(8.0), Some(ScaleBin::Tiny));
        assert_eq!(ScaleBin::from_side(16.0), Some(ScaleBin::Small));
        assert_eq!(ScaleBin::from_side(32.0), Some(ScaleBin::Medium));
        assert_eq!(ScaleBin::from_side(64.0), None);
        assert_eq!(ScaleBin::from_side(1.0), None);
    }

    #[test]
    fn generate_respects_scale_mix() {
        let all_vt = generate_dataset(200, [1.0, 0.0, 0.0, 0.0], 0.1, &NoiseModel::None, 1).unwrap();
        assert!(all_vt.iter().all(|s| s.scale_bin == ScaleBin::VeryTiny));

        let mixed = generate_dataset(4000, [0.4, 0.3, 0.2, 0.1], 0.1, &NoiseModel::None, 2).unwrap();
        let mut counts = [0usize; 4];
        for s in &mixed {
            counts[s.scale_bin.index()] += 1;
        }
        for (count, want) in counts.iter().zip([0.4, 0.3, 0.2, 0.1]) {
            let frac = *count as f64 / 4000.0;
            assert!((frac - want).abs() < 0.03, "fraction {frac} vs {want}");
        }

        assert!(matches!(
            generate_dataset(10, [0.5, 0.5, 0.5, 0.0], 0.1, &NoiseModel::None, 3),
            Err(BenchError::InvalidConfig { .. })
        ));
        assert!(matches!(
            generate_dataset(10, [-0.5, 1.5, 0.0, 0.0], 0.1, &NoiseModel::None, 3),
            Err(BenchError::InvalidConfig { .. })
        ));
    }

    #[test]
    fn generated_bins_match_geometry_and_anchors_stay_close() {
        let data = generate_dataset(500, uniform_mix(), 0.1, &NoiseModel::None, 5).unwrap();
        for s in &data {
            let side = (s.gt_box.w() * s.gt_box.h()).sqrt();
            assert_eq!(ScaleBin::from_side(side), Some(s.scale_bin));
            let t = s.clean_target().as_array();
            assert!(t.iter().all(|v| v.abs() < 0.5), "target {t:?}");
            assert!(t.iter().any(|v| v.abs() > 1e-6), "degenerate target {t:?}");
        }
    }

    #[test]
    fn dataset_is_deterministic_per_seed() {
        let model = NoiseModel::GaussianCenter { scale: 2.0 };
        let a = generate_dataset(64, uniform_mix(), 0.2, &model, 9).unwrap();
        let b = generate_dataset(64, uniform_mix(), 0.2, &model, 9).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(64, uniform_mix(), 0.2, &model, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn noiseless_features_are_the_mixed_clean_target() {
        let data = generate_dataset(32, uniform_mix(), 0.0, &NoiseModel::None, 11).unwrap();
        let mix = feature_mix_matrix();
        for s in &data {
            let t = s.clean_target().as_array();
            for i in 0..MIXED_FEATURES {
                let mut v = 0.0;
                for (j, &tj) in t.iter().enumerate() {
                    v += mix[i * 4 + j] * tj;
                }
                assert_eq!(s.feature[i], v);
            }
            assert_eq!(s.feature[14], s.anchor.w().ln() / 4.0);
            assert_eq!(s.feature[15], s.anchor.h().ln() / 4.0);
            assert_eq!(s.gt_box, s.noisy_box);
        }
    }

    #[test]
    fn zero_initialized_head_predicts_anchor_with_unit_sigma() {
        let head = RegressionHead::init(HeadConfig::mean_log_sigma(), 3).unwrap();
        let feature = vec![0.37; FEATURE_DIM];
        let p = head.predict(&feature).unwrap();
        assert_eq!(p.t_hat.as_array(), [0.0; 4]);
        assert_eq!(*p.sigma_hat(), [1.0; 4]);

        let gfl_head = RegressionHead::init(HeadConfig::gfl(GflConfig::default()), 3).unwrap();
        let p = gfl_head.predict(&feature).unwrap();
        let cfg = GflConfig::default();
        let pts = cfg.points() as f64;
        let uniform_var: f64 =
            (0..cfg.points()).map(|k| cfg.grid_point(k).powi(2)).sum::<f64>() / pts;
        for c in 0..4 {
            assert_relative_eq!(p.t_hat.as_array()[c], 0.0, epsilon = 1e-15);
            assert_relative_eq!(p.sigma_hat()[c], uniform_var.sqrt(), epsilon = 1e-12);
        }
    }

    #[test]
    fn batch_predict_matches_single_predictions() {
        let mut head = RegressionHead::init(HeadConfig::mean_log_sigma(), 7).unwrap();
        // Give the final layer nonzero weights so outputs vary.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for v in head.params.values_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
        let data = generate_dataset(16, uniform_mix(), 0.1, &NoiseModel::None, 13).unwrap();
        let features: Vec<Vec<f64>> = data.iter().map(|s| s.feature.clone()).collect();
        let batch = head.predict_batch(&features).unwrap();
        for (f, b) in features.iter().zip(&batch) {
            let single = head.predict(f).unwrap();
            assert_eq!(single, *b);
        }
    }

    #[test]
    fn noiseless_l2_training_reaches_tiny_loss() {
        let data = generate_dataset(512, uniform_mix(), 0.0, &NoiseModel::None, 17).unwrap();
        let head = RegressionHead::init(HeadConfig::mean_log_sigma(), 17).unwrap();
        let cfg = TrainConfig {
            loss: LossKind::L2,
            lr: { 0.1 },
            epochs: 80,
            batch: 32,
            seed: 17,
            ..TrainConfig::default()
        };
        let out = train(head, small_flow(), &data, &cfg).unwrap();
        let final_loss = *out.trace.last().unwrap();
        assert!(
            final_loss < 1e-3,
            "final train l2 {final_loss}, trace head {:?}",
            &out.trace[..3.min(out.trace.len())]
        );
        // The mean train L2 from predictions agrees with the trace's
        // magnitude.
        let mean_l2: f64 = data
            .iter()
            .map(|s| {
                let p = out.head.predict(&s.feature).unwrap();
                l2_loss(&s.noisy_target(), &p.t_hat)
            })
            .sum::<f64>()
            / data.len() as f64;
        assert!(mean_l2 < 1e-3, "post-hoc mean l2 {mean_l2}");
    }

    #[test]
    fn training_is_bit_deterministic() {
        let model = NoiseModel::GaussianCenter { scale: 1.0 };
        let data = generate_dataset(96, uniform_mix(), 0.1, &model, 19).unwrap();
        let cfg = TrainConfig {
            loss: LossKind::Tolf,
            epochs: 2,
            batch: 16,
            lr: 0.02,
            seed: 19,
            ..TrainConfig::default()
        };
        let run = || {
            let head = RegressionHead::init(HeadConfig::mean_log_sigma(), 19).unwrap();
            train(head, small_flow(), &data, &cfg).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.trace, b.trace);
        let bits = |p: &ParamVector| p.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a.head.params()), bits(b.head.params()));
        assert_eq!(bits(a.flow.params()), bits(b.flow.params()));
    }

    #[test]
    fn flow_untouched_by_flow_free_losses() {
        let data = generate_dataset(64, uniform_mix(), 0.1, &NoiseModel::None, 23).unwrap();
        let flow = small_flow();
        let before: Vec<u64> = flow.params().values().iter().map(|v| v.to_bits()).collect();
        let cfg = TrainConfig {
            loss: LossKind::L2,
            epochs: 2,
            batch: 16,
            lr: 0.05,
            seed: 23,
            ..TrainConfig::default()
        };
        let head = RegressionHead::init(HeadConfig::mean_log_sigma(), 23).unwrap();
        let out = train(head, flow, &data, &cfg).unwrap();
        let after: Vec<u64> = out.flow.params().values().iter().map(|v| v.to_bits()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn runaway_learning_rate_reports_divergence() {
        let data = generate_dataset(64, uniform_mix(), 0.1, &NoiseModel::None, 29).unwrap();
        let head = RegressionHead::init(HeadConfig::mean_log_sigma(), 29).unwrap();
        let cfg = TrainConfig {
            loss: LossKind::L2,
            lr: 1e4,
            epochs: 3,
            batch: 16,
            seed: 29,
            ..TrainConfig::default()
        };
        match train(head, small_flow(), &data, &cfg) {
            Err(BenchError::Diverged { loss, initial, .. }) => {
                assert!(loss > 10.0 * initial.abs().max(1.0) || !loss.is_finite());
            }
            other => panic!("expected divergence, got {other:?}", other = other.err()),
        }
    }

    #[test]
    fn mismatched_head_and_loss_are_rejected() {
        let data = generate_dataset(16, uniform_mix(), 0.1, &NoiseModel::None, 31).unwrap();
        let gfl_cfg = TrainConfig {
            loss: LossKind::Gfl,
            epochs: 1,
            ..TrainConfig::default()
        };
        let plain_head = RegressionHead::init(HeadConfig::mean_log_sigma(), 31).unwrap();
        assert!(matches!(
            train(plain_head, small_flow(), &data, &gfl_cfg),
            Err(BenchError::HeadLossMismatch { .. })
        ));

        let l2_cfg = TrainConfig {
            loss: LossKind::L2,
            epochs: 1,
            ..TrainConfig::default()
        };
        let gfl_head = RegressionHead::init(HeadConfig::gfl(GflConfig::default()), 31).unwrap();
        assert!(matches!(
            train(gfl_head, small_flow(), &data, &l2_cfg),
            Err(BenchError::HeadLossMismatch { .. })
        ));
    }

    #[test]
    fn gfl_training_reduces_grid_cross_entropy() {
        let data = generate_dataset(256, uniform_mix(), 0.05, &NoiseModel::None, 37).unwrap();
        let head = RegressionHead::init(HeadConfig::gfl(GflConfig::default()), 37).unwrap();
        let cfg = TrainConfig {
            loss: LossKind::Gfl,
            lr: 0.1,
            epochs: 10,
            batch: 32,
            seed: 37,
            ..TrainConfig::default()
        };
        let out = train(head, small_flow(), &data, &cfg).unwrap();
        // Uniform logits price every coordinate at ln(n+1), so the
        // first epoch cannot average above 4 ln 17.
        let start = out.trace[0];
        let end = *out.trace.last().unwrap();
        assert!(start < 4.0 * 17f64.ln() + 1e-9, "unexpected start {start}");
        assert!(end < start - 1.0, "no progress: {start} -> {end}");
        assert_eq!(out.clamped_targets, 0);
    }

    #[test]
    fn flow_fit_improves_bimodal_likelihood_deterministically() {
        let model = NoiseModel::Bimodal { scale: 0.5, offset: 2.0, weight: 0.5 };
        let draws = crate::noisegen::residual_distribution_sample(&model, 512, 41);
        let samples: Vec<Vec<f64>> = draws.iter().map(|d| d.to_vec()).collect();
        let flow = FlowModel::init(
            FlowConfig {
                dim: 2,
                num_coupling_layers: 4,
                subnet_layers: 3,
                subnet_width: 16,
            },
            41,
        )
        .unwrap();
        let cfg = FitConfig {
            lr: 0.01,
            momentum: 0.9,
            epochs: 40,
            batch: 64,
            seed: 41,
        };
        let out = fit_flow_to_samples(flow.clone(), &samples, &cfg).unwrap();
        assert!(
            *out.trace.last().unwrap() < out.trace[0] - 1.0,
            "no likelihood gain: {:?}",
            (out.trace[0], out.trace.last().unwrap())
        );
        let again = fit_flow_to_samples(flow, &samples, &cfg).unwrap();
        assert_eq!(out.trace, again.trace);
    }

    #[test]
    fn flow_fit_on_standard_normal_stays_near_identity_optimum() {
        let model = NoiseModel::GaussianCenter { scale: 1.0 };
        let draws = crate::noisegen::residual_distribution_sample(&model, 256, 43);
        let samples: Vec<Vec<f64>> = draws.iter().map(|d| d.to_vec()).collect();
        let flow = FlowModel::init(
            FlowConfig {
                dim: 2,
                num_coupling_layers: 2,
                subnet_layers: 3,
                subnet_width: 8,
            },
            43,
        )
        .unwrap();
        let cfg = FitConfig {
            lr: 0.01,
            epochs: 5,
            batch: 64,
            momentum: 0.9,
            seed: 43,
        };
        let out = fit_flow_to_samples(flow, &samples, &cfg).unwrap();
        // Identity initialization is already the maximum-likelihood
        // Gaussian, so the trace barely moves.
        let spread = out.trace.iter().cloned().fold(f64::MIN, f64::max)
            - out.trace.iter().cloned().fold(f64::MAX, f64::min);
        assert!(spread < 0.1, "trace moved by {spread}: {:?}", out.trace);
    }

    #[test]
    fn snapshot_roundtrip_preserves_samples() {
        let model = NoiseModel::StudentT { scale: 1.0, dof: 3.0 };
        let data = generate_dataset(48, uniform_mix(), 0.1, &model, 47).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("snapshot.json");
        save_dataset(&data, &path).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(data, back);
    }

    #[test]
    fn train_config_serde_roundtrip_with_defaults() {
        let cfg = TrainConfig::default();
        let json = serde_json::to_string(&cfg).unwrap();
        let back: TrainConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(cfg, back);

        // lambda, base, and gfl fall back to defaults when omitted.
        let lean: TrainConfig = serde_json::from_str(
            r#"{"loss":"l2","lr":0.01,"momentum":0.9,"epochs":5,"batch":32,"seed":1}"#,
        )
        .unwrap();
        assert_eq!(lean.lambda, DEFAULT_LAMBDA);
        assert_eq!(lean.base, BaseLoss::L2);
        assert_eq!(lean.gfl, GflConfig::default());
    }
}
