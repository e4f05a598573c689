//! Invertible coupling-layer density over residual vectors.
//!
//! The model stacks affine coupling layers: each layer leaves one half
//! of the coordinates alone and transforms the other half with a scale
//! and a shift computed from the untouched half by small fully-connected
//! subnets, alternating halves between layers. The Jacobian is
//! triangular, so the log-determinant is the sum of the scale outputs,
//! and the density follows by change of variables from a standard
//! normal base. Every subnet's final affine map is zero-initialized, so
//! a freshly built model is exactly the base Gaussian; that reduction is
//! load-bearing for the loss bridge checks downstream.
//!
//! Two evaluation paths exist on purpose: a plain `f64` path for
//! sampling, quadrature, and evaluation, and a tape path for training
//! gradients. They are written operation-for-operation identically and
//! tests pin them together to 1e-12.

use std::fmt;
use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::gradcore::{GradError, ParamVector, Tape, Var};

/// log(2 pi), shared by every Gaussian log-density in the crate.
pub const LN_2PI: f64 = 1.8378770664093453;

/// Subnet scale outputs pass through `SCALE_BOUND * tanh`, bounding each
/// layer's per-coordinate expansion to `exp(+-SCALE_BOUND)` so the
/// log-determinant cannot blow up early in training.
pub const SCALE_BOUND: f64 = 2.0;

#[derive(Debug)]
pub enum FlowError {
    InvalidConfig { detail: String },
    DimMismatch { want: usize, got: usize },
    /// The plain evaluation path produced NaN or an infinity.
    NonFinite { layer: usize, stage: &'static str },
    Grad(GradError),
    Io { path: String, detail: String },
    Json { path: String, detail: String },
}

impl fmt::Display for FlowError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FlowError::InvalidConfig { detail } => write!(f, "invalid flow config: {detail}"),
            FlowError::DimMismatch { want, got } => {
                write!(f, "flow input has length {got}, model dimension is {want}")
            }
            FlowError::NonFinite { layer, stage } => {
                write!(f, "non-finite value in coupling layer {layer} at {stage}")
            }
            FlowError::Grad(e) => write!(f, "tape error: {e}"),
            FlowError::Io { path, detail } => write!(f, "io error on {path}: {detail}"),
            FlowError::Json { path, detail } => write!(f, "bad checkpoint json {path}: {detail}"),
        }
    }
}

impl std::error::Error for FlowError {}

impl From<GradError> for FlowError {
    fn from(e: GradError) -> Self {
        FlowError::Grad(e)
    }
}

/// Architecture of the coupling flow.
///
/// `subnet_layers` counts affine maps per subnet; with 3 the shape is
/// input -> width -> width -> output with tanh between maps. Masks are
/// the alternating contiguous halves: even layers transform the upper
/// half given the lower, odd layers the reverse, so with at least two
/// layers every coordinate is transformed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    pub dim: usize,
    pub num_coupling_layers: usize,
    pub subnet_layers: usize,
    pub subnet_width: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            dim: 4,
            num_coupling_layers: 6,
            subnet_layers: 3,
            subnet_width: 64,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<(), FlowError> {
        if self.dim < 2 {
            return Err(FlowError::InvalidConfig {
                detail: format!("dim must be >= 2 (coupling needs a split), got {}", self.dim),
            });
        }
        if self.num_coupling_layers < 1 {
            return Err(FlowError::InvalidConfig {
                detail: "num_coupling_layers must be >= 1".to_string(),
            });
        }
        if self.subnet_layers < 1 {
            return Err(FlowError::InvalidConfig {
                detail: "subnet_layers must be >= 1".to_string(),
            });
        }
        if self.subnet_width < 1 {
            return Err(FlowError::InvalidConfig {
                detail: "subnet_width must be >= 1".to_string(),
            });
        }
        Ok(())
    }

    fn halves(&self) -> (usize, usize) {
        let lo = self.dim / 2;
        (lo, self.dim - lo)
    }

    /// (kept half size, transformed half size) for a coupling layer.
    fn layer_io(&self, layer: usize) -> (usize, usize) {
        let (lo, hi) = self.halves();
        if layer % 2 == 0 {
            (lo, hi)
        } else {
            (hi, lo)
        }
    }

    /// (rows, cols) of each affine map in a subnet mapping `in_dim` to
    /// `out_dim`.
    fn subnet_shapes(&self, in_dim: usize, out_dim: usize) -> Vec<(usize, usize)> {
        let mut shapes = Vec::with_capacity(self.subnet_layers);
        let mut prev = in_dim;
        for k in 0..self.subnet_layers {
            let rows = if k + 1 == self.subnet_layers {
                out_dim
            } else {
                self.subnet_width
            };
            shapes.push((rows, prev));
            prev = rows;
        }
        shapes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Subnet {
    Scale,
    Shift,
}

impl Subnet {
    fn name(self) -> &'static str {
        match self {
            Subnet::Scale => "scale",
            Subnet::Shift => "shift",
        }
    }
}

#[derive(Debug, Clone)]
struct AffineRef {
    w_name: String,
    b_name: String,
    w_range: Range<usize>,
    b_range: Range<usize>,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone)]
struct LayerRefs {
    scale: Vec<AffineRef>,
    shift: Vec<AffineRef>,
}

impl LayerRefs {
    fn subnet(&self, which: Subnet) -> &[AffineRef] {
        match which {
            Subnet::Scale => &self.scale,
            Subnet::Shift => &self.shift,
        }
    }
}

/// Where the tape path finds flow weights.
pub enum TapeParams<'a> {
    /// Read from the tape's parameter vector under this segment-name
    /// prefix; gradients flow into the flow weights. The model's own
    /// stored weights are not consulted.
    Named(&'a str),
    /// Embed the model's current weights as constants; gradients stop at
    /// the flow input. This is the route for the input-gradient oracles.
    Frozen,
}

/// The standard-normal base density.
#[derive(Debug, Clone, Copy)]
pub struct BasePrior {
    pub dim: usize,
}

impl BasePrior {
    pub fn log_density(&self, z: &[f64]) -> Result<f64, FlowError> {
        if z.len() != self.dim {
            return Err(FlowError::DimMismatch {
                want: self.dim,
                got: z.len(),
            });
        }
        Ok(std_normal_log_density(z))
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..self.dim).map(|_| rng.sample(StandardNormal)).collect()
    }
}

pub(crate) fn std_normal_log_density(z: &[f64]) -> f64 {
    let ss: f64 = z.iter().map(|v| v * v).sum();
    ss * -0.5 + -0.5 * z.len() as f64 * LN_2PI
}

/// A coupling flow plus its parameters.
#[derive(Debug, Clone)]
pub struct FlowModel {
    config: FlowConfig,
    params: ParamVector,
    layers: Vec<LayerRefs>,
}

impl FlowModel {
    /// Builds a model with tanh-fan Xavier hidden weights and
    /// zero-initialized final subnet maps, so the initial density is
    /// exactly the standard normal for every seed.
    pub fn init(config: FlowConfig, seed: u64) -> Result<Self, FlowError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut builder = ParamVector::builder();
        for layer in 0..config.num_coupling_layers {
            let (keep, trans) = config.layer_io(layer);
            for which in [Subnet::Scale, Subnet::Shift] {
                let shapes = config.subnet_shapes(keep, trans);
                for (k, (rows, cols)) in shapes.iter().enumerate() {
                    let last = k + 1 == shapes.len();
                    let w = if last {
                        vec![0.0; rows * cols]
                    } else {
                        let bound = (6.0 / (rows + cols) as f64).sqrt();
                        (0..rows * cols)
                            .map(|_| rng.random_range(-bound..bound))
                            .collect()
                    };
                    let b = vec![0.0; *rows];
                    builder
                        .push(&format!("layer{layer}.{}.w{k}", which.name()), w)
                        .map_err(FlowError::Grad)?;
                    builder
                        .push(&format!("layer{layer}.{}.b{k}", which.name()), b)
                        .map_err(FlowError::Grad)?;
                }
            }
        }
        FlowModel::with_params(config, builder.build())
    }

    /// Rebuilds a model from a flat parameter array in checkpoint order.
    pub fn from_flat(config: FlowConfig, flat: Vec<f64>) -> Result<Self, FlowError> {
        config.validate()?;
        let expected = config_param_count(&config);
        if flat.len() != expected {
            return Err(FlowError::InvalidConfig {
                detail: format!(
                    "parameter array has {} values, config needs {expected}",
                    flat.len()
                ),
            });
        }
        let mut builder = ParamVector::builder();
        let mut cursor = 0;
        for layer in 0..config.num_coupling_layers {
            let (keep, trans) = config.layer_io(layer);
            for which in [Subnet::Scale, Subnet::Shift] {
                for (k, (rows, cols)) in config.subnet_shapes(keep, trans).iter().enumerate() {
                    let wl = rows * cols;
                    builder
                        .push(
                            &format!("layer{layer}.{}.w{k}", which.name()),
                            flat[cursor..cursor + wl].to_vec(),
                        )
                        .map_err(FlowError::Grad)?;
                    cursor += wl;
                    builder
                        .push(
                            &format!("layer{layer}.{}.b{k}", which.name()),
                            flat[cursor..cursor + rows].to_vec(),
                        )
                        .map_err(FlowError::Grad)?;
                    cursor += rows;
                }
            }
        }
        FlowModel::with_params(config, builder.build())
    }

    fn with_params(config: FlowConfig, params: ParamVector) -> Result<Self, FlowError> {
        let mut layers = Vec::with_capacity(config.num_coupling_layers);
        for layer in 0..config.num_coupling_layers {
            let (keep, trans) = config.layer_io(layer);
            let mut refs = LayerRefs {
                scale: Vec::new(),
                shift: Vec::new(),
            };
            for which in [Subnet::Scale, Subnet::Shift] {
                let shapes = config.subnet_shapes(keep, trans);
                let mut affines = Vec::with_capacity(shapes.len());
                for (k, (rows, cols)) in shapes.iter().enumerate() {
                    let w_name = format!("layer{layer}.{}.w{k}", which.name());
                    let b_name = format!("layer{layer}.{}.b{k}", which.name());
                    let w_range = params.segment_range(&w_name).map_err(FlowError::Grad)?;
                    let b_range = params.segment_range(&b_name).map_err(FlowError::Grad)?;
                    if w_range.len() != rows * cols || b_range.len() != *rows {
                        return Err(FlowError::InvalidConfig {
                            detail: format!("segment {w_name} does not match config shape"),
                        });
                    }
                    affines.push(AffineRef {
                        w_name,
                        b_name,
                        w_range,
                        b_range,
                        rows: *rows,
                        cols: *cols,
                    });
                }
                match which {
                    Subnet::Scale => refs.scale = affines,
                    Subnet::Shift => refs.shift = affines,
                }
            }
            layers.push(refs);
        }
        Ok(FlowModel {
            config,
            params,
            layers,
        })
    }

    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    /// Mutable weight access for optimizers. Values must stay finite.
    pub fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    pub fn prior(&self) -> BasePrior {
        BasePrior {
            dim: self.config.dim,
        }
    }

    fn eval_subnet(&self, layer: usize, which: Subnet, input: &[f64]) -> Vec<f64> {
        let affines = self.layers[layer].subnet(which);
        let vals = self.params.values();
        let mut h = input.to_vec();
        for (k, aff) in affines.iter().enumerate() {
            let w = &vals[aff.w_range.clone()];
            let b = &vals[aff.b_range.clone()];
            let mut out = vec![0.0; aff.rows];
            for i in 0..aff.rows {
                let row = &w[i * aff.cols..(i + 1) * aff.cols];
                let mut acc = b[i];
                for j in 0..aff.cols {
                    acc += row[j] * h[j];
                }
                out[i] = acc;
            }
            if k + 1 < affines.len() {
                for v in out.iter_mut() {
                    *v = v.tanh();
                }
            }
            h = out;
        }
        h
    }

    /// Squashed scale and raw shift for one layer given the kept half.
    fn layer_scale_shift(&self, layer: usize, keep: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut s = self.eval_subnet(layer, Subnet::Scale, keep);
        for v in s.iter_mut() {
            *v = v.tanh() * SCALE_BOUND;
        }
        let t = self.eval_subnet(layer, Subnet::Shift, keep);
        (s, t)
    }

    fn check_dim(&self, v: &[f64]) -> Result<(), FlowError> {
        if v.len() != self.config.dim {
            return Err(FlowError::DimMismatch {
                want: self.config.dim,
                got: v.len(),
            });
        }
        Ok(())
    }

    /// Base-to-data map: returns the transformed vector and the forward
    /// log-determinant (sum of scale outputs over all layers).
    pub fn forward(&self, z: &[f64]) -> Result<(Vec<f64>, f64), FlowError> {
        self.check_dim(z)?;
        let (lo, _) = self.config.halves();
        let mut cur = z.to_vec();
        let mut log_det = 0.0;
        for layer in 0..self.config.num_coupling_layers {
            let even = layer % 2 == 0;
            let (keep, trans): (&[f64], &[f64]) = if even {
                (&cur[..lo], &cur[lo..])
            } else {
                (&cur[lo..], &cur[..lo])
            };
            let (s, t) = self.layer_scale_shift(layer, keep);
            let mut new_trans = vec![0.0; trans.len()];
            for j in 0..trans.len() {
                new_trans[j] = trans[j] * s[j].exp() + t[j];
            }
            log_det += s.iter().sum::<f64>();
            let mut next = Vec::with_capacity(cur.len());
            if even {
                next.extend_from_slice(keep);
                next.extend_from_slice(&new_trans);
            } else {
                next.extend_from_slice(&new_trans);
                next.extend_from_slice(keep);
            }
            if next.iter().any(|v| !v.is_finite()) || !log_det.is_finite() {
                return Err(FlowError::NonFinite {
                    layer,
                    stage: "forward",
                });
            }
            cur = next;
        }
        Ok((cur, log_det))
    }

    /// Data-to-base map: exact algebraic inverse of [`forward`]; the
    /// returned log-determinant is the inverse map's own (negated sums).
    pub fn inverse(&self, x: &[f64]) -> Result<(Vec<f64>, f64), FlowError> {
        self.check_dim(x)?;
        let (lo, _) = self.config.halves();
        let mut cur = x.to_vec();
        let mut log_det = 0.0;
        for layer in (0..self.config.num_coupling_layers).rev() {
            let even = layer % 2 == 0;
            let (keep, trans): (&[f64], &[f64]) = if even {
                (&cur[..lo], &cur[lo..])
            } else {
                (&cur[lo..], &cur[..lo])
            };
            let (s, t) = self.layer_scale_shift(layer, keep);
            let mut orig_trans = vec![0.0; trans.len()];
            for j in 0..trans.len() {
                orig_trans[j] = (trans[j] - t[j]) * (-s[j]).exp();
            }
            log_det -= s.iter().sum::<f64>();
            let mut next = Vec::with_capacity(cur.len());
            if even {
                next.extend_from_slice(keep);
                next.extend_from_slice(&orig_trans);
            } else {
                next.extend_from_slice(&orig_trans);
                next.extend_from_slice(keep);
            }
            if next.iter().any(|v| !v.is_finite()) || !log_det.is_finite() {
                return Err(FlowError::NonFinite {
                    layer,
                    stage: "inverse",
                });
            }
            cur = next;
        }
        Ok((cur, log_det))
    }

    /// Log-density by change of variables: base log-density at the
    /// inverse image plus the inverse log-determinant. Normalization is
    /// structural, so no separate constant is ever computed.
    pub fn log_prob(&self, t_bar: &[f64]) -> Result<f64, FlowError> {
        let (z, log_det) = self.inverse(t_bar)?;
        Ok(std_normal_log_density(&z) + log_det)
    }

    /// Draws `n` samples by pushing base draws through [`forward`].
    pub fn sample(&self, seed: u64, n: usize) -> Result<Vec<Vec<f64>>, FlowError> {
        if n < 1 {
            return Err(FlowError::InvalidConfig {
                detail: "sample count must be >= 1".to_string(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prior = self.prior();
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let z = prior.sample(&mut rng);
            out.push(self.forward(&z)?.0);
        }
        Ok(out)
    }

    fn subnet_on_tape(
        &self,
        tape: &mut Tape<'_>,
        layer: usize,
        which: Subnet,
        input: Var,
        source: &TapeParams<'_>,
    ) -> Result<Var, GradError> {
        let affines = self.layers[layer].subnet(which);
        let mut h = input;
        for (k, aff) in affines.iter().enumerate() {
            let (w, b) = match source {
                TapeParams::Named(prefix) => (
                    tape.param(&format!("{prefix}{}", aff.w_name))?,
                    tape.param(&format!("{prefix}{}", aff.b_name))?,
                ),
                TapeParams::Frozen => {
                    let vals = self.params.values();
                    (
                        tape.constant(vals[aff.w_range.clone()].to_vec())?,
                        tape.constant(vals[aff.b_range.clone()].to_vec())?,
                    )
                }
            };
            let y = tape.affine(w, b, h, aff.rows, aff.cols)?;
            h = if k + 1 < affines.len() { tape.tanh(y)? } else { y };
        }
        Ok(h)
    }

    /// Tape mirror of [`log_prob`]: same operations in the same order,
    /// so values agree with the plain path to machine precision while
    /// gradients flow to whatever `source` exposes as parameters.
    pub fn log_prob_tape(
        &self,
        tape: &mut Tape<'_>,
        t_bar: Var,
        source: &TapeParams<'_>,
    ) -> Result<Var, GradError> {
        let dim = self.config.dim;
        if tape.len_of(t_bar) != dim {
            return Err(GradError::ShapeMismatch {
                op: "log_prob_tape",
                detail: format!("input length {}, model dimension {dim}", tape.len_of(t_bar)),
            });
        }
        let (lo, _) = self.config.halves();
        let mut cur = t_bar;
        let mut s_total = tape.scalar(0.0)?;
        for layer in (0..self.config.num_coupling_layers).rev() {
            let even = layer % 2 == 0;
            let (keep, trans) = if even {
                (tape.slice(cur, 0..lo)?, tape.slice(cur, lo..dim)?)
            } else {
                (tape.slice(cur, lo..dim)?, tape.slice(cur, 0..lo)?)
            };
            let s_raw = self.subnet_on_tape(tape, layer, Subnet::Scale, keep, source)?;
            let s_sq = tape.tanh(s_raw)?;
            let s = tape.scale(s_sq, SCALE_BOUND)?;
            let t = self.subnet_on_tape(tape, layer, Subnet::Shift, keep, source)?;
            let centered = tape.sub(trans, t)?;
            let neg_s = tape.neg(s)?;
            let shrink = tape.exp(neg_s)?;
            let orig_trans = tape.mul(centered, shrink)?;
            cur = if even {
                tape.concat(keep, orig_trans)?
            } else {
                tape.concat(orig_trans, keep)?
            };
            let s_sum = tape.sum(s)?;
            s_total = tape.add(s_total, s_sum)?;
        }
        let sq = tape.mul(cur, cur)?;
        let ss = tape.sum(sq)?;
        let half = tape.scale(ss, -0.5)?;
        let log_q = tape.add_scalar(half, -0.5 * dim as f64 * LN_2PI)?;
        tape.sub(log_q, s_total)
    }
}

fn config_param_count(config: &FlowConfig) -> usize {
    let mut count = 0;
    for layer in 0..config.num_coupling_layers {
        let (keep, trans) = config.layer_io(layer);
        for (rows, cols) in config.subnet_shapes(keep, trans) {
            count += 2 * (rows * cols + rows);
        }
    }
    count
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: FlowConfig,
    params_file: String,
    param_count: usize,
}

/// Writes `<json_path>` with the config and, next to it, the flat
/// parameter array as consecutive little-endian 64-bit floats in
/// checkpoint order (layers outermost, scale before shift, weights
/// before biases).
pub fn save_checkpoint(model: &FlowModel, json_path: &Path) -> Result<PathBuf, FlowError> {
    let array_path = json_path.with_extension("f64");
    let array_name = array_path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .ok_or_else(|| FlowError::Io {
            path: json_path.display().to_string(),
            detail: "checkpoint path has no file name".to_string(),
        })?;
    let meta = CheckpointMeta {
        config: model.config,
        params_file: array_name,
        param_count: model.params.len(),
    };
    let json = serde_json::to_string_pretty(&meta).map_err(|e| FlowError::Json {
        path: json_path.display().to_string(),
        detail: e.to_string(),
    })?;
    let mut bytes = Vec::with_capacity(model.params.len() * 8);
    for v in model.params.values() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(json_path, json).map_err(|e| FlowError::Io {
        path: json_path.display().to_string(),
        detail: e.to_string(),
    })?;
    std::fs::write(&array_path, bytes).map_err(|e| FlowError::Io {
        path: array_path.display().to_string(),
        detail: e.to_string(),
    })?;
    Ok(array_path)
}

/// Reads a checkpoint written by [`save_checkpoint`]; the array file is
/// resolved relative to the JSON file's directory.
pub fn load_checkpoint(json_path: &Path) -> Result<FlowModel, FlowError> {
    let json = std::fs::read_to_string(json_path).map_err(|e| FlowError::Io {
        path: json_path.display().to_string(),
        detail: e.to_string(),
    })?;
    let meta: CheckpointMeta = serde_json::from_str(&json).map_err(|e| FlowError::Json {
        path: json_path.display().to_string(),
        detail: e.to_string(),
    })?;
    let array_path = json_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&meta.params_file);
    let bytes = std::fs::read(&array_path).map_err(|e| FlowError::Io {
        path: array_path.display().to_string(),
        detail: e.to_string(),
    })?;
    if bytes.len() % 8 != 0 || bytes.len() / 8 != meta.param_count {
        return Err(FlowError::Io {
            path: array_path.display().to_string(),
            detail: format!(
                "array file holds {} bytes, expected {} float64 values",
                bytes.len(),
                meta.param_count
            ),
        });
    }
    let flat: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk is 8 bytes")))
        .collect();
    FlowModel::from_flat(meta.config, flat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcore::{eval_scalar, finite_diff_grad, value_and_grad, FD_STEP};
    use approx::assert_relative_eq;

    fn small_config() -> FlowConfig {
        FlowConfig {
            dim: 4,
            num_coupling_layers: 2,
            subnet_layers: 3,
            subnet_width: 8,
        }
    }

    /// Random small weights everywhere, including final maps, so the
    /// flow is far from identity but still well-conditioned.
    fn perturbed(config: FlowConfig, seed: u64) -> FlowModel {
        let mut model = FlowModel::init(config, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e3779b9);
        for v in model.params_mut().values_mut() {
            *v = rng.random_range(-0.4..0.4);
        }
        model
    }

    #[test]
    fn identity_init_forward_is_identity() {
        let model = FlowModel::init(FlowConfig::default(), 3).unwrap();
        let z = vec![0.3, -1.2, 0.5, 2.0];
        let (x, log_det) = model.forward(&z).unwrap();
        assert_eq!(x, z);
        assert_eq!(log_det, 0.0);
    }

    #[test]
    fn identity_init_log_prob_is_standard_normal() {
        let model = FlowModel::init(FlowConfig::default(), 9).unwrap();
        let t = vec![0.7, -0.1, 1.4, -2.2];
        let lp = model.log_prob(&t).unwrap();
        assert_eq!(lp, std_normal_log_density(&t));
    }

    #[test]
    fn identity_init_per_coordinate_share_at_zero() {
        let model = FlowModel::init(
            FlowConfig {
                dim: 2,
                ..small_config()
            },
            0,
        )
        .unwrap();
        let lp = model.log_prob(&[0.0, 0.0]).unwrap();
        let per_coordinate = lp / 2.0;
        assert_relative_eq!(per_coordinate, -0.5 * LN_2PI, epsilon = 1e-12);
        assert_relative_eq!(per_coordinate, -0.9189385332046727, epsilon = 1e-12);
    }

    #[test]
    fn prior_log_density_at_origin() {
        let prior = BasePrior { dim: 4 };
        let ld = prior.log_density(&[0.0; 4]).unwrap();
        assert_relative_eq!(ld, -2.0 * LN_2PI, epsilon = 1e-15);
    }

    #[test]
    fn inverse_undoes_forward_over_many_points() {
        for (config, points) in [(small_config(), 1000), (FlowConfig::default(), 100)] {
            let model = perturbed(config, 17);
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let mut worst = 0.0f64;
            for _ in 0..points {
                let z: Vec<f64> = (0..config.dim).map(|_| rng.random_range(-3.0..3.0)).collect();
                let (x, _) = model.forward(&z).unwrap();
                let (back, _) = model.inverse(&x).unwrap();
                for (a, b) in back.iter().zip(&z) {
                    worst = worst.max((a - b).abs());
                }
            }
            assert!(worst < 1e-9, "max inversion error {worst}");
        }
    }

    #[test]
    fn log_det_antisymmetric_between_directions() {
        let model = perturbed(small_config(), 23);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..200 {
            let z: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
            let (x, ld_fwd) = model.forward(&z).unwrap();
            let (_, ld_inv) = model.inverse(&x).unwrap();
            assert!((ld_fwd + ld_inv).abs() < 1e-9);
        }
    }

    #[test]
    fn stacked_layers_compose() {
        let config = FlowConfig {
            num_coupling_layers: 3,
            ..small_config()
        };
        let model = perturbed(config, 31);
        let z = vec![0.4, -0.8, 1.1, 0.2];
        let (full, ld_full) = model.forward(&z).unwrap();

        // Apply the same layers one at a time through the private helper.
        let (lo, _) = config.halves();
        let mut cur = z;
        let mut ld = 0.0;
        for layer in 0..3 {
            let even = layer % 2 == 0;
            let (keep, trans): (Vec<f64>, Vec<f64>) = if even {
                (cur[..lo].to_vec(), cur[lo..].to_vec())
            } else {
                (cur[lo..].to_vec(), cur[..lo].to_vec())
            };
            let (s, t) = model.layer_scale_shift(layer, &keep);
            let new_trans: Vec<f64> = trans
                .iter()
                .zip(s.iter().zip(&t))
                .map(|(z, (s, t))| z * s.exp() + t)
                .collect();
            ld += s.iter().sum::<f64>();
            cur = if even {
                keep.iter().chain(&new_trans).cloned().collect()
            } else {
                new_trans.iter().chain(&keep).cloned().collect()
            };
        }
        for (a, b) in cur.iter().zip(&full) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((ld - ld_full).abs() < 1e-12);
    }

    #[test]
    fn every_coordinate_is_transformed_with_two_layers() {
        let model = perturbed(small_config(), 41);
        let z = vec![0.5, -0.5, 0.25, -0.25];
        let (x, _) = model.forward(&z).unwrap();
        for (i, (a, b)) in x.iter().zip(&z).enumerate() {
            assert!((a - b).abs() > 1e-12, "coordinate {i} untouched");
        }
    }

    #[test]
    fn dim_2_density_integrates_to_one() {
        let config = FlowConfig {
            dim: 2,
            num_coupling_layers: 2,
            subnet_layers: 3,
            subnet_width: 8,
        };
        let model = perturbed(config, 47);
        let n = 400;
        let (lo, hi) = (-8.0, 8.0);
        let h = (hi - lo) / (n - 1) as f64;
        let mut mass = 0.0;
        for i in 0..n {
            let x = lo + h * i as f64;
            let wx = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
            for j in 0..n {
                let y = lo + h * j as f64;
                let wy = if j == 0 || j == n - 1 { 0.5 } else { 1.0 };
                mass += wx * wy * model.log_prob(&[x, y]).unwrap().exp();
            }
        }
        mass *= h * h;
        assert!((mass - 1.0).abs() < 1e-3, "mass {mass}");
    }

    #[test]
    fn identity_flow_sample_statistics() {
        let model = FlowModel::init(small_config(), 53).unwrap();
        let n = 100_000;
        let samples = model.sample(99, n).unwrap();
        for c in 0..4 {
            let mean: f64 = samples.iter().map(|s| s[c]).sum::<f64>() / n as f64;
            assert!(mean.abs() < 0.02, "coordinate {c} mean {mean}");
        }
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let model = perturbed(small_config(), 59);
        let a = model.sample(123, 50).unwrap();
        let b = model.sample(123, 50).unwrap();
        for (x, y) in a.iter().zip(&b) {
            for (u, v) in x.iter().zip(y) {
                assert_eq!(u.to_bits(), v.to_bits());
            }
        }
        let c = model.sample(124, 50).unwrap();
        assert!(a.iter().zip(&c).any(|(x, y)| x != y));
    }

    #[test]
    fn samples_map_back_to_standard_normal() {
        let model = perturbed(small_config(), 61);
        let n = 20_000;
        let samples = model.sample(7, n).unwrap();
        for c in 0..4 {
            // One-sample Kolmogorov-Smirnov against N(0,1) at the 1%
            // level: critical value 1.63 / sqrt(n).
            let mut zs: Vec<f64> = samples
                .iter()
                .map(|x| model.inverse(x).unwrap().0[c])
                .collect();
            zs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mut ks = 0.0f64;
            for (i, z) in zs.iter().enumerate() {
                let cdf = 0.5 * (1.0 + statrs::function::erf::erf(z / std::f64::consts::SQRT_2));
                let lo = i as f64 / n as f64;
                let hi = (i + 1) as f64 / n as f64;
                ks = ks.max((cdf - lo).abs()).max((cdf - hi).abs());
            }
            let critical = 1.63 / (n as f64).sqrt();
            assert!(ks < critical, "coordinate {c}: KS {ks} >= {critical}");
        }
    }

    #[test]
    fn tape_path_matches_plain_path() {
        let model = perturbed(small_config(), 67);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let t: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
            let plain = model.log_prob(&t).unwrap();

            let named = eval_scalar(model.params(), |tape| {
                let input = tape.constant(t.clone())?;
                model.log_prob_tape(tape, input, &TapeParams::Named(""))
            })
            .unwrap();
            assert!((plain - named).abs() < 1e-12);

            let empty = ParamVector::builder().build();
            let frozen = eval_scalar(&empty, |tape| {
                let input = tape.constant(t.clone())?;
                model.log_prob_tape(tape, input, &TapeParams::Frozen)
            })
            .unwrap();
            assert!((plain - frozen).abs() < 1e-12);
        }
    }

    #[test]
    fn log_prob_gradient_matches_finite_differences() {
        let model = perturbed(small_config(), 71);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let t: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let build = |tape: &mut Tape<'_>| {
                let input = tape.constant(t.clone())?;
                // Negated so the scalar is the NLL that training uses.
                let lp = model.log_prob_tape(tape, input, &TapeParams::Named(""))?;
                tape.neg(lp)
            };
            let (_, analytic) = value_and_grad(model.params(), build).unwrap();
            let fd = finite_diff_grad(model.params(), FD_STEP, |q| {
                let probe = FlowModel::from_flat(*model.config(), q.values().to_vec()).unwrap();
                Ok(-probe.log_prob(&t).unwrap())
            })
            .unwrap();
            for (i, (a, f)) in analytic.iter().zip(&fd).enumerate() {
                let diff = (a - f).abs();
                assert!(
                    diff <= 1e-6 || diff <= 1e-4 * f.abs().max(a.abs()),
                    "param {i}: analytic {a} vs fd {f}"
                );
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let model = perturbed(small_config(), 73);
        let json_path = dir.path().join("flow.ckpt.json");
        save_checkpoint(&model, &json_path).unwrap();
        let loaded = load_checkpoint(&json_path).unwrap();
        assert_eq!(loaded.config(), model.config());
        assert_eq!(loaded.params().len(), model.params().len());
        for (a, b) in loaded.params().values().iter().zip(model.params().values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        let t = vec![0.3, -0.9, 1.7, 0.01];
        assert_eq!(
            model.log_prob(&t).unwrap().to_bits(),
            loaded.log_prob(&t).unwrap().to_bits()
        );
    }

    #[test]
    fn config_validation_rejects_degenerate_shapes() {
        assert!(FlowConfig {
            dim: 1,
            ..FlowConfig::default()
        }
        .validate()
        .is_err());
        assert!(FlowConfig {
            num_coupling_layers: 0,
            ..FlowConfig::default()
        }
        .validate()
        .is_err());
        assert!(FlowConfig {
            subnet_layers: 0,
            ..FlowConfig::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn dim_mismatch_is_reported() {
        let model = FlowModel::init(FlowConfig::default(), 1).unwrap();
        assert!(matches!(
            model.log_prob(&[0.0, 0.0]),
            Err(FlowError::DimMismatch { want: 4, got: 2 })
        ));
    }

    #[test]
    fn odd_dimension_still_bijective() {
        let config = FlowConfig {
            dim: 5,
            num_coupling_layers: 2,
            subnet_layers: 2,
            subnet_width: 8,
        };
        let model = perturbed(config, 79);
        let z = vec![0.1, -0.2, 0.3, -0.4, 0.5];
        let (x, _) = model.forward(&z).unwrap();
        let (back, _) = model.inverse(&x).unwrap();
        for (a, b) in back.iter().zip(&z) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}
