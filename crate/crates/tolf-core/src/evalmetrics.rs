//! Evaluation: IoU-threshold accuracies, localization AP, scale-binned
//! breakdowns, density-fit quality against known noise densities, and
//! noise-sensitivity curves.
//!
//! "Localization AP" here is the mean over the IoU thresholds
//! {0.50, 0.55, ..., 0.95} of the fraction of predictions whose decoded
//! box reaches the threshold against the clean ground truth. There is
//! no confidence ranking in a pure-regression benchmark, so this is not
//! detector-style precision-recall AP. Scoring always uses the clean
//! boxes; corrupted annotations exist only on the training side.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::boxgeom::{decode, iou};
use crate::flowdist::{FlowError, FlowModel};
use crate::locloss::Prediction;
use crate::synthbench::{
    generate_dataset, train, BenchError, HeadConfig, RegressionHead, SceneSample, TrainConfig,
};
use crate::flowdist::FlowConfig;
use crate::locloss::LossKind;
use crate::noisegen::NoiseModel;

/// The ten scoring thresholds, 0.50 through 0.95.
pub const IOU_THRESHOLDS: [f64; 10] = [
    0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95,
];

#[derive(Debug)]
pub enum MetricsError {
    EmptyTestSet,
    LengthMismatch { want: usize, got: usize },
    DimMismatch { want: usize, got: usize },
    InvalidGrid { detail: String },
    GridCoverage { mass: f64 },
    NonFinite { what: String },
    Json { detail: String },
    Bench(BenchError),
    Flow(FlowError),
}

impl fmt::Display for MetricsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricsError::EmptyTestSet => write!(f, "evaluation needs at least one sample"),
            MetricsError::LengthMismatch { want, got } => {
                write!(f, "expected {want} entries, got {got}")
            }
            MetricsError::DimMismatch { want, got } => {
                write!(f, "dimension mismatch: want {want}, got {got}")
            }
            MetricsError::InvalidGrid { detail } => write!(f, "invalid grid: {detail}"),
            MetricsError::GridCoverage { mass } => write!(
                f,
                "grid covers only {mass} of the true density mass, need >= 0.999"
            ),
            MetricsError::NonFinite { what } => write!(f, "non-finite value in {what}"),
            MetricsError::Json { detail } => write!(f, "json error: {detail}"),
            MetricsError::Bench(e) => write!(f, "{e}"),
            MetricsError::Flow(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for MetricsError {}

impl From<BenchError> for MetricsError {
    fn from(e: BenchError) -> Self {
        MetricsError::Bench(e)
    }
}

impl From<FlowError> for MetricsError {
    fn from(e: FlowError) -> Self {
        MetricsError::Flow(e)
    }
}

/// Scoring result, kept as integer hit counts plus the floats derived
/// from them, so aggregation identities hold exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    /// Samples per scale bin, indexed by `ScaleBin::index()`.
    pub bin_counts: [usize; 4],
    /// Hits per threshold (outer) and bin (inner).
    pub threshold_hits: [[usize; 4]; 10],
    /// Fraction of samples at or above each threshold.
    pub accuracy: [f64; 10],
    /// Mean of `accuracy`.
    pub loc_ap: f64,
    /// Per-bin AP; `None` for bins with no samples.
    pub per_bin_loc_ap: [Option<f64>; 4],
}

fn mean_accuracy(hit_totals: &[usize; 10], n: usize) -> ([f64; 10], f64) {
    let mut accuracy = [0.0; 10];
    for (a, &h) in accuracy.iter_mut().zip(hit_totals) {
        *a = h as f64 / n as f64;
    }
    let loc_ap = accuracy.iter().sum::<f64>() / 10.0;
    (accuracy, loc_ap)
}

impl EvalOutcome {
    fn from_hits(bin_counts: [usize; 4], threshold_hits: [[usize; 4]; 10]) -> Self {
        let n: usize = bin_counts.iter().sum();
        let mut totals = [0usize; 10];
        for (t, row) in totals.iter_mut().zip(&threshold_hits) {
            *t = row.iter().sum();
        }
        let (accuracy, loc_ap) = mean_accuracy(&totals, n);
        let mut per_bin_loc_ap = [None; 4];
        for b in 0..4 {
            if bin_counts[b] > 0 {
                let mut bin_totals = [0usize; 10];
                for (t, row) in bin_totals.iter_mut().zip(&threshold_hits) {
                    *t = row[b];
                }
                let (_, ap) = mean_accuracy(&bin_totals, bin_counts[b]);
                per_bin_loc_ap[b] = Some(ap);
            }
        }
        EvalOutcome {
            bin_counts,
            threshold_hits,
            accuracy,
            loc_ap,
            per_bin_loc_ap,
        }
    }

    pub fn n(&self) -> usize {
        self.bin_counts.iter().sum()
    }

    /// Recomputes the overall AP from the per-bin hit counts through
    /// the same arithmetic as `loc_ap`; equal bit-for-bit.
    pub fn overall_from_bins(&self) -> f64 {
        let mut totals = [0usize; 10];
        for (t, row) in totals.iter_mut().zip(&self.threshold_hits) {
            *t = row.iter().sum();
        }
        mean_accuracy(&totals, self.n()).1
    }
}

/// Scores decoded predictions against clean ground truth. A prediction
/// whose decoded box is non-finite or degenerate misses every
/// threshold. A hit at threshold t means IoU >= t.
pub fn evaluate_predictions(
    preds: &[Prediction],
    samples: &[SceneSample],
) -> Result<EvalOutcome, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::EmptyTestSet);
    }
    if preds.len() != samples.len() {
        return Err(MetricsError::LengthMismatch {
            want: samples.len(),
            got: preds.len(),
        });
    }
    let mut bin_counts = [0usize; 4];
    let mut threshold_hits = [[0usize; 4]; 10];
    for (pred, sample) in preds.iter().zip(samples) {
        let b = sample.scale_bin.index();
        bin_counts[b] += 1;
        let decoded = decode(&pred.t_hat, &sample.anchor);
        if !decoded.is_valid() {
            continue;
        }
        let overlap = iou(&decoded, &sample.gt_box);
        for (t, &thr) in IOU_THRESHOLDS.iter().enumerate() {
            if overlap >= thr {
                threshold_hits[t][b] += 1;
            }
        }
    }
    Ok(EvalOutcome::from_hits(bin_counts, threshold_hits))
}

/// Runs the head over the test set and scores it.
pub fn evaluate(
    head: &RegressionHead,
    samples: &[SceneSample],
) -> Result<EvalOutcome, MetricsError> {
    let features: Vec<Vec<f64>> = samples.iter().map(|s| s.feature.clone()).collect();
    let preds = head.predict_batch(&features)?;
    evaluate_predictions(&preds, samples)
}

/// Mean IoU of decoded predictions against clean ground truth; an
/// invalid decode contributes zero.
pub fn mean_iou(preds: &[Prediction], samples: &[SceneSample]) -> Result<f64, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::EmptyTestSet);
    }
    if preds.len() != samples.len() {
        return Err(MetricsError::LengthMismatch {
            want: samples.len(),
            got: preds.len(),
        });
    }
    let mut total = 0.0;
    for (pred, sample) in preds.iter().zip(samples) {
        let decoded = decode(&pred.t_hat, &sample.anchor);
        if decoded.is_valid() {
            total += iou(&decoded, &sample.gt_box);
        }
    }
    Ok(total / samples.len() as f64)
}

/// One experiment's results in serializable form. Threshold keys are
/// fixed-point strings ("0.50"), bin keys are bin names; empty bins are
/// absent from the maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub config_digest: String,
    pub accuracy: BTreeMap<String, f64>,
    pub loc_ap: f64,
    pub per_bin_loc_ap: BTreeMap<String, f64>,
    pub bin_counts: BTreeMap<String, usize>,
    pub density_kl: Option<f64>,
    pub trace: Vec<f64>,
    pub wall_time_s: f64,
}

pub fn threshold_key(t: f64) -> String {
    format!("{t:.2}")
}

impl ExperimentRecord {
    pub fn assemble(
        config_digest: &str,
        outcome: &EvalOutcome,
        density_kl: Option<f64>,
        trace: Vec<f64>,
        wall_time_s: f64,
    ) -> Self {
        let mut accuracy = BTreeMap::new();
        for (i, &thr) in IOU_THRESHOLDS.iter().enumerate() {
            accuracy.insert(threshold_key(thr), outcome.accuracy[i]);
        }
        let mut per_bin_loc_ap = BTreeMap::new();
        let mut bin_counts = BTreeMap::new();
        for bin in crate::synthbench::ScaleBin::ALL {
            let b = bin.index();
            bin_counts.insert(bin.name().to_string(), outcome.bin_counts[b]);
            if let Some(ap) = outcome.per_bin_loc_ap[b] {
                per_bin_loc_ap.insert(bin.name().to_string(), ap);
            }
        }
        ExperimentRecord {
            config_digest: config_digest.to_string(),
            accuracy,
            loc_ap: outcome.loc_ap,
            per_bin_loc_ap,
            bin_counts,
            density_kl,
            trace,
            wall_time_s,
        }
    }

    /// Structural invariants: accuracies in [0,1], non-increasing in
    /// threshold, and `loc_ap` their arithmetic mean.
    pub fn validate(&self) -> Result<(), MetricsError> {
        let mut prev = f64::INFINITY;
        let mut sum = 0.0;
        let mut count = 0usize;
        for (key, &a) in &self.accuracy {
            if !(0.0..=1.0).contains(&a) {
                return Err(MetricsError::NonFinite {
                    what: format!("accuracy[{key}] = {a}"),
                });
            }
            if a > prev {
                return Err(MetricsError::NonFinite {
                    what: format!("accuracy increases at threshold {key}"),
                });
            }
            prev = a;
            sum += a;
            count += 1;
        }
        if count != IOU_THRESHOLDS.len() {
            return Err(MetricsError::LengthMismatch {
                want: IOU_THRESHOLDS.len(),
                got: count,
            });
        }
        if (self.loc_ap - sum / count as f64).abs() > 1e-12 {
            return Err(MetricsError::NonFinite {
                what: format!("loc_ap {} is not the accuracy mean", self.loc_ap),
            });
        }
        Ok(())
    }
}

/// Records as JSON lines, one per record.
pub fn records_to_jsonl(records: &[ExperimentRecord]) -> Result<String, MetricsError> {
    let mut out = String::new();
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| MetricsError::Json {
            detail: e.to_string(),
        })?;
        out.push_str(&line);
        out.push('\n');
    }
    Ok(out)
}

/// An RFC-4180 CSV writer into memory: CRLF rows, quoting only where
/// needed. In-memory IO cannot fail, hence the expects.
pub fn csv_writer() -> csv::Writer<Vec<u8>> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::CRLF)
        .from_writer(Vec::new())
}

pub fn csv_into_string(w: csv::Writer<Vec<u8>>) -> String {
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
}

/// Uniform 1D quadrature grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec1d {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

impl GridSpec1d {
    /// The standard density-comparison grid: [-8 sigma, 8 sigma] with
    /// 4001 points.
    pub fn spanning_sigma(sigma: f64) -> Self {
        GridSpec1d {
            lo: -8.0 * sigma,
            hi: 8.0 * sigma,
            points: 4001,
        }
    }

    fn validate(&self) -> Result<(), MetricsError> {
        if !(self.lo.is_finite() && self.hi.is_finite() && self.lo < self.hi) || self.points < 3 {
            return Err(MetricsError::InvalidGrid {
                detail: format!("need finite lo < hi and >= 3 points, got {self:?}"),
            });
        }
        Ok(())
    }

    pub fn step(&self) -> f64 {
        (self.hi - self.lo) / (self.points - 1) as f64
    }

    pub fn point(&self, i: usize) -> f64 {
        self.lo + self.step() * i as f64
    }
}

/// Uniform square 2D grid, `points` per axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec2d {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

impl GridSpec2d {
    /// The standard 2D comparison grid: [-8 sigma, 8 sigma]^2, 401 per
    /// axis.
    pub fn spanning_sigma(sigma: f64) -> Self {
        GridSpec2d {
            lo: -8.0 * sigma,
            hi: 8.0 * sigma,
            points: 401,
        }
    }

    fn validate(&self) -> Result<(), MetricsError> {
        if !(self.lo.is_finite() && self.hi.is_finite() && self.lo < self.hi) || self.points < 3 {
            return Err(MetricsError::InvalidGrid {
                detail: format!("need finite lo < hi and >= 3 points, got {self:?}"),
            });
        }
        Ok(())
    }

    pub fn step(&self) -> f64 {
        (self.hi - self.lo) / (self.points - 1) as f64
    }
}

fn trapezoid_weight(i: usize, points: usize) -> f64 {
    if i == 0 || i + 1 == points {
        0.5
    } else {
        1.0
    }
}

/// KL(true || flow slice) for one coordinate of the flow, the other
/// coordinates pinned at zero. The slice is an unnormalized conditional,
/// so it is renormalized on the grid before comparing. Errors when the
/// grid holds less than 99.9% of the true density's mass.
pub fn density_kl_1d<F>(
    flow: &FlowModel,
    coordinate: usize,
    true_log_density: F,
    grid: &GridSpec1d,
) -> Result<f64, MetricsError>
where
    F: Fn(f64) -> f64,
{
    grid.validate()?;
    let dim = flow.config().dim;
    if coordinate >= dim {
        return Err(MetricsError::DimMismatch {
            want: dim,
            got: coordinate,
        });
    }
    let h = grid.step();
    let mut log_p = Vec::with_capacity(grid.points);
    let mut log_q = Vec::with_capacity(grid.points);
    let mut x = vec![0.0; dim];
    for i in 0..grid.points {
        let xi = grid.point(i);
        log_p.push(true_log_density(xi));
        x[coordinate] = xi;
        log_q.push(flow.log_prob(&x)?);
    }
    let mass: f64 = log_p
        .iter()
        .enumerate()
        .map(|(i, lp)| trapezoid_weight(i, grid.points) * lp.exp())
        .sum::<f64>()
        * h;
    if !(mass >= 0.999) {
        return Err(MetricsError::GridCoverage { mass });
    }
    // Stable on-grid normalizer for the slice.
    let m = log_q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = log_q
        .iter()
        .enumerate()
        .map(|(i, lq)| trapezoid_weight(i, grid.points) * (lq - m).exp())
        .sum::<f64>()
        * h;
    let log_z = m + z.ln();
    let mut kl = 0.0;
    for i in 0..grid.points {
        let p = log_p[i].exp();
        if p > 0.0 {
            kl += trapezoid_weight(i, grid.points) * p * (log_p[i] - (log_q[i] - log_z));
        }
    }
    let kl = kl * h;
    if !kl.is_finite() {
        return Err(MetricsError::NonFinite {
            what: "1d kl quadrature".to_string(),
        });
    }
    Ok(kl)
}

/// KL(true || flow) for a 2-dimensional flow over a square grid, by the
/// trapezoid rule. The flow density is already normalized over the whole
/// plane and is used as-is. Errors when the grid holds less than 99.9%
/// of the true density's mass.
pub fn density_kl_2d<F>(
    flow: &FlowModel,
    true_log_density: F,
    grid: &GridSpec2d,
) -> Result<f64, MetricsError>
where
    F: Fn(f64, f64) -> f64,
{
    grid.validate()?;
    let dim = flow.config().dim;
    if dim != 2 {
        return Err(MetricsError::DimMismatch { want: 2, got: dim });
    }
    let h = grid.step();
    let mut mass = 0.0;
    let mut kl = 0.0;
    for i in 0..grid.points {
        let x = grid.lo + h * i as f64;
        let wi = trapezoid_weight(i, grid.points);
        for j in 0..grid.points {
            let y = grid.lo + h * j as f64;
            let w = wi * trapezoid_weight(j, grid.points);
            let lp = true_log_density(x, y);
            let p = lp.exp();
            mass += w * p;
            if p > 0.0 {
                let lq = flow.log_prob(&[x, y])?;
                kl += w * p * (lp - lq);
            }
        }
    }
    let mass = mass * h * h;
    if !(mass >= 0.999) {
        return Err(MetricsError::GridCoverage { mass });
    }
    let kl = kl * h * h;
    if !kl.is_finite() {
        return Err(MetricsError::NonFinite {
            what: "2d kl quadrature".to_string(),
        });
    }
    Ok(kl)
}

/// Indices of strict interior local maxima.
pub fn local_maxima(values: &[f64]) -> Vec<usize> {
    let mut out = Vec::new();
    for i in 1..values.len().saturating_sub(1) {
        if values[i] > values[i - 1] && values[i] > values[i + 1] {
            out.push(i);
        }
    }
    out
}

/// Local maxima within `drop` of the global maximum; mode counting that
/// ignores negligible ripples far below the peaks.
pub fn prominent_maxima(values: &[f64], drop: f64) -> Vec<usize> {
    let peak = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    local_maxima(values)
        .into_iter()
        .filter(|&i| values[i] >= peak - drop)
        .collect()
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).expect("finite values"));
    let mut r = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        // Tied values share the average rank (1-based).
        let avg = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties. Errors on
/// length mismatch, fewer than two points, non-finite inputs, or a
/// constant sequence (undefined correlation).
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64, MetricsError> {
    if xs.len() != ys.len() {
        return Err(MetricsError::LengthMismatch {
            want: xs.len(),
            got: ys.len(),
        });
    }
    if xs.len() < 2 {
        return Err(MetricsError::EmptyTestSet);
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(MetricsError::NonFinite {
            what: "spearman input".to_string(),
        });
    }
    let rx = ranks(xs);
    let ry = ranks(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(MetricsError::NonFinite {
            what: "spearman on a constant sequence".to_string(),
        });
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Everything a sensitivity sweep needs besides the axis itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveConfig {
    pub train: TrainConfig,
    pub flow: FlowConfig,
    pub n_train: usize,
    pub n_test: usize,
    pub scale_mix: [f64; 4],
    pub feature_noise: f64,
    pub test_seed: u64,
}

/// Mean and spread of localization AP at one noise scale, overall and
/// per bin. Std is the sample standard deviation (zero for one seed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityPoint {
    pub scale: f64,
    pub overall_mean: f64,
    pub overall_std: f64,
    pub per_bin_mean: [Option<f64>; 4],
    pub per_bin_std: [Option<f64>; 4],
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Trains and evaluates one run per (noise scale, seed) with Gaussian
/// center noise of that scale, then aggregates localization AP across
/// seeds. All runs share one clean-scored test set; the per-seed value
/// seeds the dataset, the head, the flow, and the shuffle, so cells are
/// independent and reproducible.
pub fn sensitivity_curve(
    cfg: &CurveConfig,
    scales: &[f64],
    seeds: &[u64],
) -> Result<Vec<SensitivityPoint>, MetricsError> {
    if seeds.is_empty() || scales.is_empty() {
        return Err(MetricsError::EmptyTestSet);
    }
    let test = generate_dataset(
        cfg.n_test,
        cfg.scale_mix,
        cfg.feature_noise,
        &NoiseModel::None,
        cfg.test_seed,
    )?;
    let head_config = match cfg.train.loss {
        LossKind::Gfl => HeadConfig::gfl(cfg.train.gfl),
        _ => HeadConfig::mean_log_sigma(),
    };
    let mut out = Vec::with_capacity(scales.len());
    for &scale in scales {
        let model = NoiseModel::GaussianCenter { scale };
        let mut overall = Vec::with_capacity(seeds.len());
        let mut per_bin: [Vec<f64>; 4] = Default::default();
        for &seed in seeds {
            let data = generate_dataset(
                cfg.n_train,
                cfg.scale_mix,
                cfg.feature_noise,
                &model,
                seed,
            )?;
            let head = RegressionHead::init(head_config.clone(), seed)?;
            let flow = FlowModel::init(cfg.flow, seed)?;
            let mut train_cfg = cfg.train;
            train_cfg.seed = seed;
            let trained = train(head, flow, &data, &train_cfg)?;
            let outcome = evaluate(&trained.head, &test)?;
            overall.push(outcome.loc_ap);
            for b in 0..4 {
                if let Some(ap) = outcome.per_bin_loc_ap[b] {
                    per_bin[b].push(ap);
                }
            }
        }
        let (overall_mean, overall_std) = mean_std(&overall);
        let mut per_bin_mean = [None; 4];
        let mut per_bin_std = [None; 4];
        for b in 0..4 {
            if !per_bin[b].is_empty() {
                let (m, s) = mean_std(&per_bin[b]);
                per_bin_mean[b] = Some(m);
                per_bin_std[b] = Some(s);
            }
        }
        out.push(SensitivityPoint {
            scale,
            overall_mean,
            overall_std,
            per_bin_mean,
            per_bin_std,
        });
    }
    Ok(out)
}

/// Sensitivity table as CSV; empty bins leave their fields blank.
pub fn sensitivity_to_csv(points: &[SensitivityPoint]) -> String {
    let mut w = csv_writer();
    w.write_record([
        "scale",
        "overall_mean",
        "overall_std",
        "very_tiny_mean",
        "very_tiny_std",
        "tiny_mean",
        "tiny_std",
        "small_mean",
        "small_std",
        "medium_mean",
        "medium_std",
    ])
    .expect("in-memory write");
    for p in points {
        let mut fields = vec![
            p.scale.to_string(),
            p.overall_mean.to_string(),
            p.overall_std.to_string(),
        ];
        for b in 0..4 {
            fields.push(p.per_bin_mean[b].map(|v| v.to_string()).unwrap_or_default());
            fields.push(p.per_bin_std[b].map(|v| v.to_string()).unwrap_or_default());
        }
        w.write_record(&fields).expect("in-memory write");
    }
    csv_into_string(w)
}
