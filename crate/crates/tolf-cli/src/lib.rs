//! Experiment front end: JSON configs in, deterministic run artifacts
//! out.
//!
//! Every run lives in its own directory keyed by tag plus a digest of
//! the effective config, holding the echoed config, the experiment
//! record, the flow checkpoint, and a CSV summary. A config file plus a
//! seed determines all of it bit-exactly (wall time excepted). Sweeps
//! run the cross product of one axis against seeds, mark failed cells,
//! and merge one comparison table.
//!
//! File formats: UTF-8 JSON for configs and records, RFC-4180 CSV for
//! tables, little-endian f64 arrays next to JSON manifests for
//! parameter blobs.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use tolf_core::evalmetrics::{
    csv_into_string, csv_writer, density_kl_2d, evaluate, EvalOutcome, ExperimentRecord,
    GridSpec2d, MetricsError, IOU_THRESHOLDS,
};
use tolf_core::flowdist::{load_checkpoint, save_checkpoint, FlowConfig, FlowError, FlowModel};
use tolf_core::locloss::LossKind;
use tolf_core::noisegen::{log_density_2d, residual_distribution_sample, NoiseModel};
use tolf_core::synthbench::{
    fit_flow_to_samples, generate_dataset, train, BenchError, FitConfig, HeadConfig,
    RegressionHead, ScaleBin, TrainConfig,
};

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

#[derive(Debug)]
pub enum CliError {
    /// Schema or semantic config problem; exits 2.
    Config { detail: String },
    /// Training blew up; exits 3.
    Diverged { detail: String },
    /// Everything else (IO, internal); exits 1.
    Failure { detail: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => EXIT_CONFIG,
            CliError::Diverged { .. } => EXIT_DIVERGED,
            CliError::Failure { .. } => EXIT_FAILURE,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config { detail } => write!(f, "config error: {detail}"),
            CliError::Diverged { detail } => write!(f, "{detail}"),
            CliError::Failure { detail } => write!(f, "{detail}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<BenchError> for CliError {
    fn from(e: BenchError) -> Self {
        match e {
            BenchError::Diverged { .. } => CliError::Diverged {
                detail: e.to_string(),
            },
            BenchError::InvalidConfig { .. } | BenchError::HeadLossMismatch { .. } => {
                CliError::Config {
                    detail: e.to_string(),
                }
            }
            other => CliError::Failure {
                detail: other.to_string(),
            },
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::Bench(b) => b.into(),
            other => CliError::Failure {
                detail: other.to_string(),
            },
        }
    }
}

impl From<FlowError> for CliError {
    fn from(e: FlowError) -> Self {
        CliError::Failure {
            detail: e.to_string(),
        }
    }
}

/// How much data a run generates and how features are observed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub n_train: usize,
    pub n_test: usize,
    pub scale_mix: [f64; 4],
    pub feature_noise: f64,
    pub test_seed: u64,
}

/// One experiment, fully serializable. The training seed doubles as the
/// dataset, head, and flow seed, so config plus seed pins the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub tag: String,
    pub train: TrainConfig,
    pub flow: FlowConfig,
    pub noise: NoiseModel,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    /// When set, fits a fresh 2D flow to the noise model's center
    /// residuals and records KL(true || fitted).
    #[serde(default)]
    pub density_probe: bool,
}

/// The bundled demonstration config.
pub fn quickstart_json() -> &'static str {
    include_str!("../configs/quickstart.json")
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig, CliError> {
    serde_json::from_str(text).map_err(|e| CliError::Config {
        detail: e.to_string(),
    })
}

/// Reads a config file; the name `quickstart.json` falls back to the
/// bundled copy when no such file exists.
pub fn load_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    if !path.exists() && path.file_name().is_some_and(|n| n == "quickstart.json") {
        return parse_config(quickstart_json());
    }
    let text = fs::read_to_string(path).map_err(|e| CliError::Failure {
        detail: format!("cannot read {}: {e}", path.display()),
    })?;
    parse_config(&text)
}

fn tag_is_fs_safe(tag: &str) -> bool {
    !tag.is_empty()
        && tag
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-'))
}

/// Semantic checks past the schema; every message names the field.
pub fn validate_config(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let fail = |detail: String| Err(CliError::Config { detail });
    if !tag_is_fs_safe(&cfg.tag) {
        return fail(format!(
            "tag must be non-empty [A-Za-z0-9._-], got {:?}",
            cfg.tag
        ));
    }
    cfg.train.validate().map_err(CliError::from)?;
    cfg.flow.validate().map_err(|e| CliError::Config {
        detail: e.to_string(),
    })?;
    cfg.noise.validate().map_err(|e| CliError::Config {
        detail: e.to_string(),
    })?;
    let d = &cfg.dataset;
    if d.n_train == 0 || d.n_test == 0 {
        return fail("dataset.n_train and dataset.n_test must be >= 1".to_string());
    }
    if d.scale_mix.iter().any(|&p| !(p >= 0.0) || !p.is_finite())
        || (d.scale_mix.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return fail(format!(
            "dataset.scale_mix must be non-negative and sum to 1, got {:?}",
            d.scale_mix
        ));
    }
    if !(d.feature_noise >= 0.0 && d.feature_noise.is_finite()) {
        return fail(format!(
            "dataset.feature_noise must be >= 0, got {}",
            d.feature_noise
        ));
    }
    Ok(())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// First 8 hex digits of the SHA-256 of the canonical config JSON.
pub fn config_digest(cfg: &ExperimentConfig) -> Result<String, CliError> {
    let canonical = serde_json::to_string(cfg).map_err(|e| CliError::Failure {
        detail: format!("config serialization: {e}"),
    })?;
    let digest = Sha256::digest(canonical.as_bytes());
    Ok(hex(&digest)[..8].to_string())
}

/// Output root precedence: --out flag, config out_dir, TOLF_OUT_DIR,
/// then ./runs.
pub fn resolve_out_root(flag: Option<PathBuf>, cfg: &ExperimentConfig) -> PathBuf {
    flag.or_else(|| cfg.out_dir.clone())
        .or_else(|| std::env::var_os("TOLF_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Failure {
        detail: format!("cannot write {}: {e}", path.display()),
    })
}

fn head_config_for(train: &TrainConfig) -> HeadConfig {
    match train.loss {
        LossKind::Gfl => HeadConfig::gfl(train.gfl),
        _ => HeadConfig::mean_log_sigma(),
    }
}

/// Fits a fresh 2D flow to the noise model's center residuals and
/// measures KL(true || fitted) on the standard comparison grid.
pub fn density_probe(noise: &NoiseModel, seed: u64) -> Result<f64, CliError> {
    let draws = residual_distribution_sample(noise, 1500, seed);
    let samples: Vec<Vec<f64>> = draws.iter().map(|d| d.to_vec()).collect();
    let flow = FlowModel::init(
        FlowConfig {
            dim: 2,
            num_coupling_layers: 4,
            subnet_layers: 3,
            subnet_width: 16,
        },
        seed,
    )?;
    let fit = fit_flow_to_samples(
        flow,
        &samples,
        &FitConfig {
            lr: 0.01,
            momentum: 0.9,
            epochs: 20,
            batch: 64,
            seed,
        },
    )?;
    // Probing needs a continuous density; degenerate models error here.
    log_density_2d(noise, [0.0, 0.0]).map_err(|e| CliError::Config {
        detail: format!("density_probe: {e}"),
    })?;
    let spread = draws
        .iter()
        .flat_map(|d| d.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()))
        / 4.0;
    let grid = GridSpec2d::spanning_sigma(spread.max(1.0));
    let kl = density_kl_2d(
        &fit.flow,
        |x, y| log_density_2d(noise, [x, y]).expect("continuous model"),
        &grid,
    )?;
    Ok(kl)
}

pub struct RunResult {
    pub dir: PathBuf,
    pub record: ExperimentRecord,
    pub clamped_targets: usize,
}

fn summary_csv(cfg: &ExperimentConfig, digest: &str, rec: &ExperimentRecord) -> String {
    let mut w = csv_writer();
    w.write_record([
        "tag",
        "digest",
        "loss",
        "lambda",
        "noise",
        "loc_ap",
        "acc_0.50",
        "acc_0.75",
        "ap_very_tiny",
        "ap_tiny",
        "ap_small",
        "ap_medium",
        "density_kl",
    ])
    .expect("in-memory write");
    let bin = |name: &str| {
        rec.per_bin_loc_ap
            .get(name)
            .map(|v| v.to_string())
            .unwrap_or_default()
    };
    w.write_record([
        cfg.tag.clone(),
        digest.to_string(),
        cfg.train.loss.to_string(),
        cfg.train.lambda.to_string(),
        noise_kind_name(&cfg.noise).to_string(),
        rec.loc_ap.to_string(),
        rec.accuracy["0.50"].to_string(),
        rec.accuracy["0.75"].to_string(),
        bin("very_tiny"),
        bin("tiny"),
        bin("small"),
        bin("medium"),
        rec.density_kl.map(|v| v.to_string()).unwrap_or_default(),
    ])
    .expect("in-memory write");
    csv_into_string(w)
}

pub fn noise_kind_name(noise: &NoiseModel) -> &'static str {
    match noise {
        NoiseModel::None => "none",
        NoiseModel::GaussianCenter { .. } => "gaussian_center",
        NoiseModel::GaussianFull { .. } => "gaussian_full",
        NoiseModel::StudentT { .. } => "student_t",
        NoiseModel::Skewed { .. } => "skewed",
        NoiseModel::Bimodal { .. } => "bimodal",
    }
}

/// Generates, trains, evaluates, and writes one run directory:
/// config.json, record.json, flow_checkpoint.json(+.f64), summary.csv.
/// Refuses a directory that already holds a record unless forced.
pub fn cmd_run(
    cfg: &ExperimentConfig,
    out_root: &Path,
    force: bool,
) -> Result<RunResult, CliError> {
    validate_config(cfg)?;
    let digest = config_digest(cfg)?;
    let dir = out_root.join(format!("{}-{}", cfg.tag, digest));
    if dir.join("record.json").exists() && !force {
        return Err(CliError::Failure {
            detail: format!(
                "run directory {} already holds a record; pass --force to overwrite",
                dir.display()
            ),
        });
    }
    fs::create_dir_all(&dir).map_err(|e| CliError::Failure {
        detail: format!("cannot create {}: {e}", dir.display()),
    })?;
    let config_echo = serde_json::to_string_pretty(cfg).map_err(|e| CliError::Failure {
        detail: format!("config serialization: {e}"),
    })?;
    write_text(&dir.join("config.json"), &config_echo)?;

    let started = Instant::now();
    let d = &cfg.dataset;
    let train_data = generate_dataset(
        d.n_train,
        d.scale_mix,
        d.feature_noise,
        &cfg.noise,
        cfg.train.seed,
    )?;
    let test_data = generate_dataset(
        d.n_test,
        d.scale_mix,
        d.feature_noise,
        &NoiseModel::None,
        d.test_seed,
    )?;
    let head = RegressionHead::init(head_config_for(&cfg.train), cfg.train.seed)?;
    let flow = FlowModel::init(cfg.flow, cfg.train.seed)?;
    let outcome = train(head, flow, &train_data, &cfg.train)?;
    let eval = evaluate(&outcome.head, &test_data)?;
    let kl = if cfg.density_probe {
        Some(density_probe(&cfg.noise, cfg.train.seed)?)
    } else {
        None
    };
    let record = ExperimentRecord::assemble(
        &digest,
        &eval,
        kl,
        outcome.trace.clone(),
        started.elapsed().as_secs_f64(),
    );

    let record_json = serde_json::to_string_pretty(&record).map_err(|e| CliError::Failure {
        detail: format!("record serialization: {e}"),
    })?;
    write_text(&dir.join("record.json"), &record_json)?;
    save_checkpoint(&outcome.flow, &dir.join("flow_checkpoint.json"))?;
    write_text(&dir.join("summary.csv"), &summary_csv(cfg, &digest, &record))?;
    Ok(RunResult {
        dir,
        record,
        clamped_targets: outcome.clamped_targets,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    NoiseScale,
    Lambda,
    Loss,
    CouplingLayers,
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::NoiseScale => "noise_scale",
            SweepAxis::Lambda => "lambda",
            SweepAxis::Loss => "loss",
            SweepAxis::CouplingLayers => "coupling_layers",
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        match s {
            "noise_scale" => Ok(SweepAxis::NoiseScale),
            "lambda" => Ok(SweepAxis::Lambda),
            "loss" => Ok(SweepAxis::Loss),
            "coupling_layers" => Ok(SweepAxis::CouplingLayers),
            other => Err(CliError::Config {
                detail: format!(
                    "unknown sweep axis {other:?}, expected one of noise_scale, lambda, loss, coupling_layers"
                ),
            }),
        }
    }
}

fn noise_with_scale(noise: &NoiseModel, scale: f64) -> NoiseModel {
    match *noise {
        NoiseModel::None => NoiseModel::GaussianCenter { scale },
        NoiseModel::GaussianCenter { .. } => NoiseModel::GaussianCenter { scale },
        NoiseModel::GaussianFull { .. } => NoiseModel::GaussianFull { scale },
        NoiseModel::StudentT { dof, .. } => NoiseModel::StudentT { scale, dof },
        NoiseModel::Skewed { skew, .. } => NoiseModel::Skewed { scale, skew },
        NoiseModel::Bimodal { offset, weight, .. } => NoiseModel::Bimodal {
            scale,
            offset,
            weight,
        },
    }
}

/// Applies one axis value to a copy of the base config.
pub fn apply_axis(
    base: &ExperimentConfig,
    axis: SweepAxis,
    value: &str,
) -> Result<ExperimentConfig, CliError> {
    let mut cfg = base.clone();
    let bad = |detail: String| CliError::Config { detail };
    match axis {
        SweepAxis::NoiseScale => {
            let v: f64 = value
                .parse()
                .map_err(|_| bad(format!("noise_scale value {value:?} is not a number")))?;
            cfg.noise = noise_with_scale(&base.noise, v);
        }
        SweepAxis::Lambda => {
            let v: f64 = value
                .parse()
                .map_err(|_| bad(format!("lambda value {value:?} is not a number")))?;
            cfg.train.lambda = v;
        }
        SweepAxis::Loss => {
            cfg.train.loss = value
                .parse()
                .map_err(|_| bad(format!("loss value {value:?} is not a loss name")))?;
        }
        SweepAxis::CouplingLayers => {
            let v: usize = value
                .parse()
                .map_err(|_| bad(format!("coupling_layers value {value:?} is not an integer")))?;
            cfg.flow.num_coupling_layers = v;
        }
    }
    Ok(cfg)
}

fn fs_safe(text: &str) -> String {
    text.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-') {
                c
            } else {
                '_'
            }
        })
        .collect()
}

pub struct SweepOutcome {
    pub dir: PathBuf,
    pub table_csv: String,
    pub ok: usize,
    pub failed: usize,
}

/// Runs axis values crossed with seeds, each cell an isolated run in a
/// subdirectory; failed cells are marked in the merged table and do not
/// stop the sweep. Cells execute on up to `jobs` threads; the merged
/// table is ordered by (value, seed) regardless of completion order.
pub fn cmd_sweep(
    base: &ExperimentConfig,
    axis: SweepAxis,
    values: &[String],
    seeds: &[u64],
    out_root: &Path,
    jobs: usize,
    force: bool,
) -> Result<SweepOutcome, CliError> {
    validate_config(base)?;
    if values.is_empty() {
        return Err(CliError::Config {
            detail: "sweep needs at least one axis value".to_string(),
        });
    }
    let seeds: Vec<u64> = if seeds.is_empty() {
        vec![base.train.seed]
    } else {
        seeds.to_vec()
    };

    // Derive every cell config up front so bad axis values fail the
    // whole sweep before any training starts.
    let mut cells = Vec::new();
    for value in values {
        let derived = apply_axis(base, axis, value)?;
        for &seed in &seeds {
            let mut cfg = derived.clone();
            cfg.train.seed = seed;
            cfg.tag = format!(
                "{}-{}_{}-seed_{}",
                base.tag,
                axis.name(),
                fs_safe(value),
                seed
            );
            cells.push((value.clone(), seed, cfg));
        }
    }

    let base_digest = config_digest(base)?;
    let mut key = Sha256::new();
    key.update(base_digest.as_bytes());
    key.update(axis.name().as_bytes());
    for v in values {
        key.update(v.as_bytes());
        key.update([0]);
    }
    for s in &seeds {
        key.update(s.to_le_bytes());
    }
    let sweep_digest = &hex(&key.finalize())[..8];
    let dir = out_root.join(format!("{}-sweep-{}-{}", base.tag, axis.name(), sweep_digest));
    if dir.join("sweep.csv").exists() && !force {
        return Err(CliError::Failure {
            detail: format!(
                "sweep directory {} already holds a table; pass --force to overwrite",
                dir.display()
            ),
        });
    }
    fs::create_dir_all(&dir).map_err(|e| CliError::Failure {
        detail: format!("cannot create {}: {e}", dir.display()),
    })?;

    let results: Vec<Mutex<Option<Result<RunResult, CliError>>>> =
        cells.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = jobs.max(1).min(cells.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= cells.len() {
                    break;
                }
                let r = cmd_run(&cells[i].2, &dir, true);
                *results[i].lock().expect("result slot") = Some(r);
            });
        }
    });

    let mut w = csv_writer();
    w.write_record([
        "axis",
        "value",
        "seed",
        "status",
        "loc_ap",
        "acc_0.50",
        "acc_0.75",
        "ap_very_tiny",
        "ap_tiny",
        "ap_small",
        "ap_medium",
        "run_dir",
    ])
    .expect("in-memory write");
    let mut ok = 0usize;
    let mut failed = 0usize;
    for ((value, seed, _), slot) in cells.iter().zip(&results) {
        let result = slot.lock().expect("result slot").take().expect("cell ran");
        let mut fields = vec![axis.name().to_string(), value.clone(), seed.to_string()];
        match result {
            Ok(run) => {
                ok += 1;
                fields.push("ok".to_string());
                fields.push(run.record.loc_ap.to_string());
                fields.push(run.record.accuracy["0.50"].to_string());
                fields.push(run.record.accuracy["0.75"].to_string());
                for bin in ScaleBin::ALL {
                    fields.push(
                        run.record
                            .per_bin_loc_ap
                            .get(bin.name())
                            .map(|v| v.to_string())
                            .unwrap_or_default(),
                    );
                }
                fields.push(run.dir.display().to_string());
            }
            Err(e) => {
                failed += 1;
                let status = match &e {
                    CliError::Diverged { .. } => "diverged",
                    CliError::Config { .. } => "config_error",
                    CliError::Failure { .. } => "failed",
                };
                fields.push(status.to_string());
                for _ in 0..8 {
                    fields.push(String::new());
                }
            }
        }
        w.write_record(&fields).expect("in-memory write");
    }
    let table_csv = csv_into_string(w);
    write_text(&dir.join("sweep.csv"), &table_csv)?;
    Ok(SweepOutcome {
        dir,
        table_csv,
        ok,
        failed,
    })
}

/// Maps a coordinate name to its index: the box-offset names dx, dy,
/// dw, dh, or a bare index for other dimensions.
pub fn coordinate_index(name: &str, dim: usize) -> Result<usize, CliError> {
    let idx = match name {
        "dx" => 0,
        "dy" => 1,
        "dw" => 2,
        "dh" => 3,
        other => other.parse().map_err(|_| CliError::Config {
            detail: format!(
                "unknown coordinate {other:?}, expected dx, dy, dw, dh, or an index"
            ),
        })?,
    };
    if idx >= dim {
        return Err(CliError::Config {
            detail: format!("coordinate {name} is index {idx}, but the flow has dimension {dim}"),
        });
    }
    Ok(idx)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityExportSpec {
    pub coordinate: String,
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
    pub samples: usize,
    pub seed: u64,
}

/// Writes the 1D log-density slice of a checkpointed flow along one
/// coordinate (the others pinned at zero, renormalized on the grid)
/// plus marginal samples for a histogram overlay. The grid is echoed in
/// every slice row: columns coordinate, first, last, step, x,
/// log_density. Returns (slice path, samples path).
pub fn cmd_density_export(
    checkpoint: &Path,
    spec: &DensityExportSpec,
    out_dir: &Path,
) -> Result<(PathBuf, PathBuf), CliError> {
    let flow = load_checkpoint(checkpoint).map_err(|e| CliError::Failure {
        detail: format!("cannot load checkpoint {}: {e}", checkpoint.display()),
    })?;
    let dim = flow.config().dim;
    let coord = coordinate_index(&spec.coordinate, dim)?;
    if !(spec.lo.is_finite() && spec.hi.is_finite() && spec.lo < spec.hi) || spec.points < 2 {
        return Err(CliError::Config {
            detail: format!(
                "grid needs finite lo < hi and points >= 2, got lo={} hi={} points={}",
                spec.lo, spec.hi, spec.points
            ),
        });
    }
    let step = (spec.hi - spec.lo) / (spec.points - 1) as f64;
    let mut log_q = Vec::with_capacity(spec.points);
    let mut x = vec![0.0; dim];
    for i in 0..spec.points {
        x[coord] = spec.lo + step * i as f64;
        log_q.push(flow.log_prob(&x)?);
    }

    // The slice is an unnormalized conditional of the joint. Its mass
    // is integrated on an internal grid spanning 8 sample standard
    // deviations either side of the sample mean, not on the export
    // grid: with the boundary terms vanishing, the trapezoid sum is
    // accurate far past the 1e-9 the curve contract needs.
    let draws = flow.sample(spec.seed, spec.samples.max(256))?;
    let vals: Vec<f64> = draws.iter().map(|d| d[coord]).collect();
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
    let spread = var.sqrt().max(1e-3);
    let (z_lo, z_pts) = (mean - 8.0 * spread, 4001usize);
    let z_step = 16.0 * spread / (z_pts - 1) as f64;
    let mut z_log = Vec::with_capacity(z_pts);
    for i in 0..z_pts {
        x[coord] = z_lo + z_step * i as f64;
        z_log.push(flow.log_prob(&x)?);
    }
    let m = z_log.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (i, lq) in z_log.iter().enumerate() {
        let w = if i == 0 || i + 1 == z_pts { 0.5 } else { 1.0 };
        z += w * (lq - m).exp();
    }
    let log_z = m + (z * z_step).ln();

    fs::create_dir_all(out_dir).map_err(|e| CliError::Failure {
        detail: format!("cannot create {}: {e}", out_dir.display()),
    })?;
    let mut w = csv_writer();
    w.write_record(["coordinate", "first", "last", "step", "x", "log_density"])
        .expect("in-memory write");
    for (i, lq) in log_q.iter().enumerate() {
        w.write_record([
            spec.coordinate.clone(),
            spec.lo.to_string(),
            spec.hi.to_string(),
            step.to_string(),
            (spec.lo + step * i as f64).to_string(),
            (lq - log_z).to_string(),
        ])
        .expect("in-memory write");
    }
    let slice_path = out_dir.join("slice.csv");
    write_text(&slice_path, &csv_into_string(w))?;

    let mut w = csv_writer();
    w.write_record(["sample"]).expect("in-memory write");
    for v in vals.iter().take(spec.samples) {
        w.write_record([v.to_string()]).expect("in-memory write");
    }
    let samples_path = out_dir.join("samples.csv");
    write_text(&samples_path, &csv_into_string(w))?;
    Ok((slice_path, samples_path))
}

pub struct SelftestReport {
    pub checks: Vec<(&'static str, bool)>,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|(_, ok)| *ok)
    }
}

/// Fast end-to-end invariant suite: closed-form IoU arithmetic, the
/// Gaussian-bridge identity, grid-encoding identities, flow
/// invertibility and normalization, a gradient spot-check, and training
/// determinism.
pub fn cmd_selftest() -> SelftestReport {
    let mut checks = Vec::new();
    checks.push(("iou-shift-arithmetic", selftest_iou()));
    checks.push(("gaussian-bridge-identity", selftest_bridge().unwrap_or(false)));
    checks.push(("grid-encoding-identities", selftest_twohot().unwrap_or(false)));
    checks.push(("flow-invertibility", selftest_invertibility().unwrap_or(false)));
    checks.push((
        "flow-identity-log-prob",
        selftest_identity_logprob().unwrap_or(false),
    ));
    checks.push((
        "flow-density-normalization",
        selftest_normalization().unwrap_or(false),
    ));
    checks.push((
        "gradient-finite-difference",
        selftest_gradients().unwrap_or(false),
    ));
    checks.push((
        "training-determinism",
        selftest_determinism().unwrap_or(false),
    ));
    SelftestReport { checks }
}

fn selftest_iou() -> bool {
    use tolf_core::boxgeom::{iou, BoundingBox};
    let base = BoundingBox::new(50.0, 50.0, 10.0, 10.0).expect("valid box");
    let shifted = BoundingBox::new(52.0, 50.0, 10.0, 10.0).expect("valid box");
    let big = BoundingBox::new(500.0, 500.0, 100.0, 100.0).expect("valid box");
    let big_shifted = BoundingBox::new(502.0, 500.0, 100.0, 100.0).expect("valid box");
    (iou(&base, &shifted) - 80.0 / 120.0).abs() < 1e-12
        && (iou(&big, &big_shifted) - 9800.0 / 10200.0).abs() < 1e-12
}

fn selftest_bridge() -> Result<bool, CliError> {
    use rand_like::Mix;
    use tolf_core::boxgeom::RegressionTarget;
    use tolf_core::locloss::{gaussian_kl_loss, tolf_loss, Prediction};
    let flow = FlowModel::init(
        FlowConfig {
            dim: 4,
            num_coupling_layers: 4,
            subnet_layers: 3,
            subnet_width: 16,
        },
        11,
    )?;
    let mut mix = Mix::new(0x5e1f);
    for _ in 0..200 {
        let target = RegressionTarget::from_array([mix.next_pm(2.0), mix.next_pm(2.0), mix.next_pm(2.0), mix.next_pm(2.0)]);
        let t_hat = RegressionTarget::from_array([mix.next_pm(2.0), mix.next_pm(2.0), mix.next_pm(2.0), mix.next_pm(2.0)]);
        let sigma = [
            mix.next_pm(1.0).exp(),
            mix.next_pm(1.0).exp(),
            mix.next_pm(1.0).exp(),
            mix.next_pm(1.0).exp(),
        ];
        let pred = Prediction::new(t_hat, sigma).expect("positive sigma");
        let a = tolf_loss(&target, &pred, &flow).map_err(|e| CliError::Failure {
            detail: e.to_string(),
        })?;
        let b = gaussian_kl_loss(&target, &pred);
        if (a - b).abs() > 1e-12 {
            return Ok(false);
        }
    }
    Ok(true)
}

fn selftest_twohot() -> Result<bool, CliError> {
    use tolf_core::locloss::{gfl_coordinate_loss, gfl_encode_twohot, GflConfig};
    let cfg = GflConfig::default();
    let mut mix = rand_like::Mix::new(0x9e37);
    for _ in 0..500 {
        let t = mix.next_pm(cfg.alpha);
        let hot = gfl_encode_twohot(t, &cfg).map_err(|e| CliError::Failure {
            detail: e.to_string(),
        })?;
        let sum = hot.w_left + hot.w_right;
        let recon = hot.w_left * cfg.grid_point(hot.i_left) + hot.w_right * cfg.grid_point(hot.i_right);
        if (sum - 1.0).abs() > 1e-12 || (recon - t).abs() > 1e-12 {
            return Ok(false);
        }
    }
    let uniform = vec![0.0; cfg.points()];
    let at_grid = gfl_coordinate_loss(cfg.grid_point(4), &uniform, &cfg).map_err(|e| {
        CliError::Failure {
            detail: e.to_string(),
        }
    })?;
    Ok((at_grid.loss - (cfg.points() as f64).ln()).abs() < 1e-12)
}

fn selftest_invertibility() -> Result<bool, CliError> {
    let flow = perturbed_flow(4, 4, 13)?;
    let mut mix = rand_like::Mix::new(0xabcd);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let z: Vec<f64> = (0..4).map(|_| mix.next_pm(2.5)).collect();
        let (x, fwd_det) = flow.forward(&z)?;
        let (back, inv_det) = flow.inverse(&x)?;
        for (a, b) in z.iter().zip(&back) {
            worst = worst.max((a - b).abs());
        }
        worst = worst.max((fwd_det + inv_det).abs());
    }
    Ok(worst < 1e-9)
}

fn selftest_identity_logprob() -> Result<bool, CliError> {
    let flow = FlowModel::init(
        FlowConfig {
            dim: 4,
            num_coupling_layers: 6,
            subnet_layers: 3,
            subnet_width: 32,
        },
        17,
    )?;
    let prior = flow.prior();
    let mut mix = rand_like::Mix::new(0x1234);
    for _ in 0..200 {
        let z: Vec<f64> = (0..4).map(|_| mix.next_pm(3.0)).collect();
        let direct = flow.log_prob(&z)?;
        let closed = prior.log_density(&z)?;
        if direct != closed {
            return Ok(false);
        }
    }
    Ok(true)
}

fn selftest_normalization() -> Result<bool, CliError> {
    let flow = perturbed_flow(2, 4, 19)?;
    let grid = GridSpec2d {
        lo: -9.0,
        hi: 9.0,
        points: 301,
    };
    let h = grid.step();
    let mut mass = 0.0;
    for i in 0..grid.points {
        let wi = if i == 0 || i + 1 == grid.points { 0.5 } else { 1.0 };
        let x = grid.lo + h * i as f64;
        for j in 0..grid.points {
            let wj = if j == 0 || j + 1 == grid.points { 0.5 } else { 1.0 };
            let y = grid.lo + h * j as f64;
            mass += wi * wj * flow.log_prob(&[x, y])?.exp();
        }
    }
    mass *= h * h;
    Ok((mass - 1.0).abs() < 1e-3)
}

fn selftest_gradients() -> Result<bool, CliError> {
    use tolf_core::flowdist::TapeParams;
    use tolf_core::gradcore::{finite_diff_grad, value_and_grad, ParamVector};
    use tolf_core::locloss::{total_tape, BaseLoss};
    let flow = perturbed_flow(4, 2, 23)?;
    let mut mix = rand_like::Mix::new(0x7777);
    let map_grad = |e: tolf_core::gradcore::GradError| CliError::Failure {
        detail: e.to_string(),
    };
    for _ in 0..5 {
        let target = [mix.next_pm(1.5), mix.next_pm(1.5), mix.next_pm(1.5), mix.next_pm(1.5)];
        let mut b = ParamVector::builder();
        b.push("t_hat", (0..4).map(|_| mix.next_pm(1.5)).collect())
            .map_err(map_grad)?;
        b.push("u", (0..4).map(|_| mix.next_pm(1.0)).collect())
            .map_err(map_grad)?;
        let p = b.build();
        let build = |tape: &mut tolf_core::gradcore::Tape<'_>| {
            let t_hat = tape.param("t_hat")?;
            let u = tape.param("u")?;
            total_tape(
                tape,
                &target,
                t_hat,
                u,
                &flow,
                &TapeParams::Frozen,
                0.1,
                BaseLoss::L2,
            )
        };
        let (_, grad) = value_and_grad(&p, build).map_err(map_grad)?;
        let fd = finite_diff_grad(&p, 1e-5, |q| tolf_core::gradcore::eval_scalar(q, build))
            .map_err(map_grad)?;
        for (g, f) in grad.iter().zip(&fd) {
            let diff = (g - f).abs();
            if diff > 1e-6 && diff > 1e-3 * f.abs() {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

fn selftest_determinism() -> Result<bool, CliError> {
    let data = generate_dataset(
        48,
        [0.25, 0.25, 0.25, 0.25],
        0.1,
        &NoiseModel::GaussianCenter { scale: 1.0 },
        29,
    )?;
    let cfg = TrainConfig {
        loss: LossKind::Tolf,
        epochs: 2,
        batch: 16,
        lr: 0.02,
        seed: 29,
        ..TrainConfig::default()
    };
    let run = || -> Result<Vec<u64>, CliError> {
        let head = RegressionHead::init(HeadConfig::mean_log_sigma(), 29)?;
        let flow = FlowModel::init(
            FlowConfig {
                dim: 4,
                num_coupling_layers: 2,
                subnet_layers: 3,
                subnet_width: 8,
            },
            29,
        )?;
        let out = train(head, flow, &data, &cfg)?;
        Ok(out
            .head
            .params()
            .values()
            .iter()
            .chain(out.flow.params().values())
            .map(|v| v.to_bits())
            .collect())
    };
    Ok(run()? == run()?)
}

/// A deterministically perturbed flow: identity init plus a small
/// sinusoidal nudge so tests exercise a non-trivial transform.
fn perturbed_flow(dim: usize, layers: usize, seed: u64) -> Result<FlowModel, CliError> {
    let mut flow = FlowModel::init(
        FlowConfig {
            dim,
            num_coupling_layers: layers,
            subnet_layers: 3,
            subnet_width: 16,
        },
        seed,
    )?;
    for (k, v) in flow.params_mut().values_mut().iter_mut().enumerate() {
        *v += 0.05 * ((k as f64) * 0.7).sin();
    }
    Ok(flow)
}

/// Tiny deterministic value mixer for selftests; keeps the CLI free of
/// RNG dependencies while staying reproducible.
mod rand_like {
    pub struct Mix(u64);

    impl Mix {
        pub fn new(seed: u64) -> Self {
            Mix(seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1))
        }

        fn next_u64(&mut self) -> u64 {
            // splitmix64 step.
            self.0 = self.0.wrapping_add(0x9e3779b97f4a7c15);
            let mut z = self.0;
            z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
            z ^ (z >> 31)
        }

        /// Uniform in (-bound, bound).
        pub fn next_pm(&mut self, bound: f64) -> f64 {
            let unit = (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
            (unit * 2.0 - 1.0) * bound
        }
    }
}

/// Threshold accuracy keys in table order; reused by table writers.
pub fn accuracy_keys() -> Vec<String> {
    IOU_THRESHOLDS
        .iter()
        .map(|t| tolf_core::evalmetrics::threshold_key(*t))
        .collect()
}

/// Pools hit counts of several bins and returns their combined AP,
/// computed with the same arithmetic as the per-bin values.
pub fn pooled_bin_ap(outcome: &EvalOutcome, bins: &[ScaleBin]) -> Option<f64> {
    let count: usize = bins.iter().map(|b| outcome.bin_counts[b.index()]).sum();
    if count == 0 {
        return None;
    }
    let mut mean = 0.0;
    for t in 0..IOU_THRESHOLDS.len() {
        let hits: usize = bins.iter().map(|b| outcome.threshold_hits[t][b.index()]).sum();
        mean += hits as f64 / count as f64;
    }
    Some(mean / IOU_THRESHOLDS.len() as f64)
}
