//! Experiment configuration and the commands behind the `lunet` binary.
//!
//! Every command writes its artifacts into a directory and its human-readable
//! summary into a caller-supplied writer, and reports failures as a
//! [`CliError`] whose category determines the process exit code.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::activation::DEFAULT_ALPHA;
use crate::data::{
    deprocess, gaussian_mixture, load_idx, preprocess, read_points_csv, synthetic_blobs, write_points_csv,
    DataError, LabeledImages, MixtureSpec, Pipeline,
};
use crate::diagnostics::{condition_report, normality_histogram, projection_normality};
use crate::model::{
    init_net_with_alpha, load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, InitScheme, LuNet,
    ModelError,
};
use crate::pgm::{tile, GrayImage};
use crate::train::{
    evaluate_nll, fit, CsvMetrics, EpochMetrics, MetricSink, NllSummary, NllUnit, TrainConfig, TrainError,
};

pub const CHECKPOINT_FILE: &str = "checkpoint.lunet";
pub const INITIAL_CHECKPOINT_FILE: &str = "checkpoint_init.lunet";
pub const METRICS_FILE: &str = "metrics.csv";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.toml";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("I/O error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Io(_) => 5,
        }
    }

    fn io(path: &Path, err: io::Error) -> Self {
        CliError::Io(format!("{}: {err}", path.display()))
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::DimensionMismatch { .. } | ModelError::EmptyBatch => CliError::Data(e.to_string()),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::InvalidConfig(_) => CliError::Config(e.to_string()),
            TrainError::DimensionMismatch { .. } | TrainError::EmptyData => CliError::Data(e.to_string()),
            TrainError::Diverged { .. } => CliError::Numeric(e.to_string()),
            TrainError::Model(m) => m.into(),
            TrainError::Sink(io) => CliError::Io(io.to_string()),
        }
    }
}

fn checkpoint_error(path: &Path, e: CheckpointError) -> CliError {
    match e {
        CheckpointError::Io(io) => CliError::io(path, io),
        other => CliError::Data(format!("{}: {other}", path.display())),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Number of LU layers.
    pub layers: usize,
    /// Input dimension; inferred from the data when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    pub alpha: f64,
    pub init: InitScheme,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 12,
            dim: None,
            alpha: DEFAULT_ALPHA,
            init: InitScheme::Standard,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSource {
    pub n_train: usize,
    pub n_test: usize,
    pub rows: usize,
    pub cols: usize,
    pub seed: u64,
    pub pipeline: Pipeline,
}

impl Default for SyntheticSource {
    fn default() -> Self {
        Self {
            n_train: 2000,
            n_test: 500,
            rows: 28,
            cols: 28,
            seed: 0,
            pipeline: Pipeline::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxSource {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_train: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_test: Option<usize>,
    #[serde(default)]
    pub pipeline: Pipeline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataConfig {
    Mixture(MixtureSpec),
    Idx(IdxSource),
    Synthetic(SyntheticSource),
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Mixture(MixtureSpec::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Samples drawn from the trained model and written next to the
    /// checkpoint.
    pub samples: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/default"),
            samples: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub output: OutputConfig,
}

/// Largest seed the TOML representation can hold.
const MAX_SEED: u64 = i64::MAX as u64;

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text =
            fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Command-line overrides: `seed` replaces both the initialization and
    /// the shuffling seed, `out` the run directory.
    pub fn apply_overrides(&mut self, seed: Option<u64>, out: Option<PathBuf>) {
        if let Some(seed) = seed {
            self.model.seed = seed;
            self.train.seed = seed;
        }
        if let Some(out) = out {
            self.output.dir = out;
        }
    }

    /// Input dimension implied by the data section, when known without
    /// reading files.
    pub fn data_dim(&self) -> Option<usize> {
        match &self.data {
            DataConfig::Mixture(_) => Some(2),
            DataConfig::Synthetic(s) => Some(s.rows * s.cols),
            DataConfig::Idx(_) => None,
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let fail = |msg: String| Err(CliError::Config(msg));
        let m = &self.model;
        if m.layers < 2 {
            return fail(format!("model.layers must be at least 2, got {}", m.layers));
        }
        if m.dim == Some(0) {
            return fail("model.dim must be positive".into());
        }
        if !(m.alpha > 0.0 && m.alpha < 1.0) {
            return fail(format!("model.alpha must lie in (0, 1), got {}", m.alpha));
        }
        if let (Some(dim), Some(data_dim)) = (m.dim, self.data_dim()) {
            if dim != data_dim {
                return fail(format!("model.dim = {dim} but the data has dimension {data_dim}"));
            }
        }
        self.train.validate().map_err(CliError::from)?;
        let mut seeds = vec![m.seed, self.train.seed];
        match &self.data {
            DataConfig::Mixture(spec) => {
                spec.validate().map_err(|e| CliError::Config(e.to_string()))?;
                seeds.push(spec.seed);
            }
            DataConfig::Synthetic(s) => {
                if s.n_train == 0 || s.n_test == 0 || s.rows == 0 || s.cols == 0 {
                    return fail("synthetic data sizes must be positive".into());
                }
                validate_pipeline(&s.pipeline)?;
                seeds.extend([s.seed, s.pipeline.noise_seed]);
            }
            DataConfig::Idx(s) => {
                if s.class.is_some_and(|c| c > 9) {
                    return fail(format!(
                        "data.idx.class must lie in 0..=9, got {}",
                        s.class.unwrap()
                    ));
                }
                if s.max_train == Some(0) || s.max_test == Some(0) {
                    return fail("data.idx.max_train and max_test must be positive".into());
                }
                validate_pipeline(&s.pipeline)?;
                seeds.push(s.pipeline.noise_seed);
            }
        }
        if seeds.iter().any(|&s| s > MAX_SEED) {
            return fail(format!("seeds must not exceed {MAX_SEED}"));
        }
        Ok(())
    }
}

fn validate_pipeline(p: &Pipeline) -> Result<(), CliError> {
    if !(p.scale > 0.0 && p.scale.is_finite()) {
        return Err(CliError::Config(format!(
            "pipeline.scale must be positive, got {}",
            p.scale
        )));
    }
    if !(p.clamp_eps > 0.0 && p.clamp_eps < 0.5) {
        return Err(CliError::Config(format!(
            "pipeline.clamp_eps must lie in (0, 0.5), got {}",
            p.clamp_eps
        )));
    }
    Ok(())
}

/// Image geometry and the pipeline that produced a dataset's vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageInfo {
    pub rows: usize,
    pub cols: usize,
    pub pipeline: Pipeline,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Vec<f64>>,
    pub test: Vec<Vec<f64>>,
    /// Per test sample preprocessing log-density correction (image data).
    pub test_correction: Option<Vec<f64>>,
    pub test_images: Option<LabeledImages>,
    pub image: Option<ImageInfo>,
}

impl Dataset {
    pub fn dim(&self) -> usize {
        self.train.first().or(self.test.first()).map_or(0, Vec::len)
    }
}

/// The test split uses the noise stream `noise_seed + 1` so train and test
/// dequantization noise are independent.
pub fn test_pipeline(train: &Pipeline) -> Pipeline {
    Pipeline {
        noise_seed: train.noise_seed.wrapping_add(1),
        ..*train
    }
}

fn image_dataset(train: LabeledImages, test: LabeledImages, pipeline: Pipeline) -> Dataset {
    let train_vecs = preprocess(&train.images, &pipeline).vectors;
    let processed = preprocess(&test.images, &test_pipeline(&pipeline));
    Dataset {
        train: train_vecs,
        test: processed.vectors,
        test_correction: Some(processed.log_det_correction),
        image: Some(ImageInfo {
            rows: test.rows,
            cols: test.cols,
            pipeline,
        }),
        test_images: Some(test),
    }
}

pub fn load_dataset(data: &DataConfig) -> Result<Dataset, CliError> {
    match data {
        DataConfig::Mixture(spec) => {
            let (train, test) = gaussian_mixture(spec)?;
            Ok(Dataset {
                train,
                test,
                test_correction: None,
                test_images: None,
                image: None,
            })
        }
        DataConfig::Synthetic(s) => {
            let train = synthetic_blobs(s.n_train, s.rows, s.cols, 0, s.seed);
            let test = synthetic_blobs(s.n_test, s.rows, s.cols, 0, s.seed.wrapping_add(1));
            Ok(image_dataset(train, test, s.pipeline))
        }
        DataConfig::Idx(s) => {
            let mut train = load_idx(&s.train_images, &s.train_labels)?;
            let mut test = load_idx(&s.test_images, &s.test_labels)?;
            if let Some(class) = s.class {
                train = train.filter_class(class)?;
                test = test.filter_class(class)?;
            }
            if let Some(n) = s.max_train {
                train = train.take(n);
            }
            if let Some(n) = s.max_test {
                test = test.take(n);
            }
            if (train.rows, train.cols) != (test.rows, test.cols) {
                return Err(CliError::Data(format!(
                    "train images are {}x{} but test images are {}x{}",
                    train.rows, train.cols, test.rows, test.cols
                )));
            }
            Ok(image_dataset(train, test, s.pipeline))
        }
    }
}

/// Where evaluation-style commands take their data from.
#[derive(Debug, Clone)]
pub enum DataArgs {
    /// The test split of an experiment config's data section.
    Config(Box<ExperimentConfig>),
    /// A headered numeric CSV, one vector per row.
    Csv(PathBuf),
}

impl DataArgs {
    pub fn load(&self) -> Result<Dataset, CliError> {
        match self {
            DataArgs::Config(cfg) => load_dataset(&cfg.data),
            DataArgs::Csv(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
                let test =
                    read_points_csv(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
                Ok(Dataset {
                    train: Vec::new(),
                    test,
                    test_correction: None,
                    test_images: None,
                    image: None,
                })
            }
        }
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn open_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    load_checkpoint(path).map_err(|e| checkpoint_error(path, e))
}

fn report(log: &mut dyn Write, line: std::fmt::Arguments) -> Result<(), CliError> {
    writeln!(log, "{line}").map_err(|e| CliError::Io(e.to_string()))
}

fn check_dim(net: &LuNet, data: &Dataset) -> Result<(), CliError> {
    match data.test.iter().find(|x| x.len() != net.dim()) {
        Some(x) => Err(CliError::Data(format!(
            "data dimension {} does not match checkpoint dimension {}",
            x.len(),
            net.dim()
        ))),
        None => Ok(()),
    }
}

/// Mean and spread of the test NLL, in the units a dataset supports.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub nats: NllSummary,
    /// Bits per pixel of the logit-space density.
    pub bpd_raw: Option<NllSummary>,
    /// Bits per pixel of the dequantized pixel density.
    pub bpd_corrected: Option<NllSummary>,
}

fn evaluate(net: &LuNet, data: &Dataset, bits_per_pixel: bool) -> Result<EvalSummary, CliError> {
    let nats = evaluate_nll(net, &data.test, NllUnit::Nats, None)?;
    let (bpd_raw, bpd_corrected) = if bits_per_pixel {
        let raw = evaluate_nll(net, &data.test, NllUnit::BitsPerPixel, None)?;
        let corrected = match &data.test_correction {
            Some(c) => Some(evaluate_nll(net, &data.test, NllUnit::BitsPerPixel, Some(c))?),
            None => None,
        };
        (Some(raw), corrected)
    } else {
        (None, None)
    };
    Ok(EvalSummary {
        nats,
        bpd_raw,
        bpd_corrected,
    })
}

fn print_eval(log: &mut dyn Write, s: &EvalSummary) -> Result<(), CliError> {
    report(
        log,
        format_args!("test NLL: {:.4} ± {:.4} nats", s.nats.mean, s.nats.std),
    )?;
    if let Some(b) = &s.bpd_raw {
        report(
            log,
            format_args!("test NLL (logit space): {:.4} ± {:.4} bits/pixel", b.mean, b.std),
        )?;
    }
    if let Some(b) = &s.bpd_corrected {
        report(
            log,
            format_args!("test NLL (pixel space): {:.4} ± {:.4} bits/pixel", b.mean, b.std),
        )?;
    }
    Ok(())
}

struct ProgressSink<'a> {
    csv: CsvMetrics<BufWriter<File>>,
    log: &'a mut dyn Write,
}

impl MetricSink for ProgressSink<'_> {
    fn record(&mut self, m: &EpochMetrics) -> io::Result<()> {
        self.csv.record(m)?;
        writeln!(
            self.log,
            "epoch {:>3}  lr {:.5}  train NLL {:.4} nats  ({:.1}s)",
            m.epoch, m.lr, m.train_nll, m.wallclock_s
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub run_dir: PathBuf,
    pub final_train_nll: f64,
    pub eval: EvalSummary,
}

/// Trains the configured model and writes the checkpoint, the initial
/// checkpoint, per-epoch metrics and the resolved config into the run
/// directory. Nothing is written unless the config and data are valid.
pub fn cmd_train(mut cfg: ExperimentConfig, log: &mut dyn Write) -> Result<TrainSummary, CliError> {
    cfg.validate()?;
    let data = load_dataset(&cfg.data)?;
    let dim = data.dim();
    match cfg.model.dim {
        Some(d) if d != dim => {
            return Err(CliError::Config(format!(
                "model.dim = {d} but the data has dimension {dim}"
            )))
        }
        _ => cfg.model.dim = Some(dim),
    }
    let mut net = init_net_with_alpha(
        cfg.model.layers,
        dim,
        cfg.model.alpha,
        cfg.model.seed,
        cfg.model.init,
    )
    .map_err(|e| CliError::Config(e.to_string()))?;

    let dir = cfg.output.dir.clone();
    create_dir(&dir)?;
    write_file(&dir.join(RESOLVED_CONFIG_FILE), cfg.to_toml_string()?.as_bytes())?;
    let checkpoint = |net: &LuNet| Checkpoint {
        net: net.clone(),
        gamma: cfg.train.gamma,
        init_seed: cfg.model.seed,
    };
    let save = |name: &str, net: &LuNet| {
        let path = dir.join(name);
        save_checkpoint(&path, &checkpoint(net)).map_err(|e| checkpoint_error(&path, e))
    };
    save(INITIAL_CHECKPOINT_FILE, &net)?;

    report(
        log,
        format_args!(
            "training {} LU layers, D = {dim}, on {} samples for {} epochs",
            cfg.model.layers,
            data.train.len(),
            cfg.train.epochs
        ),
    )?;
    let metrics_path = dir.join(METRICS_FILE);
    let file = File::create(&metrics_path).map_err(|e| CliError::io(&metrics_path, e))?;
    let mut sink = ProgressSink {
        csv: CsvMetrics::new(BufWriter::new(file)),
        log: &mut *log,
    };
    let trained = fit(&mut net, &data.train, &cfg.train, &mut sink)?;
    save(CHECKPOINT_FILE, &net)?;

    let eval = evaluate(&net, &data, data.image.is_some())?;
    print_eval(log, &eval)?;
    if cfg.output.samples > 0 {
        write_samples(
            &net,
            cfg.output.samples,
            cfg.model.seed,
            data.image.as_ref(),
            &dir,
        )?;
    }
    Ok(TrainSummary {
        run_dir: dir,
        final_train_nll: trained.final_train_nll().unwrap_or(f64::NAN),
        eval,
    })
}

/// Evaluates a checkpoint on the test data and writes `log_densities.csv`
/// (`index,log_density`) into `out_dir`.
pub fn cmd_eval(
    checkpoint: &Path,
    data: &DataArgs,
    bits_per_pixel: bool,
    out_dir: &Path,
    log: &mut dyn Write,
) -> Result<EvalSummary, CliError> {
    let net = open_checkpoint(checkpoint)?.net;
    let data = data.load()?;
    check_dim(&net, &data)?;
    let summary = evaluate(&net, &data, bits_per_pixel)?;
    print_eval(log, &summary)?;
    create_dir(out_dir)?;
    let lds = net.log_density_batch(&data.test)?;
    let mut csv = String::from("index,log_density\n");
    for (i, ld) in lds.iter().enumerate() {
        csv.push_str(&format!("{i},{ld}\n"));
    }
    write_file(&out_dir.join("log_densities.csv"), csv.as_bytes())?;
    Ok(summary)
}

fn to_image(rows: usize, cols: usize, pixels: Vec<u8>) -> Result<GrayImage, CliError> {
    GrayImage::new(cols, rows, pixels).map_err(|e| CliError::Data(e.to_string()))
}

fn write_samples(
    net: &LuNet,
    n: usize,
    seed: u64,
    image: Option<&ImageInfo>,
    dir: &Path,
) -> Result<Vec<PathBuf>, CliError> {
    let samples = net.sample(n, seed)?;
    match image {
        None => {
            let path = dir.join("samples.csv");
            let mut buf = Vec::new();
            write_points_csv(&mut buf, &samples).map_err(|e| CliError::io(&path, e))?;
            write_file(&path, &buf)?;
            Ok(vec![path])
        }
        Some(info) => {
            let images = deprocess(&samples, &info.pipeline)
                .into_iter()
                .map(|px| to_image(info.rows, info.cols, px))
                .collect::<Result<Vec<_>, _>>()?;
            let mut paths = Vec::with_capacity(n + 1);
            for (i, img) in images.iter().enumerate() {
                let path = dir.join(format!("sample_{i:04}.pgm"));
                write_file(&path, &img.encode())?;
                paths.push(path);
            }
            if !images.is_empty() {
                let per_row = (images.len() as f64).sqrt().ceil() as usize;
                let path = dir.join("samples_grid.pgm");
                write_file(&path, &tile(&images, per_row).encode())?;
                paths.push(path);
            }
            Ok(paths)
        }
    }
}

/// Image geometry for sampling: explicit, or square when `D` is a perfect
/// square.
pub fn image_shape(dim: usize, rows: Option<usize>, cols: Option<usize>) -> Result<(usize, usize), CliError> {
    match (rows, cols) {
        (Some(r), Some(c)) if r * c == dim => Ok((r, c)),
        (Some(r), Some(c)) => Err(CliError::Config(format!(
            "{r}x{c} images do not have {dim} pixels"
        ))),
        (Some(r), None) if r > 0 && dim.is_multiple_of(r) => Ok((r, dim / r)),
        (None, Some(c)) if c > 0 && dim.is_multiple_of(c) => Ok((dim / c, c)),
        (None, None) => {
            let side = (dim as f64).sqrt().round() as usize;
            if side * side == dim {
                Ok((side, side))
            } else {
                Err(CliError::Config(format!(
                    "dimension {dim} is not square; pass --rows/--cols"
                )))
            }
        }
        _ => Err(CliError::Config(format!(
            "image shape does not divide dimension {dim}"
        ))),
    }
}

/// Draws `n` samples. Writes `samples.csv`, or in image mode one PGM per
/// sample plus `samples_grid.pgm`.
pub fn cmd_sample(
    checkpoint: &Path,
    n: usize,
    seed: u64,
    image: Option<(usize, usize)>,
    out_dir: &Path,
    log: &mut dyn Write,
) -> Result<Vec<PathBuf>, CliError> {
    let net = open_checkpoint(checkpoint)?.net;
    net.check_invertible()?;
    let info = match image {
        Some((rows, cols)) => {
            let (rows, cols) = image_shape(net.dim(), Some(rows), Some(cols))?;
            Some(ImageInfo {
                rows,
                cols,
                pipeline: Pipeline::default(),
            })
        }
        None => None,
    };
    create_dir(out_dir)?;
    let paths = write_samples(&net, n, seed, info.as_ref(), out_dir)?;
    report(log, format_args!("wrote {n} samples to {}", out_dir.display()))?;
    Ok(paths)
}

/// Decodes the straight line between the latent codes of test items `a` and
/// `b`. Image data yields `frame_NNN.pgm` files and `strip.pgm`; vector data
/// yields `interpolation.csv`.
pub fn cmd_interpolate(
    checkpoint: &Path,
    data: &DataArgs,
    a: usize,
    b: usize,
    steps: usize,
    out_dir: &Path,
    log: &mut dyn Write,
) -> Result<Vec<PathBuf>, CliError> {
    if steps < 2 {
        return Err(CliError::Config(format!("steps must be at least 2, got {steps}")));
    }
    let net = open_checkpoint(checkpoint)?.net;
    let data = data.load()?;
    check_dim(&net, &data)?;
    let n = data.test.len();
    for idx in [a, b] {
        if idx >= n {
            return Err(CliError::Data(format!(
                "index {idx} out of range for {n} test items"
            )));
        }
    }
    let path_points = net.interpolate(&data.test[a], &data.test[b], steps)?;
    create_dir(out_dir)?;
    let paths = match &data.image {
        None => {
            let path = out_dir.join("interpolation.csv");
            let mut buf = Vec::new();
            write_points_csv(&mut buf, &path_points).map_err(|e| CliError::io(&path, e))?;
            write_file(&path, &buf)?;
            vec![path]
        }
        Some(info) => {
            let frames = deprocess(&path_points, &info.pipeline)
                .into_iter()
                .map(|px| to_image(info.rows, info.cols, px))
                .collect::<Result<Vec<_>, _>>()?;
            let mut paths = Vec::with_capacity(steps + 1);
            for (i, frame) in frames.iter().enumerate() {
                let path = out_dir.join(format!("frame_{i:03}.pgm"));
                write_file(&path, &frame.encode())?;
                paths.push(path);
            }
            let path = out_dir.join("strip.pgm");
            write_file(&path, &tile(&frames, frames.len()).encode())?;
            paths.push(path);
            paths
        }
    };
    report(
        log,
        format_args!("wrote {steps} interpolation steps to {}", out_dir.display()),
    )?;
    Ok(paths)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnoseSummary {
    pub ks: Vec<(u64, f64)>,
    /// KS statistics of the comparison checkpoint, same seeds.
    pub ks_compare: Option<Vec<f64>>,
}

/// Writes `condition.csv` and, per direction seed, `projection_seed{S}.csv`
/// and `histogram_seed{S}.csv`. With `compare`, also prints the KS statistic
/// of a second checkpoint on the same directions.
pub fn cmd_diagnose(
    checkpoint: &Path,
    data: &DataArgs,
    seeds: &[u64],
    bins: usize,
    compare: Option<&Path>,
    out_dir: &Path,
    log: &mut dyn Write,
) -> Result<DiagnoseSummary, CliError> {
    if bins < 2 {
        return Err(CliError::Config(format!("bins must be at least 2, got {bins}")));
    }
    let net = open_checkpoint(checkpoint)?.net;
    let other = compare.map(open_checkpoint).transpose()?.map(|c| c.net);
    let data = data.load()?;
    check_dim(&net, &data)?;
    if let Some(o) = &other {
        check_dim(o, &data)?;
    }
    create_dir(out_dir)?;

    let cond = condition_report(&net, checkpoint.display().to_string());
    let mut buf = Vec::new();
    cond.write_csv(&mut buf)
        .map_err(|e| CliError::Io(e.to_string()))?;
    write_file(&out_dir.join("condition.csv"), &buf)?;
    for l in &cond.layers {
        let fmt = |k: Option<f64>| k.map_or_else(|| "singular".to_string(), |k| format!("{k:.4e}"));
        report(
            log,
            format_args!(
                "layer {:>2}: kappa(U) = {}, kappa(L) = {}",
                l.layer,
                fmt(l.kappa_upper),
                fmt(l.kappa_lower)
            ),
        )?;
    }

    let mut ks = Vec::with_capacity(seeds.len());
    let mut ks_compare = other.as_ref().map(|_| Vec::with_capacity(seeds.len()));
    for &seed in seeds {
        let test = projection_normality(&net, &data.test, seed)?;
        let mut buf = Vec::new();
        test.write_csv(&mut buf)
            .map_err(|e| CliError::Io(e.to_string()))?;
        write_file(&out_dir.join(format!("projection_seed{seed}.csv")), &buf)?;
        let mut buf = Vec::new();
        normality_histogram(&test, bins)
            .write_csv(&mut buf)
            .map_err(|e| CliError::Io(e.to_string()))?;
        write_file(&out_dir.join(format!("histogram_seed{seed}.csv")), &buf)?;
        ks.push((seed, test.ks_statistic));
        match (&other, &mut ks_compare) {
            (Some(o), Some(list)) => {
                let k = projection_normality(o, &data.test, seed)?.ks_statistic;
                list.push(k);
                report(
                    log,
                    format_args!(
                        "direction seed {seed}: KS = {:.4} (comparison {k:.4})",
                        test.ks_statistic
                    ),
                )?;
            }
            _ => report(
                log,
                format_args!("direction seed {seed}: KS = {:.4}", test.ks_statistic),
            )?,
        }
    }
    if let Some(list) = &ks_compare {
        let wins = ks.iter().zip(list).filter(|((_, a), b)| a < b).count();
        report(
            log,
            format_args!(
                "lower KS than the comparison for {wins} of {} directions",
                ks.len()
            ),
        )?;
    }
    Ok(DiagnoseSummary { ks, ks_compare })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MIXTURE: &str = r#"
[model]
layers = 3
seed = 1

[train]
epochs = 2
lr0 = 0.5

[data.mixture]
n_total = 400

[output]
dir = "unused"
"#;

    #[test]
    fn parses_partial_config_with_defaults() {
        let cfg = ExperimentConfig::from_toml_str(MIXTURE).unwrap();
        assert_eq!(cfg.model.layers, 3);
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.train.batch_size, 128);
        assert_eq!(cfg.train.lr0, 0.5);
        match &cfg.data {
            DataConfig::Mixture(m) => {
                assert_eq!(m.n_total, 400);
                assert_eq!(m.sigma, 0.2);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn resolved_config_round_trips() {
        let mut cfg = ExperimentConfig::from_toml_str(MIXTURE).unwrap();
        cfg.model.dim = Some(2);
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);

        let synth = ExperimentConfig {
            data: DataConfig::Synthetic(SyntheticSource::default()),
            ..ExperimentConfig::default()
        };
        let text = synth.to_toml_string().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), synth);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(matches!(
            ExperimentConfig::from_toml_str("[model]\nlayerz = 3\n"),
            Err(CliError::Config(_))
        ));
        assert!(ExperimentConfig::from_toml_str("[train]\nlr0 = -1.0\n").is_err());
        assert!(ExperimentConfig::from_toml_str("[model]\nlayers = 1\n").is_err());
        assert!(ExperimentConfig::from_toml_str("[model]\ndim = 3\n").is_err());
        assert!(ExperimentConfig::from_toml_str("[data.synthetic]\nrows = 0\n").is_err());
        assert!(ExperimentConfig::from_toml_str("[train]\nclip = \"l2\"\n").is_err());
    }

    #[test]
    fn overrides_replace_seeds_and_directory() {
        let mut cfg = ExperimentConfig::from_toml_str(MIXTURE).unwrap();
        cfg.apply_overrides(Some(9), Some(PathBuf::from("elsewhere")));
        assert_eq!((cfg.model.seed, cfg.train.seed), (9, 9));
        assert_eq!(cfg.output.dir, PathBuf::from("elsewhere"));
    }

    #[test]
    fn exit_codes_are_distinct() {
        let codes = [
            CliError::Config(String::new()).exit_code(),
            CliError::Data(String::new()).exit_code(),
            CliError::Numeric(String::new()).exit_code(),
            CliError::Io(String::new()).exit_code(),
        ];
        assert_eq!(codes, [2, 3, 4, 5]);
    }

    #[test]
    fn image_shapes() {
        assert_eq!(image_shape(784, None, None).unwrap(), (28, 28));
        assert_eq!(image_shape(6, Some(2), None).unwrap(), (2, 3));
        assert!(image_shape(6, None, None).is_err());
        assert!(image_shape(6, Some(4), Some(2)).is_err());
    }
}
