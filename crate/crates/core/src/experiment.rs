//! Experiment orchestration: configuration, data preparation, training runs
//! and the artifacts they leave on disk.
//!
//! A run directory holds `config.txt` (the resolved configuration, enough to
//! rerun), `manifest.txt` (seed and content hashes of every input),
//! `metrics.csv`, `timings.csv`, and one `round_NNN/` directory per round with
//! the checkpoint, the pseudo-negative store and images.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use sha2::{Digest, Sha256};

use crate::config::ConfigDoc;
use crate::data::{gen_synthetic_2d, load_idx, normalize, write_points_csv, LabeledDataset, Normalization, SyntheticSpec};
use crate::error::{Error, Result};
use crate::image::{write_pgm, GrayImage};
use crate::layers::{Architecture, DEFAULT_LEAKY_SLOPE};
use crate::network::{argmax, save_model, Network};
use crate::oracle::{build_grid, kl_identity, reference_grid, DEFAULT_BOUNDS};
use crate::robustness::{two_way_fool_experiment, write_reports_csv, AttackModel, FoolingReport};
use crate::rng::{derive_seed, rng_for};
use crate::sampler::{AscentOptimizer, SamplerConfig, StoppingRule, SynthesisMethod};
use crate::store::save_store;
use crate::tensor::Tensor;
use crate::trainer::{
    run_reclassification_by_synthesis, train_baseline, train_one_vs_all_ensemble, OracleProbe, PseudoNegativeSource,
    RoundSnapshot, RunOptions, TrainConfig, TrainMode,
};

pub const IDX_FILES: [&str; 4] =
    ["train-images-idx3-ubyte.gz", "train-labels-idx1-ubyte.gz", "t10k-images-idx3-ubyte.gz", "t10k-labels-idx1-ubyte.gz"];

/// Most pseudo-negatives drawn into one image grid.
const GRID_IMAGE_LIMIT: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Synthetic2d,
    MnistSubset,
    MnistFull,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Binary,
    OneVsAll,
    Softmax,
    IcnNoise,
    Baseline,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SourceKind {
    Sampler,
    ExactGrid,
}

macro_rules! names {
    ($ty:ty { $($variant:path => $name:literal),* $(,)? }) => {
        impl $ty {
            pub fn name(self) -> &'static str {
                match self { $($variant => $name),* }
            }
            pub fn parse(s: &str) -> Option<Self> {
                match s { $($name => Some($variant),)* _ => None }
            }
        }
    };
}

names!(Task { Task::Synthetic2d => "synthetic2d", Task::MnistSubset => "mnist-subset", Task::MnistFull => "mnist-full" });
names!(Mode {
    Mode::Binary => "binary",
    Mode::OneVsAll => "one-vs-all",
    Mode::Softmax => "softmax",
    Mode::IcnNoise => "icn-noise",
    Mode::Baseline => "baseline",
});
names!(SourceKind { SourceKind::Sampler => "sampler", SourceKind::ExactGrid => "grid" });

impl Task {
    fn is_image(self) -> bool {
        self != Task::Synthetic2d
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub task: Task,
    pub mode: Mode,
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub data_dir: PathBuf,
    /// Training-set size for `mnist-subset`.
    pub subset: usize,
    /// Size of a separate validation set drawn from the unused training pool;
    /// 0 holds out a fraction of S instead.
    pub validation_size: usize,
    pub test_limit: Option<usize>,
    pub positive_count: usize,
    pub negative_count: usize,
    pub channels: [usize; 4],
    pub hidden: Vec<usize>,
    pub slope: f64,
    pub grid_resolution: usize,
    pub source: SourceKind,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub epsilon: f64,
    pub record_wall_time: bool,
    pub checkpoints: bool,
}

impl ExperimentConfig {
    pub fn defaults(task: Task, mode: Mode) -> Self {
        let image = task.is_image();
        ExperimentConfig {
            task,
            mode,
            seed: 0,
            out_dir: None,
            data_dir: PathBuf::from("data/mnist"),
            subset: 500,
            validation_size: 0,
            test_limit: None,
            positive_count: 200,
            negative_count: 200,
            channels: [64, 128, 256, 512],
            hidden: vec![32, 32],
            slope: DEFAULT_LEAKY_SLOPE,
            grid_resolution: 128,
            source: SourceKind::Sampler,
            train: if image { TrainConfig::mnist() } else { TrainConfig::default() },
            sampler: SamplerConfig { clamp: image.then_some(Normalization::ZeroCenteredUnitRange.range()), ..SamplerConfig::default() },
            epsilon: 0.125,
            record_wall_time: false,
            checkpoints: true,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut doc = ConfigDoc::parse(text)?;
        let task_text = doc.take("", "task").ok_or_else(|| Error::Config("missing `task`".into()))?;
        let task = Task::parse(&task_text).ok_or_else(|| doc.bad("", "task", &task_text))?;
        let mode_text = doc.take("", "mode").ok_or_else(|| Error::Config("missing `mode`".into()))?;
        let mode = Mode::parse(&mode_text).ok_or_else(|| doc.bad("", "mode", &mode_text))?;
        let mut c = ExperimentConfig::defaults(task, mode);
        c.seed = doc.get_or("", "seed", c.seed)?;
        c.out_dir = doc.take("", "out").map(PathBuf::from);
        c.record_wall_time = doc.get_or("", "record_wall_time", c.record_wall_time)?;
        c.checkpoints = doc.get_or("", "checkpoints", c.checkpoints)?;

        c.data_dir = doc.take("data", "dir").map_or(c.data_dir, PathBuf::from);
        c.subset = doc.get_or("data", "subset", c.subset)?;
        c.validation_size = doc.get_or("data", "validation_size", c.validation_size)?;
        c.test_limit = optional(&mut doc, "data", "test_limit", c.test_limit)?;
        c.positive_count = doc.get_or("data", "positive_count", c.positive_count)?;
        c.negative_count = doc.get_or("data", "negative_count", c.negative_count)?;

        if let Some(v) = doc.take("model", "channels") {
            let list = parse_list(&v).ok_or_else(|| doc.bad("model", "channels", &v))?;
            c.channels = list.try_into().map_err(|_| doc.bad("model", "channels", &v))?;
        }
        if let Some(v) = doc.take("model", "hidden") {
            c.hidden = if v == "none" { Vec::new() } else { parse_list(&v).ok_or_else(|| doc.bad("model", "hidden", &v))? };
        }
        c.slope = doc.get_or("model", "slope", c.slope)?;

        let t = &mut c.train;
        t.rounds = doc.get_or("train", "rounds", t.rounds)?;
        t.per_round = doc.get_or("train", "per_round", t.per_round)?;
        t.initial_epochs = doc.get_or("train", "initial_epochs", t.initial_epochs)?;
        t.epochs_per_round = doc.get_or("train", "epochs_per_round", t.epochs_per_round)?;
        t.batch_size = doc.get_or("train", "batch_size", t.batch_size)?;
        t.learning_rate = doc.get_or("train", "learning_rate", t.learning_rate)?;
        t.lr_drop_round = optional(&mut doc, "train", "lr_drop_round", t.lr_drop_round)?;
        t.momentum = doc.get_or("train", "momentum", t.momentum)?;
        t.alpha = doc.get_or("train", "alpha", t.alpha)?;
        t.validation_fraction = doc.get_or("train", "validation_fraction", t.validation_fraction)?;
        t.patience = optional(&mut doc, "train", "patience", t.patience)?;
        t.keep_best = doc.get_or("train", "keep_best", t.keep_best)?;
        t.reinitialize = doc.get_or("train", "reinitialize", t.reinitialize)?;

        let s = &mut c.sampler;
        if let Some(v) = doc.take("sampler", "method") {
            s.method = match v.as_str() {
                "gradient" => SynthesisMethod::PlainGradient,
                "langevin" => SynthesisMethod::Langevin,
                _ => return Err(doc.bad("sampler", "method", &v)),
            };
        }
        if let Some(v) = doc.take("sampler", "stopping") {
            s.stopping = parse_stopping(&v).ok_or_else(|| doc.bad("sampler", "stopping", &v))?;
        }
        let (mut beta1, mut beta2) = (0.5, 0.999);
        if let AscentOptimizer::Adam { beta1: b1, beta2: b2 } = s.optimizer {
            (beta1, beta2) = (b1, b2);
        }
        beta1 = doc.get_or("sampler", "beta1", beta1)?;
        beta2 = doc.get_or("sampler", "beta2", beta2)?;
        s.optimizer = match doc.take("sampler", "optimizer").as_deref() {
            None | Some("adam") => AscentOptimizer::Adam { beta1, beta2 },
            Some("sgd") => AscentOptimizer::Sgd,
            Some(other) => return Err(doc.bad("sampler", "optimizer", other)),
        };
        s.step_size = doc.get_or("sampler", "step_size", s.step_size)?;
        s.anneal = doc.get_or("sampler", "anneal", s.anneal)?;
        s.max_steps = doc.get_or("sampler", "max_steps", s.max_steps)?;
        s.reference_sigma = doc.get_or("sampler", "sigma", s.reference_sigma)?;
        if let Some(v) = doc.take("sampler", "clamp") {
            s.clamp = if v == "none" {
                None
            } else {
                match parse_list::<f64>(&v).as_deref() {
                    Some(&[lo, hi]) => Some((lo, hi)),
                    _ => return Err(doc.bad("sampler", "clamp", &v)),
                }
            };
        }
        if let Some(v) = doc.take("sampler", "source") {
            c.source = SourceKind::parse(&v).ok_or_else(|| doc.bad("sampler", "source", &v))?;
        }
        c.grid_resolution = doc.get_or("oracle", "resolution", c.grid_resolution)?;
        c.epsilon = doc.get_or("adversarial", "epsilon", c.epsilon)?;
        doc.reject_unused()?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.sampler.validate()?;
        if self.mode == Mode::Binary && self.task.is_image() {
            return Err(Error::Config("binary mode needs the synthetic2d task".into()));
        }
        if self.source == SourceKind::ExactGrid && (self.task.is_image() || self.mode != Mode::Binary) {
            return Err(Error::Config("the grid source applies to binary synthetic2d runs only".into()));
        }
        if self.task == Task::MnistSubset && self.subset == 0 {
            return Err(Error::Config("subset size must be at least 1".into()));
        }
        if self.grid_resolution < 2 {
            return Err(Error::Config("grid resolution must be at least 2".into()));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        Ok(())
    }

    /// Canonical text that parses back to this configuration.
    pub fn render(&self) -> String {
        let t = &self.train;
        let s = &self.sampler;
        let opt = |v: Option<usize>| v.map_or("none".to_string(), |n| n.to_string());
        let join = |v: &[usize]| v.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(",");
        let mut out = format!("task = {}\nmode = {}\nseed = {}\n", self.task.name(), self.mode.name(), self.seed);
        if let Some(o) = &self.out_dir {
            out += &format!("out = {}\n", o.display());
        }
        out += &format!("record_wall_time = {}\ncheckpoints = {}\n", self.record_wall_time, self.checkpoints);
        out += &format!(
            "\n[data]\ndir = {}\nsubset = {}\nvalidation_size = {}\ntest_limit = {}\npositive_count = {}\nnegative_count = {}\n",
            self.data_dir.display(),
            self.subset,
            self.validation_size,
            opt(self.test_limit),
            self.positive_count,
            self.negative_count
        );
        let hidden = if self.hidden.is_empty() { "none".to_string() } else { join(&self.hidden) };
        out += &format!("\n[model]\nchannels = {}\nhidden = {hidden}\nslope = {}\n", join(&self.channels), self.slope);
        out += &format!(
            "\n[train]\nrounds = {}\nper_round = {}\ninitial_epochs = {}\nepochs_per_round = {}\nbatch_size = {}\n\
             learning_rate = {}\nlr_drop_round = {}\nmomentum = {}\nalpha = {}\nvalidation_fraction = {}\n\
             patience = {}\nkeep_best = {}\nreinitialize = {}\n",
            t.rounds,
            t.per_round,
            t.initial_epochs,
            t.epochs_per_round,
            t.batch_size,
            t.learning_rate,
            opt(t.lr_drop_round),
            t.momentum,
            t.alpha,
            t.validation_fraction,
            opt(t.patience),
            t.keep_best,
            t.reinitialize
        );
        let method = match s.method {
            SynthesisMethod::PlainGradient => "gradient",
            SynthesisMethod::Langevin => "langevin",
        };
        let stopping = match s.stopping {
            StoppingRule::BecomesPositive => "positive".to_string(),
            StoppingRule::Confidence(c) => format!("confidence:{c}"),
            StoppingRule::FixedSteps(n) => format!("steps:{n}"),
        };
        let optimizer = match s.optimizer {
            AscentOptimizer::Sgd => "optimizer = sgd\n".to_string(),
            AscentOptimizer::Adam { beta1, beta2 } => format!("optimizer = adam\nbeta1 = {beta1}\nbeta2 = {beta2}\n"),
        };
        let clamp = s.clamp.map_or("none".to_string(), |(lo, hi)| format!("{lo},{hi}"));
        out += &format!(
            "\n[sampler]\nsource = {}\nmethod = {method}\nstopping = {stopping}\n{optimizer}step_size = {}\nanneal = {}\n\
             max_steps = {}\nsigma = {}\nclamp = {clamp}\n",
            self.source.name(),
            s.step_size,
            s.anneal,
            s.max_steps,
            s.reference_sigma
        );
        out += &format!("\n[oracle]\nresolution = {}\n\n[adversarial]\nepsilon = {}\n", self.grid_resolution, self.epsilon);
        out
    }

    pub fn architecture(&self, heads: usize) -> Architecture {
        if self.task.is_image() {
            Architecture::mnist(self.channels, self.slope, heads)
        } else {
            Architecture::mlp(2, &self.hidden, self.slope, heads)
        }
    }

    fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec { positive_count: self.positive_count, negative_count: self.negative_count, ..SyntheticSpec::default() }
    }

    /// Whether the trained model is a single binary head (with the given data).
    fn train_mode(&self) -> TrainMode {
        match (self.mode, self.task) {
            (Mode::Binary, _) | (Mode::IcnNoise | Mode::Baseline, Task::Synthetic2d) => TrainMode::Binary,
            _ => TrainMode::Softmax,
        }
    }
}

fn optional(doc: &mut ConfigDoc, section: &str, key: &str, default: Option<usize>) -> Result<Option<usize>> {
    match doc.take(section, key) {
        None => Ok(default),
        Some(v) if v == "none" => Ok(None),
        Some(v) => v.parse().map(Some).map_err(|_| doc.bad(section, key, &v)),
    }
}

fn parse_list<T: std::str::FromStr>(v: &str) -> Option<Vec<T>> {
    v.split(',').map(|p| p.trim().parse().ok()).collect()
}

fn parse_stopping(v: &str) -> Option<StoppingRule> {
    if v == "positive" {
        return Some(StoppingRule::BecomesPositive);
    }
    let (kind, arg) = v.split_once(':')?;
    match kind {
        "confidence" => arg.parse().ok().map(StoppingRule::Confidence),
        "steps" => arg.parse().ok().map(StoppingRule::FixedSteps),
        _ => None,
    }
}

/// One line of `metrics.csv`. Columns that do not apply stay empty.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub round: usize,
    pub train_loss: Option<f64>,
    pub val_error: Option<f64>,
    pub test_error: Option<f64>,
    pub store_size: usize,
    pub kl_to_positive: Option<f64>,
    pub wall_time: Option<f64>,
}

pub const METRICS_HEADER: [&str; 7] =
    ["round", "train_loss", "val_error", "test_error", "store_size", "kl_to_positive", "wall_time"];

/// `v` with 9 significant digits: fixed notation for moderate exponents,
/// scientific otherwise, without trailing zeros.
pub fn format_sig9(v: f64) -> String {
    if !v.is_finite() {
        return format!("{v}");
    }
    if v == 0.0 {
        return "0".to_string();
    }
    let sci = format!("{v:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    let trim = |s: String| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    };
    if (-5..9).contains(&exp) {
        trim(format!("{v:.*}", (8 - exp) as usize))
    } else {
        format!("{}e{exp}", trim(mantissa.to_string()))
    }
}

pub fn emit_metrics(rows: &[MetricsRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(METRICS_HEADER)?;
    let opt = |v: Option<f64>| v.map(format_sig9).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.round.to_string(),
            opt(r.train_loss),
            opt(r.val_error),
            opt(r.test_error),
            r.store_size.to_string(),
            opt(r.kl_to_positive),
            opt(r.wall_time),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn parse_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    if r.headers()?.iter().collect::<Vec<_>>() != METRICS_HEADER {
        return Err(Error::Format(format!("{}: unexpected metrics header", path.display())));
    }
    let bad = |what: &str| Error::Format(format!("{}: bad {what}", path.display()));
    let float = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|_| bad("number"))
        }
    };
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != METRICS_HEADER.len() {
            return Err(bad("row length"));
        }
        rows.push(MetricsRow {
            round: rec[0].parse().map_err(|_| bad("round"))?,
            train_loss: float(&rec[1])?,
            val_error: float(&rec[2])?,
            test_error: float(&rec[3])?,
            store_size: rec[4].parse().map_err(|_| bad("store size"))?,
            kl_to_positive: float(&rec[5])?,
            wall_time: float(&rec[6])?,
        });
    }
    Ok(rows)
}

/// Tiles same-shape image samples into one grayscale grid, `ceil(√n)`
/// columns wide, after mapping values back to pixels with `normalization`
/// (rounding half up, clamped to [0, 255]).
pub fn images_to_grid(samples: &[&Tensor], normalization: Normalization) -> Result<GrayImage> {
    let first = samples.first().ok_or(Error::EmptyBatch("no images to tile"))?;
    let (h, w) = match first.shape() {
        [1, h, w] | [h, w] => (*h, *w),
        other => return Err(Error::Shape(format!("cannot tile samples of shape {other:?}"))),
    };
    if let Some(s) = samples.iter().find(|s| s.shape() != first.shape()) {
        return Err(Error::Shape(format!("mixed sample shapes {:?} and {:?}", first.shape(), s.shape())));
    }
    let cols = (samples.len() as f64).sqrt().ceil() as usize;
    let rows = samples.len().div_ceil(cols);
    let width = cols * w;
    let mut pixels = vec![0u8; width * rows * h];
    for (k, s) in samples.iter().enumerate() {
        let (gr, gc) = (k / cols, k % cols);
        for (p, &v) in s.data().iter().enumerate() {
            let (y, x) = (p / w, p % w);
            let g = (normalization.inverse(v) + 0.5).floor().clamp(0.0, 255.0) as u8;
            pixels[(gr * h + y) * width + gc * w + x] = g;
        }
    }
    Ok(GrayImage { width, height: rows * h, pixels })
}

pub fn dump_images(samples: &[&Tensor], path: &Path, normalization: Normalization) -> Result<()> {
    write_pgm(path, &images_to_grid(samples, normalization)?)
}

/// Hex SHA-256 of `blob <len>\0<bytes>`, the git object-hash layout.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn file_hash(path: &Path) -> Result<String> {
    Ok(blob_hash(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Training, validation and test data for a configuration, plus the files
/// they came from.
pub struct PreparedData {
    pub train: LabeledDataset,
    pub validation: Option<LabeledDataset>,
    pub test: LabeledDataset,
    pub inputs: Vec<PathBuf>,
    pub oracle: Option<OracleProbe>,
}

fn load_mnist_split(dir: &Path, train: bool) -> Result<LabeledDataset> {
    let (images, labels) = if train { (IDX_FILES[0], IDX_FILES[1]) } else { (IDX_FILES[2], IDX_FILES[3]) };
    let raw = load_idx(&dir.join(images), &dir.join(labels))?;
    Ok(normalize(&raw, Normalization::ZeroCenteredUnitRange))
}

pub fn prepare_data(config: &ExperimentConfig) -> Result<PreparedData> {
    match config.task {
        Task::Synthetic2d => {
            let spec = config.synthetic_spec();
            let train = gen_synthetic_2d(&spec, &mut rng_for(config.seed, "data", 0))?;
            let test = gen_synthetic_2d(&spec, &mut rng_for(config.seed, "data", 1))?;
            let res = [config.grid_resolution; 2];
            let density = spec.positive_density()?;
            let positive = build_grid(DEFAULT_BOUNDS, res, |x, y| density.pdf(x, y))?;
            let prior = reference_grid(DEFAULT_BOUNDS, res, config.sampler.reference_sigma)?;
            Ok(PreparedData { train, validation: None, test, inputs: Vec::new(), oracle: Some(OracleProbe { positive, prior }) })
        }
        Task::MnistSubset | Task::MnistFull => {
            let inputs: Vec<PathBuf> = IDX_FILES.iter().map(|f| config.data_dir.join(f)).collect();
            if let Some(missing) = inputs.iter().find(|p| !p.exists()) {
                return Err(Error::Config(format!("input file {} does not exist", missing.display())));
            }
            let pool = load_mnist_split(&config.data_dir, true)?;
            let mut test = load_mnist_split(&config.data_dir, false)?;
            if let Some(limit) = config.test_limit {
                let keep: Vec<usize> = (0..limit.min(test.len())).collect();
                test = test.subset(&keep);
            }
            let (train, rest) = if config.task == Task::MnistSubset {
                pool.stratified_subset(config.subset, derive_seed(config.seed, "subset", 0))?
            } else {
                (pool, LabeledDataset::new(Vec::new(), Vec::new(), 10)?)
            };
            let validation = if config.validation_size > 0 {
                Some(rest.stratified_subset(config.validation_size, derive_seed(config.seed, "validation-pool", 0))?.0)
            } else {
                None
            };
            Ok(PreparedData { train, validation, test, inputs, oracle: None })
        }
    }
}

/// What a finished run reports back.
#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub out_dir: PathBuf,
    pub rows: Vec<MetricsRow>,
    /// Test error of the selected classifier.
    pub final_test_error: f64,
}

/// Runs one experiment and writes its artifacts under `out_dir`. A failure
/// leaves whatever was written so far plus `error.txt`.
pub fn run_experiment(config: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentOutcome> {
    config.validate()?;
    create_dir(out_dir)?;
    let result = run_inner(config, out_dir);
    if let Err(e) = &result {
        write_text(&out_dir.join("error.txt"), &format!("{e}\n"))?;
    }
    result
}

fn write_manifest(config: &ExperimentConfig, out_dir: &Path, inputs: &[PathBuf]) -> Result<()> {
    let rendered = config.render();
    write_text(&out_dir.join("config.txt"), &rendered)?;
    let mut manifest = format!(
        "seed = {}\ntask = {}\nmode = {}\nconfig = {}\nversion = {}\n",
        config.seed,
        config.task.name(),
        config.mode.name(),
        blob_hash(rendered.as_bytes()),
        env!("CARGO_PKG_VERSION")
    );
    for p in inputs {
        manifest += &format!("input {} = {}\n", p.display(), file_hash(p)?);
    }
    write_text(&out_dir.join("manifest.txt"), &manifest)
}

fn round_dir(out_dir: &Path, round: usize) -> PathBuf {
    out_dir.join(format!("round_{round:03}"))
}

/// Per-round files: checkpoint, store, pseudo-negative images or points, and
/// for 2D runs the p⁻ₜ heatmap.
fn write_round_artifacts(
    config: &ExperimentConfig,
    dir: &Path,
    snap: &RoundSnapshot<'_>,
    oracle: Option<&OracleProbe>,
) -> Result<()> {
    create_dir(dir)?;
    if config.checkpoints {
        save_model(snap.network, &dir.join("model.bin"))?;
        save_store(snap.store, &dir.join("store.bin"))?;
    }
    if snap.round == 0 {
        return Ok(());
    }
    let fresh: Vec<&Tensor> = snap.store.entries()[snap.new_entries.clone()].iter().map(|e| &e.sample).collect();
    if config.task.is_image() {
        if !fresh.is_empty() {
            let shown = &fresh[..fresh.len().min(GRID_IMAGE_LIMIT)];
            dump_images(shown, &dir.join("pseudo_negatives.pgm"), Normalization::ZeroCenteredUnitRange)?;
        }
    } else {
        let owned: Vec<Tensor> = fresh.iter().map(|t| (*t).clone()).collect();
        write_points_csv(&dir.join("pseudo_negatives.csv"), &owned, &vec![-1; owned.len()])?;
        if let (Some(o), 1) = (oracle, snap.network.heads()) {
            o.negative_density(snap.network)?.write_heatmap(&dir.join("density.pgm"))?;
        }
    }
    Ok(())
}

fn run_inner(config: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentOutcome> {
    let data = prepare_data(config)?;
    write_manifest(config, out_dir, &data.inputs)?;
    if !config.task.is_image() {
        let labels: Vec<i64> = data.train.labels.iter().map(|&l| l as i64).collect();
        write_points_csv(&out_dir.join("points.csv"), &data.train.samples, &labels)?;
        let hash = file_hash(&out_dir.join("points.csv"))?;
        let mut m = fs::read_to_string(out_dir.join("manifest.txt")).map_err(|e| Error::io(out_dir, e))?;
        m += &format!("input points.csv = {hash}\n");
        write_text(&out_dir.join("manifest.txt"), &m)?;
    }
    if config.mode == Mode::OneVsAll {
        return run_one_vs_all(config, out_dir, &data);
    }

    let mode = config.train_mode();
    let heads = if mode == TrainMode::Binary { 1 } else { data.train.class_count };
    let arch = config.architecture(heads);
    let source = match (config.mode, config.source) {
        (Mode::Baseline, _) => PseudoNegativeSource::Baseline,
        (Mode::IcnNoise, _) => PseudoNegativeSource::ReferenceNoise { sigma: config.sampler.reference_sigma },
        (_, SourceKind::ExactGrid) => PseudoNegativeSource::ExactGrid {
            prior: data.oracle.as_ref().expect("2D runs carry grids").prior.clone(),
        },
        (_, SourceKind::Sampler) => PseudoNegativeSource::Sampler(config.sampler.clone()),
    };
    let oracle = if heads == 1 { data.oracle.as_ref() } else { None };
    let started = Instant::now();
    let mut rows: Vec<MetricsRow> = Vec::new();
    let mut timings = String::from("round,seconds\n");
    let baseline = config.mode == Mode::Baseline;
    let mut observer = |snap: &RoundSnapshot<'_>| -> Result<()> {
        let elapsed = started.elapsed().as_secs_f64();
        timings += &format!("{},{elapsed:.3}\n", snap.round);
        write_text(&out_dir.join("timings.csv"), &timings)?;
        write_round_artifacts(config, &round_dir(out_dir, snap.round), snap, oracle)?;
        if !baseline {
            let m = snap.metrics;
            rows.push(MetricsRow {
                round: m.round,
                train_loss: Some(m.train_loss),
                val_error: Some(m.val_error),
                test_error: m.test_error,
                store_size: m.store_size,
                kl_to_positive: m.kl_to_positive,
                wall_time: config.record_wall_time.then_some(elapsed),
            });
            emit_metrics(&rows, &out_dir.join("metrics.csv"))?;
        }
        Ok(())
    };
    let options = RunOptions {
        validation: data.validation.as_ref(),
        test: Some(&data.test),
        oracle,
        observer: Some(&mut observer),
    };
    let out = if baseline {
        train_baseline(&data.train, &arch, mode, &config.train, options)?
    } else {
        run_reclassification_by_synthesis(&data.train, &arch, mode, &config.train, &source, options)?
    };
    let selected = &out.metrics[out.best_round];
    let final_test_error = selected.test_error.expect("test set is always given");
    if baseline {
        let last = out.traces.last().and_then(|t| t.epoch_losses.last()).copied();
        rows = vec![MetricsRow {
            round: 0,
            train_loss: last,
            val_error: Some(selected.val_error),
            test_error: Some(final_test_error),
            store_size: 0,
            kl_to_positive: selected.kl_to_positive,
            wall_time: config.record_wall_time.then(|| started.elapsed().as_secs_f64()),
        }];
        emit_metrics(&rows, &out_dir.join("metrics.csv"))?;
    }
    save_model(&out.network, &out_dir.join("final_model.bin"))?;
    Ok(ExperimentOutcome { out_dir: out_dir.to_path_buf(), rows, final_test_error })
}

/// Per-member scores on the validation and test sets after one round.
struct MemberRound {
    train_loss: f64,
    store_size: usize,
    val_scores: Vec<f64>,
    test_scores: Vec<f64>,
}

fn ensemble_error(per_member: &[&[f64]], labels: &[usize]) -> f64 {
    let wrong = (0..labels.len())
        .filter(|&i| {
            let scores: Vec<f64> = per_member.iter().map(|m| m[i]).collect();
            argmax(&scores) != labels[i]
        })
        .count();
    wrong as f64 / labels.len() as f64
}

fn head_scores(net: &Network, data: &LabeledDataset) -> Result<Vec<f64>> {
    Ok(net.logits(&data.refs())?.into_iter().map(|z| z[0]).collect())
}

fn run_one_vs_all(config: &ExperimentConfig, out_dir: &Path, data: &PreparedData) -> Result<ExperimentOutcome> {
    let (train, validation) = match &data.validation {
        Some(v) => (data.train.clone(), v.clone()),
        None => data.train.split(config.train.validation_fraction.max(f64::EPSILON), derive_seed(config.seed, "validation", 0)),
    };
    if validation.is_empty() {
        return Err(Error::Config("one-vs-all needs a nonempty validation set".into()));
    }
    let arch = config.architecture(1);
    let source = PseudoNegativeSource::Sampler(config.sampler.clone());
    let k = train.class_count;
    let records: Mutex<Vec<Vec<MemberRound>>> = Mutex::new((0..k).map(|_| Vec::new()).collect());
    let observer = |member: usize, snap: &RoundSnapshot<'_>| -> Result<()> {
        let dir = round_dir(out_dir, snap.round).join(format!("member_{member:02}"));
        write_round_artifacts(config, &dir, snap, None)?;
        let entry = MemberRound {
            train_loss: snap.metrics.train_loss,
            store_size: snap.metrics.store_size,
            val_scores: head_scores(snap.network, &validation)?,
            test_scores: head_scores(snap.network, &data.test)?,
        };
        records.lock().expect("no poisoned lock").get_mut(member).expect("member index").push(entry);
        Ok(())
    };
    let out = train_one_vs_all_ensemble(&train, &arch, &config.train, &source, Some(&validation), true, Some(&observer))?;
    let records = records.into_inner().expect("no poisoned lock");
    let longest = records.iter().map(Vec::len).max().unwrap_or(0);
    let mut rows = Vec::with_capacity(longest);
    for round in 0..longest {
        let at: Vec<&MemberRound> = records.iter().map(|r| &r[round.min(r.len() - 1)]).collect();
        let val: Vec<&[f64]> = at.iter().map(|m| m.val_scores.as_slice()).collect();
        let test: Vec<&[f64]> = at.iter().map(|m| m.test_scores.as_slice()).collect();
        rows.push(MetricsRow {
            round,
            train_loss: Some(at.iter().map(|m| m.train_loss).sum::<f64>() / k as f64),
            val_error: Some(ensemble_error(&val, &validation.labels)),
            test_error: Some(ensemble_error(&test, &data.test.labels)),
            store_size: at.iter().map(|m| m.store_size).sum(),
            kl_to_positive: None,
            wall_time: None,
        });
    }
    emit_metrics(&rows, &out_dir.join("metrics.csv"))?;
    for (i, m) in out.ensemble.members.iter().enumerate() {
        save_model(&m.net, &out_dir.join(format!("final_member_{i:02}.bin")))?;
    }
    let predictions = out.ensemble.predict_all(&data.test.refs())?;
    let wrong = predictions.iter().zip(&data.test.labels).filter(|(p, y)| p != y).count();
    Ok(ExperimentOutcome { out_dir: out_dir.to_path_buf(), rows, final_test_error: wrong as f64 / data.test.len() as f64 })
}

/// Baseline and ICN trained on the same data, then attacked both ways.
#[derive(Clone, Debug)]
pub struct AdversarialOutcome {
    pub baseline_test_error: f64,
    pub icn_test_error: f64,
    pub baseline_to_icn: FoolingReport,
    pub icn_to_baseline: FoolingReport,
}

pub fn run_adversarial(config: &ExperimentConfig, out_dir: &Path) -> Result<AdversarialOutcome> {
    config.validate()?;
    if config.mode == Mode::OneVsAll {
        return Err(Error::Config("the adversarial pipeline compares single networks; use softmax or binary".into()));
    }
    create_dir(out_dir)?;
    let icn_config = ExperimentConfig { mode: if config.task.is_image() { Mode::Softmax } else { Mode::Binary }, ..config.clone() };
    let base_config = ExperimentConfig { mode: Mode::Baseline, ..config.clone() };
    let icn = run_experiment(&icn_config, &out_dir.join("icn"))?;
    let base = run_experiment(&base_config, &out_dir.join("baseline"))?;
    let icn_net = crate::network::load_model(&icn.out_dir.join("final_model.bin"))?;
    let base_net = crate::network::load_model(&base.out_dir.join("final_model.bin"))?;
    let data = prepare_data(config)?;
    let model = |n| if config.task.is_image() { AttackModel::Softmax(n) } else { AttackModel::Binary(n) };
    let clamp = config.task.is_image().then_some(Normalization::ZeroCenteredUnitRange.range());
    let (b2i, i2b) =
        two_way_fool_experiment(("baseline", model(&base_net)), ("icn", model(&icn_net)), &data.test, config.epsilon, clamp)?;
    let file = fs::File::create(out_dir.join("fooling.csv")).map_err(|e| Error::io(out_dir, e))?;
    write_reports_csv(file, &[b2i.clone(), i2b.clone()])?;
    write_text(&out_dir.join("fooling.txt"), &format!("{b2i}\n{i2b}\n"))?;
    Ok(AdversarialOutcome {
        baseline_test_error: base.final_test_error,
        icn_test_error: icn.final_test_error,
        baseline_to_icn: b2i,
        icn_to_baseline: i2b,
    })
}

/// Largest residual of the per-round KL identity over random network pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleVerification {
    pub pairs: usize,
    pub max_residual: f64,
    pub residuals: Vec<f64>,
}

pub fn run_oracle_verification(config: &ExperimentConfig, pairs: usize, out_dir: Option<&Path>) -> Result<OracleVerification> {
    let res = [config.grid_resolution; 2];
    let spec = config.synthetic_spec();
    let density = spec.positive_density()?;
    let positive = build_grid(DEFAULT_BOUNDS, res, |x, y| density.pdf(x, y))?;
    let prior = reference_grid(DEFAULT_BOUNDS, res, config.sampler.reference_sigma)?;
    let probe = OracleProbe { positive: positive.clone(), prior: prior.clone() };
    let centers = prior.centers();
    let refs: Vec<&Tensor> = centers.iter().collect();
    let arch = Architecture::mlp(2, &config.hidden, config.slope, 1);
    let mut residuals = Vec::with_capacity(pairs);
    for i in 0..pairs {
        let a = Network::init(arch.clone(), &mut rng_for(config.seed, "oracle-pair-a", i as u64))?;
        let b = Network::init(arch.clone(), &mut rng_for(config.seed, "oracle-pair-b", i as u64))?;
        let za: Vec<f64> = a.logits(&refs)?.into_iter().map(|z| z[0]).collect();
        let zb: Vec<f64> = b.logits(&refs)?.into_iter().map(|z| z[0]).collect();
        residuals.push(kl_identity(&probe.positive, &probe.prior, &za, &zb)?.residual());
    }
    let max_residual = residuals.iter().copied().fold(0.0, f64::max);
    if let Some(dir) = out_dir {
        create_dir(dir)?;
        let mut text = String::from("pair,residual\n");
        for (i, r) in residuals.iter().enumerate() {
            text += &format!("{i},{}\n", format_sig9(*r));
        }
        write_text(&dir.join("kl_identity.csv"), &text)?;
        positive.write_heatmap(&dir.join("positive.pgm"))?;
        prior.write_heatmap(&dir.join("reference.pgm"))?;
    }
    Ok(OracleVerification { pairs, max_residual, residuals })
}

/// A plain-text summary of a run directory.
pub fn report(run_dir: &Path) -> Result<String> {
    let rows = parse_metrics(&run_dir.join("metrics.csv"))?;
    let manifest = fs::read_to_string(run_dir.join("manifest.txt")).unwrap_or_default();
    let mut out = String::new();
    for line in manifest.lines().filter(|l| l.starts_with("task") || l.starts_with("mode") || l.starts_with("seed")) {
        out += line;
        out.push('\n');
    }
    out += &format!("{:>5} {:>12} {:>10} {:>10} {:>7} {:>10}\n", "round", "train_loss", "val_err", "test_err", "store", "kl");
    let cell = |v: Option<f64>, prec: usize| v.map_or("-".to_string(), |x| format!("{x:.prec$}"));
    for r in &rows {
        out += &format!(
            "{:>5} {:>12} {:>10} {:>10} {:>7} {:>10}\n",
            r.round,
            cell(r.train_loss, 5),
            cell(r.val_error, 4),
            cell(r.test_error, 4),
            r.store_size,
            cell(r.kl_to_positive, 4)
        );
    }
    if let Some(best) = rows.iter().filter(|r| r.val_error.is_some()).min_by(|a, b| a.val_error.partial_cmp(&b.val_error).unwrap()) {
        out += &format!("lowest validation error at round {}: test error {}\n", best.round, cell(best.test_error, 4));
    }
    Ok(out)
}

/// Canonical run directory name for a configuration.
pub fn default_out_dir(config: &ExperimentConfig) -> PathBuf {
    PathBuf::from("runs").join(format!("{}-{}-seed{}", config.task.name(), config.mode.name(), config.seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sig9_formatting() {
        assert_eq!(format_sig9(0.0), "0");
        assert_eq!(format_sig9(0.25), "0.25");
        assert_eq!(format_sig9(1.0 / 3.0), "0.333333333");
        assert_eq!(format_sig9(123456789012.0), "1.23456789e11");
        assert_eq!(format_sig9(-2.5e-7), "-2.5e-7");
        assert_eq!(format_sig9(f64::INFINITY), "inf");
        assert_eq!(format_sig9(7.0), "7");
    }

    proptest! {
        #[test]
        fn sig9_keeps_nine_digits(v in -1e12f64..1e12) {
            let back: f64 = format_sig9(v).parse().unwrap();
            prop_assert!((back - v).abs() <= 5e-9 * v.abs());
            prop_assert_eq!(format_sig9(back), format_sig9(v));
        }
    }

    #[test]
    fn metrics_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        emit_metrics(&[], &path).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), format!("{}\n", METRICS_HEADER.join(",")));
        let rows = vec![
            MetricsRow { round: 0, train_loss: Some(0.5), val_error: Some(0.1), test_error: None, store_size: 0, kl_to_positive: Some(1.25), wall_time: None },
            MetricsRow { round: 1, train_loss: Some(0.125), val_error: Some(0.0), test_error: Some(0.03), store_size: 50, kl_to_positive: None, wall_time: None },
        ];
        emit_metrics(&rows, &path).unwrap();
        assert_eq!(parse_metrics(&path).unwrap(), rows);
    }

    #[test]
    fn zero_sample_is_mid_gray() {
        let t = Tensor::zeros(&[1, 2, 2]);
        let img = images_to_grid(&[&t], Normalization::ZeroCenteredUnitRange).unwrap();
        assert_eq!(img.pixels, vec![128; 4]);
        let u = Tensor::zeros(&[1, 3, 2]);
        assert!(images_to_grid(&[&t, &u], Normalization::ZeroCenteredUnitRange).is_err());
    }

    #[test]
    fn grid_layout_places_tiles_row_major() {
        let tiles: Vec<Tensor> = (0..3).map(|k| Tensor::full(&[1, 1, 1], -1.0 + k as f64)).collect();
        let refs: Vec<&Tensor> = tiles.iter().collect();
        let img = images_to_grid(&refs, Normalization::ZeroCenteredUnitRange).unwrap();
        assert_eq!((img.width, img.height), (2, 2));
        assert_eq!(img.pixels, vec![0, 128, 255, 0]);
    }

    #[test]
    fn blob_hash_of_empty_input() {
        // sha256 of "blob 0\0".
        assert_eq!(blob_hash(b""), "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813");
    }

    #[test]
    fn config_parses_and_renders_back() {
        let text = "task = mnist-subset\nmode = softmax\nseed = 4\n[data]\nsubset = 300\n[model]\nchannels = 8,16,32,64\n\
                    [train]\nrounds = 2\nalpha = 0.25\npatience = none\n[sampler]\nstopping = steps:40\noptimizer = sgd\n";
        let c = ExperimentConfig::parse(text).unwrap();
        assert_eq!(c.train.rounds, 2);
        assert_eq!(c.train.patience, None);
        assert_eq!(c.channels, [8, 16, 32, 64]);
        assert_eq!(c.sampler.stopping, StoppingRule::FixedSteps(40));
        assert_eq!(c.sampler.clamp, Some((-1.0, 1.0)));
        assert_eq!(ExperimentConfig::parse(&c.render()).unwrap(), c);
    }

    #[test]
    fn config_rejects_bad_input() {
        for text in [
            "mode = softmax\n",
            "task = mnist-subset\nmode = binary\n",
            "task = synthetic2d\nmode = softmax\n[train]\nalpha = 1.5\n",
            "task = synthetic2d\nmode = binary\n[train]\nbogus = 1\n",
            "task = synthetic2d\nmode = softmax\n[sampler]\nsource = grid\n",
        ] {
            assert!(ExperimentConfig::parse(text).is_err(), "{text}");
        }
    }
}
