//! Reclassification by synthesis: train C⁰ on S, then alternate between
//! synthesizing pseudo-negatives from the current classifier and retraining
//! on S together with every pseudo-negative generated so far.

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::layers::{record_logits, Architecture};
use crate::network::{argmax, BinaryClassifier, MulticlassClassifier, Network, OneVsAllEnsemble};
use crate::oracle::{density_update_with_logits, exact_grid_sample, kl_divergence, GridDensity};
use crate::record::{ComputationRecord, NodeId};
use crate::rng::{derive_seed, rng_for};
use crate::sampler::{draw_reference, synthesize, SamplerConfig, StopReason, Target};
use crate::store::{tag_for_class, PseudoNegativeStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Number of synthesis rounds T.
    pub rounds: usize,
    /// Pseudo-negatives per round l (per class in softmax mode).
    pub per_round: usize,
    /// Epochs used to fit C⁰.
    pub initial_epochs: usize,
    pub epochs_per_round: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// From this round on the learning rate is divided by 10.
    pub lr_drop_round: Option<usize>,
    pub momentum: f64,
    /// Weight of the pseudo-negative term in the softmax objective.
    pub alpha: f64,
    /// Share of S held out for validation when no validation set is given.
    pub validation_fraction: f64,
    /// Rounds without validation improvement before stopping; `None` never stops early.
    pub patience: Option<usize>,
    /// Return the network with the lowest validation error rather than the last one.
    pub keep_best: bool,
    /// Re-initialize the network before each round instead of fine-tuning.
    pub reinitialize: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            rounds: 10,
            per_round: 50,
            initial_epochs: 5,
            epochs_per_round: 5,
            batch_size: 32,
            learning_rate: 0.025,
            lr_drop_round: Some(25),
            momentum: 0.9,
            alpha: 0.1,
            validation_fraction: 0.1,
            patience: Some(3),
            keep_best: true,
            reinitialize: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn mnist() -> Self {
        TrainConfig { per_round: 200, batch_size: 64, ..TrainConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(0.0..1.0).contains(&self.alpha) {
            return fail(format!("alpha must lie in [0, 1), got {}", self.alpha));
        }
        if self.batch_size == 0 {
            return fail("batch size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return fail(format!("validation fraction must lie in [0, 1), got {}", self.validation_fraction));
        }
        if self.rounds > 0 && self.per_round == 0 {
            return fail("per-round pseudo-negative count must be at least 1".into());
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, round: usize) -> f64 {
        match self.lr_drop_round {
            Some(d) if round >= d => self.learning_rate / 10.0,
            _ => self.learning_rate,
        }
    }
}

/// The training loss. The `Plain*` variants are the ordinary objectives used
/// by the baseline; they never see pseudo-negatives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Objective {
    Binary,
    Softmax { alpha: f64 },
    PlainBinary,
    PlainSoftmax,
}

impl Objective {
    fn is_binary(self) -> bool {
        matches!(self, Objective::Binary | Objective::PlainBinary)
    }
}

/// Labeled samples followed by pseudo-negatives, each tagged with the head it
/// is a negative for.
pub(crate) struct Batch<'s> {
    pub samples: Vec<&'s Tensor>,
    pub labels: Vec<usize>,
    pub pn_heads: Vec<usize>,
}

/// Appends the summed loss over `batch` to `rec`.
pub(crate) fn record_loss<'a>(
    rec: &mut ComputationRecord<'a>,
    net: &'a Network,
    objective: Objective,
    batch: &Batch<'_>,
) -> Result<NodeId> {
    let ns = batch.labels.len();
    let np = batch.pn_heads.len();
    if ns == 0 {
        return Err(Error::EmptyBatch("labeled part of the batch is empty"));
    }
    if np > 0 && matches!(objective, Objective::PlainBinary | Objective::PlainSoftmax) {
        return Err(Error::Config("plain objectives take no pseudo-negatives".into()));
    }
    let heads = net.heads();
    if let Some(&h) = batch.pn_heads.iter().find(|&&h| h >= heads) {
        return Err(Error::InvalidTag { tag: tag_for_class(h), classes: heads });
    }
    let x = rec.input(net.batch(&batch.samples)?);
    let z = record_logits(rec, &net.arch, &net.params, x)?;
    if objective.is_binary() {
        if heads != 1 {
            return Err(Error::Config(format!("binary objective needs one head, network has {heads}")));
        }
        if let Some(&l) = batch.labels.iter().find(|&&l| l > 1) {
            return Err(Error::Dataset(format!("binary label {l} is not 0 or 1")));
        }
        let z = rec.gather(z, vec![0; ns + np])?;
        let zs = rec.slice_rows(z, 0, ns)?;
        let signs = rec.constant(Tensor::vector(batch.labels.iter().map(|&l| if l == 1 { 1.0 } else { -1.0 }).collect()));
        let margins = rec.mul(zs, signs)?;
        let log_q = rec.log_sigmoid(margins);
        let s_sum = rec.sum(log_q);
        let s_loss = rec.scale(s_sum, -1.0);
        if np == 0 {
            return Ok(s_loss);
        }
        let zp = rec.slice_rows(z, ns, np)?;
        let pn_terms = rec.softplus(zp);
        let pn_loss = rec.sum(pn_terms);
        rec.add(s_loss, pn_loss)
    } else {
        if let Some(&l) = batch.labels.iter().find(|&&l| l >= heads) {
            return Err(Error::Dataset(format!("label {l} outside 0..{heads}")));
        }
        let weight = match objective {
            Objective::Softmax { alpha } => 1.0 - alpha,
            _ => 1.0,
        };
        let zs = rec.slice_rows(z, 0, ns)?;
        let log_p = rec.log_softmax(zs)?;
        let picked = rec.gather(log_p, batch.labels.clone())?;
        let ce = rec.sum(picked);
        let s_loss = rec.scale(ce, -weight);
        if np == 0 {
            return Ok(s_loss);
        }
        let alpha = match objective {
            Objective::Softmax { alpha } => alpha,
            _ => 0.0,
        };
        let zp = rec.slice_rows(z, ns, np)?;
        let tagged = rec.gather(zp, batch.pn_heads.clone())?;
        let pn_terms = rec.softplus(tagged);
        let pn_sum = rec.sum(pn_terms);
        let pn_loss = rec.scale(pn_sum, alpha);
        rec.add(s_loss, pn_loss)
    }
}

fn loss_value(net: &Network, objective: Objective, batch: &Batch<'_>) -> Result<f64> {
    let mut rec = ComputationRecord::input_only();
    let loss = record_loss(&mut rec, net, objective, batch)?;
    Ok(rec.value(loss).item())
}

/// −Σ_S ln q(yᵢ|xᵢ) − Σ_{S_pn} ln q(−1|xᵢ). Labels are 1 for positive and 0
/// for negative.
pub fn binary_icn_loss(
    c: &BinaryClassifier,
    samples: &[&Tensor],
    labels: &[usize],
    pseudo_negatives: &[&Tensor],
) -> Result<f64> {
    check_lengths(samples, labels)?;
    let batch = Batch {
        samples: samples.iter().chain(pseudo_negatives).copied().collect(),
        labels: labels.to_vec(),
        pn_heads: vec![0; pseudo_negatives.len()],
    };
    loss_value(&c.net, Objective::Binary, &batch)
}

/// (1−α)·Σ_S −ln softmax_{yᵢ} + α·Σ_{S_pn} softplus(z_k) where k is the
/// class a pseudo-negative was synthesized for. Tags follow the store
/// convention: −(k+1) for class k.
pub fn multiclass_icn_loss(
    c: &MulticlassClassifier,
    samples: &[&Tensor],
    labels: &[usize],
    pseudo_negatives: &[&Tensor],
    tags: &[i32],
    alpha: f64,
) -> Result<f64> {
    check_lengths(samples, labels)?;
    if pseudo_negatives.len() != tags.len() {
        return Err(Error::Shape(format!("{} pseudo-negatives but {} tags", pseudo_negatives.len(), tags.len())));
    }
    let classes = c.classes();
    let mut pn_heads = Vec::with_capacity(tags.len());
    for &tag in tags {
        if tag >= 0 || tag.unsigned_abs() as usize > classes {
            return Err(Error::InvalidTag { tag, classes });
        }
        pn_heads.push(tag.unsigned_abs() as usize - 1);
    }
    let batch = Batch { samples: samples.iter().chain(pseudo_negatives).copied().collect(), labels: labels.to_vec(), pn_heads };
    loss_value(&c.net, Objective::Softmax { alpha }, &batch)
}

/// Ordinary summed softmax cross-entropy.
pub fn softmax_cross_entropy(c: &MulticlassClassifier, samples: &[&Tensor], labels: &[usize]) -> Result<f64> {
    check_lengths(samples, labels)?;
    let batch = Batch { samples: samples.to_vec(), labels: labels.to_vec(), pn_heads: Vec::new() };
    loss_value(&c.net, Objective::PlainSoftmax, &batch)
}

fn check_lengths(samples: &[&Tensor], labels: &[usize]) -> Result<()> {
    if samples.len() != labels.len() {
        return Err(Error::Shape(format!("{} samples but {} labels", samples.len(), labels.len())));
    }
    Ok(())
}

/// Losses recorded while training, as per-sample means.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepReport {
    pub epoch_losses: Vec<f64>,
    pub step_losses: Vec<f64>,
    pub learning_rate: f64,
}

/// Index pairs `(labeled, pseudo-negative)` for each mini-batch of one epoch.
/// Both sets are shuffled and spread evenly over the batches, so every batch
/// holds them in proportion to their sizes and has at least one labeled item.
fn epoch_batches(n_s: usize, n_p: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<(Vec<usize>, Vec<usize>)> {
    let mut s_idx: Vec<usize> = (0..n_s).collect();
    s_idx.shuffle(&mut rng_for(seed, "shuffle", epoch as u64));
    let mut p_idx: Vec<usize> = (0..n_p).collect();
    p_idx.shuffle(&mut rng_for(seed, "shuffle-pn", epoch as u64));
    let batches = (n_s + n_p).div_ceil(batch_size).min(n_s).max(1);
    (0..batches)
        .map(|b| {
            let s = s_idx[b * n_s / batches..(b + 1) * n_s / batches].to_vec();
            let p = p_idx[b * n_p / batches..(b + 1) * n_p / batches].to_vec();
            (s, p)
        })
        .collect()
}

/// Mini-batch SGD with momentum on S and the pseudo-negatives in `store`.
/// `first_epoch` numbers the epochs globally so shuffles never repeat.
fn train_epochs(
    net: &mut Network,
    objective: Objective,
    data: &LabeledDataset,
    store: &PseudoNegativeStore,
    config: &TrainConfig,
    epochs: usize,
    first_epoch: usize,
    learning_rate: f64,
) -> Result<StepReport> {
    if data.is_empty() {
        return Err(Error::EmptyBatch("training set is empty"));
    }
    let pn_heads: Vec<usize> = store.entries().iter().map(|e| e.head()).collect();
    let mut velocity: Vec<Vec<f64>> = net.params.tensors.iter().map(|t| vec![0.0; t.len()]).collect();
    let mut report = StepReport { learning_rate, ..StepReport::default() };
    for e in 0..epochs {
        let epoch = first_epoch + e;
        let mut total = 0.0;
        let mut count = 0usize;
        for (s_idx, p_idx) in epoch_batches(data.len(), store.len(), config.batch_size, config.seed, epoch) {
            let batch = Batch {
                samples: s_idx
                    .iter()
                    .map(|&i| &data.samples[i])
                    .chain(p_idx.iter().map(|&i| &store.entries()[i].sample))
                    .collect(),
                labels: s_idx.iter().map(|&i| data.labels[i]).collect(),
                pn_heads: p_idx.iter().map(|&i| pn_heads[i]).collect(),
            };
            let n = batch.samples.len();
            let grads = {
                let mut rec = ComputationRecord::new();
                let summed = record_loss(&mut rec, net, objective, &batch)?;
                let loss = rec.value(summed).item();
                if !loss.is_finite() {
                    return Err(Error::Diverged { epoch, loss });
                }
                total += loss;
                count += n;
                report.step_losses.push(loss / n as f64);
                let mean = rec.scale(summed, 1.0 / n as f64);
                rec.backward(mean)?.into_params()
            };
            for ((p, g), v) in net.params.tensors.iter_mut().zip(&grads).zip(&mut velocity) {
                for ((w, &gw), vw) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                    *vw = config.momentum * *vw + gw;
                    *w -= learning_rate * *vw;
                }
            }
        }
        report.epoch_losses.push(total / count as f64);
    }
    Ok(report)
}

fn epoch_offset(config: &TrainConfig, round: usize) -> usize {
    if round == 0 {
        0
    } else {
        config.initial_epochs + (round - 1) * config.epochs_per_round
    }
}

/// Retrains on S ∪ store for `epochs_per_round` epochs, the update that
/// produces C^{round}.
pub fn reclassification_step(
    net: &mut Network,
    objective: Objective,
    data: &LabeledDataset,
    store: &PseudoNegativeStore,
    config: &TrainConfig,
    round: usize,
) -> Result<StepReport> {
    config.validate()?;
    train_epochs(
        net,
        objective,
        data,
        store,
        config,
        config.epochs_per_round,
        epoch_offset(config, round),
        config.learning_rate_at(round),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    Binary,
    Softmax,
}

/// Where each round's pseudo-negatives come from.
#[derive(Clone, Debug, PartialEq)]
pub enum PseudoNegativeSource {
    /// Gradient-based synthesis from the current classifier.
    Sampler(SamplerConfig),
    /// Raw reference draws with no ascent.
    ReferenceNoise { sigma: f64 },
    /// Exact draws from p⁻ₜ on a grid, starting from `prior` (binary 2D only).
    ExactGrid { prior: GridDensity },
    /// No pseudo-negatives and the plain objective.
    Baseline,
}

/// Grid densities used to report KL[p⁺ ‖ p⁻ₜ] each round on 2D data.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleProbe {
    pub positive: GridDensity,
    pub prior: GridDensity,
}

impl OracleProbe {
    /// p⁻ₜ on the grid for a single-head network.
    pub fn negative_density(&self, net: &Network) -> Result<GridDensity> {
        let centers = self.prior.centers();
        let refs: Vec<&Tensor> = centers.iter().collect();
        let logits: Vec<f64> = net.logits(&refs)?.into_iter().map(|row| row[0]).collect();
        Ok(density_update_with_logits(&self.prior, &logits)?.density)
    }

    pub fn kl_to_positive(&self, net: &Network) -> Result<f64> {
        kl_divergence(&self.positive, &self.negative_density(net)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundMetrics {
    pub round: usize,
    pub train_loss: f64,
    pub val_error: f64,
    pub test_error: Option<f64>,
    pub store_size: usize,
    pub kl_to_positive: Option<f64>,
    /// Fraction of this round's chains that stopped on their threshold.
    pub threshold_fraction: Option<f64>,
}

/// State handed to an observer after each round.
pub struct RoundSnapshot<'a> {
    pub round: usize,
    pub network: &'a Network,
    pub store: &'a PseudoNegativeStore,
    /// Store entries added in this round.
    pub new_entries: std::ops::Range<usize>,
    pub metrics: &'a RoundMetrics,
}

pub type Observer<'o> = dyn FnMut(&RoundSnapshot<'_>) -> Result<()> + 'o;

#[derive(Default)]
pub struct RunOptions<'a> {
    /// Validation set; when absent a fraction of S is held out.
    pub validation: Option<&'a LabeledDataset>,
    pub test: Option<&'a LabeledDataset>,
    pub oracle: Option<&'a OracleProbe>,
    pub observer: Option<&'a mut Observer<'a>>,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    /// The selected network: lowest validation error, or the last one.
    pub network: Network,
    pub best_round: usize,
    /// Rounds of synthesis actually run (early stopping may end before T).
    pub rounds_completed: usize,
    pub store: PseudoNegativeStore,
    pub metrics: Vec<RoundMetrics>,
    pub traces: Vec<StepReport>,
    /// Negatives among the training part of S (binary mode).
    pub training_negatives: usize,
    pub training_size: usize,
}

/// Fraction of all negatives that are pseudo-negatives.
pub fn mixture_fraction(original_negatives: usize, pseudo_negatives: usize) -> f64 {
    pseudo_negatives as f64 / (original_negatives + pseudo_negatives) as f64
}

/// Misclassification rate of `net` on `data`.
pub fn error_rate(net: &Network, data: &LabeledDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyBatch("evaluation set is empty"));
    }
    let logits = net.logits(&data.refs())?;
    let wrong = logits
        .iter()
        .zip(&data.labels)
        .filter(|(z, &y)| {
            let predicted = if z.len() == 1 { usize::from(z[0] > 0.0) } else { argmax(z) };
            predicted != y
        })
        .count();
    Ok(wrong as f64 / data.len() as f64)
}

fn check_training_set(data: &LabeledDataset, mode: TrainMode, arch: &Architecture) -> Result<()> {
    if data.is_empty() {
        return Err(Error::EmptyBatch("training set is empty"));
    }
    match mode {
        TrainMode::Binary => {
            let counts = data.class_counts();
            if data.class_count != 2 || counts.contains(&0) {
                return Err(Error::Dataset(format!("binary training needs both labels present, counts {counts:?}")));
            }
            if arch.heads != 1 {
                return Err(Error::Config(format!("binary mode needs one head, got {}", arch.heads)));
            }
        }
        TrainMode::Softmax => {
            if arch.heads != data.class_count {
                return Err(Error::Config(format!("{} heads for {} classes", arch.heads, data.class_count)));
            }
        }
    }
    Ok(())
}

/// The full outer loop. With [`PseudoNegativeSource::Baseline`] this is
/// plain training over the same epoch schedule; with T = 0 every source
/// reduces to it.
pub fn run_reclassification_by_synthesis(
    data: &LabeledDataset,
    arch: &Architecture,
    mode: TrainMode,
    config: &TrainConfig,
    source: &PseudoNegativeSource,
    mut options: RunOptions<'_>,
) -> Result<RunOutput> {
    config.validate()?;
    check_training_set(data, mode, arch)?;
    if let PseudoNegativeSource::Sampler(s) = source {
        s.validate()?;
    }
    if matches!(source, PseudoNegativeSource::ExactGrid { .. }) && (mode != TrainMode::Binary || arch.input_shape != [2]) {
        return Err(Error::Config("exact grid synthesis needs a binary 2D model".into()));
    }
    let held;
    let (train, validation) = match options.validation {
        Some(v) => (data, v),
        None if config.validation_fraction > 0.0 => {
            held = data.split(config.validation_fraction, derive_seed(config.seed, "validation", 0));
            (&held.0, &held.1)
        }
        None => (data, data),
    };
    check_training_set(train, mode, arch)?;
    let objective = match (mode, source) {
        (TrainMode::Binary, PseudoNegativeSource::Baseline) => Objective::PlainBinary,
        (TrainMode::Softmax, PseudoNegativeSource::Baseline) => Objective::PlainSoftmax,
        (TrainMode::Binary, _) => Objective::Binary,
        (TrainMode::Softmax, _) => Objective::Softmax { alpha: config.alpha },
    };
    let init_rng = |round: u64| rng_for(config.seed, "init", round);
    let mut net = Network::init(arch.clone(), &mut init_rng(0))?;
    let per_round = match mode {
        TrainMode::Binary => config.per_round,
        TrainMode::Softmax => config.per_round * arch.heads,
    };
    let mut store = PseudoNegativeStore::new(config.per_round);
    let mut traces = Vec::new();
    let mut metrics = Vec::new();

    // C⁰ is trained on S alone, so round 0 uses the plain objective; with an
    // empty store the softmax objective would only rescale it by 1 − α.
    let initial_objective = match mode {
        TrainMode::Binary => Objective::PlainBinary,
        TrainMode::Softmax => Objective::PlainSoftmax,
    };
    let first = train_epochs(&mut net, initial_objective, train, &store, config, config.initial_epochs, 0, config.learning_rate_at(0))?;
    let evaluate = |net: &Network, round: usize, store: &PseudoNegativeStore, report: &StepReport, thr: Option<f64>| -> Result<RoundMetrics> {
        Ok(RoundMetrics {
            round,
            train_loss: report.epoch_losses.last().copied().unwrap_or(f64::NAN),
            val_error: error_rate(net, validation)?,
            test_error: options.test.map(|t| error_rate(net, t)).transpose()?,
            store_size: store.len(),
            kl_to_positive: options.oracle.map(|o| o.kl_to_positive(net)).transpose()?,
            threshold_fraction: thr,
        })
    };
    let m0 = evaluate(&net, 0, &store, &first, None)?;
    traces.push(first);
    if let Some(obs) = options.observer.as_mut() {
        obs(&RoundSnapshot { round: 0, network: &net, store: &store, new_entries: 0..0, metrics: &m0 })?;
    }
    let mut best = (m0.val_error, 0usize, net.clone());
    metrics.push(m0);
    let mut stale = 0usize;
    let mut rounds_completed = 0;

    for round in 1..=config.rounds {
        let start = store.len();
        let threshold_fraction = synthesize_round(&net, mode, source, config, round, &mut store)?;
        debug_assert_eq!(store.len(), start + if matches!(source, PseudoNegativeSource::Baseline) { 0 } else { per_round });
        if config.reinitialize {
            net = Network::init(arch.clone(), &mut init_rng(round as u64))?;
        }
        let report = reclassification_step(&mut net, objective, train, &store, config, round)?;
        let m = evaluate(&net, round, &store, &report, threshold_fraction)?;
        traces.push(report);
        rounds_completed = round;
        if let Some(obs) = options.observer.as_mut() {
            obs(&RoundSnapshot { round, network: &net, store: &store, new_entries: start..store.len(), metrics: &m })?;
        }
        if m.val_error < best.0 {
            best = (m.val_error, round, net.clone());
            stale = 0;
        } else {
            stale += 1;
        }
        metrics.push(m);
        if config.patience.is_some_and(|p| stale >= p) {
            break;
        }
    }

    let training_negatives = train.labels.iter().filter(|&&l| l == 0).count();
    let (network, best_round) = if config.keep_best { (best.2, best.1) } else { (net, rounds_completed) };
    Ok(RunOutput {
        network,
        best_round,
        rounds_completed,
        store,
        metrics,
        traces,
        training_negatives,
        training_size: train.len(),
    })
}

/// Adds round `round`'s pseudo-negatives to `store`; returns the fraction of
/// sampler chains that stopped on their threshold.
fn synthesize_round(
    net: &Network,
    mode: TrainMode,
    source: &PseudoNegativeSource,
    config: &TrainConfig,
    round: usize,
    store: &mut PseudoNegativeStore,
) -> Result<Option<f64>> {
    let heads: Vec<usize> = match mode {
        TrainMode::Binary => vec![0],
        TrainMode::Softmax => (0..net.heads()).collect(),
    };
    let tag = |h: usize| match mode {
        TrainMode::Binary => -1,
        TrainMode::Softmax => tag_for_class(h),
    };
    let l = config.per_round;
    let mut thresholds = 0usize;
    let mut chains = 0usize;
    for &h in &heads {
        let seed = derive_seed(config.seed, "synthesis", (round * heads.len() + h) as u64);
        let samples = match source {
            PseudoNegativeSource::Baseline => return Ok(None),
            PseudoNegativeSource::Sampler(sc) => {
                let out = synthesize(Target::Head { net, head: h }, sc, l, seed)?;
                chains += out.traces.len();
                thresholds += out.traces.iter().filter(|t| t.stop == StopReason::Threshold).count();
                out.samples
            }
            PseudoNegativeSource::ReferenceNoise { sigma } => {
                draw_reference(l, &net.arch.input_shape, *sigma, &mut crate::rng::rng_from_seed(seed))
            }
            PseudoNegativeSource::ExactGrid { prior } => {
                let probe = OracleProbe { positive: prior.clone(), prior: prior.clone() };
                exact_grid_sample(&probe.negative_density(net)?, l, &mut crate::rng::rng_from_seed(seed))
            }
        };
        store.extend(round as u32, tag(h), samples);
    }
    Ok((chains > 0).then(|| thresholds as f64 / chains as f64))
}

/// Plain training on S over the same schedule as the ICN loop.
pub fn train_baseline(
    data: &LabeledDataset,
    arch: &Architecture,
    mode: TrainMode,
    config: &TrainConfig,
    options: RunOptions<'_>,
) -> Result<RunOutput> {
    run_reclassification_by_synthesis(data, arch, mode, config, &PseudoNegativeSource::Baseline, options)
}

/// The ablation that uses reference noise in place of synthesized samples.
pub fn train_icn_noise_ablation(
    data: &LabeledDataset,
    arch: &Architecture,
    mode: TrainMode,
    config: &TrainConfig,
    sigma: f64,
    options: RunOptions<'_>,
) -> Result<RunOutput> {
    run_reclassification_by_synthesis(data, arch, mode, config, &PseudoNegativeSource::ReferenceNoise { sigma }, options)
}

/// Called with the member index after each of that member's rounds.
pub type MemberObserver<'o> = dyn Fn(usize, &RoundSnapshot<'_>) -> Result<()> + Sync + 'o;

#[derive(Clone, Debug)]
pub struct EnsembleOutput {
    pub ensemble: OneVsAllEnsemble,
    pub members: Vec<RunOutput>,
    /// Positives seen by each member's training set.
    pub positive_counts: Vec<usize>,
}

/// One binary ICN per class (class i positive, the rest negative), each with
/// its own seed and pseudo-negatives. Members train in parallel; results do
/// not depend on scheduling.
pub fn train_one_vs_all_ensemble(
    data: &LabeledDataset,
    arch: &Architecture,
    config: &TrainConfig,
    source: &PseudoNegativeSource,
    validation: Option<&LabeledDataset>,
    parallel: bool,
    observer: Option<&MemberObserver<'_>>,
) -> Result<EnsembleOutput> {
    let k = data.class_count;
    if k < 2 {
        return Err(Error::Dataset(format!("one-vs-all needs at least 2 classes, got {k}")));
    }
    if let Some(c) = data.class_counts().iter().position(|&n| n == 0) {
        return Err(Error::Dataset(format!("class {c} has no samples")));
    }
    let mut member_arch = arch.clone();
    member_arch.heads = 1;
    let train_member = |i: usize| -> Result<(RunOutput, usize)> {
        let binary = data.one_vs_rest(i);
        let val = validation.map(|v| v.one_vs_rest(i));
        let member_config = TrainConfig { seed: derive_seed(config.seed, "member", i as u64), ..config.clone() };
        let mut hook = |snap: &RoundSnapshot<'_>| observer.map_or(Ok(()), |o| o(i, snap));
        let options = RunOptions { validation: val.as_ref(), observer: Some(&mut hook), ..RunOptions::default() };
        let out = run_reclassification_by_synthesis(&binary, &member_arch, TrainMode::Binary, &member_config, source, options)?;
        let positives = out.training_size - out.training_negatives;
        Ok((out, positives))
    };
    let results: Vec<Result<(RunOutput, usize)>> =
        if parallel { (0..k).into_par_iter().map(train_member).collect() } else { (0..k).map(train_member).collect() };
    let mut members = Vec::with_capacity(k);
    let mut positive_counts = Vec::with_capacity(k);
    for r in results {
        let (out, p) = r?;
        members.push(out);
        positive_counts.push(p);
    }
    let ensemble = OneVsAllEnsemble {
        members: members.iter().map(|m| BinaryClassifier::new(m.network.clone())).collect::<Result<_>>()?,
    };
    Ok(EnsembleOutput { ensemble, members, positive_counts })
}
