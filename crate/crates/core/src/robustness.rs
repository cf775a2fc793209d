//! Fast-gradient-sign adversarial examples and the two-way fooling experiment.

use std::fmt;
use std::io::Write;

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::network::{argmax, Network};
use crate::record::ComputationRecord;
use crate::tensor::Tensor;
use crate::trainer::{record_loss, Batch, Objective};

const ATTACK_CHUNK: usize = 128;

/// A classifier under attack; the attack follows the gradient of the loss
/// the classifier was trained with, evaluated at the clean label.
#[derive(Clone, Copy, Debug)]
pub enum AttackModel<'a> {
    /// Single-head network, labels 0/1.
    Binary(&'a Network),
    Softmax(&'a Network),
}

impl<'a> AttackModel<'a> {
    fn net(self) -> &'a Network {
        match self {
            AttackModel::Binary(n) | AttackModel::Softmax(n) => n,
        }
    }

    fn objective(self) -> Objective {
        match self {
            AttackModel::Binary(_) => Objective::PlainBinary,
            AttackModel::Softmax(_) => Objective::PlainSoftmax,
        }
    }

    pub fn predict_all(self, xs: &[&Tensor]) -> Result<Vec<usize>> {
        Ok(self
            .net()
            .logits(xs)?
            .iter()
            .map(|z| match self {
                AttackModel::Binary(_) => usize::from(z[0] > 0.0),
                AttackModel::Softmax(_) => argmax(z),
            })
            .collect())
    }
}

/// x + ε·sign(∇ₓ loss), clamped to `clamp` when given. Works on a batch; the
/// summed loss separates over samples, so each gradient is per-sample.
pub fn fgsm_perturb_batch(
    model: AttackModel<'_>,
    xs: &[&Tensor],
    labels: &[usize],
    epsilon: f64,
    clamp: Option<(f64, f64)>,
) -> Result<Vec<Tensor>> {
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::Config(format!("epsilon must be finite and >= 0, got {epsilon}")));
    }
    if xs.len() != labels.len() {
        return Err(Error::Shape(format!("{} inputs but {} labels", xs.len(), labels.len())));
    }
    let mut out = Vec::with_capacity(xs.len());
    for (chunk, chunk_labels) in xs.chunks(ATTACK_CHUNK).zip(labels.chunks(ATTACK_CHUNK)) {
        let batch = Batch { samples: chunk.to_vec(), labels: chunk_labels.to_vec(), pn_heads: Vec::new() };
        let mut rec = ComputationRecord::input_only();
        let loss = record_loss(&mut rec, model.net(), model.objective(), &batch)?;
        let grad = rec.input_gradient(loss)?;
        if !grad.is_finite() {
            return Err(Error::NonFinite("attack gradient".into()));
        }
        for (x, g) in chunk.iter().zip(grad.unstack()) {
            let data = x
                .data()
                .iter()
                .zip(g.data())
                .map(|(&v, &d)| {
                    let moved = v + epsilon * sign(d);
                    match clamp {
                        Some((lo, hi)) => moved.clamp(lo, hi),
                        None => moved,
                    }
                })
                .collect();
            out.push(Tensor::new(x.shape().to_vec(), data)?);
        }
    }
    Ok(out)
}

pub fn fgsm_perturb(
    model: AttackModel<'_>,
    x: &Tensor,
    label: usize,
    epsilon: f64,
    clamp: Option<(f64, f64)>,
) -> Result<Tensor> {
    Ok(fgsm_perturb_batch(model, &[x], &[label], epsilon, clamp)?.remove(0))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Counts for one attack direction. `cross_fool_count ≤ adversarial_count ≤
/// eligible_count` always holds.
#[derive(Clone, Debug, PartialEq)]
pub struct FoolingReport {
    pub source: String,
    pub target: String,
    pub epsilon: f64,
    /// Clean inputs the source classifies correctly.
    pub eligible_count: usize,
    /// Adversarial inputs the source misclassifies.
    pub adversarial_count: usize,
    /// Of those, the ones the target also misclassifies.
    pub cross_fool_count: usize,
}

impl FoolingReport {
    /// Share of successful adversarials that transfer to the target.
    pub fn cross_fool_fraction(&self) -> f64 {
        if self.adversarial_count == 0 {
            0.0
        } else {
            self.cross_fool_count as f64 / self.adversarial_count as f64
        }
    }

    pub const CSV_HEADER: [&'static str; 7] =
        ["source", "target", "epsilon", "eligible", "adversarial", "cross_fool", "cross_fool_fraction"];

    pub fn csv_record(&self) -> [String; 7] {
        [
            self.source.clone(),
            self.target.clone(),
            format!("{}", self.epsilon),
            self.eligible_count.to_string(),
            self.adversarial_count.to_string(),
            self.cross_fool_count.to_string(),
            format!("{:.6}", self.cross_fool_fraction()),
        ]
    }
}

impl fmt::Display for FoolingReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} -> {} (eps {}): {} of {} correctly classified inputs fool {}; {} of those also fool {} ({:.1}%)",
            self.source,
            self.target,
            self.epsilon,
            self.adversarial_count,
            self.eligible_count,
            self.source,
            self.cross_fool_count,
            self.target,
            100.0 * self.cross_fool_fraction()
        )
    }
}

pub fn write_reports_csv<W: Write>(writer: W, reports: &[FoolingReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(FoolingReport::CSV_HEADER)?;
    for r in reports {
        w.write_record(r.csv_record())?;
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))
}

fn one_direction(
    source: (&str, AttackModel<'_>),
    target: (&str, AttackModel<'_>),
    data: &LabeledDataset,
    epsilon: f64,
    clamp: Option<(f64, f64)>,
) -> Result<FoolingReport> {
    let refs = data.refs();
    let clean = source.1.predict_all(&refs)?;
    let eligible: Vec<usize> = (0..data.len()).filter(|&i| clean[i] == data.labels[i]).collect();
    if eligible.is_empty() {
        return Err(Error::NoEligible(format!("{} classifies no input correctly", source.0)));
    }
    let xs: Vec<&Tensor> = eligible.iter().map(|&i| &data.samples[i]).collect();
    let ys: Vec<usize> = eligible.iter().map(|&i| data.labels[i]).collect();
    let adv = fgsm_perturb_batch(source.1, &xs, &ys, epsilon, clamp)?;
    let adv_refs: Vec<&Tensor> = adv.iter().collect();
    let on_source = source.1.predict_all(&adv_refs)?;
    let on_target = target.1.predict_all(&adv_refs)?;
    let mut adversarial_count = 0;
    let mut cross_fool_count = 0;
    for ((&s, &t), &y) in on_source.iter().zip(&on_target).zip(&ys) {
        if s != y {
            adversarial_count += 1;
            if t != y {
                cross_fool_count += 1;
            }
        }
    }
    Ok(FoolingReport {
        source: source.0.to_string(),
        target: target.0.to_string(),
        epsilon,
        eligible_count: eligible.len(),
        adversarial_count,
        cross_fool_count,
    })
}

/// Attacks each model with FGSM on the inputs it gets right and counts how
/// many of its successful adversarials also fool the other model.
pub fn two_way_fool_experiment(
    a: (&str, AttackModel<'_>),
    b: (&str, AttackModel<'_>),
    data: &LabeledDataset,
    epsilon: f64,
    clamp: Option<(f64, f64)>,
) -> Result<(FoolingReport, FoolingReport)> {
    Ok((one_direction(a, b, data, epsilon, clamp)?, one_direction(b, a, data, epsilon, clamp)?))
}
