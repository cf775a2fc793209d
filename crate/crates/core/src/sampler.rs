//! Pseudo-negative synthesis.
//!
//! Chains start from the reference Gaussian and climb the classifier's logit
//! ln g(x) = w⁽¹⁾·φ(x; w⁽⁰⁾), which is ln p⁻ₜ(x) up to the reference term and
//! the constant ln Zₜ. Each chain owns an rng stream derived from the batch
//! seed and its index, so results do not depend on how chains are batched.

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::layers::record_logits;
use crate::network::{BinaryClassifier, MulticlassClassifier, Network};
use crate::record::{sigmoid, ComputationRecord};
use crate::rng::{rng_for, Rng};
use crate::tensor::Tensor;

const CHAIN_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SynthesisMethod {
    /// Deterministic ascent using [`AscentOptimizer`].
    PlainGradient,
    /// x ← x + (ε/2)∇ + η with η ~ N(0, ε).
    Langevin,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StoppingRule {
    /// Stop once q(+1|x) > 0.5.
    BecomesPositive,
    /// Stop once q(+1|x) reaches the threshold.
    Confidence(f64),
    /// Run exactly this many updates.
    FixedSteps(usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AscentOptimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub method: SynthesisMethod,
    pub stopping: StoppingRule,
    pub optimizer: AscentOptimizer,
    pub step_size: f64,
    /// Multiplicative step-size decay applied after every update.
    pub anneal: f64,
    pub max_steps: usize,
    /// Coordinate bounds applied after every update.
    pub clamp: Option<(f64, f64)>,
    pub reference_sigma: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            method: SynthesisMethod::PlainGradient,
            stopping: StoppingRule::Confidence(0.95),
            optimizer: AscentOptimizer::Adam { beta1: 0.5, beta2: 0.999 },
            step_size: 0.02,
            anneal: 0.99,
            max_steps: 500,
            clamp: None,
            reference_sigma: 0.3,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return fail(format!("step size must be positive, got {}", self.step_size));
        }
        if !(self.anneal > 0.0 && self.anneal <= 1.0) {
            return fail(format!("anneal must lie in (0, 1], got {}", self.anneal));
        }
        if !(self.reference_sigma >= 0.0 && self.reference_sigma.is_finite()) {
            return fail(format!("reference sigma must be >= 0, got {}", self.reference_sigma));
        }
        match self.stopping {
            StoppingRule::Confidence(t) if !(t > 0.0 && t < 1.0) => {
                return fail(format!("confidence threshold must lie in (0, 1), got {t}"))
            }
            StoppingRule::FixedSteps(n) if n > self.max_steps => {
                return fail(format!("fixed steps {n} exceed max steps {}", self.max_steps))
            }
            _ => {}
        }
        if let AscentOptimizer::Adam { beta1, beta2 } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
                return fail(format!("Adam decays must lie in [0, 1), got {beta1}, {beta2}"));
            }
        }
        if let Some((lo, hi)) = self.clamp {
            if !(lo < hi) {
                return fail(format!("clamp bounds out of order: {lo} >= {hi}"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    Threshold,
    FixedSteps,
    MaxSteps,
}

impl StopReason {
    pub fn as_str(self) -> &'static str {
        match self {
            StopReason::Threshold => "threshold",
            StopReason::FixedSteps => "fixed_steps",
            StopReason::MaxSteps => "max_steps",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthesisTrace {
    pub steps: usize,
    pub final_logit: f64,
    /// σ(final_logit).
    pub final_confidence: f64,
    pub stop: StopReason,
    /// Logit before each update and at the stop, when recorded.
    pub logits: Vec<f64>,
}

/// Which logit a chain climbs.
#[derive(Clone, Copy, Debug)]
pub enum Target<'a> {
    Binary(&'a BinaryClassifier),
    Class { model: &'a MulticlassClassifier, class: usize },
    /// Any head of any network; used for one-vs-all members and tests.
    Head { net: &'a Network, head: usize },
}

impl<'a> Target<'a> {
    fn parts(self) -> Result<(&'a Network, usize)> {
        let (net, head) = match self {
            Target::Binary(c) => (&c.net, 0),
            Target::Class { model, class } => (&model.net, class),
            Target::Head { net, head } => (net, head),
        };
        if head >= net.heads() {
            return Err(Error::Config(format!("head {head} out of range for {} heads", net.heads())));
        }
        Ok((net, head))
    }
}

/// `count` i.i.d. N(0, sigma²) tensors of the given per-sample shape.
pub fn draw_reference(count: usize, shape: &[usize], sigma: f64, rng: &mut Rng) -> Vec<Tensor> {
    let len: usize = shape.iter().product();
    (0..count)
        .map(|_| {
            let data = (0..len)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    z * sigma
                })
                .collect();
            Tensor::from_parts(shape.to_vec(), data)
        })
        .collect()
}

/// One Langevin update `x + (ε/2)·grad + η`, η ~ N(0, ε) per coordinate.
/// With `noise == false` the update is the deterministic drift alone.
pub fn langevin_step(x: &Tensor, grad: &Tensor, step: f64, noise: bool, rng: &mut Rng) -> Result<Tensor> {
    if x.shape() != grad.shape() {
        return Err(Error::Shape(format!("gradient {:?} vs sample {:?}", grad.shape(), x.shape())));
    }
    if !grad.is_finite() {
        return Err(Error::NonFinite("synthesis gradient".into()));
    }
    let std = step.sqrt();
    let data = x
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&xv, &g)| {
            let eta = if noise {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            } else {
                0.0
            };
            xv + 0.5 * step * g + eta
        })
        .collect();
    Ok(Tensor::from_parts(x.shape().to_vec(), data))
}

/// Logits and input gradients of one head for a batch of samples.
pub fn head_logits_and_gradients(net: &Network, head: usize, samples: &[&Tensor]) -> Result<(Vec<f64>, Vec<Tensor>)> {
    let batch = net.batch(samples)?;
    let mut rec = ComputationRecord::input_only();
    let x = rec.input(batch);
    let z = record_logits(&mut rec, &net.arch, &net.params, x)?;
    let k = net.heads();
    let n = samples.len();
    let picked = rec.gather(z, vec![head; n])?;
    let logits = rec.value(picked).data().to_vec();
    let total = rec.sum(picked);
    let grad = rec.input_gradient(total)?;
    debug_assert_eq!(rec.value(z).len(), n * k);
    Ok((logits, grad.unstack()))
}

#[derive(Clone, Debug)]
pub struct Synthesis {
    pub samples: Vec<Tensor>,
    pub traces: Vec<SynthesisTrace>,
}

struct Chain {
    x: Tensor,
    rng: Rng,
    m: Vec<f64>,
    v: Vec<f64>,
    step: f64,
    done: Option<SynthesisTrace>,
    history: Vec<f64>,
}

/// Synthesizes `count` pseudo-negatives for `target`. Chains that never meet
/// their stopping criterion are kept and marked [`StopReason::MaxSteps`].
pub fn synthesize(target: Target<'_>, config: &SamplerConfig, count: usize, seed: u64) -> Result<Synthesis> {
    synthesize_with(target, config, count, seed, false)
}

/// As [`synthesize`], optionally recording the logit trajectory of each chain.
pub fn synthesize_with(
    target: Target<'_>,
    config: &SamplerConfig,
    count: usize,
    seed: u64,
    record_history: bool,
) -> Result<Synthesis> {
    config.validate()?;
    if count == 0 {
        return Err(Error::Config("synthesis count must be at least 1".into()));
    }
    let (net, head) = target.parts()?;
    let shape = net.arch.input_shape.clone();
    let mut chains: Vec<Chain> = (0..count)
        .map(|i| {
            let mut rng = rng_for(seed, "chain", i as u64);
            let x = draw_reference(1, &shape, config.reference_sigma, &mut rng).remove(0);
            let len = x.len();
            Chain { x, rng, m: vec![0.0; len], v: vec![0.0; len], step: config.step_size, done: None, history: Vec::new() }
        })
        .collect();

    for step in 0..=config.max_steps {
        let active: Vec<usize> = (0..count).filter(|&i| chains[i].done.is_none()).collect();
        if active.is_empty() {
            break;
        }
        for group in active.chunks(CHAIN_CHUNK) {
            let xs: Vec<&Tensor> = group.iter().map(|&i| &chains[i].x).collect();
            let (logits, grads) = head_logits_and_gradients(net, head, &xs)?;
            for ((&i, z), g) in group.iter().zip(logits).zip(grads) {
                let chain = &mut chains[i];
                if record_history {
                    chain.history.push(z);
                }
                let conf = sigmoid(z);
                let stop = match config.stopping {
                    StoppingRule::BecomesPositive if conf > 0.5 => Some(StopReason::Threshold),
                    StoppingRule::Confidence(t) if conf >= t => Some(StopReason::Threshold),
                    StoppingRule::FixedSteps(n) if step == n => Some(StopReason::FixedSteps),
                    _ if step == config.max_steps => Some(StopReason::MaxSteps),
                    _ => None,
                };
                if let Some(stop) = stop {
                    chain.done = Some(SynthesisTrace {
                        steps: step,
                        final_logit: z,
                        final_confidence: conf,
                        stop,
                        logits: std::mem::take(&mut chain.history),
                    });
                    continue;
                }
                advance(chain, &g, step, config)?;
            }
        }
    }

    let mut samples = Vec::with_capacity(count);
    let mut traces = Vec::with_capacity(count);
    for chain in chains {
        traces.push(chain.done.expect("every chain stops by max_steps"));
        samples.push(chain.x);
    }
    Ok(Synthesis { samples, traces })
}

fn advance(chain: &mut Chain, grad: &Tensor, step_index: usize, config: &SamplerConfig) -> Result<()> {
    if !grad.is_finite() {
        return Err(Error::NonFinite(format!("synthesis gradient at step {step_index}")));
    }
    let eps = chain.step;
    match config.method {
        SynthesisMethod::Langevin => {
            chain.x = langevin_step(&chain.x, grad, eps, true, &mut chain.rng)?;
        }
        SynthesisMethod::PlainGradient => match config.optimizer {
            AscentOptimizer::Sgd => {
                for (x, g) in chain.x.data_mut().iter_mut().zip(grad.data()) {
                    *x += eps * g;
                }
            }
            AscentOptimizer::Adam { beta1, beta2 } => {
                let t = (step_index + 1) as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (((x, g), m), v) in
                    chain.x.data_mut().iter_mut().zip(grad.data()).zip(&mut chain.m).zip(&mut chain.v)
                {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *x += eps * (*m / c1) / ((*v / c2).sqrt() + 1e-8);
                }
            }
        },
    }
    if let Some((lo, hi)) = config.clamp {
        for x in chain.x.data_mut() {
            *x = x.clamp(lo, hi);
        }
    }
    if !chain.x.is_finite() {
        return Err(Error::NonFinite(format!("synthesized sample at step {step_index}")));
    }
    chain.step *= config.anneal;
    Ok(())
}
