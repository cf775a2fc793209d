//! Layer stacks, their parameters, and the feature-extraction forward pass.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::record::{ComputationRecord, ConvGeometry, NodeId};
use crate::rng::{rng_from_seed, Rng};
use crate::tensor::Tensor;

/// Convolutions are fixed at 5×5 with stride 2 and no pooling.
pub const CONV_KERNEL: usize = 5;
pub const CONV_STRIDE: usize = 2;
/// Padding that takes 28×28 through 14, 7, 4 and 2.
pub const CONV_PADDING: usize = 2;
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Dense { units: usize },
    Conv { channels: usize, padding: usize },
    LeakyRelu { slope: f64 },
    Flatten,
}

impl LayerSpec {
    pub fn conv(channels: usize) -> Self {
        LayerSpec::Conv { channels, padding: CONV_PADDING }
    }

    fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv { .. })
    }
}

/// Feature layers plus a linear head with `heads` outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub heads: usize,
}

impl Architecture {
    /// The four-layer MNIST network: 5×5 stride-2 convolutions with the given
    /// channel counts, each followed by a leaky rectifier, then flattened.
    pub fn mnist(channels: [usize; 4], slope: f64, heads: usize) -> Self {
        let mut layers = Vec::new();
        for c in channels {
            layers.push(LayerSpec::conv(c));
            layers.push(LayerSpec::LeakyRelu { slope });
        }
        layers.push(LayerSpec::Flatten);
        Architecture { input_shape: vec![1, 28, 28], layers, heads }
    }

    /// Dense layers with leaky rectifiers over vector inputs.
    pub fn mlp(input_dim: usize, hidden: &[usize], slope: f64, heads: usize) -> Self {
        let mut layers = Vec::new();
        for &h in hidden {
            layers.push(LayerSpec::Dense { units: h });
            layers.push(LayerSpec::LeakyRelu { slope });
        }
        Architecture { input_shape: vec![input_dim], layers, heads }
    }

    /// Per-sample output shape after each layer, validating the stack.
    pub fn layer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.heads == 0 {
            return Err(Error::Config("architecture needs at least one head".into()));
        }
        let mut shape = self.input_shape.clone();
        let mut shapes = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            shape = match (layer, shape.as_slice()) {
                (LayerSpec::Dense { units }, [_]) => vec![*units],
                (LayerSpec::Conv { channels, padding }, [_, h, w]) => {
                    let g = geometry(*padding);
                    match (g.output_size(*h), g.output_size(*w)) {
                        (Some(oh), Some(ow)) => vec![*channels, oh, ow],
                        _ => {
                            return Err(Error::Dimension {
                                layer: i,
                                message: format!("{h}x{w} input too small for a 5x5 kernel"),
                            })
                        }
                    }
                }
                (LayerSpec::LeakyRelu { .. }, s) => s.to_vec(),
                (LayerSpec::Flatten, s) => vec![s.iter().product()],
                (layer, s) => {
                    return Err(Error::Dimension {
                        layer: i,
                        message: format!("{layer:?} cannot take per-sample shape {s:?}"),
                    })
                }
            };
            shapes.push(shape.clone());
        }
        if shape.len() != 1 {
            return Err(Error::Dimension {
                layer: self.layers.len(),
                message: format!("features must be flat before the head, got {shape:?}"),
            });
        }
        Ok(shapes)
    }

    pub fn feature_width(&self) -> Result<usize> {
        let shapes = self.layer_shapes()?;
        Ok(shapes.last().map(|s| s[0]).unwrap_or(self.input_shape.iter().product()))
    }

    /// Parameter shapes in declaration order: `(w, b)` per parametrized layer,
    /// then the head weight `[heads, features]` and bias `[heads]`.
    pub fn param_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let shapes = self.layer_shapes()?;
        let mut prev = self.input_shape.clone();
        let mut out = Vec::new();
        for (layer, shape) in self.layers.iter().zip(&shapes) {
            match layer {
                LayerSpec::Dense { units } => {
                    out.push(vec![*units, prev[0]]);
                    out.push(vec![*units]);
                }
                LayerSpec::Conv { channels, .. } => {
                    out.push(vec![*channels, prev[0], CONV_KERNEL, CONV_KERNEL]);
                    out.push(vec![*channels]);
                }
                _ => {}
            }
            prev = shape.clone();
        }
        let width = shapes.last().map(|s| s[0]).unwrap_or(prev[0]);
        out.push(vec![self.heads, width]);
        out.push(vec![self.heads]);
        Ok(out)
    }

    pub fn param_layer_count(&self) -> usize {
        self.layers.iter().filter(|l| l.has_params()).count()
    }

    pub fn sample_len(&self) -> usize {
        self.input_shape.iter().product()
    }
}

fn geometry(padding: usize) -> ConvGeometry {
    ConvGeometry { kernel: CONV_KERNEL, stride: CONV_STRIDE, padding }
}

/// All trainable tensors of a network, in [`Architecture::param_shapes`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    pub tensors: Vec<Tensor>,
}

impl NetworkParams {
    /// He-style initialization for the feature layers, `1/fan_in` variance
    /// for the head, zero biases.
    pub fn init(arch: &Architecture, rng: &mut Rng) -> Result<Self> {
        let shapes = arch.param_shapes()?;
        let head_index = shapes.len() - 2;
        let tensors = shapes
            .iter()
            .enumerate()
            .map(|(i, shape)| {
                if i % 2 == 1 {
                    return Tensor::zeros(shape);
                }
                let fan_in: usize = shape[1..].iter().product();
                let gain = if i == head_index { 1.0 } else { 2.0 };
                let std = (gain / fan_in as f64).sqrt();
                let data = (0..shape.iter().product::<usize>())
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(rng);
                        z * std
                    })
                    .collect();
                Tensor::from_parts(shape.clone(), data)
            })
            .collect();
        Ok(NetworkParams { tensors })
    }

    pub fn check(&self, arch: &Architecture) -> Result<()> {
        let shapes = arch.param_shapes()?;
        if shapes.len() != self.tensors.len() {
            return Err(Error::Shape(format!(
                "architecture declares {} parameter tensors, got {}",
                shapes.len(),
                self.tensors.len()
            )));
        }
        for (i, (s, t)) in shapes.iter().zip(&self.tensors).enumerate() {
            if s.as_slice() != t.shape() {
                return Err(Error::Shape(format!("parameter {i}: expected {s:?}, got {:?}", t.shape())));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn element_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn head_weight(&self) -> &Tensor {
        &self.tensors[self.tensors.len() - 2]
    }

    pub fn head_bias(&self) -> &Tensor {
        &self.tensors[self.tensors.len() - 1]
    }

    pub(crate) fn head_mut(&mut self) -> (&mut Tensor, &mut Tensor) {
        let n = self.tensors.len();
        let (front, bias) = self.tensors.split_at_mut(n - 1);
        (&mut front[n - 2], &mut bias[0])
    }
}

/// Appends the feature layers to `rec`, returning the `[B, features]` node.
pub fn record_features<'a>(
    rec: &mut ComputationRecord<'a>,
    arch: &Architecture,
    params: &'a NetworkParams,
    x: NodeId,
) -> Result<NodeId> {
    let batch_shape = rec.value(x).shape().to_vec();
    if batch_shape.len() != arch.input_shape.len() + 1 || batch_shape[1..] != arch.input_shape[..] {
        return Err(Error::Dimension {
            layer: 0,
            message: format!(
                "input batch {batch_shape:?} does not match per-sample shape {:?}",
                arch.input_shape
            ),
        });
    }
    let batch = batch_shape[0];
    let mut h = x;
    let mut p = 0;
    for (i, layer) in arch.layers.iter().enumerate() {
        let tag = |e: Error| match e {
            Error::Shape(message) => Error::Dimension { layer: i, message },
            other => other,
        };
        h = match layer {
            LayerSpec::Dense { .. } => {
                let w = rec.param(p, &params.tensors[p]);
                let b = rec.param(p + 1, &params.tensors[p + 1]);
                p += 2;
                rec.affine(h, w, b).map_err(tag)?
            }
            LayerSpec::Conv { padding, .. } => {
                let w = rec.param(p, &params.tensors[p]);
                let b = rec.param(p + 1, &params.tensors[p + 1]);
                p += 2;
                rec.conv2d(h, w, b, geometry(*padding)).map_err(tag)?
            }
            LayerSpec::LeakyRelu { slope } => rec.leaky_relu(h, *slope),
            LayerSpec::Flatten => {
                let width = rec.value(h).len() / batch;
                rec.reshape(h, &[batch, width]).map_err(tag)?
            }
        };
    }
    Ok(h)
}

/// Appends feature layers and the head, returning the `[B, heads]` logits node.
pub fn record_logits<'a>(
    rec: &mut ComputationRecord<'a>,
    arch: &Architecture,
    params: &'a NetworkParams,
    x: NodeId,
) -> Result<NodeId> {
    let features = record_features(rec, arch, params, x)?;
    let n = params.tensors.len();
    let w = rec.param(n - 2, &params.tensors[n - 2]);
    let b = rec.param(n - 1, &params.tensors[n - 1]);
    rec.affine(features, w, b).map_err(|e| match e {
        Error::Shape(message) => Error::Dimension { layer: arch.layers.len(), message },
        other => other,
    })
}

/// φ(x; w⁽⁰⁾) for a batch, with the record kept for differentiation.
pub fn forward_network<'a>(
    params: &'a NetworkParams,
    arch: &Architecture,
    x: Tensor,
) -> Result<(Tensor, ComputationRecord<'a>, NodeId)> {
    let mut rec = ComputationRecord::new();
    let xid = rec.input(x);
    let f = record_features(&mut rec, arch, params, xid)?;
    Ok((rec.value(f).clone(), rec, f))
}

/// Which scalar the gradient check differentiates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckLoss {
    /// Half the squared norm of the head outputs.
    Quadratic,
    /// Cross-entropy on random labels: sigmoid for one head, softmax otherwise.
    Classification,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientReport {
    pub max_rel_err_params: f64,
    pub max_rel_err_input: f64,
    pub coordinates_checked: usize,
}

/// Compares analytic gradients with central differences (h = 1e-5) at random
/// parameter and input coordinates.
pub fn gradient_check(arch: &Architecture, loss: CheckLoss, seed: u64) -> Result<GradientReport> {
    const H: f64 = 1e-5;
    const COORDS: usize = 24;
    const BATCH: usize = 3;
    let mut rng = rng_from_seed(seed);
    let params = NetworkParams::init(arch, &mut rng)?;
    let mut shape = vec![BATCH];
    shape.extend_from_slice(&arch.input_shape);
    let x = Tensor::from_parts(
        shape.clone(),
        (0..BATCH * arch.sample_len()).map(|_| rng.random_range(-1.0..1.0)).collect(),
    );
    let labels: Vec<usize> = (0..BATCH).map(|_| rng.random_range(0..arch.heads.max(2))).collect();

    let eval = |params: &NetworkParams, x: &Tensor| -> Result<f64> {
        let mut rec = ComputationRecord::new();
        let xid = rec.input(x.clone());
        let l = check_loss(&mut rec, arch, params, xid, loss, &labels)?;
        Ok(rec.value(l).item())
    };

    let mut rec = ComputationRecord::new();
    let xid = rec.input(x.clone());
    let l = check_loss(&mut rec, arch, &params, xid, loss, &labels)?;
    let grads = rec.backward(l)?;
    let param_grads = grads.params();
    let input_grad = grads.input()?.clone();
    drop(rec);

    let total: usize = params.element_count();
    let mut max_p: f64 = 0.0;
    for _ in 0..COORDS {
        let mut flat = rng.random_range(0..total);
        let mut t = 0;
        while flat >= params.tensors[t].len() {
            flat -= params.tensors[t].len();
            t += 1;
        }
        let mut plus = params.clone();
        plus.tensors[t].data_mut()[flat] += H;
        let mut minus = params.clone();
        minus.tensors[t].data_mut()[flat] -= H;
        let numeric = (eval(&plus, &x)? - eval(&minus, &x)?) / (2.0 * H);
        max_p = max_p.max(rel_err(param_grads[t].data()[flat], numeric));
    }

    let mut max_x: f64 = 0.0;
    for _ in 0..COORDS {
        let i = rng.random_range(0..x.len());
        let mut plus = x.clone();
        plus.data_mut()[i] += H;
        let mut minus = x.clone();
        minus.data_mut()[i] -= H;
        let numeric = (eval(&params, &plus)? - eval(&params, &minus)?) / (2.0 * H);
        max_x = max_x.max(rel_err(input_grad.data()[i], numeric));
    }
    Ok(GradientReport { max_rel_err_params: max_p, max_rel_err_input: max_x, coordinates_checked: 2 * COORDS })
}

fn check_loss<'a>(
    rec: &mut ComputationRecord<'a>,
    arch: &Architecture,
    params: &'a NetworkParams,
    x: NodeId,
    loss: CheckLoss,
    labels: &[usize],
) -> Result<NodeId> {
    let logits = record_logits(rec, arch, params, x)?;
    match loss {
        CheckLoss::Quadratic => {
            let sq = rec.mul(logits, logits)?;
            let s = rec.sum(sq);
            Ok(rec.scale(s, 0.5))
        }
        CheckLoss::Classification if arch.heads == 1 => {
            let batch = labels.len();
            let z = rec.reshape(logits, &[batch])?;
            let signs = Tensor::vector(labels.iter().map(|&l| if l == 1 { 1.0 } else { -1.0 }).collect());
            let y = rec.constant(signs);
            let yz = rec.mul(z, y)?;
            let ls = rec.log_sigmoid(yz);
            let s = rec.sum(ls);
            Ok(rec.scale(s, -1.0))
        }
        CheckLoss::Classification => {
            let ls = rec.log_softmax(logits)?;
            let picked = rec.gather(ls, labels.to_vec())?;
            let s = rec.sum(picked);
            Ok(rec.scale(s, -1.0))
        }
    }
}

/// Relative error with a small floor so that two near-zero values compare as equal.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-7);
    (analytic - numeric).abs() / denom
}
