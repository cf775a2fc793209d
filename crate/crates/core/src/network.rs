//! Classifier heads over the feature extractor, and the model file format.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::{record_logits, Architecture, LayerSpec, NetworkParams};
use crate::record::{sigmoid, softmax_in_place, ComputationRecord};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Samples per forward pass when scoring large sets.
const EVAL_CHUNK: usize = 256;

/// A feature extractor with a linear head; the head has one row per class
/// score (a single row for binary classifiers).
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub arch: Architecture,
    pub params: NetworkParams,
}

impl Network {
    pub fn init(arch: Architecture, rng: &mut Rng) -> Result<Self> {
        let params = NetworkParams::init(&arch, rng)?;
        Ok(Network { arch, params })
    }

    pub fn from_parts(arch: Architecture, params: NetworkParams) -> Result<Self> {
        params.check(&arch)?;
        Ok(Network { arch, params })
    }

    pub fn heads(&self) -> usize {
        self.arch.heads
    }

    /// Stacks per-sample tensors into a batch, checking their shape.
    pub fn batch(&self, samples: &[&Tensor]) -> Result<Tensor> {
        for s in samples {
            if s.shape() != self.arch.input_shape.as_slice() {
                return Err(Error::Dimension {
                    layer: 0,
                    message: format!("sample shape {:?} vs expected {:?}", s.shape(), self.arch.input_shape),
                });
            }
        }
        Tensor::stack(samples)
    }

    /// Head scores `w⁽¹⁾·φ(x) + b` for a stacked batch, shape `[B, heads]`.
    pub fn logits_batch(&self, batch: Tensor) -> Result<Tensor> {
        let mut rec = ComputationRecord::input_only();
        let x = rec.constant(batch);
        let z = record_logits(&mut rec, &self.arch, &self.params, x)?;
        Ok(rec.value(z).clone())
    }

    /// Head scores for every sample, one row per sample.
    pub fn logits(&self, samples: &[&Tensor]) -> Result<Vec<Vec<f64>>> {
        let k = self.heads();
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(EVAL_CHUNK) {
            let z = self.logits_batch(self.batch(chunk)?)?;
            out.extend(z.data().chunks(k).map(<[f64]>::to_vec));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BinaryClassifier {
    pub net: Network,
}

impl BinaryClassifier {
    pub fn new(net: Network) -> Result<Self> {
        if net.heads() != 1 {
            return Err(Error::Config(format!("binary classifier needs one head, got {}", net.heads())));
        }
        Ok(BinaryClassifier { net })
    }

    pub fn init(mut arch: Architecture, rng: &mut Rng) -> Result<Self> {
        arch.heads = 1;
        Self::new(Network::init(arch, rng)?)
    }

    /// ln g(x) = w⁽¹⁾·φ(x; w⁽⁰⁾), the log of q(+1|x)/q(−1|x).
    pub fn logit(&self, x: &Tensor) -> Result<f64> {
        Ok(self.net.logits(&[x])?[0][0])
    }

    pub fn logits(&self, xs: &[&Tensor]) -> Result<Vec<f64>> {
        Ok(self.net.logits(xs)?.into_iter().map(|row| row[0]).collect())
    }

    /// q(+1|x) = σ(logit).
    pub fn prob_positive(&self, x: &Tensor) -> Result<f64> {
        Ok(sigmoid(self.logit(x)?))
    }

    /// The same classifier with its head negated: q'(+1|x) = q(−1|x).
    pub fn flipped(&self) -> Self {
        let mut out = self.clone();
        let (w, b) = out.net.params.head_mut();
        for v in w.data_mut().iter_mut().chain(b.data_mut().iter_mut()) {
            *v = -*v;
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MulticlassClassifier {
    pub net: Network,
}

impl MulticlassClassifier {
    pub fn new(net: Network) -> Result<Self> {
        if net.heads() < 2 {
            return Err(Error::Config("multi-class classifier needs at least two heads".into()));
        }
        Ok(MulticlassClassifier { net })
    }

    pub fn init(arch: Architecture, rng: &mut Rng) -> Result<Self> {
        Self::new(Network::init(arch, rng)?)
    }

    pub fn classes(&self) -> usize {
        self.net.heads()
    }

    pub fn class_logits(&self, x: &Tensor) -> Result<Vec<f64>> {
        Ok(self.net.logits(&[x])?.remove(0))
    }

    /// Softmax over the K class scores.
    pub fn class_probabilities(&self, x: &Tensor) -> Result<Vec<f64>> {
        let mut z = self.class_logits(x)?;
        softmax_in_place(&mut z);
        Ok(z)
    }

    pub fn predict(&self, x: &Tensor) -> Result<usize> {
        Ok(argmax(&self.class_logits(x)?))
    }

    pub fn predict_all(&self, xs: &[&Tensor]) -> Result<Vec<usize>> {
        Ok(self.net.logits(xs)?.iter().map(|z| argmax(z)).collect())
    }
}

/// K independent binary classifiers, member k scoring class k.
#[derive(Clone, Debug, PartialEq)]
pub struct OneVsAllEnsemble {
    pub members: Vec<BinaryClassifier>,
}

impl OneVsAllEnsemble {
    pub fn classes(&self) -> usize {
        self.members.len()
    }

    /// Per-class scores `w⁽¹⁾_k·φ(x; w⁽⁰⁾_k)`, each from its own member.
    pub fn class_logits(&self, x: &Tensor) -> Result<Vec<f64>> {
        self.members.iter().map(|m| m.logit(x)).collect()
    }

    pub fn class_logits_all(&self, xs: &[&Tensor]) -> Result<Vec<Vec<f64>>> {
        let per_member: Vec<Vec<f64>> = self.members.iter().map(|m| m.logits(xs)).collect::<Result<_>>()?;
        Ok((0..xs.len()).map(|i| per_member.iter().map(|z| z[i]).collect()).collect())
    }

    pub fn predict(&self, x: &Tensor) -> Result<usize> {
        Ok(argmax(&self.class_logits(x)?))
    }

    pub fn predict_all(&self, xs: &[&Tensor]) -> Result<Vec<usize>> {
        Ok(self.class_logits_all(xs)?.iter().map(|z| argmax(z)).collect())
    }
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

const MODEL_MAGIC: &[u8; 8] = b"ICNMODEL";
const MODEL_VERSION: u32 = 1;

/// Text form of an architecture, stored in model files.
pub fn describe(arch: &Architecture) -> String {
    let dims = |d: &[usize]| d.iter().map(usize::to_string).collect::<Vec<_>>().join("x");
    let layers: Vec<String> = arch
        .layers
        .iter()
        .map(|l| match l {
            LayerSpec::Dense { units } => format!("dense:{units}"),
            LayerSpec::Conv { channels, padding } => format!("conv:{channels}:{padding}"),
            LayerSpec::LeakyRelu { slope } => format!("leaky:{slope:?}"),
            LayerSpec::Flatten => "flatten".to_string(),
        })
        .collect();
    format!("input={};heads={};layers={}", dims(&arch.input_shape), arch.heads, layers.join(","))
}

pub fn parse_description(text: &str) -> Result<Architecture> {
    let bad = || Error::Format(format!("bad architecture descriptor {text:?}"));
    let mut input = None;
    let mut heads = None;
    let mut layers = None;
    for part in text.split(';') {
        let (k, v) = part.split_once('=').ok_or_else(bad)?;
        match k {
            "input" => {
                input = Some(v.split('x').map(|d| d.parse::<usize>().map_err(|_| bad())).collect::<Result<Vec<_>>>()?)
            }
            "heads" => heads = Some(v.parse::<usize>().map_err(|_| bad())?),
            "layers" => {
                let mut out = Vec::new();
                for item in v.split(',').filter(|s| !s.is_empty()) {
                    let fields: Vec<&str> = item.split(':').collect();
                    out.push(match fields.as_slice() {
                        ["dense", u] => LayerSpec::Dense { units: u.parse().map_err(|_| bad())? },
                        ["conv", c, p] => LayerSpec::Conv {
                            channels: c.parse().map_err(|_| bad())?,
                            padding: p.parse().map_err(|_| bad())?,
                        },
                        ["leaky", s] => LayerSpec::LeakyRelu { slope: s.parse().map_err(|_| bad())? },
                        ["flatten"] => LayerSpec::Flatten,
                        _ => return Err(bad()),
                    });
                }
                layers = Some(out);
            }
            _ => return Err(bad()),
        }
    }
    Ok(Architecture {
        input_shape: input.ok_or_else(bad)?,
        heads: heads.ok_or_else(bad)?,
        layers: layers.ok_or_else(bad)?,
    })
}

/// Serializes a network: magic, version, descriptor, then each parameter
/// tensor (rank, dims, little-endian f64 payload) in declaration order.
pub fn encode_model(net: &Network) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    let desc = describe(&net.arch);
    out.extend_from_slice(&(desc.len() as u32).to_le_bytes());
    out.extend_from_slice(desc.as_bytes());
    out.extend_from_slice(&(net.params.tensors.len() as u32).to_le_bytes());
    for t in &net.params.tensors {
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_model(bytes: &[u8]) -> Result<Network> {
    let mut r = ByteReader { bytes, pos: 0 };
    if r.take(8)? != MODEL_MAGIC {
        return Err(Error::Format("not a model file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != MODEL_VERSION {
        return Err(Error::Version { expected: MODEL_VERSION, found: version });
    }
    let desc_len = r.u32()? as usize;
    let desc = std::str::from_utf8(r.take(desc_len)?).map_err(|_| Error::Format("descriptor not UTF-8".into()))?;
    let arch = parse_description(desc)?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let data = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        tensors.push(Tensor::new(shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after model".into()));
    }
    Network::from_parts(arch, NetworkParams { tensors })
}

pub fn save_model(net: &Network, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_model(net)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<Network> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_model(&bytes)
}

pub(crate) struct ByteReader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!("unexpected end of data at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
