//! Datasets: the synthetic 2D benchmark, IDX image files, normalization and
//! seeded splits.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::{rng_from_seed, Rng};
use crate::tensor::Tensor;

/// Samples with integer class labels `0..class_count`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub samples: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl LabeledDataset {
    pub fn new(samples: Vec<Tensor>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if samples.len() != labels.len() {
            return Err(Error::Dataset(format!("{} samples but {} labels", samples.len(), labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Dataset(format!("label {bad} outside 0..{class_count}")));
        }
        if let Some(first) = samples.first() {
            if samples.iter().any(|s| s.shape() != first.shape()) {
                return Err(Error::Dataset("samples have mixed shapes".into()));
            }
        }
        Ok(LabeledDataset { samples, labels, class_count })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample_shape(&self) -> Option<&[usize]> {
        self.samples.first().map(Tensor::shape)
    }

    pub fn refs(&self) -> Vec<&Tensor> {
        self.samples.iter().collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
        }
    }

    /// Relabels as a two-class problem: label 1 for `positive`, 0 otherwise.
    pub fn one_vs_rest(&self, positive: usize) -> LabeledDataset {
        LabeledDataset {
            samples: self.samples.clone(),
            labels: self.labels.iter().map(|&l| usize::from(l == positive)).collect(),
            class_count: 2,
        }
    }

    /// Seeded shuffle, then the first `round(fraction · n)` items become the
    /// second part. The parts are disjoint and together cover the dataset.
    pub fn split(&self, fraction: f64, seed: u64) -> (LabeledDataset, LabeledDataset) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut rng_from_seed(seed));
        let held = ((self.len() as f64) * fraction).round() as usize;
        let (held_idx, kept_idx) = idx.split_at(held.min(self.len()));
        (self.subset(kept_idx), self.subset(held_idx))
    }

    /// A class-balanced subset of `n` items (remainders go to the lowest
    /// classes) and the items left over.
    pub fn stratified_subset(&self, n: usize, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
        let k = self.class_count;
        let mut rng = rng_from_seed(seed);
        let mut pools: Vec<Vec<usize>> = vec![Vec::new(); k];
        for (i, &l) in self.labels.iter().enumerate() {
            pools[l].push(i);
        }
        let mut chosen = Vec::with_capacity(n);
        let mut rest = Vec::new();
        for (c, pool) in pools.iter_mut().enumerate() {
            let want = n / k + usize::from(c < n % k);
            if pool.len() < want {
                return Err(Error::Dataset(format!("class {c} has {} items, {want} requested", pool.len())));
            }
            pool.shuffle(&mut rng);
            chosen.extend_from_slice(&pool[..want]);
            rest.extend_from_slice(&pool[want..]);
        }
        chosen.sort_unstable();
        rest.sort_unstable();
        Ok((self.subset(&chosen), self.subset(&rest)))
    }
}

/// Pixel normalization for image data.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Normalization {
    /// `p / 127.5 − 1`, taking [0, 255] onto [−1, 1].
    ZeroCenteredUnitRange,
}

impl Normalization {
    pub fn forward(self, p: f64) -> f64 {
        match self {
            Normalization::ZeroCenteredUnitRange => p / 127.5 - 1.0,
        }
    }

    pub fn inverse(self, v: f64) -> f64 {
        match self {
            Normalization::ZeroCenteredUnitRange => (v + 1.0) * 127.5,
        }
    }

    /// Normalized value range.
    pub fn range(self) -> (f64, f64) {
        match self {
            Normalization::ZeroCenteredUnitRange => (-1.0, 1.0),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Normalization::ZeroCenteredUnitRange => "zero-centered-unit-range",
        }
    }
}

pub fn normalize(dataset: &LabeledDataset, mode: Normalization) -> LabeledDataset {
    LabeledDataset {
        samples: dataset.samples.iter().map(|s| s.map(|p| mode.forward(p))).collect(),
        labels: dataset.labels.clone(),
        class_count: dataset.class_count,
    }
}

// ---- IDX -------------------------------------------------------------------

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    let gz = path.extension().is_some_and(|e| e == "gz");
    let res = if gz {
        GzDecoder::new(BufReader::new(file)).read_to_end(&mut bytes)
    } else {
        BufReader::new(file).read_to_end(&mut bytes)
    };
    res.map_err(|e| Error::io(path, e))?;
    Ok(bytes)
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Truncated { path: path.to_path_buf(), detail: format!("header ends before byte {}", at + 4) })
}

/// Reads an IDX image/label pair (optionally gzipped). Pixels become reals in
/// [0, 255]; each sample has shape `[1, rows, cols]`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let img = read_all(images_path)?;
    let lab = read_all(labels_path)?;

    let magic = be_u32(&img, 0, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic { path: images_path.to_path_buf(), expected: IDX_IMAGES_MAGIC, found: magic });
    }
    let magic = be_u32(&lab, 0, labels_path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic { path: labels_path.to_path_buf(), expected: IDX_LABELS_MAGIC, found: magic });
    }
    let n_images = be_u32(&img, 4, images_path)? as usize;
    let rows = be_u32(&img, 8, images_path)? as usize;
    let cols = be_u32(&img, 12, images_path)? as usize;
    let n_labels = be_u32(&lab, 4, labels_path)? as usize;
    if n_images != n_labels {
        return Err(Error::CountMismatch { images: n_images, labels: n_labels });
    }
    let plane = rows * cols;
    if img.len() < 16 + n_images * plane {
        return Err(Error::Truncated {
            path: images_path.to_path_buf(),
            detail: format!("{} pixel bytes for {n_images} images of {rows}x{cols}", img.len() - 16),
        });
    }
    if lab.len() < 8 + n_labels {
        return Err(Error::Truncated {
            path: labels_path.to_path_buf(),
            detail: format!("{} label bytes for {n_labels} labels", lab.len() - 8),
        });
    }
    let samples = (0..n_images)
        .map(|i| {
            let px = &img[16 + i * plane..16 + (i + 1) * plane];
            Tensor::from_parts(vec![1, rows, cols], px.iter().map(|&p| p as f64).collect())
        })
        .collect();
    let labels: Vec<usize> = lab[8..8 + n_labels].iter().map(|&l| l as usize).collect();
    let class_count = labels.iter().max().map_or(0, |m| m + 1);
    LabeledDataset::new(samples, labels, class_count)
}

// ---- synthetic 2D ------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gaussian2 {
    pub mean: [f64; 2],
    /// Row-major `[[a, b], [b, c]]`.
    pub cov: [[f64; 2]; 2],
}

impl Gaussian2 {
    pub fn isotropic(mean: [f64; 2], sigma: f64) -> Self {
        Gaussian2 { mean, cov: [[sigma * sigma, 0.0], [0.0, sigma * sigma]] }
    }

    fn check(&self, positive_definite: bool) -> Result<()> {
        let [[a, b], [b2, c]] = self.cov;
        let det = a * c - b * b;
        let ok = b == b2 && if positive_definite { a > 0.0 && det > 0.0 } else { a >= 0.0 && c >= 0.0 && det >= 0.0 };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("covariance {:?} is not {}", self.cov, if positive_definite { "positive definite" } else { "positive semi-definite" })))
        }
    }

    /// Lower Cholesky factor, tolerating singular covariances.
    fn cholesky(&self) -> [[f64; 2]; 2] {
        let [[a, b], [_, c]] = self.cov;
        let l11 = a.sqrt();
        let l21 = if l11 > 0.0 { b / l11 } else { 0.0 };
        let l22 = (c - l21 * l21).max(0.0).sqrt();
        [[l11, 0.0], [l21, l22]]
    }

    pub fn sample(&self, rng: &mut Rng) -> [f64; 2] {
        let l = self.cholesky();
        let z0: f64 = StandardNormal.sample(rng);
        let z1: f64 = StandardNormal.sample(rng);
        [self.mean[0] + l[0][0] * z0, self.mean[1] + l[1][0] * z0 + l[1][1] * z1]
    }

    pub fn pdf(&self, x: f64, y: f64) -> f64 {
        let [[a, b], [_, c]] = self.cov;
        let det = a * c - b * b;
        let (dx, dy) = (x - self.mean[0], y - self.mean[1]);
        let q = (c * dx * dx - 2.0 * b * dx * dy + a * dy * dy) / det;
        (-0.5 * q).exp() / (2.0 * std::f64::consts::PI * det.sqrt())
    }
}

/// Equal-weight Gaussian mixture density in the plane.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureDensity {
    pub components: Vec<Gaussian2>,
}

impl MixtureDensity {
    pub fn new(components: Vec<Gaussian2>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::Config("mixture needs at least one component".into()));
        }
        for c in &components {
            c.check(true)?;
        }
        Ok(MixtureDensity { components })
    }

    pub fn pdf(&self, x: f64, y: f64) -> f64 {
        self.components.iter().map(|c| c.pdf(x, y)).sum::<f64>() / self.components.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub positives: Vec<Gaussian2>,
    pub negatives: Vec<Gaussian2>,
    pub positive_count: usize,
    pub negative_count: usize,
}

impl Default for SyntheticSpec {
    /// Two positive blobs flanked by four negative blobs, 200 points per class.
    fn default() -> Self {
        SyntheticSpec {
            positives: vec![Gaussian2::isotropic([-0.5, 0.0], 0.15), Gaussian2::isotropic([0.5, 0.0], 0.15)],
            negatives: vec![
                Gaussian2::isotropic([0.0, 0.75], 0.2),
                Gaussian2::isotropic([0.0, -0.75], 0.2),
                Gaussian2::isotropic([-1.25, 0.0], 0.2),
                Gaussian2::isotropic([1.25, 0.0], 0.2),
            ],
            positive_count: 200,
            negative_count: 200,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.positive_count == 0 || self.negative_count == 0 {
            return Err(Error::Config("synthetic class counts must be at least 1".into()));
        }
        if self.positives.is_empty() || self.negatives.is_empty() {
            return Err(Error::Config("each class needs at least one component".into()));
        }
        for c in self.positives.iter().chain(&self.negatives) {
            c.check(false)?;
        }
        Ok(())
    }

    /// The exact positive-class density p⁺.
    pub fn positive_density(&self) -> Result<MixtureDensity> {
        MixtureDensity::new(self.positives.clone())
    }
}

/// Draws the benchmark: positives (label 1) then negatives (label 0), each
/// point from a uniformly chosen component of its class.
pub fn gen_synthetic_2d(spec: &SyntheticSpec, rng: &mut Rng) -> Result<LabeledDataset> {
    spec.validate()?;
    let mut samples = Vec::with_capacity(spec.positive_count + spec.negative_count);
    let mut labels = Vec::with_capacity(samples.capacity());
    for (components, count, label) in [(&spec.positives, spec.positive_count, 1), (&spec.negatives, spec.negative_count, 0)] {
        for _ in 0..count {
            let c = &components[rng.random_range(0..components.len())];
            samples.push(Tensor::vector(c.sample(rng).to_vec()));
            labels.push(label);
        }
    }
    LabeledDataset::new(samples, labels, 2)
}

/// Writes `x,y,label` rows for a 2D dataset.
pub fn write_points_csv(path: &Path, samples: &[Tensor], labels: &[i64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["x", "y", "label"])?;
    for (s, l) in samples.iter().zip(labels) {
        w.write_record([format!("{:.9e}", s.data()[0]), format!("{:.9e}", s.data()[1]), l.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(n: usize, classes: usize) -> LabeledDataset {
        LabeledDataset::new(
            (0..n).map(|i| Tensor::vector(vec![i as f64])).collect(),
            (0..n).map(|i| i % classes).collect(),
            classes,
        )
        .unwrap()
    }

    #[test]
    fn split_is_disjoint_covering_and_seeded() {
        let d = tiny(50, 3);
        let (a, b) = d.split(0.1, 4);
        assert_eq!((a.len(), b.len()), (45, 5));
        let mut all: Vec<f64> = a.samples.iter().chain(&b.samples).map(|s| s.data()[0]).collect();
        all.sort_by(f64::total_cmp);
        assert_eq!(all, (0..50).map(|i| i as f64).collect::<Vec<_>>());
        assert_eq!(d.split(0.1, 4), (a, b));
    }

    #[test]
    fn stratified_subset_balances_classes() {
        let d = tiny(100, 4);
        let (s, rest) = d.stratified_subset(10, 1).unwrap();
        assert_eq!(s.class_counts(), vec![3, 3, 2, 2]);
        assert_eq!(s.len() + rest.len(), 100);
        assert!(d.stratified_subset(200, 1).is_err());
    }

    #[test]
    fn normalization_maps_pixel_range() {
        let m = Normalization::ZeroCenteredUnitRange;
        assert_eq!(m.forward(0.0), -1.0);
        assert_eq!(m.forward(255.0), 1.0);
        assert_eq!(m.forward(127.5), 0.0);
        for p in [0.0, 1.0, 37.0, 127.5, 254.0, 255.0] {
            assert!((m.inverse(m.forward(p)) - p).abs() < 1e-12);
        }
    }

    #[test]
    fn normalized_mean_is_in_range() {
        let d = LabeledDataset::new(
            vec![Tensor::vector(vec![0.0, 255.0, 12.0]), Tensor::vector(vec![200.0, 3.0, 90.0])],
            vec![0, 1],
            2,
        )
        .unwrap();
        let n = normalize(&d, Normalization::ZeroCenteredUnitRange);
        let values: Vec<f64> = n.samples.iter().flat_map(|s| s.data().to_vec()).collect();
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        assert!(mean.is_finite() && (-1.0..=1.0).contains(&mean));
    }

    #[test]
    fn zero_covariance_collapses_to_means() {
        let spec = SyntheticSpec {
            positives: vec![Gaussian2::isotropic([1.0, 2.0], 0.0)],
            negatives: vec![Gaussian2::isotropic([-3.0, 0.5], 0.0)],
            positive_count: 5,
            negative_count: 7,
        };
        let d = gen_synthetic_2d(&spec, &mut rng_from_seed(0)).unwrap();
        for (s, &l) in d.samples.iter().zip(&d.labels) {
            let want = if l == 1 { [1.0, 2.0] } else { [-3.0, 0.5] };
            assert_eq!(s.data(), &want);
        }
        assert_eq!(d.class_counts(), vec![7, 5]);
    }

    #[test]
    fn single_component_sample_mean_is_close() {
        let g = Gaussian2 { mean: [0.3, -0.7], cov: [[0.04, 0.01], [0.01, 0.09]] };
        let spec = SyntheticSpec { positives: vec![g], negatives: vec![g], positive_count: 10_000, negative_count: 1 };
        let d = gen_synthetic_2d(&spec, &mut rng_from_seed(5)).unwrap();
        let pos: Vec<&Tensor> = d.samples.iter().zip(&d.labels).filter(|(_, &l)| l == 1).map(|(s, _)| s).collect();
        let n = pos.len() as f64;
        for (axis, var) in [(0, 0.04_f64), (1, 0.09)] {
            let mean = pos.iter().map(|s| s.data()[axis]).sum::<f64>() / n;
            assert!((mean - g.mean[axis]).abs() < 3.0 * var.sqrt() / n.sqrt());
        }
    }

    #[test]
    fn synthetic_is_seed_deterministic() {
        let spec = SyntheticSpec::default();
        let a = gen_synthetic_2d(&spec, &mut rng_from_seed(3)).unwrap();
        let b = gen_synthetic_2d(&spec, &mut rng_from_seed(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mixture_pdf_integrates_to_one() {
        let m = SyntheticSpec::default().positive_density().unwrap();
        let h = 0.01;
        let mut total = 0.0;
        for i in 0..600 {
            for j in 0..600 {
                total += m.pdf(-3.0 + (i as f64 + 0.5) * h, -3.0 + (j as f64 + 0.5) * h) * h * h;
            }
        }
        assert!((total - 1.0).abs() < 1e-6, "{total}");
    }
}
