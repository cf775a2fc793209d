//! Exact densities on a 2D grid.
//!
//! On a finite grid the negative-class model p⁻ₜ(x) ∝ exp(ln gₜ(x))·p⁻ᵣ(x)
//! can be normalized by an explicit sum, sampled exactly and compared with
//! the positive density by KL divergence. This is the ground truth the
//! gradient-based sampler and the training loop are checked against.

use std::path::Path;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::image::{write_pgm, GrayImage};
use crate::network::BinaryClassifier;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const DEFAULT_BOUNDS: [(f64, f64); 2] = [(-3.0, 3.0), (-3.0, 3.0)];
pub const DEFAULT_RESOLUTION: usize = 128;

/// Per-cell probability masses over an axis-aligned 2D box. Cell `(i, j)`
/// (column `i` along x, row `j` along y) lives at index `j * nx + i`.
#[derive(Clone, Debug, PartialEq)]
pub struct GridDensity {
    bounds: [(f64, f64); 2],
    resolution: [usize; 2],
    mass: Vec<f64>,
}

impl GridDensity {
    pub fn bounds(&self) -> [(f64, f64); 2] {
        self.bounds
    }

    pub fn resolution(&self) -> [usize; 2] {
        self.resolution
    }

    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    pub fn cells(&self) -> usize {
        self.mass.len()
    }

    pub fn cell_size(&self) -> (f64, f64) {
        let [(x0, x1), (y0, y1)] = self.bounds;
        ((x1 - x0) / self.resolution[0] as f64, (y1 - y0) / self.resolution[1] as f64)
    }

    pub fn center(&self, cell: usize) -> (f64, f64) {
        let nx = self.resolution[0];
        let (i, j) = (cell % nx, cell / nx);
        let (dx, dy) = self.cell_size();
        (self.bounds[0].0 + (i as f64 + 0.5) * dx, self.bounds[1].0 + (j as f64 + 0.5) * dy)
    }

    pub fn centers(&self) -> Vec<Tensor> {
        (0..self.cells()).map(|c| {
            let (x, y) = self.center(c);
            Tensor::vector(vec![x, y])
        }).collect()
    }

    /// Cell containing `(x, y)`, if inside the box.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<usize> {
        let [(x0, x1), (y0, y1)] = self.bounds;
        if !(x >= x0 && x < x1 && y >= y0 && y < y1) {
            return None;
        }
        let (dx, dy) = self.cell_size();
        let i = (((x - x0) / dx) as usize).min(self.resolution[0] - 1);
        let j = (((y - y0) / dy) as usize).min(self.resolution[1] - 1);
        Some(j * self.resolution[0] + i)
    }

    pub fn median_mass(&self) -> f64 {
        let mut sorted = self.mass.clone();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        }
    }

    fn same_grid(&self, other: &GridDensity) -> Result<()> {
        if self.bounds != other.bounds || self.resolution != other.resolution {
            return Err(Error::GridMismatch(format!(
                "{:?}/{:?} vs {:?}/{:?}",
                self.bounds, self.resolution, other.bounds, other.resolution
            )));
        }
        Ok(())
    }

    /// `x,y,mass` rows, one per cell.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["x", "y", "mass"])?;
        for (c, m) in self.mass.iter().enumerate() {
            let (x, y) = self.center(c);
            w.write_record([format!("{x:.9e}"), format!("{y:.9e}"), format!("{m:.9e}")])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Grayscale heatmap scaled so the heaviest cell is white; top row is max y.
    pub fn heatmap(&self) -> GrayImage {
        let [nx, ny] = self.resolution;
        let max = self.mass.iter().copied().fold(0.0, f64::max);
        let mut pixels = Vec::with_capacity(nx * ny);
        for row in 0..ny {
            let j = ny - 1 - row;
            for i in 0..nx {
                let m = self.mass[j * nx + i];
                let v = if max > 0.0 { (m / max * 255.0 + 0.5).floor() } else { 0.0 };
                pixels.push(v.clamp(0.0, 255.0) as u8);
            }
        }
        GrayImage { width: nx, height: ny, pixels }
    }

    pub fn write_heatmap(&self, path: &Path) -> Result<()> {
        write_pgm(path, &self.heatmap())
    }
}

fn normalized(bounds: [(f64, f64); 2], resolution: [usize; 2], mut mass: Vec<f64>) -> Result<GridDensity> {
    let total: f64 = mass.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::NonFinite(format!("grid total mass {total}")));
    }
    for m in mass.iter_mut() {
        *m /= total;
    }
    Ok(GridDensity { bounds, resolution, mass })
}

/// Discretizes `density` at cell centers (times cell area) and normalizes.
pub fn build_grid(
    bounds: [(f64, f64); 2],
    resolution: [usize; 2],
    density: impl Fn(f64, f64) -> f64,
) -> Result<GridDensity> {
    if resolution.iter().any(|&r| r < 2) {
        return Err(Error::Config(format!("grid resolution must be >= 2 per axis, got {resolution:?}")));
    }
    if bounds.iter().any(|(lo, hi)| !(lo < hi)) {
        return Err(Error::Config(format!("empty grid bounds {bounds:?}")));
    }
    let probe = GridDensity { bounds, resolution, mass: vec![0.0; resolution[0] * resolution[1]] };
    let (dx, dy) = probe.cell_size();
    let mut mass = Vec::with_capacity(probe.cells());
    for c in 0..probe.cells() {
        let (x, y) = probe.center(c);
        let v = density(x, y);
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("density at cell {c}")));
        }
        if v < 0.0 {
            return Err(Error::NegativeDensity { cell: c, value: v });
        }
        mass.push(v * dx * dy);
    }
    normalized(bounds, resolution, mass)
}

/// The reference distribution N(0, σ²I) on the grid.
pub fn reference_grid(bounds: [(f64, f64); 2], resolution: [usize; 2], sigma: f64) -> Result<GridDensity> {
    let s2 = sigma * sigma;
    build_grid(bounds, resolution, |x, y| (-(x * x + y * y) / (2.0 * s2)).exp() / (2.0 * std::f64::consts::PI * s2))
}

/// Classifier logits ln g(x) at every cell center.
pub fn grid_logits(grid: &GridDensity, classifier: &BinaryClassifier) -> Result<Vec<f64>> {
    let centers = grid.centers();
    let refs: Vec<&Tensor> = centers.iter().collect();
    classifier.logits(&refs)
}

/// p⁻ₜ on the grid together with its normalizer Zₜ = Σ prior·exp(logit).
#[derive(Clone, Debug, PartialEq)]
pub struct UpdatedDensity {
    pub density: GridDensity,
    pub log_normalizer: f64,
}

impl UpdatedDensity {
    pub fn normalizer(&self) -> f64 {
        self.log_normalizer.exp()
    }
}

/// Reweights `prior` by exp(logit) per cell, with the largest logit
/// subtracted before exponentiating.
pub fn density_update_with_logits(prior: &GridDensity, logits: &[f64]) -> Result<UpdatedDensity> {
    if logits.len() != prior.cells() {
        return Err(Error::GridMismatch(format!("{} logits for {} cells", logits.len(), prior.cells())));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::NonFinite("classifier logit on grid".into()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = prior.mass.iter().zip(logits).map(|(p, z)| p * (z - max).exp()).collect();
    let shifted_total: f64 = weights.iter().sum();
    let log_normalizer = max + shifted_total.ln();
    let density = normalized(prior.bounds, prior.resolution, weights)?;
    Ok(UpdatedDensity { density, log_normalizer })
}

/// p⁻ₜ(x) = exp(ln gₜ(x))·prior(x) / Zₜ on the grid.
pub fn density_update(prior: &GridDensity, classifier: &BinaryClassifier) -> Result<UpdatedDensity> {
    density_update_with_logits(prior, &grid_logits(prior, classifier)?)
}

/// KL(p ‖ q) = Σ p ln(p/q); +∞ when q vanishes where p does not.
pub fn kl_divergence(p: &GridDensity, q: &GridDensity) -> Result<f64> {
    p.same_grid(q)?;
    let mut total = 0.0;
    for (&pm, &qm) in p.mass.iter().zip(&q.mass) {
        if pm > 0.0 {
            if qm <= 0.0 {
                return Ok(f64::INFINITY);
            }
            total += pm * (pm / qm).ln();
        }
    }
    Ok(total.max(0.0))
}

/// H_{t+1} = Σ exp(z_{t+1} − z_t)·p_t over the grid, kept in log form.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RatioNormalizer {
    pub log_h: f64,
}

impl RatioNormalizer {
    pub fn h(&self) -> f64 {
        self.log_h.exp()
    }
}

pub fn round_ratio_normalizer_with_logits(p_t: &GridDensity, z_t: &[f64], z_next: &[f64]) -> Result<RatioNormalizer> {
    if z_t.len() != p_t.cells() || z_next.len() != p_t.cells() {
        return Err(Error::GridMismatch("logit count does not match grid".into()));
    }
    let diffs: Vec<f64> = z_next.iter().zip(z_t).map(|(a, b)| a - b).collect();
    if diffs.iter().all(|&d| d == 0.0) {
        return Ok(RatioNormalizer { log_h: 0.0 });
    }
    let max = diffs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = diffs.iter().zip(&p_t.mass).map(|(d, p)| (d - max).exp() * p).sum();
    Ok(RatioNormalizer { log_h: max + s.ln() })
}

pub fn round_ratio_normalizer(
    p_t: &GridDensity,
    current: &BinaryClassifier,
    next: &BinaryClassifier,
) -> Result<RatioNormalizer> {
    round_ratio_normalizer_with_logits(p_t, &grid_logits(p_t, current)?, &grid_logits(p_t, next)?)
}

/// Both sides of KLₜ − KLₜ₊₁ = ln(1/Hₜ₊₁) + Σ p⁺ ln(ratio), assembled independently.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KlIdentity {
    pub kl_t: f64,
    pub kl_next: f64,
    pub log_h: f64,
    /// Σ p⁺ (z_{t+1} − z_t).
    pub expected_log_ratio: f64,
}

impl KlIdentity {
    pub fn lhs(&self) -> f64 {
        self.kl_t - self.kl_next
    }

    pub fn rhs(&self) -> f64 {
        -self.log_h + self.expected_log_ratio
    }

    pub fn residual(&self) -> f64 {
        (self.lhs() - self.rhs()).abs()
    }
}

pub fn kl_identity(positive: &GridDensity, prior: &GridDensity, z_t: &[f64], z_next: &[f64]) -> Result<KlIdentity> {
    positive.same_grid(prior)?;
    let p_t = density_update_with_logits(prior, z_t)?.density;
    let p_next = density_update_with_logits(prior, z_next)?.density;
    let kl_t = kl_divergence(positive, &p_t)?;
    let kl_next = kl_divergence(positive, &p_next)?;
    let log_h = round_ratio_normalizer_with_logits(&p_t, z_t, z_next)?.log_h;
    let expected_log_ratio = positive.mass.iter().zip(z_next.iter().zip(z_t)).map(|(p, (a, b))| p * (a - b)).sum();
    Ok(KlIdentity { kl_t, kl_next, log_h, expected_log_ratio })
}

/// Exact draws: a cell by its mass, then a uniform point inside the cell.
pub fn exact_grid_sample(p: &GridDensity, count: usize, rng: &mut Rng) -> Vec<Tensor> {
    let mut cumulative = Vec::with_capacity(p.cells());
    let mut acc = 0.0;
    for m in &p.mass {
        acc += m;
        cumulative.push(acc);
    }
    let (dx, dy) = p.cell_size();
    let nx = p.resolution[0];
    (0..count)
        .map(|_| {
            let u: f64 = rng.random::<f64>() * acc;
            let mut cell = cumulative.partition_point(|&c| c <= u).min(p.cells() - 1);
            while p.mass[cell] == 0.0 && cell > 0 {
                cell -= 1;
            }
            let (i, j) = (cell % nx, cell / nx);
            let x = p.bounds[0].0 + (i as f64 + rng.random::<f64>()) * dx;
            let y = p.bounds[1].0 + (j as f64 + rng.random::<f64>()) * dy;
            Tensor::vector(vec![x, y])
        })
        .collect()
}
