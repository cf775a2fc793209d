use icn_core::layers::Architecture;
use icn_core::network::{BinaryClassifier, Network};
use icn_core::oracle::{
    build_grid, density_update, density_update_with_logits, exact_grid_sample, grid_logits, kl_divergence, kl_identity,
    reference_grid, round_ratio_normalizer, GridDensity, DEFAULT_BOUNDS,
};
use icn_core::rng::rng_for;
use proptest::prelude::*;

fn normal_cdf(x: f64, sigma: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / (sigma * std::f64::consts::SQRT_2)))
}

fn random_classifier(seed: u64) -> BinaryClassifier {
    let net = Network::init(Architecture::mlp(2, &[8, 8], 0.2, 1), &mut rng_for(seed, "oracle-test", 0)).unwrap();
    BinaryClassifier::new(net).unwrap()
}

#[test]
fn reference_grid_matches_gaussian_cdf_mass() {
    let sigma = 0.5;
    // 120 cells per side put cell edges on ±1.
    let grid = reference_grid(DEFAULT_BOUNDS, [120, 120], sigma).unwrap();
    let box_mass: f64 = (0..grid.cells())
        .filter(|&c| {
            let (x, y) = grid.center(c);
            x.abs() < 1.0 && y.abs() < 1.0
        })
        .map(|c| grid.mass()[c])
        .sum();
    let side = |a: f64| normal_cdf(a, sigma) - normal_cdf(-a, sigma);
    // The grid renormalizes over [-3, 3]², so compare conditional masses.
    let expected = side(1.0).powi(2) / side(3.0).powi(2);
    assert!((box_mass - expected).abs() < 1e-3, "{box_mass} vs {expected}");
    assert!((grid.mass().iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn normalizer_matches_double_loop() {
    let sigma = 0.3;
    let res = 64;
    let prior = reference_grid(DEFAULT_BOUNDS, [res, res], sigma).unwrap();
    let c = random_classifier(1);
    let update = density_update(&prior, &c).unwrap();
    let (lo, hi) = DEFAULT_BOUNDS[0];
    let h = (hi - lo) / res as f64;
    let mut weights = vec![0.0; res * res];
    let mut total_prior = 0.0;
    for j in 0..res {
        for i in 0..res {
            let (x, y) = (lo + (i as f64 + 0.5) * h, lo + (j as f64 + 0.5) * h);
            let p = (-(x * x + y * y) / (2.0 * sigma * sigma)).exp();
            total_prior += p;
            weights[j * res + i] = p;
        }
    }
    let mut z = 0.0;
    for j in 0..res {
        for i in 0..res {
            let (x, y) = (lo + (i as f64 + 0.5) * h, lo + (j as f64 + 0.5) * h);
            let logit = c.logit(&icn_core::Tensor::vector(vec![x, y])).unwrap();
            z += weights[j * res + i] / total_prior * logit.exp();
        }
    }
    assert!((update.normalizer() - z).abs() < 1e-12 * z.max(1.0), "{} vs {z}", update.normalizer());
    for j in 0..res {
        for i in 0..res {
            let cell = j * res + i;
            let (x, y) = prior.center(cell);
            let logit = c.logit(&icn_core::Tensor::vector(vec![x, y])).unwrap();
            let expected = weights[cell] / total_prior * logit.exp() / z;
            assert!((update.density.mass()[cell] - expected).abs() < 1e-12);
        }
    }
}

#[test]
fn exact_samples_follow_cell_masses() {
    let prior = reference_grid(DEFAULT_BOUNDS, [8, 8], 1.0).unwrap();
    let n = 40_000;
    let samples = exact_grid_sample(&prior, n, &mut rng_for(3, "multinomial", 0));
    let mut counts = vec![0usize; prior.cells()];
    for s in &samples {
        counts[prior.cell_of(s.data()[0], s.data()[1]).expect("inside the grid")] += 1;
    }
    for (cell, &count) in counts.iter().enumerate() {
        let p = prior.mass()[cell];
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        let diff = (count as f64 - n as f64 * p).abs();
        // 64 cells at 3σ each; a 4σ band keeps the family-wise false-alarm rate tiny.
        assert!(diff <= 4.0 * sd.max(1.0), "cell {cell}: {count} vs {}", n as f64 * p);
    }
}

#[test]
fn kl_identity_holds_for_trained_like_pairs() {
    let grid = [64, 64];
    let positive = build_grid(DEFAULT_BOUNDS, grid, |x, y| (-((x - 0.5).powi(2) + y * y) / 0.1).exp()).unwrap();
    let prior = reference_grid(DEFAULT_BOUNDS, grid, 0.3).unwrap();
    for seed in 0..5 {
        let (a, b) = (random_classifier(10 + seed), random_classifier(20 + seed));
        let za: Vec<f64> = grid_logits(&prior, &a).unwrap().iter().map(|z| 4.0 * z).collect();
        let zb: Vec<f64> = grid_logits(&prior, &b).unwrap().iter().map(|z| 4.0 * z).collect();
        let id = kl_identity(&positive, &prior, &za, &zb).unwrap();
        assert!(id.residual().abs() < 1e-9, "{id:?}");
        // Recompute the left side from densities built here.
        let pa = density_update_with_logits(&prior, &za).unwrap().density;
        let pb = density_update_with_logits(&prior, &zb).unwrap().density;
        let lhs = kl_divergence(&positive, &pa).unwrap() - kl_divergence(&positive, &pb).unwrap();
        assert!((lhs - id.lhs()).abs() < 1e-12);
    }
}

#[test]
fn ratio_normalizer_is_one_for_identical_classifiers() {
    let prior = reference_grid(DEFAULT_BOUNDS, [32, 32], 0.3).unwrap();
    let c = random_classifier(4);
    let p = density_update(&prior, &c).unwrap().density;
    assert_eq!(round_ratio_normalizer(&p, &c, &c).unwrap().h(), 1.0);
}

fn grid_from(values: &[f64]) -> GridDensity {
    let res = 4;
    build_grid([(0.0, 1.0), (0.0, 1.0)], [res, res], |x, y| {
        let (i, j) = ((x * res as f64) as usize, (y * res as f64) as usize);
        values[j * res + i]
    })
    .unwrap()
}

proptest! {
    #[test]
    fn kl_is_nonnegative_and_zero_on_self(a in prop::collection::vec(0.01f64..1.0, 16), b in prop::collection::vec(0.01f64..1.0, 16)) {
        let (p, q) = (grid_from(&a), grid_from(&b));
        let kl = kl_divergence(&p, &q).unwrap();
        prop_assert!(kl >= -1e-15);
        prop_assert!(kl_divergence(&p, &p).unwrap().abs() < 1e-15);
    }

    #[test]
    fn updated_density_sums_to_one(logits in prop::collection::vec(-50.0f64..50.0, 16)) {
        let p = grid_from(&[1.0; 16]);
        let u = density_update_with_logits(&p, &logits).unwrap();
        prop_assert!((u.density.mass().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(u.log_normalizer.is_finite());
    }
}
