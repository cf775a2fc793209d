use icn_core::layers::{gradient_check, rel_err, Architecture, CheckLoss, LayerSpec};
use icn_core::record::{ConvGeometry, ComputationRecord, NodeId};
use icn_core::rng::rng_from_seed;
use icn_core::Tensor;
use proptest::prelude::*;
use rand::Rng;

const H: f64 = 1e-5;

/// Largest relative error between the recorded input gradient of `f` and
/// central differences over every input coordinate.
fn check_op(x: &Tensor, f: impl for<'a> Fn(&mut ComputationRecord<'a>, NodeId) -> NodeId) -> f64 {
    let eval = |x: &Tensor| {
        let mut rec = ComputationRecord::new();
        let id = rec.input(x.clone());
        let out = f(&mut rec, id);
        rec.value(out).item()
    };
    let mut rec = ComputationRecord::new();
    let id = rec.input(x.clone());
    let out = f(&mut rec, id);
    let grad = rec.input_gradient(out).unwrap();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let (mut plus, mut minus) = (x.clone(), x.clone());
        plus.data_mut()[i] += H;
        minus.data_mut()[i] -= H;
        worst = worst.max(rel_err(grad.data()[i], (eval(&plus) - eval(&minus)) / (2.0 * H)));
    }
    worst
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = rng_from_seed(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

/// A fixed random weighting so that every output coordinate matters.
fn weighted_sum(rec: &mut ComputationRecord<'_>, y: NodeId, seed: u64) -> NodeId {
    let w = random(rec.value(y).shape(), seed);
    let c = rec.constant(w);
    let prod = rec.mul(y, c).unwrap();
    rec.sum(prod)
}

#[test]
fn elementwise_ops_match_finite_differences() {
    let x = random(&[3, 4], 1);
    let cases: Vec<(&str, Box<dyn for<'a> Fn(&mut ComputationRecord<'a>, NodeId) -> NodeId>)> = vec![
        ("sigmoid", Box::new(|r, x| { let y = r.sigmoid(x); weighted_sum(r, y, 2) })),
        ("log_sigmoid", Box::new(|r, x| { let y = r.log_sigmoid(x); weighted_sum(r, y, 3) })),
        ("softplus", Box::new(|r, x| { let y = r.softplus(x); weighted_sum(r, y, 4) })),
        ("leaky", Box::new(|r, x| { let y = r.leaky_relu(x, 0.2); weighted_sum(r, y, 5) })),
        ("softmax", Box::new(|r, x| { let y = r.softmax(x).unwrap(); weighted_sum(r, y, 6) })),
        ("log_softmax", Box::new(|r, x| { let y = r.log_softmax(x).unwrap(); weighted_sum(r, y, 7) })),
        ("log", Box::new(|r, x| { let s = r.sigmoid(x); let y = r.log(s).unwrap(); weighted_sum(r, y, 8) })),
        ("gather", Box::new(|r, x| { let y = r.gather(x, vec![0, 3, 1]).unwrap(); weighted_sum(r, y, 9) })),
        ("slice", Box::new(|r, x| { let y = r.slice_rows(x, 1, 2).unwrap(); weighted_sum(r, y, 10) })),
        ("mul-self", Box::new(|r, x| { let y = r.mul(x, x).unwrap(); weighted_sum(r, y, 11) })),
    ];
    for (name, f) in cases {
        let e = check_op(&x, f);
        assert!(e < 1e-6, "{name}: {e}");
    }
}

#[test]
fn conv_and_affine_input_gradients_match_finite_differences() {
    let w = random(&[3, 2, 5, 5], 20);
    let b = random(&[3], 21);
    let x = random(&[2, 2, 7, 7], 22);
    let geom = ConvGeometry { kernel: 5, stride: 2, padding: 2 };
    let e = check_op(&x, |r, x| {
        let (wc, bc) = (r.constant(w.clone()), r.constant(b.clone()));
        let y = r.conv2d(x, wc, bc, geom).unwrap();
        weighted_sum(r, y, 23)
    });
    assert!(e < 1e-6, "conv: {e}");

    let wa = random(&[4, 5], 24);
    let ba = random(&[4], 25);
    let e = check_op(&random(&[3, 5], 26), |r, x| {
        let (wc, bc) = (r.constant(wa.clone()), r.constant(ba.clone()));
        let y = r.affine(x, wc, bc).unwrap();
        weighted_sum(r, y, 27)
    });
    assert!(e < 1e-6, "affine: {e}");
}

#[test]
fn mnist_shaped_network_passes_the_check() {
    let arch = Architecture::mnist([2, 2, 3, 3], 0.2, 10);
    let r = gradient_check(&arch, CheckLoss::Classification, 5).unwrap();
    assert!(r.max_rel_err_params < 1e-4 && r.max_rel_err_input < 1e-4, "{r:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn random_networks_have_correct_gradients(
        conv in proptest::bool::ANY,
        width in 2usize..6,
        heads in 1usize..4,
        slope in 0.05f64..0.5,
        quadratic in proptest::bool::ANY,
        seed in 0u64..10_000,
    ) {
        let arch = if conv {
            Architecture {
                input_shape: vec![1, 6, 6],
                layers: vec![
                    LayerSpec::conv(width),
                    LayerSpec::LeakyRelu { slope },
                    LayerSpec::Flatten,
                    LayerSpec::Dense { units: width },
                    LayerSpec::LeakyRelu { slope },
                ],
                heads,
            }
        } else {
            Architecture::mlp(3, &[width, width], slope, heads)
        };
        let loss = if quadratic { CheckLoss::Quadratic } else { CheckLoss::Classification };
        let r = gradient_check(&arch, loss, seed).unwrap();
        prop_assert!(r.max_rel_err_params < 1e-4, "{:?}", r);
        prop_assert!(r.max_rel_err_input < 1e-4, "{:?}", r);
    }
}
