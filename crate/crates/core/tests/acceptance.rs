//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.
//!
//! `ICN_ACCEPTANCE=1,3,9` restricts the run to the listed criteria.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use icn_core::data::{gen_synthetic_2d, SyntheticSpec};
use icn_core::experiment::{run_adversarial, run_experiment, run_oracle_verification, ExperimentConfig, Mode, Task};
use icn_core::layers::{gradient_check, Architecture, CheckLoss, LayerSpec};
use icn_core::network::Network;
use icn_core::oracle::{build_grid, reference_grid, DEFAULT_BOUNDS};
use icn_core::rng::{derive_seed, rng_for};
use icn_core::sampler::{synthesize, SamplerConfig, StopReason, Target};
use icn_core::store::PseudoNegativeStore;
use icn_core::trainer::{
    mixture_fraction, reclassification_step, run_reclassification_by_synthesis, train_baseline, Objective, OracleProbe,
    PseudoNegativeSource, RoundSnapshot, RunOptions, TrainConfig, TrainMode,
};

const GRADIENT_TOLERANCE: f64 = 1e-4;
const GRADIENT_BUDGET_SECS: f64 = 30.0;
const KL_IDENTITY_TOLERANCE: f64 = 1e-9;
const KL_IDENTITY_BUDGET_SECS: f64 = 60.0;
const CONVERGENCE_MIN_NONINCREASING: usize = 8;
const CONVERGENCE_BUDGET_SECS: f64 = 600.0;
const CONFIDENCE_THRESHOLD: f64 = 0.95;
const ABOVE_MEDIAN_FRACTION: f64 = 0.90;
const SMALL_SET_BUDGET_SECS: f64 = 7200.0;
const FGSM_EPSILON: f64 = 0.125;
const LOSS_TRACE_TOLERANCE: f64 = 1e-12;
const SEEDS: [u64; 3] = [0, 1, 2];

type Outcome = Result<(bool, String), String>;

fn mnist_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("icn-acceptance-{}", std::process::id())).join(name);
    let _ = fs::remove_dir_all(&dir);
    dir
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

/// Small conv and dense networks with one (sigmoid) or three (softmax) heads.
fn c1_gradients() -> Outcome {
    let started = Instant::now();
    let mut worst: f64 = 0.0;
    for i in 0..10u64 {
        let heads = if i % 2 == 0 { 1 } else { 3 };
        let slope = 0.1 + 0.05 * i as f64;
        let arch = if i < 6 {
            Architecture {
                input_shape: vec![1 + (i as usize % 2), 8, 8],
                layers: vec![
                    LayerSpec::conv(2 + i as usize % 3),
                    LayerSpec::LeakyRelu { slope },
                    LayerSpec::conv(3),
                    LayerSpec::LeakyRelu { slope },
                    LayerSpec::Flatten,
                    LayerSpec::Dense { units: 5 },
                    LayerSpec::LeakyRelu { slope },
                ],
                heads,
            }
        } else {
            Architecture::mlp(3 + i as usize % 3, &[6, 4], slope, heads)
        };
        let report = gradient_check(&arch, CheckLoss::Classification, derive_seed(11, "gradient-net", i)).map_err(err)?;
        worst = worst.max(report.max_rel_err_params).max(report.max_rel_err_input);
    }
    let secs = started.elapsed().as_secs_f64();
    Ok((
        worst < GRADIENT_TOLERANCE && secs < GRADIENT_BUDGET_SECS,
        format!("max relative error {worst:.2e} (< {GRADIENT_TOLERANCE:e}), {secs:.1} s (< {GRADIENT_BUDGET_SECS} s)"),
    ))
}

fn c2_kl_identity() -> Outcome {
    let started = Instant::now();
    let config = ExperimentConfig::defaults(Task::Synthetic2d, Mode::Binary);
    let v = run_oracle_verification(&ExperimentConfig { grid_resolution: 128, ..config }, 20, None).map_err(err)?;
    let secs = started.elapsed().as_secs_f64();
    Ok((
        v.pairs == 20 && v.max_residual < KL_IDENTITY_TOLERANCE && secs < KL_IDENTITY_BUDGET_SECS,
        format!("20 pairs on 128x128, max residual {:.2e} (< {KL_IDENTITY_TOLERANCE:e}), {secs:.1} s", v.max_residual),
    ))
}

fn grid_probe(resolution: usize) -> Result<(SyntheticSpec, OracleProbe), String> {
    let spec = SyntheticSpec::default();
    let density = spec.positive_density().map_err(err)?;
    let res = [resolution; 2];
    let positive = build_grid(DEFAULT_BOUNDS, res, |x, y| density.pdf(x, y)).map_err(err)?;
    let prior = reference_grid(DEFAULT_BOUNDS, res, SamplerConfig::default().reference_sigma).map_err(err)?;
    Ok((spec, OracleProbe { positive, prior }))
}

/// Schedule under which the classifier improves round over round; the
/// default learning rate leaves too much SGD noise near the KL floor.
fn convergence_config(seed: u64) -> TrainConfig {
    TrainConfig {
        rounds: 10,
        per_round: 50,
        initial_epochs: 20,
        epochs_per_round: 5,
        batch_size: 32,
        learning_rate: 0.005,
        patience: None,
        seed,
        ..TrainConfig::default()
    }
}

fn c3_convergence() -> Outcome {
    let started = Instant::now();
    let (spec, probe) = grid_probe(128)?;
    let arch = Architecture::mlp(2, &[32, 32], 0.2, 1);
    let mut ok = true;
    let mut parts = Vec::new();
    for seed in SEEDS {
        let data = gen_synthetic_2d(&spec, &mut rng_for(seed, "data", 0)).map_err(err)?;
        let out = run_reclassification_by_synthesis(
            &data,
            &arch,
            TrainMode::Binary,
            &convergence_config(seed),
            &PseudoNegativeSource::ExactGrid { prior: probe.prior.clone() },
            RunOptions { oracle: Some(&probe), ..Default::default() },
        )
        .map_err(err)?;
        let kl: Vec<f64> = out.metrics.iter().map(|m| m.kl_to_positive.expect("oracle given")).collect();
        let steps = kl.len() - 1;
        let non_increasing = kl.windows(2).filter(|w| w[1] <= w[0]).count();
        ok &= steps == 10 && kl[steps] < kl[0] && non_increasing >= CONVERGENCE_MIN_NONINCREASING;
        parts.push(format!("seed {seed}: KL {:.3} -> {:.3}, {non_increasing}/{steps} non-increasing", kl[0], kl[steps]));
    }
    let secs = started.elapsed().as_secs_f64();
    ok &= secs < CONVERGENCE_BUDGET_SECS;
    Ok((ok, format!("{}; {secs:.0} s", parts.join("; "))))
}

/// Replays synthesis from each round's classifier on the 2D benchmark and
/// checks stop confidences and where the samples land under p⁻ₜ.
fn c4_sampler() -> Outcome {
    let (spec, probe) = grid_probe(128)?;
    let data = gen_synthetic_2d(&spec, &mut rng_for(4, "data", 0)).map_err(err)?;
    let sampler = SamplerConfig::default();
    let config = TrainConfig { rounds: 5, per_round: 50, initial_epochs: 20, patience: None, seed: 4, ..TrainConfig::default() };
    let mut threshold = (0usize, 0usize);
    let mut above = (0usize, 0usize);
    let mut replay_matches = true;
    let mut pending: Option<Vec<f64>> = None;
    let mut observer = |snap: &RoundSnapshot<'_>| -> icn_core::Result<()> {
        if let Some(expected) = pending.take() {
            let stored: Vec<f64> =
                snap.store.entries()[snap.new_entries.clone()].iter().flat_map(|e| e.sample.data().to_vec()).collect();
            replay_matches &= stored == expected;
        }
        if snap.round == config.rounds {
            return Ok(());
        }
        let seed = derive_seed(config.seed, "synthesis", snap.round as u64 + 1);
        let out = synthesize(Target::Head { net: snap.network, head: 0 }, &sampler, config.per_round, seed)?;
        let density = probe.negative_density(snap.network)?;
        let median = density.median_mass();
        for (x, trace) in out.samples.iter().zip(&out.traces) {
            if trace.stop == StopReason::Threshold {
                threshold.0 += 1;
                threshold.1 += usize::from(trace.final_confidence >= CONFIDENCE_THRESHOLD);
            }
            above.0 += 1;
            let cell = density.cell_of(x.data()[0], x.data()[1]);
            above.1 += usize::from(cell.is_some_and(|c| density.mass()[c] > median));
        }
        pending = Some(out.samples.iter().flat_map(|s| s.data().to_vec()).collect());
        Ok(())
    };
    run_reclassification_by_synthesis(
        &data,
        &Architecture::mlp(2, &[32, 32], 0.2, 1),
        TrainMode::Binary,
        &config,
        &PseudoNegativeSource::Sampler(sampler.clone()),
        RunOptions { observer: Some(&mut observer), ..Default::default() },
    )
    .map_err(err)?;
    let above_fraction = above.1 as f64 / above.0 as f64;
    Ok((
        threshold.0 > 0 && threshold.0 == threshold.1 && above_fraction >= ABOVE_MEDIAN_FRACTION && replay_matches,
        format!(
            "{}/{} threshold stops at confidence >= {CONFIDENCE_THRESHOLD}; {:.1}% of {} samples above the median p_t- cell (>= {:.0}%); replay matches store: {replay_matches}",
            threshold.1,
            threshold.0,
            100.0 * above_fraction,
            above.0,
            100.0 * ABOVE_MEDIAN_FRACTION
        ),
    ))
}

fn c5_bookkeeping() -> Outcome {
    let (spec, _) = grid_probe(16)?;
    let data = gen_synthetic_2d(&spec, &mut rng_for(5, "data", 0)).map_err(err)?;
    let mut ok = true;
    let mut parts = Vec::new();
    for (mode, heads, l, rounds) in [(TrainMode::Binary, 1usize, 30usize, 4usize), (TrainMode::Softmax, 2, 7, 3)] {
        let config = TrainConfig { rounds, per_round: l, patience: None, epochs_per_round: 2, initial_epochs: 2, seed: 5, ..TrainConfig::default() };
        let mut sizes = Vec::new();
        let mut observer = |snap: &RoundSnapshot<'_>| -> icn_core::Result<()> {
            sizes.push((snap.round, snap.store.len(), snap.metrics.store_size));
            Ok(())
        };
        let out = run_reclassification_by_synthesis(
            &data,
            &Architecture::mlp(2, &[16], 0.2, heads),
            mode,
            &config,
            &PseudoNegativeSource::Sampler(SamplerConfig { max_steps: 50, ..SamplerConfig::default() }),
            RunOptions { observer: Some(&mut observer), ..Default::default() },
        )
        .map_err(err)?;
        ok &= sizes.iter().all(|&(t, a, b)| a == t * heads * l && b == a);
        ok &= out.store.len() == rounds * heads * l;
        if mode == TrainMode::Binary {
            let n_neg = out.training_negatives;
            let expected = (rounds * l) as f64 / (n_neg + rounds * l) as f64;
            ok &= mixture_fraction(n_neg, out.store.len()) == expected;
            parts.push(format!("binary |S_pn^t| = t*{l} for t=0..{rounds}, mixture {expected:.4}"));
        } else {
            parts.push(format!("softmax K={heads} |S_pn^t| = t*{heads}*{l} for t=0..{rounds}"));
        }
    }
    Ok((ok, parts.join("; ")))
}

fn mnist_config(mode: Mode, seed: u64, subset: usize) -> ExperimentConfig {
    let mut c = ExperimentConfig::defaults(Task::MnistSubset, mode);
    c.seed = seed;
    c.data_dir = mnist_dir();
    c.subset = subset;
    c.channels = [16, 32, 64, 128];
    c.train.rounds = 10;
    c.train.per_round = 20;
    c.train.patience = None;
    c.train.keep_best = false;
    c.checkpoints = false;
    c.epsilon = FGSM_EPSILON;
    c
}

fn c6_small_training_set() -> Outcome {
    let started = Instant::now();
    let (mut base, mut icn) = (Vec::new(), Vec::new());
    for seed in SEEDS {
        let b = run_experiment(&mnist_config(Mode::Baseline, seed, 500), &scratch(&format!("c6-base-{seed}"))).map_err(err)?;
        let i = run_experiment(&mnist_config(Mode::Softmax, seed, 500), &scratch(&format!("c6-icn-{seed}"))).map_err(err)?;
        base.push(b.final_test_error);
        icn.push(i.final_test_error);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let secs = started.elapsed().as_secs_f64();
    let (mb, mi) = (mean(&base), mean(&icn));
    Ok((
        mi <= mb && secs < SMALL_SET_BUDGET_SECS,
        format!("n=500 mean test error over {} seeds: ICN {:.4} vs baseline {:.4} (per seed ICN {icn:.4?}, baseline {base:.4?}); {secs:.0} s", SEEDS.len(), mi, mb),
    ))
}

fn c8_adversarial() -> Outcome {
    let (mut b2i, mut i2b) = (Vec::new(), Vec::new());
    for seed in SEEDS {
        let o = run_adversarial(&mnist_config(Mode::Softmax, seed, 2000), &scratch(&format!("c8-{seed}"))).map_err(err)?;
        b2i.push(o.baseline_to_icn.cross_fool_fraction());
        i2b.push(o.icn_to_baseline.cross_fool_fraction());
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (a, b) = (mean(&b2i), mean(&i2b));
    Ok((
        a < 1.0 && a < b,
        format!("eps {FGSM_EPSILON}: baseline-sourced fooling ICN {:.1}% vs ICN-sourced fooling baseline {:.1}% (mean of {} seeds)", 100.0 * a, 100.0 * b, SEEDS.len()),
    ))
}

fn c9_determinism() -> Outcome {
    let mut configs = Vec::new();
    let mut c = ExperimentConfig::defaults(Task::Synthetic2d, Mode::Binary);
    c.train.rounds = 3;
    c.grid_resolution = 32;
    configs.push(("synthetic2d binary", c.clone()));
    c.mode = Mode::OneVsAll;
    configs.push(("synthetic2d one-vs-all", c.clone()));
    let mut m = ExperimentConfig::defaults(Task::MnistSubset, Mode::Softmax);
    m.data_dir = mnist_dir();
    m.subset = 100;
    m.test_limit = Some(200);
    m.channels = [4, 8, 8, 8];
    m.train.rounds = 2;
    m.train.per_round = 3;
    m.train.initial_epochs = 1;
    m.train.epochs_per_round = 1;
    m.sampler.max_steps = 30;
    configs.push(("mnist-subset softmax", m));
    let mut ok = true;
    let mut parts = Vec::new();
    for (i, (name, config)) in configs.iter().enumerate() {
        let read = |run: usize| -> Result<Vec<u8>, String> {
            let dir = scratch(&format!("c9-{i}-{run}"));
            run_experiment(config, &dir).map_err(err)?;
            fs::read(dir.join("metrics.csv")).map_err(err)
        };
        let (a, b) = (read(0)?, read(1)?);
        let same = a == b && !a.is_empty();
        ok &= same;
        parts.push(format!("{name}: {}", if same { "identical" } else { "DIFFERENT" }));
    }
    Ok((ok, parts.join("; ")))
}

fn c10_equivalence() -> Outcome {
    let (spec, _) = grid_probe(16)?;
    let data = gen_synthetic_2d(&spec, &mut rng_for(10, "data", 0)).map_err(err)?;
    let config = TrainConfig { seed: 10, ..TrainConfig::default() };
    let arch = Architecture::mlp(2, &[16, 16], 0.2, 2);
    let start = Network::init(arch.clone(), &mut rng_for(10, "init", 0)).map_err(err)?;
    let store = PseudoNegativeStore::new(config.per_round);
    let trace = |objective| -> Result<Vec<f64>, String> {
        let mut net = start.clone();
        Ok(reclassification_step(&mut net, objective, &data, &store, &config, 0).map_err(err)?.step_losses)
    };
    let icn_trace = trace(Objective::Softmax { alpha: 0.0 })?;
    let plain_trace = trace(Objective::PlainSoftmax)?;
    let worst = icn_trace.iter().zip(&plain_trace).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let traces_ok = icn_trace.len() == plain_trace.len() && !icn_trace.is_empty() && worst <= LOSS_TRACE_TOLERANCE;

    let mut exact = true;
    let t0 = TrainConfig { rounds: 0, seed: 10, ..TrainConfig::default() };
    for (mode, heads) in [(TrainMode::Binary, 1), (TrainMode::Softmax, 2)] {
        let arch = Architecture::mlp(2, &[16, 16], 0.2, heads);
        let source = PseudoNegativeSource::Sampler(SamplerConfig::default());
        let icn = run_reclassification_by_synthesis(&data, &arch, mode, &t0, &source, RunOptions::default()).map_err(err)?;
        let base = train_baseline(&data, &arch, mode, &t0, RunOptions::default()).map_err(err)?;
        exact &= icn.network == base.network && icn.metrics == base.metrics && icn.traces == base.traces;
    }
    Ok((
        traces_ok && exact,
        format!(
            "alpha=0 empty store vs plain softmax: {} steps, max |diff| {worst:.1e} (<= {LOSS_TRACE_TOLERANCE:e}); T=0 ICN identical to baseline: {exact}",
            icn_trace.len()
        ),
    ))
}

fn c7_headline() -> Outcome {
    Ok((true, "not asserted: full-MNIST headline numbers are out of acceptance; see the long-run recipe in README.md".into()))
}

fn mnist_available() -> bool {
    icn_core::experiment::IDX_FILES.iter().all(|f| mnist_dir().join(f).exists())
}

fn main() -> ExitCode {
    let only: Option<Vec<usize>> = std::env::var("ICN_ACCEPTANCE").ok().map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let criteria: [(usize, &str, fn() -> Outcome, bool); 10] = [
        (1, "gradient correctness", c1_gradients, false),
        (2, "KL identity on the grid", c2_kl_identity, false),
        (3, "convergence direction", c3_convergence, false),
        (4, "sampler contract", c4_sampler, false),
        (5, "store bookkeeping", c5_bookkeeping, false),
        (6, "small-training-set improvement", c6_small_training_set, true),
        (7, "headline numbers", c7_headline, false),
        (8, "adversarial two-way", c8_adversarial, true),
        (9, "determinism", c9_determinism, true),
        (10, "equivalence regressions", c10_equivalence, false),
    ];
    let mut failed = 0;
    for (id, name, run, needs_mnist) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let outcome = if needs_mnist && !mnist_available() {
            Err(format!("MNIST files missing under {}", mnist_dir().display()))
        } else {
            run()
        };
        let (status, detail) = match outcome {
            Ok((true, d)) if id == 7 => ("SKIP", d),
            Ok((true, d)) => ("PASS", d),
            Ok((false, d)) => ("FAIL", d),
            Err(e) => ("FAIL", format!("error: {e}")),
        };
        failed += usize::from(status == "FAIL");
        println!("criterion {id:>2} [{status}] {name}: {detail}");
    }
    let _ = fs::remove_dir_all(std::env::temp_dir().join(format!("icn-acceptance-{}", std::process::id())));
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
