//! End-to-end acceptance suite.
//!
//! Each test is one release gate; together they walk the full pipeline:
//! gradient correctness, sampler statistics, chaos diagnostics, energy
//! separation, purification dynamics, and the defended-training endpoints.
//! The heavyweight fixtures (trained energy models on the shared toy
//! dataset) are built once and reused across gates.

use std::sync::OnceLock;

use purekit::data::{self, ToyConfig};
use purekit::io;
use purekit::pool::ThreadPool;
use purekit_core::check::{fd_grad_checked, fd_param_coord, max_rel_err_masked, RefNet};
use purekit_core::defense::{
    natural_accuracy, param_divergence, predict, psr_triggered, psr_triggerless,
    train_classifier, train_defended_classifier, ClassifierConfig,
};
use purekit_core::ebm::{train, NoObserver, TrainConfig};
use purekit_core::langevin::{
    lyapunov_exponent, purify, trajectory_distances, ChainState, LangevinConfig,
};
use purekit_core::net::{
    classifier_backward, energy_param_grad, EnergyFn, Model, NetworkParams, NetworkSpec,
    Quadratic, ZeroEnergy,
};
use purekit_core::poison::{
    apply_trigger, build_poisoned_dataset, craft_trigger, PoisonKind, PoisonSpec, DEFAULT_XI,
};
use purekit_core::rng::Stream;
use purekit_core::tensor::ImageTensor;

// ── Shared fixture ───────────────────────────────────────────────────────────

/// Toy dataset, trained energy model, crafted trigger, and victim recipe
/// shared by the energy-separation, trajectory, chaos, and defense gates.
struct Fixture {
    train_images: Vec<ImageTensor>,
    train_labels: Vec<u8>,
    test_images: Vec<ImageTensor>,
    test_labels: Vec<u8>,
    espec: NetworkSpec,
    cspec: NetworkSpec,
    victim: ClassifierConfig,
    ebm: Model,
    crafted: ImageTensor,
}

/// Energy-model training schedule used by both fixture models.
fn ebm_schedule() -> TrainConfig {
    TrainConfig {
        steps: 5000,
        batch_size: 8,
        langevin_steps_per_iter: 20,
        sgd_lr: 5e-3,
        seed: 0,
        ..Default::default()
    }
}

fn toy_config() -> ToyConfig {
    ToyConfig {
        classes: 2,
        per_class_train: 128,
        per_class_test: 32,
        height: 8,
        width: 8,
        margin: 0.05,
        noise: 0.02,
        ..Default::default()
    }
}

fn victim_config() -> ClassifierConfig {
    ClassifierConfig {
        epochs: 40,
        batch_size: 16,
        lr: 0.05,
        lr_decay_epochs: vec![25, 35],
        ..Default::default()
    }
}

/// The supplied backdoor pattern for the end-to-end gates: constant within
/// each 4x4 quadrant so it survives both classifier poolings at 3/4
/// amplitude, with per-channel quadrant signs summing to zero so it is
/// orthogonal to every global color shift in pooled space. A model trained
/// without it acquires no weight along it, while a victim trained on
/// patched rows learns it as a shortcut.
fn quadrant_trigger(xi: f32) -> ImageTensor {
    let signs: [[f32; 4]; 3] = [
        [1.0, -1.0, -1.0, 1.0],
        [-1.0, 1.0, -1.0, 1.0],
        [1.0, 1.0, -1.0, -1.0],
    ];
    let mut rho = ImageTensor::zeros(3, 8, 8);
    for c in 0..3 {
        for y in 0..8 {
            for x in 0..8 {
                rho.data[c * 64 + y * 8 + x] = xi * signs[c][(y / 4) * 2 + x / 4];
            }
        }
    }
    rho
}

/// Attack fixture: half the target-class rows carry the quadrant pattern,
/// labels untouched.
fn attack_spec(rho: &ImageTensor) -> PoisonSpec {
    PoisonSpec {
        kind: PoisonKind::Triggered,
        xi: 0.12,
        alpha: 0.5,
        target_class: 0,
        adv_label: 0,
        trigger: Some(rho.clone()),
    }
}

fn fixture() -> &'static Fixture {
    static FIX: OnceLock<Fixture> = OnceLock::new();
    FIX.get_or_init(|| {
        let pool = ThreadPool::new(1);
        let (train_images, train_labels, test_images, test_labels) =
            data::generate(&toy_config()).unwrap();
        let espec = NetworkSpec::energy_default();
        let cspec = NetworkSpec::classifier_default(8, 8, 2);

        let (params, _bank) =
            train(&espec, &train_images, &ebm_schedule(), 0, &pool, &mut NoObserver).unwrap();
        let ebm = Model::new(espec.clone(), params).unwrap();

        // Trigger crafted against an independently trained surrogate.
        let scfg = ClassifierConfig { seed: 7, ..victim_config() };
        let surrogate =
            train_classifier(&cspec, &train_images, &train_labels, &scfg, &pool).unwrap();
        let class0: Vec<ImageTensor> = train_images
            .iter()
            .zip(&train_labels)
            .filter(|(_, &l)| l == 0)
            .map(|(x, _)| x.clone())
            .collect();
        let crafted = craft_trigger(
            &cspec,
            &surrogate,
            &class0,
            0,
            DEFAULT_XI,
            300,
            DEFAULT_XI / 10.0,
            0,
        )
        .unwrap();

        Fixture {
            train_images,
            train_labels,
            test_images,
            test_labels,
            espec,
            cspec,
            victim: victim_config(),
            ebm,
            crafted,
        }
    })
}

/// Energy model trained on a fully patched dataset (every image carries the
/// quadrant pattern); the stress fixture for the poisoned-purifier gate.
fn triggered_ebm() -> &'static Model {
    static EBM2: OnceLock<Model> = OnceLock::new();
    EBM2.get_or_init(|| {
        let fix = fixture();
        let pool = ThreadPool::new(1);
        let rho = quadrant_trigger(0.12);
        let patched: Vec<ImageTensor> =
            fix.train_images.iter().map(|x| apply_trigger(x, &rho).unwrap()).collect();
        let (params, _bank) =
            train(&fix.espec, &patched, &ebm_schedule(), 0, &pool, &mut NoObserver).unwrap();
        Model::new(fix.espec.clone(), params).unwrap()
    })
}

fn random_image(seed: u64, c: usize, h: usize, w: usize) -> ImageTensor {
    let mut x = ImageTensor::zeros(c, h, w);
    Stream::named(seed, "acceptance-image", 0).fill_uniform(&mut x.data);
    x
}

// ── Criterion 1: analytic gradients against central finite differences ──────

#[test]
fn crit01_gradients_match_finite_differences() {
    const H: f64 = 1e-3;
    let mut cases = 0usize;
    let mut worst = 0.0f64;

    // Energy input gradients on four random nets and images.
    let espec = NetworkSpec::energy_default();
    for seed in 0..4u64 {
        let params = NetworkParams::init(&espec, seed);
        let refnet = RefNet::new(&espec, &params);
        let x = random_image(seed, 3, 8, 8);
        let x64: Vec<f64> = x.data.iter().map(|&v| v as f64).collect();
        let (fd, trust) =
            fd_grad_checked(|v| refnet.energy_obj_tagged(v, (3, 8, 8)), &x64, H);
        let model = Model::new(espec.clone(), params).unwrap();
        let analytic = purekit_core::net::energy_input_grad(&model.spec, &model.params, &x)
            .unwrap();
        let (err, kept) = max_rel_err_masked(&analytic.data, &fd, &trust);
        assert!(kept > 0.8, "case {seed}: only {kept:.2} of coordinates trusted");
        worst = worst.max(err);
        cases += 1;
    }

    // Classifier cross-entropy input gradients.
    let cspec = NetworkSpec::classifier_default(8, 8, 3);
    for seed in 0..4u64 {
        let params = NetworkParams::init(&cspec, seed + 10);
        let refnet = RefNet::new(&cspec, &params);
        let x = random_image(seed + 10, 3, 8, 8);
        let label = (seed % 3) as usize;
        let x64: Vec<f64> = x.data.iter().map(|&v| v as f64).collect();
        let (fd, trust) =
            fd_grad_checked(|v| refnet.ce_obj_tagged(v, (3, 8, 8), label), &x64, H);
        let (_, analytic) =
            purekit_core::net::classifier_input_grad(&cspec, &params, &x, label).unwrap();
        let (err, kept) = max_rel_err_masked(&analytic.data, &fd, &trust);
        assert!(kept > 0.8, "ce case {seed}: only {kept:.2} of coordinates trusted");
        worst = worst.max(err);
        cases += 1;
    }

    // Parameter gradients are probed on compact networks: a weight probe
    // perturbs every downstream activation at once, so a full-size net
    // almost always straddles some leaky-relu kink and the quotient means
    // nothing. The layer kernels are identical; only the counts shrink.
    use purekit_core::net::{Layer, LEAKY_SLOPE};
    let tiny_energy = NetworkSpec {
        layers: vec![
            Layer::Conv { k: 3, in_ch: 2, out_ch: 4, stride: 2, pad: 1 },
            Layer::LeakyRelu { slope: LEAKY_SLOPE },
            Layer::GlobalSum,
            Layer::Dense { input: 4, output: 1 },
        ],
    };
    for seed in 0..2u64 {
        let params = NetworkParams::init(&tiny_energy, 21 + seed);
        let x = random_image(21 + seed, 2, 6, 6);
        let x64: Vec<f64> = x.data.iter().map(|&v| v as f64).collect();
        let analytic =
            energy_param_grad(&tiny_energy, &params, core::slice::from_ref(&x)).unwrap();
        let mut refnet = RefNet::new(&tiny_energy, &params);
        let mut usable = 0usize;
        let mut probed = 0usize;
        for (entry, e) in analytic.entries.iter().enumerate() {
            let len = e.tensor.data.len();
            let mut ad = Vec::new();
            let mut fd = Vec::new();
            let mut trust = Vec::new();
            for coord in 0..len {
                let probe = fd_param_coord(&mut refnet, entry, coord, H, |n| {
                    n.energy_obj_tagged(&x64, (2, 6, 6))
                });
                ad.push(e.tensor.data[coord]);
                fd.push(probe.unwrap_or(0.0));
                trust.push(probe.is_some());
            }
            usable += trust.iter().filter(|&&t| t).count();
            probed += len;
            let (err, _) = max_rel_err_masked(&ad, &fd, &trust);
            worst = worst.max(err);
            cases += 1;
        }
        assert!(
            usable * 5 > probed * 4,
            "energy net {seed}: only {usable}/{probed} probes usable"
        );
    }

    // Classifier parameter gradients through the cross-entropy loss.
    let tiny_classifier = NetworkSpec {
        layers: vec![
            Layer::Conv { k: 3, in_ch: 2, out_ch: 4, stride: 1, pad: 1 },
            Layer::LeakyRelu { slope: LEAKY_SLOPE },
            Layer::AvgPool { k: 2 },
            Layer::Dense { input: 4 * 2 * 2, output: 3 },
        ],
    };
    for seed in 0..2u64 {
        let params = NetworkParams::init(&tiny_classifier, 31 + seed);
        let x = random_image(31 + seed, 2, 4, 4);
        let label = seed as usize % 3;
        let (_, analytic) = classifier_backward(&tiny_classifier, &params, &x, label).unwrap();
        let x64: Vec<f64> = x.data.iter().map(|&v| v as f64).collect();
        let mut refnet = RefNet::new(&tiny_classifier, &params);
        let mut usable = 0usize;
        let mut probed = 0usize;
        for (entry, e) in analytic.entries.iter().enumerate() {
            let len = e.tensor.data.len();
            let mut ad = Vec::new();
            let mut fd = Vec::new();
            let mut trust = Vec::new();
            for coord in 0..len {
                let probe = fd_param_coord(&mut refnet, entry, coord, H, |n| {
                    n.ce_obj_tagged(&x64, (2, 4, 4), label)
                });
                ad.push(e.tensor.data[coord]);
                fd.push(probe.unwrap_or(0.0));
                trust.push(probe.is_some());
            }
            usable += trust.iter().filter(|&&t| t).count();
            probed += len;
            let (err, _) = max_rel_err_masked(&ad, &fd, &trust);
            worst = worst.max(err);
            cases += 1;
        }
        assert!(
            usable * 5 > probed * 4,
            "classifier net {seed}: only {usable}/{probed} probes usable"
        );
    }

    assert!(cases >= 20, "only {cases} gradient cases");
    assert!(worst < 1e-3, "worst relative error {worst:.3e} over {cases} cases");
    println!("criterion 1: PASS ({cases} cases, worst rel err {worst:.3e})");
}

// ── Criterion 2: sampler stationarity on the quadratic model ────────────────

#[test]
fn crit02_langevin_stationarity_on_quadratic() {
    // x' = (1 - a dt) x + eta sqrt(2 dt) eps has stationary variance
    // 2 dt / (1 - (1 - a dt)^2) at a = eta = 1; the time average over a
    // long chain must land within 3% of it.
    let cfg = LangevinConfig { steps: 0, step_size: 0.01, noise_scale: 1.0, clamp: None };
    let model = Quadratic { a: 1.0 };
    let total = 100_000u64;
    let burn = 10_000u64;
    let mut chain = ChainState::new(
        ImageTensor::zeros(2, 4, 4),
        Stream::named(2, "stationarity", 0),
    );
    let mut acc = 0.0f64;
    let mut n = 0u64;
    for t in 0..total {
        chain.advance(&model, &cfg).unwrap();
        if t >= burn {
            for &v in &chain.x.data {
                acc += (v as f64) * (v as f64);
            }
            n += chain.x.data.len() as u64;
        }
    }
    let measured = acc / n as f64;
    let dt = 0.01f64;
    let target = 2.0 * dt / (1.0 - (1.0 - dt) * (1.0 - dt));
    let rel = (measured - target).abs() / target;
    assert!(
        rel < 0.03,
        "variance {measured:.5} vs stationary {target:.5} ({:.1}% off)",
        rel * 100.0
    );
    println!(
        "criterion 2: PASS (variance {measured:.5}, stationary {target:.5}, {:.2}% off)",
        rel * 100.0
    );
}

// ── Criterion 3: Lyapunov exponents of analytic models ──────────────────────

#[test]
fn crit03_lyapunov_matches_analytic_models() {
    let cfg = LangevinConfig { steps: 0, step_size: 0.01, noise_scale: 1.0, clamp: None };
    let x0 = random_image(3, 2, 4, 4);

    let lam = lyapunov_exponent(&Quadratic { a: 1.0 }, &x0, &cfg, 1000, 10, 3).unwrap();
    let predicted = (1.0f64 - 0.01).ln();
    assert!(
        (lam - predicted).abs() < 1e-3,
        "quadratic exponent {lam:.6} vs log(1 - dt a) = {predicted:.6}"
    );

    let lam0 = lyapunov_exponent(&ZeroEnergy, &x0, &cfg, 1000, 10, 4).unwrap();
    assert_eq!(lam0, 0.0, "zero-gradient model must give exactly zero");
    println!("criterion 3: PASS (quadratic {lam:.6} vs {predicted:.6}, zero model {lam0})");
}

// ── Criterion 4: trained model separates triggered energies ─────────────────

#[test]
fn crit04_energy_separates_triggered_images() {
    let fix = fixture();
    let diffs: Vec<f64> = fix
        .test_images
        .iter()
        .map(|x| {
            let patched = apply_trigger(x, &fix.crafted).unwrap();
            (fix.ebm.energy(&patched).unwrap() - fix.ebm.energy(x).unwrap()) as f64
        })
        .collect();
    let n = diffs.len();
    let mean = diffs.iter().sum::<f64>() / n as f64;

    // One-sided 99% bootstrap interval on the paired mean difference.
    let reps = 10_000usize;
    let mut stream = Stream::named(4, "acceptance-bootstrap", 0);
    let mut means = Vec::with_capacity(reps);
    for _ in 0..reps {
        let mut acc = 0.0f64;
        for _ in 0..n {
            acc += diffs[stream.below(n as u64) as usize];
        }
        means.push(acc / n as f64);
    }
    means.sort_by(f64::total_cmp);
    let lower = means[reps / 100];
    assert!(
        lower > 0.0,
        "mean diff {mean:.5}, bootstrap 1st percentile {lower:.5} does not exclude zero"
    );
    println!("criterion 4: PASS (mean energy lift {mean:.5}, 99% lower bound {lower:.5})");
}

// ── Criterion 5: purification trajectory crossover ──────────────────────────

#[test]
fn crit05_trajectory_crossover_window() {
    let fix = fixture();
    let cfg = LangevinConfig { steps: 600, ..Default::default() };
    let rec = trajectory_distances(&fix.test_images[0], &fix.crafted, &fix.ebm, &cfg, 1, 7)
        .unwrap();
    let t = rec.crossover.expect("no crossover within the horizon");
    assert!(
        (25..=600).contains(&t),
        "crossover at step {t}, outside [25, 600]"
    );
    let n = rec.steps.len();
    let amin = (0..n)
        .min_by(|&a, &b| rec.d_clean_poisonpure[a].total_cmp(&rec.d_clean_poisonpure[b]))
        .unwrap();
    assert!(amin > 0 && amin + 1 < n, "approach distance has no interior minimum");
    let exceed = (0..n).find(|&i| rec.d_clean_pure[i] > rec.d_clean_poisonpure[i]);
    if let Some(e) = exceed {
        assert!(
            amin <= e,
            "minimum at step {} only after the curves cross at step {}",
            rec.steps[amin],
            rec.steps[e]
        );
    }
    println!(
        "criterion 5: PASS (crossover at step {t}, closest approach at step {})",
        rec.steps[amin]
    );
}

// ── Criterion 6: noise-scale chaos transition ───────────────────────────────

#[test]
fn crit06_noise_scale_chaos_transition() {
    let fix = fixture();
    let lambda = |eta: f32| -> f64 {
        let cfg = LangevinConfig { steps: 0, step_size: 0.01, noise_scale: eta, clamp: None };
        let mut acc = 0.0f64;
        for c in 0..8usize {
            acc += lyapunov_exponent(
                &fix.ebm,
                &fix.train_images[c * 17],
                &cfg,
                2000,
                10,
                100 + c as u64,
            )
            .unwrap();
        }
        acc / 8.0
    };
    let low = lambda(0.1);
    let high = lambda(2.0);
    assert!(low <= 1e-3, "low-noise exponent {low:.5e} not contractive");
    assert!(high > 0.0, "high-noise exponent {high:.5e} not chaotic");
    println!("criterion 6: PASS (lambda(0.1) = {low:.4e}, lambda(2.0) = {high:.4e})");
}

// ── Criterion 7: end-to-end defense on the toy attack ───────────────────────

#[test]
fn crit07_end_to_end_defense() {
    let fix = fixture();
    let pool = ThreadPool::new(1);
    let rho = quadrant_trigger(0.12);
    let poisoned =
        build_poisoned_dataset(&fix.train_images, &fix.train_labels, &attack_spec(&rho), 0)
            .unwrap();
    let pcfg = LangevinConfig { steps: 150, ..Default::default() };

    let mut und_psr = 0.0f32;
    let mut def_psr = 0.0f32;
    let mut def_acc = 0.0f32;
    let mut clean_acc = 0.0f32;
    for seed in 0..3u64 {
        let cc = ClassifierConfig { seed, ..fix.victim.clone() };
        let und = train_classifier(&fix.cspec, &poisoned.images, &poisoned.labels, &cc, &pool)
            .unwrap();
        und_psr +=
            psr_triggered(&fix.cspec, &und, &fix.test_images, &fix.test_labels, &rho, 0)
                .unwrap()
                / 3.0;
        let clean =
            train_classifier(&fix.cspec, &fix.train_images, &fix.train_labels, &cc, &pool)
                .unwrap();
        clean_acc +=
            natural_accuracy(&fix.cspec, &clean, &fix.test_images, &fix.test_labels).unwrap()
                / 3.0;
        let def =
            train_defended_classifier(&fix.cspec, &poisoned, &fix.ebm, &pcfg, &cc, &pool)
                .unwrap();
        def_psr +=
            psr_triggered(&fix.cspec, &def, &fix.test_images, &fix.test_labels, &rho, 0)
                .unwrap()
                / 3.0;
        def_acc +=
            natural_accuracy(&fix.cspec, &def, &fix.test_images, &fix.test_labels).unwrap()
                / 3.0;
    }
    assert!(und_psr >= 0.5, "undefended poison success {und_psr:.3} below 0.5");
    assert!(
        def_psr <= und_psr / 5.0,
        "defended success {def_psr:.3} above a fifth of undefended {und_psr:.3}"
    );
    assert!(
        def_acc >= clean_acc - 0.05,
        "defended accuracy {def_acc:.3} more than 5 points under clean {clean_acc:.3}"
    );
    println!(
        "criterion 7: PASS (undefended {und_psr:.3}, defended {def_psr:.3}, \
         defended acc {def_acc:.3} vs clean {clean_acc:.3})"
    );
}

// ── Criterion 8: defense with a purifier trained on triggered data ──────────

#[test]
fn crit08_defense_with_triggered_purifier() {
    let fix = fixture();
    let ebm2 = triggered_ebm();
    let pool = ThreadPool::new(1);
    let rho = quadrant_trigger(0.12);
    let poisoned =
        build_poisoned_dataset(&fix.train_images, &fix.train_labels, &attack_spec(&rho), 0)
            .unwrap();
    let pcfg = LangevinConfig { steps: 150, ..Default::default() };

    let mut und_psr = 0.0f32;
    let mut def_psr = 0.0f32;
    for seed in 0..3u64 {
        let cc = ClassifierConfig { seed, ..fix.victim.clone() };
        let und = train_classifier(&fix.cspec, &poisoned.images, &poisoned.labels, &cc, &pool)
            .unwrap();
        und_psr +=
            psr_triggered(&fix.cspec, &und, &fix.test_images, &fix.test_labels, &rho, 0)
                .unwrap()
                / 3.0;
        let def = train_defended_classifier(&fix.cspec, &poisoned, ebm2, &pcfg, &cc, &pool)
            .unwrap();
        def_psr +=
            psr_triggered(&fix.cspec, &def, &fix.test_images, &fix.test_labels, &rho, 0)
                .unwrap()
                / 3.0;
    }
    assert!(und_psr >= 0.5, "undefended poison success {und_psr:.3} below 0.5");
    assert!(
        def_psr <= und_psr / 3.0,
        "defended success {def_psr:.3} above a third of undefended {und_psr:.3}"
    );
    println!(
        "criterion 8: PASS (undefended {und_psr:.3}, defended {def_psr:.3} with a \
         purifier trained on fully patched data)"
    );
}

// ── Criterion 9: metrics agree with brute force ─────────────────────────────

#[test]
fn crit09_metrics_match_brute_force() {
    let cfg = ToyConfig {
        classes: 3,
        per_class_train: 16,
        per_class_test: 10,
        height: 8,
        width: 8,
        margin: 0.2,
        ..Default::default()
    };
    let (_, _, tei, tel) = data::generate(&cfg).unwrap();
    assert!(tei.len() <= 100);
    let cspec = NetworkSpec::classifier_default(8, 8, 3);
    let params = NetworkParams::init(&cspec, 3);
    let rho = quadrant_trigger(0.1);

    // Triggered success rate.
    let fast = psr_triggered(&cspec, &params, &tei, &tel, &rho, 1).unwrap();
    let mut hits = 0usize;
    let mut total = 0usize;
    for (x, &y) in tei.iter().zip(&tel) {
        if y == 1 {
            continue;
        }
        total += 1;
        let patched = apply_trigger(x, &rho).unwrap();
        if predict(&cspec, &params, &patched).unwrap() == 1 {
            hits += 1;
        }
    }
    assert_eq!(fast, hits as f32 / total as f32, "triggered success rate disagrees");

    // Triggerless success rate over explicit target scenarios.
    let targets: Vec<(ImageTensor, usize)> =
        tei.iter().take(20).map(|x| (x.clone(), 2usize)).collect();
    let fast = psr_triggerless(&cspec, &params, &targets).unwrap();
    let brute = targets
        .iter()
        .filter(|(x, adv)| predict(&cspec, &params, x).unwrap() == *adv)
        .count() as f32
        / targets.len() as f32;
    assert_eq!(fast, brute, "triggerless success rate disagrees");

    // Natural accuracy.
    let fast = natural_accuracy(&cspec, &params, &tei, &tel).unwrap();
    let brute = tei
        .iter()
        .zip(&tel)
        .filter(|(x, &y)| predict(&cspec, &params, x).unwrap() == y as usize)
        .count() as f32
        / tei.len() as f32;
    assert_eq!(fast, brute, "natural accuracy disagrees");

    // Parameter divergence at a spread of percentiles.
    let a = NetworkParams::init(&cspec, 5);
    let b = NetworkParams::init(&cspec, 6);
    let pct = [0.0f32, 10.0, 50.0, 90.0, 100.0];
    let curve = param_divergence(&a, &b, &pct).unwrap();
    let mut diffs: Vec<f32> = a
        .entries
        .iter()
        .zip(&b.entries)
        .flat_map(|(ea, eb)| {
            ea.tensor.data.iter().zip(&eb.tensor.data).map(|(&x, &y)| (x - y).abs())
        })
        .collect();
    diffs.sort_by(|x, y| f32::total_cmp(y, x));
    for (i, &p) in pct.iter().enumerate() {
        let k = ((p / 100.0 * diffs.len() as f32).round() as usize).min(diffs.len());
        let brute: f32 = diffs[..k].iter().map(|&d| d as f64).sum::<f64>() as f32;
        assert_eq!(curve.l1_distance[i], brute, "divergence at percentile {p} disagrees");
    }
    println!("criterion 9: PASS (success rates, accuracy, and divergence match brute force)");
}

// ── Criterion 10: determinism, formats, and the identity map ────────────────

#[test]
fn crit10_determinism_and_formats() {
    let pool = ThreadPool::new(1);
    let cfg = ToyConfig {
        classes: 2,
        per_class_train: 8,
        per_class_test: 4,
        height: 8,
        width: 8,
        margin: 0.2,
        ..Default::default()
    };
    let (ti, tl, _, _) = data::generate(&cfg).unwrap();
    let (ti2, tl2, _, _) = data::generate(&cfg).unwrap();
    assert_eq!(tl, tl2);
    for (a, b) in ti.iter().zip(&ti2) {
        for (x, y) in a.data.iter().zip(&b.data) {
            assert_eq!(x.to_bits(), y.to_bits(), "dataset generation not reproducible");
        }
    }

    // Training twice from the same seed is bitwise identical.
    let espec = NetworkSpec::energy_default();
    let tc = TrainConfig {
        steps: 30,
        batch_size: 4,
        langevin_steps_per_iter: 3,
        seed: 9,
        ..Default::default()
    };
    let (p1, _) = train(&espec, &ti, &tc, 0, &pool, &mut NoObserver).unwrap();
    let (p2, _) = train(&espec, &ti, &tc, 0, &pool, &mut NoObserver).unwrap();
    for (a, b) in p1.entries.iter().zip(&p2.entries) {
        assert_eq!(a.name, b.name);
        for (x, y) in a.tensor.data.iter().zip(&b.tensor.data) {
            assert_eq!(x.to_bits(), y.to_bits(), "energy training not reproducible");
        }
    }

    // Model and dataset files round-trip bitwise.
    let dir = tempfile::tempdir().unwrap();
    let mpath = dir.path().join("model.pebm");
    io::save_params(&mpath, &p1).unwrap();
    let loaded = io::load_params(&mpath, &espec).unwrap();
    for (a, b) in p1.entries.iter().zip(&loaded.entries) {
        for (x, y) in a.tensor.data.iter().zip(&b.tensor.data) {
            assert_eq!(x.to_bits(), y.to_bits(), "model round-trip changed a weight");
        }
    }
    let bytes1 = io::read_bytes(&mpath).unwrap();
    io::save_params(&mpath, &loaded).unwrap();
    assert_eq!(bytes1, io::read_bytes(&mpath).unwrap(), "model file not byte-stable");

    let dpath = dir.path().join("set.pimg");
    io::save_dataset(&dpath, &ti, &tl).unwrap();
    let (li, ll) = io::load_dataset(&dpath).unwrap();
    assert_eq!(tl, ll);
    let bytes1 = io::read_bytes(&dpath).unwrap();
    io::save_dataset(&dpath, &li, &ll).unwrap();
    assert_eq!(bytes1, io::read_bytes(&dpath).unwrap(), "dataset file not byte-stable");

    // Purification with zero steps is the identity, bitwise.
    let model = Model::new(espec.clone(), p1).unwrap();
    let cfg0 = LangevinConfig { steps: 0, ..Default::default() };
    let out = purify(&ti, &model, &cfg0, 5, &pool).unwrap();
    for (a, b) in out.iter().zip(&ti) {
        for (x, y) in a.data.iter().zip(&b.data) {
            assert_eq!(x.to_bits(), y.to_bits(), "zero-step purification moved a pixel");
        }
    }

    // Same seed, same purification; different seed, different noise.
    let cfg5 = LangevinConfig { steps: 5, ..Default::default() };
    let run1 = purify(&ti, &model, &cfg5, 5, &pool).unwrap();
    let run2 = purify(&ti, &model, &cfg5, 5, &pool).unwrap();
    for (a, b) in run1.iter().zip(&run2) {
        for (x, y) in a.data.iter().zip(&b.data) {
            assert_eq!(x.to_bits(), y.to_bits(), "purification not reproducible");
        }
    }
    let run3 = purify(&ti, &model, &cfg5, 6, &pool).unwrap();
    let same = run1
        .iter()
        .zip(&run3)
        .all(|(a, b)| a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert!(!same, "different seeds produced identical purification noise");
    println!("criterion 10: PASS (reproducible runs, byte-stable formats, identity at T=0)");
}
