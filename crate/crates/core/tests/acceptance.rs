//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Criteria 1-7 and the quick MNIST run always execute. The full MNIST runs
//! (about an hour or more each on one core) need `--full`:
//!
//!     cargo test --release --test acceptance -- --full [8 9 10 11]
//!
//! MNIST is read from `$PHSIC_MNIST_DIR`, else `<workspace>/data/mnist`.

use std::path::PathBuf;
use std::time::Instant;

use phsic::data::{idx_paths, load_idx, synthetic_clusters};
use phsic::kernels::{hsic_estimate, label_kernel, phsic_estimate};
use phsic::network::{layer_forward, Mode, Network};
use phsic::online::{compare_stream_with_batch, memory_ode_step, temporal_difference, CircuitConfig, OnlineCircuitState, OnlineMode, Sample};
use phsic::rules::{
    backprop_gradients, compare_gradients, finite_difference_gradient_with_steps, gradient_oracle_suite, kink_safe_steps, layer_gradient,
    mean_cross_entropy, two_point_update, GradientError,
};
use phsic::trainer::{run_experiment, MnistPreset, RunOutput};
use phsic::{init_weights, Dataset, GroupingSpec, KernelFamily, KernelSpec, LabelKernel, Matrix, Rng, RunSpec, Split};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

// 1. layer gradients against the finite-difference oracle
fn gradient_oracle() -> Outcome {
    let reports = gradient_oracle_suite(0..20).expect("oracle suite");
    let mut pass = true;
    let mut parts = Vec::new();
    for r in &reports {
        pass &= r.passes(1e-5, 1e-8);
        parts.push(format!("{} {:.1e}/{:.1e}", r.case.name, r.worst.max_relative, r.worst.max_absolute_small));
    }
    outcome(pass, format!("20 seeds x 2 layers, worst rel/abs: {}", parts.join(", ")))
}

fn hsic_brute(ka: &Matrix, kb: &Matrix) -> f64 {
    let m = ka.rows();
    let mf = m as f64;
    let (mut t1, mut sa, mut sb, mut t3) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..m {
        for j in 0..m {
            t1 += ka.get(i, j) * kb.get(i, j);
            sa += ka.get(i, j);
            sb += kb.get(i, j);
            for k in 0..m {
                t3 += ka.get(i, k) * kb.get(j, k);
            }
        }
    }
    t1 / (mf * mf) + sa * sb / mf.powi(4) - 2.0 * t3 / mf.powi(3)
}

// 2. pHSIC bounds HSIC from above
fn estimator_bound() -> Outcome {
    let mut rng = Rng::new(2);
    let families = [KernelFamily::Linear, KernelFamily::CosineSimilarity, KernelFamily::Gaussian { sigma: 1.5 }];
    let (mut worst_violation, mut worst_brute) = (0.0f64, 0.0f64);
    for d in 0..100 {
        let m = 2 + rng.below(9);
        let x = Matrix::from_fn(m, 1 + rng.below(5), |_, _| rng.normal());
        let k = families[d % 3].matrix(&x).unwrap();
        let h = hsic_estimate(&k, &k).unwrap();
        let p = phsic_estimate(&k, &k).unwrap();
        worst_violation = worst_violation.max(h - p);
        worst_brute = worst_brute.max((h - hsic_brute(&k.values, &k.values)).abs() / h.abs().max(1.0));
    }
    let pass = worst_violation <= 1e-10 && worst_brute <= 1e-12;
    outcome(pass, format!("100 datasets, m<=10: max(HSIC-pHSIC) {worst_violation:.1e}, HSIC vs triple sum {worst_brute:.1e}"))
}

// 3. label kernel against centered one-hots
fn label_kernel_exact() -> Outcome {
    let mut worst = 0.0f64;
    let mut exact = true;
    for n in 2..=20usize {
        let centered = |c: usize| (0..n).map(|i| if i == c { 1.0 } else { 0.0 } - 1.0 / n as f64).collect::<Vec<f64>>();
        for a in 0..n {
            for b in 0..n {
                let v = label_kernel(a, b, n).unwrap();
                let cos = KernelFamily::CosineSimilarity.eval(&centered(a), &centered(b)).unwrap();
                worst = worst.max((v - cos).abs());
                exact &= v == if a == b { 1.0 } else { -1.0 / (n as f64 - 1.0) };
            }
        }
    }
    outcome(worst <= 1e-12 && exact, format!("n=2..20: max |k - cos| {worst:.1e}, values exactly {{1, -1/(n-1)}}: {exact}"))
}

// 4. a batch of two is one two-point update
fn batch_two_point() -> Outcome {
    let mut rng = Rng::new(4);
    let mut worst = 0.0f64;
    for inst in 0..50 {
        let grouping = (inst % 2 == 1).then(|| GroupingSpec::new(2, 0.2, 1.0, inst % 4 == 1).unwrap());
        let spec = KernelSpec { family: KernelFamily::Gaussian { sigma: 0.5 + 2.0 * rng.uniform() }, grouping };
        let x = Matrix::from_fn(2, 5, |_, _| rng.normal());
        let w = init_weights(5, 6, 0.01, &mut rng).unwrap();
        let cache = layer_forward(&w, grouping.as_ref(), 0.01, 0.0, &x, &mut rng).unwrap();
        let labels = [rng.below(10), rng.below(10)];
        let ky = LabelKernel::Balanced.matrix(&labels, 10).unwrap();
        let kz = spec.family.matrix(cache.features()).unwrap();
        let (grad, _) = layer_gradient(&spec, &cache, &ky, 2.0, 0.01).unwrap();
        let (dw, _) = two_point_update(&spec, &cache, 0, 1, ky.values.get(0, 1), 2.0, ky.mean, kz.mean, 0.01).unwrap();
        for (g, d) in grad.data().iter().zip(dw.data()) {
            worst = worst.max((-g - 0.5 * d).abs());
        }
    }
    outcome(worst <= 1e-12, format!("50 instances (plain, grp, grp+div): max |-grad - dW/2| {worst:.1e}"))
}

// 5. pairwise streaming retraces batches of two
fn streaming_equivalence() -> Outcome {
    let mut rng = Rng::new(5);
    let data = synthetic_clusters(60, 4, 12, 0.6, &mut rng).unwrap();
    let order = rng.permutation(data.len());
    let (x, labels) = data.batch(&order[..200]);
    let w0 = init_weights(12, 10, 0.01, &mut rng).unwrap();
    let spec = KernelSpec::plain(KernelFamily::Gaussian { sigma: 2.0 });
    let cmp = compare_stream_with_batch(&spec, &w0, &x, &labels, 4, 2.0, 0.01, 0.5).unwrap();
    let moved = cmp.batch_weights.sub(&w0).unwrap().max_abs();
    let pass = cmp.max_diff.len() == 100 && cmp.worst() <= 1e-9 && moved > 1e-3;
    outcome(pass, format!("{} steps: worst max |W_stream - W_batch| {:.1e} (weights moved {moved:.2})", cmp.max_diff.len(), cmp.worst()))
}

// 6. temporal difference, memory and b3
fn circuitry() -> Outcome {
    let config = CircuitConfig::new(2.0, 2.0);
    let filter = config.smoothing().unwrap();
    let mut td_worst = 0.0f64;
    for (a, b) in [(0.4, 1.1), (1.0, -0.5), (-2.0, 3.0), (0.0, 0.05)] {
        let trace: Vec<f64> = (0..40).map(|t| if t < 20 { a } else { b }).collect();
        let diff: f64 = b - a;
        let peak = temporal_difference(&trace, &filter).iter().map(|v| v * diff.signum()).fold(f64::MIN, f64::max);
        td_worst = td_worst.max((peak - diff.abs()).abs() / diff.abs());
    }

    let mut mem_worst = 0.0f64;
    for d in [2.0f64, -2.5, 3.0] {
        let mu = 0.3;
        let mut omega = 0.0;
        for _ in 0..40_000 {
            omega = memory_ode_step(omega, mu + d, mu, config.leak, 1e-3);
        }
        mem_worst = mem_worst.max((omega - d.powi(3)).abs() / d.powi(3).abs());
    }

    // alternate two samples: after a first pair with matching labels every
    // pair has the same b2, which b3 must approach at rate 1 - beta
    let mut rng = Rng::new(6);
    let spec = KernelSpec::plain(KernelFamily::Gaussian { sigma: config.sigma });
    let w = init_weights(4, 5, 0.01, &mut rng).unwrap();
    let x = Matrix::from_fn(2, 4, |_, _| rng.normal());
    let cache = layer_forward(&w, None, 0.01, 0.0, &x, &mut rng).unwrap();
    let mut st = OnlineCircuitState::new(config, spec, 0.01).unwrap();
    st.observe(Sample::from_cache(&cache, 0)).unwrap();
    let first = st.step(Sample::from_cache(&cache, 1), 1.0, OnlineMode::Pairwise).map(|_| st.b3().unwrap()).unwrap();
    let mut gaps = Vec::new();
    let mut b2 = 0.0;
    for t in 0..200 {
        st.step(Sample::from_cache(&cache, t % 2), -0.25, OnlineMode::Pairwise).unwrap();
        let sig = st.last_signals().unwrap();
        b2 = sig.b2;
        gaps.push((sig.b3 - sig.b2).abs());
    }
    let ratio_ok = gaps.windows(2).take(5).all(|g| ((g[1] / g[0]) - (1.0 - config.beta)).abs() < 1e-6);
    let b3_gap = *gaps.last().unwrap();
    let b3_ok = ratio_ok && b3_gap <= 1e-12 * b2.abs().max(1.0) && (first - b2).abs() > 0.1;

    let pass = td_worst <= 0.02 && mem_worst <= 0.01 && b3_ok;
    outcome(
        pass,
        format!("TD peak rel err {td_worst:.1e}; memory vs cube rel err {mem_worst:.1e}; b3 geometric at 1-beta: {ratio_ok}, final gap {b3_gap:.1e}"),
    )
}

fn pre_signs(net: &Network, x: &Matrix) -> Vec<bool> {
    let pass = net.forward(x, Mode::Eval, &mut Rng::new(0)).unwrap();
    pass.layers.iter().flat_map(|c| c.pre.data().iter().map(|v| *v > 0.0).collect::<Vec<_>>()).collect()
}

// 7. backprop against finite differences of the mean cross-entropy
fn backprop_oracle() -> Outcome {
    let mut worst = GradientError::default();
    for seed in 0..10 {
        let mut rng = Rng::new(seed);
        let net = Network::new(phsic::NetworkConfig::plain(8, vec![6, 4], 3), &mut rng).unwrap();
        let x = Matrix::from_fn(5, 8, |_, _| rng.normal());
        let labels: Vec<usize> = (0..5).map(|_| rng.below(3)).collect();
        let pass = net.forward(&x, Mode::Eval, &mut rng).unwrap();
        let grads = backprop_gradients(&net, &pass, &labels).unwrap();
        let base = pre_signs(&net, &x);
        let mut merge = |e: GradientError| {
            worst.max_relative = worst.max_relative.max(e.max_relative);
            worst.max_absolute_small = worst.max_absolute_small.max(e.max_absolute_small);
        };
        for k in 0..net.weights.len() {
            let cache = &pass.layers[k];
            let mut steps = kink_safe_steps(&cache.pre, &cache.input, 1e-3);
            // later layers must not cross their kinks either
            let mut probe = net.clone();
            for idx in 0..steps.data().len() {
                let orig = net.weights[k].data()[idx];
                for _ in 0..40 {
                    let h = steps.data()[idx];
                    let flips = [orig + h, orig - h].iter().any(|&v| {
                        probe.weights[k].data_mut()[idx] = v;
                        pre_signs(&probe, &x) != base
                    });
                    probe.weights[k].data_mut()[idx] = orig;
                    if !flips {
                        break;
                    }
                    steps.data_mut()[idx] = 0.5 * h;
                }
            }
            let mut probe = net.clone();
            let fd = finite_difference_gradient_with_steps(
                |w| {
                    probe.weights[k] = w.clone();
                    mean_cross_entropy(&probe, &x, &labels).unwrap()
                },
                &net.weights[k],
                &steps,
            );
            merge(compare_gradients(&grads.hidden[k], &fd, 1e-8));
        }
        let mut probe = net.clone();
        let ro = &net.readout.weights;
        let fd = finite_difference_gradient_with_steps(
            |w| {
                probe.readout.weights = w.clone();
                mean_cross_entropy(&probe, &x, &labels).unwrap()
            },
            ro,
            &Matrix::filled(ro.rows(), ro.cols(), 1e-3),
        );
        merge(compare_gradients(&grads.readout_weights, &fd, 1e-8));
    }
    outcome(
        worst.passes(1e-5, 1e-8),
        format!("10 nets 8->6->4->3, hidden and readout: worst rel {:.1e}, abs {:.1e}", worst.max_relative, worst.max_absolute_small),
    )
}

fn mnist_dir() -> PathBuf {
    std::env::var_os("PHSIC_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

fn load_mnist() -> Option<(Dataset, Dataset)> {
    let dir = mnist_dir();
    let (ti, tl) = idx_paths(&dir, Split::Train);
    let (ei, el) = idx_paths(&dir, Split::Test);
    if !(ti.exists() && tl.exists() && ei.exists() && el.exists()) {
        return None;
    }
    Some((load_idx(ti, tl, Split::Train).expect("MNIST train"), load_idx(ei, el, Split::Test).expect("MNIST test")))
}

fn mnist_accuracy(spec: &RunSpec, data: &(Dataset, Dataset), progress: bool) -> f64 {
    let out = RunOutput { progress, ..Default::default() };
    let result = run_experiment(spec, &data.0, Some(&data.1), &out, None).expect("MNIST run");
    result.records.last().and_then(|r| r.test_acc).expect("test accuracy")
}

fn mnist_target(spec: RunSpec, data: &(Dataset, Dataset), target: f64, tol: f64) -> Outcome {
    let acc = 100.0 * mnist_accuracy(&spec, data, true);
    outcome((acc - target).abs() <= tol, format!("test accuracy {acc:.2}% (target {target} +- {tol})"))
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let full = args.iter().any(|a| a == "--full") || std::env::var_os("PHSIC_ACCEPTANCE_FULL").is_some();
    let picked: Vec<u32> = args.iter().filter_map(|a| a.parse().ok()).collect();
    let want = |id: u32| picked.is_empty() || picked.contains(&id);
    // libtest options such as --nocapture are accepted and ignored
    let mut failed = 0;
    let mut report = |id: &str, name: &str, o: Outcome, started: Instant| {
        let tag = if o.pass { "PASS" } else { "FAIL" };
        failed += usize::from(!o.pass);
        println!("{tag} {id:>7} {name}: {} [{:.1}s]", o.detail, started.elapsed().as_secs_f64());
    };

    type Criterion = (u32, &'static str, fn() -> Outcome);
    let fast: [Criterion; 7] = [
        (1, "gradient oracle", gradient_oracle),
        (2, "pHSIC >= HSIC", estimator_bound),
        (3, "label kernel", label_kernel_exact),
        (4, "batch of two = two-point rule", batch_two_point),
        (5, "streaming = batch", streaming_equivalence),
        (6, "online circuitry", circuitry),
        (7, "backprop gradients", backprop_oracle),
    ];
    for (id, name, f) in fast {
        if want(id) {
            let t = Instant::now();
            report(&id.to_string(), name, f(), t);
        }
    }

    let mnist = if want(8) || (full && picked.iter().any(|&id| (8..=11).contains(&id))) { load_mnist() } else { None };
    if want(8) {
        match &mnist {
            Some(data) => {
                let t = Instant::now();
                let acc = 100.0 * mnist_accuracy(&MnistPreset::quick_spec(1).unwrap(), data, false);
                report("8-quick", "MNIST 3x256 grp+div, 10 epochs", outcome(acc > 95.0, format!("test accuracy {acc:.2}% (needs > 95)")), t);
            }
            None => println!("SKIP 8-quick MNIST 3x256 grp+div: no IDX files under {}", mnist_dir().display()),
        }
    }

    let full_runs: [(u32, MnistPreset, f64, f64); 4] = [
        (8, MnistPreset::GaussianGrouped, 98.1, 0.5),
        (9, MnistPreset::Backprop, 98.6, 0.4),
        (10, MnistPreset::LastLayer, 92.0, 1.5),
        (11, MnistPreset::CosineGrouped, 96.3, 1.0),
    ];
    for (id, preset, target, tol) in full_runs {
        if !want(id) {
            continue;
        }
        let name = format!("MNIST 3x1024 {}, 100 epochs", preset.name());
        match (&mnist, full) {
            (Some(data), true) => {
                let t = Instant::now();
                report(&id.to_string(), &name, mnist_target(preset.run_spec(1024, 100, 1).unwrap(), data, target, tol), t);
            }
            (None, true) => println!("SKIP {id:>7} {name}: no IDX files under {}", mnist_dir().display()),
            (_, false) => println!("SKIP {id:>7} {name}: needs --full (target {target} +- {tol})"),
        }
    }
    if want(12) {
        println!(
            "DOC  {:>7} extended runs, not gated: fashion-MNIST Gaussian grp+div 88.8 +- 1.0, Kuzushiji-MNIST Gaussian grp 92.7 +- 1.0, CIFAR10 FC Gaussian grp 48.4 +- 2.0",
            12
        );
    }

    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
