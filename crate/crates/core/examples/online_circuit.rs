//! Pieces of the online circuit: the smoothing filter that turns a held
//! input into a temporal difference, the memory variable, and the running
//! third factor driving per-sample updates in each streaming mode.
//!
//! cargo run --release --example online_circuit

use phsic::data::synthetic_clusters;
use phsic::network::layer_forward;
use phsic::online::{memory_ode_step, temporal_difference, CircuitConfig, OnlineCircuitState, OnlineMode, Sample, SmoothingKernel};
use phsic::{init_weights, GroupingSpec, KernelFamily, KernelSpec, LabelKernel, Rng};

fn main() -> phsic::Result<()> {
    let kernel = SmoothingKernel::new(2.0, 0.25, 1.0)?;
    println!("filter taps: {:?}", kernel.taps().iter().map(|t| (t * 1e3).round() / 1e3).collect::<Vec<_>>());
    let trace: Vec<f64> = (0..30).map(|t| if t < 15 { 0.4 } else { 1.1 }).collect();
    let td = temporal_difference(&trace, &kernel);
    let peak = td.iter().cloned().fold(f64::MIN, f64::max);
    println!("step 0.4 -> 1.1: filtered peak {peak:.4} (true difference 0.7)");

    // a sustained large deviation leaves its cube in the memory variable;
    // small ones are not latched faithfully since tanh is far from saturated
    for d in [2.0f64, 0.5] {
        let mut omega = 0.0;
        for _ in 0..20_000 {
            omega = memory_ode_step(omega, 1.0 + d, 1.0, 0.0, 0.001);
        }
        println!("memory after sustained deviation {d}: {omega:.5} (cube {:.5})", d.powi(3));
    }

    let mut rng = Rng::new(4);
    let data = synthetic_clusters(8, 2, 6, 0.4, &mut rng)?;
    let order = rng.permutation(data.len());
    let (x, labels) = data.batch(&order);
    let w = init_weights(6, 8, 0.01, &mut rng)?;
    let sigma = 2.0;
    let plain = KernelSpec::plain(KernelFamily::gaussian(sigma)?);
    let grouped = KernelSpec::grouped(KernelFamily::gaussian(sigma)?, GroupingSpec::new(2, 0.2, 1.0, true)?);
    for (spec, modes) in [
        (plain, vec![OnlineMode::Pairwise, OnlineMode::MeanBased]),
        (grouped, vec![OnlineMode::Pairwise, OnlineMode::ProductDifference, OnlineMode::Separated]),
    ] {
        let cache = layer_forward(&w, spec.grouping.as_ref(), 0.01, 0.0, &x, &mut rng)?;
        for mode in modes {
            let mut state = OnlineCircuitState::new(CircuitConfig::new(sigma, 2.0), spec, 0.01)?;
            let mut total = 0.0;
            state.observe(Sample::from_cache(&cache, 0))?;
            for s in 1..x.rows() {
                let k_y = LabelKernel::Balanced.eval(labels[s], labels[s - 1], 2)?;
                let dw = state.step(Sample::from_cache(&cache, s), k_y, mode)?;
                total += dw.frobenius_sq().sqrt();
            }
            if let Some(dw) = state.flush() {
                total += dw.frobenius_sq().sqrt();
            }
            let sig = state.last_signals().expect("at least two samples");
            println!(
                "{:<28} {:<19} last b1 {:.3} b2 {:+.3} b3 {:+.3} M {:+.2e}  summed |dW| {:.3e}",
                spec.to_string(),
                mode.name(),
                sig.b1,
                sig.b2,
                sig.b3,
                sig.m,
                total
            );
        }
    }
    Ok(())
}
