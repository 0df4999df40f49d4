//! Training one plain Gaussian layer from a stream of sample pairs, one
//! third factor per pair, retraces batch training on the same pairs.
//!
//! cargo run --release --example streaming_vs_batch

use phsic::data::synthetic_clusters;
use phsic::online::compare_stream_with_batch;
use phsic::{init_weights, KernelFamily, KernelSpec, Rng};

fn main() -> phsic::Result<()> {
    let mut rng = Rng::new(11);
    let data = synthetic_clusters(100, 4, 12, 0.6, &mut rng)?;
    let order = rng.permutation(data.len());
    let (x, labels) = data.batch(&order[..200]);
    let w0 = init_weights(12, 10, 0.01, &mut rng)?;
    let spec = KernelSpec::plain(KernelFamily::gaussian(2.0)?);
    let cmp = compare_stream_with_batch(&spec, &w0, &x, &labels, 4, 2.0, 0.01, 0.5)?;
    println!("{} pair updates", cmp.max_diff.len());
    for (t, d) in cmp.max_diff.iter().enumerate().step_by(20) {
        println!("  after update {t:>3}: max |W_stream - W_batch| = {d:.2e}");
    }
    println!("worst over the trajectory: {:.2e}", cmp.worst());
    let moved = cmp.batch_weights.sub(&w0)?.frobenius_sq().sqrt();
    println!("total weight change {moved:.3}");
    Ok(())
}
