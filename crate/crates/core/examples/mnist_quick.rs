//! Quick MNIST run: three hidden layers of 256 trained for ten epochs with
//! the Gaussian grouped + divisively normalized local objective.
//!
//! cargo run --release --example mnist_quick -- [data/mnist] [seed]

use std::path::PathBuf;

use phsic::data::{idx_paths, load_idx};
use phsic::trainer::{run_experiment, MnistPreset, RunOutput};
use phsic::Split;

fn main() -> phsic::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "data/mnist".into()));
    let seed: u64 = args.next().map(|s| s.parse().expect("seed")).unwrap_or(1);

    let (ti, tl) = idx_paths(&dir, Split::Train);
    let train = load_idx(ti, tl, Split::Train)?;
    let (ei, el) = idx_paths(&dir, Split::Test);
    let test = load_idx(ei, el, Split::Test)?;

    let spec = MnistPreset::quick_spec(seed)?;
    let out = RunOutput { progress: true, ..Default::default() };
    let result = run_experiment(&spec, &train, Some(&test), &out, None)?;
    let last = result.records.last().expect("at least one epoch");
    println!("final test accuracy {:.4}", last.test_acc.expect("test set given"));
    Ok(())
}
