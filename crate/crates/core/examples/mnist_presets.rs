//! Full-size MNIST runs: three hidden layers of 1024 for 100 epochs with one
//! of the named training setups.
//!
//! cargo run --release --example mnist_presets -- <gaussian|cossim|backprop|last-layer> [data/mnist] [seed] [out_dir]

use std::path::PathBuf;

use phsic::data::{idx_paths, load_idx};
use phsic::trainer::{run_experiment, MnistPreset, RunOutput};
use phsic::Split;

fn main() -> phsic::Result<()> {
    let mut args = std::env::args().skip(1);
    let preset = match args.next().as_deref() {
        Some("gaussian") => MnistPreset::GaussianGrouped,
        Some("cossim") => MnistPreset::CosineGrouped,
        Some("backprop") => MnistPreset::Backprop,
        Some("last-layer") => MnistPreset::LastLayer,
        _ => {
            eprintln!("usage: mnist_presets <gaussian|cossim|backprop|last-layer> [data_dir] [seed] [out_dir]");
            std::process::exit(2);
        }
    };
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "data/mnist".into()));
    let seed: u64 = args.next().map(|s| s.parse().expect("seed")).unwrap_or(1);
    let out_dir = args.next().map(PathBuf::from);

    let (ti, tl) = idx_paths(&dir, Split::Train);
    let train = load_idx(ti, tl, Split::Train)?;
    let (ei, el) = idx_paths(&dir, Split::Test);
    let test = load_idx(ei, el, Split::Test)?;

    let spec = preset.run_spec(1024, 100, seed)?;
    let out = RunOutput { dir: out_dir, progress: true, ..Default::default() };
    let result = run_experiment(&spec, &train, Some(&test), &out, None)?;
    let last = result.records.last().expect("at least one epoch");
    println!("{}: final test accuracy {:.4}", preset.name(), last.test_acc.expect("test set given"));
    Ok(())
}
