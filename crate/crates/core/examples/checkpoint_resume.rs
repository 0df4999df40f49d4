//! A run interrupted after a few epochs and resumed from its checkpoint ends
//! bit-identical to an uninterrupted run.
//!
//! cargo run --release --example checkpoint_resume

use phsic::checkpoint;
use phsic::data::synthetic_clusters;
use phsic::trainer::{run_experiment, RunOutput};
use phsic::{GroupingSpec, KernelFamily, NetworkConfig, Rng, RunSpec, TrainerConfig};

fn main() -> phsic::Result<()> {
    let data = synthetic_clusters(60, 3, 10, 0.8, &mut Rng::new(1))?;
    let spec = RunSpec {
        network: NetworkConfig::plain(10, vec![12, 8], 3).with_grouping(Some(GroupingSpec::new(2, 0.2, 1.0, true)?)),
        kernel: KernelFamily::gaussian(2.0)?,
        trainer: TrainerConfig { epochs: 6, batch_size: 32, final_lr: 1e-2, lr_decay_epochs: vec![4], seed: 8, ..Default::default() },
    };
    let dir = std::env::temp_dir().join(format!("phsic-resume-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| phsic::Error::Io { path: dir.clone(), source: e })?;

    let full = run_experiment(&spec, &data, None, &RunOutput::default(), None)?;

    let out = RunOutput { dir: Some(dir.clone()), stop_after: Some(3), ..Default::default() };
    run_experiment(&spec, &data, None, &out, None)?;
    let saved = checkpoint::load(&dir.join("checkpoint.bin"))?;
    println!("interrupted after {} epochs; checkpoint {} bytes", saved.epochs_done, std::fs::metadata(dir.join("checkpoint.bin")).map(|m| m.len()).unwrap_or(0));
    let resumed = run_experiment(&spec, &data, None, &RunOutput { dir: Some(dir.clone()), ..Default::default() }, Some(saved))?;

    let same = resumed.state == full.state;
    println!("resumed run identical to uninterrupted run: {same}");
    let metrics = std::fs::read_to_string(dir.join("metrics.csv")).unwrap_or_default();
    println!("metrics.csv has {} epoch rows", metrics.lines().count().saturating_sub(1));
    std::fs::remove_dir_all(&dir).ok();
    Ok(())
}
