//! Layer-wise training, backprop and a trained readout on random features,
//! compared on Gaussian clusters. Runs in seconds.
//!
//! cargo run --release --example synthetic_training

use phsic::data::synthetic_clusters;
use phsic::trainer::{run_experiment, RunOutput};
use phsic::{GroupingSpec, KernelFamily, Method, NetworkConfig, Rng, RunSpec, TrainerConfig};

fn main() -> phsic::Result<()> {
    let mut rng = Rng::new(5);
    let all = synthetic_clusters(200, 5, 30, 1.2, &mut rng)?;
    let idx: Vec<usize> = (0..all.len()).collect();
    let (train_idx, test_idx) = idx.split_at(800);
    let train = all.subset(train_idx, phsic::Split::Train);
    let test = all.subset(test_idx, phsic::Split::Test);

    let grouped = GroupingSpec::new(4, 0.2, 1.0, true)?;
    let runs = [
        ("gaussian grp+div", Method::Phsic, Some(grouped), KernelFamily::gaussian(2.0)?, 1.0, 1e-2),
        ("gaussian", Method::Phsic, None, KernelFamily::gaussian(2.0)?, 1.0, 1e-2),
        ("cossim grp+div", Method::Phsic, Some(grouped), KernelFamily::CosineSimilarity, 0.4, 1e-2),
        ("backprop", Method::Backprop, None, KernelFamily::gaussian(2.0)?, 0.0, 5e-2),
        ("last layer", Method::LastLayer, None, KernelFamily::gaussian(2.0)?, 0.0, 5e-2),
    ];
    for (name, method, grouping, kernel, local_lr, final_lr) in runs {
        let network = NetworkConfig::plain(30, vec![32, 32], 5).with_grouping(grouping);
        let trainer = TrainerConfig {
            method,
            epochs: 15,
            batch_size: 64,
            local_lr,
            final_lr,
            lr_decay_epochs: vec![10],
            seed: 3,
            ..Default::default()
        };
        let result = run_experiment(&RunSpec { network, kernel, trainer }, &train, Some(&test), &RunOutput::default(), None)?;
        let last = result.records.last().unwrap();
        let objectives: Vec<String> = last.phsic_zz.iter().zip(&last.phsic_yz).map(|(zz, yz)| format!("{zz:.3}/{yz:.3}")).collect();
        println!(
            "{name:<18} train {:.3}  val {:.3}  test {:.3}  pHSIC(Z,Z)/pHSIC(Y,Z) per layer {}",
            last.train_acc,
            last.val_acc.unwrap_or(f64::NAN),
            last.test_acc.unwrap(),
            objectives.join("  ")
        );
    }
    Ok(())
}
