//! Training loop: per-layer SGD with momentum, step learning-rate decay,
//! readout training and per-epoch metrics.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{augment_cifar, Dataset};
use crate::error::{Error, Result};
use crate::kernels::{GroupingSpec, KernelFamily, KernelSpec, LabelKernel};
use crate::network::{argmax, Mode, Network, NetworkConfig};
use crate::numerics::{Matrix, Rng};
use crate::rules::{backprop_gradients, layer_gradient, readout_gradient, LayerObjective};

pub const STREAM_INIT: u64 = 0;
pub const STREAM_SPLIT: u64 = 1;
pub const STREAM_TRAIN: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Hidden layers follow their local objectives.
    Phsic,
    /// Everything trained end to end on the cross-entropy.
    Backprop,
    /// Hidden layers frozen at initialization.
    LastLayer,
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "phsic" => Ok(Method::Phsic),
            "backprop" => Ok(Method::Backprop),
            "last-layer" => Ok(Method::LastLayer),
            _ => Err(Error::InvalidArgument(format!("unknown method `{s}`"))),
        }
    }
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Phsic => "phsic",
            Method::Backprop => "backprop",
            Method::LastLayer => "last-layer",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub method: Method,
    pub epochs: usize,
    pub batch_size: usize,
    pub gamma: f64,
    pub local_lr: f64,
    pub final_lr: f64,
    pub momentum: f64,
    pub weight_decay_local: f64,
    pub weight_decay_final: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_epochs: Vec<usize>,
    pub dropout: f64,
    pub seed: u64,
    pub validation_fraction: f64,
    /// Random crop and flip for 32x32x3 inputs.
    pub augment: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            method: Method::Phsic,
            epochs: 100,
            batch_size: 256,
            gamma: 2.0,
            local_lr: 1.0,
            final_lr: 1e-3,
            momentum: 0.95,
            weight_decay_local: 1e-7,
            weight_decay_final: 1e-6,
            lr_decay_factor: 0.25,
            lr_decay_epochs: vec![50, 75, 90],
            dropout: 0.01,
            seed: 0,
            validation_fraction: 0.1,
            augment: false,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("gamma", self.gamma),
            ("local_lr", self.local_lr),
            ("final_lr", self.final_lr),
            ("momentum", self.momentum),
            ("weight_decay_local", self.weight_decay_local),
            ("weight_decay_final", self.weight_decay_final),
            ("lr_decay_factor", self.lr_decay_factor),
        ];
        for (name, v) in rates {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidArgument("batch_size must be >= 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument("dropout must be in [0,1)".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::InvalidArgument("validation_fraction must be in [0,1)".into()));
        }
        Ok(())
    }
}

/// `(local, final)` learning rates for an epoch (0-based).
pub fn lr_at_epoch(config: &TrainerConfig, epoch: usize) -> (f64, f64) {
    let decays = config.lr_decay_epochs.iter().filter(|&&e| e <= epoch).count();
    let f = config.lr_decay_factor.powi(decays as i32);
    (config.local_lr * f, config.final_lr * f)
}

/// `v <- mu v + g + wd W`, `W <- W - lr v`.
pub fn sgd_step(w: &mut Matrix, grad: &Matrix, velocity: &mut Matrix, lr: f64, momentum: f64, weight_decay: f64) -> Result<()> {
    w.check_same_shape(grad, "sgd_step")?;
    w.check_same_shape(velocity, "sgd_step")?;
    sgd_slice(w.data_mut(), grad.data(), velocity.data_mut(), lr, momentum, weight_decay);
    Ok(())
}

pub fn sgd_slice(w: &mut [f64], grad: &[f64], velocity: &mut [f64], lr: f64, momentum: f64, weight_decay: f64) {
    for ((w, g), v) in w.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v + g + weight_decay * *w;
        *w -= lr * *v;
    }
}

/// Everything that changes while training; what a checkpoint stores.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub net: Network,
    pub velocity: Vec<Matrix>,
    pub readout_velocity: Matrix,
    pub readout_bias_velocity: Vec<f64>,
    pub rng: Rng,
    pub epochs_done: usize,
}

impl TrainState {
    pub fn new(mut network: NetworkConfig, config: &TrainerConfig) -> Result<Self> {
        network.dropout = config.dropout;
        let net = Network::new(network, &mut Rng::with_stream(config.seed, STREAM_INIT))?;
        Ok(Self::from_network(net, config.seed))
    }

    pub fn from_network(net: Network, seed: u64) -> Self {
        let velocity = net.weights.iter().map(|w| Matrix::zeros(w.rows(), w.cols())).collect();
        let readout_velocity = Matrix::zeros(net.readout.weights.rows(), net.readout.weights.cols());
        let readout_bias_velocity = vec![0.0; net.readout.bias.len()];
        Self { net, velocity, readout_velocity, readout_bias_velocity, rng: Rng::with_stream(seed, STREAM_TRAIN), epochs_done: 0 }
    }

    fn kernel_for(&self, family: KernelFamily, k: usize) -> KernelSpec {
        KernelSpec { family, grouping: self.net.config.grouping[k] }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpochStats {
    /// Accuracy of the training-mode logits seen during the epoch.
    pub train_acc: f64,
    pub mean_loss: f64,
    /// Batch-averaged objective terms per hidden layer (empty unless the
    /// local objectives were evaluated).
    pub objectives: Vec<LayerObjective>,
}

/// One pass over `train` in a fresh seeded order. Hidden layers are updated
/// one after another during the forward pass; each deeper layer receives
/// the activity computed before the shallower layer's update. The readout
/// is updated last.
pub fn train_epoch(state: &mut TrainState, config: &TrainerConfig, family: KernelFamily, train: &Dataset) -> Result<EpochStats> {
    if train.len() < 2 {
        return Err(Error::InvalidArgument("training set needs at least 2 samples".into()));
    }
    let (lr_l, lr_f) = lr_at_epoch(config, state.epochs_done);
    let n_hidden = state.net.n_hidden();
    let perm = state.rng.permutation(train.len());
    let mut sums = vec![LayerObjective::default(); n_hidden];
    let mut n_batches = 0usize;
    let mut correct = 0usize;
    let mut seen = 0usize;
    let mut loss_sum = 0.0;
    let slope = state.net.config.slope;

    for idx in perm.chunks(config.batch_size) {
        if idx.len() < 2 {
            continue;
        }
        let (mut x, labels) = train.batch(idx);
        if config.augment {
            augment_cifar(&mut x, &mut state.rng);
        }
        let logits;
        let last_post;
        match config.method {
            Method::Phsic | Method::LastLayer => {
                let ky = if config.method == Method::Phsic {
                    Some(LabelKernel::Balanced.matrix(&labels, train.n_classes)?)
                } else {
                    None
                };
                let mut input = x;
                for k in 0..n_hidden {
                    let cache = state.net.forward_layer(k, &input, Mode::Train, &mut state.rng)?;
                    if let Some(ky) = &ky {
                        let spec = state.kernel_for(family, k);
                        let (grad, obj) = layer_gradient(&spec, &cache, ky, config.gamma, slope)?;
                        sgd_step(&mut state.net.weights[k], &grad, &mut state.velocity[k], lr_l, config.momentum, config.weight_decay_local)?;
                        sums[k].phsic_zz += obj.phsic_zz;
                        sums[k].phsic_yz += obj.phsic_yz;
                        sums[k].value += obj.value;
                    }
                    input = cache.post;
                }
                logits = state.net.readout.logits(&input)?;
                last_post = input;
            }
            Method::Backprop => {
                let pass = state.net.forward(&x, Mode::Train, &mut state.rng)?;
                let grads = backprop_gradients(&state.net, &pass, &labels)?;
                for (k, g) in grads.hidden.iter().enumerate() {
                    sgd_step(&mut state.net.weights[k], g, &mut state.velocity[k], lr_f, config.momentum, config.weight_decay_final)?;
                }
                logits = pass.logits;
                last_post = pass.layers.into_iter().last().unwrap().post;
            }
        }
        let (dw, db, _, loss) = readout_gradient(&state.net.readout.weights, &last_post, &logits, &labels)?;
        sgd_step(&mut state.net.readout.weights, &dw, &mut state.readout_velocity, lr_f, config.momentum, config.weight_decay_final)?;
        sgd_slice(&mut state.net.readout.bias, &db, &mut state.readout_bias_velocity, lr_f, config.momentum, config.weight_decay_final);

        correct += labels.iter().enumerate().filter(|(s, &y)| argmax(logits.row(*s)) == y).count();
        seen += labels.len();
        loss_sum += loss;
        n_batches += 1;
        if !logits.is_finite() {
            return Err(Error::InvalidArgument(format!("training diverged in epoch {}", state.epochs_done)));
        }
    }
    state.epochs_done += 1;
    let objectives = if config.method == Method::Phsic {
        let nb = n_batches.max(1) as f64;
        sums.iter()
            .map(|o| LayerObjective { phsic_zz: o.phsic_zz / nb, phsic_yz: o.phsic_yz / nb, value: o.value / nb })
            .collect()
    } else {
        Vec::new()
    };
    Ok(EpochStats {
        train_acc: correct as f64 / seen.max(1) as f64,
        mean_loss: loss_sum / n_batches.max(1) as f64,
        objectives,
    })
}

/// Eval-mode accuracy, processed in chunks.
pub fn evaluate(net: &Network, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    let all: Vec<usize> = (0..data.len()).collect();
    for idx in all.chunks(1000) {
        let (x, labels) = data.batch(idx);
        let logits = net.predict(&x)?;
        correct += labels.iter().enumerate().filter(|(s, &y)| argmax(logits.row(*s)) == y).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
    pub test_acc: Option<f64>,
    pub phsic_zz: Vec<f64>,
    pub phsic_yz: Vec<f64>,
    pub seconds: f64,
}

impl MetricsRecord {
    pub fn csv_header(n_layers: usize) -> String {
        let mut h = String::from("epoch,train_acc,val_acc,test_acc");
        for i in 0..n_layers {
            h.push_str(&format!(",layer{i}_phsic_zz,layer{i}_phsic_yz"));
        }
        h.push_str(",seconds");
        h
    }

    /// One CSV line; missing values are left empty.
    pub fn csv_row(&self, n_layers: usize) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut r = format!("{},{},{},{}", self.epoch, self.train_acc, opt(self.val_acc), opt(self.test_acc));
        for i in 0..n_layers {
            r.push_str(&format!(",{},{}", opt(self.phsic_zz.get(i).copied()), opt(self.phsic_yz.get(i).copied())));
        }
        r.push_str(&format!(",{}", self.seconds));
        r
    }

    /// Same record without the wall time, for reproducibility checks.
    pub fn without_time(&self) -> Self {
        Self { seconds: 0.0, ..self.clone() }
    }
}

/// Everything `run_experiment` needs besides data.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunSpec {
    pub network: NetworkConfig,
    pub kernel: KernelFamily,
    pub trainer: TrainerConfig,
}

#[derive(Clone, Debug, Default)]
pub struct RunOutput {
    /// Directory for `metrics.csv`, `summary.json` and `checkpoint.bin`.
    pub dir: Option<PathBuf>,
    /// Resolved configuration echoed into the summary.
    pub echo: Option<serde_json::Value>,
    /// Print one line per epoch to stderr.
    pub progress: bool,
    /// Stop after this many epochs in total (for interrupted runs).
    pub stop_after: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub records: Vec<MetricsRecord>,
    pub state: TrainState,
}

#[derive(Serialize)]
struct Summary<'a> {
    config: &'a serde_json::Value,
    method: &'a str,
    kernel: String,
    epochs_done: usize,
    final_train_acc: Option<f64>,
    final_val_acc: Option<f64>,
    final_test_acc: Option<f64>,
    total_seconds: f64,
}

/// Trains for the configured number of epochs (continuing from `resume`),
/// evaluating after each epoch and writing metrics, a summary and a
/// checkpoint when an output directory is given.
pub fn run_experiment(
    spec: &RunSpec,
    train_full: &Dataset,
    test: Option<&Dataset>,
    output: &RunOutput,
    resume: Option<TrainState>,
) -> Result<RunResult> {
    spec.trainer.validate()?;
    let mut network = spec.network.clone();
    network.dropout = spec.trainer.dropout;
    network.validate()?;
    if train_full.width() != network.input_width {
        return Err(Error::dim("run_experiment", format!("data width {} vs network input {}", train_full.width(), network.input_width)));
    }
    let (train, val) = train_full.split_validation(spec.trainer.validation_fraction, &mut Rng::with_stream(spec.trainer.seed, STREAM_SPLIT))?;
    let mut state = match resume {
        Some(s) => {
            if s.net.config != network {
                return Err(Error::Config("checkpoint network does not match the configuration".into()));
            }
            s
        }
        None => TrainState::new(network, &spec.trainer)?,
    };

    let n_layers = state.net.n_hidden();
    let mut csv = match &output.dir {
        Some(dir) => Some(open_metrics(dir, n_layers, state.epochs_done > 0)?),
        None => None,
    };
    let start = Instant::now();
    let mut records = Vec::new();
    let last_epoch = output.stop_after.unwrap_or(spec.trainer.epochs).min(spec.trainer.epochs);
    while state.epochs_done < last_epoch {
        let t0 = Instant::now();
        let epoch = state.epochs_done;
        let stats = train_epoch(&mut state, &spec.trainer, spec.kernel, &train)?;
        let val_acc = val.as_ref().map(|v| evaluate(&state.net, v)).transpose()?;
        let test_acc = test.map(|t| evaluate(&state.net, t)).transpose()?;
        let rec = MetricsRecord {
            epoch,
            train_acc: stats.train_acc,
            val_acc,
            test_acc,
            phsic_zz: stats.objectives.iter().map(|o| o.phsic_zz).collect(),
            phsic_yz: stats.objectives.iter().map(|o| o.phsic_yz).collect(),
            seconds: t0.elapsed().as_secs_f64(),
        };
        if output.progress {
            eprintln!(
                "epoch {:>3}  train {:.4}  val {}  test {}  loss {:.4}  {:.1}s",
                epoch,
                rec.train_acc,
                val_acc.map(|v| format!("{v:.4}")).unwrap_or("-".into()),
                test_acc.map(|v| format!("{v:.4}")).unwrap_or("-".into()),
                stats.mean_loss,
                rec.seconds
            );
        }
        if let (Some((path, f)), Some(dir)) = (csv.as_mut(), &output.dir) {
            writeln!(f, "{}", rec.csv_row(n_layers)).map_err(|e| Error::io(path.clone(), e))?;
            f.flush().map_err(|e| Error::io(path.clone(), e))?;
            checkpoint::save(&dir.join("checkpoint.bin"), &state)?;
        }
        records.push(rec);
    }

    if let Some(dir) = &output.dir {
        let null = serde_json::Value::Null;
        let echo = output.echo.as_ref().unwrap_or(&null);
        let last = records.last();
        let summary = Summary {
            config: echo,
            method: spec.trainer.method.name(),
            kernel: KernelSpec { family: spec.kernel, grouping: state.net.config.grouping[0] }.to_string(),
            epochs_done: state.epochs_done,
            final_train_acc: last.map(|r| r.train_acc),
            final_val_acc: last.and_then(|r| r.val_acc),
            final_test_acc: last.and_then(|r| r.test_acc),
            total_seconds: start.elapsed().as_secs_f64(),
        };
        let path = dir.join("summary.json");
        let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::to_writer_pretty(f, &summary)?;
    }
    Ok(RunResult { records, state })
}

fn open_metrics(dir: &Path, n_layers: usize, append: bool) -> Result<(PathBuf, File)> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("metrics.csv");
    let exists = path.exists();
    let mut f = if append && exists {
        OpenOptions::new().append(true).open(&path)
    } else {
        File::create(&path)
    }
    .map_err(|e| Error::io(&path, e))?;
    if !(append && exists) {
        writeln!(f, "{}", MetricsRecord::csv_header(n_layers)).map_err(|e| Error::io(&path, e))?;
    }
    Ok((path, f))
}

/// MNIST settings per method for fully connected networks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MnistPreset {
    /// Gaussian kernel (sigma 5) on grouped, divisively normalized layers, 32 groups.
    GaussianGrouped,
    /// Cosine similarity on grouped, divisively normalized layers, 16 groups.
    CosineGrouped,
    Backprop,
    LastLayer,
}

impl MnistPreset {
    pub fn name(&self) -> &'static str {
        match self {
            MnistPreset::GaussianGrouped => "gaussian grp+div",
            MnistPreset::CosineGrouped => "cossim grp+div",
            MnistPreset::Backprop => "backprop",
            MnistPreset::LastLayer => "last layer",
        }
    }

    /// Three hidden layers of `width`; rates decay by 0.25 at 50%, 75% and
    /// 90% of `epochs` (epochs 50, 75, 90 of 100).
    pub fn run_spec(&self, width: usize, epochs: usize, seed: u64) -> Result<RunSpec> {
        let base = TrainerConfig {
            epochs,
            seed,
            lr_decay_epochs: vec![epochs / 2, epochs * 3 / 4, epochs * 9 / 10],
            ..Default::default()
        };
        let plain = NetworkConfig::plain(784, vec![width; 3], 10);
        let grouped = |g| -> Result<NetworkConfig> { Ok(plain.clone().with_grouping(Some(GroupingSpec::new(g, 0.2, 1.0, true)?))) };
        let gaussian = KernelFamily::gaussian(5.0)?;
        let (network, kernel, trainer) = match self {
            MnistPreset::GaussianGrouped => (grouped(32)?, gaussian, TrainerConfig { local_lr: 1.0, final_lr: 1e-3, ..base }),
            MnistPreset::CosineGrouped => (grouped(16)?, KernelFamily::CosineSimilarity, TrainerConfig { local_lr: 0.4, final_lr: 5e-3, ..base }),
            MnistPreset::Backprop => (plain, gaussian, TrainerConfig { method: Method::Backprop, final_lr: 5e-2, ..base }),
            MnistPreset::LastLayer => (plain, gaussian, TrainerConfig { method: Method::LastLayer, final_lr: 5e-2, ..base }),
        };
        Ok(RunSpec { network, kernel, trainer })
    }

    /// Ten-epoch Gaussian grp+div run on three layers of 256: 8 groups,
    /// local rate 2, readout rate 1e-2, decays after epochs 8 and 9.
    pub fn quick_spec(seed: u64) -> Result<RunSpec> {
        let mut spec = MnistPreset::GaussianGrouped.run_spec(256, 10, seed)?;
        spec.network = NetworkConfig::plain(784, vec![256; 3], 10).with_grouping(Some(GroupingSpec::new(8, 0.2, 1.0, true)?));
        spec.trainer.local_lr = 2.0;
        spec.trainer.final_lr = 1e-2;
        spec.trainer.lr_decay_epochs = vec![8, 9];
        Ok(spec)
    }
}
