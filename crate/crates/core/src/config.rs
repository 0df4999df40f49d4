//! Flat `key = value` run configuration: built-in defaults, then an optional
//! file, then command-line overrides. Unknown keys are errors.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::kernels::{GroupingSpec, KernelFamily};
use crate::network::NetworkConfig;
use crate::trainer::{Method, RunSpec, TrainerConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Int,
    Float,
    Bool,
    Text,
    IntList,
}

impl Kind {
    fn describe(&self) -> &'static str {
        match self {
            Kind::Int => "a non-negative integer",
            Kind::Float => "a number",
            Kind::Bool => "true or false",
            Kind::Text => "text",
            Kind::IntList => "a comma-separated list of integers",
        }
    }
}

pub struct Key {
    pub name: &'static str,
    pub kind: Kind,
    pub default: &'static str,
    pub help: &'static str,
}

const fn key(name: &'static str, kind: Kind, default: &'static str, help: &'static str) -> Key {
    Key { name, kind, default, help }
}

/// Every recognized key. Defaults follow the MNIST Gaussian grp+div setup.
pub const KEYS: &[Key] = &[
    key("dataset", Kind::Text, "mnist", "mnist (IDX files), cifar10 (binary batches) or synthetic"),
    key("data_dir", Kind::Text, "", "directory with the dataset files"),
    key("synthetic_per_class", Kind::Int, "100", "samples per class for dataset=synthetic"),
    key("synthetic_dim", Kind::Int, "20", "input width for dataset=synthetic"),
    key("synthetic_classes", Kind::Int, "4", "classes for dataset=synthetic"),
    key("hidden_widths", Kind::IntList, "1024,1024,1024", "hidden layer widths"),
    key("slope", Kind::Float, "0.01", "leaky ReLU negative slope"),
    key("groups", Kind::Int, "32", "groups per hidden layer (0 disables grouping)"),
    key("group_p", Kind::Float, "0.2", "grouping exponent p"),
    key("group_delta", Kind::Float, "1.0", "grouping variance offset delta"),
    key("divisive_normalization", Kind::Bool, "true", "pass normalized activity to the next layer"),
    key("kernel", Kind::Text, "gaussian", "gaussian, cossim or linear"),
    key("sigma", Kind::Float, "5.0", "Gaussian kernel width"),
    key("method", Kind::Text, "phsic", "phsic, backprop or last-layer"),
    key("epochs", Kind::Int, "100", "training epochs"),
    key("batch_size", Kind::Int, "256", "samples per batch"),
    key("gamma", Kind::Float, "2.0", "weight of the label term"),
    key("local_lr", Kind::Float, "1.0", "initial learning rate of the hidden layers"),
    key("final_lr", Kind::Float, "0.001", "initial learning rate of the readout (and of backprop)"),
    key("momentum", Kind::Float, "0.95", "SGD momentum"),
    key("weight_decay_local", Kind::Float, "1e-7", "weight decay of the hidden layers"),
    key("weight_decay_final", Kind::Float, "1e-6", "weight decay of the readout (and of backprop)"),
    key("lr_decay_factor", Kind::Float, "0.25", "learning-rate multiplier at each decay epoch"),
    key("lr_decay_epochs", Kind::IntList, "50,75,90", "epochs at which rates are multiplied"),
    key("dropout", Kind::Float, "0.01", "dropout on hidden-layer outputs"),
    key("seed", Kind::Int, "0", "run seed"),
    key("validation_fraction", Kind::Float, "0.1", "share of the training set held out"),
    key("augment", Kind::Bool, "false", "random crop and flip (CIFAR-10 only)"),
    key("out_dir", Kind::Text, "", "directory for metrics.csv, summary.json and checkpoint.bin"),
];

pub fn find_key(name: &str) -> Option<&'static Key> {
    KEYS.iter().find(|k| k.name == name)
}

/// Resolved values as text, keyed by name.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfigMap {
    values: BTreeMap<&'static str, String>,
}

impl Default for ConfigMap {
    fn default() -> Self {
        Self { values: KEYS.iter().map(|k| (k.name, k.default.to_string())).collect() }
    }
}

fn normalize(name: &str) -> String {
    name.trim().replace('-', "_")
}

impl ConfigMap {
    /// Sets a key after checking that it exists and that the value parses.
    pub fn set(&mut self, name: &str, value: &str) -> Result<()> {
        let name = normalize(name);
        let k = find_key(&name).ok_or_else(|| Error::UnknownKey(name.clone()))?;
        let value = value.trim().to_string();
        check_value(k, &value)?;
        self.values.insert(k.name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> &str {
        self.values.get(name).map(String::as_str).unwrap_or_else(|| panic!("unregistered key {name}"))
    }

    /// Applies a flat `key = value` text; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", lineno + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text)
    }

    fn int(&self, name: &str) -> usize {
        self.get(name).parse().expect("validated on set")
    }

    fn float(&self, name: &str) -> f64 {
        self.get(name).parse().expect("validated on set")
    }

    fn boolean(&self, name: &str) -> bool {
        parse_bool(self.get(name)).expect("validated on set")
    }

    fn list(&self, name: &str) -> Vec<usize> {
        parse_list(self.get(name)).expect("validated on set")
    }

    /// Every resolved key as JSON, typed.
    pub fn to_json(&self) -> serde_json::Value {
        let mut obj = serde_json::Map::new();
        for k in KEYS {
            let v = match k.kind {
                Kind::Int => serde_json::json!(self.int(k.name)),
                Kind::Float => serde_json::json!(self.float(k.name)),
                Kind::Bool => serde_json::json!(self.boolean(k.name)),
                Kind::Text => serde_json::json!(self.get(k.name)),
                Kind::IntList => serde_json::json!(self.list(k.name)),
            };
            obj.insert(k.name.to_string(), v);
        }
        serde_json::Value::Object(obj)
    }

    /// Flat text that [`ConfigMap::apply_text`] reads back to the same map.
    pub fn to_text(&self) -> String {
        KEYS.iter().map(|k| format!("{} = {}\n", k.name, self.get(k.name))).collect()
    }

    pub fn kernel(&self) -> Result<KernelFamily> {
        match self.get("kernel") {
            "gaussian" => KernelFamily::gaussian(self.float("sigma")),
            "cossim" => Ok(KernelFamily::CosineSimilarity),
            "linear" => Ok(KernelFamily::Linear),
            other => Err(Error::Config(format!("unknown kernel `{other}`"))),
        }
    }

    pub fn grouping(&self) -> Result<Option<GroupingSpec>> {
        match self.int("groups") {
            0 => Ok(None),
            g => Ok(Some(GroupingSpec::new(g, self.float("group_p"), self.float("group_delta"), self.boolean("divisive_normalization"))?)),
        }
    }

    pub fn trainer(&self) -> Result<TrainerConfig> {
        let method: Method = self.get("method").parse().map_err(|_| Error::Config(format!("unknown method `{}`", self.get("method"))))?;
        let t = TrainerConfig {
            method,
            epochs: self.int("epochs"),
            batch_size: self.int("batch_size"),
            gamma: self.float("gamma"),
            local_lr: self.float("local_lr"),
            final_lr: self.float("final_lr"),
            momentum: self.float("momentum"),
            weight_decay_local: self.float("weight_decay_local"),
            weight_decay_final: self.float("weight_decay_final"),
            lr_decay_factor: self.float("lr_decay_factor"),
            lr_decay_epochs: self.list("lr_decay_epochs"),
            dropout: self.float("dropout"),
            seed: self.get("seed").parse().expect("validated on set"),
            validation_fraction: self.float("validation_fraction"),
            augment: self.boolean("augment"),
        };
        t.validate()?;
        Ok(t)
    }

    /// Network for a given input width and class count.
    pub fn network(&self, input_width: usize, n_classes: usize) -> Result<NetworkConfig> {
        let mut net = NetworkConfig::plain(input_width, self.list("hidden_widths"), n_classes).with_grouping(self.grouping()?);
        net.slope = self.float("slope");
        net.dropout = self.float("dropout");
        net.validate()?;
        Ok(net)
    }

    pub fn run_spec(&self, input_width: usize, n_classes: usize) -> Result<RunSpec> {
        let trainer = self.trainer()?;
        if trainer.method == Method::Backprop && self.int("groups") != 0 {
            return Err(Error::Config("backprop runs need groups = 0".into()));
        }
        Ok(RunSpec { network: self.network(input_width, n_classes)?, kernel: self.kernel()?, trainer })
    }

    /// Dataset directory; required unless the data are synthetic.
    pub fn data_dir(&self) -> Result<Option<PathBuf>> {
        let ds = self.get("dataset");
        match ds {
            "synthetic" => Ok(None),
            "mnist" | "cifar10" => {
                let d = self.get("data_dir");
                if d.is_empty() {
                    Err(Error::Config(format!("missing dataset path: set data_dir for dataset `{ds}`")))
                } else {
                    Ok(Some(PathBuf::from(d)))
                }
            }
            other => Err(Error::Config(format!("unknown dataset `{other}`"))),
        }
    }

    pub fn out_dir(&self) -> Option<PathBuf> {
        let d = self.get("out_dir");
        (!d.is_empty()).then(|| PathBuf::from(d))
    }
}

fn parse_bool(s: &str) -> Option<bool> {
    match s {
        "true" | "1" | "yes" => Some(true),
        "false" | "0" | "no" => Some(false),
        _ => None,
    }
}

fn parse_list(s: &str) -> Option<Vec<usize>> {
    if s.is_empty() {
        return Some(Vec::new());
    }
    s.split(',').map(|x| x.trim().parse().ok()).collect()
}

fn check_value(k: &Key, value: &str) -> Result<()> {
    let ok = match k.kind {
        Kind::Int => value.parse::<u64>().is_ok(),
        Kind::Float => value.parse::<f64>().map(f64::is_finite).unwrap_or(false),
        Kind::Bool => parse_bool(value).is_some(),
        Kind::Text => true,
        Kind::IntList => parse_list(value).is_some(),
    };
    if ok {
        Ok(())
    } else {
        Err(Error::TypeMismatch { key: k.name.to_string(), expected: k.kind.describe(), value: value.to_string() })
    }
}
