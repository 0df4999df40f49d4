//! Fully connected network with optional per-layer grouping and divisive
//! normalization, caching every quantity the update rules consume.
//!
//! Per hidden layer the order of operations is: linear map (no bias) →
//! leaky ReLU → group statistics (seen by the local objective) → divisive
//! normalization (if enabled) → dropout. The readout is affine with a bias
//! and trained with softmax cross-entropy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::GroupingSpec;
use crate::numerics::{init_weights, matmul, Matrix, Rng};

#[inline]
pub fn lrelu(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        slope * x
    }
}

/// Derivative of [`lrelu`]; `1` at exactly zero.
#[inline]
pub fn lrelu_derivative(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        slope
    }
}

/// Per-sample grouped summary of a layer's activity.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupResponse {
    /// Activity minus its group mean.
    pub centered: Vec<f64>,
    /// Smoothed group variance, `delta/c + mean(centered^2)`; at least `delta/c`.
    pub u: Vec<f64>,
    /// `u^(1-p)` centered across groups.
    pub v: Vec<f64>,
}

impl GroupResponse {
    /// Divisively normalized activity `centered / u^p`.
    pub fn normalized(&self, p: f64) -> Vec<f64> {
        let c = self.centered.len() / self.u.len();
        self.centered
            .iter()
            .enumerate()
            .map(|(n, zc)| zc / self.u[n / c].powf(p))
            .collect()
    }
}

pub fn group_response(z: &[f64], spec: &GroupingSpec) -> Result<GroupResponse> {
    let groups = spec.groups;
    if groups == 0 || !z.len().is_multiple_of(groups) {
        return Err(Error::dim(
            "group_response",
            format!("width {} is not divisible by {} groups", z.len(), groups),
        ));
    }
    let c = z.len() / groups;
    let cf = c as f64;
    let mut centered = Vec::with_capacity(z.len());
    let mut u = Vec::with_capacity(groups);
    for block in z.chunks_exact(c) {
        let mean = block.iter().sum::<f64>() / cf;
        let mut ss = 0.0;
        for &x in block {
            let d = x - mean;
            centered.push(d);
            ss += d * d;
        }
        u.push(spec.delta / cf + ss / cf);
    }
    let powered: Vec<f64> = u.iter().map(|x| x.powf(1.0 - spec.p)).collect();
    let mean_pow = powered.iter().sum::<f64>() / groups as f64;
    let v = powered.iter().map(|x| x - mean_pow).collect();
    Ok(GroupResponse { centered, u, v })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub input_width: usize,
    pub hidden_widths: Vec<usize>,
    pub n_classes: usize,
    /// Negative-side slope of the leaky ReLU.
    pub slope: f64,
    /// One entry per hidden layer.
    pub grouping: Vec<Option<GroupingSpec>>,
    pub dropout: f64,
}

impl NetworkConfig {
    pub fn plain(input_width: usize, hidden_widths: Vec<usize>, n_classes: usize) -> Self {
        let grouping = vec![None; hidden_widths.len()];
        Self { input_width, hidden_widths, n_classes, slope: 0.01, grouping, dropout: 0.0 }
    }

    pub fn with_grouping(mut self, grouping: Option<GroupingSpec>) -> Self {
        self.grouping = vec![grouping; self.hidden_widths.len()];
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_widths.is_empty() {
            return Err(Error::InvalidArgument("network needs at least one hidden layer".into()));
        }
        if self.input_width == 0 || self.hidden_widths.contains(&0) {
            return Err(Error::InvalidArgument("layer widths must be >= 1".into()));
        }
        if self.n_classes < 2 {
            return Err(Error::InvalidArgument("readout needs >= 2 classes".into()));
        }
        if self.grouping.len() != self.hidden_widths.len() {
            return Err(Error::InvalidArgument(format!(
                "{} grouping entries for {} hidden layers",
                self.grouping.len(),
                self.hidden_widths.len()
            )));
        }
        for (g, &w) in self.grouping.iter().zip(&self.hidden_widths) {
            if let Some(g) = g {
                g.validate(Some(w))?;
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!("dropout must be in [0,1), got {}", self.dropout)));
        }
        Ok(())
    }

    /// Input width of hidden layer `k`.
    pub fn fan_in(&self, k: usize) -> usize {
        if k == 0 {
            self.input_width
        } else {
            self.hidden_widths[k - 1]
        }
    }

    pub fn has_grouping(&self) -> bool {
        self.grouping.iter().any(Option::is_some)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Affine output layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Readout {
    /// `n_classes x width`.
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Readout {
    pub fn zeros(width: usize, n_classes: usize) -> Self {
        Self { weights: Matrix::zeros(n_classes, width), bias: vec![0.0; n_classes] }
    }

    /// Logits for a batch (one sample per row).
    pub fn logits(&self, input: &Matrix) -> Result<Matrix> {
        if input.cols() != self.weights.cols() {
            return Err(Error::dim(
                "readout",
                format!("input width {} vs readout width {}", input.cols(), self.weights.cols()),
            ));
        }
        let mut out = matmul(input, &self.weights.transpose())?;
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(&self.bias) {
                *o += b;
            }
        }
        Ok(out)
    }
}

/// Logits `W_out z + b` for one sample.
pub fn readout_forward(readout: &Readout, z_last: &[f64]) -> Result<Vec<f64>> {
    if z_last.len() != readout.weights.cols() {
        return Err(Error::dim(
            "readout_forward",
            format!("input width {} vs readout width {}", z_last.len(), readout.weights.cols()),
        ));
    }
    Ok(readout
        .weights
        .iter_rows()
        .zip(&readout.bias)
        .map(|(w, b)| crate::numerics::dot(w, z_last) + b)
        .collect())
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `-log softmax(logits)[target]`, computed with log-sum-exp.
pub fn cross_entropy(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    lse - logits[target]
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Group statistics of a batch, one row per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupCache {
    pub centered: Matrix,
    pub u: Matrix,
    pub v: Matrix,
}

/// Everything one hidden layer computed for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerCache {
    /// Layer input (previous layer's output after dropout, or the data).
    pub input: Matrix,
    pub pre: Matrix,
    pub z: Matrix,
    pub group: Option<GroupCache>,
    /// Activity handed on before dropout: `centered / u^p` with divisive
    /// normalization, otherwise `z`.
    pub output: Matrix,
    /// Inverted-dropout multipliers (0 or `1/(1-rate)`), train mode only.
    pub mask: Option<Matrix>,
    /// `output` after dropout; the next layer's input.
    pub post: Matrix,
}

impl LayerCache {
    /// Vectors the local kernel compares: `v` with grouping, else `z`.
    pub fn features(&self) -> &Matrix {
        match &self.group {
            Some(g) => &g.v,
            None => &self.z,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.z.rows()
    }
}

#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub layers: Vec<LayerCache>,
    pub logits: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub config: NetworkConfig,
    /// Hidden weights, `width_k x width_{k-1}`.
    pub weights: Vec<Matrix>,
    pub readout: Readout,
}

impl Network {
    pub fn new(config: NetworkConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut weights = Vec::with_capacity(config.hidden_widths.len());
        for (k, &w) in config.hidden_widths.iter().enumerate() {
            weights.push(init_weights(config.fan_in(k), w, config.slope, rng)?);
        }
        let last = *config.hidden_widths.last().unwrap();
        // linear readout: gain 1
        let readout = Readout {
            weights: init_weights(last, config.n_classes, 1.0, rng)?,
            bias: vec![0.0; config.n_classes],
        };
        Ok(Self { config, weights, readout })
    }

    pub fn from_parts(config: NetworkConfig, weights: Vec<Matrix>, readout: Readout) -> Result<Self> {
        config.validate()?;
        if weights.len() != config.hidden_widths.len() {
            return Err(Error::dim("Network::from_parts", "wrong number of weight matrices"));
        }
        for (k, w) in weights.iter().enumerate() {
            if w.shape() != (config.hidden_widths[k], config.fan_in(k)) {
                return Err(Error::dim("Network::from_parts", format!("layer {k} has shape {:?}", w.shape())));
            }
        }
        let last = *config.hidden_widths.last().unwrap();
        if readout.weights.shape() != (config.n_classes, last) || readout.bias.len() != config.n_classes {
            return Err(Error::dim("Network::from_parts", "readout shape"));
        }
        Ok(Self { config, weights, readout })
    }

    pub fn n_hidden(&self) -> usize {
        self.weights.len()
    }

    /// Forward one hidden layer on a batch.
    pub fn forward_layer(&self, k: usize, input: &Matrix, mode: Mode, rng: &mut Rng) -> Result<LayerCache> {
        layer_forward(
            &self.weights[k],
            self.config.grouping[k].as_ref(),
            self.config.slope,
            if mode == Mode::Train { self.config.dropout } else { 0.0 },
            input,
            rng,
        )
    }

    pub fn forward(&self, x: &Matrix, mode: Mode, rng: &mut Rng) -> Result<ForwardPass> {
        if x.cols() != self.config.input_width {
            return Err(Error::dim(
                "forward",
                format!("input width {} vs network input {}", x.cols(), self.config.input_width),
            ));
        }
        let mut layers: Vec<LayerCache> = Vec::with_capacity(self.n_hidden());
        for k in 0..self.n_hidden() {
            let input = match layers.last() {
                Some(prev) => &prev.post,
                None => x,
            };
            let cache = self.forward_layer(k, input, mode, rng)?;
            layers.push(cache);
        }
        let logits = self.readout.logits(&layers.last().unwrap().post)?;
        Ok(ForwardPass { layers, logits })
    }

    /// Eval-mode logits.
    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        // eval mode never draws from the generator
        let mut unused = Rng::new(0);
        Ok(self.forward(x, Mode::Eval, &mut unused)?.logits)
    }
}

/// Forward pass of a single hidden layer with explicit weights.
pub fn layer_forward(
    weights: &Matrix,
    grouping: Option<&GroupingSpec>,
    slope: f64,
    dropout: f64,
    input: &Matrix,
    rng: &mut Rng,
) -> Result<LayerCache> {
    if input.cols() != weights.cols() {
        return Err(Error::dim(
            "layer_forward",
            format!("input width {} vs weight fan-in {}", input.cols(), weights.cols()),
        ));
    }
    let pre = matmul(input, &weights.transpose())?;
    let mut z = pre.clone();
    z.data_mut().iter_mut().for_each(|x| *x = lrelu(*x, slope));

    let (group, output) = match grouping {
        None => (None, z.clone()),
        Some(g) => {
            let m = z.rows();
            let width = z.cols();
            let mut centered = Matrix::zeros(m, width);
            let mut u = Matrix::zeros(m, g.groups);
            let mut v = Matrix::zeros(m, g.groups);
            let mut output = if g.divisive_normalization { Matrix::zeros(m, width) } else { z.clone() };
            for i in 0..m {
                let resp = group_response(z.row(i), g)?;
                if g.divisive_normalization {
                    output.row_mut(i).copy_from_slice(&resp.normalized(g.p));
                }
                centered.row_mut(i).copy_from_slice(&resp.centered);
                u.row_mut(i).copy_from_slice(&resp.u);
                v.row_mut(i).copy_from_slice(&resp.v);
            }
            (Some(GroupCache { centered, u, v }), output)
        }
    };

    let (mask, post) = if dropout > 0.0 {
        let keep = 1.0 / (1.0 - dropout);
        let mut mask = Matrix::zeros(output.rows(), output.cols());
        for x in mask.data_mut() {
            *x = if rng.uniform() < dropout { 0.0 } else { keep };
        }
        let mut post = output.clone();
        for (p, s) in post.data_mut().iter_mut().zip(mask.data()) {
            *p *= s;
        }
        (Some(mask), post)
    } else {
        (None, output.clone())
    };

    Ok(LayerCache { input: input.clone(), pre, z, group, output, mask, post })
}
