//! Point-by-point versions of the Gaussian-family rules: smoothed temporal
//! differences, the memory ODE, the b1/b2/b3 third-factor circuit and the
//! four online update modes.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::kernels::{KernelFamily, KernelSpec, LabelKernel};
use crate::network::{layer_forward, LayerCache};
use crate::numerics::{norm, sq_dist, Matrix, Rng};
use crate::rules::{layer_gradient, pair_delta, SampleView, ThirdFactor};

/// Continuous smoothing kernel `-(t-c1) exp(-c2|t-c1|)` for `t >= 0`,
/// scaled so that its step response peaks at 1 (at `t = c1`).
pub fn smoothing_kernel(t: f64, c1: f64, c2: f64) -> f64 {
    if t < 0.0 {
        return 0.0;
    }
    let s = c2 * c1;
    let peak = (1.0 - (-s).exp() * (1.0 + s)) / (c2 * c2);
    -(t - c1) * (-c2 * (t - c1).abs()).exp() / peak
}

/// Discrete taps of the smoothing kernel at `t_k = k dt`.
///
/// The untruncated kernel does not integrate to zero, so a constant input
/// would leak through. The taps are cut where the running sum first drops
/// to zero and the last tap is set so they sum to exactly zero; the
/// positive lobe is then scaled so a unit step peaks at exactly 1.
#[derive(Clone, Debug, PartialEq)]
pub struct SmoothingKernel {
    pub c1: f64,
    pub c2: f64,
    pub dt: f64,
    taps: Vec<f64>,
}

impl SmoothingKernel {
    pub fn new(c1: f64, c2: f64, dt: f64) -> Result<Self> {
        if !(c1 > 0.0 && c2 > 0.0 && dt > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "smoothing kernel needs c1, c2, dt > 0 (got {c1}, {c2}, {dt})"
            )));
        }
        let mut taps = Vec::new();
        let mut cum = 0.0;
        for k in 0.. {
            let t = k as f64 * dt;
            let w = -(t - c1) * (-c2 * (t - c1).abs()).exp();
            if t > c1 && cum + w <= 0.0 {
                taps.push(-cum);
                break;
            }
            cum += w;
            taps.push(w);
            if k > 1_000_000 {
                return Err(Error::InvalidArgument("smoothing kernel support is too long".into()));
            }
        }
        let peak: f64 = taps.iter().filter(|w| **w > 0.0).sum();
        taps.iter_mut().for_each(|w| *w /= peak);
        Ok(Self { c1, c2, dt, taps })
    }

    /// Defaults in units of the step: `c1 = 2 dt`, `c2 = 1/(4 dt)`.
    pub fn with_dt(dt: f64) -> Result<Self> {
        Self::new(2.0 * dt, 1.0 / (4.0 * dt), dt)
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    pub fn support(&self) -> usize {
        self.taps.len()
    }
}

/// Causal convolution of a trace with the kernel taps; samples before the
/// start are taken equal to `trace[0]`.
pub fn temporal_difference(trace: &[f64], kernel: &SmoothingKernel) -> Vec<f64> {
    let taps = kernel.taps();
    (0..trace.len())
        .map(|t| {
            taps.iter()
                .enumerate()
                .map(|(k, w)| w * trace[t.saturating_sub(k)])
                .sum()
        })
        .collect()
}

/// Streaming form of [`temporal_difference`] for vector-valued traces.
#[derive(Clone, Debug)]
pub struct TemporalFilter {
    kernel: SmoothingKernel,
    history: Vec<Vec<f64>>,
    head: usize,
}

impl TemporalFilter {
    pub fn new(kernel: SmoothingKernel) -> Self {
        Self { kernel, history: Vec::new(), head: 0 }
    }

    /// Pushes the next value and returns the filtered difference.
    pub fn push(&mut self, x: &[f64]) -> Vec<f64> {
        let len = self.kernel.support();
        if self.history.is_empty() {
            self.history = vec![x.to_vec(); len];
            self.head = 0;
        } else {
            self.head = (self.head + 1) % len;
            self.history[self.head].copy_from_slice(x);
        }
        let mut out = vec![0.0; x.len()];
        for (k, w) in self.kernel.taps().iter().enumerate() {
            let past = &self.history[(self.head + len - k) % len];
            for (o, p) in out.iter_mut().zip(past) {
                *o += w * p;
            }
        }
        out
    }
}

/// Forward-Euler step of `w' = (z-mu)^3 - tanh(|z-mu|^3) w - c w`.
pub fn memory_ode_step(omega: f64, z: f64, mu: f64, c: f64, dt: f64) -> f64 {
    let d3 = (z - mu).powi(3);
    omega + dt * (d3 - d3.abs().tanh() * omega - c * omega)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CircuitConfig {
    pub sigma: f64,
    pub gamma: f64,
    /// Weight of the newest `b2` in the `b3` running average.
    pub beta: f64,
    /// Weight of the newest sample in the activity means used by the
    /// mean-based modes.
    pub mean_rate: f64,
    pub c1: f64,
    pub c2: f64,
    pub dt: f64,
    /// Leak of the memory ODE.
    pub leak: f64,
}

impl CircuitConfig {
    pub fn new(sigma: f64, gamma: f64) -> Self {
        let dt = 1.0;
        Self { sigma, gamma, beta: 0.9, mean_rate: 0.1, c1: 2.0 * dt, c2: 1.0 / (4.0 * dt), dt, leak: 1e-3 }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(what.to_string()));
        if !(self.sigma > 0.0) {
            return bad("circuit sigma must be > 0");
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return bad("beta must be in (0,1)");
        }
        if !(self.mean_rate > 0.0 && self.mean_rate <= 1.0) {
            return bad("mean_rate must be in (0,1]");
        }
        if !(self.c1 > 0.0 && self.c2 > 0.0 && self.dt > 0.0) {
            return bad("c1, c2 and dt must be > 0");
        }
        if !(self.leak >= 0.0) {
            return bad("memory leak must be >= 0");
        }
        Ok(())
    }

    pub fn smoothing(&self) -> Result<SmoothingKernel> {
        SmoothingKernel::new(self.c1, self.c2, self.dt)
    }
}

/// Signals computed for one pair of consecutive samples.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CircuitSignals {
    /// Squared norm of the feature difference.
    pub b1: f64,
    /// Uncentered third factor `gamma k_y - 2 k_z`.
    pub b2: f64,
    /// Running baseline of `b2`.
    pub b3: f64,
    /// `k_z = exp(-b1 / 2 sigma^2)`.
    pub kernel: f64,
    /// `-(b2 - b3) k_z / sigma^2`.
    pub m: f64,
    /// `m` times the per-group difference of `v`, for grouped kernels.
    pub per_group: Option<Vec<f64>>,
}

impl CircuitSignals {
    pub fn third_factor(&self, gamma_ky: f64) -> ThirdFactor {
        ThirdFactor {
            i: 0,
            j: 0,
            global: gamma_ky,
            local: 2.0 * self.kernel,
            kernel: self.kernel,
            m: self.m,
            per_group: self.per_group.clone(),
        }
    }
}

/// Owned copy of one sample's cached layer quantities.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub input: Vec<f64>,
    pub pre: Vec<f64>,
    pub z: Vec<f64>,
    pub centered: Option<Vec<f64>>,
    pub u: Option<Vec<f64>>,
    pub v: Option<Vec<f64>>,
}

impl Sample {
    pub fn from_cache(cache: &LayerCache, s: usize) -> Self {
        let g = cache.group.as_ref();
        Self {
            input: cache.input.row(s).to_vec(),
            pre: cache.pre.row(s).to_vec(),
            z: cache.z.row(s).to_vec(),
            centered: g.map(|g| g.centered.row(s).to_vec()),
            u: g.map(|g| g.u.row(s).to_vec()),
            v: g.map(|g| g.v.row(s).to_vec()),
        }
    }

    pub fn view(&self) -> SampleView<'_> {
        SampleView {
            input: &self.input,
            pre: &self.pre,
            z: &self.z,
            centered: self.centered.as_deref(),
            u: self.u.as_deref(),
            v: self.v.as_deref(),
        }
    }

    pub fn features(&self) -> &[f64] {
        self.v.as_deref().unwrap_or(&self.z)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum OnlineMode {
    /// Difference of the current and the previous sample.
    Pairwise,
    /// Previous sample replaced by running means (plain Gaussian).
    MeanBased,
    /// Difference of pre/post products against the product of means (grouped).
    ProductDifference,
    /// Hebbian term of each sample paired with the third factors on both
    /// sides of it; emitted one sample late (grouped).
    Separated,
}

impl OnlineMode {
    pub fn check(&self, spec: &KernelSpec) -> Result<()> {
        let ok = match (self, spec.grouping.is_some()) {
            (_, _) if !spec.is_gaussian() => false,
            (OnlineMode::Pairwise, _) => true,
            (OnlineMode::MeanBased, grouped) => !grouped,
            (OnlineMode::ProductDifference | OnlineMode::Separated, grouped) => grouped,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::UnsupportedKernel { kernel: spec.to_string(), op: self.name() })
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            OnlineMode::Pairwise => "pairwise",
            OnlineMode::MeanBased => "mean-based",
            OnlineMode::ProductDifference => "product-difference",
            OnlineMode::Separated => "separated",
        }
    }
}

impl std::str::FromStr for OnlineMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pairwise" => Ok(OnlineMode::Pairwise),
            "mean-based" => Ok(OnlineMode::MeanBased),
            "product-difference" => Ok(OnlineMode::ProductDifference),
            "separated" => Ok(OnlineMode::Separated),
            _ => Err(Error::InvalidArgument(format!("unknown online mode `{s}`"))),
        }
    }
}

#[derive(Clone, Debug)]
struct Pending {
    post: Vec<f64>,
    input: Vec<f64>,
    per_group: Vec<f64>,
}

/// Streaming state of one layer.
#[derive(Clone, Debug)]
pub struct OnlineCircuitState {
    pub config: CircuitConfig,
    pub kernel: KernelSpec,
    pub slope: f64,
    b3: Option<f64>,
    baseline: Option<f64>,
    prev: Option<Sample>,
    mu_z: Option<Vec<f64>>,
    mu_x: Option<Vec<f64>>,
    mu_q: Option<Vec<f64>>,
    pending: Option<Pending>,
    last: Option<CircuitSignals>,
}

impl OnlineCircuitState {
    pub fn new(config: CircuitConfig, kernel: KernelSpec, slope: f64) -> Result<Self> {
        config.validate()?;
        match kernel.family {
            KernelFamily::Gaussian { sigma } if sigma == config.sigma => {}
            KernelFamily::Gaussian { .. } => {
                return Err(Error::InvalidArgument("circuit sigma differs from the kernel sigma".into()))
            }
            _ => return Err(Error::UnsupportedKernel { kernel: kernel.to_string(), op: "online circuit" }),
        }
        Ok(Self {
            config,
            kernel,
            slope,
            b3: None,
            baseline: None,
            prev: None,
            mu_z: None,
            mu_x: None,
            mu_q: None,
            pending: None,
            last: None,
        })
    }

    /// Replaces the running `b3` by a fixed value, e.g. the exact batch
    /// centering `gamma mean(k_y) - 2 mean(k_z)`. `None` restores the EMA.
    pub fn set_baseline(&mut self, baseline: Option<f64>) {
        self.baseline = baseline;
    }

    pub fn b3(&self) -> Option<f64> {
        self.b3
    }

    pub fn previous(&self) -> Option<&Sample> {
        self.prev.as_ref()
    }

    pub fn last_signals(&self) -> Option<&CircuitSignals> {
        self.last.as_ref()
    }

    pub fn means(&self) -> (Option<&[f64]>, Option<&[f64]>) {
        (self.mu_z.as_deref(), self.mu_x.as_deref())
    }

    /// Records a sample as the new "previous" one and folds it into the
    /// running means, without producing an update.
    pub fn observe(&mut self, sample: Sample) -> Result<()> {
        let rate = self.config.mean_rate;
        let ema = |mu: &mut Option<Vec<f64>>, x: &[f64]| match mu {
            Some(m) => m.iter_mut().zip(x).for_each(|(m, x)| *m += rate * (x - *m)),
            None => *mu = Some(x.to_vec()),
        };
        ema(&mut self.mu_z, &sample.z);
        ema(&mut self.mu_x, &sample.input);
        if let Some(g) = &self.kernel.grouping {
            let q = sample.view().grouped_post(g, self.slope)?;
            ema(&mut self.mu_q, &q);
        }
        self.prev = Some(sample);
        Ok(())
    }

    /// Third factor between `current` and the previous sample. Advances `b3`.
    pub fn third_factor_stream(&mut self, current: &Sample, label_kernel: f64) -> Result<CircuitSignals> {
        let prev = self.prev.as_ref().ok_or(Error::Uninitialized("no previous sample"))?;
        let sigma = self.config.sigma;
        let b1 = sq_dist(current.features(), prev.features());
        let kernel = (-b1 / (2.0 * sigma * sigma)).exp();
        let b2 = self.config.gamma * label_kernel - 2.0 * kernel;
        let beta = self.config.beta;
        let ema = match self.b3 {
            Some(b3) => beta * b2 + (1.0 - beta) * b3,
            None => b2,
        };
        self.b3 = Some(ema);
        let b3 = self.baseline.unwrap_or(ema);
        let m = -(b2 - b3) * kernel / (sigma * sigma);
        let per_group = match (&current.v, &prev.v) {
            (Some(a), Some(b)) => Some(a.iter().zip(b).map(|(x, y)| m * (x - y)).collect()),
            _ => None,
        };
        let signals = CircuitSignals { b1, b2, b3, kernel, m, per_group };
        self.last = Some(signals.clone());
        Ok(signals)
    }

    /// Weight change produced by the arrival of `current`; then `current`
    /// becomes the previous sample. In [`OnlineMode::Separated`] the change
    /// returned belongs to the previous sample.
    pub fn step(&mut self, current: Sample, label_kernel: f64, mode: OnlineMode) -> Result<Matrix> {
        mode.check(&self.kernel)?;
        let signals = self.third_factor_stream(&current, label_kernel)?;
        let dw = self.update_for(&current, &signals, label_kernel, mode)?;
        self.observe(current)?;
        Ok(dw)
    }

    fn update_for(&mut self, cur: &Sample, signals: &CircuitSignals, label_kernel: f64, mode: OnlineMode) -> Result<Matrix> {
        let prev = self.prev.as_ref().ok_or(Error::Uninitialized("no previous sample"))?;
        let out_w = cur.z.len();
        let in_w = cur.input.len();
        match mode {
            OnlineMode::Pairwise => {
                let tf = signals.third_factor(self.config.gamma * label_kernel);
                pair_delta(&self.kernel, &cur.view(), &prev.view(), &tf, self.slope)
            }
            OnlineMode::MeanBased => {
                let (mu_z, mu_x) = match (&self.mu_z, &self.mu_x) {
                    (Some(z), Some(x)) => (z, x),
                    _ => return Err(Error::Uninitialized("activity means")),
                };
                let mut dw = Matrix::zeros(out_w, in_w);
                for n in 0..out_w {
                    let post = signals.m * (cur.z[n] - mu_z[n]) * crate::network::lrelu_derivative(cur.pre[n], self.slope);
                    for (w, (x, mx)) in dw.row_mut(n).iter_mut().zip(cur.input.iter().zip(mu_x)) {
                        *w = post * (x - mx);
                    }
                }
                Ok(dw)
            }
            OnlineMode::ProductDifference => {
                let g = self.kernel.grouping.expect("checked by mode");
                let (mu_q, mu_x) = match (&self.mu_q, &self.mu_x) {
                    (Some(q), Some(x)) => (q, x),
                    _ => return Err(Error::Uninitialized("activity means")),
                };
                let q = cur.view().grouped_post(&g, self.slope)?;
                let per_group = signals.per_group.as_ref().ok_or(Error::Uninitialized("group signals"))?;
                let c = out_w / g.groups;
                let scale = 2.0 * (1.0 - g.p) / c as f64;
                let mut dw = Matrix::zeros(out_w, in_w);
                for n in 0..out_w {
                    let mg = scale * per_group[n / c];
                    for (w, (x, mx)) in dw.row_mut(n).iter_mut().zip(cur.input.iter().zip(mu_x)) {
                        *w = mg * (q[n] * x - mu_q[n] * mx);
                    }
                }
                Ok(dw)
            }
            OnlineMode::Separated => {
                let g = self.kernel.grouping.expect("checked by mode");
                let per_group = signals.per_group.clone().ok_or(Error::Uninitialized("group signals"))?;
                let prev_post = prev.view().grouped_post(&g, self.slope)?;
                // The previous sample's term with the factor that pairs it backwards
                // (zero for the first sample of the stream).
                let before = match self.pending.take() {
                    Some(p) => p.per_group,
                    None => vec![0.0; g.groups],
                };
                let diff: Vec<f64> = before.iter().zip(&per_group).map(|(a, b)| a - b).collect();
                let dw = separated_delta(&g, &prev_post, &prev.input, &diff);
                let post = cur.view().grouped_post(&g, self.slope)?;
                self.pending = Some(Pending { post, input: cur.input.clone(), per_group });
                Ok(dw)
            }
        }
    }

    /// Ends a stream in [`OnlineMode::Separated`]: the last sample only has a
    /// backward pairing.
    pub fn flush(&mut self) -> Option<Matrix> {
        let g = self.kernel.grouping?;
        let p = self.pending.take()?;
        Some(separated_delta(&g, &p.post, &p.input, &p.per_group))
    }
}

fn separated_delta(g: &crate::kernels::GroupingSpec, post: &[f64], input: &[f64], per_group: &[f64]) -> Matrix {
    let out_w = post.len();
    let c = out_w / g.groups;
    let scale = 2.0 * (1.0 - g.p) / c as f64;
    let mut dw = Matrix::zeros(out_w, input.len());
    for n in 0..out_w {
        let f = scale * per_group[n / c] * post[n];
        for (w, x) in dw.row_mut(n).iter_mut().zip(input) {
            *w = f * x;
        }
    }
    dw
}

/// Free-function form of [`OnlineCircuitState::step`].
pub fn online_update_step(state: &mut OnlineCircuitState, sample: Sample, label_kernel: f64, mode: OnlineMode) -> Result<Matrix> {
    state.step(sample, label_kernel, mode)
}

/// Weight trajectories of a single layer trained on the same sample
/// sequence in pairwise streaming mode and with batches of two.
#[derive(Clone, Debug)]
pub struct TrajectoryComparison {
    /// Largest entry-wise weight difference after each step.
    pub max_diff: Vec<f64>,
    pub batch_weights: Matrix,
    pub stream_weights: Matrix,
}

impl TrajectoryComparison {
    pub fn worst(&self) -> f64 {
        self.max_diff.iter().cloned().fold(0.0, f64::max)
    }
}

/// Trains one layer twice on `x` (rows in order): with the batch gradient
/// on disjoint consecutive pairs at rate `lr`, and by streaming the samples
/// through an [`OnlineCircuitState`] in pairwise mode at rate `lr / 2`
/// (`-G = (2/m^2) dW` for `m = 2`). The stream uses exact pair centering.
#[allow(clippy::too_many_arguments)]
pub fn compare_stream_with_batch(
    kernel: &KernelSpec,
    initial: &Matrix,
    x: &Matrix,
    labels: &[usize],
    n_classes: usize,
    gamma: f64,
    slope: f64,
    lr: f64,
) -> Result<TrajectoryComparison> {
    let sigma = match kernel.family {
        KernelFamily::Gaussian { sigma } => sigma,
        _ => return Err(Error::UnsupportedKernel { kernel: kernel.to_string(), op: "compare_stream_with_batch" }),
    };
    if x.rows() != labels.len() || x.rows() < 2 {
        return Err(Error::dim("compare_stream_with_batch", format!("{} rows, {} labels", x.rows(), labels.len())));
    }
    let mut config = CircuitConfig::new(sigma, gamma);
    config.mean_rate = 1.0;
    let grouping = kernel.grouping.as_ref();
    let mut rng = Rng::new(0);

    let mut wb = initial.clone();
    let mut ws = initial.clone();
    let mut max_diff = Vec::new();
    for pair in 0..x.rows() / 2 {
        let idx = [2 * pair, 2 * pair + 1];
        let xp = x.select_rows(&idx);
        let lp = [labels[idx[0]], labels[idx[1]]];

        let cache = layer_forward(&wb, grouping, slope, 0.0, &xp, &mut rng)?;
        let ky = LabelKernel::Balanced.matrix(&lp, n_classes)?;
        let (grad, _) = layer_gradient(kernel, &cache, &ky, gamma, slope)?;
        wb.add_scaled(&grad, -lr)?;

        // A fresh circuit per pair: the two samples arrive one after another.
        let mut state = OnlineCircuitState::new(config, *kernel, slope)?;
        let cs = layer_forward(&ws, grouping, slope, 0.0, &xp, &mut rng)?;
        let first = Sample::from_cache(&cs, 0);
        let second = Sample::from_cache(&cs, 1);
        let kz = (-sq_dist(first.features(), second.features()) / (2.0 * sigma * sigma)).exp();
        let mean_z = (1.0 + kz) / 2.0;
        state.set_baseline(Some(gamma * ky.mean - 2.0 * mean_z));
        state.observe(first)?;
        let k_y = ky.values.get(0, 1);
        let dw = state.step(second, k_y, OnlineMode::Pairwise)?;
        ws.add_scaled(&dw, lr / 2.0)?;

        let diff = wb.sub(&ws)?.max_abs();
        max_diff.push(diff);
    }
    Ok(TrajectoryComparison { max_diff, batch_weights: wb, stream_weights: ws })
}

/// One row of a continuous-time stream simulation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TraceRow {
    pub t: f64,
    pub b1: f64,
    pub b2: f64,
    pub b3: f64,
    #[serde(rename = "M")]
    pub m: f64,
    pub norm_dw: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StreamSimulation {
    /// Steps each sample is held.
    pub hold_steps: usize,
    /// Steps of zero input between samples.
    pub gap_steps: usize,
    /// Feed the filter the cube root of the memory variable instead of the
    /// raw activity, so that differences survive the gaps.
    pub use_memory: bool,
    pub learning_rate: f64,
}

impl Default for StreamSimulation {
    fn default() -> Self {
        Self { hold_steps: 20, gap_steps: 0, use_memory: false, learning_rate: 0.0 }
    }
}

/// Simulates one plain Gaussian layer receiving samples as piecewise
/// constant inputs in steps of `dt`. Activity and input differences come
/// from the smoothing filter, the third factor from b1/b2/b3, and the
/// update is `M dz dx^T` per step.
pub fn simulate_stream(
    weights: &Matrix,
    x: &Matrix,
    labels: &[usize],
    n_classes: usize,
    config: &CircuitConfig,
    slope: f64,
    sim: &StreamSimulation,
) -> Result<(Vec<TraceRow>, Matrix)> {
    config.validate()?;
    if x.rows() != labels.len() {
        return Err(Error::dim("simulate_stream", format!("{} rows, {} labels", x.rows(), labels.len())));
    }
    if sim.hold_steps == 0 {
        return Err(Error::InvalidArgument("hold_steps must be >= 1".into()));
    }
    let kernel = config.smoothing()?;
    let mut fz = TemporalFilter::new(kernel.clone());
    let mut fx = TemporalFilter::new(kernel);
    let sigma = config.sigma;
    let mut w = weights.clone();
    let mut rng = Rng::new(0);
    let width = w.rows();
    let mut omega_z = vec![0.0; width];
    let mut omega_x = vec![0.0; x.cols()];
    let mut b3: Option<f64> = None;
    let mut rows = Vec::new();
    let mut step = 0usize;
    let period = sim.hold_steps + sim.gap_steps;
    let zero = vec![0.0; x.cols()];
    for s in 0..x.rows() {
        let k_y = if s == 0 {
            0.0
        } else {
            LabelKernel::Balanced.eval(labels[s], labels[s - 1], n_classes)?
        };
        for phase in 0..period {
            let input: &[f64] = if phase < sim.hold_steps { x.row(s) } else { &zero };
            let xi = Matrix::new(1, input.len(), input.to_vec())?;
            let z = layer_forward(&w, None, slope, 0.0, &xi, &mut rng)?.z.into_data();
            let (zs, xs): (Vec<f64>, Vec<f64>) = if sim.use_memory {
                for (o, v) in omega_z.iter_mut().zip(&z) {
                    *o = memory_ode_step(*o, *v, 0.0, config.leak, config.dt);
                }
                for (o, v) in omega_x.iter_mut().zip(input) {
                    *o = memory_ode_step(*o, *v, 0.0, config.leak, config.dt);
                }
                (omega_z.iter().map(|o| o.cbrt()).collect(), omega_x.iter().map(|o| o.cbrt()).collect())
            } else {
                (z, input.to_vec())
            };
            let dz = fz.push(&zs);
            let dx = fx.push(&xs);
            let b1 = norm(&dz).powi(2);
            let kz = (-b1 / (2.0 * sigma * sigma)).exp();
            let b2 = config.gamma * k_y - 2.0 * kz;
            let b3v = match b3 {
                Some(b) => config.beta * b2 + (1.0 - config.beta) * b,
                None => b2,
            };
            b3 = Some(b3v);
            let m = -(b2 - b3v) * kz / (sigma * sigma);
            let mut dw = Matrix::zeros(width, dx.len());
            for n in 0..width {
                let f = m * dz[n];
                for (d, xv) in dw.row_mut(n).iter_mut().zip(&dx) {
                    *d = f * xv;
                }
            }
            if sim.learning_rate != 0.0 {
                w.add_scaled(&dw, sim.learning_rate)?;
            }
            rows.push(TraceRow { t: step as f64 * config.dt, b1, b2, b3: b3v, m, norm_dw: dw.frobenius_sq().sqrt() });
            step += 1;
        }
    }
    Ok((rows, w))
}

/// Writes a simulation trace as CSV with header `t,b1,b2,b3,M,norm_dw`.
pub fn write_trace<W: std::io::Write>(rows: &[TraceRow], out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    for r in rows {
        wtr.serialize(r).map_err(|e| Error::Csv(e.to_string()))?;
    }
    wtr.flush().map_err(|e| Error::Csv(e.to_string()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::GroupingSpec;

    #[test]
    fn continuous_kernel_values() {
        assert_eq!(smoothing_kernel(-0.5, 2.0, 0.25), 0.0);
        assert_eq!(smoothing_kernel(2.0, 2.0, 0.25), 0.0);
        assert!(smoothing_kernel(1.0, 2.0, 0.25) > 0.0);
        assert!(smoothing_kernel(3.0, 2.0, 0.25) < 0.0);
    }

    #[test]
    fn continuous_step_response_peaks_at_one() {
        let (c1, c2) = (2.0, 0.25);
        let h = 1e-4;
        let integral: f64 = (0..(c1 / h) as usize).map(|k| smoothing_kernel((k as f64 + 0.5) * h, c1, c2) * h).sum();
        assert!((integral - 1.0).abs() < 1e-6, "{integral}");
    }

    #[test]
    fn taps_sum_to_zero_and_peak_to_one() {
        for dt in [0.1, 0.5, 1.0, 3.0] {
            let k = SmoothingKernel::with_dt(dt).unwrap();
            assert!(k.taps().iter().sum::<f64>().abs() < 1e-12);
            let mut cum = 0.0;
            let mut peak = f64::MIN;
            for w in k.taps() {
                cum += w;
                peak = peak.max(cum);
            }
            assert!((peak - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_kernel_parameters() {
        assert!(SmoothingKernel::new(0.0, 1.0, 1.0).is_err());
        assert!(SmoothingKernel::new(1.0, -1.0, 1.0).is_err());
    }

    #[test]
    fn filter_matches_batch_convolution() {
        let k = SmoothingKernel::with_dt(1.0).unwrap();
        let trace: Vec<f64> = (0..40).map(|t| ((t as f64) * 0.3).sin()).collect();
        let batch = temporal_difference(&trace, &k);
        let mut f = TemporalFilter::new(k);
        for (t, x) in trace.iter().enumerate() {
            let y = f.push(&[*x]);
            assert!((y[0] - batch[t]).abs() < 1e-12);
        }
    }

    #[test]
    fn memory_ode_fixed_point() {
        assert_eq!(memory_ode_step(0.7, 1.3, 1.3, 0.0, 0.1), 0.7);
        let mut w = 0.0;
        for _ in 0..500 {
            w = memory_ode_step(w, 3.0, 0.0, 0.0, 0.1);
        }
        assert!((w - 27.0).abs() < 1e-6);
    }

    #[test]
    fn circuit_requires_previous_sample() {
        let spec = KernelSpec::plain(KernelFamily::Gaussian { sigma: 1.0 });
        let mut st = OnlineCircuitState::new(CircuitConfig::new(1.0, 2.0), spec, 0.01).unwrap();
        let s = Sample { input: vec![1.0], pre: vec![1.0], z: vec![1.0], centered: None, u: None, v: None };
        assert!(matches!(st.third_factor_stream(&s, 1.0), Err(Error::Uninitialized(_))));
    }

    #[test]
    fn circuit_rejects_non_gaussian_and_mode_mismatch() {
        let cos = KernelSpec::plain(KernelFamily::CosineSimilarity);
        assert!(matches!(
            OnlineCircuitState::new(CircuitConfig::new(1.0, 2.0), cos, 0.01),
            Err(Error::UnsupportedKernel { .. })
        ));
        let plain = KernelSpec::plain(KernelFamily::Gaussian { sigma: 1.0 });
        assert!(OnlineMode::Separated.check(&plain).is_err());
        assert!(OnlineMode::ProductDifference.check(&plain).is_err());
        let grp = KernelSpec::grouped(KernelFamily::Gaussian { sigma: 1.0 }, GroupingSpec::new(2, 0.2, 1.0, true).unwrap());
        assert!(OnlineMode::MeanBased.check(&grp).is_err());
        assert!(OnlineMode::Pairwise.check(&grp).is_ok());
    }

    #[test]
    fn same_label_identical_pair_signals() {
        let spec = KernelSpec::plain(KernelFamily::Gaussian { sigma: 1.0 });
        let mut st = OnlineCircuitState::new(CircuitConfig::new(1.0, 2.0), spec, 0.01).unwrap();
        let s = Sample { input: vec![1.0, 2.0], pre: vec![0.5], z: vec![0.5], centered: None, u: None, v: None };
        st.observe(s.clone()).unwrap();
        st.b3 = Some(0.4);
        let sig = st.third_factor_stream(&s, 1.0).unwrap();
        assert_eq!(sig.b1, 0.0);
        assert_eq!(sig.b2, 0.0);
        let b3 = 0.9 * 0.0 + 0.1 * 0.4;
        assert!((sig.b3 - b3).abs() < 1e-15);
        assert!((sig.m - b3).abs() < 1e-15);
    }
}
