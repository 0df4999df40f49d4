//! Layer-wise pHSIC objective, its exact weight gradient for every kernel,
//! the Gaussian two-point (three-factor) rules, a finite-difference oracle
//! and the backprop baseline.
//!
//! For one layer with kernel features `h_s` (the activity `z_s`, or the
//! grouped summary `v_s`) the objective is
//! `phsic(Z,Z) - gamma * phsic(Y,Z)`, whose gradient is
//! `(1/m^2) sum_ij c_ij dk(h_i,h_j)/dW` with the pair coefficient
//! `c_ij = 2 k°(z_i,z_j) - gamma k°(y_i,y_j)` (° = empirically centered).
//! The gradient is assembled by first collecting `dL/dh_s` per sample,
//! pushing it through the grouping and the nonlinearity, and finishing with
//! one product against the layer input.
//!
//! Weight updates move along `-lr * gradient`. A two-point update `dW_ij` is
//! the negated pair term `-c_ij dk_ij/dW`.

use crate::error::{Error, Result};
use crate::kernels::{phsic_estimate, GroupingSpec, KernelFamily, KernelMatrix, KernelSpec};
use crate::network::{cross_entropy, layer_forward, lrelu_derivative, softmax, ForwardPass, LayerCache, Network};
use crate::numerics::{matmul, norm, sq_dist, Matrix, Rng};

/// Both estimator terms of a layer objective.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LayerObjective {
    pub phsic_zz: f64,
    pub phsic_yz: f64,
    pub value: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpdateConfig {
    pub gamma: f64,
    pub learning_rate: f64,
    pub kernel: KernelSpec,
}

impl UpdateConfig {
    pub fn new(gamma: f64, learning_rate: f64, kernel: KernelSpec) -> Result<Self> {
        if !(gamma > 0.0) {
            return Err(Error::InvalidArgument(format!("gamma must be > 0, got {gamma}")));
        }
        Ok(Self { gamma, learning_rate, kernel })
    }
}

/// Objective from already-computed kernel matrices.
pub fn objective_from_kernels(kz: &KernelMatrix, ky: &KernelMatrix, gamma: f64) -> Result<LayerObjective> {
    let phsic_zz = phsic_estimate(kz, kz)?;
    let phsic_yz = phsic_estimate(ky, kz)?;
    Ok(LayerObjective { phsic_zz, phsic_yz, value: phsic_zz - gamma * phsic_yz })
}

/// `phsic(Z,Z) - gamma * phsic(Y,Z)` for a batch of kernel features.
pub fn objective_value(family: &KernelFamily, features: &Matrix, ky: &KernelMatrix, gamma: f64) -> Result<LayerObjective> {
    if features.rows() < 2 {
        return Err(Error::InvalidArgument("objective needs m >= 2".into()));
    }
    let kz = family.matrix(features)?;
    objective_from_kernels(&kz, ky, gamma)
}

/// Objective of a layer as a function of its weights, with the input held
/// fixed (dropout off). This is what the finite-difference oracle perturbs.
pub fn layer_objective(
    spec: &KernelSpec,
    weights: &Matrix,
    input: &Matrix,
    slope: f64,
    ky: &KernelMatrix,
    gamma: f64,
) -> Result<LayerObjective> {
    let cache = layer_forward(weights, spec.grouping.as_ref(), slope, 0.0, input, &mut Rng::new(0))?;
    objective_value(&spec.family, cache.features(), ky, gamma)
}

/// `dL/dh_s = (1/m^2) sum_ij c_ij dk(h_i,h_j)/dh_s` for every sample `s`.
///
/// With symmetric `c` and a symmetric kernel this is
/// `(2/m^2) sum_j c_sj d_1 k(h_s,h_j)`, where `d_1` differentiates the first
/// argument.
fn feature_gradient(family: &KernelFamily, h: &Matrix, coeff: &Matrix, k: &Matrix) -> Result<Matrix> {
    let m = h.rows();
    let d = h.cols();
    let scale = 2.0 / (m * m) as f64;
    match *family {
        KernelFamily::Gaussian { sigma } => {
            // d_1 k(a,b) = -k(a,b) (a - b) / sigma^2
            let mut w = coeff.clone();
            for (x, kv) in w.data_mut().iter_mut().zip(k.data()) {
                *x *= kv;
            }
            let wh = matmul(&w, h)?;
            let mut out = Matrix::zeros(m, d);
            let f = -scale / (sigma * sigma);
            for s in 0..m {
                let rs: f64 = w.row(s).iter().sum();
                let hs = h.row(s);
                let whs = wh.row(s);
                for (o, (x, y)) in out.row_mut(s).iter_mut().zip(hs.iter().zip(whs)) {
                    *o = f * (rs * x - y);
                }
            }
            Ok(out)
        }
        KernelFamily::Linear => {
            // d_1 k(a,b) = b
            let mut out = matmul(coeff, h)?;
            out.scale(scale);
            Ok(out)
        }
        KernelFamily::CosineSimilarity => {
            // d_1 k(a,b) = b/(|a||b|) - k(a,b) a/|a|^2
            let norms: Vec<f64> = h.iter_rows().map(norm).collect();
            if norms.contains(&0.0) {
                return Err(Error::ZeroNorm);
            }
            let mut scaled_h = h.clone();
            for s in 0..m {
                let inv = 1.0 / norms[s];
                scaled_h.row_mut(s).iter_mut().for_each(|x| *x *= inv);
            }
            let ch = matmul(coeff, &scaled_h)?;
            let mut out = Matrix::zeros(m, d);
            for s in 0..m {
                let ck: f64 = coeff.row(s).iter().zip(k.row(s)).map(|(c, kv)| c * kv).sum();
                let ns = norms[s];
                let hs = h.row(s);
                let chs = ch.row(s);
                for (o, (x, y)) in out.row_mut(s).iter_mut().zip(hs.iter().zip(chs)) {
                    *o = scale * (y / ns - ck * x / (ns * ns));
                }
            }
            Ok(out)
        }
    }
}

/// Pushes `dL/dv` back to `dL/dz` through the group summary.
///
/// `v_a = u_a^(1-p) - mean_a' u_a'^(1-p)`, `u_a = delta/c + mean_n zc_an^2`,
/// so `dL/dz_an = (1-p) u_a^(-p) (g_a - mean(g)) (2/c) zc_an` with `g = dL/dv`.
fn grouped_to_activity(grad_v: &Matrix, centered: &Matrix, u: &Matrix, g: &GroupingSpec) -> Matrix {
    let m = grad_v.rows();
    let width = centered.cols();
    let c = width / g.groups;
    let mut out = Matrix::zeros(m, width);
    for s in 0..m {
        let gv = grad_v.row(s);
        let mean_g = gv.iter().sum::<f64>() / g.groups as f64;
        let us = u.row(s);
        let zc = centered.row(s);
        let o = out.row_mut(s);
        for a in 0..g.groups {
            let f = (1.0 - g.p) * us[a].powf(-g.p) * (gv[a] - mean_g) * 2.0 / c as f64;
            for n in a * c..(a + 1) * c {
                o[n] = f * zc[n];
            }
        }
    }
    out
}

/// Pair coefficients `2 k°z - gamma k°y`.
fn pair_coefficients(kz: &KernelMatrix, ky: &KernelMatrix, gamma: f64) -> Result<Matrix> {
    kz.centered.check_same_shape(&ky.centered, "pair_coefficients")?;
    let data = kz
        .centered
        .data()
        .iter()
        .zip(ky.centered.data())
        .map(|(z, y)| 2.0 * z - gamma * y)
        .collect();
    Matrix::new(kz.m(), kz.m(), data)
}

/// Exact gradient of the layer objective with respect to this layer's
/// weights, treating the layer input as fixed. Also returns the objective.
pub fn layer_gradient(
    spec: &KernelSpec,
    cache: &LayerCache,
    ky: &KernelMatrix,
    gamma: f64,
    slope: f64,
) -> Result<(Matrix, LayerObjective)> {
    let (kz, objective) = prepare(spec, cache, ky, gamma)?;
    let coeff = pair_coefficients(&kz, ky, gamma)?;
    let grad = weight_gradient(spec, cache, &coeff, &kz, slope)?;
    Ok((grad, objective))
}

/// Like [`layer_gradient`], also returning the gradient of `phsic(Y,Z)`
/// alone so the label term can be inspected separately.
pub fn layer_gradient_parts(
    spec: &KernelSpec,
    cache: &LayerCache,
    ky: &KernelMatrix,
    gamma: f64,
    slope: f64,
) -> Result<(Matrix, LayerObjective, Matrix)> {
    let (kz, objective) = prepare(spec, cache, ky, gamma)?;
    let coeff = pair_coefficients(&kz, ky, gamma)?;
    let full = weight_gradient(spec, cache, &coeff, &kz, slope)?;
    // d phsic(Y,Z)/dW has pair coefficient k°y.
    let label_part = weight_gradient(spec, cache, &ky.centered, &kz, slope)?;
    Ok((full, objective, label_part))
}

fn prepare(spec: &KernelSpec, cache: &LayerCache, ky: &KernelMatrix, gamma: f64) -> Result<(KernelMatrix, LayerObjective)> {
    let m = cache.batch_size();
    if m < 2 {
        return Err(Error::InvalidArgument("layer_gradient needs m >= 2".into()));
    }
    if ky.m() != m {
        return Err(Error::dim("layer_gradient", format!("label kernel m={} vs batch m={m}", ky.m())));
    }
    if spec.grouping.is_some() != cache.group.is_some() {
        return Err(Error::InvalidArgument("kernel grouping does not match the layer cache".into()));
    }
    let kz = spec.family.matrix(cache.features())?;
    let objective = objective_from_kernels(&kz, ky, gamma)?;
    Ok((kz, objective))
}

fn weight_gradient(spec: &KernelSpec, cache: &LayerCache, coeff: &Matrix, kz: &KernelMatrix, slope: f64) -> Result<Matrix> {
    let grad_h = feature_gradient(&spec.family, cache.features(), coeff, &kz.values)?;
    let mut grad_z = match (&spec.grouping, &cache.group) {
        (Some(g), Some(gc)) => grouped_to_activity(&grad_h, &gc.centered, &gc.u, g),
        _ => grad_h,
    };
    for (d, a) in grad_z.data_mut().iter_mut().zip(cache.pre.data()) {
        *d *= lrelu_derivative(*a, slope);
    }
    matmul(&grad_z.transpose(), &cache.input)
}

/// Same as [`layer_gradient`] for callers that only have a layer index.
pub fn network_layer_gradient(
    net: &Network,
    k: usize,
    spec: &KernelSpec,
    pass: &ForwardPass,
    ky: &KernelMatrix,
    gamma: f64,
) -> Result<(Matrix, LayerObjective)> {
    let cache = pass.layers.get(k).ok_or(Error::CacheMissing(k))?;
    layer_gradient(spec, cache, ky, gamma, net.config.slope)
}

/// Modulatory factor of a two-point update.
#[derive(Clone, Debug, PartialEq)]
pub struct ThirdFactor {
    pub i: usize,
    pub j: usize,
    /// `gamma * k°(y_i, y_j)`.
    pub global: f64,
    /// `2 * k°(z_i, z_j)`.
    pub local: f64,
    /// Uncentered `k(z_i, z_j)`.
    pub kernel: f64,
    /// `-(1/sigma^2) (global - local) kernel`.
    pub m: f64,
    /// Per-group factors `m * (v_a,i - v_a,j)` for grouped kernels.
    pub per_group: Option<Vec<f64>>,
}

/// Per-sample quantities a pair rule needs.
#[derive(Clone, Copy, Debug)]
pub struct SampleView<'a> {
    pub input: &'a [f64],
    pub pre: &'a [f64],
    pub z: &'a [f64],
    pub centered: Option<&'a [f64]>,
    pub u: Option<&'a [f64]>,
    pub v: Option<&'a [f64]>,
}

impl<'a> SampleView<'a> {
    pub fn from_cache(cache: &'a LayerCache, s: usize) -> Self {
        let g = cache.group.as_ref();
        Self {
            input: cache.input.row(s),
            pre: cache.pre.row(s),
            z: cache.z.row(s),
            centered: g.map(|g| g.centered.row(s)),
            u: g.map(|g| g.u.row(s)),
            v: g.map(|g| g.v.row(s)),
        }
    }

    pub fn features(&self) -> &'a [f64] {
        self.v.unwrap_or(self.z)
    }

    /// Post-synaptic factor of the grouped Hebbian term:
    /// `f'(a_n) * centered_n / u^p` for neuron `n`.
    pub fn grouped_post(&self, g: &GroupingSpec, slope: f64) -> Result<Vec<f64>> {
        let (zc, u) = match (self.centered, self.u) {
            (Some(zc), Some(u)) => (zc, u),
            _ => return Err(Error::InvalidArgument("grouped rule needs group statistics".into())),
        };
        let c = zc.len() / g.groups;
        Ok(zc
            .iter()
            .zip(self.pre)
            .enumerate()
            .map(|(n, (x, a))| lrelu_derivative(*a, slope) * x / u[n / c].powf(g.p))
            .collect())
    }
}

fn gaussian_sigma(spec: &KernelSpec, op: &'static str) -> Result<f64> {
    match spec.family {
        KernelFamily::Gaussian { sigma } => Ok(sigma),
        _ => Err(Error::UnsupportedKernel { kernel: spec.to_string(), op }),
    }
}

/// Third factor for a pair given the label similarity and the centering
/// means of the label and activity kernels.
pub fn third_factor(
    spec: &KernelSpec,
    a: &SampleView<'_>,
    b: &SampleView<'_>,
    k_y: f64,
    gamma: f64,
    mean_y: f64,
    mean_z: f64,
) -> Result<ThirdFactor> {
    let sigma = gaussian_sigma(spec, "third_factor")?;
    let kernel = (-sq_dist(a.features(), b.features()) / (2.0 * sigma * sigma)).exp();
    third_factor_from_parts(spec, a, b, kernel, gamma * (k_y - mean_y), 2.0 * (kernel - mean_z), sigma)
}

pub(crate) fn third_factor_from_parts(
    spec: &KernelSpec,
    a: &SampleView<'_>,
    b: &SampleView<'_>,
    kernel: f64,
    global: f64,
    local: f64,
    sigma: f64,
) -> Result<ThirdFactor> {
    let m = -(global - local) * kernel / (sigma * sigma);
    let per_group = match spec.grouping {
        None => None,
        Some(_) => {
            let (va, vb) = match (a.v, b.v) {
                (Some(va), Some(vb)) => (va, vb),
                _ => return Err(Error::InvalidArgument("grouped rule needs group statistics".into())),
            };
            Some(va.iter().zip(vb).map(|(x, y)| m * (x - y)).collect())
        }
    };
    Ok(ThirdFactor { i: 0, j: 0, global, local, kernel, m, per_group })
}

/// Weight change `-c_ij dk_ij/dW` for one ordered pair, given its third factor.
///
/// Plain Gaussian: `m (z_a - z_b)_n (f'_a,n x_a,m - f'_b,n x_b,m)`.
/// Grouped: `(2(1-p)/c) m_g (post_a,n x_a,m - post_b,n x_b,m)` for neuron `n`
/// in group `g`, with `post = f' * centered / u^p`.
pub fn pair_delta(spec: &KernelSpec, a: &SampleView<'_>, b: &SampleView<'_>, tf: &ThirdFactor, slope: f64) -> Result<Matrix> {
    let out_w = a.z.len();
    let in_w = a.input.len();
    let mut dw = Matrix::zeros(out_w, in_w);
    match (&spec.grouping, &tf.per_group) {
        (None, _) => {
            for n in 0..out_w {
                let post = tf.m * (a.z[n] - b.z[n]);
                if post == 0.0 {
                    continue;
                }
                let fa = lrelu_derivative(a.pre[n], slope);
                let fb = lrelu_derivative(b.pre[n], slope);
                for (w, (xa, xb)) in dw.row_mut(n).iter_mut().zip(a.input.iter().zip(b.input)) {
                    *w = post * (fa * xa - fb * xb);
                }
            }
        }
        (Some(g), Some(per_group)) => {
            let c = out_w / g.groups;
            let pa = a.grouped_post(g, slope)?;
            let pb = b.grouped_post(g, slope)?;
            let scale = 2.0 * (1.0 - g.p) / c as f64;
            for n in 0..out_w {
                let mg = scale * per_group[n / c];
                for (w, (xa, xb)) in dw.row_mut(n).iter_mut().zip(a.input.iter().zip(b.input)) {
                    *w = mg * (pa[n] * xa - pb[n] * xb);
                }
            }
        }
        (Some(_), None) => {
            return Err(Error::InvalidArgument("grouped rule needs per-group third factors".into()));
        }
    }
    Ok(dw)
}

/// Two-point Gaussian-family update for samples `i`, `j` of a cached batch.
/// `k_y` is the label similarity of the pair; the centering means are
/// supplied by the caller (batch means, or running averages when streaming).
#[allow(clippy::too_many_arguments)]
pub fn two_point_update(
    spec: &KernelSpec,
    cache: &LayerCache,
    i: usize,
    j: usize,
    k_y: f64,
    gamma: f64,
    mean_y: f64,
    mean_z: f64,
    slope: f64,
) -> Result<(Matrix, ThirdFactor)> {
    gaussian_sigma(spec, "two_point_update")?;
    if spec.grouping.is_some() != cache.group.is_some() {
        return Err(Error::InvalidArgument("kernel grouping does not match the layer cache".into()));
    }
    let m = cache.batch_size();
    if i >= m || j >= m {
        return Err(Error::InvalidArgument(format!("pair ({i},{j}) outside batch of {m}")));
    }
    let a = SampleView::from_cache(cache, i);
    let b = SampleView::from_cache(cache, j);
    let mut tf = third_factor(spec, &a, &b, k_y, gamma, mean_y, mean_z)?;
    tf.i = i;
    tf.j = j;
    let dw = pair_delta(spec, &a, &b, &tf, slope)?;
    Ok((dw, tf))
}

/// Sixth-order central differences, entry by entry:
/// `(45(f+1 - f-1) - 9(f+2 - f-2) + (f+3 - f-3)) / 60h` with `f±k = f(W ± k h e)`.
pub fn finite_difference_gradient(f: impl FnMut(&Matrix) -> f64, w: &Matrix, step: f64) -> Matrix {
    assert!(step > 0.0, "finite-difference step must be positive");
    let steps = Matrix::filled(w.rows(), w.cols(), step);
    finite_difference_gradient_with_steps(f, w, &steps)
}

/// As [`finite_difference_gradient`] with a separate step per entry.
///
/// Each entry is Ridders' polynomial extrapolation of central differences
/// over steps shrinking geometrically from the given one, keeping the
/// tableau value with the smallest error estimate. All probes stay within
/// `+-step` of the original weight.
pub fn finite_difference_gradient_with_steps(mut f: impl FnMut(&Matrix) -> f64, w: &Matrix, steps: &Matrix) -> Matrix {
    const CON: f64 = 1.4;
    const NTAB: usize = 10;
    const SAFE: f64 = 2.0;
    let con2 = CON * CON;
    let mut probe = w.clone();
    let mut grad = Matrix::zeros(w.rows(), w.cols());
    for idx in 0..w.data().len() {
        let orig = w.data()[idx];
        let mut central = |h: f64| {
            probe.data_mut()[idx] = orig + h;
            let up = f(&probe);
            probe.data_mut()[idx] = orig - h;
            let down = f(&probe);
            probe.data_mut()[idx] = orig;
            (up - down) / (2.0 * h)
        };
        let mut h = steps.data()[idx];
        let mut prev = vec![central(h)];
        let mut best = prev[0];
        let mut err = f64::INFINITY;
        for i in 1..NTAB {
            h /= CON;
            let mut row = vec![central(h)];
            let mut fac = con2;
            for j in 1..=i {
                let v = (row[j - 1] * fac - prev[j - 1]) / (fac - 1.0);
                fac *= con2;
                let e = (v - row[j - 1]).abs().max((v - prev[j - 1]).abs());
                if e <= err {
                    err = e;
                    best = v;
                }
                row.push(v);
            }
            if (row[i] - prev[i - 1]).abs() >= SAFE * err {
                break;
            }
            prev = row;
        }
        grad.data_mut()[idx] = best;
    }
    grad
}

/// Oracle step per kernel family. Cosine similarity has curvature of order
/// `1/|h|^2` in its features and needs a finer step.
pub fn default_fd_step(family: &KernelFamily) -> f64 {
    match family {
        KernelFamily::CosineSimilarity => 1e-3,
        _ => 1e-2,
    }
}

/// Per-entry steps no larger than `step` such that no preactivation changes
/// sign at any probe, so the oracle never straddles the lrelu kink.
/// `pre` is `m x out`, `input` is `m x in`; the result is `out x in`.
pub fn kink_safe_steps(pre: &Matrix, input: &Matrix, step: f64) -> Matrix {
    Matrix::from_fn(pre.cols(), input.cols(), |n, j| {
        let mut h = step;
        for s in 0..pre.rows() {
            let x = input.get(s, j).abs();
            if x > 0.0 {
                h = h.min(0.75 * pre.get(s, n).abs() / x);
            }
        }
        h.max(1e-9)
    })
}

/// Cosine similarity of grouped features is discontinuous where a sample's
/// `v` passes through zero (with two groups `v = (a, -a)`, so the kernel is
/// piecewise constant). Halves each step until no entry of `v` changes sign
/// at either probe.
fn sign_safe_steps(spec: &KernelSpec, weights: &Matrix, input: &Matrix, slope: f64, mut steps: Matrix) -> Result<Matrix> {
    let Some(g) = spec.grouping.as_ref() else { return Ok(steps) };
    if spec.family != KernelFamily::CosineSimilarity {
        return Ok(steps);
    }
    let signs = |w: &Matrix| -> Result<Vec<bool>> {
        let c = layer_forward(w, Some(g), slope, 0.0, input, &mut Rng::new(0))?;
        Ok(c.features().data().iter().map(|v| *v > 0.0).collect())
    };
    let base = signs(weights)?;
    let mut probe = weights.clone();
    for idx in 0..weights.data().len() {
        let orig = weights.data()[idx];
        for _ in 0..40 {
            let h = steps.data()[idx];
            let mut flips = false;
            for x in [orig + h, orig - h] {
                probe.data_mut()[idx] = x;
                flips |= signs(&probe)? != base;
            }
            probe.data_mut()[idx] = orig;
            if !flips {
                break;
            }
            steps.data_mut()[idx] = 0.5 * h;
        }
    }
    Ok(steps)
}

/// Analytic layer gradient against the finite-difference oracle of
/// [`layer_objective`] on a fixed input.
#[allow(clippy::too_many_arguments)]
pub fn check_layer_gradient(
    spec: &KernelSpec,
    weights: &Matrix,
    input: &Matrix,
    ky: &KernelMatrix,
    gamma: f64,
    slope: f64,
    step: f64,
    floor: f64,
) -> Result<GradientError> {
    let cache = layer_forward(weights, spec.grouping.as_ref(), slope, 0.0, input, &mut Rng::new(0))?;
    let (analytic, _) = layer_gradient(spec, &cache, ky, gamma, slope)?;
    let steps = sign_safe_steps(spec, weights, input, slope, kink_safe_steps(&cache.pre, input, step))?;
    let mut failure = None;
    let oracle = finite_difference_gradient_with_steps(
        |w| match layer_objective(spec, w, input, slope, ky, gamma) {
            Ok(o) => o.value,
            Err(e) => {
                failure.get_or_insert(e);
                f64::NAN
            }
        },
        weights,
        &steps,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(compare_gradients(&analytic, &oracle, floor))
}

/// Worst-case discrepancy between an analytic gradient and its oracle:
/// relative error over entries with `|oracle| >= floor`, absolute error
/// elsewhere.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradientError {
    pub max_relative: f64,
    pub max_absolute_small: f64,
}

impl GradientError {
    pub fn passes(&self, rel_tol: f64, abs_tol: f64) -> bool {
        self.max_relative < rel_tol && self.max_absolute_small < abs_tol
    }
}

pub fn compare_gradients(analytic: &Matrix, oracle: &Matrix, floor: f64) -> GradientError {
    let mut err = GradientError::default();
    for (a, o) in analytic.data().iter().zip(oracle.data()) {
        let diff = (a - o).abs();
        if o.abs() < floor {
            err.max_absolute_small = err.max_absolute_small.max(diff);
        } else {
            err.max_relative = err.max_relative.max(diff / o.abs());
        }
    }
    err
}

/// Backprop gradients of the mean cross-entropy.
#[derive(Clone, Debug)]
pub struct BackpropGradients {
    pub hidden: Vec<Matrix>,
    pub readout_weights: Matrix,
    pub readout_bias: Vec<f64>,
    pub loss: f64,
}

/// Readout gradient of the mean cross-entropy given the readout input
/// `features` (rows) and its logits. Returns `(dW, db, dL/dfeatures, loss)`.
pub fn readout_gradient(
    readout_weights: &Matrix,
    features: &Matrix,
    logits: &Matrix,
    labels: &[usize],
) -> Result<(Matrix, Vec<f64>, Matrix, f64)> {
    let m = labels.len();
    if logits.rows() != m || features.rows() != m {
        return Err(Error::dim("readout_gradient", format!("{} labels for {} rows", m, logits.rows())));
    }
    let n_classes = logits.cols();
    let mut dlogits = Matrix::zeros(m, n_classes);
    let mut loss = 0.0;
    for s in 0..m {
        let row = logits.row(s);
        if labels[s] >= n_classes {
            return Err(Error::LabelOutOfRange { label: labels[s], n_classes });
        }
        loss += cross_entropy(row, labels[s]);
        let p = softmax(row);
        let d = dlogits.row_mut(s);
        for c in 0..n_classes {
            d[c] = (p[c] - if c == labels[s] { 1.0 } else { 0.0 }) / m as f64;
        }
    }
    let dw = matmul(&dlogits.transpose(), features)?;
    let mut db = vec![0.0; n_classes];
    for s in 0..m {
        for (b, d) in db.iter_mut().zip(dlogits.row(s)) {
            *b += d;
        }
    }
    let dfeat = matmul(&dlogits, readout_weights)?;
    Ok((dw, db, dfeat, loss / m as f64))
}

/// Exact gradient of the mean cross-entropy through the whole (plain)
/// network, using the dropout masks recorded in `pass`.
pub fn backprop_gradients(net: &Network, pass: &ForwardPass, labels: &[usize]) -> Result<BackpropGradients> {
    for (k, g) in net.config.grouping.iter().enumerate() {
        if g.is_some() {
            return Err(Error::BackpropGrouping(k));
        }
    }
    if pass.layers.len() != net.n_hidden() {
        return Err(Error::CacheMissing(pass.layers.len()));
    }
    let last = pass.layers.last().unwrap();
    let (readout_weights, readout_bias, mut upstream, loss) =
        readout_gradient(&net.readout.weights, &last.post, &pass.logits, labels)?;

    let mut hidden = vec![Matrix::zeros(0, 0); net.n_hidden()];
    for k in (0..net.n_hidden()).rev() {
        let cache = &pass.layers[k];
        if let Some(mask) = &cache.mask {
            for (u, s) in upstream.data_mut().iter_mut().zip(mask.data()) {
                *u *= s;
            }
        }
        for (u, a) in upstream.data_mut().iter_mut().zip(cache.pre.data()) {
            *u *= lrelu_derivative(*a, net.config.slope);
        }
        hidden[k] = matmul(&upstream.transpose(), &cache.input)?;
        if k > 0 {
            upstream = matmul(&upstream, &net.weights[k])?;
        }
    }
    Ok(BackpropGradients { hidden, readout_weights, readout_bias, loss })
}

/// Mean cross-entropy of the network in eval mode; the backprop oracle.
pub fn mean_cross_entropy(net: &Network, x: &Matrix, labels: &[usize]) -> Result<f64> {
    let logits = net.predict(x)?;
    Ok(labels
        .iter()
        .enumerate()
        .map(|(s, &y)| cross_entropy(logits.row(s), y))
        .sum::<f64>()
        / labels.len() as f64)
}

/// One kernel configuration of the gradient oracle suite.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleCase {
    pub name: &'static str,
    pub family: KernelFamily,
    pub grouped: bool,
    pub divisive_normalization: bool,
}

/// The six kernel configurations exercised by the oracle suite.
pub fn oracle_cases() -> Vec<OracleCase> {
    let case = |name, family, grouped, divisive_normalization| OracleCase { name, family, grouped, divisive_normalization };
    let gauss = KernelFamily::Gaussian { sigma: 1.5 };
    vec![
        case("linear", KernelFamily::Linear, false, false),
        case("cossim", KernelFamily::CosineSimilarity, false, false),
        case("cossim+grp+div", KernelFamily::CosineSimilarity, true, true),
        case("gaussian", gauss, false, false),
        case("gaussian+grp", gauss, true, false),
        case("gaussian+grp+div", gauss, true, true),
    ]
}

/// Worst error of one configuration over all seeds and both layers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleReport {
    pub case: OracleCase,
    pub instances: usize,
    pub worst: GradientError,
}

impl OracleReport {
    pub fn passes(&self, rel_tol: f64, abs_tol: f64) -> bool {
        self.worst.passes(rel_tol, abs_tol)
    }
}

/// Checks both hidden layers of random 8 -> 6 -> 4 networks on batches of 5
/// against the finite-difference oracle, once per seed and configuration.
/// Grouped layers use 3 groups (width 6) and 2 groups (width 4).
pub fn gradient_oracle_suite(seeds: std::ops::Range<u64>) -> Result<Vec<OracleReport>> {
    const M: usize = 5;
    const SLOPE: f64 = 0.01;
    const GAMMA: f64 = 2.0;
    const FLOOR: f64 = 1e-8;
    let mut reports = Vec::new();
    for case in oracle_cases() {
        let groups = |g| case.grouped.then(|| GroupingSpec::new(g, 0.2, 1.0, case.divisive_normalization)).transpose();
        let layers = [(8usize, 6usize, groups(3)?), (6, 4, groups(2)?)];
        let mut worst = GradientError::default();
        for seed in seeds.clone() {
            let mut rng = Rng::new(seed);
            let labels: Vec<usize> = (0..M).map(|_| rng.below(3)).collect();
            let ky = crate::kernels::LabelKernel::Balanced.matrix(&labels, 3)?;
            let mut input = Matrix::from_fn(M, 8, |_, _| rng.normal());
            for (d_in, d_out, grouping) in &layers {
                let w = crate::numerics::init_weights(*d_in, *d_out, SLOPE, &mut rng)?;
                let spec = KernelSpec { family: case.family, grouping: *grouping };
                let err = check_layer_gradient(&spec, &w, &input, &ky, GAMMA, SLOPE, default_fd_step(&case.family), FLOOR)?;
                worst.max_relative = worst.max_relative.max(err.max_relative);
                worst.max_absolute_small = worst.max_absolute_small.max(err.max_absolute_small);
                input = layer_forward(&w, grouping.as_ref(), SLOPE, 0.0, &input, &mut rng)?.output;
            }
        }
        reports.push(OracleReport { case, instances: seeds.clone().count(), worst });
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::LabelKernel;
    use crate::network::NetworkConfig;

    fn gaussian_spec(sigma: f64, grouping: Option<GroupingSpec>) -> KernelSpec {
        KernelSpec { family: KernelFamily::Gaussian { sigma }, grouping }
    }

    fn random_layer(rng: &mut Rng, m: usize, d_in: usize, d_out: usize, grouping: Option<&GroupingSpec>) -> (Matrix, Matrix, LayerCache) {
        let w = Matrix::from_fn(d_out, d_in, |_, _| rng.normal() * 0.6);
        let x = Matrix::from_fn(m, d_in, |_, _| rng.normal());
        let cache = layer_forward(&w, grouping, 0.1, 0.0, &x, rng).unwrap();
        (w, x, cache)
    }

    #[test]
    fn constant_activity_objective_is_zero() {
        let features = Matrix::filled(4, 3, 0.5);
        let ky = LabelKernel::Balanced.matrix(&[0, 1, 0, 2], 3).unwrap();
        let obj = objective_value(&KernelFamily::Gaussian { sigma: 5.0 }, &features, &ky, 2.0).unwrap();
        assert!(obj.phsic_zz.abs() < 1e-15);
        assert!(obj.value.abs() < 1e-15);
    }

    #[test]
    fn two_sample_objective_by_hand() {
        let features = Matrix::from_rows(&[[0.0, 0.0], [3.0, 4.0]]).unwrap();
        let ky = LabelKernel::Balanced.matrix(&[0, 1], 10).unwrap();
        let obj = objective_value(&KernelFamily::Gaussian { sigma: 5.0 }, &features, &ky, 2.0).unwrap();
        let k = (-0.5f64).exp();
        let b = -1.0 / 9.0;
        let zz = (2.0 + 2.0 * k * k) / 4.0 - ((2.0 + 2.0 * k) / 4.0).powi(2);
        let yz = (2.0 + 2.0 * k * b) / 4.0 - ((2.0 + 2.0 * k) / 4.0) * ((2.0 + 2.0 * b) / 4.0);
        assert!((obj.phsic_zz - zz).abs() < 1e-15);
        assert!((obj.phsic_yz - yz).abs() < 1e-15);
        assert!((obj.value - (zz - 2.0 * yz)).abs() < 1e-15);
    }

    #[test]
    fn gamma_zero_objective_is_nonnegative() {
        let mut rng = Rng::new(12);
        for _ in 0..10 {
            let features = Matrix::from_fn(6, 3, |_, _| rng.normal());
            let ky = LabelKernel::Balanced.matrix(&[0, 1, 2, 0, 1, 2], 3).unwrap();
            for fam in [KernelFamily::Linear, KernelFamily::CosineSimilarity, KernelFamily::Gaussian { sigma: 1.0 }] {
                assert!(objective_value(&fam, &features, &ky, 0.0).unwrap().value >= 0.0);
            }
        }
    }

    #[test]
    fn identical_pair_gives_zero_update() {
        let mut rng = Rng::new(3);
        let w = Matrix::from_fn(4, 3, |_, _| rng.normal());
        let row: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
        let x = Matrix::from_rows(&[row.clone(), row]).unwrap();
        let cache = layer_forward(&w, None, 0.01, 0.0, &x, &mut rng).unwrap();
        let spec = gaussian_spec(1.0, None);
        let (dw, tf) = two_point_update(&spec, &cache, 0, 1, 1.0, 2.0, 0.1, 0.4, 0.01).unwrap();
        assert!(dw.data().iter().all(|&v| v == 0.0));
        assert_eq!(tf.kernel, 1.0);
    }

    #[test]
    fn grouped_identical_activity_has_zero_group_factor() {
        let g = GroupingSpec::new(2, 0.2, 1.0, true).unwrap();
        let mut rng = Rng::new(5);
        let w = Matrix::from_fn(4, 3, |_, _| rng.normal());
        let row: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
        let x = Matrix::from_rows(&[row.clone(), row]).unwrap();
        let cache = layer_forward(&w, Some(&g), 0.01, 0.0, &x, &mut rng).unwrap();
        let (dw, tf) = two_point_update(&gaussian_spec(1.0, Some(g)), &cache, 0, 1, 1.0, 2.0, 0.0, 0.0, 0.01).unwrap();
        assert!(tf.per_group.unwrap().iter().all(|&m| m == 0.0));
        assert!(dw.max_abs() == 0.0);
    }

    #[test]
    fn two_point_rejects_non_gaussian() {
        let mut rng = Rng::new(1);
        let (_, _, cache) = random_layer(&mut rng, 2, 3, 4, None);
        let spec = KernelSpec::plain(KernelFamily::CosineSimilarity);
        assert!(matches!(
            two_point_update(&spec, &cache, 0, 1, 1.0, 2.0, 0.0, 0.0, 0.1),
            Err(Error::UnsupportedKernel { .. })
        ));
    }

    #[test]
    fn batch_of_two_equals_scaled_pair_update() {
        let mut rng = Rng::new(21);
        let g = GroupingSpec::new(2, 0.2, 1.0, true).unwrap();
        for grouping in [None, Some(g)] {
            let spec = gaussian_spec(1.3, grouping);
            let (_, _, cache) = random_layer(&mut rng, 2, 5, 4, grouping.as_ref());
            let labels = [0usize, 1];
            let ky = LabelKernel::Balanced.matrix(&labels, 3).unwrap();
            let (grad, _) = layer_gradient(&spec, &cache, &ky, 2.0, 0.1).unwrap();
            let kz = spec.family.matrix(cache.features()).unwrap();
            let k_y = ky.values.get(0, 1);
            let (dw, _) = two_point_update(&spec, &cache, 0, 1, k_y, 2.0, ky.mean, kz.mean, 0.1).unwrap();
            // -grad = (2/m^2) dW
            for (gv, dv) in grad.data().iter().zip(dw.data()) {
                assert!((-gv - 0.5 * dv).abs() < 1e-12, "{gv} {dv}");
            }
        }
    }

    #[test]
    fn permuting_batch_leaves_gradient_unchanged() {
        let mut rng = Rng::new(33);
        let spec = gaussian_spec(1.0, None);
        let (w, x, cache) = random_layer(&mut rng, 6, 4, 3, None);
        let labels = [0usize, 1, 2, 0, 1, 1];
        let ky = LabelKernel::Balanced.matrix(&labels, 3).unwrap();
        let (grad, _) = layer_gradient(&spec, &cache, &ky, 2.0, 0.1).unwrap();
        let perm = [3usize, 0, 5, 1, 4, 2];
        let xp = x.select_rows(&perm);
        let lp: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        let cp = layer_forward(&w, None, 0.1, 0.0, &xp, &mut rng).unwrap();
        let kyp = LabelKernel::Balanced.matrix(&lp, 3).unwrap();
        let (gp, _) = layer_gradient(&spec, &cp, &kyp, 2.0, 0.1).unwrap();
        for (a, b) in grad.data().iter().zip(gp.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn finite_difference_on_simple_functions() {
        let mut rng = Rng::new(2);
        let w = Matrix::from_fn(3, 4, |_, _| rng.normal());
        let g = finite_difference_gradient(|m| m.frobenius_sq(), &w, 1e-6);
        for (a, b) in g.data().iter().zip(w.data()) {
            assert!((a - 2.0 * b).abs() < 1e-8);
        }
        let c = Matrix::from_fn(3, 4, |i, j| (i * 4 + j) as f64 - 5.0);
        let g = finite_difference_gradient(|m| crate::numerics::dot(m.data(), c.data()), &w, 1e-6);
        for (a, b) in g.data().iter().zip(c.data()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn backprop_rejects_grouping() {
        let mut rng = Rng::new(0);
        let g = GroupingSpec::new(2, 0.2, 1.0, true).unwrap();
        let cfg = NetworkConfig::plain(3, vec![4], 2).with_grouping(Some(g));
        let net = Network::new(cfg, &mut rng).unwrap();
        let x = Matrix::from_fn(2, 3, |_, _| rng.normal());
        let pass = net.forward(&x, crate::network::Mode::Eval, &mut rng).unwrap();
        assert!(matches!(backprop_gradients(&net, &pass, &[0, 1]), Err(Error::BackpropGrouping(0))));
    }

    #[test]
    fn zero_weight_readout_gradient() {
        let mut rng = Rng::new(4);
        let cfg = NetworkConfig::plain(3, vec![4], 3);
        let mut net = Network::new(cfg, &mut rng).unwrap();
        net.readout.weights = Matrix::zeros(3, 4);
        let x = Matrix::from_fn(1, 3, |_, _| rng.normal());
        let pass = net.forward(&x, crate::network::Mode::Eval, &mut rng).unwrap();
        let grads = backprop_gradients(&net, &pass, &[2]).unwrap();
        let z = pass.layers[0].post.row(0);
        for c in 0..3 {
            let coef = 1.0 / 3.0 - if c == 2 { 1.0 } else { 0.0 };
            for n in 0..4 {
                assert!((grads.readout_weights.get(c, n) - coef * z[n]).abs() < 1e-15);
            }
        }
        // readout weights are zero, so nothing flows into the hidden layer
        assert_eq!(grads.hidden[0].max_abs(), 0.0);
    }
}
