//! Kernels over layer activity and labels, empirical centering, and the
//! biased (V-statistic) HSIC and pHSIC estimators.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::group_response;
use crate::numerics::{dot, norm, sq_dist, Matrix};

/// Kernel family applied to (possibly grouped) activity vectors.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum KernelFamily {
    Linear,
    CosineSimilarity,
    Gaussian { sigma: f64 },
}

impl KernelFamily {
    pub fn gaussian(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!("Gaussian sigma must be > 0, got {sigma}")));
        }
        Ok(KernelFamily::Gaussian { sigma })
    }

    pub fn eval(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        if a.len() != b.len() {
            return Err(Error::dim("kernel_eval", format!("{} vs {}", a.len(), b.len())));
        }
        Ok(match *self {
            KernelFamily::Linear => dot(a, b),
            KernelFamily::CosineSimilarity => {
                let (na, nb) = (norm(a), norm(b));
                if na == 0.0 || nb == 0.0 {
                    return Err(Error::ZeroNorm);
                }
                dot(a, b) / (na * nb)
            }
            KernelFamily::Gaussian { sigma } => (-sq_dist(a, b) / (2.0 * sigma * sigma)).exp(),
        })
    }

    /// Kernel matrix over the rows of `features`.
    pub fn matrix(&self, features: &Matrix) -> Result<KernelMatrix> {
        let m = features.rows();
        let mut values = Matrix::zeros(m, m);
        match *self {
            KernelFamily::CosineSimilarity => {
                let norms: Vec<f64> = features.iter_rows().map(norm).collect();
                if norms.contains(&0.0) {
                    return Err(Error::ZeroNorm);
                }
                for i in 0..m {
                    for j in i..m {
                        let k = dot(features.row(i), features.row(j)) / (norms[i] * norms[j]);
                        values.set(i, j, k);
                        values.set(j, i, k);
                    }
                }
            }
            _ => {
                for i in 0..m {
                    for j in i..m {
                        let k = self.eval(features.row(i), features.row(j))?;
                        values.set(i, j, k);
                        values.set(j, i, k);
                    }
                }
            }
        }
        Ok(KernelMatrix::from_values(values))
    }

    pub fn name(&self) -> &'static str {
        match self {
            KernelFamily::Linear => "linear",
            KernelFamily::CosineSimilarity => "cossim",
            KernelFamily::Gaussian { .. } => "gaussian",
        }
    }
}

/// Grouping of a layer's neurons into equal contiguous blocks, summarized per
/// group by a smoothed variance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupingSpec {
    /// Number of groups in the layer.
    pub groups: usize,
    /// Exponent `p`; groups are summarized by `u^(1-p)` and the divisive
    /// normalization divides by `u^p`.
    pub p: f64,
    /// Positive offset added to the group variance.
    pub delta: f64,
    /// Whether the next layer receives `centered / u^p` instead of the raw
    /// activity.
    pub divisive_normalization: bool,
}

impl GroupingSpec {
    pub fn new(groups: usize, p: f64, delta: f64, divisive_normalization: bool) -> Result<Self> {
        let spec = Self { groups, p, delta, divisive_normalization };
        spec.validate(None)?;
        Ok(spec)
    }

    pub fn validate(&self, width: Option<usize>) -> Result<()> {
        if self.groups == 0 {
            return Err(Error::InvalidArgument("group count must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.p) {
            return Err(Error::InvalidArgument(format!("grouping exponent p must be in [0,1), got {}", self.p)));
        }
        if !(self.delta > 0.0) {
            return Err(Error::InvalidArgument(format!("grouping delta must be > 0, got {}", self.delta)));
        }
        if let Some(w) = width {
            if w % self.groups != 0 {
                return Err(Error::InvalidArgument(format!(
                    "{} groups do not divide layer width {w}",
                    self.groups
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub grouping: Option<GroupingSpec>,
}

impl KernelSpec {
    pub fn plain(family: KernelFamily) -> Self {
        Self { family, grouping: None }
    }

    pub fn grouped(family: KernelFamily, grouping: GroupingSpec) -> Self {
        Self { family, grouping: Some(grouping) }
    }

    pub fn is_gaussian(&self) -> bool {
        matches!(self.family, KernelFamily::Gaussian { .. })
    }
}

impl fmt::Display for KernelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.family.name())?;
        match self.grouping {
            Some(g) if g.divisive_normalization => write!(f, "+grp+div"),
            Some(_) => write!(f, "+grp"),
            None => Ok(()),
        }
    }
}

/// Kernel between two activity vectors. With grouping, both vectors are first
/// summarized by their centered group responses `v`.
pub fn kernel_eval(spec: &KernelSpec, a: &[f64], b: &[f64]) -> Result<f64> {
    match &spec.grouping {
        None => spec.family.eval(a, b),
        Some(g) => {
            let ra = group_response(a, g)?;
            let rb = group_response(b, g)?;
            spec.family.eval(&ra.v, &rb.v)
        }
    }
}

/// Kernel matrix over a batch of activity vectors (rows of `batch`).
pub fn kernel_matrix(spec: &KernelSpec, batch: &Matrix) -> Result<KernelMatrix> {
    if batch.rows() < 2 {
        return Err(Error::InvalidArgument(format!("kernel_matrix needs m >= 2, got {}", batch.rows())));
    }
    match &spec.grouping {
        None => spec.family.matrix(batch),
        Some(g) => {
            let mut rows = Vec::with_capacity(batch.rows());
            for z in batch.iter_rows() {
                rows.push(group_response(z, g)?.v);
            }
            spec.family.matrix(&Matrix::from_rows(&rows)?)
        }
    }
}

/// Balanced-class teaching signal: cosine similarity of centered one-hot
/// vectors, which is `1` for equal labels and `-1/(n-1)` otherwise.
pub fn label_kernel(label_i: usize, label_j: usize, n_classes: usize) -> Result<f64> {
    if n_classes < 2 {
        return Err(Error::InvalidArgument(format!("label kernel needs >= 2 classes, got {n_classes}")));
    }
    for label in [label_i, label_j] {
        if label >= n_classes {
            return Err(Error::LabelOutOfRange { label, n_classes });
        }
    }
    Ok(if label_i == label_j { 1.0 } else { -1.0 / (n_classes as f64 - 1.0) })
}

/// How the label kernel is formed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LabelKernel {
    /// Binary signal for balanced classes.
    Balanced,
    /// Linear kernel of one-hot labels centered by the class probabilities,
    /// `[y_i = y_j] + sum_k p_k^2 - p_i - p_j`; nearly binary when classes are
    /// roughly balanced.
    NearBinary { class_probs: Vec<f64> },
}

impl LabelKernel {
    pub fn eval(&self, label_i: usize, label_j: usize, n_classes: usize) -> Result<f64> {
        match self {
            LabelKernel::Balanced => label_kernel(label_i, label_j, n_classes),
            LabelKernel::NearBinary { class_probs } => {
                if class_probs.len() != n_classes {
                    return Err(Error::dim(
                        "LabelKernel::NearBinary",
                        format!("{} class probabilities for {n_classes} classes", class_probs.len()),
                    ));
                }
                for label in [label_i, label_j] {
                    if label >= n_classes {
                        return Err(Error::LabelOutOfRange { label, n_classes });
                    }
                }
                let sq: f64 = class_probs.iter().map(|p| p * p).sum();
                let same = if label_i == label_j { 1.0 } else { 0.0 };
                Ok(same + sq - class_probs[label_i] - class_probs[label_j])
            }
        }
    }

    pub fn matrix(&self, labels: &[usize], n_classes: usize) -> Result<KernelMatrix> {
        let m = labels.len();
        let mut values = Matrix::zeros(m, m);
        for i in 0..m {
            for j in 0..m {
                values.set(i, j, self.eval(labels[i], labels[j], n_classes)?);
            }
        }
        Ok(KernelMatrix::from_values(values))
    }
}

/// Batch kernel matrix together with its empirically centered version.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelMatrix {
    pub values: Matrix,
    pub centered: Matrix,
    /// Mean over all `m^2` entries.
    pub mean: f64,
}

impl KernelMatrix {
    pub fn from_values(values: Matrix) -> Self {
        let n = values.data().len().max(1) as f64;
        let mean = values.sum() / n;
        let mut centered = values.clone();
        centered.data_mut().iter_mut().for_each(|v| *v -= mean);
        Self { values, centered, mean }
    }

    pub fn m(&self) -> usize {
        self.values.rows()
    }
}

fn check_same_m(a: &KernelMatrix, b: &KernelMatrix, op: &'static str) -> Result<()> {
    if a.values.shape() != b.values.shape() {
        return Err(Error::dim(op, format!("m={} vs m={}", a.m(), b.m())));
    }
    Ok(())
}

/// `(1/m^2) sum_ij ka_ij kb_ij - mean(ka) mean(kb)`.
pub fn phsic_estimate(ka: &KernelMatrix, kb: &KernelMatrix) -> Result<f64> {
    check_same_m(ka, kb, "phsic_estimate")?;
    let m2 = (ka.m() * ka.m()) as f64;
    let joint = dot(ka.values.data(), kb.values.data()) / m2;
    Ok(joint - ka.mean * kb.mean)
}

/// Biased HSIC estimator, including the three-point cross term
/// `-(2/m^3) sum_ijk ka_ik kb_jk`.
pub fn hsic_estimate(ka: &KernelMatrix, kb: &KernelMatrix) -> Result<f64> {
    check_same_m(ka, kb, "hsic_estimate")?;
    let m = ka.m();
    let mf = m as f64;
    let joint = dot(ka.values.data(), kb.values.data()) / (mf * mf);
    // sum_ijk ka_ik kb_jk = sum_k (sum_i ka_ik) (sum_j kb_jk)
    let mut cross = 0.0;
    for k in 0..m {
        let sa: f64 = (0..m).map(|i| ka.values.get(i, k)).sum();
        let sb: f64 = (0..m).map(|j| kb.values.get(j, k)).sum();
        cross += sa * sb;
    }
    Ok(joint + ka.mean * kb.mean - 2.0 * cross / (mf * mf * mf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn gaussian(sigma: f64) -> KernelSpec {
        KernelSpec::plain(KernelFamily::Gaussian { sigma })
    }

    #[test]
    fn gaussian_values() {
        let spec = gaussian(5.0);
        assert_eq!(kernel_eval(&spec, &[1.0, 2.0], &[1.0, 2.0]).unwrap(), 1.0);
        let k = kernel_eval(&spec, &[0.0, 0.0], &[3.0, 4.0]).unwrap();
        assert!((k - (-0.5f64).exp()).abs() < 1e-15);
        assert!((k - 0.60653).abs() < 1e-5);
    }

    #[test]
    fn cosine_orthogonal_and_zero_norm() {
        let spec = KernelSpec::plain(KernelFamily::CosineSimilarity);
        assert_eq!(kernel_eval(&spec, &[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!(matches!(kernel_eval(&spec, &[0.0, 0.0], &[0.0, 1.0]), Err(Error::ZeroNorm)));
    }

    #[test]
    fn sigma_must_be_positive() {
        assert!(KernelFamily::gaussian(0.0).is_err());
        assert!(KernelFamily::gaussian(-1.0).is_err());
        assert!(KernelFamily::gaussian(2.0).is_ok());
    }

    #[test]
    fn label_kernel_values() {
        assert_eq!(label_kernel(3, 3, 10).unwrap(), 1.0);
        assert!((label_kernel(3, 4, 10).unwrap() + 1.0 / 9.0).abs() < 1e-15);
        assert_eq!(label_kernel(0, 1, 2).unwrap(), -1.0);
        assert!(matches!(label_kernel(10, 1, 10), Err(Error::LabelOutOfRange { label: 10, .. })));
        assert!(label_kernel(0, 0, 1).is_err());
    }

    #[test]
    fn near_binary_label_kernel_is_close_to_indicator() {
        let probs = vec![0.1; 10];
        let lk = LabelKernel::NearBinary { class_probs: probs };
        let same = lk.eval(2, 2, 10).unwrap();
        let diff = lk.eval(2, 3, 10).unwrap();
        assert!((same - 0.9).abs() < 1e-12);
        assert!((diff + 0.1).abs() < 1e-12);
    }

    #[test]
    fn identical_points_center_to_zero() {
        let batch = Matrix::from_rows(&[[1.0, 2.0], [1.0, 2.0]]).unwrap();
        let km = kernel_matrix(&gaussian(1.0), &batch).unwrap();
        assert!(km.values.data().iter().all(|&v| v == 1.0));
        assert!(km.centered.data().iter().all(|&v| v == 0.0));
        assert!(kernel_matrix(&gaussian(1.0), &Matrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn kernel_matrix_matches_double_loop() {
        let mut rng = Rng::new(4);
        let batch = Matrix::from_fn(3, 4, |_, _| rng.normal());
        let spec = gaussian(1.5);
        let km = kernel_matrix(&spec, &batch).unwrap();
        let mut total = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let mut d = 0.0;
                for c in 0..4 {
                    d += (batch.get(i, c) - batch.get(j, c)).powi(2);
                }
                let k = (-d / (2.0 * 1.5 * 1.5)).exp();
                assert!((km.values.get(i, j) - k).abs() < 1e-15);
                total += k;
            }
        }
        assert!((km.mean - total / 9.0).abs() < 1e-15);
        assert!(km.centered.sum().abs() < 1e-12 * 9.0);
    }

    #[test]
    fn phsic_two_point_closed_form() {
        let (a, b) = (0.3, -0.7);
        let ka = KernelMatrix::from_values(Matrix::from_rows(&[[1.0, a], [a, 1.0]]).unwrap());
        let kb = KernelMatrix::from_values(Matrix::from_rows(&[[1.0, b], [b, 1.0]]).unwrap());
        let expected = (1.0 + a * b) / 2.0 - ((1.0 + a) / 2.0) * ((1.0 + b) / 2.0);
        assert!((phsic_estimate(&ka, &kb).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn constant_kernel_gives_zero() {
        let mut rng = Rng::new(9);
        let batch = Matrix::from_fn(6, 3, |_, _| rng.normal());
        let ka = kernel_matrix(&gaussian(1.0), &batch).unwrap();
        let kb = KernelMatrix::from_values(Matrix::filled(6, 6, 0.37));
        assert!(phsic_estimate(&ka, &kb).unwrap().abs() < 1e-15);
        assert!(hsic_estimate(&ka, &kb).unwrap().abs() < 1e-15);
    }

    #[test]
    fn size_mismatch_is_an_error() {
        let ka = KernelMatrix::from_values(Matrix::identity(3));
        let kb = KernelMatrix::from_values(Matrix::identity(4));
        assert!(phsic_estimate(&ka, &kb).is_err());
        assert!(hsic_estimate(&ka, &kb).is_err());
    }

    #[test]
    fn grouped_kernel_uses_group_response() {
        let g = GroupingSpec::new(2, 0.2, 1.0, true).unwrap();
        let spec = KernelSpec::grouped(KernelFamily::Gaussian { sigma: 1.0 }, g);
        // same per-group spread, different means: identical v
        let a = [1.0, -1.0, 0.0, 0.0];
        let b = [3.0, 1.0, 5.0, 5.0];
        assert!((kernel_eval(&spec, &a, &b).unwrap() - 1.0).abs() < 1e-15);
    }
}
