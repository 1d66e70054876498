//! Numerical primitives shared by training, caching and evaluation.
//!
//! Every function here is pure. Softmax-family computations subtract the row
//! maximum before exponentiating, so inputs such as `[1000, 0]` are fine.

use crate::class_vectors::ClassVectorTable;
use crate::error::{Error, Result};

/// Guard used by [`l2_normalize`] when the caller has no better choice.
pub const NORM_EPS: f64 = 1e-12;

/// An embedding in some encoder's output space.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("feature coordinate {i} is not finite")));
        }
        Ok(Self(values))
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// One score per class.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Shape("logit vector must be nonempty".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("logit {i} is not finite")));
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the largest logit; the lowest index wins ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

/// A categorical distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbDist(Vec<f64>);

impl ProbDist {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

/// Softmax temperature, strictly positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Temperature(f64);

impl Temperature {
    pub const ONE: Temperature = Temperature(1.0);

    pub fn new(tau: f64) -> Result<Self> {
        if tau.is_finite() && tau > 0.0 {
            Ok(Self(tau))
        } else {
            Err(Error::Domain(format!("temperature must be positive, got {tau}")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Self::ONE
    }
}

/// Which coordinate-wise loss a feature-matching distillation uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FeatureLossKind {
    L1,
    Mse,
}

/// Lowest index among the maxima. Empty input returns 0.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// `v / max(‖v‖₂, eps)`. A zero vector stays zero.
pub fn l2_normalize(v: &FeatureVector, eps: f64) -> Result<FeatureVector> {
    if !(eps > 0.0) {
        return Err(Error::Domain(format!("normalization eps must be positive, got {eps}")));
    }
    let denom = v.norm().max(eps);
    Ok(FeatureVector(v.0.iter().map(|x| x / denom).collect()))
}

/// `q[i] = u · W[i]`.
pub fn similarity_logits(u: &FeatureVector, table: &ClassVectorTable) -> Result<LogitVector> {
    if u.len() != table.dim() {
        return Err(Error::Shape(format!(
            "feature has {} coordinates but class vectors have {}",
            u.len(),
            table.dim()
        )));
    }
    let logits = (0..table.num_classes())
        .map(|i| {
            table
                .row(i)
                .iter()
                .zip(u.as_slice())
                .map(|(&w, &x)| f64::from(w) * x)
                .sum()
        })
        .collect();
    Ok(LogitVector(logits))
}

/// `log σ(q/τ)` via log-sum-exp.
pub fn log_softmax(q: &[f64], tau: Temperature) -> Vec<f64> {
    let t = tau.value();
    let max = q.iter().copied().fold(f64::NEG_INFINITY, f64::max) / t;
    let lse = q.iter().map(|&x| (x / t - max).exp()).sum::<f64>().ln() + max;
    q.iter().map(|&x| x / t - lse).collect()
}

pub fn softmax(q: &LogitVector, tau: Temperature) -> ProbDist {
    ProbDist(softmax_slice(q.as_slice(), tau))
}

pub(crate) fn softmax_slice(q: &[f64], tau: Temperature) -> Vec<f64> {
    let t = tau.value();
    let max = q.iter().copied().fold(f64::NEG_INFINITY, f64::max) / t;
    let mut out: Vec<f64> = q.iter().map(|&x| (x / t - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
    out
}

/// `−log σ(q/τ)[y]`.
pub fn cross_entropy(q: &LogitVector, y: usize, tau: Temperature) -> Result<f64> {
    if y >= q.len() {
        return Err(Error::Index { index: y, len: q.len() });
    }
    Ok(-log_softmax(q.as_slice(), tau)[y])
}

/// Gradient of [`cross_entropy`] with respect to the logits: `(σ(q/τ) − e_y)/τ`.
pub fn cross_entropy_grad(q: &LogitVector, y: usize, tau: Temperature) -> Result<Vec<f64>> {
    if y >= q.len() {
        return Err(Error::Index { index: y, len: q.len() });
    }
    let mut g = softmax_slice(q.as_slice(), tau);
    g[y] -= 1.0;
    g.iter_mut().for_each(|v| *v /= tau.value());
    Ok(g)
}

/// `Σ P (ln P − ln Q)` for `P = σ(teacher/τ)`, `Q = σ(student/τ)`, unscaled.
fn kl_teacher_student(teacher: &[f64], student: &[f64], tau: Temperature) -> f64 {
    let lp = log_softmax(teacher, tau);
    let lq = log_softmax(student, tau);
    let kl: f64 = lp
        .iter()
        .zip(&lq)
        .map(|(&a, &b)| a.exp() * (a - b))
        .sum();
    // Rounding can leave a tiny negative residue for identical inputs.
    kl.max(0.0)
}

fn check_pair(q_t: &LogitVector, q_s: &LogitVector) -> Result<()> {
    if q_t.len() != q_s.len() {
        return Err(Error::Shape(format!(
            "teacher has {} logits, student has {}",
            q_t.len(),
            q_s.len()
        )));
    }
    Ok(())
}

/// Logit distillation loss `τ² · KL(σ(q_t/τ) ‖ σ(q_s/τ))`; the teacher is the reference distribution.
pub fn kd_loss(q_t: &LogitVector, q_s: &LogitVector, tau: Temperature) -> Result<f64> {
    check_pair(q_t, q_s)?;
    let t = tau.value();
    Ok(t * t * kl_teacher_student(q_t.as_slice(), q_s.as_slice(), tau))
}

/// Batch form of [`kd_loss`]: mean KL over the batch, then the `τ²` factor.
pub fn kd_loss_batch(q_t: &[LogitVector], q_s: &[LogitVector], tau: Temperature) -> Result<f64> {
    if q_t.len() != q_s.len() || q_t.is_empty() {
        return Err(Error::Shape(format!(
            "batch sizes {} and {} must match and be nonzero",
            q_t.len(),
            q_s.len()
        )));
    }
    let mut total = 0.0;
    for (a, b) in q_t.iter().zip(q_s) {
        check_pair(a, b)?;
        total += kl_teacher_student(a.as_slice(), b.as_slice(), tau);
    }
    let t = tau.value();
    Ok(t * t * total / q_t.len() as f64)
}

/// `∂ kd_loss / ∂ q_s = τ (σ(q_s/τ) − σ(q_t/τ))`.
pub fn kd_loss_grad_student(q_t: &LogitVector, q_s: &LogitVector, tau: Temperature) -> Result<Vec<f64>> {
    check_pair(q_t, q_s)?;
    let p = softmax_slice(q_t.as_slice(), tau);
    let q = softmax_slice(q_s.as_slice(), tau);
    Ok(q.iter().zip(&p).map(|(a, b)| tau.value() * (a - b)).collect())
}

/// `2ab/(a+b)`, on whatever scale the inputs use.
pub fn harmonic_mean(base: f64, novel: f64) -> Result<f64> {
    if !(base > 0.0 && novel > 0.0) || !base.is_finite() || !novel.is_finite() {
        return Err(Error::Domain(format!(
            "harmonic mean needs positive accuracies, got {base} and {novel}"
        )));
    }
    Ok(2.0 * base * novel / (base + novel))
}

/// Mean absolute or squared coordinate difference.
pub fn feature_kd_loss(u_t: &FeatureVector, u_s: &FeatureVector, kind: FeatureLossKind) -> Result<f64> {
    if u_t.len() != u_s.len() || u_t.is_empty() {
        return Err(Error::Shape(format!(
            "teacher feature has {} coordinates, student has {}",
            u_t.len(),
            u_s.len()
        )));
    }
    let n = u_t.len() as f64;
    let diffs = u_t.as_slice().iter().zip(u_s.as_slice()).map(|(a, b)| a - b);
    Ok(match kind {
        FeatureLossKind::L1 => diffs.map(f64::abs).sum::<f64>() / n,
        FeatureLossKind::Mse => diffs.map(|d| d * d).sum::<f64>() / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits(v: &[f64]) -> LogitVector {
        LogitVector::new(v.to_vec()).unwrap()
    }

    fn feat(v: &[f64]) -> FeatureVector {
        FeatureVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn normalize_examples() {
        let out = l2_normalize(&feat(&[3.0, 4.0]), NORM_EPS).unwrap();
        assert!((out.as_slice()[0] - 0.6).abs() < 1e-15);
        assert!((out.as_slice()[1] - 0.8).abs() < 1e-15);

        let out = l2_normalize(&feat(&[1.0; 4]), NORM_EPS).unwrap();
        assert!(out.as_slice().iter().all(|&x| (x - 0.5).abs() < 1e-15));

        let unit = feat(&[0.0, 1.0, 0.0]);
        assert_eq!(l2_normalize(&unit, NORM_EPS).unwrap(), unit);
    }

    #[test]
    fn zero_vector_normalizes_to_zero() {
        let out = l2_normalize(&FeatureVector::zeros(5), NORM_EPS).unwrap();
        assert!(out.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn non_finite_features_are_rejected() {
        assert!(matches!(FeatureVector::new(vec![1.0, f64::NAN]), Err(Error::Domain(_))));
        assert!(matches!(LogitVector::new(vec![f64::INFINITY]), Err(Error::Domain(_))));
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&logits(&[0.0, 0.0, 0.0]), Temperature::ONE);
        assert!(p.as_slice().iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));

        for c in [-7.0, 0.0, 3.5, 200.0] {
            let p = softmax(&logits(&[c, c + 2f64.ln()]), Temperature::ONE);
            assert!((p.as_slice()[0] - 1.0 / 3.0).abs() < 1e-12);
            assert!((p.as_slice()[1] - 2.0 / 3.0).abs() < 1e-12);
        }

        let p = softmax(&logits(&[1000.0, 0.0]), Temperature::ONE);
        assert!(p.as_slice().iter().all(|x| x.is_finite()));
        assert!((p.as_slice()[0] - 1.0).abs() < 1e-15);
        assert!(p.as_slice()[1] < 1e-300);
    }

    #[test]
    fn temperature_must_be_positive() {
        assert!(Temperature::new(0.0).is_err());
        assert!(Temperature::new(-1.0).is_err());
        assert!(Temperature::new(f64::NAN).is_err());
        assert!(Temperature::new(0.5).is_ok());
    }

    #[test]
    fn cross_entropy_examples() {
        for n in [2usize, 5, 10] {
            let q = logits(&vec![0.0; n]);
            for y in 0..n {
                let l = cross_entropy(&q, y, Temperature::ONE).unwrap();
                assert!((l - (n as f64).ln()).abs() < 1e-12);
            }
        }
        let l = cross_entropy(&logits(&[3f64.ln(), 0.0]), 0, Temperature::ONE).unwrap();
        assert!((l - 0.287_682_072_451_780_9).abs() < 1e-9, "{l}");

        let mut prev = f64::INFINITY;
        for k in 0..30 {
            let l = cross_entropy(&logits(&[k as f64, 0.0, 0.0]), 0, Temperature::ONE).unwrap();
            assert!(l < prev);
            prev = l;
        }
        assert!(prev < 1e-11);
    }

    #[test]
    fn cross_entropy_index_error() {
        let err = cross_entropy(&logits(&[0.0, 1.0]), 2, Temperature::ONE).unwrap_err();
        assert!(matches!(err, Error::Index { index: 2, len: 2 }));
    }

    #[test]
    fn kd_loss_examples() {
        let q = logits(&[0.3, -1.2, 4.0]);
        for tau in [0.5, 1.0, 4.0] {
            let tau = Temperature::new(tau).unwrap();
            assert!(kd_loss(&q, &q, tau).unwrap() < 1e-9);
        }

        let l = kd_loss(&logits(&[3f64.ln(), 0.0]), &logits(&[0.0, 0.0]), Temperature::ONE).unwrap();
        let expected = 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln();
        assert!((l - expected).abs() < 1e-12);
        assert!((l - 0.130_812).abs() < 1e-6);

        let shifted = kd_loss(
            &logits(&[3f64.ln() + 5.0, 5.0]),
            &logits(&[-2.0, -2.0]),
            Temperature::ONE,
        )
        .unwrap();
        assert!((shifted - l).abs() < 1e-12);
    }

    #[test]
    fn kd_loss_shape_error() {
        let err = kd_loss(&logits(&[0.0, 1.0]), &logits(&[0.0]), Temperature::ONE).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn kd_batch_is_mean_then_scaled() {
        let tau = Temperature::new(2.0).unwrap();
        let t = vec![logits(&[1.0, 0.0]), logits(&[0.0, 2.0])];
        let s = vec![logits(&[0.0, 0.0]), logits(&[1.0, 0.0])];
        let single: f64 = t.iter().zip(&s).map(|(a, b)| kd_loss(a, b, tau).unwrap()).sum();
        let batch = kd_loss_batch(&t, &s, tau).unwrap();
        assert!((batch - single / 2.0).abs() < 1e-14);
    }

    #[test]
    fn harmonic_mean_examples() {
        assert!((harmonic_mean(86.96, 80.73).unwrap() - 83.73).abs() < 0.01);
        assert!((harmonic_mean(77.60, 70.73).unwrap() - 74.01).abs() < 0.01);
        assert!((harmonic_mean(0.42, 0.42).unwrap() - 0.42).abs() < 1e-15);
        assert!(harmonic_mean(0.0, 0.5).is_err());
        assert!(harmonic_mean(-1.0, 0.5).is_err());
    }

    #[test]
    fn feature_loss_examples() {
        let a = feat(&[1.0, 0.0]);
        let b = feat(&[0.0, 1.0]);
        assert_eq!(feature_kd_loss(&a, &b, FeatureLossKind::Mse).unwrap(), 1.0);
        assert_eq!(feature_kd_loss(&a, &b, FeatureLossKind::L1).unwrap(), 1.0);
        assert_eq!(feature_kd_loss(&a, &a, FeatureLossKind::L1).unwrap(), 0.0);
        assert!(feature_kd_loss(&a, &feat(&[1.0]), FeatureLossKind::L1).is_err());

        let x = feat(&[0.5, -1.5, 2.0]);
        let y = feat(&[1.0, 0.25, -0.75]);
        let c = -3.0;
        let xs = feat(&x.as_slice().iter().map(|v| v * c).collect::<Vec<_>>());
        let ys = feat(&y.as_slice().iter().map(|v| v * c).collect::<Vec<_>>());
        let l1 = feature_kd_loss(&x, &y, FeatureLossKind::L1).unwrap();
        let mse = feature_kd_loss(&x, &y, FeatureLossKind::Mse).unwrap();
        assert!((feature_kd_loss(&xs, &ys, FeatureLossKind::L1).unwrap() - 3.0 * l1).abs() < 1e-12);
        assert!((feature_kd_loss(&xs, &ys, FeatureLossKind::Mse).unwrap() - 9.0 * mse).abs() < 1e-12);
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }
}
