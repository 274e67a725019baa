//! Soft-to-hard scalar quantization against a small trainable codebook.

use crate::real::Real;

/// Number of codebook centroids (5 bits per uncoded symbol).
pub const CODEBOOK_SIZE: usize = 32;

/// `CODEBOOK_SIZE` centroids evenly spaced over [-1, 1].
pub fn initial_codebook() -> Vec<f64> {
    let k = CODEBOOK_SIZE;
    (0..k)
        .map(|j| -1.0 + 2.0 * j as f64 / (k - 1) as f64)
        .collect()
}

/// Output of [`soft_quantize`]: mixture values and the assignment
/// probabilities, row-major `probs[i * K + j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftAssignment<T> {
    pub values: Vec<T>,
    pub probs: Vec<T>,
    pub levels: usize,
}

impl<T: Real> SoftAssignment<T> {
    pub fn row(&self, i: usize) -> &[T] {
        &self.probs[i * self.levels..(i + 1) * self.levels]
    }

    /// Mean assignment distribution over all scalars.
    pub fn mean_probs(&self) -> Vec<T> {
        let n = self.values.len();
        let mut m = vec![T::zero(); self.levels];
        for i in 0..n {
            for (a, &p) in m.iter_mut().zip(self.row(i)) {
                *a = *a + p;
            }
        }
        let inv = T::one() / T::of(n.max(1) as f64);
        m.iter_mut().for_each(|v| *v = *v * inv);
        m
    }
}

/// `p_j(z) = softmax_j(-alpha (z - c_j)^2)`, soft value `sum_j p_j c_j`.
pub fn soft_quantize<T: Real>(z: &[T], codebook: &[T], alpha: T) -> SoftAssignment<T> {
    let k = codebook.len();
    let mut probs = vec![T::zero(); z.len() * k];
    let mut values = Vec::with_capacity(z.len());
    for (i, &zi) in z.iter().enumerate() {
        let row = &mut probs[i * k..(i + 1) * k];
        let mut top = T::neg_infinity();
        for (r, &c) in row.iter_mut().zip(codebook) {
            let d = zi - c;
            *r = -alpha * d * d;
            top = top.max(*r);
        }
        let mut sum = T::zero();
        for r in row.iter_mut() {
            *r = (*r - top).exp();
            sum = sum + *r;
        }
        let mut v = T::zero();
        for (r, &c) in row.iter_mut().zip(codebook) {
            *r = *r / sum;
            v = v + *r * c;
        }
        values.push(v);
    }
    SoftAssignment {
        values,
        probs,
        levels: k,
    }
}

/// Gradients of a loss through [`soft_quantize`].
#[derive(Debug, Clone, PartialEq)]
pub struct SoftQuantGrads<T> {
    pub input: Vec<T>,
    pub codebook: Vec<T>,
    pub alpha: T,
}

/// Backward pass given the upstream gradient on the soft values and,
/// optionally, on the probabilities (same layout as `probs`).
pub fn soft_quantize_backward<T: Real>(
    z: &[T],
    codebook: &[T],
    alpha: T,
    fwd: &SoftAssignment<T>,
    grad_values: &[T],
    grad_probs: Option<&[T]>,
) -> SoftQuantGrads<T> {
    let k = codebook.len();
    let two = T::of(2.0);
    let mut input = vec![T::zero(); z.len()];
    let mut cb = vec![T::zero(); k];
    let mut ga = T::zero();
    let mut u = vec![T::zero(); k];
    for (i, &zi) in z.iter().enumerate() {
        let p = fwd.row(i);
        let gs = grad_values[i];
        let mut mean_u = T::zero();
        for j in 0..k {
            u[j] = gs * codebook[j] + grad_probs.map_or(T::zero(), |g| g[i * k + j]);
            mean_u = mean_u + p[j] * u[j];
        }
        let mut gz = T::zero();
        for j in 0..k {
            // gradient wrt the logit -alpha (z - c_j)^2
            let gl = p[j] * (u[j] - mean_u);
            let d = zi - codebook[j];
            gz = gz - gl * two * alpha * d;
            cb[j] = cb[j] + gl * two * alpha * d + gs * p[j];
            ga = ga - gl * d * d;
        }
        input[i] = gz;
    }
    SoftQuantGrads {
        input,
        codebook: cb,
        alpha: ga,
    }
}

/// Nearest centroid by squared distance; ties go to the lower index.
pub fn hard_quantize<T: Real>(z: &[T], codebook: &[T]) -> Vec<u16> {
    z.iter().map(|&v| nearest(v, codebook)).collect()
}

pub fn nearest<T: Real>(v: T, codebook: &[T]) -> u16 {
    let mut best = 0;
    let mut best_d = T::infinity();
    for (j, &c) in codebook.iter().enumerate() {
        let d = (v - c) * (v - c);
        if d < best_d {
            best = j;
            best_d = d;
        }
    }
    best as u16
}

/// Centroid values of `symbols`.
pub fn dequantize<T: Real>(symbols: &[u16], codebook: &[T]) -> Vec<T> {
    symbols.iter().map(|&s| codebook[s as usize]).collect()
}

/// Soft-to-hard annealing schedule for `alpha`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AlphaSchedule {
    pub initial: f64,
    pub growth: f64,
    pub max: f64,
}

impl Default for AlphaSchedule {
    fn default() -> Self {
        Self {
            initial: 300.0,
            growth: 1.02,
            max: 5000.0,
        }
    }
}

impl AlphaSchedule {
    /// Value during (zero-based) `epoch`.
    pub fn at(&self, epoch: usize) -> f64 {
        (self.initial * self.growth.powi(epoch as i32)).min(self.max)
    }
}
