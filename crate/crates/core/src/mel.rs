//! Log-mel spectral distance used as the perceptual loss term.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::framing::{CODEC_SAMPLE_RATE, FRAME_LEN};
use crate::real::Real;

pub const MEL_BANDS: usize = 40;
pub const MEL_FLOOR: f64 = 1e-7;

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filters over the one-sided bins of an `fft_len`-point FFT,
/// row-major `[band][bin]`.
pub fn mel_filterbank(bands: usize, fft_len: usize, sample_rate: u32) -> Vec<Vec<f64>> {
    let bins = fft_len / 2 + 1;
    let nyquist = sample_rate as f64 / 2.0;
    let top = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..bands + 2)
        .map(|i| mel_to_hz(top * i as f64 / (bands + 1) as f64))
        .collect();
    let bin_hz = sample_rate as f64 / fft_len as f64;
    (0..bands)
        .map(|b| {
            let (lo, mid, hi) = (edges[b], edges[b + 1], edges[b + 2]);
            (0..bins)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    if f <= lo || f >= hi {
                        0.0
                    } else if f <= mid {
                        (f - lo) / (mid - lo)
                    } else {
                        (hi - f) / (hi - mid)
                    }
                })
                .collect()
        })
        .collect()
}

/// Per-frame loss `mean_b (log10(M_b(y) + floor) - log10(M_b(x) + floor))^2`
/// where `M_b` is the mel-weighted power spectrum.
pub struct MelLoss<T: Real> {
    forward: Arc<dyn Fft<T>>,
    inverse: Arc<dyn Fft<T>>,
    /// Sparse filters: (first bin, weights).
    filters: Vec<(usize, Vec<T>)>,
    len: usize,
}

impl<T: Real> MelLoss<T> {
    pub fn new() -> Self {
        let mut planner = FftPlanner::new();
        let dense = mel_filterbank(MEL_BANDS, FRAME_LEN, CODEC_SAMPLE_RATE);
        let filters = dense
            .iter()
            .map(|row| {
                let first = row.iter().position(|&v| v > 0.0).unwrap_or(0);
                let last = row.iter().rposition(|&v| v > 0.0).unwrap_or(0);
                (first, row[first..=last].iter().map(|&v| T::of(v)).collect())
            })
            .collect();
        Self {
            forward: planner.plan_fft_forward(FRAME_LEN),
            inverse: planner.plan_fft_inverse(FRAME_LEN),
            filters,
            len: FRAME_LEN,
        }
    }

    fn spectrum(&self, x: &[T]) -> Vec<Complex<T>> {
        let mut buf: Vec<Complex<T>> = x.iter().map(|&v| Complex::new(v, T::zero())).collect();
        self.forward.process(&mut buf);
        buf
    }

    fn log_mel(&self, spec: &[Complex<T>]) -> Vec<T> {
        let floor = T::of(MEL_FLOOR);
        self.filters
            .iter()
            .map(|(first, w)| {
                let e = w
                    .iter()
                    .enumerate()
                    .fold(T::zero(), |a, (i, &m)| a + m * spec[first + i].norm_sqr());
                (e + floor).log10()
            })
            .collect()
    }

    /// Log-mel features of one frame.
    pub fn features(&self, x: &[T]) -> Vec<T> {
        self.log_mel(&self.spectrum(x))
    }

    pub fn loss(&self, x: &[T], y: &[T]) -> T {
        let fx = self.features(x);
        let fy = self.features(y);
        let n = T::of(fx.len() as f64);
        fx.iter()
            .zip(&fy)
            .fold(T::zero(), |a, (&p, &q)| a + (q - p) * (q - p))
            / n
    }

    /// Loss and its gradient with respect to `y`, scaled by `weight`.
    pub fn loss_and_grad(&self, x: &[T], y: &[T], weight: T) -> (T, Vec<T>) {
        debug_assert_eq!(y.len(), self.len);
        let floor = T::of(MEL_FLOOR);
        let fx = self.features(x);
        let sy = self.spectrum(y);
        let bands = T::of(self.filters.len() as f64);
        let ln10 = T::LN_10();
        let two = T::of(2.0);
        let mut loss = T::zero();
        let half = self.len / 2;
        let mut gpow = vec![T::zero(); half + 1];
        for ((first, w), &lx) in self.filters.iter().zip(&fx) {
            let e = w
                .iter()
                .enumerate()
                .fold(T::zero(), |a, (i, &m)| a + m * sy[first + i].norm_sqr());
            let d = (e + floor).log10() - lx;
            loss = loss + d * d;
            let ge = weight * two * d / (bands * (e + floor) * ln10);
            for (i, &m) in w.iter().enumerate() {
                gpow[first + i] = gpow[first + i] + ge * m;
            }
        }
        // d|Y_k|^2 / dy_n = 2 Re(Y_k e^{+i 2 pi k n / N}) over the one-sided bins
        let mut buf = vec![Complex::new(T::zero(), T::zero()); self.len];
        for k in 0..=half {
            buf[k] = sy[k] * (two * gpow[k]);
        }
        self.inverse.process(&mut buf);
        (weight * loss / bands, buf.iter().map(|c| c.re).collect())
    }
}

impl<T: Real> Default for MelLoss<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn filterbank_shape() {
        let fb = mel_filterbank(40, 512, 16000);
        assert_eq!(fb.len(), 40);
        assert!(fb
            .iter()
            .all(|r| r.len() == 257 && r.iter().any(|&v| v > 0.0)));
        assert!(fb
            .iter()
            .all(|r| r.iter().all(|&v| (0.0..=1.0).contains(&v))));
    }

    #[test]
    fn identical_frames_have_zero_loss() {
        let m = MelLoss::<f64>::new();
        let x: Vec<f64> = (0..512).map(|n| (n as f64 * 0.1).sin()).collect();
        assert_eq!(m.loss(&x, &x), 0.0);
    }

    /// Direct DFT oracle for the mel energies.
    #[test]
    fn features_match_direct_dft() {
        let m = MelLoss::<f64>::new();
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let x: Vec<f64> = (0..512).map(|_| r.gen_range(-1.0..1.0)).collect();
        let fb = mel_filterbank(40, 512, 16000);
        let power: Vec<f64> = (0..257)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (n, &v) in x.iter().enumerate() {
                    let a = -2.0 * std::f64::consts::PI * (k * n) as f64 / 512.0;
                    re += v * a.cos();
                    im += v * a.sin();
                }
                re * re + im * im
            })
            .collect();
        let f = m.features(&x);
        for b in 0..40 {
            let e: f64 = fb[b].iter().zip(&power).map(|(w, p)| w * p).sum();
            assert!((f[b] - (e + MEL_FLOOR).log10()).abs() < 1e-9);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let m = MelLoss::<f64>::new();
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..512).map(|_| r.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..512).map(|_| r.gen_range(-1.0..1.0)).collect();
        let (l, g) = m.loss_and_grad(&x, &y, 1.0);
        assert!((l - m.loss(&x, &y)).abs() < 1e-12);
        let h = 1e-6;
        for &n in &[0usize, 3, 100, 255, 256, 511] {
            let (mut a, mut b) = (y.clone(), y.clone());
            a[n] += h;
            b[n] -= h;
            let fd = (m.loss(&x, &a) - m.loss(&x, &b)) / (2.0 * h);
            assert!(
                (fd - g[n]).abs() / fd.abs().max(1e-6) < 1e-5,
                "n={n}: {fd} vs {}",
                g[n]
            );
        }
    }
}
