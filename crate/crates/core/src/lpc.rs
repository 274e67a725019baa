//! Order-16 linear prediction: Levinson-Durbin analysis, line spectral
//! frequency quantization (72 bits per frame) and stateful analysis and
//! synthesis filtering.

use std::f64::consts::PI;

use crate::bits::{BitReader, BitWriter};
use crate::error::{CmrlError, Result};
use crate::framing::{Frame, CODEC_SAMPLE_RATE, FRAME_LEN, HOP};

pub const LPC_ORDER: usize = 16;
/// Bits per line spectral frequency.
pub const LSF_BITS: [u32; LPC_ORDER] = [5, 5, 5, 5, 5, 5, 5, 5, 4, 4, 4, 4, 4, 4, 4, 4];
pub const LPC_FRAME_BITS: u32 = 72;
/// Minimum spacing between adjacent dequantized LSFs, in radians.
const LSF_MIN_GAP: f64 = 0.01;
const LAG_REGULARIZATION: f64 = 1e-6;
const ROOT_GRID: usize = 4096;

/// Quantizer support of each LSF, in radians.
pub const LSF_RANGES: [(f64, f64); LPC_ORDER] = [
    (0.050, 0.360),
    (0.100, 0.560),
    (0.240, 0.790),
    (0.300, 1.020),
    (0.500, 1.260),
    (0.600, 1.490),
    (0.730, 1.700),
    (0.990, 1.910),
    (1.260, 2.130),
    (1.380, 2.290),
    (1.500, 2.460),
    (1.900, 2.600),
    (2.120, 2.730),
    (2.370, 2.860),
    (2.600, 2.990),
    (2.780, 3.100),
];

/// Side-info rate of one `LpcFrame` per codec frame, in bits per second.
pub fn side_info_bps() -> f64 {
    LPC_FRAME_BITS as f64 * CODEC_SAMPLE_RATE as f64 / HOP as f64
}

/// Quantized spectral envelope of one codec frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LpcFrame {
    pub lsf_indices: [u8; LPC_ORDER],
}

impl LpcFrame {
    /// Predictor coefficients `a_1..a_16` of `A(z) = 1 - sum a_i z^-i`.
    pub fn coefficients(&self) -> [f64; LPC_ORDER] {
        lsf_to_lpc(&self.lsfs())
    }

    /// Dequantized, monotonicity-projected line spectral frequencies.
    pub fn lsfs(&self) -> [f64; LPC_ORDER] {
        let mut w = [0.0; LPC_ORDER];
        for i in 0..LPC_ORDER {
            w[i] = level(i, self.lsf_indices[i] as usize);
        }
        project_monotone(&mut w);
        w
    }

    pub fn write(&self, out: &mut BitWriter) {
        for (i, &idx) in self.lsf_indices.iter().enumerate() {
            out.write_bits(idx as u64, LSF_BITS[i]);
        }
    }

    pub fn read(input: &mut BitReader<'_>) -> Result<Self> {
        let mut f = Self::default();
        for i in 0..LPC_ORDER {
            f.lsf_indices[i] = input.read_bits(LSF_BITS[i])? as u8;
        }
        Ok(f)
    }
}

fn level_count(i: usize) -> usize {
    1 << LSF_BITS[i]
}

fn step(i: usize) -> f64 {
    let (lo, hi) = LSF_RANGES[i];
    (hi - lo) / level_count(i) as f64
}

fn level(i: usize, j: usize) -> f64 {
    LSF_RANGES[i].0 + (j as f64 + 0.5) * step(i)
}

fn project_monotone(w: &mut [f64; LPC_ORDER]) {
    w[0] = w[0].max(LSF_MIN_GAP);
    for i in 1..LPC_ORDER {
        w[i] = w[i].max(w[i - 1] + LSF_MIN_GAP);
    }
    w[LPC_ORDER - 1] = w[LPC_ORDER - 1].min(PI - LSF_MIN_GAP);
    for i in (0..LPC_ORDER - 1).rev() {
        w[i] = w[i].min(w[i + 1] - LSF_MIN_GAP);
    }
}

/// Hamming window over `n` points.
pub fn hamming(n: usize) -> Vec<f64> {
    (0..n)
        .map(|k| 0.54 - 0.46 * (2.0 * PI * k as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Biased autocorrelation `r[0..=order]`.
pub fn autocorrelation(x: &[f64], order: usize) -> Vec<f64> {
    (0..=order)
        .map(|k| x.iter().zip(x.iter().skip(k)).map(|(a, b)| a * b).sum())
        .collect()
}

/// Solves the normal equations for the predictor coefficients. Returns the
/// coefficients and the final prediction error power.
pub fn levinson_durbin(r: &[f64], order: usize) -> Result<(Vec<f64>, f64)> {
    if r.len() <= order {
        return Err(CmrlError::ShapeMismatch(format!(
            "need {} lags, got {}",
            order + 1,
            r.len()
        )));
    }
    if r.iter().any(|v| !v.is_finite()) {
        return Err(CmrlError::NumericalFailure(
            "non-finite autocorrelation".into(),
        ));
    }
    let mut a = vec![0.0; order];
    if r[0] <= f64::MIN_POSITIVE {
        return Ok((a, 0.0));
    }
    let mut err = r[0];
    let mut prev = vec![0.0; order];
    for m in 0..order {
        let mut acc = r[m + 1];
        for i in 0..m {
            acc -= a[i] * r[m - i];
        }
        let k = acc / err;
        if !k.is_finite() || k.abs() >= 1.0 {
            return Err(CmrlError::NumericalFailure(format!(
                "reflection coefficient {k} at order {}",
                m + 1
            )));
        }
        prev[..m].copy_from_slice(&a[..m]);
        a[m] = k;
        for i in 0..m {
            a[i] = prev[i] - k * prev[m - 1 - i];
        }
        err *= 1.0 - k * k;
        if err <= 0.0 {
            return Err(CmrlError::NumericalFailure(
                "prediction error vanished".into(),
            ));
        }
    }
    Ok((a, err))
}

/// Predictor coefficients for a block of samples: Hamming window,
/// autocorrelation with `1e-6 * r[0]` diagonal loading, Levinson-Durbin.
pub fn estimate_coefficients(x: &[f64]) -> Result<[f64; LPC_ORDER]> {
    let w = hamming(x.len());
    let xw: Vec<f64> = x.iter().zip(&w).map(|(a, b)| a * b).collect();
    let mut r = autocorrelation(&xw, LPC_ORDER);
    r[0] *= 1.0 + LAG_REGULARIZATION;
    let (a, _) = levinson_durbin(&r, LPC_ORDER)?;
    let mut out = [0.0; LPC_ORDER];
    out.copy_from_slice(&a);
    Ok(out)
}

/// True when every root of `A(z)` lies strictly inside the unit circle.
pub fn is_stable(a: &[f64]) -> bool {
    // step-down on the monic polynomial 1 + c_1 z^-1 + ... with c_i = -a_i
    let mut c: Vec<f64> = a.iter().map(|v| -v).collect();
    for m in (1..=c.len()).rev() {
        let k = c[m - 1];
        if !k.is_finite() || k.abs() >= 1.0 {
            return false;
        }
        let d = 1.0 - k * k;
        let next: Vec<f64> = (0..m - 1).map(|i| (c[i] - k * c[m - 2 - i]) / d).collect();
        c = next;
    }
    true
}

fn symmetric_response(g: &[f64], w: f64) -> f64 {
    // g has length 2h+1 and is symmetric; returns the zero-phase value
    let h = g.len() / 2;
    let mut v = g[h];
    for (k, gk) in g.iter().enumerate().take(h) {
        v += 2.0 * gk * ((h - k) as f64 * w).cos();
    }
    v
}

fn roots_on_circle(g: &[f64]) -> Vec<f64> {
    let mut roots = Vec::new();
    let at = |k: usize| k as f64 * PI / ROOT_GRID as f64;
    let mut prev_w = at(0);
    let mut prev_v = symmetric_response(g, prev_w);
    for k in 1..=ROOT_GRID {
        let w = at(k);
        let v = symmetric_response(g, w);
        if prev_v == 0.0 {
            roots.push(prev_w);
        } else if prev_v * v < 0.0 {
            let (mut lo, mut hi, mut vlo) = (prev_w, w, prev_v);
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                let vm = symmetric_response(g, mid);
                if vm * vlo <= 0.0 {
                    hi = mid;
                } else {
                    lo = mid;
                    vlo = vm;
                }
            }
            roots.push(0.5 * (lo + hi));
        }
        prev_w = w;
        prev_v = v;
    }
    roots
}

/// Converts predictor coefficients to 16 increasing line spectral frequencies.
pub fn lpc_to_lsf(a: &[f64; LPC_ORDER]) -> Result<[f64; LPC_ORDER]> {
    if !is_stable(a) {
        return Err(CmrlError::UnstableFilter);
    }
    let p = LPC_ORDER;
    let mut poly = vec![0.0; p + 2];
    poly[0] = 1.0;
    for i in 0..p {
        poly[i + 1] = -a[i];
    }
    let sum: Vec<f64> = (0..=p + 1).map(|k| poly[k] + poly[p + 1 - k]).collect();
    let diff: Vec<f64> = (0..=p + 1).map(|k| poly[k] - poly[p + 1 - k]).collect();
    // deflate the trivial roots at z = -1 and z = 1
    let mut ps = vec![0.0; p + 1];
    let mut qs = vec![0.0; p + 1];
    ps[0] = sum[0];
    qs[0] = diff[0];
    for k in 1..=p {
        ps[k] = sum[k] - ps[k - 1];
        qs[k] = diff[k] + qs[k - 1];
    }
    let pr = roots_on_circle(&ps);
    let qr = roots_on_circle(&qs);
    if pr.len() != p / 2 || qr.len() != p / 2 {
        return Err(CmrlError::NumericalFailure(format!(
            "found {} + {} line spectral frequencies",
            pr.len(),
            qr.len()
        )));
    }
    let mut w = [0.0; LPC_ORDER];
    for i in 0..p / 2 {
        w[2 * i] = pr[i];
        w[2 * i + 1] = qr[i];
    }
    if w.windows(2).any(|s| s[1] <= s[0]) {
        return Err(CmrlError::NumericalFailure(
            "line spectral frequencies do not interlace".into(),
        ));
    }
    Ok(w)
}

fn mul_quadratic(poly: &[f64], c: f64) -> Vec<f64> {
    // poly * (1 - 2c z^-1 + z^-2)
    let mut out = vec![0.0; poly.len() + 2];
    for (k, &v) in poly.iter().enumerate() {
        out[k] += v;
        out[k + 1] -= 2.0 * c * v;
        out[k + 2] += v;
    }
    out
}

/// Rebuilds predictor coefficients from increasing line spectral frequencies.
pub fn lsf_to_lpc(w: &[f64; LPC_ORDER]) -> [f64; LPC_ORDER] {
    let mut p = vec![1.0, 1.0];
    let mut q = vec![1.0, -1.0];
    for i in 0..LPC_ORDER / 2 {
        p = mul_quadratic(&p, w[2 * i].cos());
        q = mul_quadratic(&q, w[2 * i + 1].cos());
    }
    let mut a = [0.0; LPC_ORDER];
    for i in 0..LPC_ORDER {
        a[i] = -0.5 * (p[i + 1] + q[i + 1]);
    }
    a
}

/// Quantizes a stable coefficient set. Indices are chosen in order so the
/// dequantized frequencies stay increasing, which makes quantization
/// idempotent on its own output.
pub fn lsf_quantize(a: &[f64; LPC_ORDER]) -> Result<LpcFrame> {
    let w = lpc_to_lsf(a)?;
    Ok(quantize_lsfs(&w))
}

pub fn quantize_lsfs(w: &[f64; LPC_ORDER]) -> LpcFrame {
    let mut frame = LpcFrame::default();
    let mut floor = LSF_MIN_GAP;
    for i in 0..LPC_ORDER {
        let n = level_count(i);
        let mut best = None;
        for j in 0..n {
            let v = level(i, j);
            if v < floor {
                continue;
            }
            let d = (v - w[i]).abs();
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((j, d));
            }
        }
        let j = best.map(|(j, _)| j).unwrap_or(n - 1);
        frame.lsf_indices[i] = j as u8;
        floor = level(i, j) + LSF_MIN_GAP;
    }
    frame
}

pub fn lsf_dequantize(frame: &LpcFrame) -> [f64; LPC_ORDER] {
    frame.coefficients()
}

/// `A(z)` applied sample by sample, with the last `LPC_ORDER` inputs carried
/// between calls.
#[derive(Debug, Clone, Default)]
pub struct AnalysisFilter {
    history: [f64; LPC_ORDER],
}

impl AnalysisFilter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn process(&mut self, a: &[f64; LPC_ORDER], x: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(x.len());
        for &s in x {
            let mut pred = 0.0;
            for i in 0..LPC_ORDER {
                pred += a[i] * self.history[i];
            }
            out.push(s - pred);
            self.history.copy_within(0..LPC_ORDER - 1, 1);
            self.history[0] = s;
        }
        out
    }
}

/// `1 / A(z)` with the last `LPC_ORDER` outputs carried between calls.
#[derive(Debug, Clone, Default)]
pub struct SynthesisFilter {
    history: [f64; LPC_ORDER],
}

impl SynthesisFilter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn process(&mut self, a: &[f64; LPC_ORDER], e: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(e.len());
        for &s in e {
            let mut pred = 0.0;
            for i in 0..LPC_ORDER {
                pred += a[i] * self.history[i];
            }
            let y = s + pred;
            out.push(y);
            self.history.copy_within(0..LPC_ORDER - 1, 1);
            self.history[0] = y;
        }
        out
    }
}

/// Result of analysing one frame.
#[derive(Debug, Clone)]
pub struct LpcAnalysis {
    /// Unquantized Levinson-Durbin coefficients.
    pub coefficients: [f64; LPC_ORDER],
    pub quantized: LpcFrame,
    /// Frame filtered by the quantized `A(z)`.
    pub residual: Frame,
}

/// Per-stream analyzer for consecutive, non-overlapping frames.
#[derive(Debug, Clone, Default)]
pub struct LpcAnalyzer {
    filter: AnalysisFilter,
}

impl LpcAnalyzer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn analyze(&mut self, frame: &Frame) -> Result<LpcAnalysis> {
        let coefficients = estimate_coefficients(&frame.samples)?;
        let quantized = lsf_quantize(&coefficients)?;
        let residual = self
            .filter
            .process(&quantized.coefficients(), &frame.samples);
        Ok(LpcAnalysis {
            coefficients,
            quantized,
            residual: Frame::new(residual, frame.index)?,
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct LpcSynthesizer {
    filter: SynthesisFilter,
}

impl LpcSynthesizer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn synthesize(&mut self, residual: &Frame, lpc: &LpcFrame) -> Result<Frame> {
        let a = lpc.coefficients();
        if !is_stable(&a) {
            return Err(CmrlError::UnstableFilter);
        }
        Frame::new(self.filter.process(&a, &residual.samples), residual.index)
    }
}

/// Analyses a continuous signal on the codec frame clock: frame `k` estimates
/// its envelope from samples `[HOP*k, HOP*k + FRAME_LEN)` and filters the hop
/// `[HOP*k, HOP*(k+1))`. Returns one `LpcFrame` per frame and a residual of
/// the same length as `x`.
pub fn analyze_signal(x: &[f64], frames: usize) -> Result<(Vec<LpcFrame>, Vec<f64>)> {
    let mut filter = AnalysisFilter::new();
    let mut lpc = Vec::with_capacity(frames);
    let mut residual = Vec::with_capacity(x.len());
    let mut window = vec![0.0; FRAME_LEN];
    for k in 0..frames {
        let start = (k * HOP).min(x.len());
        let end = (start + FRAME_LEN).min(x.len());
        window.fill(0.0);
        window[..end - start].copy_from_slice(&x[start..end]);
        let q = lsf_quantize(&estimate_coefficients(&window)?)?;
        let hop_end = if k + 1 == frames {
            x.len()
        } else {
            ((k + 1) * HOP).min(x.len())
        };
        residual.extend(filter.process(&q.coefficients(), &x[start..hop_end]));
        lpc.push(q);
    }
    Ok((lpc, residual))
}

/// Inverse of [`analyze_signal`].
pub fn synthesize_signal(residual: &[f64], lpc: &[LpcFrame]) -> Result<Vec<f64>> {
    let mut filter = SynthesisFilter::new();
    let mut out = Vec::with_capacity(residual.len());
    for (k, q) in lpc.iter().enumerate() {
        let start = (k * HOP).min(residual.len());
        let end = if k + 1 == lpc.len() {
            residual.len()
        } else {
            ((k + 1) * HOP).min(residual.len())
        };
        let a = q.coefficients();
        if !is_stable(&a) {
            return Err(CmrlError::UnstableFilter);
        }
        out.extend(filter.process(&a, &residual[start..end]));
    }
    Ok(out)
}

/// RMS difference in dB between the all-pole envelopes of two coefficient sets.
pub fn spectral_distortion_db(a: &[f64; LPC_ORDER], b: &[f64; LPC_ORDER], points: usize) -> f64 {
    let log_mag = |c: &[f64; LPC_ORDER], w: f64| {
        let (mut re, mut im) = (1.0, 0.0);
        for (i, ci) in c.iter().enumerate() {
            let ph = (i + 1) as f64 * w;
            re -= ci * ph.cos();
            im += ci * ph.sin();
        }
        -10.0 * (re * re + im * im).log10()
    };
    let mut acc = 0.0;
    for k in 0..points {
        let w = PI * (k as f64 + 0.5) / points as f64;
        let d = log_mag(a, w) - log_mag(b, w);
        acc += d * d;
    }
    (acc / points as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn ar1(n: usize, rho: f64, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Vec::with_capacity(n);
        let mut prev = 0.0;
        for _ in 0..n {
            let e: f64 = rng.sample(StandardNormal);
            prev = rho * prev + e;
            x.push(prev);
        }
        x
    }

    #[test]
    fn levinson_on_analytic_ar1_autocorrelation() {
        let r: Vec<f64> = (0..=LPC_ORDER)
            .map(|k| 0.9f64.powi(k as i32) / (1.0 - 0.81))
            .collect();
        let (a, err) = levinson_durbin(&r, LPC_ORDER).unwrap();
        assert!((a[0] - 0.9).abs() < 1e-12);
        assert!(a[1..].iter().all(|v| v.abs() < 1e-12));
        assert!((err - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ar1_estimate() {
        let x = ar1(64_000, 0.9, 7);
        let a = estimate_coefficients(&x).unwrap();
        assert!((a[0] - 0.9).abs() < 0.02, "a1 = {}", a[0]);
        assert!(a[1..].iter().all(|v| v.abs() < 0.05), "{a:?}");
    }

    #[test]
    fn white_noise_estimate_is_flat() {
        let x = ar1(64_000, 0.0, 11);
        let a = estimate_coefficients(&x).unwrap();
        assert!(a.iter().all(|v| v.abs() < 0.05), "{a:?}");
    }

    #[test]
    fn zero_frame() {
        let frame = Frame::new(vec![0.0; FRAME_LEN], 0).unwrap();
        let out = LpcAnalyzer::new().analyze(&frame).unwrap();
        assert!(out.coefficients.iter().all(|&v| v == 0.0));
        assert!(out.residual.samples.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lsf_round_trip_unquantized() {
        let x = ar1(4096, 0.7, 3);
        let a = estimate_coefficients(&x).unwrap();
        let w = lpc_to_lsf(&a).unwrap();
        let b = lsf_to_lpc(&w);
        for i in 0..LPC_ORDER {
            assert!((a[i] - b[i]).abs() < 1e-9, "{i}: {} vs {}", a[i], b[i]);
        }
    }

    #[test]
    fn flat_filter_lsfs_are_uniform() {
        let w = lpc_to_lsf(&[0.0; LPC_ORDER]).unwrap();
        for (i, v) in w.iter().enumerate() {
            assert!((v - (i + 1) as f64 * PI / 17.0).abs() < 1e-9);
        }
    }

    #[test]
    fn quantize_is_idempotent() {
        for seed in 0..20 {
            let x = ar1(FRAME_LEN, 0.5 + 0.02 * seed as f64, seed);
            let a = estimate_coefficients(&x).unwrap();
            let q = lsf_quantize(&a).unwrap();
            let q2 = lsf_quantize(&q.coefficients()).unwrap();
            assert_eq!(q, q2, "seed {seed}");
        }
    }

    #[test]
    fn bit_budget_is_2400_bps() {
        assert_eq!(LSF_BITS.iter().sum::<u32>(), LPC_FRAME_BITS);
        assert!((side_info_bps() - 2400.0).abs() < 1e-9);
        let mut w = BitWriter::new();
        let f = LpcFrame {
            lsf_indices: [31, 0, 5, 17, 2, 9, 15, 0, 1, 2, 3, 4, 5, 6, 7, 8],
        };
        f.write(&mut w);
        assert_eq!(w.bit_len(), 72);
        let bytes = w.into_bytes();
        assert_eq!(LpcFrame::read(&mut BitReader::new(&bytes)).unwrap(), f);
    }

    #[test]
    fn ar1_quantization_distortion_below_1db() {
        let mut a = [0.0; LPC_ORDER];
        a[0] = 0.9;
        let q = lsf_quantize(&a).unwrap();
        let sd = spectral_distortion_db(&a, &q.coefficients(), 512);
        assert!(sd < 1.0, "spectral distortion {sd} dB");
    }

    #[test]
    fn dequantized_lsfs_are_increasing_and_stable() {
        for seed in 0..20 {
            let x = ar1(FRAME_LEN, -0.8 + 0.08 * seed as f64, 100 + seed);
            let q = lsf_quantize(&estimate_coefficients(&x).unwrap()).unwrap();
            let w = q.lsfs();
            assert!(w[0] > 0.0 && w[LPC_ORDER - 1] < PI);
            assert!(w.windows(2).all(|s| s[1] > s[0]));
            assert!(is_stable(&q.coefficients()));
        }
    }

    #[test]
    fn unstable_input_rejected() {
        let mut a = [0.0; LPC_ORDER];
        a[0] = 1.5;
        assert!(matches!(lsf_quantize(&a), Err(CmrlError::UnstableFilter)));
    }

    #[test]
    fn impulse_response_is_geometric() {
        let mut a = [0.0; LPC_ORDER];
        a[0] = 0.5;
        let mut e = vec![0.0; 8];
        e[0] = 1.0;
        let y = SynthesisFilter::new().process(&a, &e);
        for (n, v) in y.iter().enumerate() {
            assert!((v - 0.5f64.powi(n as i32)).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_residual_rings_down() {
        let x = ar1(2 * FRAME_LEN, 0.9, 5);
        let mut an = LpcAnalyzer::new();
        let mut syn = LpcSynthesizer::new();
        let f0 = Frame::new(x[..FRAME_LEN].to_vec(), 0).unwrap();
        let r0 = an.analyze(&f0).unwrap();
        syn.synthesize(&r0.residual, &r0.quantized).unwrap();
        let silent = Frame::new(vec![0.0; FRAME_LEN], 1).unwrap();
        let ring = syn.synthesize(&silent, &r0.quantized).unwrap();
        assert!(ring.samples[0].abs() > 0.0);
        let head: f64 = ring.samples[..32].iter().map(|v| v * v).sum();
        let tail: f64 = ring.samples[FRAME_LEN - 32..].iter().map(|v| v * v).sum();
        assert!(tail < head * 1e-3, "head {head}, tail {tail}");
    }

    #[test]
    fn frame_analysis_synthesis_identity() {
        let x = ar1(4 * FRAME_LEN, 0.95, 9);
        let mut an = LpcAnalyzer::new();
        let mut syn = LpcSynthesizer::new();
        for k in 0..4 {
            let f = Frame::new(x[k * FRAME_LEN..(k + 1) * FRAME_LEN].to_vec(), k).unwrap();
            let out = an.analyze(&f).unwrap();
            let back = syn.synthesize(&out.residual, &out.quantized).unwrap();
            let err = back
                .samples
                .iter()
                .zip(&f.samples)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-6, "frame {k}: {err}");
            let e_res: f64 = out.residual.samples.iter().map(|v| v * v).sum();
            let e_in: f64 = f.samples.iter().map(|v| v * v).sum();
            assert!(e_res <= e_in);
        }
    }

    #[test]
    fn signal_analysis_synthesis_identity() {
        let x = ar1(10_000, 0.8, 21);
        let frames = crate::framing::frame_count(x.len());
        let (lpc, res) = analyze_signal(&x, frames).unwrap();
        assert_eq!(lpc.len(), frames);
        assert_eq!(res.len(), x.len());
        let y = synthesize_signal(&res, &lpc).unwrap();
        let err = y
            .iter()
            .zip(&x)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-6, "{err}");
    }
}
