//! Fixed-topology compute kernels: strided/dilated 1-D convolution,
//! leaky ReLU, sub-pixel interlacing, their exact gradients and Adam.
//!
//! Feature maps are stored channel-major so every inner loop runs along the
//! time axis. Each output element is accumulated in one fixed order (bias,
//! then input channel, then tap) no matter how the loop is blocked, so results
//! are reproducible bit for bit.

use crate::error::{CmrlError, Result};
use crate::real::Real;

/// Rank-2 array indexed by (position, channel).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    width: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn zeros(width: usize, channels: usize) -> Self {
        Self {
            width,
            channels,
            data: vec![T::zero(); width * channels],
        }
    }

    /// Builds from channel-major data (`data[c * width + p]`).
    pub fn from_channel_major(width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if width == 0 || channels == 0 || data.len() != width * channels {
            return Err(CmrlError::ShapeMismatch(format!(
                "{} values for a ({width}, {channels}) map",
                data.len()
            )));
        }
        Ok(Self {
            width,
            channels,
            data,
        })
    }

    /// Single-channel map.
    pub fn from_signal(samples: &[T]) -> Self {
        Self {
            width: samples.len(),
            channels: 1,
            data: samples.to_vec(),
        }
    }

    pub fn from_fn(width: usize, channels: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut m = Self::zeros(width, channels);
        for c in 0..channels {
            for p in 0..width {
                m.data[c * width + p] = f(p, c);
            }
        }
        m
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.width, self.channels)
    }

    pub fn get(&self, position: usize, channel: usize) -> T {
        self.data[channel * self.width + position]
    }

    pub fn set(&mut self, position: usize, channel: usize, v: T) {
        self.data[channel * self.width + position] = v;
    }

    pub fn channel(&self, c: usize) -> &[T] {
        &self.data[c * self.width..(c + 1) * self.width]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        &mut self.data[c * self.width..(c + 1) * self.width]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Geometry of one convolution layer. Weights are indexed
/// `(tap, in_channel, out_channel)`, flattened as
/// `(tap * in_channels + in_channel) * out_channels + out_channel`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub taps: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub dilation: usize,
}

impl ConvShape {
    pub fn new(taps: usize, in_channels: usize, out_channels: usize) -> Self {
        Self {
            taps,
            in_channels,
            out_channels,
            stride: 1,
            dilation: 1,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn weight_count(&self) -> usize {
        self.taps * self.in_channels * self.out_channels
    }

    pub fn output_width(&self, input_width: usize) -> usize {
        input_width.div_ceil(self.stride)
    }

    fn validate(&self) -> Result<()> {
        if self.taps % 2 == 0 || self.stride == 0 || self.dilation == 0 {
            return Err(CmrlError::ShapeMismatch(format!(
                "invalid convolution geometry {self:?}"
            )));
        }
        Ok(())
    }

    fn weight_index(&self, tap: usize, ic: usize, oc: usize) -> usize {
        (tap * self.in_channels + ic) * self.out_channels + oc
    }
}

/// Borrowed weights and biases of one layer.
#[derive(Debug, Clone, Copy)]
pub struct ConvKernel<'a, T> {
    pub shape: ConvShape,
    pub weights: &'a [T],
    pub bias: &'a [T],
}

impl<'a, T: Real> ConvKernel<'a, T> {
    pub fn new(shape: ConvShape, weights: &'a [T], bias: &'a [T]) -> Result<Self> {
        shape.validate()?;
        if weights.len() != shape.weight_count() || bias.len() != shape.out_channels {
            return Err(CmrlError::ShapeMismatch(format!(
                "{} weights / {} biases for {shape:?}",
                weights.len(),
                bias.len()
            )));
        }
        Ok(Self {
            shape,
            weights,
            bias,
        })
    }
}

/// Gradients of one convolution call.
#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub input: FeatureMap<T>,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

const BLOCK: usize = 32;

/// `dst[p] = init + sum_k coef_k * src_k[p]`, accumulated in term order.
fn correlate_row<T: Real>(dst: &mut [T], init: T, terms: &[(T, &[T])]) {
    let n = dst.len();
    let full = n / BLOCK * BLOCK;
    let mut p0 = 0;
    while p0 < full {
        let mut acc = [init; BLOCK];
        for &(c, src) in terms {
            let s: &[T; BLOCK] = src[p0..p0 + BLOCK].try_into().unwrap();
            for (a, &v) in acc.iter_mut().zip(s.iter()) {
                *a = *a + c * v;
            }
        }
        dst[p0..p0 + BLOCK].copy_from_slice(&acc);
        p0 += BLOCK;
    }
    for p in full..n {
        let mut a = init;
        for &(c, src) in terms {
            a = a + c * src[p];
        }
        dst[p] = a;
    }
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    const LANES: usize = 16;
    let n = a.len().min(b.len());
    let full = n / LANES * LANES;
    let mut acc = [T::zero(); LANES];
    let mut p = 0;
    while p < full {
        let (x, y) = (&a[p..p + LANES], &b[p..p + LANES]);
        for j in 0..LANES {
            acc[j] = acc[j] + x[j] * y[j];
        }
        p += LANES;
    }
    let mut s = T::zero();
    for v in acc {
        s = s + v;
    }
    for p in full..n {
        s = s + a[p] * b[p];
    }
    s
}

/// Zero-padded input split into `stride` phases so strided taps read
/// contiguous memory: `phase[(ic * stride + r) * len + m] = padded[m * stride + r]`.
struct Phases<T> {
    len: usize,
    stride: usize,
    data: Vec<T>,
}

impl<T: Real> Phases<T> {
    fn build(input: &FeatureMap<T>, shape: &ConvShape, out_width: usize) -> Self {
        let s = shape.stride;
        let reach = (shape.taps - 1) * shape.dilation;
        let len = out_width + reach.div_ceil(s);
        let pad = shape.taps / 2 * shape.dilation;
        let mut data = vec![T::zero(); input.channels * s * len];
        for ic in 0..input.channels {
            let row = input.channel(ic);
            for (q, &v) in row.iter().enumerate() {
                let u = q + pad;
                data[(ic * s + u % s) * len + u / s] = v;
            }
        }
        Self {
            len,
            stride: s,
            data,
        }
    }

    fn row(&self, ic: usize, r: usize) -> &[T] {
        let start = (ic * self.stride + r) * self.len;
        &self.data[start..start + self.len]
    }
}

fn tap_offsets(shape: &ConvShape) -> Vec<(usize, usize)> {
    (0..shape.taps)
        .map(|t| {
            let u = t * shape.dilation;
            (u % shape.stride, u / shape.stride)
        })
        .collect()
}

fn check_input<T: Real>(input: &FeatureMap<T>, kernel: &ConvKernel<'_, T>) -> Result<()> {
    kernel.shape.validate()?;
    if input.channels != kernel.shape.in_channels {
        return Err(CmrlError::ShapeMismatch(format!(
            "input has {} channels, kernel expects {}",
            input.channels, kernel.shape.in_channels
        )));
    }
    Ok(())
}

/// "Same" zero-padded convolution:
/// `out[p, oc] = bias[oc] + sum_{t, ic} in[p*stride + (t - taps/2)*dilation, ic] * w[t, ic, oc]`.
pub fn conv1d_forward<T: Real>(
    input: &FeatureMap<T>,
    kernel: &ConvKernel<'_, T>,
) -> Result<FeatureMap<T>> {
    check_input(input, kernel)?;
    let shape = kernel.shape;
    let out_width = shape.output_width(input.width);
    let phases = Phases::build(input, &shape, out_width);
    let offsets = tap_offsets(&shape);
    let mut out = FeatureMap::zeros(out_width, shape.out_channels);
    let mut terms: Vec<(T, &[T])> = Vec::with_capacity(shape.in_channels * shape.taps);
    for oc in 0..shape.out_channels {
        terms.clear();
        for ic in 0..shape.in_channels {
            for (t, &(r, a)) in offsets.iter().enumerate() {
                terms.push((
                    kernel.weights[shape.weight_index(t, ic, oc)],
                    &phases.row(ic, r)[a..],
                ));
            }
        }
        correlate_row(out.channel_mut(oc), kernel.bias[oc], &terms);
    }
    Ok(out)
}

/// Exact gradients of [`conv1d_forward`] given the upstream gradient.
pub fn conv1d_backward<T: Real>(
    input: &FeatureMap<T>,
    kernel: &ConvKernel<'_, T>,
    grad_out: &FeatureMap<T>,
) -> Result<ConvGrads<T>> {
    check_input(input, kernel)?;
    let shape = kernel.shape;
    let out_width = shape.output_width(input.width);
    if grad_out.shape() != (out_width, shape.out_channels) {
        return Err(CmrlError::ShapeMismatch(format!(
            "gradient shape {:?}, forward output ({out_width}, {})",
            grad_out.shape(),
            shape.out_channels
        )));
    }
    let phases = Phases::build(input, &shape, out_width);
    let offsets = tap_offsets(&shape);

    let bias = (0..shape.out_channels)
        .map(|oc| grad_out.channel(oc).iter().fold(T::zero(), |a, &b| a + b))
        .collect();

    let mut weights = vec![T::zero(); shape.weight_count()];
    for (t, &(r, a)) in offsets.iter().enumerate() {
        for ic in 0..shape.in_channels {
            let src = &phases.row(ic, r)[a..a + out_width];
            for oc in 0..shape.out_channels {
                weights[shape.weight_index(t, ic, oc)] = dot(src, grad_out.channel(oc));
            }
        }
    }

    // grad wrt each phase row: correlation of the zero-padded upstream
    // gradient with the taps that read that phase
    let shift = offsets.iter().map(|&(_, a)| a).max().unwrap_or(0);
    let glen = phases.len + shift;
    let mut gpad = vec![T::zero(); shape.out_channels * glen];
    for oc in 0..shape.out_channels {
        gpad[oc * glen + shift..oc * glen + shift + out_width]
            .copy_from_slice(grad_out.channel(oc));
    }
    let s = shape.stride;
    let pad = shape.taps / 2 * shape.dilation;
    let mut input_grad = FeatureMap::zeros(input.width, input.channels);
    let mut phase_grad = vec![T::zero(); phases.len];
    let mut terms: Vec<(T, &[T])> = Vec::with_capacity(shape.out_channels * shape.taps);
    for ic in 0..shape.in_channels {
        for r in 0..s {
            terms.clear();
            for oc in 0..shape.out_channels {
                for (t, &(rt, a)) in offsets.iter().enumerate() {
                    if rt == r {
                        let start = oc * glen + shift - a;
                        terms.push((
                            kernel.weights[shape.weight_index(t, ic, oc)],
                            &gpad[start..start + phases.len],
                        ));
                    }
                }
            }
            if terms.is_empty() {
                continue;
            }
            correlate_row(&mut phase_grad, T::zero(), &terms);
            let row = input_grad.channel_mut(ic);
            for (m, &g) in phase_grad.iter().enumerate() {
                let u = m * s + r;
                if u >= pad && u - pad < row.len() {
                    row[u - pad] = g;
                }
            }
        }
    }
    Ok(ConvGrads {
        input: input_grad,
        weights,
        bias,
    })
}

pub fn leaky_relu<T: Real>(x: T, slope: T) -> T {
    if x >= T::zero() {
        x
    } else {
        slope * x
    }
}

/// Derivative at `x`; the positive branch is used at zero.
pub fn leaky_relu_grad<T: Real>(x: T, slope: T) -> T {
    if x >= T::zero() {
        T::one()
    } else {
        slope
    }
}

pub fn leaky_relu_inplace<T: Real>(map: &mut FeatureMap<T>, slope: T) {
    for v in map.as_mut_slice() {
        *v = leaky_relu(*v, slope);
    }
}

/// Backward through an activation given its output. With a positive slope the
/// output has the sign of the input, so the output suffices.
pub fn leaky_relu_backward<T: Real>(output: &FeatureMap<T>, grad: &mut FeatureMap<T>, slope: T) {
    for (g, &y) in grad.as_mut_slice().iter_mut().zip(output.as_slice()) {
        *g = *g * leaky_relu_grad(y, slope);
    }
}

/// Sub-pixel upsampling: groups of `factor` channels interleave along width,
/// `out[factor*p + j, k] = in[p, factor*k + j]`.
pub fn subpixel_interlace<T: Real>(input: &FeatureMap<T>, factor: usize) -> Result<FeatureMap<T>> {
    if factor == 0 || input.channels % factor != 0 {
        return Err(CmrlError::OddChannels {
            channels: input.channels,
            factor,
        });
    }
    let (w, c) = input.shape();
    let mut out = FeatureMap::zeros(w * factor, c / factor);
    for k in 0..c / factor {
        let dst = out.channel_mut(k);
        for j in 0..factor {
            for (p, &v) in input.channel(factor * k + j).iter().enumerate() {
                dst[factor * p + j] = v;
            }
        }
    }
    Ok(out)
}

/// Inverse permutation of [`subpixel_interlace`]; also its backward pass.
pub fn subpixel_deinterlace<T: Real>(
    input: &FeatureMap<T>,
    factor: usize,
) -> Result<FeatureMap<T>> {
    if factor == 0 || input.width % factor != 0 {
        return Err(CmrlError::ShapeMismatch(format!(
            "width {} not divisible by {factor}",
            input.width
        )));
    }
    let (w, c) = input.shape();
    let mut out = FeatureMap::zeros(w / factor, c * factor);
    for k in 0..c {
        let src = input.channel(k);
        for j in 0..factor {
            let dst = out.channel_mut(factor * k + j);
            for (p, d) in dst.iter_mut().enumerate() {
                *d = src[factor * p + j];
            }
        }
    }
    Ok(out)
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first: Vec<T>,
    second: Vec<T>,
}

impl<T: Real> Adam<T> {
    pub fn new(len: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first: vec![T::zero(); len],
            second: vec![T::zero(); len],
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [T], grads: &[T], lr: f64) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(CmrlError::ShapeMismatch(format!(
                "{} params, {} grads, optimizer sized {}",
                params.len(),
                grads.len(),
                self.first.len()
            )));
        }
        self.step += 1;
        let b1 = T::of(self.beta1);
        let b2 = T::of(self.beta2);
        let c1 = T::of(1.0 - self.beta1.powi(self.step as i32));
        let c2 = T::of(1.0 - self.beta2.powi(self.step as i32));
        let eps = T::of(self.epsilon);
        let lr = T::of(lr);
        let one = T::one();
        for i in 0..params.len() {
            let g = grads[i];
            self.first[i] = b1 * self.first[i] + (one - b1) * g;
            self.second[i] = b2 * self.second[i] + (one - b2) * g * g;
            let m = self.first[i] / c1;
            let v = self.second[i] / c2;
            params[i] = params[i] - lr * m / (v.sqrt() + eps);
        }
        Ok(())
    }
}
