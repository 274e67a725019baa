//! One component autoencoder: convolutional encoder, soft-to-hard scalar
//! quantizer and sub-pixel decoder.
//!
//! All weights, biases and the codebook live in one flat parameter vector so
//! the optimizer and serializer treat a module as a single array.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CmrlError, Result};
use crate::framing::FRAME_LEN;
use crate::kernels::{
    conv1d_backward, conv1d_forward, leaky_relu_backward, leaky_relu_inplace, subpixel_deinterlace,
    subpixel_interlace, ConvKernel, ConvShape, FeatureMap,
};
use crate::quantizer::{
    dequantize, hard_quantize, initial_codebook, soft_quantize, soft_quantize_backward,
    SoftAssignment, CODEBOOK_SIZE,
};
use crate::real::Real;

/// Topology hyperparameters of one module.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModuleConfig {
    /// Feature channels `C` of the encoder and first decoder stage.
    pub channels: usize,
    /// Reduced width inside each bottleneck.
    pub bottleneck: usize,
    pub taps: usize,
    /// Downsampling stride `d`, also the interlace factor.
    pub stride: usize,
    /// Channels of the code map; code length is `FRAME_LEN / stride * code_channels`.
    pub code_channels: usize,
    /// Bottlenecks per stage; dilation alternates 1, 2, 1, ...
    pub blocks: usize,
    pub slope: f64,
}

impl ModuleConfig {
    /// The published topology with downsampling stride `stride`.
    pub fn table1(stride: usize) -> Self {
        Self {
            channels: 100,
            bottleneck: 20,
            taps: 9,
            stride,
            code_channels: 1,
            blocks: 2,
            slope: 0.2,
        }
    }

    pub fn code_len(&self) -> usize {
        FRAME_LEN / self.stride * self.code_channels
    }

    pub fn decoder_channels(&self) -> usize {
        self.channels / 2
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CmrlError::Config(format!("{m}: {self:?}")));
        if self.channels < 2 || self.channels % 2 != 0 {
            return bad("channels must be even and at least 2");
        }
        if self.bottleneck == 0 || self.code_channels == 0 || self.blocks == 0 {
            return bad("bottleneck, code channels and blocks must be positive");
        }
        if self.taps % 2 == 0 {
            return bad("taps must be odd");
        }
        if !matches!(self.stride, 2 | 4) {
            return bad("stride must be 2 or 4");
        }
        if !(self.slope > 0.0 && self.slope < 1.0) {
            return bad("slope must lie in (0, 1)");
        }
        Ok(())
    }
}

/// Placement of one convolution in the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerSpec {
    pub shape: ConvShape,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Step {
    Conv {
        layer: usize,
        act: bool,
    },
    Bottleneck {
        layers: [usize; 3],
    },
    /// Interlace by the stride, then activate.
    Interlace,
}

/// Trainable scalar counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCount {
    pub weights: usize,
    pub biases: usize,
    pub codebook: usize,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.weights + self.biases + self.codebook
    }
}

impl std::ops::Add for ParamCount {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            weights: self.weights + o.weights,
            biases: self.biases + o.biases,
            codebook: self.codebook + o.codebook,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    layers: Vec<LayerSpec>,
    encoder: Vec<Step>,
    decoder: Vec<Step>,
    codebook_offset: usize,
    len: usize,
}

impl Layout {
    fn build(cfg: &ModuleConfig) -> Self {
        let mut layers = Vec::new();
        let mut offset = 0;
        let mut add = |shape: ConvShape| {
            let w = offset;
            offset += shape.weight_count();
            let b = offset;
            offset += shape.out_channels;
            layers.push(LayerSpec {
                shape,
                weight_offset: w,
                bias_offset: b,
            });
            layers.len() - 1
        };
        let (c, b, k) = (cfg.channels, cfg.bottleneck, cfg.taps);
        let stage =
            |add: &mut dyn FnMut(ConvShape) -> usize, width: usize, steps: &mut Vec<Step>| {
                for i in 0..cfg.blocks {
                    let d = 1 + i % 2;
                    let l1 = add(ConvShape::new(k, width, b).with_dilation(d));
                    let l2 = add(ConvShape::new(k, b, b).with_dilation(d));
                    let l3 = add(ConvShape::new(k, b, width).with_dilation(d));
                    steps.push(Step::Bottleneck {
                        layers: [l1, l2, l3],
                    });
                }
            };
        let mut encoder = Vec::new();
        encoder.push(Step::Conv {
            layer: add(ConvShape::new(k, 1, c)),
            act: true,
        });
        stage(&mut add, c, &mut encoder);
        encoder.push(Step::Conv {
            layer: add(ConvShape::new(k, c, c).with_stride(cfg.stride)),
            act: true,
        });
        stage(&mut add, c, &mut encoder);
        encoder.push(Step::Conv {
            layer: add(ConvShape::new(k, c, cfg.code_channels)),
            act: false,
        });

        let half = cfg.decoder_channels();
        let mut decoder = Vec::new();
        decoder.push(Step::Conv {
            layer: add(ConvShape::new(k, cfg.code_channels, c)),
            act: true,
        });
        stage(&mut add, c, &mut decoder);
        decoder.push(Step::Conv {
            layer: add(ConvShape::new(k, c, half * cfg.stride)),
            act: false,
        });
        decoder.push(Step::Interlace);
        stage(&mut add, half, &mut decoder);
        decoder.push(Step::Conv {
            layer: add(ConvShape::new(k, half, 1)),
            act: false,
        });
        drop(add);
        let codebook_offset = offset;
        Self {
            layers,
            encoder,
            decoder,
            codebook_offset,
            len: offset + CODEBOOK_SIZE,
        }
    }
}

/// Intermediate values of one forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    records: Vec<Record<T>>,
}

#[derive(Debug, Clone)]
enum Record<T> {
    Conv {
        input: FeatureMap<T>,
        output: Option<FeatureMap<T>>,
    },
    Bottleneck {
        input: FeatureMap<T>,
        h1: FeatureMap<T>,
        h2: FeatureMap<T>,
    },
    Interlace {
        output: FeatureMap<T>,
    },
}

/// Whether the quantizer runs its differentiable or its inference form.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantMode {
    Soft,
    Hard,
}

/// Encoder output of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeVector<T> {
    /// Pre-quantization values, channel-major.
    pub values: Vec<T>,
    /// Nearest-centroid symbols.
    pub symbols: Vec<u16>,
}

/// Everything a soft forward pass produced for one frame.
#[derive(Debug, Clone)]
pub struct SoftPass<T> {
    pub code: Vec<T>,
    pub symbols: Vec<u16>,
    pub quant: SoftAssignment<T>,
    pub output: Vec<T>,
    enc: Tape<T>,
    dec: Tape<T>,
}

/// Weights, biases and codebook of one module plus its softmax temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct ModuleParams<T> {
    config: ModuleConfig,
    layout: Layout,
    params: Vec<T>,
    pub alpha: f64,
}

impl<T: Real> ModuleParams<T> {
    /// All weights and biases zero, codebook at its initial levels.
    pub fn zeros(config: ModuleConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::build(&config);
        let mut params = vec![T::zero(); layout.len];
        for (p, c) in params[layout.codebook_offset..]
            .iter_mut()
            .zip(initial_codebook())
        {
            *p = T::of(c);
        }
        Ok(Self {
            config,
            layout,
            params,
            alpha: 300.0,
        })
    }

    /// Seeded uniform initialization scaled by fan-in; layers feeding a
    /// shortcut or the output start small.
    pub fn init(config: ModuleConfig, seed: u64) -> Result<Self> {
        let mut m = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gain = (2.0 / (1.0 + config.slope * config.slope)).sqrt();
        let mut act = vec![false; m.layout.layers.len()];
        let mut residual_tail = vec![false; m.layout.layers.len()];
        for step in m.layout.encoder.iter().chain(&m.layout.decoder) {
            match *step {
                Step::Conv { layer, act: a } => act[layer] = a,
                Step::Bottleneck { layers } => {
                    act[layers[0]] = true;
                    act[layers[1]] = true;
                    residual_tail[layers[2]] = true;
                }
                Step::Interlace => {}
            }
        }
        if let Some(Step::Conv { layer, .. }) = m
            .layout
            .decoder
            .iter()
            .find(|s| matches!(s, Step::Conv { act: false, .. }))
        {
            act[*layer] = true;
        }
        for (i, spec) in m.layout.layers.clone().iter().enumerate() {
            let fan_in = (spec.shape.taps * spec.shape.in_channels) as f64;
            let mut bound = (3.0 / fan_in).sqrt();
            if act[i] {
                bound *= gain;
            }
            if residual_tail[i] {
                bound *= 0.3;
            }
            for w in
                &mut m.params[spec.weight_offset..spec.weight_offset + spec.shape.weight_count()]
            {
                *w = T::of(rng.gen_range(-bound..bound));
            }
        }
        Ok(m)
    }

    /// Rebuilds a module from a flat parameter vector.
    pub fn from_flat(config: ModuleConfig, params: Vec<T>, alpha: f64) -> Result<Self> {
        let mut m = Self::zeros(config)?;
        if params.len() != m.params.len() {
            return Err(CmrlError::ShapeMismatch(format!(
                "{} parameters for a module of {}",
                params.len(),
                m.params.len()
            )));
        }
        if !(alpha > 0.0) {
            return Err(CmrlError::Config(format!(
                "alpha must be positive, got {alpha}"
            )));
        }
        m.params = params;
        m.alpha = alpha;
        Ok(m)
    }

    pub fn config(&self) -> &ModuleConfig {
        &self.config
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layout.layers
    }

    pub fn flat(&self) -> &[T] {
        &self.params
    }

    pub fn flat_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn codebook(&self) -> &[T] {
        &self.params[self.layout.codebook_offset..]
    }

    pub fn codebook_offset(&self) -> usize {
        self.layout.codebook_offset
    }

    pub fn code_len(&self) -> usize {
        self.config.code_len()
    }

    pub fn param_count(&self) -> ParamCount {
        let weights = self
            .layout
            .layers
            .iter()
            .map(|l| l.shape.weight_count())
            .sum();
        let biases = self
            .layout
            .layers
            .iter()
            .map(|l| l.shape.out_channels)
            .sum();
        ParamCount {
            weights,
            biases,
            codebook: CODEBOOK_SIZE,
        }
    }

    /// Output shape `(width, channels)` after each encoder step, then each
    /// decoder step.
    pub fn layer_shapes(&self) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
        let x = FeatureMap::<T>::zeros(FRAME_LEN, 1);
        let (code, enc) = self
            .run(&self.layout.encoder, x, None)
            .expect("shapes are consistent");
        let _ = code;
        let dec_in =
            FeatureMap::<T>::zeros(FRAME_LEN / self.config.stride, self.config.code_channels);
        let (_, dec) = self
            .run(&self.layout.decoder, dec_in, None)
            .expect("shapes are consistent");
        (enc, dec)
    }

    fn kernel(&self, layer: usize) -> ConvKernel<'_, T> {
        let s = &self.layout.layers[layer];
        ConvKernel {
            shape: s.shape,
            weights: &self.params[s.weight_offset..s.weight_offset + s.shape.weight_count()],
            bias: &self.params[s.bias_offset..s.bias_offset + s.shape.out_channels],
        }
    }

    fn run(
        &self,
        steps: &[Step],
        mut x: FeatureMap<T>,
        mut tape: Option<&mut Vec<Record<T>>>,
    ) -> Result<(FeatureMap<T>, Vec<(usize, usize)>)> {
        let slope = T::of(self.config.slope);
        let mut shapes = Vec::with_capacity(steps.len());
        for step in steps {
            x = match *step {
                Step::Conv { layer, act } => {
                    let mut y = conv1d_forward(&x, &self.kernel(layer))?;
                    if act {
                        leaky_relu_inplace(&mut y, slope);
                    }
                    if let Some(t) = tape.as_deref_mut() {
                        t.push(Record::Conv {
                            input: x,
                            output: act.then(|| y.clone()),
                        });
                    }
                    y
                }
                Step::Bottleneck { layers } => {
                    let mut h1 = conv1d_forward(&x, &self.kernel(layers[0]))?;
                    leaky_relu_inplace(&mut h1, slope);
                    let mut h2 = conv1d_forward(&h1, &self.kernel(layers[1]))?;
                    leaky_relu_inplace(&mut h2, slope);
                    let mut y = conv1d_forward(&h2, &self.kernel(layers[2]))?;
                    y.add_assign(&x);
                    if let Some(t) = tape.as_deref_mut() {
                        t.push(Record::Bottleneck { input: x, h1, h2 });
                    }
                    y
                }
                Step::Interlace => {
                    let mut y = subpixel_interlace(&x, self.config.stride)?;
                    leaky_relu_inplace(&mut y, slope);
                    if let Some(t) = tape.as_deref_mut() {
                        t.push(Record::Interlace { output: y.clone() });
                    }
                    y
                }
            };
            shapes.push(x.shape());
        }
        Ok((x, shapes))
    }

    fn back(
        &self,
        steps: &[Step],
        tape: &Tape<T>,
        grad: FeatureMap<T>,
        grads: &mut [T],
    ) -> Result<FeatureMap<T>> {
        let slope = T::of(self.config.slope);
        let mut g = grad;
        for (step, rec) in steps.iter().zip(&tape.records).rev() {
            g = match (*step, rec) {
                (Step::Conv { layer, .. }, Record::Conv { input, output }) => {
                    if let Some(out) = output {
                        leaky_relu_backward(out, &mut g, slope);
                    }
                    self.conv_back(layer, input, &g, grads)?
                }
                (Step::Bottleneck { layers }, Record::Bottleneck { input, h1, h2 }) => {
                    let mut g2 = self.conv_back(layers[2], h2, &g, grads)?;
                    leaky_relu_backward(h2, &mut g2, slope);
                    let mut g1 = self.conv_back(layers[1], h1, &g2, grads)?;
                    leaky_relu_backward(h1, &mut g1, slope);
                    let mut gx = self.conv_back(layers[0], input, &g1, grads)?;
                    gx.add_assign(&g);
                    gx
                }
                (Step::Interlace, Record::Interlace { output }) => {
                    leaky_relu_backward(output, &mut g, slope);
                    subpixel_deinterlace(&g, self.config.stride)?
                }
                _ => {
                    return Err(CmrlError::ShapeMismatch(
                        "tape does not match module topology".into(),
                    ))
                }
            };
        }
        Ok(g)
    }

    fn conv_back(
        &self,
        layer: usize,
        input: &FeatureMap<T>,
        g: &FeatureMap<T>,
        grads: &mut [T],
    ) -> Result<FeatureMap<T>> {
        let spec = self.layout.layers[layer];
        let cg = conv1d_backward(input, &self.kernel(layer), g)?;
        for (a, &b) in grads[spec.weight_offset..].iter_mut().zip(&cg.weights) {
            *a = *a + b;
        }
        for (a, &b) in grads[spec.bias_offset..].iter_mut().zip(&cg.bias) {
            *a = *a + b;
        }
        Ok(cg.input)
    }

    fn check_frame(&self, frame: &[T]) -> Result<()> {
        if frame.len() != FRAME_LEN {
            return Err(CmrlError::LengthMismatch {
                expected: FRAME_LEN,
                actual: frame.len(),
            });
        }
        Ok(())
    }

    fn check_code(&self, len: usize) -> Result<()> {
        if len != self.code_len() {
            return Err(CmrlError::LengthMismatch {
                expected: self.code_len(),
                actual: len,
            });
        }
        Ok(())
    }

    /// Pre-quantization code of one frame.
    pub fn encode_values(&self, frame: &[T]) -> Result<Vec<T>> {
        self.check_frame(frame)?;
        let (code, _) = self.run(&self.layout.encoder, FeatureMap::from_signal(frame), None)?;
        Ok(code.into_vec())
    }

    pub fn encode_frame(&self, frame: &[T], mode: QuantMode) -> Result<CodeVector<T>> {
        let values = self.encode_values(frame)?;
        let symbols = match mode {
            QuantMode::Hard => hard_quantize(&values, self.codebook()),
            QuantMode::Soft => Vec::new(),
        };
        Ok(CodeVector { values, symbols })
    }

    /// Decoder output for an arbitrary real-valued code.
    pub fn decode_values(&self, code: &[T]) -> Result<Vec<T>> {
        self.check_code(code.len())?;
        let w = FRAME_LEN / self.config.stride;
        let x = FeatureMap::from_channel_major(w, self.config.code_channels, code.to_vec())?;
        let (y, _) = self.run(&self.layout.decoder, x, None)?;
        Ok(y.into_vec())
    }

    /// Reconstruction from received symbols.
    pub fn decode_frame(&self, symbols: &[u16]) -> Result<Vec<T>> {
        if let Some(&s) = symbols.iter().find(|&&s| s as usize >= CODEBOOK_SIZE) {
            return Err(CmrlError::UnknownSymbol(s as usize));
        }
        self.decode_values(&dequantize(symbols, self.codebook()))
    }

    /// Hard path: encode, quantize to symbols, decode.
    pub fn hard_pass(&self, frame: &[T]) -> Result<(Vec<u16>, Vec<T>)> {
        let symbols = self.encode_frame(frame, QuantMode::Hard)?.symbols;
        let out = self.decode_frame(&symbols)?;
        Ok((symbols, out))
    }

    /// Differentiable forward pass with tapes.
    pub fn soft_pass(&self, frame: &[T]) -> Result<SoftPass<T>> {
        self.check_frame(frame)?;
        let mut enc = Vec::new();
        let (code, _) = self.run(
            &self.layout.encoder,
            FeatureMap::from_signal(frame),
            Some(&mut enc),
        )?;
        let code = code.into_vec();
        let quant = soft_quantize(&code, self.codebook(), T::of(self.alpha));
        let symbols = hard_quantize(&code, self.codebook());
        let w = FRAME_LEN / self.config.stride;
        let x = FeatureMap::from_channel_major(w, self.config.code_channels, quant.values.clone())?;
        let mut dec = Vec::new();
        let (y, _) = self.run(&self.layout.decoder, x, Some(&mut dec))?;
        Ok(SoftPass {
            code,
            symbols,
            quant,
            output: y.into_vec(),
            enc: Tape { records: enc },
            dec: Tape { records: dec },
        })
    }

    /// Accumulates parameter gradients into `grads` and returns the gradient
    /// with respect to the input frame.
    ///
    /// `grad_output` is the gradient on the reconstruction, `grad_soft` an
    /// extra gradient on the soft code values, `grad_probs` one on the
    /// assignment probabilities and `grad_codebook` one on the centroids.
    pub fn backward(
        &self,
        pass: &SoftPass<T>,
        grad_output: &[T],
        grad_soft: Option<&[T]>,
        grad_probs: Option<&[T]>,
        grads: &mut [T],
    ) -> Result<Vec<T>> {
        if grads.len() != self.params.len() {
            return Err(CmrlError::ShapeMismatch(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.len()
            )));
        }
        self.check_frame(grad_output)?;
        let g = FeatureMap::from_signal(grad_output);
        let gcode = self
            .back(&self.layout.decoder, &pass.dec, g, grads)?
            .into_vec();
        let gcode: Vec<T> = match grad_soft {
            Some(extra) => gcode.iter().zip(extra).map(|(&a, &b)| a + b).collect(),
            None => gcode,
        };
        let qg = soft_quantize_backward(
            &pass.code,
            self.codebook(),
            T::of(self.alpha),
            &pass.quant,
            &gcode,
            grad_probs,
        );
        for (a, &b) in grads[self.layout.codebook_offset..]
            .iter_mut()
            .zip(&qg.codebook)
        {
            *a = *a + b;
        }
        let w = FRAME_LEN / self.config.stride;
        let gz = FeatureMap::from_channel_major(w, self.config.code_channels, qg.input)?;
        Ok(self
            .back(&self.layout.encoder, &pass.enc, gz, grads)?
            .into_vec())
    }
}
