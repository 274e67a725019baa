//! Cross-module residual cascade: residual chaining, concatenated coding,
//! summed decoding and the composite training loss.

use rayon::prelude::*;

use crate::config::{BitrateMode, LossWeights};
use crate::entropy::{CodingMode, HuffmanTable};
use crate::error::{CmrlError, Result};
use crate::framing::FRAME_LEN;
use crate::mel::MelLoss;
use crate::module::{ModuleParams, ParamCount, SoftPass};
use crate::quantizer::CODEBOOK_SIZE;
use crate::real::Real;

/// Input of module `i` (zero-based): `x` minus the first `i` reconstructions.
pub fn residual_input<T: Real>(x: &[T], reconstructions: &[Vec<T>], i: usize) -> Vec<T> {
    let mut r = x.to_vec();
    for rec in &reconstructions[..i] {
        for (a, &b) in r.iter_mut().zip(rec) {
            *a = *a - b;
        }
    }
    r
}

/// Hard-mode cascade output for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadeCode<T> {
    pub symbols: Vec<Vec<u16>>,
    pub reconstructions: Vec<Vec<T>>,
    /// What no module explained: `x - sum of reconstructions`.
    pub residual: Vec<T>,
}

impl<T: Real> CascadeCode<T> {
    pub fn output(&self) -> Vec<T> {
        sum_frames(&self.reconstructions)
    }
}

fn sum_frames<T: Real>(frames: &[Vec<T>]) -> Vec<T> {
    let mut y = vec![T::zero(); frames.first().map_or(0, Vec::len)];
    for f in frames {
        for (a, &b) in y.iter_mut().zip(f) {
            *a = *a + b;
        }
    }
    y
}

/// Runs every module in order on the running residual, quantizing hard.
pub fn cascade_encode<T: Real>(modules: &[ModuleParams<T>], x: &[T]) -> Result<CascadeCode<T>> {
    let mut residual = x.to_vec();
    let mut symbols = Vec::with_capacity(modules.len());
    let mut reconstructions = Vec::with_capacity(modules.len());
    for m in modules {
        let (s, rec) = m.hard_pass(&residual)?;
        for (a, &b) in residual.iter_mut().zip(&rec) {
            *a = *a - b;
        }
        symbols.push(s);
        reconstructions.push(rec);
    }
    Ok(CascadeCode {
        symbols,
        reconstructions,
        residual,
    })
}

/// Sum of the module decoders' outputs.
pub fn cascade_decode<T: Real>(
    modules: &[ModuleParams<T>],
    symbols: &[Vec<u16>],
) -> Result<Vec<T>> {
    if symbols.len() != modules.len() {
        return Err(CmrlError::ModelMismatch(format!(
            "{} code vectors for {} modules",
            symbols.len(),
            modules.len()
        )));
    }
    let outs = modules
        .iter()
        .zip(symbols)
        .map(|(m, s)| m.decode_frame(s))
        .collect::<Result<Vec<_>>>()?;
    Ok(sum_frames(&outs))
}

/// Soft-mode cascade: reconstructions and the final residual.
pub fn cascade_soft<T: Real>(
    modules: &[ModuleParams<T>],
    x: &[T],
) -> Result<(Vec<Vec<T>>, Vec<T>)> {
    let mut residual = x.to_vec();
    let mut recs = Vec::with_capacity(modules.len());
    for m in modules {
        let rec = m.soft_pass(&residual)?.output;
        for (a, &b) in residual.iter_mut().zip(&rec) {
            *a = *a - b;
        }
        recs.push(rec);
    }
    Ok((recs, residual))
}

/// Terms of the training objective, averaged over a batch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    /// Mean squared error between the input and the summed reconstruction.
    pub reconstruction: f64,
    pub perceptual: f64,
    /// Mean squared gap between soft and hard code values.
    pub quantization: f64,
    /// Entropy (bits/symbol) of the batch-mean assignment distribution.
    pub entropy: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn combine(
        reconstruction: f64,
        perceptual: f64,
        quantization: f64,
        entropy: f64,
        w: &LossWeights,
    ) -> Self {
        let total = reconstruction
            + w.perceptual * perceptual
            + w.quantization * quantization
            + w.entropy * entropy;
        Self {
            reconstruction,
            perceptual,
            quantization,
            entropy,
            total,
        }
    }
}

/// One training example: the frame to reconstruct and, when earlier frozen
/// modules already explain part of it, their summed output.
#[derive(Debug, Clone, Copy)]
pub struct TrainFrame<'a, T> {
    pub target: &'a [T],
    pub prefix: Option<&'a [T]>,
}

/// Result of [`cascade_step`].
#[derive(Debug, Clone)]
pub struct StepResult<T> {
    pub loss: LossBreakdown,
    /// Flat gradient per trained module (empty when not requested).
    pub grads: Vec<Vec<T>>,
    /// Hard symbol counts per trained module.
    pub histograms: Vec<Vec<u64>>,
}

struct FrameFwd<T> {
    passes: Vec<SoftPass<T>>,
    grad_out: Vec<T>,
    rec: f64,
    perc: f64,
    quant: f64,
}

/// Frames per gradient partial sum. Partial sums are reduced in a fixed
/// order so results do not depend on the thread count.
const CHUNK: usize = 4;

/// Loss (and optionally gradients) of the soft cascade of `modules` over a
/// batch. Each module codes the residual left by the prefix and the modules
/// before it; the loss compares the target with prefix plus all soft
/// reconstructions.
pub fn cascade_step<T: Real>(
    modules: &[&ModuleParams<T>],
    frames: &[TrainFrame<'_, T>],
    weights: &LossWeights,
    mel: &MelLoss<T>,
    want_grads: bool,
) -> Result<StepResult<T>> {
    if modules.is_empty() || frames.is_empty() {
        return Err(CmrlError::ShapeMismatch(
            "empty module list or batch".into(),
        ));
    }
    let b = frames.len();
    let total_symbols: usize = modules.iter().map(|m| m.code_len()).sum();
    let inv_samples = T::of(1.0 / (b * FRAME_LEN) as f64);
    let quant_scale = 1.0 / (b * total_symbols) as f64;
    let wq = T::of(weights.quantization * quant_scale);
    let wp = T::of(weights.perceptual / b as f64);

    let forward = |f: &TrainFrame<'_, T>| -> Result<FrameFwd<T>> {
        if f.target.len() != FRAME_LEN || f.prefix.is_some_and(|p| p.len() != FRAME_LEN) {
            return Err(CmrlError::LengthMismatch {
                expected: FRAME_LEN,
                actual: f.target.len(),
            });
        }
        let mut input: Vec<T> = match f.prefix {
            Some(p) => f.target.iter().zip(p).map(|(&x, &q)| x - q).collect(),
            None => f.target.to_vec(),
        };
        let mut passes = Vec::with_capacity(modules.len());
        let mut quant = 0.0;
        for m in modules {
            let pass = m.soft_pass(&input)?;
            for (a, &y) in input.iter_mut().zip(&pass.output) {
                *a = *a - y;
            }
            let cb = m.codebook();
            for (&v, &s) in pass.quant.values.iter().zip(&pass.symbols) {
                let d = (v - cb[s as usize]).to_f64_lossy();
                quant += d * d;
            }
            passes.push(pass);
        }
        // input now holds target - prefix - sum of reconstructions
        let y: Vec<T> = f.target.iter().zip(&input).map(|(&x, &e)| x - e).collect();
        let rec = input.iter().map(|&e| e.to_f64_lossy().powi(2)).sum::<f64>();
        let (perc, gp) = mel.loss_and_grad(f.target, &y, T::one());
        let two = T::of(2.0);
        let grad_out = gp
            .iter()
            .zip(&input)
            .map(|(&g, &e)| wp * g - two * e * inv_samples)
            .collect();
        Ok(FrameFwd {
            passes,
            grad_out,
            rec,
            perc: perc.to_f64_lossy(),
            quant,
        })
    };
    let fwd: Vec<FrameFwd<T>> = frames.par_iter().map(forward).collect::<Result<_>>()?;

    // batch-mean assignment distribution per module
    let mut entropy = 0.0;
    let mut prob_grads = Vec::with_capacity(modules.len());
    let mut histograms = Vec::with_capacity(modules.len());
    let ln2 = std::f64::consts::LN_2;
    for (k, m) in modules.iter().enumerate() {
        let n = m.code_len();
        let mut mean = vec![0.0f64; CODEBOOK_SIZE];
        let mut hist = vec![0u64; CODEBOOK_SIZE];
        for f in &fwd {
            let p = &f.passes[k];
            for i in 0..n {
                for (a, &v) in mean.iter_mut().zip(p.quant.row(i)) {
                    *a += v.to_f64_lossy();
                }
            }
            for &s in &p.symbols {
                hist[s as usize] += 1;
            }
        }
        mean.iter_mut().for_each(|v| *v /= (b * n) as f64);
        let share = n as f64 / total_symbols as f64;
        let h: f64 = mean.iter().map(|&p| -p * p.max(1e-30).log2()).sum();
        entropy += share * h;
        let g: Vec<T> = mean
            .iter()
            .map(|&p| {
                T::of(-weights.entropy * share * (p.max(1e-30).log2() + 1.0 / ln2) / (b * n) as f64)
            })
            .collect();
        prob_grads.push(g.repeat(n));
        histograms.push(hist);
    }

    let rec = fwd.iter().map(|f| f.rec).sum::<f64>() / (b * FRAME_LEN) as f64;
    let perc = fwd.iter().map(|f| f.perc).sum::<f64>() / b as f64;
    let quant = fwd.iter().map(|f| f.quant).sum::<f64>() * quant_scale;
    let loss = LossBreakdown::combine(rec, perc, quant, entropy, weights);
    if !want_grads {
        return Ok(StepResult {
            loss,
            grads: Vec::new(),
            histograms,
        });
    }

    let backward_chunk = |chunk: &[FrameFwd<T>]| -> Result<Vec<Vec<T>>> {
        let mut grads: Vec<Vec<T>> = modules.iter().map(|m| vec![T::zero(); m.len()]).collect();
        for f in chunk {
            // gradient reaching module k's output: grad_out minus the input
            // gradients of every later module (they see x - sum of earlier outputs)
            let mut later = vec![T::zero(); FRAME_LEN];
            for k in (0..modules.len()).rev() {
                let m = modules[k];
                let p = &f.passes[k];
                let g_out: Vec<T> = f
                    .grad_out
                    .iter()
                    .zip(&later)
                    .map(|(&g, &l)| g - l)
                    .collect();
                let cb = m.codebook();
                let two = T::of(2.0);
                let gs: Vec<T> = p
                    .quant
                    .values
                    .iter()
                    .zip(&p.symbols)
                    .map(|(&v, &s)| two * wq * (v - cb[s as usize]))
                    .collect();
                let off = m.codebook_offset();
                for (&g, &s) in gs.iter().zip(&p.symbols) {
                    grads[k][off + s as usize] = grads[k][off + s as usize] - g;
                }
                let gin = m.backward(p, &g_out, Some(&gs), Some(&prob_grads[k]), &mut grads[k])?;
                for (a, &g) in later.iter_mut().zip(&gin) {
                    *a = *a + g;
                }
            }
        }
        Ok(grads)
    };
    let partial: Vec<Vec<Vec<T>>> = fwd
        .par_chunks(CHUNK)
        .map(backward_chunk)
        .collect::<Result<_>>()?;
    let mut grads: Vec<Vec<T>> = modules.iter().map(|m| vec![T::zero(); m.len()]).collect();
    for p in &partial {
        for (acc, g) in grads.iter_mut().zip(p) {
            for (a, &v) in acc.iter_mut().zip(g) {
                *a = *a + v;
            }
        }
    }
    Ok(StepResult {
        loss,
        grads,
        histograms,
    })
}

/// Loss of the full soft cascade over a batch, without gradients.
pub fn total_loss<T: Real>(
    modules: &[ModuleParams<T>],
    frames: &[&[T]],
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    let refs: Vec<&ModuleParams<T>> = modules.iter().collect();
    let batch: Vec<TrainFrame<'_, T>> = frames
        .iter()
        .map(|&t| TrainFrame {
            target: t,
            prefix: None,
        })
        .collect();
    Ok(cascade_step(&refs, &batch, weights, &MelLoss::new(), false)?.loss)
}

/// A trained codec: modules, normalization scale, entropy-coding tables and
/// the operating point.
#[derive(Debug, Clone, PartialEq)]
pub struct CmrlModel {
    pub modules: Vec<ModuleParams<f32>>,
    /// Divisor that brings the coded signal to unit variance.
    pub scale: f64,
    pub lpc: bool,
    pub mode: BitrateMode,
    pub coding: CodingMode,
    /// One table per module.
    pub tables: Vec<HuffmanTable>,
    pub loss: LossWeights,
}

impl CmrlModel {
    pub fn param_count(&self) -> ParamCount {
        self.modules.iter().map(|m| m.param_count()).fold(
            ParamCount {
                weights: 0,
                biases: 0,
                codebook: 0,
            },
            |a, b| a + b,
        )
    }

    pub fn strides(&self) -> Vec<usize> {
        self.modules.iter().map(|m| m.config().stride).collect()
    }

    pub fn code_lens(&self) -> Vec<usize> {
        self.modules.iter().map(|m| m.code_len()).collect()
    }

    /// Fits one Huffman table per module on `symbols[module][frame]`.
    pub fn fit_tables(&mut self, symbols: &[Vec<Vec<u16>>]) -> Result<()> {
        if symbols.len() != self.modules.len() {
            return Err(CmrlError::ModelMismatch(format!(
                "{} symbol sets for {} modules",
                symbols.len(),
                self.modules.len()
            )));
        }
        self.tables = symbols
            .iter()
            .map(|s| HuffmanTable::build(s, CODEBOOK_SIZE, self.coding))
            .collect::<Result<_>>()?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.modules.is_empty() {
            return Err(CmrlError::ModelMismatch("model has no modules".into()));
        }
        if self.tables.len() != self.modules.len() {
            return Err(CmrlError::ModelMismatch(format!(
                "{} tables for {} modules",
                self.tables.len(),
                self.modules.len()
            )));
        }
        if self
            .tables
            .iter()
            .any(|t| t.mode() != self.coding || t.levels() != CODEBOOK_SIZE)
        {
            return Err(CmrlError::ModelMismatch(
                "table coding mode disagrees with the model".into(),
            ));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(CmrlError::ModelMismatch(format!(
                "invalid scale {}",
                self.scale
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::module::ModuleConfig;

    fn tiny(stride: usize) -> ModuleConfig {
        ModuleConfig {
            channels: 4,
            bottleneck: 2,
            taps: 3,
            stride,
            code_channels: 1,
            blocks: 2,
            slope: 0.2,
        }
    }

    fn signal(seed: usize) -> Vec<f64> {
        (0..FRAME_LEN)
            .map(|n| {
                ((n * (seed + 3)) as f64 * 0.013).sin() + 0.2 * ((n + seed) as f64 * 0.31).cos()
            })
            .collect()
    }

    #[test]
    fn residual_examples() {
        let x = vec![1.0f64, 0.0];
        let recs = vec![vec![0.6, 0.1], vec![0.3, -0.2]];
        assert_eq!(residual_input(&x, &recs, 0), x);
        let r = residual_input(&x, &recs, 2);
        assert!((r[0] - 0.1).abs() < 1e-12 && (r[1] - 0.1).abs() < 1e-12);
        assert_eq!(residual_input(&x, &[x.clone()], 1), vec![0.0, 0.0]);
    }

    #[test]
    fn decode_of_opposite_modules_cancels() {
        let a = ModuleParams::<f64>::init(tiny(2), 1).unwrap();
        let mut b = a.clone();
        // negate the last decoder conv so the two decoders produce y and -y
        let last = *b.layers().last().unwrap();
        for v in &mut b.flat_mut()[last.weight_offset..last.bias_offset + last.shape.out_channels] {
            *v = -*v;
        }
        let syms = vec![vec![3u16; 256], vec![3u16; 256]];
        let y = cascade_decode(&[a, b], &syms).unwrap();
        assert!(y.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn concatenated_symbol_counts() {
        let mods = vec![
            ModuleParams::<f32>::init(tiny(2), 1).unwrap(),
            ModuleParams::<f32>::init(tiny(4), 2).unwrap(),
        ];
        let x: Vec<f32> = signal(1).iter().map(|&v| v as f32).collect();
        let c = cascade_encode(&mods, &x).unwrap();
        assert_eq!(c.symbols.iter().map(Vec::len).sum::<usize>(), 384);
        let single = cascade_encode(&mods[..1], &x).unwrap();
        assert_eq!(single.symbols[0], mods[0].hard_pass(&x).unwrap().0);
    }

    #[test]
    fn degenerate_minimum_is_zero() {
        // with zero input and zero weights every term vanishes except entropy,
        // which is zero once all mass sits on one centroid
        let mut m = ModuleParams::<f64>::zeros(tiny(2)).unwrap();
        m.alpha = 1e9;
        let off = m.codebook_offset();
        m.flat_mut()[off + 15] = 0.0;
        let x = vec![0.0; FRAME_LEN];
        let l = total_loss(&[m], &[&x], &LossWeights::default()).unwrap();
        assert_eq!(l.reconstruction, 0.0);
        assert_eq!(l.quantization, 0.0);
        assert!(l.entropy.abs() < 1e-9);
    }

    /// Independent straightforward evaluation of every loss term.
    #[test]
    fn loss_terms_match_direct_evaluation() {
        let mods = vec![
            ModuleParams::<f64>::init(tiny(2), 5).unwrap(),
            ModuleParams::<f64>::init(tiny(2), 6).unwrap(),
        ];
        let xs: Vec<Vec<f64>> = (0..3).map(signal).collect();
        let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let w = LossWeights {
            perceptual: 0.3,
            quantization: 0.7,
            entropy: 0.2,
        };
        let l = total_loss(&mods, &refs, &w).unwrap();

        let mel = MelLoss::<f64>::new();
        let (mut rec, mut perc, mut quant) = (0.0, 0.0, 0.0);
        let mut hist = [[0.0f64; 32]; 2];
        for x in &xs {
            let mut r = x.clone();
            let mut y = vec![0.0; FRAME_LEN];
            for (k, m) in mods.iter().enumerate() {
                let p = m.soft_pass(&r).unwrap();
                for i in 0..m.code_len() {
                    let c = m.codebook()[p.symbols[i] as usize];
                    quant += (p.quant.values[i] - c).powi(2);
                    for j in 0..32 {
                        hist[k][j] += p.quant.probs[i * 32 + j];
                    }
                }
                for n in 0..FRAME_LEN {
                    r[n] -= p.output[n];
                    y[n] += p.output[n];
                }
            }
            rec += x.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            perc += mel.loss(x, &y);
        }
        rec /= (3 * FRAME_LEN) as f64;
        perc /= 3.0;
        quant /= (3 * 512) as f64;
        let ent: f64 = hist
            .iter()
            .map(|h| {
                let s: f64 = h.iter().sum();
                h.iter()
                    .map(|&c| c / s)
                    .filter(|&p| p > 0.0)
                    .map(|p| -p * p.log2())
                    .sum::<f64>()
            })
            .sum::<f64>()
            / 2.0;
        assert!((l.reconstruction - rec).abs() < 1e-9);
        assert!((l.perceptual - perc).abs() < 1e-9);
        assert!((l.quantization - quant).abs() < 1e-9);
        assert!((l.entropy - ent).abs() < 1e-9);
        assert!((l.total - (rec + 0.3 * perc + 0.7 * quant + 0.2 * ent)).abs() < 1e-9);
    }

    #[test]
    fn uniform_probabilities_give_five_bits() {
        // alpha -> 0 makes every assignment uniform
        let mut m = ModuleParams::<f64>::init(tiny(2), 1).unwrap();
        m.alpha = 1e-12;
        let x = signal(2);
        let l = total_loss(&[m], &[&x], &LossWeights::default()).unwrap();
        assert!((l.entropy - 5.0).abs() < 1e-6);
    }

    #[test]
    fn telescoping_identity() {
        for n in 1..=3 {
            let mods: Vec<_> = (0..n)
                .map(|i| ModuleParams::<f64>::init(tiny(2), i as u64).unwrap())
                .collect();
            let x = signal(n);
            let c = cascade_encode(&mods, &x).unwrap();
            let y = c.output();
            for i in 0..FRAME_LEN {
                assert!((y[i] + c.residual[i] - x[i]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn composite_gradient_matches_finite_differences() {
        let mods = vec![
            ModuleParams::<f64>::init(tiny(2), 8).unwrap(),
            ModuleParams::<f64>::init(tiny(4), 9).unwrap(),
        ];
        let mods: Vec<_> = mods
            .into_iter()
            .map(|mut m| {
                m.alpha = 6.0;
                m
            })
            .collect();
        let xs: Vec<Vec<f64>> = (0..2).map(signal).collect();
        let prefix: Vec<f64> = (0..FRAME_LEN)
            .map(|n| 0.1 * (n as f64 * 0.05).cos())
            .collect();
        let w = LossWeights {
            perceptual: 0.1,
            quantization: 0.5,
            entropy: 0.3,
        };
        let mel = MelLoss::<f64>::new();
        let frames: Vec<TrainFrame<'_, f64>> = xs
            .iter()
            .enumerate()
            .map(|(i, x)| TrainFrame {
                target: x,
                prefix: (i == 1).then_some(prefix.as_slice()),
            })
            .collect();
        let eval = |ms: &[ModuleParams<f64>]| {
            let refs: Vec<_> = ms.iter().collect();
            cascade_step(&refs, &frames, &w, &mel, false)
                .unwrap()
                .loss
                .total
        };
        let refs: Vec<_> = mods.iter().collect();
        let g = cascade_step(&refs, &frames, &w, &mel, true).unwrap().grads;
        let h = 1e-5;
        for k in 0..2 {
            let n = mods[k].len();
            for idx in (0..n)
                .step_by(n / 25)
                .chain([mods[k].codebook_offset() + 16])
            {
                let mut a = mods.clone();
                a[k].flat_mut()[idx] += h;
                let mut b = mods.clone();
                b[k].flat_mut()[idx] -= h;
                let fd = (eval(&a) - eval(&b)) / (2.0 * h);
                let err = (fd - g[k][idx]).abs() / fd.abs().max(g[k][idx].abs()).max(1e-7);
                assert!(
                    err < 1e-3,
                    "module {k} param {idx}: fd {fd} analytic {}",
                    g[k][idx]
                );
            }
        }
    }
}
