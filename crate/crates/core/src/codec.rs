//! Whole-utterance encoding and decoding.
//!
//! The input is padded with `OVERLAP` zeros in front and at least as many
//! behind so every real sample sits outside the frame tapers, optionally
//! whitened by LPC, divided by the model's corpus scale, framed, and pushed
//! through the hard cascade. Decoding mirrors each step and trims back to the
//! original length.

use rayon::prelude::*;

use crate::bitstream::{CodedStream, FrameRecord, StreamHeader};
use crate::cascade::{cascade_decode, cascade_encode, CmrlModel};
use crate::entropy::{measure_rate, RateReport};
use crate::error::{CmrlError, Result};
use crate::framing::{
    coded_frame_count, corpus_scale, frame_signal, overlap_add, padded_len, AudioBuffer, Frame,
    CODEC_SAMPLE_RATE, OVERLAP,
};
use crate::lpc::{analyze_signal, synthesize_signal, LpcFrame};
use crate::module::ModuleParams;
use crate::real::Real;

/// Largest magnitude `snr_db` reports.
pub const SNR_CAP_DB: f64 = 120.0;

/// Zero-pads `x` to the codec's framing grid.
pub fn pad_signal(x: &[f64]) -> Vec<f64> {
    let mut p = vec![0.0; padded_len(x.len())];
    if !x.is_empty() {
        p[OVERLAP..OVERLAP + x.len()].copy_from_slice(x);
    }
    p
}

/// The signal the cascade actually codes: the padded input, or its LPC
/// residual together with the quantized envelopes.
pub fn coded_domain(x: &[f64], lpc: bool) -> Result<(Vec<f64>, Option<Vec<LpcFrame>>)> {
    let padded = pad_signal(x);
    if !lpc {
        return Ok((padded, None));
    }
    let (frames, residual) = analyze_signal(&padded, coded_frame_count(x.len()))?;
    Ok((residual, Some(frames)))
}

/// Pooled scale of the coded-domain signals of a corpus. Padding is excluded.
pub fn coded_scale(signals: &[&[f64]], lpc: bool) -> Result<f64> {
    let domains = signals
        .iter()
        .map(|x| coded_domain(x, lpc).map(|(d, _)| d))
        .collect::<Result<Vec<_>>>()?;
    corpus_scale(
        domains
            .iter()
            .zip(signals)
            .map(|(d, x)| &d[OVERLAP..OVERLAP + x.len()]),
    )
}

/// Normalized, windowed training frames of one utterance.
pub fn training_frames(x: &[f64], lpc: bool, scale: f64) -> Result<Vec<Vec<f32>>> {
    if x.is_empty() {
        return Ok(Vec::new());
    }
    let (d, _) = coded_domain(x, lpc)?;
    let normalized: Vec<f64> = d.iter().map(|v| v / scale).collect();
    Ok(
        frame_signal(&AudioBuffer::new(normalized, CODEC_SAMPLE_RATE)?)?
            .into_iter()
            .map(|f| f.samples.iter().map(|&v| v as f32).collect())
            .collect(),
    )
}

fn check_rate(buffer: &AudioBuffer) -> Result<()> {
    if buffer.sample_rate != CODEC_SAMPLE_RATE {
        return Err(CmrlError::SampleRate(buffer.sample_rate));
    }
    Ok(())
}

/// Encodes an utterance into symbols and side info.
pub fn encode_audio(model: &CmrlModel, audio: &AudioBuffer) -> Result<CodedStream> {
    model.validate()?;
    check_rate(audio)?;
    let header = StreamHeader {
        sample_rate: audio.sample_rate,
        samples: audio.len() as u64,
        mode: model.mode,
        lpc: model.lpc,
        coding: model.coding,
        scale: model.scale as f32,
        code_lens: model.code_lens(),
    };
    if audio.is_empty() {
        return Ok(CodedStream {
            header,
            frames: Vec::new(),
        });
    }
    let (domain, lpc) = coded_domain(&audio.samples, model.lpc)?;
    let normalized: Vec<f64> = domain.iter().map(|v| v / model.scale).collect();
    let frames = frame_signal(&AudioBuffer::new(normalized, audio.sample_rate)?)?;
    let symbols = frames
        .par_iter()
        .map(|f| {
            let x: Vec<f32> = f.samples.iter().map(|&v| v as f32).collect();
            cascade_encode(&model.modules, &x).map(|c| c.symbols)
        })
        .collect::<Result<Vec<_>>>()?;
    let records = symbols
        .into_iter()
        .enumerate()
        .map(|(k, symbols)| FrameRecord {
            lpc: lpc.as_ref().map(|l| l[k]),
            symbols,
        })
        .collect();
    Ok(CodedStream {
        header,
        frames: records,
    })
}

/// Checks that a stream was produced by a model of this shape.
pub fn check_compatible(model: &CmrlModel, header: &StreamHeader) -> Result<()> {
    let mismatch = |what: &str| {
        Err(CmrlError::ModelMismatch(format!(
            "stream and model disagree on {what}"
        )))
    };
    if header.lpc != model.lpc {
        return mismatch("LPC input");
    }
    if header.mode != model.mode {
        return mismatch("bitrate mode");
    }
    if header.coding != model.coding {
        return mismatch("symbol grouping");
    }
    if header.code_lens != model.code_lens() {
        return mismatch("module code lengths");
    }
    if header.scale != model.scale as f32 {
        return mismatch("normalization scale");
    }
    Ok(())
}

/// Reconstructs an utterance of the original length.
pub fn decode_audio(model: &CmrlModel, stream: &CodedStream) -> Result<AudioBuffer> {
    model.validate()?;
    let h = &stream.header;
    check_compatible(model, h)?;
    let samples = h.samples as usize;
    if stream.frames.len() != coded_frame_count(samples) {
        return Err(CmrlError::LengthMismatch {
            expected: coded_frame_count(samples),
            actual: stream.frames.len(),
        });
    }
    if samples == 0 {
        return AudioBuffer::new(Vec::new(), h.sample_rate);
    }
    let frames = stream
        .frames
        .par_iter()
        .enumerate()
        .map(|(k, r)| {
            let y: Vec<f32> = cascade_decode(&model.modules, &r.symbols)?;
            Frame::windowed(y.iter().map(|&v| v as f64 * model.scale).collect(), k)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut y = overlap_add(&frames, h.sample_rate)?.samples;
    debug_assert_eq!(y.len(), padded_len(samples));
    if model.lpc {
        let lpc = stream
            .frames
            .iter()
            .map(|r| {
                r.lpc
                    .ok_or_else(|| CmrlError::Decode("LPC block missing".into()))
            })
            .collect::<Result<Vec<_>>>()?;
        y = synthesize_signal(&y, &lpc)?;
    }
    AudioBuffer::new(y[OVERLAP..OVERLAP + samples].to_vec(), h.sample_rate)
}

/// Hard-path reconstruction of an utterance without entropy coding; equal to
/// decoding what `encode_audio` would produce.
pub fn reconstruct<T: Real>(
    modules: &[ModuleParams<T>],
    scale: f64,
    lpc: bool,
    x: &[f64],
) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Ok(Vec::new());
    }
    let (domain, envelopes) = coded_domain(x, lpc)?;
    let normalized: Vec<f64> = domain.iter().map(|v| v / scale).collect();
    let frames = frame_signal(&AudioBuffer::new(normalized, CODEC_SAMPLE_RATE)?)?;
    let decoded = frames
        .par_iter()
        .map(|f| {
            let input: Vec<T> = f.samples.iter().map(|&v| T::of(v)).collect();
            let y = cascade_encode(modules, &input)?.output();
            Frame::windowed(
                y.iter().map(|&v| v.to_f64_lossy() * scale).collect(),
                f.index,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let mut y = overlap_add(&decoded, CODEC_SAMPLE_RATE)?.samples;
    if let Some(env) = envelopes {
        y = synthesize_signal(&y, &env)?;
    }
    Ok(y[OVERLAP..OVERLAP + x.len()].to_vec())
}

/// Predicted payload size and bitrate of a stream under the model's tables.
pub fn stream_rate(model: &CmrlModel, stream: &CodedStream) -> Result<RateReport> {
    let modules = model.modules.len();
    let mut per_module = vec![Vec::with_capacity(stream.frames.len()); modules];
    for r in &stream.frames {
        if r.symbols.len() != modules {
            return Err(CmrlError::ModelMismatch(format!(
                "frame has {} modules, model {modules}",
                r.symbols.len()
            )));
        }
        for (dst, s) in per_module.iter_mut().zip(&r.symbols) {
            dst.push(s.clone());
        }
    }
    measure_rate(&per_module, &model.tables, &model.strides(), model.lpc)
}

/// `10 log10(sum x^2 / sum (x - y)^2)`, clamped to +-`SNR_CAP_DB`.
pub fn snr_db(reference: &[f64], decoded: &[f64]) -> Result<f64> {
    if reference.len() != decoded.len() {
        return Err(CmrlError::LengthMismatch {
            expected: reference.len(),
            actual: decoded.len(),
        });
    }
    let signal: f64 = reference.iter().map(|v| v * v).sum();
    let noise: f64 = reference
        .iter()
        .zip(decoded)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    if !(signal.is_finite() && noise.is_finite()) {
        return Err(CmrlError::NonFinite(0));
    }
    if noise == 0.0 {
        return Ok(SNR_CAP_DB);
    }
    if signal == 0.0 {
        return Ok(-SNR_CAP_DB);
    }
    Ok((10.0 * (signal / noise).log10()).clamp(-SNR_CAP_DB, SNR_CAP_DB))
}

/// Mean squared error between equal-length signals.
pub fn mse(reference: &[f64], decoded: &[f64]) -> Result<f64> {
    if reference.len() != decoded.len() {
        return Err(CmrlError::LengthMismatch {
            expected: reference.len(),
            actual: decoded.len(),
        });
    }
    if reference.is_empty() {
        return Ok(0.0);
    }
    Ok(reference
        .iter()
        .zip(decoded)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / reference.len() as f64)
}
