//! PCM buffers, overlapping frames with half-Hann crossfades, variance
//! normalization and 16-bit WAV I/O.

use std::path::Path;

use crate::error::{CmrlError, Result};

/// Samples per codec frame.
pub const FRAME_LEN: usize = 512;
/// Samples shared by adjacent frames.
pub const OVERLAP: usize = 32;
/// Frame advance.
pub const HOP: usize = FRAME_LEN - OVERLAP;
/// The only rate the codec operates at.
pub const CODEC_SAMPLE_RATE: u32 = 16_000;

const SILENCE_VARIANCE: f64 = 1e-12;

/// Mono linear PCM.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(CmrlError::SampleRate(0));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(CmrlError::NonFinite(i));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// One `FRAME_LEN`-sample analysis frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub samples: Vec<f64>,
    pub index: usize,
    windowed: bool,
}

impl Frame {
    pub fn new(samples: Vec<f64>, index: usize) -> Result<Self> {
        if samples.len() != FRAME_LEN {
            return Err(CmrlError::LengthMismatch {
                expected: FRAME_LEN,
                actual: samples.len(),
            });
        }
        Ok(Self {
            samples,
            index,
            windowed: false,
        })
    }

    /// Wraps samples that already carry the crossfade tapers, e.g. decoder output.
    pub fn windowed(samples: Vec<f64>, index: usize) -> Result<Self> {
        let mut f = Self::new(samples, index)?;
        f.windowed = true;
        Ok(f)
    }

    pub fn is_windowed(&self) -> bool {
        self.windowed
    }

    /// Applies the rising taper to the head and the falling taper to the tail.
    pub fn apply_window(&mut self) -> Result<()> {
        if self.windowed {
            return Err(CmrlError::WindowState(self.index));
        }
        let rise = rising_half();
        for n in 0..OVERLAP {
            self.samples[n] *= rise[n];
            self.samples[FRAME_LEN - OVERLAP + n] *= rise[OVERLAP - 1 - n];
        }
        self.windowed = true;
        Ok(())
    }
}

/// Rising half of a 64-point Hann window in the half-sample-shifted form
/// `0.5 * (1 - cos(pi * (n + 0.5) / 32))`; the falling half is its reverse.
pub fn rising_half() -> [f64; OVERLAP] {
    let mut h = [0.0; OVERLAP];
    for (n, v) in h.iter_mut().enumerate() {
        *v = 0.5 * (1.0 - (std::f64::consts::PI * (n as f64 + 0.5) / OVERLAP as f64).cos());
    }
    h
}

pub fn falling_half() -> [f64; OVERLAP] {
    let mut h = rising_half();
    h.reverse();
    h
}

/// Number of frames `frame_signal` produces for `len` samples (`len >= FRAME_LEN`).
pub fn frame_count(len: usize) -> usize {
    1 + (len.saturating_sub(FRAME_LEN)).div_ceil(HOP)
}

/// Length of the zero-padded signal the codec frames for `len` input
/// samples: `OVERLAP` zeros in front, at least `OVERLAP` behind, rounded up
/// to whole frames. Every input sample then lies outside the tapers of the
/// first and last frame.
pub fn padded_len(len: usize) -> usize {
    if len == 0 {
        return 0;
    }
    HOP * (coded_frame_count(len) - 1) + FRAME_LEN
}

/// Frames the codec emits for `len` input samples.
pub fn coded_frame_count(len: usize) -> usize {
    if len == 0 {
        0
    } else {
        frame_count(len + 2 * OVERLAP)
    }
}

/// Scales the buffer to unit variance. Returns the normalized buffer and the
/// divisor that was applied.
pub fn normalize(buffer: &AudioBuffer) -> Result<(AudioBuffer, f64)> {
    let scale = std_dev(&buffer.samples)?;
    let samples = buffer.samples.iter().map(|s| s / scale).collect();
    Ok((
        AudioBuffer {
            samples,
            sample_rate: buffer.sample_rate,
        },
        scale,
    ))
}

pub fn denormalize(buffer: &AudioBuffer, scale: f64) -> AudioBuffer {
    AudioBuffer {
        samples: buffer.samples.iter().map(|s| s * scale).collect(),
        sample_rate: buffer.sample_rate,
    }
}

/// Population standard deviation about the mean.
pub fn std_dev(samples: &[f64]) -> Result<f64> {
    if samples.is_empty() {
        return Err(CmrlError::SilentInput(0.0));
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
    if !(var >= SILENCE_VARIANCE) {
        return Err(CmrlError::SilentInput(var));
    }
    Ok(var.sqrt())
}

/// Pooled standard deviation over a whole corpus; the model stores this
/// single scale so the decoder never needs per-utterance side info.
pub fn corpus_scale<'a, I>(signals: I) -> Result<f64>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let (mut n, mut sum, mut sq) = (0usize, 0.0f64, 0.0f64);
    for s in signals {
        n += s.len();
        sum += s.iter().sum::<f64>();
        sq += s.iter().map(|v| v * v).sum::<f64>();
    }
    if n == 0 {
        return Err(CmrlError::SilentInput(0.0));
    }
    let mean = sum / n as f64;
    let var = sq / n as f64 - mean * mean;
    if !(var >= SILENCE_VARIANCE) {
        return Err(CmrlError::SilentInput(var));
    }
    Ok(var.sqrt())
}

/// Cuts the buffer into windowed frames advancing by `HOP`; the trailing
/// partial frame is zero-padded.
pub fn frame_signal(buffer: &AudioBuffer) -> Result<Vec<Frame>> {
    let x = &buffer.samples;
    if x.len() < FRAME_LEN {
        return Err(CmrlError::TooShort {
            len: x.len(),
            frame: FRAME_LEN,
        });
    }
    let count = frame_count(x.len());
    let mut frames = Vec::with_capacity(count);
    for k in 0..count {
        let start = k * HOP;
        let end = (start + FRAME_LEN).min(x.len());
        let mut samples = vec![0.0; FRAME_LEN];
        samples[..end - start].copy_from_slice(&x[start..end]);
        let mut frame = Frame::new(samples, k)?;
        frame.apply_window()?;
        frames.push(frame);
    }
    Ok(frames)
}

/// Plain overlap-add of windowed frames. Output length is
/// `HOP * (n - 1) + FRAME_LEN`.
pub fn overlap_add(frames: &[Frame], sample_rate: u32) -> Result<AudioBuffer> {
    if frames.is_empty() {
        return AudioBuffer::new(Vec::new(), sample_rate);
    }
    let mut out = vec![0.0; HOP * (frames.len() - 1) + FRAME_LEN];
    for (k, f) in frames.iter().enumerate() {
        if f.samples.len() != FRAME_LEN {
            return Err(CmrlError::LengthMismatch {
                expected: FRAME_LEN,
                actual: f.samples.len(),
            });
        }
        if !f.windowed {
            return Err(CmrlError::WindowState(f.index));
        }
        for (o, s) in out[k * HOP..k * HOP + FRAME_LEN].iter_mut().zip(&f.samples) {
            *o += s;
        }
    }
    AudioBuffer::new(out, sample_rate)
}

/// Reads a mono 16-bit PCM RIFF file. Samples are scaled to [-1, 1).
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioBuffer> {
    let reader = hound::WavReader::open(path.as_ref()).map_err(wav_err)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(CmrlError::UnsupportedFormat(format!(
            "{} channels",
            spec.channels
        )));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(CmrlError::UnsupportedFormat(format!(
            "{:?} with {} bits per sample",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(wav_err)?;
    AudioBuffer::new(samples, spec.sample_rate)
}

/// Writes mono 16-bit PCM, rounding and clipping to the i16 range.
pub fn write_wav(path: impl AsRef<Path>, buffer: &AudioBuffer) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: buffer.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path.as_ref(), spec).map_err(wav_err)?;
    for &s in &buffer.samples {
        writer.write_sample(to_i16(s)).map_err(wav_err)?;
    }
    writer.finalize().map_err(wav_err)
}

pub fn to_i16(s: f64) -> i16 {
    (s * 32768.0)
        .round()
        .clamp(i16::MIN as f64, i16::MAX as f64) as i16
}

fn wav_err(e: hound::Error) -> CmrlError {
    match e {
        hound::Error::IoError(io) => CmrlError::Io(io),
        other => CmrlError::UnsupportedFormat(other.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn buf(samples: Vec<f64>) -> AudioBuffer {
        AudioBuffer::new(samples, CODEC_SAMPLE_RATE).unwrap()
    }

    #[test]
    fn normalize_square_wave() {
        let (out, scale) = normalize(&buf(vec![2.0, -2.0, 2.0, -2.0])).unwrap();
        assert_eq!(scale, 2.0);
        assert_eq!(out.samples, vec![1.0, -1.0, 1.0, -1.0]);
    }

    #[test]
    fn normalize_unit_variance_is_identity() {
        let x = vec![1.0, -1.0, 1.0, -1.0, 1.0, -1.0];
        let (out, scale) = normalize(&buf(x.clone())).unwrap();
        assert_eq!(scale, 1.0);
        assert_eq!(out.samples, x);
    }

    #[test]
    fn normalize_rejects_silence() {
        assert!(matches!(
            normalize(&buf(vec![0.0; 100])),
            Err(CmrlError::SilentInput(_))
        ));
        assert!(matches!(
            normalize(&buf(vec![0.3; 100])),
            Err(CmrlError::SilentInput(_))
        ));
    }

    #[test]
    fn window_halves_are_complementary() {
        let (r, f) = (rising_half(), falling_half());
        for n in 0..OVERLAP {
            assert!((r[n] + f[n] - 1.0).abs() <= 1e-12);
        }
        let expected = 0.5 * (1.0 - (std::f64::consts::PI * 0.5 / 32.0).cos());
        assert_eq!(r[0], expected);
    }

    #[test]
    fn frame_taper_and_interior() {
        let frames = frame_signal(&buf(vec![1.0; 2000])).unwrap();
        let h0 = 0.5 * (1.0 - (std::f64::consts::PI * 0.5 / 32.0).cos());
        assert!((frames[0].samples[0] - h0).abs() < 1e-15);
        assert_eq!(frames[0].samples[100], 1.0);
        assert!(frames.iter().all(|f| f.is_windowed()));
    }

    #[test]
    fn frame_counts() {
        assert_eq!(frame_signal(&buf(vec![0.5; 992])).unwrap().len(), 2);
        assert_eq!(frame_signal(&buf(vec![0.5; 512])).unwrap().len(), 1);
        assert_eq!(frame_signal(&buf(vec![0.5; 993])).unwrap().len(), 3);
        for len in [512usize, 600, 991, 992, 5000, 16000] {
            let expected = 1 + ((len - FRAME_LEN) as f64 / HOP as f64).ceil() as usize;
            assert_eq!(frame_count(len), expected);
        }
        assert!(matches!(
            frame_signal(&buf(vec![0.5; 511])),
            Err(CmrlError::TooShort { len: 511, .. })
        ));
    }

    #[test]
    fn ola_constant_overlap_is_one() {
        let frames = frame_signal(&buf(vec![1.0; 992])).unwrap();
        let out = overlap_add(&frames, CODEC_SAMPLE_RATE).unwrap();
        for v in &out.samples[OVERLAP..992 - OVERLAP] {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ola_round_trip_sine() {
        let x: Vec<f64> = (0..16000)
            .map(|n| (2.0 * std::f64::consts::PI * 440.0 * n as f64 / 16000.0).sin())
            .collect();
        let frames = frame_signal(&buf(x.clone())).unwrap();
        let out = overlap_add(&frames, CODEC_SAMPLE_RATE).unwrap();
        let covered = (frames.len() - 1) * HOP + FRAME_LEN - OVERLAP;
        let err = x[OVERLAP..covered.min(x.len())]
            .iter()
            .zip(&out.samples[OVERLAP..])
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-6, "max error {err}");
    }

    #[test]
    fn single_frame_verbatim_inside() {
        let x: Vec<f64> = (0..512).map(|n| n as f64 * 0.01).collect();
        let frames = frame_signal(&buf(x.clone())).unwrap();
        let out = overlap_add(&frames, CODEC_SAMPLE_RATE).unwrap();
        assert_eq!(
            &out.samples[OVERLAP..FRAME_LEN - OVERLAP],
            &x[OVERLAP..FRAME_LEN - OVERLAP]
        );
    }

    #[test]
    fn ola_rejects_unwindowed_and_bad_length() {
        let f = Frame::new(vec![0.0; FRAME_LEN], 0).unwrap();
        assert!(matches!(
            overlap_add(&[f], 16000),
            Err(CmrlError::WindowState(0))
        ));
        assert!(Frame::new(vec![0.0; 10], 0).is_err());
        let mut g = Frame::new(vec![1.0; FRAME_LEN], 3).unwrap();
        g.apply_window().unwrap();
        assert!(matches!(g.apply_window(), Err(CmrlError::WindowState(3))));
    }

    #[test]
    fn wav_ramp_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ramp.wav");
        let x: Vec<f64> = (0..1000)
            .map(|k| (k as f64 - 500.0) * 37.0 / 32768.0)
            .collect();
        write_wav(&path, &buf(x.clone())).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.sample_rate, CODEC_SAMPLE_RATE);
        let a: Vec<i16> = x.iter().map(|&s| to_i16(s)).collect();
        let b: Vec<i16> = back.samples.iter().map(|&s| to_i16(s)).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn wav_rejects_other_formats_and_keeps_rate() {
        let dir = tempfile::tempdir().unwrap();
        let p8 = dir.path().join("u8.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16000,
            bits_per_sample: 8,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&p8, spec).unwrap();
        w.write_sample(3i8).unwrap();
        w.finalize().unwrap();
        assert!(matches!(
            read_wav(&p8),
            Err(CmrlError::UnsupportedFormat(_))
        ));

        let pf = dir.path().join("f32.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16000,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut w = hound::WavWriter::create(&pf, spec).unwrap();
        w.write_sample(0.25f32).unwrap();
        w.finalize().unwrap();
        assert!(matches!(
            read_wav(&pf),
            Err(CmrlError::UnsupportedFormat(_))
        ));

        let ps = dir.path().join("stereo.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 16000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&ps, spec).unwrap();
        w.write_sample(1i16).unwrap();
        w.write_sample(1i16).unwrap();
        w.finalize().unwrap();
        assert!(matches!(
            read_wav(&ps),
            Err(CmrlError::UnsupportedFormat(_))
        ));

        let p44 = dir.path().join("44k.wav");
        write_wav(&p44, &AudioBuffer::new(vec![0.1; 10], 44_100).unwrap()).unwrap();
        assert_eq!(read_wav(&p44).unwrap().sample_rate, 44_100);
    }

    #[test]
    fn padded_geometry() {
        assert_eq!(coded_frame_count(0), 0);
        assert_eq!(padded_len(1), FRAME_LEN);
        for len in [1usize, 447, 448, 449, 992, 16_000] {
            let p = padded_len(len);
            assert!(p >= len + 2 * OVERLAP);
            assert!(p - (len + 2 * OVERLAP) < HOP);
            assert_eq!(frame_count(p), coded_frame_count(len));
        }
    }
}
