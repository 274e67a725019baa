//! `.cmrl` coded streams and `.cmrlmodel` model files.
//!
//! Both formats are little-endian. A stream is a fixed header, a per-frame
//! per-module table of payload bit counts, the payload size, a CRC32 of the
//! payload and the MSB-first packed payload itself. Each payload frame holds
//! the optional 72-bit LPC block followed by every module's Huffman bits.

use crate::bits::{BitReader, BitWriter};
use crate::cascade::CmrlModel;
use crate::config::{BitrateMode, LossWeights};
use crate::entropy::{CodingMode, HuffmanTable};
use crate::error::{CmrlError, Result};
use crate::framing::coded_frame_count;
use crate::lpc::{LpcFrame, LPC_FRAME_BITS};
use crate::module::{ModuleConfig, ModuleParams};
use crate::quantizer::CODEBOOK_SIZE;

pub const STREAM_MAGIC: &[u8; 4] = b"CMRL";
pub const MODEL_MAGIC: &[u8; 4] = b"CMRM";
pub const STREAM_VERSION: u16 = 1;
pub const MODEL_VERSION: u16 = 1;

const FLAG_LPC: u8 = 1;
const FLAG_PAIR: u8 = 2;

/// Stream-level metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamHeader {
    pub sample_rate: u32,
    /// Input length; the decoder trims to it.
    pub samples: u64,
    pub mode: BitrateMode,
    pub lpc: bool,
    pub coding: CodingMode,
    pub scale: f32,
    /// Symbols per frame of each module.
    pub code_lens: Vec<usize>,
}

/// One frame's side info and symbols.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub lpc: Option<LpcFrame>,
    /// Symbols per module.
    pub symbols: Vec<Vec<u16>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodedStream {
    pub header: StreamHeader,
    pub frames: Vec<FrameRecord>,
}

/// Serialized stream plus its size accounting.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedBytes {
    pub bytes: Vec<u8>,
    pub payload_bits: u64,
    /// Everything that is not payload.
    pub header_bytes: usize,
}

struct ByteWriter(Vec<u8>);

impl ByteWriter {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(CmrlError::TruncatedStream(format!(
                "needed {n} bytes at offset {}, {} left",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
    fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }
}

fn check_magic(r: &mut ByteReader<'_>, magic: &[u8; 4], version: u16) -> Result<()> {
    if r.take(4).map_err(|_| CmrlError::BadMagic)? != magic {
        return Err(CmrlError::BadMagic);
    }
    let v = r.u16()?;
    if v != version {
        return Err(CmrlError::VersionMismatch(v));
    }
    Ok(())
}

fn coding_from_flags(flags: u8) -> CodingMode {
    if flags & FLAG_PAIR != 0 {
        CodingMode::Pair
    } else {
        CodingMode::Single
    }
}

/// Serializes a stream, Huffman-coding each module with its table.
pub fn write_stream(stream: &CodedStream, tables: &[HuffmanTable]) -> Result<EncodedBytes> {
    let h = &stream.header;
    let modules = h.code_lens.len();
    if tables.len() != modules || modules == 0 || modules > u8::MAX as usize {
        return Err(CmrlError::ModelMismatch(format!(
            "{} tables for {modules} modules",
            tables.len()
        )));
    }
    if stream.frames.len() != coded_frame_count(h.samples as usize) {
        return Err(CmrlError::LengthMismatch {
            expected: coded_frame_count(h.samples as usize),
            actual: stream.frames.len(),
        });
    }
    let mut payload = BitWriter::new();
    let mut lengths = Vec::with_capacity(stream.frames.len() * modules);
    for f in &stream.frames {
        match (&f.lpc, h.lpc) {
            (Some(l), true) => l.write(&mut payload),
            (None, false) => {}
            _ => {
                return Err(CmrlError::ModelMismatch(
                    "LPC block presence disagrees with the header".into(),
                ))
            }
        }
        if f.symbols.len() != modules {
            return Err(CmrlError::ModelMismatch(format!(
                "frame has {} modules, header {modules}",
                f.symbols.len()
            )));
        }
        for ((s, t), &n) in f.symbols.iter().zip(tables).zip(&h.code_lens) {
            if s.len() != n {
                return Err(CmrlError::LengthMismatch {
                    expected: n,
                    actual: s.len(),
                });
            }
            let before = payload.bit_len();
            t.encode(s, &mut payload)?;
            lengths.push((payload.bit_len() - before) as u32);
        }
    }
    let payload_bits = payload.bit_len() as u64;
    let payload = payload.into_bytes();

    let mut w = ByteWriter(Vec::new());
    w.0.extend_from_slice(STREAM_MAGIC);
    w.u16(STREAM_VERSION);
    let mut flags = 0;
    if h.lpc {
        flags |= FLAG_LPC;
    }
    if h.coding == CodingMode::Pair {
        flags |= FLAG_PAIR;
    }
    w.u8(flags);
    w.u8(h.mode.code());
    w.u32(h.sample_rate);
    w.u64(h.samples);
    w.u32(stream.frames.len() as u32);
    w.u8(modules as u8);
    w.f32(h.scale);
    for &n in &h.code_lens {
        w.u16(
            u16::try_from(n)
                .map_err(|_| CmrlError::Config(format!("code length {n} too large")))?,
        );
    }
    for l in lengths {
        w.u32(l);
    }
    w.u64(payload_bits);
    w.u32(crc32fast::hash(&payload));
    let header_bytes = w.0.len();
    w.0.extend_from_slice(&payload);
    Ok(EncodedBytes {
        bytes: w.0,
        payload_bits,
        header_bytes,
    })
}

/// Parses and Huffman-decodes a stream.
pub fn read_stream(bytes: &[u8], tables: &[HuffmanTable]) -> Result<CodedStream> {
    let mut r = ByteReader::new(bytes);
    check_magic(&mut r, STREAM_MAGIC, STREAM_VERSION)?;
    let flags = r.u8()?;
    let mode = BitrateMode::from_code(r.u8()?)?;
    let sample_rate = r.u32()?;
    let samples = r.u64()?;
    let frames = r.u32()? as usize;
    let modules = r.u8()? as usize;
    let scale = r.f32()?;
    if frames != coded_frame_count(samples as usize) {
        return Err(CmrlError::Decode(format!(
            "{frames} frames declared for {samples} samples"
        )));
    }
    let mut code_lens = Vec::with_capacity(modules);
    for _ in 0..modules {
        code_lens.push(r.u16()? as usize);
    }
    let mut lengths = Vec::with_capacity(frames * modules);
    for _ in 0..frames * modules {
        lengths.push(r.u32()? as u64);
    }
    let payload_bits = r.u64()?;
    let stored = r.u32()?;
    let payload = &bytes[r.pos..];
    if (payload.len() as u64) < payload_bits.div_ceil(8) {
        return Err(CmrlError::TruncatedStream(format!(
            "{payload_bits} payload bits declared, {} bytes present",
            payload.len()
        )));
    }
    let computed = crc32fast::hash(payload);
    if computed != stored {
        return Err(CmrlError::ChecksumMismatch { stored, computed });
    }
    let lpc = flags & FLAG_LPC != 0;
    let coding = coding_from_flags(flags);
    if tables.len() != modules {
        return Err(CmrlError::ModelMismatch(format!(
            "stream has {modules} modules, model {}",
            tables.len()
        )));
    }
    if tables.iter().any(|t| t.mode() != coding) {
        return Err(CmrlError::ModelMismatch(
            "stream and model use different symbol grouping".into(),
        ));
    }
    let lpc_bits = if lpc {
        LPC_FRAME_BITS as u64 * frames as u64
    } else {
        0
    };
    if lengths.iter().sum::<u64>() + lpc_bits != payload_bits {
        return Err(CmrlError::Decode(
            "per-frame bit counts do not add up to the payload size".into(),
        ));
    }
    let mut br = BitReader::with_len(payload, payload_bits as usize)?;
    let mut records = Vec::with_capacity(frames);
    for k in 0..frames {
        let lpc_frame = if lpc {
            Some(LpcFrame::read(&mut br)?)
        } else {
            None
        };
        let mut symbols = Vec::with_capacity(modules);
        for (i, (t, &n)) in tables.iter().zip(&code_lens).enumerate() {
            let start = br.position();
            symbols.push(t.decode(&mut br, n)?);
            let used = (br.position() - start) as u64;
            if used != lengths[k * modules + i] {
                return Err(CmrlError::Decode(format!(
                    "frame {k} module {i}: decoded {used} bits, header says {}",
                    lengths[k * modules + i]
                )));
            }
        }
        records.push(FrameRecord {
            lpc: lpc_frame,
            symbols,
        });
    }
    Ok(CodedStream {
        header: StreamHeader {
            sample_rate,
            samples,
            mode,
            lpc,
            coding,
            scale,
            code_lens,
        },
        frames: records,
    })
}

fn coding_code(c: CodingMode) -> u8 {
    match c {
        CodingMode::Single => 0,
        CodingMode::Pair => 1,
    }
}

/// Serializes a model: config, every parameter as f32, codebooks, alphas and
/// Huffman code lengths, followed by a CRC32 of everything before it.
pub fn write_model(model: &CmrlModel) -> Result<Vec<u8>> {
    model.validate()?;
    let mut w = ByteWriter(Vec::new());
    w.0.extend_from_slice(MODEL_MAGIC);
    w.u16(MODEL_VERSION);
    w.u8(model.mode.code());
    w.u8(model.lpc as u8);
    w.u8(coding_code(model.coding));
    w.f64(model.scale);
    w.f64(model.loss.perceptual);
    w.f64(model.loss.quantization);
    w.f64(model.loss.entropy);
    w.u8(model.modules.len() as u8);
    for (m, t) in model.modules.iter().zip(&model.tables) {
        let c = m.config();
        for v in [
            c.channels,
            c.bottleneck,
            c.taps,
            c.stride,
            c.code_channels,
            c.blocks,
        ] {
            w.u32(v as u32);
        }
        w.f64(c.slope);
        w.f64(m.alpha);
        w.u32(m.layers().len() as u32);
        for l in m.layers() {
            let s = l.shape;
            for v in [s.taps, s.in_channels, s.out_channels, s.stride, s.dilation] {
                w.u32(v as u32);
            }
        }
        w.u64(m.len() as u64);
        for &v in m.flat() {
            w.f32(v);
        }
        w.u32(t.lengths().len() as u32);
        w.0.extend_from_slice(t.lengths());
    }
    let crc = crc32fast::hash(&w.0);
    w.u32(crc);
    Ok(w.0)
}

pub fn read_model(bytes: &[u8]) -> Result<CmrlModel> {
    if bytes.len() < 4 {
        return Err(CmrlError::BadMagic);
    }
    let (body, tail) = bytes.split_at(bytes.len().saturating_sub(4).max(4));
    let mut r = ByteReader::new(body);
    check_magic(&mut r, MODEL_MAGIC, MODEL_VERSION)?;
    let stored = u32::from_le_bytes(
        tail.try_into()
            .map_err(|_| CmrlError::TruncatedStream("missing checksum".into()))?,
    );
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(CmrlError::ChecksumMismatch { stored, computed });
    }
    let mode = BitrateMode::from_code(r.u8()?)?;
    let lpc = r.u8()? != 0;
    let coding = match r.u8()? {
        0 => CodingMode::Single,
        1 => CodingMode::Pair,
        c => return Err(CmrlError::Decode(format!("unknown coding mode {c}"))),
    };
    let scale = r.f64()?;
    let loss = LossWeights {
        perceptual: r.f64()?,
        quantization: r.f64()?,
        entropy: r.f64()?,
    };
    let count = r.u8()? as usize;
    let mut modules = Vec::with_capacity(count);
    let mut tables = Vec::with_capacity(count);
    for _ in 0..count {
        let config = ModuleConfig {
            channels: r.usize()?,
            bottleneck: r.usize()?,
            taps: r.usize()?,
            stride: r.usize()?,
            code_channels: r.usize()?,
            blocks: r.usize()?,
            slope: r.f64()?,
        };
        let alpha = r.f64()?;
        let expected = ModuleParams::<f32>::zeros(config)?;
        let layers = r.usize()?;
        if layers != expected.layers().len() {
            return Err(CmrlError::ModelMismatch(format!(
                "{layers} layers stored, topology has {}",
                expected.layers().len()
            )));
        }
        for l in expected.layers() {
            let s = l.shape;
            let stored = [r.usize()?, r.usize()?, r.usize()?, r.usize()?, r.usize()?];
            if stored != [s.taps, s.in_channels, s.out_channels, s.stride, s.dilation] {
                return Err(CmrlError::ModelMismatch(format!(
                    "layer shape {stored:?} differs from {s:?}"
                )));
            }
        }
        let n = r.u64()? as usize;
        if n != expected.len() {
            return Err(CmrlError::ModelMismatch(format!(
                "{n} parameters stored, topology has {}",
                expected.len()
            )));
        }
        let mut params = Vec::with_capacity(n);
        for _ in 0..n {
            params.push(r.f32()?);
        }
        modules.push(ModuleParams::from_flat(config, params, alpha)?);
        let len = r.usize()?;
        let lengths = r.take(len)?.to_vec();
        tables.push(HuffmanTable::from_lengths(lengths, CODEBOOK_SIZE, coding)?);
    }
    if r.pos != body.len() {
        return Err(CmrlError::Decode(format!(
            "{} trailing bytes in model file",
            body.len() - r.pos
        )));
    }
    let model = CmrlModel {
        modules,
        scale,
        lpc,
        mode,
        coding,
        tables,
        loss,
    };
    model.validate()?;
    Ok(model)
}
