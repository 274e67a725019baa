//! Huffman coding of quantizer symbols, entropy estimates, bitrate
//! accounting and the entropy-target rate controller.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::bits::{BitReader, BitWriter};
use crate::error::{CmrlError, Result};
use crate::framing::{CODEC_SAMPLE_RATE, FRAME_LEN, OVERLAP};
use crate::lpc::side_info_bps;

/// Longest code the coder accepts.
pub const MAX_CODE_LEN: u8 = 60;

/// Whether symbols are coded one at a time or as adjacent pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodingMode {
    Single,
    Pair,
}

impl CodingMode {
    pub fn group(self) -> usize {
        match self {
            CodingMode::Single => 1,
            CodingMode::Pair => 2,
        }
    }
}

/// Canonical prefix code over `levels` symbols (or `levels^2` pairs).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HuffmanTable {
    mode: CodingMode,
    levels: usize,
    lengths: Vec<u8>,
    codes: Vec<u64>,
    /// Symbols sorted by (length, symbol).
    sorted: Vec<u32>,
    /// Per length: number of codes, first code, index of first in `sorted`.
    count: Vec<u32>,
    first: Vec<u64>,
    offset: Vec<u32>,
}

#[derive(Debug, PartialEq, Eq, PartialOrd, Ord)]
struct Node {
    weight: u64,
    min_symbol: usize,
    order: usize,
}

/// Optimal code lengths for the given frequencies; zero-frequency symbols get
/// length 0 (no code). A lone used symbol gets a 1-bit code.
pub fn huffman_lengths(freqs: &[u64]) -> Result<Vec<u8>> {
    let used: Vec<usize> = (0..freqs.len()).filter(|&i| freqs[i] > 0).collect();
    let mut lengths = vec![0u8; freqs.len()];
    match used.len() {
        0 => {
            return Err(CmrlError::Config(
                "cannot build a code from an empty histogram".into(),
            ))
        }
        1 => {
            lengths[used[0]] = 1;
            return Ok(lengths);
        }
        _ => {}
    }
    // children[node] for internal nodes; leaves are 0..freqs.len()
    let n = freqs.len();
    let mut children: Vec<(usize, usize)> = Vec::with_capacity(used.len());
    let mut heap = BinaryHeap::new();
    let mut order = 0;
    for &s in &used {
        heap.push(Reverse((
            Node {
                weight: freqs[s],
                min_symbol: s,
                order,
            },
            s,
        )));
        order += 1;
    }
    while heap.len() > 1 {
        let Reverse((a, ia)) = heap.pop().expect("heap has two nodes");
        let Reverse((b, ib)) = heap.pop().expect("heap has two nodes");
        children.push((ia, ib));
        let id = n + children.len() - 1;
        let node = Node {
            weight: a.weight + b.weight,
            min_symbol: a.min_symbol.min(b.min_symbol),
            order,
        };
        order += 1;
        heap.push(Reverse((node, id)));
    }
    let Reverse((_, root)) = heap.pop().expect("root");
    let mut stack = vec![(root, 0u32)];
    while let Some((id, depth)) = stack.pop() {
        if id < n {
            if depth > MAX_CODE_LEN as u32 {
                return Err(CmrlError::NumericalFailure(format!(
                    "code length {depth} exceeds {MAX_CODE_LEN}"
                )));
            }
            lengths[id] = depth as u8;
        } else {
            let (l, r) = children[id - n];
            stack.push((l, depth + 1));
            stack.push((r, depth + 1));
        }
    }
    Ok(lengths)
}

impl HuffmanTable {
    /// Table over the full alphabet with add-one smoothing, so every symbol
    /// (or pair) has a code.
    pub fn build(frames: &[Vec<u16>], levels: usize, mode: CodingMode) -> Result<Self> {
        let size = alphabet_size(levels, mode);
        let mut freqs = vec![1u64; size];
        for frame in frames {
            for g in grouped(frame, levels, mode)? {
                freqs[g] += 1;
            }
        }
        Self::from_frequencies(&freqs, levels, mode)
    }

    /// Table for exact frequencies; symbols with zero count get no code.
    pub fn from_frequencies(freqs: &[u64], levels: usize, mode: CodingMode) -> Result<Self> {
        if freqs.len() != alphabet_size(levels, mode) {
            return Err(CmrlError::ShapeMismatch(format!(
                "{} frequencies for {levels} levels",
                freqs.len()
            )));
        }
        Self::from_lengths(huffman_lengths(freqs)?, levels, mode)
    }

    /// Canonical code from code lengths (0 = unused symbol).
    pub fn from_lengths(lengths: Vec<u8>, levels: usize, mode: CodingMode) -> Result<Self> {
        if lengths.len() != alphabet_size(levels, mode) {
            return Err(CmrlError::ShapeMismatch(format!(
                "{} code lengths for {levels} levels",
                lengths.len()
            )));
        }
        let max = *lengths.iter().max().unwrap_or(&0);
        if max == 0 || max > MAX_CODE_LEN {
            return Err(CmrlError::Decode(format!(
                "invalid maximum code length {max}"
            )));
        }
        // Kraft sum must not exceed one
        let kraft: u128 = lengths
            .iter()
            .filter(|&&l| l > 0)
            .map(|&l| 1u128 << (max - l))
            .sum();
        if kraft > 1u128 << max {
            return Err(CmrlError::Decode(
                "code lengths violate the Kraft inequality".into(),
            ));
        }
        let mut sorted: Vec<u32> = (0..lengths.len() as u32)
            .filter(|&s| lengths[s as usize] > 0)
            .collect();
        sorted.sort_by_key(|&s| (lengths[s as usize], s));
        let top = max as usize;
        let mut count = vec![0u32; top + 1];
        for &s in &sorted {
            count[lengths[s as usize] as usize] += 1;
        }
        let mut first = vec![0u64; top + 1];
        let mut offset = vec![0u32; top + 1];
        let mut code = 0u64;
        let mut idx = 0u32;
        for len in 1..=top {
            code <<= 1;
            first[len] = code;
            offset[len] = idx;
            code += count[len] as u64;
            idx += count[len];
        }
        let mut codes = vec![0u64; lengths.len()];
        for len in 1..=top {
            for k in 0..count[len] {
                let s = sorted[(offset[len] + k) as usize];
                codes[s as usize] = first[len] + k as u64;
            }
        }
        Ok(Self {
            mode,
            levels,
            lengths,
            codes,
            sorted,
            count,
            first,
            offset,
        })
    }

    pub fn mode(&self) -> CodingMode {
        self.mode
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn lengths(&self) -> &[u8] {
        &self.lengths
    }

    /// Code of one alphabet entry as (bits, length).
    pub fn code(&self, entry: usize) -> Option<(u64, u8)> {
        match self.lengths.get(entry) {
            Some(&l) if l > 0 => Some((self.codes[entry], l)),
            _ => None,
        }
    }

    /// Exact encoded size of one frame's symbols.
    pub fn bit_length(&self, symbols: &[u16]) -> Result<u64> {
        let mut bits = 0u64;
        for g in grouped(symbols, self.levels, self.mode)? {
            bits += self.code(g).ok_or(CmrlError::UnknownSymbol(g))?.1 as u64;
        }
        Ok(bits)
    }

    pub fn encode(&self, symbols: &[u16], out: &mut BitWriter) -> Result<()> {
        for g in grouped(symbols, self.levels, self.mode)? {
            let (code, len) = self.code(g).ok_or(CmrlError::UnknownSymbol(g))?;
            out.write_bits(code, len as u32);
        }
        Ok(())
    }

    /// Decodes `count` original symbols.
    pub fn decode(&self, input: &mut BitReader<'_>, count: usize) -> Result<Vec<u16>> {
        let group = self.mode.group();
        if count % group != 0 {
            return Err(CmrlError::Decode(format!(
                "{count} symbols cannot be split into groups of {group}"
            )));
        }
        let mut out = Vec::with_capacity(count);
        let top = self.count.len() - 1;
        for _ in 0..count / group {
            let mut code = 0u64;
            let mut entry = None;
            for len in 1..=top {
                let bit = input
                    .read_bit()
                    .map_err(|_| CmrlError::Decode("bitstring ends inside a code".into()))?;
                code = (code << 1) | bit as u64;
                let rel = code.wrapping_sub(self.first[len]);
                if code >= self.first[len] && rel < self.count[len] as u64 {
                    entry = Some(self.sorted[(self.offset[len] as u64 + rel) as usize] as usize);
                    break;
                }
            }
            let e = entry.ok_or_else(|| CmrlError::Decode("bit pattern matches no code".into()))?;
            match self.mode {
                CodingMode::Single => out.push(e as u16),
                CodingMode::Pair => {
                    out.push((e / self.levels) as u16);
                    out.push((e % self.levels) as u16);
                }
            }
        }
        Ok(out)
    }

    /// Expected bits per original symbol under `probs` (alphabet order).
    pub fn mean_length(&self, probs: &[f64]) -> f64 {
        probs
            .iter()
            .zip(&self.lengths)
            .map(|(p, &l)| p * l as f64)
            .sum::<f64>()
            / self.mode.group() as f64
    }
}

pub fn alphabet_size(levels: usize, mode: CodingMode) -> usize {
    match mode {
        CodingMode::Single => levels,
        CodingMode::Pair => levels * levels,
    }
}

/// Alphabet entries of one frame: symbols, or adjacent non-overlapping pairs.
fn grouped(symbols: &[u16], levels: usize, mode: CodingMode) -> Result<Vec<usize>> {
    if let Some(&s) = symbols.iter().find(|&&s| s as usize >= levels) {
        return Err(CmrlError::UnknownSymbol(s as usize));
    }
    Ok(match mode {
        CodingMode::Single => symbols.iter().map(|&s| s as usize).collect(),
        CodingMode::Pair => {
            if symbols.len() % 2 != 0 {
                return Err(CmrlError::ShapeMismatch(format!(
                    "pair coding needs an even count, got {}",
                    symbols.len()
                )));
            }
            symbols
                .chunks_exact(2)
                .map(|p| p[0] as usize * levels + p[1] as usize)
                .collect()
        }
    })
}

/// Shannon entropy (bits) of a probability vector.
pub fn entropy_bits(probs: &[f64]) -> f64 {
    probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.log2())
        .sum()
}

/// Entropy (bits/symbol) of the empirical distribution of `symbols`.
pub fn entropy_estimate(symbols: &[u16]) -> f64 {
    if symbols.is_empty() {
        return 0.0;
    }
    let top = *symbols.iter().max().expect("non-empty") as usize;
    let mut counts = vec![0u64; top + 1];
    for &s in symbols {
        counts[s as usize] += 1;
    }
    let n = symbols.len() as f64;
    entropy_bits(&counts.iter().map(|&c| c as f64 / n).collect::<Vec<_>>())
}

/// Bitrate of one module emitting `c` bits per symbol with stride `d`.
pub fn module_bitrate(c: f64, stride: usize) -> f64 {
    CODEC_SAMPLE_RATE as f64 * c * FRAME_LEN as f64 / ((FRAME_LEN - OVERLAP) as f64 * stride as f64)
}

/// Bits per symbol each module must average for the cascade to hit
/// `total_bps`.
pub fn target_bits_per_symbol(total_bps: f64, strides: &[usize], lpc: bool) -> f64 {
    let side = if lpc { side_info_bps() } else { 0.0 };
    let per_unit: f64 = strides.iter().map(|&d| module_bitrate(1.0, d)).sum();
    (total_bps - side) / per_unit
}

/// Measured rate of a coded utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct RateReport {
    pub frames: usize,
    /// Average coded bits per symbol, per module.
    pub bits_per_symbol: Vec<f64>,
    /// Coded bits per module over all frames.
    pub module_bits: Vec<u64>,
    pub module_bps: Vec<f64>,
    pub lpc_bps: f64,
    pub total_bps: f64,
    /// Payload size: all module bits plus LPC side info.
    pub payload_bits: u64,
}

impl RateReport {
    /// Key=value lines.
    pub fn to_kv(&self) -> String {
        let mut s = format!("frames={}\n", self.frames);
        for (i, (c, bps)) in self
            .bits_per_symbol
            .iter()
            .zip(&self.module_bps)
            .enumerate()
        {
            s += &format!(
                "module{}_bits_per_symbol={c:.6}\nmodule{}_bps={bps:.3}\n",
                i + 1,
                i + 1
            );
        }
        s += &format!(
            "lpc_bps={:.3}\ntotal_bps={:.3}\npayload_bits={}\n",
            self.lpc_bps, self.total_bps, self.payload_bits
        );
        s
    }
}

/// Encodes nothing; counts exact Huffman lengths of `streams[module][frame]`
/// and derives the bitrate from the closed form.
pub fn measure_rate(
    streams: &[Vec<Vec<u16>>],
    tables: &[HuffmanTable],
    strides: &[usize],
    lpc: bool,
) -> Result<RateReport> {
    if streams.len() != tables.len() || streams.len() != strides.len() || streams.is_empty() {
        return Err(CmrlError::ShapeMismatch(format!(
            "{} streams, {} tables, {} strides",
            streams.len(),
            tables.len(),
            strides.len()
        )));
    }
    let frames = streams[0].len();
    if streams.iter().any(|s| s.len() != frames) {
        return Err(CmrlError::ShapeMismatch(
            "modules disagree on frame count".into(),
        ));
    }
    let mut bits_per_symbol = Vec::new();
    let mut module_bits = Vec::new();
    let mut module_bps = Vec::new();
    for ((stream, table), &d) in streams.iter().zip(tables).zip(strides) {
        let mut bits = 0u64;
        let mut symbols = 0usize;
        for frame in stream {
            bits += table.bit_length(frame)?;
            symbols += frame.len();
        }
        let c = if symbols == 0 {
            0.0
        } else {
            bits as f64 / symbols as f64
        };
        bits_per_symbol.push(c);
        module_bits.push(bits);
        module_bps.push(module_bitrate(c, d));
    }
    let lpc_bps = if lpc { side_info_bps() } else { 0.0 };
    let lpc_bits = if lpc {
        crate::lpc::LPC_FRAME_BITS as u64 * frames as u64
    } else {
        0
    };
    Ok(RateReport {
        frames,
        total_bps: lpc_bps + module_bps.iter().sum::<f64>(),
        payload_bits: module_bits.iter().sum::<u64>() + lpc_bits,
        bits_per_symbol,
        module_bits,
        module_bps,
        lpc_bps,
    })
}

/// Multiplicative controller for the entropy-loss weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateController {
    pub up: f64,
    pub down: f64,
    pub min: f64,
    pub max: f64,
}

impl Default for RateController {
    fn default() -> Self {
        Self {
            up: 1.3,
            down: 0.77,
            min: 1e-4,
            max: 10.0,
        }
    }
}

impl RateController {
    /// Raises the weight when entropy is above `range`, lowers it when
    /// below, and leaves it alone inside.
    pub fn step(&self, entropy: f64, range: (f64, f64), lambda: f64) -> f64 {
        let next = if entropy > range.1 {
            lambda * self.up
        } else if entropy < range.0 {
            lambda * self.down
        } else {
            lambda
        };
        next.clamp(self.min, self.max)
    }
}

/// [`RateController::step`] with the default gains.
pub fn rate_control_step(entropy: f64, range: (f64, f64), lambda: f64) -> f64 {
    RateController::default().step(entropy, range, lambda)
}
