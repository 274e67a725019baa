//! Python bindings: load, train and run CMRL models from Python.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use cmrl_core::bitstream::{read_model, read_stream, write_model, write_stream};
use cmrl_core::cascade::CmrlModel;
use cmrl_core::codec::{decode_audio, encode_audio, snr_db as core_snr, stream_rate};
use cmrl_core::config::{BitrateMode, TrainConfig};
use cmrl_core::entropy::{entropy_estimate, RateReport};
use cmrl_core::framing::{read_wav, write_wav, AudioBuffer, CODEC_SAMPLE_RATE};
use cmrl_core::lpc::side_info_bps;
use cmrl_core::module::{ModuleConfig, ModuleParams};
use cmrl_core::train::{prepare_corpus, train as core_train, EpochLog, Trainer};
use cmrl_core::CmrlError;

fn err(e: CmrlError) -> PyErr {
    match e {
        CmrlError::Io(e) => PyIOError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

fn parse_mode(s: &str) -> PyResult<BitrateMode> {
    s.parse().map_err(err)
}

fn report_dict<'py>(py: Python<'py>, r: &RateReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("frames", r.frames)?;
    d.set_item("bits_per_symbol", r.bits_per_symbol.clone())?;
    d.set_item("module_bits", r.module_bits.clone())?;
    d.set_item("module_bps", r.module_bps.clone())?;
    d.set_item("lpc_bps", r.lpc_bps)?;
    d.set_item("total_bps", r.total_bps)?;
    d.set_item("payload_bits", r.payload_bits)?;
    Ok(d)
}

/// A trained codec: modules, normalization scale and Huffman tables.
#[pyclass(name = "Model", module = "cmrl")]
struct PyModel {
    inner: CmrlModel,
}

#[pymethods]
impl PyModel {
    /// Randomly initialized model with fitted uniform tables; useful for
    /// exercising the container and codec paths without training.
    #[staticmethod]
    #[pyo3(signature = (mode = "23.85", lpc = false, seed = 0, channels = 100, bottleneck = 20, taps = 9, blocks = 2))]
    fn random(
        mode: &str,
        lpc: bool,
        seed: u64,
        channels: usize,
        bottleneck: usize,
        taps: usize,
        blocks: usize,
    ) -> PyResult<Self> {
        let m = parse_mode(mode)?;
        let modules = m
            .strides()
            .iter()
            .enumerate()
            .map(|(i, &stride)| {
                let cfg = ModuleConfig {
                    channels,
                    bottleneck,
                    taps,
                    stride,
                    code_channels: 1,
                    blocks,
                    ..ModuleConfig::table1(stride)
                };
                ModuleParams::init(cfg, seed.wrapping_mul(1000).wrapping_add(i as u64))
            })
            .collect::<cmrl_core::Result<Vec<_>>>()
            .map_err(err)?;
        let mut inner = CmrlModel {
            modules,
            scale: 0.1,
            lpc,
            mode: m,
            coding: m.coding(),
            tables: Vec::new(),
            loss: Default::default(),
        };
        let symbols: Vec<Vec<Vec<u16>>> = inner
            .code_lens()
            .iter()
            .map(|&n| vec![(0..n).map(|i| (i % 32) as u16).collect()])
            .collect();
        inner.fit_tables(&symbols).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let bytes = std::fs::read(path).map_err(|e| PyIOError::new_err(e.to_string()))?;
        Self::from_bytes(&bytes)
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        Ok(Self {
            inner: read_model(data).map_err(err)?,
        })
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyBytes>> {
        Ok(PyBytes::new(py, &write_model(&self.inner).map_err(err)?))
    }

    fn save(&self, path: &str) -> PyResult<()> {
        std::fs::write(path, write_model(&self.inner).map_err(err)?)
            .map_err(|e| PyIOError::new_err(e.to_string()))
    }

    #[getter]
    fn mode(&self) -> String {
        self.inner.mode.to_string()
    }

    #[getter]
    fn lpc(&self) -> bool {
        self.inner.lpc
    }

    #[getter]
    fn scale(&self) -> f64 {
        self.inner.scale
    }

    #[getter]
    fn code_lens(&self) -> Vec<usize> {
        self.inner.code_lens()
    }

    /// Weights, biases, codebook entries and their total.
    fn param_count<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let p = self.inner.param_count();
        let d = PyDict::new(py);
        d.set_item("weights", p.weights)?;
        d.set_item("biases", p.biases)?;
        d.set_item("codebook", p.codebook)?;
        d.set_item("total", p.total())?;
        Ok(d)
    }

    /// Encodes 16 kHz samples into `.cmrl` bytes.
    fn encode<'py>(&self, py: Python<'py>, samples: Vec<f64>) -> PyResult<Bound<'py, PyBytes>> {
        let audio = AudioBuffer::new(samples, CODEC_SAMPLE_RATE).map_err(err)?;
        let stream = py
            .detach(|| encode_audio(&self.inner, &audio))
            .map_err(err)?;
        let bytes = write_stream(&stream, &self.inner.tables).map_err(err)?;
        Ok(PyBytes::new(py, &bytes.bytes))
    }

    /// Decodes `.cmrl` bytes into samples of the original length.
    fn decode(&self, py: Python<'_>, data: &[u8]) -> PyResult<Vec<f64>> {
        let stream = read_stream(data, &self.inner.tables).map_err(err)?;
        Ok(py
            .detach(|| decode_audio(&self.inner, &stream))
            .map_err(err)?
            .samples)
    }

    /// Bitrate accounting of an encoded stream.
    fn rate_report<'py>(&self, py: Python<'py>, data: &[u8]) -> PyResult<Bound<'py, PyDict>> {
        let stream = read_stream(data, &self.inner.tables).map_err(err)?;
        report_dict(py, &stream_rate(&self.inner, &stream).map_err(err)?)
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(mode={}, lpc={}, modules={}, parameters={})",
            self.inner.mode,
            self.inner.lpc,
            self.inner.modules.len(),
            self.inner.param_count().total()
        )
    }
}

/// Trains a model on lists of 16 kHz samples. `config` is TOML text; the
/// defaults follow the published schedule. Returns the model and the
/// per-epoch key=value log lines.
#[pyfunction]
#[pyo3(signature = (utterances, config = None))]
fn train(
    py: Python<'_>,
    utterances: Vec<Vec<f64>>,
    config: Option<&str>,
) -> PyResult<(PyModel, Vec<String>)> {
    let cfg = match config {
        Some(t) => TrainConfig::from_toml(t).map_err(err)?,
        None => TrainConfig::default(),
    };
    let audio = utterances
        .into_iter()
        .map(|s| AudioBuffer::new(s, CODEC_SAMPLE_RATE))
        .collect::<cmrl_core::Result<Vec<_>>>()
        .map_err(err)?;
    py.detach(|| {
        let corpus = prepare_corpus(&audio, cfg.lpc, cfg.validation_fraction, cfg.seed)?;
        let mut lines = Vec::new();
        let mut hook = |l: &EpochLog, _: &Trainer| {
            lines.push(l.to_kv());
            Ok(())
        };
        let (model, _) = core_train(cfg, &corpus, &mut hook)?;
        Ok((PyModel { inner: model }, lines))
    })
    .map_err(err)
}

/// Default training configuration for a mode, as TOML.
#[pyfunction]
#[pyo3(signature = (mode = "23.85", lpc = false))]
fn default_config(mode: &str, lpc: bool) -> PyResult<String> {
    TrainConfig::for_mode(parse_mode(mode)?, lpc)
        .to_toml()
        .map_err(err)
}

/// `10 log10(sum x^2 / sum (x - y)^2)` capped at +-120 dB.
#[pyfunction]
fn snr_db(reference: Vec<f64>, decoded: Vec<f64>) -> PyResult<f64> {
    core_snr(&reference, &decoded).map_err(err)
}

/// Shannon entropy of a symbol stream in bits.
#[pyfunction]
fn entropy(symbols: Vec<u16>) -> f64 {
    entropy_estimate(&symbols)
}

/// Bits per symbol each module must average to hit a mode's nominal rate.
#[pyfunction]
#[pyo3(signature = (mode, lpc = false))]
fn target_bits_per_symbol(mode: &str, lpc: bool) -> PyResult<f64> {
    Ok(parse_mode(mode)?.target_bits(lpc))
}

#[pyfunction]
fn lpc_side_info_bps() -> f64 {
    side_info_bps()
}

/// Synthetic speech-like utterances.
#[pyfunction]
#[pyo3(signature = (seed = 0, count = 1, seconds = 1.0))]
fn synth_corpus(seed: u64, count: usize, seconds: f64) -> Vec<Vec<f64>> {
    cmrl_core::synth::corpus(seed, count, seconds)
        .into_iter()
        .map(|a| a.samples)
        .collect()
}

/// Reads a 16-bit mono WAV file; returns samples and the sample rate.
#[pyfunction]
fn load_wav(path: &str) -> PyResult<(Vec<f64>, u32)> {
    let a = read_wav(path).map_err(err)?;
    Ok((a.samples, a.sample_rate))
}

#[pyfunction]
#[pyo3(signature = (path, samples, sample_rate = CODEC_SAMPLE_RATE))]
fn save_wav(path: &str, samples: Vec<f64>, sample_rate: u32) -> PyResult<()> {
    write_wav(path, &AudioBuffer::new(samples, sample_rate).map_err(err)?).map_err(err)
}

#[pymodule]
fn cmrl(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(snr_db, m)?)?;
    m.add_function(wrap_pyfunction!(entropy, m)?)?;
    m.add_function(wrap_pyfunction!(target_bits_per_symbol, m)?)?;
    m.add_function(wrap_pyfunction!(lpc_side_info_bps, m)?)?;
    m.add_function(wrap_pyfunction!(synth_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(load_wav, m)?)?;
    m.add_function(wrap_pyfunction!(save_wav, m)?)?;
    m.add("SAMPLE_RATE", CODEC_SAMPLE_RATE)?;
    Ok(())
}
