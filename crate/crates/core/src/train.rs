//! Corpus preparation and the two-round training scheme: each module is
//! first trained alone on what the frozen modules before it leave over, then
//! all modules are finetuned jointly while the rate controller steers the
//! entropy weight into the target window.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::cascade::{cascade_encode, cascade_step, CmrlModel, LossBreakdown, TrainFrame};
use crate::codec::{coded_scale, mse, reconstruct, snr_db, training_frames};
use crate::config::{LossWeights, TrainConfig};
use crate::entropy::entropy_bits;
use crate::error::{CmrlError, Result};
use crate::framing::{AudioBuffer, CODEC_SAMPLE_RATE};
use crate::kernels::Adam;
use crate::mel::MelLoss;
use crate::module::{ModuleConfig, ModuleParams};
use crate::quantizer::CODEBOOK_SIZE;

/// Training and validation material in the coded, normalized domain.
#[derive(Debug, Clone)]
pub struct PreparedCorpus {
    pub lpc: bool,
    /// Divisor applied to the coded-domain signal before framing.
    pub scale: f64,
    pub train_frames: Vec<Vec<f32>>,
    pub validation_frames: Vec<Vec<f32>>,
    /// Held-out utterances for end-to-end SNR.
    pub validation_audio: Vec<Vec<f64>>,
}

/// Splits utterances into training and validation sets by file, computes
/// the corpus scale on the training part and frames everything.
pub fn prepare_corpus(
    utterances: &[AudioBuffer],
    lpc: bool,
    validation_fraction: f64,
    seed: u64,
) -> Result<PreparedCorpus> {
    if utterances.is_empty() {
        return Err(CmrlError::Corpus("corpus is empty".into()));
    }
    if let Some(u) = utterances
        .iter()
        .find(|u| u.sample_rate != CODEC_SAMPLE_RATE)
    {
        return Err(CmrlError::SampleRate(u.sample_rate));
    }
    let mut order: Vec<usize> = (0..utterances.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c0de));
    let n = utterances.len();
    let mut held = (validation_fraction * n as f64).round() as usize;
    if validation_fraction > 0.0 && n >= 2 {
        held = held.clamp(1, n - 1);
    }
    let held = held.min(n - 1);
    let (val_idx, train_idx) = order.split_at(held);
    let mut train_idx = train_idx.to_vec();
    let mut val_idx = val_idx.to_vec();
    train_idx.sort_unstable();
    val_idx.sort_unstable();

    let train: Vec<&[f64]> = train_idx
        .iter()
        .map(|&i| utterances[i].samples.as_slice())
        .filter(|s| !s.is_empty())
        .collect();
    if train.is_empty() {
        return Err(CmrlError::Corpus("training split has no samples".into()));
    }
    let scale = coded_scale(&train, lpc)?;
    let frames_of = |set: &[&[f64]]| -> Result<Vec<Vec<f32>>> {
        let per: Vec<Vec<Vec<f32>>> = set
            .par_iter()
            .map(|x| training_frames(x, lpc, scale))
            .collect::<Result<_>>()?;
        Ok(per.into_iter().flatten().collect())
    };
    let validation: Vec<&[f64]> = val_idx
        .iter()
        .map(|&i| utterances[i].samples.as_slice())
        .filter(|s| !s.is_empty())
        .collect();
    Ok(PreparedCorpus {
        lpc,
        scale,
        train_frames: frames_of(&train)?,
        validation_frames: frames_of(&validation)?,
        validation_audio: validation.iter().map(|s| s.to_vec()).collect(),
    })
}

/// Which round an epoch belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Zero-based index of the module being trained.
    Greedy(usize),
    Finetune,
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub phase: Phase,
    /// One-based epoch within the phase.
    pub epoch: usize,
    /// Optimizer steps taken so far over the whole run.
    pub steps: u64,
    /// Batch-size weighted mean of the batch losses.
    pub loss: LossBreakdown,
    /// Entropy weight at the end of the epoch.
    pub lambda_entropy: f64,
    /// Softmax sharpness used during the epoch.
    pub alpha: f64,
    /// Rate-weighted empirical entropy of the hard symbols, bits/symbol.
    pub hard_entropy: f64,
    /// Hard-path MSE on validation frames (normalized domain).
    pub val_mse: Option<f64>,
    /// End-to-end SNR over the validation utterances.
    pub val_snr_db: Option<f64>,
}

impl EpochLog {
    /// One key=value line.
    pub fn to_kv(&self) -> String {
        let (phase, module) = match self.phase {
            Phase::Greedy(i) => ("greedy", (i + 1).to_string()),
            Phase::Finetune => ("finetune", "all".to_string()),
        };
        let l = &self.loss;
        let opt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |v| format!("{v:.6}"));
        format!(
            "phase={phase} module={module} epoch={} steps={} reconstruction={:.6e} perceptual={:.6e} \
             quantization={:.6e} entropy={:.6} total={:.6e} lambda_entropy={:.6e} alpha={:.3} \
             hard_entropy={:.6} val_mse={} val_snr_db={}",
            self.epoch,
            self.steps,
            l.reconstruction,
            l.perceptual,
            l.quantization,
            l.entropy,
            l.total,
            self.lambda_entropy,
            self.alpha,
            self.hard_entropy,
            opt(self.val_mse),
            opt(self.val_snr_db),
        )
    }
}

/// Outcome of the finetuning round.
#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneReport {
    pub epochs: usize,
    /// Rate-weighted hard entropy of the last epoch.
    pub entropy: f64,
    pub lambda_entropy: f64,
    /// Whether the entropy ended inside the active target window.
    pub in_range: bool,
}

/// Rate-weighted mean of per-module histogram entropies. Weights are symbol
/// counts per frame, which are proportional to each module's bitrate share.
pub fn weighted_entropy(histograms: &[Vec<u64>], code_lens: &[usize]) -> f64 {
    let total: usize = code_lens.iter().sum();
    histograms
        .iter()
        .zip(code_lens)
        .map(|(h, &n)| {
            let count: u64 = h.iter().sum();
            if count == 0 {
                return 0.0;
            }
            let p: Vec<f64> = h.iter().map(|&c| c as f64 / count as f64).collect();
            entropy_bits(&p) * n as f64 / total as f64
        })
        .sum()
}

/// Callback invoked after every epoch; returning an error stops training.
pub type EpochHook<'a> = dyn FnMut(&EpochLog, &Trainer) -> Result<()> + 'a;

/// Mutable training state of a cascade.
pub struct Trainer {
    config: TrainConfig,
    modules: Vec<ModuleParams<f32>>,
    lambda: f64,
    steps: u64,
    scale: f64,
    logs: Vec<EpochLog>,
    mel: MelLoss<f32>,
}

fn shuffled(len: usize, seed: u64, salt: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(
        seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ salt,
    ));
    idx
}

fn check_finite(loss: &LossBreakdown, grads: &[Vec<f32>], context: &str) -> Result<()> {
    let l = loss;
    if ![
        l.reconstruction,
        l.perceptual,
        l.quantization,
        l.entropy,
        l.total,
    ]
    .iter()
    .all(|v| v.is_finite())
    {
        return Err(CmrlError::Divergence(format!(
            "{context}: non-finite loss {l:?}"
        )));
    }
    if grads.iter().flatten().any(|g| !g.is_finite()) {
        return Err(CmrlError::Divergence(format!(
            "{context}: non-finite gradient (loss {l:?})"
        )));
    }
    Ok(())
}

impl Trainer {
    /// Fresh, randomly initialized modules. Module `i` is seeded from
    /// `config.seed` and `i`.
    pub fn new(config: TrainConfig, corpus: &PreparedCorpus) -> Result<Self> {
        config.validate()?;
        if corpus.lpc != config.lpc {
            return Err(CmrlError::Config(
                "corpus and config disagree on LPC input".into(),
            ));
        }
        if corpus.train_frames.is_empty() {
            return Err(CmrlError::Corpus("no training frames".into()));
        }
        let modules = (0..config.modules)
            .map(|i| {
                let mut m = ModuleParams::init(
                    config.module_config(i),
                    config.seed.wrapping_mul(1000).wrapping_add(i as u64),
                )?;
                m.alpha = config.alpha.at(0);
                Ok(m)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_modules(config, modules, corpus.scale))
    }

    /// Resumes from existing modules.
    pub fn from_modules(config: TrainConfig, modules: Vec<ModuleParams<f32>>, scale: f64) -> Self {
        let lambda = config.loss.entropy;
        Self {
            config,
            modules,
            lambda,
            steps: 0,
            scale,
            logs: Vec::new(),
            mel: MelLoss::new(),
        }
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn modules(&self) -> &[ModuleParams<f32>] {
        &self.modules
    }

    pub fn modules_mut(&mut self) -> &mut [ModuleParams<f32>] {
        &mut self.modules
    }

    pub fn lambda_entropy(&self) -> f64 {
        self.lambda
    }

    pub fn set_lambda_entropy(&mut self, lambda: f64) {
        self.lambda = lambda;
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn logs(&self) -> &[EpochLog] {
        &self.logs
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    fn weights(&self) -> LossWeights {
        LossWeights {
            entropy: self.lambda,
            ..self.config.loss
        }
    }

    /// Summed hard output of modules `0..upto` for every frame.
    fn hard_prefix(&self, frames: &[Vec<f32>], upto: usize) -> Result<Vec<Vec<f32>>> {
        let modules = &self.modules[..upto];
        frames
            .par_iter()
            .map(|f| cascade_encode(modules, f).map(|c| c.output()))
            .collect()
    }

    /// Soft-cascade objective over `frames` with the current entropy weight,
    /// evaluated in batches of the configured size.
    pub fn evaluate(&self, frames: &[Vec<f32>]) -> Result<LossBreakdown> {
        if frames.is_empty() {
            return Err(CmrlError::Corpus("nothing to evaluate".into()));
        }
        let refs: Vec<&ModuleParams<f32>> = self.modules.iter().collect();
        let weights = self.weights();
        let mut acc = [0.0f64; 4];
        for chunk in frames.chunks(self.config.batch_size) {
            let batch: Vec<TrainFrame<'_, f32>> = chunk
                .iter()
                .map(|f| TrainFrame {
                    target: f,
                    prefix: None,
                })
                .collect();
            let l = cascade_step(&refs, &batch, &weights, &self.mel, false)?.loss;
            for (a, v) in
                acc.iter_mut()
                    .zip([l.reconstruction, l.perceptual, l.quantization, l.entropy])
            {
                *a += v * chunk.len() as f64;
            }
        }
        let n = frames.len() as f64;
        Ok(LossBreakdown::combine(
            acc[0] / n,
            acc[1] / n,
            acc[2] / n,
            acc[3] / n,
            &weights,
        ))
    }

    /// Mean squared error of the hard cascade over frames.
    pub fn hard_mse(&self, frames: &[Vec<f32>]) -> Result<f64> {
        if frames.is_empty() {
            return Err(CmrlError::Corpus("nothing to evaluate".into()));
        }
        let per: Vec<f64> = frames
            .par_iter()
            .map(|f| {
                let c = cascade_encode(&self.modules, f)?;
                Ok(c.residual
                    .iter()
                    .map(|&e| (e as f64) * (e as f64))
                    .sum::<f64>())
            })
            .collect::<Result<_>>()?;
        Ok(per.iter().sum::<f64>() / (frames.len() * frames[0].len()) as f64)
    }

    fn validation(&self, corpus: &PreparedCorpus) -> Result<(Option<f64>, Option<f64>)> {
        if corpus.validation_frames.is_empty() {
            return Ok((None, None));
        }
        let val_mse = self.hard_mse(&corpus.validation_frames)?;
        let mut reference = Vec::new();
        let mut decoded = Vec::new();
        for x in &corpus.validation_audio {
            decoded.extend(reconstruct(&self.modules, self.scale, self.config.lpc, x)?);
            reference.extend_from_slice(x);
        }
        Ok((Some(val_mse), Some(snr_db(&reference, &decoded)?)))
    }

    /// Runs one epoch over `frames` updating the modules in `trained`.
    /// Returns the mean loss and the epoch's hard-symbol entropy.
    fn run_epoch(
        &mut self,
        frames: &[Vec<f32>],
        prefix: Option<&[Vec<f32>]>,
        trained: std::ops::Range<usize>,
        optimizers: &mut [Adam<f32>],
        lr: f64,
        target: Option<(f64, f64)>,
        salt: u64,
        context: &str,
    ) -> Result<(LossBreakdown, f64)> {
        let order = shuffled(frames.len(), self.config.seed, salt);
        let code_lens: Vec<usize> = self.modules[trained.clone()]
            .iter()
            .map(|m| m.code_len())
            .collect();
        let mut acc = [0.0f64; 4];
        let mut epoch_hist = vec![vec![0u64; CODEBOOK_SIZE]; code_lens.len()];
        let mut interval_hist = epoch_hist.clone();
        for (b, batch_idx) in order.chunks(self.config.batch_size).enumerate() {
            let batch: Vec<TrainFrame<'_, f32>> = batch_idx
                .iter()
                .map(|&k| TrainFrame {
                    target: &frames[k],
                    prefix: prefix.map(|p| p[k].as_slice()),
                })
                .collect();
            let weights = self.weights();
            let refs: Vec<&ModuleParams<f32>> = self.modules[trained.clone()].iter().collect();
            let step = cascade_step(&refs, &batch, &weights, &self.mel, true)?;
            check_finite(&step.loss, &step.grads, context)?;
            for ((m, opt), g) in self.modules[trained.clone()]
                .iter_mut()
                .zip(optimizers.iter_mut())
                .zip(&step.grads)
            {
                opt.step(m.flat_mut(), g, lr)?;
            }
            self.steps += 1;
            let l = step.loss;
            for (a, v) in
                acc.iter_mut()
                    .zip([l.reconstruction, l.perceptual, l.quantization, l.entropy])
            {
                *a += v * batch.len() as f64;
            }
            for (h, s) in epoch_hist.iter_mut().zip(&step.histograms) {
                h.iter_mut().zip(s).for_each(|(a, b)| *a += b);
            }
            for (h, s) in interval_hist.iter_mut().zip(&step.histograms) {
                h.iter_mut().zip(s).for_each(|(a, b)| *a += b);
            }
            if let Some(range) = target {
                if (b + 1) % self.config.rate_interval == 0 {
                    let e = weighted_entropy(&interval_hist, &code_lens);
                    self.lambda = self.config.rate.step(e, range, self.lambda);
                    interval_hist.iter_mut().for_each(|h| h.fill(0));
                }
            }
        }
        let n = frames.len() as f64;
        let loss = LossBreakdown::combine(
            acc[0] / n,
            acc[1] / n,
            acc[2] / n,
            acc[3] / n,
            &self.weights(),
        );
        Ok((loss, weighted_entropy(&epoch_hist, &code_lens)))
    }

    fn log_epoch(
        &mut self,
        log: EpochLog,
        corpus: &PreparedCorpus,
        hook: &mut EpochHook<'_>,
    ) -> Result<()> {
        let (val_mse, val_snr_db) = self.validation(corpus)?;
        let log = EpochLog {
            val_mse,
            val_snr_db,
            ..log
        };
        hook(&log, self)?;
        self.logs.push(log);
        Ok(())
    }

    /// Trains module `i` alone on the residual left by the hard outputs of
    /// the frozen modules before it.
    pub fn greedy_train(
        &mut self,
        corpus: &PreparedCorpus,
        i: usize,
        hook: &mut EpochHook<'_>,
    ) -> Result<()> {
        if i >= self.modules.len() {
            return Err(CmrlError::Config(format!("module {i} does not exist")));
        }
        let prefix = if i == 0 {
            None
        } else {
            Some(self.hard_prefix(&corpus.train_frames, i)?)
        };
        let lr = self.config.learning_rate(i);
        let target = if self.config.rate_control_greedy {
            self.config.active_target_range()
        } else {
            None
        };
        let mut opt = [Adam::new(self.modules[i].len())];
        for epoch in 0..self.config.epochs_per_module {
            let alpha = self.config.alpha.at(epoch);
            self.modules[i].alpha = alpha;
            let context = format!("module {} epoch {}", i + 1, epoch + 1);
            let (loss, hard_entropy) = self.run_epoch(
                &corpus.train_frames,
                prefix.as_deref(),
                i..i + 1,
                &mut opt,
                lr,
                target,
                ((i as u64 + 1) << 32) | epoch as u64,
                &context,
            )?;
            let log = EpochLog {
                phase: Phase::Greedy(i),
                epoch: epoch + 1,
                steps: self.steps,
                loss,
                lambda_entropy: self.lambda,
                alpha,
                hard_entropy,
                val_mse: None,
                val_snr_db: None,
            };
            self.log_epoch(log, corpus, hook)?;
        }
        Ok(())
    }

    /// Jointly trains all modules. With rate control on, runs until the
    /// epoch's hard entropy lies in the target window (after at least
    /// `finetune_min_epochs`) and fails with `RateControl` if
    /// `finetune_max_epochs` pass first. Without it, runs exactly
    /// `finetune_min_epochs` epochs.
    pub fn finetune(
        &mut self,
        corpus: &PreparedCorpus,
        hook: &mut EpochHook<'_>,
    ) -> Result<FinetuneReport> {
        let target = self.config.active_target_range();
        let max_epochs = if target.is_some() {
            self.config.finetune_max_epochs
        } else {
            self.config.finetune_min_epochs
        };
        let mut opts: Vec<Adam<f32>> = self.modules.iter().map(|m| Adam::new(m.len())).collect();
        let lr = self.config.finetune_lr;
        let n = self.modules.len();
        let mut report = FinetuneReport {
            epochs: 0,
            entropy: f64::NAN,
            lambda_entropy: self.lambda,
            in_range: target.is_none(),
        };
        for epoch in 0..max_epochs {
            let alpha = self.config.alpha.at(self.config.epochs_per_module + epoch);
            self.modules.iter_mut().for_each(|m| m.alpha = alpha);
            let context = format!("finetune epoch {}", epoch + 1);
            let (loss, entropy) = self.run_epoch(
                &corpus.train_frames,
                None,
                0..n,
                &mut opts,
                lr,
                target,
                (0xf1u64 << 32) | epoch as u64,
                &context,
            )?;
            let in_range = target.is_none_or(|(lo, hi)| (lo..=hi).contains(&entropy));
            report = FinetuneReport {
                epochs: epoch + 1,
                entropy,
                lambda_entropy: self.lambda,
                in_range,
            };
            let log = EpochLog {
                phase: Phase::Finetune,
                epoch: epoch + 1,
                steps: self.steps,
                loss,
                lambda_entropy: self.lambda,
                alpha,
                hard_entropy: entropy,
                val_mse: None,
                val_snr_db: None,
            };
            self.log_epoch(log, corpus, hook)?;
            if target.is_some() && in_range && epoch + 1 >= self.config.finetune_min_epochs {
                return Ok(report);
            }
        }
        match target {
            Some((lo, hi)) if !report.in_range => Err(CmrlError::RateControl(format!(
                "entropy {:.4} bits/symbol outside [{lo:.4}, {hi:.4}] after {} finetune epochs; \
                 lambda_entropy={:.4e}, clamp [{:.0e}, {:.0e}]",
                report.entropy,
                report.epochs,
                self.lambda,
                self.config.rate.min,
                self.config.rate.max
            ))),
            _ => Ok(report),
        }
    }

    /// Packages the current modules with Huffman tables fitted on the hard
    /// symbols of the training frames.
    pub fn to_model(&self, corpus: &PreparedCorpus) -> Result<CmrlModel> {
        let symbols: Vec<Vec<Vec<u16>>> = corpus
            .train_frames
            .par_iter()
            .map(|f| cascade_encode(&self.modules, f).map(|c| c.symbols))
            .collect::<Result<_>>()?;
        let mut per_module = vec![Vec::with_capacity(symbols.len()); self.modules.len()];
        for frame in symbols {
            for (dst, s) in per_module.iter_mut().zip(frame) {
                dst.push(s);
            }
        }
        let mut model = CmrlModel {
            modules: self.modules.clone(),
            scale: self.scale,
            lpc: self.config.lpc,
            mode: self.config.mode,
            coding: self.config.mode.coding(),
            tables: Vec::new(),
            loss: self.weights(),
        };
        model.fit_tables(&per_module)?;
        Ok(model)
    }
}

/// Full schedule: greedy training of every module, then finetuning.
pub fn train(
    config: TrainConfig,
    corpus: &PreparedCorpus,
    hook: &mut EpochHook<'_>,
) -> Result<(CmrlModel, Trainer)> {
    let mut trainer = Trainer::new(config, corpus)?;
    for i in 0..trainer.modules.len() {
        trainer.greedy_train(corpus, i, hook)?;
    }
    trainer.finetune(corpus, hook)?;
    Ok((trainer.to_model(corpus)?, trainer))
}

/// A single module with the width of the first reference module, as many
/// code symbols per frame as the whole cascade, and the number of bottleneck
/// blocks that brings its trainable-scalar count closest to the cascade's.
pub fn matched_single_module(reference: &[ModuleConfig]) -> Result<ModuleConfig> {
    let first = *reference
        .first()
        .ok_or_else(|| CmrlError::Config("no reference modules".into()))?;
    let target: usize = reference
        .iter()
        .map(|c| ModuleParams::<f32>::zeros(*c).map(|m| m.param_count().total()))
        .sum::<Result<usize>>()?;
    let symbols: usize = reference.iter().map(|c| c.code_len()).sum();
    let stride = first.stride;
    let per_channel = crate::framing::FRAME_LEN / stride;
    if symbols % per_channel != 0 {
        return Err(CmrlError::Config(format!(
            "{symbols} symbols cannot come from stride {stride}"
        )));
    }
    let code_channels = symbols / per_channel;
    let mut best: Option<(usize, ModuleConfig)> = None;
    for blocks in 1..=4 * first.blocks + 4 {
        let cfg = ModuleConfig {
            blocks,
            code_channels,
            ..first
        };
        let gap = ModuleParams::<f32>::zeros(cfg)?
            .param_count()
            .total()
            .abs_diff(target);
        if best.is_none_or(|(g, _)| gap < g) {
            best = Some((gap, cfg));
        }
    }
    Ok(best.expect("at least one candidate").1)
}

/// Mean hard-path validation MSE of `modules`, or training MSE when the
/// corpus has no validation split.
pub fn validation_mse(trainer: &Trainer, corpus: &PreparedCorpus) -> Result<f64> {
    if corpus.validation_frames.is_empty() {
        trainer.hard_mse(&corpus.train_frames)
    } else {
        trainer.hard_mse(&corpus.validation_frames)
    }
}

/// Utterance-level SNR of the current modules over a set of signals.
pub fn corpus_snr(trainer: &Trainer, audio: &[Vec<f64>]) -> Result<f64> {
    let mut reference = Vec::new();
    let mut decoded = Vec::new();
    for x in audio {
        decoded.extend(reconstruct(
            trainer.modules(),
            trainer.scale(),
            trainer.config().lpc,
            x,
        )?);
        reference.extend_from_slice(x);
    }
    snr_db(&reference, &decoded)
}

/// MSE between utterances and their hard-path reconstructions.
pub fn corpus_mse(trainer: &Trainer, audio: &[Vec<f64>]) -> Result<f64> {
    let mut reference = Vec::new();
    let mut decoded = Vec::new();
    for x in audio {
        decoded.extend(reconstruct(
            trainer.modules(),
            trainer.scale(),
            trainer.config().lpc,
            x,
        )?);
        reference.extend_from_slice(x);
    }
    mse(&reference, &decoded)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::corpus;

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            module: ModuleConfig {
                channels: 4,
                bottleneck: 2,
                taps: 3,
                stride: 2,
                code_channels: 1,
                blocks: 1,
                slope: 0.2,
            },
            epochs_per_module: 1,
            batch_size: 8,
            learning_rates: vec![1e-3],
            finetune_lr: 1e-3,
            rate_control: false,
            validation_fraction: 0.25,
            ..TrainConfig::default()
        }
    }

    fn tiny_corpus(lpc: bool) -> PreparedCorpus {
        prepare_corpus(&corpus(11, 4, 0.25), lpc, 0.25, 0).unwrap()
    }

    #[test]
    fn split_is_by_file_and_deterministic() {
        let c = tiny_corpus(false);
        assert_eq!(c.validation_audio.len(), 1);
        assert!(!c.train_frames.is_empty() && !c.validation_frames.is_empty());
        let again = tiny_corpus(false);
        assert_eq!(c.train_frames, again.train_frames);
        assert!(matches!(
            prepare_corpus(&[], false, 0.1, 0),
            Err(CmrlError::Corpus(_))
        ));
        // unit variance of the training frames' source signal
        let all: Vec<f64> = c.train_frames.iter().flatten().map(|&v| v as f64).collect();
        let var = all.iter().map(|v| v * v).sum::<f64>() / all.len() as f64;
        assert!(var > 0.3 && var < 1.5, "{var}");
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let c = tiny_corpus(false);
        let cfg = TrainConfig {
            learning_rates: vec![0.0],
            finetune_lr: 0.0,
            finetune_min_epochs: 1,
            ..tiny_config()
        };
        let mut t = Trainer::new(cfg, &c).unwrap();
        let before: Vec<Vec<f32>> = t.modules().iter().map(|m| m.flat().to_vec()).collect();
        t.greedy_train(&c, 0, &mut |_, _| Ok(())).unwrap();
        t.finetune(&c, &mut |_, _| Ok(())).unwrap();
        for (m, b) in t.modules().iter().zip(&before) {
            assert_eq!(m.flat(), b.as_slice());
        }
    }

    #[test]
    fn greedy_freezes_earlier_modules() {
        let c = tiny_corpus(true);
        let cfg = TrainConfig {
            lpc: true,
            ..tiny_config()
        };
        let mut t = Trainer::new(cfg, &c).unwrap();
        t.greedy_train(&c, 0, &mut |_, _| Ok(())).unwrap();
        let first = t.modules()[0].flat().to_vec();
        t.greedy_train(&c, 1, &mut |_, _| Ok(())).unwrap();
        assert_eq!(t.modules()[0].flat(), first.as_slice());
        assert_eq!(t.logs().len(), 2);
        assert!(t.logs()[1].val_snr_db.is_some());
    }

    #[test]
    fn runs_are_reproducible() {
        let c = tiny_corpus(false);
        let run = || train(tiny_config(), &c, &mut |_, _| Ok(())).unwrap().0;
        assert_eq!(run(), run());
    }

    #[test]
    fn divergence_is_reported() {
        let c = tiny_corpus(false);
        let mut t = Trainer::new(tiny_config(), &c).unwrap();
        t.modules_mut()[0].flat_mut()[0] = f32::NAN;
        assert!(matches!(
            t.greedy_train(&c, 0, &mut |_, _| Ok(())),
            Err(CmrlError::Divergence(_))
        ));
    }

    #[test]
    fn log_line_is_key_value() {
        let c = tiny_corpus(false);
        let mut lines = Vec::new();
        train(tiny_config(), &c, &mut |l, _| {
            lines.push(l.to_kv());
            Ok(())
        })
        .unwrap();
        assert_eq!(lines.len(), 3);
        for line in &lines {
            assert!(!line.contains('\n'));
            for field in line.split(' ') {
                let (k, v) = field.split_once('=').unwrap();
                assert!(!k.is_empty() && !v.is_empty());
            }
        }
        assert!(lines[2].starts_with("phase=finetune"));
    }

    #[test]
    fn rate_control_failure_is_diagnosed() {
        let c = tiny_corpus(false);
        let cfg = TrainConfig {
            rate_control: true,
            target_range: Some((0.0, 1e-9)),
            finetune_max_epochs: 2,
            rate_interval: 1,
            learning_rates: vec![0.0],
            finetune_lr: 0.0,
            ..tiny_config()
        };
        let mut t = Trainer::new(cfg, &c).unwrap();
        let l0 = t.lambda_entropy();
        let err = t.finetune(&c, &mut |_, _| Ok(())).unwrap_err();
        assert!(matches!(err, CmrlError::RateControl(_)));
        assert!(t.lambda_entropy() > l0);
    }

    #[test]
    fn matched_baseline_is_close() {
        let total = |c: ModuleConfig| ModuleParams::<f32>::zeros(c).unwrap().param_count().total();
        let gap = |got: usize, target: usize| (got as f64 - target as f64).abs() / target as f64;

        let refs = [ModuleConfig::table1(2), ModuleConfig::table1(2)];
        let b = matched_single_module(&refs).unwrap();
        assert_eq!(b.code_len(), 512);
        assert_eq!((b.channels, b.bottleneck, b.blocks), (100, 20, 5));
        assert!(gap(total(b), 2 * total(refs[0])) < 0.05);

        let small = ModuleConfig {
            channels: 8,
            bottleneck: 2,
            taps: 9,
            stride: 2,
            code_channels: 1,
            blocks: 1,
            slope: 0.2,
        };
        let b = matched_single_module(&[small, small]).unwrap();
        assert_eq!(b.code_channels, 2);
        assert!(
            gap(total(b), 2 * total(small)) < 0.05,
            "{} vs {}",
            total(b),
            2 * total(small)
        );
    }

    #[test]
    fn weighted_entropy_cases() {
        let uniform = vec![1u64; 32];
        let constant = {
            let mut h = vec![0u64; 32];
            h[3] = 10;
            h
        };
        assert!((weighted_entropy(&[uniform.clone()], &[256]) - 5.0).abs() < 1e-12);
        assert!(
            (weighted_entropy(&[uniform, constant], &[256, 128]) - 5.0 * 2.0 / 3.0).abs() < 1e-12
        );
    }
}
