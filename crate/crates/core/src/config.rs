//! Bitrate modes, loss weights and training hyperparameters.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::entropy::{target_bits_per_symbol, CodingMode, RateController};
use crate::error::{CmrlError, Result};
use crate::module::ModuleConfig;
use crate::quantizer::AlphaSchedule;

/// The four operating points of the two-module codec.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum BitrateMode {
    Kbps8_85,
    Kbps15_85,
    Kbps19_85,
    Kbps23_85,
}

impl BitrateMode {
    pub const ALL: [BitrateMode; 4] = [
        BitrateMode::Kbps8_85,
        BitrateMode::Kbps15_85,
        BitrateMode::Kbps19_85,
        BitrateMode::Kbps23_85,
    ];

    pub fn bps(self) -> f64 {
        match self {
            BitrateMode::Kbps8_85 => 8_850.0,
            BitrateMode::Kbps15_85 => 15_850.0,
            BitrateMode::Kbps19_85 => 19_850.0,
            BitrateMode::Kbps23_85 => 23_850.0,
        }
    }

    /// Downsampling stride of each module; the lowest rate halves the
    /// second module's code again.
    pub fn strides(self) -> [usize; 2] {
        match self {
            BitrateMode::Kbps8_85 => [2, 4],
            _ => [2, 2],
        }
    }

    pub fn coding(self) -> CodingMode {
        match self {
            BitrateMode::Kbps8_85 => CodingMode::Pair,
            _ => CodingMode::Single,
        }
    }

    /// Bits per symbol that hits the nominal rate exactly.
    pub fn target_bits(self, lpc: bool) -> f64 {
        target_bits_per_symbol(self.bps(), &self.strides(), lpc)
    }

    /// Default entropy window: from 85% of the target up to the target.
    pub fn target_range(self, lpc: bool) -> (f64, f64) {
        let c = self.target_bits(lpc);
        (0.85 * c, c)
    }

    pub fn code(self) -> u8 {
        match self {
            BitrateMode::Kbps8_85 => 0,
            BitrateMode::Kbps15_85 => 1,
            BitrateMode::Kbps19_85 => 2,
            BitrateMode::Kbps23_85 => 3,
        }
    }

    pub fn from_code(c: u8) -> Result<Self> {
        Self::ALL
            .get(c as usize)
            .copied()
            .ok_or_else(|| CmrlError::Config(format!("unknown bitrate mode code {c}")))
    }
}

impl fmt::Display for BitrateMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            BitrateMode::Kbps8_85 => "8.85",
            BitrateMode::Kbps15_85 => "15.85",
            BitrateMode::Kbps19_85 => "19.85",
            BitrateMode::Kbps23_85 => "23.85",
        };
        f.write_str(s)
    }
}

impl FromStr for BitrateMode {
    type Err = CmrlError;
    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().trim_end_matches("kbps").trim();
        Self::ALL
            .iter()
            .copied()
            .find(|m| m.to_string() == t)
            .ok_or_else(|| {
                CmrlError::Config(format!(
                    "bitrate mode must be one of 8.85, 15.85, 19.85, 23.85; got {s:?}"
                ))
            })
    }
}

impl TryFrom<String> for BitrateMode {
    type Error = CmrlError;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<BitrateMode> for String {
    fn from(m: BitrateMode) -> String {
        m.to_string()
    }
}

/// Weights of the regularizers added to the reconstruction error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub perceptual: f64,
    pub quantization: f64,
    pub entropy: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            perceptual: 0.1,
            quantization: 0.5,
            entropy: 0.05,
        }
    }
}

/// Everything the trainer needs. Defaults follow the published schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: BitrateMode,
    pub lpc: bool,
    pub seed: u64,
    /// Topology shared by all modules; strides come from `mode`.
    pub module: ModuleConfig,
    pub modules: usize,
    pub epochs_per_module: usize,
    pub batch_size: usize,
    /// Greedy learning rate per module; the last entry repeats.
    pub learning_rates: Vec<f64>,
    pub finetune_lr: f64,
    pub finetune_min_epochs: usize,
    pub finetune_max_epochs: usize,
    pub loss: LossWeights,
    pub alpha: AlphaSchedule,
    pub rate: RateController,
    /// Steer the entropy weight toward the target window.
    pub rate_control: bool,
    /// Entropy window in bits/symbol; defaults to the mode's window.
    pub target_range: Option<(f64, f64)>,
    /// Batches between rate-controller updates.
    pub rate_interval: usize,
    /// Also steer the entropy weight while training modules greedily.
    pub rate_control_greedy: bool,
    /// Fraction of utterances held out for validation.
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let mode = BitrateMode::Kbps23_85;
        Self {
            mode,
            lpc: false,
            seed: 0,
            module: ModuleConfig::table1(2),
            modules: 2,
            epochs_per_module: 30,
            batch_size: 128,
            learning_rates: vec![1e-4, 2e-5],
            finetune_lr: 2e-5,
            finetune_min_epochs: 1,
            finetune_max_epochs: 50,
            loss: LossWeights::default(),
            alpha: AlphaSchedule::default(),
            rate: RateController::default(),
            rate_control: true,
            target_range: None,
            rate_interval: 20,
            rate_control_greedy: true,
            validation_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    /// Default config for a bitrate mode and input type.
    pub fn for_mode(mode: BitrateMode, lpc: bool) -> Self {
        Self {
            mode,
            lpc,
            ..Self::default()
        }
    }

    /// Entropy window the rate controller aims for, if it is enabled.
    pub fn active_target_range(&self) -> Option<(f64, f64)> {
        self.rate_control.then(|| {
            self.target_range
                .unwrap_or_else(|| self.mode.target_range(self.lpc))
        })
    }

    pub fn module_config(&self, i: usize) -> ModuleConfig {
        let strides = self.mode.strides();
        ModuleConfig {
            stride: strides[i.min(strides.len() - 1)],
            ..self.module
        }
    }

    pub fn learning_rate(&self, i: usize) -> f64 {
        self.learning_rates[i.min(self.learning_rates.len() - 1)]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CmrlError::Config(m));
        if self.modules == 0 {
            return bad("at least one module is required".into());
        }
        for i in 0..self.modules {
            self.module_config(i).validate()?;
        }
        if self.batch_size == 0 || self.rate_interval == 0 {
            return bad("batch size and rate interval must be positive".into());
        }
        if self.learning_rates.is_empty()
            || self
                .learning_rates
                .iter()
                .chain([&self.finetune_lr])
                .any(|&r| !(r >= 0.0))
        {
            return bad("learning rates must be non-negative".into());
        }
        if self.finetune_min_epochs > self.finetune_max_epochs {
            return bad("finetune_min_epochs exceeds finetune_max_epochs".into());
        }
        let w = self.loss;
        if [w.perceptual, w.quantization, w.entropy]
            .iter()
            .any(|&v| !(v >= 0.0))
        {
            return bad("loss weights must be non-negative".into());
        }
        if !(self.alpha.initial > 0.0
            && self.alpha.growth >= 1.0
            && self.alpha.max >= self.alpha.initial)
        {
            return bad("alpha schedule must start positive and not shrink".into());
        }
        if let Some((lo, hi)) = self.target_range {
            if !(lo >= 0.0 && hi > lo) {
                return bad(format!("target range ({lo}, {hi}) is empty"));
            }
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad("validation_fraction must lie in [0, 1)".into());
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| CmrlError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| CmrlError::Config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_modes() {
        for m in BitrateMode::ALL {
            assert_eq!(m.to_string().parse::<BitrateMode>().unwrap(), m);
            assert_eq!(BitrateMode::from_code(m.code()).unwrap(), m);
        }
        assert_eq!(
            "23.85kbps".parse::<BitrateMode>().unwrap(),
            BitrateMode::Kbps23_85
        );
        assert!("24".parse::<BitrateMode>().is_err());
    }

    #[test]
    fn targets_hit_nominal_rates() {
        use crate::entropy::module_bitrate;
        use crate::lpc::side_info_bps;
        for m in BitrateMode::ALL {
            for lpc in [false, true] {
                let c = m.target_bits(lpc);
                let total: f64 = m
                    .strides()
                    .iter()
                    .map(|&d| module_bitrate(c, d))
                    .sum::<f64>()
                    + if lpc { side_info_bps() } else { 0.0 };
                assert!((total - m.bps()).abs() < 1e-6);
            }
        }
        assert!((BitrateMode::Kbps23_85.target_bits(false) - 1.397_46).abs() < 1e-4);
        assert!((BitrateMode::Kbps8_85.target_bits(true) - 0.503_91).abs() < 1e-4);
    }

    #[test]
    fn defaults_follow_schedule() {
        let c = TrainConfig::default();
        assert_eq!(c.epochs_per_module, 30);
        assert_eq!(c.batch_size, 128);
        assert_eq!(c.learning_rates, vec![1e-4, 2e-5]);
        assert_eq!(c.finetune_lr, 2e-5);
        c.validate().unwrap();
    }

    #[test]
    fn toml_round_trip_and_overrides() {
        let c = TrainConfig::for_mode(BitrateMode::Kbps8_85, true);
        let back = TrainConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.module_config(1).stride, 4);
        let partial = TrainConfig::from_toml("mode = \"15.85\"\nepochs_per_module = 3\n").unwrap();
        assert_eq!(partial.mode, BitrateMode::Kbps15_85);
        assert_eq!(partial.epochs_per_module, 3);
        assert!(TrainConfig::from_toml("bogus = 1").is_err());
        assert!(TrainConfig::from_toml("batch_size = 0").is_err());
    }
}
