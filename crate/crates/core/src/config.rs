//! Run configuration: a scale preset, overlaid by an optional TOML file,
//! overlaid by command-line flags.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::AugmentationConfig;
use crate::error::{Error, Result};
use crate::layout::EmbeddingLayout;
use crate::losses::LossWeights;
use crate::model::{BackboneConfig, Scale};
use crate::optim::OptimizerConfig;
use crate::resolution::ratios_from_rates;
use crate::retrieval::EvalOptions;
use crate::state::ModelSpec;
use crate::training::{Ablation, TrainMode, TrainOptions, TrainingStagePlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// Sub-vector lengths `d_1..d_m`; must have one entry per resolution level.
    pub layout: Vec<usize>,
    pub verifier_hidden: usize,
    pub classifier_init_std: f64,
    pub mask_init_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    /// Down-sampling rates synthesized for training; level count is
    /// `rates.len() + 1`.
    pub rates: Vec<u32>,
    /// Epochs of each progressive stage; empty splits `optimizer.epochs`
    /// evenly.
    pub stage_epochs: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub optimizer: OptimizerConfig,
    pub train: TrainConfig,
    pub augment: AugmentationConfig,
    pub ablation: Ablation,
    pub eval: EvalOptions,
}

impl RunConfig {
    pub fn preset(scale: Scale) -> Self {
        let rates = vec![2, 3, 4];
        let levels = rates.len() + 1;
        match scale {
            Scale::Desk => {
                let backbone = BackboneConfig::desk();
                let dim = 64;
                Self {
                    seed: 0,
                    precision: Precision::F32,
                    augment: AugmentationConfig {
                        target_height: backbone.input_height,
                        target_width: backbone.input_width,
                        pad_pixels: 2,
                        hflip_prob: 0.5,
                    },
                    model: ModelConfig {
                        backbone,
                        layout: vec![dim / levels; levels],
                        verifier_hidden: dim / 4,
                        classifier_init_std: 3.0,
                        mask_init_std: 0.1,
                    },
                    loss: LossWeights::default(),
                    optimizer: OptimizerConfig {
                        base_lr: 2e-3,
                        epochs: 40,
                        batch_size: 16,
                        decay_epochs: vec![26, 33],
                        warmup_epochs: 1,
                        grad_clip: Some(5.0),
                        ..OptimizerConfig::default()
                    },
                    train: TrainConfig {
                        mode: TrainMode::Progressive,
                        rates: rates.clone(),
                        stage_epochs: vec![],
                    },
                    ablation: Ablation::default(),
                    eval: EvalOptions {
                        rates,
                        ..EvalOptions::default()
                    },
                }
            }
            Scale::Full => {
                let backbone = BackboneConfig::full();
                let dim = 2048;
                Self {
                    seed: 0,
                    precision: Precision::F32,
                    augment: AugmentationConfig::default(),
                    model: ModelConfig {
                        backbone,
                        layout: vec![dim / levels; levels],
                        verifier_hidden: dim / 4,
                        classifier_init_std: 0.001,
                        mask_init_std: 0.1,
                    },
                    loss: LossWeights::default(),
                    optimizer: OptimizerConfig::default(),
                    train: TrainConfig {
                        mode: TrainMode::Progressive,
                        rates: rates.clone(),
                        stage_epochs: vec![],
                    },
                    ablation: Ablation::default(),
                    eval: EvalOptions {
                        rates,
                        ..EvalOptions::default()
                    },
                }
            }
        }
    }

    /// Overlay the keys present in `text` onto this configuration.
    pub fn merge_toml(&self, text: &str) -> Result<Self> {
        let overlay: toml::Table = toml::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))?;
        let mut base = toml::Table::try_from(self).map_err(|e| Error::Config(vec![e.to_string()]))?;
        merge(&mut base, overlay);
        toml::Value::Table(base)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(vec![e.to_string()]))
    }

    /// `preset`, then the file at `path` if given.
    pub fn load(scale: Scale, path: Option<&Path>) -> Result<Self> {
        let preset = Self::preset(scale);
        match path {
            Some(p) => preset.merge_toml(&std::fs::read_to_string(p)?),
            None => Ok(preset),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(vec![e.to_string()]))
    }

    /// Every problem with this configuration, not just the first.
    pub fn validate(&self) -> Vec<String> {
        let mut problems = self.model.backbone.validate();
        problems.extend(self.optimizer.validate());
        problems.extend(self.augment.validate());
        if let Err(e) = ratios_from_rates(&self.train.rates) {
            problems.push(format!("train.rates: {e}"));
        }
        let levels = self.levels();
        if self.model.layout.len() != levels {
            problems.push(format!(
                "model.layout has {} entries, {} resolution levels need one each",
                self.model.layout.len(),
                levels
            ));
        }
        if self.model.layout.iter().any(|&d| d == 0) {
            problems.push("model.layout entries must be positive".to_string());
        }
        if self.model.verifier_hidden == 0 {
            problems.push("model.verifier_hidden must be positive".to_string());
        }
        if !(self.model.mask_init_std >= 0.0) || !(self.model.classifier_init_std >= 0.0) {
            problems.push("initialization std must be >= 0".to_string());
        }
        if !(self.loss.lambda >= 0.0 && self.loss.lambda.is_finite()) {
            problems.push(format!("loss.lambda must be finite and >= 0, got {}", self.loss.lambda));
        }
        let blocks = self.model.backbone.blocks();
        if !self.train.stage_epochs.is_empty() {
            let expected = match self.train.mode {
                TrainMode::Progressive => blocks,
                TrainMode::EndToEnd => 1,
            };
            if self.train.stage_epochs.len() != expected {
                problems.push(format!(
                    "train.stage_epochs has {} entries, {} mode with {blocks} blocks needs {expected}",
                    self.train.stage_epochs.len(),
                    self.train.mode
                ));
            }
            if self.train.stage_epochs.iter().any(|&e| e == 0) {
                problems.push("train.stage_epochs entries must be >= 1".to_string());
            }
        } else if self.train.mode == TrainMode::Progressive && self.optimizer.epochs < blocks {
            problems.push(format!(
                "optimizer.epochs = {} cannot cover {blocks} progressive stages",
                self.optimizer.epochs
            ));
        }
        if self.augment.target_height != self.model.backbone.input_height
            || self.augment.target_width != self.model.backbone.input_width
        {
            problems.push("augment target size must equal the backbone input size".to_string());
        }
        if self.eval.trials == 0 {
            problems.push("eval.trials must be >= 1".to_string());
        }
        if self.eval.rates.is_empty() || self.eval.rates.iter().any(|&r| r == 0) {
            problems.push("eval.rates must be non-empty and positive".to_string());
        }
        if self.eval.ranks.iter().any(|&k| k == 0) {
            problems.push("eval.ranks are 1-based".to_string());
        }
        problems
    }

    pub fn validated(self) -> Result<Self> {
        let problems = self.validate();
        if problems.is_empty() {
            Ok(self)
        } else {
            Err(Error::Config(problems))
        }
    }

    pub fn levels(&self) -> usize {
        let mut rates: Vec<u32> = self.train.rates.iter().copied().filter(|&r| r > 1).collect();
        rates.sort_unstable();
        rates.dedup();
        rates.len() + 1
    }

    pub fn model_spec(&self, classes: usize) -> Result<ModelSpec> {
        Ok(ModelSpec {
            backbone: self.model.backbone.clone(),
            layout: EmbeddingLayout::new(self.model.layout.clone())?,
            classes,
            verifier_hidden: self.model.verifier_hidden,
            classifier_init_std: self.model.classifier_init_std,
            known_ratios: ratios_from_rates(&self.train.rates)?,
            varying_length: !self.ablation.no_val,
        })
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            optimizer: self.optimizer.clone(),
            loss: self.loss,
            augmentation: self.augment.clone(),
            ablation: self.ablation,
            mask_init_std: self.model.mask_init_std,
            seed: self.seed,
        }
    }

    pub fn stage_plan(&self) -> Result<TrainingStagePlan> {
        let blocks = self.model.backbone.blocks();
        if self.train.stage_epochs.is_empty() {
            return TrainingStagePlan::for_mode(self.train.mode, blocks, self.optimizer.epochs);
        }
        match self.train.mode {
            TrainMode::Progressive => TrainingStagePlan::progressive(&self.train.stage_epochs),
            TrainMode::EndToEnd => TrainingStagePlan::end_to_end(blocks, self.train.stage_epochs[0]),
        }
    }
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (key, value) in overlay {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

/// Documentation of every configuration key, shown by `--help`.
pub const CONFIG_KEYS: &str = "\
seed                          master seed for initialization, sampling and augmentation
precision                     f32 | f64
model.backbone.*              scale, input_height, input_width, stem_channels, stem_kernel,
                              stem_stride, block_channels, units_per_block, inner_strides, last_stride
model.layout                  sub-vector lengths, one per resolution level
model.verifier_hidden         hidden width of the verification head
model.classifier_init_std     std of the prototype classifier initialization
model.mask_init_std           std of the Gaussian mask initialization
loss.lambda                   weight of the verification loss
optimizer.*                   base_lr, beta1, beta2, eps, epochs, batch_size, decay_epochs,
                              decay_gamma, warmup_epochs, warmup_start_factor, grad_clip (0 = off)
train.mode                    progressive | end-to-end
train.rates                   training down-sampling rates
train.stage_epochs            epochs per stage (empty: split optimizer.epochs)
augment.*                     target_height, target_width, pad_pixels, hflip_prob
ablation.no_mask              disable resolution masks
ablation.no_val               use the full-length embedding at every level
eval.*                        rates, trials, master_seed, ranks, l2_normalize";

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        assert!(RunConfig::preset(Scale::Desk).validate().is_empty());
        assert!(RunConfig::preset(Scale::Full).validate().is_empty());
    }

    #[test]
    fn full_preset_keeps_reference_settings() {
        let c = RunConfig::preset(Scale::Full);
        assert_eq!(c.optimizer.base_lr, 3.5e-4);
        assert_eq!(c.optimizer.epochs, 120);
        assert_eq!(c.loss.lambda, 0.5);
        assert_eq!((c.augment.target_height, c.augment.target_width, c.augment.pad_pixels), (256, 128, 10));
        assert_eq!(c.model.layout.iter().sum::<usize>(), 2048);
    }

    #[test]
    fn toml_overlay_changes_only_given_keys() {
        let base = RunConfig::preset(Scale::Desk);
        let c = base.merge_toml("seed = 7\n[optimizer]\nbase_lr = 0.01\n").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.optimizer.base_lr, 0.01);
        assert_eq!(c.optimizer.epochs, base.optimizer.epochs);
        assert_eq!(c.model, base.model);
    }

    #[test]
    fn unknown_key_rejected() {
        let base = RunConfig::preset(Scale::Desk);
        assert!(matches!(base.merge_toml("[optimizer]\nlearning_rate = 1\n"), Err(Error::Config(_))));
    }

    #[test]
    fn validation_lists_every_problem() {
        let mut c = RunConfig::preset(Scale::Desk);
        c.model.layout = vec![8, 8];
        c.loss.lambda = -1.0;
        c.eval.trials = 0;
        let problems = c.validate();
        assert_eq!(problems.len(), 3, "{problems:?}");
    }

    #[test]
    fn round_trips_through_toml() {
        let c = RunConfig::preset(Scale::Full);
        let text = c.to_toml().unwrap();
        assert_eq!(RunConfig::preset(Scale::Desk).merge_toml(&text).unwrap(), c);
    }

    #[test]
    fn zero_clip_disables_clipping() {
        let desk = RunConfig::preset(Scale::Desk);
        assert!(desk.optimizer.grad_clip.is_some());
        let c = desk.merge_toml("[optimizer]\ngrad_clip = 0.0\n").unwrap();
        assert_eq!(c.optimizer.grad_clip, None);
    }
}
