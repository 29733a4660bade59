//! Run configuration: optional JSON file plus command-line flags, flags
//! winning on conflict. The fully resolved configuration is echoed into every
//! artifact directory as `effective_config.json`, which can itself be passed
//! back via `--config` to reproduce a run.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use baa_core::data::SplitSpec;
use baa_core::engine::{AdamParams, TrainConfig};
use baa_core::models::{backbone_spec, BackboneId, HeadConfig, Regime};
use baa_core::transforms::{AugmentParams, FillPolicy, PreprocessSpec, Scaling, TransformConfig};

/// Keys accepted in a `--config` file. Unknown keys are rejected.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub csv: Option<PathBuf>,
    pub images: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub backbone: Option<String>,
    pub regime: Option<String>,
    pub strict: Option<bool>,

    pub epochs: Option<usize>,
    pub patience: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub seed: Option<u64>,
    pub min_delta: Option<f64>,
    pub adam_beta1: Option<f64>,
    pub adam_beta2: Option<f64>,
    pub adam_epsilon: Option<f64>,

    pub train_size: Option<usize>,
    pub val_size: Option<usize>,
    pub test_size: Option<usize>,

    pub dropout_rate: Option<f64>,
    pub batchnorm_epsilon: Option<f64>,
    pub batchnorm_momentum: Option<f64>,

    pub target_height: Option<usize>,
    pub target_width: Option<usize>,
    /// `unit_interval`, `symmetric`, or `mean_subtracted` (which requires
    /// `channel_means`).
    pub scaling: Option<String>,
    pub channel_means: Option<[f64; 3]>,

    pub flip_probability: Option<f64>,
    pub shear_max: Option<f64>,
    pub zoom_lo: Option<f64>,
    pub zoom_hi: Option<f64>,
    pub rotation_max: Option<f64>,

    pub weights_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_slice(&raw)
            .with_context(|| format!("parsing config {}", path.display()))
    }

    /// Overlay `other` on top of `self`: any value set in `other` wins.
    pub fn overlay(mut self, other: RunConfig) -> RunConfig {
        macro_rules! take {
            ($($field:ident),* $(,)?) => {
                $(if other.$field.is_some() { self.$field = other.$field; })*
            };
        }
        take!(
            csv, images, out, backbone, regime, strict, epochs, patience, batch_size, lr, seed,
            min_delta, adam_beta1, adam_beta2, adam_epsilon, train_size, val_size, test_size,
            dropout_rate, batchnorm_epsilon, batchnorm_momentum, target_height, target_width,
            scaling, channel_means, flip_probability, shear_max, zoom_lo, zoom_hi, rotation_max,
            weights_dir,
        );
        self
    }
}

/// Fully resolved settings for a training or evaluation run.
#[derive(Debug, Clone)]
pub struct ResolvedRun {
    pub csv: PathBuf,
    pub images: PathBuf,
    pub out: PathBuf,
    pub backbone: BackboneId,
    pub regime: Regime,
    pub strict: bool,
    pub train: TrainConfig,
    pub split: SplitSpec,
    pub head: HeadConfig,
    pub transforms: TransformConfig,
    pub weights_dir: Option<PathBuf>,
}

impl ResolvedRun {
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        let Some(csv) = cfg.csv.clone() else {
            bail!("missing input manifest: pass --csv or set `csv` in the config file");
        };
        let Some(images) = cfg.images.clone() else {
            bail!("missing image directory: pass --images or set `images` in the config file");
        };
        let Some(backbone_name) = cfg.backbone.clone() else {
            bail!("missing backbone: pass --backbone or set `backbone` in the config file");
        };
        let backbone: BackboneId = backbone_name.parse()?;
        let regime: Regime = match &cfg.regime {
            Some(r) => r.parse().map_err(|e: String| anyhow::anyhow!(e))?,
            None => Regime::Full,
        };

        let defaults = TrainConfig::default();
        let train = TrainConfig {
            max_epochs: cfg.epochs.unwrap_or(defaults.max_epochs),
            patience: cfg.patience.unwrap_or(defaults.patience),
            batch_size: cfg.batch_size.unwrap_or(defaults.batch_size),
            learning_rate: cfg.lr.unwrap_or(defaults.learning_rate),
            adam: AdamParams {
                beta1: cfg.adam_beta1.unwrap_or(defaults.adam.beta1),
                beta2: cfg.adam_beta2.unwrap_or(defaults.adam.beta2),
                epsilon: cfg.adam_epsilon.unwrap_or(defaults.adam.epsilon),
            },
            seed: cfg.seed.unwrap_or(defaults.seed),
            min_delta: cfg.min_delta.unwrap_or(defaults.min_delta),
        };
        train.validate().map_err(|e| anyhow::anyhow!(e))?;

        let split = SplitSpec {
            train: cfg.train_size.unwrap_or(6000),
            val: cfg.val_size.unwrap_or(2000),
            test: cfg.test_size.unwrap_or(200),
        };

        let head_defaults = HeadConfig::default();
        let head = HeadConfig {
            dropout_rate: cfg.dropout_rate.unwrap_or(head_defaults.dropout_rate),
            batchnorm_epsilon: cfg.batchnorm_epsilon.unwrap_or(head_defaults.batchnorm_epsilon),
            batchnorm_momentum: cfg
                .batchnorm_momentum
                .unwrap_or(head_defaults.batchnorm_momentum),
        };
        head.validate().map_err(|e| anyhow::anyhow!(e))?;

        let registry_preprocess = backbone_spec(backbone).input_spec;
        let scaling = match cfg.scaling.as_deref() {
            None => registry_preprocess.scaling,
            Some("unit_interval") => Scaling::UnitInterval,
            Some("symmetric") => Scaling::Symmetric,
            Some("mean_subtracted") => match cfg.channel_means {
                Some(means) => Scaling::MeanSubtracted(means),
                None => bail!("scaling `mean_subtracted` requires `channel_means`"),
            },
            Some(other) => bail!(
                "unknown scaling `{other}` (expected unit_interval|symmetric|mean_subtracted)"
            ),
        };
        let preprocess = PreprocessSpec::new(
            cfg.target_height.unwrap_or(registry_preprocess.target_height),
            cfg.target_width.unwrap_or(registry_preprocess.target_width),
            scaling,
        );

        let aug_defaults = AugmentParams::default();
        let augment = AugmentParams {
            flip_probability: cfg.flip_probability.unwrap_or(aug_defaults.flip_probability),
            shear_max: cfg.shear_max.unwrap_or(aug_defaults.shear_max),
            zoom_range: (
                cfg.zoom_lo.unwrap_or(aug_defaults.zoom_range.0),
                cfg.zoom_hi.unwrap_or(aug_defaults.zoom_range.1),
            ),
            rotation_max: cfg.rotation_max.unwrap_or(aug_defaults.rotation_max),
            fill_policy: FillPolicy::Nearest,
        };
        augment.validate().map_err(|e| anyhow::anyhow!(e))?;

        Ok(Self {
            csv,
            images,
            out: cfg.out.clone().unwrap_or_else(|| PathBuf::from("runs")),
            backbone,
            regime,
            strict: cfg.strict.unwrap_or(false),
            train,
            split,
            head,
            transforms: TransformConfig { preprocess, augment },
            weights_dir: cfg.weights_dir.clone(),
        })
    }

    /// The fully populated configuration this run is equivalent to; feeding
    /// it back through `--config` reproduces the run.
    pub fn effective_config(&self) -> RunConfig {
        let (scaling, channel_means) = match self.transforms.preprocess.scaling {
            Scaling::UnitInterval => ("unit_interval".to_string(), None),
            Scaling::Symmetric => ("symmetric".to_string(), None),
            Scaling::MeanSubtracted(means) => ("mean_subtracted".to_string(), Some(means)),
        };
        RunConfig {
            csv: Some(self.csv.clone()),
            images: Some(self.images.clone()),
            out: Some(self.out.clone()),
            backbone: Some(self.backbone.to_string()),
            regime: Some(self.regime.to_string()),
            strict: Some(self.strict),
            epochs: Some(self.train.max_epochs),
            patience: Some(self.train.patience),
            batch_size: Some(self.train.batch_size),
            lr: Some(self.train.learning_rate),
            seed: Some(self.train.seed),
            min_delta: Some(self.train.min_delta),
            adam_beta1: Some(self.train.adam.beta1),
            adam_beta2: Some(self.train.adam.beta2),
            adam_epsilon: Some(self.train.adam.epsilon),
            train_size: Some(self.split.train),
            val_size: Some(self.split.val),
            test_size: Some(self.split.test),
            dropout_rate: Some(self.head.dropout_rate),
            batchnorm_epsilon: Some(self.head.batchnorm_epsilon),
            batchnorm_momentum: Some(self.head.batchnorm_momentum),
            target_height: Some(self.transforms.preprocess.target_height),
            target_width: Some(self.transforms.preprocess.target_width),
            scaling: Some(scaling),
            channel_means,
            flip_probability: Some(self.transforms.augment.flip_probability),
            shear_max: Some(self.transforms.augment.shear_max),
            zoom_lo: Some(self.transforms.augment.zoom_range.0),
            zoom_hi: Some(self.transforms.augment.zoom_range.1),
            rotation_max: Some(self.transforms.augment.rotation_max),
            weights_dir: self.weights_dir.clone(),
        }
    }
}

/// Write `effective_config.json` into an artifact directory.
pub fn write_effective_config(config: &RunConfig, dir: &Path) -> Result<PathBuf> {
    let path = dir.join("effective_config.json");
    let bytes = serde_json::to_vec_pretty(config)?;
    fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> RunConfig {
        RunConfig {
            csv: Some("data.csv".into()),
            images: Some("imgs".into()),
            backbone: Some("tiny_test".into()),
            ..RunConfig::default()
        }
    }

    #[test]
    fn defaults_follow_training_protocol() {
        let run = ResolvedRun::from_config(&minimal()).unwrap();
        assert_eq!(run.train.max_epochs, 15);
        assert_eq!(run.train.patience, 10);
        assert_eq!(run.train.batch_size, 32);
        assert_eq!(run.train.learning_rate, 1e-3);
        assert_eq!(run.split, SplitSpec { train: 6000, val: 2000, test: 200 });
        assert_eq!(run.regime, Regime::Full);
        assert_eq!(run.transforms.preprocess.target_height, 32);
    }

    #[test]
    fn overlay_prefers_later_values() {
        let base = minimal();
        let over = RunConfig {
            epochs: Some(3),
            backbone: Some("mobilenet".into()),
            ..RunConfig::default()
        };
        let merged = base.overlay(over);
        assert_eq!(merged.epochs, Some(3));
        assert_eq!(merged.backbone.as_deref(), Some("mobilenet"));
        assert_eq!(merged.csv.as_deref(), Some(Path::new("data.csv")));
    }

    #[test]
    fn unknown_config_keys_rejected() {
        let err = serde_json::from_str::<RunConfig>(r#"{"learning_rate": 0.1}"#).unwrap_err();
        assert!(err.to_string().contains("unknown field"));
    }

    #[test]
    fn effective_config_round_trips() {
        let mut cfg = minimal();
        cfg.epochs = Some(7);
        cfg.regime = Some("frozen".into());
        let run = ResolvedRun::from_config(&cfg).unwrap();
        let echo = run.effective_config();
        let json = serde_json::to_string(&echo).unwrap();
        let reread: RunConfig = serde_json::from_str(&json).unwrap();
        let rerun = ResolvedRun::from_config(&reread).unwrap();
        assert_eq!(rerun.train, run.train);
        assert_eq!(rerun.regime, run.regime);
        assert_eq!(rerun.transforms, run.transforms);
        assert_eq!(rerun.split, run.split);
    }

    #[test]
    fn mean_subtracted_requires_means() {
        let mut cfg = minimal();
        cfg.scaling = Some("mean_subtracted".into());
        assert!(ResolvedRun::from_config(&cfg).is_err());
        cfg.channel_means = Some([1.0, 2.0, 3.0]);
        let run = ResolvedRun::from_config(&cfg).unwrap();
        assert_eq!(
            run.transforms.preprocess.scaling,
            Scaling::MeanSubtracted([1.0, 2.0, 3.0])
        );
    }
}
