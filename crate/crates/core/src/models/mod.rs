//! Backbone registry and the regression model: a feature-extractor stack with
//! the regression head (batch norm, global average pooling, dropout, single
//! linear output neuron) attached, trained under one of two regimes.
//!
//! The four ImageNet-pretrained backbones are pluggable: they load from a
//! weight blob in the weights directory and are never re-implemented here.
//! `tiny_test` is a small randomly initialized stack so the full pipeline can
//! run anywhere.

pub mod layers;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array1, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::transforms::{PreprocessSpec, Scaling, CHANNEL_COUNT};
use crate::util::mix_seed;
use layers::{
    read_stack, write_stack, write_string, BatchNorm, ByteReader, Conv2d, Dense, Dropout,
    ForwardCtx, GlobalAvgPool, Layer, MaxPool2, ParamView, Relu,
};

pub type ModelResult<T> = Result<T, ModelError>;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("unknown backbone `{0}`")]
    UnknownBackbone(String),
    #[error("pretrained weights for `{backbone}` unavailable at {path} (downloads are never attempted)")]
    WeightsUnavailable { backbone: String, path: PathBuf },
    #[error("input shape mismatch: expected (H,W,C)=({0},{1},{2}), got ({3},{4},{5})", expected.0, expected.1, expected.2, got.0, got.1, got.2)]
    ShapeMismatch {
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },
    #[error("empty batch")]
    EmptyBatch,
    #[error("backbone id mismatch in {context}: expected `{expected}`, found `{found}`")]
    BackboneMismatch {
        context: &'static str,
        expected: String,
        found: String,
    },
    #[error("feature channel mismatch for `{backbone}`: registry expects {expected}, blob provides {found}")]
    FeatureChannelMismatch {
        backbone: String,
        expected: usize,
        found: usize,
    },
    #[error("malformed weight blob: {0}")]
    MalformedBlob(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("sidecar error at {path}: {source}")]
    Sidecar {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

/// Registered feature extractors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneId {
    Vgg16,
    InceptionV3,
    MobileNet,
    Xception,
    TinyTest,
}

impl BackboneId {
    pub const ALL: [BackboneId; 5] = [
        BackboneId::Vgg16,
        BackboneId::InceptionV3,
        BackboneId::MobileNet,
        BackboneId::Xception,
        BackboneId::TinyTest,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            BackboneId::Vgg16 => "vgg16",
            BackboneId::InceptionV3 => "inception_v3",
            BackboneId::MobileNet => "mobilenet",
            BackboneId::Xception => "xception",
            BackboneId::TinyTest => "tiny_test",
        }
    }
}

impl fmt::Display for BackboneId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BackboneId {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        BackboneId::ALL
            .into_iter()
            .find(|id| id.as_str() == s)
            .ok_or_else(|| ModelError::UnknownBackbone(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretrainedSource {
    Imagenet,
    Random,
}

/// A registered backbone with its input convention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub id: BackboneId,
    pub input_spec: PreprocessSpec,
    pub feature_channels: usize,
    pub pretrained_source: PretrainedSource,
}

/// Trainability regime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    /// Every parameter trains, end to end.
    Full,
    /// The backbone is frozen (weights and batch-norm statistics); only the
    /// head trains.
    Frozen,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Full => "full",
            Regime::Frozen => "frozen",
        })
    }
}

impl FromStr for Regime {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(Regime::Full),
            "frozen" => Ok(Regime::Frozen),
            other => Err(format!("unknown regime `{other}` (expected full|frozen)")),
        }
    }
}

/// Regression head hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub dropout_rate: f64,
    pub batchnorm_epsilon: f64,
    pub batchnorm_momentum: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            dropout_rate: 0.5,
            batchnorm_epsilon: 1e-3,
            batchnorm_momentum: 0.99,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(format!("dropout_rate {} outside [0,1)", self.dropout_rate));
        }
        if self.batchnorm_epsilon <= 0.0 {
            return Err("batchnorm_epsilon must be positive".into());
        }
        if !(self.batchnorm_momentum > 0.0 && self.batchnorm_momentum < 1.0) {
            return Err(format!(
                "batchnorm_momentum {} outside (0,1)",
                self.batchnorm_momentum
            ));
        }
        Ok(())
    }
}

/// Input side length of the `tiny_test` backbone.
pub const TINY_TEST_INPUT: usize = 32;
/// Feature channels produced by the `tiny_test` backbone.
pub const TINY_TEST_CHANNELS: usize = 8;

/// All registered backbones with their input conventions.
pub fn list_backbones() -> Vec<BackboneSpec> {
    vec![
        BackboneSpec {
            id: BackboneId::Vgg16,
            input_spec: PreprocessSpec::new(224, 224, Scaling::UnitInterval),
            feature_channels: 512,
            pretrained_source: PretrainedSource::Imagenet,
        },
        BackboneSpec {
            id: BackboneId::InceptionV3,
            input_spec: PreprocessSpec::new(299, 299, Scaling::Symmetric),
            feature_channels: 2048,
            pretrained_source: PretrainedSource::Imagenet,
        },
        BackboneSpec {
            id: BackboneId::MobileNet,
            input_spec: PreprocessSpec::new(224, 224, Scaling::Symmetric),
            feature_channels: 1024,
            pretrained_source: PretrainedSource::Imagenet,
        },
        BackboneSpec {
            id: BackboneId::Xception,
            input_spec: PreprocessSpec::new(299, 299, Scaling::Symmetric),
            feature_channels: 2048,
            pretrained_source: PretrainedSource::Imagenet,
        },
        BackboneSpec {
            id: BackboneId::TinyTest,
            input_spec: PreprocessSpec::new(TINY_TEST_INPUT, TINY_TEST_INPUT, Scaling::UnitInterval),
            feature_channels: TINY_TEST_CHANNELS,
            pretrained_source: PretrainedSource::Random,
        },
    ]
}

/// Look up one registered backbone.
pub fn backbone_spec(id: BackboneId) -> BackboneSpec {
    list_backbones()
        .into_iter()
        .find(|s| s.id == id)
        .expect("all ids are registered")
}

/// A backbone with the regression head attached.
#[derive(Debug, Clone)]
pub struct RegressionModel {
    pub spec: BackboneSpec,
    pub regime: Regime,
    pub head_config: HeadConfig,
    backbone: Vec<Layer>,
    head: Vec<Layer>,
}

fn build_tiny_backbone(seed: u64) -> Vec<Layer> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x7ac4_b0de));
    vec![
        Layer::Conv2d(Conv2d::new_random(3, 3, CHANNEL_COUNT, 4, &mut rng)),
        Layer::Relu(Relu::default()),
        Layer::MaxPool2(MaxPool2::default()),
        Layer::Conv2d(Conv2d::new_random(3, 3, 4, TINY_TEST_CHANNELS, &mut rng)),
        Layer::BatchNorm(BatchNorm::new(TINY_TEST_CHANNELS, 1e-3, 0.99)),
        Layer::Relu(Relu::default()),
        Layer::MaxPool2(MaxPool2::default()),
        Layer::Conv2d(Conv2d::new_random(3, 3, TINY_TEST_CHANNELS, TINY_TEST_CHANNELS, &mut rng)),
        Layer::Relu(Relu::default()),
        Layer::MaxPool2(MaxPool2::default()),
    ]
}

fn build_head(feature_channels: usize, head: &HeadConfig, seed: u64) -> Vec<Layer> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x4ead));
    vec![
        Layer::BatchNorm(BatchNorm::new(
            feature_channels,
            head.batchnorm_epsilon,
            head.batchnorm_momentum,
        )),
        Layer::GlobalAvgPool(GlobalAvgPool::new()),
        Layer::Dropout(Dropout::new(head.dropout_rate)),
        Layer::Dense(Dense::new_random(feature_channels, 1, &mut rng)),
    ]
}

/// Output channel width of the last parameterized stage in a stack.
fn stack_output_channels(layers: &[Layer]) -> Option<usize> {
    layers.iter().rev().find_map(|l| match l {
        Layer::Conv2d(c) => Some(c.weight.dim().3),
        Layer::Dense(d) => Some(d.weight.dim().1),
        Layer::BatchNorm(b) => Some(b.gamma.len()),
        _ => None,
    })
}

const BLOB_MAGIC: &[u8; 4] = b"BAAW";
const BLOB_VERSION: u32 = 1;

fn write_blob(backbone_id: &str, backbone: &[Layer], head: &[Layer]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(BLOB_MAGIC);
    layers::write_u32(&mut out, BLOB_VERSION);
    write_string(&mut out, backbone_id);
    write_stack(backbone, &mut out);
    write_stack(head, &mut out);
    out
}

fn read_blob(bytes: &[u8]) -> ModelResult<(String, Vec<Layer>, Vec<Layer>)> {
    let mut reader = ByteReader::new(bytes);
    let mut magic = [0u8; 4];
    for b in magic.iter_mut() {
        *b = reader.read_u8()?;
    }
    if &magic != BLOB_MAGIC {
        return Err(ModelError::MalformedBlob("bad magic".into()));
    }
    let version = reader.read_u32()?;
    if version != BLOB_VERSION {
        return Err(ModelError::MalformedBlob(format!(
            "unsupported blob version {version}"
        )));
    }
    let id = reader.read_string()?;
    let backbone = read_stack(&mut reader)?;
    let head = read_stack(&mut reader)?;
    if !reader.is_empty() {
        return Err(ModelError::MalformedBlob("trailing bytes".into()));
    }
    Ok((id, backbone, head))
}

/// Write a backbone-only weight blob, the format `build_model` loads
/// ImageNet-sourced backbones from (`<weights_dir>/<id>.baaw`).
pub fn save_backbone_blob(backbone_id: &str, backbone: &[Layer], path: &Path) -> ModelResult<()> {
    let bytes = write_blob(backbone_id, backbone, &[]);
    fs::write(path, bytes).map_err(|e| ModelError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn load_pretrained_backbone(spec: &BackboneSpec, weights_dir: Option<&Path>) -> ModelResult<Vec<Layer>> {
    let dir = weights_dir
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os("BAA_WEIGHTS_DIR").map(PathBuf::from));
    let path = dir
        .map(|d| d.join(format!("{}.baaw", spec.id)))
        .unwrap_or_else(|| PathBuf::from(format!("{}.baaw", spec.id)));
    if !path.is_file() {
        return Err(ModelError::WeightsUnavailable {
            backbone: spec.id.to_string(),
            path,
        });
    }
    let bytes = fs::read(&path).map_err(|e| ModelError::Io {
        path: path.clone(),
        source: e,
    })?;
    let (id, backbone, head) = read_blob(&bytes)?;
    if id != spec.id.as_str() {
        return Err(ModelError::BackboneMismatch {
            context: "weights file",
            expected: spec.id.to_string(),
            found: id,
        });
    }
    if !head.is_empty() {
        return Err(ModelError::MalformedBlob(
            "backbone weights file unexpectedly contains a head".into(),
        ));
    }
    match stack_output_channels(&backbone) {
        Some(c) if c == spec.feature_channels => Ok(backbone),
        Some(c) => Err(ModelError::FeatureChannelMismatch {
            backbone: spec.id.to_string(),
            expected: spec.feature_channels,
            found: c,
        }),
        None => Err(ModelError::MalformedBlob(
            "backbone stack has no parameterized layers".into(),
        )),
    }
}

/// Assemble a regression model: backbone (pretrained or random), classifier
/// stage replaced by the head `batch_norm -> global_avg_pool -> dropout ->
/// dense(1)`, trainability set by `regime`. Head weights are freshly
/// initialized from `seed`.
pub fn build_model(
    backbone_id: &str,
    regime: Regime,
    head: HeadConfig,
    seed: u64,
    weights_dir: Option<&Path>,
) -> ModelResult<RegressionModel> {
    let id = BackboneId::from_str(backbone_id)?;
    build_model_for(id, regime, head, seed, weights_dir)
}

/// Typed variant of [`build_model`].
pub fn build_model_for(
    id: BackboneId,
    regime: Regime,
    head: HeadConfig,
    seed: u64,
    weights_dir: Option<&Path>,
) -> ModelResult<RegressionModel> {
    head.validate().map_err(ModelError::MalformedBlob)?;
    let spec = backbone_spec(id);
    let backbone = match spec.pretrained_source {
        PretrainedSource::Random => build_tiny_backbone(seed),
        PretrainedSource::Imagenet => load_pretrained_backbone(&spec, weights_dir)?,
    };
    let head_layers = build_head(spec.feature_channels, &head, seed);
    Ok(RegressionModel {
        spec,
        regime,
        head_config: head,
        backbone,
        head: head_layers,
    })
}

impl RegressionModel {
    fn check_input(&self, images: &Array4<f64>) -> ModelResult<()> {
        let (b, h, w, c) = images.dim();
        if b == 0 {
            return Err(ModelError::EmptyBatch);
        }
        let expected = (
            self.spec.input_spec.target_height,
            self.spec.input_spec.target_width,
            CHANNEL_COUNT,
        );
        if (h, w, c) != expected {
            return Err(ModelError::ShapeMismatch {
                expected,
                got: (h, w, c),
            });
        }
        Ok(())
    }

    /// Training-mode forward pass: one prediction per sample.
    ///
    /// Under `Frozen` the backbone runs in inference mode (running statistics,
    /// no caches), so its state is never touched; under `Full` the whole stack
    /// runs in training mode.
    pub fn forward_train(
        &mut self,
        images: &Array4<f64>,
        ctx: &mut ForwardCtx,
    ) -> ModelResult<Array1<f64>> {
        self.check_input(images)?;
        let mut acc = images.clone();
        match self.regime {
            Regime::Frozen => {
                for layer in &self.backbone {
                    acc = layer.infer(&acc);
                }
            }
            Regime::Full => {
                for layer in &mut self.backbone {
                    acc = layer.forward_train(&acc, ctx);
                }
            }
        }
        for layer in &mut self.head {
            acc = layer.forward_train(&acc, ctx);
        }
        Ok(flatten_predictions(&acc))
    }

    /// Deterministic evaluation-mode predictions. Read-only and reentrant.
    pub fn predict(&self, images: &Array4<f64>) -> ModelResult<Array1<f64>> {
        self.check_input(images)?;
        let mut acc = images.clone();
        for layer in self.backbone.iter().chain(self.head.iter()) {
            acc = layer.infer(&acc);
        }
        Ok(flatten_predictions(&acc))
    }

    /// Backpropagate `d(loss)/d(prediction)`, accumulating gradients for the
    /// trainable partition set by the regime.
    pub fn backward(&mut self, dpred: &Array1<f64>) {
        let b = dpred.len();
        let mut grad = Array4::<f64>::zeros((b, 1, 1, 1));
        for (i, &g) in dpred.iter().enumerate() {
            grad[[i, 0, 0, 0]] = g;
        }
        for layer in self.head.iter_mut().rev() {
            grad = layer.backward(&grad);
        }
        if self.regime == Regime::Full {
            for layer in self.backbone.iter_mut().rev() {
                grad = layer.backward(&grad);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for layer in self.backbone.iter_mut().chain(self.head.iter_mut()) {
            layer.zero_grads();
        }
    }

    /// Views of the parameters the current regime trains.
    pub fn trainable_params(&mut self) -> Vec<ParamView<'_>> {
        let mut views = Vec::new();
        if self.regime == Regime::Full {
            for (i, layer) in self.backbone.iter_mut().enumerate() {
                views.extend(layer.param_views(&format!("backbone.{i}")));
            }
        }
        for (i, layer) in self.head.iter_mut().enumerate() {
            views.extend(layer.param_views(&format!("head.{i}")));
        }
        views
    }

    /// Exact count of scalars in the trainable partition.
    pub fn trainable_parameter_count(&self) -> usize {
        let head: usize = self.head.iter().map(Layer::trainable_scalars).sum();
        match self.regime {
            Regime::Frozen => head,
            Regime::Full => {
                head + self
                    .backbone
                    .iter()
                    .map(Layer::trainable_scalars)
                    .sum::<usize>()
            }
        }
    }

    /// All state scalars, including batch-norm running statistics.
    pub fn total_state_scalars(&self) -> usize {
        self.backbone
            .iter()
            .chain(self.head.iter())
            .map(|l| l.trainable_scalars() + l.stat_scalars())
            .sum()
    }

    /// Batch-norm running statistic scalars only.
    pub fn running_stat_scalars(&self) -> usize {
        self.backbone
            .iter()
            .chain(self.head.iter())
            .map(Layer::stat_scalars)
            .sum()
    }

    /// Architecture descriptors for the head, in order.
    pub fn describe_head(&self) -> Vec<String> {
        self.head.iter().map(Layer::describe).collect()
    }

    pub fn describe_backbone(&self) -> Vec<String> {
        self.backbone.iter().map(Layer::describe).collect()
    }

    /// Deterministic serialization of the backbone alone (weights plus
    /// batch-norm statistics); lets callers assert frozen-backbone
    /// immutability bitwise.
    pub fn backbone_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        write_stack(&self.backbone, &mut out);
        out
    }

    /// Full model blob for checkpointing.
    pub fn to_blob(&self) -> Vec<u8> {
        write_blob(self.spec.id.as_str(), &self.backbone, &self.head)
    }
}

fn flatten_predictions(output: &Array4<f64>) -> Array1<f64> {
    let (b, h, w, c) = output.dim();
    debug_assert_eq!((h, w, c), (1, 1, 1), "model output must be one scalar per sample");
    Array1::from_iter((0..b).map(|i| output[[i, 0, 0, 0]]))
}

/// JSON sidecar stored next to every checkpoint blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub backbone_id: BackboneId,
    pub regime: Regime,
    pub head_config: HeadConfig,
    /// Epoch index the stored weights correspond to.
    pub epoch: usize,
    pub val_mae: f64,
    pub seed: u64,
}

/// Sidecar path convention: the blob path with a `.json` extension.
pub fn sidecar_path(blob_path: &Path) -> PathBuf {
    blob_path.with_extension("json")
}

/// Write the weight blob and its JSON sidecar.
pub fn save_checkpoint(
    model: &RegressionModel,
    meta: &CheckpointMeta,
    blob_path: &Path,
) -> ModelResult<()> {
    fs::write(blob_path, model.to_blob()).map_err(|e| ModelError::Io {
        path: blob_path.to_path_buf(),
        source: e,
    })?;
    let sidecar = sidecar_path(blob_path);
    let json = serde_json::to_vec_pretty(meta).expect("sidecar serialization");
    fs::write(&sidecar, json).map_err(|e| ModelError::Io {
        path: sidecar,
        source: e,
    })
}

/// Load a checkpoint, rejecting a sidecar whose backbone id does not match
/// the blob.
pub fn load_checkpoint(blob_path: &Path) -> ModelResult<(RegressionModel, CheckpointMeta)> {
    let sidecar = sidecar_path(blob_path);
    let meta_raw = fs::read(&sidecar).map_err(|e| ModelError::Io {
        path: sidecar.clone(),
        source: e,
    })?;
    let meta: CheckpointMeta = serde_json::from_slice(&meta_raw).map_err(|e| ModelError::Sidecar {
        path: sidecar,
        source: e,
    })?;

    let bytes = fs::read(blob_path).map_err(|e| ModelError::Io {
        path: blob_path.to_path_buf(),
        source: e,
    })?;
    let (blob_id, backbone, head) = read_blob(&bytes)?;
    if blob_id != meta.backbone_id.as_str() {
        return Err(ModelError::BackboneMismatch {
            context: "sidecar",
            expected: blob_id,
            found: meta.backbone_id.to_string(),
        });
    }
    if head.is_empty() {
        return Err(ModelError::MalformedBlob("checkpoint blob has no head".into()));
    }
    let spec = backbone_spec(meta.backbone_id);
    Ok((
        RegressionModel {
            spec,
            regime: meta.regime,
            head_config: meta.head_config,
            backbone,
            head,
        },
        meta,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny(regime: Regime, head: HeadConfig, seed: u64) -> RegressionModel {
        build_model("tiny_test", regime, head, seed, None).unwrap()
    }

    fn head_no_dropout() -> HeadConfig {
        HeadConfig {
            dropout_rate: 0.0,
            ..HeadConfig::default()
        }
    }

    fn tiny_batch(b: usize, seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn((b, TINY_TEST_INPUT, TINY_TEST_INPUT, 3), |_| {
            rng.random_range(0.0..1.0)
        })
    }

    /// A stand-in backbone blob with the right feature width; exercises the
    /// pretrained loading path without real ImageNet weights.
    fn write_stand_in_backbone(dir: &Path, id: BackboneId, feature_channels: usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(0xfeed);
        let layers = vec![
            Layer::Conv2d(Conv2d::new_random(3, 3, 3, feature_channels, &mut rng)),
            Layer::Relu(Relu::default()),
        ];
        save_backbone_blob(id.as_str(), &layers, &dir.join(format!("{id}.baaw"))).unwrap();
    }

    #[test]
    fn registry_lists_five_backbones() {
        let specs = list_backbones();
        assert_eq!(specs.len(), 5);
        let ids: Vec<&str> = specs.iter().map(|s| s.id.as_str()).collect();
        for expected in ["vgg16", "inception_v3", "mobilenet", "xception", "tiny_test"] {
            assert!(ids.contains(&expected));
        }
        let tiny = specs.iter().find(|s| s.id == BackboneId::TinyTest).unwrap();
        assert_eq!(tiny.pretrained_source, PretrainedSource::Random);
        for s in &specs {
            if s.id != BackboneId::TinyTest {
                assert_eq!(s.pretrained_source, PretrainedSource::Imagenet);
            }
        }
    }

    #[test]
    fn every_registered_id_builds_a_model() {
        let dir = tempfile::tempdir().unwrap();
        for spec in list_backbones() {
            if spec.pretrained_source == PretrainedSource::Imagenet {
                write_stand_in_backbone(dir.path(), spec.id, spec.feature_channels);
            }
            let model = build_model(
                spec.id.as_str(),
                Regime::Frozen,
                HeadConfig::default(),
                0,
                Some(dir.path()),
            )
            .unwrap();
            assert_eq!(model.spec.id, spec.id);
        }
    }

    #[test]
    fn unknown_backbone_rejected() {
        let err = build_model("resnet50", Regime::Full, HeadConfig::default(), 0, None).unwrap_err();
        assert!(matches!(err, ModelError::UnknownBackbone(name) if name == "resnet50"));
    }

    #[test]
    fn imagenet_weights_missing_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let err = build_model(
            "vgg16",
            Regime::Full,
            HeadConfig::default(),
            0,
            Some(dir.path()),
        )
        .unwrap_err();
        assert!(matches!(err, ModelError::WeightsUnavailable { backbone, .. } if backbone == "vgg16"));
    }

    #[test]
    fn wrong_feature_width_in_weights_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_stand_in_backbone(dir.path(), BackboneId::MobileNet, 7);
        let err = build_model(
            "mobilenet",
            Regime::Full,
            HeadConfig::default(),
            0,
            Some(dir.path()),
        )
        .unwrap_err();
        assert!(matches!(
            err,
            ModelError::FeatureChannelMismatch {
                expected: 1024,
                found: 7,
                ..
            }
        ));
    }

    #[test]
    fn mismatched_id_in_weights_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        // File named vgg16.baaw but declaring mobilenet inside.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layers = vec![Layer::Conv2d(Conv2d::new_random(3, 3, 3, 512, &mut rng))];
        save_backbone_blob("mobilenet", &layers, &dir.path().join("vgg16.baaw")).unwrap();
        let err = build_model(
            "vgg16",
            Regime::Full,
            HeadConfig::default(),
            0,
            Some(dir.path()),
        )
        .unwrap_err();
        assert!(matches!(err, ModelError::BackboneMismatch { .. }));
    }

    #[test]
    fn frozen_trainable_count_is_3c_plus_1() {
        // batch norm 2C, dense C+1: 3C+1 = 25 for C=8.
        let model = tiny(Regime::Frozen, HeadConfig::default(), 0);
        assert_eq!(model.trainable_parameter_count(), 25);
        assert_eq!(
            model.trainable_parameter_count(),
            3 * TINY_TEST_CHANNELS + 1
        );
    }

    #[test]
    fn full_trainable_count_excludes_running_stats() {
        let model = tiny(Regime::Full, HeadConfig::default(), 0);
        assert_eq!(
            model.trainable_parameter_count(),
            model.total_state_scalars() - model.running_stat_scalars()
        );
        let frozen = tiny(Regime::Frozen, HeadConfig::default(), 0);
        assert!(frozen.trainable_parameter_count() < model.trainable_parameter_count());
    }

    #[test]
    fn head_order_invariant() {
        let dir = tempfile::tempdir().unwrap();
        for spec in list_backbones() {
            if spec.pretrained_source == PretrainedSource::Imagenet {
                write_stand_in_backbone(dir.path(), spec.id, spec.feature_channels);
            }
            let model = build_model(
                spec.id.as_str(),
                Regime::Full,
                HeadConfig::default(),
                1,
                Some(dir.path()),
            )
            .unwrap();
            let head = model.describe_head();
            assert_eq!(head.len(), 4);
            assert!(head[0].starts_with("batch_norm"), "{head:?}");
            assert_eq!(head[1], "global_avg_pool");
            assert!(head[2].starts_with("dropout"), "{head:?}");
            assert!(head[3].starts_with("dense") && head[3].ends_with("->1)"), "{head:?}");
        }
    }

    #[test]
    fn forward_shape_and_finiteness() {
        let model = tiny(Regime::Full, head_no_dropout(), 3);
        let out = model.predict(&tiny_batch(4, 9)).unwrap();
        assert_eq!(out.len(), 4);
        assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let model = tiny(Regime::Full, HeadConfig::default(), 3);
        let batch = tiny_batch(3, 10);
        assert_eq!(model.predict(&batch).unwrap(), model.predict(&batch).unwrap());
    }

    #[test]
    fn train_forward_dropout_varies_with_seed() {
        let mut model = tiny(Regime::Full, HeadConfig::default(), 3);
        let batch = tiny_batch(3, 10);
        let run = |seed: u64, model: &mut RegressionModel| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut ctx = ForwardCtx {
                update_stats: false,
                rng: Some(&mut rng),
            };
            model.forward_train(&batch, &mut ctx).unwrap()
        };
        let a = run(1, &mut model);
        let b = run(2, &mut model);
        assert_ne!(a, b);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let model = tiny(Regime::Full, HeadConfig::default(), 0);
        let bad = Array4::<f64>::zeros((1, 16, 16, 3));
        assert!(matches!(
            model.predict(&bad),
            Err(ModelError::ShapeMismatch { .. })
        ));
        let empty = Array4::<f64>::zeros((0, 32, 32, 3));
        assert!(matches!(model.predict(&empty), Err(ModelError::EmptyBatch)));
    }

    #[test]
    fn head_seed_changes_head_but_not_loaded_backbone() {
        let dir = tempfile::tempdir().unwrap();
        write_stand_in_backbone(dir.path(), BackboneId::Vgg16, 512);
        let a = build_model("vgg16", Regime::Frozen, HeadConfig::default(), 1, Some(dir.path()))
            .unwrap();
        let b = build_model("vgg16", Regime::Frozen, HeadConfig::default(), 2, Some(dir.path()))
            .unwrap();
        assert_eq!(a.backbone_bytes(), b.backbone_bytes());
        let mut blob_a = Vec::new();
        write_stack(&a.head, &mut blob_a);
        let mut blob_b = Vec::new();
        write_stack(&b.head, &mut blob_b);
        assert_ne!(blob_a, blob_b);
    }

    #[test]
    fn final_layer_is_affine_in_features() {
        // With dropout inactive and batch norm in eval mode, pooled features
        // map affinely to the output: y(a*f) - y(0) == a * (y(f) - y(0)).
        let model = tiny(Regime::Full, head_no_dropout(), 7);
        let dense = model.head.iter().find_map(|l| match l {
            Layer::Dense(d) => Some(d.clone()),
            _ => None,
        });
        let dense = Layer::Dense(dense.unwrap());
        let features = {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            Array4::from_shape_fn((2, 1, 1, TINY_TEST_CHANNELS), |_| rng.random_range(-1.0..1.0))
        };
        let zero = Array4::<f64>::zeros(features.raw_dim());
        let y0 = dense.infer(&zero);
        let y1 = dense.infer(&features);
        for alpha in [0.5, 2.0, -3.0] {
            let ya = dense.infer(&features.mapv(|v| alpha * v));
            for i in 0..2 {
                let lhs = ya[[i, 0, 0, 0]] - y0[[i, 0, 0, 0]];
                let rhs = alpha * (y1[[i, 0, 0, 0]] - y0[[i, 0, 0, 0]]);
                assert!((lhs - rhs).abs() < 1e-9, "alpha {alpha}: {lhs} vs {rhs}");
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch_rejection() {
        let dir = tempfile::tempdir().unwrap();
        let model = tiny(Regime::Frozen, HeadConfig::default(), 5);
        let meta = CheckpointMeta {
            backbone_id: BackboneId::TinyTest,
            regime: Regime::Frozen,
            head_config: model.head_config,
            epoch: 3,
            val_mae: 12.5,
            seed: 5,
        };
        let blob = dir.path().join("ckpt.baaw");
        save_checkpoint(&model, &meta, &blob).unwrap();

        let (loaded, loaded_meta) = load_checkpoint(&blob).unwrap();
        assert_eq!(loaded_meta, meta);
        let batch = tiny_batch(2, 6);
        assert_eq!(model.predict(&batch).unwrap(), loaded.predict(&batch).unwrap());

        // Corrupt the sidecar's backbone id; the load must now fail.
        let mut tampered = meta.clone();
        tampered.backbone_id = BackboneId::Vgg16;
        fs::write(
            sidecar_path(&blob),
            serde_json::to_vec_pretty(&tampered).unwrap(),
        )
        .unwrap();
        assert!(matches!(
            load_checkpoint(&blob),
            Err(ModelError::BackboneMismatch { context: "sidecar", .. })
        ));
    }
}
