//! Convolutional translation regressor.
//!
//! A backbone of stride-2 conv blocks with global average pooling feeds a
//! 2-unit linear head with no activation. Single-branch models read one
//! combined image; dual-branch models read the designed and measured images
//! separately and merge the concatenated pooled features in the head.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classical::MatchResult;
use crate::error::{Error, Result};
use crate::eval::SuccessCriterion;
use crate::geometry::{Displacement, Profile};
use crate::nn::{
    Adam, AdamConfig, BatchNorm2d, Conv2d, CoordPlanes, GlobalAvgPool, Layer, Linear, MaxPool2d, Param, Relu,
    ResidualBlock, Scalar, Sequential, Tensor,
};
use crate::raster::{denormalize_label, render_pair, ImageSpec, RasterImage, RenderMode, RenderedSample};
use crate::synth::{DatasetManifest, Sample, Split};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    SingleBranch,
    DualBranch,
}

impl Architecture {
    pub fn render_mode(self) -> RenderMode {
        match self {
            Architecture::SingleBranch => RenderMode::Single,
            Architecture::DualBranch => RenderMode::Separate,
        }
    }
}

impl std::str::FromStr for Architecture {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" | "single_branch" | "single-branch" => Ok(Architecture::SingleBranch),
            "dual" | "dual_branch" | "dual-branch" => Ok(Architecture::DualBranch),
            other => Err(Error::Config(format!("unknown architecture `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackbonePreset {
    #[serde(rename = "tiny")]
    Tiny,
    #[serde(rename = "small")]
    Small,
    #[serde(rename = "resnet18-like")]
    Resnet18Like,
}

impl BackbonePreset {
    pub fn as_str(self) -> &'static str {
        match self {
            BackbonePreset::Tiny => "tiny",
            BackbonePreset::Small => "small",
            BackbonePreset::Resnet18Like => "resnet18-like",
        }
    }

    /// Channel widths of the stride-2 conv blocks (plain presets) or of the
    /// four residual stages.
    pub fn widths(self) -> &'static [usize] {
        match self {
            BackbonePreset::Tiny => &[8, 16, 16, 32, 32, 32],
            BackbonePreset::Small => &[16, 32, 64, 64, 128, 128, 128],
            BackbonePreset::Resnet18Like => &[64, 128, 256, 512],
        }
    }

    pub fn feature_width(self) -> usize {
        *self.widths().last().expect("non-empty preset")
    }
}

impl std::str::FromStr for BackbonePreset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(BackbonePreset::Tiny),
            "small" => Ok(BackbonePreset::Small),
            "resnet18-like" | "resnet18" => Ok(BackbonePreset::Resnet18Like),
            other => Err(Error::Config(format!("unknown backbone preset `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Init {
    Random {
        seed: u64,
    },
    /// Weights copied from a compatible checkpoint (path to its JSON).
    Pretrained {
        source: String,
    },
}

impl Default for Init {
    fn default() -> Self {
        Init::Random { seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub backbone_preset: BackbonePreset,
    pub input_px: u32,
    pub input_channels: usize,
    pub init: Init,
    pub branch_weight_sharing: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            architecture: Architecture::SingleBranch,
            backbone_preset: BackbonePreset::Small,
            input_px: 224,
            input_channels: 3,
            init: Init::default(),
            branch_weight_sharing: false,
        }
    }
}

impl ModelConfig {
    pub fn new(architecture: Architecture, backbone_preset: BackbonePreset, input_px: u32, seed: u64) -> Self {
        ModelConfig {
            architecture,
            backbone_preset,
            input_px,
            init: Init::Random { seed },
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels != 3 {
            return Err(Error::param("input_channels", "images are RGB, so this must be 3"));
        }
        if self.input_px < 16 {
            return Err(Error::param("input_px", "must be at least 16"));
        }
        Ok(())
    }
}

fn conv_bn_relu<T: Scalar>(seq: &mut Sequential<T>, name: &str, cin: usize, cout: usize, rng: &mut ChaCha8Rng) {
    seq.push(Conv2d::new(&format!("{name}.conv"), cin, cout, 3, 2, 1, false, rng));
    seq.push(BatchNorm2d::new(&format!("{name}.bn"), cout));
    seq.push(Relu::default());
}

/// Backbone ending in global average pooling. Two coordinate planes are
/// appended to the input so pooled features can carry absolute position.
fn build_backbone<T: Scalar>(preset: BackbonePreset, prefix: &str, cin: usize, rng: &mut ChaCha8Rng) -> Sequential<T> {
    let mut seq = Sequential::default();
    seq.push(CoordPlanes::default());
    let mut c = cin + 2;
    match preset {
        BackbonePreset::Tiny | BackbonePreset::Small => {
            for (i, &w) in preset.widths().iter().enumerate() {
                conv_bn_relu(&mut seq, &format!("{prefix}.block{i}"), c, w, rng);
                c = w;
            }
        }
        BackbonePreset::Resnet18Like => {
            let widths = preset.widths();
            seq.push(Conv2d::new(
                &format!("{prefix}.stem.conv"),
                c,
                widths[0],
                7,
                2,
                3,
                false,
                rng,
            ));
            seq.push(BatchNorm2d::new(&format!("{prefix}.stem.bn"), widths[0]));
            seq.push(Relu::default());
            seq.push(MaxPool2d::new(3, 2, 1));
            c = widths[0];
            for (s, &w) in widths.iter().enumerate() {
                let stride = if s == 0 { 1 } else { 2 };
                seq.push(ResidualBlock::new(&format!("{prefix}.stage{s}.0"), c, w, stride, rng));
                seq.push(ResidualBlock::new(&format!("{prefix}.stage{s}.1"), w, w, 1, rng));
                c = w;
            }
        }
    }
    seq.push(GlobalAvgPool::default());
    // The raw image needs no gradient.
    if let Some(conv) = seq.layers.iter_mut().find_map(|l| l.as_conv_mut()) {
        conv.needs_input_grad = false;
    }
    seq
}

/// Backbone(s) plus the 2-unit head.
pub struct Network<T: Scalar> {
    config: ModelConfig,
    branches: Vec<Sequential<T>>,
    pub head: Linear<T>,
    features: usize,
    batch: Option<usize>,
}

impl<T: Scalar> Network<T> {
    /// Builds with random weights. `Init::Pretrained` is resolved by
    /// [`build_model`], which loads the source checkpoint.
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let seed = match &config.init {
            Init::Random { seed } => *seed,
            Init::Pretrained { .. } => 0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let preset = config.backbone_preset;
        let n_branches = match config.architecture {
            Architecture::SingleBranch => 1,
            Architecture::DualBranch if config.branch_weight_sharing => 1,
            Architecture::DualBranch => 2,
        };
        let branches: Vec<Sequential<T>> = (0..n_branches)
            .map(|b| build_backbone(preset, &format!("branch{b}"), config.input_channels, &mut rng))
            .collect();
        let features = preset.feature_width();
        let head_inputs = match config.architecture {
            Architecture::SingleBranch => features,
            Architecture::DualBranch => 2 * features,
        };
        let head = Linear::new("head", head_inputs, 2, &mut rng);
        Ok(Network {
            config: config.clone(),
            branches,
            head,
            features,
            batch: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Images per sample: 1 single-branch, 2 dual-branch.
    pub fn input_count(&self) -> usize {
        self.config.architecture.render_mode().image_count()
    }

    pub fn render_mode(&self) -> RenderMode {
        self.config.architecture.render_mode()
    }

    fn check_inputs(&self, inputs: &[Tensor<T>]) -> Result<usize> {
        if inputs.len() != self.input_count() {
            return Err(Error::Shape(format!(
                "model expects {} image(s) per sample, got {}",
                self.input_count(),
                inputs.len()
            )));
        }
        let px = self.config.input_px as usize;
        let n = inputs[0].n();
        for t in inputs {
            if t.shape != [n, self.config.input_channels, px, px] {
                return Err(Error::Shape(format!(
                    "expected input [{n}, {}, {px}, {px}], got {:?}",
                    self.config.input_channels, t.shape
                )));
            }
        }
        Ok(n)
    }

    /// Normalized predictions, `[n, 2, 1, 1]`.
    pub fn forward(&mut self, inputs: &[Tensor<T>], train: bool) -> Result<Tensor<T>> {
        let n = self.check_inputs(inputs)?;
        let f = self.features;
        let features = match (self.config.architecture, self.branches.len()) {
            (Architecture::SingleBranch, _) => self.branches[0].forward(&inputs[0], train),
            (Architecture::DualBranch, 1) => {
                let mut stacked = inputs[0].clone();
                stacked.shape[0] = 2 * n;
                stacked.data.extend_from_slice(&inputs[1].data);
                let both = self.branches[0].forward(&stacked, train);
                let mut data = Vec::with_capacity(2 * n * f);
                for i in 0..n {
                    data.extend_from_slice(both.sample(i));
                    data.extend_from_slice(both.sample(n + i));
                }
                Tensor::from_vec([n, 2 * f, 1, 1], data)
            }
            (Architecture::DualBranch, _) => {
                let a = self.branches[0].forward(&inputs[0], train);
                let b = self.branches[1].forward(&inputs[1], train);
                let mut data = Vec::with_capacity(2 * n * f);
                for i in 0..n {
                    data.extend_from_slice(a.sample(i));
                    data.extend_from_slice(b.sample(i));
                }
                Tensor::from_vec([n, 2 * f, 1, 1], data)
            }
        };
        self.batch = train.then_some(n);
        Ok(self.head.forward(&features, train))
    }

    /// Backpropagates `dloss/doutput` through a preceding training forward,
    /// accumulating parameter gradients.
    pub fn backward(&mut self, dy: &Tensor<T>) {
        let n = self.batch.take().expect("backward without a training forward");
        let f = self.features;
        let dfeat = self.head.backward(dy);
        match (self.config.architecture, self.branches.len()) {
            (Architecture::SingleBranch, _) => {
                self.branches[0].backward(&dfeat);
            }
            (Architecture::DualBranch, 1) => {
                let mut data = vec![T::ZERO; 2 * n * f];
                for i in 0..n {
                    let row = dfeat.sample(i);
                    data[i * f..(i + 1) * f].copy_from_slice(&row[..f]);
                    data[(n + i) * f..(n + i + 1) * f].copy_from_slice(&row[f..]);
                }
                self.branches[0].backward(&Tensor::from_vec([2 * n, f, 1, 1], data));
            }
            (Architecture::DualBranch, _) => {
                let (mut da, mut db) = (Vec::with_capacity(n * f), Vec::with_capacity(n * f));
                for i in 0..n {
                    let row = dfeat.sample(i);
                    da.extend_from_slice(&row[..f]);
                    db.extend_from_slice(&row[f..]);
                }
                self.branches[0].backward(&Tensor::from_vec([n, f, 1, 1], da));
                self.branches[1].backward(&Tensor::from_vec([n, f, 1, 1], db));
            }
        }
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for b in &mut self.branches {
            b.visit_params(f);
        }
        self.head.visit_params(f);
    }

    pub fn visit_buffers(&mut self, f: &mut dyn FnMut(&str, &mut Vec<T>)) {
        for b in &mut self.branches {
            b.visit_buffers(f);
        }
    }

    pub fn zero_grad(&mut self) {
        self.visit_params(&mut |p| p.zero_grad());
    }

    pub fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.value.len());
        n
    }

    pub fn clear_cache(&mut self) {
        for b in &mut self.branches {
            b.clear_cache();
        }
        self.head.clear_cache();
        self.batch = None;
    }

    /// Every stored tensor (parameters, then buffers) with its name and shape.
    pub fn state(&mut self) -> Vec<(TensorInfo, Vec<T>)> {
        let mut out = Vec::new();
        self.visit_params(&mut |p| {
            out.push((
                TensorInfo {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                },
                p.value.clone(),
            ))
        });
        self.visit_buffers(&mut |name, v| {
            out.push((
                TensorInfo {
                    name: name.to_string(),
                    shape: vec![v.len()],
                },
                v.clone(),
            ))
        });
        out
    }

    /// Inverse of [`Network::state`]; names and sizes must match.
    pub fn load_state(&mut self, state: &[(TensorInfo, Vec<T>)]) -> Result<()> {
        let mut i = 0usize;
        let mut err: Option<Error> = None;
        let mut take = |name: &str, dst: &mut Vec<T>| {
            if err.is_some() {
                return;
            }
            match state.get(i) {
                Some((info, v)) if info.name == name && v.len() == dst.len() => dst.copy_from_slice(v),
                Some((info, v)) => {
                    err = Some(Error::Shape(format!(
                        "tensor {i}: expected `{name}` with {} values, found `{}` with {}",
                        dst.len(),
                        info.name,
                        v.len()
                    )))
                }
                None => err = Some(Error::Shape(format!("missing tensor `{name}`"))),
            }
            i += 1;
        };
        self.visit_params(&mut |p| take(&p.name.clone(), &mut p.value));
        self.visit_buffers(&mut |name, v| take(name, v));
        if let Some(e) = err {
            return Err(e);
        }
        if i != state.len() {
            return Err(Error::Shape(format!("{} tensors supplied, model has {i}", state.len())));
        }
        Ok(())
    }
}

/// Builds the model, resolving pretrained weights.
pub fn build_model(config: &ModelConfig) -> Result<Network<f32>> {
    let mut net = Network::new(config)?;
    if let Init::Pretrained { source } = &config.init {
        let mut ckpt = Checkpoint::load(Path::new(source))?;
        net.load_state(&ckpt.network.state())?;
    }
    Ok(net)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Per-channel standardization applied after scaling pixels to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputNorm {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl InputNorm {
    pub const IDENTITY: InputNorm = InputNorm {
        mean: [0.0; 3],
        std: [1.0; 3],
    };

    /// Channel statistics over every pixel of `images`.
    pub fn fit<'a>(images: impl IntoIterator<Item = &'a RasterImage>) -> Self {
        let mut acc = NormAccumulator::default();
        images.into_iter().for_each(|im| acc.add(im));
        acc.finish()
    }

    /// Stacks same-sized images into a standardized `[n, 3, h, w]` tensor.
    pub fn tensor<T: Scalar>(&self, images: &[&RasterImage]) -> Result<Tensor<T>> {
        let Some(first) = images.first() else {
            return Err(Error::Shape("no images to stack".into()));
        };
        let (w, h) = (first.width() as usize, first.height() as usize);
        let plane = w * h;
        let lut: Vec<[T; 256]> = (0..3)
            .map(|c| {
                let mut t = [T::ZERO; 256];
                for (v, slot) in t.iter_mut().enumerate() {
                    *slot = T::from_f64((v as f64 / 255.0 - self.mean[c]) / self.std[c]);
                }
                t
            })
            .collect();
        let mut data = vec![T::ZERO; images.len() * 3 * plane];
        for (i, im) in images.iter().enumerate() {
            if im.width() as usize != w || im.height() as usize != h {
                return Err(Error::Shape("images in a batch differ in size".into()));
            }
            let out = &mut data[i * 3 * plane..(i + 1) * 3 * plane];
            for (p, px) in im.data().chunks_exact(3).enumerate() {
                for c in 0..3 {
                    out[c * plane + p] = lut[c][px[c] as usize];
                }
            }
        }
        Ok(Tensor::from_vec([images.len(), 3, h, w], data))
    }

    /// One tensor per image slot of the rendered samples.
    pub fn batch<T: Scalar>(&self, rendered: &[RenderedSample]) -> Result<Vec<Tensor<T>>> {
        let slots = rendered.first().map_or(0, |r| r.images.len());
        (0..slots)
            .map(|s| {
                let ims: Vec<&RasterImage> = rendered.iter().map(|r| &r.images[s]).collect();
                self.tensor(&ims)
            })
            .collect()
    }
}

/// Running per-channel pixel sums.
#[derive(Debug, Clone)]
pub struct NormAccumulator {
    hist: [[u64; 256]; 3],
}

impl Default for NormAccumulator {
    fn default() -> Self {
        NormAccumulator { hist: [[0; 256]; 3] }
    }
}

impl NormAccumulator {
    pub fn add(&mut self, image: &RasterImage) {
        for px in image.data().chunks_exact(3) {
            for c in 0..3 {
                self.hist[c][px[c] as usize] += 1;
            }
        }
    }

    /// Standard deviations are floored at 1e-3 so flat channels stay finite.
    pub fn finish(&self) -> InputNorm {
        let mut norm = InputNorm::IDENTITY;
        for c in 0..3 {
            let count: u64 = self.hist[c].iter().sum();
            if count == 0 {
                return InputNorm::IDENTITY;
            }
            let (mut s, mut ss) = (0.0f64, 0.0f64);
            for (v, &k) in self.hist[c].iter().enumerate() {
                let x = v as f64 / 255.0;
                s += k as f64 * x;
                ss += k as f64 * x * x;
            }
            let mean = s / count as f64;
            norm.mean[c] = mean;
            norm.std[c] = (ss / count as f64 - mean * mean).max(0.0).sqrt().max(1e-3);
        }
        norm
    }
}

/// Mean squared error over both outputs and its gradient.
pub fn mse_loss<T: Scalar>(pred: &Tensor<T>, targets: &[[f64; 2]]) -> (f64, Tensor<T>) {
    let n = pred.n();
    assert_eq!(n, targets.len());
    let count = (2 * n) as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(2 * n);
    for (i, t) in targets.iter().enumerate() {
        for k in 0..2 {
            let d = pred.data[2 * i + k].to_f64() - t[k];
            loss += d * d;
            grad.push(T::from_f64(2.0 * d / count));
        }
    }
    (loss / count, Tensor::from_vec(pred.shape, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Write a checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    pub adam: AdamConfig,
    /// Tolerance for the validation success rate, mm.
    pub success_tolerance_mm: f64,
    /// Samples per rendering/inference chunk when evaluating.
    pub eval_batch_size: usize,
    pub lr_schedule: LrSchedule,
    /// Training-time augmentation: both profiles of a pair move by the same
    /// random offset of up to this many mm per axis (label unchanged). 0 disables.
    pub augment_shift_mm: f64,
}

/// Learning rate as a function of training progress.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine decay from `learning_rate` to zero over all steps.
    Cosine,
}

impl LrSchedule {
    pub fn rate(self, base: f64, step: usize, total_steps: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let t = step as f64 / total_steps.max(1) as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 32,
            epochs: 10,
            seed: 0,
            checkpoint_every: 0,
            adam: AdamConfig::default(),
            success_tolerance_mm: 0.4,
            eval_batch_size: 64,
            lr_schedule: LrSchedule::Constant,
            augment_shift_mm: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::param("learning_rate", "must be finite and not negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::param("batch_size", "must be at least 1"));
        }
        if self.eval_batch_size == 0 {
            return Err(Error::param("eval_batch_size", "must be at least 1"));
        }
        if !(self.augment_shift_mm >= 0.0 && self.augment_shift_mm.is_finite()) {
            return Err(Error::param("augment_shift_mm", "must be finite and not negative"));
        }
        if !(self.success_tolerance_mm > 0.0) {
            return Err(Error::param("success_tolerance_mm", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
    pub val_success_rate: f64,
    pub seconds: f64,
}

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Epoch the weights come from.
    pub epoch: usize,
    pub history: Vec<EpochStats>,
    pub l_norm_mm: f64,
    pub image_spec: ImageSpec,
    pub image_spec_digest: String,
    pub render_mode: RenderMode,
    pub input_norm: InputNorm,
    pub tensors: Vec<TensorInfo>,
    /// Weights file, relative to the metadata file.
    pub weights_file: String,
    pub weights_sha256: String,
}

/// A network together with everything needed to reproduce its inputs.
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub network: Network<f32>,
}

impl std::fmt::Debug for Checkpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Checkpoint")
            .field("meta", &self.meta)
            .finish_non_exhaustive()
    }
}

fn encode_weights(state: &[(TensorInfo, Vec<f32>)]) -> Vec<u8> {
    let mut out = Vec::with_capacity(state.iter().map(|s| 4 * s.1.len()).sum());
    for (_, v) in state {
        for x in v {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

impl Checkpoint {
    pub fn new(
        mut network: Network<f32>,
        train: TrainConfig,
        epoch: usize,
        history: Vec<EpochStats>,
        l_norm_mm: f64,
        image_spec: ImageSpec,
        input_norm: InputNorm,
    ) -> Self {
        let state = network.state();
        let meta = CheckpointMeta {
            format_version: CHECKPOINT_FORMAT_VERSION,
            model: network.config().clone(),
            train,
            epoch,
            history,
            l_norm_mm,
            image_spec_digest: image_spec.digest(),
            image_spec,
            render_mode: network.render_mode(),
            input_norm,
            tensors: state.iter().map(|s| s.0.clone()).collect(),
            weights_file: String::new(),
            weights_sha256: hex::encode(Sha256::digest(encode_weights(&state))),
        };
        Checkpoint { meta, network }
    }

    /// Writes `path` (metadata JSON) and a `.weights` file beside it.
    pub fn save(&mut self, path: &Path) -> Result<()> {
        let state = self.network.state();
        let bytes = encode_weights(&state);
        let weights_path = path.with_extension("weights");
        self.meta.weights_file = weights_path
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        self.meta.weights_sha256 = hex::encode(Sha256::digest(&bytes));
        self.meta.tensors = state.into_iter().map(|s| s.0).collect();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(&weights_path, &bytes).map_err(|e| Error::io(&weights_path, e))?;
        let json = serde_json::to_vec_pretty(&self.meta).map_err(|e| Error::json(path, e))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read(path).map_err(|e| Error::io(path, e))?;
        let meta: CheckpointMeta = serde_json::from_slice(&text).map_err(|e| Error::json(path, e))?;
        let weights_path = path.parent().unwrap_or(Path::new("")).join(&meta.weights_file);
        let bytes = fs::read(&weights_path).map_err(|e| Error::io(&weights_path, e))?;
        if hex::encode(Sha256::digest(&bytes)) != meta.weights_sha256 {
            return Err(Error::Parse {
                path: weights_path,
                message: "weights digest does not match the metadata".into(),
            });
        }
        let mut values = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
        let mut state = Vec::with_capacity(meta.tensors.len());
        for info in &meta.tensors {
            let len: usize = info.shape.iter().product();
            let v: Vec<f32> = values.by_ref().take(len).collect();
            if v.len() != len {
                return Err(Error::Parse {
                    path: weights_path,
                    message: format!("weights file ends inside `{}`", info.name),
                });
            }
            state.push((info.clone(), v));
        }
        let mut model = meta.model.clone();
        // Weights come from the file; avoid recursing into a pretrained source.
        model.init = Init::Random { seed: 0 };
        let mut network = Network::new(&model)?;
        network.load_state(&state)?;
        network.config.init = meta.model.init.clone();
        Ok(Checkpoint { meta, network })
    }

    pub fn render(&self, designed: &Profile, measured: &Profile, id: &str) -> Result<RenderedSample> {
        render_for(&self.meta, designed, measured, id)
    }

    /// Normalized outputs for already-rendered samples, in inference mode.
    pub fn forward_rendered(&mut self, rendered: &[RenderedSample]) -> Result<Vec<[f64; 2]>> {
        let inputs = self.meta.input_norm.batch::<f32>(rendered)?;
        let out = self.network.forward(&inputs, false)?;
        Ok(out.data.chunks(2).map(|c| [c[0] as f64, c[1] as f64]).collect())
    }

    /// Predicted displacements in mm for each pair; a pair that cannot be
    /// rendered gets its own error.
    pub fn predict_each(&mut self, pairs: &[(&Profile, &Profile)]) -> Vec<Result<Displacement>> {
        let mut out = Vec::with_capacity(pairs.len());
        for chunk in pairs.chunks(self.meta.train.eval_batch_size.max(1)) {
            let meta = &self.meta;
            let rendered: Vec<Result<RenderedSample>> = chunk
                .par_iter()
                .enumerate()
                .map(|(i, (d, m))| render_for(meta, d, m, &format!("pair{i}")))
                .collect();
            let good: Vec<RenderedSample> = rendered.iter().filter_map(|r| r.as_ref().ok().cloned()).collect();
            let mut preds = if good.is_empty() {
                Ok(Vec::new())
            } else {
                self.forward_rendered(&good)
            };
            let l = self.meta.l_norm_mm;
            let mut next = 0usize;
            for r in rendered {
                out.push(match (r, &mut preds) {
                    (Err(e), _) => Err(e),
                    (Ok(_), Ok(p)) => {
                        next += 1;
                        Ok(denormalize_label(p[next - 1], l))
                    }
                    (Ok(_), Err(e)) => Err(Error::Shape(e.to_string())),
                });
            }
        }
        out
    }

    pub fn predict_batch(&mut self, pairs: &[(&Profile, &Profile)]) -> Result<Vec<Displacement>> {
        self.predict_each(pairs).into_iter().collect()
    }

    pub fn predict_mm(&mut self, designed: &Profile, measured: &Profile) -> Result<MatchResult> {
        let d = self.predict_batch(&[(designed, measured)])?[0];
        Ok(MatchResult::prediction(d))
    }
}

fn render_for(meta: &CheckpointMeta, designed: &Profile, measured: &Profile, id: &str) -> Result<RenderedSample> {
    render_pair(
        designed,
        measured,
        None,
        &meta.image_spec,
        meta.render_mode,
        meta.l_norm_mm,
        id,
    )
}

pub fn predict_mm(checkpoint: &mut Checkpoint, designed: &Profile, measured: &Profile) -> Result<MatchResult> {
    checkpoint.predict_mm(designed, measured)
}

/// Result of a training run: the best-validation checkpoint and the full
/// per-epoch history.
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
}

/// Optional side channels of [`train_samples`].
#[derive(Default)]
pub struct TrainHooks<'a> {
    /// Directory for periodic checkpoints (`epoch_NNNN.json`).
    pub checkpoint_dir: Option<PathBuf>,
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochStats)>,
}

fn render_samples(samples: &[&Sample], spec: &ImageSpec, mode: RenderMode, l_norm: f64) -> Result<Vec<RenderedSample>> {
    samples
        .par_iter()
        .map(|s| render_pair(&s.designed, &s.measured, Some(s.label), spec, mode, l_norm, &s.id))
        .collect()
}

/// Moves both profiles by one random offset within `max_mm` per axis, kept
/// small enough that the pair stays on the canvas.
fn joint_shift(s: &Sample, max_mm: f64, spec: &ImageSpec, rng: &mut ChaCha8Rng) -> Sample {
    let (a_lo, a_hi) = s.designed.bounds();
    let (b_lo, b_hi) = s.measured.bounds();
    let half = 0.5 * spec.extent_mm() - (spec.line_width_px as f64 + 1.0) * spec.mm_per_px;
    let mut axis = |lo: f64, hi: f64| {
        let (min, max) = ((-half - lo).max(-max_mm), (half - hi).min(max_mm));
        if min < max {
            rng.random_range(min..max)
        } else {
            0.0
        }
    };
    let d = Displacement::new(
        axis(a_lo.x.min(b_lo.x), a_hi.x.max(b_hi.x)),
        axis(a_lo.y.min(b_lo.y), a_hi.y.max(b_hi.y)),
    );
    Sample {
        designed: s.designed.translate(d),
        measured: s.measured.translate(d),
        ..s.clone()
    }
}

/// Validation MSE (normalized units) and success rate at `tolerance_mm`.
pub fn evaluate_network(
    net: &mut Network<f32>,
    samples: &[&Sample],
    spec: &ImageSpec,
    norm: &InputNorm,
    l_norm: f64,
    tolerance_mm: f64,
    chunk: usize,
) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let criterion = SuccessCriterion::new(tolerance_mm);
    let (mut se, mut hits) = (0.0, 0usize);
    for part in samples.chunks(chunk.max(1)) {
        let rendered = render_samples(part, spec, net.render_mode(), l_norm)?;
        let out = net.forward(&norm.batch(&rendered)?, false)?;
        for (r, p) in rendered.iter().zip(out.data.chunks(2)) {
            let e = [p[0] as f64 - r.label_norm[0], p[1] as f64 - r.label_norm[1]];
            se += e[0] * e[0] + e[1] * e[1];
            if criterion.is_success(e[0] * l_norm, e[1] * l_norm) {
                hits += 1;
            }
        }
    }
    Ok((se / (2 * samples.len()) as f64, hits as f64 / samples.len() as f64))
}

/// Minibatch Adam on MSE over normalized labels. Batch order is a pure
/// function of `(seed, epoch)`; the returned checkpoint holds the weights of
/// the epoch with the lowest validation MSE (earliest on ties).
pub fn train_samples(
    mut net: Network<f32>,
    train: &[&Sample],
    val: &[&Sample],
    tcfg: &TrainConfig,
    spec: &ImageSpec,
    l_norm: f64,
    mut hooks: TrainHooks<'_>,
) -> Result<TrainOutcome> {
    tcfg.validate()?;
    spec.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config("training needs non-empty train and val splits".into()));
    }
    if spec.output_px() != net.config().input_px {
        return Err(Error::Shape(format!(
            "image spec renders {} px but the model expects {} px",
            spec.output_px(),
            net.config().input_px
        )));
    }
    let mode = net.render_mode();

    let mut acc = NormAccumulator::default();
    for part in train.chunks(tcfg.eval_batch_size) {
        for r in render_samples(part, spec, mode, l_norm)? {
            r.images.iter().for_each(|im| acc.add(im));
        }
    }
    let norm = acc.finish();

    let mut adam = Adam::<f32>::new(tcfg.learning_rate, tcfg.adam);
    let mut history: Vec<EpochStats> = Vec::with_capacity(tcfg.epochs);
    let mut best: Option<(f64, usize, Vec<(TensorInfo, Vec<f32>)>)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let total_steps = tcfg.epochs * train.len().div_ceil(tcfg.batch_size);
    let mut step = 0usize;

    for epoch in 0..tcfg.epochs {
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
        rng.set_stream(epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        for (b, idx) in order.chunks(tcfg.batch_size).enumerate() {
            let batch: Vec<&Sample> = idx.iter().map(|&i| train[i]).collect();
            let rendered = if tcfg.augment_shift_mm > 0.0 {
                let shifted: Vec<Sample> = batch
                    .iter()
                    .map(|s| joint_shift(s, tcfg.augment_shift_mm, spec, &mut rng))
                    .collect();
                render_samples(&shifted.iter().collect::<Vec<_>>(), spec, mode, l_norm)?
            } else {
                render_samples(&batch, spec, mode, l_norm)?
            };
            let inputs = norm.batch::<f32>(&rendered)?;
            let targets: Vec<[f64; 2]> = rendered.iter().map(|r| r.label_norm).collect();
            let out = net.forward(&inputs, true)?;
            let (loss, grad) = mse_loss(&out, &targets);
            if !loss.is_finite() {
                let ids: Vec<&str> = batch.iter().map(|s| s.id.as_str()).collect();
                let worst = out.data.iter().map(|v| v.abs()).fold(0.0f32, f32::max);
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    detail: format!("loss {loss}; max |output| {worst}; samples {}", ids.join(",")),
                });
            }
            net.zero_grad();
            net.backward(&grad);
            adam.lr = tcfg.lr_schedule.rate(tcfg.learning_rate, step, total_steps);
            adam.step(|f| net.visit_params(f));
            step += 1;
            loss_sum += loss * idx.len() as f64;
        }
        net.clear_cache();

        let (val_mse, val_success_rate) = evaluate_network(
            &mut net,
            val,
            spec,
            &norm,
            l_norm,
            tcfg.success_tolerance_mm,
            tcfg.eval_batch_size,
        )?;
        let stats = EpochStats {
            epoch,
            train_mse: loss_sum / train.len() as f64,
            val_mse,
            val_success_rate,
            seconds: start.elapsed().as_secs_f64(),
        };
        if let Some(cb) = hooks.on_epoch.as_mut() {
            cb(&stats);
        }
        history.push(stats);

        if best.as_ref().is_none_or(|(b, _, _)| val_mse < *b) {
            best = Some((val_mse, epoch, net.state()));
        }
        if let Some(dir) = &hooks.checkpoint_dir {
            if tcfg.checkpoint_every > 0 && (epoch + 1) % tcfg.checkpoint_every == 0 {
                let mut snap = Network::new(net.config())?;
                snap.load_state(&net.state())?;
                let mut ckpt = Checkpoint::new(snap, tcfg.clone(), epoch, history.clone(), l_norm, *spec, norm);
                ckpt.save(&dir.join(format!("epoch_{epoch:04}.json")))?;
            }
        }
    }

    let (best_epoch, state) = match best {
        Some((_, e, s)) => (e, s),
        None => (0, net.state()),
    };
    net.load_state(&state)?;
    let best = Checkpoint::new(net, tcfg.clone(), best_epoch, history.clone(), l_norm, *spec, norm);
    Ok(TrainOutcome {
        best,
        history,
        best_epoch,
    })
}

/// Loads the train and val splits of `manifest` and trains on them.
pub fn train(
    net: Network<f32>,
    manifest: &DatasetManifest,
    tcfg: &TrainConfig,
    spec: &ImageSpec,
    hooks: TrainHooks<'_>,
) -> Result<TrainOutcome> {
    let load = |split: Split| -> Result<Vec<Sample>> {
        manifest
            .records
            .par_iter()
            .filter(|r| r.split == split)
            .map(|r| manifest.load_sample(r))
            .collect()
    };
    let train_set = load(Split::Train)?;
    let val_set = load(Split::Val)?;
    let tr: Vec<&Sample> = train_set.iter().collect();
    let va: Vec<&Sample> = val_set.iter().collect();
    train_samples(net, &tr, &va, tcfg, spec, manifest.l_norm(), hooks)
}

/// History as CSV: `epoch,train_mse,val_mse,val_success_rate,seconds`.
pub fn write_history_csv(history: &[EpochStats], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let wrap = |e: csv::Error| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    for h in history {
        w.serialize(h).map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_samples, GenConfig};

    fn small_spec() -> ImageSpec {
        ImageSpec {
            width_px: 64,
            height_px: 64,
            mm_per_px: 2.4,
            line_width_px: 1,
            resize_to: None,
            ..ImageSpec::default()
        }
    }

    fn samples(seed: u64, n: usize) -> Vec<Sample> {
        generate_samples(&GenConfig::clean(seed, n))
            .unwrap()
            .into_iter()
            .map(|g| g.sample)
            .collect()
    }

    fn tiny(arch: Architecture, seed: u64) -> Network<f32> {
        Network::new(&ModelConfig::new(arch, BackbonePreset::Tiny, 64, seed)).unwrap()
    }

    fn inputs(net: &Network<f32>, s: &[Sample]) -> Vec<Tensor<f32>> {
        let rendered: Vec<RenderedSample> = s
            .iter()
            .map(|s| {
                render_pair(
                    &s.designed,
                    &s.measured,
                    Some(s.label),
                    &small_spec(),
                    net.render_mode(),
                    40.0,
                    &s.id,
                )
            })
            .collect::<Result<_>>()
            .unwrap();
        InputNorm::IDENTITY.batch(&rendered).unwrap()
    }

    fn refs(s: &[Sample]) -> Vec<&Sample> {
        s.iter().collect()
    }

    fn quick_train(lr: f64, epochs: usize, batch_size: usize) -> TrainConfig {
        TrainConfig {
            learning_rate: lr,
            epochs,
            batch_size,
            eval_batch_size: 16,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn output_is_two_values_for_every_config() {
        let s = samples(1, 2);
        for arch in [Architecture::SingleBranch, Architecture::DualBranch] {
            for preset in [
                BackbonePreset::Tiny,
                BackbonePreset::Small,
                BackbonePreset::Resnet18Like,
            ] {
                for sharing in [false, true] {
                    let mut cfg = ModelConfig::new(arch, preset, 64, 0);
                    cfg.branch_weight_sharing = sharing;
                    let mut net = Network::<f32>::new(&cfg).unwrap();
                    let out = net.forward(&inputs(&net, &s), false).unwrap();
                    assert_eq!(out.shape, [2, 2, 1, 1], "{arch:?} {preset:?}");
                }
            }
        }
    }

    #[test]
    fn unknown_preset_is_rejected() {
        assert!("huge".parse::<BackbonePreset>().is_err());
        assert!(serde_json::from_str::<ModelConfig>(r#"{"backbone_preset":"huge"}"#).is_err());
    }

    #[test]
    fn dual_branch_has_two_backbones_and_a_merge_layer() {
        for preset in [BackbonePreset::Tiny, BackbonePreset::Small] {
            let f = preset.feature_width();
            let mut single = Network::<f32>::new(&ModelConfig::new(Architecture::SingleBranch, preset, 64, 0)).unwrap();
            let mut dual = Network::<f32>::new(&ModelConfig::new(Architecture::DualBranch, preset, 64, 0)).unwrap();
            let backbone = single.param_count() - (2 * f + 2);
            assert_eq!(dual.param_count(), 2 * backbone + (2 * 2 * f + 2));

            let mut cfg = ModelConfig::new(Architecture::DualBranch, preset, 64, 0);
            cfg.branch_weight_sharing = true;
            let mut shared = Network::<f32>::new(&cfg).unwrap();
            assert_eq!(shared.param_count(), backbone + (2 * 2 * f + 2));
        }
    }

    #[test]
    fn outputs_are_unbounded() {
        let s = samples(2, 1);
        let mut net = tiny(Architecture::SingleBranch, 0);
        let x = inputs(&net, &s);
        let feats_nonzero = {
            net.head.weight.value.iter_mut().for_each(|w| *w = 0.0);
            net.head.bias.value = vec![0.0, 0.0];
            net.forward(&x, false).unwrap().data
        };
        assert_eq!(feats_nonzero, vec![0.0, 0.0]);
        net.head.weight.value.iter_mut().for_each(|w| *w = 1e3);
        let out = net.forward(&x, false).unwrap();
        assert!(out.data.iter().all(|v| v.abs() > 1.0), "{:?}", out.data);
    }

    #[test]
    fn zero_head_predicts_origin_in_mm() {
        let s = samples(3, 1);
        let mut net = tiny(Architecture::DualBranch, 0);
        net.head.weight.value.iter_mut().for_each(|w| *w = 0.0);
        net.head.bias.value = vec![0.0, 0.0];
        let mut ckpt = Checkpoint::new(
            net,
            TrainConfig::default(),
            0,
            vec![],
            40.0,
            small_spec(),
            InputNorm::IDENTITY,
        );
        let r = ckpt.predict_mm(&s[0].designed, &s[0].measured).unwrap();
        assert_eq!((r.displacement.dx, r.displacement.dy), (0.0, 0.0));
        assert!(r.error.is_none());
    }

    #[test]
    fn inference_is_deterministic_and_batch_independent() {
        let s = samples(4, 5);
        for arch in [Architecture::SingleBranch, Architecture::DualBranch] {
            let mut net = tiny(arch, 7);
            let x = inputs(&net, &s);
            let a = net.forward(&x, false).unwrap();
            let b = net.forward(&x, false).unwrap();
            assert_eq!(a.data, b.data);
            for i in 0..s.len() {
                let one = inputs(&net, &s[i..i + 1]);
                let o = net.forward(&one, false).unwrap();
                for k in 0..2 {
                    assert!((o.data[k] - a.data[2 * i + k]).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn wrong_input_shape_is_an_error() {
        let s = samples(5, 1);
        let mut single = tiny(Architecture::SingleBranch, 0);
        let dual = tiny(Architecture::DualBranch, 0);
        let two = inputs(&dual, &s);
        assert!(matches!(single.forward(&two, false), Err(Error::Shape(_))));
        let wrong = vec![Tensor::<f32>::zeros([1, 3, 32, 32])];
        assert!(matches!(single.forward(&wrong, false), Err(Error::Shape(_))));
    }

    #[test]
    fn mse_loss_gradient_matches_difference_quotient() {
        let pred = Tensor::from_vec([2, 2, 1, 1], vec![0.3f64, -0.2, 0.1, 0.5]);
        let targets = [[0.1, 0.0], [-0.4, 0.25]];
        let (loss, grad) = mse_loss(&pred, &targets);
        let direct: f64 = [0.2f64, -0.2, 0.5, 0.25].iter().map(|e| e * e).sum::<f64>() / 4.0;
        assert!((loss - direct).abs() < 1e-15);
        for i in 0..4 {
            let h = 1e-6;
            let mut p = pred.clone();
            p.data[i] += h;
            let up = mse_loss(&p, &targets).0;
            p.data[i] -= 2.0 * h;
            let down = mse_loss(&p, &targets).0;
            assert!(((up - down) / (2.0 * h) - grad.data[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn input_norm_matches_direct_statistics() {
        let s = samples(6, 3);
        let imgs: Vec<RasterImage> = s
            .iter()
            .map(|s| crate::raster::render_single(&s.designed, &s.measured, &small_spec(), &s.id).unwrap())
            .collect();
        let norm = InputNorm::fit(&imgs);
        for c in 0..3 {
            let vals: Vec<f64> = imgs
                .iter()
                .flat_map(|im| im.data().chunks(3).map(move |p| p[c] as f64 / 255.0))
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!((norm.mean[c] - mean).abs() < 1e-9);
            assert!((norm.std[c] - var.sqrt().max(1e-3)).abs() < 1e-9);
        }
        let t = norm.tensor::<f64>(&[&imgs[0]]).unwrap();
        let px = imgs[0].data()[0] as f64 / 255.0;
        assert!((t.data[0] - (px - norm.mean[0]) / norm.std[0]).abs() < 1e-6);
    }

    #[test]
    fn cosine_schedule_decays_to_zero() {
        let c = LrSchedule::Cosine;
        assert_eq!(c.rate(1e-3, 0, 100), 1e-3);
        assert!((c.rate(1e-3, 50, 100) - 5e-4).abs() < 1e-15);
        assert!(c.rate(1e-3, 100, 100).abs() < 1e-18);
        assert_eq!(LrSchedule::Constant.rate(1e-4, 77, 100), 1e-4);
    }

    #[test]
    fn joint_shift_keeps_label_and_canvas() {
        let spec = small_spec();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for s in samples(14, 20) {
            let moved = joint_shift(&s, 30.0, &spec, &mut rng);
            let dm = Displacement::between(s.measured.points()[0], moved.measured.points()[0]);
            let dd = Displacement::between(s.designed.points()[0], moved.designed.points()[0]);
            assert!((dm.dx - dd.dx).abs() < 1e-9 && (dm.dy - dd.dy).abs() < 1e-9);
            assert_eq!(moved.label, s.label);
            render_pair(
                &moved.designed,
                &moved.measured,
                Some(moved.label),
                &spec,
                RenderMode::Single,
                40.0,
                &moved.id,
            )
            .unwrap();
        }
    }

    #[test]
    fn zero_learning_rate_keeps_weights() {
        let s = samples(7, 12);
        let (tr, va) = s.split_at(8);
        let mut net = tiny(Architecture::SingleBranch, 3);
        let before: Vec<_> = net
            .state()
            .into_iter()
            .filter(|(i, _)| !i.name.contains("running"))
            .collect();
        let out = train_samples(
            net,
            &refs(tr),
            &refs(va),
            &quick_train(0.0, 3, 8),
            &small_spec(),
            40.0,
            TrainHooks::default(),
        )
        .unwrap();
        let mut best = out.best;
        let after: Vec<_> = best
            .network
            .state()
            .into_iter()
            .filter(|(i, _)| !i.name.contains("running"))
            .collect();
        assert_eq!(before, after);
        // One full batch per epoch: the training loss sees identical inputs and weights.
        let first = out.history[0].train_mse;
        for h in &out.history {
            assert!((h.train_mse - first).abs() <= 1e-9 * first);
        }
    }

    #[test]
    fn every_parameter_moves_between_epochs() {
        let dir = tempfile::tempdir().unwrap();
        let s = samples(8, 12);
        let (tr, va) = s.split_at(8);
        let net = tiny(Architecture::DualBranch, 4);
        let tcfg = TrainConfig {
            checkpoint_every: 1,
            ..quick_train(1e-3, 2, 4)
        };
        let hooks = TrainHooks {
            checkpoint_dir: Some(dir.path().to_path_buf()),
            on_epoch: None,
        };
        train_samples(net, &refs(tr), &refs(va), &tcfg, &small_spec(), 40.0, hooks).unwrap();
        let mut e0 = Checkpoint::load(&dir.path().join("epoch_0000.json")).unwrap();
        let mut e1 = Checkpoint::load(&dir.path().join("epoch_0001.json")).unwrap();
        let (mut n0, mut n1) = (Vec::new(), Vec::new());
        e0.network
            .visit_params(&mut |p| n0.push((p.name.clone(), p.value.clone())));
        e1.network
            .visit_params(&mut |p| n1.push((p.name.clone(), p.value.clone())));
        assert_eq!(n0.len(), n1.len());
        for ((name, a), (_, b)) in n0.iter().zip(&n1) {
            assert_ne!(a, b, "{name} did not change");
        }
    }

    #[test]
    fn training_is_reproducible_and_keeps_best_val() {
        let s = samples(9, 16);
        let (tr, va) = s.split_at(12);
        let run = || {
            let out = train_samples(
                tiny(Architecture::SingleBranch, 5),
                &refs(tr),
                &refs(va),
                &quick_train(1e-3, 4, 4),
                &small_spec(),
                40.0,
                TrainHooks::default(),
            )
            .unwrap();
            out
        };
        let a = run();
        let b = run();
        let strip = |h: &[EpochStats]| {
            h.iter()
                .map(|e| (e.train_mse, e.val_mse, e.val_success_rate))
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&a.history), strip(&b.history));

        let min = a.history.iter().map(|h| h.val_mse).fold(f64::INFINITY, f64::min);
        let first_min = a.history.iter().position(|h| h.val_mse == min).unwrap();
        assert_eq!(a.best_epoch, first_min);
        assert_eq!(a.best.meta.epoch, first_min);
        let mut best = a.best;
        let (val_mse, _) = evaluate_network(
            &mut best.network,
            &refs(va),
            &small_spec(),
            &best.meta.input_norm,
            40.0,
            0.4,
            16,
        )
        .unwrap();
        assert!((val_mse - min).abs() <= 1e-6 * min, "{val_mse} vs {min}");
    }

    #[test]
    fn training_reduces_loss_at_default_settings() {
        let s = samples(10, 40);
        let (tr, va) = s.split_at(32);
        let tcfg = TrainConfig {
            epochs: 20,
            ..TrainConfig::default()
        };
        let out = train_samples(
            tiny(Architecture::SingleBranch, 6),
            &refs(tr),
            &refs(va),
            &tcfg,
            &small_spec(),
            40.0,
            TrainHooks::default(),
        )
        .unwrap();
        let h = &out.history;
        assert!(h.last().unwrap().train_mse < h[0].train_mse, "{h:?}");
    }

    #[test]
    fn non_finite_loss_aborts_with_diagnostics() {
        let s = samples(11, 6);
        let (tr, va) = s.split_at(4);
        let mut net = tiny(Architecture::SingleBranch, 0);
        net.head.bias.value = vec![f32::NAN, 0.0];
        let err = train_samples(
            net,
            &refs(tr),
            &refs(va),
            &quick_train(1e-3, 1, 4),
            &small_spec(),
            40.0,
            TrainHooks::default(),
        )
        .err()
        .unwrap();
        match err {
            Error::NonFiniteLoss { epoch, batch, detail } => {
                assert_eq!((epoch, batch), (0, 0));
                assert!(detail.contains(&tr[0].id) || tr.iter().any(|s| detail.contains(&s.id)));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_predictions() {
        let dir = tempfile::tempdir().unwrap();
        let s = samples(12, 6);
        let (tr, va) = s.split_at(4);
        let out = train_samples(
            tiny(Architecture::DualBranch, 8),
            &refs(tr),
            &refs(va),
            &quick_train(1e-3, 2, 2),
            &small_spec(),
            40.0,
            TrainHooks::default(),
        )
        .unwrap();
        let mut best = out.best;
        let path = dir.path().join("m.json");
        best.save(&path).unwrap();
        let mut loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.meta, best.meta);
        let pairs: Vec<_> = s.iter().map(|s| (&s.designed, &s.measured)).collect();
        let a = best.predict_batch(&pairs).unwrap();
        let b = loaded.predict_batch(&pairs).unwrap();
        assert_eq!(a, b);
        assert_eq!(loaded.predict_batch(&pairs).unwrap(), b);

        // Tampered weights are refused.
        let w = dir.path().join("m.weights");
        let mut bytes = fs::read(&w).unwrap();
        bytes[0] ^= 1;
        fs::write(&w, bytes).unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }

    #[test]
    fn pretrained_init_loads_source_weights() {
        let dir = tempfile::tempdir().unwrap();
        let mut src = Checkpoint::new(
            tiny(Architecture::SingleBranch, 21),
            TrainConfig::default(),
            0,
            vec![],
            40.0,
            small_spec(),
            InputNorm::IDENTITY,
        );
        let path = dir.path().join("src.json");
        src.save(&path).unwrap();
        let mut cfg = ModelConfig::new(Architecture::SingleBranch, BackbonePreset::Tiny, 64, 0);
        cfg.init = Init::Pretrained {
            source: path.to_string_lossy().into_owned(),
        };
        let mut net = build_model(&cfg).unwrap();
        assert_eq!(net.state(), src.network.state());
    }

    #[test]
    fn off_canvas_pair_is_an_error() {
        let s = samples(13, 1);
        let mut ckpt = Checkpoint::new(
            tiny(Architecture::SingleBranch, 0),
            TrainConfig::default(),
            0,
            vec![],
            40.0,
            small_spec(),
            InputNorm::IDENTITY,
        );
        let far = s[0].measured.translate(Displacement::new(500.0, 0.0));
        assert!(ckpt.predict_mm(&s[0].designed, &far).is_err());
        let each = ckpt.predict_each(&[(&s[0].designed, &far), (&s[0].designed, &s[0].measured)]);
        assert!(each[0].is_err() && each[1].is_ok());
    }
}
