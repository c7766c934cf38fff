//! 3D ResNet-18 backbone with an optional non-local block, two fully
//! connected layers, and a fatigue head.

use std::collections::HashSet;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure, Result, WeightFileError};
use crate::heads::LossConfig;
use crate::nn::{maxpool3d, BatchNorm3dParams, Conv3dParams, Geometry3d, LinearParams, ResidualBlock3d};
use crate::nonlocal::{NonLocalBlock, NonLocalConfig};
use crate::params::{ForwardCtx, ParamId, ParamStore};
use crate::tape::Var;
use crate::tensor::{format_shape, Tensor};
use crate::weights;

/// Frames per clip.
pub const CLIP_LEN: usize = 32;
pub const SUPPORTED_INPUT_SIZES: [usize; 2] = [112, 224];
/// Layer whose activations Grad-CAM uses by default.
pub const DEFAULT_CAM_LAYER: &str = "stage4.block2.conv2";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionPosition {
    None,
    AfterBlock3,
    AfterBlock4,
}

impl AttentionPosition {
    /// Stage whose output feeds the block.
    pub fn stage(&self) -> Option<usize> {
        match self {
            Self::None => None,
            Self::AfterBlock3 => Some(3),
            Self::AfterBlock4 => Some(4),
        }
    }
}

impl std::str::FromStr for AttentionPosition {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "none" => Ok(Self::None),
            "after_block3" => Ok(Self::AfterBlock3),
            "after_block4" => Ok(Self::AfterBlock4),
            other => Err(format!("unknown attention position {other:?} (expected none|after_block3|after_block4)")),
        }
    }
}

impl std::fmt::Display for AttentionPosition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::AfterBlock3 => "after_block3",
            Self::AfterBlock4 => "after_block4",
        })
    }
}

/// 3D kernels throughout, or per-frame 2D kernels (temporal extent and stride 1)
/// with clip scores averaged over frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Backbone {
    R3d,
    R2d,
}

impl std::str::FromStr for Backbone {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "3d" | "r3d" => Ok(Self::R3d),
            "2d" | "r2d" => Ok(Self::R2d),
            other => Err(format!("unknown backbone {other:?} (expected 3d|2d)")),
        }
    }
}

impl std::fmt::Display for Backbone {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::R3d => "3d",
            Self::R2d => "2d",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Square frame size, 112 or 224.
    pub input_size: usize,
    pub clip_len: usize,
    /// Stage-1 channels; stages use 1×, 2×, 4×, 8× this width.
    pub base_width: usize,
    /// Temporal extent of the stem kernel.
    pub stem_temporal: usize,
    pub backbone: Backbone,
    pub attention: AttentionPosition,
    pub nonlocal: NonLocalConfig,
    pub head: LossConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 112,
            clip_len: CLIP_LEN,
            base_width: 64,
            stem_temporal: 5,
            backbone: Backbone::R3d,
            attention: AttentionPosition::AfterBlock3,
            nonlocal: NonLocalConfig::default(),
            head: LossConfig::default(),
        }
    }
}

/// Channel and stride schedule of the four residual stages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerPlan {
    pub channels: [usize; 4],
    pub spatial_strides: [usize; 4],
    pub temporal_strides: [usize; 4],
    /// Temporal extent of residual-block kernels.
    pub block_temporal: usize,
    pub stem_temporal: usize,
    pub pool_temporal_stride: usize,
    /// Width of the first fully connected layer.
    pub hidden: usize,
}

impl LayerPlan {
    pub fn for_config(cfg: &ModelConfig) -> Self {
        let w = cfg.base_width;
        let is_3d = cfg.backbone == Backbone::R3d;
        Self {
            channels: [w, 2 * w, 4 * w, 8 * w],
            spatial_strides: [1, 2, 2, 2],
            temporal_strides: if is_3d { [1, 2, 2, 2] } else { [1; 4] },
            block_temporal: if is_3d { 3 } else { 1 },
            stem_temporal: if is_3d { cfg.stem_temporal } else { 1 },
            pool_temporal_stride: if is_3d { 2 } else { 1 },
            hidden: 4 * w,
        }
    }
}

/// The assembled network and its parameters.
#[derive(Clone, Debug)]
pub struct ModelGraph {
    pub config: ModelConfig,
    pub plan: LayerPlan,
    pub store: ParamStore,
    stem_conv: Conv3dParams,
    stem_bn: BatchNorm3dParams,
    pool: Geometry3d,
    stages: Vec<Vec<ResidualBlock3d>>,
    attention: Option<(AttentionPosition, NonLocalBlock)>,
    fc1: LinearParams,
    fc2: LinearParams,
}

/// Builds the network with parameters drawn from `seed`.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<ModelGraph> {
    ensure!(
        SUPPORTED_INPUT_SIZES.contains(&config.input_size),
        "unsupported input size {} (expected 112 or 224)",
        config.input_size
    );
    ensure!(config.clip_len == CLIP_LEN, "clip length must be {CLIP_LEN}, got {}", config.clip_len);
    ensure!(config.base_width >= 1, "base width must be positive");
    ensure!(config.stem_temporal >= 1, "stem temporal extent must be positive");
    config.head.validate()?;

    let plan = LayerPlan::for_config(config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let kt = plan.stem_temporal;
    let stem_conv = Conv3dParams::register(
        &mut store,
        "stem.conv",
        3,
        plan.channels[0],
        [kt, 7, 7],
        [1, 2, 2],
        [kt / 2, 3, 3],
        false,
        &mut rng,
    )?;
    let stem_bn = BatchNorm3dParams::register(&mut store, "stem.bn", plan.channels[0])?;
    let pool = if config.backbone == Backbone::R3d {
        Geometry3d::new([3, 3, 3], [plan.pool_temporal_stride, 2, 2], [1, 1, 1])?
    } else {
        Geometry3d::new([1, 3, 3], [1, 2, 2], [0, 1, 1])?
    };

    let mut stages = Vec::new();
    let mut c_in = plan.channels[0];
    for s in 0..4 {
        let c_out = plan.channels[s];
        let stride = [plan.temporal_strides[s], plan.spatial_strides[s], plan.spatial_strides[s]];
        let first = ResidualBlock3d::register(
            &mut store,
            &format!("stage{}.block1", s + 1),
            c_in,
            c_out,
            plan.block_temporal,
            stride,
            &mut rng,
        )?;
        let second = ResidualBlock3d::register(
            &mut store,
            &format!("stage{}.block2", s + 1),
            c_out,
            c_out,
            plan.block_temporal,
            [1, 1, 1],
            &mut rng,
        )?;
        stages.push(vec![first, second]);
        c_in = c_out;
    }
    let fc1 = LinearParams::register(&mut store, "fc1", plan.channels[3], plan.hidden, &mut rng)?;
    let fc2 = LinearParams::register(&mut store, "fc2", plan.hidden, config.head.output_width(), &mut rng)?;

    let mut model = ModelGraph {
        config: ModelConfig {
            attention: AttentionPosition::None,
            ..config.clone()
        },
        plan,
        store,
        stem_conv,
        stem_bn,
        pool,
        stages,
        attention: None,
        fc1,
        fc2,
    };
    if config.attention != AttentionPosition::None {
        model = insert_attention(model, config.attention, config.nonlocal, &mut rng)?;
    }
    Ok(model)
}

/// Adds a non-local block after stage 3 or 4, sized to that stage's channels.
pub fn insert_attention<R: rand::Rng + ?Sized>(
    mut model: ModelGraph,
    position: AttentionPosition,
    config: NonLocalConfig,
    rng: &mut R,
) -> Result<ModelGraph> {
    let Some(stage) = position.stage() else {
        return Ok(model);
    };
    ensure!(model.attention.is_none(), "model already has a non-local block");
    let channels = model.plan.channels[stage - 1];
    if let Some(b) = config.bottleneck {
        ensure!(
            b >= 1 && b <= channels,
            "bottleneck of {b} channels is incompatible with {channels} feature channels"
        );
    }
    let block = NonLocalBlock::register(&mut model.store, "nonlocal", channels, config, rng)?;
    model.attention = Some((position, block));
    model.config.attention = position;
    model.config.nonlocal = config;
    Ok(model)
}

impl ModelGraph {
    pub fn attention_block(&self) -> Option<&NonLocalBlock> {
        self.attention.as_ref().map(|(_, b)| b)
    }

    pub fn head(&self) -> &LossConfig {
        &self.config.head
    }

    /// Maps `N×3×T×H×W` clips to `N×width` head outputs.
    pub fn forward<'t>(&self, ctx: &ForwardCtx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let s = x.shape();
        ensure!(
            s.len() == 5 && s[1] == 3,
            "model input must be N×3×T×H×W, got {s:?}"
        );
        let mut h = self.stem_bn.forward(ctx, self.stem_conv.forward(ctx, x)?)?.relu();
        ctx.capture("stem", h);
        h = maxpool3d(h, self.pool.kernel, self.pool.stride, self.pool.padding)?;
        for (i, blocks) in self.stages.iter().enumerate() {
            for block in blocks {
                h = block.forward(ctx, h)?;
            }
            ctx.capture(format!("stage{}", i + 1), h);
            if let Some((pos, nl)) = &self.attention {
                if pos.stage() == Some(i + 1) {
                    h = nl.forward(ctx, h)?;
                    ctx.capture("nonlocal", h);
                }
            }
        }
        let [n, c, t, hh, ww] = <[usize; 5]>::try_from(h.shape()).expect("5D features");
        match self.config.backbone {
            Backbone::R3d => {
                let pooled = h.reshape(&[n, c, t * hh * ww])?.mean_axis(2)?;
                self.head_layers(ctx, pooled)
            }
            Backbone::R2d => {
                let per_frame = h
                    .reshape(&[n, c, t, hh * ww])?
                    .mean_axis(3)?
                    .permute(&[0, 2, 1])?
                    .reshape(&[n * t, c])?;
                let scores = self.head_layers(ctx, per_frame)?;
                let width = self.config.head.output_width();
                scores.reshape(&[n, t, width])?.mean_axis(1)
            }
        }
    }

    fn head_layers<'t>(&self, ctx: &ForwardCtx<'t, '_>, features: Var<'t>) -> Result<Var<'t>> {
        let h = self.fc1.forward(ctx, features)?.relu();
        self.fc2.forward(ctx, h)
    }

    /// Writes every parameter and running statistic as an `NLW1` file.
    pub fn save_weights(&self, path: &Path) -> Result<()> {
        weights::save_weights(path, &self.store.named_tensors())
    }

    /// Replaces all parameters from named tensors; names and shapes must match exactly.
    pub fn load_named(&mut self, tensors: Vec<(String, Tensor)>) -> Result<()> {
        let staged = self.check_names(tensors)?;
        let loaded: HashSet<&str> = staged.iter().map(|(_, name, _)| name.as_str()).collect();
        if let Some((_, p)) = self.store.iter().find(|(_, p)| !loaded.contains(p.name.as_str())) {
            return Err(WeightFileError::MissingName(p.name.clone()).into());
        }
        for (id, _, t) in staged {
            self.store.set_value(id, t)?;
        }
        Ok(())
    }

    fn check_names(&self, tensors: Vec<(String, Tensor)>) -> Result<Vec<(ParamId, String, Tensor)>> {
        tensors
            .into_iter()
            .map(|(name, t)| {
                let id = self
                    .store
                    .id(&name)
                    .ok_or_else(|| WeightFileError::UnknownName(name.clone()))?;
                let expected = self.store.value(id).shape();
                if expected != t.shape() {
                    return Err(WeightFileError::ShapeMismatch {
                        name,
                        expected: expected.to_vec(),
                        found: t.shape().to_vec(),
                    }
                    .into());
                }
                Ok((id, name, t))
            })
            .collect()
    }

    pub fn load_weights(&mut self, path: &Path) -> Result<()> {
        let tensors = weights::load_weights(path)?;
        self.load_named(tensors)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum InflationMode {
    /// Each temporal slice is `W / t`, so slices sum to `W`.
    #[default]
    ReplicateDivide,
    Replicate,
}

impl std::str::FromStr for InflationMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "replicate_divide" => Ok(Self::ReplicateDivide),
            "replicate" => Ok(Self::Replicate),
            other => Err(format!("unknown inflation mode {other:?} (expected replicate_divide|replicate)")),
        }
    }
}

impl std::fmt::Display for InflationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::ReplicateDivide => "replicate_divide",
            Self::Replicate => "replicate",
        })
    }
}

/// Repeats a `C_out×C_in×k×k` kernel `t` times along a new temporal axis.
pub fn inflate_2d_to_3d(weights2d: &Tensor, t: usize, mode: InflationMode) -> Result<Tensor> {
    ensure!(t >= 1, "temporal extent must be at least 1");
    let &[co, ci, kh, kw] = weights2d.shape() else {
        return Err(crate::Error::Contract(format!(
            "2D kernel must be rank 4, got {}",
            format_shape(weights2d.shape())
        )));
    };
    let divisor = match mode {
        InflationMode::ReplicateDivide => t as f32,
        InflationMode::Replicate => 1.0,
    };
    let plane = kh * kw;
    let mut data = Vec::with_capacity(weights2d.numel() * t);
    for filter in weights2d.data().chunks(plane) {
        for _ in 0..t {
            data.extend(filter.iter().map(|&v| v / divisor));
        }
    }
    Tensor::new(&[co, ci, t, kh, kw], data)
}

/// Outcome of loading a 2D weight file into a 3D model.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct InflationReport {
    pub inflated: Vec<String>,
    pub copied: Vec<String>,
    /// Model parameters the file did not provide; they keep their initialization.
    pub untouched: Vec<String>,
}

/// Loads 2D weights into `model`: rank-4 kernels are inflated to the matching
/// 3D kernel's temporal extent, other tensors are copied. Every name in the file
/// must exist in the model with a compatible shape.
pub fn inflate_into_model(
    model: &mut ModelGraph,
    tensors2d: Vec<(String, Tensor)>,
    mode: InflationMode,
) -> Result<InflationReport> {
    let mut report = InflationReport::default();
    let mut staged = Vec::with_capacity(tensors2d.len());
    for (name, t) in tensors2d {
        let id = model
            .store
            .id(&name)
            .ok_or_else(|| WeightFileError::UnknownName(name.clone()))?;
        let target = model.store.value(id).shape().to_vec();
        let mismatch = |found: &[usize]| WeightFileError::ShapeMismatch {
            name: name.clone(),
            expected: target.clone(),
            found: found.to_vec(),
        };
        let value = if t.rank() == 4 && target.len() == 5 {
            let [co, ci, kt, kh, kw] = <[usize; 5]>::try_from(target.as_slice()).expect("rank 5");
            if t.shape() != [co, ci, kh, kw] {
                return Err(mismatch(t.shape()).into());
            }
            report.inflated.push(name.clone());
            inflate_2d_to_3d(&t, kt, mode)?
        } else if t.shape() == target.as_slice() {
            report.copied.push(name.clone());
            t
        } else {
            return Err(mismatch(t.shape()).into());
        };
        staged.push((id, value));
    }
    let provided: HashSet<ParamId> = staged.iter().map(|(id, _)| *id).collect();
    report.untouched = model
        .store
        .iter()
        .filter(|(id, _)| !provided.contains(id))
        .map(|(_, p)| p.name.clone())
        .collect();
    for (id, value) in staged {
        model.store.set_value(id, value)?;
    }
    Ok(report)
}

/// Exports a 2D-backbone model as a 2D weight file: kernels of temporal extent 1
/// lose that axis, everything else is copied.
pub fn export_2d_weights(model: &ModelGraph) -> Result<Vec<(String, Tensor)>> {
    ensure!(
        model.config.backbone == Backbone::R2d,
        "2D weights can only be exported from a 2D backbone"
    );
    model
        .store
        .named_tensors()
        .into_iter()
        .map(|(name, t)| match *t.shape() {
            [co, ci, 1, kh, kw] => Ok((name, t.reshape(&[co, ci, kh, kw])?)),
            _ => Ok((name, t)),
        })
        .collect()
}

/// One row of a shape trace: a layer name and its per-sample output shape
/// (`C×T×H×W` for feature maps, `D` after pooling).
pub type TraceEntry = (String, Vec<usize>);

/// Propagates a clip shape `T×C×H×W` through the layer plan without computing.
pub fn shape_trace(model: &ModelGraph, clip_shape: [usize; 4]) -> Result<Vec<TraceEntry>> {
    let [t, c, h, w] = clip_shape;
    let cfg = &model.config;
    ensure!(t == cfg.clip_len, "input: clip must have {} frames, got {t}", cfg.clip_len);
    ensure!(c == 3, "input: clip must have 3 channels, got {c}");
    ensure!(
        h == cfg.input_size && w == cfg.input_size,
        "input: frames must be {0}×{0}, got {h}×{w}",
        cfg.input_size
    );
    let mut trace = vec![("input".to_string(), vec![c, t, h, w])];
    let wrap = |name: &str, r: Result<[usize; 4]>| {
        r.map_err(|e| crate::Error::Contract(format!("shape trace failed at {name}: {e}")))
    };
    let mut shape = wrap("stem.conv", model.stem_conv.output_shape([c, t, h, w]))?;
    trace.push(("stem.conv".into(), shape.to_vec()));
    let pooled = model
        .pool
        .output_extents([shape[1], shape[2], shape[3]])
        .map_err(|e| crate::Error::Contract(format!("shape trace failed at stem.pool: {e}")))?;
    let [pt, ph, pw] = pooled;
    shape = [shape[0], pt, ph, pw];
    trace.push(("stem.pool".into(), shape.to_vec()));
    for (i, blocks) in model.stages.iter().enumerate() {
        for block in blocks {
            shape = wrap(&block.name, block.output_shape(shape))?;
            trace.push((block.name.clone(), shape.to_vec()));
        }
        let stage = format!("stage{}", i + 1);
        trace.push((stage.clone(), shape.to_vec()));
        if let Some((pos, nl)) = &model.attention {
            if pos.stage() == Some(i + 1) {
                ensure!(
                    nl.channels == shape[0],
                    "shape trace failed at nonlocal: block has {} channels, features have {}",
                    nl.channels,
                    shape[0]
                );
                trace.push(("nonlocal".into(), shape.to_vec()));
            }
        }
    }
    trace.push(("pool".into(), vec![shape[0]]));
    trace.push(("fc1".into(), vec![model.fc1.d_out]));
    trace.push(("fc2".into(), vec![model.fc2.d_out]));
    Ok(trace)
}

/// Renders a trace as aligned text lines.
pub fn format_trace(trace: &[TraceEntry]) -> String {
    trace
        .iter()
        .map(|(name, shape)| format!("{name:<16} {}\n", format_shape(shape)))
        .collect()
}
