//! Parameterized layers registered in a [`ParamStore`].

use rand::Rng;

use crate::error::{ensure, Result};
use crate::nn::conv::{conv3d, Geometry3d};
use crate::nn::linear::linear;
use crate::nn::norm::{batch_norm, BnStats};
use crate::params::{ForwardCtx, Mode, ParamId, ParamStore};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Batch-norm running-statistic momentum.
pub const BN_MOMENTUM: f32 = 0.1;
pub const BN_EPS: f32 = 1e-5;

/// A 3D convolution: `C_out×C_in×t×k_h×k_w` weights plus geometry.
#[derive(Clone, Debug)]
pub struct Conv3dParams {
    pub name: String,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub c_in: usize,
    pub c_out: usize,
    pub geometry: Geometry3d,
}

impl Conv3dParams {
    /// Registers `{name}.weight` (Kaiming-normal, fan-out) and optionally a zero `{name}.bias`.
    #[allow(clippy::too_many_arguments)]
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: [usize; 3],
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        ensure!(c_in >= 1 && c_out >= 1, "{name}: channel counts must be positive");
        let geometry = Geometry3d::new(kernel, stride, padding)?;
        let fan_out = c_out * kernel.iter().product::<usize>();
        let std = (2.0 / fan_out as f32).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::randn(&[c_out, c_in, kernel[0], kernel[1], kernel[2]], std, rng),
            true,
        )?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(&[c_out]), true)?)
        } else {
            None
        };
        Ok(Self {
            name: name.to_string(),
            weight,
            bias,
            c_in,
            c_out,
            geometry,
        })
    }

    pub fn forward<'t>(&self, ctx: &ForwardCtx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        conv3d(x, w, b, self.geometry.stride, self.geometry.padding)
    }

    /// Output `[C, T, H, W]` for an input `[C, T, H, W]`.
    pub fn output_shape(&self, input: [usize; 4]) -> Result<[usize; 4]> {
        ensure!(
            input[0] == self.c_in,
            "{}: expects {} input channels, got {}",
            self.name,
            self.c_in,
            input[0]
        );
        let [t, h, w] = self.geometry.output_extents([input[1], input[2], input[3]])?;
        Ok([self.c_out, t, h, w])
    }
}

/// Per-channel batch normalization with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm3dParams {
    pub name: String,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub momentum: f32,
    pub eps: f32,
}

impl BatchNorm3dParams {
    pub fn register(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            name: name.to_string(),
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[channels]), true)?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), true)?,
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[channels]), false)?,
            running_var: store.add(format!("{name}.running_var"), Tensor::ones(&[channels]), false)?,
            channels,
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        })
    }

    pub fn forward<'t>(&self, ctx: &ForwardCtx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let (gamma, beta) = (ctx.param(self.gamma), ctx.param(self.beta));
        let store = ctx.store();
        match ctx.mode() {
            Mode::Eval => {
                let stats = BnStats::Running {
                    mean: store.value(self.running_mean),
                    var: store.value(self.running_var),
                };
                Ok(batch_norm(x, gamma, beta, stats, self.eps)?.0)
            }
            Mode::Train => {
                let (y, observed) = batch_norm(x, gamma, beta, BnStats::Batch, self.eps)?;
                let observed = observed.expect("training mode reports batch statistics");
                let m = self.momentum;
                let blend = |old: &Tensor, new: &[f32]| {
                    Tensor::from_fn(old.shape(), |i| (1.0 - m) * old.data()[i] + m * new[i])
                };
                ctx.push_update(self.running_mean, blend(store.value(self.running_mean), &observed.mean));
                ctx.push_update(self.running_var, blend(store.value(self.running_var), &observed.var_unbiased));
                Ok(y)
            }
        }
    }
}

/// Fully connected layer with `D×D'` weights.
#[derive(Clone, Debug)]
pub struct LinearParams {
    pub name: String,
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl LinearParams {
    /// Uniform `±1/sqrt(d_in)` initialization for weights and bias.
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / (d_in as f32).sqrt();
        Ok(Self {
            name: name.to_string(),
            weight: store.add(format!("{name}.weight"), Tensor::uniform(&[d_in, d_out], -bound, bound, rng), true)?,
            bias: store.add(format!("{name}.bias"), Tensor::uniform(&[d_out], -bound, bound, rng), true)?,
            d_in,
            d_out,
        })
    }

    pub fn forward<'t>(&self, ctx: &ForwardCtx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        linear(x, ctx.param(self.weight), ctx.param(self.bias))
    }
}

/// Basic two-convolution residual block.
#[derive(Clone, Debug)]
pub struct ResidualBlock3d {
    pub name: String,
    pub conv1: Conv3dParams,
    pub bn1: BatchNorm3dParams,
    pub conv2: Conv3dParams,
    pub bn2: BatchNorm3dParams,
    pub downsample: Option<(Conv3dParams, BatchNorm3dParams)>,
}

impl ResidualBlock3d {
    /// Registers a block with 3-wide spatial kernels and temporal extent
    /// `kt`. A 1×1×1 projection shortcut is added when the stride or
    /// channel count changes.
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kt: usize,
        stride: [usize; 3],
        rng: &mut R,
    ) -> Result<Self> {
        let pad = [kt / 2, 1, 1];
        let conv1 = Conv3dParams::register(store, &format!("{name}.conv1"), c_in, c_out, [kt, 3, 3], stride, pad, false, rng)?;
        let bn1 = BatchNorm3dParams::register(store, &format!("{name}.bn1"), c_out)?;
        let conv2 = Conv3dParams::register(store, &format!("{name}.conv2"), c_out, c_out, [kt, 3, 3], [1, 1, 1], pad, false, rng)?;
        let bn2 = BatchNorm3dParams::register(store, &format!("{name}.bn2"), c_out)?;
        let downsample = if stride != [1, 1, 1] || c_in != c_out {
            let conv = Conv3dParams::register(
                store,
                &format!("{name}.downsample.conv"),
                c_in,
                c_out,
                [1, 1, 1],
                stride,
                [0, 0, 0],
                false,
                rng,
            )?;
            let bn = BatchNorm3dParams::register(store, &format!("{name}.downsample.bn"), c_out)?;
            Some((conv, bn))
        } else {
            None
        };
        Ok(Self {
            name: name.to_string(),
            conv1,
            bn1,
            conv2,
            bn2,
            downsample,
        })
    }

    /// `relu(bn2(conv2(relu(bn1(conv1(x))))) + shortcut(x))`.
    ///
    /// Captures the second convolution's output as `{name}.conv2`.
    pub fn forward<'t>(&self, ctx: &ForwardCtx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.bn1.forward(ctx, self.conv1.forward(ctx, x)?)?.relu();
        let c2 = self.conv2.forward(ctx, h)?;
        ctx.capture(format!("{}.conv2", self.name), c2);
        let main = self.bn2.forward(ctx, c2)?;
        let shortcut = match &self.downsample {
            Some((conv, bn)) => bn.forward(ctx, conv.forward(ctx, x)?)?,
            None => x,
        };
        ensure!(
            main.shape() == shortcut.shape(),
            "{}: residual path {:?} does not match shortcut {:?}",
            self.name,
            main.shape(),
            shortcut.shape()
        );
        Ok(main.add(shortcut)?.relu())
    }

    pub fn output_shape(&self, input: [usize; 4]) -> Result<[usize; 4]> {
        let mid = self.conv1.output_shape(input)?;
        let out = self.conv2.output_shape(mid)?;
        let short = match &self.downsample {
            Some((conv, _)) => conv.output_shape(input)?,
            None => input,
        };
        ensure!(
            out == short,
            "{}: residual path {out:?} does not match shortcut {short:?}",
            self.name
        );
        Ok(out)
    }
}
