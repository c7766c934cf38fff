//! Embedded-Gaussian non-local attention with a zero-initialized residual gate.
//!
//! For flattened positions `i, j` of a `C×T×H×W` feature map:
//!
//! ```text
//! s_ij  = u(x_i)ᵀ v(x_j)
//! α_ij  = exp(s_ij) / Σ_j exp(s_ij)
//! y_i   = A(Σ_j α_ij g(x_j))
//! z_i   = γ_z · W_z(y_i) + x_i
//! ```
//!
//! `u`, `v`, `g` are 1×1×1 convolutions into a bottleneck of `C_b` channels and
//! `W_z` projects back to `C`, so the gated sum has the input's shape. `γ_z`
//! starts at zero, making a freshly initialized block the identity.

use rand::Rng;

use crate::error::{ensure, Result};
use crate::nn::Conv3dParams;
use crate::params::{ForwardCtx, ParamId, ParamStore};
use crate::tape::Var;
use crate::tensor::Tensor;

/// The activation `A` applied to the aggregated features.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Activation {
    #[default]
    Identity,
    Relu,
}

impl std::str::FromStr for Activation {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "identity" => Ok(Self::Identity),
            "relu" => Ok(Self::Relu),
            other => Err(format!("unknown activation {other:?} (expected identity|relu)")),
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Identity => "identity",
            Self::Relu => "relu",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NonLocalConfig {
    /// Bottleneck channels; `None` means half the input channels.
    pub bottleneck: Option<usize>,
    pub activation: Activation,
}

impl Default for NonLocalConfig {
    fn default() -> Self {
        Self {
            bottleneck: None,
            activation: Activation::Identity,
        }
    }
}

#[derive(Clone, Debug)]
pub struct NonLocalBlock {
    pub name: String,
    pub channels: usize,
    pub bottleneck: usize,
    pub w_u: Conv3dParams,
    pub w_v: Conv3dParams,
    pub w_g: Conv3dParams,
    pub w_z: Conv3dParams,
    pub gamma_z: ParamId,
    pub activation: Activation,
}

impl NonLocalBlock {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        config: NonLocalConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let bottleneck = config.bottleneck.unwrap_or(channels / 2);
        ensure!(
            bottleneck >= 1,
            "{name}: bottleneck must be at least one channel (input has {channels})"
        );
        let pointwise = |store: &mut ParamStore, part: &str, c_in: usize, c_out: usize, rng: &mut R| {
            Conv3dParams::register(store, &format!("{name}.{part}"), c_in, c_out, [1; 3], [1; 3], [0; 3], true, rng)
        };
        let w_u = pointwise(store, "w_u", channels, bottleneck, rng)?;
        let w_v = pointwise(store, "w_v", channels, bottleneck, rng)?;
        let w_g = pointwise(store, "w_g", channels, bottleneck, rng)?;
        let w_z = pointwise(store, "w_z", bottleneck, channels, rng)?;
        let gamma_z = store.add(format!("{name}.gamma_z"), Tensor::scalar(0.0), true)?;
        Ok(Self {
            name: name.to_string(),
            channels,
            bottleneck,
            w_u,
            w_v,
            w_g,
            w_z,
            gamma_z,
            activation: config.activation,
        })
    }

    fn check_input(&self, x: &Var<'_>) -> Result<[usize; 5]> {
        let s = x.shape();
        ensure!(
            s.len() == 5 && s[1] == self.channels,
            "{}: expects N×{}×T×H×W input, got {s:?}",
            self.name,
            self.channels
        );
        Ok([s[0], s[1], s[2], s[3], s[4]])
    }

    /// Projects with a pointwise conv and flattens positions: `N×C_b×L`.
    fn embed<'t>(&self, ctx: &ForwardCtx<'t, '_>, conv: &Conv3dParams, x: Var<'t>, n: usize, l: usize) -> Result<Var<'t>> {
        conv.forward(ctx, x)?.reshape(&[n, self.bottleneck, l])
    }

    /// Row-stochastic attention matrix `N×L×L`, `L = T·H·W`.
    pub fn attention_weights<'t>(&self, ctx: &ForwardCtx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let [n, _, t, h, w] = self.check_input(&x)?;
        let l = t * h * w;
        let u = self.embed(ctx, &self.w_u, x, n, l)?.permute(&[0, 2, 1])?;
        let v = self.embed(ctx, &self.w_v, x, n, l)?;
        u.bmm(v)?.softmax(2)
    }

    pub fn forward<'t>(&self, ctx: &ForwardCtx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let [n, _, t, h, w] = self.check_input(&x)?;
        let l = t * h * w;
        let alpha = self.attention_weights(ctx, x)?;
        let g = self.embed(ctx, &self.w_g, x, n, l)?.permute(&[0, 2, 1])?;
        let mut y = alpha.bmm(g)?;
        if self.activation == Activation::Relu {
            y = y.relu();
        }
        let y = y.permute(&[0, 2, 1])?.reshape(&[n, self.bottleneck, t, h, w])?;
        let z = self.w_z.forward(ctx, y)?;
        z.mul_scalar_var(ctx.param(self.gamma_z))?.add(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Mode;
    use crate::tape::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn block(channels: usize, seed: u64) -> (ParamStore, NonLocalBlock) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = NonLocalBlock::register(&mut store, "nl", channels, NonLocalConfig::default(), &mut rng).unwrap();
        (store, b)
    }

    #[test]
    fn fresh_block_is_identity() {
        let (store, b) = block(4, 1);
        assert_eq!(store.value(b.gamma_z).item(), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xv = Tensor::randn(&[2, 4, 2, 3, 3], 1.0, &mut rng);
        let tape = Tape::new();
        let ctx = ForwardCtx::new(&tape, &store, Mode::Eval);
        let z = b.forward(&ctx, tape.constant(xv.clone())).unwrap();
        assert_eq!(*z.value(), xv);
    }

    #[test]
    fn singleton_position_attends_to_itself() {
        let (store, b) = block(4, 3);
        let tape = Tape::new();
        let ctx = ForwardCtx::new(&tape, &store, Mode::Eval);
        let a = b.attention_weights(&ctx, tape.constant(Tensor::ones(&[1, 4, 1, 1, 1]))).unwrap();
        assert_eq!(a.value().data(), &[1.0]);
    }

    #[test]
    fn zero_query_projection_gives_uniform_rows() {
        let (mut store, b) = block(4, 4);
        for id in [b.w_u.weight, b.w_u.bias.unwrap()] {
            let shape = store.value(id).shape().to_vec();
            store.set_value(id, Tensor::zeros(&shape)).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tape = Tape::new();
        let ctx = ForwardCtx::new(&tape, &store, Mode::Eval);
        let a = b
            .attention_weights(&ctx, tape.constant(Tensor::randn(&[1, 4, 1, 2, 3], 1.0, &mut rng)))
            .unwrap();
        assert!(a.value().data().iter().all(|&v| (v - 1.0 / 6.0).abs() < 1e-7));
    }

    #[test]
    fn rejects_channel_mismatch() {
        let (store, b) = block(4, 6);
        let tape = Tape::new();
        let ctx = ForwardCtx::new(&tape, &store, Mode::Eval);
        assert!(b.forward(&ctx, tape.constant(Tensor::ones(&[1, 3, 1, 2, 2]))).is_err());
    }
}
