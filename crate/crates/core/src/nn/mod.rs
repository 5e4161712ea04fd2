//! Neural building blocks. Layers own [`ParamId`]s into a shared
//! [`ParamStore`] and record their forward pass into a [`Graph`].

mod attention;
mod mixer;

pub use attention::{CrossAttention, Mlp, MultiHeadSelfAttention, RelativePositionBias, TransformerBlock};
pub use mixer::TokenMixer;

use crate::error::{Error, Result};
use crate::tensor::{rng, Graph, ParamId, ParamStore, Tensor, Var};

/// Standard deviation of the truncated-normal init of the latent code.
pub const LATENT_INIT_STD: f64 = 0.02;

/// Fully connected layer, `y = x · Wᵀ + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, path: &str, in_dim: usize, out_dim: usize, bias: bool, seed: u64) -> Result<Self> {
        let wpath = format!("{path}.weight");
        // Fan-in scaled so that stacked linears without residuals (the token
        // mixers) keep activations at unit scale.
        let std = 1.0 / (in_dim as f64).sqrt();
        let w = rng::truncated_normal(&mut rng::stream(seed, &wpath), in_dim * out_dim, std);
        let weight = store.register(wpath, Tensor::new(vec![out_dim, in_dim], w)?, true)?;
        let bias = if bias {
            Some(store.register(format!("{path}.bias"), Tensor::zeros(&[out_dim]), false)?)
        } else {
            None
        };
        Ok(Linear { weight, bias, in_dim, out_dim })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        if g.shape(x).last() != Some(&self.in_dim) {
            return Err(Error::shape(format!(
                "linear expects last dim {}, got shape {:?}",
                self.in_dim,
                g.shape(x)
            )));
        }
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.linear(x, w, b)
    }

    pub fn param_count(&self) -> usize {
        self.in_dim * self.out_dim + if self.bias.is_some() { self.out_dim } else { 0 }
    }
}

/// 2-D convolution over `[B, C, H, W]` with square kernels.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        path: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        seed: u64,
    ) -> Result<Self> {
        if groups == 0 || !in_ch.is_multiple_of(groups) || !out_ch.is_multiple_of(groups) {
            return Err(Error::config(path, format!("groups {groups} must divide {in_ch} and {out_ch}")));
        }
        let fan_in = in_ch / groups * kernel * kernel;
        let std = (2.0 / fan_in as f64).sqrt();
        let wpath = format!("{path}.weight");
        let n = out_ch * fan_in;
        let w: Vec<f64> = rng::standard_normal(&mut rng::stream(seed, &wpath), n).into_iter().map(|v| v * std).collect();
        let weight = store.register(wpath, Tensor::new(vec![out_ch, in_ch / groups, kernel, kernel], w)?, true)?;
        let bias = Some(store.register(format!("{path}.bias"), Tensor::zeros(&[out_ch]), false)?);
        Ok(Conv2d { weight, bias, in_ch, out_ch, kernel, stride, padding, groups })
    }

    /// Depthwise `k × k` convolution with "same" padding.
    pub fn depthwise(store: &mut ParamStore, path: &str, channels: usize, kernel: usize, seed: u64) -> Result<Self> {
        Self::new(store, path, channels, channels, kernel, 1, kernel / 2, channels, seed)
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups == self.in_ch && self.groups == self.out_ch
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let s = g.shape(x);
        if s.len() != 4 || s[1] != self.in_ch {
            return Err(Error::shape(format!("conv expects [B, {}, H, W], got {:?}", self.in_ch, s)));
        }
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.conv2d(x, w, b, self.stride, self.padding, self.groups)
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }
}

/// Layer norm over the last axis.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, path: &str, dim: usize) -> Result<Self> {
        let gamma = store.register(format!("{path}.gamma"), Tensor::full(&[dim], 1.0), false)?;
        let beta = store.register(format!("{path}.beta"), Tensor::zeros(&[dim]), false)?;
        Ok(LayerNorm { gamma, beta, dim })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// `[B, C, H, W] -> [B, C]` global average pool.
pub fn global_avg_pool(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let p = g.adaptive_avg_pool(x, 1)?;
    g.reshape(p, &[s[0], s[1]])
}

/// `[B, C, H, W] -> [B, H·W, C]` token layout.
pub fn to_tokens(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let flat = g.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
    g.permute(flat, &[0, 2, 1])
}

/// Inverse of [`to_tokens`].
pub fn from_tokens(g: &mut Graph, t: Var, h: usize, w: usize) -> Result<Var> {
    let s = g.shape(t).to_vec();
    if s.len() != 3 || s[1] != h * w {
        return Err(Error::shape(format!("cannot fold tokens {s:?} into {h}x{w}")));
    }
    let chw = g.permute(t, &[0, 2, 1])?;
    g.reshape(chw, &[s[0], s[2], h, w])
}
