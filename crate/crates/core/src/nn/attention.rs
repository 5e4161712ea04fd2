use super::{LayerNorm, Linear};
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// Learnable per-head additive bias over key positions of the pooled grid.
///
/// Latent queries have no spatial coordinate, so the bias is indexed by the
/// key position alone and broadcast over queries.
#[derive(Clone, Debug)]
pub struct RelativePositionBias {
    pub table: ParamId,
    pub heads: usize,
    pub positions: usize,
}

impl RelativePositionBias {
    pub fn new(store: &mut ParamStore, path: &str, heads: usize, grid: usize) -> Result<Self> {
        let positions = grid * grid;
        let table = store.register(format!("{path}.table"), Tensor::zeros(&[heads, positions]), false)?;
        Ok(RelativePositionBias { table, heads, positions })
    }
}

/// Single-head cross-attention with a residual on the query stream.
///
/// Queries are projected within the query width `dim`; keys and values are
/// projected from `kv_dim` into `dim`. The key projection has no bias since
/// a per-key offset shared by all queries cancels in the softmax.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    pub rpb: Option<RelativePositionBias>,
    pub dim: usize,
    pub kv_dim: usize,
}

impl CrossAttention {
    pub fn new(
        store: &mut ParamStore,
        path: &str,
        dim: usize,
        kv_dim: usize,
        rpb_grid: Option<usize>,
        seed: u64,
    ) -> Result<Self> {
        Ok(CrossAttention {
            q: Linear::new(store, &format!("{path}.q"), dim, dim, true, seed)?,
            k: Linear::new(store, &format!("{path}.k"), kv_dim, dim, false, seed)?,
            v: Linear::new(store, &format!("{path}.v"), kv_dim, dim, true, seed)?,
            proj: Linear::new(store, &format!("{path}.proj"), dim, dim, true, seed)?,
            rpb: match rpb_grid {
                Some(grid) => Some(RelativePositionBias::new(store, &format!("{path}.rpb"), 1, grid)?),
                None => None,
            },
            dim,
            kv_dim,
        })
    }

    /// `proj(softmax(Q·Kᵀ/√dim + bias) · V)` without the residual.
    pub fn attend(&self, g: &mut Graph, store: &ParamStore, q_src: Var, kv_src: Var) -> Result<Var> {
        let (sq, skv) = (g.shape(q_src).to_vec(), g.shape(kv_src).to_vec());
        if sq.len() != 3 || skv.len() != 3 || sq[0] != skv[0] || sq[2] != self.dim || skv[2] != self.kv_dim {
            return Err(Error::shape(format!(
                "cross-attention expects q [B, Lq, {}] and kv [B, Lk, {}], got {sq:?} and {skv:?}",
                self.dim, self.kv_dim
            )));
        }
        if let Some(rpb) = &self.rpb {
            if skv[1] != rpb.positions {
                return Err(Error::shape(format!(
                    "relative position bias covers {} keys, got {}",
                    rpb.positions, skv[1]
                )));
            }
        }
        let q = self.q.forward(g, store, q_src)?;
        let k = self.k.forward(g, store, kv_src)?;
        let v = self.v.forward(g, store, kv_src)?;
        let kt = g.transpose_last(k)?;
        let scores = g.matmul(q, kt)?;
        let mut scores = g.scale(scores, 1.0 / (self.dim as f64).sqrt());
        if let Some(rpb) = &self.rpb {
            let table = g.param(store, rpb.table);
            scores = g.add(scores, table)?;
        }
        let attn = g.softmax(scores)?;
        let ctx = g.matmul(attn, v)?;
        self.proj.forward(g, store, ctx)
    }

    /// `q_src + attend(q_src, kv_src)`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, q_src: Var, kv_src: Var) -> Result<Var> {
        let out = self.attend(g, store, q_src, kv_src)?;
        g.add(q_src, out)
    }
}

/// Multi-head scaled dot-product self-attention (no norm, no residual).
#[derive(Clone, Debug)]
pub struct MultiHeadSelfAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadSelfAttention {
    pub fn new(store: &mut ParamStore, path: &str, dim: usize, heads: usize, seed: u64) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::config(path, format!("width {dim} is not divisible by {heads} heads")));
        }
        Ok(MultiHeadSelfAttention {
            q: Linear::new(store, &format!("{path}.q"), dim, dim, true, seed)?,
            k: Linear::new(store, &format!("{path}.k"), dim, dim, false, seed)?,
            v: Linear::new(store, &format!("{path}.v"), dim, dim, true, seed)?,
            proj: Linear::new(store, &format!("{path}.proj"), dim, dim, true, seed)?,
            heads,
            dim,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    fn split_heads(&self, g: &mut Graph, x: Var, perm: &[usize]) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let r = g.reshape(x, &[s[0], s[1], self.heads, self.head_dim()])?;
        g.permute(r, perm)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.dim {
            return Err(Error::shape(format!("self-attention expects [B, L, {}], got {s:?}", self.dim)));
        }
        let q = self.q.forward(g, store, x)?;
        let k = self.k.forward(g, store, x)?;
        let v = self.v.forward(g, store, x)?;
        let q = self.split_heads(g, q, &[0, 2, 1, 3])?; // [B, h, L, dh]
        let kt = self.split_heads(g, k, &[0, 2, 3, 1])?; // [B, h, dh, L]
        let v = self.split_heads(g, v, &[0, 2, 1, 3])?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, 1.0 / (self.head_dim() as f64).sqrt());
        let attn = g.softmax(scores)?;
        let ctx = g.matmul(attn, v)?; // [B, h, L, dh]
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[s[0], s[1], self.dim])?;
        self.proj.forward(g, store, ctx)
    }
}

/// Two-layer GELU perceptron.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, path: &str, dim: usize, hidden: usize, seed: u64) -> Result<Self> {
        Ok(Mlp {
            fc1: Linear::new(store, &format!("{path}.fc1"), dim, hidden, true, seed)?,
            fc2: Linear::new(store, &format!("{path}.fc2"), hidden, dim, true, seed)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, store, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, store, h)
    }
}

/// Pre-norm transformer block: `x + MHSA(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attn: MultiHeadSelfAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl TransformerBlock {
    pub fn new(store: &mut ParamStore, path: &str, dim: usize, heads: usize, widening: usize, seed: u64) -> Result<Self> {
        Ok(TransformerBlock {
            norm1: LayerNorm::new(store, &format!("{path}.norm1"), dim)?,
            attn: MultiHeadSelfAttention::new(store, &format!("{path}.attn"), dim, heads, seed)?,
            norm2: LayerNorm::new(store, &format!("{path}.norm2"), dim)?,
            mlp: Mlp::new(store, &format!("{path}.mlp"), dim, widening * dim, seed)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.norm1.forward(g, store, x)?;
        let h = self.attn.forward(g, store, h)?;
        let x = g.add(x, h)?;
        let h = self.norm2.forward(g, store, x)?;
        let h = self.mlp.forward(g, store, h)?;
        g.add(x, h)
    }
}
