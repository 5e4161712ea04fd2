//! Closed-form FLOP counts, derived from the configuration alone.
//!
//! Convention: one multiply-accumulate is 2 FLOPs; bias adds, residual adds,
//! activations and scalings cost 1 per element; softmax costs 2 per element
//! (exp and divide); layer norm costs 7 per element; an average pool costs one
//! operation per input element (the adds plus one divide per output).
//! Reshapes, permutes, concatenation and broadcasting are free.

use crate::model::{ModelConfig, POOL_SIZE, STAGES};

/// FLOPs of one schedule unit.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub flops: u64,
}

/// Per-sample cost of every unit in early-exit order, and the cumulative
/// cost at which each exit's logits become available.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlopsProfile {
    pub segments: Vec<Segment>,
    /// `cumulative[k - 1]`: FLOPs spent when inference stops at exit `k`.
    pub cumulative: [u64; 4],
}

impl FlopsProfile {
    pub fn cost(&self, exit: usize) -> u64 {
        self.cumulative[exit - 1]
    }

    /// Cost of the cheapest and the most expensive enabled exit.
    pub fn range(&self, exits: [bool; 4]) -> (u64, u64) {
        let first = exits.iter().position(|&e| e).unwrap_or(3);
        (self.cumulative[first], self.cumulative[3])
    }
}

fn linear(rows: usize, din: usize, dout: usize, bias: bool) -> u64 {
    (2 * rows * din * dout + if bias { rows * dout } else { 0 }) as u64
}

fn conv(cin_per_group: usize, cout: usize, k: usize, ho: usize, wo: usize) -> u64 {
    let outputs = cout * ho * wo;
    (2 * outputs * cin_per_group * k * k + outputs) as u64
}

/// Single-head cross-attention with residual: `lq` queries of width `dim`
/// against `lk` keys of width `kv`.
fn cross_attention(lq: usize, lk: usize, dim: usize, kv: usize, rpb: bool) -> u64 {
    let mut f = linear(lq, dim, dim, true) + linear(lk, kv, dim, false) + linear(lk, kv, dim, true);
    let scores = (lq * lk) as u64;
    f += 2 * scores * dim as u64 + scores; // QKᵀ and scaling
    if rpb {
        f += scores;
    }
    f += 2 * scores; // softmax
    f += 2 * scores * dim as u64; // attention · V
    f + linear(lq, dim, dim, true) + (lq * dim) as u64
}

fn transformer_block_flops(l: usize, d: usize, heads: usize, widening: usize) -> u64 {
    let n = (l * d) as u64;
    let hidden = widening * d;
    let scores = (heads * l * l) as u64;
    let attn = 3 * linear(l, d, d, true) - n + 2 * 2 * (l * l * d) as u64 + 3 * scores + linear(l, d, d, true);
    let mlp = linear(l, d, hidden, true) + (l * hidden) as u64 + linear(l, hidden, d, true);
    7 * n + attn + n + 7 * n + mlp + n
}

/// Cost of `g_i`, the self-attention blocks and the mixer of stage `i`.
pub fn classification_stage_flops(c: &ModelConfig, i: usize) -> u64 {
    let cin = c.feature_channels(i - 1);
    let (h, w) = c.feature_size(i - 1);
    let (l, d) = (c.tokens(i - 1), c.latent_width(i - 1));
    let mut f = conv(1, cin, 3, h, w) + (cin * h * w) as u64;
    f += cross_attention(l, POOL_SIZE * POOL_SIZE, d, cin, true);
    let st = &c.stages[i - 1];
    f += st.sa_blocks as u64 * transformer_block_flops(l, d, c.heads(i), st.widening);
    if i < STAGES {
        let (l_out, d_out) = (c.tokens(i), c.latent_width(i));
        f += linear(d, l, l_out, true) + linear(l_out, d, d_out, true);
    }
    f
}

/// Cost of `f_i^conv` followed by `h_i`.
pub fn feature_stage_flops(c: &ModelConfig, i: usize) -> u64 {
    let (cin, cout) = (c.feature_channels(i - 1), c.channels(i));
    let (ho, wo) = c.feature_size(i);
    let n = (cout * ho * wo) as u64;
    let st = &c.stages[i - 1];
    let mut f = conv(cin, cout, 3, ho, wo) + n;
    f += st.conv_blocks as u64 * (conv(1, cout, 3, ho, wo) + n + conv(cout, cout, 1, ho, wo) + n + n);
    f + cross_attention(ho * wo, c.tokens(i), cout, c.latent_width(i), false)
}

struct Builder<'a> {
    c: &'a ModelConfig,
    segments: Vec<Segment>,
    total: u64,
    have_z4: bool,
    have_x4: bool,
}

impl Builder<'_> {
    fn push(&mut self, name: String, flops: u64) {
        self.total += flops;
        self.segments.push(Segment { name, flops });
    }

    fn exit(&mut self, j: usize) {
        let c = self.c;
        if !c.head_needed(j) {
            return;
        }
        let k = c.num_classes;
        let slot = if c.fkt { k } else { 0 };
        let (c4, d4) = (c.channels(4), c.latent_width(4));
        let (h4, w4) = c.feature_size(4);
        let pool_z = |i: usize| (c.tokens(i) * c.latent_width(i)) as u64;
        let pool_x4 = (c4 * h4 * w4) as u64;
        let (mut f, width) = match j {
            1 => (pool_z(3), c.latent_width(3)),
            2 => (pool_z(4), d4 + slot),
            3 => (pool_x4, c4 + slot),
            _ => {
                let f = if self.have_x4 { 0 } else { pool_x4 } + if self.have_z4 { 0 } else { pool_z(4) };
                (f, c4 + d4 + slot)
            }
        };
        self.have_z4 |= j == 2;
        self.have_x4 |= j == 3;
        if j > 1 && c.fkt {
            f += linear(1, k, k, true);
        }
        f += linear(1, width, k, true);
        self.push(format!("exit{j}"), f);
    }
}

/// Closed-form per-sample profile along the early-exit schedule. Heads that
/// no enabled exit needs are skipped, and pooled vectors are charged once,
/// when first used.
pub fn flops_profile(c: &ModelConfig) -> FlopsProfile {
    let mut b = Builder { c, segments: Vec::new(), total: 0, have_z4: false, have_x4: false };
    let mut cumulative = [0u64; 4];
    for i in 1..=2 {
        b.push(format!("stage{i}.class"), classification_stage_flops(c, i));
        b.push(format!("stage{i}.feature"), feature_stage_flops(c, i));
    }
    b.push("stage3.class".into(), classification_stage_flops(c, 3));
    b.exit(1);
    cumulative[0] = b.total;
    b.push("stage3.feature".into(), feature_stage_flops(c, 3));
    b.push("stage4.class".into(), classification_stage_flops(c, 4));
    b.exit(2);
    cumulative[1] = b.total;
    b.push("stage4.feature".into(), feature_stage_flops(c, 4));
    b.exit(3);
    cumulative[2] = b.total;
    b.exit(4);
    cumulative[3] = b.total;
    FlopsProfile { segments: b.segments, cumulative }
}
