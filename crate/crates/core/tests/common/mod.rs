#![allow(dead_code)]
//! Loop oracles shared by the integration tests.

use dynperceiver::model::{ClassStage, FeatureStage, X2Z, Z2X};
use dynperceiver::nn::{Conv2d, CrossAttention, LayerNorm, Linear, TokenMixer, TransformerBlock};
use dynperceiver::tensor::rng;
use dynperceiver::{ParamId, ParamStore, Tensor};

pub fn randn(seed: u64, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), rng::standard_normal(&mut rng::stream(seed, "x"), n)).unwrap()
}

/// Replace every parameter with N(0, scale²) draws so biases and tables are non-trivial.
pub fn randomize(store: &mut ParamStore, seed: u64, scale: f64) {
    for id in store.ids().collect::<Vec<_>>() {
        let n = store.get(id).numel();
        let v: Vec<f64> = rng::standard_normal(&mut rng::stream(seed, store.path(id)), n).iter().map(|x| x * scale).collect();
        store.set_data(id, &v).unwrap();
    }
}

pub fn data(store: &ParamStore, id: ParamId) -> Vec<f64> {
    store.get(id).data().to_vec()
}

/// Loop oracle for `x · Wᵀ + b` on `rows` rows.
pub fn lin(x: &[f64], l: &Linear, s: &ParamStore) -> Vec<f64> {
    let w = data(s, l.weight);
    let b = l.bias.map(|b| data(s, b)).unwrap_or_else(|| vec![0.0; l.out_dim]);
    let rows = x.len() / l.in_dim;
    let mut y = vec![0.0; rows * l.out_dim];
    for r in 0..rows {
        for o in 0..l.out_dim {
            let mut acc = b[o];
            for i in 0..l.in_dim {
                acc += x[r * l.in_dim + i] * w[o * l.in_dim + i];
            }
            y[r * l.out_dim + o] = acc;
        }
    }
    y
}

/// Per-head loop oracle of softmax(QKᵀ/√dh + bias)·V for one sample.
pub fn attention_oracle(q: &[f64], k: &[f64], v: &[f64], lq: usize, lk: usize, dim: usize, heads: usize, bias: Option<&[f64]>) -> Vec<f64> {
    let dh = dim / heads;
    let mut out = vec![0.0; lq * dim];
    for h in 0..heads {
        for i in 0..lq {
            let mut s = vec![0.0; lk];
            for j in 0..lk {
                let mut acc = 0.0;
                for d in 0..dh {
                    acc += q[i * dim + h * dh + d] * k[j * dim + h * dh + d];
                }
                s[j] = acc / (dh as f64).sqrt() + bias.map_or(0.0, |b| b[j]);
            }
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = s.iter().map(|x| (x - m).exp()).sum();
            for j in 0..lk {
                let p = (s[j] - m).exp() / z;
                for d in 0..dh {
                    out[i * dim + h * dh + d] += p * v[j * dim + h * dh + d];
                }
            }
        }
    }
    out
}

pub fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "index {i}: {x} vs {y}");
    }
}


pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Direct six-loop convolution of one `[cin, h, w]` sample; returns `(y, ho, wo)`.
pub fn conv(x: &[f64], cin: usize, h: usize, w: usize, c: &Conv2d, s: &ParamStore) -> (Vec<f64>, usize, usize) {
    let wt = data(s, c.weight);
    let b = c.bias.map(|b| data(s, b)).unwrap_or_else(|| vec![0.0; c.out_ch]);
    let k = c.kernel;
    let ho = (h + 2 * c.padding - k) / c.stride + 1;
    let wo = (w + 2 * c.padding - k) / c.stride + 1;
    let (ipg, opg) = (cin / c.groups, c.out_ch / c.groups);
    let mut y = vec![0.0; c.out_ch * ho * wo];
    for o in 0..c.out_ch {
        let grp = o / opg;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = b[o];
                for ci in 0..ipg {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * c.stride + ky) as isize - c.padding as isize;
                            let ix = (ox * c.stride + kx) as isize - c.padding as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            let xv = x[((grp * ipg + ci) * h + iy as usize) * w + ix as usize];
                            acc += xv * wt[((o * ipg + ci) * k + ky) * k + kx];
                        }
                    }
                }
                y[(o * ho + oy) * wo + ox] = acc;
            }
        }
    }
    (y, ho, wo)
}

/// Adaptive average pool of `[c, h, w]` to `[c, out, out]`.
pub fn pool(x: &[f64], c: usize, h: usize, w: usize, out: usize) -> Vec<f64> {
    let mut y = vec![0.0; c * out * out];
    for ch in 0..c {
        for oy in 0..out {
            for ox in 0..out {
                let (y0, y1) = (oy * h / out, (oy + 1) * h / out);
                let (x0, x1) = (ox * w / out, (ox + 1) * w / out);
                let mut acc = 0.0;
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        acc += x[(ch * h + iy) * w + ix];
                    }
                }
                y[(ch * out + oy) * out + ox] = acc / ((y1 - y0) * (x1 - x0)) as f64;
            }
        }
    }
    y
}

/// `[c, n]` channel-major map to `[n, c]` tokens.
pub fn tokens(x: &[f64], c: usize) -> Vec<f64> {
    let n = x.len() / c;
    let mut t = vec![0.0; x.len()];
    for ch in 0..c {
        for p in 0..n {
            t[p * c + ch] = x[ch * n + p];
        }
    }
    t
}

pub fn layer_norm(x: &[f64], ln: &LayerNorm, s: &ParamStore) -> Vec<f64> {
    let (gm, bt) = (data(s, ln.gamma), data(s, ln.beta));
    let d = ln.dim;
    let mut y = vec![0.0; x.len()];
    for r in 0..x.len() / d {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        for j in 0..d {
            y[r * d + j] = (row[j] - mean) / (var + 1e-5).sqrt() * gm[j] + bt[j];
        }
    }
    y
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Residual cross-attention for one sample.
pub fn cross_attention(ca: &CrossAttention, q_src: &[f64], kv_src: &[f64], s: &ParamStore) -> Vec<f64> {
    let (lq, lk) = (q_src.len() / ca.dim, kv_src.len() / ca.kv_dim);
    let (q, k, v) = (lin(q_src, &ca.q, s), lin(kv_src, &ca.k, s), lin(kv_src, &ca.v, s));
    let table = ca.rpb.as_ref().map(|r| data(s, r.table));
    let ctx = attention_oracle(&q, &k, &v, lq, lk, ca.dim, 1, table.as_deref());
    add(q_src, &lin(&ctx, &ca.proj, s))
}

pub fn transformer_block(b: &TransformerBlock, x: &[f64], s: &ParamStore) -> Vec<f64> {
    let m = &b.attn;
    let h = layer_norm(x, &b.norm1, s);
    let l = x.len() / m.dim;
    let ctx = attention_oracle(&lin(&h, &m.q, s), &lin(&h, &m.k, s), &lin(&h, &m.v, s), l, l, m.dim, m.heads, None);
    let x = add(x, &lin(&ctx, &m.proj, s));
    let h = layer_norm(&x, &b.norm2, s);
    let h: Vec<f64> = lin(&h, &b.mlp.fc1, s).into_iter().map(gelu).collect();
    add(&x, &lin(&h, &b.mlp.fc2, s))
}

/// Token mixer on one `[lin, cin]` latent.
pub fn mixer(m: &TokenMixer, z: &[f64], s: &ParamStore) -> Vec<f64> {
    let (l_in, c_in) = (m.token_down.in_dim, m.channel_up.in_dim);
    let zt = tokens(z, l_in); // [c_in, l_in]
    let down = lin(&zt, &m.token_down, s); // [c_in, l_out]
    let back = tokens(&down, c_in); // [l_out, c_in]
    lin(&back, &m.channel_up, s)
}

/// X2Z on one sample: `z` is `[L, D]`, `x` is `[C, H, W]`.
pub fn x2z(m: &X2Z, z: &[f64], x: &[f64], c: usize, h: usize, w: usize, s: &ParamStore) -> Vec<f64> {
    let (d, _, _) = conv(x, c, h, w, &m.dwc, s);
    let p = pool(&d, c, h, w, 7);
    cross_attention(&m.attn, z, &tokens(&p, c), s)
}

/// Z2X on one sample: `xt` is `[C, H, W]`, `z` is `[L, D]`; returns `[C, H, W]`.
pub fn z2x(m: &Z2X, xt: &[f64], z: &[f64], c: usize, s: &ParamStore) -> Vec<f64> {
    let out = cross_attention(&m.attn, &tokens(xt, c), z, s);
    tokens(&out, xt.len() / c)
}

/// `Z_i = psi_i(f_att(g_i(Z_{i-1}, X_{i-1})))` on one sample.
pub fn class_stage(st: &ClassStage, z: &[f64], x: &[f64], c: usize, h: usize, w: usize, s: &ParamStore) -> Vec<f64> {
    let mut z = x2z(&st.x2z, z, x, c, h, w, s);
    for b in &st.blocks {
        z = transformer_block(b, &z, s);
    }
    match &st.mixer {
        Some(m) => mixer(m, &z, s),
        None => z,
    }
}

/// Feature stage `f_conv` on one sample; returns `(x, ho, wo)`.
pub fn feature_stage(f: &FeatureStage, x: &[f64], c: usize, h: usize, w: usize, s: &ParamStore) -> (Vec<f64>, usize, usize) {
    let (y, ho, wo) = conv(x, c, h, w, &f.stem, s);
    let mut y: Vec<f64> = y.into_iter().map(gelu).collect();
    let co = f.stem.out_ch;
    for b in &f.blocks {
        let (d, _, _) = conv(&y, co, ho, wo, &b.dw, s);
        let d: Vec<f64> = d.into_iter().map(gelu).collect();
        let (p, _, _) = conv(&d, co, ho, wo, &b.pw, s);
        let p: Vec<f64> = p.into_iter().map(gelu).collect();
        y = add(&y, &p);
    }
    (y, ho, wo)
}
