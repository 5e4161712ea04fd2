use std::collections::{BTreeSet, HashMap};

use super::kernels::{self, ConvGeometry};
use super::{broadcast_shape, strides, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Exp,
    Log,
    Gelu,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize },
    Linear { x: Var, w: Var, b: Option<Var>, rows: usize, din: usize, dout: usize },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeometry },
    Permute { x: Var, perm: Vec<usize> },
    Reshape(Var),
    Expand(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    AdaptivePool { x: Var, planes: usize, h: usize, w: usize, out: usize },
    MeanAxis { x: Var, outer: usize, len: usize, inner: usize },
    Concat { parts: Vec<(Var, usize)>, rows: usize },
    SumAll(Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Param(_) => vec![],
            Op::Binary(_, a, b) => vec![*a, *b],
            Op::Unary(_, x) | Op::Scale(x, _) | Op::AddScalar(x) | Op::Reshape(x) | Op::Expand(x) => vec![*x],
            Op::Softmax(x) | Op::LogSoftmax(x) | Op::SumAll(x) => vec![*x],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Linear { x, w, b, .. } | Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::Permute { x, .. } | Op::AdaptivePool { x, .. } | Op::MeanAxis { x, .. } => vec![*x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Concat { parts, .. } => parts.iter().map(|p| p.0).collect(),
        }
    }
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// A define-by-run computation record. Nodes are appended in execution
/// order, which is a topological order of the dataflow.
///
/// The graph also tallies the floating-point operations of every op it
/// executes (1 multiply-accumulate = 2 FLOPs).
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    flops: u64,
    tags: HashMap<usize, String>,
    no_grad: bool,
    corrupt_gelu_backward: bool,
}

/// Per-node gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph that never records gradient requirements. Values are identical
    /// to a normal graph; only backward bookkeeping is skipped.
    pub fn inference() -> Self {
        Graph { no_grad: true, ..Self::default() }
    }

    /// Test fixture: deliberately perturb the GELU backward rule.
    #[doc(hidden)]
    pub fn set_corrupt_gelu_backward(&mut self, on: bool) {
        self.corrupt_gelu_backward = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// FLOPs executed so far.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.data.clone()).expect("graph nodes hold consistent tensors")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, flops: u64) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let requires_grad = !self.no_grad && op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.flops += flops;
        self.nodes.push(Node { shape, data, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Record a constant or, if `tensor.requires_grad`, a differentiable leaf.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let requires_grad = tensor.requires_grad && !self.no_grad;
        let shape = tensor.shape().to_vec();
        self.nodes.push(Node { shape, data: tensor.into_data(), op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        let mut t = tensor;
        t.requires_grad = false;
        self.leaf(t)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = store.get(id);
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
            op: Op::Param(id),
            requires_grad: !self.no_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = &self.nodes[v.0];
        let (shape, data) = (n.shape.clone(), n.data.clone());
        self.nodes.push(Node { shape, data, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    // ---- naming / dependency tracing ----

    pub fn tag(&mut self, v: Var, name: impl Into<String>) {
        self.tags.insert(v.0, name.into());
    }

    pub fn tag_of(&self, v: Var) -> Option<&str> {
        self.tags.get(&v.0).map(String::as_str)
    }

    /// Names of the tagged values that `v` was computed from, stopping the
    /// walk at the first tagged node on every path. Parameters are ignored.
    pub fn frontier_tags(&self, v: Var) -> BTreeSet<String> {
        let mut found = BTreeSet::new();
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = self.nodes[v.0].op.inputs();
        while let Some(u) = stack.pop() {
            if std::mem::replace(&mut seen[u.0], true) {
                continue;
            }
            if let Some(t) = self.tags.get(&u.0) {
                found.insert(t.clone());
                continue;
            }
            stack.extend(self.nodes[u.0].op.inputs());
        }
        found
    }

    // ---- elementwise ----

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb).map_err(|_| {
            Error::shapes(&format!("{kind:?}").to_lowercase(), &sa, &sb)
        })?;
        let ia = BroadcastIndex::new(&out_shape, &sa);
        let ib = BroadcastIndex::new(&out_shape, &sb);
        let (da, db) = (self.value(a), self.value(b));
        let n: usize = out_shape.iter().product();
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        let data: Vec<f64> = (0..n).map(|i| f(da[ia.map(i)], db[ib.map(i)])).collect();
        Ok(self.push(out_shape, data, Op::Binary(kind, a, b), n as u64))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    fn unary(&mut self, kind: Unary, x: Var) -> Var {
        let f = match kind {
            Unary::Exp => f64::exp,
            Unary::Log => f64::ln,
            Unary::Gelu => kernels::gelu,
        };
        let data: Vec<f64> = self.value(x).iter().map(|&v| f(v)).collect();
        let n = data.len() as u64;
        self.push(self.shape(x).to_vec(), data, Op::Unary(kind, x), n)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Unary::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(Unary::Log, x)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(Unary::Gelu, x)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let data: Vec<f64> = self.value(x).iter().map(|&v| v * c).collect();
        let n = data.len() as u64;
        self.push(self.shape(x).to_vec(), data, Op::Scale(x, c), n)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let data: Vec<f64> = self.value(x).iter().map(|&v| v + c).collect();
        let n = data.len() as u64;
        self.push(self.shape(x).to_vec(), data, Op::AddScalar(x), n)
    }

    // ---- linear algebra ----

    /// Batched matrix product over matching leading dims.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() != sa.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(Error::shapes("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(Error::shapes("matmul (inner dims)", &sa, &sb));
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let data = kernels::matmul(self.value(a), self.value(b), batch, m, k, n);
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([m, n]);
        let flops = 2 * (batch * m * k * n) as u64;
        Ok(self.push(shape, data, Op::MatMul { a, b, batch, m, k, n }, flops))
    }

    /// `y = x · wᵀ + b` over the last axis of `x`; `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sw.len() != 2 || sx.last() != Some(&sw[1]) {
            return Err(Error::shapes("linear", &sx, &sw));
        }
        let (dout, din) = (sw[0], sw[1]);
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(Error::shapes("linear bias", self.shape(b), &[dout]));
            }
        }
        let rows = self.value(x).len() / din;
        let data = kernels::linear(self.value(x), self.value(w), b.map(|b| self.value(b)), rows, din, dout);
        let mut shape = sx.clone();
        *shape.last_mut().unwrap() = dout;
        let flops = (2 * rows * din * dout + if b.is_some() { rows * dout } else { 0 }) as u64;
        Ok(self.push(shape, data, Op::Linear { x, w, b, rows, din, dout }, flops))
    }

    /// Cross-correlation of `x: [B, C, H, W]` with `w: [Cout, C/groups, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize, groups: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 || groups == 0 || stride == 0 {
            return Err(Error::shapes("conv2d", &sx, &sw));
        }
        let geom = ConvGeometry {
            batch: sx[0],
            in_ch: sx[1],
            in_h: sx[2],
            in_w: sx[3],
            out_ch: sw[0],
            kh: sw[2],
            kw: sw[3],
            stride,
            padding,
            groups,
        };
        if !geom.in_ch.is_multiple_of(groups) || !geom.out_ch.is_multiple_of(groups) || sw[1] != geom.in_ch / groups {
            return Err(Error::shapes("conv2d (channels/groups)", &sx, &sw));
        }
        if geom.in_h + 2 * padding < geom.kh || geom.in_w + 2 * padding < geom.kw {
            return Err(Error::shape(format!(
                "conv2d: kernel {}x{} larger than padded input {:?}",
                geom.kh, geom.kw, sx
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [geom.out_ch] {
                return Err(Error::shapes("conv2d bias", self.shape(b), &[geom.out_ch]));
            }
        }
        let data = kernels::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), &geom);
        let outputs = geom.batch * geom.out_ch * geom.out_h() * geom.out_w();
        let flops = 2 * outputs * geom.in_per_group() * geom.kh * geom.kw + if b.is_some() { outputs } else { 0 };
        let shape = vec![geom.batch, geom.out_ch, geom.out_h(), geom.out_w()];
        Ok(self.push(shape, data, Op::Conv2d { x, w, b, geom }, flops as u64))
    }

    // ---- shape ----

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).len() {
            return Err(Error::shapes("reshape", self.shape(x), shape));
        }
        let data = self.value(x).to_vec();
        Ok(self.push(shape.to_vec(), data, Op::Reshape(x), 0))
    }

    /// Reorder axes: output axis `i` is input axis `perm[i]`.
    /// Broadcast `x` to `shape` under trailing-dimension alignment. Pure data
    /// movement, so it costs no FLOPs.
    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if broadcast_shape(&sx, shape).ok().as_deref() != Some(shape) {
            return Err(Error::shapes("broadcast_to", &sx, shape));
        }
        let map = BroadcastIndex::new(shape, &sx);
        let n: usize = shape.iter().product();
        let src = self.value(x);
        let data: Vec<f64> = (0..n).map(|i| src[map.map(i)]).collect();
        Ok(self.push(shape.to_vec(), data, Op::Expand(x), 0))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let mut check = perm.to_vec();
        check.sort_unstable();
        if check != (0..sx.len()).collect::<Vec<_>>() {
            return Err(Error::shape(format!("permute: {perm:?} is not a permutation of rank {}", sx.len())));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| sx[p]).collect();
        let map = permute_map(&sx, perm);
        let src = self.value(x);
        let data: Vec<f64> = map.iter().map(|&i| src[i]).collect();
        Ok(self.push(out_shape, data, Op::Permute { x, perm: perm.to_vec() }, 0))
    }

    /// Swap the last two axes.
    pub fn transpose_last(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::shape("transpose needs rank >= 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    /// Concatenate along the last axis; leading dims must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        let lead = &first[..first.len() - 1];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || &s[..s.len() - 1] != lead {
                return Err(Error::shapes("concat", &first, s));
            }
            widths.push(*s.last().unwrap());
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let parts = parts.iter().copied().zip(widths).collect();
        Ok(self.push(shape, data, Op::Concat { parts, rows }, 0))
    }

    // ---- normalisation / reductions ----

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let d = *self.shape(x).last().unwrap();
        if self.value(x).iter().any(|v| v.is_nan()) {
            return Err(Error::numerical("softmax input contains NaN"));
        }
        let mut data = vec![0.0; self.value(x).len()];
        for (xr, yr) in self.value(x).chunks(d).zip(data.chunks_mut(d)) {
            kernels::softmax_row(xr, yr);
        }
        let n = data.len() as u64;
        Ok(self.push(self.shape(x).to_vec(), data, Op::Softmax(x), 2 * n))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let d = *self.shape(x).last().unwrap();
        if self.value(x).iter().any(|v| v.is_nan()) {
            return Err(Error::numerical("log_softmax input contains NaN"));
        }
        let mut data = vec![0.0; self.value(x).len()];
        for (xr, yr) in self.value(x).chunks(d).zip(data.chunks_mut(d)) {
            kernels::log_softmax_row(xr, yr);
        }
        let n = data.len() as u64;
        Ok(self.push(self.shape(x).to_vec(), data, Op::LogSoftmax(x), 2 * n))
    }

    /// Layer norm over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let d = *self.shape(x).last().unwrap();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shapes("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let (data, xhat, rstd) = kernels::layer_norm(self.value(x), self.value(gamma), self.value(beta), d);
        let n = data.len() as u64;
        Ok(self.push(self.shape(x).to_vec(), data, Op::LayerNorm { x, gamma, beta, xhat, rstd }, 7 * n))
    }

    /// Adaptive average pooling of `[B, C, H, W]` to `[B, C, out, out]`.
    pub fn adaptive_avg_pool(&mut self, x: Var, out: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape(format!("adaptive_avg_pool expects [B,C,H,W], got {s:?}")));
        }
        let (h, w) = (s[2], s[3]);
        if out == 0 || h < out || w < out {
            return Err(Error::shape(format!("adaptive_avg_pool: input {h}x{w} smaller than output {out}x{out}")));
        }
        let planes = s[0] * s[1];
        let data = kernels::adaptive_avg_pool(self.value(x), planes, h, w, out);
        let flops = (planes * h * w) as u64;
        Ok(self.push(vec![s[0], s[1], out, out], data, Op::AdaptivePool { x, planes, h, w, out }, flops))
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::shape(format!("mean_axis: axis {axis} out of range for {s:?}")));
        }
        let outer: usize = s[..axis].iter().product();
        let len = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let src = self.value(x);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..inner {
                let mut acc = 0.0;
                for l in 0..len {
                    acc += src[(o * len + l) * inner + j];
                }
                data[o * inner + j] = acc / len as f64;
            }
        }
        let mut shape = s.clone();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let flops = (outer * len * inner) as u64;
        Ok(self.push(shape, data, Op::MeanAxis { x, outer, len, inner }, flops))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).iter().sum();
        let n = self.value(x).len() as u64;
        self.push(vec![1], vec![s], Op::SumAll(x), n)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// Fail with a [`Error::Numerical`] naming `path` if `v` holds a non-finite value.
    pub fn check_finite(&self, v: Var, path: &str) -> Result<()> {
        if self.value(v).iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::numerical(format!("non-finite activation at `{path}`")))
        }
    }

    // ---- reverse mode ----

    /// Reverse-mode sweep from a scalar `loss`, seeded with 1.0.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Backward from `loss`, then add parameter gradients into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let grads = self.backward(loss)?;
        self.accumulate_into(&grads, store);
        Ok(grads)
    }

    pub fn accumulate_into(&self, grads: &Gradients, store: &mut ParamStore) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, grads.grads[i].as_ref()) {
                store.get_mut(*id).accumulate_grad(g);
            }
        }
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, delta: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&delta).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Binary(kind, a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let ia = BroadcastIndex::new(&node.shape, self.shape(*a));
                let ib = BroadcastIndex::new(&node.shape, self.shape(*b));
                let mut ga = vec![0.0; va.len()];
                let mut gb = vec![0.0; vb.len()];
                for (i, &gi) in g.iter().enumerate() {
                    let (ja, jb) = (ia.map(i), ib.map(i));
                    let (x, y) = (va[ja], vb[jb]);
                    let (da, db) = match kind {
                        Binary::Add => (gi, gi),
                        Binary::Sub => (gi, -gi),
                        Binary::Mul => (gi * y, gi * x),
                        Binary::Div => (gi / y, -gi * x / (y * y)),
                    };
                    ga[ja] += da;
                    gb[jb] += db;
                }
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Unary(kind, x) => {
                let xv = self.value(*x);
                let fault = if self.corrupt_gelu_backward { 1.01 } else { 1.0 };
                let d: Vec<f64> = match kind {
                    Unary::Exp => g.iter().zip(&node.data).map(|(g, y)| g * y).collect(),
                    Unary::Log => g.iter().zip(xv).map(|(g, x)| g / x).collect(),
                    Unary::Gelu => g.iter().zip(xv).map(|(g, &x)| g * kernels::gelu_grad(x) * fault).collect(),
                };
                acc(*x, d);
            }
            Op::Scale(x, c) => acc(*x, g.iter().map(|v| v * c).collect()),
            Op::AddScalar(x) | Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::MatMul { a, b, batch, m, k, n } => {
                let (da, db) = kernels::matmul_backward(self.value(*a), self.value(*b), g, *batch, *m, *k, *n);
                acc(*a, da);
                acc(*b, db);
            }
            Op::Linear { x, w, b, rows, din, dout } => {
                let (dx, dw, db) = kernels::linear_backward(self.value(*x), self.value(*w), g, *rows, *din, *dout);
                acc(*x, dx);
                acc(*w, dw);
                if let Some(b) = b {
                    acc(*b, db);
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let (dx, dw, db) = kernels::conv2d_backward(self.value(*x), self.value(*w), g, geom);
                acc(*x, dx);
                acc(*w, dw);
                if let Some(b) = b {
                    acc(*b, db);
                }
            }
            Op::Expand(x) => {
                let map = BroadcastIndex::new(&node.shape, self.shape(*x));
                let mut dx = vec![0.0; self.value(*x).len()];
                for (i, &gi) in g.iter().enumerate() {
                    dx[map.map(i)] += gi;
                }
                acc(*x, dx);
            }
            Op::Permute { x, perm } => {
                let map = permute_map(self.shape(*x), perm);
                let mut dx = vec![0.0; g.len()];
                for (o, &i) in map.iter().enumerate() {
                    dx[i] = g[o];
                }
                acc(*x, dx);
            }
            Op::Softmax(x) => {
                let d = *node.shape.last().unwrap();
                let mut dx = vec![0.0; g.len()];
                for ((yr, gr), dr) in node.data.chunks(d).zip(g.chunks(d)).zip(dx.chunks_mut(d)) {
                    let s = kernels::dot(yr, gr);
                    for j in 0..d {
                        dr[j] = yr[j] * (gr[j] - s);
                    }
                }
                acc(*x, dx);
            }
            Op::LogSoftmax(x) => {
                let d = *node.shape.last().unwrap();
                let mut dx = vec![0.0; g.len()];
                for ((yr, gr), dr) in node.data.chunks(d).zip(g.chunks(d)).zip(dx.chunks_mut(d)) {
                    let s: f64 = gr.iter().sum();
                    for j in 0..d {
                        dr[j] = gr[j] - yr[j].exp() * s;
                    }
                }
                acc(*x, dx);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = *node.shape.last().unwrap();
                let (dx, dg, db) = kernels::layer_norm_backward(g, xhat, rstd, self.value(*gamma), d);
                acc(*x, dx);
                acc(*gamma, dg);
                acc(*beta, db);
            }
            Op::AdaptivePool { x, planes, h, w, out } => {
                acc(*x, kernels::adaptive_avg_pool_backward(g, *planes, *h, *w, *out));
            }
            Op::MeanAxis { x, outer, len, inner } => {
                let mut dx = vec![0.0; outer * len * inner];
                let inv = 1.0 / *len as f64;
                for o in 0..*outer {
                    for l in 0..*len {
                        for j in 0..*inner {
                            dx[(o * len + l) * inner + j] = g[o * inner + j] * inv;
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::Concat { parts, rows } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut offset = 0;
                for &(p, w) in parts {
                    let mut dp = Vec::with_capacity(rows * w);
                    for r in 0..*rows {
                        dp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                    }
                    acc(p, dp);
                    offset += w;
                }
            }
            Op::SumAll(x) => {
                let n = self.value(*x).len();
                acc(*x, vec![g[0]; n]);
            }
        }
    }
}

/// Maps output flat indices of a broadcast to the flat index in one operand.
enum BroadcastIndex {
    Same,
    Cycle(usize),
    General(Vec<usize>),
}

impl BroadcastIndex {
    fn new(out: &[usize], input: &[usize]) -> Self {
        if out == input {
            return BroadcastIndex::Same;
        }
        let trimmed: Vec<usize> = input.iter().copied().skip_while(|&d| d == 1).collect();
        if trimmed.is_empty() {
            return BroadcastIndex::Cycle(1);
        }
        if out.ends_with(&trimmed) {
            return BroadcastIndex::Cycle(trimmed.iter().product());
        }
        let rank = out.len();
        let mut padded = vec![1; rank - input.len()];
        padded.extend_from_slice(input);
        let in_strides = strides(&padded);
        let n: usize = out.iter().product();
        let mut map = Vec::with_capacity(n);
        let mut idx = vec![0usize; rank];
        for _ in 0..n {
            let off: usize = (0..rank).map(|d| if padded[d] == 1 { 0 } else { idx[d] * in_strides[d] }).sum();
            map.push(off);
            for d in (0..rank).rev() {
                idx[d] += 1;
                if idx[d] < out[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        BroadcastIndex::General(map)
    }

    #[inline]
    fn map(&self, i: usize) -> usize {
        match self {
            BroadcastIndex::Same => i,
            BroadcastIndex::Cycle(n) => i % n,
            BroadcastIndex::General(m) => m[i],
        }
    }
}

/// For each output flat index of `permute(shape, perm)`, the source flat index.
fn permute_map(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n: usize = shape.iter().product();
    let rank = shape.len();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        map.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    map
}
