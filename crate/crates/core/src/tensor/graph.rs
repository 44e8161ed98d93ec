use rand::Rng;

use super::kernels::{self, gemm};
use super::{GroupKey, ParamGroup, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul {
        a: NodeId,
        b: NodeId,
        m: usize,
        k: usize,
        n: usize,
    },
    Bmm {
        a: NodeId,
        b: NodeId,
        groups: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    AddBias {
        x: NodeId,
        bias: NodeId,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
    },
    Softmax(NodeId),
    LogSoftmax(NodeId),
    LogSumExp {
        x: NodeId,
        mask: Option<Vec<bool>>,
    },
    LayerNorm {
        x: NodeId,
        gamma: Option<NodeId>,
        beta: Option<NodeId>,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    DepthwiseConv1d {
        x: NodeId,
        kernel: NodeId,
        lens: Vec<usize>,
        left_pad: usize,
    },
    Gelu(NodeId),
    MeanPool {
        x: NodeId,
        lens: Vec<usize>,
    },
    GatherRows {
        x: NodeId,
        idx: Vec<Option<usize>>,
    },
    Permute {
        x: NodeId,
        src: Vec<usize>,
    },
    Reshape(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Pick {
        x: NodeId,
        idx: Vec<Option<usize>>,
    },
    L2NormalizeRows {
        x: NodeId,
        norms: Vec<f64>,
    },
    Custom {
        x: NodeId,
        grads: Vec<(usize, Vec<f64>)>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Define-by-run computation graph over a read-only parameter store.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<NodeId>>,
    consumed: bool,
}

/// Result of one backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    params: Vec<Option<Vec<f64>>>,
    nodes: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of a parameter, `None` when the loss does not reach it.
    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params[id.0].as_deref()
    }

    /// Gradient of any graph node that required one.
    pub fn node(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn touches(&self, group: &ParamGroup) -> bool {
        group.params.iter().any(|&p| self.params[p.0].is_some())
    }

    /// Flattened gradient of a group, `None` if the loss reaches no member.
    /// Unreached members inside a reached group contribute zeros.
    pub fn flatten_group(&self, store: &ParamStore, group: &ParamGroup) -> Option<Vec<f64>> {
        if !self.touches(group) {
            return None;
        }
        let mut flat = Vec::new();
        for &p in &group.params {
            match &self.params[p.0] {
                Some(g) => flat.extend_from_slice(g),
                None => flat.extend(std::iter::repeat(0.0).take(store.get(p).numel())),
            }
        }
        Some(flat)
    }

    pub fn flatten_groups(&self, store: &ParamStore, filter: impl Fn(&GroupKey) -> bool) -> Vec<(GroupKey, Vec<f64>)> {
        store
            .groups()
            .iter()
            .filter(|g| filter(&g.key))
            .filter_map(|g| self.flatten_group(store, g).map(|v| (g.key, v)))
            .collect()
    }
}

fn check_same(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

fn acc_slot<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], id: NodeId) -> Option<&'g mut Vec<f64>> {
    let node = &nodes[id.0];
    if !node.needs_grad {
        return None;
    }
    Some(grads[id.0].get_or_insert_with(|| vec![0.0; node.data.len()]))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
            consumed: false,
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].data[0]
    }

    pub fn tensor(&self, id: NodeId) -> Tensor {
        let n = &self.nodes[id.0];
        Tensor::new(n.shape.clone(), n.data.clone()).expect("node shape is consistent")
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[NodeId]) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if cfg!(debug_assertions) && !data.iter().all(|v| v.is_finite()) {
            let inputs_finite = inputs
                .iter()
                .all(|i| self.nodes[i.0].data.iter().all(|v| v.is_finite()));
            debug_assert!(!inputs_finite, "{op:?} produced non-finite output from finite inputs");
        }
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            shape,
            data,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf node for a parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.param_nodes[id.0] {
            return n;
        }
        let t = self.params.get(id);
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
            op: Op::Param,
            needs_grad: true,
        });
        let n = NodeId(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(n);
        n
    }

    /// Leaf node that tracks gradients iff `t.requires_grad()`.
    pub fn input(&mut self, t: Tensor) -> NodeId {
        let needs_grad = t.requires_grad();
        let shape = t.shape().to_vec();
        self.nodes.push(Node {
            shape,
            data: t.into_data(),
            op: Op::Leaf,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.input(t.with_requires_grad(false))
    }

    /// `a[..., k] · b[k, n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.nodes[a.0].data.len() / k.max(1);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, 0.0, &mut out);
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        Ok(self.push(shape, out, Op::MatMul { a, b, m, k, n }, &[a, b]))
    }

    /// Batched `a[g, m, k] · b[g, k, n]`, or `a · bᵀ` with `b[g, n, k]` when `trans_b`.
    pub fn bmm(&mut self, a: NodeId, b: NodeId, trans_b: bool) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::shape("bmm", format!("{sa:?} x {sb:?}")));
        }
        let (groups, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(Error::shape("bmm", format!("{sa:?} x {sb:?} (trans_b={trans_b})")));
        }
        let mut out = vec![0.0; groups * m * n];
        {
            let av = &self.nodes[a.0].data;
            let bv = &self.nodes[b.0].data;
            for g in 0..groups {
                gemm(
                    m,
                    k,
                    n,
                    &av[g * m * k..(g + 1) * m * k],
                    false,
                    &bv[g * k * n..(g + 1) * k * n],
                    trans_b,
                    0.0,
                    &mut out[g * m * n..(g + 1) * m * n],
                );
            }
        }
        Ok(self.push(
            vec![groups, m, n],
            out,
            Op::Bmm {
                a,
                b,
                groups,
                m,
                k,
                n,
                trans_b,
            },
            &[a, b],
        ))
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        let sb = self.shape(bias).to_vec();
        if sb.len() != 1 || sx.last() != Some(&sb[0]) {
            return Err(Error::shape("add_bias", format!("{sx:?} + {sb:?}")));
        }
        let n = sb[0];
        let bv = self.value(bias);
        let out: Vec<f64> = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + bv[i % n])
            .collect();
        Ok(self.push(sx, out, Op::AddBias { x, bias }, &[x, bias]))
    }

    /// `x · w + b` for `x[..., k]`, `w[k, n]`, `b[n]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    fn zip_op(&mut self, name: &'static str, a: NodeId, b: NodeId, f: fn(f64, f64) -> f64, op: Op) -> Result<NodeId> {
        check_same(name, self.shape(a), self.shape(b))?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, op, &[a, b]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_op("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_op("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_op("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let out = self.value(x).iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Scale(x, c), &[x])
    }

    /// Rows of `table[V, d]` selected by `ids`; output shape `prefix ++ [d]`.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize], prefix: &[usize]) -> Result<NodeId> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 || prefix.iter().product::<usize>() != ids.len() {
            return Err(Error::shape(
                "embedding",
                format!("table {st:?}, {} ids, prefix {prefix:?}", ids.len()),
            ));
        }
        let (v, d) = (st[0], st[1]);
        if let Some(bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::shape("embedding", format!("id {bad} out of range for {v} rows")));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let mut shape = prefix.to_vec();
        shape.push(d);
        Ok(self.push(
            shape,
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    fn last_dim(&self, op: &'static str, x: NodeId) -> Result<usize> {
        match self.shape(x).last() {
            Some(&n) if n > 0 => Ok(n),
            _ => Err(Error::shape(op, format!("needs a non-empty last axis, got {:?}", self.shape(x)))),
        }
    }

    /// Softmax over the last axis. Masked entries (`false`) get probability 0;
    /// a fully masked row yields all zeros.
    pub fn softmax(&mut self, x: NodeId, mask: Option<&[bool]>) -> Result<NodeId> {
        let n = self.last_dim("softmax", x)?;
        let xv = self.value(x);
        if let Some(m) = mask {
            if m.len() != xv.len() {
                return Err(Error::shape("softmax", format!("mask of {} for {} values", m.len(), xv.len())));
            }
        }
        let mut out = vec![0.0; xv.len()];
        for (r, row) in xv.chunks(n).enumerate() {
            let keep = |j: usize| mask.is_none_or(|m| m[r * n + j]);
            let lse = kernels::log_sum_exp(row, keep);
            if lse == f64::NEG_INFINITY {
                continue;
            }
            for j in 0..n {
                if keep(j) {
                    out[r * n + j] = (row[j] - lse).exp();
                }
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::Softmax(x), &[x]))
    }

    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.last_dim("log_softmax", x)?;
        let mut out = Vec::with_capacity(self.value(x).len());
        for row in self.value(x).chunks(n) {
            let lse = kernels::log_sum_exp(row, |_| true);
            out.extend(row.iter().map(|v| v - lse));
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::LogSoftmax(x), &[x]))
    }

    /// log-sum-exp over the last axis, restricted to unmasked entries.
    pub fn log_sum_exp(&mut self, x: NodeId, mask: Option<&[bool]>) -> Result<NodeId> {
        let n = self.last_dim("log_sum_exp", x)?;
        let xv = self.value(x);
        if let Some(m) = mask {
            if m.len() != xv.len() {
                return Err(Error::shape("log_sum_exp", format!("mask of {} for {} values", m.len(), xv.len())));
            }
        }
        let mut out = Vec::with_capacity(xv.len() / n);
        for (r, row) in xv.chunks(n).enumerate() {
            let lse = kernels::log_sum_exp(row, |j| mask.is_none_or(|m| m[r * n + j]));
            if lse == f64::NEG_INFINITY {
                return Err(Error::shape("log_sum_exp", format!("row {r} is fully masked")));
            }
            out.push(lse);
        }
        let shape = self.shape(x)[..self.shape(x).len() - 1].to_vec();
        Ok(self.push(
            shape,
            out,
            Op::LogSumExp {
                x,
                mask: mask.map(<[bool]>::to_vec),
            },
            &[x],
        ))
    }

    /// Layer normalization over the last axis with optional affine `gamma`/`beta`.
    /// A zero-variance row normalizes to zeros.
    pub fn layer_norm(&mut self, x: NodeId, gamma: Option<NodeId>, beta: Option<NodeId>) -> Result<NodeId> {
        let n = self.last_dim("layer_norm", x)?;
        for p in [gamma, beta].into_iter().flatten() {
            if self.shape(p) != [n] {
                return Err(Error::shape(
                    "layer_norm",
                    format!("affine {:?} for last axis {n}", self.shape(p)),
                ));
            }
        }
        let xv = self.value(x);
        let rows = xv.len() / n;
        let mut xhat = Vec::with_capacity(xv.len());
        let mut rstd = Vec::with_capacity(rows);
        for row in xv.chunks(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(r);
            xhat.extend(row.iter().map(|v| (v - mean) * r));
        }
        let g = gamma.map(|g| self.value(g));
        let b = beta.map(|b| self.value(b));
        let out = xhat
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let j = i % n;
                v * g.map_or(1.0, |g| g[j]) + b.map_or(0.0, |b| b[j])
            })
            .collect();
        let shape = self.shape(x).to_vec();
        let mut inputs = vec![x];
        inputs.extend(gamma);
        inputs.extend(beta);
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &inputs,
        ))
    }

    /// Per-channel 1-D convolution of `x[B, L, C]` with `kernel[C, K]`.
    /// Output length equals input length; the `⌈(K-1)/2⌉` left / `⌊(K-1)/2⌋`
    /// right zero padding and every position at or past `lens[b]` read as zero.
    pub fn depthwise_conv1d(&mut self, x: NodeId, kernel: NodeId, lens: &[usize]) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        let sk = self.shape(kernel).to_vec();
        if sx.len() != 3 || sk.len() != 2 || sx[2] != sk[0] || sk[1] == 0 || lens.len() != sx[0] {
            return Err(Error::shape(
                "depthwise_conv1d",
                format!("x {sx:?}, kernel {sk:?}, {} lengths", lens.len()),
            ));
        }
        let (bsz, len, ch) = (sx[0], sx[1], sx[2]);
        let kw = sk[1];
        let left_pad = kw / 2;
        let xv = self.value(x);
        let kv = self.value(kernel);
        let mut out = vec![0.0; xv.len()];
        for b in 0..bsz {
            let valid = lens[b].min(len);
            for t in 0..len {
                let o = &mut out[(b * len + t) * ch..(b * len + t + 1) * ch];
                for j in 0..kw {
                    let s = t + j;
                    if s < left_pad || s - left_pad >= valid {
                        continue;
                    }
                    let xi = &xv[(b * len + s - left_pad) * ch..(b * len + s - left_pad + 1) * ch];
                    for c in 0..ch {
                        o[c] += kv[c * kw + j] * xi[c];
                    }
                }
            }
        }
        Ok(self.push(
            sx,
            out,
            Op::DepthwiseConv1d {
                x,
                kernel,
                lens: lens.to_vec(),
                left_pad,
            },
            &[x, kernel],
        ))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).iter().map(|&v| kernels::gelu(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Gelu(x), &[x])
    }

    /// Mean of `x[B, L, d]` over the first `lens[b]` time steps.
    pub fn mean_pool(&mut self, x: NodeId, lens: &[usize]) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 || lens.len() != sx[0] || lens.iter().any(|&l| l == 0 || l > sx[1]) {
            return Err(Error::shape("mean_pool", format!("x {sx:?}, lengths {lens:?}")));
        }
        let (bsz, len, d) = (sx[0], sx[1], sx[2]);
        let xv = self.value(x);
        let mut out = vec![0.0; bsz * d];
        for b in 0..bsz {
            let inv = 1.0 / lens[b] as f64;
            for t in 0..lens[b] {
                let row = &xv[(b * len + t) * d..(b * len + t + 1) * d];
                for c in 0..d {
                    out[b * d + c] += row[c] * inv;
                }
            }
        }
        Ok(self.push(
            vec![bsz, d],
            out,
            Op::MeanPool {
                x,
                lens: lens.to_vec(),
            },
            &[x],
        ))
    }

    /// Gathers rows of `x` (viewed as `[N, rest]`); `None` yields a zero row.
    pub fn gather_rows(&mut self, x: NodeId, idx: &[Option<usize>]) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        if sx.is_empty() {
            return Err(Error::shape("gather_rows", "scalar input"));
        }
        let rows = sx[0];
        let width: usize = sx[1..].iter().product();
        if let Some(bad) = idx.iter().flatten().find(|&&i| i >= rows) {
            return Err(Error::shape("gather_rows", format!("row {bad} of {rows}")));
        }
        let xv = self.value(x);
        let mut out = vec![0.0; idx.len() * width];
        for (r, i) in idx.iter().enumerate() {
            if let Some(i) = i {
                out[r * width..(r + 1) * width].copy_from_slice(&xv[i * width..(i + 1) * width]);
            }
        }
        let mut shape = vec![idx.len()];
        shape.extend_from_slice(&sx[1..]);
        Ok(self.push(
            shape,
            out,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        ))
    }

    /// Axis permutation: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: NodeId, axes: &[usize]) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        let rank = sx.len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape("permute", format!("axes {axes:?} for shape {sx:?}")));
        }
        let mut in_strides = vec![1usize; rank];
        for i in (0..rank.saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * sx[i + 1];
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| sx[a]).collect();
        let numel: usize = sx.iter().product();
        let mut src = Vec::with_capacity(numel);
        let step: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let mut idx = vec![0usize; rank];
        let mut off = 0usize;
        for _ in 0..numel {
            src.push(off);
            for d in (0..rank).rev() {
                idx[d] += 1;
                off += step[d];
                if idx[d] < out_shape[d] {
                    break;
                }
                off -= step[d] * out_shape[d];
                idx[d] = 0;
            }
        }
        let xv = self.value(x);
        let out = src.iter().map(|&s| xv[s]).collect();
        Ok(self.push(out_shape, out, Op::Permute { x, src }, &[x]))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape(x))));
        }
        let data = self.value(x).to_vec();
        Ok(self.push(shape.to_vec(), data, Op::Reshape(x), &[x]))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).iter().sum();
        self.push(vec![], vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let s = self.value(x).iter().sum::<f64>() / n as f64;
        Ok(self.push(vec![], vec![s], Op::Mean(x), &[x]))
    }

    /// `out[r] = x[r, idx[r]]` for `x[N, V]`; `None` yields 0.
    pub fn pick(&mut self, x: NodeId, idx: &[Option<usize>]) -> Result<NodeId> {
        let n = self.last_dim("pick", x)?;
        let rows = self.value(x).len() / n;
        if idx.len() != rows || idx.iter().flatten().any(|&i| i >= n) {
            return Err(Error::shape("pick", format!("{} indices for {rows} rows of width {n}", idx.len())));
        }
        let xv = self.value(x);
        let out = idx
            .iter()
            .enumerate()
            .map(|(r, i)| i.map_or(0.0, |i| xv[r * n + i]))
            .collect();
        Ok(self.push(vec![rows], out, Op::Pick { x, idx: idx.to_vec() }, &[x]))
    }

    /// Scales each row (last axis) to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.last_dim("l2_normalize_rows", x)?;
        let xv = self.value(x);
        let mut norms = Vec::with_capacity(xv.len() / n);
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.chunks(n) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
            norms.push(norm);
            out.extend(row.iter().map(|v| v / norm));
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::L2NormalizeRows { x, norms }, &[x]))
    }

    /// A vector-valued op whose forward values and local gradients were
    /// computed outside the graph: output `i` equals `values[i]` and has
    /// gradient `grads[i].1` with respect to the contiguous slice of `x`
    /// starting at flat offset `grads[i].0`.
    pub fn custom(&mut self, x: NodeId, values: Vec<f64>, grads: Vec<(usize, Vec<f64>)>) -> Result<NodeId> {
        let len = self.value(x).len();
        if values.len() != grads.len() || grads.iter().any(|(o, g)| o + g.len() > len) {
            return Err(Error::shape("custom", "local gradients do not fit the input"));
        }
        let n = values.len();
        Ok(self.push(vec![n], values, Op::Custom { x, grads }, &[x]))
    }

    /// Inverted dropout with keep probability `1 - p`.
    pub fn dropout(&mut self, x: NodeId, p: f64, rng: &mut impl Rng) -> Result<NodeId> {
        if p <= 0.0 {
            return Ok(x);
        }
        if p >= 1.0 {
            return Err(Error::invalid(format!("dropout probability {p} must be < 1")));
        }
        let keep = 1.0 / (1.0 - p);
        let shape = self.shape(x).to_vec();
        let mask = Tensor::from_fn(&shape, |_| if rng.random::<f64>() < p { 0.0 } else { keep });
        let m = self.constant(mask);
        self.mul(x, m)
    }

    /// Scaled dot-product attention over `q[G, Lq, d]`, `k[G, Lk, d]`,
    /// `v[G, Lk, dv]`; `mask[G, Lq, Lk]` marks admissible keys. Returns the
    /// attended values and the attention weights.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, mask: Option<&[bool]>) -> Result<(NodeId, NodeId)> {
        let d = *self.shape(q).last().unwrap_or(&0);
        if d == 0 {
            return Err(Error::shape("attention", format!("query {:?}", self.shape(q))));
        }
        let scores = self.bmm(q, k, true)?;
        let scores = self.scale(scores, 1.0 / (d as f64).sqrt());
        let weights = self.softmax(scores, mask)?;
        let out = self.bmm(weights, v, false)?;
        Ok((out, weights))
    }

    /// Reverse pass from a single-element `loss`. A graph supports exactly one
    /// backward pass.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Backward("graph already consumed by a backward pass; rebuild it".into()));
        }
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.consumed = true;
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            let node = &nodes[i];
            backprop(nodes, node, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        let params = self
            .param_nodes
            .iter()
            .map(|n| n.and_then(|n| grads[n.0].clone()))
            .collect();
        Ok(Gradients { params, nodes: grads })
    }
}

fn backprop(nodes: &[Node], node: &Node, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |id: NodeId| -> &[f64] { &nodes[id.0].data };
    match &node.op {
        Op::Leaf | Op::Param => {}
        &Op::MatMul { a, b, m, k, n } => {
            if let Some(ga) = acc_slot(grads, nodes, a) {
                gemm(m, n, k, gout, false, val(b), true, 1.0, ga);
            }
            if let Some(gb) = acc_slot(grads, nodes, b) {
                gemm(k, m, n, val(a), true, gout, false, 1.0, gb);
            }
        }
        &Op::Bmm {
            a,
            b,
            groups,
            m,
            k,
            n,
            trans_b,
        } => {
            let (sa, sb, so) = (m * k, k * n, m * n);
            if let Some(ga) = acc_slot(grads, nodes, a) {
                let bv = val(b);
                for g in 0..groups {
                    gemm(
                        m,
                        n,
                        k,
                        &gout[g * so..(g + 1) * so],
                        false,
                        &bv[g * sb..(g + 1) * sb],
                        !trans_b,
                        1.0,
                        &mut ga[g * sa..(g + 1) * sa],
                    );
                }
            }
            if let Some(gb) = acc_slot(grads, nodes, b) {
                let av = val(a);
                for g in 0..groups {
                    let go = &gout[g * so..(g + 1) * so];
                    let ag = &av[g * sa..(g + 1) * sa];
                    let dst = &mut gb[g * sb..(g + 1) * sb];
                    if trans_b {
                        gemm(n, m, k, go, true, ag, false, 1.0, dst);
                    } else {
                        gemm(k, m, n, ag, true, go, false, 1.0, dst);
                    }
                }
            }
        }
        &Op::AddBias { x, bias } => {
            if let Some(gx) = acc_slot(grads, nodes, x) {
                add_into(gx, gout);
            }
            if let Some(gb) = acc_slot(grads, nodes, bias) {
                let n = gb.len();
                for row in gout.chunks(n) {
                    add_into(gb, row);
                }
            }
        }
        &Op::Add(a, b) => {
            if let Some(ga) = acc_slot(grads, nodes, a) {
                add_into(ga, gout);
            }
            if let Some(gb) = acc_slot(grads, nodes, b) {
                add_into(gb, gout);
            }
        }
        &Op::Sub(a, b) => {
            if let Some(ga) = acc_slot(grads, nodes, a) {
                add_into(ga, gout);
            }
            if let Some(gb) = acc_slot(grads, nodes, b) {
                gb.iter_mut().zip(gout).for_each(|(d, g)| *d -= g);
            }
        }
        &Op::Mul(a, b) => {
            if let Some(ga) = acc_slot(grads, nodes, a) {
                ga.iter_mut()
                    .zip(gout.iter().zip(val(b)))
                    .for_each(|(d, (g, y))| *d += g * y);
            }
            if let Some(gb) = acc_slot(grads, nodes, b) {
                gb.iter_mut()
                    .zip(gout.iter().zip(val(a)))
                    .for_each(|(d, (g, x))| *d += g * x);
            }
        }
        &Op::Scale(x, c) => {
            if let Some(gx) = acc_slot(grads, nodes, x) {
                gx.iter_mut().zip(gout).for_each(|(d, g)| *d += c * g);
            }
        }
        Op::Embedding { table, ids } => {
            if let Some(gt) = acc_slot(grads, nodes, *table) {
                let d = nodes[table.0].shape[1];
                for (r, &i) in ids.iter().enumerate() {
                    add_into(&mut gt[i * d..(i + 1) * d], &gout[r * d..(r + 1) * d]);
                }
            }
        }
        &Op::Softmax(x) => {
            if let Some(gx) = acc_slot(grads, nodes, x) {
                let n = *node.shape.last().expect("softmax has an axis");
                for ((y, g), dst) in node.data.chunks(n).zip(gout.chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dst[j] += y[j] * (g[j] - dot);
                    }
                }
            }
        }
        &Op::LogSoftmax(x) => {
            if let Some(gx) = acc_slot(grads, nodes, x) {
                let n = *node.shape.last().expect("log_softmax has an axis");
                for ((y, g), dst) in node.data.chunks(n).zip(gout.chunks(n)).zip(gx.chunks_mut(n)) {
                    let total: f64 = g.iter().sum();
                    for j in 0..n {
                        dst[j] += g[j] - y[j].exp() * total;
                    }
                }
            }
        }
        Op::LogSumExp { x, mask } => {
            if let Some(gx) = acc_slot(grads, nodes, *x) {
                let xv = val(*x);
                let n = xv.len() / node.data.len();
                for r in 0..node.data.len() {
                    for j in 0..n {
                        let i = r * n + j;
                        if mask.as_ref().is_none_or(|m| m[i]) {
                            gx[i] += gout[r] * (xv[i] - node.data[r]).exp();
                        }
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let n = *node.shape.last().expect("layer_norm has an axis");
            if let Some(g) = gamma {
                if let Some(gg) = acc_slot(grads, nodes, *g) {
                    for (xh, go) in xhat.chunks(n).zip(gout.chunks(n)) {
                        for j in 0..n {
                            gg[j] += xh[j] * go[j];
                        }
                    }
                }
            }
            if let Some(b) = beta {
                if let Some(gb) = acc_slot(grads, nodes, *b) {
                    for go in gout.chunks(n) {
                        add_into(gb, go);
                    }
                }
            }
            let gamma_v = gamma.map(|g| nodes[g.0].data.as_slice());
            if let Some(gx) = acc_slot(grads, nodes, *x) {
                let mut dxhat = vec![0.0; n];
                for (r, ((xh, go), dst)) in xhat.chunks(n).zip(gout.chunks(n)).zip(gx.chunks_mut(n)).enumerate() {
                    for j in 0..n {
                        dxhat[j] = go[j] * gamma_v.map_or(1.0, |g| g[j]);
                    }
                    let m1 = dxhat.iter().sum::<f64>() / n as f64;
                    let m2 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for j in 0..n {
                        dst[j] += rstd[r] * (dxhat[j] - m1 - xh[j] * m2);
                    }
                }
            }
        }
        Op::DepthwiseConv1d {
            x,
            kernel,
            lens,
            left_pad,
        } => {
            let (bsz, len, ch) = (node.shape[0], node.shape[1], node.shape[2]);
            let kw = nodes[kernel.0].shape[1];
            let xv = val(*x);
            let kv = val(*kernel);
            let mut gx_buf = nodes[x.0].needs_grad.then(|| vec![0.0; xv.len()]);
            let mut gk_buf = nodes[kernel.0].needs_grad.then(|| vec![0.0; kv.len()]);
            for b in 0..bsz {
                let valid = lens[b].min(len);
                for t in 0..len {
                    let go = &gout[(b * len + t) * ch..(b * len + t + 1) * ch];
                    for j in 0..kw {
                        let s = t + j;
                        if s < *left_pad || s - left_pad >= valid {
                            continue;
                        }
                        let base = (b * len + s - left_pad) * ch;
                        if let Some(gx) = gx_buf.as_mut() {
                            for c in 0..ch {
                                gx[base + c] += kv[c * kw + j] * go[c];
                            }
                        }
                        if let Some(gk) = gk_buf.as_mut() {
                            for c in 0..ch {
                                gk[c * kw + j] += xv[base + c] * go[c];
                            }
                        }
                    }
                }
            }
            if let (Some(buf), Some(gx)) = (gx_buf, acc_slot(grads, nodes, *x)) {
                add_into(gx, &buf);
            }
            if let (Some(buf), Some(gk)) = (gk_buf, acc_slot(grads, nodes, *kernel)) {
                add_into(gk, &buf);
            }
        }
        &Op::Gelu(x) => {
            if let Some(gx) = acc_slot(grads, nodes, x) {
                gx.iter_mut()
                    .zip(gout.iter().zip(val(x)))
                    .for_each(|(d, (g, v))| *d += g * kernels::gelu_grad(*v));
            }
        }
        Op::MeanPool { x, lens } => {
            if let Some(gx) = acc_slot(grads, nodes, *x) {
                let sx = &nodes[x.0].shape;
                let (len, d) = (sx[1], sx[2]);
                for (b, &l) in lens.iter().enumerate() {
                    let inv = 1.0 / l as f64;
                    for t in 0..l {
                        let dst = &mut gx[(b * len + t) * d..(b * len + t + 1) * d];
                        for c in 0..d {
                            dst[c] += gout[b * d + c] * inv;
                        }
                    }
                }
            }
        }
        Op::GatherRows { x, idx } => {
            if let Some(gx) = acc_slot(grads, nodes, *x) {
                let width = gout.len() / idx.len().max(1);
                for (r, i) in idx.iter().enumerate() {
                    if let Some(i) = i {
                        add_into(&mut gx[i * width..(i + 1) * width], &gout[r * width..(r + 1) * width]);
                    }
                }
            }
        }
        Op::Permute { x, src } => {
            if let Some(gx) = acc_slot(grads, nodes, *x) {
                for (g, &s) in gout.iter().zip(src) {
                    gx[s] += g;
                }
            }
        }
        &Op::Reshape(x) => {
            if let Some(gx) = acc_slot(grads, nodes, x) {
                add_into(gx, gout);
            }
        }
        &Op::Sum(x) => {
            if let Some(gx) = acc_slot(grads, nodes, x) {
                gx.iter_mut().for_each(|d| *d += gout[0]);
            }
        }
        &Op::Mean(x) => {
            if let Some(gx) = acc_slot(grads, nodes, x) {
                let s = gout[0] / gx.len() as f64;
                gx.iter_mut().for_each(|d| *d += s);
            }
        }
        Op::Pick { x, idx } => {
            if let Some(gx) = acc_slot(grads, nodes, *x) {
                let n = gx.len() / idx.len().max(1);
                for (r, i) in idx.iter().enumerate() {
                    if let Some(i) = i {
                        gx[r * n + i] += gout[r];
                    }
                }
            }
        }
        Op::L2NormalizeRows { x, norms } => {
            if let Some(gx) = acc_slot(grads, nodes, *x) {
                let n = *node.shape.last().expect("rows have an axis");
                for (r, ((y, g), dst)) in node.data.chunks(n).zip(gout.chunks(n)).zip(gx.chunks_mut(n)).enumerate() {
                    let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dst[j] += (g[j] - y[j] * dot) / norms[r];
                    }
                }
            }
        }
        Op::Custom { x, grads: local } => {
            if let Some(gx) = acc_slot(grads, nodes, *x) {
                for (i, (offset, lg)) in local.iter().enumerate() {
                    for (d, l) in gx[*offset..offset + lg.len()].iter_mut().zip(lg) {
                        *d += gout[i] * l;
                    }
                }
            }
        }
    }
}
