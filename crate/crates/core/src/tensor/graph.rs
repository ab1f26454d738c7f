use std::sync::atomic::{AtomicU32, Ordering};

use super::kernels::{self, ConvGeom};
use super::{broadcast_shape, numel, split_axis, strides, Float, Result, Tensor, TensorError};
use crate::parallel;

static NEXT_GRAPH: AtomicU32 = AtomicU32::new(0);

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    index: u32,
    graph: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.index as usize
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    LeakyRelu(Var, T),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
        batch: usize,
    },
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    LayerNorm {
        x: Var,
        scale: Option<Var>,
        shift: Option<Var>,
        axis: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    GlobalAvgPool(Var),
    Sum(Var),
    Mean(Var),
    GatherCols {
        table: Var,
        ids: Vec<usize>,
    },
    Pick {
        x: Var,
        idx: Vec<usize>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Operation tape for reverse-mode differentiation.
///
/// Nodes are appended in execution order, so the record is topologically
/// sorted by construction. [`backward`](Graph::backward) walks it once in
/// reverse; a second call without [`reset_grads`](Graph::reset_grads) fails.
pub struct Graph<T> {
    id: u32,
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    consumed: bool,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Maps flat output indices of a broadcast op to flat input indices.
enum BroadcastMap {
    Same,
    Modulo(usize),
    General(Vec<usize>),
}

impl BroadcastMap {
    fn new(out: &[usize], input: &[usize]) -> Self {
        if out == input {
            return BroadcastMap::Same;
        }
        let n_in = numel(input);
        if input.len() <= out.len() && out[out.len() - input.len()..] == *input {
            return BroadcastMap::Modulo(n_in);
        }
        let rank = out.len();
        let in_strides = strides(input);
        let mut eff = vec![0; rank];
        for (i, e) in eff.iter_mut().enumerate() {
            if i + input.len() >= rank {
                let ii = i + input.len() - rank;
                if input[ii] != 1 {
                    *e = in_strides[ii];
                }
            }
        }
        let total = numel(out);
        let mut map = Vec::with_capacity(total);
        let mut idx = vec![0usize; rank];
        let mut off = 0usize;
        for _ in 0..total {
            map.push(off);
            for d in (0..rank).rev() {
                idx[d] += 1;
                off += eff[d];
                if idx[d] < out[d] {
                    break;
                }
                off -= eff[d] * idx[d];
                idx[d] = 0;
            }
        }
        BroadcastMap::General(map)
    }

    #[inline]
    fn get(&self, i: usize) -> usize {
        match self {
            BroadcastMap::Same => i,
            BroadcastMap::Modulo(n) => i % n,
            BroadcastMap::General(m) => m[i],
        }
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> &Node<T> {
        assert_eq!(v.graph, self.id, "Var used with a graph it does not belong to");
        &self.nodes[v.index()]
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|&v| self.node(v).requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            index: (self.nodes.len() - 1) as u32,
            graph: self.id,
        }
    }

    /// Records an input tensor. Gradients are kept only for leaves created
    /// with `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            index: (self.nodes.len() - 1) as u32,
            graph: self.id,
        }
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.node(v).value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    // ---- elementwise ----

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: fn(Var, Var) -> Op<T>,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(name, ta.shape(), tb.shape())?;
        let (ma, mb) = (BroadcastMap::new(&shape, ta.shape()), BroadcastMap::new(&shape, tb.shape()));
        let (da, db) = (ta.data(), tb.data());
        let data = (0..numel(&shape))
            .map(|i| f(da[ma.get(i)], db[mb.get(i)]))
            .collect();
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, op(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| f(x)).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(out, op, &[a])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::of(s);
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let s = T::of(s);
        self.unary(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let s = T::of(slope);
        self.unary(a, |x| if x > T::zero() { x } else { x * s }, Op::LeakyRelu(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.ln(), Op::Log(a))
    }

    // ---- shape ops ----

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let rank = t.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::InvalidArgument {
                op: "permute",
                reason: format!("{perm:?} is not a permutation of {rank} axes"),
            });
        }
        let shape: Vec<usize> = perm.iter().map(|&p| t.shape()[p]).collect();
        let map = permute_map(t.shape(), perm);
        let src = t.data();
        let data = map.iter().map(|&i| src[i]).collect();
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Permute(a, perm.to_vec()), &[a]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let rank = self.value(a).rank();
        if rank < 2 {
            return Err(TensorError::InvalidArgument {
                op: "transpose",
                reason: format!("needs rank >= 2, got {rank}"),
            });
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(a, &perm)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or(TensorError::InvalidArgument {
            op: "concat",
            reason: "no inputs".into(),
        })?;
        let base = self.shape(*first).to_vec();
        let (outer, _, inner) = split_axis(&base, axis)?;
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = base;
        shape[axis] = total;
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let block = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Concat(parts.to_vec(), axis), parts))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        let (outer, len, inner) = split_axis(t.shape(), axis)?;
        if start >= end || end > len {
            return Err(TensorError::InvalidArgument {
                op: "slice",
                reason: format!("range {start}..{end} invalid for axis of size {len}"),
            });
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = end - start;
        let src = t.data();
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            data.extend_from_slice(&src[(o * len + start) * inner..(o * len + end) * inner]);
        }
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Slice { x: a, axis, start }, &[a]))
    }

    // ---- linear algebra ----

    /// `a · b` over the last two axes; leading batch axes must match, or `b`
    /// may be a plain matrix shared across the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` over the last two axes, with the same batching rules.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let name = if trans_b { "matmul_bt" } else { "matmul" };
        let (ta, tb) = (self.value(a), self.value(b));
        let dims = MatDims::new(name, ta.shape(), tb.shape(), trans_b)?;
        let mut out = vec![T::zero(); dims.batch * dims.m * dims.n];
        let (da, db) = (ta.data(), tb.data());
        for bi in 0..dims.batch {
            let av = &da[bi * dims.m * dims.k..(bi + 1) * dims.m * dims.k];
            let bv = &db[dims.b_offset(bi)..dims.b_offset(bi) + dims.k * dims.n];
            let ov = &mut out[bi * dims.m * dims.n..(bi + 1) * dims.m * dims.n];
            if trans_b {
                kernels::matmul_nt(av, bv, ov, dims.m, dims.k, dims.n);
            } else {
                kernels::matmul_nn(av, bv, ov, dims.m, dims.k, dims.n);
            }
        }
        let mut shape = ta.shape()[..ta.rank() - 1].to_vec();
        shape.push(dims.n);
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::MatMul { a, b, trans_b }, &[a, b]))
    }

    /// Cross-correlation of `x: [N, C, H, W]` (or `[C, H, W]`) with
    /// `w: [O, C, kh, kw]`, zero padding `pad` on every side.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let unbatched = tx.rank() == 3;
        let xs: Vec<usize> = if unbatched {
            std::iter::once(1).chain(tx.shape().iter().copied()).collect()
        } else {
            tx.shape().to_vec()
        };
        if xs.len() != 4 || tw.rank() != 4 || xs[1] != tw.shape()[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: tx.shape().to_vec(),
                rhs: tw.shape().to_vec(),
            });
        }
        if stride == 0 {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                reason: "stride must be positive".into(),
            });
        }
        let geom = ConvGeom {
            channels: xs[1],
            height: xs[2],
            width: xs[3],
            kh: tw.shape()[2],
            kw: tw.shape()[3],
            stride,
            pad,
        };
        if geom.kh > geom.height + 2 * pad || geom.kw > geom.width + 2 * pad {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                reason: format!(
                    "kernel {}x{} larger than padded input {}x{}",
                    geom.kh,
                    geom.kw,
                    geom.height + 2 * pad,
                    geom.width + 2 * pad
                ),
            });
        }
        let (batch, o) = (xs[0], tw.shape()[0]);
        let (img, ocols) = (geom.channels * geom.height * geom.width, geom.col_cols());
        let (dx, dw) = (tx.data(), tw.data());
        let per_image = parallel::map_indexed(batch, |n| {
            let mut cols = vec![T::zero(); geom.col_rows() * ocols];
            kernels::im2col(&dx[n * img..(n + 1) * img], &geom, &mut cols);
            let mut out = vec![T::zero(); o * ocols];
            kernels::matmul_nn(dw, &cols, &mut out, o, geom.col_rows(), ocols);
            out
        });
        let data: Vec<T> = per_image.into_iter().flatten().collect();
        let shape = if unbatched {
            vec![o, geom.out_h(), geom.out_w()]
        } else {
            vec![batch, o, geom.out_h(), geom.out_w()]
        };
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Conv2d { x, w, geom, batch }, &[x, w]))
    }

    // ---- reductions and normalization ----

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        let (outer, len, inner) = split_axis(t.shape(), axis)?;
        let mut data = t.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = T::neg_infinity();
                for j in 0..len {
                    mx = mx.max(data[base + j * inner]);
                }
                let mut s = T::zero();
                for j in 0..len {
                    let e = (data[base + j * inner] - mx).exp();
                    data[base + j * inner] = e;
                    s += e;
                }
                for j in 0..len {
                    data[base + j * inner] = data[base + j * inner] / s;
                }
            }
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Softmax(a, axis), &[a]))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        let (outer, len, inner) = split_axis(t.shape(), axis)?;
        let mut data = t.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = T::neg_infinity();
                for j in 0..len {
                    mx = mx.max(data[base + j * inner]);
                }
                let mut s = T::zero();
                for j in 0..len {
                    s += (data[base + j * inner] - mx).exp();
                }
                let lse = mx + s.ln();
                for j in 0..len {
                    data[base + j * inner] -= lse;
                }
            }
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(out, Op::LogSoftmax(a, axis), &[a]))
    }

    /// Normalizes along `axis` to zero mean and unit (biased) variance, then
    /// applies the optional per-position `scale` and `shift` (length = axis size).
    pub fn layer_norm(
        &mut self,
        x: Var,
        scale: Option<Var>,
        shift: Option<Var>,
        axis: usize,
        eps: f64,
    ) -> Result<Var> {
        if eps.is_nan() || eps < 0.0 {
            return Err(TensorError::InvalidArgument {
                op: "layer_norm",
                reason: format!("eps must be non-negative, got {eps}"),
            });
        }
        let t = self.value(x);
        let (outer, len, inner) = split_axis(t.shape(), axis)?;
        for p in [scale, shift].into_iter().flatten() {
            if self.shape(p) != [len] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: t.shape().to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let src = t.data();
        let eps = T::of(eps);
        let nlen = T::from_usize(len).unwrap();
        let mut xhat = vec![T::zero(); src.len()];
        let mut inv_std = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mean = (0..len).map(|j| src[base + j * inner]).sum::<T>() / nlen;
                let var = (0..len)
                    .map(|j| {
                        let d = src[base + j * inner] - mean;
                        d * d
                    })
                    .sum::<T>()
                    / nlen;
                let is = T::one() / (var + eps).sqrt();
                inv_std[o * inner + i] = is;
                for j in 0..len {
                    xhat[base + j * inner] = (src[base + j * inner] - mean) * is;
                }
            }
        }
        let sc = scale.map(|s| self.value(s).data().to_vec());
        let sh = shift.map(|s| self.value(s).data().to_vec());
        let mut data = xhat.clone();
        if sc.is_some() || sh.is_some() {
            for (idx, v) in data.iter_mut().enumerate() {
                let j = (idx / inner) % len;
                if let Some(sc) = &sc {
                    *v *= sc[j];
                }
                if let Some(sh) = &sh {
                    *v += sh[j];
                }
            }
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let inputs: Vec<Var> = std::iter::once(x).chain(scale).chain(shift).collect();
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                scale,
                shift,
                axis,
                xhat,
                inv_std,
            },
            &inputs,
        ))
    }

    /// Mean over the two trailing (spatial) axes: `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() < 3 {
            return Err(TensorError::InvalidArgument {
                op: "global_avg_pool",
                reason: format!("needs rank >= 3, got shape {:?}", t.shape()),
            });
        }
        let r = t.rank();
        let area = t.shape()[r - 2] * t.shape()[r - 1];
        let inv = T::one() / T::from_usize(area).unwrap();
        let data = t.data().chunks_exact(area).map(|c| c.iter().copied().sum::<T>() * inv).collect();
        let out = Tensor::new(t.shape()[..r - 2].to_vec(), data)?;
        Ok(self.push(out, Op::GlobalAvgPool(x), &[x]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s: T = t.data().iter().copied().sum::<T>() / T::from_usize(t.numel()).unwrap();
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    // ---- indexing ----

    /// Column lookup: `table: [R, V]`, output row `t` is column `ids[t]`.
    pub fn gather_cols(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(TensorError::InvalidArgument {
                op: "gather_cols",
                reason: format!("table must be a matrix, got shape {:?}", t.shape()),
            });
        }
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= cols) {
            return Err(TensorError::IndexOutOfRange { index: bad, size: cols });
        }
        if ids.is_empty() {
            return Err(TensorError::InvalidArgument {
                op: "gather_cols",
                reason: "no ids".into(),
            });
        }
        let src = t.data();
        let mut data = Vec::with_capacity(ids.len() * rows);
        for &id in ids {
            data.extend((0..rows).map(|r| src[r * cols + id]));
        }
        let out = Tensor::new(vec![ids.len(), rows], data)?;
        Ok(self.push(out, Op::GatherCols { table, ids: ids.to_vec() }, &[table]))
    }

    /// `x: [n, V]` → `[n]` with `out[i] = x[i, idx[i]]`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 || t.shape()[0] != idx.len() {
            return Err(TensorError::ShapeMismatch {
                op: "pick",
                lhs: t.shape().to_vec(),
                rhs: vec![idx.len()],
            });
        }
        let v = t.shape()[1];
        if let Some(&bad) = idx.iter().find(|&&i| i >= v) {
            return Err(TensorError::IndexOutOfRange { index: bad, size: v });
        }
        let data = idx.iter().enumerate().map(|(i, &j)| t.data()[i * v + j]).collect();
        let out = Tensor::new(vec![idx.len()], data)?;
        Ok(self.push(out, Op::Pick { x, idx: idx.to_vec() }, &[x]))
    }

    // ---- backward ----

    /// Gradient of `loss` for every leaf that requires it.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(TensorError::BackwardTwice);
        }
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lt.shape().to_vec()));
        }
        self.consumed = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.node(loss).requires_grad {
            return Ok(());
        }
        self.grads[loss.index()] = Some(vec![T::one()]);
        for i in (0..=loss.index()).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g);
        }
        Ok(())
    }

    /// Clears gradients so `backward` may run again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.consumed = false;
    }

    /// Gradient accumulated on a leaf by the last `backward`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        assert_eq!(v.graph, self.id, "Var used with a graph it does not belong to");
        self.grads.get(v.index()).and_then(|g| g.as_deref())
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<T>> {
        self.grad(v)
            .map(|g| Tensor::new(self.shape(v).to_vec(), g.to_vec()).expect("grad shape"))
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.index()].requires_grad
    }

    fn acc(&mut self, v: Var, f: impl FnOnce(&mut [T])) {
        if !self.wants(v) {
            return;
        }
        let n = self.nodes[v.index()].value.numel();
        let slot = self.grads[v.index()].get_or_insert_with(|| vec![T::zero(); n]);
        f(slot);
    }

    fn backprop_binary(&mut self, out: usize, a: Var, b: Var, g: &[T], kind: u8) {
        let shape = self.nodes[out].value.shape().to_vec();
        let va = self.nodes[a.index()].value.clone();
        let vb = self.nodes[b.index()].value.clone();
        let (ma, mb) = (BroadcastMap::new(&shape, va.shape()), BroadcastMap::new(&shape, vb.shape()));
        let (da, db) = (va.data(), vb.data());
        self.acc(a, |ga| {
            for (i, &gi) in g.iter().enumerate() {
                let d = match kind {
                    0 | 1 => gi,
                    2 => gi * db[mb.get(i)],
                    _ => gi / db[mb.get(i)],
                };
                ga[ma.get(i)] += d;
            }
        });
        self.acc(b, |gb| {
            for (i, &gi) in g.iter().enumerate() {
                let d = match kind {
                    0 => gi,
                    1 => -gi,
                    2 => gi * da[ma.get(i)],
                    _ => {
                        let y = db[mb.get(i)];
                        -gi * da[ma.get(i)] / (y * y)
                    }
                };
                gb[mb.get(i)] += d;
            }
        });
    }

    fn backprop_node(&mut self, i: usize, g: &[T]) {
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        let out = self.nodes[i].value.clone();
        let y = out.data();
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => self.backprop_binary(i, *a, *b, g, 0),
            Op::Sub(a, b) => self.backprop_binary(i, *a, *b, g, 1),
            Op::Mul(a, b) => self.backprop_binary(i, *a, *b, g, 2),
            Op::Div(a, b) => self.backprop_binary(i, *a, *b, g, 3),
            Op::Scale(a, s) => {
                let s = *s;
                self.acc(*a, |ga| zip_acc(ga, g, |gi, _| gi * s));
            }
            Op::AddScalar(a) | Op::Reshape(a) => self.acc(*a, |ga| zip_acc(ga, g, |gi, _| gi)),
            Op::Tanh(a) => self.acc(*a, |ga| zip_acc(ga, g, |gi, k| gi * (T::one() - y[k] * y[k]))),
            Op::Sigmoid(a) => self.acc(*a, |ga| zip_acc(ga, g, |gi, k| gi * y[k] * (T::one() - y[k]))),
            Op::Exp(a) => self.acc(*a, |ga| zip_acc(ga, g, |gi, k| gi * y[k])),
            Op::LeakyRelu(a, slope) => {
                let slope = *slope;
                let x = self.nodes[a.index()].value.clone();
                let xd = x.data();
                self.acc(*a, |ga| zip_acc(ga, g, |gi, k| if xd[k] > T::zero() { gi } else { gi * slope }));
            }
            Op::Relu(a) => {
                let x = self.nodes[a.index()].value.clone();
                let xd = x.data();
                self.acc(*a, |ga| zip_acc(ga, g, |gi, k| if xd[k] > T::zero() { gi } else { T::zero() }));
            }
            Op::Log(a) => {
                let x = self.nodes[a.index()].value.clone();
                let xd = x.data();
                self.acc(*a, |ga| zip_acc(ga, g, |gi, k| gi / xd[k]));
            }
            Op::Permute(a, perm) => {
                let map = permute_map(self.nodes[a.index()].value.shape(), perm);
                self.acc(*a, |ga| {
                    for (k, &src) in map.iter().enumerate() {
                        ga[src] += g[k];
                    }
                });
            }
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = split_axis(out.shape(), *axis).unwrap();
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.index()].value.shape()[*axis];
                    self.acc(p, |gp| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            zip_acc(&mut gp[o * len * inner..(o + 1) * len * inner], src, |gi, _| gi);
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, len, inner) = split_axis(self.nodes[x.index()].value.shape(), *axis).unwrap();
                let w = out.shape()[*axis];
                let start = *start;
                self.acc(*x, |gx| {
                    for o in 0..outer {
                        let dst = &mut gx[(o * len + start) * inner..(o * len + start + w) * inner];
                        zip_acc(dst, &g[o * w * inner..(o + 1) * w * inner], |gi, _| gi);
                    }
                });
            }
            Op::MatMul { a, b, trans_b } => self.backprop_matmul(*a, *b, *trans_b, g),
            Op::Conv2d { x, w, geom, batch } => self.backprop_conv(*x, *w, *geom, *batch, g),
            Op::Softmax(a, axis) => {
                let (outer, len, inner) = split_axis(out.shape(), *axis).unwrap();
                self.acc(*a, |ga| {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let base = o * len * inner + ii;
                            let dotp: T = (0..len).map(|j| g[base + j * inner] * y[base + j * inner]).sum();
                            for j in 0..len {
                                let k = base + j * inner;
                                ga[k] += y[k] * (g[k] - dotp);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax(a, axis) => {
                let (outer, len, inner) = split_axis(out.shape(), *axis).unwrap();
                self.acc(*a, |ga| {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let base = o * len * inner + ii;
                            let gs: T = (0..len).map(|j| g[base + j * inner]).sum();
                            for j in 0..len {
                                let k = base + j * inner;
                                ga[k] += g[k] - y[k].exp() * gs;
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                scale,
                shift,
                axis,
                xhat,
                inv_std,
            } => {
                let (outer, len, inner) = split_axis(out.shape(), *axis).unwrap();
                let sc = scale.map(|s| self.nodes[s.index()].value.clone());
                if let Some(s) = scale {
                    self.acc(*s, |gs| {
                        for (k, (&gi, &xh)) in g.iter().zip(xhat).enumerate() {
                            gs[(k / inner) % len] += gi * xh;
                        }
                    });
                }
                if let Some(s) = shift {
                    self.acc(*s, |gs| {
                        for (k, &gi) in g.iter().enumerate() {
                            gs[(k / inner) % len] += gi;
                        }
                    });
                }
                let nlen = T::from_usize(len).unwrap();
                self.acc(*x, |gx| {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let base = o * len * inner + ii;
                            let dxh = |j: usize| {
                                let k = base + j * inner;
                                match &sc {
                                    Some(s) => g[k] * s.data()[j],
                                    None => g[k],
                                }
                            };
                            let mut s1 = T::zero();
                            let mut s2 = T::zero();
                            for j in 0..len {
                                let d = dxh(j);
                                s1 += d;
                                s2 += d * xhat[base + j * inner];
                            }
                            let is = inv_std[o * inner + ii] / nlen;
                            for j in 0..len {
                                let k = base + j * inner;
                                gx[k] += is * (nlen * dxh(j) - s1 - xhat[k] * s2);
                            }
                        }
                    }
                });
            }
            Op::GlobalAvgPool(x) => {
                let xs = self.nodes[x.index()].value.shape().to_vec();
                let area = xs[xs.len() - 2] * xs[xs.len() - 1];
                let inv = T::one() / T::from_usize(area).unwrap();
                self.acc(*x, |gx| {
                    for (c, chunk) in gx.chunks_exact_mut(area).enumerate() {
                        let v = g[c] * inv;
                        chunk.iter_mut().for_each(|e| *e += v);
                    }
                });
            }
            Op::Sum(a) => {
                let g0 = g[0];
                self.acc(*a, |ga| ga.iter_mut().for_each(|e| *e += g0));
            }
            Op::Mean(a) => {
                let n = T::from_usize(self.nodes[a.index()].value.numel()).unwrap();
                let g0 = g[0] / n;
                self.acc(*a, |ga| ga.iter_mut().for_each(|e| *e += g0));
            }
            Op::GatherCols { table, ids } => {
                let cols = self.nodes[table.index()].value.shape()[1];
                let rows = out.shape()[1];
                self.acc(*table, |gt| {
                    for (t, &id) in ids.iter().enumerate() {
                        for r in 0..rows {
                            gt[r * cols + id] += g[t * rows + r];
                        }
                    }
                });
            }
            Op::Pick { x, idx } => {
                let v = self.nodes[x.index()].value.shape()[1];
                self.acc(*x, |gx| {
                    for (i, &j) in idx.iter().enumerate() {
                        gx[i * v + j] += g[i];
                    }
                });
            }
        }
        self.nodes[i].op = op;
    }

    fn backprop_matmul(&mut self, a: Var, b: Var, trans_b: bool, g: &[T]) {
        let ta = self.nodes[a.index()].value.clone();
        let tb = self.nodes[b.index()].value.clone();
        let dims = MatDims::new("matmul", ta.shape(), tb.shape(), trans_b).expect("checked in forward");
        let (m, k, n) = (dims.m, dims.k, dims.n);
        self.acc(a, |ga| {
            for bi in 0..dims.batch {
                let gv = &g[bi * m * n..(bi + 1) * m * n];
                let bv = &tb.data()[dims.b_offset(bi)..dims.b_offset(bi) + k * n];
                let dst = &mut ga[bi * m * k..(bi + 1) * m * k];
                if trans_b {
                    // dA = dC · B, B stored [n×k]
                    kernels::matmul_nn(gv, bv, dst, m, n, k);
                } else {
                    // dA = dC · Bᵀ, B stored [k×n]
                    kernels::matmul_nt(gv, bv, dst, m, n, k);
                }
            }
        });
        self.acc(b, |gb| {
            for bi in 0..dims.batch {
                let gv = &g[bi * m * n..(bi + 1) * m * n];
                let av = &ta.data()[bi * m * k..(bi + 1) * m * k];
                let off = dims.b_offset(bi);
                let dst = &mut gb[off..off + k * n];
                if trans_b {
                    // dB = dCᵀ · A  -> [n×k]
                    kernels::matmul_tn(gv, av, dst, m, n, k);
                } else {
                    // dB = Aᵀ · dC  -> [k×n]
                    kernels::matmul_tn(av, gv, dst, m, k, n);
                }
            }
        });
    }

    fn backprop_conv(&mut self, x: Var, w: Var, geom: ConvGeom, batch: usize, g: &[T]) {
        let tx = self.nodes[x.index()].value.clone();
        let tw = self.nodes[w.index()].value.clone();
        let o = tw.shape()[0];
        let (img, ocols, crows) = (geom.channels * geom.height * geom.width, geom.col_cols(), geom.col_rows());
        if self.wants(w) {
            self.acc(w, |gw| {
                let mut cols = vec![T::zero(); crows * ocols];
                for n in 0..batch {
                    kernels::im2col(&tx.data()[n * img..(n + 1) * img], &geom, &mut cols);
                    kernels::matmul_nt(&g[n * o * ocols..(n + 1) * o * ocols], &cols, gw, o, ocols, crows);
                }
            });
        }
        if self.wants(x) {
            let per_image = parallel::map_indexed(batch, |n| {
                let mut dcols = vec![T::zero(); crows * ocols];
                kernels::matmul_tn(tw.data(), &g[n * o * ocols..(n + 1) * o * ocols], &mut dcols, o, crows, ocols);
                let mut dx = vec![T::zero(); img];
                kernels::col2im(&dcols, &geom, &mut dx);
                dx
            });
            self.acc(x, |gx| {
                for (n, dx) in per_image.iter().enumerate() {
                    zip_acc(&mut gx[n * img..(n + 1) * img], dx, |gi, _| gi);
                }
            });
        }
    }
}

#[inline]
fn zip_acc<T: Float>(dst: &mut [T], g: &[T], f: impl Fn(T, usize) -> T) {
    for (k, (d, &gi)) in dst.iter_mut().zip(g).enumerate() {
        *d += f(gi, k);
    }
}

#[inline]
pub(crate) fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Source index in the input for every output position of a permutation.
fn permute_map(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let eff: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = numel(shape);
    let rank = shape.len();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..total {
        map.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += eff[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

struct MatDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_b: bool,
}

impl MatDims {
    fn new(op: &'static str, a: &[usize], b: &[usize], trans_b: bool) -> Result<Self> {
        let mismatch = || TensorError::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        };
        if a.len() < 2 || b.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (bk, n) = if trans_b {
            (b[b.len() - 1], b[b.len() - 2])
        } else {
            (b[b.len() - 2], b[b.len() - 1])
        };
        if bk != k {
            return Err(mismatch());
        }
        let shared_b = b.len() == 2;
        if !shared_b && a[..a.len() - 2] != b[..b.len() - 2] {
            return Err(mismatch());
        }
        Ok(MatDims {
            batch: a[..a.len() - 2].iter().product(),
            m,
            k,
            n,
            shared_b,
        })
    }

    fn b_offset(&self, bi: usize) -> usize {
        if self.shared_b {
            0
        } else {
            bi * self.k * self.n
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(t(&[1], &[0.0]));
        let s = g.sigmoid(z);
        let th = g.tanh(z);
        assert_eq!(g.value(s).item(), 0.5);
        assert_eq!(g.value(th).item(), 0.0);
        let m = g.constant(t(&[2], &[-2.0, 3.0]));
        let l = g.leaky_relu(m, 0.01);
        close(g.value(l).data(), &[-0.02, 3.0], 1e-15);
    }

    #[test]
    fn broadcast_add_and_error() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let b = g.constant(t(&[3], &[10., 20., 30.]));
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11., 22., 33., 14., 25., 36.]);
        let col = g.constant(t(&[2, 1], &[1., 2.]));
        let d = g.mul(a, col).unwrap();
        assert_eq!(g.value(d).data(), &[1., 2., 3., 8., 10., 12.]);
        let bad = g.constant(t(&[2], &[1., 2.]));
        let err = g.add(a, bad).unwrap_err();
        assert_eq!(err.to_string(), "add: shape mismatch between [2, 3] and [2]");
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let i = g.constant(Tensor::eye(2));
        let ia = g.matmul(i, a).unwrap();
        assert_eq!(g.value(ia).data(), g.value(a).data());
        let ones = g.constant(t(&[2, 1], &[1., 1.]));
        let p = g.matmul(a, ones).unwrap();
        assert_eq!(g.shape(p), &[2, 1]);
        assert_eq!(g.value(p).data(), &[3., 7.]);
        let bad = g.constant(t(&[3, 1], &[1., 1., 1.]));
        assert!(matches!(g.matmul(a, bad), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn matmul_grad_is_b_transposed() {
        let mut g = Graph::<f64>::new();
        let a = g.param(t(&[2, 3], &[1., -2., 0.5, 3., 1., -1.]));
        let b = g.constant(t(&[3, 2], &[1., 2., 3., 4., 5., 6.]));
        let p = g.matmul(a, b).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();
        // d sum(AB)/dA[i,p] = sum_j B[p,j]
        assert_eq!(g.grad(a).unwrap(), &[3., 7., 11., 3., 7., 11.]);
    }

    #[test]
    fn conv_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 4, 4], &(1..=16).map(f64::from).collect::<Vec<_>>()));
        let one = g.constant(t(&[1, 1, 1, 1], &[1.0]));
        let id = g.conv2d(x, one, 1, 0).unwrap();
        assert_eq!(g.value(id).data(), g.value(x).data());
        let k = g.constant(Tensor::ones([1, 1, 2, 2]));
        let s = g.conv2d(x, k, 2, 0).unwrap();
        assert_eq!(g.shape(s), &[1, 2, 2]);
        assert_eq!(g.value(s).data(), &[14., 22., 46., 54.]);
        let big = g.constant(Tensor::ones([1, 1, 7, 7]));
        assert!(matches!(g.conv2d(x, big, 1, 1), Err(TensorError::InvalidArgument { .. })));
    }

    #[test]
    fn conv_output_size_128() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros([1, 128, 128]));
        let k = g.constant(Tensor::zeros([2, 1, 4, 4]));
        let y = g.conv2d(x, k, 2, 1).unwrap();
        assert_eq!(g.shape(y), &[2, 64, 64]);
    }

    #[test]
    fn reductions() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(Tensor::full([4], 3.7));
        let s = g.softmax(c, 0).unwrap();
        close(g.value(s).data(), &[0.25; 4], 1e-15);
        let x = g.constant(t(&[3], &[1., 2., 3.]));
        let ln = g.layer_norm(x, None, None, 0, 0.0).unwrap();
        close(g.value(ln).data(), &[-1.224744871391589, 0.0, 1.224744871391589], 1e-12);
        let v = g.constant(Tensor::full([2, 3, 4], 0.5));
        let p = g.global_avg_pool(v).unwrap();
        assert_eq!(g.shape(p), &[2]);
        assert_eq!(g.value(p).data(), &[0.5, 0.5]);
        assert!(g.softmax(x, 1).is_err());
        assert!(g.layer_norm(x, None, None, 0, -1.0).is_err());
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2, 2], &[1., 2., 3., 4.]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.; 4]);

        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[3], &[1., 2., 3.]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2., 4., 6.]);
        assert_eq!(g.backward(s), Err(TensorError::BackwardTwice));
        g.reset_grads();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2., 4., 6.]);
        assert!(matches!(g.backward(x), Err(TensorError::BackwardTwice)));
        g.reset_grads();
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn constants_get_no_grad() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[1., 2.]));
        let c = g.constant(t(&[2], &[3., 4.]));
        let p = g.mul(x, c).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[3., 4.]);
        assert!(g.grad(c).is_none());
    }

    #[test]
    fn gather_and_pick() {
        let mut g = Graph::<f64>::new();
        let e = g.param(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let rows = g.gather_cols(e, &[2, 0, 2]).unwrap();
        assert_eq!(g.value(rows).data(), &[3., 6., 1., 4., 3., 6.]);
        let s = g.sum(rows);
        g.backward(s).unwrap();
        assert_eq!(g.grad(e).unwrap(), &[1., 0., 2., 1., 0., 2.]);
        assert!(matches!(g.gather_cols(e, &[3]), Err(TensorError::IndexOutOfRange { index: 3, size: 3 })));
        let p = g.pick(e, &[1, 2]).unwrap();
        assert_eq!(g.value(p).data(), &[2., 6.]);
    }

    #[test]
    #[should_panic(expected = "does not belong")]
    fn foreign_var_rejected() {
        let mut g1 = Graph::<f64>::new();
        let mut g2 = Graph::<f64>::new();
        let a = g1.constant(Tensor::ones([1]));
        g2.tanh(a);
    }

    #[test]
    fn masked_softmax_rows() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2, 3], &[0.3, -1.0, 2.0, 1.0, 1.0, 1.0]));
        let m = g.constant(t(&[2, 3], &[0.0, f64::NEG_INFINITY, 0.0, 0.0, 0.0, f64::NEG_INFINITY]));
        let xm = g.add(x, m).unwrap();
        let s = g.softmax(xm, 1).unwrap();
        let v = g.value(s).data();
        assert_eq!(v[1], 0.0);
        assert_eq!(v[5], 0.0);
        close(&[v[0] + v[1] + v[2], v[3] + v[4] + v[5]], &[1.0, 1.0], 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_rows_are_distributions(vals in prop::collection::vec(-10.0f64..10.0, 12)) {
                let mut g = Graph::<f64>::new();
                let x = g.constant(t(&[3, 4], &vals));
                let s = g.softmax(x, 1).unwrap();
                for row in g.value(s).data().chunks(4) {
                    prop_assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                }
            }

            #[test]
            fn reshape_transpose_round_trip(vals in prop::collection::vec(-5.0f64..5.0, 24)) {
                let mut g = Graph::<f64>::new();
                let x = g.constant(t(&[2, 3, 4], &vals));
                let p = g.permute(x, &[2, 0, 1]).unwrap();
                let back = g.permute(p, &[1, 2, 0]).unwrap();
                prop_assert_eq!(g.value(back).data(), g.value(x).data());
                let tt = g.transpose(x).unwrap();
                let tt = g.transpose(tt).unwrap();
                prop_assert_eq!(g.value(tt).data(), g.value(x).data());
                let r = g.reshape(x, [6, 4]).unwrap();
                let r = g.reshape(r, [2, 3, 4]).unwrap();
                prop_assert_eq!(g.value(r), g.value(x));
            }

            #[test]
            fn identity_conv_is_exact(vals in prop::collection::vec(-1e6f64..1e6, 2 * 5 * 3)) {
                let mut g = Graph::<f64>::new();
                let x = g.constant(t(&[2, 5, 3], &vals));
                let k = g.constant(t(&[2, 2, 1, 1], &[1., 0., 0., 1.]));
                let y = g.conv2d(x, k, 1, 0).unwrap();
                prop_assert_eq!(g.value(y).data(), g.value(x).data());
            }
        }
    }
}
