//! Neural building blocks: named parameter storage, graph sessions, the
//! strided conv frame encoder, GRU cell, sinusoidal positions, scaled
//! dot-product and multi-head attention, the position-wise FFN and the token
//! embedding.
//!
//! Weight matrices multiply from the right (`x · W`) except the GRU, whose
//! fused gate matrices are stored `[3H × H_in]` in r, z, n order and applied
//! as `x · Wᵀ`.

use std::collections::HashMap;

use crate::codec::TokenId;
use crate::tensor::{Float, Graph, SeededRng, Tensor, TensorError, Var};

pub const LEAKY_SLOPE: f64 = 0.01;
pub const LN_EPS: f64 = 1e-5;
pub const CONV_KERNEL: usize = 4;
pub const CONV_STRIDE: usize = 2;
pub const CONV_PAD: usize = 1;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum NnError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("duplicate parameter name {0:?}")]
    DuplicateParam(String),
}

pub type Result<T, E = NnError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }

    pub(crate) fn from_index(i: usize) -> Self {
        ParamId(i)
    }
}

/// Named parameter tensors in registration order.
#[derive(Clone)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Float> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(NnError::DuplicateParam(name));
        }
        let id = ParamId(self.values.len());
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        Ok(id)
    }

    /// Uniform Glorot initialization.
    pub fn add_xavier(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
        rng: &mut SeededRng,
    ) -> Result<ParamId> {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.add(name, Tensor::uniform(shape.to_vec(), -a, a, rng))
    }

    pub fn add_full(&mut self, name: impl Into<String>, shape: &[usize], v: f64) -> Result<ParamId> {
        self.add(name, Tensor::full(shape.to_vec(), T::of(v)))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(NnError::Tensor(TensorError::ShapeMismatch {
                op: "set_param",
                lhs: self.values[id.0].shape().to_vec(),
                rhs: value.shape().to_vec(),
            }));
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn num_elements(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }
}

/// A graph plus lazily bound parameters.
///
/// Eval sessions bind parameters as constants and never drop units. Grad
/// sessions bind them as differentiable leaves. Train sessions additionally
/// apply dropout with their own seeded stream.
pub struct Session<'a, T: Float> {
    pub g: Graph<T>,
    store: &'a ParamStore<T>,
    bound: Vec<Option<Var>>,
    requires_grad: bool,
    dropout_rng: Option<SeededRng>,
}

impl<'a, T: Float> Session<'a, T> {
    pub fn eval(store: &'a ParamStore<T>) -> Self {
        Self::build(store, false, None)
    }

    pub fn with_grad(store: &'a ParamStore<T>) -> Self {
        Self::build(store, true, None)
    }

    pub fn train(store: &'a ParamStore<T>, rng: SeededRng) -> Self {
        Self::build(store, true, Some(rng))
    }

    fn build(store: &'a ParamStore<T>, requires_grad: bool, dropout_rng: Option<SeededRng>) -> Self {
        Session {
            g: Graph::new(),
            store,
            bound: vec![None; store.len()],
            requires_grad,
            dropout_rng,
        }
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    /// Graph handle for a parameter; the tensor buffer is shared, not copied.
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.g.leaf(self.store.get(id).clone(), self.requires_grad);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.g.constant(t)
    }

    /// Inverted dropout; identity outside training or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        let Some(rng) = self.dropout_rng.as_mut() else {
            return Ok(x);
        };
        if p <= 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - p));
        let shape = self.g.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let mask: Vec<T> = (0..n)
            .map(|_| if rng.bernoulli(p) { T::zero() } else { keep })
            .collect();
        let m = self.g.constant(Tensor::new(shape, mask)?);
        Ok(self.g.mul(x, m)?)
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        Ok(self.g.backward(loss)?)
    }

    /// Gradient of every parameter used in this session, indexed by [`ParamId`].
    pub fn param_grads(&self) -> Vec<Option<Vec<T>>> {
        self.bound
            .iter()
            .map(|b| b.and_then(|v| self.g.grad(v).map(<[T]>::to_vec)))
            .collect()
    }
}

// ---- blocks ----

/// `x · W + b` with `W: [in, out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let w = store.add_xavier(format!("{name}.w"), &[d_in, d_out], d_in, d_out, rng)?;
        let b = if bias {
            Some(store.add_full(format!("{name}.b"), &[d_out], 0.0)?)
        } else {
            None
        };
        Ok(Linear { w, b })
    }

    pub fn forward<T: Float>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let w = s.p(self.w);
        let y = s.g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = s.p(b);
                Ok(s.g.add(y, b)?)
            }
            None => Ok(y),
        }
    }
}

/// Learned scale and shift for a layer norm over one axis.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub scale: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            scale: store.add_full(format!("{name}.scale"), &[dim], 1.0)?,
            shift: store.add_full(format!("{name}.shift"), &[dim], 0.0)?,
        })
    }

    pub fn forward<T: Float>(&self, s: &mut Session<T>, x: Var, axis: usize) -> Result<Var> {
        let (sc, sh) = (s.p(self.scale), s.p(self.shift));
        Ok(s.g.layer_norm(x, Some(sc), Some(sh), axis, LN_EPS)?)
    }
}

/// Channel counts of the three conv layers for model width `hidden`:
/// `hidden/8 · (1, 2, 8)`, which is (64, 128, 512) at `hidden = 512`.
pub fn conv_channel_plan(hidden: usize) -> Result<[usize; 3]> {
    if hidden == 0 || hidden % 8 != 0 {
        return Err(NnError::Config(format!("hidden size {hidden} must be a positive multiple of 8")));
    }
    let base = hidden / 8;
    Ok([base, base * 2, base * 8])
}

/// Three rounds of conv (k=4, stride 2, pad 1) → LeakyReLU → layer norm over
/// channels, then global average pooling.
#[derive(Debug, Clone)]
pub struct ConvEncoder {
    pub layers: Vec<(ParamId, LayerNorm)>,
    pub channels: [usize; 3],
}

impl ConvEncoder {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, hidden: usize, rng: &mut SeededRng) -> Result<Self> {
        let channels = conv_channel_plan(hidden)?;
        let mut layers = Vec::new();
        let mut c_in = crate::frames::CHANNELS;
        for (i, &c_out) in channels.iter().enumerate() {
            let k2 = CONV_KERNEL * CONV_KERNEL;
            let kernel = store.add_xavier(
                format!("{name}.conv{i}.kernel"),
                &[c_out, c_in, CONV_KERNEL, CONV_KERNEL],
                c_in * k2,
                c_out * k2,
                rng,
            )?;
            let ln = LayerNorm::new(store, &format!("{name}.conv{i}.ln"), c_out)?;
            layers.push((kernel, ln));
            c_in = c_out;
        }
        Ok(ConvEncoder { layers, channels })
    }

    pub fn out_dim(&self) -> usize {
        self.channels[2]
    }

    /// `[N, 3, h, w] → [N, C]` for any spatial size the three strided layers accept.
    pub fn forward<T: Float>(&self, s: &mut Session<T>, frames: Var) -> Result<Var> {
        let shape = s.g.shape(frames);
        if shape.len() != 4 || shape[1] != crate::frames::CHANNELS {
            return Err(NnError::Input(format!("frames must be [N, 3, H, W], got {shape:?}")));
        }
        let mut x = frames;
        for (kernel, ln) in &self.layers {
            let k = s.p(*kernel);
            x = s.g.conv2d(x, k, CONV_STRIDE, CONV_PAD)?;
            x = s.g.leaky_relu(x, LEAKY_SLOPE);
            x = ln.forward(s, x, 1)?;
        }
        Ok(s.g.global_avg_pool(x)?)
    }
}

/// Encodes a normalized standard clip `[40, 3, 128, 128]` into `[40, C]`.
pub fn conv_frame_encode<T: Float>(s: &mut Session<T>, enc: &ConvEncoder, clip: Var) -> Result<Var> {
    let want = [
        crate::frames::CLIP_FRAMES,
        crate::frames::CHANNELS,
        crate::frames::FRAME_SIZE,
        crate::frames::FRAME_SIZE,
    ];
    if s.g.shape(clip) != want {
        return Err(NnError::Input(format!(
            "clip tensor must be {want:?}, got {:?}",
            s.g.shape(clip)
        )));
    }
    enc.forward(s, clip)
}

/// `PE[pos, 2i] = sin(pos / 10000^(2i/H))`, `PE[pos, 2i+1] = cos(...)`.
pub fn positional_encoding<T: Float>(len: usize, hidden: usize) -> Result<Tensor<T>> {
    if hidden == 0 || hidden % 2 != 0 {
        return Err(NnError::Config(format!("positional encoding needs an even width, got {hidden}")));
    }
    let mut data = Vec::with_capacity(len * hidden);
    for pos in 0..len {
        pe_row_into(pos, hidden, &mut data);
    }
    Ok(Tensor::new(vec![len, hidden], data)?)
}

fn pe_row_into<T: Float>(pos: usize, hidden: usize, out: &mut Vec<T>) {
    for i in 0..hidden / 2 {
        let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / hidden as f64);
        out.push(T::of(angle.sin()));
        out.push(T::of(angle.cos()));
    }
}

/// Row `pos` of the positional encoding as a `[1, H]` tensor.
pub fn positional_row<T: Float>(pos: usize, hidden: usize) -> Result<Tensor<T>> {
    if hidden == 0 || hidden % 2 != 0 {
        return Err(NnError::Config(format!("positional encoding needs an even width, got {hidden}")));
    }
    let mut data = Vec::with_capacity(hidden);
    pe_row_into(pos, hidden, &mut data);
    Ok(Tensor::new(vec![1, hidden], data)?)
}

/// Fused GRU cell with gates in r, z, n order:
///
/// ```text
/// r = σ(W_ir a + b_ir + W_hr h + b_hr)
/// z = σ(W_iz a + b_iz + W_hz h + b_hz)
/// n = tanh(W_in a + b_in + r ⊙ (W_hn h + b_hn))
/// h' = (1 − z) ⊙ n + z ⊙ h
/// ```
#[derive(Debug, Clone, Copy)]
pub struct GruCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
    pub hidden: usize,
}

impl GruCell {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        hidden: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        Ok(GruCell {
            w_ih: store.add_xavier(format!("{name}.w_ih"), &[3 * hidden, d_in], d_in, hidden, rng)?,
            w_hh: store.add_xavier(format!("{name}.w_hh"), &[3 * hidden, hidden], hidden, hidden, rng)?,
            b_ih: store.add_full(format!("{name}.b_ih"), &[3 * hidden], 0.0)?,
            b_hh: store.add_full(format!("{name}.b_hh"), &[3 * hidden], 0.0)?,
            hidden,
        })
    }

    /// Input-side gate pre-activations for a whole sequence: `[T, 3H]`.
    pub fn input_gates<T: Float>(&self, s: &mut Session<T>, xs: Var) -> Result<Var> {
        let (w, b) = (s.p(self.w_ih), s.p(self.b_ih));
        let y = s.g.matmul_bt(xs, w)?;
        Ok(s.g.add(y, b)?)
    }

    /// One step from precomputed input gates `gi: [1, 3H]`.
    pub fn step<T: Float>(&self, s: &mut Session<T>, gi: Var, h: Var) -> Result<Var> {
        let hd = self.hidden;
        let (w, b) = (s.p(self.w_hh), s.p(self.b_hh));
        let gh = s.g.matmul_bt(h, w)?;
        let gh = s.g.add(gh, b)?;
        let part = |s: &mut Session<T>, v: Var, k: usize| s.g.slice(v, 1, k * hd, (k + 1) * hd);
        let (ir, iz, inn) = (part(s, gi, 0)?, part(s, gi, 1)?, part(s, gi, 2)?);
        let (hr, hz, hn) = (part(s, gh, 0)?, part(s, gh, 1)?, part(s, gh, 2)?);
        let r = s.g.add(ir, hr)?;
        let r = s.g.sigmoid(r);
        let z = s.g.add(iz, hz)?;
        let z = s.g.sigmoid(z);
        let rn = s.g.mul(r, hn)?;
        let n = s.g.add(inn, rn)?;
        let n = s.g.tanh(n);
        // (1 - z) n + z h = n + z (h - n)
        let d = s.g.sub(h, n)?;
        let zd = s.g.mul(z, d)?;
        Ok(s.g.add(n, zd)?)
    }

    /// Runs the cell over `xs: [T, H_in]` from `h0: [1, H]`; returns all
    /// hidden states `[T, H]` and the final one.
    pub fn run<T: Float>(&self, s: &mut Session<T>, xs: Var, h0: Var) -> Result<(Var, Var)> {
        let steps = s.g.shape(xs)[0];
        let gi = self.input_gates(s, xs)?;
        let mut h = h0;
        let mut outs = Vec::with_capacity(steps);
        for t in 0..steps {
            let row = s.g.slice(gi, 0, t, t + 1)?;
            h = self.step(s, row, h)?;
            outs.push(h);
        }
        Ok((s.g.concat(&outs, 0)?, h))
    }
}

/// Single GRU update for `a: [1, H_in]` (or `[H_in]`) and `h_prev: [1, H]`.
pub fn gru_cell<T: Float>(s: &mut Session<T>, cell: &GruCell, a: Var, h_prev: Var) -> Result<Var> {
    let a = if s.g.shape(a).len() == 1 {
        let n = s.g.shape(a)[0];
        s.g.reshape(a, [1, n])?
    } else {
        a
    };
    let h_prev = if s.g.shape(h_prev).len() == 1 {
        s.g.reshape(h_prev, [1, cell.hidden])?
    } else {
        h_prev
    };
    if s.g.shape(h_prev) != [1, cell.hidden] {
        return Err(NnError::Input(format!(
            "hidden state must be [1, {}], got {:?}",
            cell.hidden,
            s.g.shape(h_prev)
        )));
    }
    let gi = cell.input_gates(s, a)?;
    cell.step(s, gi, h_prev)
}

/// Additive causal mask: 0 on and below the diagonal, −∞ above.
pub fn causal_mask<T: Float>(len: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); len * len];
    for i in 0..len {
        for j in i + 1..len {
            data[i * len + j] = T::neg_infinity();
        }
    }
    Tensor::new(vec![len, len], data).expect("square mask")
}

/// `softmax(Q Kᵀ / √d_k + mask) V` over the last two axes, with dropout on
/// the weights. Returns the output and the attention weights.
pub fn attention<T: Float>(
    s: &mut Session<T>,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&Tensor<T>>,
    dropout: f64,
) -> Result<(Var, Var)> {
    let (qs, ks, vs) = (s.g.shape(q).to_vec(), s.g.shape(k).to_vec(), s.g.shape(v).to_vec());
    let r = qs.len();
    if r < 2 || ks.len() != r || vs.len() != r || ks[r - 2] != vs[r - 2] || qs[r - 1] != ks[r - 1] {
        return Err(NnError::Input(format!(
            "attention shapes incompatible: Q {qs:?}, K {ks:?}, V {vs:?}"
        )));
    }
    let (tq, tk, dk) = (qs[r - 2], ks[r - 2], qs[r - 1]);
    let scores = s.g.matmul_bt(q, k)?;
    let mut scores = s.g.scale(scores, 1.0 / (dk as f64).sqrt());
    if let Some(m) = mask {
        if m.shape() != [tq, tk] {
            return Err(NnError::Input(format!(
                "mask shape {:?} does not match scores [{tq}, {tk}]",
                m.shape()
            )));
        }
        let mv = s.g.constant(m.clone());
        scores = s.g.add(scores, mv)?;
    }
    let w = s.g.softmax(scores, r - 1)?;
    let wd = s.dropout(w, dropout)?;
    Ok((s.g.matmul(wd, v)?, w))
}

/// Multi-head attention with `W_Q, W_K, W_V, W_O: [H, H]`; head `i` owns
/// columns `i·d_k .. (i+1)·d_k` of the input projections.
#[derive(Debug, Clone, Copy)]
pub struct MultiHeadAttention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
    pub hidden: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        hidden: usize,
        heads: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if heads == 0 || hidden % heads != 0 {
            return Err(NnError::Config(format!("{heads} heads do not divide width {hidden}")));
        }
        let mut mk = |n: &str| store.add_xavier(format!("{name}.{n}"), &[hidden, hidden], hidden, hidden, rng);
        Ok(MultiHeadAttention {
            wq: mk("wq")?,
            wk: mk("wk")?,
            wv: mk("wv")?,
            wo: mk("wo")?,
            heads,
            hidden,
        })
    }

    pub fn d_k(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn project<T: Float>(&self, s: &mut Session<T>, x: Var, w: ParamId) -> Result<Var> {
        let w = s.p(w);
        Ok(s.g.matmul(x, w)?)
    }

    /// `[T, H] → [heads, T, d_k]`
    pub fn split_heads<T: Float>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let t = s.g.shape(x)[0];
        let r = s.g.reshape(x, [t, self.heads, self.d_k()])?;
        Ok(s.g.permute(r, &[1, 0, 2])?)
    }

    /// `[heads, T, d_k] → [T, H] → · W_O`
    pub fn merge_heads<T: Float>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let t = s.g.shape(x)[1];
        let p = s.g.permute(x, &[1, 0, 2])?;
        let m = s.g.reshape(p, [t, self.hidden])?;
        let wo = s.p(self.wo);
        Ok(s.g.matmul(m, wo)?)
    }

    /// Attention over already-projected `q: [Tq, H]`, `k, v: [Tk, H]`.
    pub fn attend_projected<T: Float>(
        &self,
        s: &mut Session<T>,
        q: Var,
        k: Var,
        v: Var,
        mask: Option<&Tensor<T>>,
        dropout: f64,
    ) -> Result<Var> {
        let (qh, kh, vh) = (self.split_heads(s, q)?, self.split_heads(s, k)?, self.split_heads(s, v)?);
        let (out, _) = attention(s, qh, kh, vh, mask, dropout)?;
        self.merge_heads(s, out)
    }

    /// Standard form: queries from `xq: [Tq, H]`, keys and values from `xkv: [Tk, H]`.
    pub fn forward<T: Float>(
        &self,
        s: &mut Session<T>,
        xq: Var,
        xkv: Var,
        mask: Option<&Tensor<T>>,
        dropout: f64,
    ) -> Result<Var> {
        let q = self.project(s, xq, self.wq)?;
        let k = self.project(s, xkv, self.wk)?;
        let v = self.project(s, xkv, self.wv)?;
        self.attend_projected(s, q, k, v, mask, dropout)
    }

    /// Literal inter-attention mixing matrix built from encoder-side queries
    /// and keys: per head `softmax(Q_hᵀ K_h / √d_k)`, shape `[heads, d_k, d_k]`.
    pub fn literal_mix<T: Float>(&self, s: &mut Session<T>, z_enc: Var, dropout: f64) -> Result<Var> {
        let q = self.project(s, z_enc, self.wq)?;
        let k = self.project(s, z_enc, self.wk)?;
        let qh = self.split_heads(s, q)?;
        let kh = self.split_heads(s, k)?;
        let qt = s.g.transpose(qh)?;
        let kt = s.g.transpose(kh)?;
        // Qᵀ K as (Qᵀ)(Kᵀ)ᵀ
        let scores = s.g.matmul_bt(qt, kt)?;
        let scores = s.g.scale(scores, 1.0 / (self.d_k() as f64).sqrt());
        let w = s.g.softmax(scores, 2)?;
        s.dropout(w, dropout)
    }

    /// Applies a literal mixing matrix to decoder-side values: `V_h · S_h`.
    pub fn literal_apply<T: Float>(&self, s: &mut Session<T>, z_dec: Var, mix: Var) -> Result<Var> {
        let v = self.project(s, z_dec, self.wv)?;
        let vh = self.split_heads(s, v)?;
        let out = s.g.matmul(vh, mix)?;
        self.merge_heads(s, out)
    }
}

/// `max(0, z W₁ + b₁) W₂ + b₂`
#[derive(Debug, Clone, Copy)]
pub struct Ffn {
    pub l1: Linear,
    pub l2: Linear,
}

impl Ffn {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        hidden: usize,
        d_ff: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        Ok(Ffn {
            l1: Linear::new(store, &format!("{name}.l1"), hidden, d_ff, true, rng)?,
            l2: Linear::new(store, &format!("{name}.l2"), d_ff, hidden, true, rng)?,
        })
    }

    pub fn forward<T: Float>(&self, s: &mut Session<T>, z: Var) -> Result<Var> {
        let h = self.l1.forward(s, z)?;
        let h = s.g.relu(h);
        self.l2.forward(s, h)
    }
}

pub fn ffn<T: Float>(s: &mut Session<T>, params: &Ffn, z: Var) -> Result<Var> {
    let h_dim = s.store().get(params.l1.w).shape()[0];
    if s.g.shape(z).last() != Some(&h_dim) {
        return Err(NnError::Input(format!(
            "FFN input last dim must be {h_dim}, got shape {:?}",
            s.g.shape(z)
        )));
    }
    params.forward(s, z)
}

/// Token embedding `E_p: [H, |V|]`; token `j` maps to column `j`.
#[derive(Debug, Clone, Copy)]
pub struct Embedding {
    pub table: ParamId,
}

impl Embedding {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        hidden: usize,
        vocab: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        Ok(Embedding {
            table: store.add_xavier(format!("{name}.table"), &[hidden, vocab], vocab, hidden, rng)?,
        })
    }

    /// `[len, H]`, no scaling.
    pub fn forward<T: Float>(&self, s: &mut Session<T>, ids: &[TokenId]) -> Result<Var> {
        let t = s.p(self.table);
        let idx: Vec<usize> = ids.iter().map(|id| id.index()).collect();
        Ok(s.g.gather_cols(t, &idx)?)
    }
}

/// Embedding lookup by raw column index, rejecting out-of-range ids.
pub fn embed<T: Float>(s: &mut Session<T>, e: &Embedding, ids: &[usize]) -> Result<Var> {
    let t = s.p(e.table);
    Ok(s.g.gather_cols(t, ids)?)
}
