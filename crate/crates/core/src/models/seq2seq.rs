use super::{ModelConfig, Result};
use crate::codec::{TokenId, VOCAB_SIZE};
use crate::nn::{Embedding, GruCell, Linear, MultiHeadAttention, ParamStore, Session};
use crate::tensor::{Float, SeededRng, Tensor, Var};

/// Stacked GRU encoder-decoder. Decoder layer `i` reuses encoder layer `i`'s
/// cell. Each decode step attends from the previous top hidden state over the
/// top encoder outputs, concatenates the context with the token embedding,
/// projects to `H` and feeds the stack.
#[derive(Debug, Clone)]
pub struct Seq2Seq {
    pub layers: Vec<GruCell>,
    pub embed: Embedding,
    pub attn: MultiHeadAttention,
    pub in_proj: Linear,
    pub out: Linear,
    hidden: usize,
    dropout: f64,
}

pub struct Seq2SeqState<T: Float> {
    hs: Vec<Tensor<T>>,
    k: Tensor<T>,
    v: Tensor<T>,
    pub(crate) pos: usize,
}

struct Encoded {
    keys: Var,
    values: Var,
    finals: Vec<Var>,
}

impl Seq2Seq {
    pub(crate) fn new<T: Float>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut SeededRng) -> Result<Self> {
        let h = cfg.hidden;
        let layers = (0..cfg.enc_layers)
            .map(|i| GruCell::new(store, &format!("gru.l{i}"), h, h, rng))
            .collect::<Result<_, _>>()?;
        Ok(Seq2Seq {
            layers,
            embed: Embedding::new(store, "dec.embed", h, VOCAB_SIZE, rng)?,
            attn: MultiHeadAttention::new(store, "dec.attn", h, cfg.heads, rng)?,
            in_proj: Linear::new(store, "dec.in_proj", 2 * h, h, true, rng)?,
            out: Linear::new(store, "dec.out", h, VOCAB_SIZE, true, rng)?,
            hidden: h,
            dropout: cfg.dropout,
        })
    }

    /// Encoder cells and decoder cells are the same objects.
    pub fn encoder_cells(&self) -> &[GruCell] {
        &self.layers
    }

    pub fn decoder_cells(&self) -> &[GruCell] {
        &self.layers
    }

    fn encode<T: Float>(&self, s: &mut Session<T>, frame_vecs: Var) -> Result<Encoded> {
        let h0 = s.constant(Tensor::zeros([1, self.hidden]));
        let mut x = frame_vecs;
        let mut finals = Vec::with_capacity(self.layers.len());
        for cell in &self.layers {
            let (outs, last) = cell.run(s, x, h0)?;
            x = s.dropout(outs, self.dropout)?;
            finals.push(last);
        }
        let keys = self.attn.project(s, x, self.attn.wk)?;
        let values = self.attn.project(s, x, self.attn.wv)?;
        Ok(Encoded { keys, values, finals })
    }

    /// One decoder step; updates `hs` in place and returns the top output `[1, H]`.
    fn step_vars<T: Float>(&self, s: &mut Session<T>, e_t: Var, hs: &mut [Var], keys: Var, values: Var) -> Result<Var> {
        let query = hs[hs.len() - 1];
        let q = self.attn.project(s, query, self.attn.wq)?;
        let ctx = self.attn.attend_projected(s, q, keys, values, None, self.dropout)?;
        let joined = s.g.concat(&[e_t, ctx], 1)?;
        let mut x = self.in_proj.forward(s, joined)?;
        for (cell, h) in self.layers.iter().zip(hs.iter_mut()) {
            let gi = cell.input_gates(s, x)?;
            *h = cell.step(s, gi, *h)?;
            x = s.dropout(*h, self.dropout)?;
        }
        Ok(x)
    }

    pub(crate) fn forward<T: Float>(&self, s: &mut Session<T>, frame_vecs: Var, target_in: &[TokenId]) -> Result<Var> {
        let enc = self.encode(s, frame_vecs)?;
        let emb = self.embed.forward(s, target_in)?;
        let emb = s.dropout(emb, self.dropout)?;
        let mut hs = enc.finals;
        let mut outs = Vec::with_capacity(target_in.len());
        for t in 0..target_in.len() {
            let e_t = s.g.slice(emb, 0, t, t + 1)?;
            outs.push(self.step_vars(s, e_t, &mut hs, enc.keys, enc.values)?);
        }
        let top = s.g.concat(&outs, 0)?;
        self.out.forward(s, top).map_err(Into::into)
    }

    pub(crate) fn begin<T: Float>(&self, store: &ParamStore<T>, frame_vecs: &Tensor<T>) -> Result<Seq2SeqState<T>> {
        let mut s = Session::eval(store);
        let fv = s.constant(frame_vecs.clone());
        let enc = self.encode(&mut s, fv)?;
        Ok(Seq2SeqState {
            hs: enc.finals.iter().map(|&v| s.g.value(v).clone()).collect(),
            k: s.g.value(enc.keys).clone(),
            v: s.g.value(enc.values).clone(),
            pos: 0,
        })
    }

    pub(crate) fn step<T: Float>(&self, store: &ParamStore<T>, st: &mut Seq2SeqState<T>, token: TokenId) -> Result<Vec<T>> {
        let mut s = Session::eval(store);
        let keys = s.constant(st.k.clone());
        let values = s.constant(st.v.clone());
        let mut hs: Vec<Var> = st.hs.iter().map(|h| s.constant(h.clone())).collect();
        let e = self.embed.forward(&mut s, &[token])?;
        let top = self.step_vars(&mut s, e, &mut hs, keys, values)?;
        let logits = self.out.forward(&mut s, top)?;
        st.hs = hs.iter().map(|h| s.g.value(*h).clone()).collect();
        st.pos += 1;
        Ok(s.g.value(logits).data().to_vec())
    }
}
