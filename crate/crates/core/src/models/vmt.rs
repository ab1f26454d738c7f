use super::{pe_constant, push_row, rows_tensor, CrossAttentionMode, ModelConfig, Result};
use crate::codec::{TokenId, VOCAB_SIZE};
use crate::nn::{self, causal_mask, Embedding, Ffn, LayerNorm, Linear, MultiHeadAttention, ParamStore, Session};
use crate::tensor::{Float, SeededRng, Tensor, Var};

#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub attn: MultiHeadAttention,
    pub ln1: LayerNorm,
    pub ffn: Ffn,
    pub ln2: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub ln1: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ffn: Ffn,
    pub ln3: LayerNorm,
}

/// Transformer encoder-decoder over frame vectors. Every sublayer is wrapped
/// as `LayerNorm(x + Dropout(sublayer(x)))`.
#[derive(Debug, Clone)]
pub struct Vmt {
    pub encoder: Vec<EncoderLayer>,
    pub decoder: Vec<DecoderLayer>,
    pub embed: Embedding,
    pub out: Linear,
    hidden: usize,
    dropout: f64,
    mode: CrossAttentionMode,
}

enum CrossCache<T: Float> {
    Standard { k: Tensor<T>, v: Tensor<T> },
    Literal { mix: Tensor<T> },
}

pub struct VmtState<T: Float> {
    self_k: Vec<Vec<T>>,
    self_v: Vec<Vec<T>>,
    cross: Vec<CrossCache<T>>,
    pub(crate) pos: usize,
}

/// Encoder-side inputs of each decoder layer's inter-attention.
enum CrossVars {
    Standard { k: Var, v: Var },
    Literal { mix: Var },
}

impl Vmt {
    pub(crate) fn new<T: Float>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut SeededRng) -> Result<Self> {
        let h = cfg.hidden;
        let mut encoder = Vec::with_capacity(cfg.enc_layers);
        for i in 0..cfg.enc_layers {
            let p = format!("enc.l{i}");
            encoder.push(EncoderLayer {
                attn: MultiHeadAttention::new(store, &format!("{p}.attn"), h, cfg.heads, rng)?,
                ln1: LayerNorm::new(store, &format!("{p}.ln1"), h)?,
                ffn: Ffn::new(store, &format!("{p}.ffn"), h, cfg.d_ff, rng)?,
                ln2: LayerNorm::new(store, &format!("{p}.ln2"), h)?,
            });
        }
        let mut decoder = Vec::with_capacity(cfg.dec_layers);
        for i in 0..cfg.dec_layers {
            let p = format!("dec.l{i}");
            decoder.push(DecoderLayer {
                self_attn: MultiHeadAttention::new(store, &format!("{p}.self_attn"), h, cfg.heads, rng)?,
                ln1: LayerNorm::new(store, &format!("{p}.ln1"), h)?,
                cross_attn: MultiHeadAttention::new(store, &format!("{p}.cross_attn"), h, cfg.heads, rng)?,
                ln2: LayerNorm::new(store, &format!("{p}.ln2"), h)?,
                ffn: Ffn::new(store, &format!("{p}.ffn"), h, cfg.d_ff, rng)?,
                ln3: LayerNorm::new(store, &format!("{p}.ln3"), h)?,
            });
        }
        Ok(Vmt {
            encoder,
            decoder,
            embed: Embedding::new(store, "dec.embed", h, VOCAB_SIZE, rng)?,
            out: Linear::new(store, "dec.out", h, VOCAB_SIZE, true, rng)?,
            hidden: h,
            dropout: cfg.dropout,
            mode: cfg.cross_attention_mode,
        })
    }

    pub fn cross_attention_mode(&self) -> CrossAttentionMode {
        self.mode
    }

    fn residual<T: Float>(&self, s: &mut Session<T>, x: Var, sub: Var, ln: &LayerNorm) -> Result<Var> {
        let d = s.dropout(sub, self.dropout)?;
        let y = s.g.add(x, d)?;
        Ok(ln.forward(s, y, 1)?)
    }

    /// `z_enc: [F, H]`
    pub(crate) fn encode<T: Float>(&self, s: &mut Session<T>, frame_vecs: Var) -> Result<Var> {
        let f = s.g.shape(frame_vecs)[0];
        let pe = pe_constant(s, f, self.hidden)?;
        let x = s.g.add(frame_vecs, pe)?;
        let mut x = s.dropout(x, self.dropout)?;
        for l in &self.encoder {
            let a = l.attn.forward(s, x, x, None, self.dropout)?;
            x = self.residual(s, x, a, &l.ln1)?;
            let f = l.ffn.forward(s, x)?;
            x = self.residual(s, x, f, &l.ln2)?;
        }
        Ok(x)
    }

    fn cross_vars<T: Float>(&self, s: &mut Session<T>, z_enc: Var) -> Result<Vec<CrossVars>> {
        self.decoder
            .iter()
            .map(|l| {
                let c = &l.cross_attn;
                Ok(match self.mode {
                    CrossAttentionMode::Standard => CrossVars::Standard {
                        k: c.project(s, z_enc, c.wk)?,
                        v: c.project(s, z_enc, c.wv)?,
                    },
                    CrossAttentionMode::PaperLiteral => CrossVars::Literal {
                        mix: c.literal_mix(s, z_enc, self.dropout)?,
                    },
                })
            })
            .collect()
    }

    fn cross<T: Float>(&self, s: &mut Session<T>, l: &DecoderLayer, y: Var, cv: &CrossVars) -> Result<Var> {
        let c = &l.cross_attn;
        match *cv {
            CrossVars::Standard { k, v } => {
                let q = c.project(s, y, c.wq)?;
                Ok(c.attend_projected(s, q, k, v, None, self.dropout)?)
            }
            CrossVars::Literal { mix } => Ok(c.literal_apply(s, y, mix)?),
        }
    }

    pub(crate) fn forward<T: Float>(&self, s: &mut Session<T>, frame_vecs: Var, target_in: &[TokenId]) -> Result<Var> {
        let z_enc = self.encode(s, frame_vecs)?;
        let cross = self.cross_vars(s, z_enc)?;
        let len = target_in.len();
        let e = self.embed.forward(s, target_in)?;
        let pe = pe_constant(s, len, self.hidden)?;
        let y = s.g.add(e, pe)?;
        let mut y = s.dropout(y, self.dropout)?;
        let mask = causal_mask::<T>(len);
        for (l, cv) in self.decoder.iter().zip(&cross) {
            let a = l.self_attn.forward(s, y, y, Some(&mask), self.dropout)?;
            y = self.residual(s, y, a, &l.ln1)?;
            let c = self.cross(s, l, y, cv)?;
            y = self.residual(s, y, c, &l.ln2)?;
            let f = l.ffn.forward(s, y)?;
            y = self.residual(s, y, f, &l.ln3)?;
        }
        Ok(self.out.forward(s, y)?)
    }

    pub(crate) fn begin<T: Float>(&self, store: &ParamStore<T>, frame_vecs: &Tensor<T>) -> Result<VmtState<T>> {
        let mut s = Session::eval(store);
        let fv = s.constant(frame_vecs.clone());
        let z_enc = self.encode(&mut s, fv)?;
        let cross = self
            .cross_vars(&mut s, z_enc)?
            .into_iter()
            .map(|cv| match cv {
                CrossVars::Standard { k, v } => CrossCache::Standard {
                    k: s.g.value(k).clone(),
                    v: s.g.value(v).clone(),
                },
                CrossVars::Literal { mix } => CrossCache::Literal {
                    mix: s.g.value(mix).clone(),
                },
            })
            .collect();
        let n = self.decoder.len();
        Ok(VmtState {
            self_k: vec![Vec::new(); n],
            self_v: vec![Vec::new(); n],
            cross,
            pos: 0,
        })
    }

    /// Processes the token at position `st.pos` against cached keys and values.
    pub(crate) fn step<T: Float>(&self, store: &ParamStore<T>, st: &mut VmtState<T>, token: TokenId) -> Result<Vec<T>> {
        let mut s = Session::eval(store);
        let e = self.embed.forward(&mut s, &[token])?;
        let pe = s.constant(nn::positional_row::<T>(st.pos, self.hidden)?);
        let mut y = s.g.add(e, pe)?;
        for (i, l) in self.decoder.iter().enumerate() {
            let sa = &l.self_attn;
            let q = sa.project(&mut s, y, sa.wq)?;
            let k_new = sa.project(&mut s, y, sa.wk)?;
            let v_new = sa.project(&mut s, y, sa.wv)?;
            push_row(&mut st.self_k[i], s.g.value(k_new));
            push_row(&mut st.self_v[i], s.g.value(v_new));
            let k = s.constant(rows_tensor(&st.self_k[i], self.hidden)?);
            let v = s.constant(rows_tensor(&st.self_v[i], self.hidden)?);
            let a = sa.attend_projected(&mut s, q, k, v, None, 0.0)?;
            y = self.residual(&mut s, y, a, &l.ln1)?;
            let cv = match &st.cross[i] {
                CrossCache::Standard { k, v } => CrossVars::Standard {
                    k: s.constant(k.clone()),
                    v: s.constant(v.clone()),
                },
                CrossCache::Literal { mix } => CrossVars::Literal {
                    mix: s.constant(mix.clone()),
                },
            };
            let c = self.cross(&mut s, l, y, &cv)?;
            y = self.residual(&mut s, y, c, &l.ln2)?;
            let f = l.ffn.forward(&mut s, y)?;
            y = self.residual(&mut s, y, f, &l.ln3)?;
        }
        let logits = self.out.forward(&mut s, y)?;
        st.pos += 1;
        Ok(s.g.value(logits).data().to_vec())
    }
}
