//! The two sequence models: a GRU encoder-decoder with attention and the
//! video-music transformer. Both read per-frame vectors from the shared conv
//! frame encoder and emit logits over the 310-token vocabulary.

mod checkpoint;
mod seq2seq;
mod vmt;

use serde::{Deserialize, Serialize};

pub use checkpoint::{
    checkpoint_dtype, from_bytes, load_checkpoint, save_checkpoint, to_bytes, Checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use seq2seq::Seq2Seq;
pub use vmt::Vmt;

use crate::codec::{TokenId, VOCAB_SIZE};
use crate::frames::{self, FrameClip};
use crate::nn::{self, ConvEncoder, NnError, ParamId, ParamStore, Session};
use crate::tensor::{Float, SeededRng, Tensor, TensorError, Var};

/// Upper bound on decoder input length.
pub const TARGET_CAP: usize = 1024;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("target of {len} tokens exceeds max_target_len {max}")]
    TargetTooLong { len: usize, max: usize },
    #[error("target sequence is empty")]
    EmptyTarget,
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint holds {found} parameters but this build reads {expected}")]
    DType { found: String, expected: String },
    #[error("checkpoint is missing parameter {0:?}")]
    MissingParam(String),
    #[error("checkpoint has unknown parameter {0:?}")]
    UnknownParam(String),
    #[error("parameter {name:?} has shape {found:?}, expected {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

impl From<TensorError> for ModelError {
    fn from(e: TensorError) -> Self {
        ModelError::Nn(NnError::Tensor(e))
    }
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Seq2seq,
    Vmt,
}

/// Key/value assignment of the transformer's inter-attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossAttentionMode {
    /// Queries from the decoder, keys and values from the encoder.
    #[default]
    Standard,
    /// Queries and keys from the encoder, values from the decoder.
    PaperLiteral,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub hidden: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub max_target_len: usize,
    #[serde(default)]
    pub cross_attention_mode: CrossAttentionMode,
}

impl ModelConfig {
    pub fn vmt_full() -> Self {
        ModelConfig {
            kind: ModelKind::Vmt,
            hidden: 512,
            enc_layers: 6,
            dec_layers: 6,
            heads: 8,
            d_ff: 2048,
            dropout: 0.1,
            max_target_len: TARGET_CAP,
            cross_attention_mode: CrossAttentionMode::Standard,
        }
    }

    pub fn seq2seq_full() -> Self {
        ModelConfig {
            kind: ModelKind::Seq2seq,
            enc_layers: 3,
            dec_layers: 3,
            ..Self::vmt_full()
        }
    }

    /// H=64, 2+2 layers, 4 heads, d_ff=256.
    pub fn vmt_reduced() -> Self {
        ModelConfig {
            hidden: 64,
            enc_layers: 2,
            dec_layers: 2,
            heads: 4,
            d_ff: 256,
            ..Self::vmt_full()
        }
    }

    pub fn seq2seq_reduced() -> Self {
        ModelConfig {
            kind: ModelKind::Seq2seq,
            ..Self::vmt_reduced()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.hidden == 0 || self.hidden % 8 != 0 {
            return bad(format!("hidden {} must be a positive multiple of 8", self.hidden));
        }
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return bad(format!("heads {} must divide hidden {}", self.heads, self.hidden));
        }
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return bad("layer counts must be positive".into());
        }
        if self.kind == ModelKind::Seq2seq && self.enc_layers != self.dec_layers {
            return bad(format!(
                "seq2seq shares GRU layers between encoder and decoder, so enc_layers ({}) must equal dec_layers ({})",
                self.enc_layers, self.dec_layers
            ));
        }
        if self.kind == ModelKind::Vmt && self.d_ff == 0 {
            return bad("d_ff must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.max_target_len == 0 || self.max_target_len > TARGET_CAP {
            return bad(format!("max_target_len must be in 1..={TARGET_CAP}"));
        }
        Ok(())
    }
}

#[derive(Clone)]
enum Arch {
    Seq2Seq(Seq2Seq),
    Vmt(Vmt),
}

/// A model's configuration, parameters and layer wiring.
#[derive(Clone)]
pub struct Model<T: Float> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub frame_encoder: ConvEncoder,
    arch: Arch,
}

/// Per-sequence state for token-by-token generation.
pub enum DecodeState<T: Float> {
    Seq2Seq(seq2seq::Seq2SeqState<T>),
    Vmt(vmt::VmtState<T>),
}

impl<T: Float> DecodeState<T> {
    /// Tokens consumed so far.
    pub fn position(&self) -> usize {
        match self {
            DecodeState::Seq2Seq(s) => s.pos,
            DecodeState::Vmt(s) => s.pos,
        }
    }
}

impl<T: Float> Model<T> {
    /// Builds a model with freshly initialized parameters.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = SeededRng::derive(seed, &[0x696e_6974]);
        let frame_encoder = ConvEncoder::new(&mut params, "frame_enc", config.hidden, &mut rng)?;
        let arch = match config.kind {
            ModelKind::Seq2seq => Arch::Seq2Seq(Seq2Seq::new(&mut params, &config, &mut rng)?),
            ModelKind::Vmt => Arch::Vmt(Vmt::new(&mut params, &config, &mut rng)?),
        };
        Ok(Model {
            config,
            params,
            frame_encoder,
            arch,
        })
    }

    pub fn as_seq2seq(&self) -> Option<&Seq2Seq> {
        match &self.arch {
            Arch::Seq2Seq(m) => Some(m),
            Arch::Vmt(_) => None,
        }
    }

    pub fn as_vmt(&self) -> Option<&Vmt> {
        match &self.arch {
            Arch::Vmt(m) => Some(m),
            Arch::Seq2Seq(_) => None,
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_elements()
    }

    /// Parameters of the conv frame encoder.
    pub fn frame_encoder_params(&self) -> Vec<ParamId> {
        self.frame_encoder
            .layers
            .iter()
            .flat_map(|(k, ln)| [*k, ln.scale, ln.shift])
            .collect()
    }

    /// Conv encoding of normalized frames `[N, 3, h, w] → [N, H]`.
    pub fn encode_frames(&self, s: &mut Session<T>, frames: Var) -> Result<Var> {
        Ok(self.frame_encoder.forward(s, frames)?)
    }

    /// Frame vectors of a clip, computed without gradients.
    pub fn frame_vectors(&self, clip: &FrameClip) -> Result<Tensor<T>> {
        let x = frames::normalize::<T>(clip);
        let mut s = Session::eval(&self.params);
        let xv = s.constant(x);
        let y = self.encode_frames(&mut s, xv)?;
        Ok(s.g.value(y).clone())
    }

    fn check_target(&self, target_in: &[TokenId]) -> Result<()> {
        if target_in.is_empty() {
            return Err(ModelError::EmptyTarget);
        }
        if target_in.len() > self.config.max_target_len {
            return Err(ModelError::TargetTooLong {
                len: target_in.len(),
                max: self.config.max_target_len,
            });
        }
        Ok(())
    }

    /// Teacher-forced logits `[len, 310]` from frame vectors `[F, H]`.
    pub fn forward(&self, s: &mut Session<T>, frame_vecs: Var, target_in: &[TokenId]) -> Result<Var> {
        self.check_target(target_in)?;
        let shape = s.g.shape(frame_vecs);
        if shape.len() != 2 || shape[1] != self.config.hidden {
            return Err(ModelError::Nn(NnError::Input(format!(
                "frame vectors must be [F, {}], got {shape:?}",
                self.config.hidden
            ))));
        }
        match &self.arch {
            Arch::Seq2Seq(m) => m.forward(s, frame_vecs, target_in),
            Arch::Vmt(m) => m.forward(s, frame_vecs, target_in),
        }
    }

    /// Conv encoder plus sequence model, from normalized frames `[F, 3, h, w]`.
    pub fn forward_frames(&self, s: &mut Session<T>, frames: Var, target_in: &[TokenId]) -> Result<Var> {
        let fv = self.encode_frames(s, frames)?;
        self.forward(s, fv, target_in)
    }

    /// Eval-mode teacher-forced logits as a flat `[len × 310]` vector.
    pub fn logits(&self, frame_vecs: &Tensor<T>, target_in: &[TokenId]) -> Result<Tensor<T>> {
        let mut s = Session::eval(&self.params);
        let fv = s.constant(frame_vecs.clone());
        let y = self.forward(&mut s, fv, target_in)?;
        Ok(s.g.value(y).clone())
    }

    /// Prepares incremental decoding; encoder work happens once here.
    pub fn begin_decode(&self, frame_vecs: &Tensor<T>) -> Result<DecodeState<T>> {
        match &self.arch {
            Arch::Seq2Seq(m) => Ok(DecodeState::Seq2Seq(m.begin(&self.params, frame_vecs)?)),
            Arch::Vmt(m) => Ok(DecodeState::Vmt(m.begin(&self.params, frame_vecs)?)),
        }
    }

    /// Feeds one token and returns the next-token logits (length 310).
    pub fn decode_step(&self, state: &mut DecodeState<T>, token: TokenId) -> Result<Vec<T>> {
        if state.position() >= self.config.max_target_len {
            return Err(ModelError::TargetTooLong {
                len: state.position() + 1,
                max: self.config.max_target_len,
            });
        }
        let out = match (&self.arch, state) {
            (Arch::Seq2Seq(m), DecodeState::Seq2Seq(st)) => m.step(&self.params, st, token)?,
            (Arch::Vmt(m), DecodeState::Vmt(st)) => m.step(&self.params, st, token)?,
            _ => return Err(ModelError::Config("decode state belongs to a different architecture".into())),
        };
        debug_assert_eq!(out.len(), VOCAB_SIZE);
        Ok(out)
    }
}

/// Positional encoding as a graph constant.
pub(crate) fn pe_constant<T: Float>(s: &mut Session<T>, len: usize, hidden: usize) -> Result<Var> {
    let pe = nn::positional_encoding::<T>(len, hidden)?;
    Ok(s.constant(pe))
}

/// Appends one `[1, H]` row to a row-major `[n, H]` buffer.
pub(crate) fn push_row<T: Float>(buf: &mut Vec<T>, row: &Tensor<T>) {
    buf.extend_from_slice(row.data());
}

pub(crate) fn rows_tensor<T: Float>(buf: &[T], width: usize) -> Result<Tensor<T>> {
    Ok(Tensor::new(vec![buf.len() / width, width], buf.to_vec())?)
}

#[cfg(test)]
mod tests;
