//! Autoregressive generation from a frame clip, and decoding to MIDI.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{self, CodecConfig, DecodeWarnings, TokenId, VOCAB_SIZE};
use crate::frames::FrameClip;
use crate::midi::{self, MidiScore};
use crate::models::{Model, ModelError, TARGET_CAP};
use crate::tensor::{Float, SeededRng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GenMode {
    #[default]
    Greedy,
    Sample,
}

impl std::str::FromStr for GenMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "greedy" => Ok(GenMode::Greedy),
            "sample" => Ok(GenMode::Sample),
            _ => Err(format!("unknown mode {s:?} (expected greedy or sample)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub mode: GenMode,
    pub temperature: f64,
    pub seed: u64,
    /// Decoder steps before `END` is forced.
    pub max_len: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            mode: GenMode::Greedy,
            temperature: 1.0,
            seed: 0,
            max_len: TARGET_CAP,
        }
    }
}

impl GenConfig {
    pub fn sample(temperature: f64, seed: u64) -> Self {
        GenConfig {
            mode: GenMode::Sample,
            temperature,
            seed,
            ..Self::default()
        }
    }

    pub fn validate<T: Float>(&self, model: &Model<T>) -> Result<(), ModelError> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(ModelError::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if self.max_len == 0 || self.max_len > model.config.max_target_len {
            return Err(ModelError::Config(format!(
                "max_len {} outside 1..={}",
                self.max_len, model.config.max_target_len
            )));
        }
        Ok(())
    }
}

/// Index of the largest logit; the first one on ties.
pub fn argmax<T: Float>(logits: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in logits.iter().enumerate() {
        if x > logits[best] {
            best = i;
        }
    }
    best
}

/// Draws from `softmax(logits / temperature)`.
pub fn sample_index<T: Float>(logits: &[T], temperature: f64, rng: &mut SeededRng) -> usize {
    let max = logits[argmax(logits)].as_f64();
    let w: Vec<f64> = logits.iter().map(|&x| ((x.as_f64() - max) / temperature).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.uniform(0.0, total);
    for (i, &wi) in w.iter().enumerate() {
        if u < wi {
            return i;
        }
        u -= wi;
    }
    argmax(logits)
}

/// Generated tokens, excluding the leading `START`, always ending in `END`.
/// At most `max_len + 1` tokens: a forced `END` follows `max_len` steps
/// without one.
pub fn generate_from_vectors<T: Float>(
    model: &Model<T>,
    frame_vecs: &Tensor<T>,
    cfg: &GenConfig,
) -> Result<Vec<TokenId>, ModelError> {
    cfg.validate(model)?;
    let mut rng = SeededRng::derive(cfg.seed, &[0x6765_6e]);
    let mut state = model.begin_decode(frame_vecs)?;
    let mut out = Vec::new();
    let mut last = TokenId::START;
    for _ in 0..cfg.max_len {
        let logits = model.decode_step(&mut state, last)?;
        debug_assert_eq!(logits.len(), VOCAB_SIZE);
        let next = match cfg.mode {
            GenMode::Greedy => argmax(&logits),
            GenMode::Sample => sample_index(&logits, cfg.temperature, &mut rng),
        };
        last = TokenId::new(next as u32).expect("index below vocabulary size");
        out.push(last);
        if last == TokenId::END {
            return Ok(out);
        }
    }
    out.push(TokenId::END);
    Ok(out)
}

pub fn generate<T: Float>(model: &Model<T>, clip: &FrameClip, cfg: &GenConfig) -> Result<Vec<TokenId>, ModelError> {
    let fv = model.frame_vectors(clip)?;
    generate_from_vectors(model, &fv, cfg)
}

/// Summary written next to generated MIDI files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenReport {
    /// Generated tokens including the final `END`.
    pub token_count: usize,
    /// Whether the model emitted `END` itself rather than hitting the cap.
    pub ended_naturally: bool,
    pub warnings: DecodeWarnings,
    pub warning_total: usize,
    /// Time the token clock reached, before truncation.
    pub raw_duration_sec: f64,
    /// Duration of the decoded score after truncation to the clip length.
    pub duration_sec: f64,
    pub note_count: usize,
}

impl GenReport {
    /// `END` produced by the model within the clip length.
    pub fn length_consistent(&self, clip_len_sec: f64) -> bool {
        self.ended_naturally && self.raw_duration_sec <= clip_len_sec
    }
}

#[derive(Debug, Clone)]
pub struct Generation {
    pub tokens: Vec<TokenId>,
    pub score: MidiScore,
    pub report: GenReport,
}

/// Decodes generated tokens; notes past the clip length are cut.
pub fn decode_generation(tokens: &[TokenId], max_len: usize, codec_cfg: &CodecConfig) -> Generation {
    let mut seq = Vec::with_capacity(tokens.len() + 1);
    seq.push(TokenId::START);
    seq.extend_from_slice(tokens);
    let d = codec::decode_detailed(&seq, codec_cfg);
    let ended_naturally = tokens.len() <= max_len && tokens.last() == Some(&TokenId::END);
    let report = GenReport {
        token_count: tokens.len(),
        ended_naturally,
        warning_total: d.warnings.total(),
        warnings: d.warnings,
        raw_duration_sec: d.raw_end_sec,
        duration_sec: d.score.duration(),
        note_count: d.score.notes.len(),
    };
    Generation {
        tokens: tokens.to_vec(),
        score: d.score,
        report,
    }
}

pub fn generate_midi<T: Float>(
    model: &Model<T>,
    clip: &FrameClip,
    cfg: &GenConfig,
    codec_cfg: &CodecConfig,
) -> Result<Generation, ModelError> {
    let tokens = generate(model, clip, cfg)?;
    Ok(decode_generation(&tokens, cfg.max_len, codec_cfg))
}

/// Writes the score as SMF and, if asked, the report as JSON.
pub fn write_generation(g: &Generation, midi_path: &Path, report_path: Option<&Path>) -> std::io::Result<()> {
    std::fs::write(midi_path, midi::write_smf(&g.score))?;
    if let Some(p) = report_path {
        let json = serde_json::to_string_pretty(&g.report).expect("report serializes");
        std::fs::write(p, json + "\n")?;
    }
    Ok(())
}
