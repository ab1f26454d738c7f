//! Performance-event encoding of piano scores.
//!
//! The vocabulary has 310 symbols laid out as:
//!
//! | ids       | token                     |
//! |-----------|---------------------------|
//! | 0..=87    | `NOTE_ON(21..=108)`       |
//! | 88..=175  | `NOTE_OFF(21..=108)`      |
//! | 176..=207 | `TIME_SHIFT(1..=32)`      |
//! | 208..=307 | `VELOCITY(1..=100)`       |
//! | 308       | `START`                   |
//! | 309       | `END`                     |
//!
//! Time advances only through `TIME_SHIFT` tokens, each worth `bin` times
//! the configured bin width (31.25 ms by default, so one token spans up to
//! one second). A `VELOCITY` token sets the velocity of all following
//! `NOTE_ON`s and is emitted only when the quantized velocity changes.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::midi::{MidiScore, Note, HIGHEST_PITCH, LOWEST_PITCH};

pub const VOCAB_SIZE: usize = 310;
pub const PITCH_COUNT: usize = 88;
pub const TIME_SHIFT_BINS: u8 = 32;
pub const VELOCITY_BINS: u8 = 100;
/// Velocity bin assumed before any `VELOCITY` token is seen.
pub const DEFAULT_VELOCITY_BIN: u8 = 64;

const NOTE_ON_BASE: u16 = 0;
const NOTE_OFF_BASE: u16 = 88;
const TIME_SHIFT_BASE: u16 = 176;
const VELOCITY_BASE: u16 = 208;
const START_ID: u16 = 308;
const END_ID: u16 = 309;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CodecError {
    #[error("token id {0} outside 0..{VOCAB_SIZE}")]
    InvalidTokenId(u32),
    #[error("invalid token {0}")]
    InvalidToken(String),
    #[error("pitch {0} outside piano range {LOWEST_PITCH}..={HIGHEST_PITCH}")]
    PitchOutOfRange(u8),
    #[error("note ending at {offset_sec} s exceeds clip length {clip_len_sec} s")]
    ExceedsClip { offset_sec: f64, clip_len_sec: f64 },
    #[error("invalid codec config: {0}")]
    InvalidConfig(String),
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

pub type Result<T, E = CodecError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PerformanceToken {
    NoteOn(u8),
    NoteOff(u8),
    /// Shift by `bin` bin widths, `1..=32`.
    TimeShift(u8),
    /// Velocity bin, `1..=100`.
    Velocity(u8),
    Start,
    End,
}

/// Integer id of a [`PerformanceToken`], always in `0..310`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct TokenId(u16);

impl TokenId {
    pub const START: TokenId = TokenId(START_ID);
    pub const END: TokenId = TokenId(END_ID);

    pub fn new(id: u32) -> Result<Self> {
        if (id as usize) < VOCAB_SIZE {
            Ok(TokenId(id as u16))
        } else {
            Err(CodecError::InvalidTokenId(id))
        }
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn token(self) -> PerformanceToken {
        id_to_token_unchecked(self.0)
    }
}

impl TryFrom<u32> for TokenId {
    type Error = CodecError;

    fn try_from(v: u32) -> Result<Self> {
        TokenId::new(v)
    }
}

impl From<TokenId> for u32 {
    fn from(t: TokenId) -> u32 {
        t.0 as u32
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

pub fn vocab_size() -> usize {
    VOCAB_SIZE
}

pub fn token_to_id(token: PerformanceToken) -> Result<TokenId> {
    let pitch_ok = |p: u8| (LOWEST_PITCH..=HIGHEST_PITCH).contains(&p);
    let id = match token {
        PerformanceToken::NoteOn(p) if pitch_ok(p) => NOTE_ON_BASE + (p - LOWEST_PITCH) as u16,
        PerformanceToken::NoteOff(p) if pitch_ok(p) => NOTE_OFF_BASE + (p - LOWEST_PITCH) as u16,
        PerformanceToken::TimeShift(b) if (1..=TIME_SHIFT_BINS).contains(&b) => TIME_SHIFT_BASE + (b - 1) as u16,
        PerformanceToken::Velocity(b) if (1..=VELOCITY_BINS).contains(&b) => VELOCITY_BASE + (b - 1) as u16,
        PerformanceToken::Start => START_ID,
        PerformanceToken::End => END_ID,
        other => return Err(CodecError::InvalidToken(other.to_string())),
    };
    Ok(TokenId(id))
}

pub fn id_to_token(id: u32) -> Result<PerformanceToken> {
    TokenId::new(id).map(TokenId::token)
}

fn id_to_token_unchecked(id: u16) -> PerformanceToken {
    match id {
        0..=87 => PerformanceToken::NoteOn(LOWEST_PITCH + (id - NOTE_ON_BASE) as u8),
        88..=175 => PerformanceToken::NoteOff(LOWEST_PITCH + (id - NOTE_OFF_BASE) as u8),
        176..=207 => PerformanceToken::TimeShift((id - TIME_SHIFT_BASE) as u8 + 1),
        208..=307 => PerformanceToken::Velocity((id - VELOCITY_BASE) as u8 + 1),
        START_ID => PerformanceToken::Start,
        _ => PerformanceToken::End,
    }
}

impl fmt::Display for PerformanceToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PerformanceToken::NoteOn(p) => write!(f, "NOTE_ON {p}"),
            PerformanceToken::NoteOff(p) => write!(f, "NOTE_OFF {p}"),
            PerformanceToken::TimeShift(b) => write!(f, "TIME_SHIFT {b}"),
            PerformanceToken::Velocity(b) => write!(f, "VELOCITY {b}"),
            PerformanceToken::Start => f.write_str("START"),
            PerformanceToken::End => f.write_str("END"),
        }
    }
}

impl FromStr for PerformanceToken {
    type Err = CodecError;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split_whitespace();
        let name = parts.next().unwrap_or("");
        let arg = parts.next();
        if parts.next().is_some() {
            return Err(CodecError::InvalidToken(s.to_string()));
        }
        let num = || -> Result<u8> {
            arg.and_then(|a| a.parse().ok())
                .ok_or_else(|| CodecError::InvalidToken(s.to_string()))
        };
        let token = match (name, arg) {
            ("START", None) => PerformanceToken::Start,
            ("END", None) => PerformanceToken::End,
            ("NOTE_ON", Some(_)) => PerformanceToken::NoteOn(num()?),
            ("NOTE_OFF", Some(_)) => PerformanceToken::NoteOff(num()?),
            ("TIME_SHIFT", Some(_)) => PerformanceToken::TimeShift(num()?),
            ("VELOCITY", Some(_)) => PerformanceToken::Velocity(num()?),
            _ => return Err(CodecError::InvalidToken(s.to_string())),
        };
        token_to_id(token)?;
        Ok(token)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub time_shift_bin_ms: f64,
    pub clip_len_sec: f64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            time_shift_bin_ms: 31.25,
            clip_len_sec: 10.0,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.time_shift_bin_ms.is_finite() && self.time_shift_bin_ms > 0.0) {
            return Err(CodecError::InvalidConfig(format!(
                "time_shift_bin_ms must be positive, got {}",
                self.time_shift_bin_ms
            )));
        }
        if !(self.clip_len_sec.is_finite() && self.clip_len_sec > 0.0) {
            return Err(CodecError::InvalidConfig(format!(
                "clip_len_sec must be positive, got {}",
                self.clip_len_sec
            )));
        }
        if self.max_shift_sec() > self.clip_len_sec {
            return Err(CodecError::InvalidConfig(format!(
                "one maximal shift ({} s) exceeds the clip length",
                self.max_shift_sec()
            )));
        }
        Ok(())
    }

    pub fn bin_sec(&self) -> f64 {
        self.time_shift_bin_ms / 1000.0
    }

    pub fn max_shift_sec(&self) -> f64 {
        TIME_SHIFT_BINS as f64 * self.bin_sec()
    }

    fn clip_bins(&self) -> u64 {
        (self.clip_len_sec / self.bin_sec() + 1e-9).floor() as u64
    }
}

/// `ceil(velocity · 100 / 127)`, for velocity in `1..=127`.
pub fn velocity_to_bin(velocity: u8) -> u8 {
    let v = velocity.clamp(1, 127) as u32;
    ((v * 100 + 126) / 127) as u8
}

/// `round(bin · 127 / 100)`, for bin in `1..=100`.
pub fn bin_to_velocity(bin: u8) -> u8 {
    let b = bin.clamp(1, VELOCITY_BINS) as u32;
    ((b * 127 + 50) / 100) as u8
}

/// Encodes a score as `START … END`.
///
/// Event times are snapped to the bin grid before gaps are measured, so the
/// error of every decoded time is at most half a bin. Offsets precede onsets
/// at the same grid time, and within a kind events are ordered by pitch.
pub fn encode(score: &MidiScore, cfg: &CodecConfig) -> Result<Vec<TokenId>> {
    cfg.validate()?;
    let bin = cfg.bin_sec();
    let max_bin = cfg.clip_bins();
    let eps = 1e-9;
    // pitch -> list of (on, off, velocity) in grid units
    let mut per_pitch: BTreeMap<u8, Vec<(u64, u64, u8)>> = BTreeMap::new();
    for n in &score.notes {
        if !(LOWEST_PITCH..=HIGHEST_PITCH).contains(&n.pitch) {
            return Err(CodecError::PitchOutOfRange(n.pitch));
        }
        if n.offset_sec > cfg.clip_len_sec + eps || n.onset_sec < 0.0 {
            return Err(CodecError::ExceedsClip {
                offset_sec: n.offset_sec,
                clip_len_sec: cfg.clip_len_sec,
            });
        }
        let mut on = ((n.onset_sec / bin).round() as u64).min(max_bin);
        let mut off = ((n.offset_sec / bin).round() as u64).min(max_bin);
        if off <= on {
            if on + 1 <= max_bin {
                off = on + 1;
            } else {
                on = off - 1;
            }
        }
        per_pitch.entry(n.pitch).or_default().push((on, off, n.velocity));
    }

    // (time, 0 = off / 1 = on, pitch, velocity)
    let mut events: Vec<(u64, u8, u8, u8)> = Vec::new();
    for (pitch, mut spans) in per_pitch {
        spans.sort();
        for i in 0..spans.len() {
            let (on, mut off, vel) = spans[i];
            if let Some(next) = spans.get(i + 1) {
                off = off.min(next.0);
            }
            if off > on {
                events.push((on, 1, pitch, vel));
                events.push((off, 0, pitch, 0));
            }
        }
    }
    events.sort();

    let mut tokens = vec![TokenId::START];
    let mut now = 0u64;
    let mut velocity: Option<u8> = None;
    let push = |tokens: &mut Vec<TokenId>, t: PerformanceToken| tokens.push(token_to_id(t).expect("valid token"));
    for (time, kind, pitch, vel) in events {
        let mut gap = time - now;
        while gap > 0 {
            let step = gap.min(TIME_SHIFT_BINS as u64) as u8;
            push(&mut tokens, PerformanceToken::TimeShift(step));
            gap -= step as u64;
        }
        now = time;
        if kind == 0 {
            push(&mut tokens, PerformanceToken::NoteOff(pitch));
        } else {
            let vb = velocity_to_bin(vel);
            if velocity != Some(vb) {
                push(&mut tokens, PerformanceToken::Velocity(vb));
                velocity = Some(vb);
            }
            push(&mut tokens, PerformanceToken::NoteOn(pitch));
        }
    }
    tokens.push(TokenId::END);
    Ok(tokens)
}

/// Irregularities repaired while decoding.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeWarnings {
    /// Notes still open at the end of the sequence; they are removed.
    pub unmatched_note_on: usize,
    /// `NOTE_OFF` with no open note of that pitch; ignored.
    pub unmatched_note_off: usize,
    /// `NOTE_ON` for a pitch that was already sounding; the earlier note is closed.
    pub retriggered: usize,
    /// Notes that would have zero duration; dropped.
    pub zero_length: usize,
    /// Notes cut at (or dropped beyond) the clip length.
    pub truncated: usize,
    pub missing_start: usize,
    pub stray_start: usize,
    pub missing_end: usize,
    /// Tokens after the first `END`; ignored.
    pub tokens_after_end: usize,
}

impl DecodeWarnings {
    pub fn total(&self) -> usize {
        self.unmatched_note_on
            + self.unmatched_note_off
            + self.retriggered
            + self.zero_length
            + self.truncated
            + self.missing_start
            + self.stray_start
            + self.missing_end
            + self.tokens_after_end
    }
}

/// Result of decoding, including how far the token clock ran before any
/// truncation to the clip length.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub score: MidiScore,
    pub warnings: DecodeWarnings,
    /// Latest event time implied by the tokens, in seconds.
    pub raw_end_sec: f64,
}

/// Decodes any token sequence; malformations become warnings, never errors.
pub fn decode(tokens: &[TokenId], cfg: &CodecConfig) -> (MidiScore, DecodeWarnings) {
    let d = decode_detailed(tokens, cfg);
    (d.score, d.warnings)
}

pub fn decode_detailed(tokens: &[TokenId], cfg: &CodecConfig) -> Decoded {
    let cfg = if cfg.validate().is_ok() { *cfg } else { CodecConfig::default() };
    let bin = cfg.bin_sec();
    let mut w = DecodeWarnings::default();
    let mut clock = 0u64;
    let mut velocity = bin_to_velocity(DEFAULT_VELOCITY_BIN);
    let mut open: BTreeMap<u8, (u64, u8)> = BTreeMap::new();
    let mut spans: Vec<(u64, u64, u8, u8)> = Vec::new();
    let close = |spans: &mut Vec<_>, w: &mut DecodeWarnings, pitch: u8, on: u64, vel: u8, at: u64| {
        if at > on {
            spans.push((on, at, pitch, vel));
        } else {
            w.zero_length += 1;
        }
    };

    if tokens.first() != Some(&TokenId::START) {
        w.missing_start += 1;
    }
    let mut ended = false;
    for (i, t) in tokens.iter().enumerate() {
        match t.token() {
            PerformanceToken::Start => {
                if i > 0 {
                    w.stray_start += 1;
                }
            }
            PerformanceToken::End => {
                w.tokens_after_end = tokens.len() - i - 1;
                ended = true;
                break;
            }
            PerformanceToken::TimeShift(b) => clock += b as u64,
            PerformanceToken::Velocity(b) => velocity = bin_to_velocity(b),
            PerformanceToken::NoteOn(p) => {
                if let Some((on, vel)) = open.insert(p, (clock, velocity)) {
                    w.retriggered += 1;
                    close(&mut spans, &mut w, p, on, vel, clock);
                }
            }
            PerformanceToken::NoteOff(p) => match open.remove(&p) {
                Some((on, vel)) => close(&mut spans, &mut w, p, on, vel, clock),
                None => w.unmatched_note_off += 1,
            },
        }
    }
    if !ended {
        w.missing_end += 1;
    }
    w.unmatched_note_on += open.len();

    let raw_end_sec = clock as f64 * bin;
    let mut notes = Vec::with_capacity(spans.len());
    for (on, off, pitch, velocity) in spans {
        let onset = on as f64 * bin;
        let mut offset = off as f64 * bin;
        if onset >= cfg.clip_len_sec {
            w.truncated += 1;
            continue;
        }
        if offset > cfg.clip_len_sec {
            w.truncated += 1;
            offset = cfg.clip_len_sec;
        }
        notes.push(Note {
            onset_sec: onset,
            offset_sec: offset,
            pitch,
            velocity,
        });
    }
    Decoded {
        score: MidiScore::new(notes),
        warnings: w,
        raw_end_sec,
    }
}

/// One mnemonic per line, e.g. `NOTE_ON 60`.
pub fn tokens_to_text(tokens: &[TokenId]) -> String {
    let mut s = String::with_capacity(tokens.len() * 12);
    for t in tokens {
        s.push_str(&t.token().to_string());
        s.push('\n');
    }
    s
}

/// Inverse of [`tokens_to_text`]. Blank lines and `#` comments are skipped.
pub fn tokens_from_text(text: &str) -> Result<Vec<TokenId>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let token: PerformanceToken = line.parse().map_err(|e: CodecError| CodecError::Parse {
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(token_to_id(token)?);
    }
    Ok(out)
}
