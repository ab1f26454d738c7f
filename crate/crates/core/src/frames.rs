//! Frame clips, the VMTF container, dataset manifests, batching and the
//! synthetic paired-data generator.
//!
//! VMTF layout (all integers little-endian):
//!
//! | offset | size | field                  |
//! |--------|------|------------------------|
//! | 0      | 4    | magic `VMTF`           |
//! | 4      | 1    | version (1)            |
//! | 5      | 2    | frame count            |
//! | 7      | 2    | height                 |
//! | 9      | 2    | width                  |
//! | 11     | 1    | channels               |
//! | 12     | ...  | frame/row/channel-last bytes |

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codec::{self, CodecConfig, TokenId};
use crate::midi::{self, MidiScore, Note};
use crate::tensor::{Float, SeededRng, Tensor};

pub const CLIP_FRAMES: usize = 40;
pub const FRAME_SIZE: usize = 128;
pub const CHANNELS: usize = 3;
pub const VMTF_MAGIC: &[u8; 4] = b"VMTF";
pub const VMTF_VERSION: u8 = 1;
pub const VMTF_HEADER_LEN: usize = 12;
pub const MANIFEST_VERSION: u32 = 1;
/// Longest token sequence (START and END included) a pair may carry.
pub const MAX_PAIR_TOKENS: usize = 1024;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad VMTF magic {found:?}")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported VMTF version {0}")]
    UnsupportedVersion(u8),
    #[error("VMTF header too short: {0} bytes")]
    TruncatedHeader(usize),
    #[error("VMTF payload holds {actual} bytes but the header declares {expected}")]
    PayloadLength { expected: usize, actual: usize },
    #[error("clip has dims {found:?}, expected {expected:?}")]
    Dims { found: [usize; 4], expected: [usize; 4] },
    #[error("invalid clip: {0}")]
    InvalidClip(String),
    #[error("{path}: {reason}")]
    File { path: PathBuf, reason: String },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("split {0} has no entries")]
    EmptySplit(Split),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

/// Dimensions of a clip: frames, height, width, channels.
pub type ClipDims = [usize; 4];
pub const STANDARD_DIMS: ClipDims = [CLIP_FRAMES, FRAME_SIZE, FRAME_SIZE, CHANNELS];

/// Unsigned-byte RGB video fragment, stored frame-major, row-major, channel-last.
#[derive(Clone, PartialEq, Eq)]
pub struct FrameClip {
    dims: ClipDims,
    data: Vec<u8>,
}

impl std::fmt::Debug for FrameClip {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "FrameClip{:?}", self.dims)
    }
}

impl FrameClip {
    pub fn new(dims: ClipDims, data: Vec<u8>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0 || d > u16::MAX as usize) || dims[3] > u8::MAX as usize {
            return Err(DataError::InvalidClip(format!("dims {dims:?} out of range")));
        }
        let expected = dims.iter().product();
        if data.len() != expected {
            return Err(DataError::PayloadLength {
                expected,
                actual: data.len(),
            });
        }
        Ok(FrameClip { dims, data })
    }

    /// A standard 40×128×128×3 clip.
    pub fn standard(data: Vec<u8>) -> Result<Self> {
        Self::new(STANDARD_DIMS, data)
    }

    pub fn filled(dims: ClipDims, v: u8) -> Result<Self> {
        Self::new(dims, vec![v; dims.iter().product()])
    }

    pub fn dims(&self) -> ClipDims {
        self.dims
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn is_standard(&self) -> bool {
        self.dims == STANDARD_DIMS
    }

    pub fn require_standard(&self) -> Result<()> {
        if self.is_standard() {
            Ok(())
        } else {
            Err(DataError::Dims {
                found: self.dims,
                expected: STANDARD_DIMS,
            })
        }
    }

    pub fn pixel(&self, frame: usize, y: usize, x: usize, c: usize) -> u8 {
        let [_, h, w, ch] = self.dims;
        self.data[((frame * h + y) * w + x) * ch + c]
    }
}

pub fn write_vmtf(clip: &FrameClip) -> Vec<u8> {
    let mut out = Vec::with_capacity(VMTF_HEADER_LEN + clip.data.len());
    out.extend_from_slice(VMTF_MAGIC);
    out.push(VMTF_VERSION);
    for d in &clip.dims[..3] {
        out.extend_from_slice(&(*d as u16).to_le_bytes());
    }
    out.push(clip.dims[3] as u8);
    out.extend_from_slice(&clip.data);
    out
}

pub fn read_vmtf(bytes: &[u8]) -> Result<FrameClip> {
    if bytes.len() < VMTF_HEADER_LEN {
        if bytes.len() >= 4 && &bytes[..4] != VMTF_MAGIC {
            return Err(DataError::BadMagic {
                found: bytes[..4].to_vec(),
            });
        }
        return Err(DataError::TruncatedHeader(bytes.len()));
    }
    if &bytes[..4] != VMTF_MAGIC {
        return Err(DataError::BadMagic {
            found: bytes[..4].to_vec(),
        });
    }
    if bytes[4] != VMTF_VERSION {
        return Err(DataError::UnsupportedVersion(bytes[4]));
    }
    let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]) as usize;
    let dims = [u16_at(5), u16_at(7), u16_at(9), bytes[11] as usize];
    let expected: usize = dims.iter().product();
    let payload = &bytes[VMTF_HEADER_LEN..];
    if payload.len() != expected {
        return Err(DataError::PayloadLength {
            expected,
            actual: payload.len(),
        });
    }
    FrameClip::new(dims, payload.to_vec())
}

pub fn read_vmtf_file(path: &Path) -> Result<FrameClip> {
    let bytes = fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_vmtf(&bytes).map_err(|e| DataError::File {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Maps bytes to `[-1, 1]` via `v / 127.5 - 1` and reorders to `[F, C, H, W]`.
pub fn normalize<T: Float>(clip: &FrameClip) -> Tensor<T> {
    let [f, h, w, c] = clip.dims;
    let lut: Vec<T> = (0..256).map(|v| T::of(v as f64 / 127.5 - 1.0)).collect();
    let mut out = vec![T::zero(); clip.data.len()];
    for fi in 0..f {
        for y in 0..h {
            for x in 0..w {
                let src = ((fi * h + y) * w + x) * c;
                for ch in 0..c {
                    out[((fi * c + ch) * h + y) * w + x] = lut[clip.data[src + ch] as usize];
                }
            }
        }
    }
    Tensor::new(vec![f, c, h, w], out).expect("clip dims are positive")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// VMTF path, relative to the manifest's directory unless absolute.
    pub clip: PathBuf,
    pub midi: PathBuf,
    pub split: Split,
    pub song_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub entries: Vec<ManifestEntry>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl Manifest {
    pub fn new(root: impl Into<PathBuf>, entries: Vec<ManifestEntry>) -> Self {
        Manifest {
            version: MANIFEST_VERSION,
            entries,
            root: root.into(),
        }
    }

    /// Reads a manifest and checks that every referenced file exists and
    /// that no song appears in more than one split.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut m: Manifest = serde_json::from_str(&text).map_err(|e| DataError::File {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.check()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text + "\n").map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn check(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(DataError::Manifest(format!("unsupported version {}", self.version)));
        }
        let mut song_split: HashMap<&str, Split> = HashMap::new();
        for e in &self.entries {
            for p in [&e.clip, &e.midi] {
                let full = self.resolve(p);
                if !full.is_file() {
                    return Err(DataError::File {
                        path: full,
                        reason: "referenced file does not exist".into(),
                    });
                }
            }
            match song_split.insert(&e.song_id, e.split) {
                Some(prev) if prev != e.split => {
                    return Err(DataError::Manifest(format!(
                        "song {:?} appears in both {prev} and {}",
                        e.song_id, e.split
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn split_entries(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Loads and tokenizes every pair of one split, in manifest order.
    pub fn load_split(&self, split: Split, codec_cfg: &CodecConfig) -> Result<Vec<ClipPair>> {
        let pairs: Vec<ClipPair> = self
            .split_entries(split)
            .map(|e| self.load_pair(e, codec_cfg))
            .collect::<Result<_>>()?;
        if pairs.is_empty() {
            return Err(DataError::EmptySplit(split));
        }
        Ok(pairs)
    }

    pub fn load_pair(&self, e: &ManifestEntry, codec_cfg: &CodecConfig) -> Result<ClipPair> {
        let clip_path = self.resolve(&e.clip);
        let clip = read_vmtf_file(&clip_path)?;
        clip.require_standard().map_err(|err| DataError::File {
            path: clip_path,
            reason: err.to_string(),
        })?;
        let midi_path = self.resolve(&e.midi);
        let file_err = |reason: String| DataError::File {
            path: midi_path.clone(),
            reason,
        };
        let bytes = fs::read(&midi_path).map_err(|source| DataError::Io {
            path: midi_path.clone(),
            source,
        })?;
        let score = midi::parse_smf(&bytes).map_err(|err| file_err(err.to_string()))?;
        let tokens = codec::encode(&score, codec_cfg).map_err(|err| file_err(err.to_string()))?;
        let pair = ClipPair {
            clip,
            tokens,
            source_id: e.song_id.clone(),
        };
        pair.validate().map_err(|err| file_err(err.to_string()))?;
        Ok(pair)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipPair {
    pub clip: FrameClip,
    /// `START ... END`
    pub tokens: Vec<TokenId>,
    pub source_id: String,
}

impl ClipPair {
    pub fn validate(&self) -> Result<()> {
        let n = self.tokens.len();
        if n < 2 || self.tokens[0] != TokenId::START || self.tokens[n - 1] != TokenId::END {
            return Err(DataError::InvalidClip("token sequence must run START ... END".into()));
        }
        if n > MAX_PAIR_TOKENS {
            return Err(DataError::InvalidClip(format!(
                "{n} tokens exceed the cap of {MAX_PAIR_TOKENS}"
            )));
        }
        Ok(())
    }
}

/// Summary of a successful [`validate_dataset`] run.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub pairs: usize,
    pub per_split: Vec<(Split, usize)>,
    pub max_tokens: usize,
}

/// Checks every invariant of a manifest's files: clip container and dims,
/// MIDI parse, codec encode, lossless re-decode and the token cap.
pub fn validate_dataset(manifest: &Manifest, codec_cfg: &CodecConfig) -> Result<ValidationReport> {
    manifest.check()?;
    let mut report = ValidationReport::default();
    let mut counts: HashMap<Split, usize> = HashMap::new();
    for e in &manifest.entries {
        let pair = manifest.load_pair(e, codec_cfg)?;
        let (_, warnings) = codec::decode(&pair.tokens, codec_cfg);
        if warnings.total() != 0 {
            return Err(DataError::File {
                path: manifest.resolve(&e.midi),
                reason: format!("tokens decode with {} warnings", warnings.total()),
            });
        }
        report.pairs += 1;
        report.max_tokens = report.max_tokens.max(pair.tokens.len());
        *counts.entry(e.split).or_default() += 1;
    }
    let mut per_split: Vec<_> = counts.into_iter().collect();
    per_split.sort();
    report.per_split = per_split;
    Ok(report)
}

/// One teacher-forcing batch: `inputs[b] = tokens[..n-1]`,
/// `targets[b] = tokens[1..]`, both END-padded to the batch maximum.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub inputs: Vec<Vec<TokenId>>,
    pub targets: Vec<Vec<TokenId>>,
    pub mask: Vec<Vec<bool>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn token_count(&self) -> usize {
        self.mask.iter().flatten().filter(|&&m| m).count()
    }
}

pub fn make_batch(pairs: &[ClipPair], indices: &[usize]) -> Batch {
    let width = indices.iter().map(|&i| pairs[i].tokens.len() - 1).max().unwrap_or(0);
    let mut batch = Batch {
        indices: indices.to_vec(),
        inputs: Vec::new(),
        targets: Vec::new(),
        mask: Vec::new(),
    };
    for &i in indices {
        let t = &pairs[i].tokens;
        let n = t.len() - 1;
        let pad = |s: &[TokenId]| {
            let mut v = s.to_vec();
            v.resize(width, TokenId::END);
            v
        };
        batch.inputs.push(pad(&t[..n]));
        batch.targets.push(pad(&t[1..]));
        batch.mask.push((0..width).map(|j| j < n).collect());
    }
    batch
}

/// Visiting order of `n` items in a given epoch; a pure function of its arguments.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    SeededRng::derive(seed, &[0x6261_7463_68, epoch]).shuffle(&mut order);
    order
}

/// Batches of one epoch, in seeded shuffled order; the last may be short.
pub struct BatchIter<'a> {
    pairs: &'a [ClipPair],
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
}

impl Iterator for BatchIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let b = make_batch(self.pairs, &self.order[self.pos..end]);
        self.pos = end;
        Some(b)
    }
}

pub fn batch_iter(pairs: &[ClipPair], batch_size: usize, seed: u64, epoch: u64) -> Result<BatchIter<'_>> {
    if pairs.is_empty() {
        return Err(DataError::Manifest("cannot batch an empty split".into()));
    }
    if batch_size == 0 {
        return Err(DataError::Manifest("batch size must be positive".into()));
    }
    Ok(BatchIter {
        pairs,
        order: epoch_order(pairs.len(), seed, epoch),
        pos: 0,
        batch_size,
    })
}

/// Indices of the batch used at global `step` (0-based) when cycling through
/// `n` items in seeded per-epoch order.
pub fn batch_at_step(n: usize, batch_size: usize, seed: u64, step: u64) -> Vec<usize> {
    let per_epoch = n.div_ceil(batch_size) as u64;
    let epoch = step / per_epoch;
    let b = (step % per_epoch) as usize;
    let order = epoch_order(n, seed, epoch);
    order[b * batch_size..((b + 1) * batch_size).min(n)].to_vec()
}

// ---- synthetic data ----

/// Pattern roots for the five vertical bands, top to bottom.
pub const BAND_ROOTS: [u8; 5] = [84, 72, 60, 48, 36];
pub const PERIODS_SEC: [f64; 3] = [1.0, 2.0, 4.0];
pub const BRIGHTNESS: [u8; 3] = [150, 200, 250];
pub const ARPEGGIO: [u8; 8] = [0, 4, 7, 12, 7, 4, 0, 7];
pub const FRAME_STEP_SEC: f64 = 0.25;
/// Block tint per band, so the band survives spatial pooling.
pub const BAND_TINTS: [[f64; 3]; 5] = [
    [1.0, 0.25, 0.25],
    [1.0, 1.0, 0.25],
    [0.25, 1.0, 0.25],
    [0.25, 1.0, 1.0],
    [0.25, 0.25, 1.0],
];
const BLOCK: usize = 48;
const SWING: f64 = 32.0;
/// Lowest fraction of full brightness reached by the pulse.
const PULSE_FLOOR: f64 = 0.5;

/// Latent factors of one synthetic pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthParams {
    /// 0 = top band.
    pub band: usize,
    pub period_sec: f64,
    pub brightness: u8,
    /// Horizontal oscillation phase in radians.
    pub phase: f64,
}

impl SynthParams {
    pub fn sample(rng: &mut SeededRng) -> Self {
        SynthParams {
            band: rng.below(BAND_ROOTS.len()),
            period_sec: PERIODS_SEC[rng.below(PERIODS_SEC.len())],
            brightness: BRIGHTNESS[rng.below(BRIGHTNESS.len())],
            phase: rng.uniform(0.0, std::f64::consts::TAU),
        }
    }

    pub fn root(&self) -> u8 {
        BAND_ROOTS[self.band]
    }

    pub fn velocity(&self) -> u8 {
        (self.brightness as u32 * 127 / 255) as u8
    }

    /// Top-left corner of the block in frame `f`.
    pub fn block_origin(&self, f: usize) -> (usize, usize) {
        let band_h = FRAME_SIZE as f64 / BAND_ROOTS.len() as f64;
        let y = ((self.band as f64 + 0.5) * band_h - BLOCK as f64 / 2.0)
            .round()
            .clamp(0.0, (FRAME_SIZE - BLOCK) as f64) as usize;
        let t = f as f64 * FRAME_STEP_SEC;
        let cx = FRAME_SIZE as f64 / 2.0 + SWING * (std::f64::consts::TAU * t / self.period_sec + self.phase).sin();
        let x = (cx - BLOCK as f64 / 2.0).round().clamp(0.0, (FRAME_SIZE - BLOCK) as f64) as usize;
        (y, x)
    }

    /// Block colour in frame `f`: the band tint scaled by a brightness pulse
    /// that shares the horizontal motion's period and phase.
    pub fn block_rgb(&self, f: usize) -> [u8; 3] {
        let t = f as f64 * FRAME_STEP_SEC;
        let pulse = (std::f64::consts::TAU * t / self.period_sec + self.phase).cos();
        let level = self.brightness as f64 * (PULSE_FLOOR + (1.0 - PULSE_FLOOR) * (0.5 + 0.5 * pulse));
        BAND_TINTS[self.band].map(|k| (k * level).round() as u8)
    }
}

/// Renders the clip: dim noisy background plus one bright tinted square.
pub fn synth_clip(p: &SynthParams, rng: &mut SeededRng) -> FrameClip {
    let mut data = vec![0u8; STANDARD_DIMS.iter().product()];
    for v in data.iter_mut() {
        *v = rng.below(32) as u8;
    }
    for f in 0..CLIP_FRAMES {
        let (y0, x0) = p.block_origin(f);
        let rgb = p.block_rgb(f);
        for y in y0..y0 + BLOCK {
            for x in x0..x0 + BLOCK {
                let i = ((f * FRAME_SIZE + y) * FRAME_SIZE + x) * CHANNELS;
                data[i..i + CHANNELS].copy_from_slice(&rgb);
            }
        }
    }
    FrameClip::standard(data).expect("standard size")
}

/// The arpeggio the clip implies: root from the band, one note every quarter
/// period, each held for half its slot.
pub fn synth_score(p: &SynthParams) -> MidiScore {
    let ioi = p.period_sec / 4.0;
    let notes = ARPEGGIO
        .iter()
        .enumerate()
        .map(|(i, &off)| Note {
            onset_sec: i as f64 * ioi,
            offset_sec: i as f64 * ioi + ioi / 2.0,
            pitch: p.root() + off,
            velocity: p.velocity(),
        })
        .collect();
    MidiScore::new(notes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthSpec {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    pub seed: u64,
}

impl SynthSpec {
    pub fn train_only(n_pairs: usize, seed: u64) -> Self {
        SynthSpec {
            train: n_pairs,
            validation: 0,
            test: 0,
            seed,
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.validation + self.test
    }
}

/// One in-memory synthetic pair; pair `i` depends only on `(seed, i)`.
pub fn synth_pair(seed: u64, i: usize, codec_cfg: &CodecConfig) -> (SynthParams, ClipPair, MidiScore) {
    let mut rng = SeededRng::derive(seed, &[0x7379_6e74_68, i as u64]);
    let p = SynthParams::sample(&mut rng);
    let clip = synth_clip(&p, &mut rng);
    let score = synth_score(&p);
    let tokens = codec::encode(&score, codec_cfg).expect("synthetic scores fit the codec");
    let pair = ClipPair {
        clip,
        tokens,
        source_id: format!("synth-{i:04}"),
    };
    (p, pair, score)
}

/// Writes `clips/*.vmtf`, `midi/*.mid` and `manifest.json` under `dir`.
/// Each pair is its own song, so splits are trivially disjoint.
pub fn synth_dataset(spec: &SynthSpec, dir: &Path) -> Result<Manifest> {
    if spec.total() == 0 {
        return Err(DataError::Manifest("n_pairs must be at least 1".into()));
    }
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| DataError::Io { path, source }
    };
    for sub in ["clips", "midi"] {
        fs::create_dir_all(dir.join(sub)).map_err(io(&dir.join(sub)))?;
    }
    let codec_cfg = CodecConfig::default();
    let mut entries = Vec::with_capacity(spec.total());
    for i in 0..spec.total() {
        let split = if i < spec.train {
            Split::Train
        } else if i < spec.train + spec.validation {
            Split::Validation
        } else {
            Split::Test
        };
        let (_, pair, score) = synth_pair(spec.seed, i, &codec_cfg);
        let clip = PathBuf::from(format!("clips/{i:04}.vmtf"));
        let midi_path = PathBuf::from(format!("midi/{i:04}.mid"));
        fs::write(dir.join(&clip), write_vmtf(&pair.clip)).map_err(io(&dir.join(&clip)))?;
        fs::write(dir.join(&midi_path), midi::write_smf(&score)).map_err(io(&dir.join(&midi_path)))?;
        entries.push(ManifestEntry {
            clip,
            midi: midi_path,
            split,
            song_id: pair.source_id,
        });
    }
    let manifest = Manifest::new(dir, entries);
    manifest.save(&dir.join("manifest.json"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny(dims: ClipDims, seed: u64) -> FrameClip {
        let mut rng = SeededRng::new(seed);
        let n = dims.iter().product();
        FrameClip::new(dims, (0..n).map(|_| rng.below(256) as u8).collect()).unwrap()
    }

    #[test]
    fn vmtf_header_layout() {
        let clip = FrameClip::filled(STANDARD_DIMS, 9).unwrap();
        let bytes = write_vmtf(&clip);
        assert_eq!(&bytes[..5], b"VMTF\x01");
        assert_eq!(&bytes[5..12], &[40, 0, 128, 0, 128, 0, 3]);
        assert_eq!(bytes.len() - VMTF_HEADER_LEN, 1_966_080);
        assert_eq!(read_vmtf(&bytes).unwrap(), clip);
    }

    #[test]
    fn vmtf_errors() {
        let bytes = write_vmtf(&tiny([2, 3, 4, 3], 1));
        let err = read_vmtf(&bytes[..bytes.len() - 5]).unwrap_err();
        assert!(matches!(err, DataError::PayloadLength { expected: 72, actual: 67 }));
        assert!(err.to_string().contains("72") && err.to_string().contains("67"));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_vmtf(&bad), Err(DataError::BadMagic { .. })));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(read_vmtf(&bad), Err(DataError::UnsupportedVersion(2))));
        assert!(matches!(read_vmtf(b"VMTF"), Err(DataError::TruncatedHeader(4))));
    }

    #[test]
    fn normalize_values_and_layout() {
        let clip = FrameClip::new([1, 1, 2, 3], vec![0, 255, 127, 10, 20, 30]).unwrap();
        let t = normalize::<f64>(&clip);
        assert_eq!(t.shape(), &[1, 3, 1, 2]);
        let d = t.data();
        assert_eq!(d[0], -1.0);
        assert_eq!(d[2], 1.0);
        assert!((d[4] - (127.0 / 127.5 - 1.0)).abs() < 1e-15);
        assert!((d[4] + 0.003921568).abs() < 1e-8);
        // channel 0 of the second pixel
        assert_eq!(d[1], 10.0 / 127.5 - 1.0);
        let zero = normalize::<f32>(&FrameClip::filled(STANDARD_DIMS, 0).unwrap());
        assert_eq!(zero.shape(), &[40, 3, 128, 128]);
        assert!(zero.data().iter().all(|&v| v == -1.0));
    }

    #[test]
    fn normalize_is_injective_on_bytes() {
        let clip = FrameClip::new([1, 1, 256, 1], (0..=255).collect()).unwrap();
        let t = normalize::<f32>(&clip);
        let d = t.data();
        assert!(d.windows(2).all(|w| w[0] < w[1]));
        for (v, &x) in d.iter().enumerate() {
            assert_eq!((((x + 1.0) * 127.5).round()) as usize, v);
        }
    }

    fn pairs_with_lengths(lens: &[usize]) -> Vec<ClipPair> {
        lens.iter()
            .map(|&n| {
                let mut tokens = vec![TokenId::START];
                tokens.extend((0..n - 2).map(|i| TokenId::new(176 + (i % 32) as u32).unwrap()));
                tokens.push(TokenId::END);
                ClipPair {
                    clip: FrameClip::filled([1, 1, 1, 3], 0).unwrap(),
                    tokens,
                    source_id: String::new(),
                }
            })
            .collect()
    }

    #[test]
    fn batch_sizes_and_masks() {
        let pairs = pairs_with_lengths(&[5, 9, 3, 7, 4, 6, 8, 2, 10, 5]);
        let batches: Vec<Batch> = batch_iter(&pairs, 4, 3, 0).unwrap().collect();
        assert_eq!(batches.iter().map(Batch::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        for b in &batches {
            for (k, &i) in b.indices.iter().enumerate() {
                let n = pairs[i].tokens.len() - 1;
                assert_eq!(b.mask[k].iter().filter(|&&m| m).count(), n);
                assert_eq!(&b.inputs[k][..n], &pairs[i].tokens[..n]);
                assert_eq!(&b.targets[k][..n], &pairs[i].tokens[1..]);
                assert!(b.inputs[k][n..].iter().all(|&t| t == TokenId::END));
            }
        }
        let again: Vec<Batch> = batch_iter(&pairs, 4, 3, 0).unwrap().collect();
        assert_eq!(batches, again);
        let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.indices.clone()).collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert!(batch_iter(&[], 4, 0, 0).is_err());
    }

    #[test]
    fn step_schedule_matches_epochs() {
        let pairs = pairs_with_lengths(&[3; 10]);
        let mut by_step = Vec::new();
        for step in 0..6 {
            by_step.push(batch_at_step(10, 4, 11, step));
        }
        let e0: Vec<Vec<usize>> = batch_iter(&pairs, 4, 11, 0).unwrap().map(|b| b.indices).collect();
        let e1: Vec<Vec<usize>> = batch_iter(&pairs, 4, 11, 1).unwrap().map(|b| b.indices).collect();
        assert_eq!(by_step, [e0, e1].concat());
    }

    #[test]
    fn synth_mapping() {
        let mk = |band| SynthParams {
            band,
            period_sec: 2.0,
            brightness: 200,
            phase: 0.0,
        };
        assert_eq!(synth_score(&mk(0)).notes[0].pitch, 84);
        assert_eq!(synth_score(&mk(4)).notes[0].pitch, 36);
        let s = synth_score(&mk(2));
        assert_eq!(s.notes.len(), 8);
        assert!((s.notes[1].onset_sec - 0.5).abs() < 1e-12);
        let mut rng = SeededRng::new(0);
        let clip = synth_clip(&mk(0), &mut rng);
        let (y, x) = mk(0).block_origin(0);
        // band 0 is red-tinted; phase 0 starts at the pulse peak
        assert_eq!(mk(0).block_rgb(0), [200, 50, 50]);
        assert_eq!(clip.pixel(0, y + 3, x + 3, 0), 200);
        assert_eq!(clip.pixel(0, y + 3, x + 3, 1), 50);
        assert_eq!(y, 0);
        assert_eq!(mk(4).block_origin(0).0, FRAME_SIZE - BLOCK);
        // a quarter period later the pulse is halfway down
        assert_eq!(mk(0).block_rgb(2)[0], 150);
    }

    #[test]
    fn synth_tokens_round_trip_and_fit() {
        let cfg = CodecConfig::default();
        for i in 0..60 {
            let (_, pair, score) = synth_pair(5, i, &cfg);
            pair.validate().unwrap();
            assert!(pair.tokens.len() <= 64, "{} tokens", pair.tokens.len());
            let (back, w) = codec::decode(&pair.tokens, &cfg);
            assert_eq!(w.total(), 0);
            assert_eq!(back.notes.len(), score.notes.len());
        }
    }

    #[test]
    fn synth_files_deterministic_and_valid() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let spec = SynthSpec::train_only(4, 7);
        synth_dataset(&spec, a.path()).unwrap();
        synth_dataset(&spec, b.path()).unwrap();
        for f in ["manifest.json", "clips/0000.vmtf", "clips/0003.vmtf", "midi/0002.mid"] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
        }
        let m = Manifest::load(&a.path().join("manifest.json")).unwrap();
        let report = validate_dataset(&m, &CodecConfig::default()).unwrap();
        assert_eq!(report.pairs, 4);
        assert_eq!(m.load_split(Split::Train, &CodecConfig::default()).unwrap().len(), 4);
        assert!(matches!(
            m.load_split(Split::Test, &CodecConfig::default()),
            Err(DataError::EmptySplit(Split::Test))
        ));
    }

    #[test]
    fn manifest_rejects_split_leak_and_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = synth_dataset(&SynthSpec::train_only(2, 1), dir.path()).unwrap();
        m.entries[1].song_id = m.entries[0].song_id.clone();
        m.entries[1].split = Split::Test;
        assert!(matches!(m.check(), Err(DataError::Manifest(msg)) if msg.contains("both")));
        m.entries[1].split = Split::Train;
        m.check().unwrap();
        m.entries[0].clip = PathBuf::from("clips/missing.vmtf");
        assert!(matches!(m.check(), Err(DataError::File { path, .. }) if path.ends_with("missing.vmtf")));
    }

    #[test]
    fn corrupted_clip_named() {
        let dir = tempfile::tempdir().unwrap();
        let m = synth_dataset(&SynthSpec::train_only(2, 1), dir.path()).unwrap();
        let victim = dir.path().join("clips/0001.vmtf");
        let bytes = fs::read(&victim).unwrap();
        fs::write(&victim, &bytes[..bytes.len() - 1]).unwrap();
        let err = validate_dataset(&m, &CodecConfig::default()).unwrap_err();
        assert!(err.to_string().contains("0001.vmtf"), "{err}");
    }

    proptest! {
        #[test]
        fn vmtf_round_trip(f in 1usize..4, h in 1usize..6, w in 1usize..6, c in 1usize..4, seed in any::<u64>()) {
            let clip = tiny([f, h, w, c], seed);
            let bytes = write_vmtf(&clip);
            prop_assert_eq!(&read_vmtf(&bytes).unwrap(), &clip);
            prop_assert_eq!(write_vmtf(&read_vmtf(&bytes).unwrap()), bytes);
        }
    }
}
