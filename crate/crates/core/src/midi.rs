//! Standard MIDI File reading and writing, and the seconds-domain note list
//! the rest of the pipeline works with.
//!
//! The parser accepts formats 0 and 1 with running status and full tempo
//! maps. The writer always produces format 0 at 480 ticks per quarter with a
//! single tempo event and no running status.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub const DEFAULT_US_PER_QUARTER: u32 = 500_000;
pub const WRITE_TICKS_PER_QUARTER: u16 = 480;
pub const LOWEST_PITCH: u8 = 21;
pub const HIGHEST_PITCH: u8 = 108;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MidiError {
    #[error("malformed MIDI at byte {offset}: {reason}")]
    Malformed { offset: usize, reason: String },
    #[error("unsupported SMF format {format} (only 0 and 1 are accepted)")]
    UnsupportedFormat { format: u16 },
    #[error("SMPTE time division is not supported")]
    SmpteDivision,
    #[error("invalid clip window [{start}, {end}]")]
    InvalidWindow { start: f64, end: f64 },
    #[error("invalid note: {0}")]
    InvalidNote(String),
}

pub type Result<T, E = MidiError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Note {
    pub onset_sec: f64,
    pub offset_sec: f64,
    pub pitch: u8,
    pub velocity: u8,
}

impl Note {
    pub fn new(onset_sec: f64, offset_sec: f64, pitch: u8, velocity: u8) -> Result<Self> {
        let n = Note {
            onset_sec,
            offset_sec,
            pitch,
            velocity,
        };
        n.validate()?;
        Ok(n)
    }

    pub fn duration(&self) -> f64 {
        self.offset_sec - self.onset_sec
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.onset_sec.is_finite() && self.onset_sec >= 0.0) {
            return Err(MidiError::InvalidNote(format!("onset {} must be >= 0", self.onset_sec)));
        }
        if !(self.offset_sec.is_finite() && self.offset_sec > self.onset_sec) {
            return Err(MidiError::InvalidNote(format!(
                "offset {} must exceed onset {}",
                self.offset_sec, self.onset_sec
            )));
        }
        if !(LOWEST_PITCH..=HIGHEST_PITCH).contains(&self.pitch) {
            return Err(MidiError::InvalidNote(format!(
                "pitch {} outside piano range {LOWEST_PITCH}..={HIGHEST_PITCH}",
                self.pitch
            )));
        }
        if !(1..=127).contains(&self.velocity) {
            return Err(MidiError::InvalidNote(format!("velocity {} outside 1..=127", self.velocity)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TempoChange {
    pub tick: u64,
    pub us_per_quarter: u32,
}

/// Tempo-resolved note list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MidiScore {
    pub ticks_per_quarter: u16,
    /// Sorted by tick; the first entry is at tick 0.
    pub tempo_map: Vec<TempoChange>,
    /// Sorted by onset, then pitch.
    pub notes: Vec<Note>,
}

impl Default for MidiScore {
    fn default() -> Self {
        Self::new(Vec::new())
    }
}

impl MidiScore {
    /// Score at 480 ticks per quarter and 120 bpm.
    pub fn new(notes: Vec<Note>) -> Self {
        Self::with_tempo(notes, DEFAULT_US_PER_QUARTER)
    }

    pub fn with_tempo(mut notes: Vec<Note>, us_per_quarter: u32) -> Self {
        sort_notes(&mut notes);
        MidiScore {
            ticks_per_quarter: WRITE_TICKS_PER_QUARTER,
            tempo_map: vec![TempoChange {
                tick: 0,
                us_per_quarter,
            }],
            notes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ticks_per_quarter == 0 {
            return Err(MidiError::InvalidNote("ticks per quarter must be positive".into()));
        }
        match self.tempo_map.first() {
            Some(t) if t.tick == 0 => {}
            _ => return Err(MidiError::InvalidNote("tempo map must start at tick 0".into())),
        }
        if self.tempo_map.windows(2).any(|w| w[0].tick > w[1].tick) {
            return Err(MidiError::InvalidNote("tempo map not sorted".into()));
        }
        for n in &self.notes {
            n.validate()?;
        }
        if self.notes.windows(2).any(|w| w[0].onset_sec > w[1].onset_sec) {
            return Err(MidiError::InvalidNote("notes not sorted by onset".into()));
        }
        Ok(())
    }

    /// End time of the last sounding note (0 for an empty score).
    pub fn duration(&self) -> f64 {
        self.notes.iter().map(|n| n.offset_sec).fold(0.0, f64::max)
    }

    /// Absolute seconds of a tick position under this score's tempo map.
    pub fn tick_to_sec(&self, tick: u64) -> f64 {
        TempoClock::new(&self.tempo_map, self.ticks_per_quarter).seconds(tick)
    }
}

fn sort_notes(notes: &mut [Note]) {
    notes.sort_by(|a, b| {
        a.onset_sec
            .total_cmp(&b.onset_sec)
            .then(a.pitch.cmp(&b.pitch))
            .then(a.offset_sec.total_cmp(&b.offset_sec))
    });
}

/// Piecewise-linear tick to seconds conversion.
struct TempoClock {
    /// (tick, seconds at tick, seconds per tick)
    segments: Vec<(u64, f64, f64)>,
}

impl TempoClock {
    fn new(tempo_map: &[TempoChange], tpq: u16) -> Self {
        let mut segments: Vec<(u64, f64, f64)> = Vec::with_capacity(tempo_map.len() + 1);
        let per_tick = |us: u32| us as f64 / 1e6 / tpq as f64;
        if tempo_map.first().map_or(true, |t| t.tick > 0) {
            segments.push((0, 0.0, per_tick(DEFAULT_US_PER_QUARTER)));
        }
        for t in tempo_map {
            let start = match segments.last() {
                Some(&(tick, sec, spt)) => sec + (t.tick - tick) as f64 * spt,
                None => 0.0,
            };
            if segments.last().is_some_and(|s| s.0 == t.tick) {
                segments.pop();
            }
            segments.push((t.tick, start, per_tick(t.us_per_quarter)));
        }
        TempoClock { segments }
    }

    fn seconds(&self, tick: u64) -> f64 {
        let i = self.segments.partition_point(|s| s.0 <= tick).saturating_sub(1);
        let (t0, s0, spt) = self.segments[i];
        s0 + (tick - t0) as f64 * spt
    }
}

/// Non-fatal irregularities found while parsing.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ParseReport {
    /// Notes outside the 88-key range, dropped.
    pub out_of_range_pitches: usize,
    /// Note-offs with no sounding note.
    pub unmatched_note_offs: usize,
    /// Notes still sounding at the end of the file, closed at the last tick.
    pub unterminated_notes: usize,
    /// Same-pitch re-strikes that closed the earlier note.
    pub overlapping_notes: usize,
}

impl ParseReport {
    pub fn total(&self) -> usize {
        self.out_of_range_pitches + self.unmatched_note_offs + self.unterminated_notes + self.overlapping_notes
    }
}

pub fn parse_smf(bytes: &[u8]) -> Result<MidiScore> {
    parse_smf_with_report(bytes).map(|(s, _)| s)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    end: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, reason: impl Into<String>) -> MidiError {
        MidiError::Malformed {
            offset: self.pos,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.end - self.pos < n {
            return Err(self.err(format!("truncated {what}: need {n} bytes, {} left", self.end - self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    /// Channel-message data bytes, which must all be below 0x80.
    fn data(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let start = self.pos;
        let d = self.take(n, what)?;
        if let Some(i) = d.iter().position(|&b| b >= 0x80) {
            return Err(MidiError::Malformed {
                offset: start + i,
                reason: format!("{what} byte {:#04x} has the high bit set", d[i]),
            });
        }
        Ok(d)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn vlq(&mut self) -> Result<u32> {
        let start = self.pos;
        let mut v: u32 = 0;
        for _ in 0..4 {
            if self.pos >= self.end {
                return Err(MidiError::Malformed {
                    offset: start,
                    reason: "truncated variable-length quantity".into(),
                });
            }
            let b = self.bytes[self.pos];
            self.pos += 1;
            v = (v << 7) | (b & 0x7F) as u32;
            if b & 0x80 == 0 {
                return Ok(v);
            }
        }
        Err(MidiError::Malformed {
            offset: start,
            reason: "variable-length quantity longer than 4 bytes".into(),
        })
    }
}

#[derive(Debug, Clone, Copy)]
enum RawEvent {
    On { channel: u8, pitch: u8, velocity: u8 },
    Off { channel: u8, pitch: u8 },
    Tempo(u32),
}

/// Parses an SMF and reports the irregularities that were repaired.
pub fn parse_smf_with_report(bytes: &[u8]) -> Result<(MidiScore, ParseReport)> {
    let mut r = Reader {
        bytes,
        pos: 0,
        end: bytes.len(),
    };
    if r.take(4, "header magic")? != b"MThd" {
        return Err(MidiError::Malformed {
            offset: 0,
            reason: "missing MThd header".into(),
        });
    }
    let hlen = r.u32("header length")? as usize;
    if hlen < 6 {
        return Err(r.err(format!("header chunk length {hlen} < 6")));
    }
    let format_at = r.pos;
    let format = r.u16("format")?;
    let ntracks = r.u16("track count")?;
    let division = r.u16("division")?;
    r.take(hlen - 6, "header padding")?;
    if format > 1 {
        let _ = format_at;
        return Err(MidiError::UnsupportedFormat { format });
    }
    if division & 0x8000 != 0 {
        return Err(MidiError::SmpteDivision);
    }
    if division == 0 {
        return Err(MidiError::Malformed {
            offset: format_at + 4,
            reason: "zero ticks per quarter".into(),
        });
    }

    // (tick, track, sequence, event)
    let mut events: Vec<(u64, usize, usize, RawEvent)> = Vec::new();
    let mut last_tick = 0u64;
    let mut track = 0usize;
    while track < ntracks as usize {
        if r.pos == r.end {
            return Err(r.err(format!("expected {ntracks} tracks, found {track}")));
        }
        let chunk_at = r.pos;
        let id = r.take(4, "chunk id")?;
        let len = r.u32("chunk length")? as usize;
        if len > r.end - r.pos {
            return Err(MidiError::Malformed {
                offset: chunk_at + 4,
                reason: format!("chunk length {len} exceeds remaining {} bytes", r.end - r.pos),
            });
        }
        if id != b"MTrk" {
            r.pos += len;
            continue;
        }
        let mut tr = Reader {
            bytes,
            pos: r.pos,
            end: r.pos + len,
        };
        r.pos += len;
        let mut tick = 0u64;
        let mut running: Option<u8> = None;
        let mut seq = 0usize;
        while tr.pos < tr.end {
            tick += tr.vlq()? as u64;
            let mut status = tr.u8("event status")?;
            if status < 0x80 {
                status = running.ok_or_else(|| MidiError::Malformed {
                    offset: tr.pos - 1,
                    reason: "data byte without running status".into(),
                })?;
                tr.pos -= 1;
            }
            match status {
                0xFF => {
                    let kind = tr.u8("meta type")?;
                    let mlen = tr.vlq()? as usize;
                    let data = tr.take(mlen, "meta payload")?;
                    if kind == 0x51 {
                        if mlen != 3 {
                            return Err(tr.err(format!("tempo meta event of length {mlen}")));
                        }
                        let us = u32::from_be_bytes([0, data[0], data[1], data[2]]);
                        events.push((tick, track, seq, RawEvent::Tempo(us)));
                    }
                    if kind == 0x2F {
                        break;
                    }
                }
                0xF0 | 0xF7 => {
                    running = None;
                    let slen = tr.vlq()? as usize;
                    tr.take(slen, "sysex payload")?;
                }
                0xF1..=0xFE => return Err(tr.err(format!("unexpected system status {status:#04x}"))),
                _ => {
                    running = Some(status);
                    let channel = status & 0x0F;
                    match status & 0xF0 {
                        0x80 => {
                            let d = tr.data(2, "note-off data")?;
                            events.push((tick, track, seq, RawEvent::Off { channel, pitch: d[0] }));
                        }
                        0x90 => {
                            let d = tr.data(2, "note-on data")?;
                            let ev = if d[1] == 0 {
                                RawEvent::Off { channel, pitch: d[0] }
                            } else {
                                RawEvent::On {
                                    channel,
                                    pitch: d[0],
                                    velocity: d[1],
                                }
                            };
                            events.push((tick, track, seq, ev));
                        }
                        0xA0 | 0xB0 | 0xE0 => {
                            tr.data(2, "channel message data")?;
                        }
                        _ => {
                            tr.data(1, "channel message data")?;
                        }
                    }
                }
            }
            seq += 1;
        }
        last_tick = last_tick.max(tick);
        track += 1;
    }

    let rank = |e: &RawEvent| match e {
        RawEvent::Tempo(_) => 0,
        RawEvent::Off { .. } => 1,
        RawEvent::On { .. } => 2,
    };
    events.sort_by(|a, b| (a.0, rank(&a.3), a.1, a.2).cmp(&(b.0, rank(&b.3), b.1, b.2)));

    let mut tempo_map = vec![TempoChange {
        tick: 0,
        us_per_quarter: DEFAULT_US_PER_QUARTER,
    }];
    for &(tick, _, _, ev) in &events {
        if let RawEvent::Tempo(us) = ev {
            if tempo_map.last().is_some_and(|t| t.tick == tick) {
                tempo_map.pop();
            }
            tempo_map.push(TempoChange {
                tick,
                us_per_quarter: us,
            });
        }
    }
    let clock = TempoClock::new(&tempo_map, division);

    let mut report = ParseReport::default();
    let mut open: HashMap<(u8, u8), (u64, u8)> = HashMap::new();
    let mut spans: Vec<(u64, u64, u8, u8)> = Vec::new();
    let in_range = |p: u8| (LOWEST_PITCH..=HIGHEST_PITCH).contains(&p);
    for &(tick, _, _, ev) in &events {
        match ev {
            RawEvent::Tempo(_) => {}
            RawEvent::On {
                channel,
                pitch,
                velocity,
            } => {
                if !in_range(pitch) {
                    report.out_of_range_pitches += 1;
                    continue;
                }
                if let Some((on, vel)) = open.insert((channel, pitch), (tick, velocity)) {
                    report.overlapping_notes += 1;
                    if tick > on {
                        spans.push((on, tick, pitch, vel));
                    }
                }
            }
            RawEvent::Off { channel, pitch } => {
                if !in_range(pitch) {
                    continue;
                }
                match open.remove(&(channel, pitch)) {
                    Some((on, vel)) if tick > on => spans.push((on, tick, pitch, vel)),
                    Some(_) => {}
                    None => report.unmatched_note_offs += 1,
                }
            }
        }
    }
    let mut leftovers: Vec<_> = open.into_iter().collect();
    leftovers.sort();
    for ((_, pitch), (on, vel)) in leftovers {
        report.unterminated_notes += 1;
        if last_tick > on {
            spans.push((on, last_tick, pitch, vel));
        }
    }

    let mut notes: Vec<Note> = spans
        .into_iter()
        .map(|(on, off, pitch, velocity)| Note {
            onset_sec: clock.seconds(on),
            offset_sec: clock.seconds(off),
            pitch,
            velocity,
        })
        .collect();
    sort_notes(&mut notes);
    Ok((
        MidiScore {
            ticks_per_quarter: division,
            tempo_map,
            notes,
        },
        report,
    ))
}

fn push_vlq(out: &mut Vec<u8>, mut v: u32) {
    let mut buf = [0u8; 4];
    let mut n = 0;
    loop {
        buf[n] = (v & 0x7F) as u8;
        n += 1;
        v >>= 7;
        if v == 0 {
            break;
        }
    }
    for i in (0..n).rev() {
        out.push(buf[i] | if i > 0 { 0x80 } else { 0 });
    }
}

/// Serializes as a single-track format-0 file at 480 ticks per quarter.
///
/// Only the first tempo of the score is written; note times are converted
/// from seconds under that tempo, so they survive a round trip to within
/// half a tick. Same-pitch overlaps are resolved the way the parser does.
pub fn write_smf(score: &MidiScore) -> Vec<u8> {
    let us = score
        .tempo_map
        .first()
        .map_or(DEFAULT_US_PER_QUARTER, |t| t.us_per_quarter);
    let tpq = WRITE_TICKS_PER_QUARTER;
    let ticks_per_sec = 1e6 / us as f64 * tpq as f64;
    let to_tick = |s: f64| (s * ticks_per_sec).round().max(0.0) as u64;

    let mut spans: Vec<(u64, u64, u8, u8)> = score
        .notes
        .iter()
        .map(|n| {
            let on = to_tick(n.onset_sec);
            (on, to_tick(n.offset_sec).max(on + 1), n.pitch, n.velocity)
        })
        .collect();
    spans.sort_by_key(|s| (s.2, s.0));
    let mut kept = Vec::with_capacity(spans.len());
    for i in 0..spans.len() {
        let mut s = spans[i];
        if let Some(next) = spans.get(i + 1).filter(|n| n.2 == s.2) {
            if next.0 < s.1 {
                s.1 = next.0;
            }
        }
        if s.1 > s.0 {
            kept.push(s);
        }
    }

    // (tick, 0 = off / 1 = on, pitch, velocity)
    let mut events: Vec<(u64, u8, u8, u8)> = Vec::with_capacity(kept.len() * 2);
    for (on, off, pitch, vel) in kept {
        events.push((on, 1, pitch, vel));
        events.push((off, 0, pitch, 0));
    }
    events.sort();

    let mut track = Vec::new();
    push_vlq(&mut track, 0);
    track.extend_from_slice(&[0xFF, 0x51, 0x03]);
    track.extend_from_slice(&us.to_be_bytes()[1..]);
    let mut now = 0u64;
    for (tick, kind, pitch, vel) in events {
        push_vlq(&mut track, (tick - now) as u32);
        now = tick;
        track.extend_from_slice(&[if kind == 1 { 0x90 } else { 0x80 }, pitch, vel]);
    }
    push_vlq(&mut track, 0);
    track.extend_from_slice(&[0xFF, 0x2F, 0x00]);

    let mut out = Vec::with_capacity(22 + track.len());
    out.extend_from_slice(b"MThd");
    out.extend_from_slice(&6u32.to_be_bytes());
    out.extend_from_slice(&0u16.to_be_bytes());
    out.extend_from_slice(&1u16.to_be_bytes());
    out.extend_from_slice(&tpq.to_be_bytes());
    out.extend_from_slice(b"MTrk");
    out.extend_from_slice(&(track.len() as u32).to_be_bytes());
    out.extend_from_slice(&track);
    out
}

/// Notes intersecting `[start_sec, end_sec)`, truncated to the window and
/// shifted so the window starts at 0. The result carries the tempo in
/// effect at `start_sec`.
pub fn clip_score(score: &MidiScore, start_sec: f64, end_sec: f64) -> Result<MidiScore> {
    if !(start_sec.is_finite() && end_sec.is_finite() && end_sec > start_sec && start_sec >= 0.0) {
        return Err(MidiError::InvalidWindow {
            start: start_sec,
            end: end_sec,
        });
    }
    let notes = score
        .notes
        .iter()
        .filter(|n| n.onset_sec < end_sec && n.offset_sec > start_sec)
        .map(|n| Note {
            onset_sec: n.onset_sec.max(start_sec) - start_sec,
            offset_sec: n.offset_sec.min(end_sec) - start_sec,
            ..*n
        })
        .filter(|n| n.offset_sec > n.onset_sec)
        .collect();
    let clock = TempoClock::new(&score.tempo_map, score.ticks_per_quarter);
    let us = score
        .tempo_map
        .iter()
        .rev()
        .find(|t| clock.seconds(t.tick) <= start_sec)
        .map_or(DEFAULT_US_PER_QUARTER, |t| t.us_per_quarter);
    let mut out = MidiScore::with_tempo(notes, us);
    out.ticks_per_quarter = score.ticks_per_quarter;
    Ok(out)
}
