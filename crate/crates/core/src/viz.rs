//! Piano-roll rendering of scores as SVG.

use std::fmt::Write;

use crate::midi::MidiScore;

/// Plot geometry. `width` and `height` are the plot area in pixels; axis
/// labels are drawn in a margin around it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RollSpec {
    /// Lowest and highest pitch row, inclusive.
    pub pitch_lo: u8,
    pub pitch_hi: u8,
    pub t0_sec: f64,
    pub t1_sec: f64,
    pub width: f64,
    pub height: f64,
    /// Opacity at velocity 0; velocity 127 maps to 1.
    pub min_opacity: f64,
}

impl Default for RollSpec {
    fn default() -> Self {
        RollSpec {
            pitch_lo: 36,
            pitch_hi: 96,
            t0_sec: 0.0,
            t1_sec: 10.0,
            width: 1000.0,
            height: 600.0,
            min_opacity: 0.25,
        }
    }
}

const MARGIN_LEFT: f64 = 48.0;
const MARGIN_RIGHT: f64 = 16.0;
const MARGIN_TOP: f64 = 16.0;
const MARGIN_BOTTOM: f64 = 40.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoteRect {
    pub x: f64,
    pub y: f64,
    pub width: f64,
    pub height: f64,
    pub opacity: f64,
    /// Pitch or time fell outside the plotted ranges.
    pub clamped: bool,
}

impl RollSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.pitch_hi < self.pitch_lo {
            return Err(format!("empty pitch range {}..={}", self.pitch_lo, self.pitch_hi));
        }
        if !(self.t1_sec > self.t0_sec) {
            return Err(format!("empty time range {}..{}", self.t0_sec, self.t1_sec));
        }
        if !(self.width > 0.0 && self.height > 0.0) {
            return Err("canvas must have positive size".into());
        }
        Ok(())
    }

    fn rows(&self) -> usize {
        (self.pitch_hi - self.pitch_lo) as usize + 1
    }

    pub fn row_height(&self) -> f64 {
        self.height / self.rows() as f64
    }

    pub fn px_per_sec(&self) -> f64 {
        self.width / (self.t1_sec - self.t0_sec)
    }

    /// Top edge of a pitch row; the highest pitch is at the top.
    pub fn row_y(&self, pitch: u8) -> f64 {
        (self.pitch_hi - pitch) as f64 * self.row_height()
    }

    pub fn note_rect(&self, onset: f64, offset: f64, pitch: u8, velocity: u8) -> NoteRect {
        let p = pitch.clamp(self.pitch_lo, self.pitch_hi);
        let x0 = ((onset - self.t0_sec) * self.px_per_sec()).clamp(0.0, self.width);
        let x1 = ((offset - self.t0_sec) * self.px_per_sec()).clamp(0.0, self.width);
        let time_clamped = onset < self.t0_sec || offset > self.t1_sec;
        NoteRect {
            x: x0,
            y: self.row_y(p),
            width: (x1 - x0).max(0.0),
            height: self.row_height(),
            opacity: self.min_opacity + (1.0 - self.min_opacity) * velocity as f64 / 127.0,
            clamped: p != pitch || time_clamped,
        }
    }
}

/// Shortest fixed-point rendering with up to three decimals.
fn num(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.into()
    }
}

fn pitch_name(p: u8) -> String {
    const NAMES: [&str; 12] = ["C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B"];
    format!("{}{}", NAMES[p as usize % 12], p as i32 / 12 - 1)
}

/// One `<rect class="note">` per note; out-of-range notes are clamped to the
/// nearest edge and drawn with a dashed outline.
pub fn piano_roll_svg(score: &MidiScore, spec: &RollSpec) -> Result<String, String> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let mut s = String::new();
    let total_w = MARGIN_LEFT + w + MARGIN_RIGHT;
    let total_h = MARGIN_TOP + h + MARGIN_BOTTOM;
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{}" height="{}" viewBox="0 0 {} {}">"#,
        num(total_w),
        num(total_h),
        num(total_w),
        num(total_h)
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<g transform="translate({},{})" font-family="sans-serif" font-size="11">"#,
        num(MARGIN_LEFT),
        num(MARGIN_TOP)
    );

    // axes
    let _ = writeln!(s, r#"<g class="axes" stroke="black" stroke-width="1">"#);
    let _ = writeln!(s, r#"<line x1="0" y1="{}" x2="{}" y2="{}"/>"#, num(h), num(w), num(h));
    let _ = writeln!(s, r#"<line x1="0" y1="0" x2="0" y2="{}"/>"#, num(h));
    let first = spec.t0_sec.ceil() as i64;
    let last = spec.t1_sec.floor() as i64;
    for t in first..=last {
        let x = (t as f64 - spec.t0_sec) * spec.px_per_sec();
        let _ = writeln!(s, r#"<line x1="{}" y1="{}" x2="{}" y2="{}"/>"#, num(x), num(h), num(x), num(h + 4.0));
    }
    for p in spec.pitch_lo..=spec.pitch_hi {
        if p % 12 == 0 {
            let y = spec.row_y(p) + spec.row_height() / 2.0;
            let _ = writeln!(s, r#"<line x1="-4" y1="{}" x2="0" y2="{}"/>"#, num(y), num(y));
        }
    }
    let _ = writeln!(s, "</g>");
    let _ = writeln!(s, r#"<g class="labels" fill="black">"#);
    for t in first..=last {
        let x = (t as f64 - spec.t0_sec) * spec.px_per_sec();
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{t}</text>"#, num(x), num(h + 16.0));
    }
    for p in spec.pitch_lo..=spec.pitch_hi {
        if p % 12 == 0 {
            let y = spec.row_y(p) + spec.row_height() / 2.0 + 4.0;
            let _ = writeln!(s, r#"<text x="-6" y="{}" text-anchor="end">{}</text>"#, num(y), pitch_name(p));
        }
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">time (s)</text>"#,
        num(w / 2.0),
        num(h + 34.0)
    );
    let _ = writeln!(s, "</g>");

    let _ = writeln!(s, r#"<g class="notes" fill="steelblue">"#);
    for n in &score.notes {
        let r = spec.note_rect(n.onset_sec, n.offset_sec, n.pitch, n.velocity);
        let dash = if r.clamped {
            r#" stroke="black" stroke-dasharray="3,2""#
        } else {
            ""
        };
        let _ = writeln!(
            s,
            r#"<rect class="note" x="{}" y="{}" width="{}" height="{}" fill-opacity="{}"{dash}/>"#,
            num(r.x),
            num(r.y),
            num(r.width),
            num(r.height),
            num(r.opacity)
        );
    }
    let _ = writeln!(s, "</g>\n</g>\n</svg>");
    Ok(s)
}
