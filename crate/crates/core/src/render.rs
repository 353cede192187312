//! Pianoroll rendering as SVG or a parseable text grid.
//!
//! Notes are coloured by instrument family: the sixteen eight-program
//! General MIDI blocks plus one class for drums.

use std::fmt::Write as _;
use std::str::FromStr;

use thiserror::Error;

use crate::codec::{decode_measure, Measure, Program, STEPS_PER_MEASURE, STEPS_PER_QUARTER};
use crate::smf::ParsedScore;

pub const FAMILY_COUNT: usize = 17;

const PALETTE: [&str; FAMILY_COUNT] = [
    "#e6194b", "#3cb44b", "#ffe119", "#4363d8", "#f58231", "#911eb4", "#46f0f0", "#f032e6", "#bcf60c", "#fabebe",
    "#008080", "#e6beff", "#9a6324", "#800000", "#aaffc3", "#808000", "#404040",
];

#[derive(Debug, Error, PartialEq)]
pub enum RenderError {
    #[error("unknown render format {0:?} (expected svg or text)")]
    UnknownFormat(String),
    #[error("bad pianoroll text at line {line}: {reason}")]
    BadText { line: usize, reason: String },
}

/// Colour class: program block 0..=15, or 16 for drums.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Family(u8);

impl Family {
    pub const DRUMS: Family = Family(16);

    pub fn of(program: Program) -> Self {
        if program.is_drums() {
            Family::DRUMS
        } else {
            Family(program.value() / 8)
        }
    }

    pub fn index(self) -> u8 {
        self.0
    }

    pub fn color(self) -> &'static str {
        PALETTE[self.0 as usize]
    }

    fn letter(self) -> char {
        (b'a' + self.0) as char
    }

    fn from_letter(c: char) -> Option<Self> {
        let i = (c.to_ascii_lowercase() as u32).checked_sub('a' as u32)?;
        (i < FAMILY_COUNT as u32).then_some(Family(i as u8))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RollNote {
    pub pitch: u8,
    pub onset: u32,
    pub duration: u32,
    pub family: Family,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum RenderFormat {
    #[default]
    Svg,
    Text,
}

impl FromStr for RenderFormat {
    type Err = RenderError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "svg" => Ok(RenderFormat::Svg),
            "text" | "txt" => Ok(RenderFormat::Text),
            other => Err(RenderError::UnknownFormat(other.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RenderOptions {
    pub format: RenderFormat,
    pub strip_drums: bool,
    pub strip_octaves: bool,
}

/// Notes of consecutive measures on one timeline.
pub fn notes_from_measures(measures: &[Measure]) -> Vec<RollNote> {
    let mut out = Vec::new();
    for (i, m) in measures.iter().enumerate() {
        let base = i as u32 * STEPS_PER_MEASURE;
        for track in decode_measure(m) {
            let family = Family::of(track.program);
            out.extend(track.notes.iter().map(|n| RollNote {
                pitch: n.pitch,
                onset: base + n.onset,
                duration: n.duration,
                family,
            }));
        }
    }
    out.sort();
    out
}

/// Notes of a parsed file snapped to the step grid.
pub fn notes_from_score(score: &ParsedScore) -> Vec<RollNote> {
    let tpq = score.ticks_per_quarter.max(1) as u64;
    let step = |ticks: u64| ((2 * ticks * STEPS_PER_QUARTER as u64 + tpq) / (2 * tpq)) as u32;
    let mut out: Vec<RollNote> = score
        .notes
        .iter()
        .map(|n| {
            let onset = step(n.onset_ticks);
            RollNote {
                pitch: n.pitch,
                onset,
                duration: step(n.offset_ticks()).saturating_sub(onset).max(1),
                family: Family::of(n.model_program()),
            }
        })
        .collect();
    out.sort();
    out
}

/// Timeline length rounded up to whole measures (at least one).
pub fn total_steps(notes: &[RollNote]) -> u32 {
    let end = notes.iter().map(|n| n.onset + n.duration).max().unwrap_or(0);
    end.div_ceil(STEPS_PER_MEASURE).max(1) * STEPS_PER_MEASURE
}

fn prepare(notes: &[RollNote], opts: &RenderOptions) -> Vec<RollNote> {
    let mut out: Vec<RollNote> = notes
        .iter()
        .filter(|n| !(opts.strip_drums && n.family == Family::DRUMS))
        .map(|n| RollNote {
            pitch: if opts.strip_octaves { n.pitch % 12 } else { n.pitch },
            ..*n
        })
        .collect();
    out.sort();
    out
}

fn row_count(opts: &RenderOptions) -> u8 {
    if opts.strip_octaves {
        12
    } else {
        128
    }
}

pub fn render(notes: &[RollNote], steps: u32, opts: &RenderOptions) -> Vec<u8> {
    let notes = prepare(notes, opts);
    match opts.format {
        RenderFormat::Svg => render_svg(&notes, steps, row_count(opts)),
        RenderFormat::Text => render_text(&notes, steps, row_count(opts)),
    }
    .into_bytes()
}

pub fn render_measures(measures: &[Measure], opts: &RenderOptions) -> Vec<u8> {
    let steps = measures.len().max(1) as u32 * STEPS_PER_MEASURE;
    render(&notes_from_measures(measures), steps, opts)
}

const CELL_W: u32 = 4;
const CELL_H: u32 = 6;

fn render_svg(notes: &[RollNote], steps: u32, rows: u8) -> String {
    let (w, h) = (steps * CELL_W, rows as u32 * CELL_H);
    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">"
    );
    let _ = writeln!(
        s,
        "<rect x=\"0\" y=\"0\" width=\"{w}\" height=\"{h}\" fill=\"#ffffff\"/>"
    );
    for q in (0..=steps).step_by(STEPS_PER_QUARTER as usize) {
        let stroke = if q % STEPS_PER_MEASURE == 0 {
            "#999999"
        } else {
            "#e0e0e0"
        };
        let x = q * CELL_W;
        let _ = writeln!(
            s,
            "<line x1=\"{x}\" y1=\"0\" x2=\"{x}\" y2=\"{h}\" stroke=\"{stroke}\"/>"
        );
    }
    for n in notes {
        let y = (rows - 1 - n.pitch) as u32 * CELL_H;
        let _ = writeln!(
            s,
            "<rect x=\"{}\" y=\"{y}\" width=\"{}\" height=\"{CELL_H}\" fill=\"{}\" data-pitch=\"{}\" data-family=\"{}\"/>",
            n.onset * CELL_W,
            n.duration * CELL_W,
            n.family.color(),
            n.pitch,
            n.family.0
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Greedy lane assignment so overlapping notes on one row stay distinct.
fn lanes(notes: &[RollNote]) -> Vec<Vec<RollNote>> {
    let mut lanes: Vec<Vec<RollNote>> = Vec::new();
    for &n in notes {
        match lanes
            .iter_mut()
            .find(|l| l.last().is_none_or(|p| p.onset + p.duration <= n.onset))
        {
            Some(l) => l.push(n),
            None => lanes.push(vec![n]),
        }
    }
    lanes
}

/// One line per pitch lane, highest pitch first. A note starts with its
/// family letter in upper case and continues in lower case; `.` is silence.
fn render_text(notes: &[RollNote], steps: u32, rows: u8) -> String {
    let mut s = format!("pianoroll steps={steps} rows={rows}\n");
    for pitch in (0..rows).rev() {
        let mut on_row: Vec<RollNote> = notes.iter().copied().filter(|n| n.pitch == pitch).collect();
        on_row.sort_by_key(|n| (n.onset, n.duration, n.family));
        let mut lanes = lanes(&on_row);
        if lanes.is_empty() {
            lanes.push(Vec::new());
        }
        for lane in lanes {
            let mut cells = vec!['.'; steps as usize];
            for n in lane {
                let c = n.family.letter();
                for t in n.onset..(n.onset + n.duration).min(steps) {
                    cells[t as usize] = if t == n.onset { c.to_ascii_uppercase() } else { c };
                }
            }
            let _ = writeln!(s, "{pitch:>3} |{}|", cells.into_iter().collect::<String>());
        }
    }
    s
}

/// Recover the notes from [`render`] text output.
pub fn parse_text(text: &str) -> Result<Vec<RollNote>, RenderError> {
    let bad = |line: usize, reason: &str| RenderError::BadText {
        line,
        reason: reason.to_string(),
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| bad(1, "empty input"))?;
    let steps: usize = header
        .split_whitespace()
        .find_map(|f| f.strip_prefix("steps="))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| bad(1, "missing steps"))?;
    let mut out = Vec::new();
    for (i, line) in lines {
        let (label, rest) = line.split_once('|').ok_or_else(|| bad(i + 1, "missing bar"))?;
        let pitch: u8 = label.trim().parse().map_err(|_| bad(i + 1, "bad pitch"))?;
        let cells: Vec<char> = rest
            .strip_suffix('|')
            .ok_or_else(|| bad(i + 1, "missing end bar"))?
            .chars()
            .collect();
        if cells.len() != steps {
            return Err(bad(i + 1, "wrong row width"));
        }
        let mut current: Option<RollNote> = None;
        for (t, &c) in cells.iter().enumerate() {
            let continues = current.is_some_and(|n| c.is_ascii_lowercase() && Family::from_letter(c) == Some(n.family));
            if continues {
                if let Some(n) = current.as_mut() {
                    n.duration += 1;
                }
                continue;
            }
            out.extend(current.take());
            match c {
                '.' => {}
                c if c.is_ascii_uppercase() => {
                    let family = Family::from_letter(c).ok_or_else(|| bad(i + 1, "unknown family"))?;
                    current = Some(RollNote {
                        pitch,
                        onset: t as u32,
                        duration: 1,
                        family,
                    });
                }
                _ => return Err(bad(i + 1, "continuation without a note start")),
            }
        }
        out.extend(current);
    }
    out.sort();
    Ok(out)
}
