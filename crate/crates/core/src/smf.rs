//! Standard MIDI File reading, writing and meter segmentation.

use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

use crate::codec::{decode_track, dequantize_velocity, Measure, Program, STEPS_PER_MEASURE, STEPS_PER_QUARTER};

pub const DRUM_CHANNEL: u8 = 9;
pub const DEFAULT_TEMPO_BPM: f64 = 120.0;
pub const DEFAULT_TIME_SIGNATURE: TimeSignature = TimeSignature {
    numerator: 4,
    denominator: 4,
};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SmfError {
    #[error("bad header at byte {offset}: {reason}")]
    BadHeader { offset: usize, reason: String },
    #[error("unsupported SMF format {0}")]
    UnsupportedFormat(u16),
    #[error("SMPTE time division is not supported")]
    SmpteDivision,
    #[error("{chunk} truncated at byte {offset}")]
    Truncated { chunk: String, offset: usize },
    #[error("{chunk}: malformed event at byte {offset}: {reason}")]
    BadEvent {
        chunk: String,
        offset: usize,
        reason: String,
    },
    #[error("invalid measure: {0}")]
    InvalidMeasure(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TimeSignature {
    pub numerator: u8,
    pub denominator: u8,
}

impl TimeSignature {
    /// Bar length in quarter notes, as a fraction (numerator, denominator).
    pub fn quarters_per_bar(&self) -> (u32, u32) {
        (self.numerator as u32 * 4, self.denominator as u32)
    }

    pub fn is_four_quarters(&self) -> bool {
        let (n, d) = self.quarters_per_bar();
        d != 0 && n == 4 * d
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScoreNote {
    pub pitch: u8,
    pub onset_ticks: u64,
    pub duration_ticks: u64,
    pub velocity: u8,
    pub program: u8,
    pub is_drum: bool,
    pub source_track: usize,
}

impl ScoreNote {
    pub fn offset_ticks(&self) -> u64 {
        self.onset_ticks + self.duration_ticks
    }

    /// Model program: drums collapse to 128.
    pub fn model_program(&self) -> Program {
        if self.is_drum {
            Program::DRUMS
        } else {
            Program::instrument(self.program)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MetaChange {
    Tempo(f64),
    TimeSignature(TimeSignature),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetaEvent {
    pub tick: u64,
    pub change: MetaChange,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParsedScore {
    pub format: u16,
    pub ticks_per_quarter: u16,
    pub notes: Vec<ScoreNote>,
    /// Tempo and time-signature events sorted by tick.
    pub meta: Vec<MetaEvent>,
    /// Last tick of the longest track.
    pub end_tick: u64,
    pub warnings: usize,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    chunk: String,
}

impl<'a> Reader<'a> {
    fn truncated(&self) -> SmfError {
        SmfError::Truncated {
            chunk: self.chunk.clone(),
            offset: self.pos,
        }
    }

    fn u8(&mut self) -> Result<u8, SmfError> {
        let b = *self.bytes.get(self.pos).ok_or_else(|| self.truncated())?;
        self.pos += 1;
        Ok(b)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], SmfError> {
        let end = self.pos.checked_add(n).ok_or_else(|| self.truncated())?;
        let s = self.bytes.get(self.pos..end).ok_or_else(|| self.truncated())?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, SmfError> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn vlq(&mut self) -> Result<u32, SmfError> {
        let start = self.pos;
        let mut value = 0u32;
        for _ in 0..4 {
            let b = self.u8()?;
            value = (value << 7) | (b & 0x7f) as u32;
            if b & 0x80 == 0 {
                return Ok(value);
            }
        }
        Err(SmfError::BadEvent {
            chunk: self.chunk.clone(),
            offset: start,
            reason: "variable-length quantity longer than 4 bytes".into(),
        })
    }

    fn data_byte(&mut self) -> Result<u8, SmfError> {
        let at = self.pos;
        let b = self.u8()?;
        if b & 0x80 != 0 {
            return Err(SmfError::BadEvent {
                chunk: self.chunk.clone(),
                offset: at,
                reason: format!("status byte {b:#04x} where a data byte was expected"),
            });
        }
        Ok(b)
    }
}

#[derive(Default)]
struct TrackState {
    notes: Vec<ScoreNote>,
    meta: Vec<MetaEvent>,
    end_tick: u64,
    warnings: usize,
}

fn parse_track(bytes: &[u8], base: usize, index: usize) -> Result<TrackState, SmfError> {
    let mut r = Reader {
        bytes,
        pos: 0,
        chunk: format!("track chunk {index}"),
    };
    let mut out = TrackState::default();
    let mut tick = 0u64;
    let mut running: Option<u8> = None;
    let mut programs = [0u8; 16];
    let mut open: HashMap<(u8, u8), (u64, u8, u8)> = HashMap::new();

    let close = |out: &mut TrackState, pitch: u8, channel: u8, start: (u64, u8, u8), end: u64| {
        let (onset, velocity, program) = start;
        if end > onset {
            out.notes.push(ScoreNote {
                pitch,
                onset_ticks: onset,
                duration_ticks: end - onset,
                velocity,
                program,
                is_drum: channel == DRUM_CHANNEL,
                source_track: index,
            });
        }
    };

    while r.pos < bytes.len() {
        tick += r.vlq().map_err(|e| shift_offset(e, base))? as u64;
        let at = r.pos;
        let first = r.u8().map_err(|e| shift_offset(e, base))?;
        let status = if first & 0x80 != 0 {
            first
        } else {
            r.pos -= 1;
            running.ok_or_else(|| SmfError::BadEvent {
                chunk: r.chunk.clone(),
                offset: base + at,
                reason: "data byte without running status".into(),
            })?
        };
        match status {
            0xff => {
                running = None;
                let kind = r.u8().map_err(|e| shift_offset(e, base))?;
                let len = r.vlq().map_err(|e| shift_offset(e, base))? as usize;
                let data = r.take(len).map_err(|e| shift_offset(e, base))?;
                match kind {
                    0x2f => break,
                    0x51 if len == 3 => {
                        let micros = u32::from_be_bytes([0, data[0], data[1], data[2]]);
                        if micros > 0 {
                            out.meta.push(MetaEvent {
                                tick,
                                change: MetaChange::Tempo(60_000_000.0 / micros as f64),
                            });
                        }
                    }
                    0x58 if len >= 2 => {
                        if data[1] < 8 {
                            out.meta.push(MetaEvent {
                                tick,
                                change: MetaChange::TimeSignature(TimeSignature {
                                    numerator: data[0],
                                    denominator: 1 << data[1],
                                }),
                            });
                        } else {
                            out.warnings += 1;
                        }
                    }
                    _ => {}
                }
            }
            0xf0 | 0xf7 => {
                running = None;
                let len = r.vlq().map_err(|e| shift_offset(e, base))? as usize;
                r.take(len).map_err(|e| shift_offset(e, base))?;
            }
            0xf1..=0xfe => {
                return Err(SmfError::BadEvent {
                    chunk: r.chunk.clone(),
                    offset: base + at,
                    reason: format!("system message {status:#04x} inside a track"),
                });
            }
            _ => {
                running = Some(status);
                let channel = status & 0x0f;
                let a = r.data_byte().map_err(|e| shift_offset(e, base))?;
                match status & 0xf0 {
                    0xc0 => programs[channel as usize] = a,
                    0xd0 => {}
                    kind => {
                        let b = r.data_byte().map_err(|e| shift_offset(e, base))?;
                        let note_on = kind == 0x90 && b > 0;
                        let note_off = kind == 0x80 || (kind == 0x90 && b == 0);
                        if note_on || note_off {
                            if let Some(start) = open.remove(&(channel, a)) {
                                close(&mut out, a, channel, start, tick);
                            }
                        }
                        if note_on {
                            open.insert((channel, a), (tick, b, programs[channel as usize]));
                        }
                    }
                }
            }
        }
    }
    out.end_tick = tick;
    let mut dangling: Vec<_> = open.into_iter().collect();
    dangling.sort_by_key(|&((c, p), (t, _, _))| (t, c, p));
    for ((channel, pitch), start) in dangling {
        log::warn!("track {index}: note {pitch} on channel {channel} never released");
        out.warnings += 1;
        close(&mut out, pitch, channel, start, tick);
    }
    Ok(out)
}

fn shift_offset(e: SmfError, base: usize) -> SmfError {
    match e {
        SmfError::Truncated { chunk, offset } => SmfError::Truncated {
            chunk,
            offset: offset + base,
        },
        SmfError::BadEvent { chunk, offset, reason } => SmfError::BadEvent {
            chunk,
            offset: offset + base,
            reason,
        },
        e => e,
    }
}

/// Parse a format 0 or 1 Standard MIDI File.
pub fn parse_smf(bytes: &[u8]) -> Result<ParsedScore, SmfError> {
    let mut r = Reader {
        bytes,
        pos: 0,
        chunk: "header chunk".into(),
    };
    let bad_header = |offset: usize, reason: &str| SmfError::BadHeader {
        offset,
        reason: reason.to_string(),
    };
    if r.take(4).ok() != Some(b"MThd".as_slice()) {
        return Err(bad_header(0, "missing MThd signature"));
    }
    let len = r.u32()? as usize;
    if len < 6 {
        return Err(bad_header(4, "header length below 6"));
    }
    let header = r.take(len)?;
    let format = u16::from_be_bytes([header[0], header[1]]);
    let ntracks = u16::from_be_bytes([header[2], header[3]]);
    let division = u16::from_be_bytes([header[4], header[5]]);
    if format > 1 {
        return Err(SmfError::UnsupportedFormat(format));
    }
    if division & 0x8000 != 0 {
        return Err(SmfError::SmpteDivision);
    }
    if division == 0 {
        return Err(bad_header(12, "zero ticks per quarter"));
    }

    let mut score = ParsedScore {
        format,
        ticks_per_quarter: division,
        notes: Vec::new(),
        meta: Vec::new(),
        end_tick: 0,
        warnings: 0,
    };
    let mut track_index = 0;
    while r.pos < bytes.len() {
        let chunk_start = r.pos;
        r.chunk = format!("chunk at byte {chunk_start}");
        let id = r.take(4)?;
        let len = r.u32()? as usize;
        let is_track = id == b"MTrk";
        r.chunk = if is_track {
            format!("track chunk {track_index}")
        } else {
            format!("chunk {:?}", String::from_utf8_lossy(id))
        };
        let body_start = r.pos;
        let body = r.take(len)?;
        if !is_track {
            continue;
        }
        let track = parse_track(body, body_start, track_index)?;
        score.notes.extend(track.notes);
        score.meta.extend(track.meta);
        score.end_tick = score.end_tick.max(track.end_tick);
        score.warnings += track.warnings;
        track_index += 1;
    }
    if track_index != ntracks as usize {
        log::warn!("header declares {ntracks} tracks, found {track_index}");
        score.warnings += 1;
    }
    score.meta.sort_by_key(|m| m.tick);
    score.notes.sort_by_key(|n| (n.onset_ticks, n.source_track, n.pitch));
    if let Some(last) = score.notes.iter().map(|n| n.offset_ticks()).max() {
        score.end_tick = score.end_tick.max(last);
    }
    Ok(score)
}

/// A stretch of the score with a single tempo and time signature.
#[derive(Clone, Debug, PartialEq)]
pub struct MeterSegment {
    pub notes: Vec<ScoreNote>,
    pub ticks_per_quarter: u16,
    pub time_signature: TimeSignature,
    pub tempo_bpm: f64,
    pub start_tick: u64,
    pub end_tick: u64,
}

/// Split a score wherever the tempo or time signature changes.
///
/// Notes crossing a boundary are split into one piece per segment.
pub fn segment_by_meter(score: &ParsedScore) -> Vec<MeterSegment> {
    let mut tempo = DEFAULT_TEMPO_BPM;
    let mut signature = DEFAULT_TIME_SIGNATURE;
    let mut spans: Vec<(u64, f64, TimeSignature)> = Vec::new();
    let mut i = 0;
    while i < score.meta.len() {
        let tick = score.meta[i].tick;
        while i < score.meta.len() && score.meta[i].tick == tick {
            match score.meta[i].change {
                MetaChange::Tempo(t) => tempo = t,
                MetaChange::TimeSignature(s) => signature = s,
            }
            i += 1;
        }
        if tick == 0 {
            continue;
        }
        if spans.is_empty() {
            spans.push((0, DEFAULT_TEMPO_BPM, DEFAULT_TIME_SIGNATURE));
            // tick-0 events override the defaults
            for m in score.meta.iter().take_while(|m| m.tick == 0) {
                match m.change {
                    MetaChange::Tempo(t) => spans[0].1 = t,
                    MetaChange::TimeSignature(s) => spans[0].2 = s,
                }
            }
        }
        let last = spans.last().unwrap();
        if last.1 != tempo || last.2 != signature {
            spans.push((tick, tempo, signature));
        }
    }
    if spans.is_empty() {
        spans.push((0, tempo, signature));
    }
    let end = score.end_tick;
    let mut segments = Vec::new();
    for (k, &(start, tempo_bpm, time_signature)) in spans.iter().enumerate() {
        let stop = spans.get(k + 1).map_or(end, |s| s.0).max(start);
        if stop == start && k + 1 < spans.len() {
            continue;
        }
        let notes = score
            .notes
            .iter()
            .filter_map(|n| {
                let on = n.onset_ticks.max(start);
                let off = n.offset_ticks().min(stop);
                (off > on).then(|| ScoreNote {
                    onset_ticks: on,
                    duration_ticks: off - on,
                    ..n.clone()
                })
            })
            .collect();
        segments.push(MeterSegment {
            notes,
            ticks_per_quarter: score.ticks_per_quarter,
            time_signature,
            tempo_bpm,
            start_tick: start,
            end_tick: stop,
        });
    }
    segments
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum EventKind {
    Meta = 0,
    Program = 1,
    NoteOff = 2,
    NoteOn = 3,
}

#[derive(Clone, Debug)]
struct TimedEvent {
    tick: u64,
    kind: EventKind,
    bytes: Vec<u8>,
}

/// Incremental builder for format-1 files.
#[derive(Clone, Debug)]
pub struct SmfBuilder {
    ticks_per_quarter: u16,
    tracks: Vec<Vec<TimedEvent>>,
    end_tick: u64,
}

impl SmfBuilder {
    /// Start a file whose track 0 carries tempo and meter events.
    pub fn new(ticks_per_quarter: u16) -> Self {
        SmfBuilder {
            ticks_per_quarter,
            tracks: vec![Vec::new()],
            end_tick: 0,
        }
    }

    /// Place every end-of-track event at `tick` or later.
    pub fn end_at(&mut self, tick: u64) {
        self.end_tick = self.end_tick.max(tick);
    }

    pub fn add_track(&mut self) -> usize {
        self.tracks.push(Vec::new());
        self.tracks.len() - 1
    }

    pub fn tempo(&mut self, tick: u64, bpm: f64) {
        let micros = (60_000_000.0 / bpm).round() as u32;
        let b = micros.to_be_bytes();
        self.tracks[0].push(TimedEvent {
            tick,
            kind: EventKind::Meta,
            bytes: vec![0xff, 0x51, 3, b[1], b[2], b[3]],
        });
    }

    pub fn time_signature(&mut self, tick: u64, numerator: u8, denominator: u8) {
        let power = denominator.trailing_zeros() as u8;
        self.tracks[0].push(TimedEvent {
            tick,
            kind: EventKind::Meta,
            bytes: vec![0xff, 0x58, 4, numerator, power, 24, 8],
        });
    }

    pub fn program(&mut self, track: usize, tick: u64, channel: u8, program: u8) {
        self.tracks[track].push(TimedEvent {
            tick,
            kind: EventKind::Program,
            bytes: vec![0xc0 | channel, program & 0x7f],
        });
    }

    pub fn note(&mut self, track: usize, channel: u8, pitch: u8, on: u64, off: u64, velocity: u8) {
        self.tracks[track].push(TimedEvent {
            tick: on,
            kind: EventKind::NoteOn,
            bytes: vec![0x90 | channel, pitch & 0x7f, velocity.clamp(1, 127)],
        });
        self.tracks[track].push(TimedEvent {
            tick: off,
            kind: EventKind::NoteOff,
            bytes: vec![0x80 | channel, pitch & 0x7f, 0],
        });
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"MThd");
        out.extend_from_slice(&6u32.to_be_bytes());
        out.extend_from_slice(&1u16.to_be_bytes());
        out.extend_from_slice(&(self.tracks.len() as u16).to_be_bytes());
        out.extend_from_slice(&self.ticks_per_quarter.to_be_bytes());
        for events in &self.tracks {
            let mut sorted = events.clone();
            sorted.sort_by_key(|e| (e.tick, e.kind));
            let mut body = Vec::new();
            let mut last = 0;
            for e in &sorted {
                write_vlq(&mut body, (e.tick - last) as u32);
                body.extend_from_slice(&e.bytes);
                last = e.tick;
            }
            write_vlq(&mut body, self.end_tick.saturating_sub(last) as u32);
            body.extend_from_slice(&[0xff, 0x2f, 0]);
            out.extend_from_slice(b"MTrk");
            out.extend_from_slice(&(body.len() as u32).to_be_bytes());
            out.extend_from_slice(&body);
        }
        out
    }
}

fn write_vlq(out: &mut Vec<u8>, mut value: u32) {
    let mut buf = [0u8; 5];
    let mut n = 0;
    loop {
        buf[n] = (value & 0x7f) as u8;
        n += 1;
        value >>= 7;
        if value == 0 {
            break;
        }
    }
    for i in (0..n).rev() {
        out.push(buf[i] | if i > 0 { 0x80 } else { 0 });
    }
}

/// Convert a step count on the 24-per-quarter grid to ticks.
pub fn steps_to_ticks(steps: u64, ticks_per_quarter: u16) -> u64 {
    (steps * ticks_per_quarter as u64 + STEPS_PER_QUARTER as u64 / 2) / STEPS_PER_QUARTER as u64
}

/// Render consecutive measures as a format-1 file.
///
/// Each track slot gets one SMF track and channel (drums share channel 10);
/// a slot whose program changes between measures gets a program change at
/// the measure boundary.
pub fn write_smf(measures: &[Measure], tempo_bpm: f64, ticks_per_quarter: u16) -> Result<Vec<u8>, SmfError> {
    let mut builder = SmfBuilder::new(ticks_per_quarter);
    builder.tempo(0, tempo_bpm);
    builder.time_signature(0, 4, 4);
    builder.end_at(steps_to_ticks(
        measures.len() as u64 * STEPS_PER_MEASURE as u64,
        ticks_per_quarter,
    ));

    // (slot, drums) -> (smf track, channel, current program)
    let mut lanes: BTreeMap<(usize, bool), (usize, u8, Option<Program>)> = BTreeMap::new();
    let mut next_channel = 0u8;
    for (m, measure) in measures.iter().enumerate() {
        measure
            .validate()
            .map_err(|e| SmfError::InvalidMeasure(e.to_string()))?;
        let base = m as u64 * STEPS_PER_MEASURE as u64;
        let tick = steps_to_ticks(base, ticks_per_quarter);
        for (slot, track) in measure.tracks.iter().enumerate() {
            if track.is_missing() {
                continue;
            }
            let decoded = decode_track(track);
            let Some(program) = decoded.program else { continue };
            let lane = lanes.entry((slot, program.is_drums())).or_insert_with(|| {
                let channel = if program.is_drums() {
                    DRUM_CHANNEL
                } else {
                    let c = next_channel;
                    next_channel += 1;
                    if c >= DRUM_CHANNEL {
                        c + 1
                    } else {
                        c
                    }
                };
                (builder.add_track(), channel, None)
            });
            let (index, channel) = (lane.0, lane.1);
            if !program.is_drums() && lane.2 != Some(program) {
                builder.program(index, tick, channel, program.value());
                lane.2 = Some(program);
            }
            for n in &decoded.notes {
                let on = steps_to_ticks(base + n.onset as u64, ticks_per_quarter);
                let off = steps_to_ticks(base + n.offset() as u64, ticks_per_quarter);
                let velocity = dequantize_velocity(n.velocity_bin).expect("valid bin");
                builder.note(index, channel, n.pitch, on, off, velocity);
            }
        }
    }
    Ok(builder.to_bytes())
}
