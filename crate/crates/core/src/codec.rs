//! Event vocabulary and the track/measure token codec.
//!
//! A track is a sequence of [`Event`]s drawn from a fixed 490-symbol
//! vocabulary. Time is measured in quantized steps, 24 per quarter note,
//! and every measure spans exactly [`STEPS_PER_MEASURE`] steps.
//!
//! Token index layout:
//!
//! | range     | event                    |
//! |-----------|--------------------------|
//! | 0..=127   | `NoteOn(pitch)`          |
//! | 128..=255 | `NoteOff(pitch)`         |
//! | 256..=263 | `VelocityChange(bin)`    |
//! | 264..=359 | `TimeShift(1..=96)`      |
//! | 360..=488 | `ProgramSelect(0..=128)` |
//! | 489       | `EndTrack`               |

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chords::ChordClass;

pub const VOCAB_SIZE: usize = 490;
pub const STEPS_PER_QUARTER: u32 = 24;
pub const STEPS_PER_MEASURE: u32 = 96;
pub const HALF_MEASURE: u32 = STEPS_PER_MEASURE / 2;
pub const MAX_TRACKS: usize = 8;
pub const MAX_TRACK_EVENTS: usize = 64;
pub const VELOCITY_BINS: u8 = 8;
/// Velocity bin assumed when a note-on arrives before any velocity change.
pub const DEFAULT_VELOCITY_BIN: u8 = 4;

const NOTE_OFF_BASE: u16 = 128;
const VELOCITY_BASE: u16 = 256;
const TIME_SHIFT_BASE: u16 = 264;
const PROGRAM_BASE: u16 = 360;
const END_TRACK: u16 = 489;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("token index {0} outside vocabulary of {VOCAB_SIZE}")]
    BadIndex(u32),
    #[error("velocity {0} outside 1..=127")]
    VelocityOutOfRange(u32),
    #[error("velocity bin {0} outside 0..=7")]
    BadVelocityBin(u8),
    #[error("pitch {0} outside 0..=127")]
    BadPitch(u8),
    #[error("program {0} outside 0..=128")]
    BadProgram(u8),
    #[error("note at pitch {pitch} (onset {onset}, duration {duration}) does not fit in the measure")]
    NoteOutOfMeasure { pitch: u8, onset: u32, duration: u32 },
    #[error("overlapping notes at pitch {pitch} around step {step}")]
    OverlappingNotes { pitch: u8, step: u32 },
    #[error("measure has {0} tracks, at most {MAX_TRACKS} allowed")]
    TooManyTracks(usize),
    #[error("invalid track: {0}")]
    InvalidTrack(String),
    #[error("invalid measure: {0}")]
    InvalidMeasure(String),
}

/// MIDI program number, with 128 standing for drums.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Program(u8);

impl Program {
    pub const DRUMS: Program = Program(128);

    pub fn new(program: u8) -> Result<Self, CodecError> {
        if program > 128 {
            return Err(CodecError::BadProgram(program));
        }
        Ok(Program(program))
    }

    pub fn instrument(program: u8) -> Self {
        assert!(program < 128, "instrument program must be < 128");
        Program(program)
    }

    pub fn value(self) -> u8 {
        self.0
    }

    pub fn is_drums(self) -> bool {
        self.0 == 128
    }
}

impl fmt::Display for Program {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_drums() {
            write!(f, "drums")
        } else {
            write!(f, "program {}", self.0)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Event {
    NoteOn(u8),
    NoteOff(u8),
    VelocityChange(u8),
    /// Advance time by 1..=96 steps.
    TimeShift(u8),
    ProgramSelect(Program),
    EndTrack,
}

impl Event {
    pub fn index(self) -> u16 {
        match self {
            Event::NoteOn(p) => p as u16,
            Event::NoteOff(p) => NOTE_OFF_BASE + p as u16,
            Event::VelocityChange(b) => VELOCITY_BASE + b as u16,
            Event::TimeShift(s) => TIME_SHIFT_BASE + s as u16 - 1,
            Event::ProgramSelect(p) => PROGRAM_BASE + p.0 as u16,
            Event::EndTrack => END_TRACK,
        }
    }

    pub fn from_index(index: u16) -> Result<Self, CodecError> {
        Ok(match index {
            0..=127 => Event::NoteOn(index as u8),
            128..=255 => Event::NoteOff((index - NOTE_OFF_BASE) as u8),
            256..=263 => Event::VelocityChange((index - VELOCITY_BASE) as u8),
            264..=359 => Event::TimeShift((index - TIME_SHIFT_BASE + 1) as u8),
            360..=488 => Event::ProgramSelect(Program((index - PROGRAM_BASE) as u8)),
            489 => Event::EndTrack,
            _ => return Err(CodecError::BadIndex(index as u32)),
        })
    }
}

/// Map a MIDI velocity (1..=127) onto one of eight uniform bins.
pub fn quantize_velocity(velocity: u32) -> Result<u8, CodecError> {
    if !(1..=127).contains(&velocity) {
        return Err(CodecError::VelocityOutOfRange(velocity));
    }
    Ok((velocity / 16).min(7) as u8)
}

/// Center velocity of a bin.
pub fn dequantize_velocity(bin: u8) -> Result<u8, CodecError> {
    if bin >= VELOCITY_BINS {
        return Err(CodecError::BadVelocityBin(bin));
    }
    Ok(16 * bin + 8)
}

/// A note on the 96-step measure grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct QuantizedNote {
    pub onset: u32,
    pub pitch: u8,
    pub duration: u32,
    pub velocity_bin: u8,
}

impl QuantizedNote {
    pub fn new(pitch: u8, onset: u32, duration: u32, velocity_bin: u8) -> Self {
        QuantizedNote {
            onset,
            pitch,
            duration,
            velocity_bin,
        }
    }

    pub fn offset(&self) -> u32 {
        self.onset + self.duration
    }
}

/// One instrument's notes within a measure.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstrumentTrack {
    pub program: Program,
    pub notes: Vec<QuantizedNote>,
}

impl InstrumentTrack {
    pub fn new(program: Program, mut notes: Vec<QuantizedNote>) -> Self {
        notes.sort();
        InstrumentTrack { program, notes }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Track {
    tokens: Vec<Event>,
}

impl Track {
    pub fn missing() -> Self {
        Track {
            tokens: vec![Event::EndTrack],
        }
    }

    /// Wrap a raw event sequence without checking it.
    pub fn from_events(tokens: Vec<Event>) -> Self {
        Track { tokens }
    }

    pub fn from_indices(indices: &[u16]) -> Result<Self, CodecError> {
        let tokens = indices
            .iter()
            .map(|&i| Event::from_index(i))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Track { tokens })
    }

    pub fn events(&self) -> &[Event] {
        &self.tokens
    }

    pub fn indices(&self) -> Vec<u16> {
        self.tokens.iter().map(|e| e.index()).collect()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn is_missing(&self) -> bool {
        self.tokens == [Event::EndTrack]
    }

    pub fn program(&self) -> Option<Program> {
        match self.tokens.first() {
            Some(Event::ProgramSelect(p)) => Some(*p),
            _ => None,
        }
    }

    /// Total of all time shifts in the track.
    pub fn total_time(&self) -> u32 {
        self.tokens
            .iter()
            .map(|e| match e {
                Event::TimeShift(s) => *s as u32,
                _ => 0,
            })
            .sum()
    }

    /// Check every structural invariant of a stored track.
    pub fn validate(&self) -> Result<(), CodecError> {
        let bad = |msg: &str| Err(CodecError::InvalidTrack(msg.to_string()));
        if self.is_missing() {
            return Ok(());
        }
        if self.tokens.len() > MAX_TRACK_EVENTS {
            return bad(&format!("{} events exceeds {}", self.tokens.len(), MAX_TRACK_EVENTS));
        }
        if self.program().is_none() {
            return bad("first event is not a program select");
        }
        if self.tokens.last() != Some(&Event::EndTrack) {
            return bad("last event is not end-track");
        }
        let body = &self.tokens[1..self.tokens.len() - 1];
        let mut open = [0u32; 128];
        for e in body {
            match *e {
                Event::ProgramSelect(_) => return bad("program select after the first event"),
                Event::EndTrack => return bad("end-track before the last event"),
                Event::NoteOn(p) => open[p as usize] += 1,
                Event::NoteOff(p) => {
                    if open[p as usize] == 0 {
                        return bad(&format!("note-off {p} without note-on"));
                    }
                    open[p as usize] -= 1;
                }
                _ => {}
            }
        }
        if open.iter().any(|&n| n > 0) {
            return bad("note-on without matching note-off");
        }
        if self.total_time() != STEPS_PER_MEASURE {
            return bad(&format!("time shifts sum to {}", self.total_time()));
        }
        Ok(())
    }
}

/// Up to eight tracks plus a chord annotation per half measure.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Measure {
    pub tracks: Vec<Track>,
    pub chords: [ChordClass; 2],
}

impl Measure {
    pub fn empty() -> Self {
        Measure {
            tracks: vec![Track::missing(); MAX_TRACKS],
            chords: [ChordClass::NO_CHORD; 2],
        }
    }

    pub fn track_count(&self) -> usize {
        self.tracks.iter().filter(|t| !t.is_missing()).count()
    }

    pub fn validate(&self) -> Result<(), CodecError> {
        if self.tracks.len() != MAX_TRACKS {
            return Err(CodecError::InvalidMeasure(format!("{} track slots", self.tracks.len())));
        }
        let mut last_program = None;
        let mut seen_missing = false;
        for (slot, track) in self.tracks.iter().enumerate() {
            track.validate()?;
            if track.is_missing() {
                seen_missing = true;
                continue;
            }
            if seen_missing {
                return Err(CodecError::InvalidMeasure(format!(
                    "track in slot {slot} follows a missing slot"
                )));
            }
            let program = track.program();
            if program < last_program {
                return Err(CodecError::InvalidMeasure(format!(
                    "slot {slot} breaks program ordering"
                )));
            }
            last_program = program;
        }
        Ok(())
    }

    /// Token serialization of the note content (chords excluded).
    pub fn content_key(&self) -> Vec<u16> {
        let mut key = Vec::new();
        for t in &self.tracks {
            key.extend(t.indices());
        }
        key
    }

    pub fn to_record(&self) -> MeasureRecord {
        MeasureRecord {
            tracks: self.tracks.iter().map(|t| t.indices()).collect(),
            chords: [self.chords[0].index(), self.chords[1].index()],
        }
    }

    pub fn from_record(record: &MeasureRecord) -> Result<Self, CodecError> {
        let tracks = record
            .tracks
            .iter()
            .map(|t| Track::from_indices(t))
            .collect::<Result<Vec<_>, _>>()?;
        let chord = |i: u8| ChordClass::new(i).ok_or_else(|| CodecError::InvalidMeasure(format!("chord index {i}")));
        Ok(Measure {
            tracks,
            chords: [chord(record.chords[0])?, chord(record.chords[1])?],
        })
    }
}

/// JSON-lines dataset row.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasureRecord {
    pub tracks: Vec<Vec<u16>>,
    pub chords: [u8; 2],
}

fn push_time_shift(tokens: &mut Vec<Event>, mut steps: u32) {
    while steps > 0 {
        let s = steps.min(STEPS_PER_MEASURE);
        tokens.push(Event::TimeShift(s as u8));
        steps -= s;
    }
}

fn check_notes(notes: &[QuantizedNote]) -> Result<(), CodecError> {
    for n in notes {
        if n.pitch > 127 {
            return Err(CodecError::BadPitch(n.pitch));
        }
        if n.velocity_bin >= VELOCITY_BINS {
            return Err(CodecError::BadVelocityBin(n.velocity_bin));
        }
        if n.duration == 0 || n.offset() > STEPS_PER_MEASURE {
            return Err(CodecError::NoteOutOfMeasure {
                pitch: n.pitch,
                onset: n.onset,
                duration: n.duration,
            });
        }
    }
    let mut by_pitch: BTreeMap<u8, Vec<(u32, u32)>> = BTreeMap::new();
    for n in notes {
        by_pitch.entry(n.pitch).or_default().push((n.onset, n.offset()));
    }
    for (pitch, mut spans) in by_pitch {
        spans.sort();
        for w in spans.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(CodecError::OverlappingNotes { pitch, step: w[1].0 });
            }
        }
    }
    Ok(())
}

/// Encode one instrument's notes as a canonical token sequence.
///
/// At each step with activity the order is: note-offs (ascending pitch),
/// then note-ons (ascending pitch), each note-on preceded by a velocity
/// change when its bin differs from the running velocity state.
pub fn encode_track(notes: &[QuantizedNote], program: Program) -> Result<Track, CodecError> {
    check_notes(notes)?;
    let mut offs: BTreeMap<u32, Vec<u8>> = BTreeMap::new();
    let mut ons: BTreeMap<u32, Vec<(u8, u8)>> = BTreeMap::new();
    for n in notes {
        offs.entry(n.offset()).or_default().push(n.pitch);
        ons.entry(n.onset).or_default().push((n.pitch, n.velocity_bin));
    }
    let mut steps: Vec<u32> = offs.keys().chain(ons.keys()).copied().collect();
    steps.sort_unstable();
    steps.dedup();

    let mut tokens = vec![Event::ProgramSelect(program)];
    let mut cursor = 0;
    let mut velocity: Option<u8> = None;
    for step in steps {
        push_time_shift(&mut tokens, step - cursor);
        cursor = step;
        if let Some(pitches) = offs.get_mut(&step) {
            pitches.sort_unstable();
            tokens.extend(pitches.iter().map(|&p| Event::NoteOff(p)));
        }
        if let Some(starts) = ons.get_mut(&step) {
            starts.sort_unstable();
            for &(pitch, bin) in starts.iter() {
                if velocity != Some(bin) {
                    tokens.push(Event::VelocityChange(bin));
                    velocity = Some(bin);
                }
                tokens.push(Event::NoteOn(pitch));
            }
        }
    }
    push_time_shift(&mut tokens, STEPS_PER_MEASURE - cursor);
    tokens.push(Event::EndTrack);
    Ok(Track { tokens })
}

/// Result of replaying a token sequence.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DecodedTrack {
    pub program: Option<Program>,
    pub notes: Vec<QuantizedNote>,
    /// Number of malformed events that were skipped or repaired.
    pub warnings: usize,
}

/// Replay a token sequence into notes.
pub fn decode_track(track: &Track) -> DecodedTrack {
    let mut out = DecodedTrack::default();
    let mut time = 0u32;
    let mut overflow = false;
    let mut velocity: Option<u8> = None;
    let mut open: Vec<VecDeque<(u32, u8)>> = vec![VecDeque::new(); 128];

    let close = |out: &mut DecodedTrack, pitch: u8, onset: u32, bin: u8, end: u32| {
        if end > onset {
            out.notes.push(QuantizedNote::new(pitch, onset, end - onset, bin));
        } else {
            log::debug!("dropping zero-length note at pitch {pitch}, step {onset}");
            out.warnings += 1;
        }
    };

    for (i, &event) in track.events().iter().enumerate() {
        if event == Event::EndTrack {
            break;
        }
        if overflow {
            log::debug!("ignoring {event:?} past the end of the measure");
            out.warnings += 1;
            continue;
        }
        match event {
            Event::ProgramSelect(p) => {
                if i == 0 || out.program.is_none() {
                    out.program = Some(p);
                } else {
                    log::debug!("ignoring repeated program select {p}");
                    out.warnings += 1;
                }
            }
            Event::TimeShift(s) => {
                time += s as u32;
                if time > STEPS_PER_MEASURE {
                    time = STEPS_PER_MEASURE;
                    overflow = true;
                }
            }
            Event::VelocityChange(b) => velocity = Some(b),
            Event::NoteOn(p) => {
                let bin = velocity.unwrap_or_else(|| {
                    log::debug!("note-on {p} before any velocity change");
                    out.warnings += 1;
                    velocity = Some(DEFAULT_VELOCITY_BIN);
                    DEFAULT_VELOCITY_BIN
                });
                if let Some((onset, prev_bin)) = open[p as usize].pop_front() {
                    log::debug!("note-on {p} while already sounding; closing the earlier note");
                    out.warnings += 1;
                    close(&mut out, p, onset, prev_bin, time);
                }
                open[p as usize].push_back((time, bin));
            }
            Event::NoteOff(p) => match open[p as usize].pop_front() {
                Some((onset, bin)) => close(&mut out, p, onset, bin, time),
                None => {
                    log::debug!("note-off {p} with no open note");
                    out.warnings += 1;
                }
            },
            Event::EndTrack => unreachable!(),
        }
    }
    for (pitch, queue) in open.iter_mut().enumerate() {
        while let Some((onset, bin)) = queue.pop_front() {
            close(&mut out, pitch as u8, onset, bin, STEPS_PER_MEASURE);
        }
    }
    if out.program.is_none() && !out.notes.is_empty() {
        log::debug!("track with notes has no program select; assuming program 0");
        out.warnings += 1;
        out.program = Some(Program(0));
    }
    out.notes.sort();
    out
}

/// Sort tracks (program ascending, drums last, stable) and pad to eight slots.
pub fn encode_measure(tracks: &[InstrumentTrack], chords: [ChordClass; 2]) -> Result<Measure, CodecError> {
    if tracks.len() > MAX_TRACKS {
        return Err(CodecError::TooManyTracks(tracks.len()));
    }
    let mut order: Vec<&InstrumentTrack> = tracks.iter().collect();
    order.sort_by_key(|t| t.program);
    let mut encoded = order
        .into_iter()
        .map(|t| encode_track(&t.notes, t.program))
        .collect::<Result<Vec<_>, _>>()?;
    encoded.resize(MAX_TRACKS, Track::missing());
    Ok(Measure {
        tracks: encoded,
        chords,
    })
}

/// Decode every non-missing slot, in slot order.
pub fn decode_measure(measure: &Measure) -> Vec<InstrumentTrack> {
    measure
        .tracks
        .iter()
        .filter(|t| !t.is_missing())
        .filter_map(|t| {
            let d = decode_track(t);
            d.program.map(|program| InstrumentTrack {
                program,
                notes: d.notes,
            })
        })
        .collect()
}

/// Turn a possibly malformed token sequence into a valid stored track.
///
/// Notes are decoded, re-encoded canonically and, if the result exceeds the
/// event cap, the latest notes are dropped until it fits.
pub fn repair_track(track: &Track) -> Track {
    let decoded = decode_track(track);
    let Some(program) = decoded.program else {
        return Track::missing();
    };
    let mut notes = decoded.notes;
    loop {
        // decode_track output is always encodable
        let t = encode_track(&notes, program).expect("decoded notes are encodable");
        if t.len() <= MAX_TRACK_EVENTS || notes.is_empty() {
            return t;
        }
        notes.pop();
    }
}

/// Repair each slot and re-sort into a valid measure.
pub fn repair_measure(tracks: &[Track], chords: [ChordClass; 2]) -> Measure {
    let mut repaired: Vec<Track> = tracks
        .iter()
        .map(repair_track)
        .filter(|t| !t.is_missing())
        .take(MAX_TRACKS)
        .collect();
    repaired.sort_by_key(|t| t.program());
    repaired.resize(MAX_TRACKS, Track::missing());
    Measure {
        tracks: repaired,
        chords,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn piano() -> Program {
        Program::instrument(0)
    }

    #[test]
    fn index_layout_boundaries() {
        assert_eq!(Event::NoteOn(0).index(), 0);
        assert_eq!(Event::NoteOff(127).index(), 255);
        assert_eq!(Event::VelocityChange(7).index(), 263);
        assert_eq!(Event::TimeShift(1).index(), 264);
        assert_eq!(Event::TimeShift(96).index(), 359);
        assert_eq!(Event::ProgramSelect(Program::DRUMS).index(), 488);
        assert_eq!(Event::EndTrack.index(), 489);
        assert!(Event::from_index(490).is_err());
    }

    #[test]
    fn index_bijection() {
        for i in 0..VOCAB_SIZE as u16 {
            assert_eq!(Event::from_index(i).unwrap().index(), i);
        }
    }

    #[test]
    fn velocity_bins() {
        assert_eq!(quantize_velocity(80).unwrap(), 5);
        assert_eq!(dequantize_velocity(5).unwrap(), 88);
        assert_eq!(quantize_velocity(127).unwrap(), 7);
        assert_eq!(quantize_velocity(1).unwrap(), 0);
        assert!(quantize_velocity(0).is_err());
        assert!(quantize_velocity(128).is_err());
        for v in 1..=127 {
            let b = quantize_velocity(v).unwrap();
            let c = dequantize_velocity(b).unwrap() as u32;
            assert_eq!(quantize_velocity(c).unwrap(), b);
        }
    }

    #[test]
    fn encode_single_note() {
        let notes = [QuantizedNote::new(60, 0, 24, 5)];
        let t = encode_track(&notes, piano()).unwrap();
        assert_eq!(
            t.events(),
            &[
                Event::ProgramSelect(piano()),
                Event::VelocityChange(5),
                Event::NoteOn(60),
                Event::TimeShift(24),
                Event::NoteOff(60),
                Event::TimeShift(72),
                Event::EndTrack,
            ]
        );
        t.validate().unwrap();
        let d = decode_track(&t);
        assert_eq!(d.program, Some(piano()));
        assert_eq!(d.notes, notes);
        assert_eq!(d.warnings, 0);
    }

    #[test]
    fn empty_track_pads_time() {
        let t = encode_track(&[], piano()).unwrap();
        assert_eq!(
            t.events(),
            &[Event::ProgramSelect(piano()), Event::TimeShift(96), Event::EndTrack]
        );
    }

    #[test]
    fn missing_track_decodes_empty() {
        let d = decode_track(&Track::missing());
        assert_eq!(d.program, None);
        assert!(d.notes.is_empty());
    }

    #[test]
    fn open_note_closed_at_measure_end() {
        let t = Track::from_events(vec![
            Event::ProgramSelect(piano()),
            Event::VelocityChange(3),
            Event::NoteOn(60),
            Event::EndTrack,
        ]);
        let d = decode_track(&t);
        assert_eq!(d.notes, vec![QuantizedNote::new(60, 0, 96, 3)]);
    }

    #[test]
    fn default_velocity_and_stray_note_off() {
        let t = Track::from_events(vec![
            Event::ProgramSelect(piano()),
            Event::NoteOff(61),
            Event::NoteOn(60),
            Event::TimeShift(10),
            Event::NoteOff(60),
            Event::EndTrack,
        ]);
        let d = decode_track(&t);
        assert_eq!(d.notes, vec![QuantizedNote::new(60, 0, 10, DEFAULT_VELOCITY_BIN)]);
        assert_eq!(d.warnings, 2);
    }

    #[test]
    fn events_past_measure_end_ignored() {
        let t = Track::from_events(vec![
            Event::ProgramSelect(piano()),
            Event::TimeShift(90),
            Event::TimeShift(10),
            Event::VelocityChange(2),
            Event::NoteOn(60),
            Event::EndTrack,
        ]);
        let d = decode_track(&t);
        assert!(d.notes.is_empty());
        assert_eq!(d.warnings, 2);
    }

    #[test]
    fn same_step_ordering_is_canonical() {
        let notes = [
            QuantizedNote::new(64, 24, 24, 2),
            QuantizedNote::new(60, 0, 24, 5),
            QuantizedNote::new(60, 24, 24, 5),
        ];
        let t = encode_track(&notes, piano()).unwrap();
        assert_eq!(
            &t.events()[..9],
            &[
                Event::ProgramSelect(piano()),
                Event::VelocityChange(5),
                Event::NoteOn(60),
                Event::TimeShift(24),
                Event::NoteOff(60),
                Event::NoteOn(60),
                Event::VelocityChange(2),
                Event::NoteOn(64),
                Event::TimeShift(24),
            ]
        );
        let mut sorted = notes.to_vec();
        sorted.sort();
        assert_eq!(decode_track(&t).notes, sorted);
    }

    #[test]
    fn rejects_bad_notes() {
        assert!(matches!(
            encode_track(&[QuantizedNote::new(60, 90, 10, 1)], piano()),
            Err(CodecError::NoteOutOfMeasure { .. })
        ));
        assert!(matches!(
            encode_track(
                &[QuantizedNote::new(60, 0, 10, 1), QuantizedNote::new(60, 5, 10, 1)],
                piano()
            ),
            Err(CodecError::OverlappingNotes { .. })
        ));
    }

    #[test]
    fn measure_sorting_and_padding() {
        let note = QuantizedNote::new(40, 0, 12, 4);
        let tracks = [
            InstrumentTrack::new(Program::instrument(33), vec![note]),
            InstrumentTrack::new(piano(), vec![note]),
            InstrumentTrack::new(Program::DRUMS, vec![note]),
        ];
        let m = encode_measure(&tracks, [ChordClass::NO_CHORD; 2]).unwrap();
        let programs: Vec<_> = m.tracks.iter().map(|t| t.program()).collect();
        assert_eq!(
            programs,
            vec![
                Some(piano()),
                Some(Program::instrument(33)),
                Some(Program::DRUMS),
                None,
                None,
                None,
                None,
                None
            ]
        );
        m.validate().unwrap();
        let decoded = decode_measure(&m);
        assert_eq!(decoded[0], tracks[1]);
        assert_eq!(decoded[1], tracks[0]);
        assert_eq!(decoded[2], tracks[2]);
    }

    #[test]
    fn zero_tracks_is_all_missing() {
        let m = encode_measure(&[], [ChordClass::NO_CHORD; 2]).unwrap();
        assert!(m.tracks.iter().all(|t| t.is_missing()));
        m.validate().unwrap();
    }

    #[test]
    fn too_many_tracks() {
        let t = InstrumentTrack::new(piano(), vec![]);
        let tracks = vec![t; 9];
        assert_eq!(
            encode_measure(&tracks, [ChordClass::NO_CHORD; 2]),
            Err(CodecError::TooManyTracks(9))
        );
    }

    #[test]
    fn record_round_trip() {
        let tracks = [InstrumentTrack::new(piano(), vec![QuantizedNote::new(60, 0, 24, 5)])];
        let chords = [ChordClass::major(0), ChordClass::minor(9)];
        let m = encode_measure(&tracks, chords).unwrap();
        let json = serde_json::to_string(&m.to_record()).unwrap();
        let back: MeasureRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(Measure::from_record(&back).unwrap(), m);
    }

    #[test]
    fn repair_sorts_and_closes() {
        let bad = vec![
            Track::from_events(vec![Event::ProgramSelect(Program::DRUMS), Event::EndTrack]),
            Track::from_events(vec![
                Event::ProgramSelect(piano()),
                Event::VelocityChange(2),
                Event::NoteOn(50),
                Event::TimeShift(30),
                Event::EndTrack,
            ]),
        ];
        let m = repair_measure(&bad, [ChordClass::NO_CHORD; 2]);
        m.validate().unwrap();
        assert_eq!(m.tracks[0].program(), Some(piano()));
        assert_eq!(m.tracks[1].program(), Some(Program::DRUMS));
    }
}
