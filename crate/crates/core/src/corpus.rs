//! Dataset construction: MIDI files to deduplicated 4/4 measures.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chords::{ChordClass, ChordError, ChordInferenceParams, HarmonyModel};
use crate::codec::{
    decode_track, encode_measure, encode_track, quantize_velocity, CodecError, InstrumentTrack, Measure, MeasureRecord,
    Program, QuantizedNote, Track, MAX_TRACKS, MAX_TRACK_EVENTS, STEPS_PER_MEASURE, STEPS_PER_QUARTER,
};
use crate::smf::{parse_smf, segment_by_meter, MeterSegment, SmfError};

pub const MAX_TRANSPOSE: i32 = 3;
pub const MIN_TRACKS: usize = 2;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {reason}")]
    BadRecord { path: PathBuf, line: usize, reason: String },
    #[error(transparent)]
    Smf(#[from] SmfError),
    #[error(transparent)]
    Chord(#[from] ChordError),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Instruments are keyed by source track and program, so two instruments
/// sharing a program stay separate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TrackKey {
    pub source_track: usize,
    pub program: Program,
}

/// One quantized 96-step window of a segment before track filtering.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RawMeasure {
    pub notes: Vec<(TrackKey, QuantizedNote)>,
}

impl RawMeasure {
    /// Group notes into instrument tracks (keyed order), resolving any
    /// same-pitch overlap created by quantization.
    pub fn instrument_tracks(&self) -> Vec<InstrumentTrack> {
        let mut groups: BTreeMap<TrackKey, Vec<QuantizedNote>> = BTreeMap::new();
        for (key, note) in &self.notes {
            groups.entry(*key).or_default().push(*note);
        }
        groups
            .into_iter()
            .map(|(key, notes)| InstrumentTrack::new(key.program, resolve_overlaps(notes)))
            .collect()
    }
}

/// Make notes non-overlapping per pitch: a note is cut at the next onset of
/// the same pitch; simultaneous onsets keep the longest note.
pub fn resolve_overlaps(mut notes: Vec<QuantizedNote>) -> Vec<QuantizedNote> {
    notes.sort_by_key(|n| (n.pitch, n.onset, std::cmp::Reverse(n.duration)));
    let mut out: Vec<QuantizedNote> = Vec::with_capacity(notes.len());
    for n in notes {
        if let Some(prev) = out.last_mut() {
            if prev.pitch == n.pitch {
                if prev.onset == n.onset {
                    continue;
                }
                if prev.offset() > n.onset {
                    prev.duration = n.onset - prev.onset;
                }
            }
        }
        out.push(n);
    }
    out.sort();
    out
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SplitMeasures {
    pub measures: Vec<RawMeasure>,
    /// Bars whose length is not four quarter notes (whole non-4/4
    /// segments and trailing partial bars).
    pub discarded_bad_length: usize,
}

fn round_steps(ticks: u64, ticks_per_quarter: u64) -> u64 {
    // nearest step, ties up
    (2 * ticks * STEPS_PER_QUARTER as u64 + ticks_per_quarter) / (2 * ticks_per_quarter)
}

/// Cut a segment into consecutive four-quarter measures on the 24-step grid.
pub fn split_measures(segment: &MeterSegment) -> SplitMeasures {
    let tpq = segment.ticks_per_quarter as u64;
    let span = segment.end_tick.saturating_sub(segment.start_tick);
    if span == 0 || tpq == 0 {
        return SplitMeasures::default();
    }
    let sig = segment.time_signature;
    if !sig.is_four_quarters() {
        let (num, den) = sig.quarters_per_bar();
        let bar_num = num as u64 * tpq;
        let bars = if bar_num == 0 {
            1
        } else {
            (span * den as u64).div_ceil(bar_num)
        };
        return SplitMeasures {
            measures: Vec::new(),
            discarded_bad_length: bars as usize,
        };
    }
    let bar_ticks = 4 * tpq;
    let full = (span / bar_ticks) as usize;
    let partial = usize::from(!span.is_multiple_of(bar_ticks));
    let mut measures = vec![RawMeasure::default(); full];
    let limit = full as u64 * STEPS_PER_MEASURE as u64;
    let bar = STEPS_PER_MEASURE as u64;
    for n in &segment.notes {
        let Ok(bin) = quantize_velocity(n.velocity as u32) else {
            continue;
        };
        let on = round_steps(n.onset_ticks - segment.start_tick, tpq);
        let off = round_steps(n.offset_ticks() - segment.start_tick, tpq).max(on + 1);
        let key = TrackKey {
            source_track: n.source_track,
            program: n.model_program(),
        };
        let mut start = on;
        let end = off.min(limit);
        while start < end {
            let m = start / bar;
            let stop = end.min((m + 1) * bar);
            measures[m as usize].notes.push((
                key,
                QuantizedNote::new(n.pitch, (start - m * bar) as u32, (stop - start) as u32, bin),
            ));
            start = stop;
        }
    }
    SplitMeasures {
        measures,
        discarded_bad_length: partial,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscardReason {
    TrackCount,
    EventCount,
}

/// Group, filter and encode a raw measure. Chords are left as no-chord.
pub fn extract_tracks(raw: &RawMeasure) -> Result<Measure, DiscardReason> {
    let tracks = raw.instrument_tracks();
    if tracks.len() < MIN_TRACKS || tracks.len() > MAX_TRACKS {
        return Err(DiscardReason::TrackCount);
    }
    let measure =
        encode_measure(&tracks, [ChordClass::NO_CHORD; 2]).expect("quantized, overlap-free notes always encode");
    if measure.tracks.iter().any(|t| t.len() > MAX_TRACK_EVENTS) {
        return Err(DiscardReason::EventCount);
    }
    Ok(measure)
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub files_seen: usize,
    pub files_failed: usize,
    pub measures_seen: usize,
    pub discarded_bad_length: usize,
    pub discarded_long_segment: usize,
    pub discarded_track_count: usize,
    pub discarded_event_count: usize,
    pub duplicates_removed: usize,
    pub retained: usize,
}

impl DatasetStats {
    /// retained = seen - every discard - duplicates.
    pub fn is_conserved(&self) -> bool {
        let removed = self.discarded_bad_length
            + self.discarded_long_segment
            + self.discarded_track_count
            + self.discarded_event_count
            + self.duplicates_removed;
        self.measures_seen >= removed && self.retained == self.measures_seen - removed
    }
}

/// Keeps the first occurrence of each measure's note content.
#[derive(Default)]
pub struct Deduper {
    seen: HashSet<Vec<u16>>,
}

impl Deduper {
    pub fn new() -> Self {
        Self::default()
    }

    /// True if the measure has not been seen before.
    pub fn insert(&mut self, measure: &Measure) -> bool {
        self.seen.insert(measure.content_key())
    }
}

pub fn dedupe(measures: impl IntoIterator<Item = Measure>) -> (Vec<Measure>, usize) {
    let mut deduper = Deduper::new();
    let mut removed = 0;
    let kept = measures
        .into_iter()
        .filter(|m| {
            let fresh = deduper.insert(m);
            removed += usize::from(!fresh);
            fresh
        })
        .collect();
    (kept, removed)
}

fn transpose_track(track: &Track, semitones: i32) -> Track {
    let Some(program) = track.program() else {
        return track.clone();
    };
    if program.is_drums() || semitones == 0 {
        return track.clone();
    }
    let notes: Vec<QuantizedNote> = decode_track(track)
        .notes
        .into_iter()
        .filter_map(|n| {
            let p = n.pitch as i32 + semitones;
            (0..=127).contains(&p).then_some(QuantizedNote { pitch: p as u8, ..n })
        })
        .collect();
    encode_track(&notes, program).expect("transposed notes stay encodable")
}

/// Shift every pitched note and chord root; notes leaving 0..=127 are dropped.
pub fn transpose_augment(measure: &Measure, semitones: i32) -> Measure {
    Measure {
        tracks: measure.tracks.iter().map(|t| transpose_track(t, semitones)).collect(),
        chords: measure.chords.map(|c| c.transpose(semitones)),
    }
}

/// Uniform draw from -3..=3 semitones.
pub fn sample_transposition<R: Rng + ?Sized>(rng: &mut R) -> i32 {
    rng.gen_range(-MAX_TRANSPOSE..=MAX_TRANSPOSE)
}

pub fn augment<R: Rng + ?Sized>(measure: &Measure, rng: &mut R) -> Measure {
    transpose_augment(measure, sample_transposition(rng))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub chords: ChordInferenceParams,
    /// Shuffle the retained measures with the run seed before writing.
    pub shuffle: bool,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            chords: ChordInferenceParams::default(),
            shuffle: true,
        }
    }
}

/// Parse one file and return its retained (not yet deduplicated) measures.
pub fn process_file(bytes: &[u8], model: &HarmonyModel, stats: &mut DatasetStats) -> Result<Vec<Measure>, SmfError> {
    let score = parse_smf(bytes)?;
    let mut out = Vec::new();
    for segment in segment_by_meter(&score) {
        if segment.notes.is_empty() {
            continue;
        }
        let split = split_measures(&segment);
        stats.measures_seen += split.measures.len() + split.discarded_bad_length;
        stats.discarded_bad_length += split.discarded_bad_length;
        let tracks: Vec<Vec<InstrumentTrack>> = split.measures.iter().map(|m| m.instrument_tracks()).collect();
        let inference = match model.infer_chords(&tracks) {
            Ok(i) => i,
            Err(e) => {
                log::info!("skipping segment at tick {}: {e}", segment.start_tick);
                stats.discarded_long_segment += split.measures.len();
                continue;
            }
        };
        for (raw, chords) in split.measures.iter().zip(inference.chords) {
            match extract_tracks(raw) {
                Ok(mut m) => {
                    m.chords = chords;
                    out.push(m);
                }
                Err(DiscardReason::TrackCount) => stats.discarded_track_count += 1,
                Err(DiscardReason::EventCount) => stats.discarded_event_count += 1,
            }
        }
    }
    Ok(out)
}

/// Every measure of a file that survives the length, track-count and
/// event-count filters, in file order, with chords left unlabelled.
pub fn measures_from_smf(bytes: &[u8]) -> Result<Vec<Measure>, SmfError> {
    let score = parse_smf(bytes)?;
    let mut out = Vec::new();
    for segment in segment_by_meter(&score) {
        for raw in split_measures(&segment).measures {
            if let Ok(m) = extract_tracks(&raw) {
                out.push(m);
            }
        }
    }
    Ok(out)
}

/// `.mid`/`.midi` files directly inside `dir`, sorted by name.
pub fn list_midi_files(dir: &Path) -> Result<Vec<PathBuf>, CorpusError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| e.eq_ignore_ascii_case("mid") || e.eq_ignore_ascii_case("midi"))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Build a dataset in memory from a directory of MIDI files.
pub fn collect_dataset(
    input: &Path,
    config: &CorpusConfig,
    seed: u64,
) -> Result<(Vec<Measure>, DatasetStats), CorpusError> {
    let model = HarmonyModel::new(config.chords.clone())?;
    let mut stats = DatasetStats::default();
    let mut deduper = Deduper::new();
    let mut kept = Vec::new();
    for path in list_midi_files(input)? {
        stats.files_seen += 1;
        let measures = match fs::read(&path)
            .map_err(io_err(&path))
            .and_then(|b| process_file(&b, &model, &mut stats).map_err(CorpusError::from))
        {
            Ok(m) => m,
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                stats.files_failed += 1;
                continue;
            }
        };
        for m in measures {
            if deduper.insert(&m) {
                kept.push(m);
            } else {
                stats.duplicates_removed += 1;
            }
        }
    }
    if config.shuffle {
        kept.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    stats.retained = kept.len();
    debug_assert!(stats.is_conserved());
    Ok((kept, stats))
}

/// Build the JSON-lines dataset at `output` and return its statistics.
pub fn build_dataset(
    input: &Path,
    output: &Path,
    config: &CorpusConfig,
    seed: u64,
) -> Result<DatasetStats, CorpusError> {
    let (measures, stats) = collect_dataset(input, config, seed)?;
    write_dataset(output, &measures)?;
    Ok(stats)
}

pub fn write_dataset(path: &Path, measures: &[Measure]) -> Result<(), CorpusError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for m in measures {
        let line = serde_json::to_string(&m.to_record()).expect("records serialize");
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_dataset(path: &Path) -> Result<Vec<Measure>, CorpusError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| CorpusError::BadRecord {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        let record: MeasureRecord = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        let measure = Measure::from_record(&record).map_err(|e| bad(e.to_string()))?;
        measure.validate().map_err(|e| bad(e.to_string()))?;
        out.push(measure);
    }
    Ok(out)
}
