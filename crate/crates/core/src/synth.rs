//! Seeded generators for synthetic measures and small MIDI corpora.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::chords::ChordClass;
use crate::codec::{
    encode_measure, encode_track, InstrumentTrack, Measure, Program, QuantizedNote, MAX_TRACKS, MAX_TRACK_EVENTS,
    STEPS_PER_MEASURE, VELOCITY_BINS,
};
use crate::smf::{steps_to_ticks, write_smf, SmfBuilder};

/// Random notes for one instrument that encode within the event cap.
pub fn random_instrument<R: Rng + ?Sized>(rng: &mut R, program: Program) -> InstrumentTrack {
    let (lo, hi) = if program.is_drums() { (35, 81) } else { (21, 108) };
    let count = rng.gen_range(1..=10);
    let mut notes: Vec<QuantizedNote> = Vec::new();
    for _ in 0..count {
        let pitch = rng.gen_range(lo..=hi);
        let onset = rng.gen_range(0..STEPS_PER_MEASURE);
        let duration = rng.gen_range(1..=STEPS_PER_MEASURE - onset);
        let note = QuantizedNote::new(pitch, onset, duration, rng.gen_range(0..VELOCITY_BINS));
        let clash = notes
            .iter()
            .any(|n| n.pitch == pitch && n.onset < note.offset() && note.onset < n.offset());
        if !clash {
            notes.push(note);
        }
    }
    notes.sort();
    while encode_track(&notes, program).map_or(true, |t| t.len() > MAX_TRACK_EVENTS) {
        notes.pop();
    }
    InstrumentTrack::new(program, notes)
}

/// A random valid measure with `min_tracks..=8` tracks and random chords.
pub fn random_measure<R: Rng + ?Sized>(rng: &mut R, min_tracks: usize) -> Measure {
    let n = rng.gen_range(min_tracks.max(1)..=MAX_TRACKS);
    let tracks: Vec<InstrumentTrack> = (0..n)
        .map(|_| {
            let program = if rng.gen_bool(0.15) {
                Program::DRUMS
            } else {
                Program::instrument(rng.gen_range(0..128))
            };
            random_instrument(rng, program)
        })
        .collect();
    let chord = |rng: &mut R| ChordClass::new(rng.gen_range(0..49)).expect("in range");
    let chords = [chord(rng), chord(rng)];
    encode_measure(&tracks, chords).expect("generated notes encode")
}

/// Block-chord piano measure over a major triad rooted at `root`, labelled
/// with that chord in both halves.
pub fn triad_measure(root: u8) -> Measure {
    let chord = ChordClass::major(root);
    let base = 48 + root;
    let mut notes = Vec::new();
    for (beat, dur) in [(0, 24), (24, 24), (48, 48)] {
        for iv in [0, 4, 7] {
            notes.push(QuantizedNote::new(base + iv, beat, dur, 4));
        }
    }
    let tracks = [InstrumentTrack::new(Program::instrument(0), notes)];
    encode_measure(&tracks, [chord, chord]).expect("triads encode")
}

/// The twelve major-triad measures, roots C through B.
pub fn triad_corpus() -> Vec<Measure> {
    (0..12).map(triad_measure).collect()
}

const PROGRESSION: [(u8, bool); 4] = [(0, true), (7, true), (9, false), (5, true)];

fn triad(root: u8, major: bool) -> [u8; 3] {
    [root, root + if major { 4 } else { 3 }, root + 7]
}

/// Band arrangement over a pop progression: piano, bass, optional strings
/// and drums. Consecutive measures follow the progression.
pub fn song_measures<R: Rng + ?Sized>(
    rng: &mut R,
    key: u8,
    measures: usize,
    strings: bool,
    drums: bool,
) -> Vec<Measure> {
    let piano_pattern: Vec<(u32, u32)> = match rng.gen_range(0..3) {
        0 => vec![(0, 24), (24, 24), (48, 24), (72, 24)],
        1 => vec![(0, 36), (36, 12), (48, 48)],
        _ => vec![(0, 48), (48, 48)],
    };
    let bass_pattern: Vec<(u32, u32)> = match rng.gen_range(0..2) {
        0 => vec![(0, 48), (48, 48)],
        _ => vec![(0, 24), (24, 24), (48, 24), (72, 24)],
    };
    let vel = rng.gen_range(3..7);
    (0..measures)
        .map(|i| {
            let (degree, major) = PROGRESSION[i % PROGRESSION.len()];
            let root = (key + degree) % 12;
            let pcs = triad(root, major);
            let mut tracks = Vec::new();
            let piano = piano_pattern
                .iter()
                .flat_map(|&(on, dur)| pcs.iter().map(move |&pc| QuantizedNote::new(60 + pc, on, dur, vel)))
                .collect();
            tracks.push(InstrumentTrack::new(Program::instrument(0), piano));
            let bass = bass_pattern
                .iter()
                .map(|&(on, dur)| QuantizedNote::new(36 + root, on, dur, vel))
                .collect();
            tracks.push(InstrumentTrack::new(Program::instrument(33), bass));
            if strings {
                let pad = pcs
                    .iter()
                    .map(|&pc| QuantizedNote::new(72 + pc, 0, 96, vel - 1))
                    .collect();
                tracks.push(InstrumentTrack::new(Program::instrument(48), pad));
            }
            if drums {
                let mut kit = vec![
                    QuantizedNote::new(36, 0, 6, vel),
                    QuantizedNote::new(36, 48, 6, vel),
                    QuantizedNote::new(38, 24, 6, vel),
                    QuantizedNote::new(38, 72, 6, vel),
                ];
                kit.extend((0..8).map(|k| QuantizedNote::new(42, 12 * k, 6, vel - 1)));
                tracks.push(InstrumentTrack::new(Program::DRUMS, kit));
            }
            let chord = if major {
                ChordClass::major(root)
            } else {
                ChordClass::minor(root)
            };
            encode_measure(&tracks, [chord, chord]).expect("arrangement encodes")
        })
        .collect()
}

/// Eight distinct multi-track measures used as a memorisation target.
pub fn overfit_measures() -> Vec<Measure> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut out = Vec::new();
    for (i, key) in [0u8, 5].into_iter().enumerate() {
        out.extend(song_measures(&mut rng, key, 4, i == 1, i == 0));
    }
    out
}

/// Seed of the bundled `data/mini` corpus.
pub const MINI_CORPUS_SEED: u64 = 2019;

/// Ten small MIDI files exercising every ingest path: regular songs, an
/// exact duplicate, a 3/4 piece, a solo instrument, a tempo change and a
/// track too dense for the event cap.
pub fn mini_corpus(seed: u64) -> Vec<(String, Vec<u8>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut files = Vec::new();
    let mut keys: Vec<u8> = (0..12).collect();
    keys.shuffle(&mut rng);
    for (i, &key) in keys.iter().take(6).enumerate() {
        let len = rng.gen_range(4..=8);
        let measures = song_measures(&mut rng, key, len, i % 2 == 1, i % 3 != 2);
        let bytes = write_smf(&measures, 100.0 + 10.0 * i as f64, 480).expect("few channels");
        files.push((format!("song_{i:02}.mid"), bytes));
    }
    let dup = files[0].1.clone();
    files.push(("song_00_copy.mid".into(), dup));
    files.push(("waltz.mid".into(), waltz()));
    files.push(("solo.mid".into(), solo_then_duo()));
    files.push(("dense.mid".into(), dense_with_tempo_change()));
    files
}

fn waltz() -> Vec<u8> {
    let tpq = 480;
    let mut b = SmfBuilder::new(tpq);
    b.tempo(0, 150.0);
    b.time_signature(0, 3, 4);
    let t = b.add_track();
    b.program(t, 0, 0, 0);
    let u = b.add_track();
    b.program(u, 0, 1, 32);
    for bar in 0..6u64 {
        let start = bar * 3 * tpq as u64;
        b.note(u, 1, 43, start, start + tpq as u64, 80);
        for beat in 1..3 {
            let on = start + beat * tpq as u64;
            for p in [67, 71, 74] {
                b.note(t, 0, p, on, on + tpq as u64, 70);
            }
        }
    }
    b.to_bytes()
}

fn solo_then_duo() -> Vec<u8> {
    let tpq = 96;
    let bar = steps_to_ticks(STEPS_PER_MEASURE as u64, tpq);
    let mut b = SmfBuilder::new(tpq);
    b.tempo(0, 120.0);
    b.time_signature(0, 4, 4);
    let piano = b.add_track();
    b.program(piano, 0, 0, 0);
    let flute = b.add_track();
    b.program(flute, 0, 1, 73);
    for m in 0..4u64 {
        for q in 0..4u64 {
            let on = m * bar + q * tpq as u64;
            b.note(piano, 0, 60 + 2 * q as u8, on, on + tpq as u64, 90);
            if m >= 2 {
                b.note(flute, 1, 79 - q as u8, on, on + tpq as u64 / 2, 64);
            }
        }
    }
    b.to_bytes()
}

fn dense_with_tempo_change() -> Vec<u8> {
    let tpq = 240;
    let bar = steps_to_ticks(STEPS_PER_MEASURE as u64, tpq);
    let mut b = SmfBuilder::new(tpq);
    b.tempo(0, 90.0);
    b.time_signature(0, 4, 4);
    b.tempo(2 * bar, 132.0);
    let keys = b.add_track();
    b.program(keys, 0, 0, 4);
    let perc = b.add_track();
    for m in 0..4u64 {
        for q in 0..4u64 {
            let on = m * bar + q * tpq as u64;
            b.note(keys, 0, 64 + q as u8, on, on + tpq as u64, 72);
        }
        // 32nd-note rolls: too many events for one track in the first bar
        let steps = if m == 0 { 48 } else { 8 };
        for k in 0..steps {
            let on = m * bar + k * bar / steps;
            b.note(perc, 9, 42 + (k % 3) as u8 * 2, on, on + bar / steps / 2, 60);
        }
    }
    b.to_bytes()
}
