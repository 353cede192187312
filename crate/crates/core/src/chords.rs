//! Key and chord inference with a heuristic hidden Markov model.
//!
//! Each half measure is summarized by a unit-normalized, duration-weighted
//! pitch-class vector. The hidden state is a (key, chord) pair over 12 major
//! keys and 97 chord classes. The most likely state path is found with the
//! Viterbi algorithm in the log domain, and chords are then projected onto
//! the 49 triad classes used for model conditioning.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{InstrumentTrack, HALF_MEASURE, STEPS_PER_MEASURE};

pub const NUM_KEYS: usize = 12;
pub const NUM_CHORDS: usize = 97;
pub const NUM_STATES: usize = NUM_KEYS * NUM_CHORDS;
pub const NUM_CHORD_CLASSES: usize = 49;
pub const FRAMES_PER_MEASURE: usize = 2;

const PITCH_NAMES: [&str; 12] = ["C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B"];
const MAJOR_SCALE: [u8; 7] = [0, 2, 4, 5, 7, 9, 11];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChordError {
    #[error("segment has {measures} measures, limit is {limit}")]
    SegmentTooLong { measures: usize, limit: usize },
    #[error("unrecognized chord name {0:?}")]
    BadChordName(String),
    #[error("invalid inference parameters: {0}")]
    BadParams(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ChordQuality {
    Major,
    Minor,
    Augmented,
    Diminished,
    Dominant7,
    Major7,
    Minor7,
    HalfDiminished,
}

impl ChordQuality {
    pub const ALL: [ChordQuality; 8] = [
        ChordQuality::Major,
        ChordQuality::Minor,
        ChordQuality::Augmented,
        ChordQuality::Diminished,
        ChordQuality::Dominant7,
        ChordQuality::Major7,
        ChordQuality::Minor7,
        ChordQuality::HalfDiminished,
    ];

    pub fn intervals(self) -> &'static [u8] {
        match self {
            ChordQuality::Major => &[0, 4, 7],
            ChordQuality::Minor => &[0, 3, 7],
            ChordQuality::Augmented => &[0, 4, 8],
            ChordQuality::Diminished => &[0, 3, 6],
            ChordQuality::Dominant7 => &[0, 4, 7, 10],
            ChordQuality::Major7 => &[0, 4, 7, 11],
            ChordQuality::Minor7 => &[0, 3, 7, 10],
            ChordQuality::HalfDiminished => &[0, 3, 6, 10],
        }
    }

    /// The triad contained in this quality.
    pub fn triad(self) -> ChordQuality {
        match self {
            ChordQuality::Dominant7 | ChordQuality::Major7 => ChordQuality::Major,
            ChordQuality::Minor7 => ChordQuality::Minor,
            ChordQuality::HalfDiminished => ChordQuality::Diminished,
            q => q,
        }
    }

    fn suffix(self) -> &'static str {
        match self {
            ChordQuality::Major => "",
            ChordQuality::Minor => "m",
            ChordQuality::Augmented => "+",
            ChordQuality::Diminished => "o",
            ChordQuality::Dominant7 => "7",
            ChordQuality::Major7 => "maj7",
            ChordQuality::Minor7 => "m7",
            ChordQuality::HalfDiminished => "m7b5",
        }
    }
}

/// One of the 97 inference chord classes. Index 0 is no-chord, then twelve
/// roots for each quality in [`ChordQuality::ALL`] order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Chord(u8);

impl Chord {
    pub const NO_CHORD: Chord = Chord(0);

    pub fn new(root: u8, quality: ChordQuality) -> Self {
        Chord(1 + 12 * quality as u8 + root % 12)
    }

    pub fn from_index(index: usize) -> Option<Self> {
        (index < NUM_CHORDS).then_some(Chord(index as u8))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn root(self) -> Option<u8> {
        (self.0 > 0).then(|| (self.0 - 1) % 12)
    }

    pub fn quality(self) -> Option<ChordQuality> {
        (self.0 > 0).then(|| ChordQuality::ALL[((self.0 - 1) / 12) as usize])
    }

    /// Pitch classes of the chord tones (empty for no-chord).
    pub fn pitch_classes(self) -> Vec<u8> {
        match (self.root(), self.quality()) {
            (Some(r), Some(q)) => q.intervals().iter().map(|i| (r + i) % 12).collect(),
            _ => Vec::new(),
        }
    }

    pub fn transpose(self, semitones: i32) -> Self {
        match (self.root(), self.quality()) {
            (Some(r), Some(q)) => Chord::new((r as i32 + semitones).rem_euclid(12) as u8, q),
            _ => self,
        }
    }

    /// Collapse seventh chords onto their contained triad.
    pub fn project_to_triad(self) -> ChordClass {
        match (self.root(), self.quality()) {
            (Some(r), Some(q)) => ChordClass::from_parts(r, q.triad()),
            _ => ChordClass::NO_CHORD,
        }
    }
}

impl fmt::Display for Chord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.root(), self.quality()) {
            (Some(r), Some(q)) => write!(f, "{}{}", PITCH_NAMES[r as usize], q.suffix()),
            _ => write!(f, "N.C."),
        }
    }
}

/// Conditioning chord vocabulary: no-chord plus four triad qualities on
/// twelve roots.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ChordClass(u8);

impl ChordClass {
    pub const NO_CHORD: ChordClass = ChordClass(0);

    pub fn new(index: u8) -> Option<Self> {
        ((index as usize) < NUM_CHORD_CLASSES).then_some(ChordClass(index))
    }

    fn from_parts(root: u8, quality: ChordQuality) -> Self {
        debug_assert!((quality as u8) < 4);
        ChordClass(1 + 12 * quality as u8 + root % 12)
    }

    pub fn major(root: u8) -> Self {
        Self::from_parts(root, ChordQuality::Major)
    }

    pub fn minor(root: u8) -> Self {
        Self::from_parts(root, ChordQuality::Minor)
    }

    pub fn augmented(root: u8) -> Self {
        Self::from_parts(root, ChordQuality::Augmented)
    }

    pub fn diminished(root: u8) -> Self {
        Self::from_parts(root, ChordQuality::Diminished)
    }

    pub fn index(self) -> u8 {
        self.0
    }

    pub fn root(self) -> Option<u8> {
        self.as_chord().root()
    }

    pub fn quality(self) -> Option<ChordQuality> {
        self.as_chord().quality()
    }

    /// The same chord in the 97-class inference vocabulary.
    pub fn as_chord(self) -> Chord {
        Chord(self.0)
    }

    pub fn pitch_classes(self) -> Vec<u8> {
        self.as_chord().pitch_classes()
    }

    pub fn transpose(self, semitones: i32) -> Self {
        ChordClass(self.as_chord().transpose(semitones).0)
    }
}

impl fmt::Display for ChordClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.as_chord().fmt(f)
    }
}

impl FromStr for ChordClass {
    type Err = ChordError;

    /// Parse names like `C`, `F#m`, `Bb+`, `Eo` or `N.C.`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ChordError::BadChordName(s.to_string());
        let s = s.trim();
        if s.eq_ignore_ascii_case("N.C.") || s.eq_ignore_ascii_case("NC") {
            return Ok(ChordClass::NO_CHORD);
        }
        let mut chars = s.chars();
        let letter = chars.next().ok_or_else(bad)?;
        let mut root: i32 = match letter.to_ascii_uppercase() {
            'C' => 0,
            'D' => 2,
            'E' => 4,
            'F' => 5,
            'G' => 7,
            'A' => 9,
            'B' => 11,
            _ => return Err(bad()),
        };
        let mut rest = chars.as_str();
        if let Some(r) = rest.strip_prefix('#') {
            root += 1;
            rest = r;
        } else if let Some(r) = rest.strip_prefix('b') {
            root -= 1;
            rest = r;
        }
        let quality = match rest {
            "" => ChordQuality::Major,
            "m" => ChordQuality::Minor,
            "+" => ChordQuality::Augmented,
            "o" => ChordQuality::Diminished,
            _ => return Err(bad()),
        };
        Ok(ChordClass::from_parts(root.rem_euclid(12) as u8, quality))
    }
}

/// Joint (key, chord) label of one frame. Keys are major scales named by
/// their tonic pitch class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct HarmonyState {
    pub key: u8,
    pub chord: Chord,
}

impl HarmonyState {
    pub fn new(key: u8, chord: Chord) -> Self {
        HarmonyState { key: key % 12, chord }
    }

    pub fn index(self) -> usize {
        self.key as usize * NUM_CHORDS + self.chord.index()
    }

    pub fn from_index(index: usize) -> Self {
        HarmonyState {
            key: (index / NUM_CHORDS) as u8,
            chord: Chord((index % NUM_CHORDS) as u8),
        }
    }

    pub fn all() -> impl Iterator<Item = HarmonyState> {
        (0..NUM_STATES).map(HarmonyState::from_index)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChordInferenceParams {
    /// Probability of a chord change between frames.
    pub gamma: f64,
    /// Probability of a key change between frames.
    pub rho: f64,
    /// Probability that a chord tone lies outside the key.
    pub psi: f64,
    /// Concentration of the pitch-class observation model.
    pub kappa: f64,
    pub max_measures: usize,
    pub frames_per_measure: usize,
}

impl Default for ChordInferenceParams {
    fn default() -> Self {
        ChordInferenceParams {
            gamma: 0.5,
            rho: 0.001,
            psi: 0.01,
            kappa: 100.0,
            max_measures: 500,
            frames_per_measure: FRAMES_PER_MEASURE,
        }
    }
}

impl ChordInferenceParams {
    pub fn validate(&self) -> Result<(), ChordError> {
        let unit = |x: f64| x > 0.0 && x < 1.0;
        if !(unit(self.gamma) && unit(self.rho) && unit(self.psi)) {
            return Err(ChordError::BadParams(
                "gamma, rho and psi must lie strictly between 0 and 1".into(),
            ));
        }
        if self.kappa.is_nan() || self.kappa <= 0.0 {
            return Err(ChordError::BadParams("kappa must be positive".into()));
        }
        if self.frames_per_measure != FRAMES_PER_MEASURE {
            return Err(ChordError::BadParams(format!(
                "frames_per_measure must be {FRAMES_PER_MEASURE}"
            )));
        }
        Ok(())
    }
}

/// Unit-normalized (or all-zero) pitch-class histogram of one frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PitchClassFrame(pub [f64; 12]);

impl PitchClassFrame {
    pub const ZERO: PitchClassFrame = PitchClassFrame([0.0; 12]);

    /// Normalize raw weights; an all-zero input stays zero.
    pub fn from_weights(weights: [f64; 12]) -> Self {
        let norm = weights.iter().map(|w| w * w).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Self::ZERO;
        }
        PitchClassFrame(weights.map(|w| w / norm))
    }

    /// Equal weight on each listed pitch class.
    pub fn from_pitch_classes(classes: &[u8]) -> Self {
        let mut w = [0.0; 12];
        for &c in classes {
            w[(c % 12) as usize] = 1.0;
        }
        Self::from_weights(w)
    }

    pub fn dot(&self, other: &[f64; 12]) -> f64 {
        self.0.iter().zip(other).map(|(a, b)| a * b).sum()
    }
}

/// Duration-weighted pitch classes of each half measure, drums excluded.
pub fn pitch_class_frames(tracks: &[InstrumentTrack]) -> [PitchClassFrame; 2] {
    let mut weights = [[0.0f64; 12]; 2];
    for track in tracks.iter().filter(|t| !t.program.is_drums()) {
        for n in &track.notes {
            let pc = (n.pitch % 12) as usize;
            for (half, w) in weights.iter_mut().enumerate() {
                let lo = half as u32 * HALF_MEASURE;
                let hi = lo + HALF_MEASURE;
                let overlap = n.offset().min(hi).saturating_sub(n.onset.max(lo));
                w[pc] += overlap as f64;
            }
        }
    }
    debug_assert_eq!(2 * HALF_MEASURE, STEPS_PER_MEASURE);
    weights.map(PitchClassFrame::from_weights)
}

/// Unit-normalized, uniformly weighted chord-tone vector. No-chord maps to
/// the uniform vector.
pub fn chord_template(chord: Chord) -> [f64; 12] {
    let classes = chord.pitch_classes();
    if classes.is_empty() {
        return [1.0 / 12f64.sqrt(); 12];
    }
    let w = 1.0 / (classes.len() as f64).sqrt();
    let mut c = [0.0; 12];
    for pc in classes {
        c[pc as usize] = w;
    }
    c
}

fn binomial(n: u64, k: u64) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Binomial probability of the number of chord tones falling outside the
/// key's major scale. No-chord has probability 1.
pub fn key_membership_prob(key: u8, chord: Chord, psi: f64) -> f64 {
    let tones = chord.pitch_classes();
    let n = tones.len() as u64;
    let outside = tones
        .iter()
        .filter(|&&pc| !MAJOR_SCALE.contains(&((pc + 12 - key % 12) % 12)))
        .count() as u64;
    binomial(n, outside) * psi.powi(outside as i32) * (1.0 - psi).powi((n - outside) as i32)
}

/// Precomputed tables of the harmony model for one parameter set.
pub struct HarmonyModel {
    params: ChordInferenceParams,
    templates: Vec<[f64; 12]>,
    /// f for key 0, indexed by chord; other keys follow by rotation.
    membership: Vec<f64>,
    /// Sum of f over chords in a key (identical for every key).
    membership_total: f64,
    /// Chord-change normalizer for key 0, indexed by the previous chord.
    change_norm: Vec<f64>,
    transitions: Vec<f64>,
}

fn rotate_to_key0(key: u8, chord: Chord) -> Chord {
    chord.transpose(-(key as i32))
}

impl HarmonyModel {
    pub fn new(params: ChordInferenceParams) -> Result<Self, ChordError> {
        params.validate()?;
        let templates = (0..NUM_CHORDS).map(|c| chord_template(Chord(c as u8))).collect();
        let membership: Vec<f64> = (0..NUM_CHORDS)
            .map(|c| key_membership_prob(0, Chord(c as u8), params.psi))
            .collect();
        let membership_total = membership.iter().sum();
        let change_norm = (0..NUM_CHORDS)
            .map(|prev| {
                (0..NUM_CHORDS)
                    .filter(|&c| c != prev)
                    .map(|c| membership[c] + membership[prev] / 48.0)
                    .sum()
            })
            .collect();
        let mut model = HarmonyModel {
            params,
            templates,
            membership,
            membership_total,
            change_norm,
            transitions: Vec::new(),
        };
        let mut transitions = vec![0.0; NUM_STATES * NUM_STATES];
        for (i, row) in transitions.chunks_mut(NUM_STATES).enumerate() {
            let prev = HarmonyState::from_index(i);
            for (j, slot) in row.iter_mut().enumerate() {
                *slot = model.transition_logprob(prev, HarmonyState::from_index(j));
            }
        }
        model.transitions = transitions;
        Ok(model)
    }

    pub fn params(&self) -> &ChordInferenceParams {
        &self.params
    }

    /// f(h): probability of the chord's tones under the key.
    pub fn membership(&self, h: HarmonyState) -> f64 {
        self.membership[rotate_to_key0(h.key, h.chord).index()]
    }

    /// Sum of f over all 97 chords of one key.
    pub fn membership_total(&self) -> f64 {
        self.membership_total
    }

    /// g(h_t, h_{t-1}) = f(h_t) + f(h_{t-1}) / 48.
    pub fn change_weight(&self, next: HarmonyState, prev: HarmonyState) -> f64 {
        self.membership(next) + self.membership(prev) / 48.0
    }

    /// Natural-log transition probability between harmony states.
    ///
    /// The chord-change branch is normalized over the other chords of the
    /// same key so that it carries exactly gamma * (1 - rho) mass.
    pub fn transition_prob(&self, prev: HarmonyState, next: HarmonyState) -> f64 {
        let p = &self.params;
        if prev == next {
            (1.0 - p.gamma) * (1.0 - p.rho)
        } else if prev.key == next.key {
            let norm = self.change_norm[rotate_to_key0(prev.key, prev.chord).index()];
            p.gamma * (1.0 - p.rho) * self.change_weight(next, prev) / norm
        } else {
            p.rho / 11.0 * self.membership(next)
        }
    }

    pub fn transition_logprob(&self, prev: HarmonyState, next: HarmonyState) -> f64 {
        self.transition_prob(prev, next).ln()
    }

    /// Uniform over keys, proportional to f over chords within a key.
    pub fn initial_logprob(&self, h: HarmonyState) -> f64 {
        (self.membership(h) / (NUM_KEYS as f64 * self.membership_total)).ln()
    }

    /// kappa * (y . c(h)), used directly as the log observation score.
    pub fn observation_logscore(&self, frame: &PitchClassFrame, h: HarmonyState) -> f64 {
        self.params.kappa * frame.dot(&self.templates[h.chord.index()])
    }

    /// Most likely path over all 1164 harmony states.
    pub fn viterbi(&self, frames: &[PitchClassFrame]) -> Vec<HarmonyState> {
        let states: Vec<HarmonyState> = HarmonyState::all().collect();
        let (path, _) = viterbi_with(
            states.len(),
            |j| self.initial_logprob(states[j]),
            |i, j| self.transitions[i * NUM_STATES + j],
            |t, j| self.observation_logscore(&frames[t], states[j]),
            frames.len(),
        );
        path.into_iter().map(|j| states[j]).collect()
    }

    /// Most likely path restricted to a subset of states, with its score.
    pub fn viterbi_restricted(&self, states: &[HarmonyState], frames: &[PitchClassFrame]) -> (Vec<HarmonyState>, f64) {
        let (path, score) = viterbi_with(
            states.len(),
            |j| self.initial_logprob(states[j]),
            |i, j| self.transitions[states[i].index() * NUM_STATES + states[j].index()],
            |t, j| self.observation_logscore(&frames[t], states[j]),
            frames.len(),
        );
        (path.into_iter().map(|j| states[j]).collect(), score)
    }

    /// Log score of a given path, accumulated in the same order as the
    /// dynamic program.
    pub fn path_score(&self, frames: &[PitchClassFrame], path: &[HarmonyState]) -> f64 {
        assert_eq!(frames.len(), path.len());
        let mut score = f64::NEG_INFINITY;
        for (t, (&h, frame)) in path.iter().zip(frames).enumerate() {
            score = if t == 0 {
                self.initial_logprob(h) + self.observation_logscore(frame, h)
            } else {
                score
                    + self.transitions[path[t - 1].index() * NUM_STATES + h.index()]
                    + self.observation_logscore(frame, h)
            };
        }
        score
    }

    /// Infer two triad-class chords per measure for one meter segment.
    pub fn infer_chords(&self, measures: &[Vec<InstrumentTrack>]) -> Result<ChordInference, ChordError> {
        if measures.len() > self.params.max_measures {
            return Err(ChordError::SegmentTooLong {
                measures: measures.len(),
                limit: self.params.max_measures,
            });
        }
        let frames: Vec<PitchClassFrame> = measures.iter().flat_map(|m| pitch_class_frames(m)).collect();
        let path = self.viterbi(&frames);
        Ok(ChordInference::from_path(&path))
    }
}

/// Per-measure chords and the key diagnostics that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct ChordInference {
    pub chords: Vec<[ChordClass; 2]>,
    pub full_chords: Vec<[Chord; 2]>,
    pub keys: Vec<[u8; 2]>,
}

impl ChordInference {
    fn from_path(path: &[HarmonyState]) -> Self {
        let mut out = ChordInference {
            chords: Vec::new(),
            full_chords: Vec::new(),
            keys: Vec::new(),
        };
        for pair in path.chunks(2) {
            let (a, b) = (pair[0], pair.get(1).copied().unwrap_or(pair[0]));
            out.chords
                .push([a.chord.project_to_triad(), b.chord.project_to_triad()]);
            out.full_chords.push([a.chord, b.chord]);
            out.keys.push([a.key, b.key]);
        }
        out
    }
}

/// Log-domain Viterbi over `n` states and `frames` steps.
///
/// Ties go to the lowest state index, both for the final state and for
/// every back-pointer.
fn viterbi_with(
    n: usize,
    initial: impl Fn(usize) -> f64,
    transition: impl Fn(usize, usize) -> f64,
    observation: impl Fn(usize, usize) -> f64,
    frames: usize,
) -> (Vec<usize>, f64) {
    if frames == 0 || n == 0 {
        return (Vec::new(), f64::NEG_INFINITY);
    }
    let mut delta: Vec<f64> = (0..n).map(|j| initial(j) + observation(0, j)).collect();
    let mut back = vec![vec![0usize; n]; frames];
    let mut next = vec![0.0; n];
    for (t, row) in back.iter_mut().enumerate().skip(1) {
        for j in 0..n {
            let mut best = f64::NEG_INFINITY;
            let mut arg = 0;
            for (i, &d) in delta.iter().enumerate() {
                let s = d + transition(i, j);
                if s > best {
                    best = s;
                    arg = i;
                }
            }
            row[j] = arg;
            next[j] = best + observation(t, j);
        }
        std::mem::swap(&mut delta, &mut next);
    }
    let mut last = 0;
    for j in 1..n {
        if delta[j] > delta[last] {
            last = j;
        }
    }
    let score = delta[last];
    let mut path = vec![last; frames];
    for t in (1..frames).rev() {
        path[t - 1] = back[t][path[t]];
    }
    (path, score)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{Program, QuantizedNote};

    fn c_major() -> Chord {
        Chord::new(0, ChordQuality::Major)
    }

    #[test]
    fn chord_names_round_trip() {
        for i in 0..NUM_CHORD_CLASSES as u8 {
            let c = ChordClass::new(i).unwrap();
            let parsed: ChordClass = c.to_string().parse().unwrap();
            assert_eq!(parsed, c);
        }
        assert_eq!("C".parse::<ChordClass>().unwrap().to_string(), "C");
        assert_eq!("Cm".parse::<ChordClass>().unwrap(), ChordClass::minor(0));
        assert_eq!("Bb".parse::<ChordClass>().unwrap(), ChordClass::major(10));
        assert_eq!("C+".parse::<ChordClass>().unwrap(), ChordClass::augmented(0));
        assert_eq!("Co".parse::<ChordClass>().unwrap(), ChordClass::diminished(0));
        assert_eq!(ChordClass::NO_CHORD.to_string(), "N.C.");
        assert!("H".parse::<ChordClass>().is_err());
        assert!("Cmaj9".parse::<ChordClass>().is_err());
    }

    #[test]
    fn projection_to_triads() {
        let c7 = Chord::new(0, ChordQuality::Dominant7);
        assert_eq!(c7.project_to_triad(), ChordClass::major(0));
        let cmaj7 = Chord::new(0, ChordQuality::Major7);
        assert_eq!(cmaj7.project_to_triad(), ChordClass::major(0));
        let dm7 = Chord::new(2, ChordQuality::Minor7);
        assert_eq!(dm7.project_to_triad(), ChordClass::minor(2));
        let half_dim = Chord::new(0, ChordQuality::HalfDiminished);
        assert_eq!(half_dim.project_to_triad(), ChordClass::diminished(0));
        assert_eq!(Chord::NO_CHORD.project_to_triad(), ChordClass::NO_CHORD);
        for i in 0..NUM_CHORD_CLASSES {
            let c = Chord::from_index(i).unwrap();
            assert_eq!(c.project_to_triad().index() as usize, i);
        }
    }

    #[test]
    fn frames_from_notes() {
        let track = |notes| InstrumentTrack::new(Program::instrument(0), notes);
        let [a, b] = pitch_class_frames(&[track(vec![QuantizedNote::new(60, 0, 24, 4)])]);
        assert_eq!(a.0[0], 1.0);
        assert_eq!(b, PitchClassFrame::ZERO);

        let notes = [60, 64, 67].iter().map(|&p| QuantizedNote::new(p, 0, 24, 4)).collect();
        let [a, _] = pitch_class_frames(&[track(notes)]);
        let w = 1.0 / 3f64.sqrt();
        for pc in 0..12 {
            let expect = if [0, 4, 7].contains(&pc) { w } else { 0.0 };
            assert!((a.0[pc] - expect).abs() < 1e-12);
        }

        // a note spanning the half boundary counts in both halves; drums ignored
        let drums = InstrumentTrack::new(Program::DRUMS, vec![QuantizedNote::new(36, 0, 96, 4)]);
        let [a, b] = pitch_class_frames(&[track(vec![QuantizedNote::new(62, 40, 20, 4)]), drums]);
        assert_eq!(a.0[2], 1.0);
        assert_eq!(b.0[2], 1.0);
        assert_eq!(a.0[0], 0.0);
    }

    #[test]
    fn templates() {
        let t = chord_template(c_major());
        let w = 1.0 / 3f64.sqrt();
        assert_eq!(t[0], w);
        assert_eq!(t[4], w);
        assert_eq!(t[7], w);
        assert_eq!(t.iter().filter(|&&x| x != 0.0).count(), 3);
        let t = chord_template(Chord::new(0, ChordQuality::Dominant7));
        assert_eq!(t[0], 0.5);
        assert_eq!(t[10], 0.5);
        let t = chord_template(Chord::NO_CHORD);
        assert!(t.iter().all(|&x| x == 1.0 / 12f64.sqrt()));
    }

    #[test]
    fn membership_spot_values() {
        assert!((key_membership_prob(0, c_major(), 0.01) - 0.970299).abs() < 1e-12);
        let d = Chord::new(2, ChordQuality::Major);
        assert!((key_membership_prob(0, d, 0.01) - 0.029403).abs() < 1e-12);
        assert!((key_membership_prob(6, c_major(), 0.01) - 1e-6).abs() < 1e-15);
        assert_eq!(key_membership_prob(3, Chord::NO_CHORD, 0.01), 1.0);
    }

    #[test]
    fn observation_scores() {
        let model = HarmonyModel::new(ChordInferenceParams::default()).unwrap();
        let h = HarmonyState::new(0, c_major());
        let triad = PitchClassFrame::from_pitch_classes(&[0, 4, 7]);
        assert!((model.observation_logscore(&triad, h) - 100.0).abs() < 1e-9);
        let single = PitchClassFrame::from_pitch_classes(&[0]);
        assert!((model.observation_logscore(&single, h) - 100.0 / 3f64.sqrt()).abs() < 1e-9);
        for s in HarmonyState::all().step_by(37) {
            assert_eq!(model.observation_logscore(&PitchClassFrame::ZERO, s), 0.0);
        }
    }

    #[test]
    fn transition_cases() {
        let model = HarmonyModel::new(ChordInferenceParams::default()).unwrap();
        let c = HarmonyState::new(0, c_major());
        assert!((model.transition_logprob(c, c) - 0.4995f64.ln()).abs() < 1e-12);
        let g_in_g = HarmonyState::new(7, Chord::new(7, ChordQuality::Major));
        let expect = (0.001 / 11.0 * 0.970299f64).ln();
        assert!((model.transition_logprob(c, g_in_g) - expect).abs() < 1e-12);
        assert!(model
            .transition_logprob(c, HarmonyState::new(0, Chord::NO_CHORD))
            .is_finite());
    }

    #[test]
    fn rows_sum_to_documented_total() {
        let model = HarmonyModel::new(ChordInferenceParams::default()).unwrap();
        let rho = 0.001;
        // no-change + chord-change branches carry 1 - rho; the key-change
        // branch carries rho times the per-key membership total
        let expect = 1.0 - rho + rho * model.membership_total();
        for i in (0..NUM_STATES).step_by(41) {
            let prev = HarmonyState::from_index(i);
            let total: f64 = HarmonyState::all().map(|next| model.transition_prob(prev, next)).sum();
            assert!((total - expect).abs() < 1e-9, "row {i}: {total}");
            assert!((total - 1.0).abs() <= 0.15);
        }
    }

    #[test]
    fn empty_and_simple_paths() {
        let model = HarmonyModel::new(ChordInferenceParams::default()).unwrap();
        assert!(model.viterbi(&[]).is_empty());
        let triad = PitchClassFrame::from_pitch_classes(&[0, 4, 7]);
        let path = model.viterbi(&[triad, triad]);
        assert_eq!(path, vec![HarmonyState::new(0, c_major()); 2]);

        let g = PitchClassFrame::from_pitch_classes(&[7, 11, 2]);
        let path = model.viterbi(&[triad, g]);
        assert_eq!(path[0], HarmonyState::new(0, c_major()));
        assert_eq!(path[1], HarmonyState::new(0, Chord::new(7, ChordQuality::Major)));

        let path = model.viterbi(&[PitchClassFrame::ZERO; 2]);
        assert!(path.iter().all(|h| h.chord == Chord::NO_CHORD));
    }

    #[test]
    fn long_segment_rejected() {
        let params = ChordInferenceParams {
            max_measures: 3,
            ..Default::default()
        };
        let model = HarmonyModel::new(params).unwrap();
        let measures = vec![Vec::new(); 4];
        assert!(matches!(
            model.infer_chords(&measures),
            Err(ChordError::SegmentTooLong { measures: 4, limit: 3 })
        ));
    }

    #[test]
    fn bad_params() {
        let params = ChordInferenceParams {
            gamma: 1.0,
            ..Default::default()
        };
        assert!(HarmonyModel::new(params).is_err());
    }
}
