//! Latent-space manipulation: prior sampling, spherical interpolation,
//! attribute vectors and decoding one code over a chord progression.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Scalar;
use crate::chords::{ChordClass, ChordError};
use crate::codec::{decode_measure, Measure};
use crate::smf::{write_smf, SmfError};
use crate::vae::{encode, sample_decode, standard_normal, Example, ModelParams, VaeError};

/// Below this angle (or this close to antipodal) slerp falls back to a
/// straight line.
const DEGENERATE_ANGLE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum LatentError {
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("vectors differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("the {0} set is empty")]
    EmptySet(&'static str),
    #[error("chord progression needs an even, non-zero length, got {0}")]
    OddProgression(usize),
    #[error("interpolation needs at least 2 steps, got {0}")]
    TooFewSteps(usize),
    #[error(transparent)]
    Vae(#[from] VaeError),
    #[error(transparent)]
    Chord(#[from] ChordError),
    #[error(transparent)]
    Smf(#[from] SmfError),
}

/// Draw `z ~ N(0, I)`.
pub fn sample_prior<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    standard_normal(dim, rng)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn lerp(a: &[f64], b: &[f64], alpha: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| (1.0 - alpha) * x + alpha * y).collect()
}

/// Spherical interpolation. The direction moves along the great circle and
/// the norm is interpolated linearly, so unit inputs stay on the sphere.
pub fn slerp(z0: &[f64], z1: &[f64], alpha: f64) -> Result<Vec<f64>, LatentError> {
    if z0.len() != z1.len() {
        return Err(LatentError::LengthMismatch(z0.len(), z1.len()));
    }
    let (n0, n1) = (norm(z0), norm(z1));
    if n0 == 0.0 || n1 == 0.0 {
        return Err(LatentError::ZeroVector);
    }
    let cos = z0.iter().zip(z1).map(|(a, b)| a * b).sum::<f64>() / (n0 * n1);
    let omega = cos.clamp(-1.0, 1.0).acos();
    if omega < DEGENERATE_ANGLE || (std::f64::consts::PI - omega).abs() < DEGENERATE_ANGLE {
        return Ok(lerp(z0, z1, alpha));
    }
    let s = omega.sin();
    let w0 = ((1.0 - alpha) * omega).sin() / s / n0;
    let w1 = (alpha * omega).sin() / s / n1;
    let len = (1.0 - alpha) * n0 + alpha * n1;
    Ok(z0.iter().zip(z1).map(|(&a, &b)| len * (w0 * a + w1 * b)).collect())
}

fn posterior_means<T: Scalar>(params: &ModelParams<T>, measures: &[Measure]) -> Result<Vec<Vec<f64>>, LatentError> {
    let examples = measures
        .iter()
        .map(|m| Example::from_measure(m, &params.config))
        .collect::<Result<Vec<_>, _>>()?;
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(32) {
        let refs: Vec<&Example> = chunk.iter().collect();
        out.extend(encode(params, &refs)?.into_iter().map(|p| p.mu));
    }
    Ok(out)
}

/// Encode both endpoints (posterior means), slerp at `i / (n - 1)` and
/// decode every point under the chords of the nearer endpoint.
pub fn interpolate_measures<T: Scalar, R: Rng + ?Sized>(
    params: &ModelParams<T>,
    x0: &Measure,
    x1: &Measure,
    n_steps: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<Vec<Measure>, LatentError> {
    if n_steps < 2 {
        return Err(LatentError::TooFewSteps(n_steps));
    }
    let mus = posterior_means(params, &[x0.clone(), x1.clone()])?;
    (0..n_steps)
        .map(|i| {
            let alpha = i as f64 / (n_steps - 1) as f64;
            let z = slerp(&mus[0], &mus[1], alpha)?;
            let chords = if alpha < 0.5 { x0.chords } else { x1.chords };
            Ok(sample_decode(params, &z, chords, temperature, rng)?)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeVector {
    pub attribute_name: String,
    pub v: Vec<f64>,
    pub n_with: usize,
    pub n_without: usize,
}

/// Mean code of `with_set` minus mean code of `without_set`.
pub fn attribute_vector<T: Scalar>(
    params: &ModelParams<T>,
    name: &str,
    with_set: &[Measure],
    without_set: &[Measure],
) -> Result<AttributeVector, LatentError> {
    if with_set.is_empty() {
        return Err(LatentError::EmptySet("with"));
    }
    if without_set.is_empty() {
        return Err(LatentError::EmptySet("without"));
    }
    let mean = |codes: Vec<Vec<f64>>| {
        let n = codes.len() as f64;
        let mut acc = vec![0.0; params.config.latent_dim];
        for c in &codes {
            for (a, x) in acc.iter_mut().zip(c) {
                *a += x;
            }
        }
        acc.into_iter().map(|a| a / n).collect::<Vec<f64>>()
    };
    let a = mean(posterior_means(params, with_set)?);
    let b = mean(posterior_means(params, without_set)?);
    Ok(AttributeVector {
        attribute_name: name.to_string(),
        v: a.iter().zip(&b).map(|(x, y)| x - y).collect(),
        n_with: with_set.len(),
        n_without: without_set.len(),
    })
}

/// Decode `mu(x) + scale * v` under the chords of `x`.
pub fn apply_attribute<T: Scalar, R: Rng + ?Sized>(
    params: &ModelParams<T>,
    x: &Measure,
    v: &AttributeVector,
    scale: f64,
    temperature: f64,
    rng: &mut R,
) -> Result<Measure, LatentError> {
    let mu = posterior_means(params, std::slice::from_ref(x))?.remove(0);
    if mu.len() != v.v.len() {
        return Err(LatentError::LengthMismatch(mu.len(), v.v.len()));
    }
    let z: Vec<f64> = mu.iter().zip(&v.v).map(|(m, d)| m + scale * d).collect();
    Ok(sample_decode(params, &z, x.chords, temperature, rng)?)
}

/// Built-in measure properties for attribute vectors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    PitchRange,
    TrackCount,
    StringsOnly,
    NoteDensity,
}

impl Attribute {
    pub const ALL: [Attribute; 4] = [
        Attribute::PitchRange,
        Attribute::TrackCount,
        Attribute::StringsOnly,
        Attribute::NoteDensity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Attribute::PitchRange => "pitch_range",
            Attribute::TrackCount => "track_count",
            Attribute::StringsOnly => "strings_only",
            Attribute::NoteDensity => "note_density",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == name)
    }

    pub fn value(self, m: &Measure) -> f64 {
        match self {
            Attribute::PitchRange => pitch_range(m) as f64,
            Attribute::TrackCount => track_count(m) as f64,
            Attribute::StringsOnly => f64::from(u8::from(strings_only(m))),
            Attribute::NoteDensity => note_density(m) as f64,
        }
    }
}

/// Highest minus lowest pitch over pitched (non-drum) notes.
pub fn pitch_range(m: &Measure) -> u32 {
    let pitches: Vec<u8> = decode_measure(m)
        .into_iter()
        .filter(|t| !t.program.is_drums())
        .flat_map(|t| t.notes.into_iter().map(|n| n.pitch))
        .collect();
    match (pitches.iter().max(), pitches.iter().min()) {
        (Some(hi), Some(lo)) => (hi - lo) as u32,
        _ => 0,
    }
}

pub fn track_count(m: &Measure) -> usize {
    m.track_count()
}

/// All non-drum tracks use programs 40..=51 (and there is at least one).
pub fn strings_only(m: &Measure) -> bool {
    let pitched: Vec<u8> = decode_measure(m)
        .iter()
        .filter(|t| !t.program.is_drums())
        .map(|t| t.program.value())
        .collect();
    !pitched.is_empty() && pitched.iter().all(|p| (40..=51).contains(p))
}

pub fn note_density(m: &Measure) -> usize {
    decode_measure(m).iter().map(|t| t.notes.len()).sum()
}

/// Split measures on `attribute > threshold`; without a threshold the
/// corpus median is used.
pub fn split_by_attribute(
    measures: &[Measure],
    attribute: Attribute,
    threshold: Option<f64>,
) -> (Vec<Measure>, Vec<Measure>) {
    let threshold = threshold.unwrap_or_else(|| {
        let mut values: Vec<f64> = measures.iter().map(|m| attribute.value(m)).collect();
        values.sort_by(f64::total_cmp);
        match values.len() {
            0 => 0.0,
            n if n % 2 == 1 => values[n / 2],
            n => 0.5 * (values[n / 2 - 1] + values[n / 2]),
        }
    });
    measures.iter().cloned().partition(|m| attribute.value(m) > threshold)
}

/// Parse a comma-separated chord list such as `C,C,F,F`.
pub fn parse_progression(text: &str) -> Result<Vec<ChordClass>, LatentError> {
    let chords = text
        .split(',')
        .map(|s| s.trim().parse::<ChordClass>())
        .collect::<Result<Vec<_>, _>>()?;
    if chords.is_empty() || chords.len() % 2 == 1 {
        return Err(LatentError::OddProgression(chords.len()));
    }
    Ok(chords)
}

/// One latent code decoded over a progression (two chords per measure),
/// with the measures joined into one MIDI file.
pub fn decode_progression<T: Scalar, R: Rng + ?Sized>(
    params: &ModelParams<T>,
    z: &[f64],
    progression: &[ChordClass],
    temperature: f64,
    tempo_bpm: f64,
    rng: &mut R,
) -> Result<(Vec<Measure>, Vec<u8>), LatentError> {
    if progression.is_empty() || progression.len() % 2 == 1 {
        return Err(LatentError::OddProgression(progression.len()));
    }
    let measures = progression
        .chunks(2)
        .map(|pair| sample_decode(params, z, [pair[0], pair[1]], temperature, rng))
        .collect::<Result<Vec<_>, _>>()?;
    let midi = write_smf(&measures, tempo_bpm, 480)?;
    Ok((measures, midi))
}
