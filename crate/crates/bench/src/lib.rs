//! Fixtures shared by the benchmarks.

use mmvae::chords::{pitch_class_frames, PitchClassFrame};
use mmvae::codec::decode_measure;
use mmvae::synth::overfit_measures;
use mmvae::vae::Example;
use mmvae::{Measure, ModelConfig};

pub fn measures() -> Vec<Measure> {
    overfit_measures()
}

/// Two chord frames per measure of the fixture set.
pub fn frames() -> Vec<PitchClassFrame> {
    measures()
        .iter()
        .flat_map(|m| pitch_class_frames(&decode_measure(m)))
        .collect()
}

pub fn examples(cfg: &ModelConfig) -> Vec<Example> {
    measures()
        .iter()
        .map(|m| Example::from_measure(m, cfg).expect("fixture fits the model"))
        .collect()
}
