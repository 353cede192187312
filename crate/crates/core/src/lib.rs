//! Multi-track music VAE: MIDI I/O, event tokenization, chord inference,
//! a hierarchical recurrent VAE and latent-space tools.

pub mod autodiff;
pub mod chords;
pub mod codec;
pub mod corpus;
pub mod latent;
pub mod render;
pub mod smf;
pub mod synth;
pub mod vae;

pub use chords::{ChordClass, ChordInferenceParams, HarmonyModel};
pub use codec::{Event, InstrumentTrack, Measure, MeasureRecord, Program, QuantizedNote, Track};
pub use corpus::{CorpusConfig, DatasetStats};
pub use latent::{AttributeVector, LatentError};
pub use render::{RenderFormat, RenderOptions};
pub use smf::{parse_smf, write_smf, ParsedScore};
pub use vae::{Checkpoint, Example, ModelConfig, ModelParams, StepMetrics, TrainConfig, Trainer, VaeError};
