//! Frozen toy stand-ins for the vision encoder and the language model.

pub mod lm;
pub mod synth;
pub mod vision;
pub mod vocab;
pub mod fixtures;

pub use lm::{
    init_lm, lm_forward, pretrain_toy_lm, CorpusLine, LmConfig, LmOutput, Piece, PretrainConfig,
    PretrainedLm,
};
pub use synth::{generate_synthetic_task, CaptionExample, SyntheticTask, VqaExample};
pub use vision::{blank_features, encode_image, init_vision, ToyImage};
pub use vocab::Vocabulary;
pub use fixtures::{build_fixtures, load_fixtures, qualify_lm, Backbones, FixtureConfig, Fixtures};
