//! The full set of networks built from one specification.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{ContextMode, MaskEncoder, MaskEncoderSpec};
use crate::error::{Error, Result};
use crate::gan::{CriticSpec, Critics, Generator, GeneratorSpec, OutputActivation};
use crate::nn::ParamStore;

/// Frame geometry of the modeled data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameShape {
    pub channels: usize,
    pub classes: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub encoder: MaskEncoderSpec,
    pub generator: GeneratorSpec,
    pub critics: CriticSpec,
}

impl ModelSpec {
    /// Default widths for `classes` mask classes: per-timestep context so
    /// generated frames depend only on past and present masks, and a linear
    /// output head for standardized data.
    pub fn with_defaults(classes: usize) -> Self {
        ModelSpec {
            encoder: MaskEncoderSpec::new(classes),
            generator: GeneratorSpec {
                context_mode: ContextMode::PerTimestep,
                output: OutputActivation::Linear,
                ..GeneratorSpec::new(16)
            },
            critics: CriticSpec::new(16),
        }
    }

    pub fn validate(&self, frame: &FrameShape) -> Result<()> {
        if self.encoder.classes != frame.classes {
            return Err(Error::config(format!(
                "encoder expects {} mask classes, data has {}",
                self.encoder.classes, frame.classes
            )));
        }
        self.encoder.validate(frame.height, frame.width)?;
        self.generator.validate(frame.height, frame.width)?;
        self.critics.validate(frame.height, frame.width)
    }
}

pub struct Model {
    pub frame: FrameShape,
    pub encoder: MaskEncoder,
    pub generator: Generator,
    pub critics: Critics,
}

impl Model {
    /// Initializes every parameter from `seed`.
    pub fn build(spec: &ModelSpec, frame: FrameShape, seed: u64) -> Result<(ParamStore, Model)> {
        spec.validate(&frame)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let dims = (frame.channels, frame.height, frame.width);
        let encoder = MaskEncoder::new(&mut store, &spec.encoder, frame.height, frame.width, &mut rng)?;
        let generator = Generator::new(&mut store, &spec.generator, spec.encoder.context_dim, frame.classes, dims, &mut rng)?;
        let critics = Critics::new(&mut store, &spec.critics, spec.encoder.context_dim, frame.classes, dims, &mut rng)?;
        Ok((
            store,
            Model {
                frame,
                encoder,
                generator,
                critics,
            },
        ))
    }
}
