//! Dialogue state tracking with a teacher–student dialogue state distillation
//! network and an inter-slot supervised contrastive objective.

pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod contrastive;
pub mod corpus;
pub mod decoder;
pub mod distillation;
pub mod encoder_stack;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;

pub use error::{DsdnError, Result};
