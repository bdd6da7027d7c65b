pub mod analysis;
pub mod attribution;
pub mod pipeline;
pub mod corpus;
pub mod dataset;
pub mod elicitation;
pub mod model;
pub mod unlearning;
pub mod vocab;

pub use vocab::{Token, TokenSequence, Vocab};
