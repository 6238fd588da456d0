//! Goal-conditioned sequence modelling for text games.
//!
//! The crate covers the whole offline pipeline: a small declarative text-game
//! [`engine`], perturbed-walkthrough [`trajectory`] generation, the four
//! [`goals`] conditioning strategies, the text [`codec`], an encoder-decoder
//! [`model`] trained with an auxiliary next-observation loss, exponential-tilt
//! [`decode`]-ing, and the closed-loop evaluation [`harness`]. The
//! [`pipeline`] module ties them into reproducible runs.

pub mod codec;
pub mod decode;
pub mod engine;
pub mod goals;
pub mod harness;
pub mod model;
pub mod pipeline;
pub mod seeds;
pub mod trajectory;
