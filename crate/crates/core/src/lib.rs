// SPDX-License-Identifier: Apache-2.0

//! Split inference with local metric privacy and client-side denoising.
//!
//! The client embeds tokens, adds calibrated noise and uploads the result;
//! the server encodes it and returns a noisy sentence embedding; the client
//! then denoises that embedding using the noise it alone knows.

pub mod autodiff;
pub mod classifier;
pub mod denoiser;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod harness;
pub mod model;
pub mod nn;
pub mod params;
pub mod privacy;
pub mod protocol;
pub mod rng;
pub mod tensor;

pub use error::{Result, SndError};
pub use rng::RngState;
pub use tensor::{Tensor, TokenMatrix};
