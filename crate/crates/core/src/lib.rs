//! Diversity-aware sampling of future trajectories from a frozen decoder.
//!
//! Two latent samplers are provided: DSF, which optimizes a fixed set of latent codes so the
//! decoded trajectories form a diverse DPP ground set, and DLow, which learns one affine flow
//! per sample over a shared Gaussian noise vector. Both run against any [`decoders::Decoder`].

pub mod cli;
pub mod decoders;
pub mod dpp;
pub mod energy;
pub mod error;
pub mod flows;
pub mod linalg;
pub mod io;
pub mod optim;
pub mod synth;
pub mod training;
pub mod trajectory;

pub use error::{Error, Result};
