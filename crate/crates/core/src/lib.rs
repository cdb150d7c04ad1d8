//! Icosahedral group convolution over image features projected onto the
//! sphere, with orientation and classification heads.

pub mod data;
pub mod encoder;
pub mod error;
pub mod groupconv;
pub mod harness;
pub mod heads;
pub mod icogroup;
pub mod projection;
pub mod rotations;

pub use error::{Error, Result};
