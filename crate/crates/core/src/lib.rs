//! Spectral parametrization of dense layers: eigenvalue-based node relevance,
//! teacher-student experiments and the analysis that goes with them.

pub mod analysis;
pub mod convspec;
pub mod error;
pub mod experiment;
pub mod layers;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
pub use layers::{Activation, DenseLayer, Layer, SpectralLayer};
pub use numerics::{Matrix, SeededRng, Vector};
pub use training::{Dataset, Network};
