//! Surface reconstruction from point clouds with a learned local SDF prior.
//!
//! The pipeline has three stages: train a conditioned signed-distance network
//! on normalized local point-cloud regions with a pulling loss, specialize it
//! to one specific cloud by training a query-prediction network against the
//! frozen prior, and extract the zero level set with marching cubes (3D) or
//! marching squares (2D).

pub mod autodiff;
pub mod cli;
pub mod geometry;
pub mod gradcheck;
pub mod io;
pub mod mesher;
pub mod metrics;
pub mod nets;
pub mod prior;
pub mod error;
pub mod rng;
pub mod specialize;
pub mod tensor;

pub use error::{Error, Result};
