//! Flow-matching estimation of frame-to-frame camera motion.
//!
//! A conditioned, time-dependent vector field over the 6-dimensional motion
//! space (so(3) axis-angle ⊕ translation) is trained with the conditional
//! flow-matching objective on straight-line paths. Motions are sampled by
//! integrating the field from noise, and repeated initializations give a
//! sample spread that serves as an uncertainty estimate.
//!
//! Modules:
//! - [`se3`]: rotations, rigid poses, the motion-state chart and the initial distribution
//! - [`vfnet`]: the vector-field network with hand-written backpropagation
//! - [`flowmatch`]: path sampling, the flow-matching loss, Adam and the training loop
//! - [`sampler`]: ODE integration and Monte Carlo pose estimation
//! - [`synthworld`]: synthetic trajectories, condition encoding and dataset files
//! - [`trajeval`]: scale alignment, Umeyama alignment, ATE and trajectory file formats

pub mod config;
pub mod error;
pub mod flowmatch;
pub mod rng;
pub mod sampler;
pub mod se3;
pub mod synthworld;
pub mod trajeval;
pub mod vfnet;

pub use error::{Error, Result};
pub use se3::{MotionState, RelativePose, Rotation};
pub use vfnet::{ConditionVector, Gradients, NetConfig, VectorFieldNet};
