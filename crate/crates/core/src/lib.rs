//! Guided diffusion sampling over analytic Gaussian-mixture worlds.
//!
//! The crate pairs an exact conditional noise-prediction oracle with the
//! guidance rules under study (classifier-free guidance, negative prompting,
//! synchronized directional normalization, trajectory-decoupled denoising and
//! their combination), the samplers that drive them, spectral and trajectory
//! diagnostics, and an LLM pipeline that produces counterfactual prompts.

pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod guidance;
pub mod linalg;
pub mod oracle;
pub mod par;
pub mod sampler;
pub mod schedule;

pub use error::{Error, Result};
pub use guidance::{GuidanceConfig, Strategy};
pub use oracle::{Condition, Denoiser, GmmWorld, MixtureOracle};
pub use sampler::{DualTrajectory, StepRecord, Trajectory};
pub use schedule::NoiseSchedule;
