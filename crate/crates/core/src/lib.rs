//! Simulation and analysis toolkit for multi-frame RAW super-resolution with
//! frequency-band score distillation.

pub mod config;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod image;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod raw_sensor;
pub mod scene;
pub mod score_distill;
pub mod spectral;
pub mod subspace;

pub use error::{Error, Result};
pub use image::ImagePlane;
pub use fusion::{fuse, reconstruct, FusionConfig};
pub use geometry::{estimate_homography, warp, Burst, Homography, Trajectory};
pub use metrics::{band_error, psnr, ssim, MetricReport};
pub use pipeline::{run_ablation_hf, simulate_pair, PairedSample, SimulationConfig};
pub use raw_sensor::{CfaPattern, NoiseParams, RawFrame};
pub use score_distill::{run_distillation, DistillConfig, DistillMode};
pub use spectral::{make_mask, project, Band, FrequencyMask, RadialMask};
