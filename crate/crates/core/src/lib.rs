//! Deformation-aware adversarial image translation for misaligned training pairs.
//!
//! Two modality generators (`G: X -> Y`, `F: Y -> X`) are trained jointly with
//! symmetric registration networks that predict forward/backward displacement
//! fields, multi-level inverse-consistency penalties, and discriminators that
//! see both warped and unwarped real and synthesized images.
//!
//! The crate is organised bottom-up:
//!
//! * [`imaging`]: image and pair types, dataset manifests, normalization, masks.
//! * [`warp`]: differentiable bilinear backward warping of dense fields.
//! * [`deform_sim`]: graded elastic misalignment simulator.
//! * [`networks`]: generator, registration regressor and patch discriminator.
//! * [`losses`]: loss terms and the loss report.
//! * [`metrics`]: NMAE, PSNR and SSIM in 2D and 3D, Dice, paired t-test.
//! * [`training`]: the two-phase min-max loop, presets, run directories.
//! * [`checkpoint`]: per-network parameter files.
//! * [`evaluation`]: held-out scoring and ablation tables.
//! * [`phantom`]: procedural two-modality phantoms.
//! * [`config`]: sectioned experiment configuration.

pub mod checkpoint;
pub mod config;
pub mod deform_sim;
pub mod error;
pub mod evaluation;
pub mod imaging;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod phantom;
pub mod rng;
pub mod training;
pub mod warp;

pub use error::{Error, Result};
pub use imaging::{DatasetManifest, Image2D, PairedSample};
pub use warp::DeformationField2D;
