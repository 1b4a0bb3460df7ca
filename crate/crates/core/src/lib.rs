//! Algorithms for mask-based (lensless) cameras: forward simulation,
//! physics-based camera inversion, trainable pre/post-processing, end-to-end
//! training, and a dense-matrix laboratory for perturbation analysis.
//!
//! The measurement of a lensless camera is a highly multiplexed image; under a
//! shift-invariance assumption it is the scene convolved with the on-axis PSF
//! and cropped to the sensor. This crate provides that forward model, several
//! solvers that undo it (ADMM with total-variation regularization, its
//! unrolled trainable variant, FISTA, one-shot Tikhonov inversion, and
//! plug-and-play ADMM with a denoiser slot), small convolutional pre/post
//! processors, and reverse-mode differentiation over the whole pipeline.

pub mod autodiff;
pub mod error;
pub mod fft;
pub mod field;
pub mod inversion;
pub mod metrics;
pub mod mismatch;
pub mod operators;
pub mod pipeline;
pub mod processors;
pub mod sim;
pub mod tensor;
pub mod train;

pub use error::{CoreError, Result};
pub use metrics::{mse, psnr, ssim, MetricReport};
pub use operators::{
    adjoint_p, crop_c, forward_p, pad_ct, plan_kernel, tv_psi, tv_psit, FieldDomain,
    FrequencyKernel, PaddedField,
};
pub use tensor::{load_png, save_png, Tensor3};
