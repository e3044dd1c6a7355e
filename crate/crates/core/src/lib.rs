//! Dynamic 2D convolution kernels obtained by Fourier phase-shifting a learnable
//! 3D weight bank, together with direct conv2d/conv3d/ACS baselines,
//! reverse-mode gradients and a small weight-archive format.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision for the common cases.

pub mod autograd;
pub mod convops;
pub mod error;
pub mod rotparam;
pub mod scalar;
pub mod spectral;
pub mod tensor;
pub mod transfer;

pub use convops::{
    acs_conv3d, acs_split, conv2d, conv3d, crossd_forward_2d, crossd_forward_3d,
    crossd_rotations, ConvGeometry, Geometry2, Geometry3, KernelBank5D, RotationMode,
};
pub use error::{CrossdError, Result};
pub use rotparam::{
    aggregate_rotation_params, normalize_rotation, rodrigues_approx, RawRotationVector,
    RotParamHead, RotationMatrix, RotationParams,
};
pub use scalar::Scalar;
pub use spectral::{extract_mid_slice, mid_slice, rotate_bank, rotate_kernels, RotatedBank};
pub use tensor::{ComplexTensor, Tensor};

pub type RealTensor = Tensor<f64>;
pub type RealTensor32 = Tensor<f32>;
pub type ComplexTensor64 = ComplexTensor<f64>;
pub type ComplexTensor32 = ComplexTensor<f32>;
pub type KernelBank = KernelBank5D<f64>;
pub type KernelBank32 = KernelBank5D<f32>;
pub type Head = RotParamHead<f64>;
pub type Head32 = RotParamHead<f32>;
pub type Rotation = RotationParams<f64>;
pub type Rotation32 = RotationParams<f32>;
