//! Fourier-domain rotation of a weight bank.
//!
//! Each `K × K × K` kernel is transformed, multiplied by the phase field
//! `Φ = exp(−2πj (f'_x + f'_y + f'_z))` built from the rotated frequency grid
//! `f' = R f`, and transformed back. Frequencies are in cycles per sample, so
//! the phase field is a circular translation by `Rᵀ (1, 1, 1)` samples; at
//! `θ = 0` that is exactly a roll by one sample along every axis.
//!
//! Only odd `K` is supported: every bin then has a conjugate partner, so the
//! phase field is Hermitian and the inverse transform is real up to rounding.
//! The residual imaginary part is returned rather than silently dropped.
//!
//! Transforms are unnormalized forward, `1/N` on the inverse, computed as
//! separable per-axis DFTs with a cached twiddle table (`O(K⁴)` per kernel).

use num_complex::Complex;
use rayon::prelude::*;

use crate::convops::KernelBank5D;
use crate::error::{shape_err, CrossdError, Result};
use crate::rotparam::{rodrigues_approx, RotationMatrix, RotationParams};
use crate::scalar::Scalar;
use crate::tensor::{matmul3, ComplexTensor, Tensor};

/// Per-axis DFT over a row-major 3D buffer.
#[derive(Clone, Debug)]
pub(crate) struct Dft3<T> {
    dims: [usize; 3],
    /// Row-major `n × n` matrices `exp(−2πj k m / n)` per axis.
    forward: [Vec<Complex<T>>; 3],
    /// Conjugates of `forward`.
    backward: [Vec<Complex<T>>; 3],
}

impl<T: Scalar> Dft3<T> {
    pub fn new(dims: [usize; 3]) -> Self {
        let forward = dims.map(|n| {
            (0..n * n)
                .map(|km| {
                    let m = (km / n) * (km % n) % n;
                    let a = -T::TAU() * T::from_usize_lossy(m) / T::from_usize_lossy(n);
                    Complex::new(a.cos(), a.sin())
                })
                .collect::<Vec<_>>()
        });
        let backward = forward.clone().map(|m| m.into_iter().map(|c| c.conj()).collect());
        Self { dims, forward, backward }
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    fn transform(&self, buf: &mut [Complex<T>], inverse: bool) {
        let total = self.len();
        let strides = [self.dims[1] * self.dims[2], self.dims[2], 1];
        let mut line = [Complex::new(T::zero(), T::zero()); 16];
        let mut heap = Vec::new();
        for axis in 0..3 {
            let (n, st) = (self.dims[axis], strides[axis]);
            if n == 1 {
                continue;
            }
            let mat = if inverse { &self.backward[axis] } else { &self.forward[axis] };
            let scratch: &mut [Complex<T>] = if n <= line.len() {
                &mut line[..n]
            } else {
                heap.resize(n, Complex::new(T::zero(), T::zero()));
                &mut heap[..]
            };
            for outer in (0..total).step_by(n * st) {
                for base in outer..outer + st {
                    for (i, v) in scratch.iter_mut().enumerate() {
                        *v = buf[base + i * st];
                    }
                    for (k, row) in mat.chunks_exact(n).enumerate() {
                        let mut acc = Complex::new(T::zero(), T::zero());
                        for (&t, &v) in row.iter().zip(scratch.iter()) {
                            acc = acc + v * t;
                        }
                        buf[base + k * st] = acc;
                    }
                }
            }
        }
        if inverse {
            let scale = T::one() / T::from_usize_lossy(total);
            for v in buf.iter_mut() {
                *v = v.scale(scale);
            }
        }
    }

    pub fn forward_real(&self, data: &[T]) -> Vec<Complex<T>> {
        let mut buf: Vec<Complex<T>> = data.iter().map(|&v| Complex::new(v, T::zero())).collect();
        self.transform(&mut buf, false);
        buf
    }

    pub fn inverse(&self, buf: &mut [Complex<T>]) {
        self.transform(buf, true);
    }
}

fn dims3(shape: &[usize], what: &str) -> Result<[usize; 3]> {
    shape
        .try_into()
        .map_err(|_| CrossdError::Shape(format!("{what} must be rank 3, got {shape:?}")))
}

/// Unnormalized forward 3D DFT of a real volume.
pub fn fft3<T: Scalar>(kernel: &Tensor<T>) -> Result<ComplexTensor<T>> {
    let dims = dims3(kernel.shape(), "fft3 input")?;
    ComplexTensor::from_values(kernel.shape(), Dft3::new(dims).forward_real(kernel.data()))
}

/// Inverse 3D DFT with `1/N` normalization, returning the real part and the
/// largest absolute imaginary residual.
pub fn ifft3_real<T: Scalar>(spectrum: &ComplexTensor<T>) -> Result<(Tensor<T>, T)> {
    let dims = dims3(spectrum.shape(), "ifft3 input")?;
    let mut buf = spectrum.data().to_vec();
    Dft3::new(dims).inverse(&mut buf);
    Ok(ComplexTensor::from_values(spectrum.shape(), buf)?.split_real())
}

/// DFT sample frequencies for odd `k`: `0, 1/k, …, ⌊k/2⌋/k, −⌊k/2⌋/k, …, −1/k`.
pub fn dft_frequencies<T: Scalar>(k: usize) -> Result<Vec<T>> {
    if k % 2 == 0 {
        return Err(CrossdError::UnsupportedKernel(k));
    }
    let n = T::from_usize_lossy(k);
    Ok((0..k)
        .map(|i| {
            if i <= k / 2 {
                T::from_usize_lossy(i) / n
            } else {
                -T::from_usize_lossy(k - i) / n
            }
        })
        .collect())
}

/// Frequency coordinates of every bin of a `K × K × K` spectrum.
/// `fx` varies along the first axis, `fy` the second, `fz` the third.
#[derive(Clone, Debug, PartialEq)]
pub struct FreqGrid<T> {
    pub fx: Tensor<T>,
    pub fy: Tensor<T>,
    pub fz: Tensor<T>,
}

impl<T: Scalar> FreqGrid<T> {
    pub fn kernel_size(&self) -> usize {
        self.fx.shape()[0]
    }

    /// `(f_x, f_y, f_z)` at flat bin index `i`.
    pub fn at(&self, i: usize) -> [T; 3] {
        [self.fx.data()[i], self.fy.data()[i], self.fz.data()[i]]
    }
}

pub fn freq_grid<T: Scalar>(k: usize) -> Result<FreqGrid<T>> {
    let f = dft_frequencies::<T>(k)?;
    let shape = [k, k, k];
    Ok(FreqGrid {
        fx: Tensor::from_fn(&shape, |i| f[i[0]])?,
        fy: Tensor::from_fn(&shape, |i| f[i[1]])?,
        fz: Tensor::from_fn(&shape, |i| f[i[2]])?,
    })
}

/// `f' = R f` at every grid point.
pub fn rotate_freqs<T: Scalar>(r: &RotationMatrix<T>, g: &FreqGrid<T>) -> FreqGrid<T> {
    let n = g.fx.len();
    let mut out = [Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n)];
    for i in 0..n {
        let v = matmul3(&r.0, g.at(i));
        for (o, c) in out.iter_mut().zip(v) {
            o.push(c);
        }
    }
    let [fx, fy, fz] = out;
    let shape = g.fx.shape();
    FreqGrid {
        fx: Tensor::from_values(shape, fx).expect("grid shape"),
        fy: Tensor::from_values(shape, fy).expect("grid shape"),
        fz: Tensor::from_values(shape, fz).expect("grid shape"),
    }
}

/// Unit-modulus phase field.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseField<T>(pub ComplexTensor<T>);

/// `Φ = exp(−2πj (f'_x + f'_y + f'_z))`.
pub fn phase_factor<T: Scalar>(g: &FreqGrid<T>) -> PhaseField<T> {
    let data = (0..g.fx.len())
        .map(|i| {
            let [a, b, c] = g.at(i);
            let phi = -T::TAU() * (a + b + c);
            Complex::new(phi.cos(), phi.sin())
        })
        .collect();
    PhaseField(ComplexTensor::from_values(g.fx.shape(), data).expect("grid shape"))
}

pub fn apply_phase<T: Scalar>(
    spectrum: &ComplexTensor<T>,
    phase: &PhaseField<T>,
) -> Result<ComplexTensor<T>> {
    spectrum.mul(&phase.0)
}

/// Effective translation (in samples) applied by the phase field of `r`:
/// `Rᵀ (1, 1, 1)`.
pub fn shift_vector<T: Scalar>(r: &RotationMatrix<T>) -> [T; 3] {
    matmul3(&r.transpose().0, [T::one(); 3])
}

/// Everything needed to phase-shift kernels of one size under one rotation.
#[derive(Clone, Debug)]
pub(crate) struct PhaseShift<T> {
    pub dft: Dft3<T>,
    pub grid: FreqGrid<T>,
    pub phase: Vec<Complex<T>>,
}

impl<T: Scalar> PhaseShift<T> {
    pub fn new(k: usize, p: &RotationParams<T>) -> Result<Self> {
        let grid = freq_grid(k)?;
        let phase = phase_factor(&rotate_freqs(&rodrigues_approx(p), &grid)).0.data().to_vec();
        Ok(Self { dft: Dft3::new([k, k, k]), grid, phase })
    }

    /// Rotated kernel and its imaginary residual.
    pub fn apply(&self, kernel: &[T]) -> (Vec<T>, T) {
        self.apply_with(kernel, &self.phase)
    }

    /// Same as [`PhaseShift::apply`] with the conjugate phase (the adjoint map).
    pub fn apply_adjoint(&self, kernel: &[T]) -> (Vec<T>, T) {
        let conj: Vec<_> = self.phase.iter().map(|c| c.conj()).collect();
        self.apply_with(kernel, &conj)
    }

    fn apply_with(&self, kernel: &[T], phase: &[Complex<T>]) -> (Vec<T>, T) {
        let mut buf = self.dft.forward_real(kernel);
        for (v, &p) in buf.iter_mut().zip(phase) {
            *v = *v * p;
        }
        self.dft.inverse(&mut buf);
        let residual = buf.iter().fold(T::zero(), |m, c| m.max(c.im.abs()));
        (buf.into_iter().map(|c| c.re).collect(), residual)
    }
}

/// Rotated weights `U'` plus the worst imaginary residual over all kernels.
#[derive(Clone, Debug, PartialEq)]
pub struct RotatedBank<T> {
    pub weights: Tensor<T>,
    pub imag_residual: T,
}

/// Phase-shift every trailing `K × K × K` block of `weights` independently.
pub fn rotate_kernels<T: Scalar>(
    weights: &Tensor<T>,
    p: &RotationParams<T>,
) -> Result<RotatedBank<T>> {
    let s = weights.shape();
    let r = s.len();
    if r < 3 || s[r - 1] != s[r - 2] || s[r - 2] != s[r - 3] {
        return shape_err(format!("expected trailing K x K x K kernel axes, got {s:?}"));
    }
    let k = s[r - 1];
    let shift = PhaseShift::new(k, p)?;
    let vol = k * k * k;
    let mut out = vec![T::zero(); weights.len()];
    let residual = out
        .par_chunks_mut(vol)
        .zip(weights.data().par_chunks(vol))
        .with_min_len(16)
        .map(|(dst, src)| {
            let (rotated, res) = shift.apply(src);
            dst.copy_from_slice(&rotated);
            res
        })
        .reduce(T::zero, T::max);
    Ok(RotatedBank { weights: Tensor::from_values(s, out)?, imag_residual: residual })
}

pub fn rotate_bank<T: Scalar>(
    bank: &KernelBank5D<T>,
    p: &RotationParams<T>,
) -> Result<RotatedBank<T>> {
    rotate_kernels(bank.weights(), p)
}

/// Depth-centre plane `⌊K/2⌋` of every kernel in a tensor whose last three
/// axes are `K × K × K`.
pub fn mid_slice<T: Scalar>(weights: &Tensor<T>) -> Result<Tensor<T>> {
    let r = weights.rank();
    if r < 3 {
        return shape_err(format!("mid slice needs rank >= 3, got {:?}", weights.shape()));
    }
    let k = weights.shape()[r - 3];
    if k % 2 == 0 {
        return Err(CrossdError::UnsupportedKernel(k));
    }
    weights.slice_axis(r - 3, k / 2)
}

/// `C_out × C_in/G × K × K` middle slice of a rotated bank.
pub fn extract_mid_slice<T: Scalar>(rotated: &RotatedBank<T>) -> Result<Tensor<T>> {
    mid_slice(&rotated.weights)
}
