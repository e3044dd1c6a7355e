//! Vector-Jacobian products (and matching forward tangents) for each stage of
//! the Cross-D pipeline.

use num_complex::Complex;
use rayon::prelude::*;

use crate::error::{shape_err, Result};
use crate::rotparam::{skew, softmax, RawRotationVector, RotationParams, AXIS_EPS, HEAD_CHANNELS};
use crate::scalar::Scalar;
use crate::spectral::PhaseShift;
use crate::tensor::Tensor;

pub use crate::convops::{bias_grad, vjp_conv2d, vjp_conv3d};

/// Per-sample softmax-weighted sums have `∂r/∂f_i = p_i (1 + f_i − r)`.
pub fn vjp_aggregate<T: Scalar>(upstream: &Tensor<T>, features: &Tensor<T>) -> Result<Tensor<T>> {
    let s = features.shape();
    if s.len() != 4 || s[1] != HEAD_CHANNELS || upstream.shape() != [s[0], HEAD_CHANNELS] {
        return shape_err(format!(
            "aggregate vjp: features {s:?} with upstream {:?}",
            upstream.shape()
        ));
    }
    let hw = s[2] * s[3];
    let mut grad = vec![T::zero(); features.len()];
    for (row, (dst, src)) in grad.chunks_mut(hw).zip(features.data().chunks(hw)).enumerate() {
        let g = upstream.data()[row];
        let p = softmax(src);
        let r: T = src.iter().zip(&p).map(|(&f, &q)| f * q).sum();
        for ((d, &f), &q) in dst.iter_mut().zip(src).zip(&p) {
            *d = g * q * (T::one() + f - r);
        }
    }
    Tensor::from_values(s, grad)
}

/// Tangent of the aggregated `B × 4` vectors along `d_features`.
pub fn jvp_aggregate<T: Scalar>(features: &Tensor<T>, d_features: &Tensor<T>) -> Result<Tensor<T>> {
    let s = features.shape();
    if s.len() != 4 || s[1] != HEAD_CHANNELS || d_features.shape() != s {
        return shape_err(format!("aggregate jvp: features {s:?}"));
    }
    let hw = s[2] * s[3];
    let out = features
        .data()
        .chunks(hw)
        .zip(d_features.data().chunks(hw))
        .map(|(src, dsrc)| {
            let p = softmax(src);
            let r: T = src.iter().zip(&p).map(|(&f, &q)| f * q).sum();
            src.iter().zip(&p).zip(dsrc).map(|((&f, &q), &df)| q * (T::one() + f - r) * df).sum()
        })
        .collect();
    Tensor::from_values(&[s[0], HEAD_CHANNELS], out)
}

/// Gradient with respect to the raw `(k, θ_raw)` vector. The fallback branch
/// for a vanishing axis is locally constant, so its axis gradient is zero.
pub fn vjp_normalize<T: Scalar>(
    raw: &RawRotationVector<T>,
    grad_axis: [T; 3],
    grad_angle: T,
) -> [T; 4] {
    let k = raw.axis();
    let norm = (k[0] * k[0] + k[1] * k[1] + k[2] * k[2]).sqrt();
    let th = raw.angle_raw().tanh();
    let gt = grad_angle * T::FRAC_PI_4() * (T::one() - th * th);
    if norm < T::lit(AXIS_EPS) || !norm.is_finite() {
        return [T::zero(), T::zero(), T::zero(), gt];
    }
    let a = k.map(|c| c / norm);
    let ag = a[0] * grad_axis[0] + a[1] * grad_axis[1] + a[2] * grad_axis[2];
    [
        (grad_axis[0] - a[0] * ag) / norm,
        (grad_axis[1] - a[1] * ag) / norm,
        (grad_axis[2] - a[2] * ag) / norm,
        gt,
    ]
}

pub fn jvp_normalize<T: Scalar>(raw: &RawRotationVector<T>, d_raw: [T; 4]) -> ([T; 3], T) {
    let k = raw.axis();
    let norm = (k[0] * k[0] + k[1] * k[1] + k[2] * k[2]).sqrt();
    let th = raw.angle_raw().tanh();
    let dt = T::FRAC_PI_4() * (T::one() - th * th) * d_raw[3];
    if norm < T::lit(AXIS_EPS) || !norm.is_finite() {
        return ([T::zero(); 3], dt);
    }
    let a = k.map(|c| c / norm);
    let ad = a[0] * d_raw[0] + a[1] * d_raw[1] + a[2] * d_raw[2];
    (std::array::from_fn(|i| (d_raw[i] - a[i] * ad) / norm), dt)
}

/// Gradient of `R = I + θ K(a)` with respect to `(a, θ)`.
pub fn vjp_rodrigues<T: Scalar>(p: &RotationParams<T>, grad_r: &[[T; 3]; 3]) -> ([T; 3], T) {
    let k = skew(p.axis);
    let mut gtheta = T::zero();
    for (grow, krow) in grad_r.iter().zip(&k) {
        for (&g, &kv) in grow.iter().zip(krow) {
            gtheta += g * kv;
        }
    }
    let g = grad_r;
    let gaxis = [g[2][1] - g[1][2], g[0][2] - g[2][0], g[1][0] - g[0][1]].map(|v| v * p.angle);
    (gaxis, gtheta)
}

pub fn jvp_rodrigues<T: Scalar>(p: &RotationParams<T>, d_axis: [T; 3], d_angle: T) -> [[T; 3]; 3] {
    let k = skew(p.axis);
    let dk = skew(d_axis);
    std::array::from_fn(|i| std::array::from_fn(|j| d_angle * k[i][j] + p.angle * dk[i][j]))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RotateBankGrad<T> {
    pub bank: Tensor<T>,
    pub axis: [T; 3],
    pub angle: T,
}

fn check_kernels<T: Scalar>(weights: &Tensor<T>) -> Result<usize> {
    let s = weights.shape();
    let r = s.len();
    if r < 3 || s[r - 1] != s[r - 2] || s[r - 2] != s[r - 3] {
        return shape_err(format!("expected trailing K x K x K kernel axes, got {s:?}"));
    }
    Ok(s[r - 1])
}

/// Adjoint of the phase-shift rotation for weights with trailing `K × K × K`
/// axes.
///
/// The bank gradient applies the conjugate phase to the upstream spectrum.
/// For the rotation, with `s(f) = Σ_i (R f)_i` and `Ĝ`, `X` the spectra of
/// upstream and weights, `∂L/∂s(f) = 2π Im(conj(Ĝ) X Φ) / N` and
/// `∂L/∂R_ij = Σ_f ∂L/∂s(f) f_j`, which then goes through [`vjp_rodrigues`].
pub fn vjp_rotate_bank<T: Scalar>(
    upstream: &Tensor<T>,
    weights: &Tensor<T>,
    p: &RotationParams<T>,
) -> Result<RotateBankGrad<T>> {
    let k = check_kernels(weights)?;
    if upstream.shape() != weights.shape() {
        return shape_err(format!(
            "rotate vjp: upstream {:?} vs weights {:?}",
            upstream.shape(),
            weights.shape()
        ));
    }
    let shift = PhaseShift::new(k, p)?;
    let vol = k * k * k;
    let scale = T::TAU() / T::from_usize_lossy(vol);

    let per_kernel: Vec<(Vec<T>, [T; 3])> = upstream
        .data()
        .par_chunks(vol)
        .zip(weights.data().par_chunks(vol))
        .map(|(g, u)| {
            let (gu, _) = shift.apply_adjoint(g);
            let gs = shift.dft.forward_real(g);
            let xs = shift.dft.forward_real(u);
            let mut col = [T::zero(); 3];
            for (i, ((gf, xf), phi)) in gs.iter().zip(&xs).zip(&shift.phase).enumerate() {
                let ds = (gf.conj() * *xf * *phi).im * scale;
                let f = shift.grid.at(i);
                for (c, fj) in col.iter_mut().zip(f) {
                    *c += ds * fj;
                }
            }
            (gu, col)
        })
        .collect();

    let mut bank = Vec::with_capacity(weights.len());
    let mut col = [T::zero(); 3];
    for (gu, c) in per_kernel {
        bank.extend(gu);
        for (a, b) in col.iter_mut().zip(c) {
            *a += b;
        }
    }
    // s depends on every row of R through the same column sums
    let grad_r = [col; 3];
    let (axis, angle) = vjp_rodrigues(p, &grad_r);
    Ok(RotateBankGrad { bank: Tensor::from_values(weights.shape(), bank)?, axis, angle })
}

/// Tangent of the rotated weights along `(d_weights, d_axis, d_angle)`.
pub fn jvp_rotate_bank<T: Scalar>(
    weights: &Tensor<T>,
    p: &RotationParams<T>,
    d_weights: &Tensor<T>,
    d_axis: [T; 3],
    d_angle: T,
) -> Result<Tensor<T>> {
    let k = check_kernels(weights)?;
    if d_weights.shape() != weights.shape() {
        return shape_err("rotate jvp: tangent shape differs from weights");
    }
    let shift = PhaseShift::new(k, p)?;
    let dr = jvp_rodrigues(p, d_axis, d_angle);
    let vol = k * k * k;
    let minus_two_pi_j = Complex::new(T::zero(), -T::TAU());
    let ds: Vec<T> = (0..vol)
        .map(|i| {
            let f = shift.grid.at(i);
            dr.iter().map(|row| row[0] * f[0] + row[1] * f[1] + row[2] * f[2]).sum()
        })
        .collect();
    let mut out = Vec::with_capacity(weights.len());
    for (u, du) in weights.data().chunks(vol).zip(d_weights.data().chunks(vol)) {
        let xs = shift.dft.forward_real(u);
        let mut buf = shift.dft.forward_real(du);
        for (((b, x), phi), &d) in buf.iter_mut().zip(&xs).zip(&shift.phase).zip(&ds) {
            *b = (*b + *x * minus_two_pi_j.scale(d)) * *phi;
        }
        shift.dft.inverse(&mut buf);
        out.extend(buf.iter().map(|c| c.re));
    }
    Tensor::from_values(weights.shape(), out)
}

/// Adjoint of `slice_axis(axis, pos)`: scatter into a zero tensor.
pub fn vjp_slice<T: Scalar>(
    upstream: &Tensor<T>,
    axis: usize,
    pos: usize,
    extent: usize,
) -> Result<Tensor<T>> {
    upstream.embed_axis(axis, pos, extent)
}

/// Adjoint of [`crate::spectral::mid_slice`] for kernels of size `k`.
pub fn vjp_mid_slice<T: Scalar>(upstream: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let r = upstream.rank();
    if r < 2 {
        return shape_err(format!("mid slice vjp needs rank >= 2, got {:?}", upstream.shape()));
    }
    vjp_slice(upstream, r - 2, k / 2, k)
}
