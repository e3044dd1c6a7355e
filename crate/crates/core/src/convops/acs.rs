//! Axial-coronal-sagittal convolution: 2D kernels split into three output
//! channel groups, each swept through the volume in one orthogonal view.

use super::{engine, Geometry3};
use crate::error::{shape_err, CrossdError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Output-channel group sizes `(axial, coronal, sagittal)`:
/// `⌈C/3⌉`, `⌈(C − ⌈C/3⌉)/2⌉`, remainder.
pub fn acs_split(c_out: usize) -> [usize; 3] {
    let axial = c_out.div_ceil(3);
    let coronal = (c_out - axial).div_ceil(2);
    [axial, coronal, c_out - axial - coronal]
}

/// ACS convolution of `B × C_in × D × H × W` with `C_out × C_in × K × K`.
///
/// `geom` is interpreted as if the kernels were `K × K × K`: the view axis of
/// each group uses a unit kernel extent with padding reduced by `⌊K/2⌋`, so
/// all three groups share one output shape and sample the centre tap.
pub fn acs_conv3d<T: Scalar>(
    x: &Tensor<T>,
    w2d: &Tensor<T>,
    geom: &Geometry3,
) -> Result<Tensor<T>> {
    let xs: [usize; 5] = x
        .shape()
        .try_into()
        .map_err(|_| CrossdError::Shape(format!("acs input must be rank 5, got {:?}", x.shape())))?;
    let ws = w2d.shape();
    if ws.len() != 4 || ws[2] != ws[3] {
        return shape_err(format!("acs kernels must be C_out x C_in x K x K, got {ws:?}"));
    }
    let (c_out, c_in, k) = (ws[0], ws[1], ws[2]);
    if c_out < 3 {
        return Err(CrossdError::Config(format!(
            "ACS convolution needs at least 3 output channels, got {c_out}"
        )));
    }
    if k % 2 == 0 {
        return Err(CrossdError::UnsupportedKernel(k));
    }

    let split = acs_split(c_out);
    let half = (k / 2) as isize;
    let per_channel = c_in * k * k;
    let mut parts = Vec::with_capacity(3);
    let mut first = 0;
    let mut out_shape = None;
    for (view, &n) in split.iter().enumerate() {
        if n == 0 {
            continue;
        }
        let mut wshape = [n, c_in, k, k, k];
        wshape[2 + view] = 1;
        let mut pad = geom.padding.map(|p| p as isize);
        pad[view] -= half;
        let plan = engine::Plan::new(xs, wshape, geom.stride, pad, 1)?;
        let kernels = &w2d.data()[first * per_channel..(first + n) * per_channel];
        parts.push((plan, engine::forward(&plan, x.data(), kernels, None)));
        out_shape.get_or_insert(plan.out);
        first += n;
    }

    let mut shape = out_shape.expect("at least one view");
    shape[1] = c_out;
    let spatial: usize = shape[2..].iter().product();
    let mut out = Vec::with_capacity(shape[0] * c_out * spatial);
    for b in 0..shape[0] {
        for (plan, data) in &parts {
            let n = plan.out[1];
            out.extend_from_slice(&data[b * n * spatial..(b + 1) * n * spatial]);
        }
    }
    Tensor::from_values(&shape, out)
}
