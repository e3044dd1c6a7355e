//! Cross-D forward passes: predict a rotation from the input, phase-rotate the
//! 3D bank, and convolve with either its middle slice (2D) or the whole
//! rotated bank (3D).

use super::{conv2d, conv3d, Geometry2, Geometry3, KernelBank5D};
use crate::error::{shape_err, Result};
use crate::rotparam::{
    aggregate_rotation_params, head_forward, normalize_rotation, RawRotationVector,
    RotParamHead, RotationParams,
};
use crate::scalar::Scalar;
use crate::spectral::{extract_mid_slice, rotate_bank};
use crate::tensor::Tensor;

/// How rotation parameters are shared across a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum RotationMode {
    /// Every sample gets its own rotated kernel.
    #[default]
    PerSample,
    /// Raw rotation vectors are averaged over the batch before normalization
    /// and one kernel serves every sample.
    BatchMean,
}

impl std::str::FromStr for RotationMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "per-sample" => Ok(Self::PerSample),
            "batch-mean" => Ok(Self::BatchMean),
            other => Err(format!("unknown rotation mode {other:?} (per-sample|batch-mean)")),
        }
    }
}

/// Rotation parameters for `x`: one per sample, or a single entry in
/// batch-mean mode.
pub fn crossd_rotations<T: Scalar>(
    x: &Tensor<T>,
    head: &RotParamHead<T>,
    mode: RotationMode,
) -> Result<Vec<RotationParams<T>>> {
    let raw = aggregate_rotation_params(&head_forward(head, x)?)?;
    Ok(match mode {
        RotationMode::PerSample => raw.iter().map(normalize_rotation).collect(),
        RotationMode::BatchMean => vec![normalize_rotation(&RawRotationVector::mean(&raw)?)],
    })
}

pub fn crossd_forward_2d<T: Scalar>(
    x: &Tensor<T>,
    bank: &KernelBank5D<T>,
    head: &RotParamHead<T>,
    geom: &Geometry2,
    mode: RotationMode,
) -> Result<Tensor<T>> {
    if x.rank() != 4 || x.shape()[1] != bank.in_channels() {
        return shape_err(format!(
            "input {:?} does not match bank with {} input channels",
            x.shape(),
            bank.in_channels()
        ));
    }
    let params = crossd_rotations(x, head, mode)?;
    let kernel_for = |p: &RotationParams<T>| extract_mid_slice(&rotate_bank(bank, p)?);

    if let [p] = params.as_slice() {
        return conv2d(x, &kernel_for(p)?, geom, bank.groups(), bank.bias());
    }
    let mut outputs = Vec::with_capacity(params.len());
    for (b, p) in params.iter().enumerate() {
        let sample = x.slice_axis(0, b)?.embed_axis(0, 0, 1)?;
        outputs.push(conv2d(&sample, &kernel_for(p)?, geom, bank.groups(), bank.bias())?);
    }
    let mut shape = outputs[0].shape().to_vec();
    shape[0] = outputs.len();
    Tensor::from_values(&shape, outputs.into_iter().flat_map(Tensor::into_data).collect())
}

/// `conv3d(x, rotate_bank(bank, p))`.
pub fn crossd_forward_3d<T: Scalar>(
    x: &Tensor<T>,
    bank: &KernelBank5D<T>,
    p: &RotationParams<T>,
    geom: &Geometry3,
) -> Result<Tensor<T>> {
    let rotated = bank.with_weights(rotate_bank(bank, p)?.weights)?;
    conv3d(x, &rotated, geom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn zero_head_uses_rolled_mid_slice() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_t(&[2, 2, 6, 5], &mut rng);
        let bank = KernelBank5D::random(3, 2, 3, 1, &mut rng).unwrap();
        let head = RotParamHead::zeros(2, 3).unwrap();
        let g = Geometry2::same(3);
        let y = crossd_forward_2d(&x, &bank, &head, &g, RotationMode::PerSample).unwrap();
        let kernel = bank.weights().roll(&[0, 0, 1, 1, 1]).unwrap().slice_axis(2, 1).unwrap();
        let want = conv2d(&x, &kernel, &g, 1, None).unwrap();
        assert!(y.max_abs_diff(&want).unwrap() <= 1e-10);
        let again = crossd_forward_2d(&x, &bank, &head, &g, RotationMode::PerSample).unwrap();
        assert_eq!(y, again);
    }

    #[test]
    fn single_sample_modes_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_t(&[1, 2, 5, 5], &mut rng);
        let bank = KernelBank5D::random(2, 2, 3, 1, &mut rng).unwrap();
        let head = RotParamHead::random(2, 3, 1.0, &mut rng).unwrap();
        let g = Geometry2::same(3);
        let a = crossd_forward_2d(&x, &bank, &head, &g, RotationMode::PerSample).unwrap();
        let b = crossd_forward_2d(&x, &bank, &head, &g, RotationMode::BatchMean).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn per_sample_uses_each_samples_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_t(&[3, 1, 6, 6], &mut rng);
        let bank = KernelBank5D::random(2, 1, 3, 1, &mut rng).unwrap();
        let head = RotParamHead::random(1, 3, 2.0, &mut rng).unwrap();
        let g = Geometry2::same(3);
        let y = crossd_forward_2d(&x, &bank, &head, &g, RotationMode::PerSample).unwrap();
        for b in 0..3 {
            let xb = x.slice_axis(0, b).unwrap().embed_axis(0, 0, 1).unwrap();
            let yb = crossd_forward_2d(&xb, &bank, &head, &g, RotationMode::PerSample).unwrap();
            assert_eq!(y.slice_axis(0, b).unwrap(), yb.slice_axis(0, 0).unwrap());
        }
    }

    #[test]
    fn unit_kernel_is_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_t(&[2, 1, 4, 4], &mut rng);
        let bank = KernelBank5D::new(Tensor::full(&[1, 1, 1, 1, 1], 2.5).unwrap(), 1).unwrap();
        let head = RotParamHead::zeros(1, 3).unwrap();
        let y = crossd_forward_2d(&x, &bank, &head, &Geometry2::valid(), RotationMode::PerSample)
            .unwrap();
        assert!(y.max_abs_diff(&x.scale(2.5)).unwrap() <= 1e-14);
    }

    #[test]
    fn three_d_path_and_slice_consistency() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bank = KernelBank5D::random(2, 2, 3, 1, &mut rng).unwrap();
        let v = rand_t(&[1, 2, 4, 5, 5], &mut rng);
        let p = RotationParams::identity();
        let y = crossd_forward_3d(&v, &bank, &p, &Geometry3::same(3)).unwrap();
        let rolled = bank.with_weights(bank.weights().roll(&[0, 0, 1, 1, 1]).unwrap()).unwrap();
        let want = conv3d(&v, &rolled, &Geometry3::same(3)).unwrap();
        assert!(y.max_abs_diff(&want).unwrap() <= 1e-10);

        // a single-slice volume only sees the kernel's middle plane
        let x2 = rand_t(&[1, 2, 5, 5], &mut rng);
        let head = RotParamHead::zeros(2, 3).unwrap();
        let y2 = crossd_forward_2d(&x2, &bank, &head, &Geometry2::same(3), RotationMode::PerSample)
            .unwrap();
        let x3 = x2.embed_axis(2, 0, 1).unwrap();
        let y3 = crossd_forward_3d(&x3, &bank, &p, &Geometry3::same(3)).unwrap();
        assert!(y3.slice_axis(2, 0).unwrap().max_abs_diff(&y2).unwrap() <= 1e-12);
    }

    #[test]
    fn compensated_delta_bank_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let v = rand_t(&[1, 1, 4, 4, 4], &mut rng);
        // delta at (0,0,0) rolls onto the centre (1,1,1)
        let mut w = Tensor::zeros(&[1, 1, 3, 3, 3]).unwrap();
        w.set(&[0, 0, 0, 0, 0], 1.0).unwrap();
        let bank = KernelBank5D::new(w, 1).unwrap();
        let y = crossd_forward_3d(&v, &bank, &RotationParams::identity(), &Geometry3::same(3))
            .unwrap();
        assert!(y.max_abs_diff(&v).unwrap() <= 1e-12);
    }

    #[test]
    fn even_kernel_rejected() {
        let x = Tensor::<f64>::zeros(&[1, 1, 4, 4]).unwrap();
        assert!(KernelBank5D::new(Tensor::<f64>::zeros(&[1, 1, 2, 2, 2]).unwrap(), 1).is_err());
        let bank = KernelBank5D::new(Tensor::zeros(&[1, 2, 3, 3, 3]).unwrap(), 1).unwrap();
        let head = RotParamHead::zeros(1, 3).unwrap();
        assert!(crossd_forward_2d(&x, &bank, &head, &Geometry2::same(3), RotationMode::PerSample)
            .is_err());
    }
}
