//! Rotation parameters predicted from an input feature map.
//!
//! A single same-padded convolution maps the input to four channels
//! `(k_x, k_y, k_z, θ_raw)`. Each channel is collapsed to a scalar by a
//! softmax-weighted sum over spatial positions, the axis is normalized and the
//! angle is squashed into `[-π/4, π/4]` with `π/4 · tanh(θ_raw)`.

use rand::Rng;

use crate::convops::{conv2d, Geometry2};
use crate::error::{shape_err, CrossdError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Axis norms below this fall back to [`FALLBACK_AXIS`].
pub const AXIS_EPS: f64 = 1e-8;
pub const FALLBACK_AXIS: [f64; 3] = [0.0, 0.0, 1.0];
/// Number of head output channels: three axis components and one angle.
pub const HEAD_CHANNELS: usize = 4;

/// The secondary network: one `4 × C_in × K_h × K_h` convolution with bias.
#[derive(Clone, Debug, PartialEq)]
pub struct RotParamHead<T> {
    weights: Tensor<T>,
    bias: Tensor<T>,
}

impl<T: Scalar> RotParamHead<T> {
    pub fn new(weights: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let s = weights.shape();
        if s.len() != 4 || s[0] != HEAD_CHANNELS || s[2] != s[3] {
            return shape_err(format!("head weights must be 4 x C x K x K, got {s:?}"));
        }
        if s[2] % 2 == 0 {
            return Err(CrossdError::UnsupportedKernel(s[2]));
        }
        if bias.shape() != [HEAD_CHANNELS] {
            return shape_err(format!("head bias must have shape [4], got {:?}", bias.shape()));
        }
        Ok(Self { weights, bias })
    }

    pub fn zeros(in_channels: usize, kernel: usize) -> Result<Self> {
        Self::new(
            Tensor::zeros(&[HEAD_CHANNELS, in_channels, kernel, kernel])?,
            Tensor::zeros(&[HEAD_CHANNELS])?,
        )
    }

    /// Uniform init in `±scale / sqrt(fan_in)`, zero bias.
    pub fn random<R: Rng>(in_channels: usize, kernel: usize, scale: f64, rng: &mut R) -> Result<Self> {
        let bound = scale / ((in_channels * kernel * kernel) as f64).sqrt();
        let shape = [HEAD_CHANNELS, in_channels, kernel, kernel];
        let weights = Tensor::from_fn(&shape, |_| T::lit(rng.gen_range(-bound..=bound)))?;
        Self::new(weights, Tensor::zeros(&[HEAD_CHANNELS])?)
    }

    pub fn weights(&self) -> &Tensor<T> {
        &self.weights
    }

    pub fn bias(&self) -> &Tensor<T> {
        &self.bias
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn kernel_size(&self) -> usize {
        self.weights.shape()[2]
    }

    pub fn geometry(&self) -> Geometry2 {
        Geometry2::same(self.kernel_size())
    }
}

/// Head output `B × 4 × H × W` (same padding, stride 1).
pub fn head_forward<T: Scalar>(head: &RotParamHead<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 4 || x.shape()[1] != head.in_channels() {
        return shape_err(format!(
            "head expects B x {} x H x W input, got {:?}",
            head.in_channels(),
            x.shape()
        ));
    }
    conv2d(x, &head.weights, &head.geometry(), 1, Some(&head.bias))
}

/// `(k_x, k_y, k_z, θ_raw)` before normalization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RawRotationVector<T>(pub [T; 4]);

impl<T: Scalar> RawRotationVector<T> {
    pub fn axis(&self) -> [T; 3] {
        [self.0[0], self.0[1], self.0[2]]
    }

    pub fn angle_raw(&self) -> T {
        self.0[3]
    }

    /// Component-wise mean, used by batch-mean mode.
    pub fn mean(vectors: &[Self]) -> Result<Self> {
        if vectors.is_empty() {
            return Err(CrossdError::Config("mean of zero rotation vectors".into()));
        }
        let n = T::from_usize_lossy(vectors.len());
        let mut acc = [T::zero(); 4];
        for v in vectors {
            for (a, &c) in acc.iter_mut().zip(&v.0) {
                *a += c;
            }
        }
        Ok(Self(acc.map(|a| a / n)))
    }
}

/// Numerically stable softmax over a slice.
pub fn softmax<T: Scalar>(values: &[T]) -> Vec<T> {
    let max = values.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let exps: Vec<T> = values.iter().map(|&v| (v - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Softmax-weighted sum over spatial positions, one softmax per channel.
pub fn aggregate_rotation_params<T: Scalar>(
    features: &Tensor<T>,
) -> Result<Vec<RawRotationVector<T>>> {
    let s = features.shape();
    if s.len() != 4 || s[1] != HEAD_CHANNELS {
        return shape_err(format!("features must be B x 4 x H x W, got {s:?}"));
    }
    let hw = s[2] * s[3];
    let data = features.data();
    let out = (0..s[0])
        .map(|b| {
            let mut r = [T::zero(); 4];
            for (c, rc) in r.iter_mut().enumerate() {
                let field = &data[(b * HEAD_CHANNELS + c) * hw..][..hw];
                *rc = field.iter().zip(softmax(field)).map(|(&f, p)| f * p).sum();
            }
            RawRotationVector(r)
        })
        .collect();
    Ok(out)
}

/// Unit axis and bounded angle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RotationParams<T> {
    pub axis: [T; 3],
    pub angle: T,
    /// Set when the raw axis was too short and the fallback axis was used.
    pub degenerate: bool,
}

impl<T: Scalar> RotationParams<T> {
    /// Zero rotation about the fallback axis.
    pub fn identity() -> Self {
        Self { axis: FALLBACK_AXIS.map(T::lit), angle: T::zero(), degenerate: false }
    }

    /// Normalizes `axis`; rejects a zero axis or an angle outside `[-π/4, π/4]`.
    pub fn from_axis_angle(axis: [T; 3], angle: T) -> Result<Self> {
        let norm = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        if !(norm > T::zero()) || !norm.is_finite() {
            return Err(CrossdError::Config(format!("rotation axis {axis:?} has no direction")));
        }
        if !(angle.abs() <= T::FRAC_PI_4()) {
            return Err(CrossdError::Config(format!("rotation angle {angle} outside [-pi/4, pi/4]")));
        }
        Ok(Self { axis: axis.map(|a| a / norm), angle, degenerate: false })
    }
}

pub fn normalize_rotation<T: Scalar>(r: &RawRotationVector<T>) -> RotationParams<T> {
    let k = r.axis();
    let norm = (k[0] * k[0] + k[1] * k[1] + k[2] * k[2]).sqrt();
    let angle = T::FRAC_PI_4() * r.angle_raw().tanh();
    if norm < T::lit(AXIS_EPS) || !norm.is_finite() {
        RotationParams { axis: FALLBACK_AXIS.map(T::lit), angle, degenerate: true }
    } else {
        RotationParams { axis: k.map(|c| c / norm), angle, degenerate: false }
    }
}

/// `R = I + θK` (small-angle Rodrigues).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RotationMatrix<T>(pub [[T; 3]; 3]);

impl<T: Scalar> RotationMatrix<T> {
    pub fn identity() -> Self {
        let (o, z) = (T::one(), T::zero());
        Self([[o, z, z], [z, o, z], [z, z, o]])
    }

    pub fn transpose(&self) -> Self {
        let m = &self.0;
        Self(std::array::from_fn(|i| std::array::from_fn(|j| m[j][i])))
    }
}

/// Cross-product matrix of `k`: `skew(k) · v = k × v`.
pub fn skew<T: Scalar>(k: [T; 3]) -> [[T; 3]; 3] {
    let z = T::zero();
    [[z, -k[2], k[1]], [k[2], z, -k[0]], [-k[1], k[0], z]]
}

pub fn rodrigues_approx<T: Scalar>(p: &RotationParams<T>) -> RotationMatrix<T> {
    let k = skew(p.axis);
    let mut r = RotationMatrix::identity().0;
    for (row, krow) in r.iter_mut().zip(&k) {
        for (v, &kv) in row.iter_mut().zip(krow) {
            *v += p.angle * kv;
        }
    }
    RotationMatrix(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crossd_oracle as oracle;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn zero_input_gives_bias() {
        let mut head = RotParamHead::<f64>::zeros(2, 3).unwrap();
        head.bias = Tensor::from_values(&[4], vec![0.5, -1.0, 2.0, 3.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        head.weights = random_tensor(&[4, 2, 3, 3], &mut rng);
        let x = Tensor::zeros(&[1, 2, 5, 4]).unwrap();
        let y = head_forward(&head, &x).unwrap();
        assert_eq!(y.shape(), &[1, 4, 5, 4]);
        for c in 0..4 {
            let plane = y.slice_axis(0, 0).unwrap().slice_axis(0, c).unwrap();
            assert!(plane.data().iter().all(|&v| v == head.bias.data()[c]));
        }
    }

    #[test]
    fn one_by_one_head_is_affine() {
        let w = Tensor::from_values(&[4, 1, 1, 1], vec![1.0, 2.0, -1.0, 0.5]).unwrap();
        let b = Tensor::from_values(&[4], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let head = RotParamHead::new(w, b).unwrap();
        let x = Tensor::from_values(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = head_forward(&head, &x).unwrap();
        for c in 0..4 {
            for p in 0..4 {
                let expected = head.weights.data()[c] * x.data()[p] + head.bias.data()[c];
                assert_eq!(y.data()[c * 4 + p], expected);
            }
        }
    }

    #[test]
    fn head_channel_mismatch() {
        let head = RotParamHead::<f64>::zeros(3, 3).unwrap();
        let x = Tensor::zeros(&[1, 2, 4, 4]).unwrap();
        assert!(matches!(head_forward(&head, &x), Err(CrossdError::Shape(_))));
    }

    #[test]
    fn head_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let c = rng.gen_range(1..=3);
            let (h, w) = (rng.gen_range(3..=8), rng.gen_range(3..=8));
            let head = RotParamHead::new(
                random_tensor(&[4, c, 3, 3], &mut rng),
                random_tensor(&[4], &mut rng),
            )
            .unwrap();
            let x = random_tensor(&[2, c, h, w], &mut rng);
            let y = head_forward(&head, &x).unwrap();
            let (expected, shape) = oracle::conv2d(
                x.data(),
                [2, c, h, w],
                head.weights.data(),
                [4, c, 3, 3],
                [1, 1],
                [1, 1],
                1,
                Some(head.bias.data()),
            );
            assert_eq!(y.shape(), shape.as_slice());
            let err = y.data().iter().zip(&expected).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err <= 1e-12, "err {err}");
        }
    }

    #[test]
    fn constant_field_aggregates_to_constant() {
        let f = Tensor::<f64>::from_fn(&[1, 4, 3, 5], |i| [0.3, -2.0, 7.5, 1.25][i[1]]).unwrap();
        let r = aggregate_rotation_params(&f).unwrap();
        for (got, want) in r[0].0.iter().zip([0.3, -2.0, 7.5, 1.25]) {
            assert!((got - want).abs() < 1e-14);
        }
    }

    #[test]
    fn softmax_saturates_at_spike() {
        for m in [10.0f64, 50.0, 200.0] {
            let f = Tensor::from_fn(&[1, 4, 2, 2], |i| if i[2] == 1 && i[3] == 0 { m } else { 0.1 })
                .unwrap();
            let r = aggregate_rotation_params(&f).unwrap();
            for &rc in &r[0].0 {
                assert!((rc - m).abs() <= m * 4.0 * (-(m - 0.1)).exp() + 1e-12);
            }
        }
    }

    #[test]
    fn aggregate_matches_explicit_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let f = random_tensor(&[2, 4, 2, 2], &mut rng).scale(3.0);
            let got = aggregate_rotation_params(&f).unwrap();
            let want = oracle::softmax_weighted_sum(f.data(), [2, 4, 2, 2]);
            for (g, w) in got.iter().zip(want.chunks(4)) {
                for (a, b) in g.0.iter().zip(w) {
                    assert!((a - b).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn normalize_examples() {
        let p = normalize_rotation(&RawRotationVector([3.0f64, 4.0, 0.0, 0.0]));
        assert_eq!(p.axis, [0.6, 0.8, 0.0]);
        assert_eq!(p.angle, 0.0);
        assert!(!p.degenerate);

        let p = normalize_rotation(&RawRotationVector([0.0f64, 0.0, 0.0, 10.0]));
        assert_eq!(p.axis, [0.0, 0.0, 1.0]);
        assert!(p.degenerate);
        // pi/4 * tanh(10), evaluated independently
        assert!((p.angle - 0.785_398_160_159_795_7).abs() < 1e-12);
    }

    #[test]
    fn rodrigues_examples() {
        let m = rodrigues_approx(&RotationParams::<f64>::identity());
        assert_eq!(m, RotationMatrix::identity());
        let p = RotationParams { axis: [0.0, 0.0, 1.0], angle: 0.1, degenerate: false };
        assert_eq!(
            rodrigues_approx(&p).0,
            [[1.0, -0.1, 0.0], [0.1, 1.0, 0.0], [0.0, 0.0, 1.0]]
        );
        let p = RotationParams { axis: [1.0, 0.0, 0.0], angle: 0.2, degenerate: false };
        assert_eq!(
            rodrigues_approx(&p).0,
            [[1.0, 0.0, 0.0], [0.0, 1.0, -0.2], [0.0, 0.2, 1.0]]
        );
    }

    #[test]
    fn from_axis_angle_validates() {
        assert!(RotationParams::from_axis_angle([0.0, 0.0, 0.0], 0.1).is_err());
        assert!(RotationParams::from_axis_angle([1.0, 0.0, 0.0], 1.0).is_err());
        let p = RotationParams::from_axis_angle([0.0, 2.0, 0.0], -0.3).unwrap();
        assert_eq!(p.axis, [0.0, 1.0, 0.0]);
    }

    proptest! {
        #[test]
        fn normalized_params_are_valid(
            k in prop::array::uniform3(prop_oneof![-1e3f64..1e3, -1e-7f64..1e-7]),
            t in -1e3f64..1e3,
        ) {
            let p = normalize_rotation(&RawRotationVector([k[0], k[1], k[2], t]));
            let n = p.axis.iter().map(|a| a * a).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() <= 1e-12);
            prop_assert!(p.angle.abs() <= std::f64::consts::FRAC_PI_4);
        }

        #[test]
        fn rodrigues_offset_is_skew(k in prop::array::uniform3(-1f64..1.0), t in -10f64..10.0) {
            let p = normalize_rotation(&RawRotationVector([k[0], k[1], k[2], t]));
            let r = rodrigues_approx(&p).0;
            for i in 0..3 {
                for j in 0..3 {
                    let a = r[i][j] - if i == j { 1.0 } else { 0.0 };
                    let b = r[j][i] - if i == j { 1.0 } else { 0.0 };
                    prop_assert_eq!(a, -b);
                }
            }
        }

        #[test]
        fn aggregate_is_permutation_invariant(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = random_tensor(&[1, 4, 3, 3], &mut rng).scale(4.0);
            let mut perm: Vec<usize> = (0..9).collect();
            for i in (1..9).rev() {
                perm.swap(i, rng.gen_range(0..=i));
            }
            let g = Tensor::from_fn(&[1, 4, 3, 3], |i| {
                let p = perm[i[2] * 3 + i[3]];
                f.get(&[0, i[1], p / 3, p % 3]).unwrap()
            }).unwrap();
            let a = aggregate_rotation_params(&f).unwrap();
            let b = aggregate_rotation_params(&g).unwrap();
            for (x, y) in a[0].0.iter().zip(&b[0].0) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }
}
