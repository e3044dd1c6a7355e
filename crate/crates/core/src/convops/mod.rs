//! Direct convolutions, the ACS baseline, and the Cross-D forward passes.
//!
//! All operators use the cross-correlation convention (no kernel flip) with
//! zero padding.

mod acs;
mod crossd;
pub(crate) mod engine;

use rand::Rng;

pub use acs::{acs_conv3d, acs_split};
pub use crossd::{crossd_forward_2d, crossd_forward_3d, crossd_rotations, RotationMode};

use crate::error::{shape_err, CrossdError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use engine::Plan;

/// Per-axis stride and zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry<const N: usize> {
    pub stride: [usize; N],
    pub padding: [usize; N],
}

pub type Geometry2 = ConvGeometry<2>;
pub type Geometry3 = ConvGeometry<3>;

impl<const N: usize> ConvGeometry<N> {
    pub fn new(stride: [usize; N], padding: [usize; N]) -> Result<Self> {
        if stride.contains(&0) {
            return shape_err(format!("stride {stride:?} must be positive"));
        }
        Ok(Self { stride, padding })
    }

    /// Stride 1, padding `⌊k/2⌋` on every axis.
    pub fn same(kernel: usize) -> Self {
        Self { stride: [1; N], padding: [kernel / 2; N] }
    }

    pub fn valid() -> Self {
        Self { stride: [1; N], padding: [0; N] }
    }

    /// `⌊(n + 2p − k)/s⌋ + 1` per axis.
    pub fn output_extent(&self, input: [usize; N], kernel: [usize; N]) -> Result<[usize; N]> {
        let mut out = [0; N];
        for a in 0..N {
            let padded = input[a] + 2 * self.padding[a];
            if padded < kernel[a] || self.stride[a] == 0 {
                return shape_err(format!(
                    "kernel {kernel:?} does not fit input {input:?} with geometry {self:?}"
                ));
            }
            out[a] = (padded - kernel[a]) / self.stride[a] + 1;
        }
        Ok(out)
    }
}

impl Default for Geometry2 {
    fn default() -> Self {
        Self::same(3)
    }
}

/// The learnable `C_out × C_in/G × K × K × K` weight bank with optional bias.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelBank5D<T> {
    weights: Tensor<T>,
    groups: usize,
    bias: Option<Tensor<T>>,
}

impl<T: Scalar> KernelBank5D<T> {
    pub fn new(weights: Tensor<T>, groups: usize) -> Result<Self> {
        let s = weights.shape();
        if s.len() != 5 || s[2] != s[3] || s[3] != s[4] {
            return shape_err(format!("bank must be C_out x C_in/G x K x K x K, got {s:?}"));
        }
        if s[2] % 2 == 0 {
            return Err(CrossdError::UnsupportedKernel(s[2]));
        }
        if groups == 0 || s[0] % groups != 0 {
            return Err(CrossdError::Config(format!(
                "{} output channels not divisible by {groups} groups",
                s[0]
            )));
        }
        Ok(Self { weights, groups, bias: None })
    }

    pub fn with_bias(mut self, bias: Tensor<T>) -> Result<Self> {
        if bias.shape() != [self.out_channels()] {
            return shape_err(format!(
                "bias shape {:?} does not match {} output channels",
                bias.shape(),
                self.out_channels()
            ));
        }
        self.bias = Some(bias);
        Ok(self)
    }

    /// Uniform init in `±1/sqrt(fan_in)` where `fan_in = C_in/G · K³`.
    pub fn random<R: Rng>(
        out_channels: usize,
        in_channels: usize,
        kernel: usize,
        groups: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if groups == 0 || in_channels % groups != 0 {
            return Err(CrossdError::Config(format!(
                "{in_channels} input channels not divisible by {groups} groups"
            )));
        }
        let cin_g = in_channels / groups;
        let bound = 1.0 / ((cin_g * kernel * kernel * kernel) as f64).sqrt();
        let weights = Tensor::from_fn(&[out_channels, cin_g, kernel, kernel, kernel], |_| {
            T::lit(rng.gen_range(-bound..=bound))
        })?;
        Self::new(weights, groups)
    }

    pub fn weights(&self) -> &Tensor<T> {
        &self.weights
    }

    pub fn bias(&self) -> Option<&Tensor<T>> {
        self.bias.as_ref()
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels_per_group(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels_per_group() * self.groups
    }

    pub fn kernel_size(&self) -> usize {
        self.weights.shape()[2]
    }

    /// Same bank with replaced weights of identical shape.
    pub fn with_weights(&self, weights: Tensor<T>) -> Result<Self> {
        if weights.shape() != self.weights.shape() {
            return shape_err(format!(
                "replacement weights {:?} differ from bank shape {:?}",
                weights.shape(),
                self.weights.shape()
            ));
        }
        Ok(Self { weights, groups: self.groups, bias: self.bias.clone() })
    }
}

fn dims<const N: usize>(t: &Tensor<impl Scalar>, what: &str) -> Result<[usize; N]> {
    t.shape()
        .try_into()
        .map_err(|_| CrossdError::Shape(format!("{what} must have rank {N}, got {:?}", t.shape())))
}

fn check_bias<T: Scalar>(bias: Option<&Tensor<T>>, c_out: usize) -> Result<Option<&[T]>> {
    match bias {
        Some(b) if b.shape() != [c_out] => {
            shape_err(format!("bias shape {:?} does not match {c_out} channels", b.shape()))
        }
        Some(b) => Ok(Some(b.data())),
        None => Ok(None),
    }
}

pub(crate) fn plan2d(
    x: [usize; 4],
    w: [usize; 4],
    geom: &Geometry2,
    groups: usize,
) -> Result<Plan> {
    Plan::new(
        [x[0], x[1], 1, x[2], x[3]],
        [w[0], w[1], 1, w[2], w[3]],
        [1, geom.stride[0], geom.stride[1]],
        [0, geom.padding[0] as isize, geom.padding[1] as isize],
        groups,
    )
}

pub(crate) fn plan3d(
    x: [usize; 5],
    w: [usize; 5],
    geom: &Geometry3,
    groups: usize,
) -> Result<Plan> {
    Plan::new(x, w, geom.stride, geom.padding.map(|p| p as isize), groups)
}

/// 2D cross-correlation: `B × C_in × H × W` with `C_out × C_in/G × KH × KW`.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    geom: &Geometry2,
    groups: usize,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let xs = dims::<4>(x, "conv2d input")?;
    let ws = dims::<4>(w, "conv2d kernel")?;
    let plan = plan2d(xs, ws, geom, groups)?;
    let bias = check_bias(bias, ws[0])?;
    let out = engine::forward(&plan, x.data(), w.data(), bias);
    Tensor::from_values(&[plan.out[0], plan.out[1], plan.out[3], plan.out[4]], out)
}

/// 3D cross-correlation of `B × C_in × D × H × W` with a weight bank.
pub fn conv3d<T: Scalar>(
    x: &Tensor<T>,
    bank: &KernelBank5D<T>,
    geom: &Geometry3,
) -> Result<Tensor<T>> {
    conv3d_weights(x, &bank.weights, geom, bank.groups, bank.bias.as_ref())
}

/// 3D cross-correlation with a raw (possibly anisotropic) kernel tensor.
pub fn conv3d_weights<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    geom: &Geometry3,
    groups: usize,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let xs = dims::<5>(x, "conv3d input")?;
    let ws = dims::<5>(w, "conv3d kernel")?;
    let plan = plan3d(xs, ws, geom, groups)?;
    let bias = check_bias(bias, ws[0])?;
    let out = engine::forward(&plan, x.data(), w.data(), bias);
    Tensor::from_values(&plan.out, out)
}

/// `(grad_x, grad_w)` of a 2D convolution. Bias gradients are
/// [`bias_grad`] of the upstream tensor.
pub fn vjp_conv2d<T: Scalar>(
    upstream: &Tensor<T>,
    x: &Tensor<T>,
    w: &Tensor<T>,
    geom: &Geometry2,
    groups: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let xs = dims::<4>(x, "conv2d input")?;
    let ws = dims::<4>(w, "conv2d kernel")?;
    let plan = plan2d(xs, ws, geom, groups)?;
    let expect = [plan.out[0], plan.out[1], plan.out[3], plan.out[4]];
    if upstream.shape() != expect {
        return shape_err(format!(
            "upstream {:?} does not match conv2d output {expect:?}",
            upstream.shape()
        ));
    }
    let gx = engine::backward_input(&plan, w.data(), upstream.data());
    let gw = engine::backward_weight(&plan, x.data(), upstream.data());
    Ok((Tensor::from_values(x.shape(), gx)?, Tensor::from_values(w.shape(), gw)?))
}

pub fn vjp_conv3d<T: Scalar>(
    upstream: &Tensor<T>,
    x: &Tensor<T>,
    w: &Tensor<T>,
    geom: &Geometry3,
    groups: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let xs = dims::<5>(x, "conv3d input")?;
    let ws = dims::<5>(w, "conv3d kernel")?;
    let plan = plan3d(xs, ws, geom, groups)?;
    if upstream.shape() != plan.out {
        return shape_err(format!(
            "upstream {:?} does not match conv3d output {:?}",
            upstream.shape(),
            plan.out
        ));
    }
    let gx = engine::backward_input(&plan, w.data(), upstream.data());
    let gw = engine::backward_weight(&plan, x.data(), upstream.data());
    Ok((Tensor::from_values(x.shape(), gx)?, Tensor::from_values(w.shape(), gw)?))
}

/// Sum of the upstream gradient over every axis except the channel axis (1).
pub fn bias_grad<T: Scalar>(upstream: &Tensor<T>) -> Result<Tensor<T>> {
    let s = upstream.shape();
    if s.len() < 2 {
        return shape_err(format!("bias gradient needs rank >= 2, got {s:?}"));
    }
    let (b, c) = (s[0], s[1]);
    let inner: usize = s[2..].iter().product();
    let mut g = vec![T::zero(); c];
    for n in 0..b {
        for (ch, gc) in g.iter_mut().enumerate() {
            *gc += upstream.data()[(n * c + ch) * inner..][..inner].iter().copied().sum::<T>();
        }
    }
    Tensor::from_values(&[c], g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crossd_oracle as oracle;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0)).unwrap()
    }

    fn max_err(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn sum_of_ones() {
        let x = Tensor::<f64>::ones(&[1, 1, 3, 3]).unwrap();
        let y = conv2d(&x, &x, &Geometry2::valid(), 1, None).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);

        let v = Tensor::<f64>::ones(&[1, 1, 3, 3, 3]).unwrap();
        let bank = KernelBank5D::new(v.clone(), 1).unwrap();
        let y = conv3d(&v, &bank, &Geometry3::valid()).unwrap();
        assert_eq!(y.data(), &[27.0]);
    }

    #[test]
    fn delta_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_t(&[2, 1, 5, 6], &mut rng);
        let mut w = Tensor::zeros(&[1, 1, 3, 3]).unwrap();
        w.set(&[0, 0, 1, 1], 1.0).unwrap();
        assert_eq!(conv2d(&x, &w, &Geometry2::same(3), 1, None).unwrap(), x);

        let v = rand_t(&[1, 1, 4, 5, 3], &mut rng);
        let mut k = Tensor::zeros(&[1, 1, 3, 3, 3]).unwrap();
        k.set(&[0, 0, 1, 1, 1], 1.0).unwrap();
        let bank = KernelBank5D::new(k, 1).unwrap();
        assert_eq!(conv3d(&v, &bank, &Geometry3::same(3)).unwrap(), v);
    }

    #[test]
    fn conv2d_matches_nested_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..60 {
            let groups = [1, 2][rng.gen_range(0..2)];
            let cin = groups * rng.gen_range(1..=2);
            let cout = groups * rng.gen_range(1..=2);
            let (kh, kw) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
            let (h, w) = (rng.gen_range(kh..=8), rng.gen_range(kw..=8));
            let geom = Geometry2::new(
                [rng.gen_range(1..=2), rng.gen_range(1..=2)],
                [rng.gen_range(0..=2), rng.gen_range(0..=2)],
            )
            .unwrap();
            let x = rand_t(&[2, cin, h, w], &mut rng);
            let k = rand_t(&[cout, cin / groups, kh, kw], &mut rng);
            let bias = rand_t(&[cout], &mut rng);
            let y = conv2d(&x, &k, &geom, groups, Some(&bias)).unwrap();
            let (expected, shape) = oracle::conv2d(
                x.data(),
                [2, cin, h, w],
                k.data(),
                [cout, cin / groups, kh, kw],
                geom.stride,
                geom.padding,
                groups,
                Some(bias.data()),
            );
            assert_eq!(y.shape(), shape.as_slice());
            assert!(max_err(y.data(), &expected) <= 1e-12);
        }
    }

    #[test]
    fn conv3d_matches_nested_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..30 {
            let groups = [1, 2][rng.gen_range(0..2)];
            let cin = groups * rng.gen_range(1..=2);
            let cout = groups;
            let k = [1, 3][rng.gen_range(0..2)];
            let dims: Vec<usize> = (0..3).map(|_| rng.gen_range(k..=6)).collect();
            let geom = Geometry3::new(
                [rng.gen_range(1..=2), 1, rng.gen_range(1..=2)],
                [rng.gen_range(0..=1), 1, 0],
            )
            .unwrap();
            let x = rand_t(&[1, cin, dims[0], dims[1], dims[2]], &mut rng);
            let bank = KernelBank5D::new(rand_t(&[cout, cin / groups, k, k, k], &mut rng), groups)
                .unwrap();
            let y = conv3d(&x, &bank, &geom).unwrap();
            let (expected, shape) = oracle::conv3d(
                x.data(),
                [1, cin, dims[0], dims[1], dims[2]],
                bank.weights().data(),
                [cout, cin / groups, k, k, k],
                geom.stride,
                geom.padding,
                groups,
                None,
            );
            assert_eq!(y.shape(), shape.as_slice());
            assert!(max_err(y.data(), &expected) <= 1e-12);
        }
    }

    #[test]
    fn linear_in_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let x = rand_t(&[2, 2, 6, 5], &mut rng);
        let w1 = rand_t(&[3, 2, 3, 3], &mut rng);
        let w2 = rand_t(&[3, 2, 3, 3], &mut rng);
        let (a, b) = (0.7, -1.3);
        let g = Geometry2::same(3);
        let lhs = conv2d(&x, &w1.scale(a).add(&w2.scale(b)).unwrap(), &g, 1, None).unwrap();
        let rhs = conv2d(&x, &w1, &g, 1, None)
            .unwrap()
            .scale(a)
            .add(&conv2d(&x, &w2, &g, 1, None).unwrap().scale(b))
            .unwrap();
        assert!(lhs.max_abs_diff(&rhs).unwrap() <= 1e-12);
    }

    #[test]
    fn output_shape_formula() {
        for (h, k, s, p) in [(7, 3, 2, 1), (8, 3, 3, 0), (5, 5, 1, 2), (4, 1, 2, 0)] {
            let g = Geometry2::new([s, s], [p, p]).unwrap();
            let x = Tensor::<f64>::zeros(&[1, 1, h, h]).unwrap();
            let w = Tensor::zeros(&[1, 1, k, k]).unwrap();
            let y = conv2d(&x, &w, &g, 1, None).unwrap();
            let e = (h + 2 * p - k) / s + 1;
            assert_eq!(y.shape(), &[1, 1, e, e]);
            assert_eq!(g.output_extent([h, h], [k, k]).unwrap(), [e, e]);
        }
    }

    #[test]
    fn geometry_violation_is_shape_error() {
        let x = Tensor::<f64>::zeros(&[1, 1, 2, 2]).unwrap();
        let w = Tensor::zeros(&[1, 1, 3, 3]).unwrap();
        assert!(matches!(
            conv2d(&x, &w, &Geometry2::valid(), 1, None),
            Err(CrossdError::Shape(_))
        ));
        let w = Tensor::zeros(&[1, 2, 1, 1]).unwrap();
        assert!(conv2d(&x, &w, &Geometry2::valid(), 1, None).is_err());
        assert!(Geometry2::new([0, 1], [0, 0]).is_err());
    }

    #[test]
    fn bank_validation() {
        assert!(matches!(
            KernelBank5D::new(Tensor::<f64>::zeros(&[2, 1, 4, 4, 4]).unwrap(), 1),
            Err(CrossdError::UnsupportedKernel(4))
        ));
        assert!(KernelBank5D::new(Tensor::<f64>::zeros(&[3, 1, 3, 3, 3]).unwrap(), 2).is_err());
        assert!(KernelBank5D::new(Tensor::<f64>::zeros(&[2, 1, 3, 3, 1]).unwrap(), 1).is_err());
    }
}
