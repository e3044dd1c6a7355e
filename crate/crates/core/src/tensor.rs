//! Dense row-major real and complex tensors.
//!
//! Shapes are plain extent lists; every extent must be at least one. There is
//! no broadcasting: binary operations require identical shapes.

use num_complex::Complex;

use crate::error::{shape_err, CrossdError, Result};
use crate::scalar::Scalar;

fn check_extents(shape: &[usize]) -> Result<usize> {
    if let Some(axis) = shape.iter().position(|&e| e == 0) {
        return shape_err(format!("extent 0 on axis {axis} in shape {shape:?}"));
    }
    Ok(shape.iter().product())
}

/// Row-major strides for `shape` (last axis has stride 1).
pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        let n = check_extents(shape)?;
        Ok(Self { shape: shape.to_vec(), data: vec![value; n] })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::one())
    }

    pub fn from_values(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n = check_extents(shape)?;
        if n != data.len() {
            return shape_err(format!(
                "shape {shape:?} holds {n} elements but {} values were given",
                data.len()
            ));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    /// Builds a tensor by evaluating `f` at every multi-index in row-major order.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> T) -> Result<Self> {
        let n = check_extents(shape)?;
        let mut data = Vec::with_capacity(n);
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..n {
            data.push(f(&idx));
            for axis in (0..shape.len()).rev() {
                idx[axis] += 1;
                if idx[axis] < shape[axis] {
                    break;
                }
                idx[axis] = 0;
            }
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    /// Flat offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.shape.len() {
            return shape_err(format!(
                "index of rank {} into tensor of rank {}",
                index.len(),
                self.shape.len()
            ));
        }
        let mut off = 0;
        let mut stride = 1;
        for axis in (0..index.len()).rev() {
            if index[axis] >= self.shape[axis] {
                return Err(CrossdError::Index {
                    axis,
                    pos: index[axis],
                    extent: self.shape[axis],
                });
            }
            off += index[axis] * stride;
            stride *= self.shape[axis];
        }
        Ok(off)
    }

    pub fn get(&self, index: &[usize]) -> Result<T> {
        Ok(self.data[self.offset(index)?])
    }

    pub fn set(&mut self, index: &[usize], value: T) -> Result<()> {
        let off = self.offset(index)?;
        self.data[off] = value;
        Ok(())
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::from_values(shape, self.data)
    }

    /// Fixes `axis` at `pos`, dropping that axis.
    pub fn slice_axis(&self, axis: usize, pos: usize) -> Result<Self> {
        if axis >= self.rank() {
            return shape_err(format!("axis {axis} out of range for rank {}", self.rank()));
        }
        let extent = self.shape[axis];
        if pos >= extent {
            return Err(CrossdError::Index { axis, pos, extent });
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let start = (o * extent + pos) * inner;
            data.extend_from_slice(&self.data[start..start + inner]);
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        Ok(Self { shape, data })
    }

    /// Inverse of [`Tensor::slice_axis`] for a single plane: a tensor of this
    /// tensor's shape with `axis` inserted at extent `extent`, holding `self`
    /// at `pos` and zeros elsewhere.
    pub fn embed_axis(&self, axis: usize, pos: usize, extent: usize) -> Result<Self> {
        if axis > self.rank() {
            return shape_err(format!("axis {axis} out of range for rank {}", self.rank()));
        }
        if pos >= extent {
            return Err(CrossdError::Index { axis, pos, extent });
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis..].iter().product();
        let mut shape = self.shape.clone();
        shape.insert(axis, extent);
        let mut data = vec![T::zero(); outer * extent * inner];
        for o in 0..outer {
            let dst = (o * extent + pos) * inner;
            data[dst..dst + inner].copy_from_slice(&self.data[o * inner..(o + 1) * inner]);
        }
        Ok(Self { shape, data })
    }

    /// Circular shift: the element at `i` moves to `(i + shift) mod extent`.
    pub fn roll(&self, shifts: &[isize]) -> Result<Self> {
        if shifts.len() != self.rank() {
            return shape_err(format!(
                "{} shifts given for tensor of rank {}",
                shifts.len(),
                self.rank()
            ));
        }
        let shifts: Vec<usize> = shifts
            .iter()
            .zip(&self.shape)
            .map(|(&s, &e)| s.rem_euclid(e as isize) as usize)
            .collect();
        let strides = self.strides();
        let mut out = vec![T::zero(); self.data.len()];
        let mut idx = vec![0usize; self.rank()];
        for &v in &self.data {
            let dst: usize = idx
                .iter()
                .zip(&shifts)
                .zip(self.shape.iter().zip(&strides))
                .map(|((&i, &s), (&e, &st))| ((i + s) % e) * st)
                .sum();
            out[dst] = v;
            for axis in (0..self.rank()).rev() {
                idx[axis] += 1;
                if idx[axis] < self.shape[axis] {
                    break;
                }
                idx[axis] = 0;
            }
        }
        Ok(Self { shape: self.shape.clone(), data: out })
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn l2_norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn zip_with(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return shape_err(format!("shape mismatch {:?} vs {:?}", self.shape, other.shape));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self { shape: self.shape.clone(), data })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        if self.shape != other.shape {
            return shape_err(format!("shape mismatch {:?} vs {:?}", self.shape, other.shape));
        }
        Ok(self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).sum())
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return shape_err(format!("shape mismatch {:?} vs {:?}", self.shape, other.shape));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, factor: T) -> Self {
        self.map(|v| v * factor)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        Ok(self.sub(other)?.max_abs())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::lit(v.to_f64_lossy())).collect(),
        }
    }
}

/// Complex counterpart of [`Tensor`]; `Complex<T>` is laid out as an
/// interleaved `(re, im)` pair.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexTensor<T> {
    shape: Vec<usize>,
    data: Vec<Complex<T>>,
}

impl<T: Scalar> ComplexTensor<T> {
    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let n = check_extents(shape)?;
        Ok(Self { shape: shape.to_vec(), data: vec![Complex::new(T::zero(), T::zero()); n] })
    }

    pub fn from_values(shape: &[usize], data: Vec<Complex<T>>) -> Result<Self> {
        let n = check_extents(shape)?;
        if n != data.len() {
            return shape_err(format!(
                "shape {shape:?} holds {n} elements but {} values were given",
                data.len()
            ));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn from_real(t: &Tensor<T>) -> Self {
        Self {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&v| Complex::new(v, T::zero())).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[Complex<T>] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex<T>] {
        &mut self.data
    }

    pub fn get(&self, index: &[usize]) -> Result<Complex<T>> {
        let probe = Tensor::<T> { shape: self.shape.clone(), data: Vec::new() };
        Ok(self.data[probe.offset(index)?])
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        if self.shape != other.shape {
            return shape_err(format!("shape mismatch {:?} vs {:?}", self.shape, other.shape));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).collect();
        Ok(Self { shape: self.shape.clone(), data })
    }

    pub fn conj(&self) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|c| c.conj()).collect() }
    }

    /// Real part and the largest absolute imaginary part.
    pub fn split_real(&self) -> (Tensor<T>, T) {
        let residual = self.data.iter().fold(T::zero(), |m, c| m.max(c.im.abs()));
        let data = self.data.iter().map(|c| c.re).collect();
        (Tensor { shape: self.shape.clone(), data }, residual)
    }
}

/// 3×3 matrix times 3-vector.
pub fn matmul3<T: Scalar>(a: &[[T; 3]; 3], v: [T; 3]) -> [T; 3] {
    let mut out = [T::zero(); 3];
    for (o, row) in out.iter_mut().zip(a) {
        *o = row[0] * v[0] + row[1] * v[1] + row[2] * v[2];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arange(shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product::<usize>();
        Tensor::from_values(shape, (0..n).map(|v| v as f64).collect()).unwrap()
    }

    #[test]
    fn fills() {
        assert_eq!(Tensor::<f64>::zeros(&[2, 2]).unwrap().data(), &[0.0; 4]);
        assert_eq!(Tensor::<f64>::ones(&[3]).unwrap().data(), &[1.0; 3]);
        let t = Tensor::from_values(&[2], vec![5.0, 7.0]).unwrap();
        assert_eq!(t.data(), &[5.0, 7.0]);
    }

    #[test]
    fn zero_extent_rejected() {
        assert!(matches!(Tensor::<f64>::zeros(&[2, 0]), Err(CrossdError::Shape(_))));
        assert!(Tensor::from_values(&[3], vec![1.0f64; 2]).is_err());
    }

    #[test]
    fn middle_plane_of_cube() {
        let t = arange(&[3, 3, 3]);
        let mid = t.slice_axis(2, 1).unwrap();
        assert_eq!(mid.shape(), &[3, 3]);
        let expected: Vec<f64> = (0..9).map(|i| (i * 3 + 1) as f64).collect();
        assert_eq!(mid.data(), expected.as_slice());
    }

    #[test]
    fn slice_out_of_range() {
        let t = arange(&[3, 3, 3]);
        assert!(matches!(t.slice_axis(2, 3), Err(CrossdError::Index { pos: 3, .. })));
    }

    #[test]
    fn slice_matches_loop_extraction() {
        let t = arange(&[2, 3, 4]);
        for axis in 0..3 {
            let s = t.slice_axis(axis, 0).unwrap();
            let mut expected = Vec::new();
            for i in 0..2 {
                for j in 0..3 {
                    for k in 0..4 {
                        if [i, j, k][axis] == 0 {
                            expected.push(t.get(&[i, j, k]).unwrap());
                        }
                    }
                }
            }
            assert_eq!(s.data(), expected.as_slice());
        }
    }

    #[test]
    fn embed_is_slice_inverse() {
        let t = arange(&[2, 3]);
        let e = t.embed_axis(1, 2, 5).unwrap();
        assert_eq!(e.shape(), &[2, 5, 3]);
        assert_eq!(e.slice_axis(1, 2).unwrap(), t);
        assert_eq!(e.sum(), t.sum());
    }

    #[test]
    fn roll_basics() {
        let t = Tensor::from_values(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(t.roll(&[1]).unwrap().data(), &[3.0, 1.0, 2.0]);
        assert_eq!(t.roll(&[0]).unwrap(), t);
        let m = arange(&[3, 4]);
        assert_eq!(m.roll(&[2, -3]).unwrap().roll(&[-2, 3]).unwrap(), m);
        assert!(t.roll(&[1, 1]).is_err());
    }

    #[test]
    fn norms_and_matmul() {
        let t = Tensor::from_values(&[2], vec![3.0, 4.0]).unwrap();
        assert_eq!(t.l2_norm(), 5.0);
        let id = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert_eq!(matmul3(&id, [1.0, 2.0, 3.0]), [1.0, 2.0, 3.0]);
        let rz = [[1.0, -0.1, 0.0], [0.1, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert_eq!(matmul3(&rz, [1.0, 0.0, 0.0]), [1.0, 0.1, 0.0]);
    }

    #[test]
    fn mismatched_shapes_error() {
        let a = arange(&[2, 2]);
        let b = arange(&[4]);
        assert!(a.add(&b).is_err());
        assert!(a.dot(&b).is_err());
    }

    fn shape_strategy() -> impl Strategy<Value = Vec<usize>> {
        prop::collection::vec(1usize..=8, 1..=5).prop_filter("size", |s| {
            s.iter().product::<usize>() <= 4096
        })
    }

    proptest! {
        #[test]
        fn row_major_round_trip(shape in shape_strategy()) {
            let mut t = Tensor::<f64>::zeros(&shape).unwrap();
            let strides = t.strides();
            let mut written = Vec::new();
            let src = Tensor::<f64>::from_fn(&shape, |idx| {
                idx.iter().zip(&strides).map(|(&i, &s)| (i * s) as f64).sum::<f64>() + 0.5
            }).unwrap();
            let idxs: Vec<Vec<usize>> = {
                let mut v = Vec::new();
                Tensor::<f64>::from_fn(&shape, |idx| { v.push(idx.to_vec()); 0.0 }).unwrap();
                v
            };
            for idx in &idxs {
                let value = src.get(idx).unwrap();
                t.set(idx, value).unwrap();
                written.push(value);
            }
            for (idx, &value) in idxs.iter().zip(&written) {
                prop_assert_eq!(t.get(idx).unwrap(), value);
                let off: usize = idx.iter().zip(&strides).map(|(&i, &s)| i * s).sum();
                prop_assert_eq!(t.offset(idx).unwrap(), off);
            }
            prop_assert_eq!(t, src);
        }

        #[test]
        fn roll_composes(
            shape in prop::collection::vec(1usize..=5, 1..=3),
            s1 in prop::collection::vec(-7isize..=7, 3),
            s2 in prop::collection::vec(-7isize..=7, 3),
        ) {
            let t = arange(&shape);
            let r = shape.len();
            let sum: Vec<isize> = s1[..r].iter().zip(&s2[..r]).map(|(a, b)| a + b).collect();
            let two_step = t.roll(&s1[..r]).unwrap().roll(&s2[..r]).unwrap();
            prop_assert_eq!(two_step, t.roll(&sum).unwrap());
        }

        #[test]
        fn squared_norm_is_sum_of_squares(values in prop::collection::vec(-1e3f64..1e3, 1..64)) {
            let n = values.len();
            let t = Tensor::from_values(&[n], values.clone()).unwrap();
            let ss: f64 = values.iter().map(|v| v * v).sum();
            let nn = t.l2_norm().powi(2);
            prop_assert!((nn - ss).abs() <= 1e-12 * ss.max(1e-300));
        }
    }
}
