//! Minimal explicit tape for the Cross-D pipeline.
//!
//! Every value is a [`Tensor`]; each recorded node keeps the handles of its
//! inputs and whatever shape metadata its VJP needs. `backward` replays the
//! nodes in reverse order and accumulates gradients into every value.
//!
//! Rotation parameters live on the tape as `n × 4` tensors holding
//! `(a_x, a_y, a_z, θ)` per row; raw rotation vectors use the same layout with
//! `(k_x, k_y, k_z, θ_raw)`.

use crate::convops::{bias_grad, conv2d, Geometry2, RotationMode};
use crate::error::{shape_err, CrossdError, Result};
use crate::rotparam::{
    aggregate_rotation_params, normalize_rotation, RawRotationVector, RotationParams,
    HEAD_CHANNELS,
};
use crate::scalar::Scalar;
use crate::spectral::{mid_slice, rotate_kernels};
use crate::tensor::Tensor;

use super::vjp::{vjp_aggregate, vjp_conv2d, vjp_mid_slice, vjp_normalize, vjp_rotate_bank};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Deliberate VJP corruptions used as negative controls for gradient checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VjpFault {
    /// Negates the angle gradient leaving the rotation stage.
    FlipAngleSign,
}

#[derive(Clone, Debug)]
enum Node<T> {
    Leaf,
    Conv2d { x: Var, w: Var, bias: Option<Var>, geom: Geometry2, groups: usize },
    Aggregate { features: Var },
    BatchMean { raw: Var },
    Normalize { raw: Var },
    RotateBank { bank: Var, params: Var },
    MidSlice { rotated: Var, kernel: usize },
    SampleConv2d { x: Var, kernels: Var, bias: Option<Var>, geom: Geometry2, groups: usize },
    Relu { x: Var },
    GlobalAvgPool { x: Var },
    Linear { x: Var, w: Var, b: Var },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize> },
    WeightedSum { x: Var, weights: Tensor<T> },
}

/// Handles produced by [`Tape::crossd_forward_2d`].
#[derive(Clone, Copy, Debug)]
pub struct CrossdVars {
    pub features: Var,
    pub raw: Var,
    pub params: Var,
    pub rotated: Var,
    pub kernels: Var,
    pub output: Var,
}

#[derive(Clone, Debug)]
pub struct Tape<T> {
    values: Vec<Tensor<T>>,
    nodes: Vec<Node<T>>,
    fault: Option<VjpFault>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn params_row<T: Scalar>(t: &Tensor<T>, i: usize) -> RotationParams<T> {
    let r = &t.data()[i * 4..i * 4 + 4];
    RotationParams { axis: [r[0], r[1], r[2]], angle: r[3], degenerate: false }
}

fn raw_row<T: Scalar>(t: &Tensor<T>, i: usize) -> RawRotationVector<T> {
    let r = &t.data()[i * 4..i * 4 + 4];
    RawRotationVector([r[0], r[1], r[2], r[3]])
}

fn sample<T: Scalar>(t: &Tensor<T>, b: usize) -> Result<Tensor<T>> {
    t.slice_axis(0, b)?.embed_axis(0, 0, 1)
}

fn stack<T: Scalar>(parts: Vec<Tensor<T>>) -> Result<Tensor<T>> {
    let mut shape = parts[0].shape().to_vec();
    shape[0] = parts.iter().map(|p| p.shape()[0]).sum();
    Tensor::from_values(&shape, parts.into_iter().flat_map(Tensor::into_data).collect())
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { values: Vec::new(), nodes: Vec::new(), fault: None }
    }

    pub fn set_fault(&mut self, fault: Option<VjpFault>) {
        self.fault = fault;
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, node: Node<T>) -> Var {
        self.values.push(value);
        self.nodes.push(node);
        Var(self.values.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Node::Leaf)
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: Geometry2,
        groups: usize,
    ) -> Result<Var> {
        let y = conv2d(self.value(x), self.value(w), &geom, groups, bias.map(|b| self.value(b)))?;
        Ok(self.push(y, Node::Conv2d { x, w, bias, geom, groups }))
    }

    /// `B × 4 × H × W` features to `B × 4` raw rotation vectors.
    pub fn aggregate(&mut self, features: Var) -> Result<Var> {
        let raw = aggregate_rotation_params(self.value(features))?;
        let data = raw.iter().flat_map(|r| r.0).collect();
        let t = Tensor::from_values(&[raw.len(), HEAD_CHANNELS], data)?;
        Ok(self.push(t, Node::Aggregate { features }))
    }

    /// Row mean of an `n × 4` tensor, giving `1 × 4`.
    pub fn batch_mean(&mut self, raw: Var) -> Result<Var> {
        let t = self.value(raw);
        let n = t.shape()[0];
        let rows: Vec<_> = (0..n).map(|i| raw_row(t, i)).collect();
        let mean = RawRotationVector::mean(&rows)?;
        let t = Tensor::from_values(&[1, HEAD_CHANNELS], mean.0.to_vec())?;
        Ok(self.push(t, Node::BatchMean { raw }))
    }

    pub fn normalize(&mut self, raw: Var) -> Result<Var> {
        let t = self.value(raw);
        let n = t.shape()[0];
        let data = (0..n)
            .flat_map(|i| {
                let p = normalize_rotation(&raw_row(t, i));
                [p.axis[0], p.axis[1], p.axis[2], p.angle]
            })
            .collect();
        let t = Tensor::from_values(&[n, 4], data)?;
        Ok(self.push(t, Node::Normalize { raw }))
    }

    /// Rotates `bank` once per parameter row: `n × (bank shape)`.
    pub fn rotate_bank(&mut self, bank: Var, params: Var) -> Result<Var> {
        let (w, pt) = (self.value(bank), self.value(params));
        let n = pt.shape()[0];
        let mut parts = Vec::with_capacity(n);
        for i in 0..n {
            let rotated = rotate_kernels(w, &params_row(pt, i))?.weights;
            parts.push(rotated.embed_axis(0, 0, 1)?);
        }
        let t = stack(parts)?;
        Ok(self.push(t, Node::RotateBank { bank, params }))
    }

    pub fn mid_slice(&mut self, rotated: Var) -> Result<Var> {
        let t = self.value(rotated);
        let kernel = t.shape()[t.rank() - 1];
        let s = mid_slice(t)?;
        Ok(self.push(s, Node::MidSlice { rotated, kernel }))
    }

    /// Convolves sample `b` with kernel set `b` (or kernel set 0 for all
    /// samples when only one is present).
    pub fn sample_conv2d(
        &mut self,
        x: Var,
        kernels: Var,
        bias: Option<Var>,
        geom: Geometry2,
        groups: usize,
    ) -> Result<Var> {
        let (xt, kt) = (self.value(x), self.value(kernels));
        let n = kt.shape()[0];
        let batch = xt.shape()[0];
        let bias_t = bias.map(|b| self.value(b));
        let y = if n == 1 {
            conv2d(xt, &kt.slice_axis(0, 0)?, &geom, groups, bias_t)?
        } else if n == batch {
            let mut parts = Vec::with_capacity(batch);
            for b in 0..batch {
                parts.push(conv2d(&sample(xt, b)?, &kt.slice_axis(0, b)?, &geom, groups, bias_t)?);
            }
            stack(parts)?
        } else {
            return shape_err(format!("{n} kernel sets for batch of {batch}"));
        };
        Ok(self.push(y, Node::SampleConv2d { x, kernels, bias, geom, groups }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.max(T::zero()));
        self.push(y, Node::Relu { x })
    }

    /// `B × C × …` to `B × C` by averaging the trailing axes.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        if s.len() < 3 {
            return shape_err(format!("pooling needs rank >= 3, got {s:?}"));
        }
        let inner: usize = s[2..].iter().product();
        let n = T::from_usize_lossy(inner);
        let data = t.data().chunks(inner).map(|c| c.iter().copied().sum::<T>() / n).collect();
        let y = Tensor::from_values(&s[..2], data)?;
        Ok(self.push(y, Node::GlobalAvgPool { x }))
    }

    /// `y = x Wᵀ + b` for `x: B × F`, `W: O × F`, `b: O`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xt, wt, bt) = (self.value(x), self.value(w), self.value(b));
        let (bs, f) = (xt.shape()[0], xt.shape()[1]);
        let o = wt.shape()[0];
        if xt.rank() != 2 || wt.shape() != [o, f] || bt.shape() != [o] {
            return shape_err(format!(
                "linear: x {:?}, w {:?}, b {:?}",
                xt.shape(),
                wt.shape(),
                bt.shape()
            ));
        }
        let mut y = Vec::with_capacity(bs * o);
        for row in xt.data().chunks(f) {
            for (wr, &bv) in wt.data().chunks(f).zip(bt.data()) {
                y.push(row.iter().zip(wr).map(|(&a, &c)| a * c).sum::<T>() + bv);
            }
        }
        let y = Tensor::from_values(&[bs, o], y)?;
        Ok(self.push(y, Node::Linear { x, w, b }))
    }

    /// Mean softmax cross-entropy over the batch, as a `[1]` tensor.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (bs, c) = (t.shape()[0], t.shape()[1]);
        if labels.len() != bs || labels.iter().any(|&l| l >= c) {
            return Err(CrossdError::Config(format!("labels {labels:?} for logits {:?}", t.shape())));
        }
        let mut loss = T::zero();
        for (row, &label) in t.data().chunks(c).zip(labels) {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            loss += lse - row[label];
        }
        let y = Tensor::from_values(&[1], vec![loss / T::from_usize_lossy(bs)])?;
        Ok(self.push(y, Node::SoftmaxCrossEntropy { logits, labels: labels.to_vec() }))
    }

    /// `Σ weights ⊙ x` as a `[1]` tensor.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor<T>) -> Result<Var> {
        let s = self.value(x).dot(&weights)?;
        let y = Tensor::from_values(&[1], vec![s])?;
        Ok(self.push(y, Node::WeightedSum { x, weights }))
    }

    /// Records the whole 2D Cross-D layer.
    #[allow(clippy::too_many_arguments)]
    pub fn crossd_forward_2d(
        &mut self,
        x: Var,
        bank: Var,
        bank_bias: Option<Var>,
        groups: usize,
        head_w: Var,
        head_b: Var,
        geom: Geometry2,
        mode: RotationMode,
    ) -> Result<CrossdVars> {
        let head_k = self.value(head_w).shape()[2];
        let features = self.conv2d(x, head_w, Some(head_b), Geometry2::same(head_k), 1)?;
        let raw = self.aggregate(features)?;
        let pooled = match mode {
            RotationMode::PerSample => raw,
            RotationMode::BatchMean => self.batch_mean(raw)?,
        };
        let params = self.normalize(pooled)?;
        let rotated = self.rotate_bank(bank, params)?;
        let kernels = self.mid_slice(rotated)?;
        let output = self.sample_conv2d(x, kernels, bank_bias, geom, groups)?;
        Ok(CrossdVars { features, raw, params, rotated, kernels, output })
    }

    /// Reverse pass from `output` seeded with `seed` (same shape as the output).
    pub fn backward(&self, output: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        if seed.shape() != self.value(output).shape() {
            return shape_err(format!(
                "seed {:?} does not match output {:?}",
                seed.shape(),
                self.value(output).shape()
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.values.len()];
        grads[output.0] = Some(seed);
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            for (var, contribution) in self.node_vjp(idx, &g)? {
                match &mut grads[var.0] {
                    Some(existing) => existing.add_assign(&contribution)?,
                    slot => *slot = Some(contribution),
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Reverse pass from a `[1]`-shaped scalar.
    pub fn backward_scalar(&self, loss: Var) -> Result<Gradients<T>> {
        self.backward(loss, Tensor::ones(&[1])?)
    }

    fn node_vjp(&self, idx: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let out = match &self.nodes[idx] {
            Node::Leaf => Vec::new(),
            Node::Conv2d { x, w, bias, geom, groups } => {
                let (gx, gw) = vjp_conv2d(g, self.value(*x), self.value(*w), geom, *groups)?;
                let mut v = vec![(*x, gx), (*w, gw)];
                if let Some(b) = bias {
                    v.push((*b, bias_grad(g)?));
                }
                v
            }
            Node::Aggregate { features } => {
                vec![(*features, vjp_aggregate(g, self.value(*features))?)]
            }
            Node::BatchMean { raw } => {
                let n = self.value(*raw).shape()[0];
                let row = g.scale(T::one() / T::from_usize_lossy(n));
                let data = (0..n).flat_map(|_| row.data().to_vec()).collect();
                vec![(*raw, Tensor::from_values(&[n, 4], data)?)]
            }
            Node::Normalize { raw } => {
                let rt = self.value(*raw);
                let n = rt.shape()[0];
                let data = (0..n)
                    .flat_map(|i| {
                        let gr = &g.data()[i * 4..i * 4 + 4];
                        vjp_normalize(&raw_row(rt, i), [gr[0], gr[1], gr[2]], gr[3])
                    })
                    .collect();
                vec![(*raw, Tensor::from_values(&[n, 4], data)?)]
            }
            Node::RotateBank { bank, params } => {
                let (w, pt) = (self.value(*bank), self.value(*params));
                let n = pt.shape()[0];
                let mut gbank = Tensor::zeros(w.shape())?;
                let mut gparams = Vec::with_capacity(n * 4);
                for i in 0..n {
                    let gi = g.slice_axis(0, i)?;
                    let r = vjp_rotate_bank(&gi, w, &params_row(pt, i))?;
                    gbank.add_assign(&r.bank)?;
                    let angle = match self.fault {
                        Some(VjpFault::FlipAngleSign) => -r.angle,
                        None => r.angle,
                    };
                    gparams.extend([r.axis[0], r.axis[1], r.axis[2], angle]);
                }
                vec![(*bank, gbank), (*params, Tensor::from_values(&[n, 4], gparams)?)]
            }
            Node::MidSlice { rotated, kernel } => {
                vec![(*rotated, vjp_mid_slice(g, *kernel)?)]
            }
            Node::SampleConv2d { x, kernels, bias, geom, groups } => {
                let (xt, kt) = (self.value(*x), self.value(*kernels));
                let n = kt.shape()[0];
                let mut v = if n == 1 {
                    let (gx, gk) = vjp_conv2d(g, xt, &kt.slice_axis(0, 0)?, geom, *groups)?;
                    vec![(*x, gx), (*kernels, gk.embed_axis(0, 0, 1)?)]
                } else {
                    let mut gxs = Vec::with_capacity(n);
                    let mut gks = Vec::with_capacity(n);
                    for b in 0..n {
                        let (gx, gk) = vjp_conv2d(
                            &sample(g, b)?,
                            &sample(xt, b)?,
                            &kt.slice_axis(0, b)?,
                            geom,
                            *groups,
                        )?;
                        gxs.push(gx);
                        gks.push(gk.embed_axis(0, 0, 1)?);
                    }
                    vec![(*x, stack(gxs)?), (*kernels, stack(gks)?)]
                };
                if let Some(b) = bias {
                    v.push((*b, bias_grad(g)?));
                }
                v
            }
            Node::Relu { x } => {
                let xt = self.value(*x);
                let data = xt
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                vec![(*x, Tensor::from_values(xt.shape(), data)?)]
            }
            Node::GlobalAvgPool { x } => {
                let s = self.value(*x).shape();
                let inner: usize = s[2..].iter().product();
                let n = T::from_usize_lossy(inner);
                let data = g.data().iter().flat_map(|&gv| std::iter::repeat(gv / n).take(inner)).collect();
                vec![(*x, Tensor::from_values(s, data)?)]
            }
            Node::Linear { x, w, b } => {
                let (xt, wt) = (self.value(*x), self.value(*w));
                let (bs, f) = (xt.shape()[0], xt.shape()[1]);
                let o = wt.shape()[0];
                let mut gx = vec![T::zero(); bs * f];
                let mut gw = vec![T::zero(); o * f];
                let mut gb = vec![T::zero(); o];
                for n in 0..bs {
                    for j in 0..o {
                        let gv = g.data()[n * o + j];
                        gb[j] += gv;
                        for i in 0..f {
                            gx[n * f + i] += gv * wt.data()[j * f + i];
                            gw[j * f + i] += gv * xt.data()[n * f + i];
                        }
                    }
                }
                vec![
                    (*x, Tensor::from_values(&[bs, f], gx)?),
                    (*w, Tensor::from_values(&[o, f], gw)?),
                    (*b, Tensor::from_values(&[o], gb)?),
                ]
            }
            Node::SoftmaxCrossEntropy { logits, labels } => {
                let t = self.value(*logits);
                let (bs, c) = (t.shape()[0], t.shape()[1]);
                let scale = g.data()[0] / T::from_usize_lossy(bs);
                let mut data = Vec::with_capacity(bs * c);
                for (row, &label) in t.data().chunks(c).zip(labels) {
                    let p = crate::rotparam::softmax(row);
                    for (j, pj) in p.into_iter().enumerate() {
                        let target = if j == label { T::one() } else { T::zero() };
                        data.push((pj - target) * scale);
                    }
                }
                vec![(*logits, Tensor::from_values(&[bs, c], data)?)]
            }
            Node::WeightedSum { x, weights } => vec![(*x, weights.scale(g.data()[0]))],
        };
        Ok(out)
    }
}

/// Accumulated gradients, indexed by [`Var`].
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` if nothing reached it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor<T>) -> Result<Tensor<T>> {
        match self.get(v) {
            Some(g) => Ok(g.clone()),
            None => Tensor::zeros(like.shape()),
        }
    }
}
