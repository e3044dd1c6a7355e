//! Certifies the tape's gradients against central finite differences of the
//! plain forward pass, and each primitive's VJP against its forward tangent.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::tape::{Tape, VjpFault};
use super::vjp::{
    jvp_aggregate, jvp_normalize, jvp_rodrigues, jvp_rotate_bank, vjp_aggregate, vjp_conv2d,
    vjp_conv3d, vjp_mid_slice, vjp_normalize, vjp_rodrigues, vjp_rotate_bank,
};
use crate::convops::{
    conv2d, conv3d_weights, crossd_forward_2d, Geometry2, Geometry3, KernelBank5D, RotationMode,
};
use crate::error::{CrossdError, Result};
use crate::rotparam::{aggregate_rotation_params, RawRotationVector, RotParamHead, RotationParams};
use crate::spectral::{mid_slice, rotate_kernels};
use crate::tensor::Tensor;

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub height: usize,
    pub width: usize,
    pub head_kernel: usize,
    pub mode: RotationMode,
    /// Start from an all-zero head (identity rotation through the fallback axis).
    pub zero_head: bool,
    pub step: f64,
    pub threshold: f64,
    pub fault: Option<VjpFault>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            batch: 1,
            in_channels: 1,
            out_channels: 1,
            kernel: 3,
            height: 5,
            width: 5,
            head_kernel: 3,
            mode: RotationMode::PerSample,
            zero_head: false,
            step: 1e-5,
            threshold: 1e-4,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamReport {
    pub name: String,
    pub count: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub params: Vec<ParamReport>,
    pub step: f64,
    pub threshold: f64,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_error <= self.threshold)
    }
}

struct Problem {
    x: Tensor<f64>,
    bank: KernelBank5D<f64>,
    head: RotParamHead<f64>,
    upstream: Tensor<f64>,
    geom: Geometry2,
    mode: RotationMode,
}

impl Problem {
    fn new(cfg: &GradCheckConfig, seed: u64) -> Result<Self> {
        if cfg.height.max(cfg.width).max(cfg.kernel) > 6 {
            return Err(CrossdError::Config(
                "finite-difference checks are limited to extents <= 6".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_fn(&[cfg.batch, cfg.in_channels, cfg.height, cfg.width], |_| {
            rng.gen_range(-1.0..1.0)
        })?;
        let bank = KernelBank5D::random(cfg.out_channels, cfg.in_channels, cfg.kernel, 1, &mut rng)?;
        let head = if cfg.zero_head {
            RotParamHead::zeros(cfg.in_channels, cfg.head_kernel)?
        } else {
            let h = RotParamHead::random(cfg.in_channels, cfg.head_kernel, 1.5, &mut rng)?;
            let bias = Tensor::from_fn(&[4], |_| rng.gen_range(-0.5..0.5))?;
            RotParamHead::new(h.weights().clone(), bias)?
        };
        let geom = Geometry2::same(cfg.kernel);
        let out = geom.output_extent([cfg.height, cfg.width], [cfg.kernel; 2])?;
        let upstream =
            Tensor::from_fn(&[cfg.batch, cfg.out_channels, out[0], out[1]], |_| rng.gen_range(-1.0..1.0))?;
        Ok(Self { x, bank, head, upstream, geom, mode: cfg.mode })
    }

    fn loss(&self, bank: &Tensor<f64>, head_w: &Tensor<f64>, head_b: &Tensor<f64>) -> Result<f64> {
        let bank = self.bank.with_weights(bank.clone())?;
        let head = RotParamHead::new(head_w.clone(), head_b.clone())?;
        let y = crossd_forward_2d(&self.x, &bank, &head, &self.geom, self.mode)?;
        y.dot(&self.upstream)
    }
}

/// Compares tape gradients of `Σ G ⊙ crossd(x)` for a random `G` with central
/// differences, for the bank weights, head weights and head bias.
pub fn grad_check(cfg: &GradCheckConfig, seed: u64) -> Result<GradReport> {
    let problem = Problem::new(cfg, seed)?;

    let mut tape = Tape::new();
    tape.set_fault(cfg.fault);
    let xv = tape.leaf(problem.x.clone());
    let bv = tape.leaf(problem.bank.weights().clone());
    let hw = tape.leaf(problem.head.weights().clone());
    let hb = tape.leaf(problem.head.bias().clone());
    let vars = tape.crossd_forward_2d(xv, bv, None, 1, hw, hb, problem.geom, problem.mode)?;
    let grads = tape.backward(vars.output, problem.upstream.clone())?;

    let leaves = [
        ("bank", bv, 0usize),
        ("head_weights", hw, 1),
        ("head_bias", hb, 2),
    ];
    let base = [
        problem.bank.weights().clone(),
        problem.head.weights().clone(),
        problem.head.bias().clone(),
    ];
    let mut params = Vec::new();
    for (name, var, slot) in leaves {
        let analytic = grads.get_or_zeros(var, &base[slot])?;
        let numeric: Vec<Result<f64>> = (0..base[slot].len())
            .into_par_iter()
            .map(|i| {
                let eval = |delta: f64| {
                    let mut args = base.clone();
                    args[slot].data_mut()[i] += delta;
                    problem.loss(&args[0], &args[1], &args[2])
                };
                let (plus, minus) = (eval(cfg.step)?, eval(-cfg.step)?);
                if !plus.is_finite() || !minus.is_finite() {
                    return Err(CrossdError::NonFinite(format!("loss while perturbing {name}[{i}]")));
                }
                Ok((plus - minus) / (2.0 * cfg.step))
            })
            .collect();

        let mut report = ParamReport {
            name: name.to_string(),
            count: analytic.len(),
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for (i, (&a, n)) in analytic.data().iter().zip(numeric).enumerate() {
            let n = n?;
            if !a.is_finite() {
                return Err(CrossdError::NonFinite(format!("analytic gradient {name}[{i}]")));
            }
            report.max_abs_error = report.max_abs_error.max((a - n).abs());
            let e = relative_error(a, n);
            if e > report.max_rel_error || i == 0 {
                report.max_rel_error = report.max_rel_error.max(e);
                report.worst_index = i;
                report.analytic = a;
                report.numeric = n;
            }
        }
        params.push(report);
    }
    Ok(GradReport { params, step: cfg.step, threshold: cfg.threshold })
}

/// One `⟨u, J·dx⟩ = ⟨Jᵀ·u, dx⟩` comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct AdjointCheck {
    pub name: &'static str,
    pub forward: f64,
    pub adjoint: f64,
}

impl AdjointCheck {
    pub fn rel_error(&self) -> f64 {
        (self.forward - self.adjoint).abs() / self.forward.abs().max(self.adjoint.abs()).max(1e-300)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Dot-product tests for every primitive. Linear maps use the forward
/// operator itself as `J`; nonlinear ones use their forward tangents.
pub fn adjoint_checks(seed: u64) -> Result<Vec<AdjointCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rt = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0));
    let mut checks = Vec::new();

    // conv2d, both arguments
    let geom = Geometry2::new([1, 2], [1, 0])?;
    let x = rt(&[2, 4, 6, 5])?;
    let w = rt(&[2, 2, 3, 3])?;
    let dx = rt(&[2, 4, 6, 5])?;
    let dw = rt(&[2, 2, 3, 3])?;
    let u = rt(conv2d(&x, &w, &geom, 2, None)?.shape())?;
    let (gx, gw) = vjp_conv2d(&u, &x, &w, &geom, 2)?;
    checks.push(AdjointCheck {
        name: "conv2d/input",
        forward: u.dot(&conv2d(&dx, &w, &geom, 2, None)?)?,
        adjoint: gx.dot(&dx)?,
    });
    checks.push(AdjointCheck {
        name: "conv2d/weight",
        forward: u.dot(&conv2d(&x, &dw, &geom, 2, None)?)?,
        adjoint: gw.dot(&dw)?,
    });

    // conv3d, both arguments
    let geom3 = Geometry3::new([1, 2, 1], [1, 1, 0])?;
    let x = rt(&[1, 2, 4, 5, 5])?;
    let w = rt(&[3, 2, 3, 3, 3])?;
    let dx = rt(&[1, 2, 4, 5, 5])?;
    let dw = rt(&[3, 2, 3, 3, 3])?;
    let u = rt(conv3d_weights(&x, &w, &geom3, 1, None)?.shape())?;
    let (gx, gw) = vjp_conv3d(&u, &x, &w, &geom3, 1)?;
    checks.push(AdjointCheck {
        name: "conv3d/input",
        forward: u.dot(&conv3d_weights(&dx, &w, &geom3, 1, None)?)?,
        adjoint: gx.dot(&dx)?,
    });
    checks.push(AdjointCheck {
        name: "conv3d/weight",
        forward: u.dot(&conv3d_weights(&x, &dw, &geom3, 1, None)?)?,
        adjoint: gw.dot(&dw)?,
    });

    // softmax aggregation
    let f = rt(&[2, 4, 3, 3])?;
    let df = rt(&[2, 4, 3, 3])?;
    let u = rt(&[2, 4])?;
    checks.push(AdjointCheck {
        name: "aggregate",
        forward: u.dot(&jvp_aggregate(&f, &df)?)?,
        adjoint: vjp_aggregate(&u, &f)?.dot(&df)?,
    });
    debug_assert_eq!(aggregate_rotation_params(&f)?.len(), 2);

    // axis normalization and angle squashing
    let raw = RawRotationVector([0.7, -0.2, 0.4, 0.6]);
    let d_raw = [0.3, 0.5, -0.8, 0.2];
    let (ua, ut) = ([0.9, -0.4, 0.1], -0.7);
    let (ja, jt) = jvp_normalize(&raw, d_raw);
    let g = vjp_normalize(&raw, ua, ut);
    checks.push(AdjointCheck {
        name: "normalize",
        forward: dot(&ua, &ja) + ut * jt,
        adjoint: dot(&g, &d_raw),
    });

    // small-angle Rodrigues matrix
    let p = RotationParams::from_axis_angle([0.3, 0.5, -0.2], 0.4)?;
    let (da, dt) = ([0.2, -0.1, 0.6], 0.3);
    let ur = [[0.5, -0.3, 0.2], [0.1, 0.9, -0.6], [-0.4, 0.7, 0.8]];
    let jr = jvp_rodrigues(&p, da, dt);
    let (ga, gt) = vjp_rodrigues(&p, &ur);
    checks.push(AdjointCheck {
        name: "rodrigues",
        forward: (0..3).map(|i| dot(&ur[i], &jr[i])).sum(),
        adjoint: dot(&ga, &da) + gt * dt,
    });

    // phase-shift rotation: bank and rotation parameters
    let bank = rt(&[2, 2, 5, 5, 5])?;
    let d_bank = rt(&[2, 2, 5, 5, 5])?;
    let u = rt(&[2, 2, 5, 5, 5])?;
    let g = vjp_rotate_bank(&u, &bank, &p)?;
    checks.push(AdjointCheck {
        name: "rotate_bank/bank",
        forward: u.dot(&rotate_kernels(&d_bank, &p)?.weights)?,
        adjoint: g.bank.dot(&d_bank)?,
    });
    let zero = Tensor::zeros(bank.shape())?;
    checks.push(AdjointCheck {
        name: "rotate_bank/rotation",
        forward: u.dot(&jvp_rotate_bank(&bank, &p, &zero, da, dt)?)?,
        adjoint: dot(&g.axis, &da) + g.angle * dt,
    });

    // middle-slice extraction
    let v = rt(&[2, 3, 5, 5, 5])?;
    let u = rt(&[2, 3, 5, 5])?;
    checks.push(AdjointCheck {
        name: "mid_slice",
        forward: u.dot(&mid_slice(&v)?)?,
        adjoint: vjp_mid_slice(&u, 5)?.dot(&v)?,
    });

    Ok(checks)
}
