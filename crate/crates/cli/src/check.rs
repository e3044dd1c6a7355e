//! Invariant suites run by `crossd check`. Every comparison is against the
//! plain-loop references in `crossd-oracle` or an explicit closed form.

use std::fmt;
use std::path::Path;

use clap::ValueEnum;
use crossd::autograd::{adjoint_checks, grad_check, GradCheckConfig, VjpFault};
use crossd::spectral::{fft3, ifft3_real};
use crossd::transfer::{
    decode_archive, derive_2d_kernels, derive_3d_kernels, encode_archive, load_archive,
    save_archive,
};
use crossd::{
    acs_conv3d, aggregate_rotation_params, conv2d, conv3d, mid_slice, rotate_bank, rotate_kernels,
    CrossdError, Geometry2, Geometry3, KernelBank5D, RotationParams, Tensor,
};
use crossd_oracle as oracle;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    #[default]
    All,
    Spectral,
    Conv,
    Grad,
    Transfer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self { name: name.to_string(), passed, detail }
    }

    fn from_result(name: &str, r: Result<String, String>) -> Self {
        match r {
            Ok(detail) => Self::new(name, true, detail),
            Err(detail) => Self::new(name, false, detail),
        }
    }
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

type Check = Result<String, String>;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0)).expect("non-empty shape")
}

fn random_rotation(rng: &mut ChaCha8Rng) -> RotationParams<f64> {
    loop {
        let axis = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let angle = rng.gen_range(-std::f64::consts::FRAC_PI_4..=std::f64::consts::FRAC_PI_4);
        if let Ok(p) = RotationParams::from_axis_angle(axis, angle) {
            return p;
        }
    }
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn core(e: CrossdError) -> String {
    e.to_string()
}

/// `(I + θ[a]×)ᵀ (1,1,1)`, written out by hand.
fn expected_shift(p: &RotationParams<f64>) -> [f64; 3] {
    let [ax, ay, az] = p.axis;
    let t = p.angle;
    [1.0 + t * (az - ay), 1.0 + t * (ax - az), 1.0 + t * (ay - ax)]
}

/// With θ = 0 the phase-shift rotation is an integer roll by (1,1,1).
pub fn shift_theorem(trials: usize, seed: u64) -> CheckOutcome {
    let run = || -> Check {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = 0.0f64;
        for _ in 0..trials {
            let (co, ci) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
            let k = [3, 5, 7][rng.gen_range(0..3)];
            let bank = KernelBank5D::new(rand_tensor(&[co, ci, k, k, k], &mut rng), 1).map_err(core)?;
            let axis = random_rotation(&mut rng).axis;
            let p = RotationParams::from_axis_angle(axis, 0.0).map_err(core)?;
            let got = rotate_bank(&bank, &p).map_err(core)?;
            let want = bank.weights().roll(&[0, 0, 1, 1, 1]).map_err(core)?;
            worst = worst.max(max_diff(got.weights.data(), want.data()));
        }
        let detail = format!("{trials} banks, max |rotate - roll(1,1,1)| = {worst:.3e} (tol 1e-10)");
        if worst <= 1e-10 { Ok(detail) } else { Err(detail) }
    };
    CheckOutcome::from_result("shift-theorem roll oracle", run())
}

/// Norm preservation and real-valuedness of the inverse transform.
pub fn unitarity(trials: usize, seed: u64) -> CheckOutcome {
    let run = || -> Check {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut worst_ratio, mut worst_residual) = (0.0f64, 0.0f64);
        for _ in 0..trials {
            let (co, ci) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
            let k = [1, 3, 5, 7][rng.gen_range(0..4)];
            let bank = KernelBank5D::new(rand_tensor(&[co, ci, k, k, k], &mut rng), 1).map_err(core)?;
            let rotated = rotate_bank(&bank, &random_rotation(&mut rng)).map_err(core)?;
            let ratio = rotated.weights.l2_norm() / bank.weights().l2_norm();
            worst_ratio = worst_ratio.max((ratio - 1.0).abs());
            worst_residual = worst_residual.max(rotated.imag_residual);
        }
        let detail = format!(
            "{trials} pairs, max |ratio - 1| = {worst_ratio:.3e} (tol 1e-6), max imaginary residual = {worst_residual:.3e} (tol 1e-8)"
        );
        if worst_ratio <= 1e-6 && worst_residual <= 1e-8 { Ok(detail) } else { Err(detail) }
    };
    CheckOutcome::from_result("unitarity", run())
}

/// Rotation equals a band-limited fractional shift along `Rᵀ(1,1,1)`.
pub fn fractional_shift(trials: usize, seed: u64) -> CheckOutcome {
    let run = || -> Check {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = 0.0f64;
        for _ in 0..trials {
            let k = [3, 5, 7][rng.gen_range(0..3)];
            let p = random_rotation(&mut rng);
            let kernel = rand_tensor(&[1, 1, k, k, k], &mut rng);
            let got = rotate_kernels(&kernel, &p).map_err(core)?;
            let want = oracle::fractional_shift3(kernel.data(), k, expected_shift(&p));
            worst = worst.max(max_diff(got.weights.data(), &want));
        }
        let detail = format!("{trials} rotations, max error vs Dirichlet shift = {worst:.3e} (tol 1e-8)");
        if worst <= 1e-8 { Ok(detail) } else { Err(detail) }
    };
    CheckOutcome::from_result("fractional-shift oracle", run())
}

/// Separable FFT against the naive triple-sum DFT, plus the round trip.
pub fn fft_oracle(trials: usize, seed: u64) -> CheckOutcome {
    let run = || -> Check {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut worst, mut round) = (0.0f64, 0.0f64);
        for _ in 0..trials {
            let dims = [rng.gen_range(1..=7), rng.gen_range(1..=7), rng.gen_range(1..=7)];
            let v = rand_tensor(&dims, &mut rng);
            let spec = fft3(&v).map_err(core)?;
            for (c, (re, im)) in spec.data().iter().zip(oracle::naive_dft3(v.data(), dims)) {
                worst = worst.max((c.re - re).abs()).max((c.im - im).abs());
            }
            let (back, _) = ifft3_real(&spec).map_err(core)?;
            round = round.max(max_diff(back.data(), v.data()));
        }
        let detail = format!("{trials} volumes, max error vs naive DFT = {worst:.3e}, round trip = {round:.3e} (tol 1e-10)");
        if worst <= 1e-10 && round <= 1e-10 { Ok(detail) } else { Err(detail) }
    };
    CheckOutcome::from_result("fft vs naive dft", run())
}

/// Softmax-weighted aggregation: constant fields, saturation, explicit sum.
pub fn aggregation(trials: usize, seed: u64) -> CheckOutcome {
    let run = || -> Check {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut constant, mut oracle_err) = (0.0f64, 0.0f64);
        for _ in 0..trials {
            let (b, h, w) = (rng.gen_range(1..=3), rng.gen_range(1..=6), rng.gen_range(1..=6));
            let values: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-5.0..5.0));
            let f = Tensor::from_fn(&[b, 4, h, w], |i| values[i[1]]).map_err(core)?;
            for r in aggregate_rotation_params(&f).map_err(core)? {
                constant = constant.max(max_diff(&r.0, &values));
            }
            let f = rand_tensor(&[b, 4, h, w], &mut rng).scale(3.0);
            let got: Vec<f64> =
                aggregate_rotation_params(&f).map_err(core)?.iter().flat_map(|r| r.0).collect();
            let want = oracle::softmax_weighted_sum(f.data(), [b, 4, h, w]);
            oracle_err = oracle_err.max(max_diff(&got, &want));
        }
        // one spike of height m over a 0.1 floor: r → m as m grows
        let mut saturation = 0.0f64;
        for m in [20.0f64, 60.0, 200.0] {
            let f = Tensor::from_fn(&[1, 4, 3, 3], |i| if i[2] == 2 && i[3] == 1 { m } else { 0.1 })
                .map_err(core)?;
            let r = &aggregate_rotation_params(&f).map_err(core)?[0];
            saturation = saturation.max(r.0.iter().map(|&v| (v - m).abs() / m).fold(0.0, f64::max));
        }
        let detail = format!(
            "{trials} fields, constant identity err {constant:.3e}, explicit-sum err {oracle_err:.3e} (tol 1e-12), saturation rel err {saturation:.3e} (tol 1e-6)"
        );
        if constant <= 1e-12 && oracle_err <= 1e-12 && saturation <= 1e-6 {
            Ok(detail)
        } else {
            Err(detail)
        }
    };
    CheckOutcome::from_result("aggregation properties", run())
}

/// conv2d, conv3d and ACS against nested-loop references on small instances.
pub fn conv_oracles(trials: usize, seed: u64) -> CheckOutcome {
    let run = || -> Check {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut e2, mut e3, mut ea) = (0.0f64, 0.0f64, 0.0f64);
        for _ in 0..trials {
            // conv2d with groups, stride, padding and bias
            let groups = rng.gen_range(1..=2);
            let (cig, cog) = (rng.gen_range(1..=3), rng.gen_range(1..=2));
            let (kh, kw) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
            let (h, w) = (rng.gen_range(kh..=8), rng.gen_range(kw..=8));
            let stride = [rng.gen_range(1..=2), rng.gen_range(1..=2)];
            let pad = [rng.gen_range(0..=2), rng.gen_range(0..=2)];
            let b = rng.gen_range(1..=2);
            let xs = [b, cig * groups, h, w];
            let ws = [cog * groups, cig, kh, kw];
            let x = rand_tensor(&xs, &mut rng);
            let wt = rand_tensor(&ws, &mut rng);
            let bias = rand_tensor(&[ws[0]], &mut rng);
            let g = Geometry2::new(stride, pad).map_err(core)?;
            let got = conv2d(&x, &wt, &g, groups, Some(&bias)).map_err(core)?;
            let (want, shape) =
                oracle::conv2d(x.data(), xs, wt.data(), ws, stride, pad, groups, Some(bias.data()));
            if got.shape() != shape.as_slice() {
                return Err(format!("conv2d shape {:?} vs {shape:?}", got.shape()));
            }
            e2 = e2.max(max_diff(got.data(), &want));

            // conv3d with a cube kernel
            let k = [1, 3, 5][rng.gen_range(0..3)];
            let (ci, co) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
            let dims = [rng.gen_range(k..=6), rng.gen_range(k..=6), rng.gen_range(k..=6)];
            let stride = [rng.gen_range(1..=2), rng.gen_range(1..=2), rng.gen_range(1..=2)];
            let pad = [rng.gen_range(0..=2), rng.gen_range(0..=2), rng.gen_range(0..=2)];
            let xs = [1, ci, dims[0], dims[1], dims[2]];
            let ws = [co, ci, k, k, k];
            let x = rand_tensor(&xs, &mut rng);
            let bank = KernelBank5D::new(rand_tensor(&ws, &mut rng), 1)
                .and_then(|bk| bk.with_bias(rand_tensor(&[co], &mut rng)))
                .map_err(core)?;
            let g3 = Geometry3::new(stride, pad).map_err(core)?;
            let got = conv3d(&x, &bank, &g3).map_err(core)?;
            let (want, shape) = oracle::conv3d(
                x.data(),
                xs,
                bank.weights().data(),
                ws,
                stride,
                pad,
                1,
                bank.bias().map(Tensor::data),
            );
            if got.shape() != shape.as_slice() {
                return Err(format!("conv3d shape {:?} vs {shape:?}", got.shape()));
            }
            e3 = e3.max(max_diff(got.data(), &want));

            // ACS
            let co = rng.gen_range(3..=7);
            let ws = [co, ci, k, k];
            let wt = rand_tensor(&ws, &mut rng);
            let got = acs_conv3d(&x, &wt, &g3).map_err(core)?;
            let (want, shape) = oracle::acs_conv3d(x.data(), xs, wt.data(), ws, stride, pad);
            if got.shape() != shape.as_slice() {
                return Err(format!("acs shape {:?} vs {shape:?}", got.shape()));
            }
            ea = ea.max(max_diff(got.data(), &want));
        }
        let detail = format!(
            "{trials} instances each, max error conv2d {e2:.3e}, conv3d {e3:.3e}, acs {ea:.3e} (tol 1e-12)"
        );
        if e2.max(e3).max(ea) <= 1e-12 { Ok(detail) } else { Err(detail) }
    };
    CheckOutcome::from_result("convolution oracles", run())
}

/// End-to-end finite-difference check of every leaf parameter.
pub fn gradient_check(seed: u64, fault: Option<VjpFault>) -> CheckOutcome {
    let cfg = GradCheckConfig { fault, ..Default::default() };
    match grad_check(&cfg, seed) {
        Ok(report) => {
            let parts: Vec<String> = report
                .params
                .iter()
                .map(|p| format!("{} {:.3e}", p.name, p.max_rel_error))
                .collect();
            let detail = format!(
                "B=1 C=1 K=3 H=W=5, h={:e}, max rel err: {} (tol {:e})",
                report.step,
                parts.join(", "),
                report.threshold
            );
            CheckOutcome::new("gradient check", report.passed(), detail)
        }
        Err(e) => CheckOutcome::new("gradient check", false, e.to_string()),
    }
}

/// ⟨u, J dx⟩ = ⟨Jᵀ u, dx⟩ for every primitive.
pub fn adjoint_consistency(seed: u64) -> CheckOutcome {
    match adjoint_checks(seed) {
        Ok(checks) => {
            let worst = checks.iter().max_by(|a, b| a.rel_error().total_cmp(&b.rel_error()));
            let passed = checks.iter().all(|c| c.rel_error() <= 1e-8);
            let detail = match worst {
                Some(w) => format!(
                    "{} primitives, worst {} at {:.3e} (tol 1e-8)",
                    checks.len(),
                    w.name,
                    w.rel_error()
                ),
                None => "no checks".into(),
            };
            CheckOutcome::new("dot-product adjoint tests", passed, detail)
        }
        Err(e) => CheckOutcome::new("dot-product adjoint tests", false, e.to_string()),
    }
}

/// Archive round trips in memory and, when `dir` is given, through files.
pub fn archive_round_trip(trials: usize, seed: u64, dir: Option<&Path>) -> CheckOutcome {
    let run = || -> Check {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for trial in 0..trials {
            let count = rng.gen_range(0..=5);
            let tensors: Vec<(String, Tensor<f64>)> = (0..count)
                .map(|i| {
                    let rank = rng.gen_range(1..=5);
                    let shape: Vec<usize> = (0..rank).map(|_| rng.gen_range(1..=4)).collect();
                    let t = Tensor::from_fn(&shape, |_| {
                        // arbitrary finite bit patterns, not just the unit interval
                        let v = f64::from_bits(rng.gen::<u64>());
                        if v.is_finite() { v } else { rng.gen_range(-1e6..1e6) }
                    })
                    .expect("non-empty shape");
                    (format!("t{i}_{}", "é".repeat(i)), t)
                })
                .collect();
            let refs: Vec<(&str, &Tensor<f64>)> = tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
            let back = match dir {
                Some(d) => {
                    let path = d.join(format!("round_trip_{trial}.xdcw"));
                    save_archive(&path, &refs).map_err(core)?;
                    load_archive(&path).map_err(core)?
                }
                None => decode_archive(&encode_archive(&refs).map_err(core)?).map_err(core)?,
            };
            let same = back.len() == tensors.len()
                && back.iter().zip(&tensors).all(|((na, ta), (nb, tb))| {
                    na == nb
                        && ta.shape() == tb.shape()
                        && ta.data().iter().zip(tb.data()).all(|(a, b)| a.to_bits() == b.to_bits())
                });
            if !same {
                return Err(format!("set {trial} did not round-trip bitwise"));
            }
        }
        let empty = encode_archive(&[]).map_err(core)?.len();
        if empty != 12 {
            return Err(format!("empty archive is {empty} bytes, expected 12"));
        }
        Ok(format!("{trials} tensor sets bitwise identical, empty archive 12 bytes"))
    };
    CheckOutcome::from_result("archive round trip", run())
}

pub fn archive_rejects_corruption() -> CheckOutcome {
    let run = || -> Check {
        let t = Tensor::from_values(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).map_err(core)?;
        let good = encode_archive(&[("w", &t)]).map_err(core)?;
        let mut bad = good.clone();
        bad[..4].copy_from_slice(b"XXXX");
        match decode_archive(&bad) {
            Err(CrossdError::Format(_)) => {}
            other => return Err(format!("bad magic gave {other:?}")),
        }
        match decode_archive(&good[..good.len() - 3]) {
            Err(CrossdError::Corrupt(_)) => {}
            other => return Err(format!("truncated archive gave {other:?}")),
        }
        let mut v = good;
        v[4..8].copy_from_slice(&9u32.to_le_bytes());
        match decode_archive(&v) {
            Err(CrossdError::Version(9)) => {}
            other => return Err(format!("unknown version gave {other:?}")),
        }
        Ok("bad magic, truncation and unknown version rejected".into())
    };
    CheckOutcome::from_result("archive corruption", run())
}

/// The exported 2D kernels are the middle plane of the exported 3D bank.
pub fn transfer_consistency(trials: usize, seed: u64) -> CheckOutcome {
    let run = || -> Check {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..trials {
            let k = [1, 3, 5][rng.gen_range(0..3)];
            let bank = KernelBank5D::new(rand_tensor(&[2, 3, k, k, k], &mut rng), 1).map_err(core)?;
            let p = random_rotation(&mut rng);
            let d2 = derive_2d_kernels(&bank, &p).map_err(core)?;
            let d3 = derive_3d_kernels(&bank, &p).map_err(core)?;
            if d2 != mid_slice(d3.weights()).map_err(core)? {
                return Err("2D export differs from the 3D export's middle plane".into());
            }
        }
        Ok(format!("{trials} banks, 2D export == middle plane of 3D export"))
    };
    CheckOutcome::from_result("2D/3D export consistency", run())
}

/// Runs a suite at full size. `fault` corrupts the rotation VJP (negative control).
pub fn run_suite(suite: Suite, seed: u64, fault: Option<VjpFault>) -> Vec<CheckOutcome> {
    let mut out = Vec::new();
    if matches!(suite, Suite::All | Suite::Spectral) {
        out.push(shift_theorem(100, seed));
        out.push(unitarity(100, seed));
        out.push(fractional_shift(50, seed));
        out.push(fft_oracle(50, seed));
        out.push(aggregation(100, seed));
    }
    if matches!(suite, Suite::All | Suite::Conv) {
        out.push(conv_oracles(200, seed));
    }
    if matches!(suite, Suite::All | Suite::Grad) {
        out.push(gradient_check(seed, fault));
        out.push(adjoint_consistency(seed));
    }
    if matches!(suite, Suite::All | Suite::Transfer) {
        out.push(archive_round_trip(50, seed, None));
        out.push(archive_rejects_corruption());
        out.push(transfer_consistency(10, seed));
    }
    out
}
