//! Toy end-to-end training: one Cross-D layer (per-sample rotations), ReLU,
//! global average pooling and a linear classifier, fitted with plain SGD to
//! tell horizontal from vertical bars.

use crossd::autograd::Tape;
use crossd::{CrossdError, Geometry2, KernelBank5D, RotParamHead, RotationMode, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub samples: usize,
    pub size: usize,
    pub channels: usize,
    pub kernel: usize,
    /// Multiplier on the default bank initialisation. Pooling averages a thin
    /// bar with a lot of background, so small filters give near-zero logits.
    pub init_gain: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            lr: 0.05,
            seed: 7,
            samples: 32,
            size: 7,
            channels: 8,
            kernel: 3,
            init_gain: 16.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainTrace {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub losses: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub angle_grad_norm_step0: f64,
    pub final_accuracy: f64,
}

impl TrainTrace {
    pub fn to_json(&self) -> CliResult<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Bars through the image centre (±1 px) at an angle near 0 (class 0) or
/// near π/2 (class 1), jittered by up to π/8, with a little pixel noise.
pub fn bar_dataset(samples: usize, size: usize, rng: &mut ChaCha8Rng) -> CliResult<(Tensor<f64>, Vec<usize>)> {
    let labels: Vec<usize> = (0..samples).map(|i| i % 2).collect();
    let c = (size as f64 - 1.0) / 2.0;
    let mut data = Vec::with_capacity(samples * size * size);
    for &label in &labels {
        let jitter = std::f64::consts::FRAC_PI_8;
        let phi = label as f64 * std::f64::consts::FRAC_PI_2 + rng.gen_range(-jitter..jitter);
        let offset = rng.gen_range(-1.0..1.0);
        let (s, co) = phi.sin_cos();
        for i in 0..size {
            for j in 0..size {
                let (y, x) = (i as f64 - c, j as f64 - c);
                // signed distance from the line with direction (cos φ, sin φ)
                let d = y * co - x * s - offset;
                data.push((-d * d / 0.8).exp() + rng.gen_range(-0.05..0.05));
            }
        }
    }
    Ok((Tensor::from_values(&[samples, 1, size, size], data)?, labels))
}

struct Params {
    bank: Tensor<f64>,
    head_w: Tensor<f64>,
    head_b: Tensor<f64>,
    lin_w: Tensor<f64>,
    lin_b: Tensor<f64>,
}

impl Params {
    fn init(cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> CliResult<Self> {
        let bank = KernelBank5D::<f64>::random(cfg.channels, 1, cfg.kernel, 1, rng)?;
        let head = RotParamHead::<f64>::random(1, 3, 1.0, rng)?;
        let head_b = Tensor::from_fn(&[4], |_| rng.gen_range(-0.5..0.5))?;
        let bound = 1.0 / (cfg.channels as f64).sqrt();
        let lin_w = Tensor::from_fn(&[2, cfg.channels], |_| rng.gen_range(-bound..bound))?;
        Ok(Self {
            bank: bank.weights().scale(cfg.init_gain),
            head_w: head.weights().clone(),
            head_b,
            lin_w,
            lin_b: Tensor::zeros(&[2])?,
        })
    }
}

pub fn train_demo(cfg: &TrainConfig, mut log: impl FnMut(usize, f64)) -> CliResult<TrainTrace> {
    if cfg.steps == 0 {
        return Err(CliError::Usage("--steps must be at least 1".into()));
    }
    if !cfg.lr.is_finite() || cfg.lr < 0.0 {
        return Err(CliError::Usage(format!("--lr must be finite and non-negative, got {}", cfg.lr)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (images, labels) = bar_dataset(cfg.samples, cfg.size, &mut rng)?;
    let mut p = Params::init(cfg, &mut rng)?;
    let geom = Geometry2::same(cfg.kernel);

    let mut losses = Vec::with_capacity(cfg.steps);
    let mut angle_grad_norm_step0 = 0.0;
    let mut final_accuracy = 0.0;
    for step in 0..cfg.steps {
        let mut tape = Tape::new();
        let x = tape.leaf(images.clone());
        let bank = tape.leaf(p.bank.clone());
        let hw = tape.leaf(p.head_w.clone());
        let hb = tape.leaf(p.head_b.clone());
        let lw = tape.leaf(p.lin_w.clone());
        let lb = tape.leaf(p.lin_b.clone());
        let vars = tape.crossd_forward_2d(x, bank, None, 1, hw, hb, geom, RotationMode::PerSample)?;
        let act = tape.relu(vars.output);
        let pooled = tape.global_avg_pool(act)?;
        let logits = tape.linear(pooled, lw, lb)?;
        let loss = tape.softmax_cross_entropy(logits, &labels)?;

        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(CrossdError::NonFinite(format!("training loss at step {step}")).into());
        }
        losses.push(value);
        if step % 10 == 0 || step + 1 == cfg.steps {
            log(step, value);
        }
        let correct = tape
            .value(logits)
            .data()
            .chunks(2)
            .zip(&labels)
            .filter(|(row, &l)| (row[1] > row[0]) as usize == l)
            .count();
        final_accuracy = correct as f64 / labels.len() as f64;

        let grads = tape.backward_scalar(loss)?;
        if step == 0 {
            let g = grads.get_or_zeros(vars.params, tape.value(vars.params))?;
            angle_grad_norm_step0 = g.data().chunks(4).map(|r| r[3] * r[3]).sum::<f64>().sqrt();
        }
        for (var, param) in [
            (bank, &mut p.bank),
            (hw, &mut p.head_w),
            (hb, &mut p.head_b),
            (lw, &mut p.lin_w),
            (lb, &mut p.lin_b),
        ] {
            let g = grads.get_or_zeros(var, param)?;
            param.add_assign(&g.scale(-cfg.lr))?;
            if !param.is_finite() {
                return Err(CrossdError::NonFinite(format!("parameters after step {step}")).into());
            }
        }
    }
    Ok(TrainTrace {
        steps: cfg.steps,
        lr: cfg.lr,
        seed: cfg.seed,
        initial_loss: losses[0],
        final_loss: *losses.last().expect("steps >= 1"),
        losses,
        angle_grad_norm_step0,
        final_accuracy,
    })
}
