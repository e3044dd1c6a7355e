//! `export` / `import` subcommands on top of the weight-archive format.

use std::path::{Path, PathBuf};

use crossd::transfer::{derive_2d_kernels, derive_3d_kernels, load_archive, save_archive};
use crossd::{KernelBank5D, RotationParams, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{CliError, CliResult};

pub const BANK: &str = "bank";
pub const KERNELS_2D: &str = "kernels_2d";
pub const ROTATION: &str = "rotation";

#[derive(Clone, Debug, PartialEq)]
pub struct ExportConfig {
    pub out: PathBuf,
    /// Take the bank from this archive's `bank` record instead of generating one.
    pub from: Option<PathBuf>,
    pub seed: u64,
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel: usize,
    /// Freeze a rotation with this angle and export the rotated bank plus its
    /// middle-slice 2D kernels.
    pub rotate: Option<f64>,
    pub axis: [f64; 3],
}

impl Default for ExportConfig {
    fn default() -> Self {
        Self {
            out: PathBuf::from("weights.xdcw"),
            from: None,
            seed: 7,
            out_channels: 4,
            in_channels: 4,
            kernel: 3,
            rotate: None,
            axis: [0.0, 0.0, 1.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RecordSummary {
    pub name: String,
    pub shape: Vec<usize>,
    pub l2_norm: f64,
}

impl RecordSummary {
    fn of(name: &str, t: &Tensor<f64>) -> Self {
        Self { name: name.to_string(), shape: t.shape().to_vec(), l2_norm: t.l2_norm() }
    }
}

fn source_bank(cfg: &ExportConfig) -> CliResult<KernelBank5D<f64>> {
    match &cfg.from {
        Some(path) => {
            let records = load_archive(path)?;
            let (_, w) = records.into_iter().find(|(n, _)| n == BANK).ok_or_else(|| {
                CliError::Verification(format!("{} has no {BANK:?} record", path.display()))
            })?;
            Ok(KernelBank5D::new(w, 1)?)
        }
        None => {
            if cfg.kernel % 2 == 0 || cfg.out_channels == 0 || cfg.in_channels == 0 {
                return Err(CliError::Usage(format!(
                    "bank needs positive channels and an odd kernel, got {}x{}x{}",
                    cfg.out_channels, cfg.in_channels, cfg.kernel
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            Ok(KernelBank5D::random(cfg.out_channels, cfg.in_channels, cfg.kernel, 1, &mut rng)?)
        }
    }
}

pub fn export(cfg: &ExportConfig) -> CliResult<Vec<RecordSummary>> {
    let bank = source_bank(cfg)?;
    let records: Vec<(&str, Tensor<f64>)> = match cfg.rotate {
        None => vec![(BANK, bank.weights().clone())],
        Some(angle) => {
            let p = RotationParams::from_axis_angle(cfg.axis, angle)
                .map_err(|e| CliError::Usage(e.to_string()))?;
            let rotation = Tensor::from_values(&[4], vec![p.axis[0], p.axis[1], p.axis[2], p.angle])?;
            vec![
                (BANK, derive_3d_kernels(&bank, &p)?.weights().clone()),
                (KERNELS_2D, derive_2d_kernels(&bank, &p)?),
                (ROTATION, rotation),
            ]
        }
    };
    let refs: Vec<(&str, &Tensor<f64>)> = records.iter().map(|(n, t)| (*n, t)).collect();
    save_archive(&cfg.out, &refs)?;
    Ok(records.iter().map(|(n, t)| RecordSummary::of(n, t)).collect())
}

/// Loads and validates an archive; optionally rewrites it to `resave`.
pub fn import(path: &Path, resave: Option<&Path>) -> CliResult<Vec<RecordSummary>> {
    let records = load_archive(path)?;
    if let Some(out) = resave {
        let refs: Vec<(&str, &Tensor<f64>)> = records.iter().map(|(n, t)| (n.as_str(), t)).collect();
        save_archive(out, &refs)?;
    }
    Ok(records.iter().map(|(n, t)| RecordSummary::of(n, t)).collect())
}
