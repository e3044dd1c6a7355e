//! Forward-pass wall-time comparison of conv2d, Cross-D, ACS and conv3d.

use std::fmt;
use std::hint::black_box;
use std::str::FromStr;
use std::time::Instant;

use clap::ValueEnum;
use crossd::{
    acs_conv3d, conv2d, conv3d, crossd_forward_2d, mid_slice, Geometry2, Geometry3, KernelBank5D,
    RotParamHead, RotationMode, Scalar, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{CliError, CliResult};

pub const OPERATORS: [&str; 4] = ["conv2d", "crossd", "acs", "conv3d"];
pub const CSV_HEADER: &str = "shape,operator,median_ms,min_ms,max_ms,repeats";
pub const SCHEMA: &str = "crossd-bench/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape4 {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl fmt::Display for Shape4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.batch, self.channels, self.height, self.width)
    }
}

impl FromStr for Shape4 {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let dims: Vec<usize> = s
            .trim()
            .split('x')
            .map(|d| d.trim().parse::<usize>().map_err(|_| format!("bad extent {d:?} in shape {s:?}")))
            .collect::<Result<_, _>>()?;
        match dims[..] {
            [batch, channels, height, width] if dims.iter().all(|&d| d > 0) => {
                Ok(Self { batch, channels, height, width })
            }
            _ => Err(format!("shape {s:?} must be BxCxHxW with positive extents")),
        }
    }
}

/// Parses `"BxCxHxW[,BxCxHxW...]"`.
pub fn parse_shapes(s: &str) -> Result<Vec<Shape4>, String> {
    if s.trim().is_empty() {
        return Err("empty shape list".into());
    }
    s.split(',').map(str::parse).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    #[default]
    Json,
    Csv,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub shapes: Vec<Shape4>,
    pub repeats: usize,
    pub warmup: usize,
    pub kernel: usize,
    pub seed: u64,
    pub precision: Precision,
    pub mode: RotationMode,
    pub threads: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            shapes: vec![Shape4 { batch: 2, channels: 8, height: 32, width: 32 }],
            repeats: 20,
            warmup: 3,
            kernel: 3,
            seed: 7,
            precision: Precision::F32,
            mode: RotationMode::BatchMean,
            threads: 1,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> CliResult<()> {
        if self.shapes.is_empty() {
            return Err(CliError::Usage("at least one shape is required".into()));
        }
        if self.repeats < 3 {
            return Err(CliError::Usage(format!("--repeats must be >= 3, got {}", self.repeats)));
        }
        if self.kernel % 2 == 0 {
            return Err(CliError::Usage(format!("--kernel must be odd, got {}", self.kernel)));
        }
        if self.threads == 0 {
            return Err(CliError::Usage("--threads must be positive".into()));
        }
        if let Some(s) = self.shapes.iter().find(|s| s.channels < 3) {
            return Err(CliError::Usage(format!("shape {s} needs >= 3 channels for the ACS split")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OpTiming {
    pub shape: String,
    pub operator: String,
    pub median_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    pub repeats: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Environment {
    pub threads: usize,
    pub precision: Precision,
    pub mode: String,
    pub kernel: usize,
    pub depth: usize,
    pub repeats: usize,
    pub warmup: usize,
    pub seed: u64,
    pub os: &'static str,
    pub arch: &'static str,
    pub optimized: bool,
    pub version: &'static str,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OrderingCheck {
    pub shape: String,
    pub expected: &'static str,
    pub holds: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub schema: &'static str,
    pub environment: Environment,
    pub methodology: Vec<&'static str>,
    pub results: Vec<OpTiming>,
    pub ordering: Vec<OrderingCheck>,
}

const METHODOLOGY: [&str; 7] = [
    "forward pass only, timed with a monotonic clock",
    "warmup iterations are discarded; median, min and max over the timed repeats",
    "each repeat runs every operator once, in a fixed order, so load drift is shared",
    "all operators read inputs generated from the same seed; 3D operators see the 2D input replicated along a depth of K",
    "conv2d and acs use the bank's middle K x K slice; conv3d uses the full K^3 bank; crossd rotates the bank per call",
    "same padding and unit stride everywhere; C_out = C_in = C",
    "all operators share one thread pool of the reported size",
];

/// Seeded inputs shared by every operator for one shape.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchInputs<T> {
    pub image: Tensor<T>,
    pub volume: Tensor<T>,
    pub bank: KernelBank5D<T>,
    pub head: RotParamHead<T>,
    pub slice_weights: Tensor<T>,
}

impl<T: Scalar> BenchInputs<T> {
    pub fn generate(shape: Shape4, kernel: usize, seed: u64) -> CliResult<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let Shape4 { batch, channels, height, width } = shape;
        let image: Tensor<f64> =
            Tensor::from_fn(&[batch, channels, height, width], |_| rng.gen_range(-1.0..1.0))?;
        let volume = replicate_depth(&image.embed_axis(2, 0, 1)?, kernel)?;
        let bank = KernelBank5D::<f64>::random(channels, channels, kernel, 1, &mut rng)?;
        let head = RotParamHead::<f64>::random(channels, 3, 1.0, &mut rng)?;
        let slice_weights = mid_slice(bank.weights())?;
        Ok(Self {
            image: image.cast(),
            volume: volume.cast(),
            bank: KernelBank5D::new(bank.weights().cast(), 1)?,
            head: RotParamHead::new(head.weights().cast(), head.bias().cast())?,
            slice_weights: slice_weights.cast(),
        })
    }
}

fn replicate_depth<T: Scalar>(v: &Tensor<T>, depth: usize) -> crossd::Result<Tensor<T>> {
    let s = v.shape();
    let plane = s[3] * s[4];
    let mut data = Vec::with_capacity(v.len() * depth);
    for chunk in v.data().chunks(plane) {
        for _ in 0..depth {
            data.extend_from_slice(chunk);
        }
    }
    Tensor::from_values(&[s[0], s[1], depth, s[3], s[4]], data)
}

fn summarize(mut samples: Vec<f64>) -> (f64, f64, f64) {
    samples.sort_by(f64::total_cmp);
    let n = samples.len();
    let median =
        if n % 2 == 1 { samples[n / 2] } else { 0.5 * (samples[n / 2 - 1] + samples[n / 2]) };
    (median, samples[0], samples[n - 1])
}

type Op<'a, T> = Box<dyn FnMut() -> crossd::Result<Tensor<T>> + 'a>;

fn bench_shape<T: Scalar>(cfg: &BenchConfig, shape: Shape4) -> CliResult<Vec<OpTiming>> {
    let inputs = BenchInputs::<T>::generate(shape, cfg.kernel, cfg.seed)?;
    let g2 = Geometry2::same(cfg.kernel);
    let g3 = Geometry3::same(cfg.kernel);
    let inp = &inputs;
    let mut ops: [Op<'_, T>; 4] = [
        Box::new(move || conv2d(&inp.image, &inp.slice_weights, &g2, 1, None)),
        Box::new(move || crossd_forward_2d(&inp.image, &inp.bank, &inp.head, &g2, cfg.mode)),
        Box::new(move || acs_conv3d(&inp.volume, &inp.slice_weights, &g3)),
        Box::new(move || conv3d(&inp.volume, &inp.bank, &g3)),
    ];
    for _ in 0..cfg.warmup {
        for op in ops.iter_mut() {
            black_box(op()?);
        }
    }
    // operators are interleaved so slow drift in machine load hits all of them alike
    let mut samples = vec![Vec::with_capacity(cfg.repeats); ops.len()];
    for _ in 0..cfg.repeats {
        for (op, out) in ops.iter_mut().zip(samples.iter_mut()) {
            let start = Instant::now();
            let y = op()?;
            let elapsed = start.elapsed();
            black_box(y);
            out.push((elapsed.as_secs_f64() * 1e3).max(f64::MIN_POSITIVE));
        }
    }
    Ok(OPERATORS
        .iter()
        .zip(samples)
        .map(|(name, s)| {
            let (median_ms, min_ms, max_ms) = summarize(s);
            OpTiming {
                shape: shape.to_string(),
                operator: name.to_string(),
                median_ms,
                min_ms,
                max_ms,
                repeats: cfg.repeats,
            }
        })
        .collect())
}

pub fn run_bench(cfg: &BenchConfig) -> CliResult<BenchReport> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot build thread pool: {e}")))?;
    let results = pool.install(|| -> CliResult<Vec<OpTiming>> {
        let mut all = Vec::new();
        for &shape in &cfg.shapes {
            all.extend(match cfg.precision {
                Precision::F32 => bench_shape::<f32>(cfg, shape)?,
                Precision::F64 => bench_shape::<f64>(cfg, shape)?,
            });
        }
        Ok(all)
    })?;
    let ordering = cfg
        .shapes
        .iter()
        .map(|s| {
            let name = s.to_string();
            let med = |op: &str| {
                results.iter().find(|t| t.shape == name && t.operator == op).map_or(f64::NAN, |t| t.median_ms)
            };
            let (a, b, c, d) = (med("conv2d"), med("crossd"), med("acs"), med("conv3d"));
            OrderingCheck {
                shape: name,
                expected: "conv2d <= crossd < acs < conv3d",
                holds: a <= b && b < c && c < d,
            }
        })
        .collect();
    Ok(BenchReport {
        schema: SCHEMA,
        environment: Environment {
            threads: cfg.threads,
            precision: cfg.precision,
            mode: match cfg.mode {
                RotationMode::PerSample => "per-sample".into(),
                RotationMode::BatchMean => "batch-mean".into(),
            },
            kernel: cfg.kernel,
            depth: cfg.kernel,
            repeats: cfg.repeats,
            warmup: cfg.warmup,
            seed: cfg.seed,
            os: std::env::consts::OS,
            arch: std::env::consts::ARCH,
            optimized: !cfg!(debug_assertions),
            version: env!("CARGO_PKG_VERSION"),
        },
        methodology: METHODOLOGY.to_vec(),
        results,
        ordering,
    })
}

impl BenchReport {
    pub fn ordering_holds(&self) -> bool {
        self.ordering.iter().all(|o| o.holds)
    }

    pub fn to_json(&self) -> CliResult<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for t in &self.results {
            s.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6},{}\n",
                t.shape, t.operator, t.median_ms, t.min_ms, t.max_ms, t.repeats
            ));
        }
        s
    }

    pub fn render(&self, format: OutputFormat) -> CliResult<String> {
        match format {
            OutputFormat::Json => self.to_json(),
            OutputFormat::Csv => Ok(self.to_csv()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_parsing() {
        assert_eq!(
            parse_shapes("2x8x32x32, 1x3x5x6").unwrap(),
            vec![
                Shape4 { batch: 2, channels: 8, height: 32, width: 32 },
                Shape4 { batch: 1, channels: 3, height: 5, width: 6 }
            ]
        );
        for bad in ["", "2x8x32", "2x8x32x32x1", "2x0x4x4", "ax8x32x32", "2,8,32,32", "2x8x32x32,"] {
            assert!(parse_shapes(bad).is_err(), "{bad:?}");
        }
    }

    #[test]
    fn inputs_are_seeded_and_shared() {
        let s = Shape4 { batch: 2, channels: 3, height: 5, width: 4 };
        let a = BenchInputs::<f64>::generate(s, 3, 11).unwrap();
        let b = BenchInputs::<f64>::generate(s, 3, 11).unwrap();
        assert_eq!(a, b);
        for d in 0..3 {
            assert_eq!(a.volume.slice_axis(2, d).unwrap(), a.image);
        }
        assert_eq!(a.slice_weights, a.bank.weights().slice_axis(2, 1).unwrap());
        let c = BenchInputs::<f32>::generate(s, 3, 11).unwrap();
        assert_eq!(c.image, a.image.cast::<f32>());
    }

    #[test]
    fn config_validation() {
        let ok = BenchConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            BenchConfig { repeats: 2, ..ok.clone() },
            BenchConfig { kernel: 4, ..ok.clone() },
            BenchConfig { threads: 0, ..ok.clone() },
            BenchConfig { shapes: vec![], ..ok.clone() },
            BenchConfig { shapes: vec!["1x2x4x4".parse().unwrap()], ..ok.clone() },
        ] {
            assert!(matches!(bad.validate(), Err(CliError::Usage(_))));
        }
    }

    #[test]
    fn small_report_schema() {
        let cfg = BenchConfig {
            shapes: vec!["1x3x6x6".parse().unwrap()],
            repeats: 3,
            warmup: 0,
            ..Default::default()
        };
        let report = run_bench(&cfg).unwrap();
        assert_eq!(report.results.len(), 4);
        assert!(report.results.iter().all(|t| t.min_ms > 0.0 && t.min_ms <= t.median_ms && t.median_ms <= t.max_ms));
        let csv = report.to_csv();
        assert_eq!(csv.lines().next().unwrap(), CSV_HEADER);
        assert_eq!(csv.lines().count(), 5);
        let json: serde_json::Value = serde_json::from_str(&report.to_json().unwrap()).unwrap();
        for key in ["schema", "environment", "methodology", "results", "ordering"] {
            assert!(json.get(key).is_some(), "{key}");
        }
        assert_eq!(json["results"][1]["operator"], "crossd");
    }
}
