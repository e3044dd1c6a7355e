//! Acceptance criteria 1–9. Runs sequentially (the timing criterion must not
//! share the machine with other work) and prints one PASS/FAIL line each.

use std::time::{Duration, Instant};

use crossd::transfer::{encode_archive, load_archive};
use crossd::{CrossdError, Tensor};
use crossd_cli::bench::{run_bench, BenchConfig};
use crossd_cli::check::{self, CheckOutcome};
use crossd_cli::train::{train_demo, TrainConfig};

const SEED: u64 = 20_241;

struct Criterion {
    id: u32,
    title: &'static str,
    budget: Duration,
    run: fn() -> (bool, String),
}

fn outcomes(list: &[CheckOutcome]) -> (bool, String) {
    let passed = list.iter().all(|o| o.passed);
    let detail = list.iter().map(|o| format!("[{}] {}", o.name, o.detail)).collect::<Vec<_>>().join("; ");
    (passed, detail)
}

fn runtime_ordering() -> (bool, String) {
    let cfg = BenchConfig { repeats: 20, ..Default::default() };
    let mut holds = 0;
    let mut lines = Vec::new();
    for run in 0..5 {
        let report = match run_bench(&BenchConfig { seed: cfg.seed + run, ..cfg.clone() }) {
            Ok(r) => r,
            Err(e) => return (false, format!("bench failed: {e}")),
        };
        let ok = report.ordering_holds();
        holds += ok as usize;
        let med: Vec<String> =
            report.results.iter().map(|t| format!("{}={:.3}", t.operator, t.median_ms)).collect();
        lines.push(format!("run {run}: {} ({})", med.join(" "), if ok { "ordered" } else { "out of order" }));
    }
    (holds >= 4, format!("{holds}/5 runs ordered conv2d <= crossd < acs < conv3d; {}", lines.join("; ")))
}

fn shift_theorem() -> (bool, String) {
    outcomes(&[check::shift_theorem(100, SEED)])
}

fn unitarity() -> (bool, String) {
    outcomes(&[check::unitarity(100, SEED)])
}

fn fractional_shift() -> (bool, String) {
    outcomes(&[check::fractional_shift(50, SEED)])
}

fn conv_oracles() -> (bool, String) {
    outcomes(&[check::conv_oracles(200, SEED)])
}

fn gradients() -> (bool, String) {
    outcomes(&[check::gradient_check(SEED, None), check::adjoint_consistency(SEED)])
}

fn trainability() -> (bool, String) {
    match train_demo(&TrainConfig::default(), |_, _| {}) {
        Ok(t) => {
            let ratio = t.final_loss / t.initial_loss;
            (
                ratio <= 0.5 && t.angle_grad_norm_step0 > 0.0,
                format!(
                    "loss {:.4} -> {:.4} (ratio {ratio:.3}, need <= 0.5), angle-path gradient norm at step 0 = {:.3e}",
                    t.initial_loss, t.final_loss, t.angle_grad_norm_step0
                ),
            )
        }
        Err(e) => (false, e.to_string()),
    }
}

fn serialization() -> (bool, String) {
    let dir = match tempfile::tempdir() {
        Ok(d) => d,
        Err(e) => return (false, e.to_string()),
    };
    let round = check::archive_round_trip(50, SEED, Some(dir.path()));
    let t = Tensor::from_values(&[3], vec![1.0, 2.0, 3.0]).expect("valid");
    let mut bytes = encode_archive(&[("w", &t)]).expect("encodes");
    bytes[..4].copy_from_slice(b"XXXX");
    let path = dir.path().join("corrupt.xdcw");
    std::fs::write(&path, bytes).expect("writable temp dir");
    let rejected = matches!(load_archive(&path), Err(CrossdError::Format(_)));
    let (ok, detail) = outcomes(&[round]);
    (ok && rejected, format!("{detail}; corrupted-magic file rejected: {rejected}"))
}

fn aggregation() -> (bool, String) {
    outcomes(&[check::aggregation(100, SEED)])
}

fn main() {
    let criteria = [
        Criterion { id: 1, title: "runtime ordering", budget: Duration::from_secs(60), run: runtime_ordering },
        Criterion { id: 2, title: "shift-theorem oracle", budget: Duration::from_secs(10), run: shift_theorem },
        Criterion { id: 3, title: "unitarity", budget: Duration::from_secs(10), run: unitarity },
        Criterion { id: 4, title: "fractional-shift oracle", budget: Duration::from_secs(30), run: fractional_shift },
        Criterion { id: 5, title: "convolution oracles", budget: Duration::from_secs(30), run: conv_oracles },
        Criterion { id: 6, title: "gradient certification", budget: Duration::from_secs(60), run: gradients },
        Criterion { id: 7, title: "trainability", budget: Duration::from_secs(120), run: trainability },
        Criterion { id: 8, title: "serialization", budget: Duration::from_secs(5), run: serialization },
        Criterion { id: 9, title: "aggregation properties", budget: Duration::from_secs(5), run: aggregation },
    ];
    let mut failed = Vec::new();
    for c in &criteria {
        let start = Instant::now();
        let (ok, detail) = (c.run)();
        let elapsed = start.elapsed();
        let in_budget = elapsed <= c.budget;
        let pass = ok && in_budget;
        println!(
            "{} criterion {} ({}) in {:.2}s of {}s: {}",
            if pass { "PASS" } else { "FAIL" },
            c.id,
            c.title,
            elapsed.as_secs_f64(),
            c.budget.as_secs(),
            detail
        );
        if !pass {
            failed.push(c.id);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", criteria.len());
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
