//! Library side of the `crossd` command-line tool: benchmark harness, check
//! suites, training demo and archive import/export.

pub mod archive;
pub mod bench;
pub mod check;
pub mod error;
pub mod train;

pub use error::{CliError, CliResult};

/// Thread count from an explicit flag, then `CROSSD_THREADS`, then the
/// machine's available parallelism.
pub fn resolve_threads(flag: Option<usize>) -> Result<usize, CliError> {
    if let Some(n) = flag {
        return Ok(n);
    }
    match std::env::var("CROSSD_THREADS") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("CROSSD_THREADS must be a positive integer, got {v:?}"))),
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}
