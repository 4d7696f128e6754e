//! Verification and benchmark suites shared by the command-line harness and
//! the acceptance tests.

mod bench;
mod equiv;
mod gradcheck;

use std::io::Write;

use serde::{Deserialize, Serialize};

pub use bench::{bench_suite, constant_logit_inputs, median, BenchInput, BenchOptions, BenchRow};
pub use equiv::{equivalence_suite, EquivOptions, EquivRow, Precision};
pub use gradcheck::{gradcheck_suite, Fault, GradcheckOptions};

/// One verified quantity: an error measure and the bound it must stay under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckRow {
    pub component: String,
    pub error: f64,
    pub tolerance: f64,
    /// Location of the worst entry or of a non-finite intermediate.
    pub note: String,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.error.is_finite() && self.error < self.tolerance
    }
}

pub const CHECK_CSV_HEADER: &str = "component,max_rel_error,tolerance,pass,note";

pub fn write_check_csv(rows: &[CheckRow], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "{CHECK_CSV_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{:e},{:e},{},{}",
            r.component,
            r.error,
            r.tolerance,
            if r.passed() { "pass" } else { "fail" },
            r.note
        )?;
    }
    Ok(())
}
