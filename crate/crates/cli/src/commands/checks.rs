use std::path::Path;

use anyhow::Result;
use stickbreaking::verify::{
    bench_suite, equivalence_suite, gradcheck_suite, write_check_csv, BenchInput, BenchOptions,
    BenchRow, EquivOptions, EquivRow, Fault, GradcheckOptions,
};

use crate::run::{load_or_default, RunContext};
use crate::Outcome;

pub fn gradcheck(
    ctx: &mut RunContext,
    config: Option<&Path>,
    tolerance: Option<f64>,
    fault: Option<Fault>,
) -> Result<Outcome> {
    ctx.require_f64()?;
    let mut opts: GradcheckOptions = load_or_default(config)?;
    if tolerance.is_some() {
        opts.tolerance = tolerance;
    }
    if fault.is_some() {
        opts.fault = fault;
    }
    let rows = gradcheck_suite(&opts);
    let mut csv = Vec::new();
    write_check_csv(&rows, &mut csv)?;
    ctx.write("gradcheck.csv", csv)?;
    ctx.write_manifest(&opts)?;
    let failed: Vec<_> = rows.iter().filter(|r| !r.passed()).collect();
    for r in &failed {
        println!(
            "FAIL {} error {:e} tolerance {:e} {}",
            r.component, r.error, r.tolerance, r.note
        );
    }
    println!(
        "gradcheck: {} of {} rows pass",
        rows.len() - failed.len(),
        rows.len()
    );
    Ok(if failed.is_empty() {
        Outcome::Pass
    } else {
        Outcome::Fail
    })
}

pub fn equiv(ctx: &mut RunContext, config: Option<&Path>) -> Result<Outcome> {
    let mut opts: EquivOptions = load_or_default(config)?;
    if let Some(seed) = ctx.seed {
        opts.seed = seed;
    }
    if let Some(p) = ctx.precision {
        opts.precision = p;
    }
    if ctx.threads.is_some() {
        opts.exec = ctx.exec();
    }
    let rows = equivalence_suite(&opts)?;
    let mut csv = String::from(EquivRow::CSV_HEADER);
    csv.push('\n');
    for r in &rows {
        csv.push_str(&r.csv_line());
        csv.push('\n');
    }
    ctx.write("equiv.csv", csv)?;
    ctx.write_manifest(&opts)?;
    let failed = rows.iter().filter(|r| !r.passed()).count();
    let worst = rows.iter().map(EquivRow::max_ref_diff).fold(0.0, f64::max);
    println!(
        "equiv ({}): {} of {} configurations pass, worst reference diff {worst:e}",
        opts.precision,
        rows.len() - failed,
        rows.len()
    );
    Ok(if failed == 0 {
        Outcome::Pass
    } else {
        Outcome::Fail
    })
}

pub fn bench(
    ctx: &mut RunContext,
    config: Option<&Path>,
    input: Option<BenchInput>,
) -> Result<Outcome> {
    ctx.require_f64()?;
    let mut opts: BenchOptions = load_or_default(config)?;
    if let Some(i) = input {
        opts.input = i;
    }
    if let Some(seed) = ctx.seed {
        opts.seed = seed;
    }
    if ctx.threads.is_some() {
        opts.exec = ctx.exec();
    }
    let rows = bench_suite(&opts)?;
    let mut csv = String::from(BenchRow::CSV_HEADER);
    csv.push('\n');
    for r in &rows {
        csv.push_str(&r.csv_line());
        csv.push('\n');
        println!("{}", r.csv_line());
    }
    ctx.write("bench.csv", csv)?;
    ctx.write_manifest(&opts)?;
    Ok(Outcome::Pass)
}
