//! Wall-clock measurements of the tiled kernels with and without skipping.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::blocked::{
    blocked_backward_fused, blocked_backward_twophase, blocked_forward, plan_blocks,
    saturating_inputs, ForwardOptions,
};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};
use crate::parallel::Exec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchInput {
    /// Logit 40 on one key per query, so most of the stick is used at once.
    Saturating,
    /// Standard normal queries, keys and values.
    Random,
    /// Every logit equal to −100: no stick is ever used.
    Negative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchOptions {
    pub lengths: Vec<usize>,
    pub block: usize,
    pub dim: usize,
    pub reps: usize,
    pub warmups: usize,
    pub input: BenchInput,
    pub skip_modes: Vec<bool>,
    pub backward: bool,
    pub seed: u64,
    pub exec: Exec,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            lengths: vec![256, 1024, 4096],
            block: 64,
            dim: 64,
            reps: 5,
            warmups: 2,
            input: BenchInput::Saturating,
            skip_modes: vec![false, true],
            backward: true,
            seed: 0,
            exec: Exec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub seq_len: usize,
    pub block: usize,
    pub variant: String,
    pub skip: bool,
    pub median_ms: f64,
    pub tiles_visited: usize,
    pub tiles_skipped: usize,
}

impl BenchRow {
    pub const CSV_HEADER: &'static str =
        "L,d_block,variant,skip,median_ms,tiles_visited,tiles_skipped";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{:.4},{},{}",
            self.seq_len,
            self.block,
            self.variant,
            if self.skip { "on" } else { "off" },
            self.median_ms,
            self.tiles_visited,
            self.tiles_skipped
        )
    }
}

pub fn median(samples: &mut [f64]) -> f64 {
    assert!(!samples.is_empty(), "median of no samples");
    samples.sort_by(f64::total_cmp);
    let n = samples.len();
    if n % 2 == 1 {
        samples[n / 2]
    } else {
        0.5 * (samples[n / 2 - 1] + samples[n / 2])
    }
}

/// Inputs with the same logit `z` for every query-key pair.
pub fn constant_logit_inputs(
    seq_len: usize,
    dim: usize,
    logit: f64,
    seed: u64,
) -> (Matrix, Matrix, Matrix) {
    let c = (logit.abs() * (dim as f64).sqrt()).sqrt();
    let q = Matrix::from_fn(seq_len, dim, |_, col| if col == 0 { c } else { 0.0 });
    let sign = logit.signum();
    let k = Matrix::from_fn(seq_len, dim, |_, col| if col == 0 { sign * c } else { 0.0 });
    let v = Rng::new(seed).normal_matrix(seq_len, dim, 1.0);
    (q, k, v)
}

fn inputs(opts: &BenchOptions, n: usize) -> (Matrix, Matrix, Matrix) {
    match opts.input {
        BenchInput::Saturating => saturating_inputs(n, opts.dim, 40.0, opts.seed),
        BenchInput::Negative => constant_logit_inputs(n, opts.dim, -100.0, opts.seed),
        BenchInput::Random => {
            let mut rng = Rng::new(opts.seed);
            (
                rng.normal_matrix(n, opts.dim, 1.0),
                rng.normal_matrix(n, opts.dim, 1.0),
                rng.normal_matrix(n, opts.dim, 1.0),
            )
        }
    }
}

fn time_ms<T>(warmups: usize, reps: usize, mut f: impl FnMut() -> Result<T>) -> Result<f64> {
    for _ in 0..warmups {
        f()?;
    }
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        std::hint::black_box(f()?);
        samples.push(t.elapsed().as_secs_f64() * 1e3);
    }
    Ok(median(&mut samples))
}

/// Median timings of the forward pass and (optionally) both backward passes
/// for every length and skip mode. Skip modes are interleaved per length so
/// that slow drift of the machine affects both alike.
pub fn bench_suite(opts: &BenchOptions) -> Result<Vec<BenchRow>> {
    if opts.reps == 0 {
        return Err(Error::Config("bench needs at least one repetition".into()));
    }
    let mut rows = Vec::new();
    for &n in &opts.lengths {
        let (q, k, v) = inputs(opts, n);
        let d_o = Rng::new(opts.seed + 1).normal_matrix(n, opts.dim, 1.0);
        let layout = plan_blocks(n, opts.block)?;
        for &skip in &opts.skip_modes {
            let fwd = ForwardOptions::default()
                .with_skip(skip)
                .with_exec(opts.exec);
            let f = blocked_forward(&q, &k, &v, &layout, &fwd)?;
            let row = |variant: &str, median_ms: f64| BenchRow {
                seq_len: n,
                block: opts.block,
                variant: variant.to_string(),
                skip,
                median_ms,
                tiles_visited: f.stats.visited,
                tiles_skipped: f.stats.skipped,
            };
            let ms = time_ms(opts.warmups, opts.reps, || {
                blocked_forward(&q, &k, &v, &layout, &fwd)
            })?;
            rows.push(row("forward", ms));
            if opts.backward {
                let ms = time_ms(opts.warmups, opts.reps, || {
                    blocked_backward_fused(&f.cache, &d_o, opts.exec)
                })?;
                rows.push(row("backward_fused", ms));
                let two = blocked_forward(&q, &k, &v, &layout, &fwd.two_phase())?;
                let ms = time_ms(opts.warmups, opts.reps, || {
                    blocked_backward_twophase(&two.cache, &d_o, None, opts.exec)
                })?;
                rows.push(row("backward_twophase", ms));
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference::sb_logits;

    #[test]
    fn constant_logits() {
        let (q, k, _) = constant_logit_inputs(5, 16, -100.0, 0);
        let z = sb_logits(&q, &k).unwrap();
        for j in 1..5 {
            for i in 0..j {
                assert!((z.z[(i, j)] + 100.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn medians() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn skipping_visits_fewer_tiles_only_when_saturated() {
        let base = BenchOptions {
            lengths: vec![256],
            block: 16,
            dim: 16,
            reps: 1,
            warmups: 0,
            backward: false,
            exec: Exec::Sequential,
            ..BenchOptions::default()
        };
        let rows = bench_suite(&base).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows[1].tiles_visited < rows[0].tiles_visited);
        let neg = bench_suite(&BenchOptions {
            input: BenchInput::Negative,
            ..base
        })
        .unwrap();
        assert_eq!(neg[0].tiles_visited, neg[1].tiles_visited);
        assert_eq!(neg[1].tiles_skipped, 0);
    }
}
