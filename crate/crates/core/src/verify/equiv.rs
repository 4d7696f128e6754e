//! Tiled kernels against the dense reference.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::blocked::{
    blocked_backward_fused, blocked_backward_twophase, blocked_forward, plan_blocks, ForwardOptions,
};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Real, Rng};
use crate::parallel::Exec;
use crate::reference::{sb_backward, sb_forward};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Config(format!(
                "precision must be f32 or f64, got `{other}`"
            ))),
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EquivOptions {
    pub lengths: Vec<usize>,
    pub blocks: Vec<usize>,
    pub skip_modes: Vec<bool>,
    pub dim: usize,
    pub seed: u64,
    pub precision: Precision,
    pub exec: Exec,
}

impl Default for EquivOptions {
    fn default() -> Self {
        Self {
            lengths: vec![1, 7, 64, 100, 256, 512],
            blocks: vec![8, 16, 64],
            skip_modes: vec![false, true],
            dim: 16,
            seed: 0,
            precision: Precision::F64,
            exec: Exec::default(),
        }
    }
}

/// Differences between the tiled passes and the reference for one
/// configuration. In 64-bit runs they are max-abs differences; in 32-bit
/// runs they are relative to the largest reference magnitude.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivRow {
    pub seq_len: usize,
    pub block: usize,
    pub skip: bool,
    pub precision: Precision,
    pub o: f64,
    pub d_q: f64,
    pub d_k: f64,
    pub d_v: f64,
    /// Two-phase against fused gradients.
    pub two_phase_vs_fused: f64,
    pub tiles_visited: usize,
    pub tiles_skipped: usize,
    pub tolerance: f64,
    pub pair_tolerance: f64,
}

impl EquivRow {
    pub const CSV_HEADER: &'static str =
        "L,d_block,skip,precision,o,d_q,d_k,d_v,twophase_vs_fused,tiles_visited,tiles_skipped,tolerance,pass";

    pub fn max_ref_diff(&self) -> f64 {
        [self.o, self.d_q, self.d_k, self.d_v]
            .into_iter()
            .fold(
                0.0,
                |a: f64, b| if b.is_nan() { f64::NAN } else { a.max(b) },
            )
    }

    pub fn passed(&self) -> bool {
        let ok = |x: f64, tol: f64| x.is_finite() && x < tol;
        [self.o, self.d_q, self.d_k, self.d_v]
            .iter()
            .all(|&x| ok(x, self.tolerance))
            && ok(self.two_phase_vs_fused, self.pair_tolerance)
    }

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{:e},{:e},{:e},{:e},{:e},{},{},{:e},{}",
            self.seq_len,
            self.block,
            if self.skip { "on" } else { "off" },
            self.precision,
            self.o,
            self.d_q,
            self.d_k,
            self.d_v,
            self.two_phase_vs_fused,
            self.tiles_visited,
            self.tiles_skipped,
            self.tolerance,
            if self.passed() { "pass" } else { "fail" }
        )
    }
}

fn diff<T: Real>(got: &Matrix<T>, want: &Matrix, relative: bool) -> f64 {
    let got = got.cast::<f64>();
    let d = got.max_abs_diff(want);
    if !relative {
        return d;
    }
    let scale = want.max_abs();
    if scale == 0.0 {
        d
    } else {
        d / scale
    }
}

fn run_one<T: Real>(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    d_o: &Matrix,
    reference: &(Matrix, [Matrix; 3]),
    block: usize,
    skip: bool,
    opts: &EquivOptions,
) -> Result<EquivRow> {
    let relative = opts.precision == Precision::F32;
    let layout = plan_blocks(q.rows(), block)?;
    let fwd_opts = ForwardOptions::default()
        .with_skip(skip)
        .with_exec(opts.exec)
        .two_phase();
    let (qt, kt, vt, dot) = (q.cast::<T>(), k.cast::<T>(), v.cast::<T>(), d_o.cast::<T>());
    let f = blocked_forward(&qt, &kt, &vt, &layout, &fwd_opts)?;
    let fused = blocked_backward_fused(&f.cache, &dot, opts.exec)?;
    let two = blocked_backward_twophase(&f.cache, &dot, None, opts.exec)?.grads;
    let (ref_o, [rq, rk, rv]) = reference;
    let worst =
        |a: &Matrix<T>, b: &Matrix<T>, r: &Matrix| diff(a, r, relative).max(diff(b, r, relative));
    let pair = [
        (&two.d_q, &fused.d_q),
        (&two.d_k, &fused.d_k),
        (&two.d_v, &fused.d_v),
    ]
    .iter()
    .map(|(a, b)| diff(a, &b.cast::<f64>(), relative))
    .fold(0.0, f64::max);
    let (tol, pair_tol) = if relative {
        (2e-3, 2e-3)
    } else {
        (1e-9, 1e-10)
    };
    Ok(EquivRow {
        seq_len: q.rows(),
        block,
        skip,
        precision: opts.precision,
        o: diff(&f.o, ref_o, relative),
        d_q: worst(&fused.d_q, &two.d_q, rq),
        d_k: worst(&fused.d_k, &two.d_k, rk),
        d_v: worst(&fused.d_v, &two.d_v, rv),
        two_phase_vs_fused: pair,
        tiles_visited: f.stats.visited,
        tiles_skipped: f.stats.skipped,
        tolerance: tol,
        pair_tolerance: pair_tol,
    })
}

/// Forward, fused backward and two-phase backward against the dense
/// reference for every `(L, d_block, skip)` combination. Inputs depend only
/// on `(seed, L)`.
pub fn equivalence_suite(opts: &EquivOptions) -> Result<Vec<EquivRow>> {
    let mut rows = Vec::new();
    for &n in &opts.lengths {
        let mut rng = Rng::new(opts.seed ^ (n as u64).wrapping_mul(0x9E37_79B9));
        let d = opts.dim;
        let q = rng.normal_matrix(n, d, 1.0);
        let k = rng.normal_matrix(n, d, 1.0);
        let v = rng.normal_matrix(n, d, 1.0);
        let d_o = rng.normal_matrix(n, d, 1.0);
        let (o, cache) = sb_forward(&q, &k, &v)?;
        let g = sb_backward(&cache, &d_o)?;
        let reference = (o, [g.d_q, g.d_k, g.d_v]);
        for &block in &opts.blocks {
            for &skip in &opts.skip_modes {
                let row = match opts.precision {
                    Precision::F64 => {
                        run_one::<f64>(&q, &k, &v, &d_o, &reference, block, skip, opts)?
                    }
                    Precision::F32 => {
                        run_one::<f32>(&q, &k, &v, &d_o, &reference, block, skip, opts)?
                    }
                };
                rows.push(row);
            }
        }
    }
    Ok(rows)
}
