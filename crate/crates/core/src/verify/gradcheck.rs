//! Analytic gradients against central finite differences.

use serde::{Deserialize, Serialize};

use super::CheckRow;
use crate::blocked::{
    blocked_backward_fused, blocked_backward_twophase, blocked_forward, plan_blocks, ForwardOptions,
};
use crate::error::{Error, Result};
use crate::model::{gelu, gelu_grad};
use crate::model::{
    layer_norm, layer_norm_backward, linear, linear_backward, mha_backward, mha_forward,
    transformer_backward, transformer_forward, AttentionVariant, AttnPath, MhaParams, ModelConfig,
    ModelParams, NORM_EPS,
};
use crate::numerics::{finite_diff_grad, max_rel_error, Matrix, Rng};
use crate::parallel::Exec;
use crate::reference::{
    sb_backward, sb_forward, softmax_attention, softmax_backward, HeadIndex, PositionScheme,
};
use crate::training::cross_entropy_masked;

/// Deliberate corruption of an analytic gradient, used to show that the
/// suite detects errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fault {
    /// Negate the reference stick-breaking key gradient.
    FlipKeyGrad,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckOptions {
    /// Replaces every per-row tolerance when set.
    pub tolerance: Option<f64>,
    pub fault: Option<Fault>,
    pub seeds: u64,
    pub step: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            tolerance: None,
            fault: None,
            seeds: 5,
            step: 1e-5,
        }
    }
}

const KERNEL_TOL: f64 = 1e-6;
const MODEL_TOL: f64 = 1e-5;

/// `(L, d)` shapes of the attention-level checks.
pub const ATTENTION_SHAPES: [(usize, usize); 3] = [(2, 1), (5, 4), (17, 8)];

struct Accum {
    component: String,
    tolerance: f64,
    error: f64,
    note: String,
}

impl Accum {
    fn new(component: impl Into<String>, tolerance: f64) -> Self {
        Self {
            component: component.into(),
            tolerance,
            error: 0.0,
            note: String::new(),
        }
    }

    fn record(&mut self, analytic: &Matrix, fd: Result<Matrix>, location: &str) {
        if !self.error.is_finite() {
            return;
        }
        match fd {
            Ok(fd) => {
                let e = max_rel_error(analytic, &fd);
                if !(e <= self.error) {
                    self.error = e;
                    self.note = location.to_string();
                }
            }
            Err(Error::Oracle { row, col, value }) => {
                self.error = f64::NAN;
                self.note = format!("{location}: objective {value} at ({row}, {col})");
            }
            Err(e) => self.fail(format!("{location}: {e}")),
        }
    }

    fn fail(&mut self, note: String) {
        self.error = f64::NAN;
        self.note = note;
    }

    fn finish(self, override_tol: Option<f64>) -> CheckRow {
        CheckRow {
            component: self.component,
            error: self.error,
            tolerance: override_tol.unwrap_or(self.tolerance),
            note: self.note,
        }
    }
}

type Head = dyn Fn(&Matrix, &Matrix, &Matrix) -> Result<Matrix>;
type HeadGrads = dyn Fn(&Matrix, &Matrix, &Matrix, &Matrix) -> Result<[Matrix; 3]>;

/// Checks `d_q`, `d_k`, `d_v` of an attention head under `L = Σ o ⊙ target`.
fn attention_rows(
    name: &str,
    shapes: &[(usize, usize)],
    opts: &GradcheckOptions,
    forward: &Head,
    backward: &HeadGrads,
) -> Vec<CheckRow> {
    let mut rows = Vec::new();
    for &(n, d) in shapes {
        let mut acc: Vec<Accum> = ["d_q", "d_k", "d_v"]
            .iter()
            .map(|t| Accum::new(format!("{name}/{t} L={n} d={d}"), KERNEL_TOL))
            .collect();
        for seed in 0..opts.seeds {
            let mut rng = Rng::new(seed * 1000 + (n * 31 + d) as u64);
            let q = rng.normal_matrix(n, d, 1.0);
            let k = rng.normal_matrix(n, d, 1.0);
            let v = rng.normal_matrix(n, d, 1.0);
            let target = rng.normal_matrix(n, d, 1.0);
            let grads = match backward(&q, &k, &v, &target) {
                Ok(g) => g,
                Err(e) => {
                    acc.iter_mut()
                        .for_each(|a| a.fail(format!("seed {seed}: {e}")));
                    continue;
                }
            };
            let objective = |q: &Matrix, k: &Matrix, v: &Matrix| {
                forward(q, k, v)
                    .map(|o| o.frobenius_dot(&target))
                    .unwrap_or(f64::NAN)
            };
            let loc = format!("seed {seed}");
            acc[0].record(
                &grads[0],
                finite_diff_grad(|m| objective(m, &k, &v), &q, opts.step),
                &loc,
            );
            acc[1].record(
                &grads[1],
                finite_diff_grad(|m| objective(&q, m, &v), &k, opts.step),
                &loc,
            );
            acc[2].record(
                &grads[2],
                finite_diff_grad(|m| objective(&q, &k, m), &v, opts.step),
                &loc,
            );
        }
        rows.extend(acc.into_iter().map(|a| a.finish(opts.tolerance)));
    }
    rows
}

fn stick_rows(opts: &GradcheckOptions) -> Vec<CheckRow> {
    let fault = opts.fault;
    let forward = |q: &Matrix, k: &Matrix, v: &Matrix| Ok(sb_forward(q, k, v)?.0);
    let backward = move |q: &Matrix, k: &Matrix, v: &Matrix, d_o: &Matrix| {
        let (_, cache) = sb_forward(q, k, v)?;
        let g = sb_backward(&cache, d_o)?;
        let d_k = match fault {
            Some(Fault::FlipKeyGrad) => g.d_k.scaled(-1.0),
            None => g.d_k,
        };
        Ok([g.d_q, d_k, g.d_v])
    };
    attention_rows("sb_attention", &ATTENTION_SHAPES, opts, &forward, &backward)
}

fn blocked_rows(opts: &GradcheckOptions) -> Vec<CheckRow> {
    let block = 4;
    let forward = move |q: &Matrix, k: &Matrix, v: &Matrix| {
        let layout = plan_blocks(q.rows(), block)?;
        Ok(blocked_forward(
            q,
            k,
            v,
            &layout,
            &ForwardOptions::default().with_exec(Exec::Sequential),
        )?
        .o)
    };
    let fused = move |q: &Matrix, k: &Matrix, v: &Matrix, d_o: &Matrix| {
        let layout = plan_blocks(q.rows(), block)?;
        let f = blocked_forward(
            q,
            k,
            v,
            &layout,
            &ForwardOptions::default().with_exec(Exec::Sequential),
        )?;
        let g = blocked_backward_fused(&f.cache, d_o, Exec::Sequential)?;
        Ok([g.d_q, g.d_k, g.d_v])
    };
    let two_phase = move |q: &Matrix, k: &Matrix, v: &Matrix, d_o: &Matrix| {
        let layout = plan_blocks(q.rows(), block)?;
        let opts = ForwardOptions::default()
            .with_exec(Exec::Sequential)
            .two_phase();
        let f = blocked_forward(q, k, v, &layout, &opts)?;
        let g = blocked_backward_twophase(&f.cache, d_o, None, Exec::Sequential)?.grads;
        Ok([g.d_q, g.d_k, g.d_v])
    };
    let shapes = [(17, 8)];
    let mut rows = attention_rows("blocked_fused", &shapes, opts, &forward, &fused);
    rows.extend(attention_rows(
        "blocked_twophase",
        &shapes,
        opts,
        &forward,
        &two_phase,
    ));
    rows
}

fn softmax_rows(opts: &GradcheckOptions) -> Vec<CheckRow> {
    let schemes = [
        ("softmax_nope", PositionScheme::none()),
        ("softmax_rope", PositionScheme::rope()),
        ("softmax_alibi", PositionScheme::alibi()),
        ("softmax_window3", PositionScheme::none().with_window(3)),
    ];
    let mut rows = Vec::new();
    for (name, scheme) in schemes {
        let forward = move |q: &Matrix, k: &Matrix, v: &Matrix| {
            Ok(softmax_attention(q, k, v, &scheme, HeadIndex::default())?.0)
        };
        let backward = move |q: &Matrix, k: &Matrix, v: &Matrix, d_o: &Matrix| {
            let (_, cache) = softmax_attention(q, k, v, &scheme, HeadIndex::default())?;
            let g = softmax_backward(&cache, d_o)?;
            Ok([g.d_q, g.d_k, g.d_v])
        };
        rows.extend(attention_rows(name, &[(9, 4)], opts, &forward, &backward));
    }
    rows
}

fn row(v: Vec<f64>) -> Matrix {
    let n = v.len();
    Matrix::from_vec(1, n, v).expect("row length")
}

fn layer_rows(opts: &GradcheckOptions) -> Vec<CheckRow> {
    let mut rng = Rng::new(77);
    let h = opts.step;
    let x = rng.normal_matrix(5, 6, 1.0);
    let target = rng.normal_matrix(5, 6, 1.0);
    let gain = rng.normal_matrix(1, 6, 1.0);
    let bias = rng.normal_matrix(1, 6, 1.0);
    let ln = |x: &Matrix, g: &Matrix, b: &Matrix| {
        layer_norm(x, g.row(0), b.row(0), NORM_EPS)
            .map(|(y, _)| y.frobenius_dot(&target))
            .unwrap_or(f64::NAN)
    };
    let mut out = Vec::new();
    let mut norm = Accum::new("layer_norm/dx,d_gain,d_bias", KERNEL_TOL);
    match layer_norm(&x, gain.row(0), bias.row(0), NORM_EPS) {
        Ok((_, cache)) => {
            let (dx, dg, db) = layer_norm_backward(&cache, gain.row(0), &target);
            norm.record(&dx, finite_diff_grad(|m| ln(m, &gain, &bias), &x, h), "dx");
            norm.record(
                &row(dg),
                finite_diff_grad(|m| ln(&x, m, &bias), &gain, h),
                "d_gain",
            );
            norm.record(
                &row(db),
                finite_diff_grad(|m| ln(&x, &gain, m), &bias, h),
                "d_bias",
            );
        }
        Err(e) => norm.fail(e.to_string()),
    }
    out.push(norm.finish(opts.tolerance));

    let mut act = Accum::new("gelu/dx", KERNEL_TOL);
    let analytic = Matrix::from_fn(5, 6, |r, c| gelu_grad(x[(r, c)]) * target[(r, c)]);
    act.record(
        &analytic,
        finite_diff_grad(|m| m.map(gelu).frobenius_dot(&target), &x, h),
        "dx",
    );
    out.push(act.finish(opts.tolerance));

    let w = rng.normal_matrix(6, 3, 1.0);
    let b = rng.normal_matrix(1, 3, 1.0);
    let t3 = rng.normal_matrix(5, 3, 1.0);
    let lin = |x: &Matrix, w: &Matrix, b: &Matrix| {
        linear(x, w, Some(b))
            .map(|y| y.frobenius_dot(&t3))
            .unwrap_or(f64::NAN)
    };
    let mut dense = Accum::new("linear/dx,dw,db", KERNEL_TOL);
    match linear_backward(&x, &w, &t3) {
        Ok((dx, dw, db)) => {
            dense.record(&dx, finite_diff_grad(|m| lin(m, &w, &b), &x, h), "dx");
            dense.record(&dw, finite_diff_grad(|m| lin(&x, m, &b), &w, h), "dw");
            dense.record(&db, finite_diff_grad(|m| lin(&x, &w, m), &b, h), "db");
        }
        Err(e) => dense.fail(e.to_string()),
    }
    out.push(dense.finish(opts.tolerance));
    out
}

/// Small model with non-trivial remainder and group-norm parameters.
fn toy_model(
    variant: AttentionVariant,
    gn: bool,
    path: AttnPath,
    seed: u64,
) -> (ModelConfig, ModelParams) {
    let mut cfg = ModelConfig::single_head(7, 8, 2, 16, variant);
    cfg.attn.n_head = 2;
    cfg.attn.d_head = 4;
    cfg.attn.group_norm = gn;
    cfg.attn.path = path;
    if variant == AttentionVariant::Softmax {
        cfg.attn.scheme = PositionScheme::rope();
    }
    cfg.init_std = 0.5;
    let mut params = ModelParams::init(&cfg, seed).expect("valid toy config");
    let mut rng = Rng::new(seed + 1);
    for (name, m) in params.iter_mut() {
        if name.contains("remainder")
            || name.contains("gn.")
            || name.contains("norm")
            || name.contains(".b_")
        {
            *m = rng.normal_matrix(m.rows(), m.cols(), 0.5);
        }
    }
    (cfg, params)
}

fn variant_label(variant: AttentionVariant, gn: bool, path: AttnPath) -> String {
    let v = serde_json::to_value(variant)
        .ok()
        .and_then(|v| v.as_str().map(String::from))
        .unwrap_or_default();
    let p = match path {
        AttnPath::Reference => "reference".to_string(),
        AttnPath::Blocked { block } => format!("blocked{block}"),
    };
    format!("{v}{} {p}", if gn { "+gn" } else { "" })
}

fn configurations() -> Vec<(AttentionVariant, bool, AttnPath)> {
    let mut out = Vec::new();
    for variant in [
        AttentionVariant::Sb,
        AttentionVariant::SbRemainder,
        AttentionVariant::SbRemainderBias,
    ] {
        for gn in [false, true] {
            out.push((variant, gn, AttnPath::Reference));
        }
        out.push((variant, true, AttnPath::Blocked { block: 4 }));
    }
    out.push((AttentionVariant::Softmax, false, AttnPath::Reference));
    out
}

fn mha_rows(opts: &GradcheckOptions) -> Vec<CheckRow> {
    let mut rows = Vec::new();
    for (variant, gn, path) in configurations() {
        let (cfg, params) = toy_model(variant, gn, path, 3);
        let mut acc = Accum::new(
            format!("mha/{}", variant_label(variant, gn, path)),
            KERNEL_TOL,
        );
        let mut rng = Rng::new(4);
        let x = rng.normal_matrix(7, 8, 1.0);
        let target = rng.normal_matrix(7, 8, 1.0);
        let objective = |params: &ModelParams, x: &Matrix| -> f64 {
            MhaParams::from_model(params, 0, &cfg.attn)
                .and_then(|p| mha_forward(x, &p, &cfg.attn))
                .map(|(y, _)| y.frobenius_dot(&target))
                .unwrap_or(f64::NAN)
        };
        let analytic = MhaParams::from_model(&params, 0, &cfg.attn).and_then(|p| {
            let (_, cache) = mha_forward(&x, &p, &cfg.attn)?;
            mha_backward(&cache, &p, &cfg.attn, &target)
        });
        let (dx, grads) = match analytic {
            Ok(g) => g,
            Err(e) => {
                acc.fail(e.to_string());
                rows.push(acc.finish(opts.tolerance));
                continue;
            }
        };
        acc.record(
            &dx,
            finite_diff_grad(|m| objective(&params, m), &x, opts.step),
            "dx",
        );
        let mut named = vec![
            ("attn.wq", grads.wq),
            ("attn.wk", grads.wk),
            ("attn.wv", grads.wv),
            ("attn.wo", grads.wo),
        ];
        if let Some(r) = grads.remainder {
            named.push(("attn.remainder", r));
        }
        if let Some((g, b)) = grads.gn {
            named.push(("attn.gn.gain", g));
            named.push(("attn.gn.bias", b));
        }
        for (name, analytic) in named {
            let full = format!("layers.0.{name}");
            let base = params.get(&full).expect("toy parameter").clone();
            let fd = finite_diff_grad(
                |m| {
                    let mut pp = params.clone();
                    *pp.get_mut(&full).expect("toy parameter") = m.clone();
                    objective(&pp, &x)
                },
                &base,
                opts.step,
            );
            acc.record(&analytic, fd, name);
        }
        rows.push(acc.finish(opts.tolerance));
    }
    rows
}

fn model_rows(opts: &GradcheckOptions) -> Vec<CheckRow> {
    let mut rows = Vec::new();
    for (variant, gn, path) in configurations() {
        let (cfg, params) = toy_model(variant, gn, path, 5);
        let mut acc = Accum::new(
            format!("model/{}", variant_label(variant, gn, path)),
            MODEL_TOL,
        );
        let mut rng = Rng::new(6);
        let tokens: Vec<usize> = (0..6).map(|_| rng.below(cfg.vocab)).collect();
        let targets: Vec<usize> = (0..6).map(|_| rng.below(cfg.vocab)).collect();
        let mask = [true, false, true, true, true, false];
        let objective = |p: &ModelParams| -> f64 {
            transformer_forward(&tokens, p, &cfg)
                .and_then(|(logits, _)| cross_entropy_masked(&logits, &targets, &mask))
                .map(|(l, _)| l)
                .unwrap_or(f64::NAN)
        };
        let analytic = transformer_forward(&tokens, &params, &cfg).and_then(|(logits, cache)| {
            let (_, d_logits) = cross_entropy_masked(&logits, &targets, &mask)?;
            transformer_backward(&cache, &params, &cfg, &d_logits)
        });
        let grads = match analytic {
            Ok(g) => g,
            Err(e) => {
                acc.fail(e.to_string());
                rows.push(acc.finish(opts.tolerance));
                continue;
            }
        };
        for (name, g) in grads.iter() {
            let base = params.get(name).expect("same layout").clone();
            let fd = finite_diff_grad(
                |m| {
                    let mut pp = params.clone();
                    *pp.get_mut(name).expect("same layout") = m.clone();
                    objective(&pp)
                },
                &base,
                opts.step,
            );
            acc.record(g, fd, name);
        }
        rows.push(acc.finish(opts.tolerance));
    }
    rows
}

/// Full finite-difference suite: attention kernels, softmax baselines,
/// layers, multi-head attention and the whole model, one row per component.
pub fn gradcheck_suite(opts: &GradcheckOptions) -> Vec<CheckRow> {
    let mut rows = stick_rows(opts);
    rows.extend(blocked_rows(opts));
    rows.extend(softmax_rows(opts));
    rows.extend(layer_rows(opts));
    rows.extend(mha_rows(opts));
    rows.extend(model_rows(opts));
    rows
}
