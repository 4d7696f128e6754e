//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `ACCEPTANCE=1,3,7` selects criteria by number; by default all run.
//! Failures are reported but the process exits zero unless
//! `ACCEPTANCE_STRICT=1` is set, in which case any FAIL exits with status 1.

mod experiments;

use std::time::{Duration, Instant};

use stickbreaking::blocked::{
    blocked_backward_fused, blocked_backward_twophase, blocked_forward, plan_blocks,
    saturating_inputs, ForwardOptions,
};
use stickbreaking::model::{AttentionVariant, AttnPath, Model, ModelConfig};
use stickbreaking::numerics::{matmul_tn, matmul_with, Matrix, Rng};
use stickbreaking::reference::{
    sb_backward, sb_forward, sb_forward_remainder, sb_recurrent, sb_weights_direct,
    sb_weights_logspace, AttnLogits,
};
use stickbreaking::tasks::{RecallTask, Vocab};
use stickbreaking::training::batch_loss_and_grads;
use stickbreaking::verify::{
    bench_suite, constant_logit_inputs, equivalence_suite, gradcheck_suite, BenchInput,
    BenchOptions, EquivOptions, GradcheckOptions, Precision,
};
use stickbreaking::Exec;

pub struct Verdict {
    pub pass: bool,
    pub detail: String,
}

impl Verdict {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

pub struct Criterion {
    pub id: u32,
    pub name: &'static str,
    pub budget: Duration,
    pub run: fn() -> Verdict,
}

fn random_logits(rng: &mut Rng, n: usize, bound: f64) -> AttnLogits {
    let z = Matrix::from_fn(n, n, |i, j| {
        if i < j {
            rng.uniform_range(-bound, bound)
        } else {
            0.0
        }
    });
    AttnLogits::from_matrix(z).expect("square logits")
}

fn weights(z: &AttnLogits) -> Matrix {
    sb_weights_logspace(z).0.a
}

fn c1_logspace_matches_direct() -> Verdict {
    let mut rng = Rng::new(101);
    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let n = 1 + rng.below(64);
        let z = random_logits(&mut rng, n, 10.0);
        worst = worst.max(sb_weights_direct(&z).a.max_abs_diff(&weights(&z)));
    }
    Verdict::new(
        worst < 1e-12,
        format!("500 matrices, max |direct - logspace| = {worst:.3e} (< 1e-12)"),
    )
}

fn c2_gradients() -> Verdict {
    let rows = gradcheck_suite(&GradcheckOptions::default());
    let sb: Vec<_> = rows
        .iter()
        .filter(|r| r.component.starts_with("sb_attention/"))
        .collect();
    let worst = sb.iter().map(|r| r.error).fold(0.0, f64::max);
    let shapes_ok = sb.len() == 9;
    let pass = shapes_ok && sb.iter().all(|r| r.error.is_finite() && r.error < 1e-6);
    Verdict::new(
        pass,
        format!(
            "{} rows (d_q, d_k, d_v × 3 shapes × 5 seeds), max relative error {worst:.3e} (< 1e-6)",
            sb.len()
        ),
    )
}

fn c3_blocked_equivalence() -> Verdict {
    let opts = EquivOptions {
        precision: Precision::F64,
        ..EquivOptions::default()
    };
    let rows = match equivalence_suite(&opts) {
        Ok(r) => r,
        Err(e) => return Verdict::new(false, e.to_string()),
    };
    let worst_ref = rows.iter().map(|r| r.max_ref_diff()).fold(0.0, f64::max);
    let worst_pair = rows
        .iter()
        .map(|r| r.two_phase_vs_fused)
        .fold(0.0, f64::max);
    let lengths_ok = rows.iter().any(|r| r.seq_len == 100 && r.block == 64);
    let pass = lengths_ok && rows.len() == 36 && worst_ref < 1e-9 && worst_pair < 1e-10;
    Verdict::new(
        pass,
        format!(
            "{} configurations, max |blocked - reference| = {worst_ref:.3e} (< 1e-9), two-phase vs fused {worst_pair:.3e} (< 1e-10)",
            rows.len()
        ),
    )
}

fn c4_block_skipping() -> Verdict {
    let (n, block) = (512, 16);
    let (q, k, v) = saturating_inputs(n, 64, 40.0, 4);
    let layout = plan_blocks(n, block).expect("layout");
    let run = |skip: bool| {
        blocked_forward(
            &q,
            &k,
            &v,
            &layout,
            &ForwardOptions::default()
                .with_skip(skip)
                .with_exec(Exec::Sequential),
        )
    };
    let (on, off) = match (run(true), run(false)) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => return Verdict::new(false, e.to_string()),
    };
    let diff = on.o.max_abs_diff(&off.o);
    let total = on.stats.visited + on.stats.skipped;
    let frac = on.stats.skipped as f64 / total as f64;
    let rows = match bench_suite(&BenchOptions {
        lengths: vec![n],
        block,
        dim: 64,
        reps: 21,
        warmups: 3,
        input: BenchInput::Saturating,
        skip_modes: vec![false, true],
        backward: false,
        seed: 4,
        exec: Exec::Sequential,
    }) {
        Ok(r) => r,
        Err(e) => return Verdict::new(false, e.to_string()),
    };
    let ms = |skip: bool| {
        rows.iter()
            .find(|r| r.skip == skip)
            .map_or(f64::NAN, |r| r.median_ms)
    };
    let (t_off, t_on) = (ms(false), ms(true));
    let reduction = 1.0 - t_on / t_off;
    let pass = diff < 1e-9 && frac > 0.5 && reduction >= 0.05;
    Verdict::new(
        pass,
        format!(
            "skip-on vs off {diff:.3e} (< 1e-9), skipped {}/{total} tiles = {:.1}% (> 50%), median {t_off:.3} → {t_on:.3} ms = {:.1}% faster (≥ 5%)",
            on.stats.skipped,
            100.0 * frac,
            100.0 * reduction
        ),
    )
}

fn c5_invariants() -> Verdict {
    let mut rng = Rng::new(505);
    let cases = 200;
    let mut max_sum: f64 = 0.0;
    let mut recency_violations = 0;
    let mut distraction: f64 = 0.0;
    let mut prefix: f64 = 0.0;
    for _ in 0..cases {
        let n = 2 + rng.below(63);
        let z = random_logits(&mut rng, n, 10.0);
        let a = weights(&z);
        let wide = weights(&random_logits(&mut rng, n, 40.0));
        for j in 0..n {
            max_sum = max_sum.max((0..n).map(|i| a[(i, j)]).sum());
            max_sum = max_sum.max((0..n).map(|i| wide[(i, j)]).sum());
        }

        let c = rng.uniform_range(-10.0, 10.0);
        let flat = weights(
            &AttnLogits::from_matrix(Matrix::from_fn(n, n, |i, j| if i < j { c } else { 0.0 }))
                .unwrap(),
        );
        for j in 1..n {
            for i in 0..j - 1 {
                if flat[(i, j)] > flat[(i + 1, j)] {
                    recency_violations += 1;
                }
            }
        }

        let j = 1 + rng.below(n - 1);
        let i = rng.below(j);
        let mut zp = z.z.clone();
        for kk in 0..i {
            zp[(kk, j)] += rng.uniform_range(-5.0, 5.0);
        }
        let ap = weights(&AttnLogits::from_matrix(zp).unwrap());
        distraction = distraction.max((ap[(i, j)] - a[(i, j)]).abs());

        let s = rng.below(n - 1);
        let v = rng.normal_matrix(n, 4, 1.0);
        let mut zs = z.z.clone();
        for jj in s + 1..n {
            zs[(s, jj)] = 40.0;
        }
        let mut zs2 = zs.clone();
        let mut v2 = v.clone();
        for jj in s + 1..n {
            for kk in 0..s {
                zs2[(kk, jj)] = rng.uniform_range(-10.0, 10.0);
            }
        }
        for kk in 0..s {
            for col in 0..4 {
                v2[(kk, col)] = rng.normal();
            }
        }
        let o1 = matmul_tn(&weights(&AttnLogits::from_matrix(zs).unwrap()), &v).unwrap();
        let o2 = matmul_tn(&weights(&AttnLogits::from_matrix(zs2).unwrap()), &v2).unwrap();
        for jj in s + 1..n {
            for col in 0..4 {
                prefix = prefix.max((o1[(jj, col)] - o2[(jj, col)]).abs());
            }
        }
    }
    let pass =
        max_sum <= 1.0 + 1e-9 && recency_violations == 0 && distraction < 1e-12 && prefix < 1e-9;
    Verdict::new(
        pass,
        format!(
            "{cases} cases: max row sum {max_sum:.15} (≤ 1+1e-9, logits up to ±10 and ±40), recency violations {recency_violations}, distraction {distraction:.3e} (< 1e-12), saturated prefix {prefix:.3e} (< 1e-9)"
        ),
    )
}

fn c6_recurrence() -> Verdict {
    let mut rng = Rng::new(606);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = 1 + rng.below(64);
        let d = 1 + rng.below(8);
        let q = rng.normal_matrix(n, d, 1.0);
        let k = rng.normal_matrix(n, d, 1.0);
        let v = rng.normal_matrix(n, d, 1.0);
        match (sb_recurrent(&q, &k, &v), sb_forward(&q, &k, &v)) {
            (Ok(r), Ok((o, _))) => worst = worst.max(r.max_abs_diff(&o)),
            (Err(e), _) | (_, Err(e)) => return Verdict::new(false, e.to_string()),
        }
    }
    Verdict::new(
        worst < 1e-12,
        format!("100 cases, max |recurrent - parallel| = {worst:.3e} (< 1e-12)"),
    )
}

/// Everything a kernel run produces, flattened for bitwise comparison.
fn kernel_fingerprint(exec: Exec) -> Vec<u64> {
    let mut bits = Vec::new();
    let mut push = |m: &Matrix| bits.extend(m.data().iter().map(|x| x.to_bits()));
    let mut rng = Rng::new(707);
    for (n, block) in [(100, 16), (256, 64), (64, 8)] {
        let q = rng.normal_matrix(n, 16, 1.0);
        let k = rng.normal_matrix(n, 16, 1.0);
        let v = rng.normal_matrix(n, 16, 1.0);
        let d_o = rng.normal_matrix(n, 16, 1.0);
        let layout = plan_blocks(n, block).unwrap();
        let opts = ForwardOptions::default().with_exec(exec);
        let f = blocked_forward(&q, &k, &v, &layout, &opts).unwrap();
        push(&f.o);
        let g = blocked_backward_fused(&f.cache, &d_o, exec).unwrap();
        push(&g.d_q);
        push(&g.d_k);
        push(&g.d_v);
        let f2 = blocked_forward(&q, &k, &v, &layout, &opts.two_phase()).unwrap();
        push(&f2.o);
        let g2 = blocked_backward_twophase(&f2.cache, &d_o, None, exec).unwrap();
        push(&g2.grads.d_q);
        push(&g2.grads.d_k);
        push(&g2.grads.d_v);
        let (o, cache) = sb_forward(&q, &k, &v).unwrap();
        push(&o);
        let r = sb_backward(&cache, &d_o).unwrap();
        push(&r.d_q);
        push(&r.d_k);
        push(&r.d_v);
        push(&matmul_with(&q, &k.transpose(), exec).unwrap());
    }
    let vocab = Vocab::for_pairs(8);
    for path in [AttnPath::Reference, AttnPath::Blocked { block: 16 }] {
        let mut cfg = ModelConfig::single_head(vocab.size(), 32, 2, 64, AttentionVariant::Sb);
        cfg.attn.path = path;
        let model = Model::init(cfg, 3).unwrap();
        let batch = RecallTask::Mqrar {
            n_kv: 8,
            n_queries: 8,
        }
        .batch(&vocab, 6, 9, Exec::Sequential)
        .unwrap();
        let (loss, grads) = batch_loss_and_grads(&model, &batch, exec).unwrap();
        bits.push(loss.to_bits());
        for (_, g) in grads.iter() {
            bits.extend(g.data().iter().map(|x| x.to_bits()));
        }
    }
    bits
}

fn c7_determinism() -> Verdict {
    let reference = kernel_fingerprint(Exec::Sequential);
    let mut mismatches = Vec::new();
    for threads in [1, 2, 8] {
        for rep in 0..2 {
            if kernel_fingerprint(Exec::threads(threads)) != reference {
                mismatches.push(format!("{threads} workers run {rep}"));
            }
        }
    }
    Verdict::new(
        mismatches.is_empty(),
        format!(
            "{} values compared over 6 runs ({{1, 2, 8}} workers × 2); mismatches: {}",
            reference.len(),
            if mismatches.is_empty() {
                "none".to_string()
            } else {
                mismatches.join(", ")
            }
        ),
    )
}

fn c10_variants() -> Verdict {
    let mut untouched: f64 = 0.0;
    for (n, seed) in [(1, 0), (9, 1), (40, 2)] {
        let (q, k, v) = constant_logit_inputs(n, 8, -100.0, seed);
        match sb_forward_remainder(&q, &k, &v) {
            Ok(o) => untouched = untouched.max(o.max_abs_diff(&v)),
            Err(e) => return Verdict::new(false, e.to_string()),
        }
    }

    let vocab = Vocab::for_pairs(8);
    let tokens: Vec<usize> = {
        let mut rng = Rng::new(10);
        (0..40).map(|_| rng.below(vocab.size())).collect()
    };
    let mut exact = true;
    for path in [AttnPath::Reference, AttnPath::Blocked { block: 8 }] {
        let base = |variant| {
            let mut cfg = ModelConfig::single_head(vocab.size(), 16, 2, 32, variant);
            cfg.attn.n_head = 2;
            cfg.attn.d_head = 8;
            cfg.attn.path = path;
            Model::init(cfg, 11).and_then(|m| m.logits(&tokens))
        };
        match (
            base(AttentionVariant::Sb),
            base(AttentionVariant::SbRemainderBias),
        ) {
            (Ok(a), Ok(b)) => exact &= a == b,
            (Err(e), _) | (_, Err(e)) => return Verdict::new(false, e.to_string()),
        }
    }

    let rows = gradcheck_suite(&GradcheckOptions {
        seeds: 1,
        ..GradcheckOptions::default()
    });
    let relevant: Vec<_> = rows
        .iter()
        .filter(|r| {
            (r.component.starts_with("mha/") || r.component.starts_with("model/"))
                && (r.component.contains("remainder_bias") || r.component.contains("+gn"))
        })
        .collect();
    let worst = relevant.iter().map(|r| r.error).fold(0.0, f64::max);
    let grads_ok = !relevant.is_empty()
        && relevant
            .iter()
            .all(|r| r.error.is_finite() && r.error < 1e-5);
    let pass = untouched < 1e-12 && exact && grads_ok;
    Verdict::new(
        pass,
        format!(
            "untouched stick |o - v_j| = {untouched:.3e} (< 1e-12), RB(r=0) == sb bitwise: {exact}, {} remainder/group-norm gradient rows max error {worst:.3e} (< 1e-5)",
            relevant.len()
        ),
    )
}

fn criteria() -> Vec<Criterion> {
    let mut all = vec![
        Criterion {
            id: 1,
            name: "log-space weights equal direct product",
            budget: Duration::from_secs(10),
            run: c1_logspace_matches_direct,
        },
        Criterion {
            id: 2,
            name: "analytic gradients match finite differences",
            budget: Duration::from_secs(60),
            run: c2_gradients,
        },
        Criterion {
            id: 3,
            name: "tiled kernels match the reference",
            budget: Duration::from_secs(120),
            run: c3_blocked_equivalence,
        },
        Criterion {
            id: 4,
            name: "block skipping is sound and faster",
            budget: Duration::MAX,
            run: c4_block_skipping,
        },
        Criterion {
            id: 5,
            name: "stick-breaking invariants",
            budget: Duration::MAX,
            run: c5_invariants,
        },
        Criterion {
            id: 6,
            name: "recurrent form equals parallel form",
            budget: Duration::MAX,
            run: c6_recurrence,
        },
        Criterion {
            id: 7,
            name: "bitwise determinism across workers and runs",
            budget: Duration::MAX,
            run: c7_determinism,
        },
    ];
    all.extend(experiments::criteria());
    all.push(Criterion {
        id: 10,
        name: "remainder and group-norm variants",
        budget: Duration::from_secs(60),
        run: c10_variants,
    });
    all
}

fn selected() -> Option<Vec<u32>> {
    let raw = std::env::var("ACCEPTANCE").ok()?;
    Some(
        raw.split(',')
            .filter_map(|s| s.trim().parse().ok())
            .collect(),
    )
}

fn main() {
    let only = selected();
    let mut failed = 0;
    let mut ran = 0;
    for c in criteria() {
        if only.as_ref().is_some_and(|ids| !ids.contains(&c.id)) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let verdict = (c.run)();
        let elapsed = start.elapsed();
        let in_budget = elapsed <= c.budget;
        let pass = verdict.pass && in_budget;
        let budget = if c.budget == Duration::MAX {
            String::new()
        } else {
            format!(
                ", budget {:.0} s{}",
                c.budget.as_secs_f64(),
                if in_budget { "" } else { " EXCEEDED" }
            )
        };
        println!(
            "{} criterion {:>2}: {}: {} [{:.1} s{budget}]",
            if pass { "PASS" } else { "FAIL" },
            c.id,
            c.name,
            verdict.detail,
            elapsed.as_secs_f64()
        );
        if !pass {
            failed += 1;
        }
    }
    println!("acceptance: {} of {ran} criteria pass", ran - failed);
    if failed > 0 && std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
