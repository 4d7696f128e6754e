use std::io::BufReader;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;
use stickbreaking::blocked::saturating_inputs;
use stickbreaking::model::{transformer_forward, Model};
use stickbreaking::numerics::Matrix;
use stickbreaking::reference::sb_forward;
use stickbreaking::tasks::{mqrar_from_pairs, read_jsonl, TaskInstance, Vocab};
use stickbreaking::training::{ExperimentSpec, TaskSpec};

use crate::run::{load, RunContext};
use crate::svg::heatmap;
use crate::{ConfigError, Outcome};

#[derive(Debug, Serialize)]
struct HeadSummary {
    layer: usize,
    head: usize,
    file: String,
    /// Most attended key for every query.
    argmax_key: Vec<usize>,
    max_row_sum: f64,
}

#[derive(Serialize)]
struct Resolved<'a> {
    spec: Option<&'a ExperimentSpec>,
    checkpoint: Option<&'a Path>,
    instance: Option<&'a str>,
    saturating: Option<usize>,
    tokens: &'a [usize],
}

/// Query-major weights plus the leftover stick (for stick-breaking heads).
struct HeadMap {
    rows: Vec<Vec<f64>>,
    mass: Option<Vec<f64>>,
}

impl HeadMap {
    fn from_key_major(a: &Matrix, mass: Option<&[f64]>) -> Self {
        Self {
            rows: (0..a.cols())
                .map(|j| (0..a.rows()).map(|i| a[(i, j)]).collect())
                .collect(),
            mass: mass.map(<[f64]>::to_vec),
        }
    }

    fn csv(&self) -> String {
        let n = self.rows.len();
        let mut header: Vec<String> = std::iter::once("query".to_string())
            .chain((0..n).map(|i| format!("k{i}")))
            .collect();
        if self.mass.is_some() {
            header.push("remaining_mass".into());
        }
        let mut out = header.join(",");
        out.push('\n');
        for (j, row) in self.rows.iter().enumerate() {
            out.push_str(&j.to_string());
            for x in row {
                out.push_str(&format!(",{x}"));
            }
            if let Some(m) = &self.mass {
                out.push_str(&format!(",{}", m[j]));
            }
            out.push('\n');
        }
        out
    }

    fn argmax(&self) -> Vec<usize> {
        self.rows
            .iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold(
                        (0, f64::NEG_INFINITY),
                        |b, (i, &x)| if x > b.1 { (i, x) } else { b },
                    )
                    .0
            })
            .collect()
    }

    fn max_row_sum(&self) -> f64 {
        self.rows
            .iter()
            .map(|r| r.iter().sum::<f64>())
            .fold(0.0, f64::max)
    }
}

fn emit(
    ctx: &mut RunContext,
    layer: usize,
    head: usize,
    map: &HeadMap,
    labels: &[String],
) -> Result<HeadSummary> {
    let file = format!("attn_l{layer}_h{head}.csv");
    ctx.write(&file, map.csv())?;
    let title = format!("layer {layer} head {head}");
    ctx.write(
        &format!("attn_l{layer}_h{head}.svg"),
        heatmap(&title, &map.rows, labels, labels),
    )?;
    Ok(HeadSummary {
        layer,
        head,
        file,
        argmax_key: map.argmax(),
        max_row_sum: map.max_row_sum(),
    })
}

fn resolve_instance(text: &str, vocab: &Vocab) -> Result<TaskInstance> {
    let path = Path::new(text);
    if path.is_file() {
        let file =
            std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
        let all = read_jsonl(BufReader::new(file))?;
        return all
            .into_iter()
            .next()
            .ok_or_else(|| ConfigError(format!("{} holds no instances", path.display())).into());
    }
    let (init, steps) = text.split_once('|').unwrap_or((text, ""));
    let bad = |e: stickbreaking::Error| ConfigError(e.to_string());
    let init = vocab.parse_pairs(init).map_err(bad)?;
    let steps = vocab.parse_pairs(steps).map_err(bad)?;
    mqrar_from_pairs(vocab, &init, &steps).map_err(|e| ConfigError(e.to_string()).into())
}

pub fn dump_attn(
    ctx: &mut RunContext,
    config: Option<&Path>,
    checkpoint: Option<&Path>,
    instance: Option<&str>,
    saturating: Option<usize>,
) -> Result<Outcome> {
    ctx.require_f64()?;
    let seed = ctx.seed.unwrap_or(0);
    let mut summaries = Vec::new();

    if let Some(len) = saturating {
        if len == 0 {
            anyhow::bail!(ConfigError("--saturating needs a positive length".into()));
        }
        let (q, k, v) = saturating_inputs(len, 8, 40.0, seed);
        let (_, cache) = sb_forward(&q, &k, &v)?;
        let map = HeadMap::from_key_major(&cache.weights.a, Some(&cache.remaining_mass()));
        let labels: Vec<String> = (0..len).map(|i| i.to_string()).collect();
        summaries.push(emit(ctx, 0, 0, &map, &labels)?);
        let tokens: Vec<usize> = (0..len).collect();
        ctx.write("summary.json", serde_json::to_string_pretty(&summaries)?)?;
        ctx.write_manifest(&Resolved {
            spec: None,
            checkpoint: None,
            instance: None,
            saturating,
            tokens: &tokens,
        })?;
        report(&summaries);
        return Ok(Outcome::Pass);
    }

    let spec: Option<ExperimentSpec> = config.map(load).transpose()?;
    let model = match (checkpoint, &spec) {
        (Some(path), _) => {
            Model::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?
        }
        (None, Some(s)) => Model::init(s.model, seed)?,
        (None, None) => anyhow::bail!(ConfigError(
            "dump-attn needs --checkpoint, --config or --saturating".into()
        )),
    };
    let (vocab, task) = match spec.as_ref().map(|s| &s.task) {
        Some(TaskSpec::Recall { vocab, task, .. }) => (*vocab, Some(*task)),
        _ => (Vocab::standard(), None),
    };
    let inst = match (instance, task) {
        (Some(text), _) => resolve_instance(text, &vocab)?,
        (None, Some(t)) => t
            .generate(&vocab, seed)
            .map_err(|e| ConfigError(e.to_string()))?,
        (None, None) => anyhow::bail!(ConfigError(
            "dump-attn needs --instance for this configuration".into()
        )),
    };
    if let Some(&bad) = inst.tokens.iter().find(|&&t| t >= model.cfg.vocab) {
        anyhow::bail!(ConfigError(format!(
            "token {bad} outside the model vocabulary of {}",
            model.cfg.vocab
        )));
    }
    let labels: Vec<String> = inst
        .tokens
        .iter()
        .enumerate()
        .map(|(i, &t)| format!("{i}:{}", vocab.render_token(t)))
        .collect();
    let (_, cache) = transformer_forward(&inst.tokens, &model.params, &model.cfg)?;
    for layer in 0..model.cfg.n_layer {
        let attn = cache.attention(layer, 0);
        for head in 0..model.cfg.attn.n_head {
            let a = attn.attention_weights(head)?;
            let map = HeadMap::from_key_major(&a, attn.remaining_mass(head));
            summaries.push(emit(ctx, layer, head, &map, &labels)?);
        }
    }
    ctx.write("summary.json", serde_json::to_string_pretty(&summaries)?)?;
    ctx.write_manifest(&Resolved {
        spec: spec.as_ref(),
        checkpoint,
        instance,
        saturating: None,
        tokens: &inst.tokens,
    })?;
    report(&summaries);
    Ok(Outcome::Pass)
}

fn report(summaries: &[HeadSummary]) {
    for s in summaries {
        println!(
            "layer {} head {}: max row sum {:.6}",
            s.layer, s.head, s.max_row_sum
        );
    }
}
