use super::attention::{mha_backward, mha_forward, MhaCache, MhaParams};
use super::config::ModelConfig;
use super::layers::{
    column_sums, gelu, gelu_grad, layer_norm, layer_norm_backward, linear, NormCache, NORM_EPS,
};
use super::params::{layer_path, ModelParams, ParamGrads};
use crate::error::{Error, Result};
use crate::numerics::{matmul, matmul_nt, matmul_tn, Matrix};

#[derive(Debug, Clone)]
struct LayerCache {
    norm1: NormCache,
    attn: Vec<MhaCache>,
    norm2: NormCache,
    mlp_in: Matrix,
    pre_act: Matrix,
    act: Matrix,
}

/// Activations kept by [`transformer_forward_batch`] for the backward pass.
/// Sequences of a batch are stacked row-wise.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    cfg: ModelConfig,
    tokens: Vec<usize>,
    /// Row ranges of the individual sequences.
    spans: Vec<(usize, usize)>,
    layers: Vec<LayerCache>,
    final_norm: NormCache,
    final_out: Matrix,
}

impl ForwardCache {
    pub fn n_rows(&self) -> usize {
        self.tokens.len()
    }

    pub fn spans(&self) -> &[(usize, usize)] {
        &self.spans
    }

    /// Attention cache of sequence `seq` in layer `layer`.
    pub fn attention(&self, layer: usize, seq: usize) -> &MhaCache {
        &self.layers[layer].attn[seq]
    }
}

fn row_vec<'a>(params: &'a ModelParams, path: &str) -> Result<&'a [f64]> {
    Ok(params.get(path)?.row(0))
}

pub fn transformer_forward(
    tokens: &[usize],
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<(Matrix, ForwardCache)> {
    transformer_forward_batch(&[tokens], params, cfg)
}

/// Pre-norm decoder: embedding, `n_layer` × (attention residual, MLP
/// residual), final norm, vocabulary projection. Returns logits with one row
/// per input token, sequences stacked in batch order.
pub fn transformer_forward_batch(
    batch: &[&[usize]],
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<(Matrix, ForwardCache)> {
    if batch.iter().any(|s| s.is_empty()) {
        return Err(Error::domain(
            "transformer_forward",
            "empty sequence in batch",
        ));
    }
    let tokens: Vec<usize> = batch.iter().flat_map(|s| s.iter().copied()).collect();
    if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab) {
        return Err(Error::domain(
            "transformer_forward",
            format!("token id {bad} outside vocabulary of {}", cfg.vocab),
        ));
    }
    let mut spans = Vec::with_capacity(batch.len());
    let mut start = 0;
    for s in batch {
        spans.push((start, start + s.len()));
        start += s.len();
    }
    let d = cfg.d_model;
    let embed = params.get("embed")?;
    let mut x = Matrix::from_fn(tokens.len(), d, |r, c| embed[(tokens[r], c)]);
    let mut layers = Vec::with_capacity(cfg.n_layer);
    for l in 0..cfg.n_layer {
        let (h1, norm1) = layer_norm(
            &x,
            row_vec(params, &layer_path(l, "norm1.gain"))?,
            row_vec(params, &layer_path(l, "norm1.bias"))?,
            NORM_EPS,
        )?;
        let mp = MhaParams::from_model(params, l, &cfg.attn)?;
        let mut attn = Vec::with_capacity(spans.len());
        for &(s, e) in &spans {
            let (y, c) = mha_forward(&h1.row_block(s, e), &mp, &cfg.attn)?;
            add_rows(&mut x, s, &y);
            attn.push(c);
        }
        let (h2, norm2) = layer_norm(
            &x,
            row_vec(params, &layer_path(l, "norm2.gain"))?,
            row_vec(params, &layer_path(l, "norm2.bias"))?,
            NORM_EPS,
        )?;
        let pre_act = linear(
            &h2,
            params.get(&layer_path(l, "mlp.w_in"))?,
            Some(params.get(&layer_path(l, "mlp.b_in"))?),
        )?;
        let act = pre_act.map(gelu);
        let out = linear(
            &act,
            params.get(&layer_path(l, "mlp.w_out"))?,
            Some(params.get(&layer_path(l, "mlp.b_out"))?),
        )?;
        x.add_assign(&out);
        layers.push(LayerCache {
            norm1,
            attn,
            norm2,
            mlp_in: h2,
            pre_act,
            act,
        });
    }
    let (final_out, final_norm) = layer_norm(
        &x,
        row_vec(params, "final_norm.gain")?,
        row_vec(params, "final_norm.bias")?,
        NORM_EPS,
    )?;
    let logits = matmul(&final_out, params.get("unembed")?)?;
    let cache = ForwardCache {
        cfg: *cfg,
        tokens,
        spans,
        layers,
        final_norm,
        final_out,
    };
    Ok((logits, cache))
}

fn add_rows(dst: &mut Matrix, start: usize, src: &Matrix) {
    for r in 0..src.rows() {
        for (o, &v) in dst.row_mut(start + r).iter_mut().zip(src.row(r)) {
            *o += v;
        }
    }
}

fn accumulate(grads: &mut ParamGrads, path: &str, g: &Matrix) -> Result<()> {
    grads.get_mut(path)?.add_assign(g);
    Ok(())
}

fn row_matrix(v: Vec<f64>) -> Matrix {
    let n = v.len();
    Matrix::from_vec(1, n, v).expect("length matches")
}

/// Exact reverse of [`transformer_forward_batch`].
pub fn transformer_backward(
    cache: &ForwardCache,
    params: &ModelParams,
    cfg: &ModelConfig,
    d_logits: &Matrix,
) -> Result<ParamGrads> {
    if cache.cfg != *cfg || cache.layers.len() != cfg.n_layer {
        return Err(Error::Config(
            "forward cache was produced under a different model configuration".into(),
        ));
    }
    if d_logits.shape() != (cache.n_rows(), cfg.vocab) {
        return Err(Error::shape(
            "transformer_backward",
            format!(
                "d_logits {:?}, expected ({}, {})",
                d_logits.shape(),
                cache.n_rows(),
                cfg.vocab
            ),
        ));
    }
    let mut grads = params.zeros_like();
    let unembed = params.get("unembed")?;
    accumulate(
        &mut grads,
        "unembed",
        &matmul_tn(&cache.final_out, d_logits)?,
    )?;
    let d_final = matmul_nt(d_logits, unembed)?;
    let (mut dx, dg, db) = layer_norm_backward(
        &cache.final_norm,
        row_vec(params, "final_norm.gain")?,
        &d_final,
    );
    accumulate(&mut grads, "final_norm.gain", &row_matrix(dg))?;
    accumulate(&mut grads, "final_norm.bias", &row_matrix(db))?;

    for l in (0..cfg.n_layer).rev() {
        let lc = &cache.layers[l];
        let w_out = params.get(&layer_path(l, "mlp.w_out"))?;
        let w_in = params.get(&layer_path(l, "mlp.w_in"))?;
        accumulate(
            &mut grads,
            &layer_path(l, "mlp.w_out"),
            &matmul_tn(&lc.act, &dx)?,
        )?;
        accumulate(&mut grads, &layer_path(l, "mlp.b_out"), &column_sums(&dx))?;
        let mut d_pre = matmul_nt(&dx, w_out)?;
        for (g, &u) in d_pre.data_mut().iter_mut().zip(lc.pre_act.data()) {
            *g *= gelu_grad(u);
        }
        accumulate(
            &mut grads,
            &layer_path(l, "mlp.w_in"),
            &matmul_tn(&lc.mlp_in, &d_pre)?,
        )?;
        accumulate(&mut grads, &layer_path(l, "mlp.b_in"), &column_sums(&d_pre))?;
        let d_h2 = matmul_nt(&d_pre, w_in)?;
        let (d_norm2, dg, db) = layer_norm_backward(
            &lc.norm2,
            row_vec(params, &layer_path(l, "norm2.gain"))?,
            &d_h2,
        );
        accumulate(&mut grads, &layer_path(l, "norm2.gain"), &row_matrix(dg))?;
        accumulate(&mut grads, &layer_path(l, "norm2.bias"), &row_matrix(db))?;
        dx.add_assign(&d_norm2);

        let mp = MhaParams::from_model(params, l, &cfg.attn)?;
        let mut d_h1 = Matrix::zeros(dx.rows(), dx.cols());
        for (seq, &(s, e)) in cache.spans.iter().enumerate() {
            let (d_in, g) = mha_backward(&lc.attn[seq], &mp, &cfg.attn, &dx.row_block(s, e))?;
            add_rows(&mut d_h1, s, &d_in);
            accumulate(&mut grads, &layer_path(l, "attn.wq"), &g.wq)?;
            accumulate(&mut grads, &layer_path(l, "attn.wk"), &g.wk)?;
            accumulate(&mut grads, &layer_path(l, "attn.wv"), &g.wv)?;
            accumulate(&mut grads, &layer_path(l, "attn.wo"), &g.wo)?;
            if let Some(r) = &g.remainder {
                accumulate(&mut grads, &layer_path(l, "attn.remainder"), r)?;
            }
            if let Some((gg, gb)) = &g.gn {
                accumulate(&mut grads, &layer_path(l, "attn.gn.gain"), gg)?;
                accumulate(&mut grads, &layer_path(l, "attn.gn.bias"), gb)?;
            }
        }
        let (d_norm1, dg, db) = layer_norm_backward(
            &lc.norm1,
            row_vec(params, &layer_path(l, "norm1.gain"))?,
            &d_h1,
        );
        accumulate(&mut grads, &layer_path(l, "norm1.gain"), &row_matrix(dg))?;
        accumulate(&mut grads, &layer_path(l, "norm1.bias"), &row_matrix(db))?;
        dx.add_assign(&d_norm1);
    }

    let d_embed = grads.get_mut("embed")?;
    for (r, &t) in cache.tokens.iter().enumerate() {
        for (o, &g) in d_embed.row_mut(t).iter_mut().zip(dx.row(r)) {
            *o += g;
        }
    }
    Ok(grads)
}
