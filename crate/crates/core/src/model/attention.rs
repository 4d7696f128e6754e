use super::config::{AttentionConfig, AttentionVariant, AttnPath};
use super::layers::{layer_norm, layer_norm_backward, NormCache};
use super::params::{layer_path, ModelParams};
use crate::blocked::{
    blocked_backward_fused_with_mass, blocked_forward, plan_blocks, BlockedCache, ForwardOptions,
};
use crate::error::{Error, Result};
use crate::numerics::{matmul, matmul_nt, matmul_tn, Matrix};
use crate::parallel::Exec;
use crate::reference::{
    sb_backward_with_mass, sb_forward, softmax_attention, softmax_backward, HeadIndex, SbCache,
    SoftmaxCache,
};

/// Borrowed weights of one attention sublayer.
#[derive(Debug, Clone, Copy)]
pub struct MhaParams<'a> {
    pub wq: &'a Matrix,
    pub wk: &'a Matrix,
    pub wv: &'a Matrix,
    pub wo: &'a Matrix,
    /// `n_head × d_head`, remainder-bias variant only.
    pub remainder: Option<&'a Matrix>,
    /// `n_head × d_head` gains and biases of the head-wise norm.
    pub gn: Option<(&'a Matrix, &'a Matrix)>,
}

impl<'a> MhaParams<'a> {
    pub fn from_model(
        params: &'a ModelParams,
        layer: usize,
        cfg: &AttentionConfig,
    ) -> Result<Self> {
        let get = |name: &str| params.get(&layer_path(layer, name));
        let remainder = match cfg.variant {
            AttentionVariant::SbRemainderBias => Some(get("attn.remainder")?),
            _ => None,
        };
        let gn = if cfg.group_norm {
            Some((get("attn.gn.gain")?, get("attn.gn.bias")?))
        } else {
            None
        };
        Ok(Self {
            wq: get("attn.wq")?,
            wk: get("attn.wk")?,
            wv: get("attn.wv")?,
            wo: get("attn.wo")?,
            remainder,
            gn,
        })
    }
}

#[derive(Debug, Clone)]
pub struct MhaGrads {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub remainder: Option<Matrix>,
    pub gn: Option<(Matrix, Matrix)>,
}

#[derive(Debug, Clone)]
enum HeadState {
    Reference(SbCache),
    Blocked(BlockedCache),
    Softmax(SoftmaxCache),
}

#[derive(Debug, Clone)]
pub struct MhaCache {
    x: Matrix,
    v: Matrix,
    heads: Vec<HeadState>,
    /// Remaining stick mass per head (stick-breaking variants).
    mass: Vec<Vec<f64>>,
    /// Per-head output after remainder handling, before the head norm.
    head_out: Vec<Matrix>,
    norms: Vec<NormCache>,
    /// Input of the output projection.
    concat: Matrix,
}

impl MhaCache {
    pub fn head_output(&self, head: usize) -> &Matrix {
        &self.head_out[head]
    }

    pub fn remaining_mass(&self, head: usize) -> Option<&[f64]> {
        self.mass.get(head).map(Vec::as_slice)
    }

    /// Key-major attention weights of one head.
    pub fn attention_weights(&self, head: usize) -> Result<Matrix> {
        match &self.heads[head] {
            HeadState::Reference(c) => Ok(c.weights.a.clone()),
            HeadState::Softmax(c) => Ok(c.weights.clone()),
            HeadState::Blocked(c) => {
                let (_, full) = sb_forward(&c.q, &c.k, &c.v)?;
                Ok(full.weights.a)
            }
        }
    }
}

fn head_cols(m: &Matrix, cfg: &AttentionConfig, h: usize) -> Matrix {
    m.col_block(h * cfg.d_head, (h + 1) * cfg.d_head)
}

/// Multi-head attention over one sequence `x` (`L × d_model`).
pub fn mha_forward(x: &Matrix, p: &MhaParams, cfg: &AttentionConfig) -> Result<(Matrix, MhaCache)> {
    if x.cols() != p.wq.rows() {
        return Err(Error::shape(
            "mha_forward",
            format!("input width {} vs wq {:?}", x.cols(), p.wq.shape()),
        ));
    }
    let n = x.rows();
    let q = matmul(x, p.wq)?;
    let k = matmul(x, p.wk)?;
    let v = matmul(x, p.wv)?;
    let mut heads = Vec::with_capacity(cfg.n_head);
    let mut mass = Vec::new();
    let mut head_out = Vec::with_capacity(cfg.n_head);
    let mut norms = Vec::new();
    let mut concat = Matrix::zeros(n, cfg.width());
    for h in 0..cfg.n_head {
        let (qh, kh, vh) = (
            head_cols(&q, cfg, h),
            head_cols(&k, cfg, h),
            head_cols(&v, cfg, h),
        );
        let (mut o, state) = match (cfg.variant, cfg.path) {
            (AttentionVariant::Softmax, _) => {
                let head = HeadIndex {
                    index: h,
                    count: cfg.n_head,
                };
                let (o, c) = softmax_attention(&qh, &kh, &vh, &cfg.scheme, head)?;
                (o, HeadState::Softmax(c))
            }
            (_, AttnPath::Reference) => {
                let (o, c) = sb_forward(&qh, &kh, &vh)?;
                mass.push(c.remaining_mass());
                (o, HeadState::Reference(c))
            }
            (_, AttnPath::Blocked { block }) => {
                let layout = plan_blocks(n, block)?;
                let opts = ForwardOptions::default().with_exec(Exec::Sequential);
                let out = blocked_forward(&qh, &kh, &vh, &layout, &opts)?;
                mass.push(out.cache.acc.remaining_mass());
                (out.o, HeadState::Blocked(out.cache))
            }
        };
        match cfg.variant {
            AttentionVariant::SbRemainder => {
                for (j, &m) in mass[h].iter().enumerate() {
                    for (x, &vj) in o.row_mut(j).iter_mut().zip(vh.row(j)) {
                        *x += m * vj;
                    }
                }
            }
            AttentionVariant::SbRemainderBias => {
                let r = p.remainder.ok_or_else(|| {
                    Error::Config("remainder-bias variant needs remainder vectors".into())
                })?;
                for (j, &m) in mass[h].iter().enumerate() {
                    for (x, &rv) in o.row_mut(j).iter_mut().zip(r.row(h)) {
                        *x += m * rv;
                    }
                }
            }
            _ => {}
        }
        let normed = match p.gn {
            Some((gain, bias)) => {
                let (y, c) = layer_norm(&o, gain.row(h), bias.row(h), cfg.gn_eps)?;
                norms.push(c);
                y
            }
            None => o.clone(),
        };
        concat.set_col_block(h * cfg.d_head, &normed);
        heads.push(state);
        head_out.push(o);
    }
    let y = matmul(&concat, p.wo)?;
    let cache = MhaCache {
        x: x.clone(),
        v,
        heads,
        mass,
        head_out,
        norms,
        concat,
    };
    Ok((y, cache))
}

/// Returns the input gradient and the sublayer's weight gradients.
pub fn mha_backward(
    cache: &MhaCache,
    p: &MhaParams,
    cfg: &AttentionConfig,
    dy: &Matrix,
) -> Result<(Matrix, MhaGrads)> {
    let n = cache.x.rows();
    if dy.shape() != (n, p.wo.cols()) {
        return Err(Error::shape(
            "mha_backward",
            format!("dy {:?}, expected ({n}, {})", dy.shape(), p.wo.cols()),
        ));
    }
    let d_wo = matmul_tn(&cache.concat, dy)?;
    let d_concat = matmul_nt(dy, p.wo)?;
    let w = cfg.width();
    let mut d_q = Matrix::zeros(n, w);
    let mut d_k = Matrix::zeros(n, w);
    let mut d_v = Matrix::zeros(n, w);
    let mut d_rem = p.remainder.map(|r| Matrix::zeros(r.rows(), r.cols()));
    let mut d_gn = p.gn.map(|(g, _)| {
        (
            Matrix::zeros(g.rows(), g.cols()),
            Matrix::zeros(g.rows(), g.cols()),
        )
    });
    for h in 0..cfg.n_head {
        let mut d_o = head_cols(&d_concat, cfg, h);
        if let (Some((gain, _)), Some((dg, db))) = (p.gn, d_gn.as_mut()) {
            let (dx, g, b) = layer_norm_backward(&cache.norms[h], gain.row(h), &d_o);
            dg.row_mut(h).copy_from_slice(&g);
            db.row_mut(h).copy_from_slice(&b);
            d_o = dx;
        }
        let mut d_mass = None;
        let mut d_v_direct = None;
        match cfg.variant {
            AttentionVariant::SbRemainder => {
                let vh = head_cols(&cache.v, cfg, h);
                let m = &cache.mass[h];
                d_mass = Some(
                    (0..n)
                        .map(|j| dot(d_o.row(j), vh.row(j)))
                        .collect::<Vec<_>>(),
                );
                d_v_direct = Some(Matrix::from_fn(n, cfg.d_head, |j, c| m[j] * d_o[(j, c)]));
            }
            AttentionVariant::SbRemainderBias => {
                let r = p.remainder.expect("checked in forward");
                let m = &cache.mass[h];
                d_mass = Some(
                    (0..n)
                        .map(|j| dot(d_o.row(j), r.row(h)))
                        .collect::<Vec<_>>(),
                );
                let dr = d_rem.as_mut().expect("allocated with remainder");
                for (j, &mj) in m.iter().enumerate() {
                    for (o, &g) in dr.row_mut(h).iter_mut().zip(d_o.row(j)) {
                        *o += mj * g;
                    }
                }
            }
            _ => {}
        }
        let (dq, dk, mut dv) = match &cache.heads[h] {
            HeadState::Softmax(c) => {
                let g = softmax_backward(c, &d_o)?;
                (g.d_q, g.d_k, g.d_v)
            }
            HeadState::Reference(c) => {
                let g = sb_backward_with_mass(c, &d_o, d_mass.as_deref())?;
                (g.d_q, g.d_k, g.d_v)
            }
            HeadState::Blocked(c) => {
                let g =
                    blocked_backward_fused_with_mass(c, &d_o, d_mass.as_deref(), Exec::Sequential)?;
                (g.d_q, g.d_k, g.d_v)
            }
        };
        if let Some(direct) = d_v_direct {
            dv.add_assign(&direct);
        }
        d_q.set_col_block(h * cfg.d_head, &dq);
        d_k.set_col_block(h * cfg.d_head, &dk);
        d_v.set_col_block(h * cfg.d_head, &dv);
    }
    let x = &cache.x;
    let grads = MhaGrads {
        wq: matmul_tn(x, &d_q)?,
        wk: matmul_tn(x, &d_k)?,
        wv: matmul_tn(x, &d_v)?,
        wo: d_wo,
        remainder: d_rem,
        gn: d_gn,
    };
    let mut dx = matmul_nt(&d_q, p.wq)?;
    dx.add_assign(&matmul_nt(&d_k, p.wk)?);
    dx.add_assign(&matmul_nt(&d_v, p.wv)?);
    Ok((dx, grads))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
