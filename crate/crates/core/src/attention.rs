//! Multi-head self-attention with thresholded attention dropout.
//!
//! Per head `h`, the attention matrix is
//! `A_h = softmax(Q_h K_hᵀ / √D_attn)`. When the head's gate fires, every
//! weight strictly greater than `λ_attn` times the global maximum of `A_h`
//! is erased and each row is rescaled to sum to one again. Rows that would
//! lose all their mass are kept as they were.

use serde::{Deserialize, Serialize};

use crate::dropout::{attention_erasure, keep_mask, DropDecision, ForwardCtx, Mode};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{uniform_init, Bound, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub d_attn: usize,
    pub heads: usize,
    pub p_attn: f64,
    pub lambda_attn: f64,
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_attn == 0 || self.heads == 0 || self.d_attn % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_attn {} must be a positive multiple of heads {}",
                self.d_attn, self.heads
            )));
        }
        for (name, v) in [("p_attn", self.p_attn), ("lambda_attn", self.lambda_attn)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_attn / self.heads
    }
}

/// Parameter handles of one self-attention block.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

impl AttentionParams {
    pub fn init(store: &mut ParamStore<f32>, prefix: &str, d: usize, rng: &mut Rng) -> Self {
        let mut w = |name: &str| store.add(format!("{prefix}.{name}"), uniform_init(rng, d, d, 1.0));
        let (wq, wk, wv, wo) = (w("wq"), w("wk"), w("wv"), w("wo"));
        let bo = store.add(format!("{prefix}.bo"), Tensor::zeros(&[d]));
        Self { wq, wk, wv, wo, bo }
    }
}

/// Per-head query, key and value matrices.
pub struct HeadProjections {
    pub q: Vec<Var>,
    pub k: Vec<Var>,
    pub v: Vec<Var>,
}

/// Bias-free linear projections followed by a split into `heads` column
/// blocks of width `d_attn / heads`.
pub fn project_qkv<F: Real>(
    g: &mut Graph<F>,
    x: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    cfg: &AttentionConfig,
) -> Result<HeadProjections> {
    let width = g.value(x).cols();
    if g.value(x).shape().len() != 2 || width != cfg.d_attn {
        return Err(Error::dim("project_qkv", g.value(x).shape(), &[cfg.d_attn]));
    }
    let dh = cfg.head_dim();
    let split = |g: &mut Graph<F>, w: Var| -> Result<Vec<Var>> {
        let full = g.matmul(x, w)?;
        (0..cfg.heads).map(|h| g.slice_cols(full, h * dh, dh)).collect()
    };
    Ok(HeadProjections {
        q: split(g, wq)?,
        k: split(g, wk)?,
        v: split(g, wv)?,
    })
}

/// `softmax(Q Kᵀ / √D_attn)`; the divisor uses the full model width.
pub fn attention_weights<F: Real>(g: &mut Graph<F>, q: Var, k: Var, d_attn: usize) -> Result<Var> {
    if g.value(q).shape() != g.value(k).shape() {
        return Err(Error::dim("attention_weights", g.value(q).shape(), g.value(k).shape()));
    }
    let scores = g.matmul_nt(q, k)?;
    let scaled = g.scale(scores, F::c(1.0 / (d_attn as f64).sqrt()))?;
    g.softmax_rows(scaled)
}

/// Attention dropout on a standalone attention matrix.
///
/// Identity in eval mode and whenever the gate draw `r ∈ [0,1)` is not
/// below `p_attn`. Otherwise erases entries above `λ_attn · max(A)` and
/// renormalizes rows.
pub fn attention_dropout<F: Real>(
    a: &Tensor<F>,
    cfg: &AttentionConfig,
    mode: Mode,
    rng: &mut Rng,
) -> Result<Tensor<F>> {
    if let Some(v) = a.data().iter().find(|v| !(v.f64() >= 0.0)) {
        return Err(Error::Contract(format!("negative attention weight {v:?}")));
    }
    if mode == Mode::Eval {
        return Ok(a.clone());
    }
    if rng.uniform() >= cfg.p_attn {
        return Ok(a.clone());
    }
    let (erased, passthrough) = attention_erasure(a, cfg.lambda_attn)?;
    Ok(apply_renorm(a, &erased, &passthrough))
}

/// Erase, then divide each row by its surviving sum (passthrough rows pass).
pub fn apply_renorm<F: Real>(a: &Tensor<F>, erased: &[bool], passthrough: &[bool]) -> Tensor<F> {
    let c = a.cols().max(1);
    let mut out = a.clone();
    out.set_requires_grad(false);
    for (r, row) in out.data_mut().chunks_mut(c).enumerate() {
        if passthrough[r] {
            continue;
        }
        let er = &erased[r * c..(r + 1) * c];
        row.iter_mut().zip(er).for_each(|(v, &e)| {
            if e {
                *v = F::zero();
            }
        });
        let s: F = row.iter().copied().sum();
        row.iter_mut().for_each(|v| *v = *v / s);
    }
    out
}

/// Multi-head self-attention with attention dropout placed between the
/// softmax and the product with `V_h`.
pub fn mhsa_forward<F: Real>(
    g: &mut Graph<F>,
    x: Var,
    params: &AttentionParams,
    bound: &Bound,
    cfg: &AttentionConfig,
    ctx: &mut ForwardCtx<'_>,
    layer: usize,
) -> Result<Var> {
    let proj = project_qkv(g, x, bound[params.wq], bound[params.wk], bound[params.wv], cfg)?;
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let a = attention_weights(g, proj.q[h], proj.k[h], cfg.d_attn)?;
        let decision = ctx.attention_decision(g.value(a), cfg.lambda_attn)?;
        let a_used = match decision {
            DropDecision::Attention { erased, passthrough } => {
                g.row_renorm(a, keep_mask(&erased), passthrough)?
            }
            DropDecision::Skipped => a,
            DropDecision::Layer { .. } => {
                return Err(Error::Usage("mask tape out of order: expected attention".into()))
            }
        };
        if let Some(cap) = ctx.capture.as_mut() {
            if cap.layer == layer && cap.head == h {
                cap.attention_before = Some(g.value(a).cast());
                cap.attention_after = Some(g.value(a_used).cast());
            }
        }
        heads.push(g.matmul(a_used, proj.v[h])?);
    }
    let merged = g.concat_cols(&heads)?;
    let out = g.matmul(merged, bound[params.wo])?;
    g.add_bias(out, bound[params.bo])
}
