//! Transformer encoder with layer dropout on the feed-forward sublayer.
//!
//! Each layer is pre-norm:
//!
//! ```text
//! x₁ = x + MHSA(LN₁(x))                      (attention dropout inside)
//! y  = x₁ + LayerDrop(FF(LN₂(x₁)))
//! ```
//!
//! Layer dropout computes `max|F|` over the whole `T×D` feed-forward output,
//! zeroes every entry with `|f| > λ_layer · max|F|` and leaves survivors
//! untouched (no rescaling). The residual path is never masked.

use serde::{Deserialize, Serialize};

use crate::attention::{mhsa_forward, AttentionConfig, AttentionParams};
use crate::dropout::{keep_mask, layer_erasure, DropDecision, ForwardCtx, Mode};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{uniform_init, Bound, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

/// Gain applied to the reconstruction head at initialization so that the
/// untrained model predicts values close to zero.
pub const HEAD_INIT_GAIN: f64 = 0.1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Gelu,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormPlacement {
    #[default]
    Pre,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_mel: usize,
    pub layers: usize,
    pub d_attn: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub p_attn: f64,
    pub lambda_attn: f64,
    pub p_layer: f64,
    pub lambda_layer: f64,
    pub activation: Activation,
    pub norm_placement: NormPlacement,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_mel: 80,
            layers: 3,
            d_attn: 768,
            heads: 12,
            d_ff: 3072,
            p_attn: 0.1,
            lambda_attn: 0.8,
            p_layer: 0.1,
            lambda_layer: 0.6,
            activation: Activation::Gelu,
            norm_placement: NormPlacement::Pre,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d_mel", self.d_mel),
            ("layers", self.layers),
            ("d_ff", self.d_ff),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        self.attention().validate()?;
        for (name, v) in [("p_layer", self.p_layer), ("lambda_layer", self.lambda_layer)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            d_attn: self.d_attn,
            heads: self.heads,
            p_attn: self.p_attn,
            lambda_attn: self.lambda_attn,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderLayerParams {
    pub norm1_gain: ParamId,
    pub norm1_bias: ParamId,
    pub attn: AttentionParams,
    pub norm2_gain: ParamId,
    pub norm2_bias: ParamId,
    pub ff_w1: ParamId,
    pub ff_b1: ParamId,
    pub ff_w2: ParamId,
    pub ff_b2: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug)]
struct Layout {
    input_w: ParamId,
    input_b: ParamId,
    layers: Vec<EncoderLayerParams>,
    head: HeadParams,
}

/// Encoder stack plus input projection and reconstruction head.
#[derive(Clone, Debug)]
pub struct Encoder<F: Real = f32> {
    config: ModelConfig,
    params: ParamStore<F>,
    layout: Layout,
}

impl Encoder<f32> {
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (d, ff) = (config.d_attn, config.d_ff);
        let mut s = ParamStore::new();
        let input_w = s.add("input.weight", uniform_init(rng, config.d_mel, d, 1.0));
        let input_b = s.add("input.bias", Tensor::zeros(&[d]));
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = format!("layers.{l}");
            let norm1_gain = s.add(format!("{p}.norm1.gain"), Tensor::full(&[d], 1.0));
            let norm1_bias = s.add(format!("{p}.norm1.bias"), Tensor::zeros(&[d]));
            let attn = AttentionParams::init(&mut s, &format!("{p}.attn"), d, rng);
            let norm2_gain = s.add(format!("{p}.norm2.gain"), Tensor::full(&[d], 1.0));
            let norm2_bias = s.add(format!("{p}.norm2.bias"), Tensor::zeros(&[d]));
            let ff_w1 = s.add(format!("{p}.ff.w1"), uniform_init(rng, d, ff, 1.0));
            let ff_b1 = s.add(format!("{p}.ff.b1"), Tensor::zeros(&[ff]));
            let ff_w2 = s.add(format!("{p}.ff.w2"), uniform_init(rng, ff, d, 1.0));
            let ff_b2 = s.add(format!("{p}.ff.b2"), Tensor::zeros(&[d]));
            layers.push(EncoderLayerParams {
                norm1_gain,
                norm1_bias,
                attn,
                norm2_gain,
                norm2_bias,
                ff_w1,
                ff_b1,
                ff_w2,
                ff_b2,
            });
        }
        let head = HeadParams {
            weight: s.add("head.weight", uniform_init(rng, d, config.d_mel, HEAD_INIT_GAIN)),
            bias: s.add("head.bias", Tensor::zeros(&[config.d_mel])),
        };
        Ok(Self {
            config,
            params: s,
            layout: Layout {
                input_w,
                input_b,
                layers,
                head,
            },
        })
    }
}

impl<F: Real> Encoder<F> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Dropout settings may change between runs; shapes may not.
    pub fn set_dropout(&mut self, p_attn: f64, lambda_attn: f64, p_layer: f64, lambda_layer: f64) {
        self.config.p_attn = p_attn;
        self.config.lambda_attn = lambda_attn;
        self.config.p_layer = p_layer;
        self.config.lambda_layer = lambda_layer;
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    pub fn layer_params(&self, l: usize) -> &EncoderLayerParams {
        &self.layout.layers[l]
    }

    pub fn head_params(&self) -> &HeadParams {
        &self.layout.head
    }

    pub fn cast<G: Real>(&self) -> Encoder<G> {
        Encoder {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    /// Input projection plus positional encoding, then every layer.
    /// Returns the output of each layer; the last one is the representation.
    pub fn forward(
        &self,
        g: &mut Graph<F>,
        bound: &Bound,
        x: Var,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<Vec<Var>> {
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.config.d_mel {
            return Err(Error::dim("encoder_forward", &shape, &[self.config.d_mel]));
        }
        let t = shape[0];
        let h = g.matmul(x, bound[self.layout.input_w])?;
        let h = g.add_bias(h, bound[self.layout.input_b])?;
        let pe = g.constant(positional_encoding(t, self.config.d_attn));
        let mut h = g.add(h, pe)?;
        let mut outputs = Vec::with_capacity(self.config.layers);
        for (l, lp) in self.layout.layers.iter().enumerate() {
            h = encoder_layer_forward(g, h, lp, bound, &self.config, ctx, l)?;
            outputs.push(h);
        }
        Ok(outputs)
    }

    pub fn reconstruct(&self, g: &mut Graph<F>, bound: &Bound, x_last: Var) -> Result<Var> {
        reconstruct(g, x_last, &self.layout.head, bound)
    }

    /// Eval-mode forward without recording gradients; returns every layer.
    pub fn hidden_states(&self, x: &Tensor<F>) -> Result<Vec<Tensor<F>>> {
        let mut ctx = ForwardCtx::eval();
        self.hidden_states_with(x, &mut ctx)
    }

    pub fn hidden_states_with(
        &self,
        x: &Tensor<F>,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<Vec<Tensor<F>>> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g);
        let xv = g.constant(x.clone());
        let outs = self.forward(&mut g, &bound, xv, ctx)?;
        Ok(outs.into_iter().map(|v| g.value(v).clone()).collect())
    }
}

/// Layer dropout settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerDropConfig {
    pub p_layer: f64,
    pub lambda_layer: f64,
}

impl From<&ModelConfig> for LayerDropConfig {
    fn from(c: &ModelConfig) -> Self {
        Self {
            p_layer: c.p_layer,
            lambda_layer: c.lambda_layer,
        }
    }
}

/// Layer dropout on a standalone feature map. Identity in eval mode and
/// when the gate draw is not below `p_layer`.
pub fn layer_dropout<F: Real>(
    x: &Tensor<F>,
    cfg: &LayerDropConfig,
    mode: Mode,
    rng: &mut Rng,
) -> Result<Tensor<F>> {
    if mode == Mode::Eval || rng.uniform() >= cfg.p_layer {
        return Ok(x.clone());
    }
    Ok(apply_mask(x, &layer_erasure(x, cfg.lambda_layer)))
}

pub fn apply_mask<F: Real>(x: &Tensor<F>, erased: &[bool]) -> Tensor<F> {
    let mut out = x.clone();
    out.data_mut().iter_mut().zip(erased).for_each(|(v, &e)| {
        if e {
            *v = F::zero();
        }
    });
    out
}

pub fn encoder_layer_forward<F: Real>(
    g: &mut Graph<F>,
    x: Var,
    p: &EncoderLayerParams,
    bound: &Bound,
    cfg: &ModelConfig,
    ctx: &mut ForwardCtx<'_>,
    layer: usize,
) -> Result<Var> {
    let n1 = g.layer_norm(x, bound[p.norm1_gain], bound[p.norm1_bias])?;
    let attn = mhsa_forward(g, n1, &p.attn, bound, &cfg.attention(), ctx, layer)?;
    let x1 = g.add(x, attn)?;

    let n2 = g.layer_norm(x1, bound[p.norm2_gain], bound[p.norm2_bias])?;
    let hidden = g.matmul(n2, bound[p.ff_w1])?;
    let hidden = g.add_bias(hidden, bound[p.ff_b1])?;
    let hidden = match cfg.activation {
        Activation::Gelu => g.gelu(hidden)?,
    };
    let ff = g.matmul(hidden, bound[p.ff_w2])?;
    let ff = g.add_bias(ff, bound[p.ff_b2])?;

    let ff_used = match ctx.layer_decision(g.value(ff), cfg.lambda_layer)? {
        DropDecision::Layer { erased } => g.mask_mul(ff, keep_mask(&erased))?,
        DropDecision::Skipped => ff,
        DropDecision::Attention { .. } => {
            return Err(Error::Usage("mask tape out of order: expected layer".into()))
        }
    };
    if let Some(cap) = ctx.capture.as_mut() {
        if cap.layer == layer {
            cap.layer_before = Some(g.value(ff).cast());
            cap.layer_after = Some(g.value(ff_used).cast());
        }
    }
    g.add(x1, ff_used)
}

/// Linear map `D_attn → D_mel` producing the reconstructed features.
pub fn reconstruct<F: Real>(g: &mut Graph<F>, x_last: Var, head: &HeadParams, bound: &Bound) -> Result<Var> {
    let y = g.matmul(x_last, bound[head.weight])?;
    g.add_bias(y, bound[head.bias])
}

/// Fixed sinusoidal positional encoding, `T×D`.
pub fn positional_encoding<F: Real>(t: usize, d: usize) -> Tensor<F> {
    let mut data = vec![F::zero(); t * d];
    for pos in 0..t {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10_000f64.powf(2.0 * pair / d as f64);
            data[pos * d + i] = F::c(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::new(&[t, d], data).expect("shape matches by construction")
}
