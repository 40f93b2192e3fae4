//! Masked-reconstruction pretraining with the dropout fusion schedules.

use std::fmt;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::alteration::{compose_alterations, AlterationConfig};
use crate::checkpoint::Checkpoint;
use crate::data::Normalizer;
use crate::dropout::{ActiveDropouts, ForwardCtx, GateCounters};
use crate::encoder::{Encoder, ModelConfig};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::optim::{warmup_lr, AdamConfig, OptimizerState};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Effective gate probability when both dropouts run together.
pub const FUSED_HALF_PROB: f64 = 0.05;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionStrategy {
    None,
    AttentionOnly,
    LayerOnly,
    BothHalfProb,
    #[default]
    AttentionThenLayer,
    LayerThenAttention,
}

impl FusionStrategy {
    pub const ALL: [FusionStrategy; 6] = [
        FusionStrategy::None,
        FusionStrategy::AttentionOnly,
        FusionStrategy::LayerOnly,
        FusionStrategy::BothHalfProb,
        FusionStrategy::AttentionThenLayer,
        FusionStrategy::LayerThenAttention,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionStrategy::None => "none",
            FusionStrategy::AttentionOnly => "attention_only",
            FusionStrategy::LayerOnly => "layer_only",
            FusionStrategy::BothHalfProb => "both_half_prob",
            FusionStrategy::AttentionThenLayer => "attention_then_layer",
            FusionStrategy::LayerThenAttention => "layer_then_attention",
        }
    }

    /// Step at which a sequential strategy swaps mechanisms.
    pub fn switch_step(self, total: u64) -> Option<u64> {
        match self {
            FusionStrategy::AttentionThenLayer | FusionStrategy::LayerThenAttention => Some(total / 2),
            _ => None,
        }
    }
}

impl fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown fusion strategy {s:?}")))
    }
}

/// Which gates may fire at `step` of `total`, with their probabilities.
pub fn active_dropouts(
    strategy: FusionStrategy,
    step: u64,
    total: u64,
    p_attn: f64,
    p_layer: f64,
) -> ActiveDropouts {
    let attention = ActiveDropouts {
        attention_on: true,
        p_attn,
        ..ActiveDropouts::NONE
    };
    let layer = ActiveDropouts {
        layer_on: true,
        p_layer,
        ..ActiveDropouts::NONE
    };
    let first_half = step < total / 2;
    match strategy {
        FusionStrategy::None => ActiveDropouts::NONE,
        FusionStrategy::AttentionOnly => attention,
        FusionStrategy::LayerOnly => layer,
        FusionStrategy::BothHalfProb => ActiveDropouts::both(FUSED_HALF_PROB, FUSED_HALF_PROB),
        FusionStrategy::AttentionThenLayer if first_half => attention,
        FusionStrategy::AttentionThenLayer => layer,
        FusionStrategy::LayerThenAttention if first_half => layer,
        FusionStrategy::LayerThenAttention => attention,
    }
}

/// Short label for the metrics file.
pub fn strategy_state(a: &ActiveDropouts) -> &'static str {
    match (a.attention_on, a.layer_on) {
        (false, false) => "off",
        (true, false) => "attention",
        (false, true) => "layer",
        (true, true) => "attention+layer",
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub total_steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Defaults to 7% of `total_steps`.
    pub warmup_steps: Option<u64>,
    pub seed: u64,
    /// 0 disables periodic checkpoints.
    pub checkpoint_interval: u64,
    pub strategy: FusionStrategy,
    pub log_interval: u64,
    /// Count the reconstruction loss on altered cells only.
    pub restrict_loss_to_altered: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 200_000,
            batch_size: 32,
            learning_rate: 1e-4,
            warmup_steps: None,
            seed: 0,
            checkpoint_interval: 0,
            strategy: FusionStrategy::default(),
            log_interval: 100,
            restrict_loss_to_altered: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.log_interval == 0 {
            return Err(Error::Config("log_interval must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate = {} must be positive", self.learning_rate)));
        }
        Ok(())
    }

    pub fn warmup(&self) -> u64 {
        self.warmup_steps
            .unwrap_or_else(|| (self.total_steps as f64 * 0.07).round() as u64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub loss: f32,
    pub counters: GateCounters,
}

/// One optimization step on `batch`: alter, encode in train mode,
/// reconstruct, L1 against the clean input, backward, Adam.
///
/// Utterances are processed at their own length; each contributes in
/// proportion to its number of scored cells, which is the same objective
/// as padding to the longest utterance and masking the padding out.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_step(
    batch: &[&Tensor<f32>],
    encoder: &mut Encoder<f32>,
    optimizer: &mut OptimizerState,
    alteration: &AlterationConfig,
    active: ActiveDropouts,
    lr: f64,
    restrict_to_altered: bool,
    rng: &mut Rng,
) -> Result<StepOutcome> {
    if batch.is_empty() {
        return Err(Error::Usage("empty pretraining batch".into()));
    }
    let mut g = Graph::new();
    let bound = encoder.params().bind(&mut g);
    let mut counters = GateCounters::default();
    let mut terms = Vec::with_capacity(batch.len());
    for x in batch {
        let altered = compose_alterations(x, alteration, rng);
        let weights = restrict_to_altered.then(|| {
            altered
                .altered_positions
                .iter()
                .map(|&a| if a { 1.0f32 } else { 0.0 })
                .collect::<Vec<_>>()
        });
        let scored = match &weights {
            Some(w) => w.iter().filter(|&&v| v > 0.0).count(),
            None => x.numel(),
        };
        let xv = g.constant(altered.altered);
        let mut ctx = ForwardCtx::train(rng, active);
        let outs = encoder.forward(&mut g, &bound, xv, &mut ctx)?;
        counters += ctx.counters;
        let last = *outs.last().expect("encoder has at least one layer");
        let pred = encoder.reconstruct(&mut g, &bound, last)?;
        let loss = g.weighted_l1_loss(pred, x, weights)?;
        terms.push((loss, scored));
    }
    let total: usize = terms.iter().map(|(_, n)| n).sum();
    let mut loss = None;
    for (term, n) in terms {
        let share = if total > 0 { n as f32 / total as f32 } else { 0.0 };
        let scaled = g.scale(term, share)?;
        loss = Some(match loss {
            Some(acc) => g.add(acc, scaled)?,
            None => scaled,
        });
    }
    let loss = loss.expect("nonempty batch");
    let value = g.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::Numeric(format!("non-finite pretraining loss {value}")));
    }
    g.backward(loss)?;
    encoder.params_mut().absorb_grads(&g, &bound)?;
    optimizer.step(encoder.params_mut(), lr)?;
    Ok(StepOutcome { loss: value, counters })
}

/// Where a run writes its artifacts. Intermediate checkpoints go to
/// `<checkpoint>.step<N>` and metrics to `<checkpoint>.metrics.tsv`.
#[derive(Clone, Debug)]
pub struct RunOutputs {
    pub checkpoint: PathBuf,
}

impl RunOutputs {
    pub fn metrics_path(&self) -> PathBuf {
        suffixed(&self.checkpoint, ".metrics.tsv")
    }

    pub fn step_checkpoint(&self, step: u64) -> PathBuf {
        suffixed(&self.checkpoint, &format!(".step{step}"))
    }
}

fn suffixed(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Training state: everything needed to continue a run bit-identically.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub encoder: Encoder<f32>,
    pub optimizer: OptimizerState,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub alteration: AlterationConfig,
    pub normalizer: Normalizer,
    pub step: u64,
    pub rng: Rng,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    /// Loss of every step taken in this call, in order.
    pub losses: Vec<f32>,
    /// Gate counters of every step taken in this call.
    pub counters: Vec<GateCounters>,
    /// Step index of the first entry.
    pub first_step: u64,
}

impl Trainer {
    pub fn new(
        model: ModelConfig,
        train: TrainConfig,
        alteration: AlterationConfig,
        normalizer: Normalizer,
    ) -> Result<Self> {
        model.validate()?;
        train.validate()?;
        alteration.validate()?;
        if normalizer.mean.len() != model.d_mel {
            return Err(Error::Config(format!(
                "normalizer width {} does not match d_mel {}",
                normalizer.mean.len(),
                model.d_mel
            )));
        }
        let mut rng = Rng::seed(train.seed);
        let encoder = Encoder::new(model.clone(), &mut rng.split())?;
        let optimizer = OptimizerState::new(
            encoder.params(),
            AdamConfig {
                learning_rate: train.learning_rate,
                ..AdamConfig::default()
            },
        );
        Ok(Self {
            encoder,
            optimizer,
            model,
            train,
            alteration,
            normalizer,
            step: 0,
            rng,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        Ok(Self {
            encoder: ckpt.encoder()?,
            optimizer: ckpt.optimizer.clone(),
            model: ckpt.model.clone(),
            train: ckpt.train.clone(),
            alteration: ckpt.alteration.clone(),
            normalizer: ckpt.normalizer.clone(),
            step: ckpt.step,
            rng: Rng::from_state(&ckpt.rng)?,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            train: self.train.clone(),
            alteration: self.alteration.clone(),
            step: self.step,
            rng: self.rng.state(),
            optimizer: self.optimizer.clone(),
            params: self
                .encoder
                .params()
                .iter()
                .map(|(n, t)| {
                    let mut t = t.clone();
                    t.set_requires_grad(false);
                    (n.to_string(), t)
                })
                .collect(),
            normalizer: self.normalizer.clone(),
        }
    }

    /// Take one step on a batch sampled (with replacement) from `data`,
    /// which must already be normalized.
    pub fn step_once(&mut self, data: &[Tensor<f32>]) -> Result<StepOutcome> {
        if data.is_empty() {
            return Err(Error::Data("no training utterances".into()));
        }
        let active = active_dropouts(
            self.train.strategy,
            self.step,
            self.train.total_steps,
            self.model.p_attn,
            self.model.p_layer,
        );
        let lr = warmup_lr(self.train.learning_rate, self.step, self.train.warmup());
        let batch: Vec<&Tensor<f32>> = (0..self.train.batch_size)
            .map(|_| &data[self.rng.below(data.len())])
            .collect();
        let out = pretrain_step(
            &batch,
            &mut self.encoder,
            &mut self.optimizer,
            &self.alteration,
            active,
            lr,
            self.train.restrict_loss_to_altered,
            &mut self.rng,
        )?;
        self.step += 1;
        Ok(out)
    }

    /// Run until `total_steps`, logging metrics and writing checkpoints
    /// when `outputs` is given.
    pub fn run(&mut self, data: &[Tensor<f32>], outputs: Option<&RunOutputs>) -> Result<TrainReport> {
        let mut report = TrainReport {
            first_step: self.step,
            ..Default::default()
        };
        let mut metrics = match outputs {
            Some(o) => Some(
                OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(o.metrics_path())?,
            ),
            None => None,
        };
        let total = self.train.total_steps;
        let switch = self.train.strategy.switch_step(total);
        while self.step < total {
            let step = self.step;
            let active = active_dropouts(self.train.strategy, step, total, self.model.p_attn, self.model.p_layer);
            let out = self.step_once(data)?;
            report.losses.push(out.loss);
            report.counters.push(out.counters);
            if step % self.train.log_interval == 0 || step + 1 == total {
                log::info!("step {step} loss {:.6} ({})", out.loss, strategy_state(&active));
                if let Some(f) = metrics.as_mut() {
                    writeln!(f, "{step}\t{}\t{}", out.loss, strategy_state(&active))?;
                }
            }
            if let Some(o) = outputs {
                let done = self.step;
                let periodic = self.train.checkpoint_interval > 0 && done % self.train.checkpoint_interval == 0;
                if done < total && (periodic || switch == Some(done)) {
                    self.checkpoint().save(&o.step_checkpoint(done))?;
                }
            }
        }
        if let Some(o) = outputs {
            self.checkpoint().save(&o.checkpoint)?;
        }
        Ok(report)
    }
}
