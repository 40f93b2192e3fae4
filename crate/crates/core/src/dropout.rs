//! Forward-pass context shared by attention dropout and layer dropout.
//!
//! Both mechanisms follow the same pattern: one gate draw per application
//! (per head for attention, per layer for the feed-forward map), and when
//! the gate fires every entry above `λ · max` is erased. The context owns
//! the mode, the gate settings, the random stream, instrumentation
//! counters, and an optional mask tape so a sequence of decisions can be
//! recorded once and replayed (used to pin masks during gradient checks).

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

/// Rows whose surviving attention mass falls below this are left unchanged.
pub const DEGENERATE_ROW_SUM: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Which dropout gates may fire, and with what effective probability.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActiveDropouts {
    pub attention_on: bool,
    pub layer_on: bool,
    pub p_attn: f64,
    pub p_layer: f64,
}

impl ActiveDropouts {
    pub const NONE: ActiveDropouts = ActiveDropouts {
        attention_on: false,
        layer_on: false,
        p_attn: 0.0,
        p_layer: 0.0,
    };

    pub fn both(p_attn: f64, p_layer: f64) -> Self {
        Self {
            attention_on: true,
            layer_on: true,
            p_attn,
            p_layer,
        }
    }
}

/// Outcome of one dropout application.
#[derive(Clone, Debug, PartialEq)]
pub enum DropDecision {
    Skipped,
    Attention {
        erased: Vec<bool>,
        passthrough: Vec<bool>,
    },
    Layer {
        erased: Vec<bool>,
    },
}

#[derive(Clone, Debug, Default)]
pub enum MaskTape {
    #[default]
    Off,
    Record(Vec<DropDecision>),
    Replay {
        decisions: Vec<DropDecision>,
        cursor: usize,
    },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GateCounters {
    pub attention_draws: u64,
    pub attention_fires: u64,
    pub layer_draws: u64,
    pub layer_fires: u64,
}

impl std::ops::AddAssign for GateCounters {
    fn add_assign(&mut self, o: Self) {
        self.attention_draws += o.attention_draws;
        self.attention_fires += o.attention_fires;
        self.layer_draws += o.layer_draws;
        self.layer_fires += o.layer_fires;
    }
}

/// Pre/post dropout snapshots for one layer and head.
#[derive(Clone, Debug, Default)]
pub struct Capture {
    pub layer: usize,
    pub head: usize,
    pub attention_before: Option<Tensor<f32>>,
    pub attention_after: Option<Tensor<f32>>,
    pub layer_before: Option<Tensor<f32>>,
    pub layer_after: Option<Tensor<f32>>,
}

impl Capture {
    pub fn new(layer: usize, head: usize) -> Self {
        Self {
            layer,
            head,
            ..Default::default()
        }
    }
}

pub struct ForwardCtx<'r> {
    pub mode: Mode,
    pub active: ActiveDropouts,
    /// Gates fire regardless of the draw (visualization).
    pub force_fire: bool,
    pub tape: MaskTape,
    pub counters: GateCounters,
    pub capture: Option<Capture>,
    rng: Option<&'r mut Rng>,
}

impl<'r> ForwardCtx<'r> {
    pub fn eval() -> Self {
        Self {
            mode: Mode::Eval,
            active: ActiveDropouts::NONE,
            force_fire: false,
            tape: MaskTape::Off,
            counters: GateCounters::default(),
            capture: None,
            rng: None,
        }
    }

    pub fn train(rng: &'r mut Rng, active: ActiveDropouts) -> Self {
        Self {
            mode: Mode::Train,
            active,
            force_fire: false,
            tape: MaskTape::Off,
            counters: GateCounters::default(),
            capture: None,
            rng: Some(rng),
        }
    }

    /// Train mode that replays previously recorded decisions; no randomness.
    pub fn replay(decisions: Vec<DropDecision>) -> Self {
        Self {
            mode: Mode::Train,
            active: ActiveDropouts::NONE,
            force_fire: false,
            tape: MaskTape::Replay {
                decisions,
                cursor: 0,
            },
            counters: GateCounters::default(),
            capture: None,
            rng: None,
        }
    }

    pub fn recording(mut self) -> Self {
        self.tape = MaskTape::Record(Vec::new());
        self
    }

    pub fn recorded(&self) -> Option<&[DropDecision]> {
        match &self.tape {
            MaskTape::Record(d) => Some(d),
            _ => None,
        }
    }

    fn next_replayed(&mut self) -> Option<Result<DropDecision>> {
        match &mut self.tape {
            MaskTape::Replay { decisions, cursor } => {
                let d = decisions.get(*cursor).cloned();
                *cursor += 1;
                Some(d.ok_or_else(|| Error::Usage("mask tape exhausted".into())))
            }
            _ => None,
        }
    }

    fn record(&mut self, d: &DropDecision) {
        if let MaskTape::Record(v) = &mut self.tape {
            v.push(d.clone());
        }
    }

    fn draw_gate(&mut self, on: bool, p: f64) -> Result<bool> {
        if self.mode == Mode::Eval || !on {
            return Ok(false);
        }
        let rng = self
            .rng
            .as_deref_mut()
            .ok_or_else(|| Error::Usage("train-mode forward without a random stream".into()))?;
        let r = rng.uniform();
        Ok(self.force_fire || r < p)
    }

    pub(crate) fn attention_decision<F: Real>(
        &mut self,
        a: &Tensor<F>,
        lambda: f64,
    ) -> Result<DropDecision> {
        if let Some(d) = self.next_replayed() {
            return d;
        }
        let gate_open = self.mode == Mode::Train && self.active.attention_on;
        let fired = self.draw_gate(self.active.attention_on, self.active.p_attn)?;
        if gate_open {
            self.counters.attention_draws += 1;
        }
        let d = if fired {
            self.counters.attention_fires += 1;
            let (erased, passthrough) = attention_erasure(a, lambda)?;
            DropDecision::Attention { erased, passthrough }
        } else {
            DropDecision::Skipped
        };
        self.record(&d);
        Ok(d)
    }

    pub(crate) fn layer_decision<F: Real>(
        &mut self,
        x: &Tensor<F>,
        lambda: f64,
    ) -> Result<DropDecision> {
        if let Some(d) = self.next_replayed() {
            return d;
        }
        let gate_open = self.mode == Mode::Train && self.active.layer_on;
        let fired = self.draw_gate(self.active.layer_on, self.active.p_layer)?;
        if gate_open {
            self.counters.layer_draws += 1;
        }
        let d = if fired {
            self.counters.layer_fires += 1;
            DropDecision::Layer {
                erased: layer_erasure(x, lambda),
            }
        } else {
            DropDecision::Skipped
        };
        self.record(&d);
        Ok(d)
    }
}

/// Erasure set of attention dropout on one head: entries strictly above
/// `λ · max(A)` are erased. Rows that lose nothing, or would be left with
/// (numerically) no mass, are flagged to pass through unchanged.
/// Fails on negative entries.
pub fn attention_erasure<F: Real>(a: &Tensor<F>, lambda: f64) -> Result<(Vec<bool>, Vec<bool>)> {
    let data = a.data();
    if let Some(v) = data.iter().find(|v| !(v.f64() >= 0.0)) {
        return Err(Error::Contract(format!(
            "attention weights must be nonnegative, found {v:?}"
        )));
    }
    let max = data.iter().fold(0.0f64, |m, v| m.max(v.f64()));
    let threshold = lambda * max;
    let erased: Vec<bool> = data.iter().map(|v| v.f64() > threshold).collect();
    let cols = a.cols().max(1);
    let passthrough = data
        .chunks(cols)
        .zip(erased.chunks(cols))
        .map(|(row, er)| {
            if !er.iter().any(|&e| e) {
                return true;
            }
            let kept: f64 = row
                .iter()
                .zip(er)
                .filter(|(_, &e)| !e)
                .map(|(v, _)| v.f64())
                .sum();
            kept < DEGENERATE_ROW_SUM
        })
        .collect();
    Ok((erased, passthrough))
}

/// Erasure set of layer dropout: entries with `|x| > λ · max|x|`.
pub fn layer_erasure<F: Real>(x: &Tensor<F>, lambda: f64) -> Vec<bool> {
    let max = x.data().iter().fold(0.0f64, |m, v| m.max(v.f64().abs()));
    let threshold = lambda * max;
    x.data().iter().map(|v| v.f64().abs() > threshold).collect()
}

pub(crate) fn keep_mask<F: Real>(erased: &[bool]) -> Vec<F> {
    erased
        .iter()
        .map(|&e| if e { F::zero() } else { F::one() })
        .collect()
}
