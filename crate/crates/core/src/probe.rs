//! Downstream probes on frozen encoder representations.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{Corpus, Normalizer, Split};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::optim::{AdamConfig, OptimizerState};
use crate::params::{uniform_init, Bound, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    Linear,
    OneHidden,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// One label per frame.
    Frame,
    /// One label per utterance, from time-averaged representations.
    Utterance,
}

/// The four downstream tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "phoneme-linear")]
    PhonemeLinear,
    #[serde(rename = "phoneme-hidden")]
    PhonemeHidden,
    #[serde(rename = "speaker-frame")]
    SpeakerFrame,
    #[serde(rename = "speaker-utt")]
    SpeakerUtt,
}

impl Task {
    pub const ALL: [Task; 4] = [
        Task::PhonemeLinear,
        Task::PhonemeHidden,
        Task::SpeakerFrame,
        Task::SpeakerUtt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Task::PhonemeLinear => "phoneme-linear",
            Task::PhonemeHidden => "phoneme-hidden",
            Task::SpeakerFrame => "speaker-frame",
            Task::SpeakerUtt => "speaker-utt",
        }
    }

    pub fn config(self, s: &ProbeSettings) -> ProbeConfig {
        let (probe_kind, task_kind, classes) = match self {
            Task::PhonemeLinear => (ProbeKind::Linear, TaskKind::Frame, s.phoneme_classes),
            Task::PhonemeHidden => (ProbeKind::OneHidden, TaskKind::Frame, s.phoneme_classes),
            Task::SpeakerFrame => (ProbeKind::Linear, TaskKind::Frame, s.speaker_classes),
            Task::SpeakerUtt => (ProbeKind::Linear, TaskKind::Utterance, s.speaker_classes),
        };
        ProbeConfig {
            probe_kind,
            task_kind,
            classes,
            hidden_dim: s.hidden_dim,
            steps: s.steps,
            batch_size: s.batch_size,
            learning_rate: s.learning_rate,
        }
    }

    /// Per-utterance label sequences for this task.
    pub fn labels(self, corpus: &Corpus, idx: &[usize]) -> Vec<Vec<usize>> {
        idx.iter()
            .map(|&i| match self {
                Task::PhonemeLinear | Task::PhonemeHidden => corpus.frame_labels[i].clone(),
                Task::SpeakerFrame => vec![corpus.speakers[i]; corpus.utterances[i].rows()],
                Task::SpeakerUtt => vec![corpus.speakers[i]],
            })
            .collect()
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown probe task {s:?}")))
    }
}

/// Probe section of a run configuration; shared by all four tasks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSettings {
    pub phoneme_classes: usize,
    pub speaker_classes: usize,
    pub hidden_dim: usize,
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        Self {
            phoneme_classes: 41,
            speaker_classes: 251,
            hidden_dim: 768,
            steps: 20_000,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub probe_kind: ProbeKind,
    pub task_kind: TaskKind,
    pub classes: usize,
    pub hidden_dim: usize,
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.batch_size == 0 {
            return Err(Error::Config("probe classes and batch_size must be positive".into()));
        }
        if self.probe_kind == ProbeKind::OneHidden && self.hidden_dim == 0 {
            return Err(Error::Config("hidden_dim must be positive".into()));
        }
        Ok(())
    }
}

/// Eval-mode last-layer hidden states of each (normalized) utterance.
pub fn extract_representations(
    encoder: &Encoder<f32>,
    normalizer: &Normalizer,
    utterances: &[Tensor<f32>],
) -> Result<Vec<Tensor<f32>>> {
    let d_mel = encoder.config().d_mel;
    utterances
        .iter()
        .map(|u| {
            if u.shape().len() != 2 || u.cols() != d_mel {
                return Err(Error::Config(format!(
                    "features have width {:?}, checkpoint expects {d_mel}",
                    u.shape().get(1)
                )));
            }
            let x = normalizer.apply(u)?;
            let mut states = encoder.hidden_states(&x)?;
            Ok(states.pop().expect("encoder has at least one layer"))
        })
        .collect()
}

/// Mean over time; fails on an empty utterance.
pub fn mean_pool(rep: &Tensor<f32>) -> Result<Vec<f32>> {
    if rep.rows() == 0 {
        return Err(Error::Data("cannot pool an empty utterance".into()));
    }
    let d = rep.cols();
    let mut acc = vec![0.0f64; d];
    for row in rep.data().chunks(d.max(1)) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v as f64;
        }
    }
    Ok(acc.iter().map(|a| (a / rep.rows() as f64) as f32).collect())
}

/// Flatten representations into one example per row according to the
/// task kind, checking labels against the class count.
pub fn build_examples(
    reps: &[Tensor<f32>],
    labels: &[Vec<usize>],
    cfg: &ProbeConfig,
) -> Result<(Tensor<f32>, Vec<usize>)> {
    if reps.len() != labels.len() {
        return Err(Error::Data(format!("{} utterances but {} label lists", reps.len(), labels.len())));
    }
    let d = reps.first().map_or(0, Tensor::cols);
    let mut rows = Vec::new();
    let mut ys = Vec::new();
    for (r, l) in reps.iter().zip(labels) {
        if r.cols() != d {
            return Err(Error::dim("probe features", r.shape(), &[d]));
        }
        match cfg.task_kind {
            TaskKind::Frame => {
                if l.len() != r.rows() {
                    return Err(Error::Data(format!("{} frames but {} labels", r.rows(), l.len())));
                }
                rows.extend_from_slice(r.data());
                ys.extend_from_slice(l);
            }
            TaskKind::Utterance => {
                if l.len() != 1 {
                    return Err(Error::Data("utterance task needs exactly one label".into()));
                }
                rows.extend(mean_pool(r)?);
                ys.push(l[0]);
            }
        }
    }
    if let Some(&bad) = ys.iter().find(|&&y| y >= cfg.classes) {
        return Err(Error::Config(format!("label {bad} outside {} probe classes", cfg.classes)));
    }
    Ok((Tensor::new(&[ys.len(), d], rows)?, ys))
}

#[derive(Clone, Debug)]
pub struct Probe {
    pub config: ProbeConfig,
    pub params: ParamStore<f32>,
    layers: Vec<(ParamId, ParamId)>,
    mean: Vec<f32>,
    std: Vec<f32>,
}

#[derive(Clone, Debug, Default)]
pub struct ProbeLog {
    pub losses: Vec<f32>,
}

impl Probe {
    fn standardize(&self, x: &Tensor<f32>) -> Tensor<f32> {
        let d = self.mean.len();
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(d.max(1)) {
            for j in 0..d {
                row[j] = (row[j] - self.mean[j]) / self.std[j];
            }
        }
        out
    }

    fn logits(&self, g: &mut Graph<f32>, bound: &Bound, x: &Tensor<f32>) -> Result<Var> {
        let mut h = g.constant(self.standardize(x));
        for (k, &(w, b)) in self.layers.iter().enumerate() {
            if k > 0 {
                h = g.relu(h)?;
            }
            h = g.matmul(h, bound[w])?;
            h = g.add_bias(h, bound[b])?;
        }
        Ok(h)
    }

    /// Argmax class of every row.
    pub fn predict(&self, x: &Tensor<f32>) -> Result<Vec<usize>> {
        if x.cols() != self.mean.len() {
            return Err(Error::dim("probe input", x.shape(), &[self.mean.len()]));
        }
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g);
        let logits = self.logits(&mut g, &bound, x)?;
        let c = self.config.classes;
        Ok(g.value(logits)
            .data()
            .chunks(c)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect())
    }
}

/// Cross-entropy training of a probe on `(x, y)`; the encoder that
/// produced `x` is never touched.
pub fn train_probe(x: &Tensor<f32>, y: &[usize], cfg: &ProbeConfig, rng: &mut Rng) -> Result<(Probe, ProbeLog)> {
    cfg.validate()?;
    let (n, d) = (x.rows(), x.cols());
    if n == 0 || n != y.len() {
        return Err(Error::Data(format!("probe needs examples; got {n} rows and {} labels", y.len())));
    }
    if let Some(&bad) = y.iter().find(|&&c| c >= cfg.classes) {
        return Err(Error::Config(format!("label {bad} outside {} probe classes", cfg.classes)));
    }
    let mut sum = vec![0.0f64; d];
    let mut sq = vec![0.0f64; d];
    for row in x.data().chunks(d.max(1)) {
        for j in 0..d {
            sum[j] += row[j] as f64;
            sq[j] += (row[j] as f64).powi(2);
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(s, m)| (s / n as f64 - m * m).max(0.0).sqrt().max(1e-6) as f32)
        .collect();

    let mut params = ParamStore::new();
    let widths: Vec<usize> = match cfg.probe_kind {
        ProbeKind::Linear => vec![d, cfg.classes],
        ProbeKind::OneHidden => vec![d, cfg.hidden_dim, cfg.classes],
    };
    let layers = widths
        .windows(2)
        .enumerate()
        .map(|(k, w)| {
            (
                params.add(format!("probe.{k}.weight"), uniform_init(rng, w[0], w[1], 1.0)),
                params.add(format!("probe.{k}.bias"), Tensor::zeros(&[w[1]])),
            )
        })
        .collect();
    let mut probe = Probe {
        config: cfg.clone(),
        params,
        layers,
        mean: mean.iter().map(|&m| m as f32).collect(),
        std,
    };
    let mut opt = OptimizerState::new(
        &probe.params,
        AdamConfig {
            learning_rate: cfg.learning_rate,
            ..AdamConfig::default()
        },
    );
    let mut log = ProbeLog::default();
    let batch = cfg.batch_size.min(n);
    let mut xb = Tensor::zeros(&[batch, d]);
    let mut yb = vec![0; batch];
    for _ in 0..cfg.steps {
        for k in 0..batch {
            let i = rng.below(n);
            xb.data_mut()[k * d..(k + 1) * d].copy_from_slice(x.row(i));
            yb[k] = y[i];
        }
        let mut g = Graph::new();
        let bound = probe.params.bind(&mut g);
        let logits = probe.logits(&mut g, &bound, &xb)?;
        let loss = g.cross_entropy(logits, &yb)?;
        let value = g.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::Numeric(format!("non-finite probe loss {value}")));
        }
        g.backward(loss)?;
        probe.params.absorb_grads(&g, &bound)?;
        opt.step(&mut probe.params, cfg.learning_rate)?;
        log.losses.push(value);
    }
    Ok((probe, log))
}

/// Fraction of examples whose predicted class equals the label.
pub fn evaluate_probe(probe: &Probe, x: &Tensor<f32>, y: &[usize]) -> Result<f64> {
    if x.rows() != y.len() {
        return Err(Error::Data(format!("{} rows but {} labels", x.rows(), y.len())));
    }
    if y.is_empty() {
        return Err(Error::Data("no examples to evaluate".into()));
    }
    let pred = probe.predict(x)?;
    Ok(accuracy(&pred, y))
}

pub fn accuracy(pred: &[usize], y: &[usize]) -> f64 {
    let hits = pred.iter().zip(y).filter(|(p, t)| p == t).count();
    hits as f64 / y.len().max(1) as f64
}

/// Extract, train on the train split, evaluate on the test split.
pub fn run_task(
    encoder: &Encoder<f32>,
    normalizer: &Normalizer,
    corpus: &Corpus,
    task: Task,
    settings: &ProbeSettings,
) -> Result<f64> {
    let cfg = task.config(settings);
    let (train_idx, test_idx) = (corpus.indices(Split::Train), corpus.indices(Split::Test));
    if train_idx.is_empty() || test_idx.is_empty() {
        return Err(Error::Data("probe needs both train and test utterances".into()));
    }
    let pick = |idx: &[usize]| -> Vec<Tensor<f32>> { idx.iter().map(|&i| corpus.utterances[i].clone()).collect() };
    let train_reps = extract_representations(encoder, normalizer, &pick(&train_idx))?;
    let test_reps = extract_representations(encoder, normalizer, &pick(&test_idx))?;
    let (xtr, ytr) = build_examples(&train_reps, &task.labels(corpus, &train_idx), &cfg)?;
    let (xte, yte) = build_examples(&test_reps, &task.labels(corpus, &test_idx), &cfg)?;
    let mut rng = Rng::seed(settings.seed);
    let (probe, _) = train_probe(&xtr, &ytr, &cfg, &mut rng)?;
    evaluate_probe(&probe, &xte, &yte)
}
