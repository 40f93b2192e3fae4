//! The `tdrop` command line.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Deserialize;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{self, generate_corpus, read_features, write_atomic, Corpus, Normalizer, Split, SyntheticSpec};
use crate::dropout::{ActiveDropouts, Capture, ForwardCtx};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::pretrain::{FusionStrategy, RunOutputs, Trainer};
use crate::probe::{run_task, ProbeSettings, Task};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::viz::{diff_grayscale, grayscale, write_pgm};

#[derive(Debug, Parser)]
#[command(name = "tdrop", version, about = "Thresholded attention and layer dropout for SSL encoders")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a seeded synthetic corpus with planted phoneme and speaker structure.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        utterances: usize,
        #[arg(long)]
        frames: usize,
        #[arg(long)]
        phoneme_classes: usize,
        #[arg(long)]
        speakers: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 80)]
        mel_dims: usize,
    },
    /// Pretrain an encoder by masked reconstruction.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from an intermediate checkpoint of the same run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train and evaluate one downstream probe; appends a row to the results CSV.
    Probe {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        task: Task,
        #[arg(long)]
        out: PathBuf,
        /// Run configuration supplying the probe section.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Pretrain and probe every grid entry; writes one results table.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Corpus directory; overrides the grid's `data` entry.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Dump before/after/diff images of one head's attention and one layer's feed-forward map.
    Visualize {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        layer: usize,
        #[arg(long)]
        head: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        lambda_attn: Option<f64>,
        #[arg(long)]
        lambda_layer: Option<f64>,
    },
}

/// Parse arguments and run; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData {
            out,
            utterances,
            frames,
            phoneme_classes,
            speakers,
            seed,
            mel_dims,
        } => {
            let spec = SyntheticSpec {
                utterances,
                frames,
                phoneme_classes,
                speakers,
                d_mel: mel_dims,
                seed,
                ..SyntheticSpec::default()
            };
            let corpus = generate_corpus(&spec)?;
            corpus.save(&out)?;
            log::info!("wrote {} utterances to {}", corpus.len(), out.display());
            Ok(())
        }
        Command::Pretrain {
            config,
            data,
            out,
            resume,
        } => {
            let cfg = RunConfig::load(&config)?;
            let corpus = Corpus::load(&data)?;
            let mut trainer = match resume {
                Some(path) => {
                    let ckpt = Checkpoint::load(&path)?;
                    log::info!("resuming from step {} of {}", ckpt.step, path.display());
                    Trainer::from_checkpoint(&ckpt)?
                }
                None => {
                    let normalizer = fit_normalizer(&corpus, cfg.model.d_mel)?;
                    Trainer::new(cfg.model, cfg.train, cfg.alteration, normalizer)?
                }
            };
            let train = normalized_split(&corpus, &trainer.normalizer, Split::Train)?;
            let report = trainer.run(&train, Some(&RunOutputs { checkpoint: out }))?;
            if let Some(last) = report.losses.last() {
                println!("final loss {last:.6}");
            }
            Ok(())
        }
        Command::Probe {
            ckpt,
            data,
            task,
            out,
            config,
        } => {
            let settings = match config {
                Some(p) => RunConfig::load(&p)?.probe,
                None => ProbeSettings::default(),
            };
            let ckpt = Checkpoint::load(&ckpt)?;
            let corpus = Corpus::load(&data)?;
            let encoder = ckpt.encoder()?;
            let acc = run_task(&encoder, &ckpt.normalizer, &corpus, task, &settings)?;
            let row = ResultRow {
                strategy: ckpt.train.strategy,
                lambda_attn: ckpt.model.lambda_attn,
                lambda_layer: ckpt.model.lambda_layer,
                task,
                accuracy: acc,
            };
            append_results(&out, &[row])?;
            println!("{task}\t{acc:.4}");
            Ok(())
        }
        Command::Sweep {
            config,
            grid,
            out,
            data,
        } => {
            let cfg = RunConfig::load(&config)?;
            let grid_doc = Grid::load(&grid)?;
            let data_dir = match (data, &grid_doc.data) {
                (Some(d), _) => d,
                (None, Some(d)) => grid.parent().unwrap_or(Path::new(".")).join(d),
                (None, None) => return Err(Error::Config("sweep needs --data or a grid `data` entry".into())),
            };
            let corpus = Corpus::load(&data_dir)?;
            let rows = sweep(&cfg, &grid_doc, &corpus)?;
            write_results(&out, &rows)
        }
        Command::Visualize {
            ckpt,
            input,
            layer,
            head,
            out,
            lambda_attn,
            lambda_layer,
        } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let mut encoder = ckpt.encoder()?;
            let m = encoder.config().clone();
            if layer >= m.layers || head >= m.heads {
                return Err(Error::Config(format!(
                    "layer {layer} / head {head} out of range for {} layers and {} heads",
                    m.layers, m.heads
                )));
            }
            for l in [lambda_attn, lambda_layer].into_iter().flatten() {
                if !(0.0..=1.0).contains(&l) {
                    return Err(Error::Config(format!("threshold ratio {l} outside [0, 1]")));
                }
            }
            encoder.set_dropout(
                1.0,
                lambda_attn.unwrap_or(m.lambda_attn),
                1.0,
                lambda_layer.unwrap_or(m.lambda_layer),
            );
            let x = ckpt.normalizer.apply(&read_features(&input)?)?;
            let cap = capture(&encoder, &x, layer, head)?;
            write_visualization(&out, &cap)
        }
    }
}

/// One forced-gate forward pass recording the chosen head and layer.
pub fn capture(encoder: &Encoder<f32>, x: &Tensor<f32>, layer: usize, head: usize) -> Result<Capture> {
    let mut rng = Rng::seed(0);
    let mut ctx = ForwardCtx::train(&mut rng, ActiveDropouts::both(1.0, 1.0));
    ctx.force_fire = true;
    ctx.capture = Some(Capture::new(layer, head));
    encoder.hidden_states_with(x, &mut ctx)?;
    Ok(ctx.capture.take().expect("capture installed above"))
}

/// Writes `PREFIX_{before,after,diff}.pgm` for attention,
/// `PREFIX_layer_{before,after,diff}.pgm` for the feed-forward map, and the
/// underlying matrices as feature files (`PREFIX_attention_before.fbnk`, ...).
pub fn write_visualization(prefix: &Path, cap: &Capture) -> Result<()> {
    let path = |suffix: &str| {
        let mut s = prefix.as_os_str().to_owned();
        s.push(suffix);
        PathBuf::from(s)
    };
    let missing = || Error::Usage("capture did not record the requested layer".into());
    let pairs = [
        ("", "attention", &cap.attention_before, &cap.attention_after),
        ("_layer", "layer", &cap.layer_before, &cap.layer_after),
    ];
    for (tag, dump, before, after) in pairs {
        let (before, after) = (before.as_ref().ok_or_else(missing)?, after.as_ref().ok_or_else(missing)?);
        write_pgm(&path(&format!("{tag}_before.pgm")), before, &grayscale(before))?;
        write_pgm(&path(&format!("{tag}_after.pgm")), after, &grayscale(after))?;
        write_pgm(&path(&format!("{tag}_diff.pgm")), after, &diff_grayscale(before, after))?;
        data::write_features(&path(&format!("_{dump}_before.fbnk")), before)?;
        data::write_features(&path(&format!("_{dump}_after.fbnk")), after)?;
    }
    Ok(())
}

fn fit_normalizer(corpus: &Corpus, d_mel: usize) -> Result<Normalizer> {
    match corpus.feature_dim() {
        Some(d) if d != d_mel => Err(Error::Config(format!("corpus has {d} channels, model expects d_mel {d_mel}"))),
        None => Err(Error::Data("corpus is empty".into())),
        Some(_) => {
            let train: Vec<Tensor<f32>> = corpus
                .indices(Split::Train)
                .into_iter()
                .map(|i| corpus.utterances[i].clone())
                .collect();
            Normalizer::fit(&train)
        }
    }
}

fn normalized_split(corpus: &Corpus, n: &Normalizer, split: Split) -> Result<Vec<Tensor<f32>>> {
    corpus
        .indices(split)
        .into_iter()
        .map(|i| n.apply(&corpus.utterances[i]))
        .collect()
}

/// Sweep grid file.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub runs: Vec<GridRun>,
    pub tasks: Vec<Task>,
    /// Corpus directory, relative to the grid file.
    #[serde(default)]
    pub data: Option<PathBuf>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridRun {
    pub strategy: FusionStrategy,
    pub lambda_attn: f64,
    pub lambda_layer: f64,
}

impl Grid {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let grid: Grid = serde_json::from_str(&text)?;
        for r in &grid.runs {
            for l in [r.lambda_attn, r.lambda_layer] {
                if !(0.0..=1.0).contains(&l) {
                    return Err(Error::Config(format!("threshold ratio {l} outside [0, 1]")));
                }
            }
        }
        Ok(grid)
    }
}

pub fn sweep(cfg: &RunConfig, grid: &Grid, corpus: &Corpus) -> Result<Vec<ResultRow>> {
    let normalizer = fit_normalizer(corpus, cfg.model.d_mel)?;
    let train = normalized_split(corpus, &normalizer, Split::Train)?;
    let mut rows = Vec::new();
    for run in &grid.runs {
        let mut model = cfg.model.clone();
        model.lambda_attn = run.lambda_attn;
        model.lambda_layer = run.lambda_layer;
        let mut train_cfg = cfg.train.clone();
        train_cfg.strategy = run.strategy;
        log::info!("sweep: {} λ_attn={} λ_layer={}", run.strategy, run.lambda_attn, run.lambda_layer);
        let mut trainer = Trainer::new(model, train_cfg, cfg.alteration.clone(), normalizer.clone())?;
        trainer.run(&train, None)?;
        for &task in &grid.tasks {
            let accuracy = run_task(&trainer.encoder, &normalizer, corpus, task, &cfg.probe)?;
            rows.push(ResultRow {
                strategy: run.strategy,
                lambda_attn: run.lambda_attn,
                lambda_layer: run.lambda_layer,
                task,
                accuracy,
            });
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub strategy: FusionStrategy,
    pub lambda_attn: f64,
    pub lambda_layer: f64,
    pub task: Task,
    pub accuracy: f64,
}

pub const RESULT_COLUMNS: [&str; 5] = ["strategy", "lambda_attn", "lambda_layer", "task", "accuracy"];

fn results_bytes(existing: Option<Vec<u8>>, rows: &[ResultRow]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    if existing.is_none() {
        w.write_record(RESULT_COLUMNS).map_err(|e| Error::Data(e.to_string()))?;
    }
    for r in rows {
        w.write_record([
            r.strategy.name().to_string(),
            r.lambda_attn.to_string(),
            r.lambda_layer.to_string(),
            r.task.name().to_string(),
            format!("{:.6}", r.accuracy),
        ])
        .map_err(|e| Error::Data(e.to_string()))?;
    }
    let new = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    let mut out = existing.unwrap_or_default();
    out.extend(new);
    Ok(out)
}

pub fn write_results(path: &Path, rows: &[ResultRow]) -> Result<()> {
    write_atomic(path, &results_bytes(None, rows)?)
}

/// Append rows, writing the header first if the file does not exist.
pub fn append_results(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let existing = match std::fs::read(path) {
        Ok(b) => Some(b),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
        Err(e) => return Err(e.into()),
    };
    write_atomic(path, &results_bytes(existing, rows)?)
}
