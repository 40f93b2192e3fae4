//! Feature files, corpus layout on disk, normalization, and the synthetic
//! corpus generator.
//!
//! A corpus directory holds:
//!
//! ```text
//! manifest.csv        utterance_id,file,frames,split
//! utt_00000.fbnk ...  one feature file per utterance
//! frame_labels.csv    utterance_id,frame_idx,class
//! utt_labels.csv      utterance_id,speaker
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: &[u8; 4] = b"FBNK";
pub const FEATURE_VERSION: u32 = 1;

pub fn encode_features(x: &Tensor<f32>) -> Result<Vec<u8>> {
    if x.shape().len() != 2 {
        return Err(Error::dim("feature file", x.shape(), &[0, 0]));
    }
    let mut out = Vec::with_capacity(16 + 4 * x.numel());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(x.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(x.cols() as u32).to_le_bytes());
    for v in x.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.len() < 16 || &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::Data("not a feature file (bad magic)".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != FEATURE_VERSION {
        return Err(Error::Data(format!("unsupported feature file version {version}")));
    }
    let (rows, cols) = (word(8) as usize, word(12) as usize);
    let payload = &bytes[16..];
    if payload.len() != rows * cols * 4 {
        return Err(Error::Data(format!(
            "feature payload is {} bytes, header says {rows}x{cols}",
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Tensor::new(&[rows, cols], data)
}

pub fn write_features(path: &Path, x: &Tensor<f32>) -> Result<()> {
    write_atomic(path, &encode_features(x)?)
}

pub fn read_features(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    decode_features(&bytes)
}

/// Write to a sibling temporary file, then rename over the target.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Utterances with frame-level and utterance-level labels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub ids: Vec<String>,
    pub utterances: Vec<Tensor<f32>>,
    /// Phoneme-style class per frame.
    pub frame_labels: Vec<Vec<usize>>,
    /// Speaker per utterance.
    pub speakers: Vec<usize>,
    pub splits: Vec<Split>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.utterances.first().map(Tensor::cols)
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn phoneme_classes(&self) -> usize {
        self.frame_labels.iter().flatten().max().map_or(0, |m| m + 1)
    }

    pub fn speaker_count(&self) -> usize {
        self.speakers.iter().max().map_or(0, |m| m + 1)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if [self.ids.len(), self.frame_labels.len(), self.speakers.len(), self.splits.len()]
            .iter()
            .any(|&l| l != n)
        {
            return Err(Error::Data("corpus columns have different lengths".into()));
        }
        let d = self.feature_dim();
        for (i, u) in self.utterances.iter().enumerate() {
            if Some(u.cols()) != d {
                return Err(Error::Data(format!("utterance {} has width {}", self.ids[i], u.cols())));
            }
            if self.frame_labels[i].len() != u.rows() {
                return Err(Error::Data(format!(
                    "utterance {} has {} frames but {} labels",
                    self.ids[i],
                    u.rows(),
                    self.frame_labels[i].len()
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        fs::create_dir_all(dir)?;
        let mut manifest = csv::Writer::from_writer(Vec::new());
        let mut frames = csv::Writer::from_writer(Vec::new());
        let mut utts = csv::Writer::from_writer(Vec::new());
        manifest.write_record(["utterance_id", "file", "frames", "split"]).map_err(csv_err)?;
        frames.write_record(["utterance_id", "frame_idx", "class"]).map_err(csv_err)?;
        utts.write_record(["utterance_id", "speaker"]).map_err(csv_err)?;
        for i in 0..self.len() {
            let id = &self.ids[i];
            let file = format!("{id}.fbnk");
            write_features(&dir.join(&file), &self.utterances[i])?;
            let split = match self.splits[i] {
                Split::Train => "train",
                Split::Test => "test",
            };
            let t = self.utterances[i].rows().to_string();
            manifest.write_record([id.as_str(), &file, &t, split]).map_err(csv_err)?;
            for (f, c) in self.frame_labels[i].iter().enumerate() {
                frames
                    .write_record([id.as_str(), &f.to_string(), &c.to_string()])
                    .map_err(csv_err)?;
            }
            utts.write_record([id.as_str(), &self.speakers[i].to_string()]).map_err(csv_err)?;
        }
        for (name, w) in [
            ("manifest.csv", manifest),
            ("frame_labels.csv", frames),
            ("utt_labels.csv", utts),
        ] {
            let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
            write_atomic(&dir.join(name), &bytes)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mut corpus = Corpus::default();
        let mut index = std::collections::HashMap::new();
        for rec in read_csv(&dir.join("manifest.csv"))? {
            let [id, file, frames, split] = fields::<4>(&rec)?;
            let x = read_features(&dir.join(file))?;
            if x.rows() != parse::<usize>(frames)? {
                return Err(Error::Data(format!("{id}: manifest frame count disagrees with file")));
            }
            let split = match split {
                "train" => Split::Train,
                "test" => Split::Test,
                other => return Err(Error::Data(format!("unknown split {other}"))),
            };
            index.insert(id.to_string(), corpus.len());
            corpus.frame_labels.push(vec![usize::MAX; x.rows()]);
            corpus.ids.push(id.to_string());
            corpus.utterances.push(x);
            corpus.speakers.push(usize::MAX);
            corpus.splits.push(split);
        }
        let lookup = |id: &str| {
            index
                .get(id)
                .copied()
                .ok_or_else(|| Error::Data(format!("label for unknown utterance {id}")))
        };
        for rec in read_csv(&dir.join("frame_labels.csv"))? {
            let [id, frame, class] = fields::<3>(&rec)?;
            let u = lookup(id)?;
            let f: usize = parse(frame)?;
            let slot = corpus.frame_labels[u]
                .get_mut(f)
                .ok_or_else(|| Error::Data(format!("{id}: frame {f} out of range")))?;
            *slot = parse(class)?;
        }
        for rec in read_csv(&dir.join("utt_labels.csv"))? {
            let [id, speaker] = fields::<2>(&rec)?;
            let u = lookup(id)?;
            corpus.speakers[u] = parse(speaker)?;
        }
        for (i, id) in corpus.ids.iter().enumerate() {
            if corpus.frame_labels[i].contains(&usize::MAX) || corpus.speakers[i] == usize::MAX {
                return Err(Error::Data(format!("{id}: missing labels")));
            }
        }
        corpus.validate()?;
        Ok(corpus)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Data(e.to_string())
}

fn read_csv(path: &Path) -> Result<Vec<csv::StringRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    r.records().map(|rec| rec.map_err(csv_err)).collect()
}

fn fields<const N: usize>(rec: &csv::StringRecord) -> Result<[&str; N]> {
    if rec.len() != N {
        return Err(Error::Data(format!("expected {N} columns, got {}", rec.len())));
    }
    Ok(std::array::from_fn(|i| &rec[i]))
}

fn parse<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.trim().parse().map_err(|_| Error::Data(format!("cannot parse {s:?}")))
}

/// Per-channel mean and standard deviation of a corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalizer {
    pub fn fit(utterances: &[Tensor<f32>]) -> Result<Self> {
        let d = utterances
            .first()
            .map(Tensor::cols)
            .ok_or_else(|| Error::Data("cannot normalize an empty corpus".into()))?;
        let mut sum = vec![0.0f64; d];
        let mut sq = vec![0.0f64; d];
        let mut n = 0usize;
        for u in utterances {
            for row in u.data().chunks(d) {
                for j in 0..d {
                    sum[j] += row[j] as f64;
                    sq[j] += (row[j] as f64).powi(2);
                }
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::Data("cannot normalize a corpus without frames".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| ((s / n as f64 - m * m).max(0.0).sqrt()).max(1e-8) as f32)
            .collect();
        Ok(Self {
            mean: mean.into_iter().map(|m| m as f32).collect(),
            std,
        })
    }

    pub fn identity(d: usize) -> Self {
        Self {
            mean: vec![0.0; d],
            std: vec![1.0; d],
        }
    }

    pub fn apply(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let d = self.mean.len();
        if x.cols() != d {
            return Err(Error::dim("normalize", x.shape(), &[d]));
        }
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(d.max(1)) {
            for j in 0..d {
                row[j] = (row[j] - self.mean[j]) / self.std[j];
            }
        }
        Ok(out)
    }
}

/// Parameters of the planted-template synthetic corpus.
///
/// Each frame is `gain · template[phoneme] + speaker_profile + noise`.
/// Phonemes persist over segments of `min_segment..=max_segment` frames.
/// Utterance `i` belongs to speaker `i mod speakers`; every fifth
/// utterance of each speaker goes to the test split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub utterances: usize,
    pub frames: usize,
    pub phoneme_classes: usize,
    pub speakers: usize,
    pub d_mel: usize,
    pub seed: u64,
    pub template_scale: f64,
    pub speaker_scale: f64,
    pub noise_std: f64,
    pub min_segment: usize,
    pub max_segment: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            utterances: 200,
            frames: 64,
            phoneme_classes: 10,
            speakers: 10,
            d_mel: 80,
            seed: 0,
            template_scale: 1.0,
            speaker_scale: 1.0,
            noise_std: 1.9,
            min_segment: 8,
            max_segment: 16,
        }
    }
}

pub fn generate_corpus(spec: &SyntheticSpec) -> Result<Corpus> {
    if spec.phoneme_classes == 0 || spec.speakers == 0 || spec.d_mel == 0 {
        return Err(Error::Config("classes, speakers and d_mel must be positive".into()));
    }
    if spec.min_segment == 0 || spec.min_segment > spec.max_segment {
        return Err(Error::Config("segment lengths must satisfy 0 < min <= max".into()));
    }
    let mut rng = Rng::seed(spec.seed);
    let d = spec.d_mel;
    let templates: Vec<Vec<f64>> = (0..spec.phoneme_classes)
        .map(|_| smooth_profile(&mut rng, d, spec.template_scale))
        .collect();
    let profiles: Vec<Vec<f64>> = (0..spec.speakers)
        .map(|_| {
            let slope = rng.uniform_range(-1.0, 1.0);
            let offset = rng.normal() * 0.5;
            let shape = smooth_profile(&mut rng, d, 0.5);
            (0..d)
                .map(|j| {
                    let pos = if d > 1 { 2.0 * j as f64 / (d - 1) as f64 - 1.0 } else { 0.0 };
                    spec.speaker_scale * (slope * pos + offset + shape[j])
                })
                .collect()
        })
        .collect();

    let mut corpus = Corpus::default();
    for i in 0..spec.utterances {
        let speaker = i % spec.speakers;
        let mut labels = Vec::with_capacity(spec.frames);
        let mut prev = usize::MAX;
        while labels.len() < spec.frames {
            let len = spec.min_segment + rng.below(spec.max_segment - spec.min_segment + 1);
            let mut ph = rng.below(spec.phoneme_classes);
            if ph == prev && spec.phoneme_classes > 1 {
                ph = (ph + 1 + rng.below(spec.phoneme_classes - 1)) % spec.phoneme_classes;
            }
            prev = ph;
            labels.extend(std::iter::repeat_n(ph, len));
        }
        labels.truncate(spec.frames);
        let mut data = Vec::with_capacity(spec.frames * d);
        for &ph in &labels {
            let gain = 1.0 + 0.2 * rng.normal();
            for j in 0..d {
                let v = gain * templates[ph][j] + profiles[speaker][j] + spec.noise_std * rng.normal();
                data.push(v as f32);
            }
        }
        corpus.ids.push(format!("utt_{i:05}"));
        corpus.utterances.push(Tensor::new(&[spec.frames, d], data)?);
        corpus.frame_labels.push(labels);
        corpus.speakers.push(speaker);
        let split = if (i / spec.speakers) % 5 == 4 { Split::Test } else { Split::Train };
        corpus.splits.push(split);
    }
    Ok(corpus)
}

/// Random spectral shape: white noise smoothed across channels, scaled to
/// the requested RMS.
fn smooth_profile(rng: &mut Rng, d: usize, rms: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
    let smooth: Vec<f64> = (0..d)
        .map(|j| {
            let lo = j.saturating_sub(1);
            let hi = (j + 1).min(d - 1);
            raw[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect();
    let norm = (smooth.iter().map(|v| v * v).sum::<f64>() / d as f64).sqrt().max(1e-12);
    smooth.iter().map(|v| v * rms / norm).collect()
}
