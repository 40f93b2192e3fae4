//! Input corruption for masked-reconstruction pretraining: time masking,
//! channel masking and additive magnitude noise.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// How masked time blocks are filled. Only zeroing is implemented.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeFill {
    #[default]
    Zero,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlterationConfig {
    pub time_mask_ratio: f64,
    pub time_block: usize,
    pub channel_max: usize,
    pub magnitude_noise_prob: f64,
    pub noise_std: f64,
    pub time_fill: TimeFill,
}

impl Default for AlterationConfig {
    fn default() -> Self {
        Self {
            time_mask_ratio: 0.15,
            time_block: 3,
            channel_max: 8,
            magnitude_noise_prob: 0.1,
            noise_std: 0.2,
            time_fill: TimeFill::Zero,
        }
    }
}

impl AlterationConfig {
    /// No alteration at all.
    pub fn none() -> Self {
        Self {
            time_mask_ratio: 0.0,
            channel_max: 0,
            magnitude_noise_prob: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("time_mask_ratio", self.time_mask_ratio),
            ("magnitude_noise_prob", self.magnitude_noise_prob),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if self.time_block == 0 {
            return Err(Error::Config("time_block must be positive".into()));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config(format!("noise_std = {} must be >= 0", self.noise_std)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlteredBatch {
    pub altered: Tensor<f32>,
    pub original: Tensor<f32>,
    /// Row-major `T×D` map of altered cells.
    pub altered_positions: Vec<bool>,
}

impl AlteredBatch {
    fn identity(x: &Tensor<f32>) -> Self {
        Self {
            altered: x.clone(),
            original: x.clone(),
            altered_positions: vec![false; x.numel()],
        }
    }

    pub fn altered_count(&self) -> usize {
        self.altered_positions.iter().filter(|&&b| b).count()
    }

    /// Indices of frames with at least one altered cell.
    pub fn altered_frames(&self) -> Vec<usize> {
        let d = self.original.cols().max(1);
        self.altered_positions
            .chunks(d)
            .enumerate()
            .filter(|(_, row)| row.iter().any(|&b| b))
            .map(|(t, _)| t)
            .collect()
    }
}

/// Zero randomly chosen non-overlapping blocks of `time_block` frames.
///
/// The time axis is cut into aligned slots of `time_block` frames (the last
/// one may be shorter); `round(ratio·T / block)` slots are picked uniformly.
pub fn alter_time(x: &Tensor<f32>, cfg: &AlterationConfig, rng: &mut Rng) -> AlteredBatch {
    let mut out = AlteredBatch::identity(x);
    let (t, d) = (x.rows(), x.cols());
    if t < cfg.time_block {
        log::warn!("sequence of {t} frames is shorter than time block {}", cfg.time_block);
        return out;
    }
    let block = cfg.time_block;
    let slots = t.div_ceil(block);
    let wanted = ((cfg.time_mask_ratio * t as f64) / block as f64).round() as usize;
    for slot in rng.sample_indices(slots, wanted.min(slots)) {
        for frame in slot * block..((slot + 1) * block).min(t) {
            out.altered.data_mut()[frame * d..(frame + 1) * d].fill(0.0);
            out.altered_positions[frame * d..(frame + 1) * d].fill(true);
        }
    }
    out
}

/// Zero one contiguous band of at most `channel_max` channels in every frame.
pub fn alter_channel(x: &Tensor<f32>, cfg: &AlterationConfig, rng: &mut Rng) -> AlteredBatch {
    let d = x.cols();
    let width = rng.below(cfg.channel_max.min(d) + 1);
    let start = rng.below(d - width + 1);
    alter_channel_band(x, start, width)
}

/// Zero channels `[start, start + width)`, clamped to the feature width.
pub fn alter_channel_band(x: &Tensor<f32>, start: usize, width: usize) -> AlteredBatch {
    let mut out = AlteredBatch::identity(x);
    let d = x.cols();
    let lo = start.min(d);
    let hi = (start + width).min(d);
    for t in 0..x.rows() {
        out.altered.data_mut()[t * d + lo..t * d + hi].fill(0.0);
        out.altered_positions[t * d + lo..t * d + hi].fill(true);
    }
    out
}

/// Add `N(0, noise_std²)` noise to every channel of frames selected
/// independently with probability `magnitude_noise_prob`.
pub fn alter_magnitude(x: &Tensor<f32>, cfg: &AlterationConfig, rng: &mut Rng) -> AlteredBatch {
    let mut out = AlteredBatch::identity(x);
    if cfg.magnitude_noise_prob <= 0.0 || cfg.noise_std <= 0.0 {
        return out;
    }
    let d = x.cols();
    for t in 0..x.rows() {
        if !rng.bernoulli(cfg.magnitude_noise_prob) {
            continue;
        }
        for j in t * d..(t + 1) * d {
            out.altered.data_mut()[j] += (rng.normal() * cfg.noise_std) as f32;
            out.altered_positions[j] = true;
        }
    }
    out
}

/// Time, channel, then magnitude alteration; position maps are unioned.
pub fn compose_alterations(x: &Tensor<f32>, cfg: &AlterationConfig, rng: &mut Rng) -> AlteredBatch {
    let time = alter_time(x, cfg, rng);
    let chan = alter_channel(&time.altered, cfg, rng);
    let mag = alter_magnitude(&chan.altered, cfg, rng);
    let positions = time
        .altered_positions
        .iter()
        .zip(&chan.altered_positions)
        .zip(&mag.altered_positions)
        .map(|((&a, &b), &c)| a || b || c)
        .collect();
    AlteredBatch {
        altered: mag.altered,
        original: x.clone(),
        altered_positions: positions,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::rng::Rng;

    fn ramp(t: usize, d: usize) -> Tensor<f32> {
        Tensor::new(&[t, d], (0..t * d).map(|i| 1.0 + i as f32 * 0.01).collect()).unwrap()
    }

    #[test]
    fn zero_ratio_is_identity() {
        let x = ramp(20, 4);
        let cfg = AlterationConfig {
            time_mask_ratio: 0.0,
            ..Default::default()
        };
        let b = alter_time(&x, &cfg, &mut Rng::seed(0));
        assert_eq!(b.altered, x);
        assert_eq!(b.altered_count(), 0);
    }

    #[test]
    fn full_ratio_single_block_zeroes_everything() {
        let x = ramp(12, 3);
        let cfg = AlterationConfig {
            time_mask_ratio: 1.0,
            time_block: 12,
            ..Default::default()
        };
        let b = alter_time(&x, &cfg, &mut Rng::seed(0));
        assert!(b.altered.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn short_sequence_skips() {
        let x = ramp(2, 3);
        let b = alter_time(&x, &AlterationConfig::default(), &mut Rng::seed(0));
        assert_eq!(b.altered, x);
    }

    #[test]
    fn masked_frame_count_and_runs() {
        let x = ramp(100, 2);
        let cfg = AlterationConfig::default();
        for seed in 0..200 {
            let b = alter_time(&x, &cfg, &mut Rng::seed(seed));
            let frames = b.altered_frames();
            assert!((13..=17).contains(&frames.len()), "{} frames", frames.len());
            // maximal runs are whole blocks, except one touching the end
            let mut run_start = 0;
            for k in 1..=frames.len() {
                if k == frames.len() || frames[k] != frames[k - 1] + 1 {
                    let len = k - run_start;
                    let ends_at_boundary = frames[k - 1] == 99;
                    assert!(len % 3 == 0 || ends_at_boundary, "run of {len}");
                    run_start = k;
                }
            }
        }
    }

    #[test]
    fn channel_band_exact_and_clamped() {
        let x = ramp(5, 16);
        let b = alter_channel_band(&x, 10, 2);
        for t in 0..5 {
            for j in 0..16 {
                let zeroed = j == 10 || j == 11;
                assert_eq!(b.altered.at(t, j) == 0.0, zeroed);
                assert_eq!(b.altered_positions[t * 16 + j], zeroed);
            }
        }
        let clamped = alter_channel_band(&x, 14, 8);
        assert_eq!(clamped.altered_count(), 5 * 2);

        let none = AlterationConfig {
            channel_max: 0,
            ..Default::default()
        };
        assert_eq!(alter_channel(&x, &none, &mut Rng::seed(1)).altered, x);
        let wide = AlterationConfig {
            channel_max: 100,
            ..Default::default()
        };
        for seed in 0..50 {
            let b = alter_channel(&x, &wide, &mut Rng::seed(seed));
            assert!(b.altered_count() <= 5 * 16);
        }
    }

    #[test]
    fn magnitude_identities() {
        let x = ramp(50, 4);
        let zero_p = AlterationConfig {
            magnitude_noise_prob: 0.0,
            ..Default::default()
        };
        assert_eq!(alter_magnitude(&x, &zero_p, &mut Rng::seed(0)).altered, x);
        let zero_std = AlterationConfig {
            noise_std: 0.0,
            magnitude_noise_prob: 1.0,
            ..Default::default()
        };
        assert_eq!(alter_magnitude(&x, &zero_std, &mut Rng::seed(0)).altered, x);
    }

    #[test]
    fn magnitude_noise_variance() {
        let x = Tensor::<f32>::zeros(&[10_000, 4]);
        let cfg = AlterationConfig {
            magnitude_noise_prob: 0.3,
            noise_std: 0.2,
            ..Default::default()
        };
        let b = alter_magnitude(&x, &cfg, &mut Rng::seed(17));
        let diffs: Vec<f64> = b
            .altered_frames()
            .iter()
            .flat_map(|&t| (0..4).map(move |j| (t, j)))
            .map(|(t, j)| (b.altered.at(t, j) - b.original.at(t, j)) as f64)
            .collect();
        let n = diffs.len() as f64;
        let mean = diffs.iter().sum::<f64>() / n;
        let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((var - 0.04).abs() < 0.2 * 0.04, "variance {var}");
    }

    proptest! {
        #[test]
        fn positions_cover_every_change(seed in 0u64..10_000, t in 3usize..40, d in 1usize..12) {
            let mut r = Rng::seed(seed);
            let x = Tensor::new(&[t, d], (0..t * d).map(|_| r.normal() as f32 + 3.0).collect()).unwrap();
            let b = compose_alterations(&x, &AlterationConfig::default(), &mut Rng::seed(seed));
            for k in 0..t * d {
                if !b.altered_positions[k] {
                    prop_assert_eq!(b.altered.data()[k], b.original.data()[k]);
                }
            }
            let again = compose_alterations(&x, &AlterationConfig::default(), &mut Rng::seed(seed));
            prop_assert_eq!(again, b);
        }
    }
}
