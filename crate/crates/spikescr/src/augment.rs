//! Training-time augmentation: frequency/time masking for dense spectrogram
//! inputs and drop-by-time / drop-by-neuron for spike-count inputs.
//!
//! Augmentation only removes or zeroes; it never increases an entry, and it
//! is applied during training only.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Mask and drop extents; names mirror the published parameter table.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub n_freq_masks: u32,
    /// Channels zeroed per frequency mask.
    pub freq_mask_size: u32,
    pub n_time_masks: u32,
    /// Fraction of T zeroed per time mask.
    pub time_mask_size: f32,
    /// Probability that each drop operation applies.
    pub drop_proportion: f32,
    /// Fraction of T zeroed by drop-by-time.
    pub time_drop_size: f32,
    /// Channels zeroed by drop-by-neuron.
    pub neuron_drop_size: u32,
    /// Draw the two drop operations independently (the alternative is
    /// mutually exclusive application of at most one).
    pub independent_drops: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        // Spectrogram values from the GSC column; drop values from SSC.
        Self {
            n_freq_masks: 1,
            freq_mask_size: 10,
            n_time_masks: 1,
            time_mask_size: 0.25,
            drop_proportion: 0.5,
            time_drop_size: 0.1,
            neuron_drop_size: 10,
            independent_drops: true,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("time_mask_size", self.time_mask_size),
            ("drop_proportion", self.drop_proportion),
            ("time_drop_size", self.time_drop_size),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        Ok(())
    }
}

/// Zero random frequency channels and time-step windows of a dense `T × N`
/// sample in place. Masks may overlap; oversized masks clamp to the axis.
pub fn spec_augment(
    data: &mut [f32],
    t_steps: usize,
    n_channels: usize,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) {
    assert_eq!(data.len(), t_steps * n_channels);
    for _ in 0..cfg.n_freq_masks {
        let size = (cfg.freq_mask_size as usize).min(n_channels);
        if size == 0 {
            continue;
        }
        let f0 = rng.gen_range(0..=n_channels - size);
        for t in 0..t_steps {
            data[t * n_channels + f0..t * n_channels + f0 + size].fill(0.0);
        }
    }
    for _ in 0..cfg.n_time_masks {
        let size = ((cfg.time_mask_size * t_steps as f32).floor() as usize).min(t_steps);
        if size == 0 {
            continue;
        }
        let t0 = rng.gen_range(0..=t_steps - size);
        data[t0 * n_channels..(t0 + size) * n_channels].fill(0.0);
    }
}

/// Drop a contiguous time window and/or a random set of neurons from a
/// spike-count `T × N` sample in place.
pub fn event_drop(
    data: &mut [f32],
    t_steps: usize,
    n_channels: usize,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) {
    assert_eq!(data.len(), t_steps * n_channels);
    // Draw both decisions up front so the RNG stream does not depend on
    // earlier outcomes.
    let do_time = rng.gen::<f32>() < cfg.drop_proportion;
    let do_neuron = if cfg.independent_drops {
        rng.gen::<f32>() < cfg.drop_proportion
    } else {
        !do_time && rng.gen::<f32>() < cfg.drop_proportion
    };
    if do_time {
        let size = ((cfg.time_drop_size * t_steps as f32).floor() as usize).min(t_steps);
        if size > 0 {
            let t0 = rng.gen_range(0..=t_steps - size);
            data[t0 * n_channels..(t0 + size) * n_channels].fill(0.0);
        }
    }
    if do_neuron {
        let size = (cfg.neuron_drop_size as usize).min(n_channels);
        let mut channels: Vec<usize> = (0..n_channels).collect();
        for i in 0..size {
            let j = rng.gen_range(i..n_channels);
            channels.swap(i, j);
        }
        for &ch in &channels[..size] {
            for t in 0..t_steps {
                data[t * n_channels + ch] = 0.0;
            }
        }
    }
}

/// Stable per-sample seed so parallel application stays reproducible.
pub fn derive_seed(base: u64, epoch: usize, sample: usize) -> u64 {
    base ^ (epoch as u64).wrapping_mul(0xA076_1D64_78BD_642F)
        ^ (sample as u64).wrapping_mul(0xE703_7ED1_A0B4_28DB)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn sample(t: usize, n: usize) -> Vec<f32> {
        (0..t * n).map(|i| 1.0 + (i % 3) as f32).collect()
    }

    #[test]
    fn zero_sizes_are_identity() {
        let cfg = AugmentConfig {
            n_freq_masks: 0,
            n_time_masks: 0,
            freq_mask_size: 0,
            time_mask_size: 0.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut d = sample(8, 5);
        let orig = d.clone();
        spec_augment(&mut d, 8, 5, &cfg, &mut rng);
        assert_eq!(d, orig);

        let cfg = AugmentConfig { drop_proportion: 0.0, ..Default::default() };
        let mut d = sample(8, 5);
        let orig = d.clone();
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            event_drop(&mut d, 8, 5, &cfg, &mut rng);
            assert_eq!(d, orig, "drop_proportion 0 must be the identity");
        }
    }

    #[test]
    fn freq_mask_zeroes_exactly_the_configured_channels() {
        let cfg = AugmentConfig {
            n_freq_masks: 1,
            freq_mask_size: 10,
            n_time_masks: 0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = 12;
        let n = 140;
        let mut d = sample(t, n);
        spec_augment(&mut d, t, n, &cfg, &mut rng);
        let mut zero_channels = 0;
        for ch in 0..n {
            if (0..t).all(|ti| d[ti * n + ch] == 0.0) {
                zero_channels += 1;
            }
        }
        assert_eq!(zero_channels, 10, "exactly 10 channels fully zero");
    }

    #[test]
    fn time_mask_quarter_of_hundred_is_25_steps() {
        let cfg = AugmentConfig {
            n_freq_masks: 0,
            n_time_masks: 1,
            time_mask_size: 0.25,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (t, n) = (100, 4);
        let mut d = sample(t, n);
        spec_augment(&mut d, t, n, &cfg, &mut rng);
        let zero_steps = (0..t)
            .filter(|&ti| (0..n).all(|ch| d[ti * n + ch] == 0.0))
            .count();
        assert_eq!(zero_steps, 25);
    }

    #[test]
    fn oversized_mask_clamps_to_full_axis() {
        let cfg = AugmentConfig {
            n_freq_masks: 1,
            freq_mask_size: 999,
            n_time_masks: 0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut d = sample(4, 6);
        spec_augment(&mut d, 4, 6, &cfg, &mut rng);
        assert!(d.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn neuron_drop_zeroes_at_most_the_configured_channels() {
        let cfg = AugmentConfig {
            drop_proportion: 1.0,
            time_drop_size: 0.0,
            neuron_drop_size: 10,
            ..Default::default()
        };
        let (t, n) = (9, 140);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut d = sample(t, n);
        event_drop(&mut d, t, n, &cfg, &mut rng);
        let zero_channels = (0..n)
            .filter(|&ch| (0..t).all(|ti| d[ti * n + ch] == 0.0))
            .count();
        assert!(zero_channels <= 10);
        assert_eq!(zero_channels, 10, "with distinct draws all 10 land");
    }

    #[test]
    fn dropping_never_increases_and_is_reproducible() {
        let cfg = AugmentConfig::default();
        for seed in 0..30 {
            let mut a = sample(20, 15);
            let before = a.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            event_drop(&mut a, 20, 15, &cfg, &mut rng);
            for (x, y) in a.iter().zip(&before) {
                assert!(x <= y, "augmentation increased an entry");
                assert!(*x >= 0.0);
                assert!(*x == *y || *x == 0.0, "masked region must be exactly zero");
            }
            let mut b = sample(20, 15);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            event_drop(&mut b, 20, 15, &cfg, &mut rng);
            assert_eq!(a, b, "same seed must reproduce bit-identically");
        }
    }

    #[test]
    fn exclusive_mode_applies_at_most_one_drop() {
        let cfg = AugmentConfig {
            drop_proportion: 1.0,
            time_drop_size: 0.5,
            neuron_drop_size: 5,
            independent_drops: false,
            ..Default::default()
        };
        let (t, n) = (10, 12);
        let mut d = sample(t, n);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        event_drop(&mut d, t, n, &cfg, &mut rng);
        // with p=1 the time drop always fires first, so no channel is
        // fully zeroed beyond what the time window implies
        let zero_steps = (0..t)
            .filter(|&ti| (0..n).all(|ch| d[ti * n + ch] == 0.0))
            .count();
        assert_eq!(zero_steps, 5, "half of T dropped");
        let fully_zero_channels = (0..n)
            .filter(|&ch| (0..t).all(|ti| d[ti * n + ch] == 0.0))
            .count();
        assert_eq!(fully_zero_channels, 0, "neuron drop must not also fire");
    }

    #[test]
    fn config_bounds_validated() {
        assert!(AugmentConfig::default().validate().is_ok());
        assert!(AugmentConfig { time_mask_size: 1.5, ..Default::default() }
            .validate()
            .is_err());
        assert!(AugmentConfig { drop_proportion: -0.1, ..Default::default() }
            .validate()
            .is_err());
    }
}
