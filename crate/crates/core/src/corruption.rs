//! Absorbing-state forward process with independent per-block noise levels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::{TokenSeq, Vocab};
use crate::error::{Error, Result};
use crate::masks::BlockLayout;

/// Lower clamp on sampled timesteps; bounds the `1/t` loss weight by `1/EPS`.
pub const T_EPS: f64 = 1e-3;

/// Linear schedule: retention `alpha_bar(t) = 1 - t`, so a token is masked
/// with probability `t`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NoiseSchedule;

impl NoiseSchedule {
    pub fn retention(&self, t: f64) -> f64 {
        1.0 - t.clamp(0.0, 1.0)
    }

    pub fn mask_probability(&self, t: f64) -> f64 {
        1.0 - self.retention(t)
    }
}

/// Per-block timesteps, mask indicators over the action region, and the
/// matching loss weights.
#[derive(Debug, Clone, PartialEq)]
pub struct CorruptionRecord {
    pub timesteps: Vec<f64>,
    /// One entry per action token, `true` where the corrupted id is MASK.
    pub masked: Vec<bool>,
    pub weights: Vec<f64>,
    pub seed: u64,
}

impl CorruptionRecord {
    pub fn masked_in_block(&self, layout: &BlockLayout, b: usize) -> usize {
        let l = layout.block_len();
        self.masked[b * l..(b + 1) * l].iter().filter(|m| **m).count()
    }

    pub fn mask_fraction(&self) -> f64 {
        if self.masked.is_empty() {
            return 0.0;
        }
        self.masked.iter().filter(|m| **m).count() as f64 / self.masked.len() as f64
    }
}

/// `count` independent draws from `U(T_EPS, 1]`.
pub fn sample_timesteps<R: Rng + ?Sized>(count: usize, rng: &mut R) -> Vec<f64> {
    (0..count)
        .map(|_| {
            // `random` is in [0, 1); flip it so 1 is reachable and 0 is not.
            let u = 1.0 - rng.random::<f64>();
            T_EPS + (1.0 - T_EPS) * u
        })
        .collect()
}

pub fn loss_weight(t: f64) -> Result<f64> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::InvalidTimestep(t));
    }
    Ok(1.0 / t)
}

/// Corrupts the action region of `seq` block by block, drawing the substream
/// seed from `rng`.
pub fn corrupt<R: Rng + ?Sized>(
    seq: &TokenSeq,
    layout: &BlockLayout,
    timesteps: &[f64],
    rng: &mut R,
) -> Result<(TokenSeq, CorruptionRecord)> {
    let seed = rng.random::<u64>();
    corrupt_with_seed(seq, layout, timesteps, seed)
}

/// Block `b` draws its masking decisions from stream `b` of a ChaCha8 keyed by
/// `seed`, so its indicators depend on nothing but `t_b` and the seed.
pub fn corrupt_with_seed(
    seq: &TokenSeq,
    layout: &BlockLayout,
    timesteps: &[f64],
    seed: u64,
) -> Result<(TokenSeq, CorruptionRecord)> {
    if timesteps.len() != layout.num_blocks() {
        return Err(Error::Layout(format!(
            "{} timesteps for {} blocks",
            timesteps.len(),
            layout.num_blocks()
        )));
    }
    if seq.regions.action != layout.action_range() {
        return Err(Error::Layout(format!(
            "blocks cover {:?} but the action region is {:?}",
            layout.action_range(),
            seq.regions.action
        )));
    }
    let weights = timesteps
        .iter()
        .map(|&t| loss_weight(t))
        .collect::<Result<Vec<_>>>()?;
    let schedule = NoiseSchedule;
    let mut out = seq.clone();
    let mut masked = Vec::with_capacity(layout.action_len());
    for (b, &t) in timesteps.iter().enumerate() {
        let mut stream = ChaCha8Rng::seed_from_u64(seed);
        stream.set_stream(b as u64);
        let p = schedule.mask_probability(t);
        for i in layout.block_range(b) {
            let hit = stream.random::<f64>() < p;
            let is_masked = hit || out.tokens[i] == Vocab::MASK;
            if is_masked {
                out.tokens[i] = Vocab::MASK;
            }
            masked.push(is_masked);
        }
    }
    let record = CorruptionRecord {
        timesteps: timesteps.to_vec(),
        masked,
        weights,
        seed,
    };
    Ok((out, record))
}
