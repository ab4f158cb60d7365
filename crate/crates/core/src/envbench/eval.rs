//! Closed-loop rollouts: observe, decode a chunk, execute it, repeat.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{EnvConfig, PointMassEnv};
use crate::codec::{decode_tokens, ActionChunk, BinTable, Prefix, Vocab};
use crate::error::Result;
use crate::net::Params;
use crate::sampler::{decode, DecodeConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub episodes: usize,
    pub successes: usize,
    /// Chunks the policy failed to produce (left masked or undecodable).
    pub policy_failures: usize,
    pub mean_steps: f64,
}

impl EvalReport {
    pub fn success_rate(&self) -> f64 {
        self.successes as f64 / self.episodes as f64
    }
}

/// Runs `episodes` rollouts from starts drawn with `seed`. A policy error
/// ends the episode as a failure.
pub fn evaluate(
    env: &EnvConfig,
    episodes: usize,
    seed: u64,
    mut policy: impl FnMut(&Prefix, &PointMassEnv) -> Result<ActionChunk>,
) -> EvalReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut successes = 0;
    let mut policy_failures = 0;
    let mut steps = 0;
    for _ in 0..episodes {
        let mut sim = PointMassEnv::sample(env.clone(), &mut rng);
        'episode: while !sim.done() {
            let chunk = match policy(&sim.observe(), &sim) {
                Ok(c) => c,
                Err(_) => {
                    policy_failures += 1;
                    break;
                }
            };
            for h in 0..chunk.horizon() {
                if sim.step(chunk.row(h)).is_err() {
                    policy_failures += 1;
                    break 'episode;
                }
                if sim.done() {
                    break;
                }
            }
        }
        successes += usize::from(sim.success());
        steps += sim.t;
    }
    EvalReport {
        episodes,
        successes,
        policy_failures,
        mean_steps: steps as f64 / episodes.max(1) as f64,
    }
}

/// Closed-loop success of a trained model under `decoder`.
pub fn evaluate_policy(
    params: &Params,
    bins: &BinTable,
    vocab: &Vocab,
    decoder: &DecodeConfig,
    env: &EnvConfig,
    episodes: usize,
    seed: u64,
) -> EvalReport {
    evaluate(env, episodes, seed, |prefix, _| {
        let (tokens, _) = decode(params, prefix.tokens(), decoder)?;
        decode_tokens(&tokens, bins, vocab)
    })
}
