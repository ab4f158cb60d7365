//! Decoding: block-wise predict-and-refine with a prefix KV cache, plus
//! full-sequence diffusion and autoregressive baselines.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::{ActionSpec, TokenId, Vocab};
use crate::error::{Error, Result};
use crate::masks::{ar_causal_mask, diffusion_forcing_mask, full_bidirectional_mask, AttnMask, BlockLayout};
use crate::net::{forward, CacheMode, KvCache, Matrix, Params};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderKind {
    BlockDiffusion,
    FullDiffusion,
    Autoregressive,
}

impl FromStr for DecoderKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "block" | "block_diffusion" => Ok(Self::BlockDiffusion),
            "full" | "full_diffusion" => Ok(Self::FullDiffusion),
            "ar" | "autoregressive" => Ok(Self::Autoregressive),
            _ => Err(format!("unknown decoder {s:?}")),
        }
    }
}

impl fmt::Display for DecoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::BlockDiffusion => "block",
            Self::FullDiffusion => "full",
            Self::Autoregressive => "ar",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CommitRule {
    Greedy,
    /// Sample from the tempered distribution; confidence is the sampled
    /// token's probability.
    Sampled { temperature: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeConfig {
    pub kind: DecoderKind,
    pub num_blocks: usize,
    pub block_len: usize,
    /// Refinement passes per block (block kind) or in total (full kind).
    /// Ignored by the autoregressive decoder.
    pub steps: usize,
    pub commit: CommitRule,
    pub seed: u64,
    pub use_cache: bool,
    /// Read each token's logits from the row before it.
    pub token_shift: bool,
    pub spec: ActionSpec,
}

impl DecodeConfig {
    pub fn block(num_blocks: usize, block_len: usize, steps: usize) -> Self {
        Self {
            kind: DecoderKind::BlockDiffusion,
            num_blocks,
            block_len,
            steps,
            commit: CommitRule::Greedy,
            seed: 0,
            use_cache: true,
            token_shift: false,
            spec: ActionSpec::standard(),
        }
    }

    pub fn full(action_len: usize, steps: usize) -> Self {
        Self {
            kind: DecoderKind::FullDiffusion,
            num_blocks: 1,
            block_len: action_len,
            steps,
            ..Self::block(1, action_len, steps)
        }
    }

    pub fn autoregressive(action_len: usize) -> Self {
        Self {
            kind: DecoderKind::Autoregressive,
            token_shift: true,
            ..Self::block(1, action_len, 1)
        }
    }

    pub fn action_len(&self) -> usize {
        self.num_blocks * self.block_len
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.action_len();
        if self.num_blocks == 0 || self.block_len == 0 {
            return Err(Error::Config("blocks and block length must be >= 1".into()));
        }
        if n % self.spec.dim() != 0 {
            return Err(Error::Config(format!(
                "action length {n} is not a multiple of {} dims",
                self.spec.dim()
            )));
        }
        match self.kind {
            DecoderKind::BlockDiffusion if self.steps == 0 || self.steps > self.block_len => Err(Error::Config(
                format!("steps per block must lie in 1..={}", self.block_len),
            )),
            DecoderKind::FullDiffusion if self.num_blocks != 1 => {
                Err(Error::Config("full-sequence decoding uses a single block".into()))
            }
            DecoderKind::FullDiffusion if self.steps == 0 || self.steps > n => {
                Err(Error::Config(format!("total steps must lie in 1..={n}")))
            }
            DecoderKind::Autoregressive if !self.token_shift => Err(Error::Config(
                "autoregressive decoding reads next-token logits; token_shift must be set".into(),
            )),
            _ => Ok(()),
        }
    }

    /// Forward passes one decode consumes.
    pub fn nfe(&self) -> usize {
        let n = self.action_len();
        match (self.kind, self.use_cache) {
            (DecoderKind::BlockDiffusion, true) => 1 + self.num_blocks * (self.steps + 1),
            (DecoderKind::BlockDiffusion, false) => self.num_blocks * self.steps,
            (DecoderKind::FullDiffusion, _) => self.steps,
            (DecoderKind::Autoregressive, true) => 1 + n,
            (DecoderKind::Autoregressive, false) => n,
        }
    }

    /// Sum over forward passes of the number of query tokens processed.
    pub fn token_passes(&self, prefix_len: usize) -> usize {
        let (b, l, s, n) = (self.num_blocks, self.block_len, self.steps, self.action_len());
        match (self.kind, self.use_cache) {
            (DecoderKind::BlockDiffusion, true) => prefix_len + b * (s + 1) * l,
            (DecoderKind::BlockDiffusion, false) => (0..b).map(|k| s * (prefix_len + (k + 1) * l)).sum(),
            (DecoderKind::FullDiffusion, _) => s * (prefix_len + n),
            (DecoderKind::Autoregressive, true) => prefix_len + n,
            (DecoderKind::Autoregressive, false) => (0..n).map(|j| prefix_len + j).sum(),
        }
    }
}

/// Tokens to commit now so that `remaining` masked tokens are gone after
/// exactly `steps_remaining` passes.
pub fn commit_schedule(remaining: usize, steps_remaining: usize) -> usize {
    if steps_remaining <= 1 {
        remaining
    } else {
        remaining.div_ceil(steps_remaining)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub block: usize,
    /// Action-region indices committed in this pass, in commit order.
    pub committed: Vec<usize>,
    pub confidences: Vec<f64>,
    /// Forward passes so far, this one included.
    pub nfe: usize,
    pub cache_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeTrace {
    pub steps: Vec<StepRecord>,
    pub tokens: Vec<TokenId>,
    pub nfe: usize,
    pub token_passes: usize,
    pub wall: Duration,
}

impl DecodeTrace {
    /// Equality on everything but wall time.
    pub fn same_decode(&self, other: &Self) -> bool {
        self.steps == other.steps
            && self.tokens == other.tokens
            && self.nfe == other.nfe
            && self.token_passes == other.token_passes
    }

    pub fn tokens_per_second(&self) -> f64 {
        self.tokens.len() as f64 / self.wall.as_secs_f64()
    }
}

/// One refinement pass, exposed to observers.
pub struct PassView<'a> {
    pub block: usize,
    /// Prefix followed by every action token so far, the current block last.
    pub context: &'a [TokenId],
    /// Logits for the current block's query rows.
    pub logits: &'a Matrix,
}

struct Counter {
    nfe: usize,
    token_passes: usize,
}

impl Counter {
    fn forward(
        &mut self,
        params: &Params,
        ids: &[TokenId],
        positions: &[usize],
        mask: &AttnMask,
        cache: CacheMode<'_>,
    ) -> Result<Matrix> {
        self.nfe += 1;
        self.token_passes += ids.len();
        forward(params, ids, positions, mask, cache)
    }
}

fn candidate_range(spec: &ActionSpec, index: usize) -> std::ops::Range<usize> {
    if spec.is_categorical(index % spec.dim()) {
        Vocab::GRIP_OPEN as usize..Vocab::GRIP_CLOSE as usize + 1
    } else {
        0..crate::codec::NUM_BINS
    }
}

/// Chosen token and its confidence for one position.
fn choose<R: Rng + ?Sized>(row: &[f64], range: std::ops::Range<usize>, rule: CommitRule, rng: &mut R) -> (TokenId, f64) {
    let z = &row[range.clone()];
    let scale = match rule {
        CommitRule::Greedy => 1.0,
        CommitRule::Sampled { temperature } => 1.0 / temperature,
    };
    let max = z.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
    let probs: Vec<f64> = z.iter().map(|v| ((v - max) * scale).exp()).collect();
    let sum: f64 = probs.iter().sum();
    let pick = match rule {
        CommitRule::Greedy => {
            let mut best = 0;
            for (k, v) in z.iter().enumerate() {
                if *v > z[best] {
                    best = k;
                }
            }
            best
        }
        CommitRule::Sampled { .. } => {
            let mut u = rng.random::<f64>() * sum;
            let mut pick = probs.len() - 1;
            for (k, p) in probs.iter().enumerate() {
                if u < *p {
                    pick = k;
                    break;
                }
                u -= p;
            }
            pick
        }
    };
    ((range.start + pick) as TokenId, probs[pick] / sum)
}

/// Commits the most confident of the still-masked positions.
///
/// `rows[j]` holds logits for action index `offset + j`.
#[allow(clippy::too_many_arguments)]
fn refine<R: Rng + ?Sized>(
    rows: &[&[f64]],
    offset: usize,
    actions: &mut [TokenId],
    spec: &ActionSpec,
    rule: CommitRule,
    steps_remaining: usize,
    rng: &mut R,
) -> (Vec<usize>, Vec<f64>) {
    let mut proposals = Vec::new();
    for (j, row) in rows.iter().enumerate() {
        let idx = offset + j;
        if actions[idx] != Vocab::MASK {
            continue;
        }
        let (tok, conf) = choose(row, candidate_range(spec, idx), rule, rng);
        proposals.push((idx, tok, conf));
    }
    let count = commit_schedule(proposals.len(), steps_remaining);
    // Stable sort keeps lower indices first among equal confidences.
    proposals.sort_by(|a, b| b.2.total_cmp(&a.2));
    let mut committed = Vec::with_capacity(count);
    let mut confidences = Vec::with_capacity(count);
    for &(idx, tok, conf) in proposals.iter().take(count) {
        actions[idx] = tok;
        committed.push(idx);
        confidences.push(conf);
    }
    (committed, confidences)
}

fn check_prefix(prefix: &[TokenId]) -> Result<()> {
    if prefix.first() != Some(&Vocab::BOS) {
        return Err(Error::Layout("prefix must begin with BOS".into()));
    }
    Ok(())
}

fn finish(actions: Vec<TokenId>, steps: Vec<StepRecord>, counter: Counter, start: Instant) -> Result<(Vec<TokenId>, DecodeTrace)> {
    if let Some(p) = actions.iter().position(|t| *t == Vocab::MASK) {
        return Err(Error::UndecodableToken {
            position: p,
            token: Vocab::MASK,
        });
    }
    let trace = DecodeTrace {
        steps,
        tokens: actions.clone(),
        nfe: counter.nfe,
        token_passes: counter.token_passes,
        wall: start.elapsed(),
    };
    Ok((actions, trace))
}

/// Block-by-block denoising. Each block starts fully masked, is refined in
/// `steps` passes, and, with the cache enabled, is then written to the cache
/// by one extra pass over its final ids.
pub fn decode_block_diffusion<R: Rng + ?Sized>(
    params: &Params,
    prefix: &[TokenId],
    config: &DecodeConfig,
    rng: &mut R,
) -> Result<(Vec<TokenId>, DecodeTrace)> {
    decode_block_diffusion_observed(params, prefix, config, rng, |_| {})
}

/// [`decode_block_diffusion`] with a callback after every refinement pass.
pub fn decode_block_diffusion_observed<R: Rng + ?Sized>(
    params: &Params,
    prefix: &[TokenId],
    config: &DecodeConfig,
    rng: &mut R,
    mut observe: impl FnMut(&PassView<'_>),
) -> Result<(Vec<TokenId>, DecodeTrace)> {
    if config.kind != DecoderKind::BlockDiffusion {
        return Err(Error::Config("expected a block-diffusion config".into()));
    }
    config.validate()?;
    check_prefix(prefix)?;
    let start = Instant::now();
    let c = prefix.len();
    let (nb, l, s) = (config.num_blocks, config.block_len, config.steps);
    let mut actions = vec![Vocab::MASK; nb * l];
    let mut records = Vec::new();
    let mut counter = Counter { nfe: 0, token_passes: 0 };
    let mut context: Vec<TokenId> = prefix.to_vec();

    let mut cache = KvCache::new(&params.config);
    // Logits of the token just before the current block, for shifted reads.
    let mut carried: Vec<f64> = Vec::new();
    if config.use_cache {
        let positions: Vec<usize> = (0..c).collect();
        let out = counter.forward(params, prefix, &positions, &AttnMask::full(c, c), CacheMode::Append(&mut cache))?;
        carried = out.row(c - 1).to_vec();
    }

    for b in 0..nb {
        let block = b * l..(b + 1) * l;
        let positions: Vec<usize> = (c + block.start..c + block.end).collect();
        context.extend(std::iter::repeat_n(Vocab::MASK, l));
        for k in 0..s {
            let (logits, prev): (Matrix, Vec<f64>) = if config.use_cache {
                let mask = AttnMask::full(l, cache.len() + l);
                let out = counter.forward(params, &actions[block.clone()], &positions, &mask, CacheMode::Read(&cache))?;
                (out, carried.clone())
            } else {
                let layout = BlockLayout::new(c, b + 1, l, false, false)?;
                let mask = diffusion_forcing_mask(&layout)?;
                let all: Vec<usize> = (0..context.len()).collect();
                let out = counter.forward(params, &context, &all, &mask, CacheMode::None)?;
                let prev = out.row(c + block.start - 1).to_vec();
                (out.slice_rows(c + block.start..c + block.end), prev)
            };
            observe(&PassView {
                block: b,
                context: &context,
                logits: &logits,
            });
            let rows: Vec<&[f64]> = (0..l)
                .map(|j| {
                    if !config.token_shift {
                        logits.row(j)
                    } else if j == 0 {
                        prev.as_slice()
                    } else {
                        logits.row(j - 1)
                    }
                })
                .collect();
            let (committed, confidences) = refine(&rows, block.start, &mut actions, &config.spec, config.commit, s - k, rng);
            for &i in &committed {
                context[c + i] = actions[i];
            }
            records.push(StepRecord {
                block: b,
                committed,
                confidences,
                nfe: counter.nfe,
                cache_len: cache.len(),
            });
        }
        if config.use_cache {
            let mask = AttnMask::full(l, cache.len() + l);
            let out = counter.forward(params, &actions[block.clone()], &positions, &mask, CacheMode::Append(&mut cache))?;
            carried = out.row(l - 1).to_vec();
        }
    }
    finish(actions, records, counter, start)
}

/// All action tokens start masked and are refined jointly in `steps` passes
/// under a bidirectional mask; nothing is cached.
pub fn decode_full_diffusion<R: Rng + ?Sized>(
    params: &Params,
    prefix: &[TokenId],
    config: &DecodeConfig,
    rng: &mut R,
) -> Result<(Vec<TokenId>, DecodeTrace)> {
    if config.kind != DecoderKind::FullDiffusion {
        return Err(Error::Config("expected a full-diffusion config".into()));
    }
    config.validate()?;
    check_prefix(prefix)?;
    let start = Instant::now();
    let c = prefix.len();
    let n = config.action_len();
    let layout = BlockLayout::new(c, 1, n, false, false)?;
    let mask = full_bidirectional_mask(&layout)?;
    let positions: Vec<usize> = (0..c + n).collect();
    let mut seq: Vec<TokenId> = prefix.to_vec();
    seq.extend(std::iter::repeat_n(Vocab::MASK, n));
    let mut actions = vec![Vocab::MASK; n];
    let mut records = Vec::new();
    let mut counter = Counter { nfe: 0, token_passes: 0 };
    for k in 0..config.steps {
        let out = counter.forward(params, &seq, &positions, &mask, CacheMode::None)?;
        let shift = usize::from(config.token_shift);
        let rows: Vec<&[f64]> = (0..n).map(|j| out.row(c + j - shift)).collect();
        let (committed, confidences) = refine(&rows, 0, &mut actions, &config.spec, config.commit, config.steps - k, rng);
        for &i in &committed {
            seq[c + i] = actions[i];
        }
        records.push(StepRecord {
            block: 0,
            committed,
            confidences,
            nfe: counter.nfe,
            cache_len: 0,
        });
    }
    finish(actions, records, counter, start)
}

/// Token-by-token decode under a causal mask. With the cache, a prefill pass
/// is followed by one single-token pass per action token.
pub fn decode_autoregressive<R: Rng + ?Sized>(
    params: &Params,
    prefix: &[TokenId],
    config: &DecodeConfig,
    rng: &mut R,
) -> Result<(Vec<TokenId>, DecodeTrace)> {
    if config.kind != DecoderKind::Autoregressive {
        return Err(Error::Config("expected an autoregressive config".into()));
    }
    config.validate()?;
    check_prefix(prefix)?;
    let start = Instant::now();
    let c = prefix.len();
    let n = config.action_len();
    let mut seq: Vec<TokenId> = prefix.to_vec();
    let mut actions = Vec::with_capacity(n);
    let mut records = Vec::new();
    let mut counter = Counter { nfe: 0, token_passes: 0 };
    let mut cache = KvCache::new(&params.config);
    let mut next: Vec<f64> = if config.use_cache {
        let positions: Vec<usize> = (0..c).collect();
        let out = counter.forward(params, prefix, &positions, &ar_causal_mask(c), CacheMode::Append(&mut cache))?;
        out.row(c - 1).to_vec()
    } else {
        Vec::new()
    };
    for j in 0..n {
        if !config.use_cache {
            let positions: Vec<usize> = (0..seq.len()).collect();
            let out = counter.forward(params, &seq, &positions, &ar_causal_mask(seq.len()), CacheMode::None)?;
            next = out.row(seq.len() - 1).to_vec();
        }
        let (tok, conf) = choose(&next, candidate_range(&config.spec, j), config.commit, rng);
        actions.push(tok);
        seq.push(tok);
        if config.use_cache {
            let mask = AttnMask::full(1, cache.len() + 1);
            let out = counter.forward(params, &[tok], &[c + j], &mask, CacheMode::Append(&mut cache))?;
            next = out.row(0).to_vec();
        }
        records.push(StepRecord {
            block: 0,
            committed: vec![j],
            confidences: vec![conf],
            nfe: counter.nfe,
            cache_len: cache.len(),
        });
    }
    finish(actions, records, counter, start)
}

/// Dispatches on `config.kind` with an RNG seeded from `config.seed`.
pub fn decode(params: &Params, prefix: &[TokenId], config: &DecodeConfig) -> Result<(Vec<TokenId>, DecodeTrace)> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    match config.kind {
        DecoderKind::BlockDiffusion => decode_block_diffusion(params, prefix, config, &mut rng),
        DecoderKind::FullDiffusion => decode_full_diffusion(params, prefix, config, &mut rng),
        DecoderKind::Autoregressive => decode_autoregressive(params, prefix, config, &mut rng),
    }
}
