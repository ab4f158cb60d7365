//! Masked-denoising training: per-block corruption, mask and target
//! construction for each forcing mode, the weighted block loss, and Adam.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::{assemble_sequence, LayoutVariant, Prefix, TokenId, TokenSeq};
use crate::corruption::{corrupt_with_seed, sample_timesteps, CorruptionRecord};
use crate::error::{Error, Result};
use crate::kv::KeyValues;
use crate::masks::{
    ar_causal_mask, diffusion_forcing_mask, full_bidirectional_mask, loss_targets, position_ids,
    teacher_forcing_mask, AttnMask, BlockLayout, LossTargets, PositionIds,
};
use crate::net::checkpoint::{config_from_meta, config_meta, params_from, params_tensors, Checkpoint, MANIFEST};
use crate::net::{self, init_params, CacheMode, ModelConfig, Params, TrainExample};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Forcing {
    /// History comes from a clean copy of the actions appended after EOS.
    Teacher,
    /// History is the corrupted earlier blocks themselves.
    Diffusion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    BlockDiffusion,
    /// Single timestep and a bidirectional mask over the whole action region.
    FullDiffusion,
    /// Causal next-token prediction over clean actions.
    Autoregressive,
}

impl FromStr for Forcing {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "teacher" => Ok(Self::Teacher),
            "diffusion" => Ok(Self::Diffusion),
            _ => Err(format!("unknown forcing mode {s:?}")),
        }
    }
}

impl fmt::Display for Forcing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Teacher => "teacher",
            Self::Diffusion => "diffusion",
        })
    }
}

impl FromStr for Objective {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "block_diffusion" => Ok(Self::BlockDiffusion),
            "full_diffusion" => Ok(Self::FullDiffusion),
            "autoregressive" => Ok(Self::Autoregressive),
            _ => Err(format!("unknown objective {s:?}")),
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::BlockDiffusion => "block_diffusion",
            Self::FullDiffusion => "full_diffusion",
            Self::Autoregressive => "autoregressive",
        })
    }
}

/// Per-block normalization of the masked cross-entropy sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossNorm {
    /// Divide by the number of masked tokens in the block.
    Masked,
    /// Divide by the block length, so the `1/t_b` factor is balanced by the
    /// expected masked count `t_b * L'`.
    Block,
}

impl FromStr for LossNorm {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "masked" => Ok(Self::Masked),
            "block" => Ok(Self::Block),
            _ => Err(format!("unknown loss normalization {s:?}")),
        }
    }
}

impl fmt::Display for LossNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Masked => "masked",
            Self::Block => "block",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub forcing: Forcing,
    pub objective: Objective,
    pub num_blocks: usize,
    pub block_len: usize,
    pub horizon: usize,
    pub action_dim: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: u64,
    pub checkpoint_every: u64,
    pub token_shift: bool,
    pub loss_norm: LossNorm,
    pub seed: u64,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub rope_base: f64,
    pub init_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            forcing: Forcing::Diffusion,
            objective: Objective::BlockDiffusion,
            num_blocks: 2,
            block_len: 7,
            horizon: 2,
            action_dim: 7,
            batch_size: 16,
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 3000,
            checkpoint_every: 1000,
            token_shift: false,
            loss_norm: LossNorm::Block,
            seed: 0,
            d_model: 128,
            n_heads: 4,
            n_layers: 4,
            d_ff: 512,
            rope_base: 10_000.0,
            init_scale: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_blocks * self.block_len != self.horizon * self.action_dim {
            return Err(Error::Config(format!(
                "blocks {} x length {} != horizon {} x dims {}",
                self.num_blocks, self.block_len, self.horizon, self.action_dim
            )));
        }
        if self.num_blocks == 0 || self.block_len == 0 || self.batch_size == 0 {
            return Err(Error::Config("blocks, block length and batch size must be >= 1".into()));
        }
        if self.objective == Objective::Autoregressive && !self.token_shift {
            return Err(Error::Config("autoregressive training predicts the next token; set token_shift = true".into()));
        }
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("invalid optimizer settings".into()));
        }
        Ok(())
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            d_ff: self.d_ff,
            rope_base: self.rope_base,
            init_scale: self.init_scale,
        }
    }

    pub fn action_len(&self) -> usize {
        self.horizon * self.action_dim
    }

    /// Blocks as seen by the objective: full diffusion treats the action
    /// region as a single block.
    pub fn effective_blocks(&self) -> (usize, usize) {
        match self.objective {
            Objective::BlockDiffusion => (self.num_blocks, self.block_len),
            _ => (1, self.action_len()),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let cfg = Self {
            forcing: kv.take("forcing")?,
            objective: kv.take("objective")?,
            num_blocks: kv.take("num_blocks")?,
            block_len: kv.take("block_len")?,
            horizon: kv.take("horizon")?,
            action_dim: kv.take("action_dim")?,
            batch_size: kv.take("batch_size")?,
            lr: kv.take("lr")?,
            beta1: kv.take("beta1")?,
            beta2: kv.take("beta2")?,
            eps: kv.take("eps")?,
            steps: kv.take("steps")?,
            checkpoint_every: kv.take("checkpoint_every")?,
            token_shift: kv.take("token_shift")?,
            loss_norm: kv.take("loss_norm")?,
            seed: kv.take("seed")?,
            d_model: kv.take("d_model")?,
            n_heads: kv.take("n_heads")?,
            n_layers: kv.take("n_layers")?,
            d_ff: kv.take("d_ff")?,
            rope_base: kv.take("rope_base")?,
            init_scale: kv.take("init_scale")?,
        };
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        format!(
            "forcing = {}\nobjective = {}\nnum_blocks = {}\nblock_len = {}\nhorizon = {}\naction_dim = {}\n\
             batch_size = {}\nlr = {:?}\nbeta1 = {:?}\nbeta2 = {:?}\neps = {:?}\nsteps = {}\n\
             checkpoint_every = {}\ntoken_shift = {}\nloss_norm = {}\nseed = {}\nd_model = {}\nn_heads = {}\n\
             n_layers = {}\nd_ff = {}\nrope_base = {:?}\ninit_scale = {:?}\n",
            self.forcing,
            self.objective,
            self.num_blocks,
            self.block_len,
            self.horizon,
            self.action_dim,
            self.batch_size,
            self.lr,
            self.beta1,
            self.beta2,
            self.eps,
            self.steps,
            self.checkpoint_every,
            self.token_shift,
            self.loss_norm,
            self.seed,
            self.d_model,
            self.n_heads,
            self.n_layers,
            self.d_ff,
            self.rope_base,
            self.init_scale,
        )
    }
}

/// Prefix plus encoded action tokens for one training sample.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedSample {
    pub prefix: Prefix,
    pub actions: Vec<TokenId>,
}

/// A model input together with the corruption that produced it.
#[derive(Debug, Clone)]
pub struct BuiltExample {
    pub example: TrainExample,
    pub clean: TokenSeq,
    pub layout: BlockLayout,
    pub record: CorruptionRecord,
}

/// Per-row weights `(1/B) * (1/t_b) / n_b`, where `b` is the block holding
/// the token a row predicts and `n_b` is either its masked-token count or its
/// length, depending on `norm`.
fn block_weights(targets: &LossTargets, layout: &BlockLayout, record: &CorruptionRecord, norm: LossNorm) -> Vec<f64> {
    let nb = layout.num_blocks() as f64;
    targets
        .targets
        .iter()
        .enumerate()
        .map(|(row, t)| {
            if t.is_none() {
                return 0.0;
            }
            let b = layout
                .block_of(targets.source_index(row))
                .expect("targets lie in the action region");
            let count = match norm {
                LossNorm::Masked => record.masked_in_block(layout, b) as f64,
                LossNorm::Block => layout.block_len() as f64,
            };
            record.weights[b] / (count * nb)
        })
        .collect()
}

/// Builds the input, mask, and weighted targets for one sample with the
/// given timesteps and corruption seed.
pub fn make_training_example_with(
    sample: &TokenizedSample,
    config: &TrainConfig,
    timesteps: &[f64],
    seed: u64,
) -> Result<BuiltExample> {
    if sample.actions.len() != config.action_len() {
        return Err(Error::Layout(format!(
            "sample has {} action tokens, config expects {}",
            sample.actions.len(),
            config.action_len()
        )));
    }
    let (blocks, block_len) = config.effective_blocks();
    if config.objective == Objective::Autoregressive {
        let clean = assemble_sequence(&sample.prefix, &sample.actions, LayoutVariant::Plain)?;
        let layout = BlockLayout::from_regions(&clean.regions, block_len)?;
        let record = CorruptionRecord {
            timesteps: vec![1.0],
            masked: vec![true; layout.action_len()],
            weights: vec![1.0],
            seed,
        };
        let targets = loss_targets(&clean, &record, true)?;
        let active = targets.active() as f64;
        let weights = targets
            .targets
            .iter()
            .map(|t| if t.is_some() { 1.0 / active } else { 0.0 })
            .collect();
        let example = TrainExample {
            ids: clean.tokens.clone(),
            positions: PositionIds::contiguous(0..clean.len()),
            mask: ar_causal_mask(clean.len()),
            targets,
            weights,
        };
        return Ok(BuiltExample {
            example,
            clean,
            layout,
            record,
        });
    }

    let teacher = config.objective == Objective::BlockDiffusion && config.forcing == Forcing::Teacher;
    let variant = if teacher {
        LayoutVariant::TeacherForcing
    } else {
        LayoutVariant::Plain
    };
    let clean = assemble_sequence(&sample.prefix, &sample.actions, variant)?;
    let layout = BlockLayout::from_regions(&clean.regions, block_len)?;
    debug_assert_eq!(layout.num_blocks(), blocks);
    let (corrupted, record) = corrupt_with_seed(&clean, &layout, timesteps, seed)?;
    let mask: AttnMask = match (config.objective, teacher) {
        (Objective::FullDiffusion, _) => full_bidirectional_mask(&layout)?,
        (_, true) => teacher_forcing_mask(&layout)?,
        (_, false) => diffusion_forcing_mask(&layout)?,
    };
    let targets = loss_targets(&clean, &record, config.token_shift)?;
    let weights = block_weights(&targets, &layout, &record, config.loss_norm);
    let example = TrainExample {
        ids: corrupted.tokens,
        positions: position_ids(&layout),
        mask,
        targets,
        weights,
    };
    Ok(BuiltExample {
        example,
        clean,
        layout,
        record,
    })
}

/// Samples per-block timesteps and a corruption seed from `rng`, then builds
/// the example.
pub fn make_training_example<R: Rng + ?Sized>(
    sample: &TokenizedSample,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<BuiltExample> {
    let (blocks, _) = config.effective_blocks();
    let t = sample_timesteps(blocks, rng);
    let seed = rng.random::<u64>();
    make_training_example_with(sample, config, &t, seed)
}

/// Reference masked-diffusion loss over the whole action region with one
/// timestep: `(1/t) * sum of masked CE / n`, with `n` the masked count or the
/// action length per `norm`, computed straight from the logits of a
/// bidirectional forward pass.
pub fn full_sequence_diffusion_loss(
    params: &Params,
    clean: &TokenSeq,
    corrupted: &[TokenId],
    masked: &[bool],
    t: f64,
    norm: LossNorm,
) -> Result<f64> {
    let layout = BlockLayout::new(clean.regions.prefix().len(), 1, clean.regions.action.len(), true, false)?;
    let mask = full_bidirectional_mask(&layout)?;
    let positions: Vec<usize> = (0..corrupted.len()).collect();
    let logits = net::forward(params, corrupted, &positions, &mask, CacheMode::None)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (j, i) in clean.regions.action.clone().enumerate() {
        if !masked[j] {
            continue;
        }
        let row = logits.row(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
        let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        sum += lse - row[clean.tokens[i] as usize];
        count += 1;
    }
    if count == 0 {
        return Ok(0.0);
    }
    let n = match norm {
        LossNorm::Masked => count,
        LossNorm::Block => masked.len(),
    };
    Ok(sum / n as f64 / t)
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub examples: Vec<TrainExample>,
    pub timesteps: Vec<Vec<f64>>,
    pub mask_fraction: f64,
}

/// Parameters, Adam moments, step counter, and RNG position.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: Params,
    pub m: Params,
    pub v: Params,
    pub step: u64,
    pub rng: ChaCha8Rng,
    /// Exponential moving average of the training loss (0 before step 1).
    pub loss_ema: f64,
}

impl TrainState {
    pub fn new(config: &TrainConfig, vocab_size: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = init_params(&config.model_config(vocab_size), &mut rng)?;
        Ok(Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            params,
            step: 0,
            rng,
            loss_ema: 0.0,
        })
    }
}

/// Draws a batch of indices and fresh corruptions from the state's RNG.
pub fn sample_batch(state: &mut TrainState, data: &[TokenizedSample], config: &TrainConfig) -> Result<Batch> {
    if data.is_empty() {
        return Err(Error::EmptySamples);
    }
    let mut examples = Vec::with_capacity(config.batch_size);
    let mut timesteps = Vec::with_capacity(config.batch_size);
    let mut masked = 0usize;
    let mut total = 0usize;
    for _ in 0..config.batch_size {
        let idx = state.rng.random_range(0..data.len());
        let built = make_training_example(&data[idx], config, &mut state.rng)?;
        masked += built.record.masked.iter().filter(|m| **m).count();
        total += built.record.masked.len();
        timesteps.push(built.record.timesteps.clone());
        examples.push(built.example);
    }
    Ok(Batch {
        examples,
        timesteps,
        mask_fraction: masked as f64 / total as f64,
    })
}

/// One Adam update; returns the loss measured before the update.
pub fn train_step(state: &mut TrainState, batch: &Batch, config: &TrainConfig) -> Result<f64> {
    if batch.examples.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    let (loss, grads) = net::loss_and_grad(&state.params, &batch.examples)?;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: state.step + 1,
            timesteps: batch.timesteps.concat(),
            mask_fraction: batch.mask_fraction,
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);
    let params = state.params.tensors_mut();
    let ms = state.m.tensors_mut();
    let vs = state.v.tensors_mut();
    let gs = grads.tensors();
    for (((p, m), v), g) in params.into_iter().zip(ms).zip(vs).zip(gs) {
        for (((pi, mi), vi), gi) in p.1.iter_mut().zip(m.1.iter_mut()).zip(v.1.iter_mut()).zip(g.1) {
            *mi = config.beta1 * *mi + (1.0 - config.beta1) * gi;
            *vi = config.beta2 * *vi + (1.0 - config.beta2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *pi -= config.lr * mhat / (vhat.sqrt() + config.eps);
        }
    }
    state.loss_ema = if state.step == 1 {
        loss
    } else {
        0.98 * state.loss_ema + 0.02 * loss
    };
    Ok(loss)
}

fn ckpt_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Option<[u8; 32]> {
    if s.len() != 64 {
        return None;
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).ok()?;
    }
    Some(out)
}

/// Writes parameters, optimizer moments, and RNG position to `dir`.
pub fn save_checkpoint(state: &TrainState, dir: &Path) -> Result<()> {
    let mut meta = config_meta(&state.params.config);
    meta.extend([
        ("step".to_string(), state.step.to_string()),
        ("rng_seed".to_string(), hex(&state.rng.get_seed())),
        ("rng_stream".to_string(), state.rng.get_stream().to_string()),
        ("rng_word_pos".to_string(), state.rng.get_word_pos().to_string()),
        ("loss_ema".to_string(), format!("{:?}", state.loss_ema)),
    ]);
    let mut tensors = params_tensors(&state.params, "param.");
    tensors.extend(params_tensors(&state.m, "adam_m."));
    tensors.extend(params_tensors(&state.v, "adam_v."));
    Checkpoint { meta, tensors }.save(dir)
}

pub fn load_checkpoint(dir: &Path) -> Result<TrainState> {
    let ckpt = Checkpoint::load(dir)?;
    let path = dir.join(MANIFEST);
    let config = config_from_meta(&ckpt, &path)?;
    let get = |key: &str| ckpt.meta_value(key).ok_or_else(|| ckpt_err(&path, format!("missing {key}")));
    let step: u64 = get("step")?.parse().map_err(|_| ckpt_err(&path, "bad step"))?;
    let seed = unhex(get("rng_seed")?).ok_or_else(|| ckpt_err(&path, "bad rng_seed"))?;
    let stream: u64 = get("rng_stream")?.parse().map_err(|_| ckpt_err(&path, "bad rng_stream"))?;
    let word_pos: u128 = get("rng_word_pos")?.parse().map_err(|_| ckpt_err(&path, "bad rng_word_pos"))?;
    let loss_ema: f64 = get("loss_ema")?.parse().map_err(|_| ckpt_err(&path, "bad loss_ema"))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    Ok(TrainState {
        params: params_from(&ckpt, &config, "param.", &path)?,
        m: params_from(&ckpt, &config, "adam_m.", &path)?,
        v: params_from(&ckpt, &config, "adam_v.", &path)?,
        step,
        rng,
        loss_ema,
    })
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub loss: f64,
    pub mask_fraction_mean: f64,
    pub wall_ms: f64,
}

/// Runs `config.steps - state.step` further steps, calling `on_step` after
/// each one and checkpointing into `ckpt_dir` at the configured interval.
pub fn train_loop(
    state: &mut TrainState,
    data: &[TokenizedSample],
    config: &TrainConfig,
    ckpt_dir: Option<&Path>,
    mut on_step: impl FnMut(&LogRow, &TrainState) -> Result<()>,
) -> Result<()> {
    let start = Instant::now();
    while state.step < config.steps {
        let batch = sample_batch(state, data, config)?;
        let loss = train_step(state, &batch, config)?;
        let row = LogRow {
            step: state.step,
            loss,
            mask_fraction_mean: batch.mask_fraction,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        on_step(&row, state)?;
        if let Some(dir) = ckpt_dir {
            if config.checkpoint_every > 0 && state.step % config.checkpoint_every == 0 {
                save_checkpoint(state, dir)?;
            }
        }
    }
    Ok(())
}
