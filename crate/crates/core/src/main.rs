use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use blockdiff::codec::{decode_tokens, fit_bins, BinTable};
use blockdiff::envbench::{
    action_spec, bench_throughput, evaluate_policy, gen_dataset, tokenize_dataset, vocab, Dataset, EnvConfig,
    PointMassEnv,
};
use blockdiff::masks::{
    ar_causal_mask, diffusion_forcing_mask, full_bidirectional_mask, teacher_forcing_mask, BlockLayout,
};
use blockdiff::net::checkpoint::load_params;
use blockdiff::net::Params;
use blockdiff::sampler::{decode, CommitRule, DecodeConfig, DecoderKind};
use blockdiff::trainer::{load_checkpoint, save_checkpoint, train_loop, TrainConfig, TrainState};

const CONFIG_FILE: &str = "train_config.txt";
const BINS_FILE: &str = "bins.txt";
const LOG_FILE: &str = "train_log.csv";

#[derive(Parser)]
#[command(name = "blockdiff", about = "Block-diffusion action policies on a toy reaching task")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Roll out the expert and write a dataset file.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        episodes: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Train a policy; the run directory receives the checkpoint, bins, and log.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from the checkpoint already in `out`.
        #[arg(long)]
        resume: bool,
    },
    /// Closed-loop success rate of a trained run.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        #[arg(long, default_value_t = 999)]
        seed: u64,
        #[command(flatten)]
        decoder: DecoderArgs,
    },
    /// Decode one chunk for a sampled environment state.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        decoder: DecoderArgs,
    },
    /// Compare decoder throughput on one trained model.
    Bench {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 3)]
        warmup: usize,
        /// Full-sequence diffusion steps for the baseline.
        #[arg(long, default_value_t = 12)]
        full_steps: usize,
        /// Refinement passes per block for the block decoder.
        #[arg(long, default_value_t = 2)]
        block_steps: usize,
        /// Also write the report as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Print an attention mask as a 0/1 grid.
    DumpMasks {
        #[arg(long, value_enum)]
        kind: MaskKind,
        #[arg(long, default_value_t = 3)]
        prefix_len: usize,
        #[arg(long, default_value_t = 2)]
        blocks: usize,
        #[arg(long, default_value_t = 2)]
        block_len: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum MaskKind {
    Diffusion,
    Teacher,
    Full,
    Ar,
}

#[derive(clap::Args)]
struct DecoderArgs {
    #[arg(long, default_value = "block")]
    decoder: DecoderKind,
    /// Passes per block (block) or in total (full).
    #[arg(long, default_value_t = 2)]
    steps: usize,
    /// Block length; defaults to the training block length.
    #[arg(long)]
    block_size: Option<usize>,
    /// Sample with this temperature instead of committing the argmax.
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    no_cache: bool,
}

struct Run {
    config: TrainConfig,
    bins: BinTable,
    params: Params,
}

fn load_run(dir: &Path) -> Result<Run> {
    let text = fs::read_to_string(dir.join(CONFIG_FILE)).with_context(|| format!("reading {}", dir.join(CONFIG_FILE).display()))?;
    let config = TrainConfig::parse(&text)?;
    let bins = BinTable::from_text(&fs::read_to_string(dir.join(BINS_FILE))?)?;
    let params = load_params(dir)?;
    Ok(Run { config, bins, params })
}

fn decode_config(args: &DecoderArgs, run: &TrainConfig, seed: u64) -> Result<DecodeConfig> {
    let n = run.action_len();
    let mut cfg = match args.decoder {
        DecoderKind::BlockDiffusion => {
            let l = args.block_size.unwrap_or(run.block_len);
            if l == 0 || n % l != 0 {
                bail!("block size {l} does not divide the action length {n}");
            }
            DecodeConfig::block(n / l, l, args.steps)
        }
        DecoderKind::FullDiffusion => DecodeConfig::full(n, args.steps),
        DecoderKind::Autoregressive => DecodeConfig::autoregressive(n),
    };
    cfg.spec = action_spec();
    cfg.seed = seed;
    cfg.use_cache = !args.no_cache;
    if args.decoder != DecoderKind::Autoregressive {
        cfg.token_shift = run.token_shift;
    }
    if let Some(temperature) = args.temperature {
        cfg.commit = CommitRule::Sampled { temperature };
    }
    Ok(cfg)
}

fn train(config_path: &Path, data_path: &Path, out: &Path, resume: bool) -> Result<()> {
    let text = fs::read_to_string(config_path).with_context(|| format!("reading {}", config_path.display()))?;
    let config = TrainConfig::parse(&text)?;
    let file = File::open(data_path).with_context(|| format!("opening {}", data_path.display()))?;
    let data = Dataset::read(BufReader::new(file))?;
    if data.env.action_len() != config.action_len() {
        bail!(
            "dataset chunks hold {} tokens, config expects {}",
            data.env.action_len(),
            config.action_len()
        );
    }
    let bins = fit_bins(&data.chunks(), &action_spec())?;
    let vocab = vocab();
    let samples = tokenize_dataset(&data, &bins, &vocab)?;
    fs::create_dir_all(out)?;
    fs::write(out.join(CONFIG_FILE), config.to_text())?;
    fs::write(out.join(BINS_FILE), bins.to_text())?;

    let mut state = if resume {
        load_checkpoint(out)?
    } else {
        TrainState::new(&config, vocab.size())?
    };
    let log_path = out.join(LOG_FILE);
    let appending = resume && log_path.exists();
    let file = fs::OpenOptions::new().create(true).append(appending).write(true).truncate(!appending).open(&log_path)?;
    let mut log = csv::Writer::from_writer(BufWriter::new(file));
    if !appending {
        log.write_record(["step", "loss", "mask_fraction_mean", "wall_ms"])?;
    }
    eprintln!(
        "training {} samples, {} parameters, steps {}..{}",
        samples.len(),
        state.params.num_params(),
        state.step,
        config.steps
    );
    train_loop(&mut state, &samples, &config, Some(out), |row, st| {
        log.write_record(&[
            row.step.to_string(),
            format!("{:?}", row.loss),
            format!("{:?}", row.mask_fraction_mean),
            format!("{:.3}", row.wall_ms),
        ])?;
        if row.step % 100 == 0 {
            eprintln!("step {:>6}  loss {:.4}  ema {:.4}  {:.1}s", row.step, row.loss, st.loss_ema, row.wall_ms / 1e3);
        }
        Ok(())
    })?;
    log.flush()?;
    save_checkpoint(&state, out)?;
    eprintln!("saved {}", out.display());
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenData { out, episodes, seed } => {
            let data = gen_dataset(&EnvConfig::default(), episodes, seed)?;
            data.write(BufWriter::new(File::create(&out)?))?;
            eprintln!("wrote {} samples from {episodes} episodes to {}", data.samples.len(), out.display());
        }
        Command::Train {
            config,
            data,
            out,
            resume,
        } => train(&config, &data, &out, resume)?,
        Command::Eval {
            ckpt,
            episodes,
            seed,
            decoder,
        } => {
            let run = load_run(&ckpt)?;
            let cfg = decode_config(&decoder, &run.config, seed)?;
            let report = evaluate_policy(&run.params, &run.bins, &vocab(), &cfg, &EnvConfig::default(), episodes, seed);
            println!(
                "success {}/{} ({:.1}%), policy failures {}, mean steps {:.1}",
                report.successes,
                report.episodes,
                100.0 * report.success_rate(),
                report.policy_failures,
                report.mean_steps
            );
        }
        Command::Sample { ckpt, seed, decoder } => {
            let run = load_run(&ckpt)?;
            let cfg = decode_config(&decoder, &run.config, seed)?;
            let env = PointMassEnv::sample(EnvConfig::default(), &mut ChaCha8Rng::seed_from_u64(seed));
            let (tokens, trace) = decode(&run.params, env.observe().tokens(), &cfg)?;
            let chunk = decode_tokens(&tokens, &run.bins, &vocab())?;
            println!("step,tx,ty,tz,rx,ry,rz,gripper");
            for h in 0..chunk.horizon() {
                let vals: Vec<String> = chunk.row(h).iter().map(|v| format!("{v:.6}")).collect();
                println!("{h},{}", vals.join(","));
            }
            let expert = env.expert_chunk();
            eprintln!("expert first step: {:?}", expert.row(0));
            eprintln!(
                "decoder {}  NFE {}  token-passes {}  {:.3} ms  {:.1} tokens/s",
                cfg.kind,
                trace.nfe,
                trace.token_passes,
                trace.wall.as_secs_f64() * 1e3,
                trace.tokens_per_second()
            );
        }
        Command::Bench {
            ckpt,
            trials,
            warmup,
            full_steps,
            block_steps,
            csv,
        } => {
            let run = load_run(&ckpt)?;
            let n = run.config.action_len();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let prefixes: Vec<_> = (0..8)
                .map(|_| PointMassEnv::sample(EnvConfig::default(), &mut rng).observe().tokens().to_vec())
                .collect();
            let mut decoders = vec![
                (format!("full S={full_steps}"), DecodeConfig::full(n, full_steps)),
                (
                    format!("block B={} s={block_steps}", run.config.num_blocks),
                    DecodeConfig::block(run.config.num_blocks, run.config.block_len, block_steps),
                ),
            ];
            if run.config.num_blocks == 1 || run.config.block_len == n {
                decoders[1].0 = format!("block B=1 s={block_steps}");
            }
            decoders.push(("autoregressive".into(), DecodeConfig::autoregressive(n)));
            for (_, d) in &mut decoders {
                d.spec = action_spec();
                if d.kind != DecoderKind::Autoregressive {
                    d.token_shift = run.config.token_shift;
                }
            }
            let report = bench_throughput(&run.params, &prefixes, &decoders, trials, warmup)?;
            print!("{}", report.to_table());
            if let Some(path) = csv {
                fs::write(path, report.to_csv())?;
            }
        }
        Command::DumpMasks {
            kind,
            prefix_len,
            blocks,
            block_len,
        } => {
            let mask = match kind {
                MaskKind::Diffusion => diffusion_forcing_mask(&BlockLayout::plain(prefix_len, blocks, block_len)?)?,
                MaskKind::Teacher => teacher_forcing_mask(&BlockLayout::teacher_forcing(prefix_len, blocks, block_len)?)?,
                MaskKind::Full => full_bidirectional_mask(&BlockLayout::plain(prefix_len, blocks, block_len)?)?,
                MaskKind::Ar => ar_causal_mask(prefix_len + blocks * block_len + 1),
            };
            print!("{}", mask.to_text());
        }
    }
    Ok(())
}
