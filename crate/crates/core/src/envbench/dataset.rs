//! Expert demonstrations and their on-disk form: `#`-prefixed `key=value`
//! header lines followed by CSV rows of prefix ids and action values.

use std::io::{BufRead, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{EnvConfig, PointMassEnv, ACTION_DIM};
use crate::codec::{encode_chunk, ActionChunk, BinTable, Prefix, TokenId, Vocab};
use crate::error::{Error, Result};
use crate::kv::KeyValues;
use crate::trainer::TokenizedSample;

const FORMAT: &str = "blockdiff-dataset-v1";

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub episode: usize,
    pub step: usize,
    pub prefix: Prefix,
    pub chunk: ActionChunk,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub env: EnvConfig,
    pub seed: u64,
    pub episodes: usize,
    pub samples: Vec<Sample>,
}

/// Rolls out the expert from `episodes` sampled starts and records the
/// observation and expert chunk at every step.
pub fn gen_dataset(env: &EnvConfig, episodes: usize, seed: u64) -> Result<Dataset> {
    if episodes == 0 {
        return Err(Error::Config("need at least one episode".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::new();
    for episode in 0..episodes {
        let mut sim = PointMassEnv::sample(env.clone(), &mut rng);
        while !sim.done() {
            samples.push(Sample {
                episode,
                step: sim.t,
                prefix: sim.observe(),
                chunk: sim.expert_chunk(),
            });
            let a = sim.expert_action();
            sim.step(&a)?;
        }
        if !sim.success() {
            return Err(Error::ExpertFailed { episode });
        }
    }
    Ok(Dataset {
        env: env.clone(),
        seed,
        episodes,
        samples,
    })
}

pub fn tokenize_dataset(data: &Dataset, bins: &BinTable, vocab: &Vocab) -> Result<Vec<TokenizedSample>> {
    data.samples
        .iter()
        .map(|s| {
            Ok(TokenizedSample {
                prefix: s.prefix.clone(),
                actions: encode_chunk(&s.chunk, bins, vocab)?,
            })
        })
        .collect()
}

impl Dataset {
    pub fn chunks(&self) -> Vec<ActionChunk> {
        self.samples.iter().map(|s| s.chunk.clone()).collect()
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "# format={FORMAT}")?;
        writeln!(out, "# seed={}", self.seed)?;
        writeln!(out, "# episodes={}", self.episodes)?;
        writeln!(out, "# samples={}", self.samples.len())?;
        for line in self.env.to_text().lines() {
            writeln!(out, "# {line}")?;
        }
        let mut w = csv::Writer::from_writer(out);
        let n = self.env.action_len();
        let mut header = vec!["episode".to_string(), "step".into(), "prefix".into(), "visual".into(), "proprio".into()];
        header.extend((0..n).map(|i| format!("a{}_{}", i / ACTION_DIM, i % ACTION_DIM)));
        w.write_record(&header)?;
        for s in &self.samples {
            let ids: Vec<String> = s.prefix.tokens().iter().map(|t| t.to_string()).collect();
            let mut row = vec![
                s.episode.to_string(),
                s.step.to_string(),
                ids.join(" "),
                s.prefix.visual_len().to_string(),
                s.prefix.proprio_len().to_string(),
            ];
            row.extend(s.chunk.values().iter().map(|v| format!("{v:?}")));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read<R: BufRead>(mut input: R) -> Result<Self> {
        let mut header = String::new();
        let mut body = String::new();
        let mut line = String::new();
        let mut line_no = 0;
        while input.read_line(&mut line)? > 0 {
            line_no += 1;
            match line.strip_prefix('#') {
                Some(rest) => header.push_str(rest),
                None => {
                    body.push_str(&line);
                    input.read_to_string(&mut body)?;
                    break;
                }
            }
            line.clear();
        }
        let mut kv = KeyValues::parse(&header)?;
        let format: String = kv.take("format")?;
        if format != FORMAT {
            return Err(Error::Parse {
                line: 1,
                reason: format!("unknown dataset format {format}"),
            });
        }
        let seed = kv.take("seed")?;
        let episodes = kv.take("episodes")?;
        let count: usize = kv.take("samples")?;
        let env = EnvConfig::from_kv(&mut kv)?;
        kv.finish()?;

        let n = env.action_len();
        let mut reader = csv::Reader::from_reader(body.as_bytes());
        let mut samples = Vec::with_capacity(count);
        for (i, rec) in reader.records().enumerate() {
            let rec = rec?;
            let at = line_no + 1 + i;
            let bad = |reason: String| Error::Parse { line: at, reason };
            if rec.len() != 5 + n {
                return Err(bad(format!("expected {} fields, got {}", 5 + n, rec.len())));
            }
            let num = |k: usize| rec[k].parse::<usize>().map_err(|e| bad(format!("field {k}: {e}")));
            let ids = rec[2]
                .split_whitespace()
                .map(|s| s.parse::<TokenId>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| bad(format!("prefix ids: {e}")))?;
            let values = (5..5 + n)
                .map(|k| rec[k].parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| bad(format!("action value: {e}")))?;
            samples.push(Sample {
                episode: num(0)?,
                step: num(1)?,
                prefix: Prefix::new(ids, num(3)?, num(4)?)?,
                chunk: ActionChunk::new(env.chunk, ACTION_DIM, values)?,
            });
        }
        if samples.len() != count {
            return Err(Error::Parse {
                line: line_no,
                reason: format!("header promises {count} samples, found {}", samples.len()),
            });
        }
        Ok(Self {
            env,
            seed,
            episodes,
            samples,
        })
    }
}
