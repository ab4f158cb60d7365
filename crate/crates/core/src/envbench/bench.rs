//! Wall-clock and NFE comparison of decoders on identical prefixes.

use std::fmt::Write as _;
use std::time::Instant;

use crate::codec::TokenId;
use crate::error::{Error, Result};
use crate::net::Params;
use crate::sampler::{decode, DecodeConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub name: String,
    pub nfe: usize,
    pub token_passes: usize,
    /// Median wall time per chunk, milliseconds.
    pub median_ms: f64,
    pub tokens_per_s: f64,
    /// Median time of the first row divided by this row's.
    pub speedup: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub trials: usize,
    pub prefix_len: usize,
    pub rows: Vec<BenchRow>,
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Times every decoder on each trial's prefix, interleaving decoders within a
/// trial so slow drift affects all of them alike. The first decoder is the
/// baseline for speedups.
pub fn bench_throughput(
    params: &Params,
    prefixes: &[Vec<TokenId>],
    decoders: &[(String, DecodeConfig)],
    trials: usize,
    warmup: usize,
) -> Result<BenchReport> {
    if prefixes.is_empty() || decoders.is_empty() || trials == 0 {
        return Err(Error::Config("benchmark needs prefixes, decoders, and trials".into()));
    }
    let prefix_len = prefixes[0].len();
    if prefixes.iter().any(|p| p.len() != prefix_len) {
        return Err(Error::Config("benchmark prefixes must share one length".into()));
    }
    let mut times = vec![Vec::with_capacity(trials); decoders.len()];
    let mut nfe = vec![0; decoders.len()];
    let mut passes = vec![0; decoders.len()];
    for trial in 0..warmup + trials {
        let prefix = &prefixes[trial % prefixes.len()];
        for (k, (name, cfg)) in decoders.iter().enumerate() {
            let start = Instant::now();
            let (_, trace) = decode(params, prefix, cfg)?;
            let elapsed = start.elapsed().as_secs_f64();
            if trace.nfe != cfg.nfe() || trace.token_passes != cfg.token_passes(prefix_len) {
                return Err(Error::Config(format!(
                    "{name}: trace counted {} passes / {} token-passes, closed form gives {} / {}",
                    trace.nfe,
                    trace.token_passes,
                    cfg.nfe(),
                    cfg.token_passes(prefix_len)
                )));
            }
            nfe[k] = trace.nfe;
            passes[k] = trace.token_passes;
            if trial >= warmup {
                times[k].push(elapsed);
            }
        }
    }
    let medians: Vec<f64> = times.iter_mut().map(|t| median(t)).collect();
    let rows = decoders
        .iter()
        .enumerate()
        .map(|(k, (name, cfg))| BenchRow {
            name: name.clone(),
            nfe: nfe[k],
            token_passes: passes[k],
            median_ms: medians[k] * 1e3,
            tokens_per_s: cfg.action_len() as f64 / medians[k],
            speedup: medians[0] / medians[k],
        })
        .collect();
    Ok(BenchReport {
        trials,
        prefix_len,
        rows,
    })
}

impl BenchReport {
    pub fn row(&self, name: &str) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("decoder,nfe,token_passes,median_ms,tokens_per_s,speedup\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{:.6},{:.3},{:.4}",
                r.name, r.nfe, r.token_passes, r.median_ms, r.tokens_per_s, r.speedup
            );
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{} trials, prefix length {}\n{:<24} {:>5} {:>12} {:>11} {:>12} {:>8}\n",
            self.trials, self.prefix_len, "decoder", "NFE", "token-passes", "median ms", "tokens/s", "speedup"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<24} {:>5} {:>12} {:>11.3} {:>12.1} {:>7.2}x",
                r.name, r.nfe, r.token_passes, r.median_ms, r.tokens_per_s, r.speedup
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::Vocab;
    use crate::net::{init_params, ModelConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn report_carries_closed_form_counts() {
        let cfg = ModelConfig {
            d_model: 16,
            n_heads: 2,
            n_layers: 1,
            d_ff: 32,
            ..ModelConfig::default_for_vocab(Vocab::new(4).size())
        };
        let params = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut prefix = vec![Vocab::BOS];
        prefix.extend(std::iter::repeat_n(Vocab::PREFIX_BASE, 15));
        let decoders = vec![
            ("full".to_string(), DecodeConfig::full(14, 12)),
            ("block".to_string(), DecodeConfig::block(2, 7, 2)),
            ("ar".to_string(), DecodeConfig::autoregressive(14)),
        ];
        let report = bench_throughput(&params, &[prefix], &decoders, 3, 1).unwrap();
        assert_eq!(report.row("full").unwrap().token_passes, 360);
        assert_eq!(report.row("block").unwrap().token_passes, 58);
        assert_eq!(report.row("block").unwrap().nfe, 7);
        assert_eq!(report.row("ar").unwrap().nfe, 15);
        assert_eq!(report.rows[0].speedup, 1.0);
        assert_eq!(report.to_csv().lines().count(), 4);
    }
}
