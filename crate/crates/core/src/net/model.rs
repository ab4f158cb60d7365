use std::ops::Range;

use super::linalg::{acc_colsum, acc_xt_dy, add_bias, dy_wt, gemm, matmul, Matrix, View};
use super::{KvCache, ModelConfig, Params};
use crate::codec::TokenId;
use crate::error::{Error, Result};
use crate::masks::{AttnMask, LossTargets, PositionIds};

const NORM_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// How a forward pass interacts with a KV cache.
pub enum CacheMode<'a> {
    None,
    /// Attend over cached keys; leave the cache untouched.
    Read(&'a KvCache),
    /// Attend over cached keys, then append this call's keys and values.
    Append(&'a mut KvCache),
}

/// One sequence with everything needed for a loss evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub ids: Vec<TokenId>,
    pub positions: PositionIds,
    pub mask: AttnMask,
    pub targets: LossTargets,
    /// Per-position loss weight; only read where a target is present.
    pub weights: Vec<f64>,
}

struct Rope {
    cos: Vec<f64>,
    sin: Vec<f64>,
    half: usize,
}

impl Rope {
    fn new(config: &ModelConfig, positions: &[usize]) -> Self {
        let dh = config.head_dim();
        let half = dh / 2;
        let inv_freq: Vec<f64> = (0..half)
            .map(|i| config.rope_base.powf(-((2 * i) as f64) / dh as f64))
            .collect();
        let mut cos = Vec::with_capacity(positions.len() * half);
        let mut sin = Vec::with_capacity(positions.len() * half);
        for &p in positions {
            for f in &inv_freq {
                let angle = p as f64 * f;
                cos.push(angle.cos());
                sin.push(angle.sin());
            }
        }
        Self { cos, sin, half }
    }

    /// Rotates each consecutive pair within every head; `inverse` applies the
    /// transpose, which is the backward map.
    fn apply(&self, x: &mut [f64], d: usize, inverse: bool) {
        let dh = 2 * self.half;
        for (t, row) in x.chunks_exact_mut(d).enumerate() {
            let cos = &self.cos[t * self.half..(t + 1) * self.half];
            let sin = &self.sin[t * self.half..(t + 1) * self.half];
            for head in row.chunks_exact_mut(dh) {
                for i in 0..self.half {
                    let (a, b) = (head[2 * i], head[2 * i + 1]);
                    let (c, s) = (cos[i], if inverse { -sin[i] } else { sin[i] });
                    head[2 * i] = a * c - b * s;
                    head[2 * i + 1] = a * s + b * c;
                }
            }
        }
    }
}

fn rms_norm(x: &[f64], gain: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let d = gain.len();
    let mut y = vec![0.0; x.len()];
    let mut rinv = Vec::with_capacity(x.len() / d);
    for (xr, yr) in x.chunks_exact(d).zip(y.chunks_exact_mut(d)) {
        let ms = xr.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let r = 1.0 / (ms + NORM_EPS).sqrt();
        for ((yv, xv), g) in yr.iter_mut().zip(xr).zip(gain) {
            *yv = xv * r * g;
        }
        rinv.push(r);
    }
    (y, rinv)
}

/// Accumulates the gain gradient into `dgain` and adds the input gradient to `dx`.
fn rms_norm_backward(x: &[f64], rinv: &[f64], gain: &[f64], dy: &[f64], dgain: &mut [f64], dx: &mut [f64]) {
    let d = gain.len();
    for (t, ((xr, dyr), dxr)) in x
        .chunks_exact(d)
        .zip(dy.chunks_exact(d))
        .zip(dx.chunks_exact_mut(d))
        .enumerate()
    {
        let r = rinv[t];
        let mut s = 0.0;
        for j in 0..d {
            dgain[j] += dyr[j] * xr[j] * r;
            s += dyr[j] * gain[j] * xr[j];
        }
        let coef = r * r * r * s / d as f64;
        for j in 0..d {
            dxr[j] += r * gain[j] * dyr[j] - xr[j] * coef;
        }
    }
}

fn gelu(u: f64) -> f64 {
    let t = (GELU_C * (u + GELU_A * u * u * u)).tanh();
    0.5 * u * (1.0 + t)
}

fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + GELU_A * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * u * u)
}

/// Softmax over permitted entries of one score row; forbidden entries get
/// exactly zero probability.
fn masked_softmax(row: &mut [f64], allowed: &[bool]) {
    let max = row
        .iter()
        .zip(allowed)
        .filter(|(_, a)| **a)
        .fold(f64::NEG_INFINITY, |m, (v, _)| m.max(*v));
    if max == f64::NEG_INFINITY {
        row.fill(0.0);
        return;
    }
    let mut sum = 0.0;
    for (v, &a) in row.iter_mut().zip(allowed) {
        *v = if a { (*v - max).exp() } else { 0.0 };
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

struct LayerTape {
    x_in: Vec<f64>,
    rinv1: Vec<f64>,
    h1: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// Per segment, per head, `n x n` probabilities.
    probs: Vec<Vec<Vec<f64>>>,
    o: Vec<f64>,
    x_mid: Vec<f64>,
    rinv2: Vec<f64>,
    h2: Vec<f64>,
    u: Vec<f64>,
    act: Vec<f64>,
}

struct Tape {
    rope: Rope,
    layers: Vec<LayerTape>,
    x_final: Vec<f64>,
    rinvf: Vec<f64>,
    hf: Vec<f64>,
}

/// Keys of a segment: optional cached prefix followed by the segment's own rows.
struct Segment<'a> {
    rows: Range<usize>,
    mask: &'a AttnMask,
}

/// Multi-head attention for one segment. Writes the head outputs into `o`
/// and returns the probabilities per head when `keep` is set.
#[allow(clippy::too_many_arguments)]
fn attend(
    config: &ModelConfig,
    q: &[f64],
    keys: &[f64],
    values: &[f64],
    key_offset: usize,
    seg: &Segment,
    o: &mut [f64],
    keep: bool,
) -> Vec<Vec<f64>> {
    let d = config.d_model;
    let dh = config.head_dim();
    let n = seg.rows.len();
    let m = seg.mask.cols();
    let scale = 1.0 / (dh as f64).sqrt();
    let row0 = seg.rows.start * d;
    let mut kept = Vec::new();
    let mut scores = vec![0.0; n * m];
    for h in 0..config.n_heads {
        gemm(
            n,
            dh,
            m,
            scale,
            q,
            View { offset: row0 + h * dh, rs: d, cs: 1 },
            keys,
            View { offset: key_offset + h * dh, rs: 1, cs: d },
            0.0,
            &mut scores,
            View::rm(0, m),
        );
        for (i, row) in scores.chunks_exact_mut(m).enumerate() {
            masked_softmax(row, seg.mask.row(i));
        }
        gemm(
            n,
            m,
            dh,
            1.0,
            &scores,
            View::rm(0, m),
            values,
            View { offset: key_offset + h * dh, rs: d, cs: 1 },
            0.0,
            o,
            View { offset: row0 + h * dh, rs: d, cs: 1 },
        );
        if keep {
            kept.push(scores.clone());
        }
    }
    kept
}

struct Pass {
    logits: Vec<f64>,
    tape: Option<Tape>,
    new_kv: Vec<(Vec<f64>, Vec<f64>)>,
}

fn run(
    params: &Params,
    ids: &[TokenId],
    positions: &[usize],
    segments: &[Segment],
    cache: Option<&KvCache>,
    keep: bool,
) -> Pass {
    let cfg = &params.config;
    let (d, f, v) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
    let t = ids.len();
    let rope = Rope::new(cfg, positions);

    let mut x = vec![0.0; t * d];
    for (row, &id) in x.chunks_exact_mut(d).zip(ids) {
        row.copy_from_slice(&params.embed[id as usize * d..(id as usize + 1) * d]);
    }

    let mut layers = Vec::new();
    let mut new_kv = Vec::new();
    for (l, lp) in params.layers.iter().enumerate() {
        let (h1, rinv1) = rms_norm(&x, &lp.attn_norm);
        let mut q = matmul(&h1, &lp.wq, t, d, d);
        let mut k = matmul(&h1, &lp.wk, t, d, d);
        let vv = matmul(&h1, &lp.wv, t, d, d);
        rope.apply(&mut q, d, false);
        rope.apply(&mut k, d, false);

        let mut o = vec![0.0; t * d];
        let mut probs = Vec::new();
        match cache {
            Some(c) => {
                let mut keys = c.keys(l).to_vec();
                keys.extend_from_slice(&k);
                let mut values = c.values(l).to_vec();
                values.extend_from_slice(&vv);
                for seg in segments {
                    probs.push(attend(cfg, &q, &keys, &values, 0, seg, &mut o, keep));
                }
            }
            None => {
                for seg in segments {
                    let off = seg.rows.start * d;
                    probs.push(attend(cfg, &q, &k, &vv, off, seg, &mut o, keep));
                }
            }
        }

        let attn = matmul(&o, &lp.wo, t, d, d);
        let mut x_mid = x.clone();
        for (a, b) in x_mid.iter_mut().zip(&attn) {
            *a += b;
        }
        let (h2, rinv2) = rms_norm(&x_mid, &lp.mlp_norm);
        let mut u = matmul(&h2, &lp.w1, t, d, f);
        add_bias(&mut u, &lp.b1);
        let act: Vec<f64> = u.iter().map(|&z| gelu(z)).collect();
        let mut mlp = matmul(&act, &lp.w2, t, f, d);
        add_bias(&mut mlp, &lp.b2);
        let mut x_out = x_mid.clone();
        for (a, b) in x_out.iter_mut().zip(&mlp) {
            *a += b;
        }

        new_kv.push((k.clone(), vv.clone()));
        if keep {
            layers.push(LayerTape {
                x_in: std::mem::take(&mut x),
                rinv1,
                h1,
                q,
                k,
                v: vv,
                probs,
                o,
                x_mid,
                rinv2,
                h2,
                u,
                act,
            });
        }
        x = x_out;
    }

    let (hf, rinvf) = rms_norm(&x, &params.final_norm);
    let mut logits = matmul(&hf, &params.head, t, d, v);
    add_bias(&mut logits, &params.head_bias);
    let tape = keep.then(|| Tape {
        rope,
        layers,
        x_final: x,
        rinvf,
        hf,
    });
    Pass {
        logits,
        tape,
        new_kv,
    }
}

fn check_ids(config: &ModelConfig, ids: &[TokenId]) -> Result<()> {
    if let Some(bad) = ids.iter().find(|&&id| id as usize >= config.vocab_size) {
        return Err(Error::Shape(format!(
            "token id {bad} outside vocabulary of {}",
            config.vocab_size
        )));
    }
    Ok(())
}

/// Logits at every input position.
///
/// Rotary phases come from `positions`, never from array indices. With a
/// cache, `mask` has `cache.len() + ids.len()` columns: cached keys first.
pub fn forward(
    params: &Params,
    ids: &[TokenId],
    positions: &[usize],
    mask: &AttnMask,
    cache: CacheMode<'_>,
) -> Result<Matrix> {
    let n = ids.len();
    let cached = match &cache {
        CacheMode::None => 0,
        CacheMode::Read(c) => c.len(),
        CacheMode::Append(c) => c.len(),
    };
    if positions.len() != n {
        return Err(Error::Shape(format!("{} position ids for {n} tokens", positions.len())));
    }
    if mask.rows() != n || mask.cols() != cached + n {
        return Err(Error::Shape(format!(
            "mask is {}x{}, expected {n}x{}",
            mask.rows(),
            mask.cols(),
            cached + n
        )));
    }
    check_ids(&params.config, ids)?;
    let seg = [Segment { rows: 0..n, mask }];
    let cache_ref: Option<&KvCache> = match &cache {
        CacheMode::None => None,
        CacheMode::Read(c) => Some(c),
        CacheMode::Append(c) => Some(c),
    };
    if let Some(c) = cache_ref {
        if c.num_layers() != params.config.n_layers || c.d_model() != params.config.d_model {
            return Err(Error::Shape("cache does not match model config".into()));
        }
    }
    let pass = run(params, ids, positions, &seg, cache_ref, false);
    if let CacheMode::Append(c) = cache {
        c.append(pass.new_kv, positions);
    }
    Ok(Matrix {
        rows: n,
        cols: params.config.vocab_size,
        data: pass.logits,
    })
}

fn check_example(config: &ModelConfig, ex: &TrainExample) -> Result<()> {
    let n = ex.ids.len();
    if ex.positions.len() != n
        || ex.mask.rows() != n
        || ex.mask.cols() != n
        || ex.targets.len() != n
        || ex.weights.len() != n
    {
        return Err(Error::Shape(format!(
            "example of {n} tokens has positions {}, mask {}x{}, targets {}, weights {}",
            ex.positions.len(),
            ex.mask.rows(),
            ex.mask.cols(),
            ex.targets.len(),
            ex.weights.len()
        )));
    }
    check_ids(config, &ex.ids)?;
    for (t, w) in ex.targets.targets.iter().zip(&ex.weights) {
        if let Some(id) = t {
            if *id as usize >= config.vocab_size {
                return Err(Error::Shape(format!("target {id} outside vocabulary")));
            }
            if !(*w > 0.0) {
                return Err(Error::Shape(format!("non-positive loss weight {w}")));
            }
        }
    }
    Ok(())
}

/// Weighted cross-entropy `sum_i w_i * CE(row_i, target_i)`.
///
/// When `grad` is given, the gradient scaled by `scale` is written into it.
pub fn loss_from_logits(
    logits: &[f64],
    vocab: usize,
    targets: &LossTargets,
    weights: &[f64],
    mut grad: Option<(&mut [f64], f64)>,
) -> f64 {
    let mut total = 0.0;
    for (i, target) in targets.targets.iter().enumerate() {
        let Some(y) = *target else { continue };
        let row = &logits[i * vocab..(i + 1) * vocab];
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
        let sum: f64 = row.iter().map(|z| (z - max).exp()).sum();
        let lse = max + sum.ln();
        let w = weights[i];
        total += w * (lse - row[y as usize]);
        if let Some((g, scale)) = grad.as_mut() {
            let gr = &mut g[i * vocab..(i + 1) * vocab];
            for (gv, z) in gr.iter_mut().zip(row) {
                *gv = *scale * w * (z - lse).exp();
            }
            gr[y as usize] -= *scale * w;
        }
    }
    total
}

fn concat(batch: &[TrainExample]) -> (Vec<TokenId>, Vec<usize>, Vec<Segment<'_>>) {
    let mut ids = Vec::new();
    let mut pos = Vec::new();
    let mut segs = Vec::new();
    for ex in batch {
        let start = ids.len();
        ids.extend_from_slice(&ex.ids);
        pos.extend_from_slice(ex.positions.as_slice());
        segs.push(Segment {
            rows: start..ids.len(),
            mask: &ex.mask,
        });
    }
    (ids, pos, segs)
}

/// Mean weighted loss over the batch, without gradients.
pub fn loss(params: &Params, batch: &[TrainExample]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    for ex in batch {
        check_example(&params.config, ex)?;
    }
    let (ids, pos, segs) = concat(batch);
    let pass = run(params, &ids, &pos, &segs, None, false);
    let v = params.config.vocab_size;
    let mut total = 0.0;
    for (ex, seg) in batch.iter().zip(&segs) {
        let rows = &pass.logits[seg.rows.start * v..seg.rows.end * v];
        total += loss_from_logits(rows, v, &ex.targets, &ex.weights, None);
    }
    Ok(total / batch.len() as f64)
}

/// Mean weighted loss over the batch and its exact gradient.
pub fn loss_and_grad(params: &Params, batch: &[TrainExample]) -> Result<(f64, Params)> {
    if batch.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    for ex in batch {
        check_example(&params.config, ex)?;
    }
    let mut grads = params.zeros_like();
    if batch.iter().all(|ex| ex.targets.active() == 0) {
        return Ok((0.0, grads));
    }
    let cfg = &params.config;
    let (d, f, v) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
    let (ids, pos, segs) = concat(batch);
    let t = ids.len();
    let pass = run(params, &ids, &pos, &segs, None, true);
    let tape = pass.tape.expect("tape requested");

    let scale = 1.0 / batch.len() as f64;
    let mut dlogits = vec![0.0; t * v];
    let mut total = 0.0;
    for (ex, seg) in batch.iter().zip(&segs) {
        let range = seg.rows.start * v..seg.rows.end * v;
        total += loss_from_logits(
            &pass.logits[range.clone()],
            v,
            &ex.targets,
            &ex.weights,
            Some((&mut dlogits[range], scale)),
        );
    }

    acc_xt_dy(&mut grads.head, &tape.hf, &dlogits, t, d, v);
    acc_colsum(&mut grads.head_bias, &dlogits);
    let mut dhf = vec![0.0; t * d];
    dy_wt(&mut dhf, &dlogits, &params.head, t, d, v, false);
    let mut dx = vec![0.0; t * d];
    rms_norm_backward(&tape.x_final, &tape.rinvf, &params.final_norm, &dhf, &mut grads.final_norm, &mut dx);

    let dh = cfg.head_dim();
    let att_scale = 1.0 / (dh as f64).sqrt();
    for (l, lt) in tape.layers.iter().enumerate().rev() {
        let lp = &params.layers[l];
        let lg = &mut grads.layers[l];

        // Feed-forward branch; `dx` is the gradient w.r.t. the layer output.
        acc_xt_dy(&mut lg.w2, &lt.act, &dx, t, f, d);
        acc_colsum(&mut lg.b2, &dx);
        let mut du = vec![0.0; t * f];
        dy_wt(&mut du, &dx, &lp.w2, t, f, d, false);
        for (g, &z) in du.iter_mut().zip(&lt.u) {
            *g *= gelu_grad(z);
        }
        acc_xt_dy(&mut lg.w1, &lt.h2, &du, t, d, f);
        acc_colsum(&mut lg.b1, &du);
        let mut dh2 = vec![0.0; t * d];
        dy_wt(&mut dh2, &du, &lp.w1, t, d, f, false);
        let mut dmid = dx.clone();
        rms_norm_backward(&lt.x_mid, &lt.rinv2, &lp.mlp_norm, &dh2, &mut lg.mlp_norm, &mut dmid);

        // Attention branch.
        acc_xt_dy(&mut lg.wo, &lt.o, &dmid, t, d, d);
        let mut d_o = vec![0.0; t * d];
        dy_wt(&mut d_o, &dmid, &lp.wo, t, d, d, false);
        let mut dq = vec![0.0; t * d];
        let mut dk = vec![0.0; t * d];
        let mut dv = vec![0.0; t * d];
        for (s, seg) in segs.iter().enumerate() {
            let n = seg.rows.len();
            let off = seg.rows.start * d;
            let mut dp = vec![0.0; n * n];
            for h in 0..cfg.n_heads {
                let hv = View { offset: off + h * dh, rs: d, cs: 1 };
                let hv_t = View { offset: off + h * dh, rs: 1, cs: d };
                let p = &lt.probs[s][h];
                gemm(n, dh, n, 1.0, &d_o, hv, &lt.v, hv_t, 0.0, &mut dp, View::rm(0, n));
                gemm(n, n, dh, 1.0, p, View::t(0, n), &d_o, hv, 1.0, &mut dv, hv);
                for i in 0..n {
                    let pr = &p[i * n..(i + 1) * n];
                    let dr = &mut dp[i * n..(i + 1) * n];
                    let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                    for (g, pv) in dr.iter_mut().zip(pr) {
                        *g = pv * (*g - dot);
                    }
                }
                gemm(n, n, dh, att_scale, &dp, View::rm(0, n), &lt.k, hv, 1.0, &mut dq, hv);
                gemm(n, n, dh, att_scale, &dp, View::t(0, n), &lt.q, hv, 1.0, &mut dk, hv);
            }
        }
        tape.rope.apply(&mut dq, d, true);
        tape.rope.apply(&mut dk, d, true);
        acc_xt_dy(&mut lg.wq, &lt.h1, &dq, t, d, d);
        acc_xt_dy(&mut lg.wk, &lt.h1, &dk, t, d, d);
        acc_xt_dy(&mut lg.wv, &lt.h1, &dv, t, d, d);
        let mut dh1 = vec![0.0; t * d];
        dy_wt(&mut dh1, &dq, &lp.wq, t, d, d, false);
        dy_wt(&mut dh1, &dk, &lp.wk, t, d, d, true);
        dy_wt(&mut dh1, &dv, &lp.wv, t, d, d, true);
        let mut dxin = dmid;
        rms_norm_backward(&lt.x_in, &lt.rinv1, &lp.attn_norm, &dh1, &mut lg.attn_norm, &mut dxin);
        dx = dxin;
    }

    for (row, &id) in dx.chunks_exact(d).zip(&ids) {
        let e = &mut grads.embed[id as usize * d..(id as usize + 1) * d];
        for (g, v) in e.iter_mut().zip(row) {
            *g += v;
        }
    }
    Ok((total * scale, grads))
}
