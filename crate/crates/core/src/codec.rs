//! Action tokenization: quantile bin tables, chunk encode/decode, and the
//! token layout `[BOS, v, p, l, a, EOS]` with an optional clean action suffix.

use std::fmt::Write as _;
use std::ops::Range;

use crate::error::{Error, Result};

pub type TokenId = u32;

/// Bins per continuous action dimension.
pub const NUM_BINS: usize = 256;

/// Lower and upper clip percentiles used when fitting bins.
pub const CLIP_LOW: f64 = 0.01;
pub const CLIP_HIGH: f64 = 0.99;

/// Token id space.
///
/// Ids `0..256` are action bins, followed by the two gripper ids, the special
/// ids, and finally a reserved range of `prefix_size` ids for the synthetic
/// instruction/state tokens that make up the prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocab {
    prefix_size: u32,
}

impl Vocab {
    pub const GRIP_OPEN: TokenId = NUM_BINS as TokenId;
    pub const GRIP_CLOSE: TokenId = Self::GRIP_OPEN + 1;
    pub const MASK: TokenId = Self::GRIP_OPEN + 2;
    pub const BOS: TokenId = Self::GRIP_OPEN + 3;
    pub const EOS: TokenId = Self::GRIP_OPEN + 4;
    pub const PAD: TokenId = Self::GRIP_OPEN + 5;
    pub const PREFIX_BASE: TokenId = Self::GRIP_OPEN + 6;

    pub fn new(prefix_size: u32) -> Self {
        Self { prefix_size }
    }

    pub fn size(&self) -> usize {
        (Self::PREFIX_BASE + self.prefix_size) as usize
    }

    pub fn prefix_size(&self) -> u32 {
        self.prefix_size
    }

    pub fn bin(&self, k: usize) -> TokenId {
        assert!(k < NUM_BINS, "bin index {k} out of range");
        k as TokenId
    }

    /// Id of the `offset`-th reserved prefix token.
    pub fn prefix(&self, offset: u32) -> TokenId {
        assert!(offset < self.prefix_size, "prefix offset {offset} out of range");
        Self::PREFIX_BASE + offset
    }

    pub fn is_bin(&self, id: TokenId) -> bool {
        (id as usize) < NUM_BINS
    }

    pub fn is_gripper(&self, id: TokenId) -> bool {
        id == Self::GRIP_OPEN || id == Self::GRIP_CLOSE
    }

    pub fn is_prefix(&self, id: TokenId) -> bool {
        (Self::PREFIX_BASE..Self::PREFIX_BASE + self.prefix_size).contains(&id)
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        matches!(id, Self::MASK | Self::BOS | Self::EOS | Self::PAD)
    }
}

/// How each action dimension is discretized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DimKind {
    /// Quantile bins fitted from data.
    Continuous,
    /// Uniform bins over a fixed range; used for dimensions the data never
    /// exercises (e.g. rotations an expert holds at zero).
    Fixed { lo: f64, hi: f64 },
    /// Binary command mapped to the dedicated gripper ids.
    Categorical,
}

/// Per-dimension discretization kinds for an action space.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionSpec {
    pub dims: Vec<DimKind>,
}

impl ActionSpec {
    /// 3 translation + 3 rotation + 1 gripper, all continuous dims fitted.
    pub fn standard() -> Self {
        let mut dims = vec![DimKind::Continuous; 6];
        dims.push(DimKind::Categorical);
        Self { dims }
    }

    pub fn dim(&self) -> usize {
        self.dims.len()
    }

    pub fn is_categorical(&self, d: usize) -> bool {
        matches!(self.dims[d], DimKind::Categorical)
    }
}

/// `H x D` matrix of continuous actions, row-major by timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionChunk {
    horizon: usize,
    dim: usize,
    values: Vec<f64>,
}

impl ActionChunk {
    pub fn new(horizon: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if horizon == 0 || dim == 0 {
            return Err(Error::Shape("action chunk needs H >= 1 and D >= 1".into()));
        }
        if values.len() != horizon * dim {
            return Err(Error::DimensionMismatch {
                expected: horizon * dim,
                got: values.len(),
            });
        }
        Ok(Self {
            horizon,
            dim,
            values,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Shape("ragged action rows".into()));
        }
        Self::new(rows.len(), dim, rows.concat())
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, h: usize, d: usize) -> f64 {
        self.values[h * self.dim + d]
    }

    pub fn row(&self, h: usize) -> &[f64] {
        &self.values[h * self.dim..(h + 1) * self.dim]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn column(&self, d: usize) -> impl Iterator<Item = f64> + '_ {
        (0..self.horizon).map(move |h| self.get(h, d))
    }
}

#[derive(Debug, Clone, PartialEq)]
enum DimBins {
    Binned { edges: Vec<f64> },
    Categorical,
}

/// Bin edges for every action dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct BinTable {
    dims: Vec<DimBins>,
}

/// Linear-interpolation empirical quantile of a sorted slice.
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Forces a non-decreasing edge list to be strictly increasing by nudging ties
/// up to the next representable value.
fn make_strict(edges: &mut [f64]) {
    for k in 1..edges.len() {
        if edges[k] <= edges[k - 1] {
            edges[k] = edges[k - 1].next_up();
        }
    }
}

fn fit_dimension(values: &mut [f64], dim: usize) -> Result<Vec<f64>> {
    values.sort_by(f64::total_cmp);
    let lo = quantile_sorted(values, CLIP_LOW);
    let hi = quantile_sorted(values, CLIP_HIGH);
    if values.first() == values.last() || lo >= hi {
        return Err(Error::DegenerateDimension { dim });
    }
    // Interior edges are quantiles of the data lying inside the clip range.
    let start = values.partition_point(|&v| v < lo);
    let end = values.partition_point(|&v| v <= hi);
    let inner = &values[start..end];
    let mut edges = Vec::with_capacity(NUM_BINS + 1);
    edges.push(lo);
    for k in 1..NUM_BINS {
        let q = if inner.is_empty() {
            lo + (hi - lo) * k as f64 / NUM_BINS as f64
        } else {
            quantile_sorted(inner, k as f64 / NUM_BINS as f64)
        };
        edges.push(q.clamp(lo, hi));
    }
    edges.push(hi);
    make_strict(&mut edges);
    Ok(edges)
}

/// Fits quantile bins per continuous dimension over every timestep of every
/// sample chunk.
pub fn fit_bins(samples: &[ActionChunk], spec: &ActionSpec) -> Result<BinTable> {
    if samples.is_empty() {
        return Err(Error::EmptySamples);
    }
    let dim = spec.dim();
    if let Some(bad) = samples.iter().find(|c| c.dim() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: bad.dim(),
        });
    }
    let mut dims = Vec::with_capacity(dim);
    for (d, kind) in spec.dims.iter().enumerate() {
        let bins = match *kind {
            DimKind::Categorical => DimBins::Categorical,
            DimKind::Fixed { lo, hi } => {
                if !(lo < hi) {
                    return Err(Error::DegenerateDimension { dim: d });
                }
                let edges = (0..=NUM_BINS)
                    .map(|k| lo + (hi - lo) * k as f64 / NUM_BINS as f64)
                    .collect();
                DimBins::Binned { edges }
            }
            DimKind::Continuous => {
                let mut values: Vec<f64> = samples.iter().flat_map(|c| c.column(d)).collect();
                if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        step: pos,
                        dim: d,
                    });
                }
                DimBins::Binned {
                    edges: fit_dimension(&mut values, d)?,
                }
            }
        };
        dims.push(bins);
    }
    Ok(BinTable { dims })
}

impl BinTable {
    pub fn dim(&self) -> usize {
        self.dims.len()
    }

    pub fn bin_count(&self) -> usize {
        NUM_BINS
    }

    pub fn is_categorical(&self, d: usize) -> bool {
        matches!(self.dims[d], DimBins::Categorical)
    }

    /// Edge list of a binned dimension; `None` for the gripper.
    pub fn edges(&self, d: usize) -> Option<&[f64]> {
        match &self.dims[d] {
            DimBins::Binned { edges } => Some(edges),
            DimBins::Categorical => None,
        }
    }

    pub fn clip_range(&self, d: usize) -> Option<(f64, f64)> {
        self.edges(d).map(|e| (e[0], e[NUM_BINS]))
    }

    /// Bin index of `value` on dimension `d`: half-open intervals, last one
    /// closed, out-of-range values clipped to the extreme bins.
    pub fn bin_of(&self, d: usize, value: f64) -> usize {
        let edges = self.edges(d).expect("bin_of on categorical dimension");
        let v = value.clamp(edges[0], edges[NUM_BINS]);
        (edges.partition_point(|&e| e <= v) - 1).min(NUM_BINS - 1)
    }

    pub fn bin_midpoint(&self, d: usize, bin: usize) -> f64 {
        let edges = self.edges(d).expect("midpoint on categorical dimension");
        0.5 * (edges[bin] + edges[bin + 1])
    }

    pub fn bin_width(&self, d: usize, bin: usize) -> f64 {
        let edges = self.edges(d).expect("width on categorical dimension");
        edges[bin + 1] - edges[bin]
    }

    /// Text form: a `D bins` header, then one line per dimension holding the
    /// edges at 17 significant digits, or `categorical`.
    pub fn to_text(&self) -> String {
        let mut out = format!("{} {}\n", self.dim(), NUM_BINS);
        for dim in &self.dims {
            match dim {
                DimBins::Categorical => out.push_str("categorical\n"),
                DimBins::Binned { edges } => {
                    for (k, e) in edges.iter().enumerate() {
                        if k > 0 {
                            out.push(' ');
                        }
                        write!(out, "{e:.16e}").unwrap();
                    }
                    out.push('\n');
                }
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let parse_err = |line: usize, reason: &str| Error::Parse {
            line,
            reason: reason.to_string(),
        };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| parse_err(1, "missing header"))?;
        let mut fields = header.split_whitespace();
        let dim: usize = fields
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| parse_err(1, "bad dimension count"))?;
        let bins: usize = fields
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| parse_err(1, "bad bin count"))?;
        if bins != NUM_BINS {
            return Err(parse_err(1, "unsupported bin count"));
        }
        let mut dims = Vec::with_capacity(dim);
        for (i, line) in lines {
            if line.trim() == "categorical" {
                dims.push(DimBins::Categorical);
                continue;
            }
            let edges = line
                .split_whitespace()
                .map(str::parse::<f64>)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| parse_err(i + 1, &e.to_string()))?;
            if edges.len() != NUM_BINS + 1 {
                return Err(parse_err(i + 1, "wrong edge count"));
            }
            if edges.windows(2).any(|w| !(w[0] < w[1])) {
                return Err(parse_err(i + 1, "edges not strictly increasing"));
            }
            dims.push(DimBins::Binned { edges });
        }
        if dims.len() != dim {
            return Err(parse_err(0, "dimension count does not match header"));
        }
        Ok(Self { dims })
    }
}

/// Tokenizes a chunk timestep-major, then dimension.
pub fn encode_chunk(chunk: &ActionChunk, bins: &BinTable, vocab: &Vocab) -> Result<Vec<TokenId>> {
    if chunk.dim() != bins.dim() {
        return Err(Error::DimensionMismatch {
            expected: bins.dim(),
            got: chunk.dim(),
        });
    }
    let mut tokens = Vec::with_capacity(chunk.horizon() * chunk.dim());
    for h in 0..chunk.horizon() {
        for d in 0..chunk.dim() {
            let v = chunk.get(h, d);
            if v.is_nan() {
                return Err(Error::NonFinite { step: h, dim: d });
            }
            let id = if bins.is_categorical(d) {
                if v == 0.0 {
                    Vocab::GRIP_OPEN
                } else if v == 1.0 {
                    Vocab::GRIP_CLOSE
                } else {
                    return Err(Error::InvalidGripper { step: h, value: v });
                }
            } else {
                vocab.bin(bins.bin_of(d, v))
            };
            tokens.push(id);
        }
    }
    Ok(tokens)
}

/// Maps tokens back to continuous actions using bin midpoints.
pub fn decode_tokens(tokens: &[TokenId], bins: &BinTable, vocab: &Vocab) -> Result<ActionChunk> {
    let dim = bins.dim();
    if tokens.is_empty() || tokens.len() % dim != 0 {
        return Err(Error::Shape(format!(
            "token count {} is not a positive multiple of D = {dim}",
            tokens.len()
        )));
    }
    let mut values = Vec::with_capacity(tokens.len());
    for (i, &id) in tokens.iter().enumerate() {
        let d = i % dim;
        let v = if bins.is_categorical(d) {
            match id {
                Vocab::GRIP_OPEN => 0.0,
                Vocab::GRIP_CLOSE => 1.0,
                _ => return Err(Error::UndecodableToken { position: i, token: id }),
            }
        } else if vocab.is_bin(id) {
            bins.bin_midpoint(d, id as usize)
        } else {
            return Err(Error::UndecodableToken { position: i, token: id });
        };
        values.push(v);
    }
    ActionChunk::new(tokens.len() / dim, dim, values)
}

/// Prefix tokens `[BOS, v, p, l]` with the lengths of the visual and
/// proprioceptive parts; the language part is the remainder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prefix {
    tokens: Vec<TokenId>,
    visual: usize,
    proprio: usize,
}

impl Prefix {
    pub fn new(tokens: Vec<TokenId>, visual: usize, proprio: usize) -> Result<Self> {
        if tokens.first() != Some(&Vocab::BOS) {
            return Err(Error::Layout("prefix must begin with BOS".into()));
        }
        if 1 + visual + proprio > tokens.len() {
            return Err(Error::Layout("prefix sub-regions exceed prefix length".into()));
        }
        Ok(Self {
            tokens,
            visual,
            proprio,
        })
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn visual_len(&self) -> usize {
        self.visual
    }

    pub fn proprio_len(&self) -> usize {
        self.proprio
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayoutVariant {
    /// `[c, a, EOS]`
    Plain,
    /// `[c, a_noisy, EOS, a_clean]`
    TeacherForcing,
}

/// Index ranges of every region of a laid-out sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Regions {
    pub bos: Range<usize>,
    pub visual: Range<usize>,
    pub proprio: Range<usize>,
    pub language: Range<usize>,
    pub action: Range<usize>,
    pub eos: Range<usize>,
    pub clean: Option<Range<usize>>,
}

impl Regions {
    pub fn prefix(&self) -> Range<usize> {
        self.bos.start..self.language.end
    }

    pub fn eos_index(&self) -> usize {
        self.eos.start
    }

    /// Regions in sequence order.
    pub fn ordered(&self) -> Vec<Range<usize>> {
        let mut out = vec![
            self.bos.clone(),
            self.visual.clone(),
            self.proprio.clone(),
            self.language.clone(),
            self.action.clone(),
            self.eos.clone(),
        ];
        out.extend(self.clean.clone());
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq {
    pub tokens: Vec<TokenId>,
    pub regions: Regions,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn action_tokens(&self) -> &[TokenId] {
        &self.tokens[self.regions.action.clone()]
    }
}

/// Lays out prefix and action tokens for one forward pass.
pub fn assemble_sequence(
    prefix: &Prefix,
    actions: &[TokenId],
    variant: LayoutVariant,
) -> Result<TokenSeq> {
    if actions.is_empty() {
        return Err(Error::Layout("empty action region".into()));
    }
    let c = prefix.len();
    let a = actions.len();
    let mut tokens = Vec::with_capacity(c + 2 * a + 1);
    tokens.extend_from_slice(prefix.tokens());
    tokens.extend_from_slice(actions);
    tokens.push(Vocab::EOS);
    let clean = match variant {
        LayoutVariant::Plain => None,
        LayoutVariant::TeacherForcing => {
            tokens.extend_from_slice(actions);
            Some(c + a + 1..c + 2 * a + 1)
        }
    };
    let v_end = 1 + prefix.visual_len();
    let p_end = v_end + prefix.proprio_len();
    let regions = Regions {
        bos: 0..1,
        visual: 1..v_end,
        proprio: v_end..p_end,
        language: p_end..c,
        action: c..c + a,
        eos: c + a..c + a + 1,
        clean,
    };
    Ok(TokenSeq { tokens, regions })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform_chunks(n: usize, seed: u64) -> Vec<ActionChunk> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let mut v: Vec<f64> = (0..6).map(|_| rng.random::<f64>()).collect();
                v.push(if rng.random::<bool>() { 1.0 } else { 0.0 });
                ActionChunk::new(1, 7, v).unwrap()
            })
            .collect()
    }

    fn table() -> BinTable {
        fit_bins(&uniform_chunks(5000, 1), &ActionSpec::standard()).unwrap()
    }

    #[test]
    fn vocab_ranges_are_disjoint() {
        let v = Vocab::new(10);
        assert_eq!(v.size(), 272);
        for id in 0..v.size() as TokenId {
            let kinds = [v.is_bin(id), v.is_gripper(id), v.is_special(id), v.is_prefix(id)];
            assert_eq!(kinds.iter().filter(|k| **k).count(), 1, "id {id}");
        }
    }

    #[test]
    fn uniform_edges_follow_quantiles() {
        let n = 200_000;
        let chunks = uniform_chunks(n, 7);
        let bins = fit_bins(&chunks, &ActionSpec::standard()).unwrap();
        let mut col: Vec<f64> = chunks.iter().map(|c| c.get(0, 0)).collect();
        col.sort_by(f64::total_cmp);
        let edges = bins.edges(0).unwrap();
        assert_eq!(edges.len(), NUM_BINS + 1);
        for (k, e) in edges.iter().enumerate() {
            // Order-statistic oracle on the raw sample: the clipped interior
            // spans probabilities 0.01..0.99.
            let p = CLIP_LOW + (CLIP_HIGH - CLIP_LOW) * k as f64 / NUM_BINS as f64;
            let oracle = col[((n - 1) as f64 * p).round() as usize];
            assert!((e - oracle).abs() < 2e-4, "edge {k}: {e} vs {oracle}");
            // Against the uniform CDF, up to the 1% clip offset.
            assert!((e - k as f64 / NUM_BINS as f64).abs() < 0.011 + 0.005);
        }
        assert!(bins.is_categorical(6));
        assert!(bins.edges(6).is_none());
    }

    #[test]
    fn extreme_edges_are_percentiles() {
        let chunks = uniform_chunks(1001, 3);
        let bins = fit_bins(&chunks, &ActionSpec::standard()).unwrap();
        let mut col: Vec<f64> = chunks.iter().map(|c| c.get(0, 2)).collect();
        col.sort_by(f64::total_cmp);
        // n - 1 = 1000, so the 1st/99th percentiles are exact order statistics.
        assert_eq!(bins.clip_range(2), Some((col[10], col[990])));
    }

    #[test]
    fn two_point_sample_spans_both_points() {
        let chunks: Vec<_> = [-1.0, 1.0]
            .iter()
            .map(|&x| ActionChunk::new(1, 2, vec![x, 0.0]).unwrap())
            .collect();
        let spec = ActionSpec {
            dims: vec![DimKind::Continuous, DimKind::Categorical],
        };
        let bins = fit_bins(&chunks, &spec).unwrap();
        let (lo, hi) = bins.clip_range(0).unwrap();
        assert!((lo - -0.98).abs() < 1e-12 && (hi - 0.98).abs() < 1e-12);
        let edges = bins.edges(0).unwrap();
        assert!(edges.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn degenerate_and_empty_samples_rejected() {
        let spec = ActionSpec::standard();
        assert!(matches!(fit_bins(&[], &spec), Err(Error::EmptySamples)));
        let constant: Vec<_> = (0..10)
            .map(|_| ActionChunk::new(1, 7, vec![0.5; 6].into_iter().chain([0.0]).collect()).unwrap())
            .collect();
        assert!(matches!(
            fit_bins(&constant, &spec),
            Err(Error::DegenerateDimension { dim: 0 })
        ));
    }

    #[test]
    fn boundary_values_map_to_extreme_bins() {
        let bins = table();
        let (lo, hi) = bins.clip_range(0).unwrap();
        assert_eq!(bins.bin_of(0, lo), 0);
        assert_eq!(bins.bin_of(0, hi), NUM_BINS - 1);
        assert_eq!(bins.bin_of(0, lo - 5.0), 0);
        assert_eq!(bins.bin_of(0, hi + 5.0), NUM_BINS - 1);
        let e = bins.edges(0).unwrap()[17];
        assert_eq!(bins.bin_of(0, e), 17);
    }

    #[test]
    fn flattening_is_timestep_major() {
        let bins = table();
        let vocab = Vocab::new(4);
        let mut rows = vec![vec![0.0; 6], vec![1.0; 6]];
        rows[0].push(0.0);
        rows[1].push(1.0);
        let chunk = ActionChunk::from_rows(&rows).unwrap();
        let toks = encode_chunk(&chunk, &bins, &vocab).unwrap();
        assert_eq!(toks.len(), 14);
        assert!(toks[..6].iter().all(|&t| t == 0));
        assert_eq!(toks[6], Vocab::GRIP_OPEN);
        assert!(toks[7..13].iter().all(|&t| t == 255));
        assert_eq!(toks[13], Vocab::GRIP_CLOSE);
    }

    #[test]
    fn encode_rejects_nan_and_bad_gripper() {
        let bins = table();
        let vocab = Vocab::new(4);
        let mut v = vec![0.5; 7];
        v[6] = 0.0;
        v[2] = f64::NAN;
        let chunk = ActionChunk::new(1, 7, v.clone()).unwrap();
        assert!(matches!(encode_chunk(&chunk, &bins, &vocab), Err(Error::NonFinite { .. })));
        v[2] = 0.5;
        v[6] = 0.5;
        let chunk = ActionChunk::new(1, 7, v).unwrap();
        assert!(matches!(encode_chunk(&chunk, &bins, &vocab), Err(Error::InvalidGripper { .. })));
    }

    #[test]
    fn decode_rejects_mask_and_special_ids() {
        let bins = table();
        let vocab = Vocab::new(4);
        let mut toks = vec![3, 4, 5, 6, 7, 8, Vocab::GRIP_CLOSE];
        assert!(decode_tokens(&toks, &bins, &vocab).is_ok());
        toks[1] = Vocab::MASK;
        assert!(matches!(
            decode_tokens(&toks, &bins, &vocab),
            Err(Error::UndecodableToken { position: 1, .. })
        ));
        toks[1] = 4;
        toks[6] = Vocab::EOS;
        assert!(decode_tokens(&toks, &bins, &vocab).is_err());
        assert!(decode_tokens(&toks[..5], &bins, &vocab).is_err());
    }

    #[test]
    fn gripper_column_decodes_exactly() {
        let bins = table();
        let vocab = Vocab::new(4);
        let mut toks = vec![10u32; 14];
        toks[6] = Vocab::GRIP_CLOSE;
        toks[13] = Vocab::GRIP_CLOSE;
        let chunk = decode_tokens(&toks, &bins, &vocab).unwrap();
        assert_eq!(chunk.column(6).collect::<Vec<_>>(), vec![1.0, 1.0]);
    }

    #[test]
    fn text_round_trip_is_exact() {
        let bins = table();
        let text = bins.to_text();
        assert!(text.starts_with("7 256\n"));
        assert_eq!(BinTable::from_text(&text).unwrap(), bins);
    }

    #[test]
    fn layouts_have_expected_lengths() {
        let prefix = Prefix::new(vec![Vocab::BOS, 300, 301, 302, 303], 2, 1).unwrap();
        let actions: Vec<TokenId> = (0..14).collect();
        let plain = assemble_sequence(&prefix, &actions, LayoutVariant::Plain).unwrap();
        assert_eq!(plain.len(), 20);
        assert_eq!(plain.regions.eos_index(), 19);
        assert_eq!(plain.tokens[19], Vocab::EOS);
        let tf = assemble_sequence(&prefix, &actions, LayoutVariant::TeacherForcing).unwrap();
        assert_eq!(tf.len(), 34);
        assert_eq!(tf.regions.clean, Some(20..34));
        assert_eq!(&tf.tokens[20..34], &actions[..]);
        assert!(assemble_sequence(&prefix, &[], LayoutVariant::Plain).is_err());
        assert!(Prefix::new(vec![300, 301], 0, 0).is_err());
    }

    fn partition_ok(seq: &TokenSeq) -> bool {
        let mut next = 0;
        for r in seq.regions.ordered() {
            if r.start != next {
                return false;
            }
            next = r.end;
        }
        next == seq.len()
    }

    proptest! {
        #[test]
        fn regions_partition_sequence(
            visual in 0usize..5, proprio in 0usize..4, language in 0usize..4,
            n_actions in 1usize..30, teacher in any::<bool>(),
        ) {
            let mut toks = vec![Vocab::BOS];
            toks.extend(std::iter::repeat_n(300, visual + proprio + language));
            let prefix = Prefix::new(toks, visual, proprio).unwrap();
            let actions = vec![5; n_actions];
            let variant = if teacher { LayoutVariant::TeacherForcing } else { LayoutVariant::Plain };
            let seq = assemble_sequence(&prefix, &actions, variant).unwrap();
            prop_assert!(partition_ok(&seq));
            prop_assert_eq!(seq.regions.action.len(), n_actions);
        }

        #[test]
        fn encode_is_monotone(a in -2.0f64..2.0, b in -2.0f64..2.0) {
            let bins = table();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(bins.bin_of(1, lo) <= bins.bin_of(1, hi));
        }
    }
}
