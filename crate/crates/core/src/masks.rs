//! Attention permissions, rotary position ids, and loss targets for every
//! training and decoding variant.
//!
//! All variants share the prefix constraint: prefix tokens attend the whole
//! prefix bidirectionally and never attend action tokens. EOS attends the
//! prefix, the noisy action region, and itself; no other query attends EOS.

use std::ops::Range;

use crate::codec::{Regions, TokenId, TokenSeq};
use crate::corruption::CorruptionRecord;
use crate::error::{Error, Result};

/// Ignore index used when exporting loss targets.
pub const IGNORE_INDEX: i64 = -100;

/// Partition of the action region into equal blocks, plus the surrounding
/// prefix / EOS / clean-suffix structure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockLayout {
    prefix_len: usize,
    num_blocks: usize,
    block_len: usize,
    eos: bool,
    clean: bool,
}

impl BlockLayout {
    pub fn new(
        prefix_len: usize,
        num_blocks: usize,
        block_len: usize,
        eos: bool,
        clean: bool,
    ) -> Result<Self> {
        if num_blocks == 0 || block_len == 0 {
            return Err(Error::Layout("need at least one non-empty block".into()));
        }
        if clean && !eos {
            return Err(Error::Layout("a clean suffix requires EOS".into()));
        }
        Ok(Self {
            prefix_len,
            num_blocks,
            block_len,
            eos,
            clean,
        })
    }

    /// Layout of a `[c, a, EOS]` sequence.
    pub fn plain(prefix_len: usize, num_blocks: usize, block_len: usize) -> Result<Self> {
        Self::new(prefix_len, num_blocks, block_len, true, false)
    }

    /// Layout of a `[c, a_noisy, EOS, a_clean]` sequence.
    pub fn teacher_forcing(prefix_len: usize, num_blocks: usize, block_len: usize) -> Result<Self> {
        Self::new(prefix_len, num_blocks, block_len, true, true)
    }

    pub fn from_regions(regions: &Regions, block_len: usize) -> Result<Self> {
        let a = regions.action.len();
        if block_len == 0 || a == 0 || a % block_len != 0 {
            return Err(Error::Layout(format!(
                "action length {a} is not a positive multiple of block length {block_len}"
            )));
        }
        Self::new(
            regions.prefix().len(),
            a / block_len,
            block_len,
            true,
            regions.clean.is_some(),
        )
    }

    pub fn prefix_len(&self) -> usize {
        self.prefix_len
    }

    pub fn num_blocks(&self) -> usize {
        self.num_blocks
    }

    pub fn block_len(&self) -> usize {
        self.block_len
    }

    pub fn action_len(&self) -> usize {
        self.num_blocks * self.block_len
    }

    pub fn has_eos(&self) -> bool {
        self.eos
    }

    pub fn has_clean_suffix(&self) -> bool {
        self.clean
    }

    pub fn prefix_range(&self) -> Range<usize> {
        0..self.prefix_len
    }

    pub fn action_range(&self) -> Range<usize> {
        self.prefix_len..self.prefix_len + self.action_len()
    }

    pub fn block_range(&self, b: usize) -> Range<usize> {
        let start = self.prefix_len + b * self.block_len;
        start..start + self.block_len
    }

    pub fn eos_index(&self) -> Option<usize> {
        self.eos.then(|| self.action_range().end)
    }

    pub fn clean_range(&self) -> Option<Range<usize>> {
        if !self.clean {
            return None;
        }
        let start = self.action_range().end + 1;
        Some(start..start + self.action_len())
    }

    pub fn clean_block_range(&self, b: usize) -> Option<Range<usize>> {
        self.clean_range().map(|r| {
            let start = r.start + b * self.block_len;
            start..start + self.block_len
        })
    }

    pub fn seq_len(&self) -> usize {
        self.prefix_len
            + self.action_len()
            + usize::from(self.eos)
            + if self.clean { self.action_len() } else { 0 }
    }

    /// Block index of an action-region position.
    pub fn block_of(&self, index: usize) -> Option<usize> {
        self.action_range()
            .contains(&index)
            .then(|| (index - self.prefix_len) / self.block_len)
    }
}

/// Dense boolean permission matrix: entry `(q, k)` allows query `q` to attend
/// key `k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttnMask {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl AttnMask {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            bits: vec![false; rows * cols],
        }
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            bits: vec![true; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let bits = (0..rows * cols).map(|i| f(i / cols, i % cols)).collect();
        Self { rows, cols, bits }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, q: usize, k: usize) -> bool {
        self.bits[q * self.cols + k]
    }

    pub fn set(&mut self, q: usize, k: usize, allowed: bool) {
        self.bits[q * self.cols + k] = allowed;
    }

    pub fn row(&self, q: usize) -> &[bool] {
        &self.bits[q * self.cols..(q + 1) * self.cols]
    }

    fn allow(&mut self, rows: Range<usize>, cols: Range<usize>) {
        for q in rows {
            self.bits[q * self.cols + cols.start..q * self.cols + cols.end].fill(true);
        }
    }

    pub fn submatrix(&self, rows: Range<usize>, cols: Range<usize>) -> Self {
        let mut out = Self::new(rows.len(), cols.len());
        for (i, q) in rows.enumerate() {
            for (j, k) in cols.clone().enumerate() {
                out.set(i, j, self.get(q, k));
            }
        }
        out
    }

    /// Rows of `0`/`1` characters, one line per query.
    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.rows * (self.cols + 1));
        for q in 0..self.rows {
            for &b in self.row(q) {
                out.push(if b { '1' } else { '0' });
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let rows: Vec<&str> = text.lines().filter(|l| !l.is_empty()).collect();
        let cols = rows.first().map_or(0, |r| r.len());
        let mut mask = Self::new(rows.len(), cols);
        for (q, line) in rows.iter().enumerate() {
            if line.len() != cols {
                return Err(Error::Parse {
                    line: q + 1,
                    reason: "ragged mask row".into(),
                });
            }
            for (k, ch) in line.chars().enumerate() {
                match ch {
                    '0' => {}
                    '1' => mask.set(q, k, true),
                    _ => {
                        return Err(Error::Parse {
                            line: q + 1,
                            reason: format!("unexpected character {ch:?}"),
                        })
                    }
                }
            }
        }
        Ok(mask)
    }
}

/// Rotary position index of every token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PositionIds(pub Vec<usize>);

impl PositionIds {
    pub fn contiguous(range: Range<usize>) -> Self {
        Self(range.collect())
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Per-position cross-entropy targets; `None` is ignored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LossTargets {
    pub targets: Vec<Option<TokenId>>,
    pub shifted: bool,
}

impl LossTargets {
    pub fn ignore_all(len: usize, shifted: bool) -> Self {
        Self {
            targets: vec![None; len],
            shifted,
        }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn active(&self) -> usize {
        self.targets.iter().filter(|t| t.is_some()).count()
    }

    /// Targets with [`IGNORE_INDEX`] in place of ignored positions.
    pub fn to_raw(&self) -> Vec<i64> {
        self.targets
            .iter()
            .map(|t| t.map_or(IGNORE_INDEX, i64::from))
            .collect()
    }

    /// Index of the token whose id is predicted at logit row `row`.
    pub fn source_index(&self, row: usize) -> usize {
        if self.shifted {
            row + 1
        } else {
            row
        }
    }
}

fn prefix_and_eos(layout: &BlockLayout, mask: &mut AttnMask) {
    let p = layout.prefix_range();
    mask.allow(p.clone(), p.clone());
    if let Some(e) = layout.eos_index() {
        mask.allow(e..e + 1, p);
        mask.allow(e..e + 1, layout.action_range());
        mask.allow(e..e + 1, e..e + 1);
    }
}

/// Block-causal mask: block `b` attends the prefix, every earlier block, and
/// itself bidirectionally.
pub fn diffusion_forcing_mask(layout: &BlockLayout) -> Result<AttnMask> {
    if layout.has_clean_suffix() {
        return Err(Error::Layout("diffusion forcing takes no clean suffix".into()));
    }
    let n = layout.seq_len();
    let mut mask = AttnMask::new(n, n);
    prefix_and_eos(layout, &mut mask);
    let a0 = layout.action_range().start;
    for b in 0..layout.num_blocks() {
        let rows = layout.block_range(b);
        mask.allow(rows.clone(), layout.prefix_range());
        mask.allow(rows.clone(), a0..rows.end);
    }
    Ok(mask)
}

/// Noisy block `b` attends the prefix, clean blocks `< b`, and itself; clean
/// block `b` attends the prefix and clean blocks `<= b`.
pub fn teacher_forcing_mask(layout: &BlockLayout) -> Result<AttnMask> {
    let Some(clean) = layout.clean_range() else {
        return Err(Error::Layout("teacher forcing needs a clean suffix".into()));
    };
    let n = layout.seq_len();
    let mut mask = AttnMask::new(n, n);
    prefix_and_eos(layout, &mut mask);
    let l = layout.block_len();
    for b in 0..layout.num_blocks() {
        let noisy = layout.block_range(b);
        mask.allow(noisy.clone(), layout.prefix_range());
        mask.allow(noisy.clone(), clean.start..clean.start + b * l);
        mask.allow(noisy.clone(), noisy.clone());

        let twin = layout.clean_block_range(b).expect("clean suffix present");
        mask.allow(twin.clone(), layout.prefix_range());
        mask.allow(twin.clone(), clean.start..twin.end);
    }
    Ok(mask)
}

/// Mask, position ids, and loss targets for one teacher-forcing example.
pub fn teacher_forcing(
    layout: &BlockLayout,
    clean_seq: &TokenSeq,
    record: &CorruptionRecord,
    shift: bool,
) -> Result<(AttnMask, PositionIds, LossTargets)> {
    let mask = teacher_forcing_mask(layout)?;
    let targets = loss_targets(clean_seq, record, shift)?;
    Ok((mask, position_ids(layout), targets))
}

/// Full-sequence diffusion baseline: the action region is one bidirectional
/// block.
pub fn full_bidirectional_mask(layout: &BlockLayout) -> Result<AttnMask> {
    if layout.has_clean_suffix() {
        return Err(Error::Layout("bidirectional baseline takes no clean suffix".into()));
    }
    let n = layout.seq_len();
    let mut mask = AttnMask::new(n, n);
    prefix_and_eos(layout, &mut mask);
    let a = layout.action_range();
    mask.allow(a.clone(), layout.prefix_range());
    mask.allow(a.clone(), a);
    Ok(mask)
}

/// Lower-triangular causal mask over the whole sequence.
pub fn ar_causal_mask(len: usize) -> AttnMask {
    let mut mask = AttnMask::new(len, len);
    for q in 0..len {
        mask.allow(q..q + 1, 0..q + 1);
    }
    mask
}

/// Prefix and action region take consecutive ids, EOS follows, and the
/// clean suffix repeats the action region's ids.
pub fn position_ids(layout: &BlockLayout) -> PositionIds {
    let mut ids: Vec<usize> = (0..layout.action_range().end).collect();
    if let Some(e) = layout.eos_index() {
        ids.push(e);
    }
    if layout.has_clean_suffix() {
        ids.extend(layout.action_range());
    }
    PositionIds(ids)
}

/// Cross-entropy targets at masked action positions.
///
/// Unshifted, logit row `i` predicts the clean token at `i`; shifted, row `i`
/// predicts the clean token at `i + 1`.
pub fn loss_targets(
    clean_seq: &TokenSeq,
    record: &CorruptionRecord,
    shift: bool,
) -> Result<LossTargets> {
    let action = clean_seq.regions.action.clone();
    if action.is_empty() {
        return Err(Error::Layout("no action region to target".into()));
    }
    if shift && action.start == 0 {
        return Err(Error::Layout("shifted targets need a token before the action region".into()));
    }
    if record.masked.len() != action.len() {
        return Err(Error::Layout(format!(
            "record covers {} tokens, action region has {}",
            record.masked.len(),
            action.len()
        )));
    }
    let mut out = LossTargets::ignore_all(clean_seq.len(), shift);
    for (j, i) in action.enumerate() {
        if record.masked[j] {
            let row = if shift { i - 1 } else { i };
            out.targets[row] = Some(clean_seq.tokens[i]);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{assemble_sequence, LayoutVariant, Prefix, Vocab};

    #[derive(Debug, Clone, Copy, PartialEq)]
    enum Slot {
        Prefix,
        Noisy(usize),
        Eos,
        Clean(usize),
    }

    fn classify(layout: &BlockLayout, i: usize) -> Slot {
        let c = layout.prefix_len();
        let l = layout.block_len();
        let a = layout.action_len();
        if i < c {
            Slot::Prefix
        } else if i < c + a {
            Slot::Noisy((i - c) / l)
        } else if i == c + a {
            Slot::Eos
        } else {
            Slot::Clean((i - c - a - 1) / l)
        }
    }

    fn df_oracle(layout: &BlockLayout, q: usize, k: usize) -> bool {
        match (classify(layout, q), classify(layout, k)) {
            (Slot::Prefix, Slot::Prefix) => true,
            (Slot::Prefix, _) => false,
            (Slot::Noisy(_), Slot::Prefix) => true,
            (Slot::Noisy(bq), Slot::Noisy(bk)) => bk <= bq,
            (Slot::Noisy(_), _) => false,
            (Slot::Eos, Slot::Clean(_)) => false,
            (Slot::Eos, _) => true,
            (Slot::Clean(_), _) => unreachable!(),
        }
    }

    fn tf_oracle(layout: &BlockLayout, q: usize, k: usize) -> bool {
        match (classify(layout, q), classify(layout, k)) {
            (Slot::Prefix, Slot::Prefix) => true,
            (Slot::Prefix, _) => false,
            (Slot::Noisy(_), Slot::Prefix) => true,
            (Slot::Noisy(bq), Slot::Noisy(bk)) => bq == bk,
            (Slot::Noisy(bq), Slot::Clean(bk)) => bk < bq,
            (Slot::Noisy(_), Slot::Eos) => false,
            (Slot::Eos, Slot::Clean(_)) => false,
            (Slot::Eos, _) => true,
            (Slot::Clean(_), Slot::Prefix) => true,
            (Slot::Clean(bq), Slot::Clean(bk)) => bk <= bq,
            (Slot::Clean(_), _) => false,
        }
    }

    fn check(mask: &AttnMask, oracle: impl Fn(usize, usize) -> bool) {
        for q in 0..mask.rows() {
            for k in 0..mask.cols() {
                assert_eq!(mask.get(q, k), oracle(q, k), "entry ({q}, {k})");
            }
        }
    }

    #[test]
    fn diffusion_forcing_small_case() {
        let layout = BlockLayout::plain(2, 2, 2).unwrap();
        let mask = diffusion_forcing_mask(&layout).unwrap();
        assert_eq!(mask.rows(), 7);
        check(&mask, |q, k| df_oracle(&layout, q, k));
        let expected = "\
1100000
1100000
1111000
1111000
1111110
1111110
1111111
";
        assert_eq!(mask.to_text(), expected);
    }

    #[test]
    fn teacher_forcing_small_case() {
        let layout = BlockLayout::teacher_forcing(2, 2, 1).unwrap();
        let mask = teacher_forcing_mask(&layout).unwrap();
        assert_eq!(mask.rows(), 7);
        check(&mask, |q, k| tf_oracle(&layout, q, k));
        assert!(teacher_forcing_mask(&BlockLayout::plain(2, 2, 1).unwrap()).is_err());
        assert!(diffusion_forcing_mask(&layout).is_err());
    }

    #[test]
    fn single_block_reduces_to_bidirectional() {
        for c in 1..5 {
            for a in 1..6 {
                let layout = BlockLayout::plain(c, 1, a).unwrap();
                let df = diffusion_forcing_mask(&layout).unwrap();
                let full = full_bidirectional_mask(&layout).unwrap();
                assert_eq!(df, full);
                let sub = full.submatrix(layout.action_range(), layout.action_range());
                assert_eq!(sub, AttnMask::full(a, a));
            }
        }
    }

    #[test]
    fn prefix_never_attends_actions() {
        let layout = BlockLayout::plain(4, 3, 2).unwrap();
        for mask in [
            diffusion_forcing_mask(&layout).unwrap(),
            full_bidirectional_mask(&layout).unwrap(),
        ] {
            for q in layout.prefix_range() {
                for k in layout.prefix_len()..layout.seq_len() {
                    assert!(!mask.get(q, k));
                }
            }
        }
    }

    #[test]
    fn causal_mask_is_lower_triangular() {
        let mask = ar_causal_mask(20);
        check(&mask, |q, k| k <= q);
        assert_eq!(mask.row(0).iter().filter(|b| **b).count(), 1);
    }

    #[test]
    fn every_row_attends_itself() {
        let tf = BlockLayout::teacher_forcing(3, 2, 2).unwrap();
        let plain = BlockLayout::plain(3, 2, 2).unwrap();
        for mask in [
            teacher_forcing_mask(&tf).unwrap(),
            diffusion_forcing_mask(&plain).unwrap(),
            full_bidirectional_mask(&plain).unwrap(),
            ar_causal_mask(9),
        ] {
            for q in 0..mask.rows() {
                assert!(mask.get(q, q));
            }
        }
    }

    #[test]
    fn teacher_forcing_never_leaks_own_or_future_clean_twin() {
        let layout = BlockLayout::teacher_forcing(2, 4, 3).unwrap();
        let mask = teacher_forcing_mask(&layout).unwrap();
        for b in 0..4 {
            for q in layout.block_range(b) {
                for bk in b..4 {
                    for k in layout.clean_block_range(bk).unwrap() {
                        assert!(!mask.get(q, k));
                    }
                }
            }
        }
    }

    #[test]
    fn clean_suffix_duplicates_positions() {
        let layout = BlockLayout::teacher_forcing(4, 2, 3).unwrap();
        let pos = position_ids(&layout);
        assert_eq!(pos.len(), layout.seq_len());
        let clean = layout.clean_range().unwrap();
        for (noisy, twin) in layout.action_range().zip(clean) {
            assert_eq!(pos.0[noisy], pos.0[twin]);
        }
        assert_eq!(&pos.0[..4], &[0, 1, 2, 3]);
        assert_eq!(pos.0[layout.eos_index().unwrap()], 10);
    }

    fn sample_seq(actions: &[TokenId], teacher: bool) -> TokenSeq {
        let prefix = Prefix::new(vec![Vocab::BOS, 300], 0, 0).unwrap();
        let variant = if teacher {
            LayoutVariant::TeacherForcing
        } else {
            LayoutVariant::Plain
        };
        assemble_sequence(&prefix, actions, variant).unwrap()
    }

    fn record(masked: Vec<bool>) -> CorruptionRecord {
        CorruptionRecord {
            timesteps: vec![0.5],
            weights: vec![2.0],
            masked,
            seed: 0,
        }
    }

    #[test]
    fn unshifted_targets() {
        let seq = sample_seq(&[10, 11, 12, 13], false);
        let none = loss_targets(&seq, &record(vec![false; 4]), false).unwrap();
        assert_eq!(none.active(), 0);
        let all = loss_targets(&seq, &record(vec![true; 4]), false).unwrap();
        assert_eq!(
            all.targets,
            vec![None, None, Some(10), Some(11), Some(12), Some(13), None]
        );
    }

    #[test]
    fn shifted_targets_hand_enumerated() {
        // Sequence: [BOS, 300, 10, 11, 12, 13, EOS]; the logit row before each
        // masked action token predicts it, and the last action row predicts
        // nothing because EOS is never a target.
        let seq = sample_seq(&[10, 11, 12, 13], false);
        let all = loss_targets(&seq, &record(vec![true; 4]), true).unwrap();
        assert_eq!(
            all.targets,
            vec![None, Some(10), Some(11), Some(12), Some(13), None, None]
        );
        assert_eq!(all.to_raw(), vec![-100, 10, 11, 12, 13, -100, -100]);
        let some = loss_targets(&seq, &record(vec![false, true, false, true]), true).unwrap();
        assert_eq!(
            some.targets,
            vec![None, None, Some(11), None, Some(13), None, None]
        );
    }

    #[test]
    fn clean_suffix_targets_are_ignored() {
        let seq = sample_seq(&[10, 11, 12, 13], true);
        let layout = BlockLayout::from_regions(&seq.regions, 2).unwrap();
        let (_, _, targets) = teacher_forcing(&layout, &seq, &record(vec![true; 4]), false).unwrap();
        for i in layout.clean_range().unwrap() {
            assert_eq!(targets.targets[i], None);
        }
        assert_eq!(targets.active(), 4);
    }

    #[test]
    fn mask_text_round_trip() {
        let layout = BlockLayout::teacher_forcing(3, 2, 2).unwrap();
        let mask = teacher_forcing_mask(&layout).unwrap();
        assert_eq!(AttnMask::from_text(&mask.to_text()).unwrap(), mask);
    }
}
