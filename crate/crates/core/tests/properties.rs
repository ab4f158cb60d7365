//! Structural invariants of masks, the model, and the trainer, checked over
//! randomly drawn shapes.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use blockdiff::codec::{Prefix, TokenId, Vocab};
use blockdiff::masks::{
    diffusion_forcing_mask, full_bidirectional_mask, position_ids, teacher_forcing_mask, BlockLayout,
};
use blockdiff::net::{self, init_params, CacheMode, ModelConfig, Params};
use blockdiff::trainer::{make_training_example_with, Forcing, TokenizedSample, TrainConfig};

fn model(vocab: usize, seed: u64) -> Params {
    let cfg = ModelConfig {
        vocab_size: vocab,
        d_model: 16,
        n_heads: 2,
        n_layers: 2,
        d_ff: 32,
        rope_base: 10_000.0,
        init_scale: 0.3,
    };
    init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn prefix(len: usize) -> Prefix {
    let mut t = vec![Vocab::BOS];
    t.extend((1..len as u32).map(|i| Vocab::PREFIX_BASE + i % 4));
    Prefix::new(t, 0, 0).unwrap()
}

fn shape() -> impl Strategy<Value = (usize, usize, usize)> {
    (1usize..8, 1usize..5, 1usize..5)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn every_row_sees_the_whole_prefix((c, b, l) in shape()) {
        let plain = BlockLayout::plain(c, b, l).unwrap();
        let tf = BlockLayout::teacher_forcing(c, b, l).unwrap();
        for m in [
            diffusion_forcing_mask(&plain).unwrap(),
            full_bidirectional_mask(&plain).unwrap(),
            teacher_forcing_mask(&tf).unwrap(),
        ] {
            for q in 0..m.rows() {
                prop_assert!((0..c).all(|k| m.get(q, k)));
            }
        }
    }

    #[test]
    fn prefix_rows_never_see_actions((c, b, l) in shape()) {
        let plain = BlockLayout::plain(c, b, l).unwrap();
        let m = diffusion_forcing_mask(&plain).unwrap();
        for q in 0..c {
            prop_assert!((c..m.cols()).all(|k| !m.get(q, k)));
        }
    }

    #[test]
    fn only_eos_attends_to_eos((c, b, l) in shape()) {
        let plain = BlockLayout::plain(c, b, l).unwrap();
        let tf = BlockLayout::teacher_forcing(c, b, l).unwrap();
        for (layout, m) in [
            (&plain, diffusion_forcing_mask(&plain).unwrap()),
            (&tf, teacher_forcing_mask(&tf).unwrap()),
        ] {
            let eos = layout.eos_index().unwrap();
            for q in 0..m.rows() {
                prop_assert_eq!(m.get(q, eos), q == eos);
            }
        }
    }

    #[test]
    fn diffusion_mask_is_block_causal((c, b, l) in shape()) {
        let layout = BlockLayout::plain(c, b, l).unwrap();
        let m = diffusion_forcing_mask(&layout).unwrap();
        for qb in 0..b {
            for kb in 0..b {
                for q in layout.block_range(qb) {
                    for k in layout.block_range(kb) {
                        prop_assert_eq!(m.get(q, k), kb <= qb);
                    }
                }
            }
        }
    }

    #[test]
    fn single_block_diffusion_is_bidirectional(c in 1usize..10, l in 1usize..12) {
        let layout = BlockLayout::plain(c, 1, l).unwrap();
        prop_assert_eq!(diffusion_forcing_mask(&layout).unwrap(), full_bidirectional_mask(&layout).unwrap());
    }

    #[test]
    fn clean_suffix_reuses_noisy_positions((c, b, l) in shape()) {
        let layout = BlockLayout::teacher_forcing(c, b, l).unwrap();
        let pos = position_ids(&layout);
        let clean = layout.clean_range().unwrap();
        prop_assert_eq!(&pos.0[clean], &pos.0[layout.action_range()]);
        prop_assert_eq!(pos.0[layout.eos_index().unwrap()], c + b * l);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 16, failure_persistence: None, ..ProptestConfig::default() })]

    /// Logits of blocks up to b do not depend on anything in later blocks,
    /// which is what lets a decoder cache them.
    #[test]
    fn earlier_blocks_ignore_later_blocks(
        (c, b, l) in shape(),
        seed in any::<u64>(),
        ids in proptest::collection::vec(0u32..258, 64),
        other in proptest::collection::vec(0u32..258, 64),
    ) {
        let vocab = Vocab::new(4);
        let params = model(vocab.size(), seed);
        let layout = BlockLayout::plain(c, b, l).unwrap();
        let mask = diffusion_forcing_mask(&layout).unwrap();
        let positions = position_ids(&layout);
        let mut seq: Vec<TokenId> = prefix(c).tokens().to_vec();
        seq.extend(&ids[..b * l]);
        seq.push(Vocab::EOS);
        let base = net::forward(&params, &seq, positions.as_slice(), &mask, CacheMode::None).unwrap();
        for keep in 0..b {
            let mut changed = seq.clone();
            for (i, slot) in layout.action_range().enumerate().skip((keep + 1) * l) {
                changed[slot] = other[i];
            }
            let out = net::forward(&params, &changed, positions.as_slice(), &mask, CacheMode::None).unwrap();
            let rows = 0..layout.block_range(keep).end;
            prop_assert_eq!(base.slice_rows(rows.clone()).max_rel_diff(&out.slice_rows(rows)), 0.0);
        }
    }

    /// Embeddings of tokens that only appear in the last clean block, and of
    /// EOS, receive no gradient: nothing that carries a loss reads them.
    #[test]
    fn last_clean_block_and_eos_get_no_gradient(seed in any::<u64>(), t0 in 0.05f64..1.0) {
        let vocab = Vocab::new(4);
        let params = model(vocab.size(), seed);
        let cfg = TrainConfig {
            forcing: Forcing::Teacher,
            num_blocks: 2,
            block_len: 3,
            horizon: 2,
            action_dim: 3,
            ..TrainConfig::default()
        };
        // Block 0 draws from ids 0..10, block 1 from 100..103. With t = 1 for
        // block 1 its noisy copy is all MASK, so ids 100..103 occur only in
        // the last clean block.
        let sample = TokenizedSample {
            prefix: prefix(3),
            actions: vec![1, 5, 9, 100, 101, 102],
        };
        let built = make_training_example_with(&sample, &cfg, &[t0, 1.0], seed).unwrap();
        let (_, grads) = net::loss_and_grad(&params, &[built.example]).unwrap();
        let d = params.config.d_model;
        for id in [100usize, 101, 102, Vocab::EOS as usize] {
            prop_assert!(grads.embed[id * d..(id + 1) * d].iter().all(|g| *g == 0.0), "token {}", id);
        }
        prop_assert!(grads.embed[Vocab::MASK as usize * d..(Vocab::MASK as usize + 1) * d].iter().any(|g| *g != 0.0));
    }
}
