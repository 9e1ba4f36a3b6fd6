mod common;

use common::*;
use proptest::prelude::*;
use sharelab::complexity::count_params;
use sharelab::model::layers::{ffn, FfnParams};
use sharelab::model::TokenBlock;
use sharelab::sharing::{concat_ffn_params, mffn};
use sharelab::{
    ModelConfig, ParamStore, ShareMode, ShareScope, SharingConfig, Tape, TransformerModel,
};

fn ffn_store(seed: u64, d: usize, h: usize, n: usize) -> (ParamStore, Vec<[sharelab::ParamId; 4]>) {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let ids = (0..n)
        .map(|i| {
            [
                store.add(format!("w1.{i}"), random_tensor(&mut r, &[d, h], 1.0)),
                store.add(format!("b1.{i}"), random_tensor(&mut r, &[h], 1.0)),
                store.add(format!("w2.{i}"), random_tensor(&mut r, &[h, d], 1.0)),
                store.add(format!("b2.{i}"), random_tensor(&mut r, &[d], 1.0)),
            ]
        })
        .collect();
    (store, ids)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn mffn_equals_sum_of_branch_ffns(seed in any::<u64>(), d in 1usize..6, h in 1usize..6, n in 1usize..=4, rows in 1usize..4) {
        let (store, ids) = ffn_store(seed, d, h, n);
        let mut tape = Tape::new();
        let x = tape.input(random_tensor(&mut rng(seed ^ 1), &[rows, d], 2.0));
        let layers: Vec<FfnParams> = ids
            .iter()
            .map(|i| FfnParams {
                w1: tape.param(&store, i[0]),
                b1: tape.param(&store, i[1]),
                w2: tape.param(&store, i[2]),
                b2: tape.param(&store, i[3]),
            })
            .collect();
        let wide = concat_ffn_params(&mut tape, &layers).unwrap();
        let m = mffn(&mut tape, x, &wide).unwrap();
        let outs: Vec<_> = layers.iter().map(|p| ffn(&mut tape, x, p).unwrap()).collect();
        let total = tape.add_n(&outs).unwrap();
        let diff = tape.value(m).max_abs_diff(tape.value(total));
        prop_assert!(diff <= 1e-12, "max diff {diff:e}");
    }

    #[test]
    fn decoder_is_causal(seed in 0u64..1000, len in 2usize..7, cut in 0usize..6) {
        let cut = cut % (len - 1);
        let model = TransformerModel::new(ModelConfig::toy(), seed).unwrap();
        let mut r = rng(seed);
        let src: Vec<usize> = (0..5).map(|_| rand::Rng::random_range(&mut r, 4..64)).collect();
        let tgt: Vec<usize> = (0..len).map(|_| rand::Rng::random_range(&mut r, 4..64)).collect();
        let mut changed = tgt.clone();
        for t in changed.iter_mut().skip(cut + 1) {
            *t = 4 + (*t + 7) % 60;
        }
        let a = model.forward_tokens(&src, &tgt).unwrap();
        let b = model.forward_tokens(&src, &changed).unwrap();
        for i in 0..=cut {
            prop_assert_eq!(a.row(i), b.row(i));
        }
    }
}

#[test]
fn parameter_count_is_sharing_invariant() {
    let base = ModelConfig::toy();
    let expected = TransformerModel::new(base.clone(), 0)
        .unwrap()
        .param_count();
    assert_eq!(expected as u64, count_params(&base));
    for mode in [ShareMode::Sil, ShareMode::Sib, ShareMode::Sim] {
        for n in [1, 2, 4] {
            for scope in [ShareScope::EncoderOnly, ShareScope::Both] {
                let cfg = base
                    .clone()
                    .with_sharing(SharingConfig::new(mode, n).with_scope(scope));
                let model = TransformerModel::new(cfg, 0).unwrap();
                assert_eq!(model.param_count(), expected, "{mode} n={n} {scope:?}");
            }
        }
    }
}

#[test]
fn same_seed_same_weights() {
    let a = TransformerModel::new(ModelConfig::toy(), 9).unwrap();
    let b = TransformerModel::new(ModelConfig::toy(), 9).unwrap();
    let c = TransformerModel::new(ModelConfig::toy(), 10).unwrap();
    let vals = |m: &TransformerModel| {
        m.store
            .iter()
            .flat_map(|(_, p)| p.value.data().to_vec())
            .collect::<Vec<_>>()
    };
    assert_eq!(vals(&a), vals(&b));
    assert_ne!(vals(&a), vals(&c));
}

fn batch_logits(
    model: &TransformerModel,
    src: &[Vec<usize>],
    tgt: &[Vec<usize>],
) -> Vec<Vec<Vec<f64>>> {
    let s = TokenBlock::from_sequences(src, 0).unwrap();
    let t = TokenBlock::from_sequences(tgt, 0).unwrap();
    let mut tape = Tape::new();
    let logits = model.forward(&mut tape, &s, &t, None).unwrap();
    let v = tape.value(logits);
    (0..t.batch)
        .map(|b| {
            (0..t.lens[b])
                .map(|i| v.row(b * t.len + i).to_vec())
                .collect()
        })
        .collect()
}

#[test]
fn batch_order_and_padding_do_not_leak() {
    for sharing in [
        SharingConfig::default(),
        SharingConfig::new(ShareMode::Sil, 2),
        SharingConfig::new(ShareMode::Sib, 2),
        SharingConfig::new(ShareMode::Sim, 2),
    ] {
        let model = TransformerModel::new(ModelConfig::toy().with_sharing(sharing), 4).unwrap();
        let src = vec![vec![5, 6, 7, 8, 9, 10], vec![11, 12], vec![13, 14, 15]];
        let tgt = vec![vec![1, 10, 9], vec![1, 12, 11, 5, 6], vec![1]];
        let together = batch_logits(&model, &src, &tgt);
        let perm = [2, 0, 1];
        let shuffled = batch_logits(
            &model,
            &perm.map(|i| src[i].clone()),
            &perm.map(|i| tgt[i].clone()),
        );
        for (k, &i) in perm.iter().enumerate() {
            for (a, b) in shuffled[k].iter().zip(&together[i]) {
                let d = a
                    .iter()
                    .zip(b)
                    .map(|(x, y)| (x - y).abs())
                    .fold(0.0, f64::max);
                assert!(d <= 1e-12, "permuted row differs by {d:e}");
            }
        }
        for i in 0..3 {
            let alone = batch_logits(&model, &src[i..=i], &tgt[i..=i]);
            for (a, b) in alone[0].iter().zip(&together[i]) {
                let d = a
                    .iter()
                    .zip(b)
                    .map(|(x, y)| (x - y).abs())
                    .fold(0.0, f64::max);
                assert!(d <= 1e-12, "padding changed a row by {d:e}");
            }
        }
    }
}

#[test]
fn sil_with_one_repeat_is_the_plain_model() {
    let plain = TransformerModel::new(ModelConfig::toy(), 5).unwrap();
    let sil = TransformerModel::new(
        ModelConfig::toy().with_sharing(SharingConfig::new(ShareMode::Sil, 1)),
        5,
    )
    .unwrap();
    let sim = TransformerModel::new(
        ModelConfig::toy().with_sharing(SharingConfig::new(ShareMode::Sim, 1)),
        5,
    )
    .unwrap();
    let a = plain.forward_tokens(&[5, 6, 7], &[1, 7, 6]).unwrap();
    assert_eq!(a, sil.forward_tokens(&[5, 6, 7], &[1, 7, 6]).unwrap());
    assert_eq!(a, sim.forward_tokens(&[5, 6, 7], &[1, 7, 6]).unwrap());
}

#[test]
fn out_of_vocab_ids_rejected() {
    let model = TransformerModel::new(ModelConfig::toy(), 0).unwrap();
    assert!(matches!(
        model.forward_tokens(&[5, 64], &[1]),
        Err(sharelab::Error::OutOfVocab { id: 64, vocab: 64 })
    ));
}

#[test]
fn sil_order_mismatch_is_a_named_error() {
    let mut sharing = SharingConfig::new(ShareMode::Sil, 2);
    sharing.encoder_order = Some(vec![0, 1, 1]);
    let err = TransformerModel::new(ModelConfig::toy().with_sharing(sharing), 0).unwrap_err();
    assert!(
        err.to_string().contains("model.sharing.encoder_order"),
        "{err}"
    );
}
