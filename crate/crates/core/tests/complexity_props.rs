use proptest::prelude::*;
use sharelab::complexity::{count_flops, count_params, format_giga, parallelism};
use sharelab::{ModelConfig, ShareMode, ShareScope, SharingConfig};

/// Independent MAC enumeration, one term per projection matmul.
fn oracle_macs(cfg: &ModelConfig, src: u64, tgt: u64) -> u64 {
    let d = cfg.width as u64;
    let h = (cfg.width * cfg.ffn_mult) as u64;
    let n = cfg.sharing.factor as u64;
    let mult = |shared: bool| {
        if cfg.sharing.mode == ShareMode::None || !shared {
            1
        } else {
            n
        }
    };
    let enc_shared = true;
    let dec_shared = cfg.sharing.scope == ShareScope::Both;

    let mut enc_layer = 0;
    for _ in ["q", "k", "v", "o"] {
        enc_layer += src * d * d;
    }
    enc_layer += src * d * h; // W1
    enc_layer += src * h * d; // W2

    let mut dec_layer = 0;
    for _ in ["q", "k", "v", "o"] {
        dec_layer += tgt * d * d;
    }
    dec_layer += tgt * d * d; // cross q
    dec_layer += src * d * d; // cross k
    dec_layer += src * d * d; // cross v
    dec_layer += tgt * d * d; // cross o
    dec_layer += tgt * d * h + tgt * h * d;

    let output = tgt * d * cfg.vocab as u64;
    cfg.enc_depth as u64 * mult(enc_shared) * enc_layer
        + cfg.dec_depth as u64 * mult(dec_shared) * dec_layer
        + output
}

fn shared(cfg: ModelConfig, mode: ShareMode, n: usize, scope: ShareScope) -> ModelConfig {
    cfg.with_sharing(SharingConfig::new(mode, n).with_scope(scope))
}

fn giga(cfg: &ModelConfig) -> String {
    format_giga(count_flops(cfg, 30, 30).unwrap())
}

#[test]
fn published_flops_figures() {
    let base = ModelConfig::base();
    let deep = ModelConfig::base().with_depths(12, 6);
    let big = ModelConfig::big();
    assert_eq!(giga(&base), "1.81G");
    assert_eq!(giga(&deep), "2.38G");
    assert_eq!(giga(&big), "6.27G");
    for mode in [ShareMode::Sil, ShareMode::Sib, ShareMode::Sim] {
        assert_eq!(
            giga(&shared(base.clone(), mode, 4, ShareScope::EncoderOnly)),
            "3.51G",
            "{mode}"
        );
        assert_eq!(
            giga(&shared(deep.clone(), mode, 4, ShareScope::EncoderOnly)),
            "5.78G",
            "{mode}"
        );
        assert_eq!(
            giga(&shared(big.clone(), mode, 4, ShareScope::EncoderOnly)),
            "13.06G",
            "{mode}"
        );
    }
}

#[test]
fn published_depth_ladder() {
    let rows = [
        (1, 1, "0.71G"),
        (1, 2, "0.93G"),
        (1, 4, "1.37G"),
        (1, 6, "1.81G"),
        (2, 1, "0.93G"),
        (2, 2, "1.37G"),
        (2, 4, "2.25G"),
        (2, 6, "3.13G"),
        (3, 1, "1.15G"),
        (3, 2, "1.81G"),
        (3, 4, "3.13G"),
        (3, 6, "4.46G"),
    ];
    for (depth, n, expected) in rows {
        let cfg = ModelConfig::base().with_depths(depth, depth);
        let cfg = if n == 1 {
            cfg
        } else {
            shared(cfg, ShareMode::Sil, n, ShareScope::Both)
        };
        assert_eq!(giga(&cfg), expected, "{depth}l share{n}");
    }
}

#[test]
fn published_param_counts_within_five_percent() {
    for (cfg, paper) in [
        (ModelConfig::base(), 63e6),
        (ModelConfig::base().with_depths(12, 6), 83e6),
        (ModelConfig::big(), 213e6),
    ] {
        let p = count_params(&cfg) as f64;
        assert!((p - paper).abs() / paper <= 0.05, "{p} vs {paper}");
    }
}

#[test]
fn sharing_keeps_params_and_modes_agree_on_flops() {
    let base = ModelConfig::base();
    for n in 1..=6 {
        for scope in [ShareScope::EncoderOnly, ShareScope::Both] {
            let per_mode: Vec<u64> = [ShareMode::Sil, ShareMode::Sib, ShareMode::Sim]
                .into_iter()
                .map(|m| {
                    let cfg = shared(base.clone(), m, n, scope);
                    assert_eq!(count_params(&cfg), count_params(&base));
                    count_flops(&cfg, 30, 30).unwrap()
                })
                .collect();
            assert!(
                per_mode.iter().all(|&f| f == per_mode[0]),
                "n={n}: {per_mode:?}"
            );
        }
    }
}

#[test]
fn only_sil_adds_sequential_depth() {
    let base = ModelConfig::base();
    let plain = parallelism(&base).unwrap().0;
    for n in [2, 4] {
        let sil = parallelism(&shared(
            base.clone(),
            ShareMode::Sil,
            n,
            ShareScope::EncoderOnly,
        ))
        .unwrap()
        .0;
        let sib = parallelism(&shared(
            base.clone(),
            ShareMode::Sib,
            n,
            ShareScope::EncoderOnly,
        ))
        .unwrap()
        .0;
        let sim = parallelism(&shared(
            base.clone(),
            ShareMode::Sim,
            n,
            ShareScope::EncoderOnly,
        ))
        .unwrap()
        .0;
        assert_eq!(sil, plain + 6 * (n - 1));
        assert_eq!(sib, plain);
        assert_eq!(sim, plain);
    }
}

proptest! {
    #[test]
    fn flops_match_matmul_enumeration(
        enc in 0usize..5, dec in 0usize..5, width_heads in 1usize..5, heads in prop::sample::select(vec![1usize, 2, 4]),
        ffn_mult in 1usize..5, vocab in 1usize..200, src in 1u64..40, tgt in 1u64..40,
        mode in prop::sample::select(vec![ShareMode::None, ShareMode::Sil, ShareMode::Sib, ShareMode::Sim]),
        n in 1usize..5, both in any::<bool>(),
    ) {
        let scope = if both { ShareScope::Both } else { ShareScope::EncoderOnly };
        let mut cfg = ModelConfig::toy();
        cfg.enc_depth = enc;
        cfg.dec_depth = dec;
        cfg.heads = heads;
        cfg.width = heads * width_heads * 2;
        cfg.ffn_mult = ffn_mult;
        cfg.vocab = vocab;
        let cfg = if mode == ShareMode::None { cfg } else { shared(cfg, mode, n, scope) };
        prop_assume!(cfg.validate().is_ok());
        prop_assert_eq!(count_flops(&cfg, src as usize, tgt as usize).unwrap(), oracle_macs(&cfg, src, tgt));
    }

    #[test]
    fn flops_linear_in_share_factor(n in 1usize..8, depth in 1usize..7) {
        let base = ModelConfig::base().with_depths(depth, depth);
        let f = |k: usize| count_flops(&shared(base.clone(), ShareMode::Sim, k, ShareScope::EncoderOnly), 30, 30).unwrap();
        let step = f(2) - f(1);
        prop_assert_eq!(f(n), f(1) + (n as u64 - 1) * step);
    }
}
