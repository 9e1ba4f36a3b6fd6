use sharelab::{
    AttnLayout, ModelConfig, ParamStore, Result, ShareMode, ShareScope, SharingConfig, Tape,
    TransformerModel, Var,
};

use super::*;

pub type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

pub struct OpCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    /// Inputs are kept away from a non-differentiable point at zero.
    pub kinked: bool,
    pub op: OpFn,
}

fn case(
    name: &'static str,
    shapes: &[&[usize]],
    kinked: bool,
    op: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static,
) -> OpCase {
    OpCase {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        kinked,
        op: Box::new(op),
    }
}

/// Every differentiable tape op, each on small random inputs.
pub fn op_cases() -> Vec<OpCase> {
    vec![
        case("matmul", &[&[3, 4], &[4, 2]], false, |t, v| {
            t.matmul(v[0], v[1])
        }),
        case("matmul_bt", &[&[3, 4], &[5, 4]], false, |t, v| {
            t.matmul_bt(v[0], v[1])
        }),
        case("matmul same operand", &[&[3, 3]], false, |t, v| {
            t.matmul(v[0], v[0])
        }),
        case("add", &[&[2, 3], &[2, 3]], false, |t, v| t.add(v[0], v[1])),
        case("mul", &[&[2, 3], &[2, 3]], false, |t, v| t.mul(v[0], v[1])),
        case("add_n", &[&[2, 3], &[2, 3], &[2, 3]], false, |t, v| {
            t.add_n(v)
        }),
        case("add_row", &[&[4, 3], &[3]], false, |t, v| {
            t.add_row(v[0], v[1])
        }),
        case("scale", &[&[2, 3]], false, |t, v| Ok(t.scale(v[0], -0.7))),
        case("mul_const", &[&[2, 2]], false, |t, v| {
            t.mul_const(v[0], vec![1.0, 0.0, 2.0, -1.0])
        }),
        case("relu", &[&[3, 5]], true, |t, v| Ok(t.relu(v[0]))),
        case("sum", &[&[3, 2]], false, |t, v| Ok(t.sum(v[0]))),
        case("sum_squares", &[&[3, 2]], false, |t, v| {
            Ok(t.sum_squares(v[0]))
        }),
        case(
            "layer_norm affine",
            &[&[4, 6], &[6], &[6]],
            false,
            |t, v| t.layer_norm(v[0], Some(v[1]), Some(v[2]), 1e-5),
        ),
        case("layer_norm plain", &[&[4, 6]], false, |t, v| {
            t.layer_norm(v[0], None, None, 1e-5)
        }),
        case("softmax_rows", &[&[3, 5]], false, |t, v| {
            t.softmax_rows(v[0])
        }),
        case("embedding", &[&[7, 3]], false, |t, v| {
            t.embedding(v[0], &[1, 4, 1, 6])
        }),
        case("concat_cols", &[&[2, 3], &[2, 1]], false, |t, v| {
            t.concat_cols(v)
        }),
        case("concat_cols vectors", &[&[3], &[2]], false, |t, v| {
            t.concat_cols(v)
        }),
        case("concat_rows", &[&[2, 3], &[1, 3]], false, |t, v| {
            t.concat_rows(v)
        }),
        // batch 2, q_len 3, k_len 4, 2 heads of width 2
        case("attention", &[&[6, 4], &[8, 4], &[8, 4]], false, |t, v| {
            let layout = AttnLayout::new(2, 3, 4, 2).with_key_lens(vec![4, 2]);
            t.attention(v[0], v[1], v[2], layout, 0.0, None)
        }),
        case(
            "causal attention",
            &[&[6, 4], &[6, 4], &[6, 4]],
            false,
            |t, v| {
                let layout = AttnLayout::new(2, 3, 3, 1).causal();
                t.attention(v[0], v[1], v[2], layout, 0.0, None)
            },
        ),
        case("cross_entropy", &[&[4, 5]], false, |t, v| {
            t.cross_entropy(v[0], &[Some(1), None, Some(4), Some(0)], 0.0)
        }),
        case("smoothed cross_entropy", &[&[3, 5]], false, |t, v| {
            t.cross_entropy(v[0], &[Some(2), Some(2), Some(3)], 0.1)
        }),
    ]
}

/// FD-checks one op case at one seed.
pub fn check_op_case(c: &OpCase, seed: u64) -> FdStats {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let ids: Vec<_> = c
        .shapes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let t = if c.kinked {
                away_from_zero(&mut r, s)
            } else {
                random_tensor(&mut r, s, 1.0)
            };
            store.add(format!("x{i}"), t)
        })
        .collect();
    let loss = |tape: &mut Tape, store: &ParamStore| {
        let vars: Vec<_> = ids.iter().map(|&id| tape.param(store, id)).collect();
        let out = (c.op)(tape, &vars)?;
        if tape.value(out).is_scalar() {
            Ok(out)
        } else {
            weighted_sum(tape, out, seed + 100)
        }
    };
    fd_check(&mut store, &loss, None, seed)
}

pub fn model_sharing_variants() -> Vec<SharingConfig> {
    vec![
        SharingConfig::default(),
        SharingConfig::new(ShareMode::Sil, 2),
        SharingConfig::new(ShareMode::Sib, 2),
        SharingConfig::new(ShareMode::Sim, 2).with_scope(ShareScope::Both),
    ]
}

/// FD-checks the toy model's smoothed cross-entropy, `coords` entries per
/// parameter tensor.
pub fn check_model(sharing: &SharingConfig, seed: u64, coords: usize) -> FdStats {
    let cfg = ModelConfig::toy().with_sharing(sharing.clone());
    let model = TransformerModel::new(cfg, seed).unwrap();
    let batch = small_batch(seed, model.config().vocab);
    let mut store = model.store.clone();
    let loss = |tape: &mut Tape, store: &ParamStore| {
        let mut m = model.clone();
        m.store = store.clone();
        let logits = m.forward(tape, &batch.src, &batch.tgt_in, None)?;
        tape.cross_entropy(logits, &batch.targets, 0.1)
    };
    fd_check(&mut store, &loss, Some(coords), seed)
}
