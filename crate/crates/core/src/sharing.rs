//! Parameter-sharing topologies over a stack of `L` unique layers.
//!
//! * `Sil` repeats the stack in depth: `L * n` applications.
//! * `Sib` keeps `L` positions; each runs `n` layers as parallel branches whose
//!   outputs are averaged and layer-normalized.
//! * `Sim` keeps `L` positions; each concatenates the weight matrices of `n`
//!   layers into one sublayer that is `n` times wider.
//!
//! In every mode each unique layer takes part in `n` computations.

use serde::{Deserialize, Serialize};

use crate::autodiff::{AttnLayout, Tape, Var};
use crate::error::{Error, Result};
use crate::model::layers::{ffn, multi_head_attention, AttnParams, FfnParams};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ShareMode {
    #[default]
    None,
    Sil,
    Sib,
    Sim,
}

impl ShareMode {
    pub const SHARED: [ShareMode; 3] = [ShareMode::Sil, ShareMode::Sib, ShareMode::Sim];

    pub fn as_str(self) -> &'static str {
        match self {
            ShareMode::None => "NONE",
            ShareMode::Sil => "SIL",
            ShareMode::Sib => "SIB",
            ShareMode::Sim => "SIM",
        }
    }
}

impl std::fmt::Display for ShareMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ShareMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "NONE" => Ok(ShareMode::None),
            "SIL" => Ok(ShareMode::Sil),
            "SIB" => Ok(ShareMode::Sib),
            "SIM" => Ok(ShareMode::Sim),
            other => Err(Error::config(
                "sharing.mode",
                format!("unknown mode `{other}`"),
            )),
        }
    }
}

/// Which stacks the sharing mode applies to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShareScope {
    #[default]
    EncoderOnly,
    Both,
}

/// Which sublayers SIB/SIM combine. SIL always repeats whole layers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SharedSublayers {
    #[default]
    All,
    FfnOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SharingConfig {
    #[serde(default)]
    pub mode: ShareMode,
    /// Share factor `n`: how many times each parameter is used per pass.
    #[serde(default = "one")]
    pub factor: usize,
    #[serde(default)]
    pub scope: ShareScope,
    #[serde(default)]
    pub sublayers: SharedSublayers,
    /// Explicit SIL application order for the encoder (defaults to cyclic).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoder_order: Option<Vec<usize>>,
    /// Explicit SIL application order for the decoder (defaults to cyclic).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decoder_order: Option<Vec<usize>>,
}

fn one() -> usize {
    1
}

impl Default for SharingConfig {
    fn default() -> Self {
        SharingConfig {
            mode: ShareMode::None,
            factor: 1,
            scope: ShareScope::EncoderOnly,
            sublayers: SharedSublayers::All,
            encoder_order: None,
            decoder_order: None,
        }
    }
}

impl SharingConfig {
    pub fn new(mode: ShareMode, factor: usize) -> Self {
        SharingConfig {
            mode,
            factor,
            ..Self::default()
        }
    }

    pub fn with_scope(mut self, scope: ShareScope) -> Self {
        self.scope = scope;
        self
    }

    pub fn with_sublayers(mut self, sublayers: SharedSublayers) -> Self {
        self.sublayers = sublayers;
        self
    }

    pub fn validate(&self, enc_depth: usize, dec_depth: usize) -> Result<()> {
        if self.factor == 0 {
            return Err(Error::config("model.sharing.factor", "must be at least 1"));
        }
        if self.mode == ShareMode::None && self.factor != 1 {
            return Err(Error::config(
                "model.sharing.factor",
                format!("mode NONE requires factor 1, got {}", self.factor),
            ));
        }
        let orders = [
            (
                "model.sharing.encoder_order",
                &self.encoder_order,
                enc_depth,
                true,
            ),
            (
                "model.sharing.decoder_order",
                &self.decoder_order,
                dec_depth,
                self.scope == ShareScope::Both,
            ),
        ];
        for (field, order, depth, in_scope) in orders {
            let Some(order) = order else { continue };
            if self.mode != ShareMode::Sil || !in_scope {
                return Err(Error::config(
                    field,
                    "explicit orders apply only to SIL stacks in scope",
                ));
            }
            validate_order(order, depth, self.factor)
                .map_err(|reason| Error::config(field, reason))?;
        }
        Ok(())
    }

    /// Plan for the encoder stack of `depth` unique layers.
    pub fn encoder_plan(&self, depth: usize) -> Result<SharingPlan> {
        self.stack_plan(depth, true, self.encoder_order.as_deref())
    }

    /// Plan for the decoder stack; identity unless the scope covers the decoder.
    pub fn decoder_plan(&self, depth: usize) -> Result<SharingPlan> {
        if self.scope == ShareScope::EncoderOnly {
            return Ok(SharingPlan::unshared(depth));
        }
        self.stack_plan(depth, true, self.decoder_order.as_deref())
    }

    fn stack_plan(
        &self,
        depth: usize,
        in_scope: bool,
        order: Option<&[usize]>,
    ) -> Result<SharingPlan> {
        if !in_scope || self.mode == ShareMode::None {
            return Ok(SharingPlan::unshared(depth));
        }
        let mut plan = SharingPlan::new(self.mode, depth, self.factor)?;
        plan.sublayers = self.sublayers;
        if let Some(order) = order {
            validate_order(order, depth, self.factor)
                .map_err(|reason| Error::config("model.sharing.order", reason))?;
            plan.application_order = ApplicationOrder::Layers(order.to_vec());
        }
        Ok(plan)
    }
}

fn validate_order(order: &[usize], depth: usize, factor: usize) -> std::result::Result<(), String> {
    if order.len() != depth * factor {
        return Err(format!(
            "order has {} entries, expected depth {depth} x factor {factor} = {}",
            order.len(),
            depth * factor
        ));
    }
    for layer in 0..depth {
        let count = order.iter().filter(|&&i| i == layer).count();
        if count != factor {
            return Err(format!(
                "layer {layer} appears {count} times, expected {factor}"
            ));
        }
    }
    if let Some(bad) = order.iter().find(|&&i| i >= depth) {
        return Err(format!("layer index {bad} out of range for depth {depth}"));
    }
    Ok(())
}

/// How the unique layers are applied.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApplicationOrder {
    /// One layer per sequential position.
    Layers(Vec<usize>),
    /// One branch set per position; outputs averaged then normalized.
    Branches(Vec<Vec<usize>>),
    /// One concat group per position; matrices concatenated.
    ConcatGroups(Vec<Vec<usize>>),
}

impl ApplicationOrder {
    /// Layer indices used at each position.
    pub fn groups(&self) -> Vec<Vec<usize>> {
        match self {
            ApplicationOrder::Layers(order) => order.iter().map(|&i| vec![i]).collect(),
            ApplicationOrder::Branches(sets) | ApplicationOrder::ConcatGroups(sets) => sets.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SharingPlan {
    pub mode: ShareMode,
    pub n: usize,
    pub unique_layers: usize,
    pub application_order: ApplicationOrder,
    pub sublayers: SharedSublayers,
}

impl SharingPlan {
    pub fn new(mode: ShareMode, unique_layers: usize, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::config("sharing.factor", "must be at least 1"));
        }
        let application_order = match mode {
            ShareMode::None => {
                if n != 1 {
                    return Err(Error::config(
                        "sharing.factor",
                        "mode NONE requires factor 1",
                    ));
                }
                ApplicationOrder::Layers(build_sil_order(unique_layers, 1))
            }
            ShareMode::Sil => ApplicationOrder::Layers(build_sil_order(unique_layers, n)),
            ShareMode::Sib => ApplicationOrder::Branches(build_branch_sets(unique_layers, n)),
            ShareMode::Sim => ApplicationOrder::ConcatGroups(build_branch_sets(unique_layers, n)),
        };
        Ok(SharingPlan {
            mode,
            n,
            unique_layers,
            application_order,
            sublayers: SharedSublayers::All,
        })
    }

    pub fn unshared(unique_layers: usize) -> Self {
        SharingPlan::new(ShareMode::None, unique_layers, 1).expect("factor 1 is valid")
    }

    /// Number of sequential layer applications.
    pub fn sequential_depth(&self) -> usize {
        match &self.application_order {
            ApplicationOrder::Layers(order) => order.len(),
            ApplicationOrder::Branches(sets) | ApplicationOrder::ConcatGroups(sets) => sets.len(),
        }
    }

    /// How many times each unique layer is used by the plan.
    pub fn use_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.unique_layers];
        for group in self.application_order.groups() {
            for i in group {
                counts[i] += 1;
            }
        }
        counts
    }
}

/// Cyclic depth order `0, 1, .., L-1` repeated `n` times.
pub fn build_sil_order(layers: usize, n: usize) -> Vec<usize> {
    (0..n).flat_map(|_| 0..layers).collect()
}

/// Position `i` takes layers `i, i+1, .., i+n-1` (mod `L`), so every layer is
/// used exactly `n` times over the `L` positions.
pub fn build_branch_sets(layers: usize, n: usize) -> Vec<Vec<usize>> {
    (0..layers)
        .map(|i| (0..n).map(|k| (i + k) % layers).collect())
        .collect()
}

fn mean_then_norm(tape: &mut Tape, outputs: &[Var], eps: f64) -> Result<Var> {
    let total = tape.add_n(outputs)?;
    let mean = tape.scale(total, 1.0 / outputs.len() as f64);
    tape.layer_norm(mean, None, None, eps)
}

/// Multi-branch FFN: `Norm(sum_i FFN_i(x) / n)`.
///
/// The normalization has no affine parameters, so a SIB model has exactly as
/// many trainable scalars as the unshared model.
pub fn bffn(tape: &mut Tape, x: Var, branches: &[FfnParams], eps: f64) -> Result<Var> {
    if branches.is_empty() {
        return Err(Error::Contract("bffn needs at least one branch".into()));
    }
    let outputs = branches
        .iter()
        .map(|p| ffn(tape, x, p))
        .collect::<Result<Vec<_>>>()?;
    mean_then_norm(tape, &outputs, eps)
}

/// Multi-branch attention: `Norm(sum_i MHA_i(q, kv) / n)`.
pub fn battn(
    tape: &mut Tape,
    q_in: Var,
    kv_in: Var,
    branches: &[AttnParams],
    layout: &AttnLayout,
    eps: f64,
) -> Result<Var> {
    battn_with_dropout(tape, q_in, kv_in, branches, layout, eps, 0.0, None)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn battn_with_dropout(
    tape: &mut Tape,
    q_in: Var,
    kv_in: Var,
    branches: &[AttnParams],
    layout: &AttnLayout,
    eps: f64,
    attn_dropout: f64,
    mut rng: Option<&mut dyn rand::RngCore>,
) -> Result<Var> {
    if branches.is_empty() {
        return Err(Error::Contract("battn needs at least one branch".into()));
    }
    let mut outputs = Vec::with_capacity(branches.len());
    for p in branches {
        let r = rng.as_mut().map(|r| &mut **r as &mut dyn rand::RngCore);
        outputs.push(multi_head_attention(
            tape,
            q_in,
            kv_in,
            p,
            layout,
            attn_dropout,
            r,
        )?);
    }
    mean_then_norm(tape, &outputs, eps)
}

/// FFN parameters of `n` layers concatenated into one wider sublayer.
#[derive(Clone, Copy, Debug)]
pub struct MffnParams {
    pub params: FfnParams,
    pub n: usize,
}

/// Concatenates `W1` and `b1` along the hidden axis and `W2` along its input
/// axis. The output biases are summed: a literal concatenation of `b2` would
/// not fit the `d`-wide output, and the sum makes the wide sublayer equal to
/// the sum of the per-layer FFNs.
pub fn concat_ffn_params(tape: &mut Tape, layers: &[FfnParams]) -> Result<MffnParams> {
    let first = layers
        .first()
        .ok_or_else(|| Error::shape("concat_ffn_params", "no layers"))?;
    for p in &layers[1..] {
        for (a, b) in [
            (first.w1, p.w1),
            (first.b1, p.b1),
            (first.w2, p.w2),
            (first.b2, p.b2),
        ] {
            if tape.value(a).shape() != tape.value(b).shape() {
                return Err(Error::shape(
                    "concat_ffn_params",
                    format!("{:?} vs {:?}", tape.value(a).shape(), tape.value(b).shape()),
                ));
            }
        }
    }
    if layers.len() == 1 {
        return Ok(MffnParams {
            params: *first,
            n: 1,
        });
    }
    let pick = |f: fn(&FfnParams) -> Var| layers.iter().map(f).collect::<Vec<_>>();
    let params = FfnParams {
        w1: tape.concat_cols(&pick(|p| p.w1))?,
        b1: tape.concat_cols(&pick(|p| p.b1))?,
        w2: tape.concat_rows(&pick(|p| p.w2))?,
        b2: tape.add_n(&pick(|p| p.b2))?,
    };
    Ok(MffnParams {
        params,
        n: layers.len(),
    })
}

/// `ReLU(x W1cat + b1cat) W2cat + b2cat`.
pub fn mffn(tape: &mut Tape, x: Var, p: &MffnParams) -> Result<Var> {
    ffn(tape, x, &p.params)
}

/// Attention parameters of `n` layers concatenated along the head axis.
#[derive(Clone, Copy, Debug)]
pub struct MattnParams {
    pub params: AttnParams,
    pub n: usize,
}

/// Q/K/V projections are concatenated column-wise so the result has `n * h`
/// heads of the original head size; the output projection is stacked along
/// its input axis and the output biases summed.
pub fn concat_attn_params(tape: &mut Tape, layers: &[AttnParams]) -> Result<MattnParams> {
    let first = layers
        .first()
        .ok_or_else(|| Error::shape("concat_attn_params", "no layers"))?;
    for p in &layers[1..] {
        if p.heads != first.heads {
            return Err(Error::shape("concat_attn_params", "head counts differ"));
        }
        for (a, b) in [
            (first.wq, p.wq),
            (first.wk, p.wk),
            (first.wv, p.wv),
            (first.wo, p.wo),
        ] {
            if tape.value(a).shape() != tape.value(b).shape() {
                return Err(Error::shape(
                    "concat_attn_params",
                    "projection shapes differ",
                ));
            }
        }
    }
    if layers.len() == 1 {
        return Ok(MattnParams {
            params: *first,
            n: 1,
        });
    }
    let pick = |f: fn(&AttnParams) -> Var| layers.iter().map(f).collect::<Vec<_>>();
    let params = AttnParams {
        wq: tape.concat_cols(&pick(|p| p.wq))?,
        bq: tape.concat_cols(&pick(|p| p.bq))?,
        wk: tape.concat_cols(&pick(|p| p.wk))?,
        bk: tape.concat_cols(&pick(|p| p.bk))?,
        wv: tape.concat_cols(&pick(|p| p.wv))?,
        bv: tape.concat_cols(&pick(|p| p.bv))?,
        wo: tape.concat_rows(&pick(|p| p.wo))?,
        bo: tape.add_n(&pick(|p| p.bo))?,
        heads: first.heads * layers.len(),
    };
    Ok(MattnParams {
        params,
        n: layers.len(),
    })
}

/// Scalar count of a concatenated attention bundle as it appears on the tape.
pub fn mattn_numel(tape: &Tape, p: &MattnParams) -> usize {
    let a = &p.params;
    [a.wq, a.bq, a.wk, a.bk, a.wv, a.bv, a.wo, a.bo]
        .iter()
        .map(|&v| tape.value(v).numel())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sil_orders() {
        assert_eq!(build_sil_order(2, 2), vec![0, 1, 0, 1]);
        assert_eq!(build_sil_order(3, 1), vec![0, 1, 2]);
        let order = build_sil_order(6, 4);
        assert_eq!(order.len(), 24);
        for i in 0..6 {
            assert_eq!(order.iter().filter(|&&x| x == i).count(), 4);
        }
    }

    #[test]
    fn branch_sets_use_every_layer_n_times() {
        assert_eq!(build_branch_sets(2, 2), vec![vec![0, 1], vec![1, 0]]);
        for (l, n) in [(2, 4), (6, 2), (3, 3), (1, 5)] {
            let plan = SharingPlan::new(ShareMode::Sib, l, n).unwrap();
            assert_eq!(plan.use_counts(), vec![n; l]);
            assert!(plan.application_order.groups().iter().all(|g| g.len() == n));
            let plan = SharingPlan::new(ShareMode::Sil, l, n).unwrap();
            assert_eq!(plan.use_counts(), vec![n; l]);
        }
    }

    #[test]
    fn sequential_depths() {
        assert_eq!(
            SharingPlan::new(ShareMode::Sil, 6, 4)
                .unwrap()
                .sequential_depth(),
            24
        );
        assert_eq!(
            SharingPlan::new(ShareMode::Sim, 6, 4)
                .unwrap()
                .sequential_depth(),
            6
        );
        assert_eq!(
            SharingPlan::new(ShareMode::Sib, 6, 4)
                .unwrap()
                .sequential_depth(),
            6
        );
    }

    #[test]
    fn explicit_order_validation_names_field() {
        let mut cfg = SharingConfig::new(ShareMode::Sil, 2);
        cfg.encoder_order = Some(vec![0, 1, 0]);
        let err = cfg.validate(2, 2).unwrap_err().to_string();
        assert!(err.contains("model.sharing.encoder_order"), "{err}");

        cfg.encoder_order = Some(vec![0, 0, 1, 1]);
        cfg.validate(2, 2).unwrap();
        let plan = cfg.encoder_plan(2).unwrap();
        assert_eq!(
            plan.application_order,
            ApplicationOrder::Layers(vec![0, 0, 1, 1])
        );

        cfg.encoder_order = Some(vec![0, 0, 0, 1]);
        assert!(cfg.validate(2, 2).is_err());
    }

    #[test]
    fn decoder_unshared_by_default() {
        let cfg = SharingConfig::new(ShareMode::Sil, 4);
        assert_eq!(cfg.decoder_plan(6).unwrap().sequential_depth(), 6);
        let cfg = cfg.with_scope(ShareScope::Both);
        assert_eq!(cfg.decoder_plan(6).unwrap().sequential_depth(), 24);
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("sil".parse::<ShareMode>().unwrap(), ShareMode::Sil);
        assert!("xyz".parse::<ShareMode>().is_err());
    }
}
