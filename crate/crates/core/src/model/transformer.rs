use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{reborrow, AttnLayout, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::layers::{
    multi_head_attention, sublayer_apply, AttnIds, AttnParams, FfnIds, FfnParams, NormIds,
};
use crate::sharing::{
    battn_with_dropout, bffn, concat_attn_params, concat_ffn_params, mffn, ApplicationOrder,
    SharedSublayers, SharingPlan,
};
use crate::tensor::Tensor;

/// A padded `[batch, len]` block of token ids with per-row valid lengths.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBlock {
    pub batch: usize,
    pub len: usize,
    pub ids: Vec<usize>,
    pub lens: Vec<usize>,
}

impl TokenBlock {
    pub fn from_sequences(seqs: &[Vec<usize>], pad: usize) -> Result<Self> {
        let len = seqs.iter().map(Vec::len).max().unwrap_or(0);
        if seqs.is_empty() || seqs.iter().any(Vec::is_empty) {
            return Err(Error::Data("token block needs non-empty sequences".into()));
        }
        let mut ids = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            ids.extend_from_slice(s);
            ids.extend(std::iter::repeat_n(pad, len - s.len()));
        }
        Ok(TokenBlock {
            batch: seqs.len(),
            len,
            ids,
            lens: seqs.iter().map(Vec::len).collect(),
        })
    }

    pub fn single(seq: &[usize]) -> Result<Self> {
        Self::from_sequences(&[seq.to_vec()], 0)
    }

    /// True where the position holds a real token.
    pub fn mask(&self) -> Vec<bool> {
        (0..self.batch * self.len)
            .map(|i| i % self.len < self.lens[i / self.len])
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderLayerIds {
    pub self_norm: NormIds,
    pub self_attn: AttnIds,
    pub ffn_norm: NormIds,
    pub ffn: FfnIds,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderLayerIds {
    pub self_norm: NormIds,
    pub self_attn: AttnIds,
    pub cross_norm: NormIds,
    pub cross_attn: AttnIds,
    pub ffn_norm: NormIds,
    pub ffn: FfnIds,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Combine {
    Single,
    BranchMean,
    MatrixConcat,
}

/// One application of a sublayer: its pre-norm, the parameter bundles it
/// runs, and how multiple bundles are merged.
#[derive(Clone, Debug, PartialEq)]
pub struct SublayerUse<T> {
    pub norm: NormIds,
    pub branches: Vec<T>,
    pub combine: Combine,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderPosition {
    pub self_attn: SublayerUse<AttnIds>,
    pub ffn: SublayerUse<FfnIds>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderPosition {
    pub self_attn: SublayerUse<AttnIds>,
    pub cross_attn: SublayerUse<AttnIds>,
    pub ffn: SublayerUse<FfnIds>,
}

/// Pre-norm encoder-decoder transformer with tied source, target and output
/// embeddings, realized under one sharing plan per stack.
#[derive(Clone, Debug)]
pub struct TransformerModel {
    cfg: ModelConfig,
    pub store: ParamStore,
    embedding: ParamId,
    enc_final: NormIds,
    dec_final: NormIds,
    enc_layers: Vec<EncoderLayerIds>,
    dec_layers: Vec<DecoderLayerIds>,
    enc_plan: SharingPlan,
    dec_plan: SharingPlan,
    encoder: Vec<EncoderPosition>,
    decoder: Vec<DecoderPosition>,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn xavier(&mut self, rows: usize, cols: usize) -> Tensor {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| self.rng.random_range(-bound..bound))
            .collect();
        Tensor::from_parts(vec![rows, cols], data)
    }

    fn normal(&mut self, rows: usize, cols: usize, std: f64) -> Tensor {
        let dist = Normal::new(0.0, std).expect("positive std");
        let data = (0..rows * cols)
            .map(|_| dist.sample(&mut self.rng))
            .collect();
        Tensor::from_parts(vec![rows, cols], data)
    }
}

fn add_norm(store: &mut ParamStore, prefix: &str, d: usize) -> NormIds {
    NormIds {
        gain: store.add(format!("{prefix}.gain"), Tensor::full(&[d], 1.0)),
        bias: store.add(format!("{prefix}.bias"), Tensor::zeros(&[d])),
    }
}

fn add_attn(
    store: &mut ParamStore,
    init: &mut Init,
    prefix: &str,
    d: usize,
    heads: usize,
) -> AttnIds {
    let mut proj = |name: &str| {
        (
            store.add(format!("{prefix}.w{name}"), init.xavier(d, d)),
            store.add(format!("{prefix}.b{name}"), Tensor::zeros(&[d])),
        )
    };
    let (wq, bq) = proj("q");
    let (wk, bk) = proj("k");
    let (wv, bv) = proj("v");
    let (wo, bo) = proj("o");
    AttnIds {
        wq,
        bq,
        wk,
        bk,
        wv,
        bv,
        wo,
        bo,
        heads,
    }
}

fn add_ffn(
    store: &mut ParamStore,
    init: &mut Init,
    prefix: &str,
    d: usize,
    hidden: usize,
) -> FfnIds {
    FfnIds {
        w1: store.add(format!("{prefix}.w1"), init.xavier(d, hidden)),
        b1: store.add(format!("{prefix}.b1"), Tensor::zeros(&[hidden])),
        w2: store.add(format!("{prefix}.w2"), init.xavier(hidden, d)),
        b2: store.add(format!("{prefix}.b2"), Tensor::zeros(&[d])),
    }
}

fn positions<L, T: Copy>(
    plan: &SharingPlan,
    layers: &[L],
    norm: impl Fn(&L) -> NormIds,
    bundle: impl Fn(&L) -> T,
    shared_sublayer: bool,
) -> Vec<SublayerUse<T>> {
    match &plan.application_order {
        ApplicationOrder::Layers(order) => order
            .iter()
            .map(|&k| SublayerUse {
                norm: norm(&layers[k]),
                branches: vec![bundle(&layers[k])],
                combine: Combine::Single,
            })
            .collect(),
        ApplicationOrder::Branches(sets) | ApplicationOrder::ConcatGroups(sets) => {
            let combine = if matches!(plan.application_order, ApplicationOrder::Branches(_)) {
                Combine::BranchMean
            } else {
                Combine::MatrixConcat
            };
            sets.iter()
                .enumerate()
                .map(|(i, set)| {
                    if shared_sublayer {
                        SublayerUse {
                            norm: norm(&layers[i]),
                            branches: set.iter().map(|&k| bundle(&layers[k])).collect(),
                            combine,
                        }
                    } else {
                        SublayerUse {
                            norm: norm(&layers[i]),
                            branches: vec![bundle(&layers[i])],
                            combine: Combine::Single,
                        }
                    }
                })
                .collect()
        }
    }
}

/// Sinusoidal position encodings, `len x d`.
pub fn positional_encoding(len: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; len * d];
    for t in 0..len {
        for i in 0..d {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = t as f64 * rate;
            pe[t * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

impl TransformerModel {
    /// Initializes all unique parameters from `seed`. Models built from the
    /// same architecture and seed hold identical unique parameters regardless
    /// of the sharing mode.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.width;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let mut store = ParamStore::new();
        let embedding = store.add(
            "embedding",
            init.normal(cfg.vocab, d, (d as f64).powf(-0.5)),
        );
        let enc_layers: Vec<EncoderLayerIds> = (0..cfg.enc_depth)
            .map(|i| {
                let p = format!("encoder.layers.{i}");
                EncoderLayerIds {
                    self_norm: add_norm(&mut store, &format!("{p}.self_norm"), d),
                    self_attn: add_attn(
                        &mut store,
                        &mut init,
                        &format!("{p}.self_attn"),
                        d,
                        cfg.heads,
                    ),
                    ffn_norm: add_norm(&mut store, &format!("{p}.ffn_norm"), d),
                    ffn: add_ffn(
                        &mut store,
                        &mut init,
                        &format!("{p}.ffn"),
                        d,
                        cfg.ffn_hidden(),
                    ),
                }
            })
            .collect();
        let dec_layers: Vec<DecoderLayerIds> = (0..cfg.dec_depth)
            .map(|i| {
                let p = format!("decoder.layers.{i}");
                DecoderLayerIds {
                    self_norm: add_norm(&mut store, &format!("{p}.self_norm"), d),
                    self_attn: add_attn(
                        &mut store,
                        &mut init,
                        &format!("{p}.self_attn"),
                        d,
                        cfg.heads,
                    ),
                    cross_norm: add_norm(&mut store, &format!("{p}.cross_norm"), d),
                    cross_attn: add_attn(
                        &mut store,
                        &mut init,
                        &format!("{p}.cross_attn"),
                        d,
                        cfg.heads,
                    ),
                    ffn_norm: add_norm(&mut store, &format!("{p}.ffn_norm"), d),
                    ffn: add_ffn(
                        &mut store,
                        &mut init,
                        &format!("{p}.ffn"),
                        d,
                        cfg.ffn_hidden(),
                    ),
                }
            })
            .collect();
        let enc_final = add_norm(&mut store, "encoder.final_norm", d);
        let dec_final = add_norm(&mut store, "decoder.final_norm", d);

        let enc_plan = cfg.sharing.encoder_plan(cfg.enc_depth)?;
        let dec_plan = cfg.sharing.decoder_plan(cfg.dec_depth)?;
        let attn_shared = cfg.sharing.sublayers == SharedSublayers::All;
        let enc_attn = positions(
            &enc_plan,
            &enc_layers,
            |l| l.self_norm,
            |l| l.self_attn,
            attn_shared,
        );
        let enc_ffn = positions(&enc_plan, &enc_layers, |l| l.ffn_norm, |l| l.ffn, true);
        let encoder = enc_attn
            .into_iter()
            .zip(enc_ffn)
            .map(|(self_attn, ffn)| EncoderPosition { self_attn, ffn })
            .collect();
        let dec_self = positions(
            &dec_plan,
            &dec_layers,
            |l| l.self_norm,
            |l| l.self_attn,
            attn_shared,
        );
        let dec_cross = positions(
            &dec_plan,
            &dec_layers,
            |l| l.cross_norm,
            |l| l.cross_attn,
            attn_shared,
        );
        let dec_ffn = positions(&dec_plan, &dec_layers, |l| l.ffn_norm, |l| l.ffn, true);
        let decoder = dec_self
            .into_iter()
            .zip(dec_cross)
            .zip(dec_ffn)
            .map(|((self_attn, cross_attn), ffn)| DecoderPosition {
                self_attn,
                cross_attn,
                ffn,
            })
            .collect();

        Ok(TransformerModel {
            cfg,
            store,
            embedding,
            enc_final,
            dec_final,
            enc_layers,
            dec_layers,
            enc_plan,
            dec_plan,
            encoder,
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn embedding_id(&self) -> ParamId {
        self.embedding
    }

    pub fn encoder_layers(&self) -> &[EncoderLayerIds] {
        &self.enc_layers
    }

    pub fn decoder_layers(&self) -> &[DecoderLayerIds] {
        &self.dec_layers
    }

    pub fn encoder_positions(&self) -> &[EncoderPosition] {
        &self.encoder
    }

    pub fn decoder_positions(&self) -> &[DecoderPosition] {
        &self.decoder
    }

    pub fn encoder_plan(&self) -> &SharingPlan {
        &self.enc_plan
    }

    pub fn decoder_plan(&self) -> &SharingPlan {
        &self.dec_plan
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.store.numel()
    }

    fn embed(
        &self,
        tape: &mut Tape,
        table: Var,
        block: &TokenBlock,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let d = self.cfg.width;
        let e = tape.embedding(table, &block.ids)?;
        let e = tape.scale(e, (d as f64).sqrt());
        let pe_row = positional_encoding(block.len, d);
        let mut pe = Vec::with_capacity(block.batch * block.len * d);
        for _ in 0..block.batch {
            pe.extend_from_slice(&pe_row);
        }
        let pe = tape.constant(Tensor::from_parts(vec![block.batch * block.len, d], pe));
        let x = tape.add(e, pe)?;
        Ok(tape.dropout(x, self.cfg.dropout, rng))
    }

    fn attn_sublayer(
        &self,
        tape: &mut Tape,
        x: Var,
        memory: Option<Var>,
        site: &SublayerUse<AttnIds>,
        layout: &AttnLayout,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let p_drop = self.cfg.dropout;
        let eps = self.cfg.lnorm_eps;
        let norm = site.norm.load(tape, &self.store);
        let params: Vec<AttnParams> = site
            .branches
            .iter()
            .map(|b| b.load(tape, &self.store))
            .collect();
        sublayer_apply(tape, x, &norm, eps, |tape, h| {
            let kv = memory.unwrap_or(h);
            let y = match site.combine {
                Combine::Single => multi_head_attention(
                    tape,
                    h,
                    kv,
                    &params[0],
                    layout,
                    p_drop,
                    reborrow(&mut rng),
                )?,
                Combine::BranchMean => battn_with_dropout(
                    tape,
                    h,
                    kv,
                    &params,
                    layout,
                    eps,
                    p_drop,
                    reborrow(&mut rng),
                )?,
                Combine::MatrixConcat => {
                    let m = concat_attn_params(tape, &params)?;
                    multi_head_attention(
                        tape,
                        h,
                        kv,
                        &m.params,
                        layout,
                        p_drop,
                        reborrow(&mut rng),
                    )?
                }
            };
            Ok(tape.dropout(y, p_drop, reborrow(&mut rng)))
        })
    }

    fn ffn_sublayer(
        &self,
        tape: &mut Tape,
        x: Var,
        site: &SublayerUse<FfnIds>,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let p_drop = self.cfg.dropout;
        let eps = self.cfg.lnorm_eps;
        let norm = site.norm.load(tape, &self.store);
        let params: Vec<FfnParams> = site
            .branches
            .iter()
            .map(|b| b.load(tape, &self.store))
            .collect();
        sublayer_apply(tape, x, &norm, eps, |tape, h| {
            let y = match site.combine {
                Combine::Single => crate::model::layers::ffn(tape, h, &params[0])?,
                Combine::BranchMean => bffn(tape, h, &params, eps)?,
                Combine::MatrixConcat => {
                    let m = concat_ffn_params(tape, &params)?;
                    mffn(tape, h, &m)?
                }
            };
            Ok(tape.dropout(y, p_drop, reborrow(&mut rng)))
        })
    }

    fn check_ids(&self, block: &TokenBlock) -> Result<()> {
        match block.ids.iter().find(|&&id| id >= self.cfg.vocab) {
            Some(&id) => Err(Error::OutOfVocab {
                id,
                vocab: self.cfg.vocab,
            }),
            None => Ok(()),
        }
    }

    /// Runs the encoder; returns the final-normalized memory `[batch*src_len, d]`.
    pub fn encode(
        &self,
        tape: &mut Tape,
        src: &TokenBlock,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        self.check_ids(src)?;
        let table = tape.param(&self.store, self.embedding);
        let mut x = self.embed(tape, table, src, reborrow(&mut rng))?;
        let layout = AttnLayout::new(src.batch, src.len, src.len, self.cfg.heads)
            .with_key_lens(src.lens.clone());
        for pos in &self.encoder {
            x = self.attn_sublayer(tape, x, None, &pos.self_attn, &layout, reborrow(&mut rng))?;
            x = self.ffn_sublayer(tape, x, &pos.ffn, reborrow(&mut rng))?;
        }
        let norm = self.enc_final.load(tape, &self.store);
        tape.layer_norm(x, Some(norm.gain), Some(norm.bias), self.cfg.lnorm_eps)
    }

    /// Runs the decoder over `tgt` (bos-shifted inputs) against encoder memory.
    /// Returns logits `[batch*tgt_len, vocab]`.
    pub fn decode(
        &self,
        tape: &mut Tape,
        memory: Var,
        src: &TokenBlock,
        tgt: &TokenBlock,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        self.check_ids(tgt)?;
        if src.batch != tgt.batch {
            return Err(Error::shape(
                "decode",
                "source and target batch sizes differ",
            ));
        }
        let table = tape.param(&self.store, self.embedding);
        let mut y = self.embed(tape, table, tgt, reborrow(&mut rng))?;
        let self_layout = AttnLayout::new(tgt.batch, tgt.len, tgt.len, self.cfg.heads)
            .causal()
            .with_key_lens(tgt.lens.clone());
        let cross_layout = AttnLayout::new(tgt.batch, tgt.len, src.len, self.cfg.heads)
            .with_key_lens(src.lens.clone());
        for pos in &self.decoder {
            y = self.attn_sublayer(
                tape,
                y,
                None,
                &pos.self_attn,
                &self_layout,
                reborrow(&mut rng),
            )?;
            y = self.attn_sublayer(
                tape,
                y,
                Some(memory),
                &pos.cross_attn,
                &cross_layout,
                reborrow(&mut rng),
            )?;
            y = self.ffn_sublayer(tape, y, &pos.ffn, reborrow(&mut rng))?;
        }
        let norm = self.dec_final.load(tape, &self.store);
        let h = tape.layer_norm(y, Some(norm.gain), Some(norm.bias), self.cfg.lnorm_eps)?;
        tape.matmul_bt(h, table)
    }

    /// Logits `[batch*tgt_len, vocab]`. Dropout is active only when `rng` is given.
    pub fn forward(
        &self,
        tape: &mut Tape,
        src: &TokenBlock,
        tgt: &TokenBlock,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let memory = self.encode(tape, src, reborrow(&mut rng))?;
        self.decode(tape, memory, src, tgt, rng)
    }

    /// Single-sequence convenience wrapper: logits `[tgt_len, vocab]`.
    pub fn forward_tokens(&self, src: &[usize], tgt: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let logits = self.forward(
            &mut tape,
            &TokenBlock::single(src)?,
            &TokenBlock::single(tgt)?,
            None,
        )?;
        Ok(tape.value(logits).clone())
    }

    /// Greedy decoding of one source sequence; stops at `eos` or `max_len` tokens.
    pub fn greedy_decode(
        &self,
        src: &[usize],
        bos: usize,
        eos: usize,
        max_len: usize,
    ) -> Result<Vec<usize>> {
        let src_block = TokenBlock::single(src)?;
        let mut tape = Tape::new();
        let memory = self.encode(&mut tape, &src_block, None)?;
        let memory = tape.value(memory).clone();
        let mut prefix = vec![bos];
        let mut out = Vec::new();
        while out.len() < max_len {
            let mut tape = Tape::new();
            let mem = tape.constant(memory.clone());
            let logits = self.decode(
                &mut tape,
                mem,
                &src_block,
                &TokenBlock::single(&prefix)?,
                None,
            )?;
            let logits = tape.value(logits);
            let last = logits.row(logits.rows() - 1);
            let next = last
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                    if v > best.1 {
                        (i, v)
                    } else {
                        best
                    }
                })
                .0;
            if next == eos {
                break;
            }
            out.push(next);
            prefix.push(next);
        }
        Ok(out)
    }

    /// A model with the same topology in which every use site owns a private
    /// copy of the parameters it reads. Returns the model and, for each of its
    /// parameters, the id of the parameter it was copied from.
    pub fn unshared_clone(&self) -> (TransformerModel, Vec<ParamId>) {
        let mut c = Cloner {
            src: &self.store,
            store: ParamStore::new(),
            origin: Vec::new(),
        };
        let embedding = c.param(self.embedding);
        let enc_final = c.norm(&self.enc_final);
        let dec_final = c.norm(&self.dec_final);
        let encoder = self
            .encoder
            .iter()
            .map(|pos| EncoderPosition {
                self_attn: c.attn_site(&pos.self_attn),
                ffn: c.ffn_site(&pos.ffn),
            })
            .collect();
        let decoder = self
            .decoder
            .iter()
            .map(|pos| DecoderPosition {
                self_attn: c.attn_site(&pos.self_attn),
                cross_attn: c.attn_site(&pos.cross_attn),
                ffn: c.ffn_site(&pos.ffn),
            })
            .collect();
        let model = TransformerModel {
            cfg: self.cfg.clone(),
            store: c.store,
            embedding,
            enc_final,
            dec_final,
            enc_layers: Vec::new(),
            dec_layers: Vec::new(),
            enc_plan: self.enc_plan.clone(),
            dec_plan: self.dec_plan.clone(),
            encoder,
            decoder,
        };
        (model, c.origin)
    }
}

struct Cloner<'a> {
    src: &'a ParamStore,
    store: ParamStore,
    origin: Vec<ParamId>,
}

impl Cloner<'_> {
    fn param(&mut self, id: ParamId) -> ParamId {
        let p = self.src.get(id);
        let new = self.store.add(
            format!("{}#use{}", p.name, self.origin.len()),
            p.value.clone(),
        );
        self.origin.push(id);
        new
    }

    fn norm(&mut self, n: &NormIds) -> NormIds {
        NormIds {
            gain: self.param(n.gain),
            bias: self.param(n.bias),
        }
    }

    fn attn(&mut self, a: &AttnIds) -> AttnIds {
        AttnIds {
            wq: self.param(a.wq),
            bq: self.param(a.bq),
            wk: self.param(a.wk),
            bk: self.param(a.bk),
            wv: self.param(a.wv),
            bv: self.param(a.bv),
            wo: self.param(a.wo),
            bo: self.param(a.bo),
            heads: a.heads,
        }
    }

    fn ffn(&mut self, f: &FfnIds) -> FfnIds {
        FfnIds {
            w1: self.param(f.w1),
            b1: self.param(f.b1),
            w2: self.param(f.w2),
            b2: self.param(f.b2),
        }
    }

    fn attn_site(&mut self, s: &SublayerUse<AttnIds>) -> SublayerUse<AttnIds> {
        SublayerUse {
            norm: self.norm(&s.norm),
            branches: s.branches.iter().map(|b| self.attn(b)).collect(),
            combine: s.combine,
        }
    }

    fn ffn_site(&mut self, s: &SublayerUse<FfnIds>) -> SublayerUse<FfnIds> {
        SublayerUse {
            norm: self.norm(&s.norm),
            branches: s.branches.iter().map(|b| self.ffn(b)).collect(),
            combine: s.combine,
        }
    }
}
