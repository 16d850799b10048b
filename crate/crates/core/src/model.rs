//! The bridging transformer between the frozen image encoder and the text side.
//!
//! A fixed set of learnable query embeddings and the token sequence
//! `(concepts | text)` run through the same stack of layers. Each layer has a
//! self-attention block whose weights are shared by the image and text
//! branches, a cross-attention block applied to query positions only (keys and
//! values come from frozen image features), and a feed-forward block. Layers
//! are post-norm.
//!
//! Sequences of different shapes are batched by stacking their rows; every
//! sequence is an independent attention block with its own mask.

use std::collections::HashMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AttnBlock, AttnSpec, Var};
use crate::error::{Error, Result};
use crate::masks::{AttentionMask, MaskKind, SegmentLayout};
use crate::objectives::Pooling;
use crate::params::{Binding, ParamId, ParamStore};
use crate::{Tape, Tensor};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_queries: usize,
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_itc: usize,
    pub ffn: usize,
    /// Object-token slots; reserved tokens follow them.
    pub num_objects: usize,
    /// Positions available to the `(concepts | text)` segment.
    pub max_positions: usize,
    pub max_concepts: usize,
    pub num_patches: usize,
    pub enc_dim: usize,
    pub d_llm: usize,
    pub pooling: Pooling,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_queries: 8,
            d: 32,
            layers: 2,
            heads: 4,
            d_itc: 16,
            ffn: 64,
            num_objects: 64,
            max_positions: 16,
            max_concepts: 3,
            num_patches: 4,
            enc_dim: 16,
            d_llm: 32,
            pooling: Pooling::Max,
        }
    }
}

impl ModelConfig {
    pub fn vocab(&self) -> Vocab {
        Vocab {
            num_objects: self.num_objects,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_queries", self.num_queries),
            ("d", self.d),
            ("heads", self.heads),
            ("d_itc", self.d_itc),
            ("ffn", self.ffn),
            ("num_objects", self.num_objects),
            ("max_positions", self.max_positions),
            ("num_patches", self.num_patches),
            ("enc_dim", self.enc_dim),
            ("d_llm", self.d_llm),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Invalid(format!("model.{name} must be positive")));
        }
        if self.d % self.heads != 0 {
            return Err(Error::Invalid(format!(
                "model.d = {} not divisible by model.heads = {}",
                self.d, self.heads
            )));
        }
        Ok(())
    }
}

/// Token ids: objects first, then `[PAD] [DEC] [CLS] [EOS]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Vocab {
    pub num_objects: usize,
}

impl Vocab {
    pub fn pad(&self) -> usize {
        self.num_objects
    }
    pub fn dec(&self) -> usize {
        self.num_objects + 1
    }
    pub fn cls(&self) -> usize {
        self.num_objects + 2
    }
    pub fn eos(&self) -> usize {
        self.num_objects + 3
    }
    pub fn size(&self) -> usize {
        self.num_objects + 4
    }
    pub fn is_object(&self, id: usize) -> bool {
        id < self.num_objects
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct AttnIds {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct NormIds {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct FfnIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct LayerIds {
    self_attn: AttnIds,
    ln_self: NormIds,
    cross_attn: AttnIds,
    ln_cross: NormIds,
    ffn: FfnIds,
    ln_ffn: NormIds,
}

#[derive(Clone, Copy, Debug)]
struct HeadIds {
    w: ParamId,
    b: ParamId,
}

pub(crate) fn add_attn(
    store: &mut ParamStore,
    prefix: &str,
    d_in_kv: usize,
    d: usize,
    bound: f64,
    rng: &mut ChaCha8Rng,
) -> AttnIds {
    AttnIds {
        wq: store.add_uniform(&format!("{prefix}.wq"), &[d, d], bound, rng),
        bq: store.add_constant(&format!("{prefix}.bq"), &[d], 0.0),
        wk: store.add_uniform(&format!("{prefix}.wk"), &[d_in_kv, d], bound, rng),
        bk: store.add_constant(&format!("{prefix}.bk"), &[d], 0.0),
        wv: store.add_uniform(&format!("{prefix}.wv"), &[d_in_kv, d], bound, rng),
        bv: store.add_constant(&format!("{prefix}.bv"), &[d], 0.0),
        wo: store.add_uniform(&format!("{prefix}.wo"), &[d, d], bound, rng),
        bo: store.add_constant(&format!("{prefix}.bo"), &[d], 0.0),
    }
}

pub(crate) fn add_norm(store: &mut ParamStore, prefix: &str, d: usize) -> NormIds {
    NormIds {
        gain: store.add_constant(&format!("{prefix}.gain"), &[d], 1.0),
        bias: store.add_constant(&format!("{prefix}.bias"), &[d], 0.0),
    }
}

pub(crate) fn add_ffn(
    store: &mut ParamStore,
    prefix: &str,
    d: usize,
    hidden: usize,
    bound: f64,
    rng: &mut ChaCha8Rng,
) -> FfnIds {
    FfnIds {
        w1: store.add_uniform(&format!("{prefix}.w1"), &[d, hidden], bound, rng),
        b1: store.add_constant(&format!("{prefix}.b1"), &[hidden], 0.0),
        w2: store.add_uniform(&format!("{prefix}.w2"), &[hidden, d], bound, rng),
        b2: store.add_constant(&format!("{prefix}.b2"), &[d], 0.0),
    }
}

pub(crate) fn norm(tape: &mut Tape, b: &Binding, ids: NormIds, x: Var) -> Var {
    let n = tape.layer_norm_rows(x, LN_EPS);
    let g = tape.mul_row(n, b.var(ids.gain));
    tape.add_row(g, b.var(ids.bias))
}

pub(crate) fn ffn(tape: &mut Tape, b: &Binding, ids: FfnIds, x: Var) -> Var {
    let h = tape.linear(x, b.var(ids.w1), Some(b.var(ids.b1)));
    let h = tape.gelu(h);
    tape.linear(h, b.var(ids.w2), Some(b.var(ids.b2)))
}

/// Projects queries from `x` and keys/values from `kv`, then attends.
pub(crate) fn attend(
    tape: &mut Tape,
    b: &Binding,
    ids: AttnIds,
    x: Var,
    kv: Var,
    spec: Arc<AttnSpec>,
) -> Result<Var> {
    let q = tape.linear(x, b.var(ids.wq), Some(b.var(ids.bq)));
    let k = tape.linear(kv, b.var(ids.wk), Some(b.var(ids.bk)));
    let v = tape.linear(kv, b.var(ids.wv), Some(b.var(ids.bv)));
    let a = tape.attention(q, k, v, spec)?;
    Ok(tape.linear(a, b.var(ids.wo), Some(b.var(ids.bo))))
}

/// One sequence of a batched forward pass: optional image (which brings the
/// query segment with it), concept tokens, then text tokens.
#[derive(Clone, Copy, Debug)]
pub struct SeqInput<'a> {
    pub image: Option<&'a Tensor>,
    pub concepts: &'a [usize],
    pub text: &'a [usize],
}

impl<'a> SeqInput<'a> {
    pub fn image_only(image: &'a Tensor) -> Self {
        Self {
            image: Some(image),
            concepts: &[],
            text: &[],
        }
    }

    pub fn text_only(text: &'a [usize]) -> Self {
        Self {
            image: None,
            concepts: &[],
            text,
        }
    }
}

/// Row bookkeeping for one sequence inside the stacked batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeqRows {
    pub start: usize,
    pub layout: SegmentLayout,
}

impl SeqRows {
    pub fn query_rows(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.layout.num_queries
    }
    pub fn text_rows(&self) -> std::ops::Range<usize> {
        let s = self.start + self.layout.text_start();
        s..s + self.layout.num_text
    }
}

/// Final hidden states of a batched forward pass.
#[derive(Clone, Debug)]
pub struct BatchForward {
    pub states: Var,
    pub seqs: Vec<SeqRows>,
}

impl BatchForward {
    pub fn query_rows(&self) -> Vec<usize> {
        self.seqs.iter().flat_map(|s| s.query_rows()).collect()
    }

    pub fn text_rows(&self) -> Vec<usize> {
        self.seqs.iter().flat_map(|s| s.text_rows()).collect()
    }

    /// First text row of each sequence.
    pub fn first_text_rows(&self) -> Vec<usize> {
        self.seqs.iter().map(|s| s.text_rows().start).collect()
    }
}

#[derive(Clone, Debug)]
pub struct BridgeModel {
    cfg: ModelConfig,
    pub params: ParamStore,
    query_emb: ParamId,
    tok_emb: ParamId,
    pos_emb: ParamId,
    layers: Vec<LayerIds>,
    proj_image: HeadIds,
    proj_text: HeadIds,
    itm_head: HeadIds,
    lm_head: HeadIds,
}

impl BridgeModel {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d;
        let bound = 1.0 / (d as f64).sqrt();
        let vocab = cfg.vocab().size();
        let mut s = ParamStore::new();
        let query_emb = s.add_uniform("query_embeddings", &[cfg.num_queries, d], bound, &mut rng);
        let tok_emb = s.add_uniform("token_embedding", &[vocab, d], bound, &mut rng);
        let pos_emb = s.add_uniform("position_embedding", &[cfg.max_positions, d], bound, &mut rng);
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = format!("layers.{l}");
            layers.push(LayerIds {
                self_attn: add_attn(&mut s, &format!("{p}.self_attn"), d, d, bound, &mut rng),
                ln_self: add_norm(&mut s, &format!("{p}.ln_self"), d),
                cross_attn: add_attn(
                    &mut s,
                    &format!("{p}.cross_attn"),
                    cfg.enc_dim,
                    d,
                    bound,
                    &mut rng,
                ),
                ln_cross: add_norm(&mut s, &format!("{p}.ln_cross"), d),
                ffn: add_ffn(&mut s, &format!("{p}.ffn"), d, cfg.ffn, bound, &mut rng),
                ln_ffn: add_norm(&mut s, &format!("{p}.ln_ffn"), d),
            });
        }
        let mut head = |name: &str, out: usize, rng: &mut ChaCha8Rng| HeadIds {
            w: s.add_uniform(&format!("{name}.w"), &[d, out], bound, rng),
            b: s.add_constant(&format!("{name}.b"), &[out], 0.0),
        };
        let proj_image = head("proj_image", cfg.d_itc, &mut rng);
        let proj_text = head("proj_text", cfg.d_itc, &mut rng);
        let itm_head = head("itm_head", 2, &mut rng);
        let lm_head = head("lm_head", vocab, &mut rng);
        Ok(Self {
            cfg: cfg.clone(),
            params: s,
            query_emb,
            tok_emb,
            pos_emb,
            layers,
            proj_image,
            proj_text,
            itm_head,
            lm_head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn vocab(&self) -> Vocab {
        self.cfg.vocab()
    }

    pub fn bind(&self, tape: &mut Tape, with_grad: bool) -> Binding {
        self.params.bind(tape, with_grad)
    }

    fn check_tokens(&self, ids: &[usize]) -> Result<()> {
        let vocab = self.vocab().size();
        match ids.iter().find(|&&t| t >= vocab) {
            Some(&id) => Err(Error::TokenOutOfRange { id, vocab }),
            None => Ok(()),
        }
    }

    /// Runs a batch of sequences under one mask kind.
    pub fn forward(
        &self,
        tape: &mut Tape,
        b: &Binding,
        seqs: &[SeqInput<'_>],
        kind: MaskKind,
    ) -> Result<BatchForward> {
        if seqs.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let nq = self.cfg.num_queries;
        let mut rows = Vec::with_capacity(seqs.len());
        let mut masks: HashMap<SegmentLayout, Arc<AttentionMask>> = HashMap::new();
        let mut self_blocks = Vec::with_capacity(seqs.len());
        let mut cross_blocks = Vec::new();
        let mut query_src = Vec::new();
        let mut tok_ids = Vec::new();
        let mut pos_ids = Vec::new();
        // (is_token, index into the query or token stack) per output row
        let mut origin = Vec::new();
        let mut images = Vec::new();
        let mut patch_rows = 0;
        let mut query_rows_total = 0;
        let mut start = 0;
        for seq in seqs {
            if seq.concepts.len() > self.cfg.max_concepts {
                return Err(Error::Invalid(format!(
                    "{} concepts exceed the configured maximum of {}",
                    seq.concepts.len(),
                    self.cfg.max_concepts
                )));
            }
            if seq.concepts.len() + seq.text.len() > self.cfg.max_positions {
                return Err(Error::Invalid(format!(
                    "{} concept+text tokens exceed {} positions",
                    seq.concepts.len() + seq.text.len(),
                    self.cfg.max_positions
                )));
            }
            self.check_tokens(seq.concepts)?;
            self.check_tokens(seq.text)?;
            let q = if let Some(img) = seq.image {
                if img.cols() != self.cfg.enc_dim || img.shape().len() != 2 {
                    return Err(Error::Shape(format!(
                        "image features {:?}, expected [patches × {}]",
                        img.shape(),
                        self.cfg.enc_dim
                    )));
                }
                cross_blocks.push(AttnBlock {
                    q_start: query_rows_total,
                    q_len: nq,
                    k_start: patch_rows,
                    k_len: img.rows(),
                    mask: None,
                });
                patch_rows += img.rows();
                query_rows_total += nq;
                images.push(img);
                nq
            } else {
                0
            };
            let layout = SegmentLayout::new(q, seq.concepts.len(), seq.text.len())?;
            let mask = match masks.get(&layout) {
                Some(m) => m.clone(),
                None => {
                    let m = Arc::new(AttentionMask::build(kind, layout)?);
                    masks.insert(layout, m.clone());
                    m
                }
            };
            for i in 0..q {
                origin.push((false, query_src.len()));
                query_src.push(i);
            }
            for (p, &t) in seq.concepts.iter().chain(seq.text).enumerate() {
                origin.push((true, tok_ids.len()));
                tok_ids.push(t);
                pos_ids.push(p);
            }
            self_blocks.push(AttnBlock {
                q_start: start,
                q_len: layout.total(),
                k_start: start,
                k_len: layout.total(),
                mask: Some(mask),
            });
            rows.push(SeqRows { start, layout });
            start += layout.total();
        }

        // Assemble the stacked input rows.
        let n_query = query_src.len();
        let mut parts = Vec::new();
        if n_query > 0 {
            parts.push(tape.gather_rows(b.var(self.query_emb), &query_src));
        }
        if !tok_ids.is_empty() {
            let t = tape.gather_rows(b.var(self.tok_emb), &tok_ids);
            let p = tape.gather_rows(b.var(self.pos_emb), &pos_ids);
            parts.push(tape.add(t, p));
        }
        let stacked = if parts.len() == 1 {
            parts[0]
        } else {
            tape.concat_rows(&parts)
        };
        let perm: Vec<usize> = origin
            .iter()
            .map(|&(is_tok, i)| if is_tok { n_query + i } else { i })
            .collect();
        let mut x = if perm.iter().enumerate().all(|(i, &p)| i == p) {
            stacked
        } else {
            tape.gather_rows(stacked, &perm)
        };

        let self_spec = Arc::new(AttnSpec {
            heads: self.cfg.heads,
            blocks: self_blocks,
        });
        let cross = if images.is_empty() {
            None
        } else {
            let mut data = Vec::with_capacity(patch_rows * self.cfg.enc_dim);
            for img in &images {
                data.extend_from_slice(img.data());
            }
            let feats = tape.constant(Tensor::matrix(patch_rows, self.cfg.enc_dim, data)?);
            let spec = Arc::new(AttnSpec {
                heads: self.cfg.heads,
                blocks: cross_blocks,
            });
            let q_rows: Vec<usize> = rows.iter().flat_map(|r| r.query_rows()).collect();
            // after concat [x; qn], query row r reads from qn instead
            let total = start;
            let mut replace: Vec<usize> = (0..total).collect();
            for (k, &r) in q_rows.iter().enumerate() {
                replace[r] = total + k;
            }
            Some((feats, spec, q_rows, replace))
        };

        for layer in &self.layers {
            let a = attend(tape, b, layer.self_attn, x, x, self_spec.clone())?;
            let r = tape.add(x, a);
            x = norm(tape, b, layer.ln_self, r);
            if let Some((feats, spec, q_rows, replace)) = &cross {
                let qx = tape.gather_rows(x, q_rows);
                let c = attend(tape, b, layer.cross_attn, qx, *feats, spec.clone())?;
                let r = tape.add(qx, c);
                let qn = norm(tape, b, layer.ln_cross, r);
                let joined = tape.concat_rows(&[x, qn]);
                x = tape.gather_rows(joined, replace);
            }
            let f = ffn(tape, b, layer.ffn, x);
            let r = tape.add(x, f);
            x = norm(tape, b, layer.ln_ffn, r);
        }
        Ok(BatchForward { states: x, seqs: rows })
    }

    fn head(&self, tape: &mut Tape, b: &Binding, ids: HeadIds, x: Var) -> Var {
        tape.linear(x, b.var(ids.w), Some(b.var(ids.b)))
    }

    /// Unit-norm contrastive embeddings of the image queries. With max pooling
    /// this is one row per query (`group = num_queries`); with mean pooling one
    /// row per image (`group = 1`).
    pub fn image_itc(&self, tape: &mut Tape, b: &Binding, fwd: &BatchForward) -> Result<(Var, usize)> {
        let rows = fwd.query_rows();
        if rows.is_empty() {
            return Err(Error::Invalid("batch has no image queries".into()));
        }
        let q = tape.gather_rows(fwd.states, &rows);
        let z = self.head(tape, b, self.proj_image, q);
        match self.cfg.pooling {
            Pooling::Max => Ok((tape.l2_normalize_rows(z)?, self.cfg.num_queries)),
            Pooling::Mean => {
                let m = tape.group_mean_rows(z, self.cfg.num_queries);
                Ok((tape.l2_normalize_rows(m)?, 1))
            }
        }
    }

    /// Unit-norm contrastive embedding of each sequence's first text token.
    pub fn text_itc(&self, tape: &mut Tape, b: &Binding, fwd: &BatchForward) -> Result<Var> {
        if fwd.seqs.iter().any(|s| s.layout.num_text == 0) {
            return Err(Error::Invalid("text embedding of an empty token list".into()));
        }
        let rows = fwd.first_text_rows();
        let t = tape.gather_rows(fwd.states, &rows);
        let z = self.head(tape, b, self.proj_text, t);
        tape.l2_normalize_rows(z)
    }

    /// Matching logits `[n × 2]` (column 1 = matched): the linear head applied
    /// per query, averaged over queries.
    pub fn itm_logits(&self, tape: &mut Tape, b: &Binding, fwd: &BatchForward) -> Result<Var> {
        let rows = fwd.query_rows();
        if rows.len() != fwd.seqs.len() * self.cfg.num_queries {
            return Err(Error::Invalid("matching needs an image in every sequence".into()));
        }
        let q = tape.gather_rows(fwd.states, &rows);
        let per_query = self.head(tape, b, self.itm_head, q);
        Ok(tape.group_mean_rows(per_query, self.cfg.num_queries))
    }

    /// Next-token logits at the given rows.
    pub fn lm_logits(&self, tape: &mut Tape, b: &Binding, fwd: &BatchForward, rows: &[usize]) -> Var {
        let h = tape.gather_rows(fwd.states, rows);
        self.head(tape, b, self.lm_head, h)
    }

    /// Encodes images through the query branch; returns `(query_states, itc)`
    /// where `query_states` is `[n·num_queries × d]`.
    pub fn encode_images(
        &self,
        tape: &mut Tape,
        b: &Binding,
        images: &[&Tensor],
    ) -> Result<(Var, Var)> {
        let seqs: Vec<SeqInput> = images.iter().map(|img| SeqInput::image_only(img)).collect();
        let fwd = self.forward(tape, b, &seqs, MaskKind::Unimodal)?;
        let (itc, _) = self.image_itc(tape, b, &fwd)?;
        let q = tape.gather_rows(fwd.states, &fwd.query_rows());
        Ok((q, itc))
    }

    /// Encodes `[CLS] + tokens` for each caption through the text branch.
    pub fn encode_texts(&self, tape: &mut Tape, b: &Binding, captions: &[&[usize]]) -> Result<Var> {
        let cls = self.vocab().cls();
        let with_cls: Vec<Vec<usize>> = captions
            .iter()
            .map(|c| std::iter::once(cls).chain(c.iter().copied()).collect())
            .collect();
        let seqs: Vec<SeqInput> = with_cls.iter().map(|t| SeqInput::text_only(t)).collect();
        let fwd = self.forward(tape, b, &seqs, MaskKind::Unimodal)?;
        self.text_itc(tape, b, &fwd)
    }

    /// Mutable access to a parameter by name, for tests and surgery.
    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.by_name_mut(name).map(|p| &mut p.value)
    }

    pub fn zero_head(&mut self, which: &str) {
        for suffix in ["w", "b"] {
            if let Some(t) = self.param_mut(&format!("{which}.{suffix}")) {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            num_queries: 2,
            d: 8,
            layers: 2,
            heads: 2,
            d_itc: 4,
            ffn: 12,
            num_objects: 6,
            max_positions: 8,
            max_concepts: 2,
            num_patches: 3,
            enc_dim: 5,
            d_llm: 6,
            pooling: Pooling::Max,
        }
    }

    fn image(seed: u64, cfg: &ModelConfig) -> Tensor {
        let data = (0..cfg.num_patches * cfg.enc_dim)
            .map(|i| ((i as f64 + 1.0) * (seed as f64 + 0.7)).sin())
            .collect();
        Tensor::matrix(cfg.num_patches, cfg.enc_dim, data).unwrap()
    }

    #[test]
    fn shapes_and_norms() {
        let cfg = tiny();
        let m = BridgeModel::new(&cfg, 42).unwrap();
        let mut tape = Tape::new();
        let b = m.bind(&mut tape, false);
        let imgs = [image(1, &cfg), image(2, &cfg)];
        let (q, itc) = m.encode_images(&mut tape, &b, &[&imgs[0], &imgs[1]]).unwrap();
        assert_eq!(tape.value(q).shape(), &[4, 8]);
        assert_eq!(tape.value(itc).shape(), &[4, 4]);
        for i in 0..4 {
            let r = tape.value(itc).row(i);
            assert!((r.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-9);
        }
        let t = m.encode_texts(&mut tape, &b, &[&[0, 3], &[5]]).unwrap();
        assert_eq!(tape.value(t).shape(), &[2, 4]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let cfg = tiny();
        let m = BridgeModel::new(&cfg, 1).unwrap();
        let mut tape = Tape::new();
        let b = m.bind(&mut tape, false);
        assert!(matches!(
            m.encode_texts(&mut tape, &b, &[&[99]]),
            Err(Error::TokenOutOfRange { .. })
        ));
        let bad = Tensor::zeros(&[3, 4]);
        assert!(m.encode_images(&mut tape, &b, &[&bad]).is_err());
        let img = image(0, &cfg);
        let seq = SeqInput {
            image: Some(&img),
            concepts: &[0, 1, 2],
            text: &[1],
        };
        assert!(m.forward(&mut tape, &b, &[seq], MaskKind::Bidirectional).is_err());
    }

    #[test]
    fn batching_matches_single_sequences() {
        let cfg = tiny();
        let m = BridgeModel::new(&cfg, 9).unwrap();
        let imgs = [image(3, &cfg), image(4, &cfg)];
        let seqs = [
            SeqInput {
                image: Some(&imgs[0]),
                concepts: &[1],
                text: &[7, 2, 3],
            },
            SeqInput {
                image: Some(&imgs[1]),
                concepts: &[0, 4],
                text: &[7, 5],
            },
        ];
        let mut tape = Tape::new();
        let b = m.bind(&mut tape, false);
        let fwd = m.forward(&mut tape, &b, &seqs, MaskKind::MultimodalCausal).unwrap();
        let all = tape.value(fwd.states).clone();
        for (k, seq) in seqs.iter().enumerate() {
            let mut t2 = Tape::new();
            let b2 = m.bind(&mut t2, false);
            let one = m.forward(&mut t2, &b2, &[*seq], MaskKind::MultimodalCausal).unwrap();
            let rows = fwd.seqs[k];
            for r in 0..rows.layout.total() {
                let a = all.row(rows.start + r);
                let c = t2.value(one.states).row(r);
                for (x, y) in a.iter().zip(c) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }
}
