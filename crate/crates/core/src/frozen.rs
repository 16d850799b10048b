//! Frozen stand-ins for the image encoder, the decoder language model and the
//! pre-trained retrieval model used for concept lookup.

use std::collections::HashMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AttnBlock, AttnSpec, Var};
use crate::error::{Error, Result};
use crate::masks::{build_multimodal_causal_mask, SegmentLayout};
use crate::model::{add_attn, add_ffn, add_norm, attend, ffn, norm, AttnIds, FfnIds, NormIds, Vocab};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::{Binding, ParamId, ParamStore};
use crate::{Tape, Tensor};

/// Seeded linear map from raw image features to a patch sequence.
#[derive(Clone, Debug)]
pub struct FrozenImageEncoder {
    raw_dim: usize,
    num_patches: usize,
    enc_dim: usize,
    seed: u64,
    params: ParamStore,
}

impl FrozenImageEncoder {
    pub fn new(raw_dim: usize, num_patches: usize, enc_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = (3.0 / raw_dim as f64).sqrt();
        let mut params = ParamStore::new();
        params.add_uniform("projection", &[raw_dim, num_patches * enc_dim], bound, &mut rng);
        params.freeze_all();
        Self {
            raw_dim,
            num_patches,
            enc_dim,
            seed,
            params,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn content_hash(&self) -> String {
        self.params.content_hash()
    }

    /// `[num_patches × enc_dim]` features of one image.
    pub fn image_encode(&self, raw: &[f64]) -> Result<Tensor> {
        if raw.len() != self.raw_dim {
            return Err(Error::Shape(format!(
                "raw features of length {}, encoder expects {}",
                raw.len(),
                self.raw_dim
            )));
        }
        let w = &self.params.iter().next().expect("projection").value;
        let out = crate::tensor::gemm_nn(raw, w.data(), 1, self.raw_dim, w.cols());
        Tensor::matrix(self.num_patches, self.enc_dim, out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub d_llm: usize,
    pub heads: usize,
    pub ffn: usize,
    pub layers: usize,
    pub max_positions: usize,
    pub pretrain_steps: usize,
    pub pretrain_batch: usize,
    pub pretrain_lr: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            d_llm: 32,
            heads: 4,
            ffn: 64,
            layers: 1,
            max_positions: 16,
            pretrain_steps: 300,
            pretrain_batch: 32,
            pretrain_lr: 3e-3,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct DecoderLayer {
    attn: AttnIds,
    ln_attn: NormIds,
    ffn: FfnIds,
    ln_ffn: NormIds,
}

/// Toy causal transformer decoder. A prefix of embeddings conditions the
/// text additively: the mean prefix row is added to every input position, so
/// an all-zero prefix reproduces the unconditional model exactly.
#[derive(Clone, Debug)]
pub struct FrozenDecoderLM {
    cfg: DecoderConfig,
    vocab: Vocab,
    params: ParamStore,
    tok_emb: ParamId,
    pos_emb: ParamId,
    layers: Vec<DecoderLayer>,
    out_w: ParamId,
    out_b: ParamId,
}

impl FrozenDecoderLM {
    /// Fresh, still trainable decoder. Call [`pretrain`](Self::pretrain) or
    /// [`freeze`](Self::freeze) before use as a frozen component.
    pub fn new(cfg: &DecoderConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        if cfg.d_llm == 0 || cfg.heads == 0 || cfg.d_llm % cfg.heads != 0 {
            return Err(Error::Invalid(format!(
                "decoder width {} incompatible with {} heads",
                cfg.d_llm, cfg.heads
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d_llm;
        let bound = 1.0 / (d as f64).sqrt();
        let mut s = ParamStore::new();
        let tok_emb = s.add_uniform("decoder.token_embedding", &[vocab.size(), d], bound, &mut rng);
        let pos_emb =
            s.add_uniform("decoder.position_embedding", &[cfg.max_positions, d], bound, &mut rng);
        let layers = (0..cfg.layers)
            .map(|l| {
                let p = format!("decoder.layers.{l}");
                DecoderLayer {
                    attn: add_attn(&mut s, &format!("{p}.attn"), d, d, bound, &mut rng),
                    ln_attn: add_norm(&mut s, &format!("{p}.ln_attn"), d),
                    ffn: add_ffn(&mut s, &format!("{p}.ffn"), d, cfg.ffn, bound, &mut rng),
                    ln_ffn: add_norm(&mut s, &format!("{p}.ln_ffn"), d),
                }
            })
            .collect();
        let out_w = s.add_uniform("decoder.out.w", &[d, vocab.size()], bound, &mut rng);
        let out_b = s.add_constant("decoder.out.b", &[vocab.size()], 0.0);
        Ok(Self {
            cfg: cfg.clone(),
            vocab,
            params: s,
            tok_emb,
            pos_emb,
            layers,
            out_w,
            out_b,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn freeze(&mut self) {
        self.params.freeze_all();
    }

    pub fn is_frozen(&self) -> bool {
        self.params.iter().all(|p| p.frozen)
    }

    pub fn content_hash(&self) -> String {
        self.params.content_hash()
    }

    /// Binds parameters; once frozen they are constants on the tape.
    pub fn bind(&self, tape: &mut Tape) -> Binding {
        self.params.bind(tape, true)
    }

    /// Logits `[Σ len(tokens_i) × vocab]` for each position of each sequence.
    /// `prefix`, when given, is `[n·P × d_llm]` with `P` rows per sequence.
    pub fn decoder_logits(
        &self,
        tape: &mut Tape,
        b: &Binding,
        prefix: Option<(Var, usize)>,
        tokens: &[&[usize]],
    ) -> Result<Var> {
        let vocab = self.vocab.size();
        let mut ids = Vec::new();
        let mut pos = Vec::new();
        let mut owner = Vec::new();
        let mut blocks = Vec::with_capacity(tokens.len());
        for (s, seq) in tokens.iter().enumerate() {
            if seq.is_empty() {
                return Err(Error::Invalid("decoder sequence is empty".into()));
            }
            if seq.len() > self.cfg.max_positions {
                return Err(Error::Invalid(format!(
                    "decoder sequence of {} exceeds {} positions",
                    seq.len(),
                    self.cfg.max_positions
                )));
            }
            if let Some(&id) = seq.iter().find(|&&t| t >= vocab) {
                return Err(Error::TokenOutOfRange { id, vocab });
            }
            let mask = Arc::new(build_multimodal_causal_mask(SegmentLayout::new(0, 0, seq.len())?));
            blocks.push(AttnBlock {
                q_start: ids.len(),
                q_len: seq.len(),
                k_start: ids.len(),
                k_len: seq.len(),
                mask: Some(mask),
            });
            for (p, &t) in seq.iter().enumerate() {
                ids.push(t);
                pos.push(p);
                owner.push(s);
            }
        }
        let t = tape.gather_rows(b.var(self.tok_emb), &ids);
        let p = tape.gather_rows(b.var(self.pos_emb), &pos);
        let mut x = tape.add(t, p);
        if let Some((pre, per_seq)) = prefix {
            if per_seq > 0 {
                let pt = tape.value(pre);
                if pt.cols() != self.cfg.d_llm || pt.rows() != per_seq * tokens.len() {
                    return Err(Error::Shape(format!(
                        "prefix {:?} for {} sequences of {} rows at width {}",
                        pt.shape(),
                        tokens.len(),
                        per_seq,
                        self.cfg.d_llm
                    )));
                }
                let pooled = tape.group_mean_rows(pre, per_seq);
                let spread = tape.gather_rows(pooled, &owner);
                x = tape.add(x, spread);
            }
        }
        let spec = Arc::new(AttnSpec {
            heads: self.cfg.heads,
            blocks,
        });
        for layer in &self.layers {
            let a = attend(tape, b, layer.attn, x, x, spec.clone())?;
            let r = tape.add(x, a);
            x = norm(tape, b, layer.ln_attn, r);
            let f = ffn(tape, b, layer.ffn, x);
            let r = tape.add(x, f);
            x = norm(tape, b, layer.ln_ffn, r);
        }
        Ok(tape.linear(x, b.var(self.out_w), Some(b.var(self.out_b))))
    }

    /// Mean next-token cross-entropy of `[DEC] caption → caption [EOS]`.
    pub fn lm_loss(
        &self,
        tape: &mut Tape,
        b: &Binding,
        prefix: Option<(Var, usize)>,
        captions: &[&[usize]],
    ) -> Result<Var> {
        let (inputs, targets) = teacher_forcing(self.vocab, captions);
        let refs: Vec<&[usize]> = inputs.iter().map(Vec::as_slice).collect();
        let logits = self.decoder_logits(tape, b, prefix, &refs)?;
        let ls = tape.log_softmax_rows(logits)?;
        let picked = tape.pick(ls, &targets);
        let m = tape.mean(picked);
        Ok(tape.scale(m, -1.0))
    }

    /// Unconditional language-model pre-training on `captions`, then freezing.
    /// Returns the loss trace.
    pub fn pretrain(&mut self, captions: &[Vec<usize>], seed: u64) -> Result<Vec<f64>> {
        if captions.is_empty() {
            return Err(Error::Invalid("no captions to pre-train the decoder on".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut opt = AdamW::new(
            &self.params,
            AdamWConfig {
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
        );
        let mut order: Vec<usize> = (0..captions.len()).collect();
        let mut trace = Vec::with_capacity(self.cfg.pretrain_steps);
        let batch = self.cfg.pretrain_batch.min(captions.len()).max(1);
        let mut cursor = order.len();
        for _ in 0..self.cfg.pretrain_steps {
            if cursor + batch > order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let picked: Vec<&[usize]> = order[cursor..cursor + batch]
                .iter()
                .map(|&i| captions[i].as_slice())
                .collect();
            cursor += batch;
            let mut tape = Tape::new();
            let b = self.bind(&mut tape);
            let loss = self.lm_loss(&mut tape, &b, None, &picked)?;
            trace.push(tape.value(loss).item());
            let mut g = tape.backward(loss)?;
            let grads = self.params.collect_grads(&b, &mut g);
            opt.step(&mut self.params, &grads, self.cfg.pretrain_lr)?;
        }
        self.freeze();
        Ok(trace)
    }
}

/// `([DEC] c_1..c_T, c_1..c_T [EOS])` per caption; targets are flattened.
pub fn teacher_forcing(vocab: Vocab, captions: &[&[usize]]) -> (Vec<Vec<usize>>, Vec<usize>) {
    let mut inputs = Vec::with_capacity(captions.len());
    let mut targets = Vec::new();
    for c in captions {
        inputs.push(std::iter::once(vocab.dec()).chain(c.iter().copied()).collect());
        targets.extend(c.iter().copied());
        targets.push(vocab.eos());
    }
    (inputs, targets)
}

pub const DEFAULT_PROMPT: &str = "a photo of a {noun}";

/// Retrieval model stand-in with an orthonormal concept basis. Image
/// embeddings are the normalized projection of raw features onto the object
/// basis, and each noun embeds to its own basis vector, so image-noun
/// similarity is exact on noise-free images.
#[derive(Clone, Debug)]
pub struct RetrievalVlmStub {
    nouns: Vec<String>,
    index: HashMap<String, usize>,
    /// Object directions in raw feature space, one per noun.
    basis: Vec<Vec<f64>>,
}

impl RetrievalVlmStub {
    pub fn new(nouns: Vec<String>, basis: Vec<Vec<f64>>) -> Result<Self> {
        if nouns.len() != basis.len() || nouns.is_empty() {
            return Err(Error::Invalid("one basis vector per noun required".into()));
        }
        let index = nouns.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Ok(Self {
            nouns,
            index,
            basis,
        })
    }

    pub fn nouns(&self) -> &[String] {
        &self.nouns
    }

    pub fn noun_index(&self, noun: &str) -> Result<usize> {
        self.index
            .get(noun)
            .copied()
            .ok_or_else(|| Error::UnknownNoun(noun.to_string()))
    }

    /// Unit vector in concept space.
    pub fn vp_embed(&self, raw: &[f64]) -> Result<Vec<f64>> {
        let dim = self.basis[0].len();
        if raw.len() != dim {
            return Err(Error::Shape(format!("raw features of length {}, expected {dim}", raw.len())));
        }
        let coords: Vec<f64> = self.basis.iter().map(|b| crate::tensor::dot(b, raw)).collect();
        let n = crate::tensor::dot(&coords, &coords).sqrt();
        if n == 0.0 {
            return Err(Error::DegenerateEmbedding);
        }
        Ok(coords.into_iter().map(|c| c / n).collect())
    }

    /// Unit vector of `prompt` filled with `noun`. The prompt must contain a
    /// `{noun}` slot; it is shared by every noun and does not move the embedding.
    pub fn tp_embed(&self, prompt: &str, noun: &str) -> Result<Vec<f64>> {
        if !prompt.contains("{noun}") {
            return Err(Error::Invalid(format!("prompt `{prompt}` has no {{noun}} slot")));
        }
        let k = self.noun_index(noun)?;
        let mut e = vec![0.0; self.nouns.len()];
        e[k] = 1.0;
        Ok(e)
    }
}

/// `count` orthonormal vectors of length `dim` (Gram–Schmidt on Gaussian draws).
pub fn orthonormal_basis(count: usize, dim: usize, rng: &mut impl Rng) -> Result<Vec<Vec<f64>>> {
    if count > dim {
        return Err(Error::Invalid(format!(
            "cannot fit {count} orthonormal vectors in dimension {dim}"
        )));
    }
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    while out.len() < count {
        let mut v: Vec<f64> = (0..dim)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        for _ in 0..2 {
            for b in &out {
                let p = crate::tensor::dot(&v, b);
                v.iter_mut().zip(b).for_each(|(x, &y)| *x -= p * y);
            }
        }
        let n = crate::tensor::dot(&v, &v).sqrt();
        if n < 1e-6 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= n);
        out.push(v);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stub() -> RetrievalVlmStub {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let basis = orthonormal_basis(4, 6, &mut rng).unwrap();
        let nouns = (0..4).map(|k| format!("n{k}")).collect();
        RetrievalVlmStub::new(nouns, basis).unwrap()
    }

    fn image_of(s: &RetrievalVlmStub, objs: &[usize]) -> Vec<f64> {
        let mut raw = vec![0.0; 6];
        for &o in objs {
            raw.iter_mut().zip(&s.basis[o]).for_each(|(r, b)| *r += b);
        }
        raw
    }

    #[test]
    fn stub_similarities_are_exact() {
        let s = stub();
        let one = s.vp_embed(&image_of(&s, &[3])).unwrap();
        let t3 = s.tp_embed(DEFAULT_PROMPT, "n3").unwrap();
        assert!((crate::tensor::dot(&one, &t3) - 1.0).abs() < 1e-9);
        let two = s.vp_embed(&image_of(&s, &[1, 3])).unwrap();
        let r = std::f64::consts::FRAC_1_SQRT_2;
        for (noun, want) in [("n1", r), ("n3", r), ("n2", 0.0)] {
            let t = s.tp_embed(DEFAULT_PROMPT, noun).unwrap();
            assert!((crate::tensor::dot(&two, &t) - want).abs() < 1e-9);
        }
        assert!((crate::tensor::dot(&two, &two) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn stub_errors() {
        let s = stub();
        assert!(matches!(s.tp_embed(DEFAULT_PROMPT, "zebra"), Err(Error::UnknownNoun(_))));
        assert!(s.tp_embed("no slot", "n1").is_err());
        assert!(matches!(s.vp_embed(&[0.0; 6]), Err(Error::DegenerateEmbedding)));
    }

    #[test]
    fn image_encoder_is_linear_and_checked() {
        let enc = FrozenImageEncoder::new(6, 2, 3, 7);
        let z = enc.image_encode(&[0.0; 6]).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert_eq!(z.shape(), &[2, 3]);
        assert!(enc.image_encode(&[0.0; 5]).is_err());
        assert_eq!(enc.content_hash(), FrozenImageEncoder::new(6, 2, 3, 7).content_hash());
    }

    #[test]
    fn decoder_shapes_and_errors() {
        let vocab = Vocab { num_objects: 5 };
        let cfg = DecoderConfig {
            d_llm: 8,
            heads: 2,
            ffn: 8,
            ..DecoderConfig::default()
        };
        let mut lm = FrozenDecoderLM::new(&cfg, vocab, 3).unwrap();
        lm.freeze();
        let mut tape = Tape::new();
        let b = lm.bind(&mut tape);
        let logits = lm.decoder_logits(&mut tape, &b, None, &[&[2]]).unwrap();
        assert_eq!(tape.value(logits).shape(), &[1, vocab.size()]);
        assert!(matches!(
            lm.decoder_logits(&mut tape, &b, None, &[&[vocab.size()]]),
            Err(Error::TokenOutOfRange { .. })
        ));
    }
}
