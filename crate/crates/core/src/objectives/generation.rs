//! Image-grounded text generation inside the bridge, and the generative loss
//! through the frozen decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::PairRef;
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::frozen::FrozenDecoderLM;
use crate::masks::MaskKind;
use crate::model::{BridgeModel, SeqInput};
use crate::params::{Binding, ParamId, ParamStore};
use crate::{Tape, Tensor};

/// Next-token cross-entropy at every text position of
/// `[queries | concepts | [DEC] caption]`, targets `caption [EOS]`, under the
/// multimodal causal mask. Returns the flat per-token vector.
pub fn citg_token_losses(
    model: &BridgeModel,
    tape: &mut Tape,
    b: &Binding,
    pairs: &[PairRef<'_>],
) -> Result<Var> {
    let v = model.vocab();
    let mut inputs = Vec::with_capacity(pairs.len());
    let mut targets = Vec::new();
    for p in pairs {
        inputs.push(std::iter::once(v.dec()).chain(p.caption.iter().copied()).collect::<Vec<_>>());
        targets.extend(p.caption.iter().copied());
        targets.push(v.eos());
    }
    let seqs: Vec<SeqInput> = pairs
        .iter()
        .zip(&inputs)
        .map(|(p, t)| SeqInput {
            image: Some(p.image),
            concepts: p.concepts,
            text: t,
        })
        .collect();
    let fwd = model.forward(tape, b, &seqs, MaskKind::MultimodalCausal)?;
    let logits = model.lm_logits(tape, b, &fwd, &fwd.text_rows());
    let ls = tape.log_softmax_rows(logits)?;
    let picked = tape.pick(ls, &targets);
    Ok(tape.scale(picked, -1.0))
}

/// Mean per-token grounded generation loss.
pub fn citg_loss(model: &BridgeModel, tape: &mut Tape, b: &Binding, pairs: &[PairRef<'_>]) -> Result<Var> {
    let per = citg_token_losses(model, tape, b, pairs)?;
    Ok(tape.mean(per))
}

/// Fully connected map from bridge query states into the decoder's
/// embedding space.
#[derive(Clone, Debug)]
pub struct PrefixProjection {
    pub params: ParamStore,
    w: ParamId,
    b: ParamId,
}

impl PrefixProjection {
    pub fn new(d: usize, d_llm: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let bound = 1.0 / (d as f64).sqrt();
        let w = params.add_uniform("fc.w", &[d, d_llm], bound, &mut rng);
        let b = params.add_constant("fc.b", &[d_llm], 0.0);
        Self { params, w, b }
    }

    pub fn out_dim(&self) -> usize {
        self.params.get(self.w).value.cols()
    }

    pub fn bind(&self, tape: &mut Tape, with_grad: bool) -> Binding {
        self.params.bind(tape, with_grad)
    }

    pub fn apply(&self, tape: &mut Tape, b: &Binding, x: Var) -> Var {
        tape.linear(x, b.var(self.w), Some(b.var(self.b)))
    }

    pub fn zero(&mut self) {
        for id in [self.w, self.b] {
            self.params.get_mut(id).value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Bindings of the three parameter sets taking part in the generative loss.
pub struct GenBindings<'a> {
    pub bridge: &'a Binding,
    pub fc: &'a Binding,
    pub lm: &'a Binding,
}

/// Language-modeling loss of the frozen decoder on `captions`, conditioned on
/// the projected query states of `images`.
pub fn generative_loss(
    bridge: &BridgeModel,
    fc: &PrefixProjection,
    lm: &FrozenDecoderLM,
    tape: &mut Tape,
    binds: &GenBindings<'_>,
    images: &[&Tensor],
    captions: &[&[usize]],
) -> Result<Var> {
    if !lm.is_frozen() {
        return Err(Error::Invalid("generative loss requires a frozen decoder".into()));
    }
    if fc.out_dim() != lm.config().d_llm {
        return Err(Error::Shape(format!(
            "projection width {} differs from decoder width {}",
            fc.out_dim(),
            lm.config().d_llm
        )));
    }
    if images.len() != captions.len() {
        return Err(Error::Shape("one caption per image required".into()));
    }
    let (q, _) = bridge.encode_images(tape, binds.bridge, images)?;
    let prefix = fc.apply(tape, binds.fc, q);
    lm.lm_loss(tape, binds.lm, Some((prefix, bridge.config().num_queries)), captions)
}
