//! Concept-enhanced image-text matching.

use super::PairRef;
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::masks::MaskKind;
use crate::model::{BridgeModel, SeqInput};
use crate::params::Binding;
use crate::Tape;

/// One matching example: a sequence `(image, concepts, [CLS] text)` and its
/// label (`true` = matched).
#[derive(Clone, Debug)]
pub struct ItmExample<'a> {
    pub image: &'a crate::Tensor,
    pub concepts: &'a [usize],
    pub text: Vec<usize>,
    pub matched: bool,
}

/// Per-example matching cross-entropy, a length-`n` vector, under the
/// bidirectional mask.
pub fn itm_example_losses(
    model: &BridgeModel,
    tape: &mut Tape,
    b: &Binding,
    examples: &[ItmExample<'_>],
) -> Result<Var> {
    let seqs: Vec<SeqInput> = examples
        .iter()
        .map(|e| SeqInput {
            image: Some(e.image),
            concepts: e.concepts,
            text: &e.text,
        })
        .collect();
    let fwd = model.forward(tape, b, &seqs, MaskKind::Bidirectional)?;
    let logits = model.itm_logits(tape, b, &fwd)?;
    let ls = tape.log_softmax_rows(logits)?;
    let labels: Vec<usize> = examples.iter().map(|e| e.matched as usize).collect();
    let picked = tape.pick(ls, &labels);
    Ok(tape.scale(picked, -1.0))
}

/// Builds the `3B` examples: every positive, each image with its mined
/// negative text, and each text with its mined negative image (carrying that
/// image's concepts).
pub fn citm_examples<'a>(
    model: &BridgeModel,
    pairs: &[PairRef<'a>],
    neg_text: &[usize],
    neg_image: &[usize],
) -> Result<Vec<ItmExample<'a>>> {
    let n = pairs.len();
    if neg_text.len() != n || neg_image.len() != n {
        return Err(Error::Shape("one mined negative per pair required".into()));
    }
    if let Some(&j) = neg_text.iter().chain(neg_image).find(|&&j| j >= n) {
        return Err(Error::Invalid(format!("negative index {j} outside batch of {n}")));
    }
    let cls = model.vocab().cls();
    let text = |c: &[usize]| std::iter::once(cls).chain(c.iter().copied()).collect::<Vec<_>>();
    let mut out = Vec::with_capacity(3 * n);
    for p in pairs {
        out.push(ItmExample {
            image: p.image,
            concepts: p.concepts,
            text: text(p.caption),
            matched: true,
        });
    }
    for (i, p) in pairs.iter().enumerate() {
        out.push(ItmExample {
            image: p.image,
            concepts: p.concepts,
            text: text(pairs[neg_text[i]].caption),
            matched: false,
        });
    }
    for (j, p) in pairs.iter().enumerate() {
        let img = &pairs[neg_image[j]];
        out.push(ItmExample {
            image: img.image,
            concepts: img.concepts,
            text: text(p.caption),
            matched: false,
        });
    }
    Ok(out)
}

/// Mean matching cross-entropy over the `3B` examples with labels `(1, 0, 0)`.
pub fn citm_loss(
    model: &BridgeModel,
    tape: &mut Tape,
    b: &Binding,
    pairs: &[PairRef<'_>],
    neg_text: &[usize],
    neg_image: &[usize],
) -> Result<Var> {
    let examples = citm_examples(model, pairs, neg_text, neg_image)?;
    let per = itm_example_losses(model, tape, b, &examples)?;
    Ok(tape.mean(per))
}

/// Matched-class logit for each `(image, concepts, caption)` candidate, used
/// to rerank retrieval candidates.
pub fn itm_scores(
    model: &BridgeModel,
    tape: &mut Tape,
    b: &Binding,
    pairs: &[PairRef<'_>],
) -> Result<Vec<f64>> {
    let cls = model.vocab().cls();
    let texts: Vec<Vec<usize>> = pairs
        .iter()
        .map(|p| std::iter::once(cls).chain(p.caption.iter().copied()).collect())
        .collect();
    let seqs: Vec<SeqInput> = pairs
        .iter()
        .zip(&texts)
        .map(|(p, t)| SeqInput {
            image: Some(p.image),
            concepts: p.concepts,
            text: t,
        })
        .collect();
    let fwd = model.forward(tape, b, &seqs, MaskKind::Bidirectional)?;
    let logits = model.itm_logits(tape, b, &fwd)?;
    let v = tape.value(logits);
    Ok((0..v.rows()).map(|i| v.at(i, 1)).collect())
}
