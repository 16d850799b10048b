//! Self-attention masks over a `(queries | concepts | text)` layout.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{AttnSpec, Tape};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SegmentLayout {
    pub num_queries: usize,
    pub num_concepts: usize,
    pub num_text: usize,
}

impl SegmentLayout {
    pub fn new(num_queries: usize, num_concepts: usize, num_text: usize) -> Result<Self> {
        if num_queries + num_concepts + num_text == 0 {
            return Err(Error::Invalid("layout has no positions".into()));
        }
        Ok(Self {
            num_queries,
            num_concepts,
            num_text,
        })
    }

    pub fn total(&self) -> usize {
        self.num_queries + self.num_concepts + self.num_text
    }

    pub fn text_start(&self) -> usize {
        self.num_queries + self.num_concepts
    }

    fn segment(&self, pos: usize) -> Segment {
        if pos < self.num_queries {
            Segment::Query
        } else if pos < self.text_start() {
            Segment::Concept
        } else {
            Segment::Text
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Segment {
    Query,
    Concept,
    Text,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    Unimodal,
    MultimodalCausal,
    Bidirectional,
}

/// Square boolean matrix; `allows(r, c)` means position `r` may attend to `c`.
#[derive(Clone, PartialEq, Eq)]
pub struct AttentionMask {
    kind: MaskKind,
    size: usize,
    allow: Vec<bool>,
}

impl AttentionMask {
    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    pub fn allows(&self, row: usize, col: usize) -> bool {
        self.allow[row * self.size + col]
    }

    pub fn to_rows(&self) -> Vec<Vec<u8>> {
        self.allow
            .chunks(self.size)
            .map(|r| r.iter().map(|&b| b as u8).collect())
            .collect()
    }

    /// Only the diagonal allowed.
    pub fn diagonal(size: usize) -> Self {
        let mut allow = vec![false; size * size];
        for i in 0..size {
            allow[i * size + i] = true;
        }
        Self {
            kind: MaskKind::Unimodal,
            size,
            allow,
        }
    }

    fn from_rule(kind: MaskKind, layout: SegmentLayout, rule: impl Fn(usize, usize) -> bool) -> Self {
        let n = layout.total();
        let mut allow = Vec::with_capacity(n * n);
        for r in 0..n {
            for c in 0..n {
                allow.push(rule(r, c));
            }
        }
        Self {
            kind,
            size: n,
            allow,
        }
    }

    pub fn build(kind: MaskKind, layout: SegmentLayout) -> Result<Self> {
        match kind {
            MaskKind::Unimodal => build_unimodal_mask(layout),
            MaskKind::MultimodalCausal => Ok(build_multimodal_causal_mask(layout)),
            MaskKind::Bidirectional => Ok(build_bidirectional_mask(layout)),
        }
    }
}

impl fmt::Debug for AttentionMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "AttentionMask({:?}, {}x{})", self.kind, self.size, self.size)?;
        for row in self.allow.chunks(self.size) {
            let s: String = row.iter().map(|&b| if b { '1' } else { '.' }).collect();
            writeln!(f, "  {s}")?;
        }
        Ok(())
    }
}

/// Queries and text each attend only within their own segment.
pub fn build_unimodal_mask(layout: SegmentLayout) -> Result<AttentionMask> {
    if layout.num_concepts != 0 {
        return Err(Error::UnimodalConcepts);
    }
    Ok(AttentionMask::from_rule(MaskKind::Unimodal, layout, |r, c| {
        layout.segment(r) == layout.segment(c)
    }))
}

/// Queries see queries only. Concepts see queries and concepts. Text sees
/// queries, concepts and text up to and including its own position.
pub fn build_multimodal_causal_mask(layout: SegmentLayout) -> AttentionMask {
    AttentionMask::from_rule(MaskKind::MultimodalCausal, layout, |r, c| {
        match (layout.segment(r), layout.segment(c)) {
            (Segment::Query, Segment::Query) => true,
            (Segment::Query, _) => false,
            (Segment::Concept, Segment::Text) => false,
            (Segment::Concept, _) => true,
            (Segment::Text, Segment::Text) => c <= r,
            (Segment::Text, _) => true,
        }
    })
}

pub fn build_bidirectional_mask(layout: SegmentLayout) -> AttentionMask {
    AttentionMask::from_rule(MaskKind::Bidirectional, layout, |_, _| true)
}

/// Multi-head scaled dot-product attention of one sequence under `mask`,
/// recorded on `tape`.
pub fn masked_attention<T: Scalar>(
    tape: &mut Tape<T>,
    q: crate::autodiff::Var,
    k: crate::autodiff::Var,
    v: crate::autodiff::Var,
    mask: &Arc<AttentionMask>,
    heads: usize,
) -> Result<crate::autodiff::Var> {
    let len = tape.value(q).rows();
    if mask.size() != len {
        return Err(Error::Shape(format!(
            "mask size {} for sequence of {len}",
            mask.size()
        )));
    }
    tape.attention(q, k, v, Arc::new(AttnSpec::single(len, heads, Some(mask.clone()))))
}

/// Same as [`masked_attention`] on plain tensors, without recording gradients.
pub fn masked_attention_values<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    mask: &Arc<AttentionMask>,
    heads: usize,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let (q, k, v) = (
        tape.constant(q.clone()),
        tape.constant(k.clone()),
        tape.constant(v.clone()),
    );
    let out = masked_attention(&mut tape, q, k, v, mask, heads)?;
    Ok(tape.value(out).clone())
}
