//! Image-text contrastive losses over an in-batch similarity matrix.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Tolerance on the unit-norm precondition of [`similarity_matrix`].
pub const UNIT_NORM_TOL: f64 = 1e-6;

/// How per-query image embeddings are reduced against one text embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// `s_ij = max_q ⟨z_iq, t_j⟩`; image rows come in groups of `num_queries`.
    Max,
    /// One embedding per image (queries averaged before normalization).
    Mean,
}

fn check_unit_rows<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<()> {
    for i in 0..t.rows() {
        let n = crate::tensor::dot(t.row(i), t.row(i)).sqrt();
        if (n - T::one()).abs() > T::lit(UNIT_NORM_TOL) || !n.is_finite() {
            return Err(Error::Invalid(format!("{what} row {i} has norm {n}, expected 1")));
        }
    }
    Ok(())
}

/// `s[i][j] = ⟨v_i, t_j⟩ / τ`, max-pooled over `group` image rows per image
/// when `group > 1`.
pub fn similarity_matrix<T: Scalar>(
    tape: &mut Tape<T>,
    image: Var,
    text: Var,
    tau: T,
    group: usize,
) -> Result<Var> {
    if !(tau > T::zero()) {
        return Err(Error::Invalid(format!("temperature {tau} must be positive")));
    }
    check_unit_rows(tape.value(image), "image embedding")?;
    check_unit_rows(tape.value(text), "text embedding")?;
    if tape.value(image).cols() != tape.value(text).cols() {
        return Err(Error::Shape("image/text embedding widths differ".into()));
    }
    if group == 0 || tape.value(image).rows() % group != 0 {
        return Err(Error::Shape(format!(
            "{} image rows not divisible into groups of {group}",
            tape.value(image).rows()
        )));
    }
    let raw = tape.matmul_bt(image, text);
    let pooled = if group > 1 {
        tape.group_max_rows(raw, group)
    } else {
        raw
    };
    if tape.value(pooled).rows() != tape.value(pooled).cols() {
        return Err(Error::Shape("image and text batch sizes differ".into()));
    }
    Ok(if tau == T::one() {
        pooled
    } else {
        tape.scale(pooled, T::one() / tau)
    })
}

fn batch_of<T: Scalar>(tape: &Tape<T>, s: Var) -> Result<usize> {
    let t = tape.value(s);
    if t.shape().len() != 2 || t.rows() != t.cols() {
        return Err(Error::Shape(format!("similarity must be square, got {:?}", t.shape())));
    }
    if t.rows() < 2 {
        return Err(Error::Invalid("contrastive losses need a batch of at least 2".into()));
    }
    Ok(t.rows())
}

/// Per-row cross-entropy against the diagonal target, after adding a
/// constant offset matrix to the logits.
fn diagonal_ce<T: Scalar>(tape: &mut Tape<T>, logits: Var, offset: Option<Tensor<T>>) -> Result<Var> {
    let b = tape.value(logits).rows();
    let adjusted = match offset {
        Some(o) => {
            let c = tape.constant(o);
            tape.add(logits, c)
        }
        None => logits,
    };
    let ls = tape.log_softmax_rows(adjusted)?;
    let diag: Vec<usize> = (0..b).collect();
    let picked = tape.pick(ls, &diag);
    Ok(tape.scale(picked, -T::one()))
}

/// `ℓ_i = ½(CE_row(i) + CE_col(i))`, a length-`B` vector.
pub fn per_sample_itc<T: Scalar>(tape: &mut Tape<T>, s: Var) -> Result<Var> {
    batch_of(tape, s)?;
    let rows = diagonal_ce(tape, s, None)?;
    let st = tape.transpose(s);
    let cols = diagonal_ce(tape, st, None)?;
    let both = tape.add(rows, cols);
    Ok(tape.scale(both, T::lit(0.5)))
}

/// Symmetric InfoNCE: `(1/2B) Σ_i [CE_row(i) + CE_col(i)]`.
pub fn itc_loss<T: Scalar>(tape: &mut Tape<T>, s: Var) -> Result<Var> {
    let per = per_sample_itc(tape, s)?;
    Ok(tape.mean(per))
}

/// Logit offsets realizing the noise-adaptive weighting: the positive is
/// weighted by `1 − ω_i` and each negative by `ω_i/(B−1)`. In `strict`
/// mode negatives keep weight 1, giving a full-softmax denominator.
fn nitc_offsets<T: Scalar>(omega: &[T], strict: bool) -> Tensor<T> {
    let b = omega.len();
    let mut data = vec![T::zero(); b * b];
    let spread = T::from_usize(b - 1).unwrap();
    for (i, &w) in omega.iter().enumerate() {
        let neg = if strict { T::zero() } else { (w / spread).ln() };
        for j in 0..b {
            data[i * b + j] = if i == j { (T::one() - w).ln() } else { neg };
        }
    }
    Tensor::matrix(b, b, data).unwrap()
}

/// Per-pair noise-adaptive losses `(ℒˣ_i, ℒʸ_i)` as two length-`B` vectors.
/// `ℒˣ` reads row `i` of `s` (image→text), `ℒʸ` reads column `i`.
pub fn nitc_terms<T: Scalar>(
    tape: &mut Tape<T>,
    s: Var,
    omega: &[T],
    strict: bool,
) -> Result<(Var, Var)> {
    let b = batch_of(tape, s)?;
    if omega.len() != b {
        return Err(Error::Shape(format!("{} smoothing rates for batch {b}", omega.len())));
    }
    if let Some(w) = omega.iter().find(|w| !(**w >= T::zero() && **w < T::one())) {
        return Err(Error::Invalid(format!("smoothing rate {w} outside [0, 1)")));
    }
    let offsets = nitc_offsets(omega, strict);
    let lx = diagonal_ce(tape, s, Some(offsets.clone()))?;
    let st = tape.transpose(s);
    let ly = diagonal_ce(tape, st, Some(offsets))?;
    Ok((lx, ly))
}

/// Noise-adaptive contrastive loss `(1/2B) Σ_i (ℒˣ_i + ℒʸ_i)`.
pub fn nitc_loss<T: Scalar>(tape: &mut Tape<T>, s: Var, omega: &[T], strict: bool) -> Result<Var> {
    let (lx, ly) = nitc_terms(tape, s, omega, strict)?;
    let both = tape.add(lx, ly);
    let total = tape.sum(both);
    let b = T::from_usize(omega.len()).unwrap();
    Ok(tape.scale(total, T::one() / (b + b)))
}

fn sample_excluding<T: Scalar, R: Rng + ?Sized>(scores: &[T], skip: usize, rng: &mut R) -> usize {
    let m = scores
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != skip)
        .fold(T::neg_infinity(), |m, (_, &v)| m.max(v));
    let weights: Vec<f64> = scores
        .iter()
        .enumerate()
        .map(|(j, &v)| if j == skip { 0.0 } else { (v - m).exp().as_f64() })
        .collect();
    let total: f64 = weights.iter().sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = usize::MAX;
    for (j, &w) in weights.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        acc += w;
        last = j;
        if u < acc {
            return j;
        }
    }
    last
}

/// For each image `i`, a text index `j ≠ i` drawn with probability
/// `∝ exp(s_ij)`; for each text, an image index drawn over its column.
pub fn mine_hard_negatives<T: Scalar, R: Rng + ?Sized>(
    s: &Tensor<T>,
    rng: &mut R,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let b = s.rows();
    if s.cols() != b || b < 2 {
        return Err(Error::Invalid("hard negative mining needs a square batch of at least 2".into()));
    }
    if !s.all_finite() {
        return Err(Error::NonFinite);
    }
    let neg_text = (0..b).map(|i| sample_excluding(s.row(i), i, rng)).collect();
    let neg_image = (0..b)
        .map(|j| {
            let col: Vec<T> = (0..b).map(|i| s.at(i, j)).collect();
            sample_excluding(&col, j, rng)
        })
        .collect();
    Ok((neg_text, neg_image))
}
