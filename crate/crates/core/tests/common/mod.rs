#![allow(dead_code)]

use nevlab::frozen::RetrievalVlmStub;
use nevlab::masks::AttentionMask;
use nevlab::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// Straightforward per-head, per-row masked softmax attention.
pub fn naive_attention(q: &Tensor, k: &Tensor, v: &Tensor, mask: &AttentionMask, heads: usize) -> Vec<Vec<f64>> {
    let (l, d) = (q.rows(), q.cols());
    let dh = d / heads;
    let mut out = vec![vec![0.0; d]; l];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..l {
            let mut scores = Vec::new();
            for j in 0..l {
                if mask.allows(i, j) {
                    let s: f64 = cols.clone().map(|c| q.at(i, c) * k.at(j, c)).sum();
                    scores.push((j, s / (dh as f64).sqrt()));
                }
            }
            let m = scores.iter().map(|&(_, s)| s).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|&(_, s)| (s - m).exp()).sum();
            for &(j, s) in &scores {
                let w = (s - m).exp() / z;
                for c in cols.clone() {
                    out[i][c] += w * v.at(j, c);
                }
            }
        }
    }
    out
}

/// Top-`k` nouns by repeated linear selection of the best remaining score,
/// ties to the lexicographically smaller noun.
pub fn brute_force_top_k(
    stub: &RetrievalVlmStub,
    raw: &[f64],
    nouns: &[String],
    prompt: &str,
    k: usize,
) -> Vec<String> {
    let v = stub.vp_embed(raw).unwrap();
    let scores: Vec<f64> = nouns
        .iter()
        .map(|n| {
            let t = stub.tp_embed(prompt, n).unwrap();
            v.iter().zip(&t).map(|(a, b)| a * b).sum()
        })
        .collect();
    let mut taken = vec![false; nouns.len()];
    let mut out = Vec::new();
    for _ in 0..k.min(nouns.len()) {
        let mut best: Option<usize> = None;
        for i in 0..nouns.len() {
            if taken[i] {
                continue;
            }
            best = match best {
                None => Some(i),
                Some(b) if scores[i] > scores[b] || (scores[i] == scores[b] && nouns[i] < nouns[b]) => Some(i),
                keep => keep,
            };
        }
        let b = best.unwrap();
        taken[b] = true;
        out.push(nouns[b].clone());
    }
    out
}

/// Closed form of one noise-adaptive row loss:
/// `log(1 + c·Σ_{j≠i} exp(s_ij − s_ii))` with `c = ω/((1−ω)(B−1))`, or
/// `c = 1/(1−ω)` with a full-softmax denominator.
pub fn nitc_row_oracle(row: &[f64], i: usize, omega: f64, strict: bool) -> f64 {
    let b = row.len() as f64;
    let c = if strict { 1.0 / (1.0 - omega) } else { omega / ((1.0 - omega) * (b - 1.0)) };
    let sum: f64 = row
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != i)
        .map(|(_, &s)| (s - row[i]).exp())
        .sum();
    (c * sum).ln_1p()
}

pub fn nitc_oracle(s: &[Vec<f64>], omega: &[f64], strict: bool) -> f64 {
    let b = s.len();
    let mut total = 0.0;
    for i in 0..b {
        let col: Vec<f64> = (0..b).map(|r| s[r][i]).collect();
        total += nitc_row_oracle(&s[i], i, omega[i], strict) + nitc_row_oracle(&col, i, omega[i], strict);
    }
    total / (2.0 * b as f64)
}

pub fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

pub mod criteria;

/// Small end-to-end configuration: every phase runs, in seconds.
pub fn toy_config() -> nevlab::config::PipelineConfig {
    let mut c = nevlab::config::PipelineConfig::default();
    c.world.vocab_size = 12;
    c.world.dataset_size = 48;
    c.world.eval_size = 12;
    c.corpus.min_count = 1;
    c.model.num_queries = 4;
    c.model.d = 16;
    c.model.layers = 1;
    c.model.heads = 2;
    c.model.d_itc = 8;
    c.model.ffn = 16;
    c.model.num_objects = 16;
    c.model.enc_dim = 8;
    c.model.d_llm = 16;
    c.frozen.decoder.d_llm = 16;
    c.frozen.decoder.heads = 2;
    c.frozen.decoder.ffn = 16;
    c.frozen.decoder.pretrain_steps = 20;
    c.frozen.decoder.pretrain_batch = 8;
    let t = &mut c.train;
    t.batch_size = 8;
    t.stage2_batch_size = 4;
    t.warmup_steps = 4;
    t.nitc_steps = 4;
    t.post_refresh_steps = 3;
    t.stage2_steps = 3;
    t.peak_lr = 1e-3;
    t.k_candidates = 6;
    c
}
