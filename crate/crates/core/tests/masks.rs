mod common;

use std::sync::Arc;

use common::{naive_attention, random_matrix, rng};
use nevlab::masks::{
    build_bidirectional_mask, build_multimodal_causal_mask, build_unimodal_mask, masked_attention_values, AttentionMask,
    MaskKind, SegmentLayout,
};
use nevlab::model::{BridgeModel, ModelConfig, SeqInput};
use nevlab::{Tape, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn layout(q: usize, c: usize, t: usize) -> SegmentLayout {
    SegmentLayout::new(q, c, t).unwrap()
}

#[test]
fn listed_matrices() {
    let uni = build_unimodal_mask(layout(2, 0, 2)).unwrap();
    assert_eq!(uni.to_rows(), vec![vec![1, 1, 0, 0], vec![1, 1, 0, 0], vec![0, 0, 1, 1], vec![0, 0, 1, 1]]);
    assert_eq!(build_unimodal_mask(layout(1, 0, 0)).unwrap().to_rows(), vec![vec![1]]);
    assert_eq!(build_unimodal_mask(layout(0, 0, 3)).unwrap().to_rows(), vec![vec![1; 3]; 3]);
    assert!(build_unimodal_mask(layout(1, 1, 1)).is_err());

    let causal = build_multimodal_causal_mask(layout(2, 1, 2));
    assert_eq!(
        causal.to_rows(),
        vec![
            vec![1, 1, 0, 0, 0],
            vec![1, 1, 0, 0, 0],
            vec![1, 1, 1, 0, 0],
            vec![1, 1, 1, 1, 0],
            vec![1, 1, 1, 1, 1],
        ]
    );
    assert_eq!(
        build_multimodal_causal_mask(layout(0, 0, 3)).to_rows(),
        vec![vec![1, 0, 0], vec![1, 1, 0], vec![1, 1, 1]]
    );
    assert_eq!(build_multimodal_causal_mask(layout(2, 0, 0)).to_rows(), vec![vec![1, 1]; 2]);

    assert_eq!(build_bidirectional_mask(layout(2, 1, 2)).to_rows(), vec![vec![1; 5]; 5]);
    assert_eq!(build_bidirectional_mask(layout(1, 0, 0)).to_rows(), vec![vec![1]]);
}

proptest! {
    #[test]
    fn structural_rules(q in 0usize..4, c in 0usize..4, t in 0usize..5) {
        prop_assume!(q + c + t > 0);
        let l = layout(q, c, t);
        let causal = build_multimodal_causal_mask(l);
        let bi = build_bidirectional_mask(l);
        let n = q + c + t;
        for i in 0..n {
            prop_assert!(causal.allows(i, i) && bi.allows(i, i));
            for j in 0..n {
                prop_assert!(bi.allows(i, j));
                let want = if i < q {
                    j < q
                } else if i < q + c {
                    j < q + c
                } else {
                    j <= i
                };
                prop_assert_eq!(causal.allows(i, j), want);
            }
        }
        if c == 0 {
            let uni = build_unimodal_mask(l).unwrap();
            for i in 0..n {
                for j in 0..n {
                    prop_assert_eq!(uni.allows(i, j), (i < q) == (j < q));
                }
            }
        }
    }
}

#[test]
fn attention_matches_naive_oracle() {
    let mut r = rng(42);
    for kind in [MaskKind::Unimodal, MaskKind::MultimodalCausal, MaskKind::Bidirectional] {
        for _ in 0..20 {
            let (q, c, t) = (r.random_range(0..4), r.random_range(0..3), r.random_range(1..5));
            let c = if kind == MaskKind::Unimodal { 0 } else { c };
            let mask = Arc::new(AttentionMask::build(kind, layout(q, c, t)).unwrap());
            let heads = r.random_range(1..4);
            let d = heads * r.random_range(1..4);
            let n = q + c + t;
            let (qm, km, vm) = (random_matrix(&mut r, n, d), random_matrix(&mut r, n, d), random_matrix(&mut r, n, d));
            let got = masked_attention_values(&qm, &km, &vm, &mask, heads).unwrap();
            let want = naive_attention(&qm, &km, &vm, &mask, heads);
            for i in 0..n {
                for j in 0..d {
                    assert!((got.at(i, j) - want[i][j]).abs() <= 1e-12);
                }
            }
        }
    }
}

#[test]
fn uniform_and_diagonal_attention() {
    let mut r = rng(3);
    let v = random_matrix(&mut r, 4, 4);
    let q = random_matrix(&mut r, 4, 4);
    let k = Tensor::matrix(4, 4, [1.0, 0.5, -0.2, 0.3].repeat(4)).unwrap();
    let all = Arc::new(build_bidirectional_mask(layout(0, 0, 4)));
    let out = masked_attention_values(&q, &k, &v, &all, 2).unwrap();
    for j in 0..4 {
        let mean: f64 = (0..4).map(|i| v.at(i, j)).sum::<f64>() / 4.0;
        for i in 0..4 {
            assert!((out.at(i, j) - mean).abs() < 1e-15);
        }
    }
    let diag = Arc::new(AttentionMask::diagonal(4));
    let out = masked_attention_values(&q, &k, &v, &diag, 2).unwrap();
    assert_eq!(out, v);
}

#[test]
fn masked_values_have_no_influence() {
    let mut r = rng(5);
    let mask = Arc::new(build_multimodal_causal_mask(layout(2, 1, 3)));
    let (q, k) = (random_matrix(&mut r, 6, 4), random_matrix(&mut r, 6, 4));
    let v = random_matrix(&mut r, 6, 4);
    let base = masked_attention_values(&q, &k, &v, &mask, 2).unwrap();
    for col in 0..6 {
        let mut probe = v.clone();
        for j in 0..4 {
            probe.data_mut()[col * 4 + j] = 1e6;
        }
        let out = masked_attention_values(&q, &k, &probe, &mask, 2).unwrap();
        for row in (0..6).filter(|&i| !mask.allows(i, col)) {
            assert_eq!(out.row(row), base.row(row), "row {row} saw column {col}");
        }
    }
}

fn model() -> BridgeModel {
    let cfg = ModelConfig {
        d: 16,
        ffn: 16,
        num_objects: 10,
        max_positions: 8,
        enc_dim: 6,
        ..ModelConfig::default()
    };
    BridgeModel::new(&cfg, 9).unwrap()
}

fn states(m: &BridgeModel, image: &Tensor, concepts: &[usize], text: &[usize], kind: MaskKind) -> Tensor {
    let mut tape = Tape::new();
    let b = m.bind(&mut tape, false);
    let seq = SeqInput {
        image: Some(image),
        concepts,
        text,
    };
    let f = m.forward(&mut tape, &b, &[seq], kind).unwrap();
    tape.value(f.states).clone()
}

fn max_row_diff(a: &Tensor, b: &Tensor, rows: std::ops::Range<usize>) -> f64 {
    rows.flat_map(|i| a.row(i).iter().zip(b.row(i)).map(|(x, y)| (x - y).abs()).collect::<Vec<_>>())
        .fold(0.0, f64::max)
}

#[test]
fn model_respects_masks() {
    let m = model();
    let mut r = rng(8);
    let image = random_matrix(&mut r, 4, 6);
    let nq = m.config().num_queries;

    let a = states(&m, &image, &[], &[12, 1, 2, 3], MaskKind::Unimodal);
    let b = states(&m, &image, &[], &[12, 7, 8, 9], MaskKind::Unimodal);
    assert!(max_row_diff(&a, &b, 0..nq) <= 1e-12);

    let a = states(&m, &image, &[4, 5], &[11, 1, 2, 3], MaskKind::MultimodalCausal);
    let b = states(&m, &image, &[4, 5], &[11, 1, 2, 6], MaskKind::MultimodalCausal);
    assert!(max_row_diff(&a, &b, 0..nq + 2 + 3) <= 1e-12);
    assert!(max_row_diff(&a, &b, nq + 5..nq + 6) > 1e-6);

    let c = states(&m, &image, &[4, 0], &[11, 1, 2, 3], MaskKind::MultimodalCausal);
    assert!(max_row_diff(&a, &c, 0..nq) <= 1e-12);

    let a = states(&m, &image, &[4, 5], &[12, 1, 2, 3], MaskKind::Bidirectional);
    let b = states(&m, &image, &[4, 5], &[12, 1, 2, 6], MaskKind::Bidirectional);
    assert!(max_row_diff(&a, &b, 0..nq) > 1e-9);
}
