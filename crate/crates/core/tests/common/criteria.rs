//! Checks behind each acceptance criterion. Every check returns a one-line
//! detail, as `Ok` when the criterion holds.

use std::sync::Arc;
use std::time::{Duration, Instant};

use nevlab::checkpoint::Checkpoint;
use nevlab::config::PipelineConfig;
use nevlab::corpus::{build_corpus, retrieve_concepts};
use nevlab::data::{noun_name, World};
use nevlab::eval::{ablation_configs, retrieval_rankings, run_stage1_and_eval};
use nevlab::gradsuite::{run_suite, TOLERANCE};
use nevlab::masks::{
    build_bidirectional_mask, build_multimodal_causal_mask, build_unimodal_mask, masked_attention_values, AttentionMask,
    MaskKind, SegmentLayout,
};
use nevlab::model::{BridgeModel, SeqInput};
use nevlab::noise_gmm::fit_gmm2;
use nevlab::objectives::{itm_scores, nitc_loss, PairRef};
use nevlab::train::{split_similarity, stage2_pipeline, Environment, Phase, Prepared, Stage1};
use nevlab::{Tape, Tensor};
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{median, naive_attention, nitc_oracle, random_matrix, rng, toy_config, brute_force_top_k};

pub type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

// 1
pub fn gradient_suite() -> Check {
    let t = Instant::now();
    let rows = run_suite(20, 0).map_err(err)?;
    let secs = t.elapsed().as_secs_f64();
    let worst = rows.iter().map(|r| format!("{}={:.1e}", r.loss, r.max_rel_err)).collect::<Vec<_>>().join(" ");
    ensure(rows.iter().all(|r| r.max_rel_err <= TOLERANCE), || format!("max relative errors {worst}"))?;
    ensure(secs < 60.0, || format!("took {secs:.1}s"))?;
    Ok(format!("20 instances each, {worst}, {secs:.1}s"))
}

fn nitc_value(s: &[Vec<f64>], omega: &[f64], strict: bool) -> f64 {
    let b = s.len();
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::matrix(b, b, s.concat()).unwrap());
    let l = nitc_loss(&mut tape, v, omega, strict).unwrap();
    tape.value(l).item()
}

// 2
pub fn nitc_closed_forms() -> Check {
    let mut r = rng(2);
    let draw = |r: &mut rand_chacha::ChaCha8Rng, b: usize| -> Vec<Vec<f64>> {
        (0..b).map(|_| (0..b).map(|_| r.random_range(-4.0..4.0)).collect()).collect()
    };
    let mut worst_zero = 0.0f64;
    for _ in 0..100 {
        let b = r.random_range(2..8);
        worst_zero = worst_zero.max(nitc_value(&draw(&mut r, b), &vec![0.0; b], false).abs());
    }
    ensure(worst_zero <= 1e-12, || format!("omega=0 loss {worst_zero:e}"))?;
    let mut worst_ln2 = 0.0f64;
    for v in [-2.0, 0.0, 0.3, 5.0] {
        let l = nitc_value(&[vec![v, v], vec![v, v]], &[0.5, 0.5], false);
        worst_ln2 = worst_ln2.max((l - std::f64::consts::LN_2).abs());
    }
    ensure(worst_ln2 <= 1e-12, || format!("B=2 loss off ln 2 by {worst_ln2:e}"))?;
    let mut violations = 0;
    let mut oracle_gap = 0.0f64;
    for k in 0..1000 {
        let b = r.random_range(2..7);
        let s = draw(&mut r, b);
        let strict = k % 2 == 1;
        let omega: Vec<f64> = (0..b).map(|_| r.random_range(0.0..0.9)).collect();
        let i = r.random_range(0..b);
        let mut raised = omega.clone();
        raised[i] = r.random_range(omega[i]..0.95);
        let (lo, hi) = (nitc_value(&s, &omega, strict), nitc_value(&s, &raised, strict));
        if hi < lo - 1e-12 {
            violations += 1;
        }
        oracle_gap = oracle_gap.max((lo - nitc_oracle(&s, &omega, strict)).abs() / lo.abs().max(1.0));
    }
    ensure(violations == 0, || format!("{violations} monotonicity violations in 1000 draws"))?;
    ensure(oracle_gap <= 1e-12, || format!("closed-form gap {oracle_gap:e}"))?;
    Ok(format!(
        "zero-rate max {worst_zero:e}, ln2 gap {worst_ln2:e}, 1000 monotone draws, closed-form gap {oracle_gap:.1e}"
    ))
}

// 3
pub fn gmm_properties() -> Check {
    let mut worst_drop = 0.0f64;
    let mut worst_norm = 0.0f64;
    for seed in 0..100 {
        let mut r = rng(1000 + seed);
        let n = r.random_range(8..300);
        let w = r.random_range(0.05..0.95);
        let a = Normal::new(r.random_range(0.0..3.0), r.random_range(0.01..1.0)).unwrap();
        let b = Normal::new(r.random_range(0.0..6.0), r.random_range(0.01..2.0)).unwrap();
        let xs: Vec<f64> = (0..n)
            .map(|_| if r.random_bool(w) { a.sample(&mut r) } else { b.sample(&mut r) })
            .collect();
        let g = fit_gmm2(&xs, 1e-12, 1000).map_err(err)?;
        for p in g.log_likelihood_trace.windows(2) {
            worst_drop = worst_drop.max(p[0] - p[1]);
        }
        for &x in &xs {
            let rr = g.responsibilities(x);
            worst_norm = worst_norm.max((rr[0] + rr[1] - 1.0).abs());
        }
    }
    ensure(worst_drop <= 1e-10, || format!("log-likelihood dropped by {worst_drop:e}"))?;
    ensure(worst_norm <= 1e-12, || format!("responsibilities off by {worst_norm:e}"))?;
    let xs: Vec<f64> = [0.1; 50].iter().chain(&[5.0; 50]).copied().collect();
    let g = fit_gmm2(&xs, 1e-10, 500).map_err(err)?;
    let hi = g.noisy_component();
    let gap = (g.mean[1 - hi] - 0.1).abs().max((g.mean[hi] - 5.0).abs());
    ensure(gap < 1e-3, || format!("point clusters recovered within {gap:e}"))?;
    Ok(format!(
        "100 datasets, worst LL drop {worst_drop:.1e}, normalization {worst_norm:.1e}, cluster means within {gap:.1e}"
    ))
}

fn layout(q: usize, c: usize, t: usize) -> SegmentLayout {
    SegmentLayout::new(q, c, t).unwrap()
}

// 6
pub fn mask_exactness() -> Check {
    let rows = |m: AttentionMask| m.to_rows();
    let cases: Vec<(&str, Vec<Vec<u8>>, Vec<Vec<u8>>)> = vec![
        (
            "unimodal (2,0,2)",
            rows(build_unimodal_mask(layout(2, 0, 2)).map_err(err)?),
            vec![vec![1, 1, 0, 0], vec![1, 1, 0, 0], vec![0, 0, 1, 1], vec![0, 0, 1, 1]],
        ),
        ("unimodal (1,0,0)", rows(build_unimodal_mask(layout(1, 0, 0)).map_err(err)?), vec![vec![1]]),
        ("unimodal (0,0,3)", rows(build_unimodal_mask(layout(0, 0, 3)).map_err(err)?), vec![vec![1; 3]; 3]),
        (
            "causal (2,1,2)",
            rows(build_multimodal_causal_mask(layout(2, 1, 2))),
            vec![
                vec![1, 1, 0, 0, 0],
                vec![1, 1, 0, 0, 0],
                vec![1, 1, 1, 0, 0],
                vec![1, 1, 1, 1, 0],
                vec![1, 1, 1, 1, 1],
            ],
        ),
        (
            "causal (0,0,3)",
            rows(build_multimodal_causal_mask(layout(0, 0, 3))),
            vec![vec![1, 0, 0], vec![1, 1, 0], vec![1, 1, 1]],
        ),
        ("causal (2,0,0)", rows(build_multimodal_causal_mask(layout(2, 0, 0))), vec![vec![1, 1]; 2]),
        ("bidirectional (2,1,2)", rows(build_bidirectional_mask(layout(2, 1, 2))), vec![vec![1; 5]; 5]),
        ("bidirectional (1,0,0)", rows(build_bidirectional_mask(layout(1, 0, 0))), vec![vec![1]]),
    ];
    for (name, got, want) in &cases {
        ensure(got == want, || format!("{name}: {got:?}"))?;
    }
    ensure(build_unimodal_mask(layout(1, 1, 1)).is_err(), || "unimodal accepted concepts".into())?;

    let mut r = rng(6);
    let mut worst = 0.0f64;
    for kind in [MaskKind::Unimodal, MaskKind::MultimodalCausal] {
        for _ in 0..20 {
            let (q, c, t) = (r.random_range(1..4), r.random_range(0..3), r.random_range(1..5));
            let c = if kind == MaskKind::Unimodal { 0 } else { c };
            let mask = Arc::new(AttentionMask::build(kind, layout(q, c, t)).map_err(err)?);
            let n = q + c + t;
            let (qm, km, vm) = (random_matrix(&mut r, n, 4), random_matrix(&mut r, n, 4), random_matrix(&mut r, n, 4));
            let base = masked_attention_values(&qm, &km, &vm, &mask, 2).map_err(err)?;
            for col in 0..n {
                let mut probe = vm.clone();
                probe.data_mut()[col * 4..(col + 1) * 4].iter_mut().for_each(|v| *v = 1e6);
                let out = masked_attention_values(&qm, &km, &probe, &mask, 2).map_err(err)?;
                for row in (0..n).filter(|&i| !mask.allows(i, col)) {
                    for j in 0..4 {
                        worst = worst.max((out.at(row, j) - base.at(row, j)).abs());
                    }
                }
            }
        }
    }
    let model_gap = model_mask_leak()?;
    worst = worst.max(model_gap);
    ensure(worst <= 1e-12, || format!("masked positions moved outputs by {worst:e}"))?;
    Ok(format!("{} listed matrices exact; perturbation influence {worst:e}", cases.len()))
}

/// Largest change of rows that must not see a perturbed token, across the
/// full model under the unimodal and causal masks.
fn model_mask_leak() -> Result<f64, String> {
    let cfg = toy_config();
    let m = BridgeModel::new(&cfg.model, 4).map_err(err)?;
    let mut r = rng(61);
    let image = random_matrix(&mut r, cfg.model.num_patches, cfg.model.enc_dim);
    let nq = cfg.model.num_queries;
    let run = |concepts: &[usize], text: &[usize], kind| -> Result<Tensor, String> {
        let mut tape = Tape::new();
        let b = m.bind(&mut tape, false);
        let seq = SeqInput {
            image: Some(&image),
            concepts,
            text,
        };
        let f = m.forward(&mut tape, &b, &[seq], kind).map_err(err)?;
        Ok(tape.value(f.states).clone())
    };
    let diff = |a: &Tensor, b: &Tensor, rows: std::ops::Range<usize>| {
        rows.flat_map(|i| (0..a.cols()).map(move |j| (i, j)))
            .map(|(i, j)| (a.at(i, j) - b.at(i, j)).abs())
            .fold(0.0, f64::max)
    };
    let cls = m.vocab().cls();
    let dec = m.vocab().dec();
    let a = run(&[], &[cls, 1, 2, 3], MaskKind::Unimodal)?;
    let b = run(&[], &[cls, 7, 8, 9], MaskKind::Unimodal)?;
    let mut worst = diff(&a, &b, 0..nq);
    let a = run(&[4, 5], &[dec, 1, 2, 3], MaskKind::MultimodalCausal)?;
    let b = run(&[4, 5], &[dec, 1, 2, 6], MaskKind::MultimodalCausal)?;
    worst = worst.max(diff(&a, &b, 0..nq + 2 + 3));
    let c = run(&[4, 0], &[dec, 1, 2, 3], MaskKind::MultimodalCausal)?;
    worst = worst.max(diff(&a, &c, 0..nq));
    ensure(diff(&a, &b, nq + 5..nq + 6) > 1e-9, || "perturbed token had no effect on itself".into())?;
    Ok(worst)
}

fn toy_split(cfg: &PipelineConfig) -> Result<(Environment, Prepared, Prepared), String> {
    let world = World::new(&cfg.world).map_err(err)?;
    let train = world.generate_dataset().map_err(err)?;
    let env = Environment::new(cfg, &train).map_err(err)?;
    let eval = env.prepare(world.generate_eval_split(), None).map_err(err)?;
    let train = env.prepare(train, None).map_err(err)?;
    Ok((env, train, eval))
}

// 8
pub fn oracle_equivalences() -> Check {
    let world = World::new(&PipelineConfig::default().world).map_err(err)?;
    let stub = world.retrieval_stub();
    let counts = (0..world.cfg.vocab_size).map(|i| (noun_name(i), 10u64)).collect();
    let corpus = build_corpus(&counts, 5).map_err(err)?;
    let prompt = nevlab::frozen::DEFAULT_PROMPT;
    let mut r = rng(8);
    for i in 0..1000 {
        let k = r.random_range(1..=6);
        let raw: Vec<f64> = if i % 2 == 0 {
            let objs = sample(&mut r, world.cfg.vocab_size, 3).into_vec();
            world.render(&objs, &mut r)
        } else {
            (0..world.cfg.raw_dim).map(|_| r.random_range(-1.0..1.0)).collect()
        };
        let got = retrieve_concepts(&stub, i, &raw, &corpus, prompt, k).map_err(err)?;
        let want = brute_force_top_k(&stub, &raw, corpus.nouns(), prompt, k);
        ensure(got.concepts == want, || format!("image {i}: {:?} vs {want:?}", got.concepts))?;
    }

    let cfg = toy_config();
    let (_, _, eval) = toy_split(&cfg)?;
    let model = BridgeModel::new(&cfg.model, 5).map_err(err)?;
    let n = eval.len();
    let (i2t, t2i) = retrieval_rankings(&model, &eval, cfg.train.tau, n, true, 1).map_err(err)?;
    let sims = split_similarity(&model, &eval, cfg.train.tau).map_err(err)?;
    let score = |img: usize, txt: usize| -> Result<f64, String> {
        let mut tape = Tape::new();
        let b = model.bind(&mut tape, false);
        let pair = PairRef {
            image: &eval.feats[img],
            concepts: &eval.concepts[img],
            caption: &eval.samples[txt].caption,
        };
        Ok(itm_scores(&model, &mut tape, &b, &[pair]).map_err(err)?[0])
    };
    for q in 0..n {
        let mut by_text: Vec<(f64, f64, usize)> = Vec::new();
        let mut by_image: Vec<(f64, f64, usize)> = Vec::new();
        for c in 0..n {
            by_text.push((score(q, c)?, sims.at(q, c), c));
            by_image.push((score(c, q)?, sims.at(c, q), c));
        }
        for list in [&mut by_text, &mut by_image] {
            list.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.total_cmp(&a.1)).then(a.2.cmp(&b.2)));
        }
        let order = |l: &[(f64, f64, usize)]| l.iter().map(|x| x.2).collect::<Vec<_>>();
        ensure(i2t[q] == order(&by_text), || format!("image query {q} ranking differs"))?;
        ensure(t2i[q] == order(&by_image), || format!("text query {q} ranking differs"))?;
    }

    let mut worst = 0.0f64;
    let mut r = rng(42);
    for _ in 0..50 {
        let (q, c, t) = (r.random_range(0..4), r.random_range(0..3), r.random_range(1..6));
        let mask = Arc::new(build_multimodal_causal_mask(layout(q, c, t)));
        let heads = r.random_range(1..4);
        let d = heads * r.random_range(1..5);
        let len = q + c + t;
        let (qm, km, vm) = (random_matrix(&mut r, len, d), random_matrix(&mut r, len, d), random_matrix(&mut r, len, d));
        let got = masked_attention_values(&qm, &km, &vm, &mask, heads).map_err(err)?;
        let want = naive_attention(&qm, &km, &vm, &mask, heads);
        for i in 0..len {
            for j in 0..d {
                worst = worst.max((got.at(i, j) - want[i][j]).abs());
            }
        }
    }
    ensure(worst <= 1e-12, || format!("attention differs from the naive oracle by {worst:e}"))?;
    Ok(format!(
        "1000 retrievals match brute force; full-set rerank equals brute-force matching ranking on {n} queries each way; attention gap {worst:.1e}"
    ))
}

// 9
pub fn determinism_and_resume() -> Check {
    let cfg = toy_config();
    let world = World::new(&cfg.world).map_err(err)?;
    let train = world.generate_dataset().map_err(err)?;
    let eval = world.generate_eval_split();
    let run = || -> Result<String, String> {
        let env = Environment::new(&cfg, &train).map_err(err)?;
        let (s1, mut report) = run_stage1_and_eval(&cfg, &env, &train, &eval, 1).map_err(err)?;
        let heldout = env.prepare(eval.clone(), None).map_err(err)?;
        let (lm, _) = env.pretrain_decoder().map_err(err)?;
        report.stage2 = Some(stage2_pipeline(&env, lm, &s1.model, &s1.data, &heldout).map_err(err)?.report);
        Ok(report.to_json_string())
    };
    let (a, b) = (run()?, run()?);
    ensure(a == b, || "two seeded runs gave different reports".into())?;

    let (_, data, _) = toy_split(&cfg)?;
    let mut whole = Stage1::new(&cfg, data.clone()).map_err(err)?;
    let mut units = 0;
    while whole.advance().map_err(err)? {
        units += 1;
    }
    ensure(whole.phase == Phase::Done && whole.refreshed > 0, || "toy run did not reach a refresh".into())?;
    let want = whole.checkpoint().to_bytes();
    for cut in 0..=units {
        let mut s = Stage1::new(&cfg, data.clone()).map_err(err)?;
        s.run_units(cut).map_err(err)?;
        let ck = Checkpoint::from_bytes(&s.checkpoint().to_bytes()).map_err(err)?;
        let mut resumed = Stage1::resume(&ck, data.clone()).map_err(err)?;
        resumed.run().map_err(err)?;
        ensure(resumed.checkpoint().to_bytes() == want, || format!("resume after {cut} units diverged"))?;
    }
    Ok(format!("reports identical ({} bytes); resume equal at all {} cut points", a.len(), units + 1))
}

// 4
pub fn noise_detection(seeds: &[u64]) -> Result<(Check, Vec<f64>), String> {
    let t = Instant::now();
    let mut aucs = Vec::new();
    for &seed in seeds {
        let cfg = PipelineConfig::default()
            .with_overrides(&[format!("train.seed={seed}"), format!("world.seed={seed}")])
            .map_err(err)?;
        let world = World::new(&cfg.world).map_err(err)?;
        let train = world.generate_dataset().map_err(err)?;
        let env = Environment::new(&cfg, &train).map_err(err)?;
        let mut s1 = Stage1::new(&cfg, env.prepare(train, None).map_err(err)?).map_err(err)?;
        while s1.upcoming() != Phase::Contrastive {
            s1.advance().map_err(err)?;
        }
        aucs.push(s1.noise_auc().ok_or("no noise estimate")?);
    }
    let secs = t.elapsed().as_secs_f64();
    let m = median(aucs.clone());
    let detail = format!("AUC per seed {aucs:.4?}, median {m:.4}, {secs:.0}s");
    let check = if m >= 0.85 && secs <= 300.0 { Ok(detail) } else { Err(detail) };
    Ok((check, aucs))
}

pub struct LongRun {
    pub ablation: Check,
    pub freezing: Check,
    pub stage2: Check,
}

/// Criteria 5, 7 and 10 share one pass: per seed, the three ablation
/// variants, then stage 2 from the full variant's bridge.
pub fn ablation_freezing_stage2(seeds: &[u64], overrides: &[&str]) -> Result<LongRun, String> {
    let mut ablation_time = Duration::ZERO;
    let mut stage2_time = Duration::ZERO;
    let mut r1: [Vec<f64>; 3] = Default::default();
    let mut deltas = Vec::new();
    let mut hashes_ok = true;
    let mut hash_detail = String::new();
    for &seed in seeds {
        let mut ov: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
        ov.push(format!("train.seed={seed}"));
        ov.push(format!("world.seed={seed}"));
        let cfg = PipelineConfig::default().with_overrides(&ov).map_err(err)?;
        let world = World::new(&cfg.world).map_err(err)?;
        let train = world.generate_dataset().map_err(err)?;
        let eval = world.generate_eval_split();
        let env = Environment::new(&cfg, &train).map_err(err)?;
        let encoder_before = env.encoder.content_hash();
        let (lm, _) = env.pretrain_decoder().map_err(err)?;
        let decoder_before = lm.content_hash();

        let mut full = None;
        for (k, (name, vcfg)) in ablation_configs(&cfg).into_iter().enumerate() {
            let t = Instant::now();
            let venv = Environment::with_corpus(&vcfg, env.corpus.clone()).map_err(err)?;
            let (s1, rep) = run_stage1_and_eval(&vcfg, &venv, &train, &eval, 1).map_err(err)?;
            ablation_time += t.elapsed();
            r1[k].push(rep.retrieval.ok_or("no retrieval")?.mean_r1());
            if name == "full" {
                full = Some(s1);
            }
        }
        let s1 = full.ok_or("no full variant")?;

        let t = Instant::now();
        let heldout = env.prepare(eval.clone(), None).map_err(err)?;
        let run = stage2_pipeline(&env, lm, &s1.model, &s1.data, &heldout).map_err(err)?;
        stage2_time += t.elapsed();
        deltas.push(run.report.heldout_after - run.report.heldout_before);

        let encoder_after = env.encoder.content_hash();
        let decoder_after = run.lm.content_hash();
        let same = encoder_before == encoder_after
            && decoder_before == decoder_after
            && run.report.decoder_hash_before == decoder_before;
        hashes_ok &= same;
        hash_detail = format!("encoder {}.. decoder {}..", &encoder_after[..12], &decoder_after[..12]);
    }

    let med: Vec<f64> = r1.iter().map(|v| median(v.clone())).collect();
    let secs5 = ablation_time.as_secs_f64();
    let detail5 = format!(
        "median mean R@1 full {:.3} w/o NA {:.3} w/o CE {:.3} (per seed {:.3?} / {:.3?} / {:.3?}), {secs5:.0}s",
        med[0], med[1], med[2], r1[0], r1[1], r1[2]
    );
    let direction = med[0] >= med[1] && med[0] >= med[2] && (med[0] > med[1] || med[0] > med[2]);
    let ablation = if direction && secs5 <= 900.0 { Ok(detail5) } else { Err(detail5) };

    let freezing = if hashes_ok {
        Ok(format!("frozen hashes unchanged across {} full pipelines ({hash_detail})", seeds.len()))
    } else {
        Err("frozen parameter hash changed".to_string())
    };

    let secs10 = stage2_time.as_secs_f64();
    let m = median(deltas.clone());
    let detail10 = format!("held-out LM loss change per seed {deltas:.4?}, median {m:.4}, {secs10:.0}s");
    let stage2 = if m <= 0.0 && hashes_ok && secs10 <= 300.0 { Ok(detail10) } else { Err(detail10) };
    Ok(LongRun {
        ablation,
        freezing,
        stage2,
    })
}
