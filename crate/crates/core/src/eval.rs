//! Retrieval evaluation with matching-score reranking, the metrics report and
//! the ablation runner.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::data::PairedSample;
use crate::error::{Error, Result};
use crate::model::BridgeModel;
use crate::objectives::{itm_scores, PairRef};
use crate::train::{frozen_hashes, split_similarity, Environment, GmmSummary, PhaseSummary, Prepared, Stage1, Stage2Report};
use crate::{Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recalls {
    pub i2t_r1: f64,
    pub i2t_r5: f64,
    pub t2i_r1: f64,
    pub t2i_r5: f64,
}

impl Recalls {
    pub fn mean_r1(&self) -> f64 {
        0.5 * (self.i2t_r1 + self.t2i_r1)
    }
}

/// Ranks candidates for one query: the top `k` by similarity are reordered by
/// `rerank` (descending, ties by similarity order), the rest keep similarity
/// order.
pub fn rank_with_rerank(sims: &[f64], k: usize, rerank: impl Fn(&[usize]) -> Result<Vec<f64>>) -> Result<Vec<usize>> {
    let mut order: Vec<usize> = (0..sims.len()).collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    let k = k.min(order.len());
    if k > 0 {
        let head = order[..k].to_vec();
        let scores = rerank(&head)?;
        let mut pos: Vec<usize> = (0..k).collect();
        pos.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        for (slot, p) in pos.into_iter().enumerate() {
            order[slot] = head[p];
        }
    }
    Ok(order)
}

/// Fraction of queries whose target (its own index) is within the first `k`.
pub fn recall_at(rankings: &[Vec<usize>], k: usize) -> f64 {
    if rankings.is_empty() {
        return 0.0;
    }
    let hits = rankings
        .iter()
        .enumerate()
        .filter(|(q, r)| r.iter().take(k).any(|c| c == q))
        .count();
    hits as f64 / rankings.len() as f64
}

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Invalid(format!("thread pool: {e}")))
}

/// Evaluation threads from `NEVLAB_THREADS` (default 1).
pub fn eval_threads() -> usize {
    std::env::var("NEVLAB_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or(1)
}

/// Image→text and text→image rankings of a clean split: similarity shortlist
/// of `k_candidates`, reranked by the matched-class logit.
pub fn retrieval_rankings(
    model: &BridgeModel,
    data: &Prepared,
    tau: f64,
    k_candidates: usize,
    use_concepts: bool,
    threads: usize,
) -> Result<(Vec<Vec<usize>>, Vec<Vec<usize>>)> {
    if data.samples.iter().any(|s| s.is_noisy) {
        return Err(Error::Invalid("retrieval evaluation expects a clean split".into()));
    }
    let s = split_similarity(model, data, tau)?;
    let n = data.len();
    let score = |img: usize, txt: usize| -> PairRef<'_> {
        PairRef {
            image: &data.feats[img],
            concepts: if use_concepts { &data.concepts[img] } else { &[] },
            caption: &data.samples[txt].caption,
        }
    };
    let itm = |pairs: Vec<PairRef<'_>>| -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let b = model.bind(&mut tape, false);
        itm_scores(model, &mut tape, &b, &pairs)
    };
    let col = |j: usize| -> Vec<f64> { (0..n).map(|i| s.at(i, j)).collect() };
    pool(threads)?.install(|| {
        let i2t = (0..n)
            .into_par_iter()
            .map(|i| rank_with_rerank(s.row(i), k_candidates, |c| itm(c.iter().map(|&j| score(i, j)).collect())))
            .collect::<Result<Vec<_>>>()?;
        let t2i = (0..n)
            .into_par_iter()
            .map(|j| rank_with_rerank(&col(j), k_candidates, |c| itm(c.iter().map(|&i| score(i, j)).collect())))
            .collect::<Result<Vec<_>>>()?;
        Ok((i2t, t2i))
    })
}

pub fn eval_retrieval(
    model: &BridgeModel,
    data: &Prepared,
    tau: f64,
    k_candidates: usize,
    use_concepts: bool,
    threads: usize,
) -> Result<Recalls> {
    let (i2t, t2i) = retrieval_rankings(model, data, tau, k_candidates, use_concepts, threads)?;
    Ok(Recalls {
        i2t_r1: recall_at(&i2t, 1),
        i2t_r5: recall_at(&i2t, 5),
        t2i_r1: recall_at(&t2i, 1),
        t2i_r5: recall_at(&t2i, 5),
    })
}

/// Recalls from a precomputed similarity matrix, without reranking.
pub fn recalls_from_similarity(s: &Tensor) -> Recalls {
    let n = s.rows();
    let rank = |v: Vec<f64>| rank_with_rerank(&v, 0, |_| Ok(Vec::new())).expect("no rerank");
    let i2t: Vec<Vec<usize>> = (0..n).map(|i| rank(s.row(i).to_vec())).collect();
    let t2i: Vec<Vec<usize>> = (0..n).map(|j| rank((0..n).map(|i| s.at(i, j)).collect())).collect();
    Recalls {
        i2t_r1: recall_at(&i2t, 1),
        i2t_r5: recall_at(&i2t, 5),
        t2i_r1: recall_at(&t2i, 1),
        t2i_r5: recall_at(&t2i, 5),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub phases: Vec<PhaseSummary>,
    pub gmm: Option<GmmSummary>,
    pub noise_auc: Option<f64>,
    pub refreshed: usize,
    pub retrieval: Option<Recalls>,
    pub stage2: Option<Stage2Report>,
    pub frozen_hashes: BTreeMap<String, String>,
}

impl MetricsReport {
    pub fn from_stage1(s: &Stage1, env: &Environment) -> Self {
        Self {
            phases: s.phase_summaries(),
            gmm: s.gmm.clone(),
            noise_auc: s.noise_auc(),
            refreshed: s.refreshed,
            retrieval: None,
            stage2: None,
            frozen_hashes: frozen_hashes(env, None),
        }
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Runs stage 1 on `train` and evaluates retrieval on `eval`.
pub fn run_stage1_and_eval(
    cfg: &PipelineConfig,
    env: &Environment,
    train: &[PairedSample],
    eval: &[PairedSample],
    threads: usize,
) -> Result<(Stage1, MetricsReport)> {
    let data = env.prepare(train.to_vec(), None)?;
    let mut s1 = Stage1::new(cfg, data)?;
    s1.run()?;
    let mut report = MetricsReport::from_stage1(&s1, env);
    let heldout = env.prepare(eval.to_vec(), None)?;
    report.retrieval = Some(eval_retrieval(
        &s1.model,
        &heldout,
        cfg.train.tau,
        cfg.train.k_candidates,
        cfg.train.use_concepts,
        threads,
    )?);
    Ok((s1, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub recalls: Recalls,
    pub mean_r1: f64,
    pub noise_auc: Option<f64>,
}

/// The three variants under identical seeds and steps: full, without noise
/// adaptation (plain contrastive loss, no noise model), and without concepts.
pub fn ablation_configs(cfg: &PipelineConfig) -> Vec<(String, PipelineConfig)> {
    let full = cfg.clone();
    let mut no_na = cfg.clone();
    no_na.train.noise_adaptive = false;
    let mut no_ce = cfg.clone();
    no_ce.train.use_concepts = false;
    vec![
        ("full".into(), full),
        ("wo_na".into(), no_na),
        ("wo_ce".into(), no_ce),
    ]
}

pub fn ablate(
    cfg: &PipelineConfig,
    train: &[PairedSample],
    eval: &[PairedSample],
    threads: usize,
) -> Result<Vec<AblationRow>> {
    let env = Environment::new(cfg, train)?;
    ablation_configs(cfg)
        .into_iter()
        .map(|(name, c)| {
            log::info!("event=ablation variant={name}");
            let env = Environment::with_corpus(&c, env.corpus.clone())?;
            let (_, rep) = run_stage1_and_eval(&c, &env, train, eval, threads)?;
            let r = rep.retrieval.expect("retrieval evaluated");
            Ok(AblationRow {
                variant: name,
                mean_r1: r.mean_r1(),
                recalls: r,
                noise_auc: rep.noise_auc,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rerank_reorders_only_the_head() {
        let sims = [0.9, 0.1, 0.5, 0.7];
        let r = rank_with_rerank(&sims, 2, |c| Ok(c.iter().map(|&j| j as f64).collect())).unwrap();
        assert_eq!(r, vec![3, 0, 2, 1]);
        let r = rank_with_rerank(&sims, 0, |_| unreachable!()).unwrap();
        assert_eq!(r, vec![0, 3, 2, 1]);
    }

    #[test]
    fn recall_counts_own_index() {
        let r = vec![vec![0, 1], vec![0, 1]];
        assert_eq!(recall_at(&r, 1), 0.5);
        assert_eq!(recall_at(&r, 2), 1.0);
    }
}
