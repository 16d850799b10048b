//! The two-stage pre-training pipeline.
//!
//! Stage 1 runs five phases: A (warm-up with ITC + CITG + CITM), B (noise
//! estimation over the whole training split), C (noise-adaptive contrastive
//! training), D (caption refresh for likely-noisy pairs) and E (continued
//! training on the revised pairs). Stage 2 trains the bridge and a prefix
//! projection through the frozen decoder.

use std::collections::BTreeMap;
use std::path::Path;

use log::{info, warn};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::{restore_optimizer, Checkpoint};
use crate::config::PipelineConfig;
use crate::corpus::{build_corpus, retrieve_concepts, ConceptCorpus, ConceptRetrieval};
use crate::data::{caption_token_counts, noun_id, PairedSample, World};
use crate::error::{Error, Result};
use crate::frozen::{FrozenDecoderLM, FrozenImageEncoder, RetrievalVlmStub};
use crate::masks::MaskKind;
use crate::model::{BridgeModel, SeqInput};
use crate::noise_gmm::{fit_gmm2, noise_posterior, roc_auc, Gmm2, NoiseEstimate};
use crate::objectives::{
    citg_loss, citm_loss, generative_loss, itc_loss, mine_hard_negatives, nitc_loss, per_sample_itc,
    similarity_matrix, GenBindings, PairRef, Pooling, PrefixProjection,
};
use crate::optim::{cosine_lr, AdamW, AdamWConfig};
use crate::params::ParamStore;
use crate::{Tape, Tensor};

const PHASE_RNG_STREAM: u64 = 3;
const STAGE2_RNG_STREAM: u64 = 4;
const DECODER_RNG_STREAM: u64 = 5;
/// Rows per chunk when embedding a whole split without gradients.
const EMBED_CHUNK: usize = 64;

/// Frozen assets shared by every phase.
#[derive(Clone, Debug)]
pub struct Environment {
    pub cfg: PipelineConfig,
    pub world: World,
    pub stub: RetrievalVlmStub,
    pub corpus: ConceptCorpus,
    pub encoder: FrozenImageEncoder,
}

impl Environment {
    /// Builds the corpus from the caption counts of `train`.
    pub fn new(cfg: &PipelineConfig, train: &[PairedSample]) -> Result<Self> {
        let corpus = build_corpus(&caption_token_counts(train), cfg.corpus.min_count)?;
        Self::with_corpus(cfg, corpus)
    }

    pub fn with_corpus(cfg: &PipelineConfig, corpus: ConceptCorpus) -> Result<Self> {
        cfg.validate()?;
        let world = World::new(&cfg.world)?;
        let stub = world.retrieval_stub();
        let encoder = FrozenImageEncoder::new(
            cfg.world.raw_dim,
            cfg.model.num_patches,
            cfg.model.enc_dim,
            cfg.frozen.encoder_seed,
        );
        Ok(Self {
            cfg: cfg.clone(),
            world,
            stub,
            corpus,
            encoder,
        })
    }

    pub fn retrieve(&self, s: &PairedSample) -> Result<ConceptRetrieval> {
        retrieve_concepts(
            &self.stub,
            s.id,
            &s.features,
            &self.corpus,
            &self.cfg.corpus.prompt,
            self.cfg.corpus.top_k,
        )
    }

    /// Encodes images and attaches concept tokens (from `cached` when given,
    /// else retrieved now).
    pub fn prepare(&self, samples: Vec<PairedSample>, cached: Option<&[ConceptRetrieval]>) -> Result<Prepared> {
        let feats = samples
            .iter()
            .map(|s| self.encoder.image_encode(&s.features))
            .collect::<Result<Vec<_>>>()?;
        let retrievals = match cached {
            Some(c) => {
                let by_id: BTreeMap<u64, &ConceptRetrieval> = c.iter().map(|r| (r.image_id, r)).collect();
                samples
                    .iter()
                    .map(|s| {
                        by_id.get(&s.id).map(|r| (*r).clone()).ok_or_else(|| {
                            Error::Invalid(format!("no cached concepts for image {}", s.id))
                        })
                    })
                    .collect::<Result<Vec<_>>>()?
            }
            None => samples.iter().map(|s| self.retrieve(s)).collect::<Result<Vec<_>>>()?,
        };
        let concepts = retrievals
            .iter()
            .map(|r| {
                r.concepts
                    .iter()
                    .take(self.cfg.model.max_concepts)
                    .map(|n| noun_id(n).ok_or_else(|| Error::UnknownNoun(n.clone())))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Prepared {
            samples,
            feats,
            concepts,
        })
    }

    /// Constructs the toy decoder, pre-trains it on clean captions drawn from
    /// the same world and freezes it.
    pub fn pretrain_decoder(&self) -> Result<(FrozenDecoderLM, Vec<f64>)> {
        let mut lm = FrozenDecoderLM::new(
            &self.cfg.frozen.decoder,
            self.cfg.model.vocab(),
            self.cfg.frozen.decoder_seed,
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.frozen.decoder_seed);
        rng.set_stream(DECODER_RNG_STREAM);
        let m = self.cfg.world.objects_per_image;
        let captions: Vec<Vec<usize>> = (0..self.cfg.world.dataset_size.max(1))
            .map(|_| {
                let mut c = sample(&mut rng, self.cfg.world.vocab_size, m).into_vec();
                c.sort_unstable();
                c
            })
            .collect();
        let trace = lm.pretrain(&captions, self.cfg.frozen.decoder_seed)?;
        Ok((lm, trace))
    }
}

/// A split with encoded images and concept tokens.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub samples: Vec<PairedSample>,
    pub feats: Vec<Tensor>,
    pub concepts: Vec<Vec<usize>>,
}

impl Prepared {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn pair(&self, i: usize, use_concepts: bool) -> PairRef<'_> {
        PairRef {
            image: &self.feats[i],
            concepts: if use_concepts { &self.concepts[i] } else { &[] },
            caption: &self.samples[i].caption,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup,
    Estimate,
    Contrastive,
    Refresh,
    PostRefresh,
    Done,
}

impl Phase {
    pub fn next(self) -> Self {
        match self {
            Phase::Warmup => Phase::Estimate,
            Phase::Estimate => Phase::Contrastive,
            Phase::Contrastive => Phase::Refresh,
            Phase::Refresh => Phase::PostRefresh,
            Phase::PostRefresh | Phase::Done => Phase::Done,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub component: String,
    pub value: f64,
}

/// Writes `step,component,value` rows.
pub fn write_curves_csv(points: &[CurvePoint], path: &Path) -> Result<()> {
    let mut s = String::from("step,component,value\n");
    for p in points {
        s.push_str(&format!("{},{},{:?}\n", p.step, p.component, p.value));
    }
    std::fs::write(path, s)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmSummary {
    pub weight: [f64; 2],
    pub mean: [f64; 2],
    pub var: [f64; 2],
    pub iterations: usize,
    pub degenerate: bool,
}

impl From<&Gmm2<f64>> for GmmSummary {
    fn from(g: &Gmm2<f64>) -> Self {
        Self {
            weight: g.weight,
            mean: g.mean,
            var: g.var,
            iterations: g.log_likelihood_trace.len(),
            degenerate: g.degenerate,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseSummary {
    pub phase: Phase,
    pub steps: usize,
    /// Mean total loss over the last ten steps of the phase.
    pub final_loss: Option<f64>,
}

/// Stage-1 trainer. Each call to [`advance`](Self::advance) performs one
/// optimizer step or one whole non-gradient phase, so checkpoints can be taken
/// between any two units.
#[derive(Clone, Debug)]
pub struct Stage1 {
    pub cfg: PipelineConfig,
    pub model: BridgeModel,
    pub opt: AdamW,
    rng: ChaCha8Rng,
    pub phase: Phase,
    pub phase_step: usize,
    pub global_step: usize,
    pub data: Prepared,
    pub noise: Option<NoiseEstimate>,
    pub gmm: Option<GmmSummary>,
    pub curves: Vec<CurvePoint>,
    pub refreshed: usize,
}

impl Stage1 {
    pub fn new(cfg: &PipelineConfig, data: Prepared) -> Result<Self> {
        cfg.validate()?;
        if data.len() < 2 {
            return Err(Error::Invalid("stage 1 needs at least two pairs".into()));
        }
        let model = BridgeModel::new(&cfg.model, cfg.train.seed)?;
        let opt = AdamW::new(&model.params, adamw_config(cfg));
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        rng.set_stream(PHASE_RNG_STREAM);
        Ok(Self {
            cfg: cfg.clone(),
            model,
            opt,
            rng,
            phase: Phase::Warmup,
            phase_step: 0,
            global_step: 0,
            data,
            noise: None,
            gmm: None,
            curves: Vec::new(),
            refreshed: 0,
        })
    }

    fn total_steps(&self) -> usize {
        let t = &self.cfg.train;
        t.warmup_steps + t.nitc_steps + t.post_refresh_steps
    }

    fn phase_len(&self) -> usize {
        self.len_of(self.phase)
    }

    fn len_of(&self, phase: Phase) -> usize {
        let t = &self.cfg.train;
        match phase {
            Phase::Warmup => t.warmup_steps,
            Phase::Contrastive => t.nitc_steps,
            Phase::PostRefresh => t.post_refresh_steps,
            Phase::Estimate | Phase::Refresh => 1,
            Phase::Done => 0,
        }
    }

    /// Phase the next call to [`advance`](Self::advance) works in.
    pub fn upcoming(&self) -> Phase {
        let (mut phase, mut step) = (self.phase, self.phase_step);
        while phase != Phase::Done && step >= self.len_of(phase) {
            phase = phase.next();
            step = 0;
        }
        phase
    }

    fn next_phase(&mut self) {
        self.phase = self.phase.next();
        self.phase_step = 0;
        info!("event=phase phase={:?} global_step={}", self.phase, self.global_step);
    }

    pub fn is_done(&self) -> bool {
        self.phase == Phase::Done
    }

    /// Performs one unit of work. Returns `false` once the pipeline is done.
    pub fn advance(&mut self) -> Result<bool> {
        while self.phase != Phase::Done && self.phase_step >= self.phase_len() {
            self.next_phase();
        }
        match self.phase {
            Phase::Done => return Ok(false),
            Phase::Warmup => self.train_step(false)?,
            Phase::Contrastive | Phase::PostRefresh => {
                let every = self.cfg.train.reestimate_every;
                if self.phase == Phase::Contrastive
                    && self.cfg.train.noise_adaptive
                    && every > 0
                    && self.phase_step > 0
                    && self.phase_step % every == 0
                {
                    self.estimate_noise()?;
                }
                self.train_step(self.cfg.train.noise_adaptive)?
            }
            Phase::Estimate => {
                if self.cfg.train.noise_adaptive {
                    self.estimate_noise()?;
                }
            }
            Phase::Refresh => {
                if let Some(noise) = &self.noise {
                    let eps = noise.epsilon.clone();
                    self.refreshed = refresh_captions(
                        &self.model,
                        &mut self.data,
                        &eps,
                        self.cfg.train.refresh_threshold,
                        self.cfg.train.use_concepts,
                    )?;
                }
            }
        }
        self.phase_step += 1;
        Ok(true)
    }

    /// Runs to completion.
    pub fn run(&mut self) -> Result<()> {
        while self.advance()? {}
        Ok(())
    }

    /// Runs at most `units` units of work.
    pub fn run_units(&mut self, units: usize) -> Result<()> {
        for _ in 0..units {
            if !self.advance()? {
                break;
            }
        }
        Ok(())
    }

    fn omega_of(&self, idx: &[usize]) -> Vec<f64> {
        match &self.noise {
            Some(n) => idx.iter().map(|&i| n.omega[i]).collect(),
            None => vec![0.0; idx.len()],
        }
    }

    fn train_step(&mut self, noise_adaptive: bool) -> Result<()> {
        let t = self.cfg.train.clone();
        let n = self.data.len();
        let idx = sample(&mut self.rng, n, t.batch_size.min(n)).into_vec();
        let omega = self.omega_of(&idx);
        let pairs: Vec<PairRef> = idx.iter().map(|&i| self.data.pair(i, t.use_concepts)).collect();

        let mut tape = Tape::new();
        let b = self.model.bind(&mut tape, true);
        let imgs: Vec<&Tensor> = pairs.iter().map(|p| p.image).collect();
        let caps: Vec<&[usize]> = pairs.iter().map(|p| p.caption).collect();
        let (_, img) = self.model.encode_images(&mut tape, &b, &imgs)?;
        let txt = self.model.encode_texts(&mut tape, &b, &caps)?;
        let s = similarity_matrix(&mut tape, img, txt, t.tau, itc_group(&self.model))?;
        let (name, contrastive) = if noise_adaptive {
            ("nitc", nitc_loss(&mut tape, s, &omega, t.strict_itc_denominator)?)
        } else {
            ("itc", itc_loss(&mut tape, s)?)
        };
        let mut parts = vec![(name, t.itc_weight, contrastive)];
        if t.citm_weight != 0.0 {
            let (nt, ni) = mine_hard_negatives(tape.value(s), &mut self.rng)?;
            parts.push(("citm", t.citm_weight, citm_loss(&self.model, &mut tape, &b, &pairs, &nt, &ni)?));
        }
        if t.citg_weight != 0.0 {
            parts.push(("citg", t.citg_weight, citg_loss(&self.model, &mut tape, &b, &pairs)?));
        }
        let mut total = None;
        for &(_, w, v) in &parts {
            let term = if w == 1.0 { v } else { tape.scale(v, w) };
            total = Some(match total {
                None => term,
                Some(acc) => tape.add(acc, term),
            });
        }
        let total = total.expect("contrastive term always present");
        let step = self.global_step;
        for &(c, _, v) in &parts {
            self.curves.push(CurvePoint {
                step,
                component: c.to_string(),
                value: tape.value(v).item(),
            });
        }
        let tv = tape.value(total).item();
        if !tv.is_finite() {
            return Err(Error::Diverged(format!("loss {tv} at step {step}")));
        }
        self.curves.push(CurvePoint {
            step,
            component: "total".into(),
            value: tv,
        });
        let mut g = tape.backward(total)?;
        let mut grads = self.model.params.collect_grads(&b, &mut g);
        clip_grad_norm(&mut grads, t.max_grad_norm);
        let lr = cosine_lr(step, self.total_steps().max(1), t.peak_lr)?;
        self.opt.step(&mut self.model.params, &grads, lr)?;
        self.global_step += 1;
        if step % 50 == 0 {
            info!("event=step phase={:?} step={step} lr={lr:e} loss={tv:.6}", self.phase);
        }
        Ok(())
    }

    /// Per-sample ITC over the whole training split with weights fixed, then
    /// the mixture fit, posterior and smoothing rates.
    pub fn estimate_noise(&mut self) -> Result<()> {
        let t = &self.cfg.train;
        let losses = split_itc_losses(&self.model, &self.data, t.tau)?;
        let gmm = fit_gmm2(&losses, t.gmm_tol, t.gmm_max_iter)?;
        let eps = noise_posterior(&gmm, &losses);
        let ids = self.data.samples.iter().map(|s| s.id).collect();
        let est = NoiseEstimate::new(ids, eps, t.lambda, t.omega_max)?;
        info!(
            "event=noise_estimate means={:?} weights={:?} degenerate={}",
            gmm.mean, gmm.weight, gmm.degenerate
        );
        self.gmm = Some(GmmSummary::from(&gmm));
        self.noise = Some(est);
        Ok(())
    }

    /// AUC of ε against the planted flags, when both classes are present.
    pub fn noise_auc(&self) -> Option<f64> {
        let n = self.noise.as_ref()?;
        let flags: Vec<bool> = self.data.samples.iter().map(|s| s.is_noisy).collect();
        roc_auc(&n.epsilon, &flags).ok()
    }

    pub fn phase_summaries(&self) -> Vec<PhaseSummary> {
        let t = &self.cfg.train;
        let bounds = [
            (Phase::Warmup, 0, t.warmup_steps),
            (Phase::Contrastive, t.warmup_steps, t.warmup_steps + t.nitc_steps),
            (Phase::PostRefresh, t.warmup_steps + t.nitc_steps, self.total_steps()),
        ];
        bounds
            .iter()
            .map(|&(phase, lo, hi)| {
                let hi = hi.min(self.global_step);
                let totals: Vec<f64> = self
                    .curves
                    .iter()
                    .filter(|p| p.component == "total" && p.step >= lo && p.step < hi && p.step + 10 >= hi)
                    .map(|p| p.value)
                    .collect();
                PhaseSummary {
                    phase,
                    steps: hi.saturating_sub(lo),
                    final_loss: (!totals.is_empty()).then(|| totals.iter().sum::<f64>() / totals.len() as f64),
                }
            })
            .collect()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let (seed, stream, word_pos) = (self.rng.get_seed(), self.rng.get_stream(), self.rng.get_word_pos());
        let captions: Vec<_> = self
            .data
            .samples
            .iter()
            .map(|s| json!({"id": s.id, "caption": s.caption, "original_caption": s.original_caption}))
            .collect();
        let meta = json!({
            "kind": "stage1",
            "config": self.cfg.to_json(),
            "phase": self.phase,
            "phase_step": self.phase_step,
            "global_step": self.global_step,
            "rng": {"seed": seed.to_vec(), "stream": stream, "word_pos": word_pos.to_string()},
            "noise": self.noise,
            "gmm": self.gmm,
            "curves": self.curves,
            "refreshed": self.refreshed,
            "captions": captions,
        });
        Checkpoint {
            meta,
            stores: vec![("bridge".into(), self.model.params.clone())],
            optimizers: vec![("bridge".into(), self.opt.clone())],
        }
    }

    /// Rebuilds a trainer from a checkpoint and the original prepared split.
    pub fn resume(ck: &Checkpoint, data: Prepared) -> Result<Self> {
        let m = &ck.meta;
        if m["kind"] != "stage1" {
            return Err(Error::Checkpoint("not a stage-1 checkpoint".into()));
        }
        let cfg = PipelineConfig::from_json(m["config"].clone())?;
        let mut s = Self::new(&cfg, data)?;
        s.model.params.load_values(ck.store("bridge")?)?;
        restore_optimizer(&mut s.opt, ck.optimizer("bridge")?, &s.model.params)?;
        let get = |k: &str| -> Result<serde_json::Value> {
            m.get(k).cloned().ok_or_else(|| Error::Checkpoint(format!("missing `{k}`")))
        };
        s.phase = serde_json::from_value(get("phase")?)?;
        s.phase_step = serde_json::from_value(get("phase_step")?)?;
        s.global_step = serde_json::from_value(get("global_step")?)?;
        s.noise = serde_json::from_value(get("noise")?)?;
        s.gmm = serde_json::from_value(get("gmm")?)?;
        s.curves = serde_json::from_value(get("curves")?)?;
        s.refreshed = serde_json::from_value(get("refreshed")?)?;
        let rng = get("rng")?;
        let seed: Vec<u8> = serde_json::from_value(rng["seed"].clone())?;
        let seed: [u8; 32] = seed
            .try_into()
            .map_err(|_| Error::Checkpoint("rng seed must be 32 bytes".into()))?;
        s.rng = ChaCha8Rng::from_seed(seed);
        s.rng.set_stream(serde_json::from_value(rng["stream"].clone())?);
        let pos: String = serde_json::from_value(rng["word_pos"].clone())?;
        s.rng.set_word_pos(pos.parse().map_err(|_| Error::Checkpoint("bad rng position".into()))?);
        let caps = get("captions")?;
        let caps = caps.as_array().ok_or_else(|| Error::Checkpoint("captions".into()))?;
        if caps.len() != s.data.len() {
            return Err(Error::Checkpoint("caption count differs from the dataset".into()));
        }
        for (sample, c) in s.data.samples.iter_mut().zip(caps) {
            if c["id"] != sample.id {
                return Err(Error::Checkpoint(format!("sample {} out of order", sample.id)));
            }
            sample.caption = serde_json::from_value(c["caption"].clone())?;
            sample.original_caption = serde_json::from_value(c["original_caption"].clone())?;
        }
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint().save(path)
    }
}

pub fn adamw_config(cfg: &PipelineConfig) -> AdamWConfig {
    AdamWConfig {
        beta1: cfg.train.beta1,
        beta2: cfg.train.beta2,
        eps: cfg.train.eps,
        weight_decay: cfg.train.weight_decay,
    }
}

fn itc_group(model: &BridgeModel) -> usize {
    match model.config().pooling {
        Pooling::Max => model.config().num_queries,
        Pooling::Mean => 1,
    }
}

/// Scales gradients so their global norm is at most `max_norm` (0 = off).
pub fn clip_grad_norm(grads: &mut [Option<Tensor>], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let sq: f64 = grads
        .iter()
        .flatten()
        .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let c = max_norm / norm;
        grads
            .iter_mut()
            .flatten()
            .for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= c));
    }
}

/// Contrastive embeddings of every pair in `data`, without gradients:
/// `(image rows, text rows, group)`.
pub fn embed_split(model: &BridgeModel, data: &Prepared) -> Result<(Tensor, Tensor, usize)> {
    let mut img_rows = Vec::new();
    let mut txt_rows = Vec::new();
    let mut width = 0;
    for lo in (0..data.len()).step_by(EMBED_CHUNK) {
        let hi = (lo + EMBED_CHUNK).min(data.len());
        let mut tape = Tape::new();
        let b = model.bind(&mut tape, false);
        let imgs: Vec<&Tensor> = data.feats[lo..hi].iter().collect();
        let caps: Vec<&[usize]> = data.samples[lo..hi].iter().map(|s| s.caption.as_slice()).collect();
        let (_, img) = model.encode_images(&mut tape, &b, &imgs)?;
        let txt = model.encode_texts(&mut tape, &b, &caps)?;
        width = tape.value(img).cols();
        img_rows.extend_from_slice(tape.value(img).data());
        txt_rows.extend_from_slice(tape.value(txt).data());
    }
    let img = Tensor::matrix(img_rows.len() / width, width, img_rows)?;
    let txt = Tensor::matrix(txt_rows.len() / width, width, txt_rows)?;
    Ok((img, txt, itc_group(model)))
}

/// Pooled similarity of every image against every text of `data`.
pub fn split_similarity(model: &BridgeModel, data: &Prepared, tau: f64) -> Result<Tensor> {
    let (img, txt, group) = embed_split(model, data)?;
    let mut tape = Tape::new();
    let i = tape.constant(img);
    let t = tape.constant(txt);
    let s = similarity_matrix(&mut tape, i, t, tau, group)?;
    Ok(tape.value(s).clone())
}

/// `ℓ_i = ½(row CE + column CE)` with the whole split as one batch.
pub fn split_itc_losses(model: &BridgeModel, data: &Prepared, tau: f64) -> Result<Vec<f64>> {
    let s = split_similarity(model, data, tau)?;
    let mut tape = Tape::new();
    let v = tape.constant(s);
    let l = per_sample_itc(&mut tape, v)?;
    Ok(tape.value(l).data().to_vec())
}

/// Greedy decoding from `[queries | concepts | [DEC]]` under the multimodal
/// causal mask, restricted to object tokens and `[EOS]`. Returns each caption
/// and whether it hit the length limit.
pub fn greedy_decode(
    model: &BridgeModel,
    images: &[&Tensor],
    concepts: &[&[usize]],
    max_len: usize,
) -> Result<Vec<(Vec<usize>, bool)>> {
    let v = model.vocab();
    let n = images.len();
    let mut out: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut open: Vec<usize> = (0..n).collect();
    let mut truncated = vec![false; n];
    for step in 0..=max_len {
        if open.is_empty() {
            break;
        }
        let texts: Vec<Vec<usize>> = open
            .iter()
            .map(|&i| std::iter::once(v.dec()).chain(out[i].iter().copied()).collect())
            .collect();
        let seqs: Vec<SeqInput> = open
            .iter()
            .zip(&texts)
            .map(|(&i, t)| SeqInput {
                image: Some(images[i]),
                concepts: concepts[i],
                text: t,
            })
            .collect();
        let mut tape = Tape::new();
        let b = model.bind(&mut tape, false);
        let fwd = model.forward(&mut tape, &b, &seqs, MaskKind::MultimodalCausal)?;
        let last: Vec<usize> = fwd.seqs.iter().map(|s| s.text_rows().end - 1).collect();
        let logits = model.lm_logits(&mut tape, &b, &fwd, &last);
        let lv = tape.value(logits);
        let mut still = Vec::new();
        for (r, &i) in open.iter().enumerate() {
            let row = lv.row(r);
            let mut best = v.eos();
            for tok in 0..v.num_objects {
                if row[tok] > row[best] {
                    best = tok;
                }
            }
            if best == v.eos() {
                continue;
            }
            if step == max_len {
                truncated[i] = true;
                continue;
            }
            out[i].push(best);
            still.push(i);
        }
        open = still;
    }
    Ok(out.into_iter().zip(truncated).collect())
}

/// Replaces the caption of every pair with `ε > threshold` by a greedy decode,
/// archiving the original. Returns how many captions were replaced.
pub fn refresh_captions(
    model: &BridgeModel,
    data: &mut Prepared,
    epsilon: &[f64],
    threshold: f64,
    use_concepts: bool,
) -> Result<usize> {
    if epsilon.len() != data.len() {
        return Err(Error::Shape("one noise probability per pair required".into()));
    }
    let chosen: Vec<usize> = (0..data.len()).filter(|&i| epsilon[i] > threshold).collect();
    let cfg = model.config();
    let max_len = cfg.max_positions - cfg.max_concepts - 1;
    for chunk in chosen.chunks(EMBED_CHUNK) {
        let imgs: Vec<&Tensor> = chunk.iter().map(|&i| &data.feats[i]).collect();
        let cons: Vec<&[usize]> = chunk
            .iter()
            .map(|&i| if use_concepts { data.concepts[i].as_slice() } else { &[] })
            .collect();
        let decoded = greedy_decode(model, &imgs, &cons, max_len)?;
        for (&i, (caption, cut)) in chunk.iter().zip(decoded) {
            let s = &mut data.samples[i];
            if cut {
                warn!("event=refresh_truncated id={} max_len={max_len}", s.id);
            }
            let old = std::mem::replace(&mut s.caption, caption);
            if s.original_caption.is_none() {
                s.original_caption = Some(old);
            }
        }
    }
    info!("event=refresh replaced={}", chosen.len());
    Ok(chosen.len())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2Report {
    pub lm_curve: Vec<f64>,
    pub heldout_before: f64,
    pub heldout_after: f64,
    pub decoder_hash_before: String,
    pub decoder_hash_after: String,
}

/// Token-weighted generative loss over a whole split, without gradients.
pub fn heldout_lm_loss(
    bridge: &BridgeModel,
    fc: &PrefixProjection,
    lm: &FrozenDecoderLM,
    data: &Prepared,
) -> Result<f64> {
    let mut total = 0.0;
    let mut tokens = 0usize;
    for lo in (0..data.len()).step_by(EMBED_CHUNK) {
        let hi = (lo + EMBED_CHUNK).min(data.len());
        let mut tape = Tape::new();
        let bb = bridge.bind(&mut tape, false);
        let fb = fc.bind(&mut tape, false);
        let lb = lm.bind(&mut tape);
        let imgs: Vec<&Tensor> = data.feats[lo..hi].iter().collect();
        let caps: Vec<&[usize]> = data.samples[lo..hi].iter().map(|s| s.caption.as_slice()).collect();
        let binds = GenBindings {
            bridge: &bb,
            fc: &fb,
            lm: &lb,
        };
        let l = generative_loss(bridge, fc, lm, &mut tape, &binds, &imgs, &caps)?;
        let n: usize = caps.iter().map(|c| c.len() + 1).sum();
        total += tape.value(l).item() * n as f64;
        tokens += n;
    }
    if tokens == 0 {
        return Err(Error::Invalid("held-out split is empty".into()));
    }
    Ok(total / tokens as f64)
}

/// Trains the bridge and the prefix projection through the frozen decoder.
pub fn run_stage2(
    cfg: &PipelineConfig,
    bridge: &mut BridgeModel,
    fc: &mut PrefixProjection,
    lm: &FrozenDecoderLM,
    train: &Prepared,
    heldout: &Prepared,
) -> Result<Stage2Report> {
    let t = &cfg.train;
    let before_hash = lm.content_hash();
    if !lm.is_frozen() {
        return Err(Error::Invalid("stage 2 requires a frozen decoder".into()));
    }
    let heldout_before = heldout_lm_loss(bridge, fc, lm, heldout)?;
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
    rng.set_stream(STAGE2_RNG_STREAM);
    let acfg = adamw_config(cfg);
    let mut opt_b = AdamW::new(&bridge.params, acfg);
    let mut opt_f = AdamW::new(&fc.params, acfg);
    let mut curve = Vec::with_capacity(t.stage2_steps);
    let n = train.len();
    for step in 0..t.stage2_steps {
        let idx = sample(&mut rng, n, t.stage2_batch_size.min(n)).into_vec();
        let mut tape = Tape::new();
        let bb = bridge.bind(&mut tape, true);
        let fb = fc.bind(&mut tape, true);
        let lb = lm.bind(&mut tape);
        let imgs: Vec<&Tensor> = idx.iter().map(|&i| &train.feats[i]).collect();
        let caps: Vec<&[usize]> = idx.iter().map(|&i| train.samples[i].caption.as_slice()).collect();
        let binds = GenBindings {
            bridge: &bb,
            fc: &fb,
            lm: &lb,
        };
        let loss = generative_loss(bridge, fc, lm, &mut tape, &binds, &imgs, &caps)?;
        let lv = tape.value(loss).item();
        if !lv.is_finite() {
            return Err(Error::Diverged(format!("stage-2 loss {lv} at step {step}")));
        }
        curve.push(lv);
        let mut g = tape.backward(loss)?;
        let mut gb = bridge.params.collect_grads(&bb, &mut g);
        let mut gf = fc.params.collect_grads(&fb, &mut g);
        if t.max_grad_norm > 0.0 {
            // one global norm across both parameter sets
            let mut all: Vec<Option<Tensor>> = gb.drain(..).chain(gf.drain(..)).collect();
            clip_grad_norm(&mut all, t.max_grad_norm);
            gf = all.split_off(bridge.params.len());
            gb = all;
        }
        let lr = cosine_lr(step, t.stage2_steps, t.stage2_peak_lr)?;
        opt_b.step(&mut bridge.params, &gb, lr)?;
        opt_f.step(&mut fc.params, &gf, lr)?;
        if step % 50 == 0 {
            info!("event=stage2_step step={step} lr={lr:e} loss={lv:.6}");
        }
    }
    let heldout_after = heldout_lm_loss(bridge, fc, lm, heldout)?;
    let after_hash = lm.content_hash();
    if after_hash != before_hash {
        return Err(Error::FrozenHashMismatch("decoder".into()));
    }
    Ok(Stage2Report {
        lm_curve: curve,
        heldout_before,
        heldout_after,
        decoder_hash_before: before_hash,
        decoder_hash_after: after_hash,
    })
}

/// Content hashes of every frozen parameter set.
pub fn frozen_hashes(env: &Environment, lm: Option<&FrozenDecoderLM>) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    m.insert("image_encoder".to_string(), env.encoder.content_hash());
    if let Some(lm) = lm {
        m.insert("decoder".to_string(), lm.content_hash());
    }
    m
}

/// Stage-2 checkpoint holding the bridge, the projection and the frozen sets.
pub fn stage2_checkpoint(
    cfg: &PipelineConfig,
    bridge: &BridgeModel,
    fc: &PrefixProjection,
    env: &Environment,
    lm: &FrozenDecoderLM,
) -> Checkpoint {
    let stores: Vec<(String, ParamStore)> = vec![
        ("bridge".into(), bridge.params.clone()),
        ("fc".into(), fc.params.clone()),
        ("image_encoder".into(), env.encoder.params().clone()),
        ("decoder".into(), lm.params().clone()),
    ];
    Checkpoint {
        meta: json!({"kind": "stage2", "config": cfg.to_json()}),
        stores,
        optimizers: Vec::new(),
    }
}

/// Everything produced by [`stage2_pipeline`].
#[derive(Clone, Debug)]
pub struct Stage2Run {
    pub bridge: BridgeModel,
    pub fc: PrefixProjection,
    pub lm: FrozenDecoderLM,
    pub report: Stage2Report,
}

/// Runs stage 2 from a stage-1 bridge on the (revised) training pairs with a
/// fresh prefix projection.
pub fn stage2_pipeline(
    env: &Environment,
    lm: FrozenDecoderLM,
    bridge: &BridgeModel,
    train: &Prepared,
    heldout: &Prepared,
) -> Result<Stage2Run> {
    let cfg = &env.cfg;
    let mut bridge = bridge.clone();
    let mut fc = PrefixProjection::new(cfg.model.d, cfg.model.d_llm, cfg.train.seed.wrapping_add(1));
    let report = run_stage2(cfg, &mut bridge, &mut fc, &lm, train, heldout)?;
    Ok(Stage2Run { bridge, fc, lm, report })
}
