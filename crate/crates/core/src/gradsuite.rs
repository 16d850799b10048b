//! Finite-difference gradient suite over every training objective, shared by
//! the `gradcheck` command and the test suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::Var;
use crate::error::Result;
use crate::frozen::{DecoderConfig, FrozenDecoderLM};
use crate::gradcheck::grad_check_many;
use crate::model::{BridgeModel, ModelConfig};
use crate::objectives::{
    citg_loss, citm_loss, generative_loss, itc_loss, nitc_loss, similarity_matrix, GenBindings, PairRef, Pooling,
    PrefixProjection,
};
use crate::params::Binding;
use crate::{Tape, Tensor};

pub const STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradRow {
    pub loss: String,
    pub instances: usize,
    pub max_rel_err: f64,
}

impl GradRow {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= TOLERANCE
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// Small model used for the model-level checks.
pub fn tiny_model_config(pooling: Pooling) -> ModelConfig {
    ModelConfig {
        num_queries: 2,
        d: 8,
        layers: 1,
        heads: 2,
        d_itc: 4,
        ffn: 8,
        num_objects: 6,
        max_positions: 6,
        max_concepts: 2,
        num_patches: 2,
        enc_dim: 4,
        d_llm: 8,
        pooling,
    }
}

struct Batch {
    images: Vec<Tensor>,
    concepts: Vec<Vec<usize>>,
    captions: Vec<Vec<usize>>,
}

impl Batch {
    fn random(rng: &mut ChaCha8Rng, cfg: &ModelConfig, n: usize) -> Self {
        let objects = cfg.num_objects;
        let tokens = |max: usize, min: usize, rng: &mut ChaCha8Rng| -> Vec<usize> {
            let len = rng.random_range(min..=max);
            (0..len).map(|_| rng.random_range(0..objects)).collect()
        };
        let images = (0..n).map(|_| random_tensor(rng, cfg.num_patches, cfg.enc_dim)).collect();
        let concepts = (0..n).map(|_| tokens(cfg.max_concepts, 0, rng)).collect();
        let captions = (0..n).map(|_| tokens(3, 1, rng)).collect();
        Self {
            images,
            concepts,
            captions,
        }
    }

    fn pairs(&self) -> Vec<PairRef<'_>> {
        (0..self.images.len())
            .map(|i| PairRef {
                image: &self.images[i],
                concepts: &self.concepts[i],
                caption: &self.captions[i],
            })
            .collect()
    }
}

fn params_of(model: &BridgeModel) -> Vec<Tensor> {
    model.params.iter().map(|p| p.value.clone()).collect()
}

fn contrastive_instance(rng: &mut ChaCha8Rng, noisy: bool) -> Result<f64> {
    let b = rng.random_range(2..=5);
    let group = rng.random_range(1..=3);
    let d = rng.random_range(2..=5);
    let tau = rng.random_range(0.3..1.5);
    let omega: Vec<f64> = (0..b).map(|_| rng.random_range(0.0..0.9)).collect();
    let strict = rng.random_bool(0.5);
    let inputs = [random_tensor(rng, b * group, d), random_tensor(rng, b, d)];
    grad_check_many(
        |tape: &mut Tape, v: &[Var]| {
            let img = tape.l2_normalize_rows(v[0])?;
            let txt = tape.l2_normalize_rows(v[1])?;
            let s = similarity_matrix(tape, img, txt, tau, group)?;
            if noisy {
                nitc_loss(tape, s, &omega, strict)
            } else {
                itc_loss(tape, s)
            }
        },
        &inputs,
        STEP,
    )
}

fn pooling(rng: &mut ChaCha8Rng) -> Pooling {
    if rng.random_bool(0.5) {
        Pooling::Max
    } else {
        Pooling::Mean
    }
}

fn citg_instance(rng: &mut ChaCha8Rng) -> Result<f64> {
    let cfg = tiny_model_config(pooling(rng));
    let model = BridgeModel::new(&cfg, rng.random())?;
    let n = rng.random_range(1..=3);
    let batch = Batch::random(rng, &cfg, n);
    let pairs = batch.pairs();
    grad_check_many(
        |tape: &mut Tape, v: &[Var]| citg_loss(&model, tape, &Binding::from_vars(v.to_vec()), &pairs),
        &params_of(&model),
        STEP,
    )
}

fn citm_instance(rng: &mut ChaCha8Rng) -> Result<f64> {
    let cfg = tiny_model_config(pooling(rng));
    let model = BridgeModel::new(&cfg, rng.random())?;
    let n = rng.random_range(2..=3);
    let batch = Batch::random(rng, &cfg, n);
    let pairs = batch.pairs();
    let other = |i: usize, rng: &mut ChaCha8Rng| (i + rng.random_range(1..n)) % n;
    let neg_text: Vec<usize> = (0..n).map(|i| other(i, rng)).collect();
    let neg_image: Vec<usize> = (0..n).map(|i| other(i, rng)).collect();
    grad_check_many(
        |tape: &mut Tape, v: &[Var]| {
            citm_loss(&model, tape, &Binding::from_vars(v.to_vec()), &pairs, &neg_text, &neg_image)
        },
        &params_of(&model),
        STEP,
    )
}

fn generative_instance(rng: &mut ChaCha8Rng) -> Result<f64> {
    let cfg = tiny_model_config(pooling(rng));
    let bridge = BridgeModel::new(&cfg, rng.random())?;
    let fc = PrefixProjection::new(cfg.d, cfg.d_llm, rng.random());
    let dcfg = DecoderConfig {
        d_llm: cfg.d_llm,
        heads: 2,
        ffn: 8,
        layers: 1,
        max_positions: 6,
        ..DecoderConfig::default()
    };
    let mut lm = FrozenDecoderLM::new(&dcfg, cfg.vocab(), rng.random())?;
    lm.freeze();
    let n = rng.random_range(1..=3);
    let batch = Batch::random(rng, &cfg, n);
    let images: Vec<&Tensor> = batch.images.iter().collect();
    let captions: Vec<&[usize]> = batch.captions.iter().map(|c| c.as_slice()).collect();
    let split = bridge.params.len();
    let mut inputs = params_of(&bridge);
    inputs.extend(fc.params.iter().map(|p| p.value.clone()));
    grad_check_many(
        |tape: &mut Tape, v: &[Var]| {
            let bb = Binding::from_vars(v[..split].to_vec());
            let fb = Binding::from_vars(v[split..].to_vec());
            let lb = lm.bind(tape);
            let binds = GenBindings {
                bridge: &bb,
                fc: &fb,
                lm: &lb,
            };
            generative_loss(&bridge, &fc, &lm, tape, &binds, &images, &captions)
        },
        &inputs,
        STEP,
    )
}

/// Worst relative error of each objective over `instances` random draws.
pub fn run_suite(instances: usize, seed: u64) -> Result<Vec<GradRow>> {
    type Check = fn(&mut ChaCha8Rng) -> Result<f64>;
    let checks: [(&str, Check); 5] = [
        ("itc", |r| contrastive_instance(r, false)),
        ("nitc", |r| contrastive_instance(r, true)),
        ("citg", citg_instance),
        ("citm", citm_instance),
        ("generative", generative_instance),
    ];
    checks
        .iter()
        .enumerate()
        .map(|(k, (name, check))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let mut worst = 0.0f64;
            for _ in 0..instances {
                worst = worst.max(check(&mut rng)?);
            }
            Ok(GradRow {
                loss: name.to_string(),
                instances,
                max_rel_err: worst,
            })
        })
        .collect()
}
