//! Synthetic paired data with known object composition, planted caption-swap
//! noise and dropped caption words.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frozen::{orthonormal_basis, RetrievalVlmStub};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    /// Number of distinct objects (nouns), `M`.
    pub vocab_size: usize,
    pub objects_per_image: usize,
    pub raw_dim: usize,
    pub noise_rate: f64,
    pub drop_rate: f64,
    pub feature_noise_sigma: f64,
    pub dataset_size: usize,
    /// Size of the clean held-out split.
    pub eval_size: usize,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            vocab_size: 24,
            objects_per_image: 3,
            raw_dim: 32,
            noise_rate: 0.3,
            drop_rate: 0.2,
            feature_noise_sigma: 0.05,
            dataset_size: 400,
            eval_size: 100,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.vocab_size == 0 || self.objects_per_image == 0 {
            return bad("world needs at least one object per image".into());
        }
        if self.objects_per_image > self.vocab_size {
            return bad(format!(
                "objects_per_image {} exceeds vocab_size {}",
                self.objects_per_image, self.vocab_size
            ));
        }
        if self.raw_dim < self.vocab_size {
            return bad(format!(
                "raw_dim {} cannot hold {} orthonormal object directions",
                self.raw_dim, self.vocab_size
            ));
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return bad(format!("noise_rate {} outside [0, 1]", self.noise_rate));
        }
        if !(0.0..1.0).contains(&self.drop_rate) {
            return bad(format!("drop_rate {} outside [0, 1)", self.drop_rate));
        }
        if !(self.feature_noise_sigma >= 0.0 && self.feature_noise_sigma.is_finite()) {
            return bad("feature_noise_sigma must be a finite non-negative number".into());
        }
        if self.noise_rate > 0.0 && self.dataset_size < 2 {
            return bad("noisy datasets need at least 2 samples".into());
        }
        Ok(())
    }

    pub fn noisy_count(&self) -> usize {
        (self.noise_rate * self.dataset_size as f64).floor() as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedSample {
    pub id: u64,
    pub features: Vec<f64>,
    pub caption: Vec<usize>,
    pub true_objects: Vec<usize>,
    pub is_noisy: bool,
    pub dropped: Vec<usize>,
    /// Caption before a refresh replaced it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub original_caption: Option<Vec<usize>>,
}

/// Noun string of object `id`.
pub fn noun_name(id: usize) -> String {
    format!("obj{id:03}")
}

/// Object id of a noun produced by [`noun_name`].
pub fn noun_id(noun: &str) -> Option<usize> {
    let digits = noun.strip_prefix("obj")?;
    if digits.len() < 3 || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}

/// Seeded object directions shared by the data generator and the retrieval stub.
#[derive(Clone, Debug)]
pub struct World {
    pub cfg: WorldConfig,
    pub basis: Vec<Vec<f64>>,
}

const TRAIN_STREAM: u64 = 1;
const EVAL_STREAM: u64 = 2;

impl World {
    pub fn new(cfg: &WorldConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let basis = orthonormal_basis(cfg.vocab_size, cfg.raw_dim, &mut rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            basis,
        })
    }

    pub fn retrieval_stub(&self) -> RetrievalVlmStub {
        let nouns = (0..self.cfg.vocab_size).map(noun_name).collect();
        RetrievalVlmStub::new(nouns, self.basis.clone()).expect("basis matches nouns")
    }

    /// Raw features of an image containing `objects`, plus Gaussian noise.
    pub fn render(&self, objects: &[usize], rng: &mut impl Rng) -> Vec<f64> {
        let mut x = vec![0.0; self.cfg.raw_dim];
        for &o in objects {
            x.iter_mut().zip(&self.basis[o]).for_each(|(a, b)| *a += b);
        }
        if self.cfg.feature_noise_sigma > 0.0 {
            let n = Normal::new(0.0, self.cfg.feature_noise_sigma).expect("valid sigma");
            x.iter_mut().for_each(|a| *a += n.sample(rng));
        }
        x
    }

    fn clean_samples(&self, n: usize, first_id: u64, drop_rate: f64, rng: &mut ChaCha8Rng) -> Vec<PairedSample> {
        let m = self.cfg.objects_per_image;
        (0..n)
            .map(|i| {
                let mut objects = sample(rng, self.cfg.vocab_size, m).into_vec();
                objects.sort_unstable();
                let features = self.render(&objects, rng);
                let mut caption = Vec::with_capacity(m);
                let mut dropped = Vec::new();
                for &o in &objects {
                    if drop_rate > 0.0 && rng.random::<f64>() < drop_rate {
                        dropped.push(o);
                    } else {
                        caption.push(o);
                    }
                }
                PairedSample {
                    id: first_id + i as u64,
                    features,
                    caption,
                    true_objects: objects,
                    is_noisy: false,
                    dropped,
                    original_caption: None,
                }
            })
            .collect()
    }

    /// Training split with planted noise.
    pub fn generate_dataset(&self) -> Result<Vec<PairedSample>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(TRAIN_STREAM);
        let mut samples = self.clean_samples(self.cfg.dataset_size, 0, self.cfg.drop_rate, &mut rng);
        plant_noise(&mut samples, self.cfg.noisy_count(), &mut rng)?;
        Ok(samples)
    }

    /// Clean held-out split (no swaps, no drops); ids follow the training split.
    pub fn generate_eval_split(&self) -> Vec<PairedSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(EVAL_STREAM);
        self.clean_samples(self.cfg.eval_size, self.cfg.dataset_size as u64, 0.0, &mut rng)
    }
}

pub fn generate_dataset(cfg: &WorldConfig) -> Result<Vec<PairedSample>> {
    World::new(cfg)?.generate_dataset()
}

/// Swaps captions among `count` seeded indices by a cyclic shift, then
/// repairs positions that would keep an identical caption.
fn plant_noise(samples: &mut [PairedSample], count: usize, rng: &mut ChaCha8Rng) -> Result<()> {
    if count == 0 {
        return Ok(());
    }
    let n = samples.len();
    let mut chosen = sample(rng, n, count).into_vec();
    chosen.sort_unstable();
    let originals: Vec<Vec<usize>> = samples.iter().map(|s| s.caption.clone()).collect();
    // donor[t] is the sample whose caption chosen[t] receives
    let mut donor: Vec<usize> = if count == 1 {
        // a single swap takes the next sample's caption
        let i = chosen[0];
        vec![(1..n).map(|k| (i + k) % n).find(|&j| originals[j] != originals[i]).unwrap_or((i + 1) % n)]
    } else {
        (0..count).map(|t| chosen[(t + 1) % count]).collect()
    };
    for t in 0..count {
        if originals[donor[t]] != originals[chosen[t]] {
            continue;
        }
        let fix = (0..count).find(|&u| {
            u != t
                && originals[donor[u]] != originals[chosen[t]]
                && originals[donor[t]] != originals[chosen[u]]
        });
        match fix {
            Some(u) => donor.swap(t, u),
            None => {
                return Err(Error::Invalid(
                    "cannot plant noise: every candidate caption equals the original".into(),
                ))
            }
        }
    }
    for t in 0..count {
        let s = &mut samples[chosen[t]];
        s.caption = originals[donor[t]].clone();
        s.is_noisy = true;
    }
    Ok(())
}

/// Writes one JSON object per line.
pub fn save_dataset(samples: &[PairedSample], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Vec<PairedSample>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: PairedSample = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(s);
    }
    Ok(out)
}

/// Occurrences of each object noun across captions.
pub fn caption_token_counts(samples: &[PairedSample]) -> std::collections::BTreeMap<String, u64> {
    let mut counts = std::collections::BTreeMap::new();
    for s in samples {
        for &t in &s.caption {
            *counts.entry(noun_name(t)).or_insert(0) += 1;
        }
    }
    counts
}

/// Whether the caption lists exactly the surviving true objects.
pub fn caption_is_faithful(s: &PairedSample) -> bool {
    let dropped: BTreeSet<_> = s.dropped.iter().collect();
    let want: Vec<usize> = s.true_objects.iter().filter(|o| !dropped.contains(o)).copied().collect();
    s.caption == want
}
