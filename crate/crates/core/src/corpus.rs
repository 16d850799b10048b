//! Visual concept corpus and top-k concept retrieval.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frozen::RetrievalVlmStub;
use crate::tensor::dot;

pub const DEFAULT_MIN_COUNT: u64 = 5;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConceptCorpus {
    nouns: Vec<String>,
    counts: Vec<u64>,
    min_count: u64,
}

impl ConceptCorpus {
    pub fn nouns(&self) -> &[String] {
        &self.nouns
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn min_count(&self) -> u64 {
        self.min_count
    }

    pub fn len(&self) -> usize {
        self.nouns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nouns.is_empty()
    }

    /// `noun<TAB>count` lines in corpus order.
    pub fn to_tsv(&self) -> String {
        self.nouns
            .iter()
            .zip(&self.counts)
            .map(|(n, c)| format!("{n}\t{c}\n"))
            .collect()
    }
}

/// Keeps nouns seen at least `min_count` times, sorted lexicographically.
pub fn build_corpus(counts: &BTreeMap<String, u64>, min_count: u64) -> Result<ConceptCorpus> {
    let (nouns, counts): (Vec<String>, Vec<u64>) = counts
        .iter()
        .filter(|(_, &c)| c >= min_count)
        .map(|(n, &c)| (n.clone(), c))
        .unzip();
    if nouns.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(ConceptCorpus {
        nouns,
        counts,
        min_count,
    })
}

/// Parses `noun<TAB>count` lines; repeated nouns accumulate.
pub fn parse_counts(text: &str) -> Result<BTreeMap<String, u64>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse = |msg: &str| Error::Parse {
            line: i + 1,
            msg: msg.to_string(),
        };
        let (noun, count) = line.split_once('\t').ok_or_else(|| parse("expected noun<TAB>count"))?;
        let noun = noun.trim();
        if noun.is_empty() || noun.contains(char::is_whitespace) {
            return Err(parse("noun must be a single non-empty token"));
        }
        let count: u64 = count.trim().parse().map_err(|_| parse("count is not a non-negative integer"))?;
        if count == 0 {
            return Err(parse("count must be positive"));
        }
        *out.entry(noun.to_string()).or_insert(0) += count;
    }
    Ok(out)
}

pub fn read_counts(path: &Path) -> Result<BTreeMap<String, u64>> {
    parse_counts(&std::fs::read_to_string(path)?)
}

/// `score[n] = vp_embed(image) · tp_embed(prompt, noun_n)`.
pub fn concept_similarity(
    stub: &RetrievalVlmStub,
    raw: &[f64],
    corpus: &ConceptCorpus,
    prompt: &str,
) -> Result<Vec<f64>> {
    let v = stub.vp_embed(raw)?;
    corpus
        .nouns()
        .iter()
        .map(|n| Ok(dot(&v, &stub.tp_embed(prompt, n)?)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptRetrieval {
    pub image_id: u64,
    pub concepts: Vec<String>,
    pub scores: Vec<f64>,
}

/// Top-`k` nouns by score, ties broken by noun order.
pub fn retrieve_concepts(
    stub: &RetrievalVlmStub,
    image_id: u64,
    raw: &[f64],
    corpus: &ConceptCorpus,
    prompt: &str,
    k: usize,
) -> Result<ConceptRetrieval> {
    if k == 0 {
        return Err(Error::Invalid("k must be at least 1".into()));
    }
    let scores = concept_similarity(stub, raw, corpus, prompt)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| corpus.nouns[a].cmp(&corpus.nouns[b]))
    });
    order.truncate(k);
    Ok(ConceptRetrieval {
        image_id,
        concepts: order.iter().map(|&i| corpus.nouns[i].clone()).collect(),
        scores: order.iter().map(|&i| scores[i]).collect(),
    })
}

pub fn save_retrievals(items: &[ConceptRetrieval], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in items {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_retrievals(path: &Path) -> Result<Vec<ConceptRetrieval>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(pairs: &[(&str, u64)]) -> BTreeMap<String, u64> {
        pairs.iter().map(|(n, c)| (n.to_string(), *c)).collect()
    }

    #[test]
    fn threshold_rule() {
        let c = build_corpus(&counts(&[("cat", 7), ("dog", 4), ("tree", 5)]), 5).unwrap();
        assert_eq!(c.nouns(), &["cat", "tree"]);
        assert!(matches!(
            build_corpus(&counts(&[("cat", 1), ("dog", 4)]), 5),
            Err(Error::EmptyCorpus)
        ));
    }

    #[test]
    fn tsv_round_trip_and_errors() {
        let c = build_corpus(&counts(&[("b", 9), ("a", 6)]), 5).unwrap();
        let back = build_corpus(&parse_counts(&c.to_tsv()).unwrap(), 5).unwrap();
        assert_eq!(back, c);
        assert!(matches!(parse_counts("a\t3\nb 4\n"), Err(Error::Parse { line: 2, .. })));
        assert!(parse_counts("a\t-1\n").is_err());
    }
}
