//! Pair construction and scoring.
//!
//! Positives are enumerated exhaustively. Negatives are either sampled per class
//! at a fixed negative-to-positive ratio, or enumerated exhaustively. Each
//! negative is attributed to exactly one *anchor* class: the class whose quota
//! generated it (sampling) or the class of the lower-index endpoint
//! (exhaustive). Per-class specificity only ever sees negatives anchored at that
//! class, so no negative is counted twice within a class.
//!
//! Lists are kept in canonical order, sorted by `(anchor, a, b)`.

use rand::seq::index;
use rayon::prelude::*;

use crate::error::{CalmError, Result};
use crate::rng::{self, tag};
use crate::sphere::{distance_from_cosine, EmbeddingSet};

/// One unordered pair of sample indices, `a < b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Pair {
    pub anchor: u32,
    pub a: usize,
    pub b: usize,
    pub positive: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PairList {
    entries: Vec<Pair>,
}

impl PairList {
    /// Sorts into canonical `(anchor, a, b)` order.
    pub fn from_entries(mut entries: Vec<Pair>) -> Self {
        entries.sort_unstable();
        Self { entries }
    }

    pub fn entries(&self) -> &[Pair] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn positive_count(&self) -> usize {
        self.entries.iter().filter(|p| p.positive).count()
    }

    pub fn negative_count(&self) -> usize {
        self.entries.len() - self.positive_count()
    }

    /// Concatenation of two lists, re-sorted.
    pub fn merge(self, other: PairList) -> PairList {
        let mut entries = self.entries;
        entries.extend(other.entries);
        Self::from_entries(entries)
    }
}

fn ordered(i: usize, j: usize) -> (usize, usize) {
    if i < j {
        (i, j)
    } else {
        (j, i)
    }
}

/// All within-class pairs: `n_j (n_j - 1) / 2` per class.
pub fn enumerate_positive_pairs(set: &EmbeddingSet) -> PairList {
    let mut entries = Vec::new();
    for (class, members) in set.class_members() {
        for (k, &a) in members.iter().enumerate() {
            for &b in &members[k + 1..] {
                entries.push(Pair {
                    anchor: class,
                    a,
                    b,
                    positive: true,
                });
            }
        }
    }
    PairList::from_entries(entries)
}

/// Samples, for every class `j` with `p_j` positive pairs, `min(ratio * p_j, available)`
/// cross-class pairs touching class `j`, uniformly without replacement.
///
/// Each class draws from its own stream derived from `(seed, class)`, so the
/// result does not depend on how many classes exist or in which order they are
/// processed. A cross-class pair may be drawn by both of its endpoint classes;
/// the two draws stay separate entries with different anchors.
pub fn sample_negative_pairs(set: &EmbeddingSet, ratio: usize, seed: u64) -> Result<PairList> {
    if ratio == 0 {
        return Err(CalmError::InvalidConfig("negative ratio must be >= 1".into()));
    }
    let members = set.class_members();
    if members.len() < 2 {
        return Err(CalmError::SingleClass);
    }
    let n = set.len();
    let per_class: Vec<(u32, Vec<usize>)> = members.into_iter().collect();

    let chunks: Vec<Vec<Pair>> = per_class
        .par_iter()
        .map(|(class, inside)| {
            let nj = inside.len();
            let positives = nj * (nj - 1) / 2;
            let outside: Vec<usize> = (0..n).filter(|&i| set.label(i) != *class).collect();
            let available = nj * outside.len();
            let want = ratio.saturating_mul(positives).min(available);
            if want == 0 {
                return Vec::new();
            }
            let mut rng = rng::stream(seed, tag::NEGATIVES, u64::from(*class));
            index::sample(&mut rng, available, want)
                .into_iter()
                .map(|flat| {
                    let (a, b) = ordered(inside[flat / outside.len()], outside[flat % outside.len()]);
                    Pair {
                        anchor: *class,
                        a,
                        b,
                        positive: false,
                    }
                })
                .collect()
        })
        .collect();

    Ok(PairList::from_entries(chunks.into_iter().flatten().collect()))
}

/// Every unordered pair; negatives are attributed to the lower-index sample's class.
pub fn exhaustive_pairs(set: &EmbeddingSet) -> PairList {
    let n = set.len();
    let mut entries = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for a in 0..n {
        for b in a + 1..n {
            entries.push(Pair {
                anchor: set.label(a),
                a,
                b,
                positive: set.label(a) == set.label(b),
            });
        }
    }
    PairList::from_entries(entries)
}

/// Exhaustive pairs over the distinct samples of a mini-batch. Repeated indices
/// (classes batched with replacement) count once.
pub fn batch_pairs(set: &EmbeddingSet, batch: &[usize]) -> Result<PairList> {
    if let Some(&bad) = batch.iter().find(|&&i| i >= set.len()) {
        return Err(CalmError::IndexOutOfRange {
            index: bad,
            len: set.len(),
        });
    }
    let mut idx = batch.to_vec();
    idx.sort_unstable();
    idx.dedup();
    let mut entries = Vec::new();
    for (k, &a) in idx.iter().enumerate() {
        for &b in &idx[k + 1..] {
            entries.push(Pair {
                anchor: set.label(a),
                a,
                b,
                positive: set.label(a) == set.label(b),
            });
        }
    }
    Ok(PairList::from_entries(entries))
}

/// A pair with its cosine similarity and L2 distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredPair {
    pub pair: Pair,
    pub similarity: f64,
    pub distance: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoredPairSet {
    entries: Vec<ScoredPair>,
}

impl ScoredPairSet {
    pub fn entries(&self) -> &[ScoredPair] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn positives(&self) -> impl Iterator<Item = &ScoredPair> {
        self.entries.iter().filter(|p| p.pair.positive)
    }

    pub fn negatives(&self) -> impl Iterator<Item = &ScoredPair> {
        self.entries.iter().filter(|p| !p.pair.positive)
    }

    pub fn anchored_at(&self, class: u32) -> impl Iterator<Item = &ScoredPair> {
        self.entries.iter().filter(move |p| p.pair.anchor == class)
    }

    /// Distinct anchor classes, ascending.
    pub fn anchor_classes(&self) -> Vec<u32> {
        let mut classes: Vec<u32> = self.entries.iter().map(|p| p.pair.anchor).collect();
        classes.sort_unstable();
        classes.dedup();
        classes
    }

    /// Builds a scored set directly from `(anchor, positive, similarity)` triples.
    /// Sample indices are synthetic and only serve to keep entries distinct.
    pub fn from_similarities(items: &[(u32, bool, f64)]) -> Self {
        let entries = items
            .iter()
            .enumerate()
            .map(|(k, &(anchor, positive, s))| ScoredPair {
                pair: Pair {
                    anchor,
                    a: 2 * k,
                    b: 2 * k + 1,
                    positive,
                },
                similarity: s.clamp(-1.0, 1.0),
                distance: distance_from_cosine(s),
            })
            .collect();
        Self { entries }
    }
}

pub fn score_pairs(set: &EmbeddingSet, pairs: &PairList) -> Result<ScoredPairSet> {
    let n = set.len();
    if let Some(bad) = pairs.entries().iter().find(|p| p.a >= n || p.b >= n) {
        return Err(CalmError::IndexOutOfRange {
            index: bad.a.max(bad.b),
            len: n,
        });
    }
    let entries = pairs
        .entries()
        .par_iter()
        .map(|&pair| {
            let s = set.similarity(pair.a, pair.b);
            ScoredPair {
                pair,
                similarity: s,
                distance: distance_from_cosine(s),
            }
        })
        .collect();
    Ok(ScoredPairSet { entries })
}
