//! Bidirectional retrieval ranking and the reciprocal-rank "MAP" score.
//!
//! The score is called MAP for continuity with the literature this model
//! comes from, but what it measures is mean reciprocal rank: each true pair
//! contributes `1/rank` in both directions.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datapipe::{Category, Dataset, FoldSplit};
use crate::error::{Error, Result};
use crate::model::Model;

/// Ground-truth (typeA, typeB) pairs plus the embedding of every item in them.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalPairSet {
    pub pairs: Vec<(String, String)>,
    pub embeddings: BTreeMap<String, Vec<f32>>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRank {
    pub item_a: String,
    pub item_b: String,
    /// Rank of `item_a` among all typeA candidates, by distance to `item_b`.
    pub rank_a: usize,
    /// Rank of `item_b` among all typeB candidates, by distance to `item_a`.
    pub rank_b: usize,
}

/// Per-pair ranks, ordered by `item_a`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RankResult {
    pub per_pair: Vec<PairRank>,
}

pub fn euclidean(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

impl EvalPairSet {
    pub fn validate(&self) -> Result<()> {
        if self.pairs.is_empty() {
            return Err(Error::Validation("pair set is empty".into()));
        }
        let mut seen = std::collections::HashSet::new();
        let mut dim = None;
        for id in self.pairs.iter().flat_map(|(a, b)| [a, b]) {
            if !seen.insert(id) {
                return Err(Error::Validation(format!("item {id:?} appears in more than one pair")));
            }
            let v = self
                .embeddings
                .get(id)
                .ok_or_else(|| Error::Lookup(id.clone()))?;
            if *dim.get_or_insert(v.len()) != v.len() {
                return Err(Error::Validation(format!(
                    "embedding of {id:?} has dimension {}, expected {}",
                    v.len(),
                    dim.unwrap()
                )));
            }
        }
        Ok(())
    }
}

/// 1 + number of candidates that sort strictly before `truth`, ordering by
/// distance and then by id.
fn rank_of(truth: usize, dists: &[f64], ids: &[&String]) -> usize {
    let (dt, it) = (dists[truth], ids[truth]);
    1 + dists
        .iter()
        .zip(ids)
        .filter(|(d, id)| **d < dt || (**d == dt && **id < it))
        .count()
}

pub fn rank_pairs(set: &EvalPairSet) -> Result<RankResult> {
    set.validate()?;
    let mut pairs: Vec<&(String, String)> = set.pairs.iter().collect();
    pairs.sort();
    let a_ids: Vec<&String> = pairs.iter().map(|p| &p.0).collect();
    let b_ids: Vec<&String> = pairs.iter().map(|p| &p.1).collect();
    let n = pairs.len();
    // dist[i * n + j] = d(A_i, B_j)
    let mut dist = vec![0.0; n * n];
    for (i, a) in a_ids.iter().enumerate() {
        let ea = &set.embeddings[*a];
        for (j, b) in b_ids.iter().enumerate() {
            dist[i * n + j] = euclidean(ea, &set.embeddings[*b]);
        }
    }
    let per_pair = (0..n)
        .map(|i| {
            let row = &dist[i * n..(i + 1) * n];
            let col: Vec<f64> = (0..n).map(|r| dist[r * n + i]).collect();
            PairRank {
                item_a: a_ids[i].clone(),
                item_b: b_ids[i].clone(),
                rank_a: rank_of(i, &col, &a_ids),
                rank_b: rank_of(i, row, &b_ids),
            }
        })
        .collect();
    Ok(RankResult { per_pair })
}

/// `normalize = true` gives `(1/2N) * sum(1/R_a + 1/R_b)`; `false` drops the
/// `1/N`, matching the formula as usually printed.
pub fn compute_map(ranks: &RankResult, normalize: bool) -> f64 {
    let s: f64 = ranks
        .per_pair
        .iter()
        .map(|p| 1.0 / p.rank_a as f64 + 1.0 / p.rank_b as f64)
        .sum();
    let n = if normalize { ranks.per_pair.len().max(1) as f64 } else { 1.0 };
    s / (2.0 * n)
}

/// Top-`k` candidates by ascending distance to `query`, ties by id.
pub fn retrieve(
    query: &str,
    candidates: &[String],
    embeddings: &BTreeMap<String, Vec<f32>>,
    k: usize,
) -> Result<Vec<(String, f64)>> {
    let q = embeddings
        .get(query)
        .ok_or_else(|| Error::Lookup(query.to_string()))?;
    if k == 0 || k > candidates.len() {
        return Err(Error::Validation(format!(
            "k must be between 1 and the {} candidates, got {k}",
            candidates.len()
        )));
    }
    let mut scored = candidates
        .iter()
        .map(|c| {
            let e = embeddings.get(c).ok_or_else(|| Error::Lookup(c.clone()))?;
            Ok((c.clone(), euclidean(q, e)))
        })
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|x, y| x.1.total_cmp(&y.1).then_with(|| x.0.cmp(&y.0)));
    scored.truncate(k);
    Ok(scored)
}

/// One line of an embeddings file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingRecord {
    pub item_id: String,
    pub category: Category,
    pub vector: Vec<f32>,
}

pub fn write_embeddings(path: impl AsRef<Path>, records: &[EmbeddingRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    std::fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<Vec<EmbeddingRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| Error::DataIo {
        path: path.to_path_buf(),
        source,
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResults {
    pub map_normalized: f64,
    pub map_paper_formula: f64,
    pub n_pairs: usize,
    pub per_pair: Vec<PairRank>,
}

impl EvalResults {
    pub fn from_ranks(ranks: RankResult) -> Self {
        Self {
            map_normalized: compute_map(&ranks, true),
            map_paper_formula: compute_map(&ranks, false),
            n_pairs: ranks.per_pair.len(),
            per_pair: ranks.per_pair,
        }
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut s = serde_json::to_string(self)?;
        s.push('\n');
        std::fs::write(path, s)?;
        Ok(())
    }
}

const EMBED_CHUNK: usize = 32;

/// Eval-mode embeddings for the given items, in order.
pub fn embed_items<S: AsRef<str>>(model: &Model, data: &Dataset, ids: &[S]) -> Result<Vec<Vec<f32>>> {
    let dim = model.config().embedding_dim;
    let mut out = Vec::with_capacity(ids.len());
    for chunk in ids.chunks(EMBED_CHUNK) {
        let e = model.embed(&data.batch(chunk)?)?;
        out.extend(e.data().chunks(dim).map(<[f32]>::to_vec));
    }
    Ok(out)
}

/// Embedding records for every item of the dataset, in manifest order.
pub fn embed_dataset(model: &Model, data: &Dataset) -> Result<Vec<EmbeddingRecord>> {
    let ids: Vec<&str> = data.records().iter().map(|r| r.item_id.as_str()).collect();
    let vecs = embed_items(model, data, &ids)?;
    Ok(data
        .records()
        .iter()
        .zip(vecs)
        .map(|(r, vector)| EmbeddingRecord {
            item_id: r.item_id.clone(),
            category: r.category,
            vector,
        })
        .collect())
}

/// Pairs for the fold's complete test outfits, embedded with `model`.
pub fn fold_pairset(model: &Model, data: &Dataset, fold: &FoldSplit) -> Result<EvalPairSet> {
    let pairs: Vec<(String, String)> = data
        .outfits()
        .into_iter()
        .filter(|(id, _)| fold.test_outfits.contains(id))
        .filter_map(|(_, o)| Some((o.type_a?, o.type_b?)))
        .collect();
    let ids: Vec<&str> = pairs.iter().flat_map(|(a, b)| [a.as_str(), b.as_str()]).collect();
    let vecs = embed_items(model, data, &ids)?;
    let embeddings = ids.iter().map(|s| s.to_string()).zip(vecs).collect();
    Ok(EvalPairSet { pairs, embeddings })
}

pub fn evaluate_fold(model: &Model, data: &Dataset, fold: &FoldSplit) -> Result<EvalResults> {
    let set = fold_pairset(model, data, fold)?;
    Ok(EvalResults::from_ranks(rank_pairs(&set)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(vecs: &[(&str, &str, Vec<f32>, Vec<f32>)]) -> EvalPairSet {
        let mut s = EvalPairSet::default();
        for (a, b, ea, eb) in vecs {
            s.pairs.push((a.to_string(), b.to_string()));
            s.embeddings.insert(a.to_string(), ea.clone());
            s.embeddings.insert(b.to_string(), eb.clone());
        }
        s
    }

    #[test]
    fn single_pair_ranks_first() {
        let r = rank_pairs(&set(&[("a", "b", vec![0.0], vec![5.0])])).unwrap();
        assert_eq!((r.per_pair[0].rank_a, r.per_pair[0].rank_b), (1, 1));
        assert_eq!(compute_map(&r, true), 1.0);
    }

    #[test]
    fn coincident_pair_beats_outliers() {
        let s = set(&[
            ("a0", "b0", vec![1.0, 1.0], vec![1.0, 1.0]),
            ("a1", "b1", vec![50.0, 0.0], vec![0.0, -50.0]),
        ]);
        let r = rank_pairs(&s).unwrap();
        assert_eq!((r.per_pair[0].rank_a, r.per_pair[0].rank_b), (1, 1));
    }

    #[test]
    fn ties_break_by_id() {
        let s = set(&[
            ("a0", "b0", vec![0.0], vec![1.0]),
            ("a1", "b1", vec![0.0], vec![1.0]),
        ]);
        let r = rank_pairs(&s).unwrap();
        assert_eq!((r.per_pair[0].rank_a, r.per_pair[0].rank_b), (1, 1));
        assert_eq!((r.per_pair[1].rank_a, r.per_pair[1].rank_b), (2, 2));
    }

    #[test]
    fn map_arithmetic() {
        let pr = |ra, rb| PairRank {
            item_a: String::new(),
            item_b: String::new(),
            rank_a: ra,
            rank_b: rb,
        };
        let r = RankResult {
            per_pair: vec![pr(1, 2), pr(2, 1)],
        };
        assert_eq!(compute_map(&r, true), 0.75);
        assert_eq!(compute_map(&r, false), 1.5);
    }

    #[test]
    fn empty_and_inconsistent_sets_are_rejected() {
        assert!(matches!(rank_pairs(&EvalPairSet::default()), Err(Error::Validation(_))));
        let mut s = set(&[("a", "b", vec![0.0], vec![0.0, 1.0])]);
        assert!(rank_pairs(&s).is_err());
        s.embeddings.remove("b");
        assert!(matches!(rank_pairs(&s), Err(Error::Lookup(_))));
    }

    #[test]
    fn retrieve_orders_and_checks() {
        let mut e = BTreeMap::new();
        e.insert("q".to_string(), vec![0.0, 0.0]);
        e.insert("x".to_string(), vec![3.0, 4.0]);
        e.insert("y".to_string(), vec![0.0, 0.0]);
        e.insert("z".to_string(), vec![0.0, 1.0]);
        let c: Vec<String> = ["x", "y", "z"].iter().map(|s| s.to_string()).collect();
        let r = retrieve("q", &c, &e, 3).unwrap();
        assert_eq!(r, vec![("y".into(), 0.0), ("z".into(), 1.0), ("x".into(), 5.0)]);
        assert!(matches!(retrieve("nope", &c, &e, 1), Err(Error::Lookup(_))));
        assert!(retrieve("q", &c, &e, 4).is_err());
    }
}
