//! Full-catalogue ranking evaluation and the precomputed item-vector cache.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Example, Split, SplitDataset};
use crate::error::{Error, Result};
use crate::model::CcfModel;
use crate::scalar::Scalar;
use crate::tensor::{dot, l2_norm, Matrix};

pub const DEFAULT_KS: [usize; 2] = [5, 10];

/// Users scored per block during evaluation.
const SCORE_CHUNK: usize = 1024;

/// 1-based rank of `target` among the non-excluded items. Higher scores rank
/// first and ties go to the lower index. The target itself is never excluded.
pub fn target_rank<T: Scalar>(scores: &[T], target: usize, exclude: &HashSet<usize>) -> usize {
    let st = scores[target];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(v, &s)| v != target && !exclude.contains(&v) && (s > st || (s == st && v < target)))
        .count()
}

/// All non-excluded items ordered by descending score, ties by index.
pub fn rank_full<T: Scalar>(scores: &[T], exclude: &HashSet<usize>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).filter(|v| !exclude.contains(v)).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

fn rank_in_list(list: &[usize], target: usize) -> Option<usize> {
    list.iter().position(|&v| v == target).map(|p| p + 1)
}

/// Fraction of users whose target appears in the first `k` entries.
pub fn recall_at_k(rank_lists: &[Vec<usize>], targets: &[usize], k: usize) -> f64 {
    let ranks: Vec<usize> = rank_lists
        .iter()
        .zip(targets)
        .map(|(l, &t)| rank_in_list(l, t).unwrap_or(usize::MAX))
        .collect();
    recall_from_ranks(&ranks, k)
}

/// Mean of `1/log2(rank+1)` over users whose target is within the first `k`.
pub fn ndcg_at_k(rank_lists: &[Vec<usize>], targets: &[usize], k: usize) -> f64 {
    let ranks: Vec<usize> = rank_lists
        .iter()
        .zip(targets)
        .map(|(l, &t)| rank_in_list(l, t).unwrap_or(usize::MAX))
        .collect();
    ndcg_from_ranks(&ranks, k)
}

pub fn recall_from_ranks(ranks: &[usize], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64
}

pub fn ndcg_from_ranks(ranks: &[usize], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    let gain: f64 = ranks
        .iter()
        .filter(|&&r| r <= k)
        .map(|&r| 1.0 / ((r + 1) as f64).log2())
        .sum();
    gain / ranks.len() as f64
}

/// One evaluation summary line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub split: Split,
    #[serde(rename = "K")]
    pub k: usize,
    pub recall: f64,
    pub ndcg: f64,
    pub users: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ablation: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub split: Split,
    pub users: usize,
    pub ks: Vec<usize>,
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
}

impl MetricReport {
    pub fn from_ranks(split: Split, ranks: &[usize], ks: &[usize]) -> Self {
        Self {
            split,
            users: ranks.len(),
            ks: ks.to_vec(),
            recall: ks.iter().map(|&k| recall_from_ranks(ranks, k)).collect(),
            ndcg: ks.iter().map(|&k| ndcg_from_ranks(ranks, k)).collect(),
        }
    }

    fn slot(&self, k: usize) -> usize {
        self.ks
            .iter()
            .position(|&x| x == k)
            .unwrap_or_else(|| panic!("K={k} was not evaluated"))
    }

    pub fn recall(&self, k: usize) -> f64 {
        self.recall[self.slot(k)]
    }

    pub fn ndcg(&self, k: usize) -> f64 {
        self.ndcg[self.slot(k)]
    }

    pub fn records(&self, ablation: Option<&str>) -> Vec<MetricRecord> {
        self.ks
            .iter()
            .enumerate()
            .map(|(i, &k)| MetricRecord {
                split: self.split,
                k,
                recall: self.recall[i],
                ndcg: self.ndcg[i],
                users: self.users,
                ablation: ablation.map(str::to_string),
            })
            .collect()
    }
}

/// Eval-mode fused vectors of every item, aligned with the item vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct RepCache<T> {
    pub item_ids: Vec<String>,
    pub reps: Matrix<T>,
    unit: Matrix<T>,
}

fn unit_rows<T: Scalar>(m: &Matrix<T>) -> Matrix<T> {
    let mut out = m.clone();
    for r in 0..out.rows() {
        let n = l2_norm(out.row(r));
        if n > T::zero() {
            out.row_mut(r).iter_mut().for_each(|x| *x /= n);
        }
    }
    out
}

impl<T: Scalar> RepCache<T> {
    pub fn new(item_ids: Vec<String>, reps: Matrix<T>) -> Result<Self> {
        if item_ids.len() != reps.rows() {
            return Err(Error::Shape(format!(
                "{} ids for {} representations",
                item_ids.len(),
                reps.rows()
            )));
        }
        let unit = unit_rows(&reps);
        Ok(Self { item_ids, reps, unit })
    }

    pub fn len(&self) -> usize {
        self.reps.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.reps.rows() == 0
    }

    /// Cosine similarity of `r` with every cached item.
    pub fn scores(&self, r: &[T]) -> Vec<T> {
        let n = l2_norm(r);
        let inv = if n > T::zero() { T::one() / n } else { T::zero() };
        (0..self.len()).map(|v| dot(r, self.unit.row(v)) * inv).collect()
    }

    /// Header (magic `CCFR`, version, item count, width as `u32`, config hash
    /// as `u64`), the item-id table, then `f32` rows.
    pub fn write(&self, path: &Path, config_hash: u64) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(REP_MAGIC);
        for v in [REP_VERSION, self.len() as u32, self.reps.cols() as u32] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&config_hash.to_le_bytes());
        for id in &self.item_ids {
            buf.extend_from_slice(&(id.len() as u32).to_le_bytes());
            buf.extend_from_slice(id.as_bytes());
        }
        for &x in self.reps.as_slice() {
            buf.extend_from_slice(&(x.to_f64_lossless() as f32).to_le_bytes());
        }
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }
}

const REP_MAGIC: &[u8; 4] = b"CCFR";
const REP_VERSION: u32 = 1;

/// Reads a cache written by [`RepCache::write`]; returns it with its hash.
pub fn read_rep_cache(path: &Path) -> Result<(u64, RepCache<f32>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |r: &str| Error::bad_artifact(path, r.to_string());
    if bytes.len() < 24 || &bytes[..4] != REP_MAGIC {
        return Err(bad("not a representation cache"));
    }
    let u = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    if u(4) != REP_VERSION as usize {
        return Err(bad("unsupported cache version"));
    }
    let (n, d) = (u(8), u(12));
    let hash = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let mut pos = 24;
    let mut ids = Vec::with_capacity(n);
    for _ in 0..n {
        if pos + 4 > bytes.len() {
            return Err(bad("truncated id table"));
        }
        let len = u(pos);
        pos += 4;
        let s = bytes
            .get(pos..pos + len)
            .ok_or_else(|| bad("truncated id table"))?;
        ids.push(String::from_utf8(s.to_vec()).map_err(|_| bad("item id is not UTF-8"))?);
        pos += len;
    }
    if bytes.len() != pos + 4 * n * d {
        return Err(bad("cache body has the wrong length"));
    }
    let data = bytes[pos..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((hash, RepCache::new(ids, Matrix::from_vec(n, d, data))?))
}

/// One eval-mode fusion pass per item. Fails when an id has no codes in the
/// model.
pub fn build_rep_cache<T: Scalar>(model: &CcfModel<T>, item_ids: &[String]) -> Result<RepCache<T>> {
    if item_ids.len() > model.num_items() {
        return Err(Error::UnknownItem(item_ids[model.num_items()].clone()));
    }
    if item_ids.len() < model.num_items() {
        return Err(Error::Shape(format!(
            "{} ids for a model over {} items",
            item_ids.len(),
            model.num_items()
        )));
    }
    RepCache::new(item_ids.to_vec(), model.item_reps()?)
}

fn exclusions(data: &SplitDataset, example: &Example, split: Split, exclude_seen: bool) -> HashSet<usize> {
    if exclude_seen {
        data.seen_before(example, split)
    } else {
        HashSet::new()
    }
}

/// Target ranks of every example of `split`, scoring with `cache` and the
/// model's backbone.
pub fn ranks_with_cache<T: Scalar>(
    model: &CcfModel<T>,
    cache: &RepCache<T>,
    data: &SplitDataset,
    split: Split,
    exclude_seen: bool,
) -> Result<Vec<usize>> {
    let examples = data.examples(split);
    let mut ranks = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(SCORE_CHUNK) {
        let prefixes: Vec<&[usize]> = chunk.iter().map(|e| e.prefix.as_slice()).collect();
        let users = model.user_vectors(&cache.reps, &prefixes)?;
        for (i, ex) in chunk.iter().enumerate() {
            let scores = cache.scores(users.row(i));
            ranks.push(target_rank(&scores, ex.target, &exclusions(data, ex, split, exclude_seen)));
        }
    }
    Ok(ranks)
}

pub fn evaluate_with_cache<T: Scalar>(
    model: &CcfModel<T>,
    cache: &RepCache<T>,
    data: &SplitDataset,
    split: Split,
    exclude_seen: bool,
    ks: &[usize],
) -> Result<MetricReport> {
    let ranks = ranks_with_cache(model, cache, data, split, exclude_seen)?;
    Ok(MetricReport::from_ranks(split, &ranks, ks))
}

/// Builds a fresh cache and evaluates `split`.
pub fn evaluate<T: Scalar>(
    model: &CcfModel<T>,
    data: &SplitDataset,
    split: Split,
    exclude_seen: bool,
    ks: &[usize],
) -> Result<MetricReport> {
    let cache = build_rep_cache(model, &data.item_vocab)?;
    evaluate_with_cache(model, &cache, data, split, exclude_seen, ks)
}

/// Interaction counts over the training portion of every history (all but
/// the last two items).
pub fn popularity_counts(data: &SplitDataset) -> Vec<f64> {
    let mut counts = vec![0.0; data.num_items()];
    for h in &data.histories {
        for &i in &h[..h.len().saturating_sub(2)] {
            counts[i] += 1.0;
        }
    }
    counts
}

/// Ranks every user's target by training popularity alone.
pub fn evaluate_popularity(data: &SplitDataset, split: Split, exclude_seen: bool, ks: &[usize]) -> MetricReport {
    let counts = popularity_counts(data);
    let ranks: Vec<usize> = data
        .examples(split)
        .iter()
        .map(|ex| target_rank(&counts, ex.target, &exclusions(data, ex, split, exclude_seen)))
        .collect();
    MetricReport::from_ranks(split, &ranks, ks)
}
