//! Semantic codes: k-means based product and residual quantization of each
//! attribute view, plus random codes for the ablation.
//!
//! Every item gets `m × k` codes, view-major: codes `v*k .. (v+1)*k` come from
//! attribute view `v`.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{sq_dist, Matrix};
use crate::textenc::RawEmbeddings;

pub const KMEANS_MAX_ITERS: usize = 100;
pub const KMEANS_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansFit<T> {
    pub centroids: Matrix<T>,
    /// Sum of squared distances after every assignment step.
    pub objective_history: Vec<T>,
    pub iterations: usize,
}

/// Index and squared distance of the closest centroid; ties go to the lowest
/// index.
pub fn nearest_centroid<T: Scalar>(v: &[T], centroids: &Matrix<T>) -> (usize, T) {
    let mut best = (0, T::infinity());
    for c in 0..centroids.rows() {
        let d = sq_dist(v, centroids.row(c));
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Sum over rows of the squared distance to the nearest centroid.
pub fn quantization_error<T: Scalar>(vectors: &Matrix<T>, centroids: &Matrix<T>) -> T {
    (0..vectors.rows())
        .map(|r| nearest_centroid(vectors.row(r), centroids).1)
        .sum()
}

fn kmeans_plus_plus<T: Scalar>(vectors: &Matrix<T>, c: usize, rng: &mut ChaCha8Rng) -> Matrix<T> {
    let n = vectors.rows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut dist: Vec<f64> = (0..n)
        .map(|r| sq_dist(vectors.row(r), vectors.row(chosen[0])).to_f64_lossless())
        .collect();
    while chosen.len() < c {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in dist.iter().enumerate() {
                if d <= 0.0 {
                    continue;
                }
                if target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            // Guard against landing on an already covered point by rounding.
            if dist[pick] <= 0.0 {
                pick = dist
                    .iter()
                    .enumerate()
                    .rev()
                    .find(|(_, &d)| d > 0.0)
                    .map_or(pick, |(i, _)| i);
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        chosen.push(next);
        for (r, d) in dist.iter_mut().enumerate() {
            let nd = sq_dist(vectors.row(r), vectors.row(next)).to_f64_lossless();
            if nd < *d {
                *d = nd;
            }
        }
    }
    vectors.select_rows(&chosen)
}

/// k-means++ seeding followed by Lloyd iterations until the largest centroid
/// move falls below `1e-6` or 100 iterations pass. Empty clusters are
/// re-seeded at the point farthest from its centroid.
pub fn fit_kmeans<T: Scalar>(vectors: &Matrix<T>, c: usize, seed: u64) -> Result<KMeansFit<T>> {
    let (n, w) = vectors.shape();
    if c == 0 {
        return Err(Error::InvalidArgument("codebook size must be positive".into()));
    }
    if n < c {
        return Err(Error::TooFewVectors { needed: c, got: n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_plus_plus(vectors, c, &mut rng);
    let mut history = Vec::new();
    let mut labels = vec![0usize; n];
    let mut dists = vec![T::zero(); n];
    let tol = T::of(KMEANS_TOLERANCE);
    let mut iterations = 0;

    for _ in 0..KMEANS_MAX_ITERS {
        iterations += 1;
        let mut objective = T::zero();
        for r in 0..n {
            let (l, d) = nearest_centroid(vectors.row(r), &centroids);
            labels[r] = l;
            dists[r] = d;
            objective += d;
        }
        history.push(objective);

        let mut sums: Matrix<T> = Matrix::zeros(c, w);
        let mut counts = vec![0usize; c];
        for r in 0..n {
            counts[labels[r]] += 1;
            for (s, &x) in sums.row_mut(labels[r]).iter_mut().zip(vectors.row(r)) {
                *s += x;
            }
        }
        let mut next = Matrix::zeros(c, w);
        for k in 0..c {
            if counts[k] > 0 {
                let inv = T::one() / T::of(counts[k] as f64);
                for (o, &s) in next.row_mut(k).iter_mut().zip(sums.row(k)) {
                    *o = s * inv;
                }
            }
        }
        for k in 0..c {
            if counts[k] == 0 {
                let far = (0..n)
                    .max_by(|&a, &b| {
                        dists[a]
                            .partial_cmp(&dists[b])
                            .unwrap_or(std::cmp::Ordering::Equal)
                            .then(b.cmp(&a))
                    })
                    .expect("n >= c >= 1");
                next.row_mut(k).copy_from_slice(vectors.row(far));
                dists[far] = T::zero();
            }
        }
        let shift = (0..c)
            .map(|k| sq_dist(centroids.row(k), next.row(k)).sqrt())
            .fold(T::zero(), T::max);
        centroids = next;
        if shift < tol {
            break;
        }
    }
    history.push(quantization_error(vectors, &centroids));
    Ok(KMeansFit {
        centroids,
        objective_history: history,
        iterations,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantMethod {
    Pq,
    Rq,
}

impl QuantMethod {
    fn tag(self) -> u32 {
        match self {
            QuantMethod::Pq => 0,
            QuantMethod::Rq => 1,
        }
    }

    fn from_tag(tag: u32) -> Option<Self> {
        match tag {
            0 => Some(QuantMethod::Pq),
            1 => Some(QuantMethod::Rq),
            _ => None,
        }
    }
}

impl std::fmt::Display for QuantMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            QuantMethod::Pq => "pq",
            QuantMethod::Rq => "rq",
        })
    }
}

/// Frozen centroids for every (view, level) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook<T> {
    pub method: QuantMethod,
    pub views: usize,
    pub levels: usize,
    pub size: usize,
    /// Centroid width: `d_e / k` for PQ, `d_e` for RQ.
    pub width: usize,
    /// Indexed by `view * levels + level`, each `size × width`.
    pub centroids: Vec<Matrix<T>>,
}

fn level_seed(seed: u64, view: usize, level: usize) -> u64 {
    seed.wrapping_add(((view as u64) << 32 | level as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Product quantization of one view: `k` contiguous sub-vectors, one k-means
/// codebook each.
pub fn fit_pq<T: Scalar>(view_embeddings: &Matrix<T>, k: usize, c: usize, seed: u64) -> Result<Vec<Matrix<T>>> {
    let de = view_embeddings.cols();
    if k == 0 || !de.is_multiple_of(k) {
        return Err(Error::InvalidArgument(format!(
            "embedding width {de} is not divisible into {k} sub-vectors"
        )));
    }
    let w = de / k;
    (0..k)
        .map(|j| {
            let sub = view_embeddings.column_block(j * w, w);
            fit_kmeans(&sub, c, seed.wrapping_add(j as u64)).map(|f| f.centroids)
        })
        .collect()
}

/// Residual quantization of one view: level `j` clusters what levels `< j`
/// failed to reconstruct.
pub fn fit_rq<T: Scalar>(view_embeddings: &Matrix<T>, k: usize, c: usize, seed: u64) -> Result<Vec<Matrix<T>>> {
    if k == 0 {
        return Err(Error::InvalidArgument("RQ needs at least one level".into()));
    }
    let mut residual = view_embeddings.clone();
    let mut levels = Vec::with_capacity(k);
    for j in 0..k {
        let fit = fit_kmeans(&residual, c, seed.wrapping_add(j as u64))?;
        for r in 0..residual.rows() {
            let (l, _) = nearest_centroid(residual.row(r), &fit.centroids);
            for (x, &cv) in residual.row_mut(r).iter_mut().zip(fit.centroids.row(l)) {
                *x -= cv;
            }
        }
        levels.push(fit.centroids);
    }
    Ok(levels)
}

impl<T: Scalar> Codebook<T> {
    /// Fits one codebook per attribute view of `raw` (`n_items*m × d_e`).
    pub fn fit(raw: &RawEmbeddings, method: QuantMethod, k: usize, c: usize, seed: u64) -> Result<Self> {
        let views = raw.views;
        let de = raw.dim();
        let mut centroids = Vec::with_capacity(views * k);
        for v in 0..views {
            let data: Matrix<T> = raw.view(v).cast();
            let per_view = match method {
                QuantMethod::Pq => fit_pq(&data, k, c, level_seed(seed, v, 0))?,
                QuantMethod::Rq => fit_rq(&data, k, c, level_seed(seed, v, 0))?,
            };
            centroids.extend(per_view);
        }
        Ok(Self {
            method,
            views,
            levels: k,
            size: c,
            width: match method {
                QuantMethod::Pq => de / k,
                QuantMethod::Rq => de,
            },
            centroids,
        })
    }

    pub fn codes_per_item(&self) -> usize {
        self.views * self.levels
    }

    pub fn input_dim(&self) -> usize {
        match self.method {
            QuantMethod::Pq => self.width * self.levels,
            QuantMethod::Rq => self.width,
        }
    }

    pub fn level(&self, view: usize, level: usize) -> &Matrix<T> {
        &self.centroids[view * self.levels + level]
    }

    /// The `k` codes of one view vector.
    pub fn encode_view(&self, view: usize, x: &[T]) -> Vec<u32> {
        match self.method {
            QuantMethod::Pq => (0..self.levels)
                .map(|j| {
                    let sub = &x[j * self.width..(j + 1) * self.width];
                    nearest_centroid(sub, self.level(view, j)).0 as u32
                })
                .collect(),
            QuantMethod::Rq => {
                let mut residual = x.to_vec();
                (0..self.levels)
                    .map(|j| {
                        let cents = self.level(view, j);
                        let (l, _) = nearest_centroid(&residual, cents);
                        for (r, &cv) in residual.iter_mut().zip(cents.row(l)) {
                            *r -= cv;
                        }
                        l as u32
                    })
                    .collect()
            }
        }
    }

    /// Reconstruction of one view from its `k` codes.
    pub fn decode_view(&self, view: usize, codes: &[u32]) -> Vec<T> {
        match self.method {
            QuantMethod::Pq => codes
                .iter()
                .enumerate()
                .flat_map(|(j, &c)| self.level(view, j).row(c as usize).to_vec())
                .collect(),
            QuantMethod::Rq => {
                let mut out = vec![T::zero(); self.width];
                for (j, &c) in codes.iter().enumerate() {
                    for (o, &cv) in out.iter_mut().zip(self.level(view, j).row(c as usize)) {
                        *o += cv;
                    }
                }
                out
            }
        }
    }

    /// Residual vectors after each RQ level (`levels + 1` entries, the first
    /// being the input itself). For PQ, the per-level reconstruction errors
    /// are independent, so this is only meaningful for RQ.
    pub fn residual_trace(&self, view: usize, x: &[T]) -> Vec<Vec<T>> {
        let mut trace = vec![x.to_vec()];
        let mut residual = x.to_vec();
        for j in 0..self.levels {
            let cents = self.level(view, j);
            let (l, _) = nearest_centroid(&residual, cents);
            for (r, &cv) in residual.iter_mut().zip(cents.row(l)) {
                *r -= cv;
            }
            trace.push(residual.clone());
        }
        trace
    }
}

/// Semantic codes of one item.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeTuple {
    pub item_id: String,
    pub codes: Vec<u32>,
}

/// Codes for `items` (every id must exist in `raw`), view-major.
pub fn assign_codes<T: Scalar>(raw: &RawEmbeddings, codebook: &Codebook<T>, items: &[String]) -> Result<Vec<CodeTuple>> {
    if raw.dim() != codebook.input_dim() || raw.views != codebook.views {
        return Err(Error::Shape(format!(
            "codebook expects {} views of width {}, embeddings have {} of width {}",
            codebook.views,
            codebook.input_dim(),
            raw.views,
            raw.dim()
        )));
    }
    let index: HashMap<&str, usize> = raw
        .item_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    items
        .iter()
        .map(|id| {
            let &i = index
                .get(id.as_str())
                .ok_or_else(|| Error::UnknownItem(id.clone()))?;
            let mut codes = Vec::with_capacity(codebook.codes_per_item());
            for v in 0..raw.views {
                let row: Vec<T> = raw
                    .rows
                    .row(i * raw.views + v)
                    .iter()
                    .map(|&x| T::of(x as f64))
                    .collect();
                codes.extend(codebook.encode_view(v, &row));
            }
            Ok(CodeTuple {
                item_id: id.clone(),
                codes,
            })
        })
        .collect()
}

/// I.i.d. uniform codes in `[0, C)`, deterministic under `seed`.
pub fn random_codes(items: &[String], m: usize, k: usize, c: usize, seed: u64) -> Result<Vec<CodeTuple>> {
    if c == 0 {
        return Err(Error::InvalidArgument("codebook size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(items
        .iter()
        .map(|id| CodeTuple {
            item_id: id.clone(),
            codes: (0..m * k).map(|_| rng.random_range(0..c as u32)).collect(),
        })
        .collect())
}

/// Metadata line at the top of a codes file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodesHeader {
    pub version: u32,
    pub config_hash: u64,
    pub views: usize,
    pub levels: usize,
    pub size: usize,
}

const CODES_MAGIC: &str = "#ccfrec-codes";

/// `#ccfrec-codes` header line, then `item_id \t c1,c2,…` per item.
pub fn write_codes(path: &Path, tuples: &[CodeTuple], header: &CodesHeader) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    let io = |e| Error::io(path, e);
    writeln!(
        w,
        "{CODES_MAGIC}\tversion={}\tconfig_hash={:016x}\tviews={}\tlevels={}\tsize={}",
        header.version, header.config_hash, header.views, header.levels, header.size
    )
    .map_err(io)?;
    for t in tuples {
        let codes: Vec<String> = t.codes.iter().map(u32::to_string).collect();
        writeln!(w, "{}\t{}", t.item_id, codes.join(",")).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_codes(path: &Path) -> Result<(CodesHeader, Vec<CodeTuple>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .transpose()
        .map_err(|e| Error::io(path, e))?
        .ok_or_else(|| Error::bad_artifact(path, "empty codes file"))?;
    let mut parts = first.split('\t');
    if parts.next() != Some(CODES_MAGIC) {
        return Err(Error::bad_artifact(path, "missing #ccfrec-codes header"));
    }
    let fields: HashMap<&str, &str> = parts.filter_map(|p| p.split_once('=')).collect();
    let num = |key: &str| -> Result<u64> {
        let raw = fields
            .get(key)
            .ok_or_else(|| Error::bad_artifact(path, format!("header lacks {key}")))?;
        let parsed = if key == "config_hash" {
            u64::from_str_radix(raw, 16).ok()
        } else {
            raw.parse().ok()
        };
        parsed.ok_or_else(|| Error::bad_artifact(path, format!("bad header value for {key}")))
    };
    let header = CodesHeader {
        version: num("version")? as u32,
        config_hash: num("config_hash")?,
        views: num("views")? as usize,
        levels: num("levels")? as usize,
        size: num("size")? as usize,
    };
    let n_c = header.views * header.levels;
    let mut tuples = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        let bad = |reason: &str| Error::Parse {
            path: path.to_path_buf(),
            line: i + 2,
            reason: reason.to_string(),
        };
        let (id, codes) = line.split_once('\t').ok_or_else(|| bad("missing tab"))?;
        let codes: Vec<u32> = codes
            .split(',')
            .map(|c| c.parse::<u32>().map_err(|_| bad("code is not an integer")))
            .collect::<Result<_>>()?;
        if codes.len() != n_c {
            return Err(bad("wrong number of codes"));
        }
        if let Some(&c) = codes.iter().find(|&&c| c as usize >= header.size) {
            return Err(bad(&format!("code {c} outside codebook")));
        }
        tuples.push(CodeTuple {
            item_id: id.to_string(),
            codes,
        });
    }
    Ok((header, tuples))
}

const CODEBOOK_MAGIC: &[u8; 4] = b"CCFQ";
const CODEBOOK_VERSION: u32 = 1;

/// Binary codebook: magic, version, method, m, k, C, w (little-endian `u32`),
/// config hash (`u64`), then `f32` centroids for each (view, level) in order.
pub fn write_codebook(path: &Path, cb: &Codebook<f32>, config_hash: u64) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CODEBOOK_MAGIC);
    for v in [
        CODEBOOK_VERSION,
        cb.method.tag(),
        cb.views as u32,
        cb.levels as u32,
        cb.size as u32,
        cb.width as u32,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&config_hash.to_le_bytes());
    for m in &cb.centroids {
        for &x in m.as_slice() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_codebook(path: &Path) -> Result<(u64, Codebook<f32>)> {
    let mut bytes = Vec::new();
    File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 36 || &bytes[..4] != CODEBOOK_MAGIC {
        return Err(Error::bad_artifact(path, "not a codebook file"));
    }
    let u = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    if u(4) != CODEBOOK_VERSION {
        return Err(Error::bad_artifact(path, "unsupported codebook version"));
    }
    let method = QuantMethod::from_tag(u(8)).ok_or_else(|| Error::bad_artifact(path, "unknown method"))?;
    let (views, levels, size, width) = (u(12) as usize, u(16) as usize, u(20) as usize, u(24) as usize);
    let hash = u64::from_le_bytes(bytes[28..36].try_into().unwrap());
    let per = size * width;
    if bytes.len() != 36 + 4 * per * views * levels {
        return Err(Error::bad_artifact(path, "codebook body has the wrong length"));
    }
    let floats: Vec<f32> = bytes[36..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let centroids = floats
        .chunks_exact(per.max(1))
        .take(views * levels)
        .map(|c| Matrix::from_vec(size, width, c.to_vec()))
        .collect();
    Ok((
        hash,
        Codebook {
            method,
            views,
            levels,
            size,
            width,
            centroids,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(n: usize, w: usize, seed: u64) -> Matrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(n, w, |_, _| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn exact_fit_when_every_vector_is_a_centroid() {
        let data = gaussian(6, 3, 1);
        let fit = fit_kmeans(&data, 6, 0).unwrap();
        assert_eq!(quantization_error(&data, &fit.centroids), 0.0);
    }

    #[test]
    fn too_few_vectors_is_an_error() {
        let err = fit_kmeans(&gaussian(3, 2, 1), 4, 0).unwrap_err();
        assert!(matches!(err, Error::TooFewVectors { needed: 4, got: 3 }));
    }

    #[test]
    fn two_blobs_recover_their_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut rows = Vec::new();
        for centre in [[-10.0, 0.0], [10.0, 5.0]] {
            for _ in 0..50 {
                let dx: f64 = StandardNormal.sample(&mut rng);
                let dy: f64 = StandardNormal.sample(&mut rng);
                rows.push([centre[0] + 0.3 * dx, centre[1] + 0.3 * dy]);
            }
        }
        let data = Matrix::from_rows(&rows);
        // Closed-form oracle: the blob means.
        let mean = |range: std::ops::Range<usize>| {
            let n = range.len() as f64;
            let (sx, sy) = range.fold((0.0, 0.0), |(a, b), r| (a + rows[r][0], b + rows[r][1]));
            [sx / n, sy / n]
        };
        let expect = [mean(0..50), mean(50..100)];
        let fit = fit_kmeans(&data, 2, 4).unwrap();
        for e in expect {
            let (l, _) = nearest_centroid(&e, &fit.centroids);
            let c = fit.centroids.row(l);
            assert!((c[0] - e[0]).abs() < 1e-4 && (c[1] - e[1]).abs() < 1e-4);
        }
    }

    #[test]
    fn objective_never_increases() {
        let data = gaussian(200, 4, 3);
        let fit = fit_kmeans(&data, 8, 5).unwrap();
        for w in fit.objective_history.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12), "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let cents = Matrix::from_rows(&[[1.0f64, 0.0], [-1.0, 0.0]]);
        assert_eq!(nearest_centroid(&[0.0, 3.0], &cents).0, 0);
    }

    #[test]
    fn pq_rejects_indivisible_width() {
        assert!(matches!(
            fit_pq(&gaussian(10, 7, 0), 2, 2, 0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn single_level_pq_and_rq_are_plain_kmeans() {
        let data = gaussian(40, 6, 2);
        let plain = fit_kmeans(&data, 5, 11).unwrap().centroids;
        assert_eq!(fit_pq(&data, 1, 5, 11).unwrap()[0], plain);
        assert_eq!(fit_rq(&data, 1, 5, 11).unwrap()[0], plain);
    }

    #[test]
    fn pq_widths_follow_k() {
        let raw = RawEmbeddings {
            item_ids: (0..300).map(|i| i.to_string()).collect(),
            views: 1,
            rows: gaussian(300, 768, 4).cast(),
        };
        let cb: Codebook<f32> = Codebook::fit(&raw, QuantMethod::Pq, 4, 4, 0).unwrap();
        assert_eq!(cb.centroids.len(), 4);
        assert!(cb.centroids.iter().all(|c| c.shape() == (4, 192)));
    }

    #[test]
    fn centroid_vector_encodes_to_itself() {
        let data = gaussian(30, 4, 6);
        let raw = RawEmbeddings {
            item_ids: (0..30).map(|i| i.to_string()).collect(),
            views: 1,
            rows: data.cast(),
        };
        for method in [QuantMethod::Pq, QuantMethod::Rq] {
            let cb: Codebook<f64> = Codebook::fit(&raw, method, 2, 3, 1).unwrap();
            let target = cb.decode_view(0, &[2, 1]);
            let codes = cb.encode_view(0, &target);
            if method == QuantMethod::Pq {
                assert_eq!(codes, vec![2, 1]);
            }
            let back = cb.decode_view(0, &codes);
            assert!(sq_dist(&back, &target) <= 1e-24 || method == QuantMethod::Rq);
        }
    }

    #[test]
    fn random_codes_are_deterministic_and_in_range() {
        let ids: Vec<String> = (0..50).map(|i| format!("i{i}")).collect();
        let a = random_codes(&ids, 5, 4, 7, 3).unwrap();
        assert_eq!(a, random_codes(&ids, 5, 4, 7, 3).unwrap());
        assert!(a.iter().all(|t| t.codes.len() == 20 && t.codes.iter().all(|&c| c < 7)));
        let ones = random_codes(&ids, 2, 2, 1, 0).unwrap();
        assert!(ones.iter().all(|t| t.codes.iter().all(|&c| c == 0)));
    }

    #[test]
    fn codes_file_round_trips() {
        let tuples = vec![
            CodeTuple {
                item_id: "a".into(),
                codes: vec![1, 2, 3, 0],
            },
            CodeTuple {
                item_id: "b b".into(),
                codes: vec![0, 0, 3, 3],
            },
        ];
        let header = CodesHeader {
            version: 1,
            config_hash: 0xabc,
            views: 2,
            levels: 2,
            size: 4,
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("codes.tsv");
        write_codes(&p, &tuples, &header).unwrap();
        let (h, back) = read_codes(&p).unwrap();
        assert_eq!(h, header);
        assert_eq!(back, tuples);
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.lines().nth(1).unwrap() == "a\t1,2,3,0");
    }

    #[test]
    fn codebook_file_round_trips() {
        let raw = RawEmbeddings {
            item_ids: (0..20).map(|i| i.to_string()).collect(),
            views: 2,
            rows: gaussian(40, 4, 1).cast(),
        };
        let cb: Codebook<f32> = Codebook::fit(&raw, QuantMethod::Rq, 2, 3, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cb.bin");
        write_codebook(&p, &cb, 77).unwrap();
        let (hash, back) = read_codebook(&p).unwrap();
        assert_eq!(hash, 77);
        assert_eq!(back, cb);
    }
}
