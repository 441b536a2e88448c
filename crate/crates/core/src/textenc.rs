//! Multi-view text embeddings: one vector per item attribute, a binary cache
//! for them, and the corpus-wide PCA that maps them to the model width.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::corpus::Item;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Maps one text to one fixed-width vector.
pub trait TextEncoder {
    fn dim(&self) -> usize;

    fn encode(&self, text: &str) -> std::result::Result<Vec<f32>, String>;

    /// Stable description used when hashing pipeline configurations.
    fn fingerprint(&self) -> String;
}

/// Deterministic stand-in for a pretrained sentence encoder.
///
/// Every lower-cased whitespace token is hashed with the seed into a
/// Gaussian vector; a text embeds as the mean of its token vectors, so texts
/// that share vocabulary land close together. The empty text embeds as the
/// vector of the empty token.
#[derive(Clone, Debug)]
pub struct HashEncoder {
    dim: usize,
    seed: u64,
}

impl HashEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "encoder width must be positive");
        Self { dim, seed }
    }

    fn token_vector(&self, token: &str, acc: &mut [f64]) {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(token.as_bytes());
        let digest = h.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(key);
        for a in acc.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *a += z;
        }
    }
}

impl TextEncoder for HashEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> std::result::Result<Vec<f32>, String> {
        let mut acc = vec![0.0f64; self.dim];
        let mut count = 0usize;
        for token in text.split_whitespace() {
            self.token_vector(&token.to_lowercase(), &mut acc);
            count += 1;
        }
        if count == 0 {
            self.token_vector("", &mut acc);
            count = 1;
        }
        let inv = 1.0 / count as f64;
        Ok(acc.into_iter().map(|a| (a * inv) as f32).collect())
    }

    fn fingerprint(&self) -> String {
        format!("hash-encoder(dim={},seed={})", self.dim, self.seed)
    }
}

/// Raw attribute embeddings for a whole corpus.
///
/// Item `i` owns rows `i*m .. (i+1)*m` of `rows`, one row per attribute view
/// in the corpus field order.
#[derive(Clone, Debug, PartialEq)]
pub struct RawEmbeddings {
    pub item_ids: Vec<String>,
    pub views: usize,
    pub rows: Matrix<f32>,
}

impl RawEmbeddings {
    pub fn dim(&self) -> usize {
        self.rows.cols()
    }

    pub fn len(&self) -> usize {
        self.item_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.item_ids.is_empty()
    }

    /// The `m × d_e` matrix of one item.
    pub fn item(&self, index: usize) -> Matrix<f32> {
        let idx: Vec<usize> = (index * self.views..(index + 1) * self.views).collect();
        self.rows.select_rows(&idx)
    }

    /// All items' rows of one attribute view, `n_items × d_e`.
    pub fn view(&self, view: usize) -> Matrix<f32> {
        let idx: Vec<usize> = (0..self.len()).map(|i| i * self.views + view).collect();
        self.rows.select_rows(&idx)
    }

    pub fn position(&self, item_id: &str) -> Option<usize> {
        self.item_ids.iter().position(|i| i == item_id)
    }
}

fn encode_all<E: TextEncoder + ?Sized>(
    items: &[Item],
    encoder: &E,
    texts: impl Fn(&Item) -> Vec<(String, String)>,
) -> Result<RawEmbeddings> {
    let dim = encoder.dim();
    let mut data = Vec::new();
    let mut views = None;
    for item in items {
        let fields = texts(item);
        match views {
            None => views = Some(fields.len()),
            Some(m) if m != fields.len() => {
                return Err(Error::Shape(format!(
                    "item {} has {} attributes, expected {m}",
                    item.item_id,
                    fields.len()
                )))
            }
            _ => {}
        }
        for (field, text) in fields {
            let v = encoder.encode(&text).map_err(|reason| Error::Encoder {
                item_id: item.item_id.clone(),
                field: field.clone(),
                reason,
            })?;
            if v.len() != dim || v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Encoder {
                    item_id: item.item_id.clone(),
                    field,
                    reason: format!("expected {dim} finite values, got {}", v.len()),
                });
            }
            data.extend(v);
        }
    }
    let views = views.unwrap_or(0);
    Ok(RawEmbeddings {
        item_ids: items.iter().map(|i| i.item_id.clone()).collect(),
        views,
        rows: Matrix::from_vec(items.len() * views, dim, data),
    })
}

/// Encodes every attribute of every item separately.
pub fn encode_corpus<E: TextEncoder + ?Sized>(items: &[Item], encoder: &E) -> Result<RawEmbeddings> {
    encode_all(items, encoder, |item| item.attributes.clone())
}

/// One embedding per item of all attributes concatenated.
pub fn encode_global<E: TextEncoder + ?Sized>(items: &[Item], encoder: &E) -> Result<RawEmbeddings> {
    encode_all(items, encoder, |item| vec![("global".to_string(), item.concatenated_text())])
}

const CACHE_MAGIC: &[u8; 4] = b"CCFE";
const CACHE_VERSION: u32 = 1;

/// Header fields of an embedding cache.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CacheHeader {
    pub version: u32,
    pub item_count: u32,
    pub views: u32,
    pub dim: u32,
    pub config_hash: u64,
}

/// Writes `magic, version, item_count, m, d_e` (little-endian `u32`), the
/// config hash (`u64`), the length-prefixed item-id table and the `f32`
/// rows.
pub fn write_cache(path: &Path, emb: &RawEmbeddings, config_hash: u64) -> Result<()> {
    let mut buf = Vec::with_capacity(32 + emb.rows.len() * 4);
    buf.extend_from_slice(CACHE_MAGIC);
    for v in [
        CACHE_VERSION,
        emb.len() as u32,
        emb.views as u32,
        emb.dim() as u32,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&config_hash.to_le_bytes());
    for id in &emb.item_ids {
        buf.extend_from_slice(&(id.len() as u32).to_le_bytes());
        buf.extend_from_slice(id.as_bytes());
    }
    for &x in emb.rows.as_slice() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    w.write_all(&buf).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_cache_header(path: &Path) -> Result<CacheHeader> {
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut head = [0u8; 28];
    f.read_exact(&mut head)
        .map_err(|_| Error::bad_artifact(path, "truncated embedding cache header"))?;
    parse_header(path, &head)
}

fn parse_header(path: &Path, head: &[u8]) -> Result<CacheHeader> {
    if &head[..4] != CACHE_MAGIC {
        return Err(Error::bad_artifact(path, "not an embedding cache (bad magic)"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(head[o..o + 4].try_into().unwrap());
    let header = CacheHeader {
        version: u32_at(4),
        item_count: u32_at(8),
        views: u32_at(12),
        dim: u32_at(16),
        config_hash: u64::from_le_bytes(head[20..28].try_into().unwrap()),
    };
    if header.version != CACHE_VERSION {
        return Err(Error::bad_artifact(
            path,
            format!("unsupported cache version {}", header.version),
        ));
    }
    Ok(header)
}

pub fn read_cache(path: &Path) -> Result<(CacheHeader, RawEmbeddings)> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 28 {
        return Err(Error::bad_artifact(path, "truncated embedding cache header"));
    }
    let header = parse_header(path, &bytes[..28])?;
    let mut pos = 28;
    let truncated = || Error::bad_artifact(path, "truncated embedding cache body");
    let mut item_ids = Vec::with_capacity(header.item_count as usize);
    for _ in 0..header.item_count {
        let len_bytes = bytes.get(pos..pos + 4).ok_or_else(truncated)?;
        let len = u32::from_le_bytes(len_bytes.try_into().unwrap()) as usize;
        pos += 4;
        let id = bytes.get(pos..pos + len).ok_or_else(truncated)?;
        item_ids.push(
            String::from_utf8(id.to_vec())
                .map_err(|_| Error::bad_artifact(path, "item id is not UTF-8"))?,
        );
        pos += len;
    }
    let n_rows = header.item_count as usize * header.views as usize;
    let n = n_rows * header.dim as usize;
    let body = bytes.get(pos..pos + 4 * n).ok_or_else(truncated)?;
    if bytes.len() != pos + 4 * n {
        return Err(Error::bad_artifact(path, "trailing bytes after embedding rows"));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((
        header,
        RawEmbeddings {
            item_ids,
            views: header.views as usize,
            rows: Matrix::from_vec(n_rows, header.dim as usize, data),
        },
    ))
}

/// A fitted linear projection `z = (x − mean) · components`.
#[derive(Clone, Debug, PartialEq)]
pub struct PcaTransform<T> {
    pub mean: Vec<T>,
    /// `d_e × d`, orthonormal columns ordered by decreasing variance.
    pub components: Matrix<T>,
    pub explained_variance: Vec<T>,
    pub explained_variance_ratio: Vec<T>,
}

/// Fits PCA on the pooled rows via an eigendecomposition of the sample
/// covariance. Directions beyond the data rank are an arbitrary orthonormal
/// completion (with a warning).
pub fn fit_pca<T: Scalar>(rows: &Matrix<T>, d: usize) -> Result<PcaTransform<T>> {
    let (n, de) = rows.shape();
    if d == 0 || d > de {
        return Err(Error::InvalidArgument(format!(
            "PCA width {d} must be in 1..={de}"
        )));
    }
    if n < d {
        return Err(Error::InvalidArgument(format!(
            "PCA needs at least {d} rows, got {n}"
        )));
    }
    let mut mean = vec![0.0f64; de];
    for r in 0..n {
        for (m, &x) in mean.iter_mut().zip(rows.row(r)) {
            *m += x.to_f64_lossless();
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
    let mut cov = DMatrix::<f64>::zeros(de, de);
    let mut centered = vec![0.0f64; de];
    for r in 0..n {
        for (c, (&x, &m)) in centered.iter_mut().zip(rows.row(r).iter().zip(&mean)) {
            *c = x.to_f64_lossless() - m;
        }
        for i in 0..de {
            let ci = centered[i];
            if ci == 0.0 {
                continue;
            }
            for j in i..de {
                cov[(i, j)] += ci * centered[j];
            }
        }
    }
    for i in 0..de {
        for j in i..de {
            let v = cov[(i, j)] / denom;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..de).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let total: f64 = eig.eigenvalues.iter().map(|&l| l.max(0.0)).sum();
    let top = eig.eigenvalues[order[0]].max(0.0);
    let tol = top * 1e-10;
    let rank = eig.eigenvalues.iter().filter(|&&l| l > tol && l > 0.0).count();
    if rank < d {
        warn!("PCA: data rank {rank} is below the requested width {d}; padding with an orthonormal completion");
    }

    let mut components = Matrix::zeros(de, d);
    let mut variance = Vec::with_capacity(d);
    let mut ratio = Vec::with_capacity(d);
    for (c, &src) in order.iter().take(d).enumerate() {
        let col = eig.eigenvectors.column(src);
        // Sign convention: the largest-magnitude loading is positive.
        let pivot = (0..de)
            .max_by(|&a, &b| {
                col[a]
                    .abs()
                    .partial_cmp(&col[b].abs())
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(b.cmp(&a))
            })
            .unwrap_or(0);
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        for r in 0..de {
            components.set(r, c, T::of(sign * col[r]));
        }
        let lambda = eig.eigenvalues[src].max(0.0);
        variance.push(T::of(lambda));
        ratio.push(T::of(if total > 0.0 { lambda / total } else { 0.0 }));
    }
    Ok(PcaTransform {
        mean: mean.into_iter().map(T::of).collect(),
        components,
        explained_variance: variance,
        explained_variance_ratio: ratio,
    })
}

impl<T: Scalar> PcaTransform<T> {
    pub fn input_dim(&self) -> usize {
        self.components.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.components.cols()
    }

    /// Projects each row of `raw` (`n × d_e`) to `n × d`.
    pub fn project(&self, raw: &Matrix<T>) -> Result<Matrix<T>> {
        if raw.cols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "PCA expects width {}, got {}",
                self.input_dim(),
                raw.cols()
            )));
        }
        let mut centered = raw.clone();
        for r in 0..centered.rows() {
            for (x, &m) in centered.row_mut(r).iter_mut().zip(&self.mean) {
                *x -= m;
            }
        }
        Ok(centered.matmul(&self.components))
    }

    /// Maps projected rows back to the input space.
    pub fn reconstruct(&self, projected: &Matrix<T>) -> Matrix<T> {
        let mut out = projected.matmul_t(&self.components);
        for r in 0..out.rows() {
            for (x, &m) in out.row_mut(r).iter_mut().zip(&self.mean) {
                *x += m;
            }
        }
        out
    }
}
