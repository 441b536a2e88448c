//! The semantic fusion module: per-item code embeddings attend to each other,
//! then into the item's projected text rows, and are pooled into one item
//! vector.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Groups, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::layers::{add_and_norm, normal_init, Dropout, FeedForward, LayerNorm, MultiHeadAttention, INIT_STD};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// How text enters the module.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Cross-attention keys and values are the projected text rows.
    #[default]
    CrossText,
    /// Cross-attention keys and values are the code embeddings themselves.
    CodesOnly,
    /// No attention at all: the item vector is the mean of every text row and
    /// every code embedding.
    MeanPool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FusionBlock {
    pub self_attn: MultiHeadAttention,
    pub norm_self: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm_cross: LayerNorm,
    pub ffn: FeedForward,
    pub norm_ffn: LayerNorm,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fusion {
    /// All code tables stacked: table `l` owns rows `l*(C+1) ..= l*(C+1)+C`,
    /// the last of which is its mask embedding.
    pub tables: ParamId,
    pub blocks: Vec<FusionBlock>,
    pub positions: usize,
    pub codebook_size: usize,
    pub mode: FusionMode,
}

/// Graph handles produced by one batched fusion pass over `U` items.
#[derive(Clone, Debug)]
pub struct FusionOutput {
    /// Final code states `H`, `U*n_c × d`; absent in mean-pool mode.
    pub states: Option<Var>,
    /// Looked-up code embeddings `Z^c`, `U*n_c × d`.
    pub code_rows: Var,
    /// Fused item vectors, `U × d`.
    pub reps: Var,
}

impl Fusion {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        d: usize,
        heads: usize,
        ffn_hidden: usize,
        layers: usize,
        positions: usize,
        codebook_size: usize,
        mode: FusionMode,
        rng: &mut R,
    ) -> Self {
        let tables = store.add(
            "code_tables",
            normal_init(positions * (codebook_size + 1), d, INIT_STD, rng),
        );
        let blocks = if mode == FusionMode::MeanPool {
            Vec::new()
        } else {
            (0..layers)
                .map(|i| {
                    let p = format!("sfm.{i}");
                    FusionBlock {
                        self_attn: MultiHeadAttention::new(store, &format!("{p}.self_attn"), d, heads, rng),
                        norm_self: LayerNorm::new(store, &format!("{p}.norm_self"), d),
                        cross_attn: MultiHeadAttention::new(store, &format!("{p}.cross_attn"), d, heads, rng),
                        norm_cross: LayerNorm::new(store, &format!("{p}.norm_cross"), d),
                        ffn: FeedForward::new(store, &format!("{p}.ffn"), d, ffn_hidden, rng),
                        norm_ffn: LayerNorm::new(store, &format!("{p}.norm_ffn"), d),
                    }
                })
                .collect()
        };
        Self {
            tables,
            blocks,
            positions,
            codebook_size,
            mode,
        }
    }

    /// Index of the mask row within each table.
    pub fn mask_code(&self) -> u32 {
        self.codebook_size as u32
    }

    /// Row of the stacked table for `code` at `position`.
    pub fn table_row(&self, position: usize, code: u32) -> usize {
        position * (self.codebook_size + 1) + code as usize
    }

    /// Table rows for one item's codes; the mask index `C` is allowed.
    pub fn lookup_indices(&self, codes: &[u32]) -> Result<Vec<usize>> {
        if codes.len() != self.positions {
            return Err(Error::Shape(format!(
                "expected {} codes per item, got {}",
                self.positions,
                codes.len()
            )));
        }
        codes
            .iter()
            .enumerate()
            .map(|(l, &c)| {
                if c as usize > self.codebook_size {
                    Err(Error::CodeOutOfRange {
                        position: l,
                        code: c,
                        limit: self.codebook_size as u32 + 1,
                    })
                } else {
                    Ok(self.table_row(l, c))
                }
            })
            .collect()
    }

    /// Fuses a batch of items. `text` is the constant `U*m × d` matrix of
    /// projected text rows, `views` rows per item.
    pub fn forward<T: Scalar, C: AsRef<[u32]>>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        codes: &[C],
        text: Var,
        views: usize,
        dropout: &mut Dropout<'_>,
    ) -> Result<FusionOutput> {
        let items = codes.len();
        let mut idx = Vec::with_capacity(items * self.positions);
        for c in codes {
            idx.extend(self.lookup_indices(c.as_ref())?);
        }
        if g.value(text).rows() != items * views {
            return Err(Error::Shape(format!(
                "text has {} rows, expected {} items x {views} views",
                g.value(text).rows(),
                items
            )));
        }
        let tables = g.param(store, self.tables);
        let code_rows = g.gather(tables, idx);
        let code_groups = Groups::uniform(items, self.positions);
        let text_groups = Groups::uniform(items, views);
        let code_mean = g.group_mean(code_rows, code_groups.clone());

        if self.mode == FusionMode::MeanPool {
            let text_mean = g.group_mean(text, text_groups);
            let total = (views + self.positions) as f64;
            let reps = g.weighted_sum(&[
                (text_mean, T::of(views as f64 / total)),
                (code_mean, T::of(self.positions as f64 / total)),
            ]);
            return Ok(FusionOutput {
                states: None,
                code_rows,
                reps,
            });
        }

        let (kv, kv_groups) = match self.mode {
            FusionMode::CodesOnly => (code_rows, code_groups.clone()),
            _ => (text, text_groups),
        };
        let mut h = code_rows;
        for (i, block) in self.blocks.iter().enumerate() {
            let s = block
                .self_attn
                .forward(g, store, h, h, code_groups.clone(), code_groups.clone(), false);
            h = add_and_norm(g, store, &block.norm_self, h, s, dropout);
            let c = block
                .cross_attn
                .forward(g, store, h, kv, code_groups.clone(), kv_groups.clone(), false);
            h = add_and_norm(g, store, &block.norm_cross, h, c, dropout);
            let f = block.ffn.forward(g, store, h);
            h = add_and_norm(g, store, &block.norm_ffn, h, f, dropout);
            if !g.value(h).all_finite() {
                return Err(Error::NonFinite { block: i });
            }
        }
        let pooled = g.group_mean(h, code_groups);
        let reps = g.add(pooled, code_mean);
        Ok(FusionOutput {
            states: Some(h),
            code_rows,
            reps,
        })
    }
}

/// The code embeddings `Z^c` of one item (`n_c × d`).
pub fn lookup_codes<T: Scalar>(fusion: &Fusion, store: &ParamStore<T>, codes: &[u32]) -> Result<Matrix<T>> {
    Ok(store.get(fusion.tables).select_rows(&fusion.lookup_indices(codes)?))
}

/// Eval-mode fused vector of one item from its codes and `m × d` text rows.
pub fn sfm_forward<T: Scalar>(fusion: &Fusion, store: &ParamStore<T>, codes: &[u32], text: &Matrix<T>) -> Result<Vec<T>> {
    let mut g = Graph::new();
    let t = g.constant(text.clone());
    let out = fusion.forward(&mut g, store, &[codes], t, text.rows(), &mut Dropout::eval())?;
    Ok(g.value(out.reps).row(0).to_vec())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskStrategy {
    /// Of the selected positions: 80% mask index, 10% random code, 10% kept.
    #[default]
    Bert,
    /// Every selected position becomes the mask index.
    AlwaysMask,
}

/// Number of positions masked out of `n` at ratio `rho`.
pub fn mask_count(n: usize, rho: f64) -> usize {
    // The small offset keeps exact products such as 0.3 * 10 from rounding up.
    (((rho * n as f64) - 1e-9).ceil() as usize).clamp(1, n.max(1))
}

/// Corrupts `⌈ρ·n_c⌉` uniformly chosen positions. Returns the corrupted codes
/// and the sorted selected positions.
pub fn mask_codes<R: Rng + ?Sized>(
    codes: &[u32],
    rho: f64,
    codebook_size: usize,
    strategy: MaskStrategy,
    rng: &mut R,
) -> (Vec<u32>, Vec<usize>) {
    let n = codes.len();
    if n == 0 {
        return (Vec::new(), Vec::new());
    }
    let mut chosen = rand::seq::index::sample(rng, n, mask_count(n, rho)).into_vec();
    chosen.sort_unstable();
    let mut masked = codes.to_vec();
    for &p in &chosen {
        masked[p] = match strategy {
            MaskStrategy::AlwaysMask => codebook_size as u32,
            MaskStrategy::Bert => {
                let u: f64 = rng.random();
                if u < 0.8 {
                    codebook_size as u32
                } else if u < 0.9 {
                    rng.random_range(0..codebook_size as u32)
                } else {
                    codes[p]
                }
            }
        };
    }
    (masked, chosen)
}
