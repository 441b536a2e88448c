//! The full recommender: fusion module, causal backbone, optional item-ID
//! table, and the frozen item features (projected text and semantic codes).

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::archive::TensorArchive;
use crate::autograd::{Graph, ParamId, ParamStore};
use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::fusion::{Fusion, FusionMode, FusionOutput};
use crate::layers::Dropout;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Items per graph when fusing the whole catalogue in eval mode.
const EVAL_ITEM_CHUNK: usize = 256;
/// Sequences per graph when computing user vectors in eval mode.
const EVAL_USER_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub fusion_layers: usize,
    pub backbone_layers: usize,
    pub max_len: usize,
    pub codes_per_item: usize,
    pub codebook_size: usize,
    pub dropout: f64,
    pub fusion_mode: FusionMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 128,
            heads: 2,
            ffn_hidden: 512,
            fusion_layers: 2,
            backbone_layers: 2,
            max_len: crate::corpus::DEFAULT_MAX_LEN,
            codes_per_item: 20,
            codebook_size: 256,
            dropout: 0.2,
            fusion_mode: FusionMode::CrossText,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CcfModel<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub fusion: Fusion,
    pub backbone: Backbone,
    pub item_ids: Option<ParamId>,
    text: Matrix<T>,
    views: usize,
    codes: Vec<Vec<u32>>,
}

impl<T: Scalar> CcfModel<T> {
    /// Builds a freshly initialised model. `text` holds `views` projected rows
    /// per item (`n_items*views × dim`) and `codes` one tuple per item.
    pub fn new(config: ModelConfig, text: Matrix<T>, views: usize, codes: Vec<Vec<u32>>, seed: u64) -> Result<Self> {
        if views == 0 || text.rows() != codes.len() * views || text.cols() != config.dim {
            return Err(Error::Shape(format!(
                "text is {}x{}, expected {} items x {views} views by {}",
                text.rows(),
                text.cols(),
                codes.len(),
                config.dim
            )));
        }
        if config.heads == 0 || !config.dim.is_multiple_of(config.heads) {
            return Err(Error::InvalidArgument(format!(
                "{} heads do not divide width {}",
                config.heads, config.dim
            )));
        }
        for tuple in &codes {
            if tuple.len() != config.codes_per_item {
                return Err(Error::Shape(format!(
                    "code tuple of length {}, expected {}",
                    tuple.len(),
                    config.codes_per_item
                )));
            }
            if let Some((position, &code)) = tuple
                .iter()
                .enumerate()
                .find(|(_, &c)| c as usize >= config.codebook_size)
            {
                return Err(Error::CodeOutOfRange {
                    position,
                    code,
                    limit: config.codebook_size as u32,
                });
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let fusion = Fusion::new(
            &mut params,
            config.dim,
            config.heads,
            config.ffn_hidden,
            config.fusion_layers,
            config.codes_per_item,
            config.codebook_size,
            config.fusion_mode,
            &mut rng,
        );
        let backbone = Backbone::new(
            &mut params,
            config.dim,
            config.heads,
            config.ffn_hidden,
            config.backbone_layers,
            config.max_len,
            &mut rng,
        );
        Ok(Self {
            config,
            params,
            fusion,
            backbone,
            item_ids: None,
            text,
            views,
            codes,
        })
    }

    pub fn num_items(&self) -> usize {
        self.codes.len()
    }

    pub fn views(&self) -> usize {
        self.views
    }

    pub fn codes(&self) -> &[Vec<u32>] {
        &self.codes
    }

    pub fn text(&self) -> &Matrix<T> {
        &self.text
    }

    /// Adds the zero-initialised `|V| × d` item-ID table if absent.
    pub fn enable_item_ids(&mut self) -> ParamId {
        if let Some(id) = self.item_ids {
            return id;
        }
        let id = self
            .params
            .add("item_ids", Matrix::zeros(self.num_items(), self.config.dim));
        self.item_ids = Some(id);
        id
    }

    /// Freezes every parameter except the item-ID table.
    pub fn freeze_all_but_item_ids(&mut self) {
        let keep = self.enable_item_ids();
        let ids: Vec<ParamId> = self.params.ids().collect();
        for id in ids {
            self.params.set_frozen(id, id != keep);
        }
    }

    /// Text rows of `items`, stacked item-major.
    pub fn item_text(&self, items: &[usize]) -> Matrix<T> {
        let rows: Vec<usize> = items
            .iter()
            .flat_map(|&i| i * self.views..(i + 1) * self.views)
            .collect();
        self.text.select_rows(&rows)
    }

    /// Fuses `items` on `g`, optionally with substituted (e.g. masked) codes.
    /// The returned `reps` include the item-ID rows when that table exists.
    pub fn fuse(
        &self,
        g: &mut Graph<T>,
        items: &[usize],
        codes: Option<&[Vec<u32>]>,
        dropout: &mut Dropout<'_>,
    ) -> Result<FusionOutput> {
        if let Some(&bad) = items.iter().find(|&&i| i >= self.num_items()) {
            return Err(Error::UnknownItem(bad.to_string()));
        }
        let text = g.constant(self.item_text(items));
        let mut out = match codes {
            Some(c) => self.fusion.forward(g, &self.params, c, text, self.views, dropout)?,
            None => {
                let own: Vec<&[u32]> = items.iter().map(|&i| self.codes[i].as_slice()).collect();
                self.fusion.forward(g, &self.params, &own, text, self.views, dropout)?
            }
        };
        if let Some(id) = self.item_ids {
            let table = g.param(&self.params, id);
            let rows = g.gather(table, items.to_vec());
            out.reps = g.add(out.reps, rows);
        }
        Ok(out)
    }

    /// Eval-mode fused vectors of the whole catalogue (`|V| × d`).
    pub fn item_reps(&self) -> Result<Matrix<T>> {
        let n = self.num_items();
        let mut out = Matrix::zeros(n, self.config.dim);
        let all: Vec<usize> = (0..n).collect();
        for chunk in all.chunks(EVAL_ITEM_CHUNK) {
            let mut g = Graph::new();
            let fused = self.fuse(&mut g, chunk, None, &mut Dropout::eval())?;
            let reps = g.value(fused.reps);
            for (k, &i) in chunk.iter().enumerate() {
                out.row_mut(i).copy_from_slice(reps.row(k));
            }
        }
        Ok(out)
    }

    /// Eval-mode user vectors: the last backbone state of each sequence, with
    /// item vectors read from `reps`.
    pub fn user_vectors<S: AsRef<[usize]>>(&self, reps: &Matrix<T>, sequences: &[S]) -> Result<Matrix<T>> {
        let mut out = Matrix::zeros(sequences.len(), self.config.dim);
        for (c, chunk) in sequences.chunks(EVAL_USER_CHUNK).enumerate() {
            let mut g = Graph::new();
            let r = g.constant(reps.clone());
            let states = self
                .backbone
                .forward(&mut g, &self.params, r, chunk, &mut Dropout::eval())?;
            let last = states.last(&mut g);
            let v = g.value(last);
            for k in 0..chunk.len() {
                out.row_mut(c * EVAL_USER_CHUNK + k).copy_from_slice(v.row(k));
            }
        }
        Ok(out)
    }

    /// Parameters, frozen flags and item features as a tensor archive.
    pub fn to_archive(&self) -> TensorArchive<T> {
        let frozen: Vec<&str> = self
            .params
            .iter()
            .filter(|(id, _, _)| self.params.is_frozen(*id))
            .map(|(_, name, _)| name)
            .collect();
        let mut archive = TensorArchive::new(json!({
            "model": self.config,
            "views": self.views,
            "item_ids": self.item_ids.is_some(),
            "frozen": frozen,
        }));
        for (_, name, value) in self.params.iter() {
            archive.push(format!("param/{name}"), value.clone());
        }
        archive.push("feature/text", self.text.clone());
        let n_c = self.config.codes_per_item;
        let codes = Matrix::from_fn(self.num_items(), n_c, |r, c| T::of(self.codes[r][c] as f64));
        archive.push("feature/codes", codes);
        archive
    }

    pub fn from_archive(archive: &TensorArchive<T>, path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::bad_artifact(path, reason);
        let meta = &archive.meta;
        let config: ModelConfig = serde_json::from_value(meta["model"].clone())
            .map_err(|e| bad(format!("model config: {e}")))?;
        let views = meta["views"]
            .as_u64()
            .ok_or_else(|| bad("missing view count".into()))? as usize;
        let text = archive
            .get("feature/text")
            .ok_or_else(|| bad("missing feature/text".into()))?
            .clone();
        let codes_m = archive
            .get("feature/codes")
            .ok_or_else(|| bad("missing feature/codes".into()))?;
        let codes = (0..codes_m.rows())
            .map(|r| codes_m.row(r).iter().map(|&c| c.to_f64_lossless() as u32).collect())
            .collect();
        let mut model = Self::new(config, text, views, codes, 0)?;
        if meta["item_ids"].as_bool() == Some(true) {
            model.enable_item_ids();
        }
        let ids: Vec<ParamId> = model.params.ids().collect();
        for id in ids {
            let name = model.params.name(id).to_string();
            let stored = archive
                .get(&format!("param/{name}"))
                .ok_or_else(|| bad(format!("missing parameter {name}")))?;
            if stored.shape() != model.params.get(id).shape() {
                return Err(bad(format!("parameter {name} has the wrong shape")));
            }
            *model.params.get_mut(id) = stored.clone();
        }
        if let Some(frozen) = meta["frozen"].as_array() {
            for name in frozen.iter().filter_map(|v| v.as_str()) {
                let id = model
                    .params
                    .find(name)
                    .ok_or_else(|| bad(format!("unknown frozen parameter {name}")))?;
                model.params.set_frozen(id, true);
            }
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> CcfModel<f64> {
        let config = ModelConfig {
            dim: 8,
            heads: 2,
            ffn_hidden: 16,
            fusion_layers: 1,
            backbone_layers: 1,
            max_len: 5,
            codes_per_item: 4,
            codebook_size: 3,
            dropout: 0.1,
            fusion_mode: FusionMode::CrossText,
        };
        let codes = (0..6u32).map(|i| vec![i % 3, (i + 1) % 3, 0, 2]).collect();
        let text = Matrix::from_fn(12, 8, |r, c| ((r * 8 + c) as f64).sin());
        CcfModel::new(config, text, 2, codes, 7).unwrap()
    }

    #[test]
    fn catalogue_reps_match_single_item_passes() {
        let m = toy();
        let all = m.item_reps().unwrap();
        for i in 0..m.num_items() {
            let one = crate::fusion::sfm_forward(&m.fusion, &m.params, &m.codes[i], &m.item_text(&[i])).unwrap();
            assert_eq!(all.row(i), one.as_slice());
        }
    }

    #[test]
    fn zero_item_ids_leave_reps_unchanged() {
        let mut m = toy();
        let before = m.item_reps().unwrap();
        m.enable_item_ids();
        assert_eq!(m.item_reps().unwrap(), before);
    }

    #[test]
    fn bad_codes_are_rejected() {
        let m = toy();
        let err = CcfModel::new(m.config.clone(), m.text.clone(), 2, vec![vec![0, 0, 3, 0]; 6], 0).unwrap_err();
        assert!(matches!(err, Error::CodeOutOfRange { position: 2, .. }));
    }

    #[test]
    fn archive_round_trip() {
        let mut m = toy();
        m.freeze_all_but_item_ids();
        let back = CcfModel::from_archive(&m.to_archive(), Path::new("x")).unwrap();
        assert_eq!(back, m);
    }
}
