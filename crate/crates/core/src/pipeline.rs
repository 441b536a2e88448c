//! In-memory glue from raw items and interactions to a trainable model:
//! split, encode, quantize, project.

use serde::{Deserialize, Serialize};

use crate::corpus::{align_items, build_splits, Interaction, Item, SplitDataset};
use crate::error::Result;
use crate::model::{CcfModel, ModelConfig};
use crate::quantizer::{assign_codes, random_codes, Codebook, QuantMethod};
use crate::scalar::Scalar;
use crate::tensor::Matrix;
use crate::textenc::{encode_corpus, encode_global, fit_pca, HashEncoder, RawEmbeddings};
use crate::trainer::Wiring;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrepConfig {
    pub fields: Vec<String>,
    pub max_len: usize,
    pub encoder_dim: usize,
    pub encoder_seed: u64,
    pub method: QuantMethod,
    pub levels: usize,
    pub codebook_size: usize,
    pub quant_seed: u64,
}

impl Default for PrepConfig {
    fn default() -> Self {
        Self {
            fields: crate::corpus::DEFAULT_FIELDS.iter().map(|s| s.to_string()).collect(),
            max_len: crate::corpus::DEFAULT_MAX_LEN,
            encoder_dim: 64,
            encoder_seed: 0,
            method: QuantMethod::Pq,
            levels: 4,
            codebook_size: 32,
            quant_seed: 0,
        }
    }
}

/// Everything a model needs besides its hyperparameters.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub data: SplitDataset,
    pub items: Vec<Item>,
    /// Multi-view raw embeddings, one row per (item, attribute).
    pub raw: RawEmbeddings,
    /// The rows fed to the model as text (multi-view or single global).
    pub text_raw: RawEmbeddings,
    pub codes: Vec<Vec<u32>>,
}

impl Prepared {
    pub fn views(&self) -> usize {
        self.text_raw.views
    }

    /// PCA of all text rows to width `d`, in the requested precision.
    pub fn projected_text<T: Scalar>(&self, d: usize) -> Result<Matrix<T>> {
        let rows: Matrix<f64> = self.text_raw.rows.cast();
        let pca = fit_pca(&rows, d)?;
        Ok(pca.project(&rows)?.cast())
    }

    /// Model over this data; fills in code count, codebook size and fusion
    /// mode from the preparation and wiring.
    pub fn build_model<T: Scalar>(&self, mut config: ModelConfig, prep: &PrepConfig, wiring: &Wiring, seed: u64) -> Result<CcfModel<T>> {
        config.codes_per_item = self.codes.first().map_or(0, Vec::len);
        config.codebook_size = prep.codebook_size;
        config.max_len = prep.max_len;
        config.fusion_mode = wiring.fusion_mode;
        let text = self.projected_text(config.dim)?;
        let mut model = CcfModel::new(config, text, self.views(), self.codes.clone(), seed)?;
        if wiring.item_ids {
            model.enable_item_ids();
        }
        Ok(model)
    }
}

pub fn prepare(items: &[Item], interactions: &[Interaction], prep: &PrepConfig, wiring: &Wiring) -> Result<Prepared> {
    let data = build_splits(interactions, prep.max_len);
    let (items, _) = align_items(items, &data.item_vocab, &prep.fields);
    let encoder = HashEncoder::new(prep.encoder_dim, prep.encoder_seed);
    let raw = encode_corpus(&items, &encoder)?;
    let text_raw = if wiring.global_text {
        encode_global(&items, &encoder)?
    } else {
        raw.clone()
    };
    let codes = if wiring.random_codes {
        random_codes(
            &data.item_vocab,
            raw.views,
            prep.levels,
            prep.codebook_size,
            prep.quant_seed,
        )?
    } else {
        let codebook: Codebook<f32> = Codebook::fit(&raw, prep.method, prep.levels, prep.codebook_size, prep.quant_seed)?;
        assign_codes(&raw, &codebook, &data.item_vocab)?
    };
    Ok(Prepared {
        data,
        items,
        raw,
        text_raw,
        codes: codes.into_iter().map(|t| t.codes).collect(),
    })
}
