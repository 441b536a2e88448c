//! Joint training of the fusion module and backbone, early stopping,
//! checkpoints, ablation switches and the item-ID fine-tuning stage.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::archive::TensorArchive;
use crate::autograd::{Gradients, Graph, ParamStore, Var};
use crate::corpus::{Split, SplitDataset, TrainWindow};
use crate::error::{Error, Result};
use crate::evaluator;
use crate::fusion::{mask_codes, FusionMode, MaskStrategy};
use crate::layers::Dropout;
use crate::model::CcfModel;
use crate::objectives::{ce_loss, mcm_loss, msa_loss};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    NoMcm,
    NoMsa,
    NoText,
    RandomCode,
    GlobalEmb,
    NoCrossAttention,
    AddItemId,
}

impl Ablation {
    pub const ALL: [Ablation; 7] = [
        Ablation::NoMcm,
        Ablation::NoMsa,
        Ablation::NoText,
        Ablation::RandomCode,
        Ablation::GlobalEmb,
        Ablation::NoCrossAttention,
        Ablation::AddItemId,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::NoMcm => "no_mcm",
            Ablation::NoMsa => "no_msa",
            Ablation::NoText => "no_text",
            Ablation::RandomCode => "random_code",
            Ablation::GlobalEmb => "global_emb",
            Ablation::NoCrossAttention => "no_cross_attention",
            Ablation::AddItemId => "add_item_id",
        }
    }

    /// Variants that change how item vectors are built; at most one may be
    /// active.
    pub fn is_structural(self) -> bool {
        matches!(
            self,
            Ablation::NoText | Ablation::RandomCode | Ablation::GlobalEmb | Ablation::NoCrossAttention
        )
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().replace('-', "_");
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == norm)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown ablation {s:?}")))
    }
}

/// A validated combination of ablation switches.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationSet(Vec<Ablation>);

impl AblationSet {
    pub fn new(flags: impl IntoIterator<Item = Ablation>) -> Result<Self> {
        let mut v: Vec<Ablation> = Vec::new();
        for f in flags {
            if !v.contains(&f) {
                v.push(f);
            }
        }
        let structural: Vec<&str> = v.iter().filter(|a| a.is_structural()).map(|a| a.name()).collect();
        if structural.len() > 1 {
            return Err(Error::ConflictingFlags(structural.join(" + ")));
        }
        Ok(Self(v))
    }

    pub fn contains(&self, a: Ablation) -> bool {
        self.0.contains(&a)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Comma-joined names, or `None` for the full model.
    pub fn tag(&self) -> Option<String> {
        if self.0.is_empty() {
            None
        } else {
            Some(self.0.iter().map(|a| a.name()).collect::<Vec<_>>().join(","))
        }
    }
}

impl FromStr for AblationSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let flags = s
            .split(',')
            .filter(|p| !p.trim().is_empty() && p.trim() != "none")
            .map(Ablation::from_str)
            .collect::<Result<Vec<_>>>()?;
        Self::new(flags)
    }
}

/// How an ablation set rewires the pipeline.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Wiring {
    pub fusion_mode: FusionMode,
    /// Replace semantic codes with i.i.d. uniform ones.
    pub random_codes: bool,
    /// Feed one embedding of the concatenated attributes instead of one per
    /// attribute.
    pub global_text: bool,
    pub item_ids: bool,
    pub mcm: bool,
    pub msa: bool,
}

pub fn apply_ablation(set: &AblationSet) -> Wiring {
    let fusion_mode = if set.contains(Ablation::NoCrossAttention) {
        FusionMode::MeanPool
    } else if set.contains(Ablation::NoText) {
        FusionMode::CodesOnly
    } else {
        FusionMode::CrossText
    };
    Wiring {
        fusion_mode,
        random_codes: set.contains(Ablation::RandomCode),
        global_text: set.contains(Ablation::GlobalEmb),
        item_ids: set.contains(Ablation::AddItemId),
        // Mean pooling has no code states to predict from.
        mcm: !set.contains(Ablation::NoMcm) && fusion_mode != FusionMode::MeanPool,
        msa: !set.contains(Ablation::NoMsa),
    }
}

/// Candidate set for the next-item cross-entropy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Negatives {
    /// Targets of the other training positions in the batch.
    InBatch,
    /// In-batch targets plus `k` items drawn uniformly from the catalogue.
    Uniform(usize),
    /// The whole catalogue.
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub alpha: f64,
    pub beta: f64,
    pub temperature: f64,
    pub mask_ratio: f64,
    pub mask_strategy: MaskStrategy,
    /// Training windows per step.
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub negatives: Negatives,
    pub exclude_seen: bool,
    pub ablations: AblationSet,
    /// Items whose codes never contribute to the masked-code loss.
    pub mcm_holdout: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            alpha: 0.2,
            beta: 0.2,
            temperature: 0.07,
            mask_ratio: 0.5,
            mask_strategy: MaskStrategy::Bert,
            batch_size: 256,
            max_epochs: 200,
            patience: 10,
            seed: 2024,
            negatives: Negatives::InBatch,
            exclude_seen: true,
            ablations: AblationSet::default(),
            mcm_holdout: Vec::new(),
        }
    }
}

impl TrainConfig {
    /// Negated comparisons so that NaN settings are rejected as well.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidArgument("temperature must be positive".into()));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio <= 1.0) {
            return Err(Error::InvalidArgument("mask ratio must be in (0, 1]".into()));
        }
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(Error::InvalidArgument("loss weights must be non-negative".into()));
        }
        if self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::InvalidArgument("batch size and learning rate must be positive".into()));
        }
        Ok(())
    }

    /// Effective weights after ablations and model wiring.
    pub fn loss_weights<T: Scalar>(&self, model: &CcfModel<T>) -> (f64, f64) {
        let wiring = apply_ablation(&self.ablations);
        let mcm = wiring.mcm && model.config.fusion_mode != FusionMode::MeanPool;
        (
            if mcm { self.alpha } else { 0.0 },
            if wiring.msa { self.beta } else { 0.0 },
        )
    }
}

/// Adam with bias correction, one moment pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: Vec<Matrix<T>>,
    second: Vec<Matrix<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    fn grow(&mut self, store: &ParamStore<T>) {
        for id in store.ids().skip(self.first.len()) {
            let (r, c) = store.get(id).shape();
            self.first.push(Matrix::zeros(r, c));
            self.second.push(Matrix::zeros(r, c));
        }
    }

    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) {
        self.grow(store);
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let (tb1, tb2) = (T::of(b1), T::of(b2));
        let (ob1, ob2) = (T::of(1.0 - b1), T::of(1.0 - b2));
        let step_size = T::of(self.lr / c1);
        let inv_c2 = T::of(1.0 / c2);
        let eps = T::of(self.eps);
        for (id, g) in grads.iter() {
            if store.is_frozen(id) {
                continue;
            }
            let m = self.first[id.0].as_mut_slice();
            let v = self.second[id.0].as_mut_slice();
            let p = store.get_mut(id).as_mut_slice();
            for i in 0..p.len() {
                let gi = g.as_slice()[i];
                m[i] = tb1 * m[i] + ob1 * gi;
                v[i] = tb2 * v[i] + ob2 * gi * gi;
                p[i] -= step_size * m[i] / ((v[i] * inv_c2).sqrt() + eps);
            }
        }
    }

    fn to_archive(&self, store: &ParamStore<T>, archive: &mut TensorArchive<T>) {
        for (id, name, _) in store.iter() {
            if let (Some(m), Some(v)) = (self.first.get(id.0), self.second.get(id.0)) {
                archive.push(format!("adam_m/{name}"), m.clone());
                archive.push(format!("adam_v/{name}"), v.clone());
            }
        }
    }

    fn from_archive(meta: &serde_json::Value, archive: &TensorArchive<T>, store: &ParamStore<T>) -> Self {
        let mut adam = Self::new(meta["lr"].as_f64().unwrap_or(0.001));
        adam.step = meta["adam_step"].as_u64().unwrap_or(0);
        for (_, name, _) in store.iter() {
            match (archive.get(&format!("adam_m/{name}")), archive.get(&format!("adam_v/{name}"))) {
                (Some(m), Some(v)) => {
                    adam.first.push(m.clone());
                    adam.second.push(v.clone());
                }
                _ => break,
            }
        }
        adam
    }
}

/// Model, optimizer state and bookkeeping at the end of an epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub model: CcfModel<T>,
    pub optimizer: Adam<T>,
    pub epoch: usize,
    pub best_valid_ndcg: f64,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_archive(&self) -> TensorArchive<T> {
        let mut archive = self.model.to_archive();
        if let Some(meta) = archive.meta.as_object_mut() {
            meta.insert("epoch".into(), json!(self.epoch));
            meta.insert("best_valid_ndcg".into(), json!(self.best_valid_ndcg));
            meta.insert("lr".into(), json!(self.optimizer.lr));
            meta.insert("adam_step".into(), json!(self.optimizer.step));
        }
        self.optimizer.to_archive(&self.model.params, &mut archive);
        archive
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let archive = TensorArchive::load(path)?;
        let model = CcfModel::from_archive(&archive, path)?;
        let meta = &archive.meta;
        let optimizer = Adam::from_archive(meta, &archive, &model.params);
        Ok(Self {
            optimizer,
            epoch: meta["epoch"].as_u64().unwrap_or(0) as usize,
            // JSON has no NaN or infinities; an untrained checkpoint stores null.
            best_valid_ndcg: meta["best_valid_ndcg"].as_f64().unwrap_or(f64::NEG_INFINITY),
            model,
        })
    }
}

/// The loss graph of one step, kept alive so callers can differentiate any
/// component.
pub struct LossGraph<T> {
    pub graph: Graph<T>,
    pub total: Var,
    pub ce: Var,
    pub mcm: Option<Var>,
    pub msa: Option<Var>,
}

impl<T: Scalar> LossGraph<T> {
    pub fn values(&self) -> StepLosses {
        let get = |v: Option<Var>| v.map(|v| self.graph.scalar(v).to_f64_lossless());
        StepLosses {
            total: self.graph.scalar(self.total).to_f64_lossless(),
            ce: self.graph.scalar(self.ce).to_f64_lossless(),
            mcm: get(self.mcm),
            msa: get(self.msa),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub total: f64,
    pub ce: f64,
    pub mcm: Option<f64>,
    pub msa: Option<f64>,
}

/// Builds the full objective for a batch of windows. Masking (and uniform
/// negative sampling) draws from `mask_seed`; dropout is active only when
/// `dropout_rng` is given.
pub fn compute_losses<T: Scalar>(
    model: &CcfModel<T>,
    windows: &[&TrainWindow],
    cfg: &TrainConfig,
    mask_seed: u64,
    dropout_rng: Option<&mut dyn RngCore>,
) -> Result<LossGraph<T>> {
    if windows.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut mask_rng = ChaCha8Rng::seed_from_u64(mask_seed);
    let mut dropout = match dropout_rng {
        Some(rng) => Dropout::train(model.config.dropout, rng),
        None => Dropout::eval(),
    };
    let (alpha, beta) = cfg.loss_weights(model);
    let tau = cfg.temperature;

    // Unique items, in first-seen order.
    let mut local: HashMap<usize, usize> = HashMap::new();
    let mut items: Vec<usize> = Vec::new();
    let mut intern = |i: usize, items: &mut Vec<usize>| {
        *local.entry(i).or_insert_with(|| {
            items.push(i);
            items.len() - 1
        })
    };
    let mut sequences = Vec::with_capacity(windows.len());
    let mut target_rows = Vec::new();
    let mut target_items = Vec::new();
    let mut offset = 0;
    for w in windows {
        sequences.push(w.inputs.iter().map(|&i| intern(i, &mut items)).collect::<Vec<_>>());
        for &(pos, t) in &w.targets {
            target_rows.push(offset + pos);
            target_items.push(t);
        }
        offset += w.inputs.len();
    }
    let mut candidates: Vec<usize> = Vec::new();
    let mut cand_index: HashMap<usize, usize> = HashMap::new();
    let mut add_candidate = |i: usize, c: &mut Vec<usize>| {
        *cand_index.entry(i).or_insert_with(|| {
            c.push(i);
            c.len() - 1
        })
    };
    let targets: Vec<usize> = target_items
        .iter()
        .map(|&t| add_candidate(t, &mut candidates))
        .collect();
    match cfg.negatives {
        Negatives::InBatch => {}
        Negatives::Uniform(k) => {
            for _ in 0..k {
                add_candidate(mask_rng.random_range(0..model.num_items()), &mut candidates);
            }
        }
        Negatives::All => {
            for i in 0..model.num_items() {
                add_candidate(i, &mut candidates);
            }
        }
    }
    let cand_local: Vec<usize> = candidates.iter().map(|&i| intern(i, &mut items)).collect();

    let mut g = Graph::new();
    let fused = model.fuse(&mut g, &items, None, &mut dropout)?;
    let states = model
        .backbone
        .forward(&mut g, &model.params, fused.reps, &sequences, &mut dropout)?;
    let users = g.gather(states.states, target_rows);
    let cand = g.gather(fused.reps, cand_local);
    let ce = ce_loss(&mut g, users, cand, targets, tau)?;

    let mut mcm = None;
    let mut msa = None;
    let msa_active = beta > 0.0 && windows.len() >= 2;
    if alpha > 0.0 || msa_active {
        let holdout: HashSet<usize> = cfg.mcm_holdout.iter().copied().collect();
        let n_c = model.config.codes_per_item;
        let c = model.config.codebook_size;
        let mut masked = Vec::with_capacity(items.len());
        let mut rows = Vec::new();
        let mut positions = Vec::new();
        let mut truth = Vec::new();
        for (u, &item) in items.iter().enumerate() {
            let own = &model.codes()[item];
            let (m, set) = mask_codes(own, cfg.mask_ratio, c, cfg.mask_strategy, &mut mask_rng);
            if !holdout.contains(&item) {
                for p in set {
                    rows.push(u * n_c + p);
                    positions.push(p);
                    truth.push(own[p]);
                }
            }
            masked.push(m);
        }
        let aug = model.fuse(&mut g, &items, Some(&masked), &mut dropout)?;
        if alpha > 0.0 {
            if let Some(h) = aug.states {
                let picked = g.gather(h, rows);
                let tables = g.param(&model.params, model.fusion.tables);
                mcm = mcm_loss(&mut g, picked, tables, &positions, &truth, c, tau)?;
            }
        }
        if msa_active {
            let r = states.last(&mut g);
            let aug_states = model
                .backbone
                .forward(&mut g, &model.params, aug.reps, &sequences, &mut dropout)?;
            let r_aug = aug_states.last(&mut g);
            msa = Some(msa_loss(&mut g, r, r_aug, tau)?);
        }
    }

    let mut terms = vec![(ce, T::one())];
    if let Some(v) = mcm {
        terms.push((v, T::of(alpha)));
    }
    if let Some(v) = msa {
        terms.push((v, T::of(beta)));
    }
    let total = g.weighted_sum(&terms);
    Ok(LossGraph {
        graph: g,
        total,
        ce,
        mcm,
        msa,
    })
}

/// Patience-based early stopping on a higher-is-better metric.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopper {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    pub bad_epochs: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::NEG_INFINITY,
            best_epoch: 0,
            bad_epochs: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, metric: f64) -> StopDecision {
        if metric > self.best {
            self.best = metric;
            self.best_epoch = epoch;
            self.bad_epochs = 0;
            StopDecision::Improved
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                StopDecision::Stop
            } else {
                StopDecision::Continue
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub ce: f64,
    pub mcm: Option<f64>,
    pub msa: Option<f64>,
    pub valid_ndcg10: f64,
    pub seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ablation: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    EarlyStopped,
    Diverged { epoch: usize, step: usize },
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub best: Checkpoint<T>,
    pub last: Checkpoint<T>,
    pub history: Vec<EpochRecord>,
    pub stop: StopReason,
}

/// Validation NDCG@10 over all validation users.
pub fn validation_ndcg<T: Scalar>(data: &SplitDataset, exclude_seen: bool) -> impl FnMut(&CcfModel<T>, usize) -> Result<f64> + '_ {
    move |model, _| Ok(evaluator::evaluate(model, data, Split::Valid, exclude_seen, &[10])?.ndcg(10))
}

/// Trains `model` in place. `validate` is called after every epoch and its
/// value drives early stopping. On return `model` holds the best checkpoint's
/// parameters. A non-finite loss stops training and restores the best
/// checkpoint seen so far (the initial model if none).
pub fn train<T, V>(model: &mut CcfModel<T>, data: &SplitDataset, cfg: &TrainConfig, mut validate: V) -> Result<TrainOutcome<T>>
where
    T: Scalar,
    V: FnMut(&CcfModel<T>, usize) -> Result<f64>,
{
    cfg.validate()?;
    let windows = data.train_windows();
    if windows.is_empty() {
        return Err(Error::InvalidArgument("no training windows".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut optimizer = Adam::new(cfg.lr);
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut best = Checkpoint {
        model: model.clone(),
        optimizer: optimizer.clone(),
        epoch: 0,
        best_valid_ndcg: f64::NEG_INFINITY,
    };
    let mut history = Vec::new();
    let mut stop = StopReason::MaxEpochs;
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let tag = cfg.ablations.tag();

    'epochs: for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut sums = StepLosses::default();
        let (mut mcm_sum, mut msa_sum) = (0.0, 0.0);
        let (mut mcm_n, mut msa_n) = (0usize, 0usize);
        let mut steps = 0usize;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&TrainWindow> = chunk.iter().map(|&i| &windows[i]).collect();
            let mask_seed = rng.next_u64();
            let lg = compute_losses(model, &batch, cfg, mask_seed, Some(&mut rng))?;
            let values = lg.values();
            if !values.total.is_finite() {
                warn!("non-finite loss at epoch {epoch}, step {step}; restoring epoch {}", best.epoch);
                stop = StopReason::Diverged { epoch, step };
                break 'epochs;
            }
            let grads = lg.graph.backward(lg.total);
            optimizer.update(&mut model.params, &grads);
            sums.total += values.total;
            sums.ce += values.ce;
            if let Some(v) = values.mcm {
                mcm_sum += v;
                mcm_n += 1;
            }
            if let Some(v) = values.msa {
                msa_sum += v;
                msa_n += 1;
            }
            steps += 1;
        }
        let ndcg = validate(model, epoch)?;
        let record = EpochRecord {
            epoch,
            loss: sums.total / steps as f64,
            ce: sums.ce / steps as f64,
            mcm: (mcm_n > 0).then(|| mcm_sum / mcm_n as f64),
            msa: (msa_n > 0).then(|| msa_sum / msa_n as f64),
            valid_ndcg10: ndcg,
            seconds: started.elapsed().as_secs_f64(),
            ablation: tag.clone(),
        };
        info!(
            "epoch {epoch}: loss {:.4} ce {:.4} valid ndcg@10 {ndcg:.4} ({:.1}s)",
            record.loss, record.ce, record.seconds
        );
        history.push(record);
        match stopper.observe(epoch, ndcg) {
            StopDecision::Improved => {
                best = Checkpoint {
                    model: model.clone(),
                    optimizer: optimizer.clone(),
                    epoch,
                    best_valid_ndcg: ndcg,
                };
            }
            StopDecision::Continue => {}
            StopDecision::Stop => {
                stop = StopReason::EarlyStopped;
                break;
            }
        }
    }
    let last = Checkpoint {
        model: model.clone(),
        optimizer,
        epoch: history.len(),
        best_valid_ndcg: stopper.best,
    };
    *model = best.model.clone();
    Ok(TrainOutcome {
        best,
        last,
        history,
        stop,
    })
}

/// Adds a zero-initialised item-ID table to a copy of `base`, freezes
/// everything else and trains on the next-item loss alone.
pub fn finetune_with_ids<T, V>(base: &CcfModel<T>, data: &SplitDataset, cfg: &TrainConfig, validate: V) -> Result<(CcfModel<T>, TrainOutcome<T>)>
where
    T: Scalar,
    V: FnMut(&CcfModel<T>, usize) -> Result<f64>,
{
    let mut model = base.clone();
    model.freeze_all_but_item_ids();
    let mut ce_only = cfg.clone();
    ce_only.alpha = 0.0;
    ce_only.beta = 0.0;
    let outcome = train(&mut model, data, &ce_only, validate)?;
    Ok((model, outcome))
}

/// Eval-mode mean next-item cross-entropy over every training example, with
/// the whole catalogue as candidates.
pub fn train_ce_loss<T: Scalar>(model: &CcfModel<T>, data: &SplitDataset, temperature: f64) -> Result<f64> {
    let windows = data.train_windows();
    let reps = model.item_reps()?;
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in windows.chunks(256) {
        let mut g = Graph::new();
        let r = g.constant(reps.clone());
        let seqs: Vec<&[usize]> = chunk.iter().map(|w| w.inputs.as_slice()).collect();
        let out = model
            .backbone
            .forward(&mut g, &model.params, r, &seqs, &mut Dropout::eval())?;
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        let mut offset = 0;
        for w in chunk {
            for &(pos, t) in &w.targets {
                rows.push(offset + pos);
                targets.push(t);
            }
            offset += w.inputs.len();
        }
        let n = targets.len();
        let users = g.gather(out.states, rows);
        let loss = ce_loss(&mut g, users, r, targets, temperature)?;
        total += g.scalar(loss).to_f64_lossless() * n as f64;
        count += n;
    }
    Ok(total / count.max(1) as f64)
}

/// Per-position accuracy of masked code prediction on `items`, eval mode.
/// Each round masks `⌈ρ·n_c⌉` random positions of every item with the mask
/// index and predicts each from the final code state by the most similar
/// (cosine) embedding of its own table. Positions never masked report `NaN`.
pub fn mcm_accuracy<T: Scalar>(model: &CcfModel<T>, items: &[usize], mask_ratio: f64, rounds: usize, seed: u64) -> Result<Vec<f64>> {
    let n_c = model.config.codes_per_item;
    let c = model.config.codebook_size;
    let mut hits = vec![0usize; n_c];
    let mut seen = vec![0usize; n_c];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tables = model.params.get(model.fusion.tables);
    for _ in 0..rounds {
        let mut masked = Vec::with_capacity(items.len());
        let mut sets = Vec::with_capacity(items.len());
        for &i in items {
            let (m, set) = mask_codes(&model.codes()[i], mask_ratio, c, MaskStrategy::AlwaysMask, &mut rng);
            masked.push(m);
            sets.push(set);
        }
        let mut g = Graph::new();
        let out = model.fuse(&mut g, items, Some(&masked), &mut Dropout::eval())?;
        let Some(h) = out.states else {
            return Err(Error::InvalidArgument("mean-pool fusion has no code states".into()));
        };
        let h = g.value(h);
        for (u, set) in sets.iter().enumerate() {
            for &p in set {
                let state = h.row(u * n_c + p);
                let best = (0..c)
                    .map(|code| {
                        let row = tables.row(model.fusion.table_row(p, code as u32));
                        let sim = crate::tensor::cosine(state, row).unwrap_or(T::neg_infinity());
                        (code, sim)
                    })
                    .fold((0, T::neg_infinity()), |acc, x| if x.1 > acc.1 { x } else { acc });
                seen[p] += 1;
                if best.0 as u32 == model.codes()[items[u]][p] {
                    hits[p] += 1;
                }
            }
        }
    }
    Ok(hits
        .iter()
        .zip(&seen)
        .map(|(&h, &s)| if s == 0 { f64::NAN } else { h as f64 / s as f64 })
        .collect())
}
