//! One function per subcommand. Each stage derives the config hash of its
//! inputs, refuses to run without its prerequisites and skips work whose
//! output already exists under the same hash.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;
use serde_json::json;

use ccfrec::archive::TensorArchive;
use ccfrec::corpus::{
    align_items, build_splits, ingest_items, k_core_filter, read_interactions, write_interactions, write_items, Item,
    Split, SplitDataset,
};
use ccfrec::evaluator::{build_rep_cache, evaluate, read_rep_cache, DEFAULT_KS};
use ccfrec::pipeline::{PrepConfig, Prepared};
use ccfrec::quantizer::{
    assign_codes, random_codes, read_codes, write_codebook, write_codes, Codebook, CodesHeader,
};
use ccfrec::synth::generate_synthetic;
use ccfrec::textenc::{encode_corpus, encode_global, read_cache, write_cache, HashEncoder, RawEmbeddings, TextEncoder};
use ccfrec::trainer::{apply_ablation, finetune_with_ids, train, validation_ndcg, Checkpoint, TrainOutcome};
use ccfrec::Model32;

use crate::artifacts::{ensure_dir, FORMAT_VERSION, hash_json, hash_parts, hex, prepend_header, read_header, Layout};
use crate::settings::Settings;
use crate::CliError;

const SYNTH_KIND: &str = "synth";
const DATA_KIND: &str = "data";

fn missing(stage: &'static str, what: String, hint: &str) -> CliError {
    CliError::Missing {
        stage,
        what,
        hint: hint.to_string(),
    }
}

fn say(stage: &str, msg: impl AsRef<str>) {
    eprintln!("{stage}: {}", msg.as_ref());
}

// ---------------------------------------------------------------------------
// Hash chain

/// Hashes of every stage, each covering all settings that stage and its
/// predecessors depend on.
#[derive(Clone, Copy, Debug)]
pub struct Hashes {
    pub embed: u64,
    pub quantize: u64,
}

impl Hashes {
    /// Derives the chain from the ingested data header. Fails with a missing
    /// prerequisite if nothing has been ingested.
    pub fn derive(s: &Settings, layout: &Layout, stage: &'static str) -> Result<Self, CliError> {
        let items = layout.data_items();
        let inter = layout.data_interactions();
        let a = read_header(&inter, DATA_KIND)?;
        let b = read_header(&items, DATA_KIND)?;
        let data = match (a, b) {
            (Some(a), Some(b)) if a == b => a,
            (Some(_), Some(_)) => {
                return Err(CliError::Core(ccfrec::Error::bad_artifact(
                    &items,
                    "items and interactions come from different ingests".to_string(),
                )))
            }
            _ => {
                return Err(missing(
                    stage,
                    format!("ingested data {}", layout.show(&inter)),
                    "ingest",
                ))
            }
        };
        let embed = hash_json(&json!({
            "data": hex(data),
            "fields": s.fields,
            "encoder": HashEncoder::new(s.encoder_dim, s.encoder_seed).fingerprint(),
        }));
        let quantize = hash_json(&json!({
            "embed": hex(embed),
            "method": s.method,
            "levels": s.levels,
            "codebook_size": s.codebook_size,
            "seed": s.quant_seed,
        }));
        Ok(Self { embed, quantize })
    }

    /// Identifier of the training run for these settings.
    pub fn run_id(&self, s: &Settings) -> Result<String, CliError> {
        let cfg = s.train_config()?;
        let wiring = apply_ablation(&cfg.ablations);
        let codes = if wiring.random_codes {
            json!({ "random": { "levels": s.levels, "size": s.codebook_size, "seed": s.quant_seed } })
        } else {
            json!(hex(self.quantize))
        };
        Ok(hex(hash_json(&json!({
            "embed": hex(self.embed),
            "codes": codes,
            "model": s.model_config(),
            "train": cfg,
        }))))
    }
}

// ---------------------------------------------------------------------------
// synth, ingest

pub fn synth(s: &Settings) -> Result<(), CliError> {
    let spec = s.synthetic_spec();
    let hash = hash_json(&spec);
    let (items_path, inter_path) = (s.raw_items(), s.raw_interactions());
    if read_header(&items_path, SYNTH_KIND)? == Some(hash) && read_header(&inter_path, SYNTH_KIND)? == Some(hash) {
        say("synth", format!("up to date ({})", hex(hash)));
        return Ok(());
    }
    let corpus = generate_synthetic(&spec)?;
    for p in [&items_path, &inter_path] {
        if let Some(dir) = p.parent() {
            ensure_dir(dir)?;
        }
    }
    write_items(&items_path, &corpus.items)?;
    prepend_header(&items_path, SYNTH_KIND, hash)?;
    write_interactions(&inter_path, &corpus.interactions)?;
    prepend_header(&inter_path, SYNTH_KIND, hash)?;
    say(
        "synth",
        format!(
            "{} items, {} interactions -> {}, {}",
            corpus.items.len(),
            corpus.interactions.len(),
            items_path.display(),
            inter_path.display()
        ),
    );
    Ok(())
}

pub fn ingest(s: &Settings, layout: &Layout) -> Result<(), CliError> {
    let (items_path, inter_path) = (s.raw_items(), s.raw_interactions());
    for p in [&inter_path, &items_path] {
        if !p.exists() {
            return Err(missing("ingest", format!("raw input {}", p.display()), "synth"));
        }
    }
    let read = |p: &Path| fs::read(p).map_err(|e| CliError::Core(ccfrec::Error::io(p, e)));
    let (raw_items, raw_inter) = (read(&items_path)?, read(&inter_path)?);
    let fields = s.fields.join(",");
    let kcore = s.kcore.to_string();
    let hash = hash_parts(&[&raw_items, &raw_inter, fields.as_bytes(), kcore.as_bytes()]);
    let (out_items, out_inter) = (layout.data_items(), layout.data_interactions());
    if read_header(&out_items, DATA_KIND)? == Some(hash) && read_header(&out_inter, DATA_KIND)? == Some(hash) {
        say("ingest", format!("up to date ({})", hex(hash)));
        return Ok(());
    }
    if s.kcore == 0 {
        return Err(CliError::Config("kcore must be at least 1".into()));
    }
    let report = ingest_items(&items_path, &s.fields)?;
    let interactions = read_interactions(&inter_path)?;
    let filtered = k_core_filter(&interactions, s.kcore);
    let kept: std::collections::HashSet<&str> = filtered.iter().map(|i| i.item.as_str()).collect();
    let items: Vec<Item> = report
        .items
        .into_iter()
        .filter(|i| kept.contains(i.item_id.as_str()))
        .collect();
    ensure_dir(out_items.parent().expect("data file has a parent"))?;
    write_items(&out_items, &items)?;
    prepend_header(&out_items, DATA_KIND, hash)?;
    write_interactions(&out_inter, &filtered)?;
    prepend_header(&out_inter, DATA_KIND, hash)?;
    say(
        "ingest",
        format!(
            "{} of {} interactions kept after {}-core filtering; {} items with metadata ({})",
            filtered.len(),
            interactions.len(),
            s.kcore,
            items.len(),
            hex(hash)
        ),
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// Shared loading

struct Loaded {
    data: SplitDataset,
    items: Vec<Item>,
}

fn load_data(s: &Settings, layout: &Layout) -> Result<Loaded, CliError> {
    let interactions = read_interactions(&layout.data_interactions())?;
    let data = build_splits(&interactions, s.max_len);
    if data.users.is_empty() {
        return Err(CliError::Core(ccfrec::Error::bad_artifact(
            layout.data_interactions(),
            "no user has three or more interactions".to_string(),
        )));
    }
    let report = ingest_items(&layout.data_items(), &s.fields)?;
    let (items, _) = align_items(&report.items, &data.item_vocab, &s.fields);
    Ok(Loaded { data, items })
}

fn load_embeddings(path: &Path, hash: u64, vocab: &[String], layout: &Layout, stage: &'static str) -> Result<RawEmbeddings, CliError> {
    if !path.exists() {
        return Err(missing(stage, format!("embedding cache {}", layout.show(path)), "embed"));
    }
    let (header, raw) = read_cache(path)?;
    if header.config_hash != hash {
        return Err(CliError::Core(ccfrec::Error::bad_artifact(path, "config hash mismatch".to_string())));
    }
    if raw.item_ids != vocab {
        return Err(CliError::Core(ccfrec::Error::bad_artifact(
            path,
            "item order differs from the ingested data".to_string(),
        )));
    }
    Ok(raw)
}

fn load_checkpoint(path: &Path, run_id: &str, layout: &Layout, stage: &'static str, hint: &str) -> Result<Checkpoint<f32>, CliError> {
    if !path.exists() {
        return Err(missing(stage, format!("checkpoint {}", layout.show(path)), hint));
    }
    let archive: TensorArchive<f32> = TensorArchive::load(path)?;
    if archive.meta["run_id"].as_str() != Some(run_id) {
        return Err(CliError::Core(ccfrec::Error::bad_artifact(
            path,
            "checkpoint belongs to a different run".to_string(),
        )));
    }
    Ok(Checkpoint::load(path)?)
}

fn save_checkpoint(ckpt: &Checkpoint<f32>, path: &Path, run_id: &str) -> Result<(), CliError> {
    let mut archive = ckpt.to_archive();
    if let Some(meta) = archive.meta.as_object_mut() {
        meta.insert("run_id".into(), json!(run_id));
    }
    archive.save(path)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// embed, quantize

pub fn embed(s: &Settings, layout: &Layout) -> Result<(), CliError> {
    let h = Hashes::derive(s, layout, "embed")?;
    let (multi, global) = (layout.embeddings(h.embed), layout.global_embeddings(h.embed));
    let up_to_date = |p: &Path| -> bool { read_cache(p).map(|(hd, _)| hd.config_hash == h.embed).unwrap_or(false) };
    if up_to_date(&multi) && up_to_date(&global) {
        say("embed", format!("up to date ({})", layout.show(&multi)));
        return Ok(());
    }
    let loaded = load_data(s, layout)?;
    let encoder = HashEncoder::new(s.encoder_dim, s.encoder_seed);
    let raw = encode_corpus(&loaded.items, &encoder)?;
    let glob = encode_global(&loaded.items, &encoder)?;
    ensure_dir(multi.parent().expect("cache has a parent"))?;
    write_cache(&multi, &raw, h.embed)?;
    write_cache(&global, &glob, h.embed)?;
    say(
        "embed",
        format!(
            "{} items x {} views x {} dims -> {}",
            raw.len(),
            raw.views,
            raw.dim(),
            layout.show(&multi)
        ),
    );
    Ok(())
}

pub fn quantize(s: &Settings, layout: &Layout) -> Result<(), CliError> {
    let h = Hashes::derive(s, layout, "quantize")?;
    let emb_path = layout.embeddings(h.embed);
    if !emb_path.exists() {
        return Err(missing("quantize", format!("embedding cache {}", layout.show(&emb_path)), "embed"));
    }
    let (codes_path, book_path) = (layout.codes(h.quantize), layout.codebook(h.quantize));
    let existing = read_codes(&codes_path).ok().map(|(hd, _)| hd.config_hash);
    if existing == Some(h.quantize) && book_path.exists() {
        say("quantize", format!("up to date ({})", layout.show(&codes_path)));
        return Ok(());
    }
    let (header, raw) = read_cache(&emb_path)?;
    if header.config_hash != h.embed {
        return Err(CliError::Core(ccfrec::Error::bad_artifact(&emb_path, "config hash mismatch".to_string())));
    }
    let book: Codebook<f32> = Codebook::fit(&raw, s.method, s.levels, s.codebook_size, s.quant_seed)?;
    let tuples = assign_codes(&raw, &book, &raw.item_ids)?;
    ensure_dir(codes_path.parent().expect("codes have a parent"))?;
    write_codes(
        &codes_path,
        &tuples,
        &CodesHeader {
            version: 1,
            config_hash: h.quantize,
            views: raw.views,
            levels: s.levels,
            size: s.codebook_size,
        },
    )?;
    write_codebook(&book_path, &book, h.quantize)?;
    say(
        "quantize",
        format!(
            "{} codes per item ({} views x {} {}) over {} entries -> {}",
            book.codes_per_item(),
            raw.views,
            s.levels,
            s.method,
            s.codebook_size,
            layout.show(&codes_path)
        ),
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train, finetune-ids

/// A stored JSON line, stamped with the format version and the run it
/// belongs to (the run id is the config hash of the run).
#[derive(Serialize)]
struct RunLine<'a, R> {
    version: u32,
    run_id: &'a str,
    #[serde(flatten)]
    record: &'a R,
}

fn write_run_outputs(dir: &Path, run_id: &str, outcome: &TrainOutcome<f32>) -> Result<(), CliError> {
    save_checkpoint(&outcome.best, &dir.join("best.ckpt"), run_id)?;
    save_checkpoint(&outcome.last, &dir.join("last.ckpt"), run_id)?;
    let path = dir.join("metrics.jsonl");
    let mut out = String::new();
    for r in &outcome.history {
        out.push_str(&serde_json::to_string(&RunLine { version: FORMAT_VERSION, run_id, record: r }).expect("records serialize"));
        out.push('\n');
    }
    fs::write(&path, out).map_err(|e| ccfrec::Error::io(&path, e))?;
    let summary = json!({
        "version": FORMAT_VERSION,
        "run_id": run_id,
        "best_epoch": outcome.best.epoch,
        "best_valid_ndcg10": outcome.best.best_valid_ndcg,
        "epochs": outcome.history.len(),
        "stop": outcome.stop,
    });
    let path = dir.join("summary.json");
    fs::write(&path, format!("{summary}\n")).map_err(|e| ccfrec::Error::io(&path, e))?;
    Ok(())
}

fn report_outcome(stage: &str, run_id: &str, outcome: &TrainOutcome<f32>) {
    say(
        stage,
        format!(
            "run {run_id}: {} epochs ({:?}), best epoch {} with valid NDCG@10 {:.4}",
            outcome.history.len(),
            outcome.stop,
            outcome.best.epoch,
            outcome.best.best_valid_ndcg
        ),
    );
}

pub fn train_stage(s: &Settings, layout: &Layout) -> Result<(), CliError> {
    let h = Hashes::derive(s, layout, "train")?;
    let cfg = s.train_config()?;
    let wiring = apply_ablation(&cfg.ablations);
    let run_id = h.run_id(s)?;
    let dir = layout.run_dir(&run_id);
    if dir.join("summary.json").exists() && dir.join("best.ckpt").exists() {
        say("train", format!("up to date ({})", layout.show(&dir)));
        return Ok(());
    }
    let loaded = load_data(s, layout)?;
    let vocab = &loaded.data.item_vocab;
    let raw = load_embeddings(&layout.embeddings(h.embed), h.embed, vocab, layout, "train")?;
    let text_raw = if wiring.global_text {
        load_embeddings(&layout.global_embeddings(h.embed), h.embed, vocab, layout, "train")?
    } else {
        raw.clone()
    };
    let tuples = if wiring.random_codes {
        random_codes(vocab, raw.views, s.levels, s.codebook_size, s.quant_seed)?
    } else {
        let path = layout.codes(h.quantize);
        if !path.exists() {
            return Err(missing("train", format!("codes {}", layout.show(&path)), "quantize"));
        }
        let (header, tuples) = read_codes(&path)?;
        if header.config_hash != h.quantize {
            return Err(CliError::Core(ccfrec::Error::bad_artifact(&path, "config hash mismatch".to_string())));
        }
        tuples
    };
    let by_id: HashMap<&str, &Vec<u32>> = tuples.iter().map(|t| (t.item_id.as_str(), &t.codes)).collect();
    let codes = vocab
        .iter()
        .map(|id| by_id.get(id.as_str()).map(|c| (*c).clone()).ok_or_else(|| ccfrec::Error::UnknownItem(id.clone())))
        .collect::<Result<Vec<_>, _>>()?;

    let prep = PrepConfig {
        fields: s.fields.clone(),
        max_len: s.max_len,
        encoder_dim: s.encoder_dim,
        encoder_seed: s.encoder_seed,
        method: s.method,
        levels: s.levels,
        codebook_size: s.codebook_size,
        quant_seed: s.quant_seed,
    };
    let prepared = Prepared {
        data: loaded.data,
        items: loaded.items,
        raw,
        text_raw,
        codes,
    };
    let mut model: Model32 = prepared.build_model(s.model_config(), &prep, &wiring, s.seed)?;
    say(
        "train",
        format!(
            "run {run_id}: {} items, {} users, {} parameters{}",
            model.num_items(),
            prepared.data.users.len(),
            model.params.scalar_count(),
            cfg.ablations.tag().map(|t| format!(", ablation {t}")).unwrap_or_default()
        ),
    );
    let outcome = train(&mut model, &prepared.data, &cfg, validation_ndcg(&prepared.data, cfg.exclude_seen))?;
    ensure_dir(&dir)?;
    let recorded = json!({ "version": FORMAT_VERSION, "run_id": run_id, "settings": s });
    fs::write(
        dir.join("settings.json"),
        serde_json::to_string_pretty(&recorded).expect("settings serialize"),
    )
    .map_err(|e| ccfrec::Error::io(&dir, e))?;
    write_run_outputs(&dir, &run_id, &outcome)?;
    report_outcome("train", &run_id, &outcome);
    Ok(())
}

fn resolve_run(s: &Settings, layout: &Layout, run: Option<&str>, stage: &'static str) -> Result<String, CliError> {
    match run {
        Some(r) => Ok(r.to_string()),
        None => Hashes::derive(s, layout, stage)?.run_id(s),
    }
}

/// Tag carried by metrics of the ID-augmented model.
fn finetune_tag(base: Option<String>) -> String {
    match base {
        Some(t) => format!("{t},add_item_id"),
        None => "add_item_id".into(),
    }
}

pub fn finetune_ids(s: &Settings, layout: &Layout, run: Option<&str>) -> Result<(), CliError> {
    let run_id = resolve_run(s, layout, run, "finetune-ids")?;
    let dir = layout.run_dir(&run_id);
    let out_dir = dir.join("finetune");
    if out_dir.join("summary.json").exists() {
        say("finetune-ids", format!("up to date ({})", layout.show(&out_dir)));
        return Ok(());
    }
    let base = load_checkpoint(&dir.join("best.ckpt"), &run_id, layout, "finetune-ids", "train")?;
    let loaded = load_data(s, layout)?;
    let mut cfg = s.train_config()?;
    cfg.max_epochs = s.finetune_epochs;
    let (_, outcome) = finetune_with_ids(&base.model, &loaded.data, &cfg, validation_ndcg(&loaded.data, cfg.exclude_seen))?;
    ensure_dir(&out_dir)?;
    write_run_outputs(&out_dir, &run_id, &outcome)?;
    report_outcome("finetune-ids", &run_id, &outcome);
    Ok(())
}

// ---------------------------------------------------------------------------
// eval, export-reps

pub fn eval(s: &Settings, layout: &Layout, run: Option<&str>, finetuned: bool) -> Result<(), CliError> {
    let run_id = resolve_run(s, layout, run, "eval")?;
    let dir = layout.run_dir(&run_id);
    let (ckpt_path, hint) = if finetuned {
        (dir.join("finetune").join("best.ckpt"), "finetune-ids")
    } else {
        (dir.join("best.ckpt"), "train")
    };
    let ckpt = load_checkpoint(&ckpt_path, &run_id, layout, "eval", hint)?;
    let loaded = load_data(s, layout)?;
    let base_tag = match recorded_tag(&dir) {
        Some(tag) => tag,
        None => s.ablations()?.tag(),
    };
    let tag = if finetuned { Some(finetune_tag(base_tag)) } else { base_tag };
    let (mut lines, mut stored) = (String::new(), String::new());
    for split in [Split::Valid, Split::Test] {
        let report = evaluate(&ckpt.model, &loaded.data, split, s.exclude_seen, &DEFAULT_KS)?;
        for record in report.records(tag.as_deref()) {
            lines.push_str(&serde_json::to_string(&record).expect("records serialize"));
            lines.push('\n');
            let line = RunLine { version: FORMAT_VERSION, run_id: &run_id, record: &record };
            stored.push_str(&serde_json::to_string(&line).expect("records serialize"));
            stored.push('\n');
        }
    }
    let path = dir.join(if finetuned { "eval_finetune.jsonl" } else { "eval.jsonl" });
    fs::write(&path, &stored).map_err(|e| ccfrec::Error::io(&path, e))?;
    // A closed pipe (`ccfrec eval | head`) is not an error.
    let mut out = std::io::stdout().lock();
    match out.write_all(lines.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(ccfrec::Error::io("<stdout>", e).into()),
        _ => Ok(()),
    }
}

/// Ablation tag recorded by the `train` stage, so that evaluation reports
/// what the run was actually trained with.
fn recorded_tag(dir: &Path) -> Option<Option<String>> {
    let text = fs::read_to_string(dir.join("settings.json")).ok()?;
    let value: serde_json::Value = serde_json::from_str(&text).ok()?;
    let set: ccfrec::trainer::AblationSet = value["settings"]["ablation"].as_str()?.parse().ok()?;
    Some(set.tag())
}

pub fn export_reps(s: &Settings, layout: &Layout, run: Option<&str>) -> Result<(), CliError> {
    let run_id = resolve_run(s, layout, run, "export-reps")?;
    let dir = layout.run_dir(&run_id);
    let path = dir.join("reps.bin");
    let hash = u64::from_str_radix(&run_id, 16).unwrap_or_else(|_| hash_parts(&[run_id.as_bytes()]));
    if matches!(read_rep_cache(&path), Ok((h, _)) if h == hash) {
        say("export-reps", format!("up to date ({})", layout.show(&path)));
        return Ok(());
    }
    let ckpt = load_checkpoint(&dir.join("best.ckpt"), &run_id, layout, "export-reps", "train")?;
    let loaded = load_data(s, layout)?;
    let cache = build_rep_cache(&ckpt.model, &loaded.data.item_vocab)?;
    cache.write(&path, hash)?;
    say(
        "export-reps",
        format!("{} x {} item vectors -> {}", cache.len(), cache.reps.cols(), layout.show(&path)),
    );
    Ok(())
}
