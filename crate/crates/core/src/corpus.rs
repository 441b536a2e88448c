//! Item metadata and interaction-log ingestion, k-core filtering and the
//! leave-one-out split.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Attribute fields, in the order every item stores them.
pub const DEFAULT_FIELDS: [&str; 5] = ["title", "brand", "categories", "features", "description"];

/// Attribute texts are cut to this many whitespace tokens.
pub const MAX_ATTRIBUTE_TOKENS: usize = 512;

/// Longest prefix the model ever sees.
pub const DEFAULT_MAX_LEN: usize = 20;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Item {
    pub item_id: String,
    /// `(field, text)` pairs in the corpus-wide field order.
    pub attributes: Vec<(String, String)>,
}

impl Item {
    pub fn empty(item_id: impl Into<String>, fields: &[String]) -> Self {
        Self {
            item_id: item_id.into(),
            attributes: fields.iter().map(|f| (f.clone(), String::new())).collect(),
        }
    }

    pub fn attribute(&self, field: &str) -> Option<&str> {
        self.attributes
            .iter()
            .find(|(f, _)| f == field)
            .map(|(_, t)| t.as_str())
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.attributes.iter().map(|(_, t)| t.as_str())
    }

    /// All attribute texts joined, used for the single-embedding ablation.
    pub fn concatenated_text(&self) -> String {
        self.texts()
            .filter(|t| !t.is_empty())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IngestReport {
    pub items: Vec<Item>,
    /// Records rejected because they carried no `item_id`.
    pub skipped: usize,
}

/// Keeps at most `max_tokens` whitespace-separated tokens.
pub fn truncate_tokens(text: &str, max_tokens: usize) -> String {
    let mut tokens = text.split_whitespace();
    let head: Vec<&str> = tokens.by_ref().take(max_tokens).collect();
    if tokens.next().is_none() {
        text.to_string()
    } else {
        head.join(" ")
    }
}

fn field_text(value: &serde_json::Value) -> String {
    match value {
        serde_json::Value::Null => String::new(),
        serde_json::Value::String(s) => s.clone(),
        serde_json::Value::Array(parts) => parts
            .iter()
            .map(field_text)
            .filter(|s| !s.is_empty())
            .collect::<Vec<_>>()
            .join(", "),
        other => other.to_string(),
    }
}

/// Blank lines and `#` header lines carry no records.
fn is_blank_or_comment(line: &str) -> bool {
    let t = line.trim_start();
    t.is_empty() || t.starts_with('#')
}

/// Reads line-delimited JSON item records. Blank and `#` lines are skipped.
pub fn ingest_items(path: &Path, field_names: &[String]) -> Result<IngestReport> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_items(BufReader::new(file), path, field_names)
}

pub fn parse_items<R: BufRead>(reader: R, path: &Path, field_names: &[String]) -> Result<IngestReport> {
    if field_names.is_empty() {
        return Err(Error::InvalidArgument("at least one attribute field is required".into()));
    }
    let mut items = Vec::new();
    let mut seen = HashSet::new();
    let mut skipped = 0;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if is_blank_or_comment(&line) {
            continue;
        }
        let record: serde_json::Value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            reason: e.to_string(),
        })?;
        let id = match record.get("item_id").map(field_text) {
            Some(id) if !id.is_empty() => id,
            _ => {
                skipped += 1;
                continue;
            }
        };
        if !seen.insert(id.clone()) {
            return Err(Error::DuplicateItem(id));
        }
        let attributes = field_names
            .iter()
            .map(|f| {
                let text = record.get(f.as_str()).map(field_text).unwrap_or_default();
                (f.clone(), truncate_tokens(&text, MAX_ATTRIBUTE_TOKENS))
            })
            .collect();
        items.push(Item {
            item_id: id,
            attributes,
        });
    }
    if skipped > 0 {
        warn!("{}: skipped {skipped} records without item_id", path.display());
    }
    Ok(IngestReport { items, skipped })
}

pub fn write_items(path: &Path, items: &[Item]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        let mut obj = serde_json::Map::new();
        obj.insert("item_id".into(), item.item_id.clone().into());
        for (f, t) in &item.attributes {
            obj.insert(f.clone(), t.clone().into());
        }
        let line = serde_json::Value::Object(obj).to_string();
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub user: String,
    pub item: String,
    pub timestamp: i64,
}

impl Interaction {
    pub fn new(user: impl Into<String>, item: impl Into<String>, timestamp: i64) -> Self {
        Self {
            user: user.into(),
            item: item.into(),
            timestamp,
        }
    }
}

/// Reads `user \t item \t timestamp` lines. Blank and `#` lines are skipped.
pub fn read_interactions(path: &Path) -> Result<Vec<Interaction>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if is_blank_or_comment(&line) {
            continue;
        }
        let parse_err = |reason: &str| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            reason: reason.to_string(),
        };
        let mut parts = line.split('\t');
        let (Some(user), Some(item), Some(ts), None) =
            (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(parse_err("expected three tab-separated columns"));
        };
        let timestamp = ts
            .trim()
            .parse::<i64>()
            .map_err(|_| parse_err("timestamp is not an integer"))?;
        out.push(Interaction::new(user, item, timestamp));
    }
    Ok(out)
}

pub fn write_interactions(path: &Path, interactions: &[Interaction]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for it in interactions {
        writeln!(w, "{}\t{}\t{}", it.user, it.item, it.timestamp).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Iteratively drops users and items with fewer than `k` interactions until
/// nothing changes. Input order is preserved.
pub fn k_core_filter(interactions: &[Interaction], k: usize) -> Vec<Interaction> {
    assert!(k >= 1, "k-core needs k >= 1");
    let mut kept: Vec<&Interaction> = interactions.iter().collect();
    loop {
        let mut user_counts: HashMap<&str, usize> = HashMap::new();
        let mut item_counts: HashMap<&str, usize> = HashMap::new();
        for it in &kept {
            *user_counts.entry(it.user.as_str()).or_default() += 1;
            *item_counts.entry(it.item.as_str()).or_default() += 1;
        }
        let before = kept.len();
        kept.retain(|it| user_counts[it.user.as_str()] >= k && item_counts[it.item.as_str()] >= k);
        if kept.len() == before {
            break;
        }
    }
    kept.into_iter().cloned().collect()
}

/// One user's chronologically ordered history.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionSequence {
    pub user_id: String,
    pub items: Vec<String>,
    pub timestamps: Vec<i64>,
}

/// A next-item prediction instance; item values index `item_vocab`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub user: usize,
    pub prefix: Vec<usize>,
    pub target: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitDataset {
    pub item_vocab: Vec<String>,
    pub users: Vec<String>,
    /// Full chronological history per user (indices into `item_vocab`).
    pub histories: Vec<Vec<usize>>,
    pub max_len: usize,
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
    pub test: Vec<Example>,
    /// Users dropped for having fewer than three interactions.
    pub skipped_users: usize,
}

/// A causal training window: position `p` of `inputs` sees `inputs[..=p]`.
///
/// Each `(position, target)` pair is exactly one train [`Example`] whose
/// prefix is `inputs[..=position]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainWindow {
    pub user: usize,
    pub inputs: Vec<usize>,
    pub targets: Vec<(usize, usize)>,
}

fn truncated(prefix: &[usize], max_len: usize) -> Vec<usize> {
    prefix[prefix.len().saturating_sub(max_len)..].to_vec()
}

/// Groups interactions by user (stable by input order on timestamp ties)
/// and produces the leave-one-out split.
pub fn group_sequences(interactions: &[Interaction]) -> Vec<InteractionSequence> {
    let mut by_user: BTreeMap<&str, Vec<(i64, &str)>> = BTreeMap::new();
    for it in interactions {
        by_user
            .entry(it.user.as_str())
            .or_default()
            .push((it.timestamp, it.item.as_str()));
    }
    by_user
        .into_iter()
        .map(|(user, mut events)| {
            events.sort_by_key(|&(ts, _)| ts);
            InteractionSequence {
                user_id: user.to_string(),
                items: events.iter().map(|&(_, i)| i.to_string()).collect(),
                timestamps: events.iter().map(|&(t, _)| t).collect(),
            }
        })
        .collect()
}

pub fn build_splits(interactions: &[Interaction], max_len: usize) -> SplitDataset {
    assert!(max_len >= 1, "max_len must be positive");
    let sequences = group_sequences(interactions);
    let mut skipped_users = 0;
    let kept: Vec<&InteractionSequence> = sequences
        .iter()
        .filter(|s| {
            let ok = s.items.len() >= 3;
            if !ok {
                skipped_users += 1;
            }
            ok
        })
        .collect();
    if skipped_users > 0 {
        warn!("excluded {skipped_users} users with fewer than 3 interactions");
    }

    let vocab: Vec<String> = kept
        .iter()
        .flat_map(|s| s.items.iter().cloned())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let index: HashMap<&str, usize> = vocab.iter().enumerate().map(|(i, v)| (v.as_str(), i)).collect();

    let mut ds = SplitDataset {
        item_vocab: vocab.clone(),
        users: Vec::new(),
        histories: Vec::new(),
        max_len,
        train: Vec::new(),
        valid: Vec::new(),
        test: Vec::new(),
        skipped_users,
    };
    for seq in kept {
        let user = ds.users.len();
        ds.users.push(seq.user_id.clone());
        let h: Vec<usize> = seq.items.iter().map(|i| index[i.as_str()]).collect();
        let n = h.len();
        for j in 1..n - 2 {
            ds.train.push(Example {
                user,
                prefix: truncated(&h[..j], max_len),
                target: h[j],
            });
        }
        ds.valid.push(Example {
            user,
            prefix: truncated(&h[..n - 2], max_len),
            target: h[n - 2],
        });
        ds.test.push(Example {
            user,
            prefix: truncated(&h[..n - 1], max_len),
            target: h[n - 1],
        });
        ds.histories.push(h);
    }
    ds
}

impl SplitDataset {
    pub fn num_items(&self) -> usize {
        self.item_vocab.len()
    }

    pub fn item_index(&self) -> HashMap<&str, usize> {
        self.item_vocab
            .iter()
            .enumerate()
            .map(|(i, v)| (v.as_str(), i))
            .collect()
    }

    /// Train examples regrouped into the fewest causal windows that reproduce
    /// every prefix exactly.
    pub fn train_windows(&self) -> Vec<TrainWindow> {
        let mut out = Vec::new();
        for (user, h) in self.histories.iter().enumerate() {
            let n = h.len();
            if n < 4 {
                continue;
            }
            let last_target = n - 3;
            let shared = last_target.min(self.max_len);
            out.push(TrainWindow {
                user,
                inputs: h[..shared].to_vec(),
                targets: (1..=shared).map(|j| (j - 1, h[j])).collect(),
            });
            for j in shared + 1..=last_target {
                let inputs = h[j - self.max_len..j].to_vec();
                out.push(TrainWindow {
                    user,
                    targets: vec![(inputs.len() - 1, h[j])],
                    inputs,
                });
            }
        }
        out
    }

    /// Items each user interacted with before the target of `example`.
    pub fn seen_before(&self, example: &Example, split: Split) -> HashSet<usize> {
        let h = &self.histories[example.user];
        let upto = match split {
            Split::Test => h.len() - 1,
            Split::Valid => h.len() - 2,
            Split::Train => h.len() - 2,
        };
        h[..upto].iter().copied().collect()
    }

    pub fn examples(&self, split: Split) -> &[Example] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

/// Aligns item metadata with the split vocabulary, dropping items outside it.
/// Vocabulary items without metadata get empty attributes.
pub fn align_items(items: &[Item], vocab: &[String], fields: &[String]) -> (Vec<Item>, usize) {
    let by_id: HashMap<&str, &Item> = items.iter().map(|i| (i.item_id.as_str(), i)).collect();
    let mut missing = 0;
    let aligned = vocab
        .iter()
        .map(|id| match by_id.get(id.as_str()) {
            Some(item) => (*item).clone(),
            None => {
                missing += 1;
                Item::empty(id.clone(), fields)
            }
        })
        .collect();
    if missing > 0 {
        warn!("{missing} interacted items have no metadata; using empty attributes");
    }
    (aligned, missing)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Cursor;

    fn fields() -> Vec<String> {
        DEFAULT_FIELDS.iter().map(|s| s.to_string()).collect()
    }

    fn parse(text: &str) -> Result<IngestReport> {
        parse_items(Cursor::new(text.to_string()), Path::new("items.jsonl"), &fields())
    }

    #[test]
    fn missing_fields_default_to_empty() {
        let report = parse(r#"{"item_id":"A","title":"guitar"}"#).unwrap();
        let item = &report.items[0];
        assert_eq!(item.attributes.len(), 5);
        assert_eq!(item.attribute("title"), Some("guitar"));
        assert_eq!(item.texts().filter(|t| t.is_empty()).count(), 4);
    }

    #[test]
    fn long_attribute_is_cut_to_512_tokens() {
        let desc = (0..513).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ");
        let line = serde_json::json!({"item_id": "A", "description": desc}).to_string();
        let report = parse(&line).unwrap();
        let d = report.items[0].attribute("description").unwrap();
        assert_eq!(d.split_whitespace().count(), 512);
        assert!(d.ends_with("w511"));
    }

    #[test]
    fn duplicate_ids_reject_the_file() {
        let err = parse("{\"item_id\":\"A\"}\n{\"item_id\":\"A\",\"title\":\"x\"}").unwrap_err();
        assert!(matches!(err, Error::DuplicateItem(id) if id == "A"));
    }

    #[test]
    fn records_without_id_are_counted_and_skipped() {
        let report = parse("{\"title\":\"x\"}\n{\"item_id\":\"B\"}\n{\"item_id\":\"\"}").unwrap();
        assert_eq!(report.items.len(), 1);
        assert_eq!(report.skipped, 2);
    }

    #[test]
    fn list_fields_are_joined_with_commas() {
        let report = parse(r#"{"item_id":"A","categories":["Music","Guitars"]}"#).unwrap();
        assert_eq!(report.items[0].attribute("categories"), Some("Music, Guitars"));
    }

    fn log(rows: &[(&str, &str)]) -> Vec<Interaction> {
        rows.iter()
            .enumerate()
            .map(|(t, (u, i))| Interaction::new(*u, *i, t as i64))
            .collect()
    }

    #[test]
    fn k_core_peels_iteratively() {
        // Users u1..u5 each touch items a,b; u6 touches only a once. With k=2:
        // u6 goes (1 interaction); a still has 5. Item c is touched by u1 only,
        // so c goes, which leaves u1 with a,b (still >= 2).
        let mut rows = vec![];
        for u in ["u1", "u2", "u3", "u4", "u5"] {
            rows.push((u, "a"));
            rows.push((u, "b"));
        }
        rows.push(("u6", "a"));
        rows.push(("u1", "c"));
        let input = log(&rows);
        let out = k_core_filter(&input, 2);
        assert_eq!(out.len(), 10);
        assert!(out.iter().all(|i| i.user != "u6" && i.item != "c"));
    }

    #[test]
    fn k_core_cascades() {
        // d is only used by u6 and u7 (2 times). u7 has one other interaction
        // (with a). With k=3: d < 3 goes; then u6 (d only) vanishes, u7 keeps a
        // alone (1 < 3) and goes; a had 5+1 -> 5 >= 3 stays.
        let mut rows = vec![];
        for u in ["u1", "u2", "u3", "u4", "u5"] {
            rows.extend([(u, "a"), (u, "b"), (u, "e")]);
        }
        rows.extend([("u6", "d"), ("u7", "d"), ("u7", "a")]);
        let out = k_core_filter(&log(&rows), 3);
        assert_eq!(out.len(), 15);
        assert!(out.iter().all(|i| i.user != "u6" && i.user != "u7"));
    }

    #[test]
    fn one_core_is_identity() {
        let input = log(&[("u1", "a"), ("u2", "b"), ("u2", "a")]);
        assert_eq!(k_core_filter(&input, 1), input);
    }

    #[test]
    fn leave_one_out_on_four_items() {
        let input = log(&[("u", "a"), ("u", "b"), ("u", "c"), ("u", "d")]);
        let ds = build_splits(&input, 20);
        let id = |s: &str| ds.item_vocab.iter().position(|v| v == s).unwrap();
        assert_eq!(ds.test[0].prefix, vec![id("a"), id("b"), id("c")]);
        assert_eq!(ds.test[0].target, id("d"));
        assert_eq!(ds.valid[0].prefix, vec![id("a"), id("b")]);
        assert_eq!(ds.valid[0].target, id("c"));
        assert_eq!(ds.train.len(), 1);
        assert_eq!(ds.train[0].prefix, vec![id("a")]);
        assert_eq!(ds.train[0].target, id("b"));
    }

    #[test]
    fn three_item_user_has_no_disjoint_train_target() {
        let input = log(&[("u", "a"), ("u", "b"), ("u", "c")]);
        let ds = build_splits(&input, 20);
        assert!(ds.train.is_empty());
        assert_eq!(ds.valid[0].prefix.len(), 1);
    }

    #[test]
    fn short_users_are_skipped() {
        let input = log(&[("u", "a"), ("u", "b"), ("v", "a"), ("v", "b"), ("v", "c")]);
        let ds = build_splits(&input, 20);
        assert_eq!(ds.skipped_users, 1);
        assert_eq!(ds.users, vec!["v".to_string()]);
    }

    #[test]
    fn long_history_keeps_most_recent_twenty() {
        let rows: Vec<(String, String)> = (0..25).map(|i| ("u".to_string(), format!("i{i:02}"))).collect();
        let input: Vec<Interaction> = rows
            .iter()
            .enumerate()
            .map(|(t, (u, i))| Interaction::new(u.as_str(), i.as_str(), t as i64))
            .collect();
        let ds = build_splits(&input, 20);
        let ids: Vec<&str> = ds.test[0].prefix.iter().map(|&i| ds.item_vocab[i].as_str()).collect();
        let expect: Vec<String> = (4..24).map(|i| format!("i{i:02}")).collect();
        assert_eq!(ids, expect);
    }

    #[test]
    fn equal_timestamps_keep_input_order() {
        let input = vec![
            Interaction::new("u", "z", 5),
            Interaction::new("u", "a", 5),
            Interaction::new("u", "m", 1),
        ];
        let seqs = group_sequences(&input);
        assert_eq!(seqs[0].items, vec!["m", "z", "a"]);
    }

    #[test]
    fn windows_reproduce_train_examples() {
        let rows: Vec<Interaction> = (0..30)
            .map(|t| Interaction::new("u", format!("i{}", t % 11), t))
            .chain((0..6).map(|t| Interaction::new("v", format!("i{t}"), t)))
            .collect();
        let ds = build_splits(&rows, 5);
        let mut from_windows = vec![];
        for w in ds.train_windows() {
            for &(p, target) in &w.targets {
                from_windows.push(Example {
                    user: w.user,
                    prefix: w.inputs[..=p].to_vec(),
                    target,
                });
            }
        }
        assert_eq!(from_windows, ds.train);
    }

    fn arb_log() -> impl Strategy<Value = Vec<Interaction>> {
        prop::collection::vec((0u8..12, 0u8..9, 0i64..50), 0..120).prop_map(|rows| {
            rows.into_iter()
                .map(|(u, i, t)| Interaction::new(format!("u{u}"), format!("i{i}"), t))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn k_core_output_satisfies_threshold_and_is_idempotent(log in arb_log(), k in 1usize..5) {
            let once = k_core_filter(&log, k);
            let mut users: HashMap<&str, usize> = HashMap::new();
            let mut items: HashMap<&str, usize> = HashMap::new();
            for it in &once {
                *users.entry(&it.user).or_default() += 1;
                *items.entry(&it.item).or_default() += 1;
            }
            prop_assert!(users.values().all(|&c| c >= k));
            prop_assert!(items.values().all(|&c| c >= k));
            prop_assert_eq!(k_core_filter(&once, k), once);
        }

        #[test]
        fn splits_are_disjoint_and_cover_last_two(log in arb_log()) {
            let ds = build_splits(&log, 4);
            for (u, h) in ds.histories.iter().enumerate() {
                let n = h.len();
                let test = ds.test.iter().find(|e| e.user == u).unwrap();
                let valid = ds.valid.iter().find(|e| e.user == u).unwrap();
                prop_assert_eq!(test.target, h[n - 1]);
                prop_assert_eq!(valid.target, h[n - 2]);
                let train_count = ds.train.iter().filter(|e| e.user == u).count();
                prop_assert_eq!(train_count, n - 3);
                // Truncation keeps the most recent items.
                prop_assert_eq!(&test.prefix[..], &h[(n - 1).saturating_sub(4)..n - 1]);
            }
        }
    }
}
