//! Content hashes, header lines and the work-directory layout.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

pub const FORMAT_VERSION: u32 = 1;

/// First eight bytes of the SHA-256 of `parts`, each length-prefixed so that
/// concatenation boundaries matter.
pub fn hash_parts(parts: &[&[u8]]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    let digest = h.finalize();
    u64::from_be_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Hash of a value's canonical JSON form.
pub fn hash_json<T: Serialize>(value: &T) -> u64 {
    let text = serde_json::to_vec(value).expect("settings serialize to JSON");
    hash_parts(&[&text])
}

pub fn hex(hash: u64) -> String {
    format!("{hash:016x}")
}

/// `# ccfrec-<kind> version=1 config_hash=<hex>`.
pub fn header_line(kind: &str, hash: u64) -> String {
    format!("# ccfrec-{kind} version={FORMAT_VERSION} config_hash={}", hex(hash))
}

/// The config hash in the header of a text artifact, `None` if the file does
/// not exist. A file without a valid header of the right kind is an error.
pub fn read_header(path: &Path, kind: &str) -> Result<Option<u64>, CliError> {
    let file = match fs::File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(ccfrec::Error::io(path, e).into()),
    };
    let mut first = String::new();
    BufReader::new(file)
        .read_line(&mut first)
        .map_err(|e| ccfrec::Error::io(path, e))?;
    let bad = |reason: &str| CliError::Core(ccfrec::Error::bad_artifact(path, reason.to_string()));
    let mut words = first.split_whitespace();
    if words.next() != Some("#") || words.next() != Some(&format!("ccfrec-{kind}")) {
        return Err(bad(&format!("missing ccfrec-{kind} header")));
    }
    if words.next() != Some(&format!("version={FORMAT_VERSION}")) {
        return Err(bad("unsupported format version"));
    }
    words
        .next()
        .and_then(|w| w.strip_prefix("config_hash="))
        .and_then(|h| u64::from_str_radix(h, 16).ok())
        .map(Some)
        .ok_or_else(|| bad("missing config hash"))
}

/// Rewrites `path` with a header line in front of its current contents.
pub fn prepend_header(path: &Path, kind: &str, hash: u64) -> Result<(), CliError> {
    let body = fs::read(path).map_err(|e| ccfrec::Error::io(path, e))?;
    let mut out = header_line(kind, hash).into_bytes();
    out.push(b'\n');
    out.extend_from_slice(&body);
    fs::write(path, out).map_err(|e| ccfrec::Error::io(path, e))?;
    Ok(())
}

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| ccfrec::Error::io(dir, e))?;
    Ok(())
}

/// Where each stage puts its outputs under the work directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    pub fn data_items(&self) -> PathBuf {
        self.root.join("data").join("items.jsonl")
    }

    pub fn data_interactions(&self) -> PathBuf {
        self.root.join("data").join("interactions.tsv")
    }

    pub fn embeddings(&self, hash: u64) -> PathBuf {
        self.root.join("embed").join(format!("{}.emb", hex(hash)))
    }

    pub fn global_embeddings(&self, hash: u64) -> PathBuf {
        self.root.join("embed").join(format!("{}.global.emb", hex(hash)))
    }

    pub fn codes(&self, hash: u64) -> PathBuf {
        self.root.join("quantize").join(format!("{}.codes", hex(hash)))
    }

    pub fn codebook(&self, hash: u64) -> PathBuf {
        self.root.join("quantize").join(format!("{}.codebook", hex(hash)))
    }

    pub fn run_dir(&self, run_id: &str) -> PathBuf {
        self.root.join("runs").join(run_id)
    }

    /// Path relative to the work directory, for messages.
    pub fn show(&self, path: &Path) -> String {
        path.strip_prefix(&self.root).unwrap_or(path).display().to_string()
    }
}
