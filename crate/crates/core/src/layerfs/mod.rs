//! Static reconstruction of an image filesystem from its layer archives.
//!
//! Each layer is scanned once into [`FileRecord`]s (hashing regular file
//! content on the way), then the per-layer record lists are stacked base
//! first by [`compose`]. Deletions use the OCI whiteout encoding: a member
//! named `.wh.<name>` deletes `<name>` from lower layers, and
//! `.wh..wh..opq` hides every lower-layer entry of its directory.
//! Symlinks are recorded but never followed.

use std::collections::BTreeMap;
use std::io::{self, BufRead, Write};

use globset::{GlobBuilder, GlobSet, GlobSetBuilder};
use serde::{Deserialize, Serialize};

use crate::digest::Digest;

mod compose;
mod extract;
mod scan;

pub use compose::{compose, ComposeError};
pub use extract::{extract_files, ExtractError, ExtractedFile, LayerSource};
pub use scan::{scan_layer, scan_layer_capturing, LayerDiff, ScanError, ScanWarning};

pub const WHITEOUT_PREFIX: &str = ".wh.";
pub const OPAQUE_MARKER: &str = ".wh..wh..opq";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FileKind {
    Regular,
    Directory,
    Symlink,
    Hardlink,
    Whiteout,
    OpaqueWhiteout,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub kind: FileKind,
    pub size_bytes: u64,
    pub mode: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub link_target: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub content_hash: Option<Digest>,
    pub source_layer_digest: Digest,
    pub layer_index: usize,
}

impl FileRecord {
    pub fn is_regular(&self) -> bool {
        self.kind == FileKind::Regular
    }

    pub fn is_whiteout(&self) -> bool {
        matches!(self.kind, FileKind::Whiteout | FileKind::OpaqueWhiteout)
    }
}

/// Normalizes to a rooted path with single separators and no `.`/`..`
/// components. `..` at the root stays at the root.
pub fn normalize_path(p: &str) -> String {
    let mut parts: Vec<&str> = Vec::new();
    for c in p.split('/') {
        match c {
            "" | "." => {}
            ".." => {
                parts.pop();
            }
            c => parts.push(c),
        }
    }
    let mut out = String::with_capacity(p.len() + 1);
    for c in &parts {
        out.push('/');
        out.push_str(c);
    }
    if out.is_empty() {
        out.push('/');
    }
    out
}

/// Parent of a normalized path; `None` for the root.
pub fn parent_path(p: &str) -> Option<&str> {
    if p == "/" {
        return None;
    }
    match p.rfind('/') {
        Some(0) => Some("/"),
        Some(i) => Some(&p[..i]),
        None => None,
    }
}

/// A composed filesystem view: one record per path from the highest layer
/// touching it.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageFs {
    pub entries: BTreeMap<String, FileRecord>,
    pub layer_digests: Vec<Digest>,
}

impl ImageFs {
    pub fn get(&self, path: &str) -> Option<&FileRecord> {
        self.entries.get(path)
    }

    pub fn contains(&self, path: &str) -> bool {
        self.entries.contains_key(path)
    }

    pub fn regular_files(&self) -> impl Iterator<Item = &FileRecord> {
        self.entries.values().filter(|r| r.is_regular())
    }

    /// One JSON object per line, in path order.
    pub fn write_jsonl(&self, mut w: impl Write) -> io::Result<()> {
        for r in self.entries.values() {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl(r: impl BufRead, layer_digests: Vec<Digest>) -> io::Result<Self> {
        let mut entries = BTreeMap::new();
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: FileRecord = serde_json::from_str(&line)?;
            entries.insert(rec.path.clone(), rec);
        }
        Ok(ImageFs { entries, layer_digests })
    }
}

/// Glob matcher over absolute paths; `*` does not cross `/`, `**` does.
#[derive(Debug, Clone)]
pub struct PathMatcher {
    set: GlobSet,
}

impl PathMatcher {
    pub fn new<S: AsRef<str>>(patterns: &[S]) -> Result<Self, globset::Error> {
        let mut b = GlobSetBuilder::new();
        for p in patterns {
            b.add(GlobBuilder::new(p.as_ref()).literal_separator(true).build()?);
        }
        Ok(PathMatcher { set: b.build()? })
    }

    pub fn is_match(&self, path: &str) -> bool {
        self.set.is_match(path)
    }

    pub fn is_empty(&self) -> bool {
        self.set.is_empty()
    }
}
