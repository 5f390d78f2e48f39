use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;

use super::scan::decompressed;
use super::{normalize_path, FileKind, FileRecord, ImageFs};
use crate::digest::{Digest, HashingReader};
use crate::store::LayerStore;

#[derive(Debug, thiserror::Error)]
pub enum ExtractError {
    #[error("layer {0} is not available")]
    LayerUnavailable(Digest),
    #[error("failed reading layer {digest}: {message}")]
    Read { digest: Digest, message: String },
}

/// Something that can hand out layer blobs by digest.
pub trait LayerSource {
    fn open_layer(&self, digest: &Digest) -> Option<Box<dyn Read + Send>>;
}

impl LayerSource for LayerStore {
    fn open_layer(&self, digest: &Digest) -> Option<Box<dyn Read + Send>> {
        self.get_layer(digest)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtractedFile {
    pub record: FileRecord,
    /// `None` for symlinks and unresolved hardlinks, which are never followed.
    pub content: Option<Vec<u8>>,
    pub note: Option<String>,
}

/// Pulls the content of every matching regular file out of the layer that
/// supplied it. Only the source layers of matching records are read.
pub fn extract_files(
    fs: &ImageFs,
    matches: &dyn Fn(&str) -> bool,
    source: &dyn LayerSource,
) -> Result<Vec<ExtractedFile>, ExtractError> {
    let selected: Vec<&FileRecord> = fs
        .entries
        .values()
        .filter(|r| r.kind != FileKind::Directory && matches(&r.path))
        .collect();

    // layer -> paths whose bytes we need from it
    let mut wanted: BTreeMap<&Digest, BTreeSet<String>> = BTreeMap::new();
    for r in selected.iter().filter(|r| r.is_regular()) {
        let set = wanted.entry(&r.source_layer_digest).or_default();
        set.insert(r.path.clone());
        if let Some(t) = &r.link_target {
            set.insert(t.clone());
        }
    }

    let mut contents: BTreeMap<(&Digest, String), Vec<u8>> = BTreeMap::new();
    for (digest, paths) in &wanted {
        let blob = source
            .open_layer(digest)
            .ok_or_else(|| ExtractError::LayerUnavailable((*digest).clone()))?;
        let read_err = |e: &dyn std::fmt::Display| ExtractError::Read {
            digest: (*digest).clone(),
            message: e.to_string(),
        };
        let input = decompressed(blob).map_err(|e| read_err(&e))?;
        let mut archive = tar::Archive::new(input);
        for entry in archive.entries().map_err(|e| read_err(&e))? {
            let mut entry = entry.map_err(|e| read_err(&e))?;
            let path = normalize_path(&entry.path().map_err(|e| read_err(&e))?.to_string_lossy());
            if !paths.contains(&path) {
                continue;
            }
            let mut buf = Vec::new();
            entry.read_to_end(&mut buf).map_err(|e| read_err(&e))?;
            contents.insert((*digest, path), buf);
        }
    }

    let mut out = Vec::with_capacity(selected.len());
    for r in selected {
        let (content, note) = match r.kind {
            FileKind::Regular => {
                let key_path = match &r.link_target {
                    Some(t) => t.clone(),
                    None => r.path.clone(),
                };
                let data = contents
                    .get(&(&r.source_layer_digest, key_path))
                    .or_else(|| contents.get(&(&r.source_layer_digest, r.path.clone())))
                    .cloned();
                match data {
                    Some(d) => {
                        let mut h = HashingReader::new(&d[..]);
                        std::io::copy(&mut h, &mut std::io::sink()).ok();
                        if Some(h.finish().0) == r.content_hash {
                            (Some(d), None)
                        } else {
                            (None, Some("content does not match recorded hash".to_string()))
                        }
                    }
                    None => (None, Some("member missing from source layer".to_string())),
                }
            }
            FileKind::Symlink => (
                None,
                Some(format!(
                    "symlink to {} not followed",
                    r.link_target.as_deref().unwrap_or("?")
                )),
            ),
            _ => (None, Some(format!("{:?} has no content", r.kind))),
        };
        out.push(ExtractedFile {
            record: r.clone(),
            content,
            note,
        });
    }
    Ok(out)
}
