use std::collections::BTreeMap;

use super::{parent_path, FileKind, FileRecord, ImageFs, LayerDiff};
use crate::digest::Digest;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ComposeError {
    #[error("layer {layer} ({digest}) contains a whiteout of the root directory")]
    WhiteoutOfRoot { layer: usize, digest: Digest },
}

fn remove_subtree(entries: &mut BTreeMap<String, FileRecord>, dir: &str) {
    let prefix = if dir == "/" { "/".to_string() } else { format!("{dir}/") };
    let doomed: Vec<String> = entries
        .range(prefix.clone()..)
        .take_while(|(k, _)| k.starts_with(&prefix))
        .map(|(k, _)| k.clone())
        .collect();
    for k in doomed {
        entries.remove(&k);
    }
}

fn implied_dir(path: &str, digest: &Digest, index: usize) -> FileRecord {
    FileRecord {
        path: path.to_string(),
        kind: FileKind::Directory,
        size_bytes: 0,
        mode: 0o755,
        link_target: None,
        content_hash: None,
        source_layer_digest: digest.clone(),
        layer_index: index,
    }
}

/// Ensures every ancestor of `path` is a directory, replacing non-directory
/// ancestors.
fn ensure_ancestors(entries: &mut BTreeMap<String, FileRecord>, path: &str, digest: &Digest, index: usize) {
    let mut ancestors = Vec::new();
    let mut cur = parent_path(path);
    while let Some(p) = cur {
        if p == "/" {
            break;
        }
        ancestors.push(p);
        cur = parent_path(p);
    }
    for a in ancestors.into_iter().rev() {
        match entries.get(a) {
            Some(r) if r.kind == FileKind::Directory => {}
            _ => {
                entries.insert(a.to_string(), implied_dir(a, digest, index));
            }
        }
    }
}

/// Stacks layer diffs (base first) into one filesystem view.
///
/// Within each layer, opaque markers and whiteouts apply to the lower layers
/// first, then members are added in archive order so a repeated path keeps
/// its last occurrence. Layer indices and source digests are taken from the
/// position of each diff in `layers`.
pub fn compose(layers: &[LayerDiff]) -> Result<ImageFs, ComposeError> {
    let mut entries: BTreeMap<String, FileRecord> = BTreeMap::new();

    for (index, layer) in layers.iter().enumerate() {
        let digest = &layer.digest;
        for r in layer.records.iter().filter(|r| r.kind == FileKind::OpaqueWhiteout) {
            remove_subtree(&mut entries, &r.path);
            if r.path != "/" {
                ensure_ancestors(&mut entries, &r.path, digest, index);
                // the marker's layer now owns the directory
                let dir = match entries.get(&r.path) {
                    Some(e) if e.kind == FileKind::Directory => FileRecord {
                        layer_index: index,
                        source_layer_digest: digest.clone(),
                        ..e.clone()
                    },
                    _ => implied_dir(&r.path, digest, index),
                };
                entries.insert(r.path.clone(), dir);
            }
        }
        for r in layer.records.iter().filter(|r| r.kind == FileKind::Whiteout) {
            if r.path == "/" {
                return Err(ComposeError::WhiteoutOfRoot {
                    layer: index,
                    digest: digest.clone(),
                });
            }
            entries.remove(&r.path);
            remove_subtree(&mut entries, &r.path);
        }
        for r in layer.records.iter().filter(|r| !r.is_whiteout()) {
            if r.path == "/" {
                continue;
            }
            ensure_ancestors(&mut entries, &r.path, digest, index);
            if r.kind != FileKind::Directory {
                remove_subtree(&mut entries, &r.path);
            }
            let mut rec = r.clone();
            rec.layer_index = index;
            rec.source_layer_digest = digest.clone();
            entries.insert(rec.path.clone(), rec);
        }
    }

    Ok(ImageFs {
        entries,
        layer_digests: layers.iter().map(|l| l.digest.clone()).collect(),
    })
}
