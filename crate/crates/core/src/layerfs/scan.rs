use std::collections::BTreeMap;
use std::io::{self, BufRead, BufReader, Read};

use flate2::read::GzDecoder;
use serde::{Deserialize, Serialize};
use tar::EntryType;

use super::{normalize_path, parent_path, FileKind, FileRecord, OPAQUE_MARKER, WHITEOUT_PREFIX};
use crate::digest::{Digest, HashingReader};

#[derive(Debug, thiserror::Error)]
pub enum ScanError {
    #[error("corrupt archive near byte {position} (member {member}): {message}")]
    CorruptArchive {
        position: u64,
        member: usize,
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanWarning {
    pub position: u64,
    pub path: String,
    pub message: String,
}

/// Records of one layer in archive order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerDiff {
    pub digest: Digest,
    pub records: Vec<FileRecord>,
    pub warnings: Vec<ScanWarning>,
}

impl LayerDiff {
    pub fn new(digest: Digest, records: Vec<FileRecord>) -> Self {
        LayerDiff {
            digest,
            records,
            warnings: Vec::new(),
        }
    }
}

/// Opens a possibly gzip-compressed stream, deciding by magic bytes.
pub(crate) fn decompressed(reader: impl Read + 'static) -> io::Result<Box<dyn Read>> {
    let mut buf = BufReader::new(reader);
    let head = buf.fill_buf()?;
    if head.len() >= 2 && head[0] == 0x1f && head[1] == 0x8b {
        Ok(Box::new(GzDecoder::new(buf)))
    } else {
        Ok(Box::new(buf))
    }
}

pub fn scan_layer(reader: impl Read + 'static, digest: &Digest) -> Result<LayerDiff, ScanError> {
    scan_layer_capturing(reader, digest, &|_| false, 0).map(|(d, _)| d)
}

/// Scans a layer and also keeps the content of regular files whose path
/// satisfies `capture` (files larger than `max_capture` bytes are skipped).
pub fn scan_layer_capturing(
    reader: impl Read + 'static,
    digest: &Digest,
    capture: &dyn Fn(&str) -> bool,
    max_capture: u64,
) -> Result<(LayerDiff, BTreeMap<String, Vec<u8>>), ScanError> {
    let corrupt = |position: u64, member: usize, e: &dyn std::fmt::Display| ScanError::CorruptArchive {
        position,
        member,
        message: e.to_string(),
    };
    let input = decompressed(reader).map_err(|e| corrupt(0, 0, &e))?;
    let mut archive = tar::Archive::new(input);
    let mut records: Vec<FileRecord> = Vec::new();
    let mut warnings = Vec::new();
    let mut captured = BTreeMap::new();
    let mut position = 0u64;

    let entries = archive.entries().map_err(|e| corrupt(0, 0, &e))?;
    for (member, entry) in entries.enumerate() {
        let mut entry = entry.map_err(|e| corrupt(position, member, &e))?;
        position = entry.raw_header_position();
        let raw_path = entry
            .path()
            .map_err(|e| corrupt(position, member, &e))?
            .to_string_lossy()
            .into_owned();
        let path = normalize_path(&raw_path);
        let header = entry.header();
        let mode = header.mode().unwrap_or(0o644);
        let etype = header.entry_type();
        let link_target = entry
            .link_name()
            .map_err(|e| corrupt(position, member, &e))?
            .map(|p| p.to_string_lossy().into_owned());

        let base = path.rsplit('/').next().unwrap_or("");
        if let Some(name) = base.strip_prefix(WHITEOUT_PREFIX) {
            let parent = parent_path(&path).unwrap_or("/");
            let (kind, target) = if base == OPAQUE_MARKER {
                (FileKind::OpaqueWhiteout, parent.to_string())
            } else if name.starts_with(WHITEOUT_PREFIX) {
                warnings.push(ScanWarning {
                    position,
                    path: path.clone(),
                    message: "unrecognized whiteout metadata entry ignored".into(),
                });
                continue;
            } else {
                let joined = if parent == "/" {
                    format!("/{name}")
                } else {
                    format!("{parent}/{name}")
                };
                // a whiteout naming no real entry is recorded against the root,
                // which compose rejects as malformed
                if name.is_empty() || name == "." || name == ".." {
                    (FileKind::Whiteout, "/".to_string())
                } else {
                    (FileKind::Whiteout, joined)
                }
            };
            records.push(FileRecord {
                path: target,
                kind,
                size_bytes: 0,
                mode,
                link_target: None,
                content_hash: None,
                source_layer_digest: digest.clone(),
                layer_index: 0,
            });
            continue;
        }

        let mut rec = FileRecord {
            path: path.clone(),
            kind: FileKind::Regular,
            size_bytes: 0,
            mode,
            link_target: None,
            content_hash: None,
            source_layer_digest: digest.clone(),
            layer_index: 0,
        };
        match etype {
            EntryType::Regular | EntryType::Continuous | EntryType::GNUSparse => {
                let want = capture(&path) && entry.size() <= max_capture;
                let mut hr = HashingReader::new(&mut entry);
                let mut content = Vec::new();
                let res = if want {
                    hr.read_to_end(&mut content).map(|_| ())
                } else {
                    io::copy(&mut hr, &mut io::sink()).map(|_| ())
                };
                res.map_err(|e| corrupt(position, member, &e))?;
                let (h, n) = hr.finish();
                rec.size_bytes = n;
                rec.content_hash = Some(h);
                if want {
                    captured.insert(path.clone(), content);
                }
            }
            EntryType::Directory => {
                rec.kind = FileKind::Directory;
            }
            EntryType::Symlink => {
                rec.kind = FileKind::Symlink;
                rec.link_target = link_target;
            }
            EntryType::Link => {
                rec.kind = FileKind::Hardlink;
                rec.link_target = link_target.map(|t| normalize_path(&t));
            }
            EntryType::Char | EntryType::Block | EntryType::Fifo => {
                rec.content_hash = Some(Digest::of(b""));
                warnings.push(ScanWarning {
                    position,
                    path: path.clone(),
                    message: format!("unsupported entry type {etype:?} recorded as empty regular file"),
                });
            }
            other => {
                warnings.push(ScanWarning {
                    position,
                    path: path.clone(),
                    message: format!("skipped entry type {other:?}"),
                });
                continue;
            }
        }
        if path == "/" {
            continue;
        }
        records.push(rec);
    }

    resolve_hardlinks(&mut records, &mut warnings, &mut captured);
    Ok((
        LayerDiff {
            digest: digest.clone(),
            records,
            warnings,
        },
        captured,
    ))
}

/// A hardlink to a regular file earlier in the same layer takes on the
/// target's content and becomes a regular record, keeping `link_target`.
fn resolve_hardlinks(
    records: &mut [FileRecord],
    warnings: &mut Vec<ScanWarning>,
    captured: &mut BTreeMap<String, Vec<u8>>,
) {
    for i in 0..records.len() {
        if records[i].kind != FileKind::Hardlink {
            continue;
        }
        let target = records[i].link_target.clone().unwrap_or_default();
        let found = records[..i]
            .iter()
            .rev()
            .find(|r| r.path == target)
            .filter(|r| r.kind == FileKind::Regular)
            .map(|r| (r.size_bytes, r.content_hash.clone()));
        match found {
            Some((size, hash)) => {
                let r = &mut records[i];
                r.kind = FileKind::Regular;
                r.size_bytes = size;
                r.content_hash = hash;
                if let Some(c) = captured.get(&target).cloned() {
                    captured.insert(r.path.clone(), c);
                }
            }
            None => warnings.push(ScanWarning {
                position: 0,
                path: records[i].path.clone(),
                message: format!("hardlink target {target} not a regular file in this layer"),
            }),
        }
    }
}
