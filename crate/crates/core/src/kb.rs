//! Content-hash knowledge base built from a seed corpus of images.
//!
//! Files are known by content hash, layers by digest. The base answers how
//! much of a new image is already known, which files still need analysis,
//! and which files differ from every known copy at the same path.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::digest::Digest;
use crate::layerfs::{FileRecord, ImageFs};
use crate::reference::ImageRef;

pub const EXAMPLE_PATH_CAP: usize = 16;

#[derive(Debug, thiserror::Error)]
pub enum KbError {
    #[error("knowledge base io: {0}")]
    Io(#[from] io::Error),
    #[error("knowledge base file is malformed: {0}")]
    Malformed(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KbRecord {
    pub content_hash: Digest,
    pub size_bytes: u64,
    /// At most [`EXAMPLE_PATH_CAP`] paths, the lexicographically smallest.
    pub example_paths: BTreeSet<String>,
    pub source_images: BTreeSet<ImageRef>,
    /// Regular files with this content over all ingested images.
    pub occurrence_count: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub total_files: u64,
    pub known_files: u64,
    pub file_hit_ratio: f64,
    pub total_layers: u64,
    pub known_layers: u64,
    pub layer_hit_ratio: f64,
    /// Set when the image has no regular files (ratio reported as 1.0).
    pub no_files: bool,
    /// Set when the image has no layers (ratio reported as 1.0).
    pub no_layers: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Anomaly {
    pub record: FileRecord,
    pub known_hash_count: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeBase {
    records: BTreeMap<Digest, KbRecord>,
    layers: BTreeSet<Digest>,
    /// path -> every content hash seen at that path
    paths: BTreeMap<String, BTreeSet<Digest>>,
    images: BTreeSet<ImageRef>,
    skipped: u64,
}

/// Builds a knowledge base from `(image, filesystem)` pairs.
pub fn build_kb<'a>(corpus: impl IntoIterator<Item = (&'a ImageRef, &'a ImageFs)>) -> KnowledgeBase {
    let mut kb = KnowledgeBase::default();
    for (r, fs) in corpus {
        kb.add_image(r, fs);
    }
    kb
}

impl KnowledgeBase {
    pub fn new() -> Self {
        Self::default()
    }

    /// Ingests one image. Returns false (and changes nothing) if the image
    /// was already ingested.
    pub fn add_image(&mut self, image: &ImageRef, fs: &ImageFs) -> bool {
        if !self.images.insert(image.clone()) {
            return false;
        }
        self.layers.extend(fs.layer_digests.iter().cloned());
        for f in fs.regular_files() {
            let Some(hash) = &f.content_hash else {
                self.skipped += 1;
                continue;
            };
            let rec = self.records.entry(hash.clone()).or_insert_with(|| KbRecord {
                content_hash: hash.clone(),
                size_bytes: f.size_bytes,
                example_paths: BTreeSet::new(),
                source_images: BTreeSet::new(),
                occurrence_count: 0,
            });
            rec.occurrence_count += 1;
            rec.source_images.insert(image.clone());
            rec.example_paths.insert(f.path.clone());
            if rec.example_paths.len() > EXAMPLE_PATH_CAP {
                rec.example_paths.pop_last();
            }
            self.paths.entry(f.path.clone()).or_default().insert(hash.clone());
        }
        true
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty() && self.layers.is_empty()
    }

    pub fn record(&self, hash: &Digest) -> Option<&KbRecord> {
        self.records.get(hash)
    }

    pub fn records(&self) -> impl Iterator<Item = &KbRecord> {
        self.records.values()
    }

    pub fn knows_file(&self, hash: &Digest) -> bool {
        self.records.contains_key(hash)
    }

    pub fn knows_layer(&self, digest: &Digest) -> bool {
        self.layers.contains(digest)
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn images(&self) -> &BTreeSet<ImageRef> {
        &self.images
    }

    /// Regular files without a content hash, skipped during ingestion.
    pub fn skipped(&self) -> u64 {
        self.skipped
    }

    pub fn hashes_for_path(&self, path: &str) -> Option<&BTreeSet<Digest>> {
        self.paths.get(path)
    }

    fn hit(&self, f: &FileRecord) -> bool {
        f.content_hash.as_ref().is_some_and(|h| self.knows_file(h))
    }

    pub fn coverage(&self, fs: &ImageFs) -> CoverageReport {
        let total_files = fs.regular_files().count() as u64;
        let known_files = fs.regular_files().filter(|f| self.hit(f)).count() as u64;
        let total_layers = fs.layer_digests.len() as u64;
        let known_layers = fs.layer_digests.iter().filter(|d| self.knows_layer(d)).count() as u64;
        let ratio = |k: u64, t: u64| if t == 0 { 1.0 } else { k as f64 / t as f64 };
        CoverageReport {
            total_files,
            known_files,
            file_hit_ratio: ratio(known_files, total_files),
            total_layers,
            known_layers,
            layer_hit_ratio: ratio(known_layers, total_layers),
            no_files: total_files == 0,
            no_layers: total_layers == 0,
        }
    }

    /// Regular files whose content is not known.
    pub fn delta_files<'a>(&self, fs: &'a ImageFs) -> Vec<&'a FileRecord> {
        fs.regular_files().filter(|f| !self.hit(f)).collect()
    }

    /// Regular files at a known path whose content matches none of the
    /// hashes recorded for that path.
    pub fn anomaly_scan(&self, fs: &ImageFs) -> Vec<Anomaly> {
        fs.regular_files()
            .filter_map(|f| {
                let known = self.paths.get(&f.path)?;
                let hash = f.content_hash.as_ref()?;
                (!known.contains(hash)).then(|| Anomaly {
                    record: f.clone(),
                    known_hash_count: known.len(),
                })
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), KbError> {
        let dir = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        std::fs::create_dir_all(dir)?;
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        {
            let mut w = BufWriter::new(tmp.as_file_mut());
            serde_json::to_writer(&mut w, self)?;
            w.flush()?;
        }
        tmp.as_file().sync_all()?;
        tmp.persist(path).map_err(|e| e.error)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, KbError> {
        Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
    }

    /// Loads `path`, or returns an empty base if it does not exist.
    pub fn load_or_default(path: &Path) -> Result<Self, KbError> {
        match File::open(path) {
            Ok(f) => Ok(serde_json::from_reader(BufReader::new(f))?),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(Self::default()),
            Err(e) => Err(e.into()),
        }
    }
}
