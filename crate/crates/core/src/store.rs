//! Content-addressed layer blob store.
//!
//! Layout under the store root:
//!
//! ```text
//! blobs/sha256/<hex>   committed blobs, stored exactly as fetched
//! tmp/                 staging area; every blob is written here, hashed,
//!                      then renamed into place
//! meta.jsonl           append-only log of put/mark/evict events
//! ```
//!
//! Processed marks are metadata and survive blob eviction and restarts.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::{Condvar, Mutex, MutexGuard};

use serde::{Deserialize, Serialize};

use crate::digest::{Digest, HashingWriter, VerifyingReader};
use crate::reference::ImageRef;
use crate::registry::{LayerDescriptor, Manifest};

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("digest mismatch: expected {expected}, got {actual}")]
    DigestMismatch { expected: Digest, actual: Digest },
    #[error("store is full: {needed} more bytes needed, capacity {capacity}")]
    StorageFull { needed: u64, capacity: u64 },
    #[error("could not free {target} bytes: freed {freed} by evicting {} blobs", evicted.len())]
    InsufficientEvictable {
        evicted: Vec<Digest>,
        freed: u64,
        target: u64,
    },
    #[error("corrupt store metadata at line {line}: {message}")]
    CorruptMeta { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = StoreError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntryState {
    Present,
    Evicted,
}

/// Snapshot of one stored layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StoreEntry {
    pub digest: Digest,
    pub size_bytes: u64,
    pub state: EntryState,
    pub pinned: bool,
    pub processed_marks: BTreeSet<String>,
    pub last_access: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "lowercase")]
enum MetaEvent {
    Put { digest: Digest, size: u64 },
    Mark { digest: Digest, pass: String },
    Evict { digest: Digest },
}

#[derive(Debug, Clone)]
struct Entry {
    size: u64,
    present: bool,
    last_access: u64,
}

struct State {
    entries: HashMap<Digest, Entry>,
    marks: HashMap<Digest, BTreeSet<String>>,
    pins: HashMap<Digest, u32>,
    inflight: HashSet<Digest>,
    passes: BTreeSet<String>,
    clock: u64,
    present_bytes: u64,
    peak_bytes: u64,
    meta: File,
}

impl State {
    fn tick(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }

    fn log(&mut self, ev: &MetaEvent) -> io::Result<()> {
        let mut line = serde_json::to_vec(ev)?;
        line.push(b'\n');
        self.meta.write_all(&line)?;
        self.meta.flush()
    }

    fn is_pinned(&self, d: &Digest) -> bool {
        self.pins.get(d).copied().unwrap_or(0) > 0
    }

    fn fully_processed(&self, d: &Digest) -> bool {
        let marks = self.marks.get(d);
        self.passes.iter().all(|p| marks.is_some_and(|m| m.contains(p)))
    }

    fn snapshot(&self, d: &Digest) -> Option<StoreEntry> {
        let e = self.entries.get(d)?;
        Some(StoreEntry {
            digest: d.clone(),
            size_bytes: e.size,
            state: if e.present {
                EntryState::Present
            } else {
                EntryState::Evicted
            },
            pinned: self.is_pinned(d),
            processed_marks: self.marks.get(d).cloned().unwrap_or_default(),
            last_access: e.last_access,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct VerifyReport {
    pub checked: usize,
    pub corrupt: Vec<Digest>,
    pub missing: Vec<Digest>,
}

pub struct LayerStore {
    root: PathBuf,
    capacity: Option<u64>,
    state: Mutex<State>,
    changed: Condvar,
}

impl LayerStore {
    /// Opens (or creates) a store, replaying `meta.jsonl`.
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(root.join("blobs").join("sha256"))?;
        let tmp = root.join("tmp");
        if tmp.exists() {
            fs::remove_dir_all(&tmp)?;
        }
        fs::create_dir_all(&tmp)?;

        let meta_path = root.join("meta.jsonl");
        let mut entries: HashMap<Digest, Entry> = HashMap::new();
        let mut marks: HashMap<Digest, BTreeSet<String>> = HashMap::new();
        let mut clock = 0;
        if meta_path.exists() {
            let reader = BufReader::new(File::open(&meta_path)?);
            for (i, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let ev: MetaEvent = match serde_json::from_str(&line) {
                    Ok(ev) => ev,
                    Err(e) => {
                        // a torn final line from a crash is tolerated
                        log::warn!("skipping meta.jsonl line {}: {e}", i + 1);
                        continue;
                    }
                };
                match ev {
                    MetaEvent::Put { digest, size } => {
                        clock += 1;
                        entries.insert(
                            digest,
                            Entry {
                                size,
                                present: true,
                                last_access: clock,
                            },
                        );
                    }
                    MetaEvent::Mark { digest, pass } => {
                        marks.entry(digest).or_default().insert(pass);
                    }
                    MetaEvent::Evict { digest } => {
                        if let Some(e) = entries.get_mut(&digest) {
                            e.present = false;
                        }
                    }
                }
            }
        }
        let mut present_bytes = 0;
        for (d, e) in entries.iter_mut() {
            if e.present {
                if blob_path(&root, d).exists() {
                    present_bytes += e.size;
                } else {
                    e.present = false;
                }
            }
        }
        let meta = OpenOptions::new().create(true).append(true).open(&meta_path)?;
        Ok(LayerStore {
            root,
            capacity: None,
            state: Mutex::new(State {
                entries,
                marks,
                pins: HashMap::new(),
                inflight: HashSet::new(),
                passes: BTreeSet::new(),
                clock,
                present_bytes,
                peak_bytes: present_bytes,
                meta,
            }),
            changed: Condvar::new(),
        })
    }

    /// Limits committed bytes; a put that would exceed it fails with `StorageFull`.
    pub fn with_capacity(mut self, capacity: u64) -> Self {
        self.capacity = Some(capacity);
        self
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap()
    }

    pub fn blob_path(&self, digest: &Digest) -> PathBuf {
        blob_path(&self.root, digest)
    }

    pub fn contains(&self, digest: &Digest) -> bool {
        self.lock().entries.get(digest).is_some_and(|e| e.present)
    }

    pub fn entry(&self, digest: &Digest) -> Option<StoreEntry> {
        self.lock().snapshot(digest)
    }

    pub fn entries(&self) -> Vec<StoreEntry> {
        let st = self.lock();
        let mut v: Vec<_> = st.entries.keys().filter_map(|d| st.snapshot(d)).collect();
        v.sort_by(|a, b| a.digest.cmp(&b.digest));
        v
    }

    pub fn present_bytes(&self) -> u64 {
        self.lock().present_bytes
    }

    /// Highest committed byte total observed since open or the last reset.
    pub fn peak_bytes(&self) -> u64 {
        self.lock().peak_bytes
    }

    pub fn reset_peak(&self) {
        let mut st = self.lock();
        st.peak_bytes = st.present_bytes;
    }

    pub fn put_layer(&self, digest: &Digest, mut reader: impl Read) -> Result<StoreEntry> {
        self.put_layer_with(digest, |w| {
            io::copy(&mut reader, w)?;
            Ok::<(), StoreError>(())
        })
    }

    /// Inserts a blob produced by `fill`, which writes into a staging file.
    ///
    /// If the digest is already present nothing is called and the existing
    /// entry is returned. Concurrent puts of one digest serialize: one writes,
    /// the others wait and then see it present.
    pub fn put_layer_with<E, F>(&self, digest: &Digest, fill: F) -> Result<StoreEntry, E>
    where
        E: From<StoreError>,
        F: FnOnce(&mut dyn Write) -> Result<(), E>,
    {
        {
            let mut st = self.lock();
            loop {
                if st.entries.get(digest).is_some_and(|e| e.present) {
                    let t = st.tick();
                    st.entries.get_mut(digest).unwrap().last_access = t;
                    return Ok(st.snapshot(digest).unwrap());
                }
                if !st.inflight.contains(digest) {
                    st.inflight.insert(digest.clone());
                    break;
                }
                st = self.changed.wait(st).unwrap();
            }
        }
        let result = self.stage_and_commit(digest, fill);
        let mut st = self.lock();
        st.inflight.remove(digest);
        self.changed.notify_all();
        drop(st);
        result
    }

    fn stage_and_commit<E, F>(&self, digest: &Digest, fill: F) -> Result<StoreEntry, E>
    where
        E: From<StoreError>,
        F: FnOnce(&mut dyn Write) -> Result<(), E>,
    {
        let staged = tempfile::NamedTempFile::new_in(self.root.join("tmp")).map_err(StoreError::from)?;
        let mut writer = HashingWriter::new(io::BufWriter::new(staged.as_file()));
        fill(&mut writer)?;
        writer.flush().map_err(map_io)?;
        let (buf, actual, size) = writer.finish();
        drop(buf);
        if &actual != digest {
            return Err(StoreError::DigestMismatch {
                expected: digest.clone(),
                actual,
            }
            .into());
        }
        staged.as_file().sync_all().map_err(map_io)?;

        let mut st = self.lock();
        if let Some(cap) = self.capacity {
            if st.present_bytes + size > cap {
                return Err(StoreError::StorageFull {
                    needed: st.present_bytes + size - cap,
                    capacity: cap,
                }
                .into());
            }
        }
        staged.persist(self.blob_path(digest)).map_err(|e| map_io(e.error))?;
        st.log(&MetaEvent::Put {
            digest: digest.clone(),
            size,
        })
        .map_err(StoreError::from)?;
        let t = st.tick();
        st.entries.insert(
            digest.clone(),
            Entry {
                size,
                present: true,
                last_access: t,
            },
        );
        st.present_bytes += size;
        st.peak_bytes = st.peak_bytes.max(st.present_bytes);
        Ok(st.snapshot(digest).unwrap())
    }

    /// Opens a present blob. Reading it to the end fails if the bytes no
    /// longer hash to the digest.
    pub fn get_layer(&self, digest: &Digest) -> Option<Box<dyn Read + Send>> {
        let mut st = self.lock();
        if !st.entries.get(digest).is_some_and(|e| e.present) {
            return None;
        }
        let file = File::open(self.blob_path(digest)).ok()?;
        let t = st.tick();
        st.entries.get_mut(digest).unwrap().last_access = t;
        Some(Box::new(VerifyingReader::new(io::BufReader::new(file), digest.clone())))
    }

    /// Declares a pass whose mark is required before an entry counts as fully processed.
    pub fn register_pass(&self, pass: &str) {
        self.lock().passes.insert(pass.to_string());
    }

    pub fn mark_processed(&self, digest: &Digest, pass: &str) -> Result<()> {
        let mut st = self.lock();
        if st.marks.get(digest).is_some_and(|m| m.contains(pass)) {
            return Ok(());
        }
        st.log(&MetaEvent::Mark {
            digest: digest.clone(),
            pass: pass.to_string(),
        })?;
        st.marks.entry(digest.clone()).or_default().insert(pass.to_string());
        Ok(())
    }

    pub fn is_processed(&self, digest: &Digest, pass: &str) -> bool {
        self.lock().marks.get(digest).is_some_and(|m| m.contains(pass))
    }

    pub fn pin(&self, digest: &Digest) -> PinGuard<'_> {
        *self.lock().pins.entry(digest.clone()).or_insert(0) += 1;
        PinGuard {
            store: self,
            digest: digest.clone(),
        }
    }

    fn unpin(&self, digest: &Digest) {
        let mut st = self.lock();
        if let Some(c) = st.pins.get_mut(digest) {
            *c -= 1;
            if *c == 0 {
                st.pins.remove(digest);
            }
        }
        self.changed.notify_all();
    }

    /// Evicts blobs until at least `target_free_bytes` have been freed.
    ///
    /// Unpinned entries processed for every registered pass go first, oldest
    /// access first; then unpinned unprocessed entries (logged as premature).
    pub fn evict(&self, target_free_bytes: u64) -> Result<Vec<Digest>> {
        let mut st = self.lock();
        self.evict_locked(&mut st, target_free_bytes)
    }

    fn evict_locked(&self, st: &mut State, target: u64) -> Result<Vec<Digest>> {
        if target == 0 {
            return Ok(Vec::new());
        }
        let mut candidates: Vec<(bool, u64, Digest)> = st
            .entries
            .iter()
            .filter(|(d, e)| e.present && !st.is_pinned(d) && !st.inflight.contains(*d))
            .map(|(d, e)| (!st.fully_processed(d), e.last_access, d.clone()))
            .collect();
        candidates.sort();
        let mut freed = 0;
        let mut evicted = Vec::new();
        for (premature, _, d) in candidates {
            if freed >= target {
                break;
            }
            if premature {
                log::warn!("evicting unprocessed layer {d}");
            }
            fs::remove_file(blob_path(&self.root, &d))?;
            st.log(&MetaEvent::Evict { digest: d.clone() })?;
            let e = st.entries.get_mut(&d).unwrap();
            e.present = false;
            freed += e.size;
            st.present_bytes -= e.size;
            evicted.push(d);
        }
        if freed < target {
            return Err(StoreError::InsufficientEvictable { evicted, freed, target });
        }
        Ok(evicted)
    }

    /// Evicts as needed so that `incoming` more bytes fit under `budget`.
    /// Returns the digests evicted; never fails for lack of candidates.
    pub fn make_room(&self, budget: u64, incoming: u64) -> Result<Vec<Digest>> {
        let mut st = self.lock();
        let need = (st.present_bytes + incoming).saturating_sub(budget);
        match self.evict_locked(&mut st, need) {
            Ok(v) => Ok(v),
            Err(StoreError::InsufficientEvictable { evicted, .. }) => Ok(evicted),
            Err(e) => Err(e),
        }
    }

    /// Re-hashes every present blob.
    pub fn verify(&self) -> Result<VerifyReport> {
        let present: Vec<Digest> = {
            let st = self.lock();
            let mut v: Vec<_> = st
                .entries
                .iter()
                .filter(|(_, e)| e.present)
                .map(|(d, _)| d.clone())
                .collect();
            v.sort();
            v
        };
        let mut report = VerifyReport::default();
        for d in present {
            report.checked += 1;
            match File::open(self.blob_path(&d)) {
                Ok(f) => {
                    let mut r = crate::digest::HashingReader::new(io::BufReader::new(f));
                    io::copy(&mut r, &mut io::sink())?;
                    if r.finish().0 != d {
                        report.corrupt.push(d);
                    }
                }
                Err(e) if e.kind() == io::ErrorKind::NotFound => report.missing.push(d),
                Err(e) => return Err(e.into()),
            }
        }
        Ok(report)
    }

    /// Plans downloads for a batch of images against the current store contents.
    pub fn plan_batch(&self, manifests: &[(ImageRef, Manifest)]) -> DownloadPlan {
        plan_batch(manifests, |d| self.contains(d))
    }
}

fn map_io(e: io::Error) -> StoreError {
    if e.kind() == io::ErrorKind::StorageFull {
        StoreError::StorageFull { needed: 0, capacity: 0 }
    } else {
        StoreError::Io(e)
    }
}

fn blob_path(root: &Path, digest: &Digest) -> PathBuf {
    root.join("blobs").join("sha256").join(digest.hex())
}

/// Holds a pin on a digest; the entry cannot be evicted while any pin exists.
pub struct PinGuard<'a> {
    store: &'a LayerStore,
    digest: Digest,
}

impl Drop for PinGuard<'_> {
    fn drop(&mut self) {
        self.store.unpin(&self.digest);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PlannedImage {
    pub image: ImageRef,
    pub manifest: Manifest,
    /// First occurrences of digests not yet stored.
    pub layers_to_fetch: Vec<LayerDescriptor>,
    /// Occurrences of digests scheduled earlier in the plan.
    pub layers_reused: Vec<LayerDescriptor>,
    /// Occurrences of digests already present in the store.
    pub layers_stored: Vec<LayerDescriptor>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct DownloadPlan {
    pub images: Vec<PlannedImage>,
    pub bytes_to_fetch: u64,
    pub bytes_saved: u64,
    pub bytes_already_stored: u64,
}

impl DownloadPlan {
    pub fn fetch_digests(&self) -> Vec<&Digest> {
        self.images
            .iter()
            .flat_map(|i| i.layers_to_fetch.iter().map(|l| &l.digest))
            .collect()
    }
}

/// Groups images by repository (repositories in first-appearance order,
/// images in input order within each) and schedules each digest once.
pub fn plan_batch(manifests: &[(ImageRef, Manifest)], is_stored: impl Fn(&Digest) -> bool) -> DownloadPlan {
    let mut repo_order: Vec<&str> = Vec::new();
    for (r, _) in manifests {
        if !repo_order.contains(&r.repository.as_str()) {
            repo_order.push(&r.repository);
        }
    }
    let mut plan = DownloadPlan::default();
    let mut scheduled: HashSet<&Digest> = HashSet::new();
    for repo in repo_order {
        for (image, manifest) in manifests.iter().filter(|(r, _)| r.repository == repo) {
            let mut p = PlannedImage {
                image: image.clone(),
                manifest: manifest.clone(),
                layers_to_fetch: Vec::new(),
                layers_reused: Vec::new(),
                layers_stored: Vec::new(),
            };
            for l in &manifest.layers {
                if is_stored(&l.digest) {
                    plan.bytes_already_stored += l.size_bytes;
                    p.layers_stored.push(l.clone());
                } else if scheduled.insert(&l.digest) {
                    plan.bytes_to_fetch += l.size_bytes;
                    p.layers_to_fetch.push(l.clone());
                } else {
                    plan.bytes_saved += l.size_bytes;
                    p.layers_reused.push(l.clone());
                }
            }
            plan.images.push(p);
        }
    }
    plan
}

/// Distinct layer digests over total layer occurrences for one repository's
/// images. `None` when there are no layers at all.
pub fn unique_layer_fraction<'a>(manifests: impl IntoIterator<Item = &'a Manifest>) -> Option<f64> {
    let mut distinct = HashSet::new();
    let mut total = 0usize;
    for m in manifests {
        for l in &m.layers {
            distinct.insert(&l.digest);
            total += 1;
        }
    }
    (total > 0).then(|| distinct.len() as f64 / total as f64)
}
