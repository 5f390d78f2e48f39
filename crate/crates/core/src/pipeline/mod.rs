//! Stream-based mining: discover, select, plan, fetch, compose, analyze and
//! evict, writing deterministic reports.
//!
//! A fetcher pool turns planned images into composed filesystems. Each layer
//! is fetched into the store, scanned once, and its scan (file records plus
//! the content of files that later passes may read) is cached next to the
//! store and marked processed, after which the blob may be evicted. Composed
//! images go through a bounded queue to an analyzer pool that runs the
//! configured passes. Rerunning over a mined corpus reads the cached scans
//! and performs no layer scans.
//!
//! Output layout under the output directory:
//!
//! * `reports/*.csv` and `reports/figures.json`
//! * `observations/*.jsonl`
//! * `run-summary.json`

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, OnceLock};

use serde::{Deserialize, Serialize};

use crate::confmine::{
    aggregate_usage, builtin_profiles, cross_component_refs, diff_across_versions, harvest_env, load_profiles,
    locate_configs, mine_combinations, parse_compose, parse_config, transactions, write_combinations_csv,
    write_observations_jsonl, write_usage_csv, ComposeFileError, DependencyCandidate, Evidence, OrchestrationGraph,
    ParamObservation, SoftwareProfile,
};
use crate::digest::Digest;
use crate::dockerfile::{self, estimate_layers, lint_reproducibility, DockerfileAst, StageBase};
use crate::kb::{Anomaly, CoverageReport, KnowledgeBase};
use crate::layerfs::{compose, scan_layer_capturing, FileRecord, ImageFs, LayerDiff, PathMatcher, ScanWarning};
use crate::reference::ImageRef;
use crate::registry::{discover_repositories, open_endpoint, LayerDescriptor, Manifest, Registry, RegistryError};
use crate::store::{LayerStore, StoreError};

mod config;
mod gate;
mod report;
mod select;

pub use config::{MiningJobConfig, Pass};
pub use gate::{SpaceGate, Ticket};
pub use report::{
    report_figures, report_repo_sizes, write_coverage_csv, write_sharing_csv, write_sizes_csv, Corpus, CoverageRow,
    Distribution, FigureBundle, RepoSizeRow, SharingRow,
};
pub use select::{select_images, Selection, SelectionPolicy, TagInfo, UnknownPolicy};

use report::write_report;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("fatal configuration error: {0}")]
    FatalConfig(String),
    #[error("missing pass data: {0}")]
    MissingPassData(String),
    #[error("{} failed at {}: {}", .0.subject, .0.stage, .0.message)]
    Image(Failure),
    #[error("writing output: {0}")]
    Io(#[from] io::Error),
}

/// Paths of compose files picked up by `compose-graph`.
pub const COMPOSE_PATTERNS: [&str; 4] = [
    "/**/docker-compose*.yml",
    "/**/docker-compose*.yaml",
    "/**/compose.yml",
    "/**/compose.yaml",
];

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    /// Layer occurrences across the images whose layers were needed.
    pub layers_total: u64,
    pub layers_distinct: u64,
    pub layers_fetched: u64,
    pub bytes_fetched: u64,
    /// Occurrences served without a download in this run.
    pub layers_reused: u64,
    pub layers_evicted: u64,
    pub layer_scans: u64,
    /// Layers whose processed mark and cached scan were found.
    pub scan_cache_hits: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Failure {
    /// Image reference, repository or search word.
    pub subject: String,
    pub stage: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub passes: Vec<Pass>,
    pub repositories: u64,
    pub images_selected: u64,
    pub images_processed: u64,
    pub images_failed: u64,
    /// Repositories whose selection came out empty.
    pub empty_selections: Vec<String>,
    pub counters: Counters,
    pub eviction_budget_bytes: u64,
    pub max_layer_bytes: u64,
    pub peak_store_bytes: u64,
    pub observations: u64,
    pub failures: Vec<Failure>,
    pub notes: Vec<String>,
}

impl RunSummary {
    /// 0 when every image went through, 2 when some failed.
    pub fn exit_code(&self) -> i32 {
        if self.failures.is_empty() {
            0
        } else {
            2
        }
    }
}

/// Content kept from a layer for later passes.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Captured {
    Text(String),
    Hex(String),
}

#[derive(Debug, Serialize, Deserialize)]
struct CachedScan {
    records: Vec<FileRecord>,
    warnings: Vec<ScanWarning>,
    captures: BTreeMap<String, Captured>,
}

struct LayerScan {
    diff: LayerDiff,
    captures: BTreeMap<String, Vec<u8>>,
}

impl LayerScan {
    fn to_cache(&self) -> CachedScan {
        CachedScan {
            records: self.diff.records.clone(),
            warnings: self.diff.warnings.clone(),
            captures: self
                .captures
                .iter()
                .map(|(p, b)| {
                    let c = match std::str::from_utf8(b) {
                        Ok(s) => Captured::Text(s.to_string()),
                        Err(_) => Captured::Hex(hex::encode(b)),
                    };
                    (p.clone(), c)
                })
                .collect(),
        }
    }

    fn from_cache(digest: &Digest, c: CachedScan) -> Option<Self> {
        let mut captures = BTreeMap::new();
        for (p, v) in c.captures {
            let bytes = match v {
                Captured::Text(s) => s.into_bytes(),
                Captured::Hex(h) => hex::decode(h).ok()?,
            };
            captures.insert(p, bytes);
        }
        Some(LayerScan {
            diff: LayerDiff {
                digest: digest.clone(),
                records: c.records,
                warnings: c.warnings,
            },
            captures,
        })
    }
}

#[derive(Debug, thiserror::Error)]
enum LayerError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
}

type ScanCell = Arc<OnceLock<Result<Arc<LayerScan>, String>>>;

#[derive(Default)]
struct AtomicCounters {
    fetched: AtomicU64,
    bytes: AtomicU64,
    scans: AtomicU64,
    hits: AtomicU64,
}

/// Per-layer work shared by the fetcher pool: each digest is fetched and
/// scanned at most once per run.
struct LayerWork<'a> {
    registry: &'a dyn Registry,
    store: &'a LayerStore,
    gate: SpaceGate<'a>,
    budget: u64,
    scan_pass: String,
    cache_dir: PathBuf,
    capture: PathMatcher,
    max_capture: u64,
    cells: Mutex<HashMap<Digest, ScanCell>>,
    counters: AtomicCounters,
}

impl LayerWork<'_> {
    fn cache_path(&self, d: &Digest) -> PathBuf {
        self.cache_dir.join(format!("{}.json", d.hex()))
    }

    fn load_cached(&self, d: &Digest) -> Option<LayerScan> {
        let bytes = fs::read(self.cache_path(d)).ok()?;
        let c: CachedScan = serde_json::from_slice(&bytes).ok()?;
        LayerScan::from_cache(d, c)
    }

    fn store_cached(&self, d: &Digest, scan: &LayerScan) -> io::Result<()> {
        let mut tmp = tempfile::NamedTempFile::new_in(&self.cache_dir)?;
        {
            let mut w = io::BufWriter::new(tmp.as_file_mut());
            serde_json::to_writer(&mut w, &scan.to_cache())?;
            w.flush()?;
        }
        tmp.persist(self.cache_path(d)).map_err(|e| e.error)?;
        Ok(())
    }

    fn layer(&self, repo: &str, desc: &LayerDescriptor) -> Result<Arc<LayerScan>, String> {
        let cell = self
            .cells
            .lock()
            .unwrap()
            .entry(desc.digest.clone())
            .or_default()
            .clone();
        cell.get_or_init(|| self.fetch_and_scan(repo, desc).map(Arc::new))
            .clone()
    }

    fn fetch_and_scan(&self, repo: &str, desc: &LayerDescriptor) -> Result<LayerScan, String> {
        let d = &desc.digest;
        if self.store.is_processed(d, &self.scan_pass) {
            if let Some(s) = self.load_cached(d) {
                self.counters.hits.fetch_add(1, Ordering::Relaxed);
                return Ok(s);
            }
        }
        let _pin = self.store.pin(d);
        let need = if self.store.contains(d) { 0 } else { desc.size_bytes };
        let mut ticket = self.gate.admit(need).map_err(|e| e.to_string())?;
        if !self.store.contains(d) {
            let entry = self
                .store
                .put_layer_with(d, |w| -> Result<(), LayerError> {
                    self.registry.fetch_layer(repo, d, w)?;
                    Ok(())
                })
                .map_err(|e| e.to_string())?;
            self.counters.fetched.fetch_add(1, Ordering::Relaxed);
            self.counters.bytes.fetch_add(entry.size_bytes, Ordering::Relaxed);
            if entry.size_bytes > self.budget {
                log::warn!("layer {d} ({} bytes) exceeds the eviction budget", entry.size_bytes);
            }
        }
        ticket.committed();
        let reader = self
            .store
            .get_layer(d)
            .ok_or_else(|| format!("layer {d} vanished from the store"))?;
        let capture = |p: &str| self.capture.is_match(p);
        let (diff, captures) =
            scan_layer_capturing(reader, d, &capture, self.max_capture).map_err(|e| e.to_string())?;
        self.counters.scans.fetch_add(1, Ordering::Relaxed);
        let scan = LayerScan { diff, captures };
        self.store_cached(d, &scan)
            .map_err(|e| format!("caching scan of {d}: {e}"))?;
        self.store
            .mark_processed(d, &self.scan_pass)
            .map_err(|e| e.to_string())?;
        Ok(scan)
    }
}

struct ComposedImage {
    index: usize,
    image: ImageRef,
    fs: ImageFs,
    /// Captured content of the files visible in the composed view.
    files: BTreeMap<String, Vec<u8>>,
}

#[derive(Debug, Default)]
struct ImageOutcome {
    file_hashes: Vec<Digest>,
    coverage: Option<CoverageReport>,
    anomalies: Vec<Anomaly>,
    observations: Vec<ParamObservation>,
    candidates: Vec<DependencyCandidate>,
    compose: Vec<(String, OrchestrationGraph)>,
    compose_errors: Vec<(String, String)>,
    uncaptured_configs: Vec<String>,
    fs: Option<ImageFs>,
}

enum Outcome {
    Done(usize, Box<ImageOutcome>),
    Failed(Failure),
}

struct Analyzer<'a> {
    passes: BTreeSet<Pass>,
    kb: &'a KnowledgeBase,
    keep_fs: bool,
    profiles: &'a [SoftwareProfile],
    compose_files: PathMatcher,
    dockerfiles: &'a BTreeMap<String, DockerfileAst>,
}

impl Analyzer<'_> {
    fn run(&self, item: ComposedImage) -> ImageOutcome {
        let ComposedImage { image, fs, files, .. } = item;
        let mut out = ImageOutcome {
            file_hashes: fs.regular_files().filter_map(|r| r.content_hash.clone()).collect(),
            ..ImageOutcome::default()
        };
        if self.passes.contains(&Pass::KbCoverage) {
            out.coverage = Some(self.kb.coverage(&fs));
            out.anomalies = self.kb.anomaly_scan(&fs);
        }
        if self.passes.contains(&Pass::ComposeGraph) || self.passes.contains(&Pass::ConfigMine) {
            for (path, bytes) in files.iter().filter(|(p, _)| self.compose_files.is_match(p)) {
                match parse_compose(&String::from_utf8_lossy(bytes)) {
                    Ok(g) => out.compose.push((path.clone(), g)),
                    Err(ComposeFileError::NotComposeFile(_)) => {}
                    Err(e) => out.compose_errors.push((path.clone(), e.to_string())),
                }
            }
        }
        if self.passes.contains(&Pass::ConfigMine) {
            for profile in self.profiles {
                for cf in locate_configs(&fs, profile) {
                    match files.get(&cf.path) {
                        Some(content) => out.observations.extend(parse_config(&cf, content, &image).observations),
                        None => out.uncaptured_configs.push(cf.path),
                    }
                }
            }
            let mut all = out.observations.clone();
            if let Some(ast) = self.dockerfiles.get(&image.repository) {
                all.extend(harvest_env(ast, &image));
            }
            let mut cands = cross_component_refs(&all, &fs, None);
            for (_, g) in &out.compose {
                cands.extend(cross_component_refs(&all, &fs, Some(g)));
            }
            cands.sort_by(|a, b| (&a.observation, &a.evidence).cmp(&(&b.observation, &b.evidence)));
            cands.dedup();
            out.candidates = cands;
        }
        if !self.passes.contains(&Pass::ComposeGraph) {
            out.compose.clear();
            out.compose_errors.clear();
        }
        if self.keep_fs {
            out.fs = Some(fs);
        }
        out
    }
}

fn compose_image(
    work: &LayerWork<'_>,
    image: &ImageRef,
    manifest: &Manifest,
) -> Result<(ImageFs, BTreeMap<String, Vec<u8>>), Failure> {
    let fail = |stage: &str, message: String| Failure {
        subject: image.to_string(),
        stage: stage.into(),
        message,
    };
    let mut scans = Vec::with_capacity(manifest.layers.len());
    for l in &manifest.layers {
        scans.push(work.layer(&image.repository, l).map_err(|e| fail("layer", e))?);
    }
    let diffs: Vec<LayerDiff> = scans.iter().map(|s| s.diff.clone()).collect();
    let fs = compose(&diffs).map_err(|e| fail("compose", e.to_string()))?;
    let files = fs
        .regular_files()
        .filter_map(|r| Some((r.path.clone(), scans[r.layer_index].captures.get(&r.path)?.clone())))
        .collect();
    Ok((fs, files))
}

/// Identifies the scan cache: different capture settings cache separately.
fn scan_pass_id(patterns: &[String], max_capture: u64) -> String {
    let mut text = patterns.join("\n");
    text.push_str(&format!("\n{max_capture}"));
    format!("scan-{}", &Digest::of(text.as_bytes()).hex()[..12])
}

struct Prepared {
    registry: Box<dyn Registry>,
    store: LayerStore,
    profiles: Vec<SoftwareProfile>,
    kb: KnowledgeBase,
    kb_path: Option<PathBuf>,
}

fn prepare(config: &MiningJobConfig) -> Result<Prepared, PipelineError> {
    config.validate()?;
    let fatal = |m: String| PipelineError::FatalConfig(m);
    let registry = open_endpoint(&config.endpoint).map_err(|e| fatal(format!("endpoint: {e}")))?;
    let registry: Box<dyn Registry> = match (&config.hub_endpoint, config.endpoint.starts_with("http")) {
        (Some(hub), true) => Box::new(crate::registry::HttpRegistry::with_hub(&config.endpoint, hub)),
        (Some(_), false) => return Err(fatal("hub_endpoint needs an http(s) endpoint".into())),
        (None, _) => registry,
    };
    fs::create_dir_all(&config.output_dir)
        .map_err(|e| fatal(format!("output dir {}: {e}", config.output_dir.display())))?;
    let store_dir = config.store_dir();
    let store = LayerStore::open(&store_dir).map_err(|e| fatal(format!("store {}: {e}", store_dir.display())))?;
    let profiles = match &config.profiles {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| fatal(format!("profiles {}: {e}", p.display())))?;
            load_profiles(&text).map_err(|e| fatal(format!("profiles {}: {e}", p.display())))?
        }
        None => builtin_profiles(),
    };
    let kb_path = config.kb_path.clone();
    let kb = match (&kb_path, config.has_pass(Pass::KbCoverage) || config.kb_update) {
        (Some(p), true) => KnowledgeBase::load_or_default(p).map_err(|e| fatal(format!("kb {}: {e}", p.display())))?,
        _ => KnowledgeBase::new(),
    };
    Ok(Prepared {
        registry,
        store,
        profiles,
        kb,
        kb_path,
    })
}

fn layer_work<'a>(
    config: &MiningJobConfig,
    registry: &'a dyn Registry,
    store: &'a LayerStore,
    profiles: &[SoftwareProfile],
) -> Result<LayerWork<'a>, PipelineError> {
    let mut patterns: Vec<String> = profiles.iter().flat_map(|p| p.all_config_patterns().cloned()).collect();
    patterns.extend(COMPOSE_PATTERNS.iter().map(|s| s.to_string()));
    patterns.sort();
    patterns.dedup();
    let scan_pass = scan_pass_id(&patterns, config.max_capture_bytes);
    store.register_pass(&scan_pass);
    let cache_dir = store.root().join("scans").join(&scan_pass);
    fs::create_dir_all(&cache_dir)?;
    Ok(LayerWork {
        registry,
        store,
        gate: SpaceGate::new(store, config.eviction_budget_bytes),
        budget: config.eviction_budget_bytes,
        scan_pass,
        cache_dir,
        capture: PathMatcher::new(&patterns).map_err(|e| PipelineError::FatalConfig(e.to_string()))?,
        max_capture: config.max_capture_bytes,
        cells: Mutex::new(HashMap::new()),
        counters: AtomicCounters::default(),
    })
}

/// Fetches and composes a single image through the job's store and scan
/// cache, honoring its eviction budget.
pub fn compose_one(config: &MiningJobConfig, image: &ImageRef) -> Result<ImageFs, PipelineError> {
    let p = prepare(config)?;
    let failed = |stage: &str, message: String| {
        PipelineError::Image(Failure {
            subject: image.to_string(),
            stage: stage.into(),
            message,
        })
    };
    let manifest = p
        .registry
        .fetch_manifest(image)
        .map_err(|e| failed("manifest", e.to_string()))?;
    p.store
        .make_room(config.eviction_budget_bytes, 0)
        .map_err(|e| PipelineError::FatalConfig(e.to_string()))?;
    let work = layer_work(config, p.registry.as_ref(), &p.store, &p.profiles)?;
    let (fs, _) = compose_image(&work, image, &manifest).map_err(PipelineError::Image)?;
    Ok(fs)
}

/// Runs a mining job end to end. Only configuration problems are errors;
/// anything that goes wrong for one repository or image is recorded in the
/// summary's failures and the run continues.
pub fn run_pipeline(config: &MiningJobConfig) -> Result<RunSummary, PipelineError> {
    let p = prepare(config)?;
    run_prepared(config, p)
}

fn run_prepared(config: &MiningJobConfig, p: Prepared) -> Result<RunSummary, PipelineError> {
    let Prepared {
        registry,
        store,
        profiles,
        mut kb,
        kb_path,
    } = p;
    let registry = registry.as_ref();
    let passes: BTreeSet<Pass> = config.passes.iter().copied().collect();
    let mut failures: Vec<Failure> = Vec::new();
    let mut notes: Vec<String> = Vec::new();
    let fail = |subject: &str, stage: &str, e: &dyn std::fmt::Display| Failure {
        subject: subject.to_string(),
        stage: stage.to_string(),
        message: e.to_string(),
    };

    // discover
    let mut repositories: Vec<String> = Vec::new();
    for r in &config.repositories {
        if !repositories.contains(r) {
            repositories.push(r.clone());
        }
    }
    if let Some(dict) = &config.dictionary {
        let words: Vec<String> = fs::read_to_string(dict)
            .map_err(|e| PipelineError::FatalConfig(format!("dictionary {}: {e}", dict.display())))?
            .lines()
            .map(str::trim)
            .filter(|w| !w.is_empty() && !w.starts_with('#'))
            .map(String::from)
            .collect();
        if !words.is_empty() {
            let mut d = discover_repositories(registry, &words, config.search_pages);
            for name in d.by_ref() {
                if !repositories.contains(&name) {
                    repositories.push(name);
                }
            }
            for w in &d.failed_words {
                failures.push(fail(w, "search", &"search failed"));
            }
        }
    }

    // select
    let mut selected: Vec<ImageRef> = Vec::new();
    let mut empty_selections = Vec::new();
    for repo in &repositories {
        match registry.list_tags(repo) {
            Ok(tags) => {
                let infos: Vec<TagInfo> = tags.iter().map(|t| TagInfo::new(t)).collect();
                let s = select_images(repo, &infos, config.selection);
                if s.empty {
                    empty_selections.push(repo.clone());
                }
                selected.extend(s.images);
            }
            Err(e) => failures.push(fail(repo, "tags", &e)),
        }
    }
    for r in &config.images {
        match r.parse::<ImageRef>() {
            Ok(i) => {
                if !repositories.contains(&i.repository) {
                    repositories.push(i.repository.clone());
                }
                selected.push(i);
            }
            Err(e) => failures.push(fail(r, "reference", &e)),
        }
    }
    let mut seen = BTreeSet::new();
    selected.retain(|i| seen.insert(i.clone()));

    // manifests
    let mut manifests: Vec<(ImageRef, Manifest)> = Vec::new();
    for image in &selected {
        match registry.fetch_manifest(image) {
            Ok(m) => manifests.push((image.clone(), m)),
            Err(e) => failures.push(fail(&image.to_string(), "manifest", &e)),
        }
    }
    let max_layer_bytes = manifests
        .iter()
        .flat_map(|(_, m)| m.layers.iter().map(|l| l.size_bytes))
        .max()
        .unwrap_or(0);
    if max_layer_bytes > config.eviction_budget_bytes {
        notes.push(format!(
            "largest layer ({max_layer_bytes} bytes) exceeds the eviction budget ({} bytes)",
            config.eviction_budget_bytes
        ));
    }

    // Dockerfiles come from repository metadata
    let mut dockerfiles: BTreeMap<String, DockerfileAst> = BTreeMap::new();
    if passes.contains(&Pass::DockerfileLint) {
        for repo in &repositories {
            match registry.fetch_repo_metadata(repo) {
                Ok(meta) => match meta.dockerfile_text {
                    Some(text) => {
                        dockerfiles.insert(repo.clone(), dockerfile::parse(&text));
                    }
                    None => notes.push(format!("{repo}: no Dockerfile available")),
                },
                Err(e) => failures.push(fail(repo, "metadata", &e)),
            }
        }
    }

    // fetch, compose, analyze
    let needs_layers = config.kb_update || passes.iter().any(|p| p.needs_layers());
    let plan = store.plan_batch(&manifests);
    let mut outcomes: Vec<Option<ImageOutcome>> = Vec::new();
    let mut counters = Counters::default();
    store
        .make_room(config.eviction_budget_bytes, 0)
        .map_err(|e| PipelineError::FatalConfig(e.to_string()))?;
    store.reset_peak();
    if needs_layers {
        let work = layer_work(config, registry, &store, &profiles)?;
        let analyzer = Analyzer {
            passes: passes.clone(),
            kb: &kb,
            keep_fs: config.kb_update,
            profiles: &profiles,
            compose_files: PathMatcher::new(&COMPOSE_PATTERNS).expect("valid patterns"),
            dockerfiles: &dockerfiles,
        };
        let jobs: Vec<(usize, ImageRef, Manifest)> = plan
            .images
            .iter()
            .enumerate()
            .map(|(i, p)| (i, p.image.clone(), p.manifest.clone()))
            .collect();
        outcomes = run_pools(&work, &analyzer, jobs, config.parallelism, &mut failures);

        let c = &work.counters;
        counters.layers_fetched = c.fetched.load(Ordering::Relaxed);
        counters.bytes_fetched = c.bytes.load(Ordering::Relaxed);
        counters.layer_scans = c.scans.load(Ordering::Relaxed);
        counters.scan_cache_hits = c.hits.load(Ordering::Relaxed);
        counters.layers_evicted = work.gate.evicted();
        counters.layers_total = plan.images.iter().map(|p| p.manifest.layers.len() as u64).sum();
        counters.layers_distinct = plan
            .images
            .iter()
            .flat_map(|p| p.manifest.layers.iter().map(|l| &l.digest))
            .collect::<BTreeSet<_>>()
            .len() as u64;
        counters.layers_reused = counters.layers_total - counters.layers_fetched;
    }
    let peak_store_bytes = store.peak_bytes();

    // the images that made it, in plan order
    let processed: Vec<(ImageRef, Manifest)> = if needs_layers {
        plan.images
            .iter()
            .zip(&outcomes)
            .filter(|(_, o)| o.is_some())
            .map(|(p, _)| (p.image.clone(), p.manifest.clone()))
            .collect()
    } else {
        plan.images
            .iter()
            .map(|p| (p.image.clone(), p.manifest.clone()))
            .collect()
    };
    let by_image: BTreeMap<ImageRef, ImageOutcome> = if needs_layers {
        plan.images
            .iter()
            .zip(outcomes)
            .filter_map(|(p, o)| Some((p.image.clone(), o?)))
            .collect()
    } else {
        BTreeMap::new()
    };

    let reports = config.output_dir.join("reports");
    let obs_dir = config.output_dir.join("observations");
    for d in [&reports, &obs_dir] {
        if d.exists() {
            fs::remove_dir_all(d)?;
        }
        fs::create_dir_all(d)?;
    }

    write_selection(&reports, &selected, &empty_selections)?;

    // sizes and figures
    if passes.contains(&Pass::Sizes) || passes.contains(&Pass::KbCoverage) {
        let corpus = Corpus {
            repositories: repositories.clone(),
            manifests: processed.clone(),
            file_hashes: needs_layers.then(|| {
                by_image
                    .iter()
                    .map(|(i, o)| (i.clone(), o.file_hashes.clone()))
                    .collect()
            }),
            coverage: passes.contains(&Pass::KbCoverage).then(|| {
                by_image
                    .iter()
                    .filter_map(|(i, o)| Some((i.clone(), o.coverage?)))
                    .collect()
            }),
        };
        match report_figures(&corpus) {
            Ok(bundle) => bundle.write_to(&reports)?,
            Err(e) => {
                notes.push(e.to_string());
                let rows = report_repo_sizes(&repositories, &processed);
                write_report(&reports.join("repo-sizes.csv"), |w| Ok(write_sizes_csv(&rows, w)?))?;
            }
        }
    }

    if passes.contains(&Pass::KbCoverage) {
        write_report(&reports.join("kb-anomalies.csv"), |w| {
            let mut out = csv::Writer::from_writer(w);
            out.write_record(["image", "path", "content_hash", "known_hash_count"])?;
            for (image, o) in &by_image {
                for a in &o.anomalies {
                    out.write_record([
                        image.to_string(),
                        a.record.path.clone(),
                        a.record
                            .content_hash
                            .as_ref()
                            .map(|d| d.to_string())
                            .unwrap_or_default(),
                        a.known_hash_count.to_string(),
                    ])?;
                }
            }
            out.flush()?;
            Ok(())
        })?;
    }

    // Dockerfile ENV/EXPOSE settings count once per processed image of the repository
    let mut env_obs: Vec<ParamObservation> = Vec::new();
    if passes.contains(&Pass::DockerfileLint) {
        for (image, _) in &processed {
            if let Some(ast) = dockerfiles.get(&image.repository) {
                env_obs.extend(harvest_env(ast, image));
            }
        }
        env_obs.sort();
        write_dockerfile_reports(&reports, &dockerfiles)?;
        write_report(&obs_dir.join("dockerfile-env.jsonl"), |w| {
            Ok(write_observations_jsonl(&env_obs, w)?)
        })?;
    }

    let mut observation_count = env_obs.len() as u64;
    if passes.contains(&Pass::ConfigMine) {
        let mut config_obs: Vec<ParamObservation> =
            by_image.values().flat_map(|o| o.observations.iter().cloned()).collect();
        config_obs.sort();
        observation_count += config_obs.len() as u64;
        write_report(&obs_dir.join("config.jsonl"), |w| {
            Ok(write_observations_jsonl(&config_obs, w)?)
        })?;

        let all: Vec<&ParamObservation> = config_obs.iter().chain(&env_obs).collect();
        let stats = aggregate_usage(all.iter().copied(), true);
        write_report(&reports.join("config-usage.csv"), |w| Ok(write_usage_csv(&stats, w)?))?;
        let tx = transactions(all.iter().copied());
        let combos = mine_combinations(&tx, config.combination_size, config.combination_min_support);
        write_report(&reports.join("config-combinations.csv"), |w| {
            Ok(write_combinations_csv(&combos, w)?)
        })?;

        let diff = diff_across_versions(&stats);
        if let Ok(d) = &diff {
            if d.lexicographic_fallback {
                notes.push("version diff: tags were not all version-like; ordered lexicographically".into());
            }
        }
        write_report(&reports.join("config-version-diff.csv"), |w| {
            let mut out = csv::Writer::from_writer(w);
            out.write_record([
                "from",
                "to",
                "change",
                "software_id",
                "parameter",
                "from_value",
                "to_value",
            ])?;
            for step in diff.iter().flat_map(|d| &d.steps) {
                let row = |change: &str, sw: &str, p: &str, a: &str, b: &str| {
                    [step.from.as_str(), step.to.as_str(), change, sw, p, a, b].map(String::from)
                };
                for k in &step.added {
                    out.write_record(row("added", &k.software_id, &k.parameter, "", ""))?;
                }
                for k in &step.removed {
                    out.write_record(row("removed", &k.software_id, &k.parameter, "", ""))?;
                }
                for s in &step.value_shift {
                    out.write_record(row(
                        "value-shift",
                        &s.parameter.software_id,
                        &s.parameter.parameter,
                        &s.from_value,
                        &s.to_value,
                    ))?;
                }
            }
            out.flush()?;
            Ok(())
        })?;

        write_report(&reports.join("dependency-candidates.csv"), |w| {
            let mut out = csv::Writer::from_writer(w);
            out.write_record(["image", "software_id", "parameter", "value", "evidence", "detail"])?;
            for (image, o) in &by_image {
                for c in &o.candidates {
                    let (kind, detail) = match &c.evidence {
                        Evidence::Path { path } => ("path", path.clone()),
                        Evidence::ExposedPort { port } => ("exposed-port", port.to_string()),
                        Evidence::ComposePort { port, service } => ("compose-port", format!("{service}:{port}")),
                        Evidence::ServiceName { service } => ("service-name", service.clone()),
                    };
                    let ob = &c.observation;
                    out.write_record([
                        image.to_string(),
                        ob.software_id.clone(),
                        ob.parameter.clone(),
                        ob.value.clone(),
                        kind.to_string(),
                        detail,
                    ])?;
                }
            }
            out.flush()?;
            Ok(())
        })?;

        let uncaptured: usize = by_image.values().map(|o| o.uncaptured_configs.len()).sum();
        if uncaptured > 0 {
            notes.push(format!("{uncaptured} configuration files were too large to parse"));
        }
    }

    if passes.contains(&Pass::ComposeGraph) {
        write_compose_reports(&reports, &obs_dir, &by_image)?;
    }

    if config.kb_update {
        if let Some(path) = &kb_path {
            for (image, o) in &by_image {
                if let Some(fs) = &o.fs {
                    kb.add_image(image, fs);
                }
            }
            kb.save(path).map_err(|e| io::Error::other(e.to_string()))?;
        } else {
            notes.push("kb_update is set but kb_path is not; nothing saved".into());
        }
    }

    failures.sort();
    let images_failed = failures
        .iter()
        .filter(|f| matches!(f.stage.as_str(), "manifest" | "layer" | "compose" | "reference"))
        .count() as u64;
    let summary = RunSummary {
        passes: passes.into_iter().collect(),
        repositories: repositories.len() as u64,
        images_selected: selected.len() as u64,
        images_processed: processed.len() as u64,
        images_failed,
        empty_selections,
        counters,
        eviction_budget_bytes: config.eviction_budget_bytes,
        max_layer_bytes,
        peak_store_bytes,
        observations: observation_count,
        failures,
        notes,
    };
    write_report(&config.output_dir.join("run-summary.json"), |w| {
        serde_json::to_writer_pretty(&mut *w, &summary)?;
        w.write_all(b"\n")?;
        Ok(())
    })?;
    Ok(summary)
}

fn run_pools(
    work: &LayerWork<'_>,
    analyzer: &Analyzer<'_>,
    jobs: Vec<(usize, ImageRef, Manifest)>,
    degree: usize,
    failures: &mut Vec<Failure>,
) -> Vec<Option<ImageOutcome>> {
    let n = jobs.len();
    let (job_tx, job_rx) = crossbeam_channel::unbounded();
    let (queue_tx, queue_rx) = crossbeam_channel::bounded::<ComposedImage>(degree);
    let (done_tx, done_rx) = crossbeam_channel::unbounded::<Outcome>();
    for j in jobs {
        job_tx.send(j).expect("receiver alive");
    }
    drop(job_tx);

    std::thread::scope(|s| {
        for _ in 0..degree {
            let (job_rx, queue_tx, done_tx) = (job_rx.clone(), queue_tx.clone(), done_tx.clone());
            s.spawn(move || {
                for (index, image, manifest) in job_rx {
                    match compose_image(work, &image, &manifest) {
                        Ok((fs, files)) => {
                            let item = ComposedImage {
                                index,
                                image,
                                fs,
                                files,
                            };
                            if queue_tx.send(item).is_err() {
                                return;
                            }
                        }
                        Err(f) => {
                            let _ = done_tx.send(Outcome::Failed(f));
                        }
                    }
                }
            });
        }
        for _ in 0..degree {
            let (queue_rx, done_tx) = (queue_rx.clone(), done_tx.clone());
            s.spawn(move || {
                for item in queue_rx {
                    let index = item.index;
                    let _ = done_tx.send(Outcome::Done(index, Box::new(analyzer.run(item))));
                }
            });
        }
        drop(queue_tx);
        drop(queue_rx);
        drop(done_tx);
    });

    let mut out: Vec<Option<ImageOutcome>> = (0..n).map(|_| None).collect();
    for o in done_rx {
        match o {
            Outcome::Done(i, r) => out[i] = Some(*r),
            Outcome::Failed(f) => {
                log::warn!("{} failed at {}: {}", f.subject, f.stage, f.message);
                failures.push(f);
            }
        }
    }
    out
}

fn write_selection(dir: &Path, selected: &[ImageRef], empty: &[String]) -> io::Result<()> {
    let mut rows: Vec<(String, String)> = selected.iter().map(|i| (i.repository.clone(), i.tag.clone())).collect();
    rows.extend(empty.iter().map(|r| (r.clone(), String::new())));
    rows.sort();
    write_report(&dir.join("selection.csv"), |w| {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["repository", "tag"])?;
        for (r, t) in &rows {
            out.write_record([r, t])?;
        }
        out.flush()?;
        Ok(())
    })
}

fn write_dockerfile_reports(dir: &Path, dockerfiles: &BTreeMap<String, DockerfileAst>) -> io::Result<()> {
    write_report(&dir.join("dockerfile-lint.csv"), |w| {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["repository", "rule_id", "severity", "line", "message"])?;
        for (repo, ast) in dockerfiles {
            for f in lint_reproducibility(ast) {
                let sev = match f.severity {
                    dockerfile::Severity::Error => "error",
                    dockerfile::Severity::Warning => "warning",
                };
                out.write_record([repo.as_str(), &f.rule_id, sev, &f.line.to_string(), &f.message])?;
            }
        }
        out.flush()?;
        Ok(())
    })?;
    write_report(&dir.join("dockerfile-layers.csv"), |w| {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "repository",
            "instructions",
            "fs_layers",
            "stages",
            "external_bases",
            "findings",
        ])?;
        for (repo, ast) in dockerfiles {
            let est = estimate_layers(ast);
            let bases: Vec<String> = dockerfile::base_chain(ast)
                .unwrap_or_default()
                .into_iter()
                .filter_map(|b| match b {
                    StageBase::External(r) => Some(r.to_string()),
                    _ => None,
                })
                .collect();
            out.write_record([
                repo.clone(),
                est.total_instruction_count.to_string(),
                est.fs_layer_count.to_string(),
                ast.stages.len().to_string(),
                bases.join(" "),
                ast.findings.len().to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    })
}

#[derive(Serialize)]
struct ComposeRecord<'a> {
    image: &'a ImageRef,
    path: &'a str,
    graph: &'a OrchestrationGraph,
}

fn write_compose_reports(
    reports: &Path,
    obs_dir: &Path,
    by_image: &BTreeMap<ImageRef, ImageOutcome>,
) -> io::Result<()> {
    write_report(&reports.join("compose-services.csv"), |w| {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["image", "file", "service", "image_ref", "build", "ports"])?;
        for (image, o) in by_image {
            for (path, g) in &o.compose {
                for s in g.services.values() {
                    let ports: Vec<String> = s
                        .ports
                        .iter()
                        .map(|p| match &p.published {
                            Some(h) => format!("{h}:{}/{}", p.target, p.protocol),
                            None => format!("{}/{}", p.target, p.protocol),
                        })
                        .collect();
                    out.write_record([
                        image.to_string(),
                        path.clone(),
                        s.name.clone(),
                        s.image_raw.clone().unwrap_or_default(),
                        s.build.clone().unwrap_or_default(),
                        ports.join(" "),
                    ])?;
                }
            }
        }
        out.flush()?;
        Ok(())
    })?;
    write_report(&reports.join("compose-edges.csv"), |w| {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["image", "file", "from", "to", "kind", "declared"])?;
        for (image, o) in by_image {
            for (path, g) in &o.compose {
                let edges = g
                    .edges
                    .iter()
                    .map(|e| (e, true))
                    .chain(g.dangling.iter().map(|e| (e, false)));
                for (e, declared) in edges {
                    let kind = match e.kind {
                        crate::confmine::EdgeKind::DependsOn => "depends_on",
                        crate::confmine::EdgeKind::Links => "links",
                    };
                    out.write_record([
                        image.to_string(),
                        path.clone(),
                        e.from.clone(),
                        e.to.clone(),
                        kind.to_string(),
                        declared.to_string(),
                    ])?;
                }
            }
        }
        out.flush()?;
        Ok(())
    })?;
    write_report(&obs_dir.join("compose.jsonl"), |w| {
        for (image, o) in by_image {
            for (path, graph) in &o.compose {
                serde_json::to_writer(&mut *w, &ComposeRecord { image, path, graph })?;
                w.write_all(b"\n")?;
            }
            for (path, err) in &o.compose_errors {
                serde_json::to_writer(
                    &mut *w,
                    &serde_json::json!({ "image": image, "path": path, "error": err }),
                )?;
                w.write_all(b"\n")?;
            }
        }
        Ok(())
    })
}

/// Summary line for logs.
pub fn describe(summary: &RunSummary) -> String {
    format!(
        "{} images processed, {} failed; layers: {} fetched, {} reused, {} scanned, {} cache hits; peak store {} bytes (budget {})",
        summary.images_processed,
        summary.images_failed,
        summary.counters.layers_fetched,
        summary.counters.layers_reused,
        summary.counters.layer_scans,
        summary.counters.scan_cache_hits,
        summary.peak_store_bytes,
        summary.eviction_budget_bytes,
    )
}
