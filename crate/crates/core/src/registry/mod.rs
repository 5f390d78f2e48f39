//! Registry access: tags, manifests, layer blobs, repository metadata and
//! dictionary-based repository discovery.
//!
//! Two backends share the [`Registry`] trait: [`HttpRegistry`] speaks the
//! Docker Registry HTTP API v2 (plus the hub-style search and repository
//! endpoints), and [`FixtureRegistry`] serves the same data from a directory
//! laid out as
//!
//! ```text
//! <root>/index.json
//! <root>/manifests/<digest>
//! <root>/blobs/sha256/<hex>
//! ```
//!
//! Every manifest and blob returned is checked against its digest; a payload
//! that does not hash to its declared digest is an error, never a result.

use std::collections::HashSet;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::digest::{Digest, HashingWriter};
use crate::reference::{self, ImageRef};

mod fixture;
mod http;

pub use fixture::{FixtureBuilder, FixtureIndex, FixtureRegistry, FixtureRepo, FixtureSearch, FixtureTag};
pub use http::{HttpRegistry, RetryPolicy, TOKEN_ENV};

pub const MEDIA_DOCKER_MANIFEST: &str = "application/vnd.docker.distribution.manifest.v2+json";
pub const MEDIA_DOCKER_LIST: &str = "application/vnd.docker.distribution.manifest.list.v2+json";
pub const MEDIA_OCI_MANIFEST: &str = "application/vnd.oci.image.manifest.v1+json";
pub const MEDIA_OCI_INDEX: &str = "application/vnd.oci.image.index.v1+json";
pub const MEDIA_DOCKER_LAYER: &str = "application/vnd.docker.image.rootfs.diff.tar.gzip";
pub const MEDIA_DOCKER_CONFIG: &str = "application/vnd.docker.container.image.v1+json";

/// Accept header values sent for manifest requests.
pub const MANIFEST_ACCEPT: [&str; 4] = [
    MEDIA_DOCKER_MANIFEST,
    MEDIA_DOCKER_LIST,
    MEDIA_OCI_MANIFEST,
    MEDIA_OCI_INDEX,
];

#[derive(Debug, thiserror::Error)]
pub enum RegistryError {
    #[error("repository not found: {0}")]
    RepoNotFound(String),
    #[error("manifest not found: {0}")]
    ManifestNotFound(String),
    #[error("blob not found: {0}")]
    BlobNotFound(Digest),
    #[error("authentication required: {0}")]
    AuthRequired(String),
    #[error("transient registry failure: {0}")]
    Transient(String),
    #[error("digest mismatch: expected {expected}, got {actual}")]
    DigestMismatch { expected: Digest, actual: Digest },
    #[error("unsupported manifest media type {0:?}")]
    UnsupportedMediaType(String),
    #[error("no manifest for platform {0} in manifest list")]
    PlatformNotFound(String),
    #[error("invalid repository name {0:?}")]
    InvalidRepository(String),
    #[error("malformed registry response: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl RegistryError {
    pub fn is_transient(&self) -> bool {
        matches!(self, RegistryError::Transient(_))
    }
}

pub type Result<T, E = RegistryError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerDescriptor {
    pub digest: Digest,
    pub size_bytes: u64,
    pub media_type: String,
}

/// An image manifest with layers ordered base first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    /// Digest of the exact manifest bytes served.
    pub digest: Digest,
    pub schema_version: u32,
    pub media_type: String,
    pub config_digest: Digest,
    pub layers: Vec<LayerDescriptor>,
}

impl Manifest {
    pub fn total_size(&self) -> u64 {
        self.layers.iter().map(|l| l.size_bytes).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RepoMetadata {
    pub name: String,
    pub description: Option<String>,
    pub tags: Vec<String>,
    pub update_time: Option<String>,
    pub pull_count: Option<u64>,
    pub dockerfile_text: Option<String>,
    /// Fields the registry did not provide.
    #[serde(default)]
    pub unavailable: Vec<String>,
}

/// Manifest bytes as served, before parsing.
#[derive(Debug, Clone)]
pub struct RawManifest {
    pub bytes: Vec<u8>,
    pub content_type: Option<String>,
    /// Digest the registry claims for these bytes (e.g. `Docker-Content-Digest`).
    pub declared_digest: Option<Digest>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SearchPage {
    pub results: Vec<String>,
    pub num_pages: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Platform {
    pub os: String,
    pub architecture: String,
}

impl Default for Platform {
    fn default() -> Self {
        Platform {
            os: "linux".into(),
            architecture: "amd64".into(),
        }
    }
}

impl std::fmt::Display for Platform {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.os, self.architecture)
    }
}

/// Backend-level access to a registry. Implementations must be safe to share
/// across worker threads.
pub trait Registry: Send + Sync {
    fn list_tags(&self, repo: &str) -> Result<Vec<String>>;

    fn fetch_manifest_raw(&self, repo: &str, reference: &str) -> Result<RawManifest>;

    /// Streams the blob into `sink`, returning the byte count. The bytes are
    /// hashed on the way through; on mismatch the sink content is invalid and
    /// `DigestMismatch` is returned.
    fn fetch_layer(&self, repo: &str, digest: &Digest, sink: &mut dyn Write) -> Result<u64>;

    fn fetch_repo_metadata(&self, repo: &str) -> Result<RepoMetadata>;

    fn search(&self, query: &str, page: u32) -> Result<SearchPage>;

    fn platform(&self) -> Platform {
        Platform::default()
    }

    fn fetch_manifest(&self, image: &ImageRef) -> Result<Manifest> {
        let raw = self.fetch_manifest_raw(&image.repository, &image.manifest_reference())?;
        let requested = image.digest.clone();
        let doc = decode_manifest(&raw, requested.as_ref())?;
        match doc {
            ManifestDoc::Image(m) => Ok(m),
            ManifestDoc::List(entries) => {
                let platform = self.platform();
                let entry = entries
                    .iter()
                    .find(|e| e.os == platform.os && e.architecture == platform.architecture)
                    .ok_or_else(|| RegistryError::PlatformNotFound(platform.to_string()))?;
                let raw = self.fetch_manifest_raw(&image.repository, entry.digest.as_str())?;
                match decode_manifest(&raw, Some(&entry.digest))? {
                    ManifestDoc::Image(m) => Ok(m),
                    ManifestDoc::List(_) => Err(RegistryError::Malformed(
                        "manifest list entry points at another list".into(),
                    )),
                }
            }
        }
    }
}

pub(crate) fn check_repo(repo: &str) -> Result<()> {
    if reference::is_valid_repository(repo) {
        Ok(())
    } else {
        Err(RegistryError::InvalidRepository(repo.to_string()))
    }
}

/// Copies `reader` into `sink`, verifying the digest of everything copied.
pub(crate) fn copy_verified(reader: &mut dyn io::Read, expected: &Digest, sink: &mut dyn Write) -> Result<u64> {
    let mut w = HashingWriter::new(sink);
    io::copy(reader, &mut w)?;
    w.flush()?;
    let (_, actual, n) = w.finish();
    if &actual != expected {
        return Err(RegistryError::DigestMismatch {
            expected: expected.clone(),
            actual,
        });
    }
    Ok(n)
}

#[derive(Debug, Clone)]
pub(crate) struct ListEntry {
    pub digest: Digest,
    pub os: String,
    pub architecture: String,
}

pub(crate) enum ManifestDoc {
    Image(Manifest),
    List(Vec<ListEntry>),
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct WireDescriptor {
    #[serde(default)]
    media_type: Option<String>,
    digest: String,
    #[serde(default)]
    size: u64,
    #[serde(default)]
    platform: Option<WirePlatform>,
}

#[derive(Deserialize)]
struct WirePlatform {
    os: String,
    architecture: String,
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct WireManifest {
    schema_version: u32,
    #[serde(default)]
    media_type: Option<String>,
    #[serde(default)]
    config: Option<WireDescriptor>,
    #[serde(default)]
    layers: Option<Vec<WireDescriptor>>,
    #[serde(default)]
    manifests: Option<Vec<WireDescriptor>>,
}

fn parse_digest(s: &str) -> Result<Digest> {
    Digest::parse(s).map_err(|e| RegistryError::Malformed(e.to_string()))
}

pub(crate) fn decode_manifest(raw: &RawManifest, requested: Option<&Digest>) -> Result<ManifestDoc> {
    let actual = Digest::of(&raw.bytes);
    for expected in [requested, raw.declared_digest.as_ref()].into_iter().flatten() {
        if *expected != actual {
            return Err(RegistryError::DigestMismatch {
                expected: expected.clone(),
                actual,
            });
        }
    }
    let wire: WireManifest =
        serde_json::from_slice(&raw.bytes).map_err(|e| RegistryError::Malformed(format!("manifest json: {e}")))?;
    let media_type = wire
        .media_type
        .clone()
        .or_else(|| {
            raw.content_type
                .as_deref()
                .map(|c| c.split(';').next().unwrap_or(c).trim().to_string())
        })
        .or_else(|| {
            // OCI allows omitting mediaType; infer from shape.
            if wire.manifests.is_some() {
                Some(MEDIA_OCI_INDEX.to_string())
            } else if wire.layers.is_some() {
                Some(MEDIA_OCI_MANIFEST.to_string())
            } else {
                None
            }
        })
        .unwrap_or_default();

    match media_type.as_str() {
        MEDIA_DOCKER_MANIFEST | MEDIA_OCI_MANIFEST => {
            let config = wire
                .config
                .ok_or_else(|| RegistryError::Malformed("manifest without config".into()))?;
            let layers = wire
                .layers
                .unwrap_or_default()
                .into_iter()
                .map(|l| {
                    Ok(LayerDescriptor {
                        digest: parse_digest(&l.digest)?,
                        size_bytes: l.size,
                        media_type: l.media_type.unwrap_or_default(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(ManifestDoc::Image(Manifest {
                digest: actual,
                schema_version: wire.schema_version,
                media_type,
                config_digest: parse_digest(&config.digest)?,
                layers,
            }))
        }
        MEDIA_DOCKER_LIST | MEDIA_OCI_INDEX => {
            let entries = wire
                .manifests
                .unwrap_or_default()
                .into_iter()
                .filter_map(|m| {
                    let p = m.platform?;
                    Some(parse_digest(&m.digest).map(|digest| ListEntry {
                        digest,
                        os: p.os,
                        architecture: p.architecture,
                    }))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(ManifestDoc::List(entries))
        }
        other => Err(RegistryError::UnsupportedMediaType(other.to_string())),
    }
}

/// Iterator over repository names found by searching each dictionary word.
///
/// Names are emitted in first-seen order without duplicates. A word whose
/// search fails is logged and skipped.
pub struct Discovery<'a, R: Registry + ?Sized> {
    registry: &'a R,
    words: std::vec::IntoIter<String>,
    page_limit: u32,
    seen: HashSet<String>,
    pending: std::vec::IntoIter<String>,
    pub failed_words: Vec<String>,
}

impl<R: Registry + ?Sized> Discovery<'_, R> {
    fn search_word(&mut self, word: &str) -> Vec<String> {
        let mut out = Vec::new();
        for page in 1..=self.page_limit {
            match self.registry.search(word, page) {
                Ok(p) => {
                    let empty = p.results.is_empty();
                    out.extend(p.results);
                    if empty || page >= p.num_pages {
                        break;
                    }
                }
                Err(e) => {
                    log::warn!("search for {word:?} page {page} failed: {e}");
                    self.failed_words.push(word.to_string());
                    break;
                }
            }
        }
        out
    }
}

impl<R: Registry + ?Sized> Iterator for Discovery<'_, R> {
    type Item = String;

    fn next(&mut self) -> Option<String> {
        loop {
            for name in self.pending.by_ref() {
                if reference::is_valid_repository(&name) && self.seen.insert(name.clone()) {
                    return Some(name);
                }
            }
            let word = self.words.next()?;
            self.pending = self.search_word(&word).into_iter();
        }
    }
}

/// Dictionary-based discovery. Panics if `page_limit` is zero or the
/// dictionary is empty, since neither can produce results.
pub fn discover_repositories<'a, R: Registry + ?Sized>(
    registry: &'a R,
    dictionary: &[String],
    page_limit: u32,
) -> Discovery<'a, R> {
    assert!(page_limit >= 1, "page_limit must be at least 1");
    assert!(!dictionary.is_empty(), "dictionary must not be empty");
    Discovery {
        registry,
        words: Vec::from(dictionary).into_iter(),
        page_limit,
        seen: HashSet::new(),
        pending: Vec::new().into_iter(),
        failed_words: Vec::new(),
    }
}

/// Parses a registry endpoint string: `fixture:<dir>` or an `http(s)://` URL.
pub fn open_endpoint(endpoint: &str) -> Result<Box<dyn Registry>> {
    if let Some(dir) = endpoint.strip_prefix("fixture:") {
        Ok(Box::new(FixtureRegistry::open(dir)?))
    } else if endpoint.starts_with("http://") || endpoint.starts_with("https://") {
        Ok(Box::new(HttpRegistry::new(endpoint)))
    } else {
        Err(RegistryError::Malformed(format!(
            "unrecognized registry endpoint {endpoint:?} (expected fixture:<dir> or http(s)://)"
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(json: &str) -> RawManifest {
        RawManifest {
            bytes: json.as_bytes().to_vec(),
            content_type: None,
            declared_digest: None,
        }
    }

    #[test]
    fn decodes_oci_manifest_without_media_type() {
        let l = Digest::of(b"l");
        let c = Digest::of(b"c");
        let json = format!(
            r#"{{"schemaVersion":2,"config":{{"digest":"{c}","size":1}},"layers":[{{"digest":"{l}","size":5,"mediaType":"x"}}]}}"#
        );
        match decode_manifest(&raw(&json), None).unwrap() {
            ManifestDoc::Image(m) => {
                assert_eq!(m.media_type, MEDIA_OCI_MANIFEST);
                assert_eq!(m.layers.len(), 1);
                assert_eq!(m.layers[0].size_bytes, 5);
                assert_eq!(m.digest, Digest::of(json.as_bytes()));
            }
            ManifestDoc::List(_) => panic!("expected image manifest"),
        }
    }

    #[test]
    fn schema1_is_unsupported() {
        let json = r#"{"schemaVersion":1,"mediaType":"application/vnd.docker.distribution.manifest.v1+prettyjws"}"#;
        assert!(matches!(
            decode_manifest(&raw(json), None),
            Err(RegistryError::UnsupportedMediaType(_))
        ));
    }

    #[test]
    fn declared_digest_is_checked() {
        let mut r = raw(r#"{"schemaVersion":2}"#);
        r.declared_digest = Some(Digest::of(b"other"));
        assert!(matches!(
            decode_manifest(&r, None),
            Err(RegistryError::DigestMismatch { .. })
        ));
    }
}
