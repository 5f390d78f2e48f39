//! Directory-backed registry with the same semantics as the HTTP backend.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    check_repo, copy_verified, RawManifest, Registry, RegistryError, RepoMetadata, Result, SearchPage,
    MEDIA_DOCKER_CONFIG, MEDIA_DOCKER_LAYER, MEDIA_DOCKER_MANIFEST,
};
use crate::digest::Digest;

const DEFAULT_PAGE_SIZE: u32 = 25;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FixtureIndex {
    #[serde(default)]
    pub repositories: BTreeMap<String, FixtureRepo>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub search: Option<FixtureSearch>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FixtureRepo {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub update_time: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pull_count: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dockerfile: Option<String>,
    /// Tags in registry order.
    #[serde(default)]
    pub tags: Vec<FixtureTag>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureTag {
    pub tag: String,
    pub digest: Digest,
}

/// Search index: a query matches every listed name containing it as a substring.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FixtureSearch {
    #[serde(default)]
    pub page_size: Option<u32>,
    #[serde(default)]
    pub repositories: Option<Vec<String>>,
}

#[derive(Debug)]
pub struct FixtureRegistry {
    root: PathBuf,
    index: FixtureIndex,
}

impl FixtureRegistry {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let text = fs::read(root.join("index.json"))?;
        let index = serde_json::from_slice(&text).map_err(|e| RegistryError::Malformed(format!("index.json: {e}")))?;
        Ok(FixtureRegistry { root, index })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn index(&self) -> &FixtureIndex {
        &self.index
    }

    pub fn blob_path(&self, digest: &Digest) -> PathBuf {
        self.root.join("blobs").join("sha256").join(digest.hex())
    }

    pub fn manifest_path(&self, digest: &Digest) -> PathBuf {
        self.root.join("manifests").join(digest.as_str())
    }

    fn repo(&self, repo: &str) -> Result<&FixtureRepo> {
        check_repo(repo)?;
        self.index
            .repositories
            .get(repo)
            .ok_or_else(|| RegistryError::RepoNotFound(repo.to_string()))
    }

    pub fn page_size(&self) -> u32 {
        self.index
            .search
            .as_ref()
            .and_then(|s| s.page_size)
            .unwrap_or(DEFAULT_PAGE_SIZE)
            .max(1)
    }

    /// All names matching `query`, in index order.
    pub fn search_all(&self, query: &str) -> Vec<String> {
        let names: Vec<&String> = match self.index.search.as_ref().and_then(|s| s.repositories.as_ref()) {
            Some(list) => list.iter().collect(),
            None => self.index.repositories.keys().collect(),
        };
        names.into_iter().filter(|n| n.contains(query)).cloned().collect()
    }
}

impl Registry for FixtureRegistry {
    fn list_tags(&self, repo: &str) -> Result<Vec<String>> {
        let mut out: Vec<String> = Vec::new();
        for t in &self.repo(repo)?.tags {
            if !out.contains(&t.tag) {
                out.push(t.tag.clone());
            }
        }
        Ok(out)
    }

    fn fetch_manifest_raw(&self, repo: &str, reference: &str) -> Result<RawManifest> {
        let r = self.repo(repo)?;
        let digest = match Digest::parse(reference) {
            Ok(d) => d,
            Err(_) => r
                .tags
                .iter()
                .find(|t| t.tag == reference)
                .map(|t| t.digest.clone())
                .ok_or_else(|| RegistryError::ManifestNotFound(format!("{repo}:{reference}")))?,
        };
        let bytes = match fs::read(self.manifest_path(&digest)) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return Err(RegistryError::ManifestNotFound(format!("{repo}@{digest}")))
            }
            Err(e) => return Err(e.into()),
        };
        Ok(RawManifest {
            bytes,
            content_type: None,
            declared_digest: Some(digest),
        })
    }

    fn fetch_layer(&self, _repo: &str, digest: &Digest, sink: &mut dyn Write) -> Result<u64> {
        let mut file = match File::open(self.blob_path(digest)) {
            Ok(f) => f,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Err(RegistryError::BlobNotFound(digest.clone())),
            Err(e) => return Err(e.into()),
        };
        copy_verified(&mut file, digest, sink)
    }

    fn fetch_repo_metadata(&self, repo: &str) -> Result<RepoMetadata> {
        let r = self.repo(repo)?;
        let mut unavailable = Vec::new();
        if r.description.is_none() {
            unavailable.push("description".to_string());
        }
        if r.update_time.is_none() {
            unavailable.push("update_time".to_string());
        }
        if r.pull_count.is_none() {
            unavailable.push("pull_count".to_string());
        }
        Ok(RepoMetadata {
            name: repo.to_string(),
            description: r.description.clone(),
            tags: self.list_tags(repo)?,
            update_time: r.update_time.clone(),
            pull_count: r.pull_count,
            dockerfile_text: r.dockerfile.clone(),
            unavailable,
        })
    }

    fn search(&self, query: &str, page: u32) -> Result<SearchPage> {
        let all = self.search_all(query);
        let size = self.page_size() as usize;
        let num_pages = all.len().div_ceil(size) as u32;
        let start = (page.max(1) as usize - 1) * size;
        Ok(SearchPage {
            results: all.into_iter().skip(start).take(size).collect(),
            num_pages,
        })
    }
}

/// Writes a fixture registry directory.
pub struct FixtureBuilder {
    root: PathBuf,
    index: FixtureIndex,
}

impl FixtureBuilder {
    pub fn new(root: impl AsRef<Path>) -> io::Result<Self> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(root.join("manifests"))?;
        fs::create_dir_all(root.join("blobs").join("sha256"))?;
        Ok(FixtureBuilder {
            root,
            index: FixtureIndex::default(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn add_blob(&mut self, bytes: &[u8]) -> io::Result<Digest> {
        let d = Digest::of(bytes);
        fs::write(self.root.join("blobs").join("sha256").join(d.hex()), bytes)?;
        Ok(d)
    }

    /// Stores manifest bytes verbatim and returns their digest.
    pub fn add_manifest_bytes(&mut self, bytes: &[u8]) -> io::Result<Digest> {
        let d = Digest::of(bytes);
        fs::write(self.root.join("manifests").join(d.as_str()), bytes)?;
        Ok(d)
    }

    pub fn repo_mut(&mut self, repo: &str) -> &mut FixtureRepo {
        self.index.repositories.entry(repo.to_string()).or_default()
    }

    /// Adds an image built from the given layer blobs (base first) and tags it.
    pub fn add_image(&mut self, repo: &str, tag: &str, layers: &[Vec<u8>]) -> io::Result<Digest> {
        let config = serde_json::json!({
            "architecture": "amd64",
            "os": "linux",
            "rootfs": {"type": "layers", "diff_ids": []},
        });
        let config_bytes = serde_json::to_vec(&config)?;
        let config_digest = self.add_blob(&config_bytes)?;
        let mut descs = Vec::new();
        for l in layers {
            let d = self.add_blob(l)?;
            descs.push(serde_json::json!({
                "mediaType": MEDIA_DOCKER_LAYER,
                "size": l.len(),
                "digest": d.as_str(),
            }));
        }
        self.add_image_from_descriptors(repo, tag, &config_digest, config_bytes.len() as u64, descs)
    }

    /// Adds an image whose layer descriptors are given directly (blobs need not exist).
    pub fn add_image_from_descriptors(
        &mut self,
        repo: &str,
        tag: &str,
        config_digest: &Digest,
        config_size: u64,
        layers: Vec<serde_json::Value>,
    ) -> io::Result<Digest> {
        let manifest = serde_json::json!({
            "schemaVersion": 2,
            "mediaType": MEDIA_DOCKER_MANIFEST,
            "config": {
                "mediaType": MEDIA_DOCKER_CONFIG,
                "size": config_size,
                "digest": config_digest.as_str(),
            },
            "layers": layers,
        });
        let bytes = serde_json::to_vec_pretty(&manifest)?;
        let digest = self.add_manifest_bytes(&bytes)?;
        self.tag(repo, tag, &digest);
        Ok(digest)
    }

    pub fn tag(&mut self, repo: &str, tag: &str, digest: &Digest) {
        let r = self.repo_mut(repo);
        r.tags.retain(|t| t.tag != tag);
        r.tags.push(FixtureTag {
            tag: tag.to_string(),
            digest: digest.clone(),
        });
    }

    pub fn set_search(&mut self, search: FixtureSearch) {
        self.index.search = Some(search);
    }

    pub fn index(&self) -> &FixtureIndex {
        &self.index
    }

    pub fn finish(self) -> io::Result<PathBuf> {
        let text = serde_json::to_vec_pretty(&self.index)?;
        fs::write(self.root.join("index.json"), text)?;
        Ok(self.root)
    }
}
