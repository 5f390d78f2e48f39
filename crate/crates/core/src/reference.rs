//! Image references: `repository[:tag][@digest]`.

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::digest::Digest;

pub const DEFAULT_TAG: &str = "latest";

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum InvalidReference {
    #[error("invalid repository name {0:?}")]
    Repository(String),
    #[error("invalid tag {0:?}")]
    Tag(String),
    #[error("invalid digest in reference {0:?}")]
    Digest(String),
}

fn repo_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^[a-z0-9]+(?:[._/-][a-z0-9]+)*$").unwrap())
}

fn tag_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^[A-Za-z0-9_][A-Za-z0-9_.-]{0,127}$").unwrap())
}

pub fn is_valid_repository(name: &str) -> bool {
    repo_re().is_match(name)
}

pub fn is_valid_tag(tag: &str) -> bool {
    tag_re().is_match(tag)
}

/// Identity of one image: repository plus tag, optionally pinned by digest.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ImageRef {
    pub repository: String,
    pub tag: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub digest: Option<Digest>,
}

impl ImageRef {
    pub fn new(repository: &str, tag: &str) -> Result<Self, InvalidReference> {
        if !is_valid_repository(repository) {
            return Err(InvalidReference::Repository(repository.to_string()));
        }
        if !is_valid_tag(tag) {
            return Err(InvalidReference::Tag(tag.to_string()));
        }
        Ok(ImageRef {
            repository: repository.to_string(),
            tag: tag.to_string(),
            digest: None,
        })
    }

    pub fn with_digest(mut self, digest: Digest) -> Self {
        self.digest = Some(digest);
        self
    }

    /// The string used as `<ref>` in `/v2/<name>/manifests/<ref>`.
    pub fn manifest_reference(&self) -> String {
        match &self.digest {
            Some(d) => d.to_string(),
            None => self.tag.clone(),
        }
    }

    /// `repository:tag`, without any digest.
    pub fn name_tag(&self) -> String {
        format!("{}:{}", self.repository, self.tag)
    }
}

impl fmt::Display for ImageRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.repository, self.tag)?;
        if let Some(d) = &self.digest {
            write!(f, "@{d}")?;
        }
        Ok(())
    }
}

impl FromStr for ImageRef {
    type Err = InvalidReference;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (rest, digest) = match s.split_once('@') {
            Some((rest, d)) => (
                rest,
                Some(Digest::parse(d).map_err(|_| InvalidReference::Digest(s.to_string()))?),
            ),
            None => (s, None),
        };
        // a ':' after the last '/' separates the tag
        let last_slash = rest.rfind('/').map(|i| i + 1).unwrap_or(0);
        let (repo, tag) = match rest[last_slash..].find(':') {
            Some(i) => (&rest[..last_slash + i], &rest[last_slash + i + 1..]),
            None => (rest, DEFAULT_TAG),
        };
        let mut r = ImageRef::new(repo, tag)?;
        r.digest = digest;
        Ok(r)
    }
}
