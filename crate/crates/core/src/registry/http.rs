//! Docker Registry HTTP API v2 client with bearer-token auth and retries.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use serde::Deserialize;

use super::{
    check_repo, copy_verified, Platform, RawManifest, Registry, RegistryError, RepoMetadata, Result, SearchPage,
    MANIFEST_ACCEPT,
};
use crate::digest::Digest;

/// Environment variable holding a static bearer token.
pub const TOKEN_ENV: &str = "LAYERMINER_REGISTRY_TOKEN";

const SEARCH_PAGE_SIZE: u32 = 25;
const MAX_RETRY_AFTER: Duration = Duration::from_secs(60);

#[derive(Debug, Clone)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            base_delay: Duration::from_secs(1),
        }
    }
}

pub struct HttpRegistry {
    base: String,
    hub: String,
    agent: ureq::Agent,
    retry: RetryPolicy,
    static_token: Option<String>,
    // challenge scope -> bearer token
    tokens: Mutex<HashMap<String, String>>,
    platform: Platform,
}

#[derive(Clone, Copy)]
enum NotFound<'a> {
    Repo(&'a str),
    Manifest(&'a str),
    Blob(&'a Digest),
    Absent,
}

#[derive(Deserialize)]
struct TagList {
    #[serde(default)]
    tags: Option<Vec<String>>,
}

#[derive(Deserialize)]
struct TokenResponse {
    #[serde(default)]
    token: Option<String>,
    #[serde(default)]
    access_token: Option<String>,
}

#[derive(Deserialize)]
struct HubRepo {
    #[serde(default)]
    description: Option<String>,
    #[serde(default)]
    last_updated: Option<String>,
    #[serde(default)]
    pull_count: Option<u64>,
}

#[derive(Deserialize)]
struct HubDockerfile {
    #[serde(default)]
    contents: Option<String>,
}

#[derive(Deserialize)]
struct HubSearch {
    #[serde(default)]
    num_pages: u32,
    #[serde(default)]
    results: Vec<HubSearchResult>,
}

#[derive(Deserialize)]
struct HubSearchResult {
    name: String,
}

impl HttpRegistry {
    /// Client whose registry and hub-style endpoints share `base`.
    pub fn new(base: &str) -> Self {
        Self::with_hub(base, base)
    }

    pub fn with_hub(base: &str, hub: &str) -> Self {
        HttpRegistry {
            base: base.trim_end_matches('/').to_string(),
            hub: hub.trim_end_matches('/').to_string(),
            agent: ureq::AgentBuilder::new()
                .timeout_connect(Duration::from_secs(30))
                .timeout_read(Duration::from_secs(300))
                .build(),
            retry: RetryPolicy::default(),
            static_token: std::env::var(TOKEN_ENV).ok().filter(|t| !t.is_empty()),
            tokens: Mutex::new(HashMap::new()),
            platform: Platform::default(),
        }
    }

    pub fn retry_policy(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn token(mut self, token: Option<String>) -> Self {
        self.static_token = token;
        self
    }

    pub fn platform_override(mut self, platform: Platform) -> Self {
        self.platform = platform;
        self
    }

    fn get(&self, url: &str, accept: &[&str], not_found: NotFound<'_>) -> Result<Option<ureq::Response>> {
        let mut attempt = 0;
        let mut cached_scope: Option<String> = None;
        let mut auth_retried = false;
        loop {
            attempt += 1;
            let mut req = self.agent.get(url);
            if !accept.is_empty() {
                req = req.set("Accept", &accept.join(", "));
            }
            let token = cached_scope
                .as_ref()
                .and_then(|s| self.tokens.lock().unwrap().get(s).cloned())
                .or_else(|| self.static_token.clone());
            if let Some(t) = &token {
                req = req.set("Authorization", &format!("Bearer {t}"));
            }
            let transient = match req.call() {
                Ok(resp) => return Ok(Some(resp)),
                Err(ureq::Error::Status(401, resp)) => {
                    if auth_retried {
                        return Err(RegistryError::AuthRequired(url.to_string()));
                    }
                    let challenge = resp.header("WWW-Authenticate").map(str::to_string);
                    let scope = match challenge.as_deref().and_then(parse_bearer_challenge) {
                        Some(c) => self.fetch_token(&c)?,
                        None => return Err(RegistryError::AuthRequired(url.to_string())),
                    };
                    cached_scope = Some(scope);
                    auth_retried = true;
                    attempt -= 1;
                    continue;
                }
                Err(ureq::Error::Status(404, _)) => {
                    return match not_found {
                        NotFound::Repo(r) => Err(RegistryError::RepoNotFound(r.to_string())),
                        NotFound::Manifest(m) => Err(RegistryError::ManifestNotFound(m.to_string())),
                        NotFound::Blob(d) => Err(RegistryError::BlobNotFound(d.clone())),
                        NotFound::Absent => Ok(None),
                    };
                }
                Err(ureq::Error::Status(429, resp)) => {
                    let wait = resp
                        .header("Retry-After")
                        .and_then(|v| v.trim().parse::<u64>().ok())
                        .map(Duration::from_secs)
                        .unwrap_or(self.retry.base_delay)
                        .min(MAX_RETRY_AFTER);
                    if attempt >= self.retry.attempts {
                        return Err(RegistryError::Transient(format!("{url}: rate limited")));
                    }
                    thread::sleep(wait);
                    continue;
                }
                Err(ureq::Error::Status(code, _)) if code >= 500 => format!("{url}: HTTP {code}"),
                Err(ureq::Error::Status(code, _)) => {
                    return Err(RegistryError::Malformed(format!("{url}: HTTP {code}")))
                }
                Err(ureq::Error::Transport(t)) => format!("{url}: {t}"),
            };
            if attempt >= self.retry.attempts {
                return Err(RegistryError::Transient(transient));
            }
            let delay = self.retry.base_delay * 2u32.pow(attempt - 1);
            log::debug!("retrying {url} in {delay:?}: {transient}");
            thread::sleep(delay);
        }
    }

    fn fetch_token(&self, c: &BearerChallenge) -> Result<String> {
        let key = format!("{}|{}|{}", c.realm, c.service, c.scope);
        if self.tokens.lock().unwrap().contains_key(&key) {
            return Ok(key);
        }
        let mut req = self.agent.get(&c.realm);
        if !c.service.is_empty() {
            req = req.query("service", &c.service);
        }
        if !c.scope.is_empty() {
            req = req.query("scope", &c.scope);
        }
        let resp = req
            .call()
            .map_err(|e| RegistryError::AuthRequired(format!("token endpoint {}: {e}", c.realm)))?;
        let body: TokenResponse = serde_json::from_reader(resp.into_reader())
            .map_err(|e| RegistryError::Malformed(format!("token response: {e}")))?;
        let token = body
            .token
            .or(body.access_token)
            .ok_or_else(|| RegistryError::AuthRequired("token endpoint returned no token".into()))?;
        self.tokens.lock().unwrap().insert(key.clone(), token);
        Ok(key)
    }

    fn json<T: for<'de> Deserialize<'de>>(resp: ureq::Response) -> Result<T> {
        serde_json::from_reader(resp.into_reader()).map_err(|e| RegistryError::Malformed(e.to_string()))
    }
}

#[derive(Debug, PartialEq)]
struct BearerChallenge {
    realm: String,
    service: String,
    scope: String,
}

fn parse_bearer_challenge(header: &str) -> Option<BearerChallenge> {
    let rest = header.trim().strip_prefix("Bearer ")?;
    let mut params = HashMap::new();
    let mut s = rest;
    while !s.is_empty() {
        let eq = s.find('=')?;
        let key = s[..eq].trim().trim_start_matches(',').trim().to_string();
        s = &s[eq + 1..];
        let value;
        if let Some(q) = s.strip_prefix('"') {
            let end = q.find('"')?;
            value = q[..end].to_string();
            s = &q[end + 1..];
        } else {
            let end = s.find(',').unwrap_or(s.len());
            value = s[..end].trim().to_string();
            s = &s[end..];
        }
        s = s.trim_start_matches(',').trim_start();
        params.insert(key, value);
    }
    Some(BearerChallenge {
        realm: params.remove("realm")?,
        service: params.remove("service").unwrap_or_default(),
        scope: params.remove("scope").unwrap_or_default(),
    })
}

fn next_link(resp: &ureq::Response) -> Option<String> {
    let link = resp.header("Link")?;
    let start = link.find('<')? + 1;
    let end = link.find('>')?;
    link.contains("rel=\"next\"").then(|| link[start..end].to_string())
}

impl Registry for HttpRegistry {
    fn list_tags(&self, repo: &str) -> Result<Vec<String>> {
        check_repo(repo)?;
        let mut url = format!("{}/v2/{repo}/tags/list", self.base);
        let mut out: Vec<String> = Vec::new();
        loop {
            let resp = self.get(&url, &[], NotFound::Repo(repo))?.expect("404 mapped to error");
            let next = next_link(&resp);
            let list: TagList = Self::json(resp)?;
            for t in list.tags.unwrap_or_default() {
                if !out.contains(&t) {
                    out.push(t);
                }
            }
            match next {
                Some(n) if n.starts_with('/') => url = format!("{}{n}", self.base),
                Some(n) => url = n,
                None => return Ok(out),
            }
        }
    }

    fn fetch_manifest_raw(&self, repo: &str, reference: &str) -> Result<RawManifest> {
        check_repo(repo)?;
        let url = format!("{}/v2/{repo}/manifests/{reference}", self.base);
        let label = format!("{repo}:{reference}");
        let resp = self
            .get(&url, &MANIFEST_ACCEPT, NotFound::Manifest(&label))?
            .expect("404 mapped to error");
        let content_type = resp.header("Content-Type").map(str::to_string);
        let declared_digest = resp
            .header("Docker-Content-Digest")
            .map(|d| Digest::parse(d).map_err(|e| RegistryError::Malformed(e.to_string())))
            .transpose()?;
        let mut bytes = Vec::new();
        resp.into_reader().read_to_end(&mut bytes)?;
        Ok(RawManifest {
            bytes,
            content_type,
            declared_digest,
        })
    }

    fn fetch_layer(&self, repo: &str, digest: &Digest, sink: &mut dyn Write) -> Result<u64> {
        check_repo(repo)?;
        let url = format!("{}/v2/{repo}/blobs/{digest}", self.base);
        let resp = self
            .get(&url, &[], NotFound::Blob(digest))?
            .expect("404 mapped to error");
        let mut reader = resp.into_reader();
        copy_verified(&mut reader, digest, sink)
    }

    fn fetch_repo_metadata(&self, repo: &str) -> Result<RepoMetadata> {
        check_repo(repo)?;
        let url = format!("{}/v2/repositories/{repo}/", self.hub);
        let resp = self.get(&url, &[], NotFound::Repo(repo))?.expect("404 mapped to error");
        let hub: HubRepo = Self::json(resp)?;
        let dockerfile_url = format!("{}/v2/repositories/{repo}/dockerfile", self.hub);
        let dockerfile_text = match self.get(&dockerfile_url, &[], NotFound::Absent) {
            Ok(Some(resp)) => Self::json::<HubDockerfile>(resp)?.contents,
            Ok(None) => None,
            Err(e) => {
                log::warn!("dockerfile for {repo} unavailable: {e}");
                None
            }
        };
        let mut unavailable = Vec::new();
        if hub.description.is_none() {
            unavailable.push("description".to_string());
        }
        if hub.last_updated.is_none() {
            unavailable.push("update_time".to_string());
        }
        if hub.pull_count.is_none() {
            unavailable.push("pull_count".to_string());
        }
        Ok(RepoMetadata {
            name: repo.to_string(),
            description: hub.description,
            tags: self.list_tags(repo)?,
            update_time: hub.last_updated,
            pull_count: hub.pull_count,
            dockerfile_text,
            unavailable,
        })
    }

    fn search(&self, query: &str, page: u32) -> Result<SearchPage> {
        let url = format!("{}/v1/search", self.hub);
        let full = format!("{url}?q={}&page={page}&n={SEARCH_PAGE_SIZE}", url_encode(query));
        let resp = self.get(&full, &[], NotFound::Absent)?;
        let Some(resp) = resp else {
            return Ok(SearchPage::default());
        };
        let body: HubSearch = Self::json(resp)?;
        Ok(SearchPage {
            results: body.results.into_iter().map(|r| r.name).collect(),
            num_pages: body.num_pages,
        })
    }

    fn platform(&self) -> Platform {
        self.platform.clone()
    }
}

fn url_encode(s: &str) -> String {
    let mut out = String::new();
    for b in s.bytes() {
        match b {
            b'A'..=b'Z' | b'a'..=b'z' | b'0'..=b'9' | b'-' | b'_' | b'.' | b'~' => out.push(b as char),
            _ => out.push_str(&format!("%{b:02X}")),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_docker_hub_challenge() {
        let c = parse_bearer_challenge(
            r#"Bearer realm="https://auth.docker.io/token",service="registry.docker.io",scope="repository:library/ubuntu:pull""#,
        )
        .unwrap();
        assert_eq!(c.realm, "https://auth.docker.io/token");
        assert_eq!(c.service, "registry.docker.io");
        assert_eq!(c.scope, "repository:library/ubuntu:pull");
        assert!(parse_bearer_challenge("Basic realm=\"x\"").is_none());
    }

    #[test]
    fn encodes_queries() {
        assert_eq!(url_encode("a b/c"), "a%20b%2Fc");
    }
}
