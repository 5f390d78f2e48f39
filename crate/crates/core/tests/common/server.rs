//! A local registry speaking the v2 HTTP protocol (plus the hub-style
//! metadata and search endpoints) over a fixture directory.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use layerminer::registry::{
    FixtureBuilder, FixtureRegistry, FixtureSearch, HttpRegistry, Registry, RegistryError, RetryPolicy,
    MEDIA_DOCKER_LIST, MEDIA_DOCKER_MANIFEST,
};
use layerminer::Digest;
use tiny_http::{Header, Request, Response, Server};

#[derive(Debug, Clone, Default)]
pub struct ServerOptions {
    /// Require this bearer token, handed out by `/token`.
    pub token: Option<String>,
    /// Answer the first N registry requests with 503.
    pub fail_first: usize,
    /// Page tag lists with this many tags per page.
    pub tag_page: Option<usize>,
}

pub struct TestServer {
    pub url: String,
    pub requests: Arc<AtomicUsize>,
    server: Arc<Server>,
    handle: Option<JoinHandle<()>>,
}

impl Drop for TestServer {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn header(k: &str, v: &str) -> Header {
    Header::from_bytes(k.as_bytes(), v.as_bytes()).unwrap()
}

type Resp = Response<std::io::Cursor<Vec<u8>>>;

fn json(v: serde_json::Value) -> Resp {
    Response::from_data(serde_json::to_vec(&v).unwrap()).with_header(header("Content-Type", "application/json"))
}

fn status(code: u16) -> Resp {
    Response::from_data(Vec::new()).with_status_code(code)
}

fn error_response(e: RegistryError) -> Resp {
    match e {
        RegistryError::RepoNotFound(_) | RegistryError::ManifestNotFound(_) | RegistryError::BlobNotFound(_) => {
            status(404)
        }
        _ => status(500),
    }
}

fn query_param<'a>(query: &'a str, key: &str) -> Option<&'a str> {
    query.split('&').find_map(|kv| kv.strip_prefix(key)?.strip_prefix('='))
}

fn decode(s: &str) -> String {
    let b = s.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < b.len() {
        if b[i] == b'%' && i + 2 < b.len() {
            if let Ok(v) = u8::from_str_radix(&s[i + 1..i + 3], 16) {
                out.push(v);
                i += 3;
                continue;
            }
        }
        out.push(if b[i] == b'+' { b' ' } else { b[i] });
        i += 1;
    }
    String::from_utf8_lossy(&out).into_owned()
}

fn handle(req: &Request, reg: &FixtureRegistry, opts: &ServerOptions, base: &str, count: usize) -> Resp {
    let url = req.url().to_string();
    let (path, query) = url.split_once('?').unwrap_or((&url, ""));

    if path == "/token" {
        return json(serde_json::json!({ "token": opts.token.clone().unwrap_or_default() }));
    }
    if count < opts.fail_first {
        return status(503);
    }
    if let Some(tok) = &opts.token {
        let ok = req
            .headers()
            .iter()
            .any(|h| h.field.equiv("Authorization") && h.value.as_str() == format!("Bearer {tok}"));
        if !ok {
            let challenge = format!("Bearer realm=\"{base}/token\",service=\"test\",scope=\"registry:catalog:*\"");
            return status(401).with_header(header("WWW-Authenticate", &challenge));
        }
    }

    if path == "/v1/search" {
        let q = decode(query_param(query, "q").unwrap_or(""));
        let page = query_param(query, "page").and_then(|p| p.parse().ok()).unwrap_or(1);
        let p = reg.search(&q, page).unwrap();
        let results: Vec<_> = p.results.iter().map(|n| serde_json::json!({ "name": n })).collect();
        return json(serde_json::json!({ "num_pages": p.num_pages, "results": results }));
    }
    if let Some(rest) = path.strip_prefix("/v2/repositories/") {
        if let Some(repo) = rest.strip_suffix("/dockerfile") {
            return match reg.fetch_repo_metadata(repo) {
                Ok(m) => match m.dockerfile_text {
                    Some(t) => json(serde_json::json!({ "contents": t })),
                    None => status(404),
                },
                Err(e) => error_response(e),
            };
        }
        let repo = rest.trim_end_matches('/');
        return match reg.fetch_repo_metadata(repo) {
            Ok(m) => json(serde_json::json!({
                "description": m.description,
                "last_updated": m.update_time,
                "pull_count": m.pull_count,
            })),
            Err(e) => error_response(e),
        };
    }
    let Some(rest) = path.strip_prefix("/v2/") else {
        return status(404);
    };
    if rest.is_empty() {
        return json(serde_json::json!({}));
    }
    if let Some(repo) = rest.strip_suffix("/tags/list") {
        let tags = match reg.list_tags(repo) {
            Ok(t) => t,
            Err(e) => return error_response(e),
        };
        let Some(size) = opts.tag_page else {
            return json(serde_json::json!({ "name": repo, "tags": tags }));
        };
        let start: usize = query_param(query, "last")
            .and_then(|l| tags.iter().position(|t| t == l))
            .map_or(0, |i| i + 1);
        let page: Vec<&String> = tags.iter().skip(start).take(size).collect();
        let mut resp = json(serde_json::json!({ "name": repo, "tags": page }));
        if start + size < tags.len() {
            let link = format!(
                "</v2/{repo}/tags/list?n={size}&last={}>; rel=\"next\"",
                page.last().unwrap()
            );
            resp = resp.with_header(header("Link", &link));
        }
        return resp;
    }
    if let Some((repo, reference)) = rest.rsplit_once("/manifests/") {
        return match reg.fetch_manifest_raw(repo, reference) {
            Ok(raw) => {
                let media = serde_json::from_slice::<serde_json::Value>(&raw.bytes)
                    .ok()
                    .and_then(|v| v["mediaType"].as_str().map(String::from))
                    .unwrap_or_else(|| "application/json".into());
                let digest = raw.declared_digest.unwrap_or_else(|| Digest::of(&raw.bytes));
                Response::from_data(raw.bytes)
                    .with_header(header("Content-Type", &media))
                    .with_header(header("Docker-Content-Digest", digest.as_str()))
            }
            Err(e) => error_response(e),
        };
    }
    if let Some((repo, digest)) = rest.rsplit_once("/blobs/") {
        if reg.list_tags(repo).is_err() {
            return status(404);
        }
        let Ok(d) = Digest::parse(digest) else {
            return status(404);
        };
        // served as stored so the client does the verification
        return match std::fs::read(reg.blob_path(&d)) {
            Ok(bytes) => Response::from_data(bytes).with_header(header("Content-Type", "application/octet-stream")),
            Err(_) => status(404),
        };
    }
    status(404)
}

pub fn serve(fixture: &Path, opts: ServerOptions) -> TestServer {
    let reg = FixtureRegistry::open(fixture).unwrap();
    let server = Arc::new(Server::http("127.0.0.1:0").unwrap());
    let url = format!("http://{}", server.server_addr().to_ip().unwrap());
    let requests = Arc::new(AtomicUsize::new(0));
    let (s, n, base) = (server.clone(), requests.clone(), url.clone());
    let handle = std::thread::spawn(move || {
        for req in s.incoming_requests() {
            let count = if req.url() == "/token" {
                usize::MAX
            } else {
                n.fetch_add(1, Ordering::SeqCst)
            };
            let resp = handle(&req, &reg, &opts, &base, count);
            let _ = req.respond(resp);
        }
    });
    TestServer {
        url,
        requests,
        server,
        handle: Some(handle),
    }
}

/// A client that ignores any token in the environment and retries quickly.
pub fn http(url: &str) -> HttpRegistry {
    HttpRegistry::new(url).token(None).retry_policy(RetryPolicy {
        attempts: 3,
        base_delay: Duration::from_millis(5),
    })
}

/// Small registry with metadata, a manifest list, many tags and a search index.
pub fn sample_registry(dir: &Path) -> PathBuf {
    let mut b = FixtureBuilder::new(dir).unwrap();
    let base = b"base layer bytes".to_vec();
    for (i, tag) in ["1.0", "1.1", "2.0", "2.1", "3.0"].iter().enumerate() {
        b.add_image("lib/web", tag, &[base.clone(), format!("top {i}").into_bytes()])
            .unwrap();
    }
    let amd = b.add_image("lib/multi", "amd64-only", &[b"amd".to_vec()]).unwrap();
    let arm = b.add_image("lib/multi", "arm64-only", &[b"arm".to_vec()]).unwrap();
    let list = serde_json::json!({
        "schemaVersion": 2,
        "mediaType": MEDIA_DOCKER_LIST,
        "manifests": [
            {"mediaType": MEDIA_DOCKER_MANIFEST, "size": 1, "digest": arm.as_str(),
             "platform": {"os": "linux", "architecture": "arm64"}},
            {"mediaType": MEDIA_DOCKER_MANIFEST, "size": 1, "digest": amd.as_str(),
             "platform": {"os": "linux", "architecture": "amd64"}},
        ],
    });
    let list = b.add_manifest_bytes(&serde_json::to_vec(&list).unwrap()).unwrap();
    b.tag("lib/multi", "latest", &list);
    let web = b.repo_mut("lib/web");
    web.description = Some("web server".into());
    web.update_time = Some("2019-03-01T00:00:00Z".into());
    web.pull_count = Some(1234);
    web.dockerfile = Some("FROM debian:9\nRUN apt-get install -y nginx\n".into());
    b.repo_mut("lib/empty");
    for r in ["lib/webtools", "org/web-proxy", "org/db"] {
        b.add_image(r, "latest", &[r.as_bytes().to_vec()]).unwrap();
    }
    b.set_search(FixtureSearch {
        page_size: Some(2),
        repositories: None,
    });
    b.finish().unwrap()
}
