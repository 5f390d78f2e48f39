use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use serde_yaml::Value;

use crate::reference::ImageRef;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ComposeFileError {
    #[error("not a compose file: {0}")]
    NotComposeFile(String),
    #[error("malformed YAML: {0}")]
    MalformedYaml(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PublishedPort {
    pub host_ip: Option<String>,
    pub published: Option<String>,
    pub target: String,
    pub protocol: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Service {
    pub name: String,
    /// Parsed image reference; `None` when absent or not a valid reference.
    pub image: Option<ImageRef>,
    pub image_raw: Option<String>,
    /// Build context when the service is built rather than pulled.
    pub build: Option<String>,
    pub ports: Vec<PublishedPort>,
    pub networks: Vec<String>,
    pub raw: BTreeMap<String, Value>,
}

impl Service {
    pub fn is_build_ref(&self) -> bool {
        self.build.is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    DependsOn,
    Links,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct Edge {
    pub from: String,
    pub to: String,
    pub kind: EdgeKind,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct OrchestrationGraph {
    pub services: BTreeMap<String, Service>,
    pub edges: Vec<Edge>,
    pub networks: BTreeSet<String>,
    /// Edges naming services that are not declared.
    pub dangling: Vec<Edge>,
    /// Top-level keys other than `services` and `networks`.
    pub raw: BTreeMap<String, Value>,
}

impl OrchestrationGraph {
    /// Every published or target port number across services.
    pub fn ports(&self) -> impl Iterator<Item = (&str, &PublishedPort)> {
        self.services
            .values()
            .flat_map(|s| s.ports.iter().map(move |p| (s.name.as_str(), p)))
    }
}

fn scalar(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(b.to_string()),
        _ => None,
    }
}

/// Names from a list, or the keys of a mapping.
fn names(v: &Value) -> Vec<String> {
    match v {
        Value::Sequence(items) => items.iter().filter_map(scalar).collect(),
        Value::Mapping(m) => m.keys().filter_map(scalar).collect(),
        _ => Vec::new(),
    }
}

fn parse_port(v: &Value) -> Option<PublishedPort> {
    if let Value::Mapping(m) = v {
        let get = |k: &str| m.get(Value::String(k.into())).and_then(scalar);
        return Some(PublishedPort {
            host_ip: get("host_ip"),
            published: get("published"),
            target: get("target")?,
            protocol: get("protocol").unwrap_or_else(|| "tcp".into()),
        });
    }
    let s = scalar(v)?;
    let (spec, protocol) = match s.split_once('/') {
        Some((a, p)) => (a.to_string(), p.to_string()),
        None => (s.clone(), "tcp".to_string()),
    };
    let parts: Vec<&str> = spec.rsplitn(3, ':').collect();
    let (host_ip, published, target) = match parts.as_slice() {
        [t] => (None, None, t.to_string()),
        [t, p] => (None, Some(p.to_string()), t.to_string()),
        [t, p, ip] => (
            Some(ip.to_string()),
            (!p.is_empty()).then(|| p.to_string()),
            t.to_string(),
        ),
        _ => return None,
    };
    Some(PublishedPort {
        host_ip,
        published,
        target,
        protocol,
    })
}

fn parse_service(name: &str, v: &Value) -> (Service, Vec<Edge>) {
    let mut svc = Service {
        name: name.to_string(),
        image: None,
        image_raw: None,
        build: None,
        ports: Vec::new(),
        networks: Vec::new(),
        raw: BTreeMap::new(),
    };
    let mut edges = Vec::new();
    let Value::Mapping(m) = v else {
        return (svc, edges);
    };
    for (k, val) in m {
        let Some(key) = scalar(k) else { continue };
        match key.as_str() {
            "image" => {
                svc.image_raw = scalar(val);
                svc.image = svc.image_raw.as_deref().and_then(|s| s.parse().ok());
            }
            "build" => {
                svc.build = match val {
                    Value::Mapping(b) => Some(
                        b.get(Value::String("context".into()))
                            .and_then(scalar)
                            .unwrap_or_else(|| ".".into()),
                    ),
                    other => Some(scalar(other).unwrap_or_else(|| ".".into())),
                }
            }
            "ports" => {
                if let Value::Sequence(items) = val {
                    svc.ports = items.iter().filter_map(parse_port).collect();
                }
            }
            "networks" => svc.networks = names(val),
            "depends_on" => edges.extend(names(val).into_iter().map(|to| Edge {
                from: name.to_string(),
                to,
                kind: EdgeKind::DependsOn,
            })),
            "links" => edges.extend(names(val).into_iter().map(|l| Edge {
                from: name.to_string(),
                to: l.split(':').next().unwrap_or(&l).to_string(),
                kind: EdgeKind::Links,
            })),
            _ => {
                svc.raw.insert(key, val.clone());
            }
        }
    }
    (svc, edges)
}

/// Parses the `services` / `networks` subset of a compose file.
pub fn parse_compose(text: &str) -> Result<OrchestrationGraph, ComposeFileError> {
    let doc: Value = serde_yaml::from_str(text).map_err(|e| ComposeFileError::MalformedYaml(e.to_string()))?;
    let Value::Mapping(top) = doc else {
        return Err(ComposeFileError::NotComposeFile("top level is not a mapping".into()));
    };
    let Some(services) = top.get(Value::String("services".into())) else {
        return Err(ComposeFileError::NotComposeFile("no services key".into()));
    };
    let mut graph = OrchestrationGraph::default();
    let mut edges = Vec::new();
    match services {
        Value::Mapping(m) => {
            for (k, v) in m {
                let Some(name) = scalar(k) else { continue };
                let (svc, e) = parse_service(&name, v);
                graph.services.insert(name, svc);
                edges.extend(e);
            }
        }
        Value::Null => {}
        _ => return Err(ComposeFileError::NotComposeFile("services is not a mapping".into())),
    }
    for (k, v) in &top {
        match scalar(k).as_deref() {
            Some("services") => {}
            Some("networks") => graph.networks = names(v).into_iter().collect(),
            Some(other) => {
                graph.raw.insert(other.to_string(), v.clone());
            }
            None => {}
        }
    }
    edges.sort();
    edges.dedup();
    let (ok, dangling): (Vec<Edge>, Vec<Edge>) = edges.into_iter().partition(|e| graph.services.contains_key(&e.to));
    graph.edges = ok;
    graph.dangling = dangling;
    Ok(graph)
}
