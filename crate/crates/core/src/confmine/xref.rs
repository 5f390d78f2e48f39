use std::collections::BTreeSet;

use serde::Serialize;

use super::{OrchestrationGraph, ParamObservation, Source, ValueClass};
use crate::layerfs::{normalize_path, ImageFs};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Evidence {
    /// The value names a path present in the image.
    Path { path: String },
    /// The value's port is exposed by the image's Dockerfile.
    ExposedPort { port: u16 },
    /// The value's port is published or targeted by a compose service.
    ComposePort { port: u16, service: String },
    /// The value (or its host part) is a compose service name.
    ServiceName { service: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DependencyCandidate {
    pub observation: ParamObservation,
    pub evidence: Evidence,
}

fn port_of(value: &str) -> Option<u16> {
    let v = value.split('/').next().unwrap_or(value);
    let v = v.rsplit(':').next().unwrap_or(v);
    v.parse::<u16>().ok().filter(|p| *p > 0)
}

fn host_of(value: &str) -> &str {
    match value.rsplit_once(':') {
        Some((h, p)) if p.parse::<u16>().is_ok() => h,
        _ => value,
    }
}

/// Candidate dependencies backed by concrete evidence: existing paths,
/// matching ports, or compose service names.
pub fn cross_component_refs(
    observations: &[ParamObservation],
    fs: &ImageFs,
    graph: Option<&OrchestrationGraph>,
) -> Vec<DependencyCandidate> {
    let exposed: BTreeSet<(String, u16)> = observations
        .iter()
        .filter(|o| o.source == Source::Expose)
        .filter_map(|o| Some((o.image.to_string(), port_of(&o.value)?)))
        .collect();

    let mut out = Vec::new();
    for o in observations.iter().filter(|o| o.source != Source::Expose) {
        let mut push = |evidence| {
            out.push(DependencyCandidate {
                observation: o.clone(),
                evidence,
            })
        };
        if o.value_class == ValueClass::Path && o.value.starts_with('/') {
            let p = normalize_path(&o.value);
            if p != "/" && fs.contains(&p) {
                push(Evidence::Path { path: p });
            }
        }
        if o.value_class == ValueClass::IpPort {
            if let Some(port) = port_of(&o.value) {
                if exposed.contains(&(o.image.to_string(), port)) {
                    push(Evidence::ExposedPort { port });
                }
                for (service, pp) in graph.into_iter().flat_map(|g| g.ports()) {
                    let hit = [Some(&pp.target), pp.published.as_ref()]
                        .into_iter()
                        .flatten()
                        .any(|p| p.parse::<u16>().ok() == Some(port));
                    if hit {
                        push(Evidence::ComposePort {
                            port,
                            service: service.to_string(),
                        });
                    }
                }
            }
        }
        if let Some(g) = graph {
            let host = host_of(&o.value);
            if g.services.contains_key(host) {
                push(Evidence::ServiceName {
                    service: host.to_string(),
                });
            }
        }
    }
    out
}
