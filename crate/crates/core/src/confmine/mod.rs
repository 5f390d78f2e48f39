//! Configuration mining: locate and parse configuration files inside
//! composed images, harvest Dockerfile ENV/EXPOSE settings and compose files,
//! and aggregate what was found across a corpus.

use std::io::{self, Write};
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::reference::ImageRef;

mod compose;
mod parse;
mod profile;
mod usage;
mod xref;

pub use compose::{parse_compose, ComposeFileError, Edge, EdgeKind, OrchestrationGraph, PublishedPort, Service};
pub use parse::{harvest_env, parse_config, ConfigParse};
pub use profile::{
    builtin_profiles, detect_distro, load_profiles, locate_configs, ConfigFile, DistroFamily, ProfileError,
    SoftwareProfile,
};
pub use usage::{
    aggregate_usage, diff_across_versions, mine_combinations, transactions, CombinationRecord, DiffError, Item,
    ParamKey, ParamStats, UsageStats, ValueShift, VersionDiff, VersionStep,
};
pub use xref::{cross_component_refs, DependencyCandidate, Evidence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConfigFormat {
    Ini,
    KeyValue,
    Directive,
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ValueClass {
    Integer,
    Float,
    Boolean,
    Size,
    Duration,
    #[serde(rename = "ip/port")]
    IpPort,
    Path,
    String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Source {
    Config { path: String },
    Env,
    Expose,
    Compose { service: String },
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamObservation {
    pub software_id: String,
    pub parameter: String,
    /// Value with surrounding quotes removed.
    pub value: String,
    /// Value exactly as written.
    pub raw_value: String,
    pub value_class: ValueClass,
    pub image: ImageRef,
    pub source: Source,
    pub file_line: Option<usize>,
}

impl ParamObservation {
    pub fn key(&self) -> ParamKey {
        ParamKey {
            software_id: self.software_id.clone(),
            parameter: self.parameter.clone(),
        }
    }
}

static INTEGER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^[+-]?\d+$").unwrap());
static FLOAT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^[+-]?(\d+\.\d*|\.\d+)([eE][+-]?\d+)?$").unwrap());
static BOOLEAN: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)^(on|off|true|false|yes|no)$").unwrap());
static SIZE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\d+(\.\d+)?\s*([KkMmGgTt]i?[Bb]?|[Bb])$").unwrap());
static DURATION: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)^\d+(\.\d+)?\s*(ms|s|secs?|seconds?|mins?|minutes?|h|hrs?|hours?|d|days?|w|weeks?)$").unwrap()
});
static IP_PORT: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(concat!(
        r"^(",
        r"\d{1,3}(\.\d{1,3}){3}(:\d{1,5})?",
        r"|\[[0-9A-Fa-f:.]+\](:\d{1,5})?",
        r"|\*:\d{1,5}|:\d{1,5}",
        r"|\d{1,5}(-\d{1,5})?/(tcp|udp|sctp)",
        r"|[A-Za-z0-9][A-Za-z0-9.-]*:\d{1,5}",
        r")$"
    ))
    .unwrap()
});

fn port_like_name(parameter: &str) -> bool {
    let last = parameter.rsplit('.').next().unwrap_or(parameter).to_ascii_lowercase();
    last == "port" || last == "listen" || last.ends_with("_port") || last.ends_with("-port")
}

/// Assigns a value class. Rules are tried in order and the first match wins:
/// a port-named parameter with a number in 1..=65535 is ip/port, then
/// boolean, integer, float, size, duration, ip/port, path, string.
pub fn classify_value(parameter: &str, value: &str) -> ValueClass {
    let v = value.trim();
    if port_like_name(parameter) && v.parse::<u32>().is_ok_and(|p| (1..=65535).contains(&p)) {
        return ValueClass::IpPort;
    }
    if BOOLEAN.is_match(v) {
        ValueClass::Boolean
    } else if INTEGER.is_match(v) {
        ValueClass::Integer
    } else if FLOAT.is_match(v) {
        ValueClass::Float
    } else if SIZE.is_match(v) {
        ValueClass::Size
    } else if DURATION.is_match(v) {
        ValueClass::Duration
    } else if IP_PORT.is_match(v) {
        ValueClass::IpPort
    } else if v.starts_with('/') || v.starts_with("~/") || v.starts_with("./") {
        ValueClass::Path
    } else {
        ValueClass::String
    }
}

/// Removes one pair of matching surrounding quotes.
pub fn unquote(s: &str) -> &str {
    let s = s.trim();
    for q in ['"', '\''] {
        if s.len() >= 2 && s.starts_with(q) && s.ends_with(q) {
            return &s[1..s.len() - 1];
        }
    }
    s
}

pub fn write_observations_jsonl<'a>(
    observations: impl IntoIterator<Item = &'a ParamObservation>,
    mut w: impl Write,
) -> io::Result<()> {
    for o in observations {
        serde_json::to_writer(&mut w, o)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// `software_id,parameter,value,count`, one row per histogram bucket.
pub fn write_usage_csv(stats: &UsageStats, w: impl Write) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["software_id", "parameter", "value", "count"])?;
    for (k, s) in &stats.params {
        for (v, n) in &s.histogram {
            out.write_record([k.software_id.as_str(), k.parameter.as_str(), v.as_str(), &n.to_string()])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// `combination,support`; items are written `software:parameter=value`
/// joined by `;`.
pub fn write_combinations_csv(records: &[CombinationRecord], w: impl Write) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["combination", "support"])?;
    for r in records {
        let combo: Vec<String> = r
            .items
            .iter()
            .map(|i| format!("{}:{}={}", i.software_id, i.parameter, i.value))
            .collect();
        out.write_record([combo.join(";"), r.support.to_string()])?;
    }
    out.flush()?;
    Ok(())
}
