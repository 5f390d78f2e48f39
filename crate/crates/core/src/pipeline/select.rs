use std::cmp::Reverse;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::reference::ImageRef;
use crate::version::{order_tags, TagVersion};

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TagInfo {
    pub tag: String,
    /// RFC 3339 timestamp of the last push, when the registry reports one.
    pub updated: Option<String>,
    pub size_bytes: Option<u64>,
}

impl TagInfo {
    pub fn new(tag: &str) -> Self {
        TagInfo {
            tag: tag.to_string(),
            ..TagInfo::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum SelectionPolicy {
    All,
    AlpinePreferred,
    LatestPerMajor,
    Cap(usize),
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("unknown selection policy {0:?} (expected all, alpine-preferred, latest-per-major or cap-<n>)")]
pub struct UnknownPolicy(pub String);

impl FromStr for SelectionPolicy {
    type Err = UnknownPolicy;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "all" => Ok(SelectionPolicy::All),
            "alpine-preferred" => Ok(SelectionPolicy::AlpinePreferred),
            "latest-per-major" => Ok(SelectionPolicy::LatestPerMajor),
            _ => s
                .strip_prefix("cap-")
                .and_then(|n| n.parse().ok())
                .map(SelectionPolicy::Cap)
                .ok_or_else(|| UnknownPolicy(s.to_string())),
        }
    }
}

impl TryFrom<String> for SelectionPolicy {
    type Error = UnknownPolicy;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<SelectionPolicy> for String {
    fn from(p: SelectionPolicy) -> String {
        p.to_string()
    }
}

impl fmt::Display for SelectionPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SelectionPolicy::All => f.write_str("all"),
            SelectionPolicy::AlpinePreferred => f.write_str("alpine-preferred"),
            SelectionPolicy::LatestPerMajor => f.write_str("latest-per-major"),
            SelectionPolicy::Cap(n) => write!(f, "cap-{n}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Selection {
    pub images: Vec<ImageRef>,
    /// Nothing was selected.
    pub empty: bool,
}

fn is_alpine_token(t: &str) -> bool {
    t.starts_with("alpine")
}

/// The tag with its alpine tokens removed: `1.0-alpine3.7` and `1.0` share
/// the line `1.0`; a bare `alpine` belongs to `latest`.
fn release_line(tag: &str) -> String {
    let rest: Vec<&str> = tag.split('-').filter(|t| !is_alpine_token(t)).collect();
    if rest.is_empty() {
        crate::reference::DEFAULT_TAG.to_string()
    } else {
        rest.join("-")
    }
}

fn is_alpine(tag: &str) -> bool {
    tag.split('-').any(is_alpine_token)
}

fn alpine_preferred(tags: &[TagInfo]) -> Vec<&TagInfo> {
    let mut lines: BTreeMap<String, Vec<&TagInfo>> = BTreeMap::new();
    for t in tags {
        lines.entry(release_line(&t.tag)).or_default().push(t);
    }
    let mut chosen: Vec<&TagInfo> = Vec::new();
    for members in lines.values() {
        let alpine: Vec<&TagInfo> = members.iter().copied().filter(|t| is_alpine(&t.tag)).collect();
        if alpine.is_empty() {
            chosen.extend(members);
        } else {
            let best = alpine
                .into_iter()
                .min_by_key(|t| (t.size_bytes.unwrap_or(u64::MAX), Reverse(t.tag.as_str())))
                .unwrap();
            chosen.push(best);
        }
    }
    keep_input_order(tags, chosen)
}

fn latest_per_major(tags: &[TagInfo]) -> Vec<&TagInfo> {
    let mut majors: BTreeMap<u64, (&TagInfo, TagVersion)> = BTreeMap::new();
    for t in tags {
        let Some(v) = TagVersion::parse(&t.tag) else { continue };
        match majors.get(&v.major()) {
            Some((best, bv)) if (bv, best.tag.as_str()) >= (&v, t.tag.as_str()) => {}
            _ => {
                majors.insert(v.major(), (t, v));
            }
        }
    }
    if majors.is_empty() {
        return tags.iter().collect();
    }
    majors.into_values().map(|(t, _)| t).collect()
}

/// Newest first: by push time when every tag has one, otherwise by
/// descending version order.
fn by_recency(tags: &[TagInfo]) -> Vec<&TagInfo> {
    if tags.iter().all(|t| t.updated.is_some()) {
        let mut v: Vec<&TagInfo> = tags.iter().collect();
        v.sort_by(|a, b| b.updated.cmp(&a.updated).then_with(|| a.tag.cmp(&b.tag)));
        return v;
    }
    let mut names: Vec<String> = tags.iter().map(|t| t.tag.clone()).collect();
    order_tags(&mut names);
    names
        .iter()
        .rev()
        .filter_map(|n| tags.iter().find(|t| &t.tag == n))
        .collect()
}

fn keep_input_order<'a>(tags: &'a [TagInfo], chosen: Vec<&'a TagInfo>) -> Vec<&'a TagInfo> {
    tags.iter()
        .filter(|t| chosen.iter().any(|c| std::ptr::eq(*c, *t)))
        .collect()
}

/// Applies a selection policy to one repository's tags.
///
/// * `all`: every tag, in registry order.
/// * `alpine-preferred`: per release line, an alpine variant replaces the
///   others (the smallest when sizes are known); lines without one keep
///   their tags.
/// * `latest-per-major`: the highest version of each major, ascending; when
///   no tag is version-like every tag is kept.
/// * `cap-n`: the `n` most recent tags.
///
/// Tags that are not valid references are ignored.
pub fn select_images(repository: &str, tags: &[TagInfo], policy: SelectionPolicy) -> Selection {
    let mut seen = std::collections::HashSet::new();
    let tags: Vec<TagInfo> = tags
        .iter()
        .filter(|t| crate::reference::is_valid_tag(&t.tag) && seen.insert(t.tag.clone()))
        .cloned()
        .collect();
    let picked: Vec<&TagInfo> = match policy {
        SelectionPolicy::All => tags.iter().collect(),
        SelectionPolicy::AlpinePreferred => alpine_preferred(&tags),
        SelectionPolicy::LatestPerMajor => latest_per_major(&tags),
        SelectionPolicy::Cap(n) => by_recency(&tags).into_iter().take(n).collect(),
    };
    let images: Vec<ImageRef> = picked
        .into_iter()
        .filter_map(|t| ImageRef::new(repository, &t.tag).ok())
        .collect();
    Selection {
        empty: images.is_empty(),
        images,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tags(names: &[&str]) -> Vec<TagInfo> {
        names.iter().map(|n| TagInfo::new(n)).collect()
    }

    fn picked(names: &[&str], policy: &str) -> Vec<String> {
        select_images("demo/app", &tags(names), policy.parse().unwrap())
            .images
            .into_iter()
            .map(|i| i.tag)
            .collect()
    }

    #[test]
    fn alpine_replaces_its_line() {
        assert_eq!(
            picked(&["1.0", "1.0-alpine", "latest"], "alpine-preferred"),
            ["1.0-alpine", "latest"]
        );
        assert_eq!(
            picked(
                &["latest", "alpine", "2.1-alpine3.6", "2.1-alpine3.7", "2.1"],
                "alpine-preferred"
            ),
            ["alpine", "2.1-alpine3.7"]
        );
    }

    #[test]
    fn latest_per_major_picks_highest() {
        assert_eq!(
            picked(
                &["5.5", "5.6", "5.7.20", "8.0-rc", "8.0", "latest", "5.7"],
                "latest-per-major"
            ),
            ["5.7.20", "8.0"]
        );
    }

    #[test]
    fn cap_takes_most_recent() {
        assert_eq!(picked(&["1.0", "1.10", "1.9"], "cap-2"), ["1.10", "1.9"]);
        let mut t = tags(&["a", "b", "c"]);
        for (i, ts) in ["2017-01-02", "2017-03-01", "2016-12-31"].iter().enumerate() {
            t[i].updated = Some(ts.to_string());
        }
        let s = select_images("r", &t, SelectionPolicy::Cap(1));
        assert_eq!(s.images[0].tag, "b");
    }

    #[test]
    fn degenerate_cases() {
        for p in ["all", "alpine-preferred", "latest-per-major", "cap-1", "cap-5"] {
            assert_eq!(picked(&["only"], p), ["only"], "{p}");
        }
        let s = select_images("r", &tags(&["1.0"]), SelectionPolicy::Cap(0));
        assert!(s.empty && s.images.is_empty());
        assert!("cap-x".parse::<SelectionPolicy>().is_err());
        assert_eq!("cap-3".parse::<SelectionPolicy>().unwrap().to_string(), "cap-3");
    }
}
