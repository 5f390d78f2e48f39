use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::ParamObservation;
use crate::reference::ImageRef;
use crate::version::order_tags;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamKey {
    pub software_id: String,
    pub parameter: String,
}

impl std::fmt::Display for ParamKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}", self.software_id, self.parameter)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParamStats {
    pub set_count: u64,
    pub images: BTreeSet<ImageRef>,
    pub histogram: BTreeMap<String, u64>,
}

impl ParamStats {
    pub fn image_count(&self) -> usize {
        self.images.len()
    }

    pub fn distinct_value_count(&self) -> usize {
        self.histogram.len()
    }

    /// Most frequent value; ties go to the smallest value.
    pub fn modal_value(&self) -> Option<&str> {
        self.histogram
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)))
            .map(|(v, _)| v.as_str())
    }

    fn add(&mut self, o: &ParamObservation) {
        self.set_count += 1;
        self.images.insert(o.image.clone());
        *self.histogram.entry(o.value.clone()).or_default() += 1;
    }

    fn merge(&mut self, other: &ParamStats) {
        self.set_count += other.set_count;
        self.images.extend(other.images.iter().cloned());
        for (v, n) in &other.histogram {
            *self.histogram.entry(v.clone()).or_default() += n;
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct UsageStats {
    pub params: BTreeMap<ParamKey, ParamStats>,
    /// Per image tag; empty unless the version dimension was requested.
    pub by_tag: BTreeMap<String, BTreeMap<ParamKey, ParamStats>>,
}

impl UsageStats {
    /// Associative and commutative; aggregating two halves and merging
    /// equals aggregating the whole.
    pub fn merge(&mut self, other: &UsageStats) {
        for (k, s) in &other.params {
            self.params.entry(k.clone()).or_default().merge(s);
        }
        for (tag, m) in &other.by_tag {
            let dst = self.by_tag.entry(tag.clone()).or_default();
            for (k, s) in m {
                dst.entry(k.clone()).or_default().merge(s);
            }
        }
    }

    pub fn get(&self, software_id: &str, parameter: &str) -> Option<&ParamStats> {
        self.params.get(&ParamKey {
            software_id: software_id.into(),
            parameter: parameter.into(),
        })
    }
}

pub fn aggregate_usage<'a>(
    observations: impl IntoIterator<Item = &'a ParamObservation>,
    by_version: bool,
) -> UsageStats {
    let mut stats = UsageStats::default();
    for o in observations {
        stats.params.entry(o.key()).or_default().add(o);
        if by_version {
            stats
                .by_tag
                .entry(o.image.tag.clone())
                .or_default()
                .entry(o.key())
                .or_default()
                .add(o);
        }
    }
    stats
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum DiffError {
    #[error("need at least two versions to diff, found {0}")]
    TooFewVersions(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ValueShift {
    pub parameter: ParamKey,
    pub from_value: String,
    pub to_value: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct VersionStep {
    pub from: String,
    pub to: String,
    pub added: BTreeSet<ParamKey>,
    pub removed: BTreeSet<ParamKey>,
    pub value_shift: Vec<ValueShift>,
}

impl VersionStep {
    pub fn is_empty(&self) -> bool {
        self.added.is_empty() && self.removed.is_empty() && self.value_shift.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct VersionDiff {
    pub order: Vec<String>,
    /// Tags were not all version-like and were ordered lexicographically.
    pub lexicographic_fallback: bool,
    pub steps: Vec<VersionStep>,
}

/// Compares each pair of adjacent versions (tags in version order).
pub fn diff_across_versions(stats: &UsageStats) -> Result<VersionDiff, DiffError> {
    let mut order: Vec<String> = stats.by_tag.keys().cloned().collect();
    if order.len() < 2 {
        return Err(DiffError::TooFewVersions(order.len()));
    }
    let lexicographic_fallback = order_tags(&mut order);
    let steps = order
        .windows(2)
        .map(|w| {
            let (a, b) = (&stats.by_tag[&w[0]], &stats.by_tag[&w[1]]);
            let added = b.keys().filter(|k| !a.contains_key(*k)).cloned().collect();
            let removed = a.keys().filter(|k| !b.contains_key(*k)).cloned().collect();
            let value_shift = a
                .iter()
                .filter_map(|(k, sa)| {
                    let sb = b.get(k)?;
                    let (va, vb) = (sa.modal_value()?, sb.modal_value()?);
                    (va != vb).then(|| ValueShift {
                        parameter: k.clone(),
                        from_value: va.to_string(),
                        to_value: vb.to_string(),
                    })
                })
                .collect();
            VersionStep {
                from: w[0].clone(),
                to: w[1].clone(),
                added,
                removed,
                value_shift,
            }
        })
        .collect();
    Ok(VersionDiff {
        order,
        lexicographic_fallback,
        steps,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Item {
    pub software_id: String,
    pub parameter: String,
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CombinationRecord {
    pub items: Vec<Item>,
    pub support: u64,
}

/// The distinct (parameter, value) items set by each image.
pub fn transactions<'a>(
    observations: impl IntoIterator<Item = &'a ParamObservation>,
) -> BTreeMap<ImageRef, BTreeSet<Item>> {
    let mut out: BTreeMap<ImageRef, BTreeSet<Item>> = BTreeMap::new();
    for o in observations {
        out.entry(o.image.clone()).or_default().insert(Item {
            software_id: o.software_id.clone(),
            parameter: o.parameter.clone(),
            value: o.value.clone(),
        });
    }
    out
}

fn support(set: &[Item], tx: &BTreeMap<ImageRef, BTreeSet<Item>>) -> u64 {
    tx.values().filter(|t| set.iter().all(|i| t.contains(i))).count() as u64
}

/// Frequent k-item combinations by level-wise candidate generation.
/// Only combinations present in at least one image are reported, so a
/// `min_support` of 0 behaves like 1. Ranked by support, then items.
pub fn mine_combinations(
    tx: &BTreeMap<ImageRef, BTreeSet<Item>>,
    k: usize,
    min_support: u64,
) -> Vec<CombinationRecord> {
    let min_support = min_support.max(1);
    if k == 0 {
        return Vec::new();
    }
    let mut counts: BTreeMap<&Item, u64> = BTreeMap::new();
    for t in tx.values() {
        for i in t {
            *counts.entry(i).or_default() += 1;
        }
    }
    let mut level: Vec<(Vec<Item>, u64)> = counts
        .into_iter()
        .filter(|(_, n)| *n >= min_support)
        .map(|(i, n)| (vec![i.clone()], n))
        .collect();

    for size in 2..=k {
        let frequent: BTreeSet<&Vec<Item>> = level.iter().map(|(s, _)| s).collect();
        let mut next = Vec::new();
        for (i, (a, _)) in level.iter().enumerate() {
            for (b, _) in &level[i + 1..] {
                if a[..size - 2] != b[..size - 2] {
                    break;
                }
                let mut cand = a.clone();
                cand.push(b[size - 2].clone());
                let all_subsets_frequent = (0..size).all(|skip| {
                    let sub: Vec<Item> = cand
                        .iter()
                        .enumerate()
                        .filter(|(j, _)| *j != skip)
                        .map(|(_, x)| x.clone())
                        .collect();
                    frequent.contains(&sub)
                });
                if !all_subsets_frequent {
                    continue;
                }
                let n = support(&cand, tx);
                if n >= min_support {
                    next.push((cand, n));
                }
            }
        }
        level = next;
        if level.is_empty() {
            break;
        }
    }

    let mut out: Vec<CombinationRecord> = level
        .into_iter()
        .map(|(items, support)| CombinationRecord { items, support })
        .collect();
    out.sort_by(|a, b| b.support.cmp(&a.support).then_with(|| a.items.cmp(&b.items)));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::confmine::{Source, ValueClass};

    fn obs(image: &str, p: &str, v: &str) -> ParamObservation {
        ParamObservation {
            software_id: "mysqld".into(),
            parameter: p.into(),
            value: v.into(),
            raw_value: v.into(),
            value_class: ValueClass::String,
            image: image.parse().unwrap(),
            source: Source::Env,
            file_line: None,
        }
    }

    #[test]
    fn port_histogram() {
        let o = vec![
            obs("m/a:1", "port", "3306"),
            obs("m/b:1", "port", "3306"),
            obs("m/c:1", "port", "3307"),
            obs("m/d:1", "user", "mysql"),
        ];
        let s = aggregate_usage(&o, false);
        let port = s.get("mysqld", "port").unwrap();
        assert_eq!(port.set_count, 3);
        assert_eq!(port.image_count(), 3);
        assert_eq!(port.histogram, BTreeMap::from([("3306".into(), 2), ("3307".into(), 1)]));
        assert!(aggregate_usage(&[], false).params.is_empty());
    }

    #[test]
    fn duplicate_key_in_one_image() {
        let o = vec![obs("m/a:1", "save", "900 1"), obs("m/a:1", "save", "300 10")];
        let s = aggregate_usage(&o, false);
        let save = s.get("mysqld", "save").unwrap();
        assert_eq!((save.set_count, save.image_count()), (2, 1));
    }

    #[test]
    fn merge_matches_whole() {
        let o = vec![
            obs("m:1", "a", "1"),
            obs("m:2", "a", "2"),
            obs("m:2", "b", "1"),
            obs("m:3", "a", "1"),
        ];
        let whole = aggregate_usage(&o, true);
        let mut left = aggregate_usage(&o[..1], true);
        left.merge(&aggregate_usage(&o[1..], true));
        assert_eq!(left, whole);
    }

    #[test]
    fn version_diff() {
        let o = vec![
            obs("m:1.0", "a", "1"),
            obs("m:1.0", "b", "1"),
            obs("m:2.0", "b", "1"),
            obs("m:2.0", "c", "1"),
            obs("m:10.0", "b", "2"),
            obs("m:10.0", "c", "1"),
        ];
        let d = diff_across_versions(&aggregate_usage(&o, true)).unwrap();
        assert_eq!(d.order, ["1.0", "2.0", "10.0"]);
        assert!(!d.lexicographic_fallback);
        let key = |p: &str| ParamKey {
            software_id: "mysqld".into(),
            parameter: p.into(),
        };
        assert_eq!(d.steps[0].added, BTreeSet::from([key("c")]));
        assert_eq!(d.steps[0].removed, BTreeSet::from([key("a")]));
        assert!(d.steps[0].value_shift.is_empty());
        assert_eq!(d.steps[1].value_shift[0].parameter, key("b"));
        assert!(d.steps[1].added.is_empty());

        let one = aggregate_usage(&o[..2], true);
        assert_eq!(diff_across_versions(&one), Err(DiffError::TooFewVersions(1)));
    }

    #[test]
    fn identical_versions_have_empty_steps() {
        let o = vec![obs("m:1", "a", "1"), obs("m:latest", "a", "1")];
        let d = diff_across_versions(&aggregate_usage(&o, true)).unwrap();
        assert!(d.lexicographic_fallback);
        assert!(d.steps.iter().all(VersionStep::is_empty));
    }

    #[test]
    fn combinations_common_pair() {
        let mut o = Vec::new();
        for i in 0..4 {
            let img = format!("m:{i}");
            o.push(obs(&img, "a", "1"));
            o.push(obs(&img, "b", "2"));
            o.push(obs(&img, "c", &i.to_string()));
        }
        let tx = transactions(&o);
        let top = &mine_combinations(&tx, 2, 2)[0];
        assert_eq!(top.support, 4);
        assert_eq!(
            top.items
                .iter()
                .map(|i| (i.parameter.as_str(), i.value.as_str()))
                .collect::<Vec<_>>(),
            [("a", "1"), ("b", "2")]
        );
        assert!(mine_combinations(&tx, 2, 5).is_empty());
        assert_eq!(mine_combinations(&tx, 2, 2).len(), 1);
    }
}
