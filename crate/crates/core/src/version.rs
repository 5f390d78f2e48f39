//! Tag-to-version ordering shared by image selection and version diffs.
//!
//! A tag is version-like when it is an optional `v`, one to four dot-separated
//! numeric components, and optionally a suffix introduced by `-` (for example
//! `5.7`, `v1.2.3`, `1.0-alpine`). Version-like tags order numerically, with a
//! bare version sorting after its suffixed variants of the same number. When any
//! tag in a set is not version-like the whole set falls back to lexicographic
//! order and the result is flagged.

use std::cmp::Ordering;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagVersion {
    pub numbers: Vec<u64>,
    pub suffix: String,
}

impl TagVersion {
    pub fn parse(tag: &str) -> Option<Self> {
        let t = tag.strip_prefix('v').unwrap_or(tag);
        let (num, suffix) = match t.find('-') {
            Some(i) => (&t[..i], &t[i + 1..]),
            None => (t, ""),
        };
        if num.is_empty() {
            return None;
        }
        let numbers = num
            .split('.')
            .map(|p| {
                if p.is_empty() || !p.bytes().all(|b| b.is_ascii_digit()) {
                    None
                } else {
                    p.parse::<u64>().ok()
                }
            })
            .collect::<Option<Vec<_>>>()?;
        if numbers.len() > 4 {
            return None;
        }
        Some(TagVersion {
            numbers,
            suffix: suffix.to_string(),
        })
    }

    pub fn major(&self) -> u64 {
        self.numbers[0]
    }
}

impl Ord for TagVersion {
    fn cmp(&self, other: &Self) -> Ordering {
        let len = self.numbers.len().max(other.numbers.len());
        for i in 0..len {
            let a = self.numbers.get(i).copied().unwrap_or(0);
            let b = other.numbers.get(i).copied().unwrap_or(0);
            match a.cmp(&b) {
                Ordering::Equal => {}
                o => return o,
            }
        }
        match (self.suffix.is_empty(), other.suffix.is_empty()) {
            (true, true) => self.numbers.len().cmp(&other.numbers.len()),
            (true, false) => Ordering::Greater,
            (false, true) => Ordering::Less,
            (false, false) => self
                .suffix
                .cmp(&other.suffix)
                .then(self.numbers.len().cmp(&other.numbers.len())),
        }
    }
}

impl PartialOrd for TagVersion {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Sorts tags oldest to newest. Returns `true` when the lexicographic fallback was used.
pub fn order_tags(tags: &mut [String]) -> bool {
    let parsed: Option<Vec<TagVersion>> = tags.iter().map(|t| TagVersion::parse(t)).collect();
    match parsed {
        Some(_) => {
            tags.sort_by(|a, b| {
                let va = TagVersion::parse(a).unwrap();
                let vb = TagVersion::parse(b).unwrap();
                va.cmp(&vb).then_with(|| a.cmp(b))
            });
            false
        }
        None => {
            tags.sort();
            true
        }
    }
}
