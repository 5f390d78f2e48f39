//! Reference composition: extract each layer tarball into a real scratch
//! directory, applying deletions with filesystem calls, then walk the result.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::os::unix::fs::symlink;
use std::path::{Path, PathBuf};

use layerminer::layerfs::{compose, scan_layer, FileKind, LayerDiff};
use layerminer::Digest;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleEntry {
    pub kind: FileKind,
    pub hash: Option<Digest>,
}

fn rel(path: &str) -> String {
    path.trim_start_matches("./")
        .trim_start_matches('/')
        .trim_end_matches('/')
        .to_string()
}

fn remove_any(p: &Path) {
    if let Ok(m) = fs::symlink_metadata(p) {
        if m.is_dir() {
            fs::remove_dir_all(p).unwrap();
        } else {
            fs::remove_file(p).unwrap();
        }
    }
}

/// mkdir -p that replaces any non-directory (file or symlink) in the way.
fn make_dirs(root: &Path, rel_dir: &str) {
    let mut cur = root.to_path_buf();
    for c in rel_dir.split('/').filter(|c| !c.is_empty()) {
        cur.push(c);
        match fs::symlink_metadata(&cur) {
            Ok(m) if m.is_dir() => {}
            Ok(_) => {
                fs::remove_file(&cur).unwrap();
                fs::create_dir(&cur).unwrap();
            }
            Err(_) => fs::create_dir(&cur).unwrap(),
        }
    }
}

fn parent_of(r: &str) -> &str {
    r.rsplit_once('/').map(|(p, _)| p).unwrap_or("")
}

pub fn extract_stack(layers: &[Vec<u8>], scratch: &Path) -> BTreeMap<String, OracleEntry> {
    for layer in layers {
        // deletions first: opaque directories, then individual whiteouts
        let mut opaques = Vec::new();
        let mut whiteouts = Vec::new();
        let mut ar = tar::Archive::new(&layer[..]);
        for e in ar.entries().unwrap() {
            let e = e.unwrap();
            let r = rel(&e.path().unwrap().to_string_lossy());
            let (dir, base) = match r.rsplit_once('/') {
                Some((d, b)) => (d.to_string(), b.to_string()),
                None => (String::new(), r.clone()),
            };
            if base == ".wh..wh..opq" {
                opaques.push(dir);
            } else if let Some(name) = base.strip_prefix(".wh.") {
                whiteouts.push(if dir.is_empty() {
                    name.to_string()
                } else {
                    format!("{dir}/{name}")
                });
            }
        }
        for d in &opaques {
            let p = scratch.join(d);
            match fs::symlink_metadata(&p) {
                Ok(m) if m.is_dir() => {
                    for child in fs::read_dir(&p).unwrap() {
                        remove_any(&child.unwrap().path());
                    }
                }
                _ => {}
            }
            make_dirs(scratch, d);
        }
        for w in &whiteouts {
            remove_any(&scratch.join(w));
        }

        let mut ar = tar::Archive::new(&layer[..]);
        for e in ar.entries().unwrap() {
            let mut e = e.unwrap();
            let r = rel(&e.path().unwrap().to_string_lossy());
            if r.is_empty() || r.rsplit('/').next().unwrap().starts_with(".wh.") {
                continue;
            }
            make_dirs(scratch, parent_of(&r));
            let p = scratch.join(&r);
            match e.header().entry_type() {
                tar::EntryType::Directory => {
                    make_dirs(scratch, &r);
                }
                tar::EntryType::Symlink => {
                    remove_any(&p);
                    let t = e.link_name().unwrap().unwrap().into_owned();
                    symlink(t, &p).unwrap();
                }
                tar::EntryType::Regular => {
                    remove_any(&p);
                    let mut buf = Vec::new();
                    e.read_to_end(&mut buf).unwrap();
                    fs::write(&p, buf).unwrap();
                }
                other => panic!("generator does not emit {other:?}"),
            }
        }
    }
    walk(scratch)
}

fn walk(root: &Path) -> BTreeMap<String, OracleEntry> {
    let mut out = BTreeMap::new();
    for e in walkdir::WalkDir::new(root).follow_links(false).min_depth(1) {
        let e = e.unwrap();
        let rel: PathBuf = e.path().strip_prefix(root).unwrap().to_path_buf();
        let path = format!("/{}", rel.to_string_lossy());
        let ft = e.file_type();
        let entry = if ft.is_symlink() {
            OracleEntry {
                kind: FileKind::Symlink,
                hash: None,
            }
        } else if ft.is_dir() {
            OracleEntry {
                kind: FileKind::Directory,
                hash: None,
            }
        } else {
            OracleEntry {
                kind: FileKind::Regular,
                hash: Some(Digest::of(&fs::read(e.path()).unwrap())),
            }
        };
        out.insert(path, entry);
    }
    out
}

const DIRS: [&str; 5] = ["", "a", "a/b", "c", "c/d"];
const NAMES: [&str; 4] = ["f1", "f2", "b", "d"];

fn random_path(rng: &mut StdRng) -> String {
    let d = DIRS[rng.gen_range(0..DIRS.len())];
    let n = NAMES[rng.gen_range(0..NAMES.len())];
    if d.is_empty() {
        n.to_string()
    } else {
        format!("{d}/{n}")
    }
}

/// A random stack of 1..=5 uncompressed layer tarballs with at most 50
/// content-bearing members in total, mixing adds, overwrites, directories,
/// symlinks, whiteouts and opaque markers.
pub fn random_stack(seed: u64) -> Vec<Vec<u8>> {
    let mut rng = StdRng::seed_from_u64(seed);
    let n_layers = rng.gen_range(1..=5);
    let mut budget = 50usize;
    let mut layers = Vec::new();
    for _ in 0..n_layers {
        let mut b = layerminer::testkit::TarBuilder::new();
        let ops = rng.gen_range(0..=12).min(budget);
        budget -= ops;
        for _ in 0..ops {
            match rng.gen_range(0..100) {
                0..=49 => {
                    let content: Vec<u8> = (0..rng.gen_range(0..4)).map(|_| rng.gen_range(b'a'..=b'c')).collect();
                    b = b.file(&random_path(&mut rng), &content);
                }
                50..=59 => {
                    let d = DIRS[rng.gen_range(1..DIRS.len())];
                    b = b.dir(&format!("{d}/"));
                }
                60..=67 => {
                    b = b.symlink(&random_path(&mut rng), "/etc/target");
                }
                68..=89 => {
                    let p = if rng.gen_bool(0.3) {
                        DIRS[rng.gen_range(1..DIRS.len())].to_string()
                    } else {
                        random_path(&mut rng)
                    };
                    b = b.whiteout(&p);
                }
                _ => {
                    let d = DIRS[rng.gen_range(0..DIRS.len())];
                    b = b.opaque(d);
                }
            }
        }
        layers.push(b.finish());
    }
    layers
}

/// The composed view of a stack in the oracle's terms.
pub fn composed_view(layers: &[Vec<u8>]) -> BTreeMap<String, OracleEntry> {
    let diffs: Vec<LayerDiff> = layers
        .iter()
        .map(|l| scan_layer(std::io::Cursor::new(l.clone()), &Digest::of(l)).unwrap())
        .collect();
    let fs = compose(&diffs).unwrap();
    for (i, r) in fs.entries.values().enumerate() {
        assert!(r.layer_index < fs.layer_digests.len(), "entry {i} out of range");
        assert!(!r.is_whiteout());
        assert_eq!(r.content_hash.is_some(), r.is_regular());
    }
    fs.entries
        .into_iter()
        .map(|(p, r)| {
            (
                p,
                OracleEntry {
                    kind: r.kind,
                    hash: r.content_hash,
                },
            )
        })
        .collect()
}
