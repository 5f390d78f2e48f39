//! The Dockerfile corpora under `tests/fixtures/dockerfiles`: `golden` with
//! hand counts, `lint` with seeded violations and `pinned` with none.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/dockerfiles")
}

pub fn corpus(dir: &str) -> Vec<(String, String)> {
    let mut out: Vec<_> = fs::read_dir(fixtures().join(dir))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "Dockerfile"))
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read_to_string(&p).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}

#[derive(Deserialize)]
pub struct Golden {
    pub instructions: usize,
    pub fs_layers: usize,
    pub keywords: Vec<String>,
    pub lines: Vec<usize>,
}

#[derive(Deserialize, PartialEq, Eq, PartialOrd, Ord, Debug)]
pub struct Expected {
    pub file: String,
    pub rule_id: String,
    pub line: usize,
}
