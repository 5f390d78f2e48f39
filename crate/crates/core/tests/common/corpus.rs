//! A 50-image fixture registry for pipeline runs: 10 repositories of 5 tags
//! each over three shared distribution bases, with a per-repository layer and
//! a per-image top layer carrying configuration and compose files.

use std::path::{Path, PathBuf};

use layerminer::registry::FixtureBuilder;
use layerminer::testkit::TarBuilder;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

pub const TAGS: [&str; 5] = ["1.0", "1.1", "2.0", "2.1", "3.0"];

pub struct StreamCorpus {
    pub root: PathBuf,
    pub repos: Vec<String>,
    pub images: usize,
    pub max_layer: u64,
    pub total_layer_bytes: u64,
    pub distinct_layers: usize,
}

fn noise(rng: &mut StdRng, n: usize) -> Vec<u8> {
    (0..n).map(|_| rng.gen()).collect()
}

fn base(rng: &mut StdRng, marker: &str, files: usize) -> Vec<u8> {
    let mut t = TarBuilder::new().dir("etc").file(marker, b"1\n").dir("usr/bin");
    for i in 0..files {
        let size = rng.gen_range(2_000..8_000);
        t = t.file_mode(&format!("usr/bin/tool{i}"), &noise(rng, size), 0o755);
    }
    t.finish()
}

pub fn stream_corpus(dir: &Path) -> StreamCorpus {
    let mut rng = StdRng::seed_from_u64(0x5eed);
    let mut b = FixtureBuilder::new(dir).unwrap();
    let bases = [
        base(&mut rng, "etc/debian_version", 12),
        base(&mut rng, "etc/alpine-release", 6),
        base(&mut rng, "etc/redhat-release", 10),
    ];
    let mut repos = Vec::new();
    let mut layers: Vec<Vec<u8>> = bases.to_vec();
    let mut images = 0;
    for r in 0..10 {
        let repo = format!("corp/app{r}");
        let mut mid = TarBuilder::new().dir(&format!("opt/app{r}"));
        for i in 0..4 {
            let size = rng.gen_range(3_000..9_000);
            mid = mid.file(&format!("opt/app{r}/lib{i}.so"), &noise(&mut rng, size));
        }
        let mid = mid.finish();
        layers.push(mid.clone());
        for (t, tag) in TAGS.iter().enumerate() {
            let mut top = TarBuilder::new()
                .file("etc/hostname", format!("app{r}-{tag}\n").as_bytes())
                .file(&format!("opt/app{r}/data.bin"), &noise(&mut rng, 1_000 + 500 * t));
            if r % 2 == 0 {
                let cnf = format!(
                    "[mysqld]\nport = {}\ndatadir = /var/lib/mysql\nkey_buffer_size = {}M\n",
                    3306 + (t % 2),
                    16 << (r % 3)
                );
                top = top.dir("etc/mysql").file("etc/mysql/my.cnf", cnf.as_bytes());
            }
            if r % 4 == 1 {
                let compose = format!(
                    "services:\n  web:\n    image: corp/app{r}:{tag}\n    ports: ['80{r}0:80']\n    depends_on: [db]\n  db:\n    image: mysql:5.7\n"
                );
                top = top.dir("srv").file("srv/docker-compose.yml", compose.as_bytes());
            }
            let top = top.finish();
            layers.push(top.clone());
            b.add_image(&repo, tag, &[bases[r % 3].clone(), mid.clone(), top])
                .unwrap();
            images += 1;
        }
        b.repo_mut(&repo).dockerfile = Some(format!(
            "FROM debian:9\nRUN apt-get update && apt-get install -y curl\nENV APP_PORT=80{r}0 APP_HOME=/opt/app{r}\nEXPOSE 80{r}0\n"
        ));
        repos.push(repo);
    }
    let max_layer = layers.iter().map(|l| l.len() as u64).max().unwrap();
    let total_layer_bytes = layers.iter().map(|l| l.len() as u64).sum();
    let distinct_layers = layers.len();
    StreamCorpus {
        root: b.finish().unwrap(),
        repos,
        images,
        max_layer,
        total_layer_bytes,
        distinct_layers,
    }
}

/// Every file under `dir`, relative path to bytes.
pub fn read_tree(dir: &Path) -> std::collections::BTreeMap<String, Vec<u8>> {
    walkdir::WalkDir::new(dir)
        .into_iter()
        .map(Result::unwrap)
        .filter(|e| e.file_type().is_file())
        .map(|e| {
            let rel = e.path().strip_prefix(dir).unwrap().to_string_lossy().into_owned();
            (rel, std::fs::read(e.path()).unwrap())
        })
        .collect()
}
