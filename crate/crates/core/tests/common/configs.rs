//! Five small MySQL-family images for configuration mining tests.

use std::collections::{BTreeMap, BTreeSet};

use layerminer::confmine::{builtin_profiles, Item, ParamObservation, SoftwareProfile};
use layerminer::testkit::TarBuilder;
use layerminer::ImageRef;

use super::mine_image;

pub fn debian_base() -> Vec<u8> {
    TarBuilder::new()
        .dir("etc")
        .file("etc/debian_version", b"9.3\n")
        .dir("var/lib/mysql")
        .finish()
}

const MY_CNF: [(&str, &str); 5] = [
    (
        "mysql:5.5",
        "[mysqld]\nport = 3306\ndatadir = /var/lib/mysql\nkey_buffer = 16M\nskip-external-locking\nquery_cache_size = 16M\n",
    ),
    (
        "mysql:5.6",
        "[mysqld]\nport = 3306\ndatadir = /var/lib/mysql\nkey_buffer_size = 16M\nskip-external-locking\nquery_cache_size = 16M\n",
    ),
    (
        "mariadb:5.6",
        "# MariaDB\n[mysqld]\nport = 3307\ndatadir = /var/lib/mysql\nkey_buffer_size = 32M\nquery_cache_size = 16M\n",
    ),
    (
        "mysql:5.7",
        "[mysqld]\nport = 3307\ndatadir = /var/lib/mysql\nkey_buffer_size = 16M\nsymbolic-links = 0\n",
    ),
    (
        "percona:5.7",
        "[mysqld]\nport = 3307\ndatadir = /var/lib/percona\nkey_buffer_size = 16M\nsymbolic-links = 0\n",
    ),
];

/// `(image, layers)` for each image, base layer first. `mysql:5.6` also
/// ships a conf.d file that sets `port` a second time.
pub fn mysql_corpus() -> Vec<(ImageRef, Vec<Vec<u8>>)> {
    MY_CNF
        .iter()
        .map(|(image, cnf)| {
            let mut cfg = TarBuilder::new()
                .dir("etc/mysql")
                .file("etc/mysql/my.cnf", cnf.as_bytes());
            if *image == "mysql:5.6" {
                cfg = cfg.file(
                    "etc/mysql/conf.d/docker.cnf",
                    b"[mysqld]\nskip-host-cache\nport = 3306\n",
                );
            }
            (image.parse().unwrap(), vec![debian_base(), cfg.finish()])
        })
        .collect()
}

/// Hand-computed `(parameter, value, count)` histogram over [`mysql_corpus`],
/// with `(set_count, image_count)` per parameter.
pub const EXPECTED_HISTOGRAM: &[(&str, &str, u64)] = &[
    ("mysqld.datadir", "/var/lib/mysql", 4),
    ("mysqld.datadir", "/var/lib/percona", 1),
    ("mysqld.key_buffer", "16M", 1),
    ("mysqld.key_buffer_size", "16M", 3),
    ("mysqld.key_buffer_size", "32M", 1),
    ("mysqld.port", "3306", 3),
    ("mysqld.port", "3307", 3),
    ("mysqld.query_cache_size", "16M", 3),
    ("mysqld.skip-external-locking", "", 2),
    ("mysqld.skip-host-cache", "", 1),
    ("mysqld.symbolic-links", "0", 2),
];

pub const EXPECTED_COUNTS: &[(&str, u64, usize)] = &[
    ("mysqld.datadir", 5, 5),
    ("mysqld.key_buffer", 1, 1),
    ("mysqld.key_buffer_size", 4, 4),
    ("mysqld.port", 6, 5),
    ("mysqld.query_cache_size", 3, 3),
    ("mysqld.skip-external-locking", 2, 2),
    ("mysqld.skip-host-cache", 1, 1),
    ("mysqld.symbolic-links", 2, 2),
];

pub fn mysqld() -> SoftwareProfile {
    builtin_profiles()
        .into_iter()
        .find(|p| p.software_id == "mysqld")
        .unwrap()
}

/// Observations of every configuration file in the corpus.
pub fn corpus_observations() -> Vec<ParamObservation> {
    let p = mysqld();
    mysql_corpus()
        .iter()
        .flat_map(|(r, layers)| mine_image(r, layers, &p))
        .collect()
}

/// Every k-subset of the item universe with its support, in the miner's order.
pub fn brute_force(tx: &BTreeMap<ImageRef, BTreeSet<Item>>, k: usize, min: u64) -> Vec<(Vec<Item>, u64)> {
    let universe: Vec<Item> = tx
        .values()
        .flatten()
        .cloned()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut out = Vec::new();
    let n = universe.len();
    assert!(n <= 20);
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != k {
            continue;
        }
        let set: Vec<Item> = (0..n)
            .filter(|i| mask & (1 << i) != 0)
            .map(|i| universe[i].clone())
            .collect();
        let support = tx.values().filter(|t| set.iter().all(|i| t.contains(i))).count() as u64;
        if support >= min.max(1) {
            out.push((set, support));
        }
    }
    out.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    out
}
