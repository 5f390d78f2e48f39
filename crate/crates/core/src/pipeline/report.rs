use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::Serialize;

use super::PipelineError;
use crate::digest::Digest;
use crate::kb::CoverageReport;
use crate::reference::ImageRef;
use crate::registry::Manifest;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RepoSizeRow {
    pub repository: String,
    pub image_count: u64,
    pub total_bytes: u64,
    pub unique_layer_bytes: u64,
}

/// Per-repository totals from manifest layer sizes; unique bytes count each
/// digest once within the repository. Every listed repository gets a row,
/// as does any repository that only appears among the manifests.
pub fn report_repo_sizes(repositories: &[String], manifests: &[(ImageRef, Manifest)]) -> Vec<RepoSizeRow> {
    let mut rows: BTreeMap<&str, (RepoSizeRow, BTreeSet<&Digest>)> = BTreeMap::new();
    let empty = |name: &str| {
        (
            RepoSizeRow {
                repository: name.to_string(),
                image_count: 0,
                total_bytes: 0,
                unique_layer_bytes: 0,
            },
            BTreeSet::new(),
        )
    };
    for r in repositories {
        rows.entry(r).or_insert_with(|| empty(r));
    }
    for (image, m) in manifests {
        let (row, seen) = rows
            .entry(&image.repository)
            .or_insert_with(|| empty(&image.repository));
        row.image_count += 1;
        for l in &m.layers {
            row.total_bytes += l.size_bytes;
            if seen.insert(&l.digest) {
                row.unique_layer_bytes += l.size_bytes;
            }
        }
    }
    rows.into_values().map(|(r, _)| r).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SharingRow {
    pub repository: String,
    pub layer_occurrences: u64,
    pub distinct_layers: u64,
    pub unique_layer_fraction: Option<f64>,
    pub file_occurrences: Option<u64>,
    pub distinct_files: Option<u64>,
    pub unique_file_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageRow {
    pub image: ImageRef,
    #[serde(flatten)]
    pub report: CoverageReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Distribution {
    pub count: usize,
    pub min: f64,
    pub median: f64,
    pub mean: f64,
    pub max: f64,
}

impl Distribution {
    /// `None` for an empty sample.
    pub fn of(values: impl IntoIterator<Item = f64>) -> Option<Self> {
        let mut v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 {
            v[n / 2]
        } else {
            (v[n / 2 - 1] + v[n / 2]) / 2.0
        };
        Some(Distribution {
            count: n,
            min: v[0],
            median,
            mean: v.iter().sum::<f64>() / n as f64,
            max: v[n - 1],
        })
    }
}

/// What a run learned about the corpus, as input to the figure reports.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub repositories: Vec<String>,
    pub manifests: Vec<(ImageRef, Manifest)>,
    /// Content hashes of each image's regular files, when layers were scanned.
    pub file_hashes: Option<BTreeMap<ImageRef, Vec<Digest>>>,
    /// Knowledge-base coverage per image, when that pass ran.
    pub coverage: Option<BTreeMap<ImageRef, CoverageReport>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FigureBundle {
    pub sizes: Vec<RepoSizeRow>,
    pub sharing: Vec<SharingRow>,
    pub coverage: Vec<CoverageRow>,
    pub distributions: BTreeMap<String, Distribution>,
}

fn sharing_rows(corpus: &Corpus) -> Vec<SharingRow> {
    let mut repos: BTreeSet<&str> = corpus.repositories.iter().map(String::as_str).collect();
    repos.extend(corpus.manifests.iter().map(|(i, _)| i.repository.as_str()));
    repos
        .into_iter()
        .map(|repo| {
            let images = corpus.manifests.iter().filter(|(i, _)| i.repository == repo);
            let mut occ = 0u64;
            let mut distinct = BTreeSet::new();
            for (_, m) in images.clone() {
                for l in &m.layers {
                    occ += 1;
                    distinct.insert(&l.digest);
                }
            }
            let files = corpus.file_hashes.as_ref().map(|fh| {
                let mut occ = 0u64;
                let mut distinct = BTreeSet::new();
                for (i, _) in images.clone() {
                    for h in fh.get(i).into_iter().flatten() {
                        occ += 1;
                        distinct.insert(h);
                    }
                }
                (occ, distinct.len() as u64)
            });
            let frac = |d: u64, o: u64| (o > 0).then(|| d as f64 / o as f64);
            SharingRow {
                repository: repo.to_string(),
                layer_occurrences: occ,
                distinct_layers: distinct.len() as u64,
                unique_layer_fraction: frac(distinct.len() as u64, occ),
                file_occurrences: files.map(|f| f.0),
                distinct_files: files.map(|f| f.1),
                unique_file_fraction: files.and_then(|(o, d)| frac(d, o)),
            }
        })
        .collect()
}

/// Size, sharing and coverage figures with min/median/mean/max summaries.
pub fn report_figures(corpus: &Corpus) -> Result<FigureBundle, PipelineError> {
    if corpus.manifests.is_empty() {
        return Err(PipelineError::MissingPassData(
            "the corpus has no image manifests".into(),
        ));
    }
    let sizes = report_repo_sizes(&corpus.repositories, &corpus.manifests);
    let sharing = sharing_rows(corpus);
    let coverage: Vec<CoverageRow> = corpus
        .coverage
        .iter()
        .flatten()
        .map(|(i, r)| CoverageRow {
            image: i.clone(),
            report: *r,
        })
        .collect();

    let mut distributions = BTreeMap::new();
    let mut add = |name: &str, d: Option<Distribution>| {
        if let Some(d) = d {
            distributions.insert(name.to_string(), d);
        }
    };
    add(
        "repo_total_bytes",
        Distribution::of(sizes.iter().map(|r| r.total_bytes as f64)),
    );
    add(
        "unique_layer_fraction",
        Distribution::of(sharing.iter().filter_map(|r| r.unique_layer_fraction)),
    );
    add(
        "unique_file_fraction",
        Distribution::of(sharing.iter().filter_map(|r| r.unique_file_fraction)),
    );
    add(
        "file_hit_ratio",
        Distribution::of(coverage.iter().map(|c| c.report.file_hit_ratio)),
    );
    add(
        "layer_hit_ratio",
        Distribution::of(coverage.iter().map(|c| c.report.layer_hit_ratio)),
    );
    Ok(FigureBundle {
        sizes,
        sharing,
        coverage,
        distributions,
    })
}

fn ratio(v: f64) -> String {
    format!("{v:.6}")
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub fn write_sizes_csv(rows: &[RepoSizeRow], w: impl Write) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["repository", "image_count", "total_bytes", "unique_layer_bytes"])?;
    for r in rows {
        out.write_record([
            r.repository.clone(),
            r.image_count.to_string(),
            r.total_bytes.to_string(),
            r.unique_layer_bytes.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_sharing_csv(rows: &[SharingRow], w: impl Write) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "repository",
        "layer_occurrences",
        "distinct_layers",
        "unique_layer_fraction",
        "file_occurrences",
        "distinct_files",
        "unique_file_fraction",
    ])?;
    for r in rows {
        out.write_record([
            r.repository.clone(),
            r.layer_occurrences.to_string(),
            r.distinct_layers.to_string(),
            opt(r.unique_layer_fraction.map(ratio)),
            opt(r.file_occurrences),
            opt(r.distinct_files),
            opt(r.unique_file_fraction.map(ratio)),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_coverage_csv(rows: &[CoverageRow], w: impl Write) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "image",
        "total_files",
        "known_files",
        "file_hit_ratio",
        "total_layers",
        "known_layers",
        "layer_hit_ratio",
    ])?;
    for c in rows {
        let r = &c.report;
        out.write_record([
            c.image.to_string(),
            r.total_files.to_string(),
            r.known_files.to_string(),
            ratio(r.file_hit_ratio),
            r.total_layers.to_string(),
            r.known_layers.to_string(),
            ratio(r.layer_hit_ratio),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Writes a CSV report produced by `f` into `path` atomically.
pub(crate) fn write_report(
    path: &Path,
    f: impl FnOnce(&mut dyn Write) -> Result<(), Box<dyn std::error::Error + Send + Sync>>,
) -> io::Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    {
        let mut w = io::BufWriter::new(tmp.as_file_mut());
        f(&mut w).map_err(io::Error::other)?;
        w.flush()?;
    }
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

impl FigureBundle {
    /// `repo-sizes.csv`, `layer-sharing.csv`, `kb-coverage.csv` (when there
    /// is coverage data) and `figures.json` under `dir`.
    pub fn write_to(&self, dir: &Path) -> io::Result<()> {
        write_report(&dir.join("repo-sizes.csv"), |w| Ok(write_sizes_csv(&self.sizes, w)?))?;
        write_report(&dir.join("layer-sharing.csv"), |w| {
            Ok(write_sharing_csv(&self.sharing, w)?)
        })?;
        if !self.coverage.is_empty() {
            write_report(&dir.join("kb-coverage.csv"), |w| {
                Ok(write_coverage_csv(&self.coverage, w)?)
            })?;
        }
        write_report(&dir.join("figures.json"), |w| {
            serde_json::to_writer_pretty(&mut *w, self)?;
            w.write_all(b"\n")?;
            Ok(())
        })
    }
}
