//! Acceptance checks, one line per check. Runs without the libtest
//! harness so the lines always reach the output; exits nonzero if any
//! check fails.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use common::configs::{brute_force, corpus_observations, EXPECTED_HISTOGRAM};
use common::corpus::{read_tree, stream_corpus};
use common::dockerfiles::{corpus, fixtures, Expected, Golden};
use common::image_fs;
use common::kbfix::{base_layer, random_image};
use common::oracle::{composed_view, extract_stack, random_stack};
use common::server::{http, sample_registry, serve, ServerOptions};
use common::sharing::{common_base_images, expected_fraction, sharing_corpus, SHAPES};
use layerminer::confmine::{aggregate_usage, diff_across_versions, mine_combinations, transactions};
use layerminer::dockerfile::{estimate_layers, lint_reproducibility, parse, parse_bytes, render};
use layerminer::kb::{build_kb, KnowledgeBase};
use layerminer::pipeline::{run_pipeline, MiningJobConfig};
use layerminer::registry::{FixtureRegistry, Registry, RegistryError};
use layerminer::store::{plan_batch, unique_layer_fraction};
use layerminer::testkit::TarBuilder;
use layerminer::{Digest, ImageRef};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

const ORACLE_TRIALS: u64 = 500;
const ORACLE_TIME_LIMIT: Duration = Duration::from_secs(60);
const KB_GROWTH_SEQUENCES: u64 = 100;
const FUZZ_INPUTS: usize = 100_000;
const SEEDED_VIOLATIONS: usize = 14;
const GOLDEN_FILES: usize = 20;
const SPECIAL: &[u8] = b"\\\n\"'`[]{}$ ";

type Check = fn() -> String;

static LAST_PANIC: Mutex<String> = Mutex::new(String::new());

fn composition_oracle() -> String {
    let start = Instant::now();
    for seed in 0..ORACLE_TRIALS {
        let layers = random_stack(seed);
        assert!(layers.len() <= 5);
        let scratch = tempfile::tempdir().unwrap();
        let expected = extract_stack(&layers, scratch.path());
        assert_eq!(composed_view(&layers), expected, "seed {seed}");
    }
    let took = start.elapsed();
    assert!(took < ORACLE_TIME_LIMIT, "took {took:?}");
    format!(
        "{ORACLE_TRIALS}/{ORACLE_TRIALS} stacks match in {:.1}s",
        took.as_secs_f64()
    )
}

fn shared_layer_dedup() -> String {
    let corpus = sharing_corpus();
    let mut low = 0;
    for (r, shape) in SHAPES.iter().enumerate() {
        let repo = format!("shared/repo{r}");
        let f = unique_layer_fraction(corpus.iter().filter(|(i, _)| i.repository == repo).map(|(_, m)| m)).unwrap();
        assert_eq!(f, expected_fraction(*shape), "{repo}");
        low += usize::from(f <= 0.65);
    }
    assert_eq!(low, 6);

    let (images, base) = common_base_images();
    let plan = plan_batch(&images, |_| false);
    let fetched = plan.fetch_digests();
    let distinct: BTreeSet<_> = fetched.iter().collect();
    assert_eq!(fetched.len(), distinct.len());
    let shared = &images[0].1.layers[..3];
    for l in shared {
        assert_eq!(fetched.iter().filter(|d| ***d == l.digest).count(), 1);
    }
    assert_eq!(plan.bytes_saved, 9 * base);
    format!("10/10 fractions exact, {low} repos <= 0.65, bytes_saved = 9 x {base}")
}

fn kb_coverage() -> String {
    let base = vec![base_layer()];
    let base_ref: ImageRef = "official/base:1".parse().unwrap();
    let base_fs = image_fs(&base);
    let kb = build_kb([(&base_ref, &base_fs)]);
    let app = TarBuilder::new()
        .file("app/main", b"main")
        .file("app/conf", b"conf")
        .finish();
    let c = kb.coverage(&image_fs(&[base_layer(), app]));
    assert_eq!((c.known_files, c.total_files), (8, 10));
    assert_eq!(c.file_hit_ratio, 0.8);

    for seed in 0..KB_GROWTH_SEQUENCES {
        let mut rng = StdRng::seed_from_u64(seed);
        let pool: Vec<Vec<u8>> = (0..4)
            .map(|i| TarBuilder::new().file(&format!("lib/l{i}"), &[i as u8; 3]).finish())
            .collect();
        let target = image_fs(&random_image(&mut rng, &pool));
        let mut kb = KnowledgeBase::new();
        let mut last = kb.coverage(&target).file_hit_ratio;
        for step in 0..rng.gen_range(1..12) {
            let r: ImageRef = format!("corpus/i{step}:1").parse().unwrap();
            kb.add_image(&r, &image_fs(&random_image(&mut rng, &pool)));
            let now = kb.coverage(&target).file_hit_ratio;
            assert!(now >= last, "sequence {seed} step {step}: {now} < {last}");
            last = now;
        }
    }
    format!(
        "file_hit_ratio = {}, monotone over {KB_GROWTH_SEQUENCES} growth sequences",
        c.file_hit_ratio
    )
}

fn job(fixture: &Path, out: &Path, budget: u64, degree: usize) -> MiningJobConfig {
    let index: serde_json::Value = serde_json::from_slice(&fs::read(fixture.join("index.json")).unwrap()).unwrap();
    let mut c = MiningJobConfig::new(&format!("fixture:{}", fixture.display()), budget, out);
    c.repositories = index["repositories"].as_object().unwrap().keys().cloned().collect();
    c.parallelism = degree;
    c
}

fn outputs(out: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut t = read_tree(&out.join("reports"));
    for (k, v) in read_tree(&out.join("observations")) {
        t.insert(format!("observations/{k}"), v);
    }
    t
}

fn dp_skip() -> String {
    let dir = tempfile::tempdir().unwrap();
    let corpus = stream_corpus(&dir.path().join("reg"));
    let out = dir.path().join("out");
    let config = job(&corpus.root, &out, 2 * corpus.max_layer, 2);
    let first = run_pipeline(&config).unwrap();
    assert_eq!(first.counters.layer_scans, corpus.distinct_layers as u64);
    let second = run_pipeline(&config).unwrap();
    assert_eq!(second.counters.layer_scans, 0);
    assert_eq!(second.counters.scan_cache_hits, second.counters.layers_distinct);
    assert_eq!(second.images_processed, first.images_processed);
    format!(
        "rerun: 0 layer scans, {}/{} processed marks hit",
        second.counters.scan_cache_hits, second.counters.layers_distinct
    )
}

fn streaming_bound() -> String {
    let dir = tempfile::tempdir().unwrap();
    let corpus = stream_corpus(&dir.path().join("reg"));
    assert_eq!(corpus.images, 50);
    let budget = 3 * corpus.max_layer;
    let mut reports = Vec::new();
    let mut peaks = Vec::new();
    for degree in [1, 4] {
        let out = dir.path().join(format!("out{degree}"));
        let s = run_pipeline(&job(&corpus.root, &out, budget, degree)).unwrap();
        assert_eq!(s.images_processed, 50);
        assert!(
            s.peak_store_bytes <= budget + corpus.max_layer,
            "degree {degree}: peak {} > {budget} + {}",
            s.peak_store_bytes,
            corpus.max_layer
        );
        peaks.push(s.peak_store_bytes);
        reports.push(outputs(&out));
    }
    assert_eq!(reports[0], reports[1]);
    format!(
        "peak {} / {} bytes at degrees 1 / 4 (bound {}), {} report files identical",
        peaks[0],
        peaks[1],
        budget + corpus.max_layer,
        reports[0].len()
    )
}

fn dockerfiles() -> String {
    let golden: BTreeMap<String, Golden> =
        serde_json::from_str(&fs::read_to_string(fixtures().join("golden/counts.json")).unwrap()).unwrap();
    let files = corpus("golden");
    assert_eq!(files.len(), GOLDEN_FILES);
    for (name, text) in &files {
        let est = estimate_layers(&parse(text));
        assert_eq!(est.total_instruction_count, golden[name].instructions, "{name}");
        assert_eq!(est.fs_layer_count, golden[name].fs_layers, "{name}");
    }

    let mut expected: Vec<Expected> =
        serde_json::from_str(&fs::read_to_string(fixtures().join("lint/expected.json")).unwrap()).unwrap();
    expected.sort();
    assert_eq!(expected.len(), SEEDED_VIOLATIONS);
    let mut found = Vec::new();
    for (name, text) in corpus("lint") {
        for f in lint_reproducibility(&parse(&text)) {
            found.push(Expected {
                file: name.clone(),
                rule_id: f.rule_id,
                line: f.line,
            });
        }
    }
    found.sort();
    assert_eq!(found, expected);
    for (name, text) in corpus("pinned") {
        assert_eq!(lint_reproducibility(&parse(&text)), vec![], "{name}");
    }

    // half uniform bytes, half mutated corpus files
    let seeds: Vec<Vec<u8>> = files.iter().map(|(_, t)| t.as_bytes().to_vec()).collect();
    let mut rng = StdRng::seed_from_u64(0xf022);
    for i in 0..FUZZ_INPUTS {
        let input: Vec<u8> = if i % 2 == 0 {
            let n = rng.gen_range(0..512);
            (0..n).map(|_| rng.gen()).collect()
        } else {
            let mut b = seeds[rng.gen_range(0..seeds.len())].clone();
            for _ in 0..rng.gen_range(1..8) {
                let at = rng.gen_range(0..=b.len());
                match rng.gen_range(0..3) {
                    0 if at < b.len() => b[at] = rng.gen(),
                    1 => b.insert(at, SPECIAL[rng.gen_range(0..SPECIAL.len())]),
                    _ => b.truncate(at),
                }
            }
            b
        };
        let ast = parse_bytes(&input);
        lint_reproducibility(&ast);
        estimate_layers(&ast);
        parse(&render(&ast));
    }
    format!(
        "{GOLDEN_FILES} golden counts exact, {}/{SEEDED_VIOLATIONS} violations, pinned corpus clean, {FUZZ_INPUTS} fuzz inputs without a crash",
        found.len()
    )
}

fn config_mining() -> String {
    let obs = corpus_observations();
    let stats = aggregate_usage(&obs, true);
    let mut got = Vec::new();
    for (k, s) in &stats.params {
        for (v, n) in &s.histogram {
            got.push((k.parameter.clone(), v.clone(), *n));
        }
    }
    let want: Vec<_> = EXPECTED_HISTOGRAM
        .iter()
        .map(|(p, v, n)| (p.to_string(), v.to_string(), *n))
        .collect();
    assert_eq!(got, want);

    let tx = transactions(&obs);
    for k in 1..=3 {
        for min in [1, 2, 3] {
            let mined: Vec<_> = mine_combinations(&tx, k, min)
                .into_iter()
                .map(|c| (c.items, c.support))
                .collect();
            assert_eq!(mined, brute_force(&tx, k, min), "k={k} min={min}");
        }
    }

    let d = diff_across_versions(&stats).unwrap();
    let names = |s: &BTreeSet<layerminer::confmine::ParamKey>| -> Vec<String> {
        s.iter()
            .map(|k| k.parameter.trim_start_matches("mysqld.").to_string())
            .collect()
    };
    assert_eq!(d.order, ["5.5", "5.6", "5.7"]);
    assert_eq!(names(&d.steps[0].added), ["key_buffer_size", "skip-host-cache"]);
    assert_eq!(names(&d.steps[0].removed), ["key_buffer"]);
    assert!(d.steps[0].value_shift.is_empty());
    assert_eq!(names(&d.steps[1].added), ["symbolic-links"]);
    assert_eq!(
        names(&d.steps[1].removed),
        ["query_cache_size", "skip-external-locking", "skip-host-cache"]
    );
    let shifts: Vec<_> = d.steps[1]
        .value_shift
        .iter()
        .map(|v| {
            (
                v.parameter.parameter.as_str(),
                v.from_value.as_str(),
                v.to_value.as_str(),
            )
        })
        .collect();
    assert_eq!(shifts, [("mysqld.port", "3306", "3307")]);
    format!(
        "{} histogram rows exact, combinations k=1..3 equal brute force, version diff exact",
        got.len()
    )
}

fn layer(reg: &dyn Registry, repo: &str, d: &Digest) -> Result<Vec<u8>, RegistryError> {
    let mut buf = Vec::new();
    reg.fetch_layer(repo, d, &mut buf).map(|_| buf)
}

fn registry_equivalence() -> String {
    let dir = tempfile::tempdir().unwrap();
    let root = sample_registry(dir.path());
    let fixture = FixtureRegistry::open(&root).unwrap();
    let server = serve(&root, ServerOptions::default());
    let client = http(&server.url);
    let backends: [&dyn Registry; 2] = [&fixture, &client];

    let mut ops = 0;
    let mut blobs: Vec<(String, Digest)> = Vec::new();
    let mut refs: Vec<ImageRef> = Vec::new();
    for (repo, r) in &fixture.index().repositories {
        assert_eq!(client.list_tags(repo).unwrap(), fixture.list_tags(repo).unwrap());
        assert_eq!(
            client.fetch_repo_metadata(repo).unwrap(),
            fixture.fetch_repo_metadata(repo).unwrap()
        );
        ops += 2;
        for t in &r.tags {
            let image = ImageRef::new(repo, &t.tag).unwrap();
            let reference = image.manifest_reference();
            let a = client.fetch_manifest_raw(repo, &reference).unwrap();
            let b = fixture.fetch_manifest_raw(repo, &reference).unwrap();
            assert_eq!((a.bytes, a.declared_digest), (b.bytes, b.declared_digest));
            let m = client.fetch_manifest(&image).unwrap();
            assert_eq!(m, fixture.fetch_manifest(&image).unwrap());
            ops += 2;
            for l in &m.layers {
                assert_eq!(
                    layer(&client, repo, &l.digest).unwrap(),
                    layer(&fixture, repo, &l.digest).unwrap()
                );
                blobs.push((repo.clone(), l.digest.clone()));
                ops += 1;
            }
            refs.push(image);
        }
    }
    for q in ["web", "lib", "db", "nothing"] {
        for page in 1..=3 {
            assert_eq!(client.search(q, page).unwrap(), fixture.search(q, page).unwrap());
            ops += 1;
        }
    }

    // corrupt every blob and every stored manifest
    blobs.sort();
    blobs.dedup();
    for (_, d) in &blobs {
        let p = fixture.blob_path(d);
        let mut b = fs::read(&p).unwrap();
        b[0] ^= 0x01;
        fs::write(&p, b).unwrap();
    }
    for entry in fs::read_dir(root.join("manifests")).unwrap() {
        let p = entry.unwrap().path();
        let mut b = fs::read(&p).unwrap();
        b.push(b' ');
        fs::write(&p, b).unwrap();
    }
    let mut mismatches = 0;
    for reg in backends {
        for (repo, d) in &blobs {
            let r = layer(reg, repo, d);
            assert!(matches!(r, Err(RegistryError::DigestMismatch { .. })), "{d}: {r:?}");
            mismatches += 1;
        }
        for image in &refs {
            let r = reg.fetch_manifest(image);
            assert!(matches!(r, Err(RegistryError::DigestMismatch { .. })), "{image}: {r:?}");
            mismatches += 1;
        }
    }
    format!("{ops} operations identical over HTTP and fixture, all {mismatches} corrupted fetches rejected")
}

fn main() -> ExitCode {
    let checks: [(&str, Check); 8] = [
        ("composition oracle equivalence", composition_oracle),
        ("shared-layer dedup", shared_layer_dedup),
        ("knowledge base coverage", kb_coverage),
        ("processed-mark skip on rerun", dp_skip),
        ("streaming bound", streaming_bound),
        ("Dockerfile parsing and linting", dockerfiles),
        ("configuration mining", config_mining),
        ("registry client equivalence", registry_equivalence),
    ];
    let default_hook = panic::take_hook();
    panic::set_hook(Box::new(|info| {
        if let Some(l) = info.location() {
            *LAST_PANIC.lock().unwrap() = format!(" at {}:{}", l.file(), l.line());
        }
    }));
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        match panic::catch_unwind(AssertUnwindSafe(check)) {
            Ok(detail) => println!("PASS {}. {name}: {detail}", i + 1),
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                let at = LAST_PANIC.lock().unwrap().clone();
                println!("FAIL {}. {name}: {}{at}", i + 1, msg.replace('\n', " "));
                failed += 1;
            }
        }
    }
    panic::set_hook(default_hook);
    println!("acceptance: {} passed, {failed} failed", checks.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
