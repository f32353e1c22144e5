//! Generated plans, oracle runtimes and graph dumps pinned byte for byte.
//! Regenerate with `ZSCOST_UPDATE_GOLDEN=1 cargo test --test golden` after an
//! intentional change, and review the diff.

use std::path::PathBuf;

use zscost::featurize::{self, FeatureSpec};
use zscost::synth::{self, OracleParams, SynthParams, WorkloadMode};
use zscost::trace::{parse_catalog, CardSource};

const SEED: u64 = 20;
const PLANS_PER_MODE: usize = 20;

fn golden_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(name)
}

fn check(name: &str, actual: &str) {
    let path = golden_path(name);
    if std::env::var_os("ZSCOST_UPDATE_GOLDEN").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, actual).unwrap();
        return;
    }
    let expected = std::fs::read_to_string(&path).unwrap_or_else(|e| {
        panic!(
            "{}: {e}; set ZSCOST_UPDATE_GOLDEN=1 to create",
            path.display()
        )
    });
    if expected != actual {
        let line = expected
            .lines()
            .zip(actual.lines())
            .position(|(a, b)| a != b)
            .map_or(expected.lines().count().min(actual.lines().count()), |i| i);
        panic!("{name} differs from the golden file at line {}", line + 1);
    }
}

fn catalog() -> zscost::trace::DatabaseCatalog {
    synth::gen_catalog("golden", SEED, &SynthParams::default()).unwrap()
}

#[test]
fn golden_catalog() {
    let c = catalog();
    check("catalog.json", &(c.to_json() + "\n"));
    assert_eq!(parse_catalog(&c.to_json()).unwrap(), c);
}

#[test]
fn golden_plans_per_mode() {
    let c = catalog();
    for mode in WorkloadMode::ALL {
        let samples = synth::gen_database_samples(
            &c,
            &SynthParams::default(),
            &OracleParams::default(),
            &[mode],
            PLANS_PER_MODE,
            SEED,
        )
        .unwrap();
        assert_eq!(samples.len(), PLANS_PER_MODE);
        let text: String = samples.iter().map(|s| s.to_json_line() + "\n").collect();
        check(&format!("{}.jsonl", mode.name()), &text);
    }
}

#[test]
fn golden_graph_dumps() {
    let c = catalog();
    let samples = synth::gen_database_samples(
        &c,
        &SynthParams::default(),
        &OracleParams::default(),
        &WorkloadMode::ALL,
        6,
        SEED,
    )
    .unwrap();
    let spec = FeatureSpec::standard();
    let norm =
        featurize::fit_normalizer(samples.iter().map(|s| (s, &c, CardSource::Actual)), &spec)
            .unwrap();
    let mut text = String::new();
    for s in &samples {
        let g = featurize::build_query_graph(s, &c, CardSource::Actual, &spec, &norm).unwrap();
        text.push_str(&format!("# {}\n", s.sample_id));
        text.push_str(&g.dump());
    }
    check("graphs.txt", &text);
}
