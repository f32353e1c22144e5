//! Generates a small synthetic corpus on disk and prints what it contains.
//!
//!     cargo run --release --example generate_corpus -- /tmp/corpus

use std::path::PathBuf;

use zscost::synth::{self, OracleParams, SynthParams, WorkloadMode};
use zscost::trace::{Labels, TraceCorpus};

fn main() -> zscost::Result<()> {
    let out = std::env::args_os()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("zscost-corpus"));
    let params = SynthParams {
        num_databases: 4,
        ..SynthParams::default()
    };
    let summary = synth::gen_corpus(
        &params,
        &OracleParams::default(),
        &WorkloadMode::ALL,
        100,
        42,
        &out,
    )?;
    println!(
        "wrote {} queries over {} databases to {}",
        summary.queries,
        summary.databases,
        out.display()
    );

    // read it back the way any other trace would be read
    let (corpus, errors) = TraceCorpus::load(
        &out.join("trace.jsonl"),
        &out.join("catalogs"),
        Labels::Required,
    )?;
    assert!(errors.is_empty());
    for (db, catalog) in &corpus.catalogs {
        let n = corpus
            .samples
            .iter()
            .filter(|s| &s.database_id == db)
            .count();
        let rows: f64 = catalog.tables.iter().map(|t| t.reltuples).sum();
        println!(
            "{db}: {} tables, {rows:.0} rows, {n} queries",
            catalog.tables.len()
        );
    }
    let s = &corpus.samples[0];
    println!(
        "\nfirst query ({} joins, {:.4} s):\n{}",
        s.root.num_joins(),
        s.runtime()?,
        s.to_json_line()
    );
    Ok(())
}
