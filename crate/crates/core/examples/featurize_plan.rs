//! Turns one generated plan into its transferable graph and prints it.

use zscost::featurize::{self, FeatureSpec, NodeType};
use zscost::synth::{self, OracleParams, SynthParams, WorkloadMode};
use zscost::trace::CardSource;

fn main() -> zscost::Result<()> {
    let params = SynthParams::default();
    let catalog = synth::gen_catalog("demo", 7, &params)?;
    let samples = synth::gen_database_samples(
        &catalog,
        &params,
        &OracleParams::default(),
        &[WorkloadMode::Standard],
        50,
        7,
    )?;
    let spec = FeatureSpec::standard();
    // features are standardized with statistics of the whole workload
    let norm = featurize::fit_normalizer(
        samples.iter().map(|s| (s, &catalog, CardSource::Estimated)),
        &spec,
    )?;

    let sample = samples
        .iter()
        .max_by_key(|s| s.root.num_joins())
        .expect("non-empty workload");
    let g = featurize::build_query_graph(sample, &catalog, CardSource::Estimated, &spec, &norm)?;
    println!(
        "{} ({} joins): {} nodes, {} edges",
        sample.sample_id,
        sample.root.num_joins(),
        g.len(),
        g.edges().len()
    );
    for t in [
        NodeType::PlanOp,
        NodeType::Table,
        NodeType::Attribute,
        NodeType::Predicate,
        NodeType::OutputColumn,
    ] {
        println!("  {t:?}: {} nodes of width {}", g.count(t), spec.dim(t));
    }
    println!("\n{}", g.dump());
    Ok(())
}
