//! Held-out error on one database as more training databases are added.

use zscost::generalization;
use zscost::model::ModelConfig;
use zscost::synth::{self, OracleParams, SynthParams, WorkloadMode};
use zscost::trace::{CardSource, TraceCorpus};

fn main() -> zscost::Result<()> {
    let params = SynthParams {
        num_databases: 6,
        ..SynthParams::default()
    };
    let (catalogs, samples) = synth::gen_corpus_data(
        &params,
        &OracleParams::default(),
        &[WorkloadMode::Standard],
        120,
        5,
    )?;
    let corpus = TraceCorpus::new(catalogs, samples)?;
    let cfg = ModelConfig {
        hidden_dim: 32,
        lr: 3e-3,
        max_epochs: 10,
        patience: 5,
        ..ModelConfig::default()
    };
    let curve = generalization::learning_curve(
        &corpus,
        &[1, 3, 5],
        &[0, 1],
        &cfg,
        CardSource::Actual,
        "synth_00",
    )?;
    println!("{curve}");
    for p in &curve.points {
        println!("k={} trained on {:?}", p.k, p.training_databases);
    }
    Ok(())
}
