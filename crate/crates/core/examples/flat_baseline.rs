//! The flat per-operator encoding next to the graph model, on the same
//! leave-one-database-out folds.

use zscost::baseline::{self, BaselineConfig, FlatDataset};
use zscost::generalization::{self, BaselineLearner, ZeroShotLearner};
use zscost::model::{GraphDataset, ModelConfig};
use zscost::synth::{self, OracleParams, SynthParams, WorkloadMode};
use zscost::trace::{CardSource, OpName, TraceCorpus};

fn main() -> zscost::Result<()> {
    let params = SynthParams {
        num_databases: 4,
        ..SynthParams::default()
    };
    let (catalogs, samples) = synth::gen_corpus_data(
        &params,
        &OracleParams::default(),
        &[WorkloadMode::Standard],
        150,
        9,
    )?;
    let corpus = TraceCorpus::new(catalogs, samples)?;

    // what the baseline sees: per operator type, a count and a cardinality sum
    let s = &corpus.samples[0];
    let v = baseline::flat_encode(s, CardSource::Actual);
    for op in OpName::ALL {
        if v.count(op.index()) > 0.0 {
            println!(
                "{:<16} count {} cards {:.0}",
                op.name(),
                v.count(op.index()),
                v.card_sum(op.index())
            );
        }
    }

    let cfg = ModelConfig {
        hidden_dim: 32,
        lr: 3e-3,
        max_epochs: 10,
        patience: 5,
        ..ModelConfig::default()
    };
    let graphs = GraphDataset::from_corpus(&corpus, CardSource::Actual)?;
    let flat = FlatDataset::from_corpus(&corpus, CardSource::Actual)?;
    let zs = generalization::lodo(
        &ZeroShotLearner {
            data: &graphs,
            config: cfg.clone(),
            val_fraction: 0.1,
        },
        &[0],
    )?;
    let base = generalization::lodo(
        &BaselineLearner {
            data: &flat,
            config: BaselineConfig::matching(&cfg),
            val_fraction: 0.1,
        },
        &[0],
    )?;
    println!("\n{:<10} {:>10} {:>10}", "database", "graph", "flat");
    for (a, b) in zs.databases.iter().zip(&base.databases) {
        println!("{:<10} {:>10.3} {:>10.3}", a.database, a.median, b.median);
    }
    println!(
        "{:<10} {:>10.3} {:>10.3}",
        "mean", zs.aggregate, base.aggregate
    );
    Ok(())
}
