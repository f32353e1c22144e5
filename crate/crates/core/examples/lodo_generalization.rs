//! Leave-one-database-out: every database is predicted by a model that never
//! saw it. Small settings so it finishes in a couple of minutes.

use zscost::generalization::{self, ZeroShotLearner};
use zscost::model::{GraphDataset, ModelConfig};
use zscost::synth::{self, OracleParams, SynthParams, WorkloadMode};
use zscost::trace::{CardSource, TraceCorpus};

fn main() -> zscost::Result<()> {
    let params = SynthParams {
        num_databases: 5,
        ..SynthParams::default()
    };
    let (catalogs, samples) = synth::gen_corpus_data(
        &params,
        &OracleParams::default(),
        &[WorkloadMode::Standard],
        150,
        3,
    )?;
    let corpus = TraceCorpus::new(catalogs, samples)?;

    let data = GraphDataset::from_corpus(&corpus, CardSource::Actual)?;
    let learner = ZeroShotLearner {
        data: &data,
        config: ModelConfig {
            hidden_dim: 32,
            lr: 3e-3,
            max_epochs: 10,
            patience: 5,
            ..ModelConfig::default()
        },
        val_fraction: generalization::DEFAULT_VAL_FRACTION,
    };
    let report = generalization::lodo(&learner, &[0])?;
    println!("{report}");
    println!(
        "{}",
        report
            .to_csv(&data.sample_ids)
            .lines()
            .take(4)
            .collect::<Vec<_>>()
            .join("\n")
    );
    Ok(())
}
