//! Trains on some databases and predicts runtimes on one it has never seen.

use zscost::metrics::QErrorSummary;
use zscost::model::{self, ModelConfig};
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
        200,
        1,
    )?;
    let corpus = TraceCorpus::new(catalogs, samples)?;
    let unseen = "synth_04";
    let train = corpus.filtered(|s| s.database_id != unseen);
    let test = corpus.filtered(|s| s.database_id == unseen);

    let cfg = ModelConfig {
        hidden_dim: 32,
        lr: 3e-3,
        max_epochs: 15,
        patience: 5,
        ..ModelConfig::default()
    };
    let (m, report) = model::train(&train, &cfg, CardSource::Actual, 0.1)?;
    println!(
        "trained on {} queries for {} epochs, validation median q-error {:.3}",
        report.num_train,
        report.epochs.len(),
        report.final_val_median().unwrap_or(f64::NAN)
    );

    let predicted = m.predict_corpus(&test)?;
    let actual: Vec<f64> = test
        .samples
        .iter()
        .map(|s| s.runtime())
        .collect::<zscost::Result<_>>()?;
    let q = QErrorSummary::from_pairs(&actual, &predicted)?;
    println!(
        "unseen {unseen}: median {:.3}, p95 {:.3}, max {:.3}",
        q.median, q.p95, q.max
    );
    for (s, p) in test.samples.iter().zip(&predicted).take(5) {
        println!(
            "  {}  actual {:>9.4} s  predicted {:>9.4} s",
            s.sample_id,
            s.runtime()?,
            p
        );
    }

    let path = std::env::temp_dir().join("zscost-example.model");
    m.save(&path)?;
    println!("saved to {} (checksum {})", path.display(), m.checksum());
    Ok(())
}
