//! A model trained only on simple queries meets join-heavy ones. The drift
//! monitor watches live Q-errors; once it fires, a few labeled queries are
//! used to fine-tune.

use zscost::generalization::{DriftMonitor, DriftStatus};
use zscost::metrics::QErrorSummary;
use zscost::model::{self, FinetuneConfig, ModelConfig};
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
        300,
        0,
    )?;
    let corpus = TraceCorpus::new(catalogs, samples)?;
    let simple = corpus.filtered(|s| s.root.num_joins() <= 2);
    let heavy = corpus.filtered(|s| s.root.num_joins() >= 4);
    println!(
        "{} simple queries for training, {} with 4 joins arriving later",
        simple.len(),
        heavy.len()
    );

    let cfg = ModelConfig {
        hidden_dim: 32,
        lr: 3e-3,
        max_epochs: 10,
        patience: 5,
        ..ModelConfig::default()
    };
    let (m, _) = model::train(&simple, &cfg, CardSource::Actual, 0.1)?;

    let (tune, live) = heavy.samples.split_at(50.min(heavy.len() / 2));
    let mut monitor = DriftMonitor::new(40, 2.0)?;
    for (i, s) in live.iter().enumerate() {
        let p = m.predict_sample(s, corpus.catalog(&s.database_id)?)?;
        if let DriftStatus::Drifted { window_median } = monitor.update(s.runtime()?, p)? {
            println!(
                "drift after {} queries: window median q-error {window_median:.3}",
                i + 1
            );
            break;
        }
    }
    if monitor.status() == DriftStatus::Ok {
        println!(
            "no drift in {} queries (window median {:?})",
            live.len(),
            monitor.window_median()
        );
    }

    let extra = TraceCorpus::new(corpus.catalogs.clone(), tune.to_vec())?;
    let tuned = model::finetune(&m, &extra, &FinetuneConfig::default())?;
    let rest = TraceCorpus::new(corpus.catalogs.clone(), live.to_vec())?;
    let truth: Vec<f64> = rest
        .samples
        .iter()
        .map(|s| s.runtime())
        .collect::<zscost::Result<_>>()?;
    let before = QErrorSummary::from_pairs(&truth, &m.predict_corpus(&rest)?)?;
    let after = QErrorSummary::from_pairs(&truth, &tuned.predict_corpus(&rest)?)?;
    println!(
        "on {} unseen join-heavy queries: median {:.3} before, {:.3} after fine-tuning on {}",
        rest.len(),
        before.median,
        after.median,
        tune.len()
    );
    Ok(())
}
