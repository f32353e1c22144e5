//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any
//! fails. Set `ZSCOST_ACCEPTANCE=1,8` to run a subset.
//!
//! The learned criteria share one synthetic corpus (seed 0, 10 databases of
//! 500 standard queries) and three training seeds. Expect a long run.

use std::collections::BTreeSet;
use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use zscost::baseline::{self, BaselineConfig, FlatDataset};
use zscost::featurize::{self, FeatureNormalizer, FeatureSpec, QueryGraph};
use zscost::generalization::{
    self, BaselineLearner, DriftMonitor, DriftStatus, GeneralizationReport, ZeroShotLearner,
    DEFAULT_VAL_FRACTION,
};
use zscost::metrics::{self, QErrorSummary};
use zscost::model::{self, FinetuneConfig, GraphDataset, ModelConfig, ZeroShotModel};
use zscost::neural::{AdamConfig, AdamState};
use zscost::synth::{self, OracleParams, SynthParams, WorkloadMode};
use zscost::trace::{
    self, parse_catalog, CardSource, ColumnRef, ComparisonOp, Labels, OpName, PlanOperator,
    PredicateExpr, TraceCorpus,
};
use zscost::train::Loss;
use zscost::{Error, Result};

const CORPUS_SEED: u64 = 0;
const QUERIES_PER_DB: usize = 500;
const SEEDS: [u64; 3] = [0, 1, 2];
const TARGET: &str = "synth_00";

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            pass,
            detail: detail.into(),
        }
    }
}

fn config() -> ModelConfig {
    ModelConfig {
        hidden_dim: 32,
        lr: 3e-3,
        max_epochs: 15,
        patience: 5,
        ..ModelConfig::default()
    }
}

struct Shared {
    corpus: TraceCorpus,
    actual: GraphDataset,
}

fn corpus() -> Result<Shared> {
    let (catalogs, samples) = synth::gen_corpus_data(
        &SynthParams::default(),
        &OracleParams::default(),
        &[WorkloadMode::Standard],
        QUERIES_PER_DB,
        CORPUS_SEED,
    )?;
    let corpus = TraceCorpus::new(catalogs, samples)?;
    let actual = GraphDataset::from_corpus(&corpus, CardSource::Actual)?;
    Ok(Shared { corpus, actual })
}

fn zero_shot(data: &GraphDataset) -> ZeroShotLearner<'_> {
    ZeroShotLearner {
        data,
        config: config(),
        val_fraction: DEFAULT_VAL_FRACTION,
    }
}

// 1: analytic gradients against central differences.
fn gradient_check() -> Result<Outcome> {
    let params = SynthParams::default();
    let oracle = OracleParams::default();
    let spec = FeatureSpec::standard();
    let mut graphs: Vec<(QueryGraph, f64, FeatureNormalizer)> = Vec::new();
    for seed in 0.. {
        let catalog = synth::gen_catalog("grad", seed, &params)?;
        let samples =
            synth::gen_database_samples(&catalog, &params, &oracle, &WorkloadMode::ALL, 12, seed)?;
        let norm = featurize::fit_normalizer(
            samples.iter().map(|s| (s, &catalog, CardSource::Actual)),
            &spec,
        )?;
        for s in &samples {
            let g = featurize::build_query_graph(s, &catalog, CardSource::Actual, &spec, &norm)?;
            if (3..=25).contains(&g.len()) && graphs.len() < 50 {
                graphs.push((g, s.runtime()?, norm.clone()));
            }
        }
        if graphs.len() == 50 {
            break;
        }
    }

    let mut worst = 0.0f64;
    let mut worst_strict = 0.0f64;
    let mut checked = 0usize;
    for (i, (g, runtime, norm)) in graphs.iter().enumerate() {
        let cfg = ModelConfig {
            hidden_dim: 8,
            seed: 1000 + i as u64,
            ..ModelConfig::default()
        };
        let mut m = ZeroShotModel::new(cfg, CardSource::Actual, spec.clone(), norm.clone())?;
        let (loss, grad) = m.loss_and_gradient(g, *runtime, Loss::QError)?;
        let h = 1e-5;
        for k in 0..grad.len() {
            let orig = m.params().data()[k];
            m.params_mut().data_mut()[k] = orig + h;
            let plus = m.loss(g, *runtime, Loss::QError)?;
            m.params_mut().data_mut()[k] = orig - h;
            let minus = m.loss(g, *runtime, Loss::QError)?;
            m.params_mut().data_mut()[k] = orig;
            let fd = (plus - minus) / (2.0 * h);
            // Coordinates whose effect over h is below the loss's own
            // round-off (a few dozen ulps) cannot be resolved by central
            // differences; compare those on an absolute scale instead.
            let diff = (fd - grad[k]).abs();
            let scale = fd.abs().max(grad[k].abs());
            worst = worst.max(diff / scale.max(1e-5 * loss.abs().max(1.0)));
            worst_strict = worst_strict.max(diff / scale.max(1e-6 * loss.abs().max(1.0)));
            checked += 1;
        }
    }
    Ok(Outcome::new(
        worst < 1e-4,
        format!(
            "max relative error {worst:.2e} over {checked} parameters of {} graphs (need < 1e-4; {worst_strict:.2e} with a 10x lower round-off floor)",
            graphs.len()
        ),
    ))
}

fn worst_database(r: &GeneralizationReport) -> (String, f64) {
    r.databases
        .iter()
        .map(|d| (d.database.clone(), d.median))
        .fold((String::new(), 0.0), |a, b| if b.1 > a.1 { b } else { a })
}

// 2, 3, 4: leave-one-database-out with both cardinality sources and the
// flat baseline, on identical folds and seeds.
fn lodo_criteria(
    shared: &Shared,
    wanted: &BTreeSet<u32>,
    report: &mut dyn FnMut(u32, &str, Result<Outcome>),
) {
    let actual = match generalization::lodo(&zero_shot(&shared.actual), &SEEDS) {
        Ok(r) => r,
        Err(e) => {
            for c in [2, 3, 4] {
                if wanted.contains(&c) {
                    report(c, "lodo", Err(Error::InvalidArgument(e.to_string())));
                }
            }
            return;
        }
    };
    eprintln!("{actual}");

    if wanted.contains(&2) {
        let (db, worst) = worst_database(&actual);
        let worst_seed = actual
            .databases
            .iter()
            .map(|d| d.worst_seed_median)
            .fold(0.0, f64::max);
        let medians: Vec<String> = actual
            .databases
            .iter()
            .map(|d| format!("{}={:.3}", d.database, d.median))
            .collect();
        report(
            2,
            "every held-out database median <= 1.5",
            Ok(Outcome::new(
                worst <= 1.5,
                format!(
                    "worst {db} {worst:.4}, aggregate {:.4}, worst single seed {worst_seed:.4} [{}]",
                    actual.aggregate,
                    medians.join(" ")
                ),
            )),
        );
    }

    if wanted.contains(&3) {
        let out = GraphDataset::from_corpus(&shared.corpus, CardSource::Estimated)
            .and_then(|est| generalization::lodo(&zero_shot(&est), &SEEDS))
            .map(|est| {
                eprintln!("{est}");
                Outcome::new(
                    actual.aggregate <= est.aggregate + 0.05,
                    format!(
                        "actual {:.4} vs estimated {:.4} (need actual <= estimated + 0.05)",
                        actual.aggregate, est.aggregate
                    ),
                )
            });
        report(3, "actual cardinalities no worse than estimated", out);
    }

    if wanted.contains(&4) {
        let out = FlatDataset::from_corpus(&shared.corpus, CardSource::Actual)
            .and_then(|flat| {
                let learner = BaselineLearner {
                    data: &flat,
                    config: BaselineConfig::matching(&config()),
                    val_fraction: DEFAULT_VAL_FRACTION,
                };
                generalization::lodo(&learner, &SEEDS)
            })
            .map(|base| {
                eprintln!("{base}");
                let gap = base.aggregate / actual.aggregate - 1.0;
                Outcome::new(
                    gap >= 0.10,
                    format!(
                        "baseline {:.4} vs zero-shot {:.4}, gap {:.1}% (need >= 10%)",
                        base.aggregate,
                        actual.aggregate,
                        gap * 100.0
                    ),
                )
            });
        report(4, "graph model beats the flat baseline", out);
    }
}

// 5: more training databases do not hurt.
fn curve(shared: &Shared) -> Result<Outcome> {
    let c = generalization::learning_curve_with(
        &zero_shot(&shared.actual),
        TARGET,
        &[1, 2, 4, 8],
        &SEEDS,
    )?;
    eprintln!("{c}");
    let first = c.points.first().map(|p| p.mean).unwrap_or(f64::NAN);
    let last = c.points.last().map(|p| p.mean).unwrap_or(f64::NAN);
    let means: Vec<String> = c
        .points
        .iter()
        .map(|p| format!("k={}:{:.3}", p.k, p.mean))
        .collect();
    Ok(Outcome::new(
        last <= first,
        format!("{} (need k=8 <= k=1)", means.join(" ")),
    ))
}

fn shuffled(mut idx: Vec<usize>, seed: u64) -> Vec<usize> {
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

fn median_qerror(m: &ZeroShotModel, graphs: &[QueryGraph], runtimes: &[f64]) -> Result<f64> {
    let preds = m.predict_many(&graphs.iter().collect::<Vec<_>>())?;
    Ok(QErrorSummary::from_pairs(runtimes, &preds)?.median)
}

fn encode(
    m: &ZeroShotModel,
    data: &GraphDataset,
    idx: &[usize],
) -> Result<(Vec<QueryGraph>, Vec<f64>)> {
    let graphs = idx
        .iter()
        .map(|&i| m.encode(&data.graphs[i]))
        .collect::<Result<Vec<_>>>()?;
    Ok((graphs, idx.iter().map(|&i| data.runtimes[i]).collect()))
}

fn finetune_on(
    m: &ZeroShotModel,
    graphs: &[QueryGraph],
    runtimes: &[f64],
    seed: u64,
) -> Result<ZeroShotModel> {
    let pairs: Vec<(&QueryGraph, f64)> = graphs.iter().zip(runtimes.iter().copied()).collect();
    let cfg = FinetuneConfig {
        seed,
        ..FinetuneConfig::default()
    };
    Ok(model::finetune_graphs(m, &pairs, &cfg)?.0)
}

// 6: fine-tuning on a few target queries does not hurt the rest.
fn few_shot(shared: &Shared) -> Result<Outcome> {
    let data = &shared.actual;
    let others: Vec<usize> = (0..data.len())
        .filter(|&i| data.databases[i] != TARGET)
        .collect();
    let (mut before, mut after) = (Vec::new(), Vec::new());
    for seed in SEEDS {
        let target = shuffled(data.indices_of(TARGET), seed);
        let (tune, test) = target.split_at(100);
        let cfg = ModelConfig { seed, ..config() };
        let (m, _) = model::train_on(data, &others, &cfg, DEFAULT_VAL_FRACTION)?;
        let (tg, tr) = encode(&m, data, tune)?;
        let (xg, xr) = encode(&m, data, test)?;
        before.push(median_qerror(&m, &xg, &xr)?);
        let tuned = finetune_on(&m, &tg, &tr, seed)?;
        after.push(median_qerror(&tuned, &xg, &xr)?);
    }
    let b = metrics::mean(&before).unwrap_or(f64::NAN);
    let a = metrics::mean(&after).unwrap_or(f64::NAN);
    Ok(Outcome::new(
        a <= b + 0.02,
        format!(
            "{TARGET}: zero-shot {b:.4}, after fine-tuning on 100 queries {a:.4} (need <= +0.02)"
        ),
    ))
}

// 7: the drift monitor fires exactly on its rule, and fine-tuning on
// queries with many joins helps on the remaining ones.
fn drift(shared: &Shared) -> Result<Outcome> {
    let data = &shared.actual;
    let small: Vec<usize> = (0..data.len())
        .filter(|&i| data.num_joins[i] <= 2)
        .collect();
    let large: Vec<usize> = (0..data.len())
        .filter(|&i| data.num_joins[i] >= 4)
        .collect();
    let (mut before, mut after) = (Vec::new(), Vec::new());
    let mut rule_ok = true;
    let mut first_drift = Vec::new();
    for seed in SEEDS {
        let cfg = ModelConfig { seed, ..config() };
        let (m, _) = model::train_on(data, &small, &cfg, DEFAULT_VAL_FRACTION)?;
        let large = shuffled(large.clone(), seed);
        let (tune, test) = large.split_at(50);
        let (xg, xr) = encode(&m, data, test)?;
        let preds = m.predict_many(&xg.iter().collect::<Vec<_>>())?;

        let mut monitor = DriftMonitor::new(100, 2.0)?;
        let mut seen = Vec::new();
        let mut fired = None;
        for (step, (&a, &p)) in xr.iter().zip(&preds).enumerate() {
            let status = generalization::drift_update(&mut monitor, a, p)?;
            seen.push(metrics::qerror(a, p)?);
            let window = &seen[seen.len().saturating_sub(100)..];
            let med = metrics::median(window).unwrap_or(1.0);
            let expect = 2 * window.len() >= 100 && med > 2.0;
            rule_ok &= matches!(status, DriftStatus::Drifted { .. }) == expect;
            if expect && fired.is_none() {
                fired = Some(step + 1);
            }
        }
        first_drift.push(fired.map_or("never".to_string(), |s| s.to_string()));

        before.push(metrics::median(&seen).unwrap_or(f64::NAN));
        let (tg, tr) = encode(&m, data, tune)?;
        let tuned = finetune_on(&m, &tg, &tr, seed)?;
        after.push(median_qerror(&tuned, &xg, &xr)?);
    }

    // the rule on fixed streams, independent of any model
    let mut m = DriftMonitor::new(100, 2.0)?;
    for _ in 0..49 {
        rule_ok &= m.update(1.0, 3.0)? == DriftStatus::Ok;
    }
    rule_ok &= matches!(m.update(1.0, 3.0)?, DriftStatus::Drifted { window_median } if window_median == 3.0);

    let b = metrics::mean(&before).unwrap_or(f64::NAN);
    let a = metrics::mean(&after).unwrap_or(f64::NAN);
    Ok(Outcome::new(
        rule_ok && a <= b,
        format!(
            "monitor rule {}, drift flagged at step [{}] of {} test queries; median before {b:.4}, after fine-tuning on 50 {a:.4}",
            if rule_ok { "held" } else { "VIOLATED" },
            first_drift.join(", "),
            large.len() - 50
        ),
    ))
}

fn anchors() -> Result<Outcome> {
    let mut failed: Vec<&str> = Vec::new();
    let mut check = |ok: bool, name: &'static str| {
        if !ok {
            failed.push(name);
        }
    };

    check(metrics::qerror(2.0, 2.0)? == 1.0, "qerror of equal values");
    check(
        metrics::qerror(1.0, 4.0)? == 4.0 && metrics::qerror(4.0, 1.0)? == 4.0,
        "qerror symmetry",
    );
    check(
        (metrics::qerror(6.0, 15.0)? - metrics::qerror(2.0, 5.0)?).abs() < 1e-15,
        "qerror scale invariance",
    );

    let scan = |rows: f64| PlanOperator {
        opname: OpName::SeqScan,
        act_card_out: rows,
        est_card_out: rows,
        width: 4.0,
        workers: 1,
        table: Some("t".into()),
        filter: None,
        output_columns: None,
        children: vec![],
    };
    let join = PlanOperator {
        opname: OpName::NestedLoopJoin,
        act_card_out: 1e6,
        est_card_out: 1e6,
        width: 8.0,
        workers: 1,
        table: None,
        filter: None,
        output_columns: None,
        children: vec![scan(1e6), scan(1e6)],
    };
    let sample = trace::PlanSample {
        sample_id: "a".into(),
        database_id: "d".into(),
        runtime_s: Some(1.0),
        root: join,
    };
    let v = baseline::flat_encode(&sample, CardSource::Actual);
    let seq = OpName::SeqScan.index();
    let nlj = OpName::NestedLoopJoin.index();
    check(
        v.count(seq) == 2.0
            && v.card_sum(seq) == 2e6
            && v.count(nlj) == 1.0
            && v.card_sum(nlj) == 1e6,
        "flat vector",
    );

    let cat = parse_catalog(
        r#"{"database_id":"d","tables":[{"name":"t","relpages":1221,"reltuples":100000,"columns":[
            {"name":"a","width":4,"correlation":0,"data_type":"int","ndistinct":10,"null_frac":0}]}]}"#,
    )?;
    let mut filtered = scan(5e4);
    filtered.filter = Some(PredicateExpr::cmp(
        ColumnRef::new("t", "a"),
        ComparisonOp::Lt,
        1.0,
    ));
    let exact = OracleParams {
        noise_sigma: 0.0,
        ..OracleParams::default()
    };
    let c1 = synth::oracle_runtime(&filtered, &cat, &exact, 0)?;
    filtered.workers = 2;
    let c2 = synth::oracle_runtime(&filtered, &cat, &exact, 0)?;
    check(
        (c1 - 0.2421).abs() < 1e-12 && (c2 - 0.2421 / 2f64.powf(0.8)).abs() < 1e-12,
        "oracle scan cost",
    );

    let mut theta = [1.0];
    let mut adam = AdamState::new(1, AdamConfig::with_lr(1e-3));
    adam.step(&mut theta, &[0.5])?;
    check(
        (theta[0] - (1.0 - 1e-3 * 0.5 / (0.5 + 1e-8))).abs() < 1e-15,
        "first Adam step",
    );

    let (catalogs, samples) = synth::gen_corpus_data(
        &SynthParams {
            num_databases: 3,
            ..SynthParams::default()
        },
        &OracleParams::default(),
        &WorkloadMode::ALL,
        30,
        7,
    )?;
    check(
        catalogs
            .values()
            .all(|c| parse_catalog(&c.to_json()).ok().as_ref() == Some(c)),
        "catalog round trip",
    );
    let text: String = samples.iter().map(|s| s.to_json_line() + "\n").collect();
    let parsed = trace::parse_trace(text.as_bytes(), &catalogs)?;
    check(
        parsed.errors.is_empty() && parsed.samples == samples,
        "trace round trip",
    );

    let corpus = TraceCorpus::new(catalogs, samples)?;
    let tiny = ModelConfig {
        hidden_dim: 8,
        max_epochs: 2,
        ..ModelConfig::default()
    };
    let (m, _) = model::train(&corpus, &tiny, CardSource::Actual, DEFAULT_VAL_FRACTION)?;
    let dir = tempfile::tempdir().map_err(|e| Error::io("tempdir", e))?;
    let path = dir.path().join("m.zsm");
    m.save(&path)?;
    let loaded = ZeroShotModel::load(&path)?;
    let p1 = m.predict_corpus(&corpus)?;
    let p2 = loaded.predict_corpus(&corpus)?;
    check(
        p1.iter().zip(&p2).all(|(a, b)| a.to_bits() == b.to_bits()) && p1.len() == 90,
        "model save/load",
    );

    let pipeline = |sub: &str| -> Result<Vec<Vec<u8>>> {
        let out = dir.path().join(sub);
        synth::gen_corpus(
            &SynthParams {
                num_databases: 2,
                ..SynthParams::default()
            },
            &OracleParams::default(),
            &[WorkloadMode::Standard],
            40,
            3,
            &out,
        )?;
        let (c, errors) = TraceCorpus::load(
            &out.join("trace.jsonl"),
            &out.join("catalogs"),
            Labels::Required,
        )?;
        if !errors.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "{} bad trace lines",
                errors.len()
            )));
        }
        let (m, report) = model::train(&c, &tiny, CardSource::Actual, DEFAULT_VAL_FRACTION)?;
        m.save(&out.join("model.zsm"))?;
        let read = |name: &str| std::fs::read(out.join(name)).map_err(|e| Error::io(name, e));
        Ok(vec![
            read("trace.jsonl")?,
            read("catalogs/synth_00.json")?,
            read("model.zsm")?,
            serde_json::to_vec(&report).map_err(|e| Error::InvalidArgument(e.to_string()))?,
        ])
    };
    check(pipeline("a")? == pipeline("b")?, "pipeline determinism");

    Ok(Outcome::new(
        failed.is_empty(),
        if failed.is_empty() {
            "all exact anchors hold".to_string()
        } else {
            format!("failed: {}", failed.join(", "))
        },
    ))
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let wanted: BTreeSet<u32> = match std::env::var("ZSCOST_ACCEPTANCE") {
        Ok(s) if !s.trim().is_empty() => {
            s.split(',').filter_map(|x| x.trim().parse().ok()).collect()
        }
        _ => (1..=8).collect(),
    };
    let start = Instant::now();
    let mut results: Vec<(u32, bool)> = Vec::new();
    let mut clock = Instant::now();
    let mut report = |id: u32, name: &str, out: Result<Outcome>| {
        let out = out.unwrap_or_else(|e| Outcome::new(false, format!("error: {e}")));
        println!(
            "{} [{id}] {name}: {} ({:.0} s)",
            if out.pass { "PASS" } else { "FAIL" },
            out.detail,
            clock.elapsed().as_secs_f64()
        );
        let _ = std::io::stdout().flush();
        clock = Instant::now();
        results.push((id, out.pass));
    };

    if wanted.contains(&1) {
        report(1, "gradient check", gradient_check());
    }
    if wanted.iter().any(|c| (2..=7).contains(c)) {
        match corpus() {
            Err(e) => {
                for c in wanted.iter().filter(|c| (2..=7).contains(*c)) {
                    report(*c, "corpus", Err(Error::InvalidArgument(e.to_string())));
                }
            }
            Ok(shared) => {
                if wanted.iter().any(|c| (2..=4).contains(c)) {
                    lodo_criteria(&shared, &wanted, &mut report);
                }
                if wanted.contains(&5) {
                    report(5, "learning curve does not rise", curve(&shared));
                }
                if wanted.contains(&6) {
                    report(6, "few-shot fine-tuning", few_shot(&shared));
                }
                if wanted.contains(&7) {
                    report(7, "drift detection and recovery", drift(&shared));
                }
            }
        }
    }
    if wanted.contains(&8) {
        report(8, "exact anchors", anchors());
    }

    let failed = results.iter().filter(|(_, p)| !p).count();
    println!(
        "acceptance: {} passed, {failed} failed in {:.0} s",
        results.len() - failed,
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
