//! Leave-one-database-out estimates of the generalization error, learning
//! curves over the number of training databases, and drift monitoring.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;

use log::info;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baseline::{self, BaselineConfig, FlatDataset};
use crate::error::{Error, Result};
use crate::metrics::{self, QErrorSummary};
use crate::model::{self, GraphDataset, ModelConfig};
use crate::trace::{CardSource, TraceCorpus};
use crate::train;

/// A way of fitting a runtime model on some samples of a fixed dataset and
/// predicting others. Implemented by both the graph model and the baseline so
/// that both arms run on identical folds.
pub trait Learner: Sync {
    fn name(&self) -> &'static str;
    fn databases(&self) -> &[String];
    fn runtimes(&self) -> &[f64];
    fn fit_predict(&self, train: &[usize], test: &[usize], seed: u64) -> Result<Vec<f64>>;
}

pub struct ZeroShotLearner<'a> {
    pub data: &'a GraphDataset,
    pub config: ModelConfig,
    pub val_fraction: f64,
}

impl Learner for ZeroShotLearner<'_> {
    fn name(&self) -> &'static str {
        "zero_shot"
    }

    fn databases(&self) -> &[String] {
        &self.data.databases
    }

    fn runtimes(&self) -> &[f64] {
        &self.data.runtimes
    }

    fn fit_predict(&self, train: &[usize], test: &[usize], seed: u64) -> Result<Vec<f64>> {
        let cfg = ModelConfig {
            seed,
            ..self.config.clone()
        };
        let (m, _) = model::train_on(self.data, train, &cfg, self.val_fraction)?;
        let graphs = test
            .par_iter()
            .map(|&i| m.encode(&self.data.graphs[i]))
            .collect::<Result<Vec<_>>>()?;
        m.predict_many(&graphs.iter().collect::<Vec<_>>())
    }
}

pub struct BaselineLearner<'a> {
    pub data: &'a FlatDataset,
    pub config: BaselineConfig,
    pub val_fraction: f64,
}

impl Learner for BaselineLearner<'_> {
    fn name(&self) -> &'static str {
        "flat_baseline"
    }

    fn databases(&self) -> &[String] {
        &self.data.databases
    }

    fn runtimes(&self) -> &[f64] {
        &self.data.runtimes
    }

    fn fit_predict(&self, train: &[usize], test: &[usize], seed: u64) -> Result<Vec<f64>> {
        let cfg = BaselineConfig {
            seed,
            ..self.config.clone()
        };
        let (m, _) = baseline::train_baseline_on(self.data, train, &cfg, self.val_fraction)?;
        let vs: Vec<_> = test.iter().map(|&i| &self.data.vectors[i]).collect();
        m.predict_vectors(&vs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePrediction {
    pub index: usize,
    pub actual: f64,
    pub predicted: f64,
    pub qerror: f64,
}

/// One trained model evaluated on one held-out database.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub database: String,
    pub seed: u64,
    pub num_train: usize,
    pub summary: QErrorSummary,
    #[serde(skip)]
    pub predictions: Vec<SamplePrediction>,
}

/// Per held-out database, averaged over seeds. `worst_seed_median` is the
/// largest single-seed median.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatabaseResult {
    pub database: String,
    pub count: usize,
    pub median: f64,
    pub p95: f64,
    pub max: f64,
    pub worst_seed_median: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationReport {
    pub learner: String,
    pub seeds: Vec<u64>,
    pub databases: Vec<DatabaseResult>,
    pub folds: Vec<FoldResult>,
    /// Mean of the per-database medians.
    pub aggregate: f64,
}

impl GeneralizationReport {
    pub fn recompute_aggregate(&self) -> f64 {
        let medians: Vec<f64> = self.databases.iter().map(|d| d.median).collect();
        metrics::mean(&medians).unwrap_or(f64::NAN)
    }

    pub fn database(&self, name: &str) -> Option<&DatabaseResult> {
        self.databases.iter().find(|d| d.database == name)
    }

    /// Aggregate of a single seed.
    pub fn aggregate_for_seed(&self, seed: u64) -> Option<f64> {
        let medians: Vec<f64> = self
            .folds
            .iter()
            .filter(|f| f.seed == seed)
            .map(|f| f.summary.median)
            .collect();
        metrics::mean(&medians)
    }

    /// Per-sample rows; `sample_ids` maps dataset indices to ids.
    pub fn to_csv(&self, sample_ids: &[String]) -> String {
        let mut out = String::from("database_id,seed,sample_id,actual_s,predicted_s,qerror\n");
        for f in &self.folds {
            for p in &f.predictions {
                out.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    f.database, f.seed, sample_ids[p.index], p.actual, p.predicted, p.qerror
                ));
            }
        }
        out
    }
}

impl fmt::Display for GeneralizationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "learner {} seeds {:?}", self.learner, self.seeds)?;
        writeln!(
            f,
            "{:<16} {:>6} {:>8} {:>8} {:>10}",
            "database", "n", "median", "p95", "max"
        )?;
        for d in &self.databases {
            writeln!(
                f,
                "{:<16} {:>6} {:>8.4} {:>8.4} {:>10.4}",
                d.database, d.count, d.median, d.p95, d.max
            )?;
        }
        write!(f, "aggregate {:.4}", self.aggregate)
    }
}

fn distinct_databases(dbs: &[String]) -> Vec<String> {
    dbs.iter()
        .cloned()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// Runs one held-out evaluation, refusing folds that would leak.
fn run_fold<L: Learner + ?Sized>(
    learner: &L,
    train: &[usize],
    held_out: &str,
    seed: u64,
) -> Result<FoldResult> {
    let dbs = learner.databases();
    if let Some(&i) = train.iter().find(|&&i| dbs[i] == held_out) {
        return Err(Error::validation(
            "fold",
            format!("fold for {held_out} would train on its sample {i}"),
        ));
    }
    let test: Vec<usize> = (0..dbs.len()).filter(|&i| dbs[i] == held_out).collect();
    let predicted = learner.fit_predict(train, &test, seed)?;
    let runtimes = learner.runtimes();
    let predictions = test
        .iter()
        .zip(&predicted)
        .map(|(&i, &p)| {
            Ok(SamplePrediction {
                index: i,
                actual: runtimes[i],
                predicted: p,
                qerror: metrics::qerror(runtimes[i], p)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let q: Vec<f64> = predictions.iter().map(|p| p.qerror).collect();
    Ok(FoldResult {
        database: held_out.to_string(),
        seed,
        num_train: train.len(),
        summary: QErrorSummary::from_qerrors(&q)?,
        predictions,
    })
}

/// Leave-one-database-out over every database and seed.
pub fn lodo<L: Learner + ?Sized>(learner: &L, seeds: &[u64]) -> Result<GeneralizationReport> {
    let names = distinct_databases(learner.databases());
    if names.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "leave-one-database-out needs at least 2 databases, got {}",
            names.len()
        )));
    }
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("no seeds given".into()));
    }
    let dbs = learner.databases();
    let jobs: Vec<(&String, u64)> = seeds
        .iter()
        .flat_map(|&s| names.iter().map(move |n| (n, s)))
        .collect();
    let folds = jobs
        .par_iter()
        .map(|&(held_out, seed)| {
            let train: Vec<usize> = (0..dbs.len()).filter(|&i| dbs[i] != *held_out).collect();
            let fold = run_fold(learner, &train, held_out, seed)?;
            info!(
                "{} fold {held_out} seed {seed}: median {:.4}",
                learner.name(),
                fold.summary.median
            );
            Ok(fold)
        })
        .collect::<Result<Vec<_>>>()?;

    let databases: Vec<DatabaseResult> = names
        .iter()
        .map(|n| {
            let mine: Vec<&FoldResult> = folds.iter().filter(|f| &f.database == n).collect();
            let avg = |g: fn(&QErrorSummary) -> f64| {
                mine.iter().map(|f| g(&f.summary)).sum::<f64>() / mine.len() as f64
            };
            DatabaseResult {
                database: n.clone(),
                count: mine[0].summary.count,
                median: avg(|s| s.median),
                p95: avg(|s| s.p95),
                max: mine.iter().map(|f| f.summary.max).fold(0.0, f64::max),
                worst_seed_median: mine.iter().map(|f| f.summary.median).fold(0.0, f64::max),
            }
        })
        .collect();
    let mut report = GeneralizationReport {
        learner: learner.name().to_string(),
        seeds: seeds.to_vec(),
        databases,
        folds,
        aggregate: 0.0,
    };
    report.aggregate = report.recompute_aggregate();
    Ok(report)
}

/// Leave-one-database-out for the graph model.
pub fn lodo_evaluate(
    corpus: &TraceCorpus,
    cfg: &ModelConfig,
    source: CardSource,
    seeds: &[u64],
) -> Result<GeneralizationReport> {
    let data = GraphDataset::from_corpus(corpus, source)?;
    lodo(
        &ZeroShotLearner {
            data: &data,
            config: cfg.clone(),
            val_fraction: DEFAULT_VAL_FRACTION,
        },
        seeds,
    )
}

pub const DEFAULT_VAL_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub k: usize,
    pub mean: f64,
    pub std: f64,
    pub medians: Vec<f64>,
    /// Training databases drawn for each seed.
    pub training_databases: Vec<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningCurve {
    pub target: String,
    pub seeds: Vec<u64>,
    pub points: Vec<CurvePoint>,
}

impl fmt::Display for LearningCurve {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "target {} seeds {:?}", self.target, self.seeds)?;
        writeln!(f, "{:>4} {:>10} {:>10}", "k", "mean", "std")?;
        for p in &self.points {
            writeln!(f, "{:>4} {:>10.4} {:>10.4}", p.k, p.mean, p.std)?;
        }
        Ok(())
    }
}

/// Held-out error on `target` as a function of the number of training
/// databases. Each (k, seed) draws its databases without replacement from
/// the non-target ones.
pub fn learning_curve_with<L: Learner + ?Sized>(
    learner: &L,
    target: &str,
    k_values: &[usize],
    seeds: &[u64],
) -> Result<LearningCurve> {
    let names = distinct_databases(learner.databases());
    if !names.iter().any(|n| n == target) {
        return Err(Error::InvalidArgument(format!(
            "target database {target} not in corpus"
        )));
    }
    if k_values.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidArgument("no k values or seeds given".into()));
    }
    if k_values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(format!(
            "k values must be strictly increasing, got {k_values:?}"
        )));
    }
    let others: Vec<&String> = names.iter().filter(|n| *n != target).collect();
    for &k in k_values {
        if k == 0 || k > others.len() {
            return Err(Error::InvalidArgument(format!(
                "k = {k} outside 1..={} (databases other than the target)",
                others.len()
            )));
        }
    }
    let dbs = learner.databases();
    let jobs: Vec<(usize, u64)> = k_values
        .iter()
        .flat_map(|&k| seeds.iter().map(move |&s| (k, s)))
        .collect();
    let results = jobs
        .par_iter()
        .map(|&(k, seed)| {
            let mut pool = others.clone();
            pool.shuffle(&mut train::rng(seed, &format!("curve-{k}")));
            let mut chosen: Vec<String> = pool[..k].iter().map(|s| s.to_string()).collect();
            chosen.sort();
            let train: Vec<usize> = (0..dbs.len())
                .filter(|&i| chosen.contains(&dbs[i]))
                .collect();
            let fold = run_fold(learner, &train, target, seed)?;
            info!("curve k={k} seed {seed}: median {:.4}", fold.summary.median);
            Ok((fold.summary.median, chosen))
        })
        .collect::<Result<Vec<_>>>()?;
    let points = k_values
        .iter()
        .enumerate()
        .map(|(j, &k)| {
            let mine = &results[j * seeds.len()..(j + 1) * seeds.len()];
            let medians: Vec<f64> = mine.iter().map(|r| r.0).collect();
            CurvePoint {
                k,
                mean: metrics::mean(&medians).expect("seeds non-empty"),
                std: metrics::std_dev(&medians).expect("seeds non-empty"),
                medians,
                training_databases: mine.iter().map(|r| r.1.clone()).collect(),
            }
        })
        .collect();
    Ok(LearningCurve {
        target: target.to_string(),
        seeds: seeds.to_vec(),
        points,
    })
}

pub fn learning_curve(
    corpus: &TraceCorpus,
    k_values: &[usize],
    seeds: &[u64],
    cfg: &ModelConfig,
    source: CardSource,
    target: &str,
) -> Result<LearningCurve> {
    let data = GraphDataset::from_corpus(corpus, source)?;
    learning_curve_with(
        &ZeroShotLearner {
            data: &data,
            config: cfg.clone(),
            val_fraction: DEFAULT_VAL_FRACTION,
        },
        target,
        k_values,
        seeds,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum DriftStatus {
    Ok,
    Drifted { window_median: f64 },
}

/// Sliding window of the most recent (actual, predicted) runtimes. Reports
/// drift once the window is at least half full and its median q-error
/// exceeds the threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftMonitor {
    window_size: usize,
    threshold: f64,
    window: VecDeque<(f64, f64)>,
}

impl Default for DriftMonitor {
    fn default() -> Self {
        DriftMonitor {
            window_size: 100,
            threshold: 2.0,
            window: VecDeque::new(),
        }
    }
}

impl DriftMonitor {
    pub fn new(window_size: usize, threshold: f64) -> Result<Self> {
        if window_size == 0 {
            return Err(Error::validation("window_size", "must be positive"));
        }
        if !(threshold >= 1.0 && threshold.is_finite()) {
            return Err(Error::validation(
                "threshold",
                "must be a finite q-error >= 1",
            ));
        }
        Ok(DriftMonitor {
            window_size,
            threshold,
            window: VecDeque::with_capacity(window_size),
        })
    }

    pub fn window_size(&self) -> usize {
        self.window_size
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn len(&self) -> usize {
        self.window.len()
    }

    pub fn is_empty(&self) -> bool {
        self.window.is_empty()
    }

    pub fn window_median(&self) -> Option<f64> {
        let q: Vec<f64> = self
            .window
            .iter()
            .map(|&(c, p)| (c / p).max(p / c))
            .collect();
        metrics::median(&q)
    }

    pub fn status(&self) -> DriftStatus {
        if 2 * self.window.len() < self.window_size {
            return DriftStatus::Ok;
        }
        match self.window_median() {
            Some(m) if m > self.threshold => DriftStatus::Drifted { window_median: m },
            _ => DriftStatus::Ok,
        }
    }

    pub fn update(&mut self, actual: f64, predicted: f64) -> Result<DriftStatus> {
        metrics::qerror(actual, predicted)?;
        if self.window.len() == self.window_size {
            self.window.pop_front();
        }
        self.window.push_back((actual, predicted));
        Ok(self.status())
    }
}

pub fn drift_update(
    monitor: &mut DriftMonitor,
    actual: f64,
    predicted: f64,
) -> Result<DriftStatus> {
    monitor.update(actual, predicted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::sync::Mutex;

    /// Predicts the mean training runtime and records what it trained on.
    struct MeanLearner {
        dbs: Vec<String>,
        runtimes: Vec<f64>,
        seen: Mutex<Vec<(Vec<String>, Vec<String>)>>,
    }

    impl MeanLearner {
        fn new(per_db: &[(&str, usize, f64)]) -> Self {
            let mut dbs = Vec::new();
            let mut runtimes = Vec::new();
            for &(name, n, c) in per_db {
                for _ in 0..n {
                    dbs.push(name.to_string());
                    runtimes.push(c);
                }
            }
            MeanLearner {
                dbs,
                runtimes,
                seen: Mutex::new(Vec::new()),
            }
        }
    }

    impl Learner for MeanLearner {
        fn name(&self) -> &'static str {
            "mean"
        }
        fn databases(&self) -> &[String] {
            &self.dbs
        }
        fn runtimes(&self) -> &[f64] {
            &self.runtimes
        }
        fn fit_predict(&self, train: &[usize], test: &[usize], _seed: u64) -> Result<Vec<f64>> {
            let names = |idx: &[usize]| -> Vec<String> {
                distinct_databases(&idx.iter().map(|&i| self.dbs[i].clone()).collect::<Vec<_>>())
            };
            self.seen.lock().unwrap().push((names(train), names(test)));
            let m = train.iter().map(|&i| self.runtimes[i]).sum::<f64>() / train.len() as f64;
            Ok(vec![m; test.len()])
        }
    }

    #[test]
    fn two_databases_two_folds_per_seed() {
        let l = MeanLearner::new(&[("a", 3, 1.0), ("b", 5, 4.0)]);
        let r = lodo(&l, &[0, 1]).unwrap();
        assert_eq!(r.folds.len(), 4);
        assert_eq!(r.databases.len(), 2);
        // held-out a is predicted 4.0, b is predicted 1.0
        assert_eq!(r.database("a").unwrap().median, 4.0);
        assert_eq!(r.database("b").unwrap().count, 5);
        assert_eq!(r.aggregate, 4.0);
        assert_eq!(r.aggregate, r.recompute_aggregate());
        assert_eq!(r.aggregate_for_seed(1), Some(4.0));
        assert_eq!(
            r.to_csv(&vec!["s".to_string(); 8]).lines().count(),
            1 + 2 * 8
        );
    }

    #[test]
    fn folds_never_see_their_held_out_database() {
        let l = MeanLearner::new(&[
            ("a", 2, 1.0),
            ("b", 2, 1.0),
            ("sentinel", 2, 1e6),
            ("c", 2, 1.0),
        ]);
        let r = lodo(&l, &[7]).unwrap();
        for (train, test) in l.seen.lock().unwrap().iter() {
            assert_eq!(test.len(), 1);
            assert!(!train.contains(&test[0]));
        }
        // only the sentinel fold is free of the sentinel's huge runtimes
        for f in &r.folds {
            let clean = f.predictions.iter().all(|p| p.predicted == 1.0);
            assert_eq!(clean, f.database == "sentinel", "{f:?}");
        }
        let leaky: Vec<usize> = (0..l.dbs.len()).collect();
        assert!(matches!(
            run_fold(&l, &leaky, "a", 0),
            Err(Error::Validation { .. })
        ));
    }

    #[test]
    fn lodo_preconditions() {
        let l = MeanLearner::new(&[("a", 3, 1.0)]);
        assert!(matches!(lodo(&l, &[0]), Err(Error::InsufficientData(_))));
        let l = MeanLearner::new(&[("a", 3, 1.0), ("b", 3, 1.0)]);
        assert!(lodo(&l, &[]).is_err());
    }

    #[test]
    fn curve_draws_k_databases_deterministically() {
        let l = MeanLearner::new(&[("t", 4, 2.0), ("a", 2, 1.0), ("b", 2, 1.0), ("c", 2, 1.0)]);
        let c = learning_curve_with(&l, "t", &[1, 2, 3], &[0, 1, 2]).unwrap();
        assert_eq!(
            c.points.iter().map(|p| p.k).collect::<Vec<_>>(),
            vec![1, 2, 3]
        );
        for p in &c.points {
            for dbs in &p.training_databases {
                assert_eq!(dbs.len(), p.k);
                assert!(!dbs.contains(&"t".to_string()));
            }
            assert_eq!(p.mean, 2.0);
            assert_eq!(p.std, 0.0);
        }
        assert_eq!(
            c,
            learning_curve_with(&l, "t", &[1, 2, 3], &[0, 1, 2]).unwrap()
        );
    }

    #[test]
    fn curve_rejects_bad_k() {
        let l = MeanLearner::new(&[("t", 2, 1.0), ("a", 2, 1.0), ("b", 2, 1.0)]);
        assert!(learning_curve_with(&l, "t", &[0, 1], &[0]).is_err());
        assert!(learning_curve_with(&l, "t", &[3], &[0]).is_err());
        assert!(learning_curve_with(&l, "t", &[2, 1], &[0]).is_err());
        assert!(learning_curve_with(&l, "missing", &[1], &[0]).is_err());
        assert!(learning_curve_with(&l, "t", &[1, 2], &[0]).is_ok());
    }

    #[test]
    fn drift_needs_half_a_window() {
        let mut m = DriftMonitor::new(100, 2.0).unwrap();
        for _ in 0..49 {
            assert_eq!(m.update(1.0, 3.0).unwrap(), DriftStatus::Ok);
        }
        assert_eq!(
            m.update(1.0, 3.0).unwrap(),
            DriftStatus::Drifted { window_median: 3.0 }
        );
        let mut perfect = DriftMonitor::default();
        for i in 1..300 {
            assert_eq!(perfect.update(i as f64, i as f64).unwrap(), DriftStatus::Ok);
        }
        assert_eq!(perfect.len(), 100);
        assert!(m.update(0.0, 1.0).is_err());
        assert!(m.update(1.0, -1.0).is_err());
        assert!(DriftMonitor::new(0, 2.0).is_err());
        assert!(DriftMonitor::new(10, 0.5).is_err());
    }

    #[test]
    fn drift_recovers_once_errors_leave_the_window() {
        let mut m = DriftMonitor::new(10, 2.0).unwrap();
        for _ in 0..10 {
            m.update(1.0, 5.0).unwrap();
        }
        assert!(matches!(m.status(), DriftStatus::Drifted { .. }));
        for _ in 0..6 {
            m.update(1.0, 1.0).unwrap();
        }
        assert_eq!(m.status(), DriftStatus::Ok);
    }

    proptest! {
        #[test]
        fn drift_is_a_pure_state_machine(
            stream in proptest::collection::vec((0.01f64..100.0, 0.01f64..100.0), 0..80),
            w in 1usize..30,
        ) {
            let mut a = DriftMonitor::new(w, 2.0).unwrap();
            let mut b = DriftMonitor::new(w, 2.0).unwrap();
            for (c, p) in &stream {
                let sa = a.update(*c, *p).unwrap();
                prop_assert_eq!(sa, b.update(*c, *p).unwrap());
                prop_assert!(a.len() <= w);
                let q = a.window_median().unwrap();
                let expected = 2 * a.len() >= w && q > 2.0;
                prop_assert_eq!(matches!(sa, DriftStatus::Drifted { .. }), expected);
            }
        }
    }
}
