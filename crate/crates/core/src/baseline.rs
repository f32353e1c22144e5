//! Flat-vector ablation: a plan becomes one fixed-length vector holding,
//! per operator type, how often it occurs and the sum of its output
//! cardinalities. Tree shape, tables, columns and predicates are lost.

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::neural::{Mlp, ParamStore, Tape, Var};
use crate::trace::{CardSource, OpName, PlanSample, TraceCorpus};
use crate::train::{self, Loss, Optimization, Regressor, TrainReport};

/// Interleaved `(count, card sum)` pairs in vocabulary order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatVector(pub Vec<f64>);

impl FlatVector {
    pub fn dim(vocabulary_len: usize) -> usize {
        2 * vocabulary_len
    }

    pub fn count(&self, slot: usize) -> f64 {
        self.0[2 * slot]
    }

    pub fn card_sum(&self, slot: usize) -> f64 {
        self.0[2 * slot + 1]
    }
}

/// Encodes over the full operator vocabulary.
pub fn flat_encode(sample: &PlanSample, source: CardSource) -> FlatVector {
    flat_encode_with(sample, source, &OpName::ALL)
}

/// Encodes over a restricted vocabulary; other operators are ignored.
pub fn flat_encode_with(
    sample: &PlanSample,
    source: CardSource,
    vocabulary: &[OpName],
) -> FlatVector {
    let mut v = vec![0.0; FlatVector::dim(vocabulary.len())];
    for op in sample.root.iter() {
        if let Some(slot) = vocabulary.iter().position(|o| *o == op.opname) {
            v[2 * slot] += 1.0;
            v[2 * slot + 1] += op.card(source);
        }
    }
    FlatVector(v)
}

/// Counts stay as they are, cardinality sums go through `log1p`.
fn transform(v: &FlatVector) -> Vec<f64> {
    v.0.iter()
        .enumerate()
        .map(|(i, x)| if i % 2 == 1 { x.ln_1p() } else { *x })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub hidden_dim: usize,
    /// dense layers
    pub depth: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub loss: Loss,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self::matching(&ModelConfig::default())
    }
}

impl BaselineConfig {
    /// Same optimizer budget as the graph model, width 64 and depth 3.
    pub fn matching(cfg: &ModelConfig) -> Self {
        BaselineConfig {
            hidden_dim: 64,
            depth: 3,
            lr: cfg.lr,
            batch_size: cfg.batch_size,
            max_epochs: cfg.max_epochs,
            patience: cfg.patience,
            seed: cfg.seed,
            loss: cfg.loss,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineModel {
    pub config: BaselineConfig,
    pub card_source: CardSource,
    mean: Vec<f64>,
    std: Vec<f64>,
    params: ParamStore,
    mlp: Mlp,
}

impl BaselineModel {
    fn normalize(&self, v: &FlatVector) -> Result<Vec<f64>> {
        if v.0.len() != self.mean.len() {
            return Err(Error::Dimension {
                context: "flat vector",
                expected: self.mean.len(),
                actual: v.0.len(),
            });
        }
        Ok(transform(v)
            .iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((x, m), s)| (x - m) / s)
            .collect())
    }

    pub fn predict_vector(&self, v: &FlatVector) -> Result<f64> {
        train::predict(self, &self.normalize(v)?)
    }

    pub fn predict_vectors(&self, vs: &[&FlatVector]) -> Result<Vec<f64>> {
        let xs = vs
            .iter()
            .map(|v| self.normalize(v))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Vec<f64>> = xs.iter().collect();
        train::predict_many(self, &refs)
    }
}

impl Regressor for BaselineModel {
    type Input = Vec<f64>;

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn record(&self, tape: &mut Tape<'_>, x: &Vec<f64>) -> Result<Var> {
        let v = tape.input(x);
        self.mlp.forward_taped(tape, v)
    }
}

pub fn predict_baseline(model: &BaselineModel, sample: &PlanSample) -> Result<f64> {
    model.predict_vector(&flat_encode(sample, model.card_source))
}

/// Flat vectors and labels of a corpus under one cardinality source.
#[derive(Debug, Clone)]
pub struct FlatDataset {
    pub source: CardSource,
    pub vectors: Vec<FlatVector>,
    pub runtimes: Vec<f64>,
    pub databases: Vec<String>,
}

impl FlatDataset {
    pub fn from_corpus(corpus: &TraceCorpus, source: CardSource) -> Result<Self> {
        Ok(FlatDataset {
            source,
            vectors: corpus
                .samples
                .iter()
                .map(|s| flat_encode(s, source))
                .collect(),
            runtimes: corpus
                .samples
                .iter()
                .map(|s| s.runtime())
                .collect::<Result<Vec<_>>>()?,
            databases: corpus
                .samples
                .iter()
                .map(|s| s.database_id.clone())
                .collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

pub fn train_baseline_on(
    data: &FlatDataset,
    indices: &[usize],
    cfg: &BaselineConfig,
    val_fraction: f64,
) -> Result<(BaselineModel, TrainReport)> {
    if indices.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "training needs at least 2 samples, got {}",
            indices.len()
        )));
    }
    if cfg.hidden_dim == 0
        || cfg.depth == 0
        || cfg.batch_size == 0
        || cfg.max_epochs == 0
        || cfg.patience == 0
    {
        return Err(Error::validation("baseline", "sizes must be positive"));
    }
    let dbs: Vec<&str> = indices
        .iter()
        .map(|&i| data.databases[i].as_str())
        .collect();
    let (tr, va) =
        train::stratified_split(&dbs, val_fraction, train::derive_seed(cfg.seed, "split"))?;
    let tr: Vec<usize> = tr.into_iter().map(|k| indices[k]).collect();
    let va: Vec<usize> = va.into_iter().map(|k| indices[k]).collect();

    let dim = data.vectors[tr[0]].0.len();
    let transformed: Vec<Vec<f64>> = tr.iter().map(|&i| transform(&data.vectors[i])).collect();
    let n = transformed.len() as f64;
    let mean: Vec<f64> = (0..dim)
        .map(|j| transformed.iter().map(|v| v[j]).sum::<f64>() / n)
        .collect();
    let std: Vec<f64> = (0..dim)
        .map(|j| {
            let var = transformed
                .iter()
                .map(|v| (v[j] - mean[j]).powi(2))
                .sum::<f64>()
                / n;
            var.sqrt().max(crate::featurize::STD_FLOOR)
        })
        .collect();

    let mut params = ParamStore::new();
    let mut dims = vec![dim];
    dims.extend(std::iter::repeat_n(cfg.hidden_dim, cfg.depth - 1));
    dims.push(1);
    let mlp = Mlp::new(
        &mut params,
        &dims,
        &mut train::rng(cfg.seed, "baseline-init"),
    )?;
    let mut model = BaselineModel {
        config: cfg.clone(),
        card_source: data.source,
        mean,
        std,
        params,
        mlp,
    };
    let encode = |idx: &[usize]| -> Result<Vec<Vec<f64>>> {
        idx.par_iter()
            .map(|&i| model.normalize(&data.vectors[i]))
            .collect()
    };
    let train_x = encode(&tr)?;
    let val_x = encode(&va)?;
    let train_set: Vec<(&Vec<f64>, f64)> = train_x
        .iter()
        .zip(&tr)
        .map(|(x, &i)| (x, data.runtimes[i]))
        .collect();
    let val_set: Vec<(&Vec<f64>, f64)> = val_x
        .iter()
        .zip(&va)
        .map(|(x, &i)| (x, data.runtimes[i]))
        .collect();
    let opt = Optimization {
        lr: cfg.lr,
        batch_size: cfg.batch_size,
        max_epochs: cfg.max_epochs,
        patience: Some(cfg.patience),
        seed: train::derive_seed(cfg.seed, "baseline-train"),
        loss: cfg.loss,
    };
    let report = train::optimize(&mut model, &train_set, &val_set, &opt)?;
    info!(
        "baseline trained on {} samples, best epoch {}",
        tr.len(),
        report.best_epoch
    );
    Ok((model, report))
}

pub fn train_baseline(
    corpus: &TraceCorpus,
    source: CardSource,
    cfg: &BaselineConfig,
) -> Result<(BaselineModel, TrainReport)> {
    let data = FlatDataset::from_corpus(corpus, source)?;
    let all: Vec<usize> = (0..data.len()).collect();
    train_baseline_on(&data, &all, cfg, 0.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::PlanOperator;
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn op(opname: OpName, card: f64, children: Vec<PlanOperator>) -> PlanOperator {
        PlanOperator {
            opname,
            act_card_out: card,
            est_card_out: card / 2.0,
            width: 8.0,
            workers: 1,
            table: None,
            filter: None,
            output_columns: None,
            children,
        }
    }

    fn sample(root: PlanOperator) -> PlanSample {
        PlanSample {
            database_id: "d".into(),
            sample_id: "s".into(),
            runtime_s: Some(1.0),
            root,
        }
    }

    #[test]
    fn two_scans_and_a_join() {
        let plan = op(
            OpName::NestedLoopJoin,
            1e6,
            vec![
                op(OpName::SeqScan, 1e6, vec![]),
                op(OpName::SeqScan, 1e6, vec![]),
            ],
        );
        let v = flat_encode_with(
            &sample(plan.clone()),
            CardSource::Actual,
            &[OpName::SeqScan, OpName::NestedLoopJoin],
        );
        assert_eq!(v.0, vec![2.0, 2e6, 1.0, 1e6]);
        let full = flat_encode(&sample(plan), CardSource::Estimated);
        assert_eq!(full.0.len(), 28);
        assert_eq!(full.count(OpName::Sort.index()), 0.0);
        assert_eq!(full.card_sum(OpName::Sort.index()), 0.0);
        assert_eq!(full.card_sum(OpName::SeqScan.index()), 1e6);
    }

    #[test]
    fn different_shapes_same_vector() {
        // left-deep vs. bushy: identical operator multiset and cardinalities
        let scan = |c| op(OpName::SeqScan, c, vec![]);
        let left_deep = op(
            OpName::HashJoin,
            10.0,
            vec![
                op(OpName::HashJoin, 20.0, vec![scan(1.0), scan(2.0)]),
                scan(3.0),
            ],
        );
        let other = op(
            OpName::HashJoin,
            10.0,
            vec![
                scan(3.0),
                op(OpName::HashJoin, 20.0, vec![scan(2.0), scan(1.0)]),
            ],
        );
        assert_eq!(
            flat_encode(&sample(left_deep), CardSource::Actual),
            flat_encode(&sample(other), CardSource::Actual)
        );
    }

    #[test]
    fn constant_labels_are_learned() {
        let mut samples = Vec::new();
        for i in 0..40 {
            let mut s = sample(op(OpName::SeqScan, (i * 100) as f64, vec![]));
            s.sample_id = i.to_string();
            samples.push(s);
        }
        let corpus = TraceCorpus {
            catalogs: BTreeMap::new(),
            samples,
        };
        let cfg = BaselineConfig {
            max_epochs: 60,
            patience: 60,
            lr: 5e-3,
            batch_size: 8,
            ..BaselineConfig::default()
        };
        let (m, _) = train_baseline(&corpus, CardSource::Actual, &cfg).unwrap();
        let (m2, _) = train_baseline(&corpus, CardSource::Actual, &cfg).unwrap();
        assert_eq!(m, m2);
        let q: Vec<f64> = corpus
            .samples
            .iter()
            .map(|s| crate::metrics::qerror(1.0, predict_baseline(&m, s).unwrap()).unwrap())
            .collect();
        assert!(crate::metrics::median(&q).unwrap() < 1.05);
    }

    proptest! {
        #[test]
        fn counts_and_sums_are_consistent(cards in proptest::collection::vec(0.0f64..1e6, 1..6)) {
            let children: Vec<PlanOperator> = cards.iter().map(|c| op(OpName::SeqScan, *c, vec![])).collect();
            let root = op(OpName::Other, 1.0, children);
            let v = flat_encode(&sample(root), CardSource::Actual);
            prop_assert_eq!(v.0.len(), 28);
            prop_assert_eq!(v.count(OpName::SeqScan.index()), cards.len() as f64);
            prop_assert!((v.card_sum(OpName::SeqScan.index()) - cards.iter().sum::<f64>()).abs() < 1e-6);
            prop_assert!(v.0.iter().all(|x| *x >= 0.0));
        }
    }
}
