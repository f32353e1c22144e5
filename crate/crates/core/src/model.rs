//! The zero-shot cost model: per-node-type encoders and combiners, bottom-up
//! message passing over the query graph, and an estimation head whose
//! output is exponentiated into a runtime.

use std::io::Write as _;
use std::path::Path;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::featurize::{
    build_raw_graph, FeatureNormalizer, FeatureSpec, NodeType, QueryGraph, RawGraph,
};
use crate::neural::{Mlp, ParamStore, Tape, Var};
use crate::trace::{CardSource, DatabaseCatalog, PlanSample, TraceCorpus};
use crate::train::{self, Loss, Optimization, Regressor, TrainReport};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "ZSCOST-MODEL";

/// Layer counts are numbers of dense layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub encoder_depth: usize,
    pub combiner_depth: usize,
    pub estimator_depth: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub loss: Loss,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_dim: 64,
            encoder_depth: 2,
            combiner_depth: 2,
            estimator_depth: 3,
            lr: 1e-3,
            batch_size: 32,
            max_epochs: 100,
            patience: 10,
            seed: 0,
            loss: Loss::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("hidden_dim", self.hidden_dim),
            ("encoder_depth", self.encoder_depth),
            ("combiner_depth", self.combiner_depth),
            ("estimator_depth", self.estimator_depth),
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
            ("patience", self.patience),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(Error::validation(name, "must be positive"));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::validation("lr", "must be positive"));
        }
        Ok(())
    }

    fn optimization(&self) -> Optimization {
        Optimization {
            lr: self.lr,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: Some(self.patience),
            seed: train::derive_seed(self.seed, "train"),
            loss: self.loss,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: Loss,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            lr: 1e-4,
            epochs: 20,
            batch_size: 32,
            seed: 0,
            loss: Loss::default(),
        }
    }
}

fn dims(input: usize, hidden: usize, output: usize, depth: usize) -> Vec<usize> {
    let mut d = vec![input];
    d.extend(std::iter::repeat_n(hidden, depth - 1));
    d.push(output);
    d
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZeroShotModel {
    config: ModelConfig,
    card_source: CardSource,
    spec: FeatureSpec,
    normalizer: FeatureNormalizer,
    params: ParamStore,
    encoders: Vec<Mlp>,
    combiners: Vec<Mlp>,
    estimator: Mlp,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    format_version: u32,
    config: ModelConfig,
    card_source: CardSource,
    spec: FeatureSpec,
    normalizer: FeatureNormalizer,
    params: ParamStore,
    encoders: Vec<Mlp>,
    combiners: Vec<Mlp>,
    estimator: Mlp,
}

impl ZeroShotModel {
    /// Freshly initialized network around a fitted normalizer.
    pub fn new(
        config: ModelConfig,
        card_source: CardSource,
        spec: FeatureSpec,
        normalizer: FeatureNormalizer,
    ) -> Result<Self> {
        config.validate()?;
        spec.check()?;
        normalizer.check(&spec)?;
        let mut rng = train::rng(config.seed, "init");
        let mut params = ParamStore::new();
        let h = config.hidden_dim;
        let mut encoders = Vec::new();
        let mut combiners = Vec::new();
        for t in NodeType::ALL {
            encoders.push(Mlp::new(
                &mut params,
                &dims(spec.dim(t), h, h, config.encoder_depth),
                &mut rng,
            )?);
        }
        for _ in NodeType::ALL {
            combiners.push(Mlp::new(
                &mut params,
                &dims(2 * h, h, h, config.combiner_depth),
                &mut rng,
            )?);
        }
        let estimator = Mlp::new(
            &mut params,
            &dims(h, h, 1, config.estimator_depth),
            &mut rng,
        )?;
        Ok(ZeroShotModel {
            config,
            card_source,
            spec,
            normalizer,
            params,
            encoders,
            combiners,
            estimator,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn card_source(&self) -> CardSource {
        self.card_source
    }

    pub fn spec(&self) -> &FeatureSpec {
        &self.spec
    }

    pub fn normalizer(&self) -> &FeatureNormalizer {
        &self.normalizer
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Encodes a sample with this model's spec, normalizer and cardinality source.
    pub fn featurize(&self, sample: &PlanSample, catalog: &DatabaseCatalog) -> Result<QueryGraph> {
        self.encode(&build_raw_graph(sample, catalog, self.card_source)?)
    }

    pub fn encode(&self, raw: &RawGraph) -> Result<QueryGraph> {
        raw.encode(&self.spec, &self.normalizer)
    }

    /// Records the bottom-up pass; returns the updated state of every node.
    fn record_states(&self, tape: &mut Tape<'_>, g: &QueryGraph) -> Result<Vec<Option<Var>>> {
        let h = self.config.hidden_dim;
        let mut state: Vec<Option<Var>> = vec![None; g.len()];
        let mut kids = Vec::new();
        for &v in g.topological_order() {
            let node = &g.nodes()[v];
            let t = node.node_type.index();
            let encoder = &self.encoders[t];
            if node.features.len() != encoder.input_dim() {
                return Err(Error::SpecMismatch(format!(
                    "{} node {v} has {} features, model expects {}",
                    node.node_type.name(),
                    node.features.len(),
                    encoder.input_dim()
                )));
            }
            let x = tape.input(&node.features);
            let hv = encoder.forward_taped(tape, x)?;
            kids.clear();
            kids.extend(
                g.children(v)
                    .iter()
                    .map(|&c| state[c].expect("children precede parents")),
            );
            let agg = tape.sum(&kids, h)?;
            let cat = tape.concat(&[agg, hv])?;
            state[v] = Some(self.combiners[t].forward_taped(tape, cat)?);
        }
        Ok(state)
    }

    /// Updated hidden state `h'_v` of every node.
    pub fn hidden_states(&self, g: &QueryGraph) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new(&self.params);
        let states = self.record_states(&mut tape, g)?;
        states
            .into_iter()
            .map(|s| Ok(tape.value(s.expect("every node reached"))?.to_vec()))
            .collect()
    }

    /// Estimated runtime in seconds; always positive.
    pub fn predict(&self, g: &QueryGraph) -> Result<f64> {
        train::predict(self, g)
    }

    pub fn predict_many(&self, graphs: &[&QueryGraph]) -> Result<Vec<f64>> {
        train::predict_many(self, graphs)
    }

    pub fn predict_sample(&self, sample: &PlanSample, catalog: &DatabaseCatalog) -> Result<f64> {
        self.predict(&self.featurize(sample, catalog)?)
    }

    /// Predictions for every sample of a corpus, in corpus order.
    pub fn predict_corpus(&self, corpus: &TraceCorpus) -> Result<Vec<f64>> {
        let graphs = corpus
            .samples
            .par_iter()
            .map(|s| self.featurize(s, corpus.catalog(&s.database_id)?))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&QueryGraph> = graphs.iter().collect();
        self.predict_many(&refs)
    }

    /// Training loss of one labeled graph and its gradient with respect to
    /// all parameters (aligned with [`ZeroShotModel::params`]).
    pub fn loss_and_gradient(
        &self,
        g: &QueryGraph,
        runtime: f64,
        kind: Loss,
    ) -> Result<(f64, Vec<f64>)> {
        train::loss_and_gradient(self, g, runtime, kind)
    }

    pub fn loss(&self, g: &QueryGraph, runtime: f64, kind: Loss) -> Result<f64> {
        train::loss(self, g, runtime, kind)
    }

    fn payload(&self) -> String {
        let file = ModelFile {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            card_source: self.card_source,
            spec: self.spec.clone(),
            normalizer: self.normalizer.clone(),
            params: self.params.clone(),
            encoders: self.encoders.clone(),
            combiners: self.combiners.clone(),
            estimator: self.estimator.clone(),
        };
        serde_json::to_string(&file).expect("model serializes")
    }

    /// Hex SHA-256 of the serialized model.
    pub fn checksum(&self) -> String {
        hex::encode(Sha256::digest(self.payload().as_bytes()))
    }

    /// A header line `ZSCOST-MODEL v<version> sha256=<hex>` followed by the
    /// JSON payload the checksum covers.
    pub fn to_bytes(&self) -> Vec<u8> {
        let payload = self.payload();
        let sum = hex::encode(Sha256::digest(payload.as_bytes()));
        format!("{MAGIC} v{FORMAT_VERSION} sha256={sum}\n{payload}").into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let Some(nl) = bytes.iter().position(|&b| b == b'\n') else {
            return Err(if bytes.starts_with(MAGIC.as_bytes()) {
                Error::Checksum
            } else {
                Error::ModelFormat("missing header".into())
            });
        };
        let header = std::str::from_utf8(&bytes[..nl])
            .map_err(|_| Error::ModelFormat("header is not UTF-8".into()))?;
        let mut parts = header.split(' ');
        if parts.next() != Some(MAGIC) {
            return Err(Error::ModelFormat("not a model file".into()));
        }
        let version: u32 = parts
            .next()
            .and_then(|v| v.strip_prefix('v'))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::ModelFormat("bad version field".into()))?;
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let expected = parts
            .next()
            .and_then(|s| s.strip_prefix("sha256="))
            .ok_or_else(|| Error::ModelFormat("bad checksum field".into()))?;
        let payload = &bytes[nl + 1..];
        if hex::encode(Sha256::digest(payload)) != expected {
            return Err(Error::Checksum);
        }
        let file: ModelFile =
            serde_json::from_slice(payload).map_err(|e| Error::ModelFormat(e.to_string()))?;
        if file.format_version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: file.format_version,
                expected: FORMAT_VERSION,
            });
        }
        let model = ZeroShotModel {
            config: file.config,
            card_source: file.card_source,
            spec: file.spec,
            normalizer: file.normalizer,
            params: file.params,
            encoders: file.encoders,
            combiners: file.combiners,
            estimator: file.estimator,
        };
        model.check_consistency()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    fn check_consistency(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::ModelFormat(m.to_string()));
        self.config.validate()?;
        self.spec.check()?;
        self.normalizer.check(&self.spec)?;
        self.params.check_layout()?;
        let h = self.config.hidden_dim;
        if self.encoders.len() != NodeType::ALL.len() || self.combiners.len() != NodeType::ALL.len()
        {
            return bad("one encoder and one combiner per node type required");
        }
        let check_mlp = |m: &Mlp, input: usize, output: usize| -> Result<()> {
            if m.layers.is_empty() || m.input_dim() != input || m.output_dim() != output {
                return Err(Error::ModelFormat(format!(
                    "network dimensions {}x{} do not match {input}x{output}",
                    m.layers.first().map_or(0, |l| l.inputs),
                    m.layers.last().map_or(0, |l| l.outputs)
                )));
            }
            for pair in m.layers.windows(2) {
                if pair[0].outputs != pair[1].inputs {
                    return Err(Error::ModelFormat("inconsistent layer sizes".into()));
                }
            }
            for l in &m.layers {
                let in_range =
                    |id: crate::neural::ParamId| (id.0 as usize) < self.params.shapes().len();
                if !in_range(l.weight) || !in_range(l.bias) {
                    return Err(Error::ModelFormat("parameter id out of range".into()));
                }
                let w = self.params.shape(l.weight);
                let b = self.params.shape(l.bias);
                if (w.rows, w.cols) != (l.outputs, l.inputs) || (b.rows, b.cols) != (l.outputs, 1) {
                    return Err(Error::ModelFormat(
                        "parameter shape does not match layer".into(),
                    ));
                }
            }
            Ok(())
        };
        for t in NodeType::ALL {
            check_mlp(&self.encoders[t.index()], self.spec.dim(t), h)?;
            check_mlp(&self.combiners[t.index()], 2 * h, h)?;
        }
        check_mlp(&self.estimator, h, 1)?;
        if !self.params.all_finite() {
            return bad("non-finite parameter");
        }
        Ok(())
    }
}

impl Regressor for ZeroShotModel {
    type Input = QueryGraph;

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn record(&self, tape: &mut Tape<'_>, g: &QueryGraph) -> Result<Var> {
        let states = self.record_states(tape, g)?;
        let root = states[g.root()].expect("root reached");
        self.estimator.forward_taped(tape, root)
    }
}

/// Unencoded graphs and labels of a corpus under one cardinality source.
/// Built once and shared by every training run over subsets of it.
#[derive(Debug, Clone)]
pub struct GraphDataset {
    pub source: CardSource,
    pub graphs: Vec<RawGraph>,
    pub runtimes: Vec<f64>,
    pub databases: Vec<String>,
    pub sample_ids: Vec<String>,
    pub num_joins: Vec<usize>,
}

impl GraphDataset {
    pub fn from_corpus(corpus: &TraceCorpus, source: CardSource) -> Result<Self> {
        let graphs = corpus
            .samples
            .par_iter()
            .map(|s| build_raw_graph(s, corpus.catalog(&s.database_id)?, source))
            .collect::<Result<Vec<_>>>()?;
        let runtimes = corpus
            .samples
            .iter()
            .map(|s| s.runtime())
            .collect::<Result<Vec<_>>>()?;
        Ok(GraphDataset {
            source,
            graphs,
            runtimes,
            databases: corpus
                .samples
                .iter()
                .map(|s| s.database_id.clone())
                .collect(),
            sample_ids: corpus.samples.iter().map(|s| s.sample_id.clone()).collect(),
            num_joins: corpus.samples.iter().map(|s| s.root.num_joins()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    /// Indices of the samples belonging to `database`.
    pub fn indices_of(&self, database: &str) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.databases[i] == database)
            .collect()
    }
}

/// Trains on the samples `indices` of a dataset. The normalizer is fitted
/// on the training split only.
pub fn train_on(
    data: &GraphDataset,
    indices: &[usize],
    cfg: &ModelConfig,
    val_fraction: f64,
) -> Result<(ZeroShotModel, TrainReport)> {
    cfg.validate()?;
    if indices.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "training needs at least 2 samples, got {}",
            indices.len()
        )));
    }
    let dbs: Vec<&str> = indices
        .iter()
        .map(|&i| data.databases[i].as_str())
        .collect();
    let (tr, va) =
        train::stratified_split(&dbs, val_fraction, train::derive_seed(cfg.seed, "split"))?;
    let tr: Vec<usize> = tr.into_iter().map(|k| indices[k]).collect();
    let va: Vec<usize> = va.into_iter().map(|k| indices[k]).collect();

    let spec = FeatureSpec::standard();
    let normalizer =
        FeatureNormalizer::fit_raw(tr.iter().flat_map(|&i| data.graphs[i].nodes.iter()), &spec)?;
    let mut model = ZeroShotModel::new(cfg.clone(), data.source, spec, normalizer)?;
    let encode = |idx: &[usize]| -> Result<Vec<QueryGraph>> {
        idx.par_iter()
            .map(|&i| model.encode(&data.graphs[i]))
            .collect()
    };
    let train_graphs = encode(&tr)?;
    let val_graphs = encode(&va)?;
    let train_set: Vec<(&QueryGraph, f64)> = train_graphs
        .iter()
        .zip(&tr)
        .map(|(g, &i)| (g, data.runtimes[i]))
        .collect();
    let val_set: Vec<(&QueryGraph, f64)> = val_graphs
        .iter()
        .zip(&va)
        .map(|(g, &i)| (g, data.runtimes[i]))
        .collect();
    let report = train::optimize(&mut model, &train_set, &val_set, &cfg.optimization())?;
    info!(
        "trained on {} samples ({} validation), best epoch {} with median q-error {:.4}",
        tr.len(),
        va.len(),
        report.best_epoch,
        report.best_val_median_qerror.unwrap_or(f64::NAN)
    );
    Ok((model, report))
}

/// Trains a model on a whole corpus.
pub fn train(
    corpus: &TraceCorpus,
    cfg: &ModelConfig,
    source: CardSource,
    val_fraction: f64,
) -> Result<(ZeroShotModel, TrainReport)> {
    if corpus.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "training needs at least 2 samples, got {}",
            corpus.len()
        )));
    }
    let data = GraphDataset::from_corpus(corpus, source)?;
    let all: Vec<usize> = (0..data.len()).collect();
    train_on(&data, &all, cfg, val_fraction)
}

/// Continues training on additional samples with a fresh optimizer state.
/// The normalizer stays frozen.
pub fn finetune_graphs(
    model: &ZeroShotModel,
    graphs: &[(&QueryGraph, f64)],
    cfg: &FinetuneConfig,
) -> Result<(ZeroShotModel, TrainReport)> {
    let mut tuned = model.clone();
    if cfg.epochs == 0 {
        return Ok((
            tuned,
            TrainReport {
                epochs: vec![],
                best_epoch: 0,
                best_val_median_qerror: None,
                num_train: graphs.len(),
                num_val: 0,
                selected_on_training: false,
                wall_clock_s: 0.0,
            },
        ));
    }
    let opt = Optimization {
        lr: cfg.lr,
        batch_size: cfg.batch_size,
        max_epochs: cfg.epochs,
        patience: None,
        seed: train::derive_seed(cfg.seed, "finetune"),
        loss: cfg.loss,
    };
    let report = train::optimize(&mut tuned, graphs, &[], &opt)?;
    Ok((tuned, report))
}

pub fn finetune(
    model: &ZeroShotModel,
    extra: &TraceCorpus,
    cfg: &FinetuneConfig,
) -> Result<ZeroShotModel> {
    let graphs = extra
        .samples
        .par_iter()
        .map(|s| {
            Ok((
                model.featurize(s, extra.catalog(&s.database_id)?)?,
                s.runtime()?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<(&QueryGraph, f64)> = graphs.iter().map(|(g, c)| (g, *c)).collect();
    Ok(finetune_graphs(model, &refs, cfg)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featurize::RawNode;
    use crate::trace::{
        parse_catalog, ColumnRef, ComparisonOp, OpName, PlanOperator, PredicateExpr,
    };
    use std::collections::BTreeMap;

    fn small_config() -> ModelConfig {
        ModelConfig {
            hidden_dim: 8,
            max_epochs: 60,
            patience: 60,
            batch_size: 8,
            lr: 5e-3,
            seed: 7,
            ..ModelConfig::default()
        }
    }

    fn catalog() -> DatabaseCatalog {
        parse_catalog(
            r#"{"database_id":"db","tables":[
                {"name":"t","relpages":10,"reltuples":1000,"columns":[
                    {"name":"a","width":4,"correlation":0.5,"data_type":"int","ndistinct":100,"null_frac":0.0},
                    {"name":"b","width":8,"correlation":0.1,"data_type":"float","ndistinct":10,"null_frac":0.1}]}]}"#,
        )
        .unwrap()
    }

    fn sample(i: usize, runtime: f64) -> PlanSample {
        PlanSample {
            database_id: "db".into(),
            sample_id: format!("q{i}"),
            runtime_s: Some(runtime),
            root: PlanOperator {
                opname: OpName::SeqScan,
                act_card_out: 10.0 * (i + 1) as f64,
                est_card_out: 12.0 * (i + 1) as f64,
                width: 8.0,
                workers: 1,
                table: Some("t".into()),
                filter: Some(PredicateExpr::cmp(
                    ColumnRef::new("t", "a"),
                    ComparisonOp::Lt,
                    i as f64,
                )),
                output_columns: None,
                children: vec![],
            },
        }
    }

    fn corpus(labels: impl Fn(usize) -> f64) -> TraceCorpus {
        let mut cats = BTreeMap::new();
        cats.insert("db".to_string(), catalog());
        TraceCorpus::new(cats, (0..20).map(|i| sample(i, labels(i))).collect()).unwrap()
    }

    fn fitted_model(cfg: &ModelConfig) -> (ZeroShotModel, TraceCorpus) {
        let c = corpus(|i| 0.1 * (i + 1) as f64);
        let data = GraphDataset::from_corpus(&c, CardSource::Actual).unwrap();
        let spec = FeatureSpec::standard();
        let norm =
            FeatureNormalizer::fit_raw(data.graphs.iter().flat_map(|g| g.nodes.iter()), &spec)
                .unwrap();
        (
            ZeroShotModel::new(cfg.clone(), CardSource::Actual, spec, norm).unwrap(),
            c,
        )
    }

    #[test]
    fn single_node_graph_matches_manual_composition() {
        let (m, _) = fitted_model(&small_config());
        let raw = RawGraph {
            nodes: vec![RawNode {
                node_type: NodeType::PlanOp,
                numeric: vec![100.0, 8.0, 1.0, 1.0],
                categorical: vec!["Sort".into()],
            }],
            edges: vec![],
            root: 0,
        };
        let g = m.encode(&raw).unwrap();
        let x = &g.nodes()[0].features;
        let pi = NodeType::PlanOp.index();
        let h = m.encoders[pi].forward(&m.params, x).unwrap();
        let mut cat = vec![0.0; m.config.hidden_dim];
        cat.extend(h);
        let h2 = m.combiners[pi].forward(&m.params, &cat).unwrap();
        let raw_out = m.estimator.forward(&m.params, &h2).unwrap()[0];
        assert_eq!(m.predict(&g).unwrap(), raw_out.exp());
    }

    #[test]
    fn constant_labels_are_learned() {
        let c = corpus(|_| 1.0);
        let (m, report) = train(&c, &small_config(), CardSource::Actual, 0.1).unwrap();
        let preds = m.predict_corpus(&c).unwrap();
        let q: Vec<f64> = preds
            .iter()
            .map(|p| crate::metrics::qerror(1.0, *p).unwrap())
            .collect();
        assert!(crate::metrics::median(&q).unwrap() < 1.05, "{q:?}");
        let best = report.best_val_median_qerror.unwrap();
        assert!(report
            .epochs
            .iter()
            .all(|e| e.val_median_qerror.unwrap() >= best));
    }

    #[test]
    fn training_is_deterministic() {
        let c = corpus(|i| 0.05 * (i + 3) as f64);
        let cfg = ModelConfig {
            max_epochs: 5,
            ..small_config()
        };
        let (a, ra) = train(&c, &cfg, CardSource::Estimated, 0.1).unwrap();
        let (b, rb) = train(&c, &cfg, CardSource::Estimated, 0.1).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(ra, rb);
        assert_eq!(a.checksum(), b.checksum());
    }

    #[test]
    fn too_small_corpus_is_rejected() {
        let c = corpus(|_| 1.0).filtered(|s| s.sample_id == "q0");
        assert!(matches!(
            train(&c, &small_config(), CardSource::Actual, 0.1),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn save_load_round_trip_and_corruption() {
        let (m, c) = fitted_model(&small_config());
        let bytes = m.to_bytes();
        let back = ZeroShotModel::from_bytes(&bytes).unwrap();
        let a = m.predict_corpus(&c).unwrap();
        let b = back.predict_corpus(&c).unwrap();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );

        assert!(matches!(
            ZeroShotModel::from_bytes(&bytes[..bytes.len() - 10]),
            Err(Error::Checksum)
        ));
        assert!(matches!(
            ZeroShotModel::from_bytes(&bytes[..20]),
            Err(Error::Checksum)
        ));
        let text = String::from_utf8(bytes).unwrap();
        let bumped = text.replacen("ZSCOST-MODEL v1", "ZSCOST-MODEL v2", 1);
        assert!(matches!(
            ZeroShotModel::from_bytes(bumped.as_bytes()),
            Err(Error::VersionMismatch {
                found: 2,
                expected: 1
            })
        ));
        assert!(matches!(
            ZeroShotModel::from_bytes(b"{}\n"),
            Err(Error::ModelFormat(_))
        ));
    }

    #[test]
    fn finetune_zero_epochs_is_identity() {
        let (m, c) = fitted_model(&small_config());
        let cfg = FinetuneConfig {
            epochs: 0,
            ..FinetuneConfig::default()
        };
        assert_eq!(finetune(&m, &c, &cfg).unwrap(), m);
        let tuned = finetune(&m, &c, &FinetuneConfig::default()).unwrap();
        assert_ne!(tuned.params, m.params);
        assert_eq!(tuned.normalizer, m.normalizer);
    }
}
