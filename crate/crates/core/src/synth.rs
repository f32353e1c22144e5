//! Synthetic catalogs, workloads and an analytic runtime oracle.
//!
//! No tuples are ever generated. Catalogs are statistics only, plan
//! cardinalities come from an exact model over those statistics
//! (independent predicates within a table, foreign-key containment across
//! joins), and runtimes are a fixed per-operator cost formula over the
//! actual cardinalities plus multiplicative lognormal noise.
//!
//! Foreign keys follow a naming convention: a column `<parent>_id` in a
//! table references the `id` column of table `<parent>`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use log::info;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{
    Aggregation, BoolOp, ColumnRef, ColumnStats, ComparisonOp, DataType, DatabaseCatalog, OpName,
    OutputColumn, PlanOperator, PlanSample, PredicateExpr, StorageFormat, TableStats,
};
use crate::train::derive_seed;

pub const PAGE_SIZE: f64 = 8192.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthParams {
    pub num_databases: usize,
    pub min_tables: usize,
    pub max_tables: usize,
    pub min_rows: f64,
    pub max_rows: f64,
    pub min_columns: usize,
    pub max_columns: usize,
    /// Lognormal sigma of estimated cardinalities around the actual ones.
    pub sigma_est: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            num_databases: 10,
            min_tables: 2,
            max_tables: 8,
            min_rows: 1e3,
            max_rows: 1e7,
            min_columns: 3,
            max_columns: 12,
            sigma_est: 0.3,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        if self.num_databases == 0 {
            return Err(Error::validation("num_databases", "must be positive"));
        }
        if self.min_tables < 1 || self.min_tables > self.max_tables {
            return Err(Error::validation(
                "tables",
                "need 1 <= min_tables <= max_tables",
            ));
        }
        if !(self.min_rows >= 1.0 && self.min_rows <= self.max_rows) {
            return Err(Error::validation("rows", "need 1 <= min_rows <= max_rows"));
        }
        // id + foreign key + at least one payload column
        if self.min_columns < 3 || self.min_columns > self.max_columns {
            return Err(Error::validation(
                "columns",
                "need 3 <= min_columns <= max_columns",
            ));
        }
        if !(self.sigma_est >= 0.0) {
            return Err(Error::validation("sigma_est", "must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WorkloadMode {
    Standard,
    Complex,
    Index,
}

impl WorkloadMode {
    pub const ALL: [WorkloadMode; 3] = [
        WorkloadMode::Standard,
        WorkloadMode::Complex,
        WorkloadMode::Index,
    ];

    pub fn name(self) -> &'static str {
        match self {
            WorkloadMode::Standard => "standard",
            WorkloadMode::Complex => "complex",
            WorkloadMode::Index => "index",
        }
    }
}

impl fmt::Display for WorkloadMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for WorkloadMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        WorkloadMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown workload mode `{s}` (expected standard|complex|index)"))
    }
}

/// Global cost coefficients, in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleParams {
    pub c_page: f64,
    pub c_tuple: f64,
    /// per row and predicate node
    pub c_pred: f64,
    /// per hash-build row
    pub c_hash: f64,
    /// per outer-inner row pair
    pub c_nl: f64,
    /// sorting n rows costs `c_sort * n * log2(n)`
    pub c_sort: f64,
    pub c_shuffle: f64,
    pub c_index_lookup: f64,
    pub c_index_row: f64,
    /// an operator with `w` workers costs its serial cost over `w^worker_exponent`
    pub worker_exponent: f64,
    pub noise_sigma: f64,
    pub timeout_s: f64,
}

impl Default for OracleParams {
    fn default() -> Self {
        OracleParams {
            c_page: 1e-4,
            c_tuple: 1e-6,
            c_pred: 2e-7,
            c_hash: 3e-6,
            c_nl: 5e-9,
            c_sort: 2e-6,
            c_shuffle: 4e-6,
            c_index_lookup: 5e-5,
            c_index_row: 1e-6,
            worker_exponent: 0.8,
            noise_sigma: 0.1,
            timeout_s: 30.0,
        }
    }
}

impl OracleParams {
    pub fn validate(&self) -> Result<()> {
        let coefs = [
            ("c_page", self.c_page),
            ("c_tuple", self.c_tuple),
            ("c_pred", self.c_pred),
            ("c_hash", self.c_hash),
            ("c_nl", self.c_nl),
            ("c_sort", self.c_sort),
            ("c_shuffle", self.c_shuffle),
            ("c_index_lookup", self.c_index_lookup),
            ("c_index_row", self.c_index_row),
            ("worker_exponent", self.worker_exponent),
            ("timeout_s", self.timeout_s),
        ];
        for (name, v) in coefs {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::validation(name, "must be positive"));
            }
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::validation("noise_sigma", "must be >= 0"));
        }
        Ok(())
    }

    fn sort(&self, n: f64) -> f64 {
        self.c_sort * n * n.max(2.0).log2()
    }
}

fn log_uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if lo >= hi {
        return lo;
    }
    (rng.random_range(lo.ln()..hi.ln())).exp()
}

/// A random catalog. Table `t<i>` (for `i > 0`) references a random earlier
/// table, so the foreign-key graph is a connected tree.
pub fn gen_catalog(database_id: &str, seed: u64, params: &SynthParams) -> Result<DatabaseCatalog> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "catalog"));
    let null_dist = Beta::new(1.0, 9.0).expect("valid beta");
    let n_tables = rng.random_range(params.min_tables..=params.max_tables);
    let mut tables: Vec<TableStats> = Vec::with_capacity(n_tables);
    for i in 0..n_tables {
        let name = format!("t{i}");
        let reltuples = log_uniform(&mut rng, params.min_rows, params.max_rows).round();
        let n_cols = rng.random_range(params.min_columns..=params.max_columns);
        let mut columns = vec![ColumnStats {
            name: "id".into(),
            width: 4.0,
            correlation: rng.random_range(0.9..=1.0),
            data_type: DataType::Int,
            ndistinct: reltuples.max(1.0),
            null_frac: 0.0,
        }];
        if i > 0 {
            let parent = &tables[rng.random_range(0..i)];
            columns.push(ColumnStats {
                name: format!("{}_id", parent.name),
                width: 4.0,
                correlation: rng.random_range(-1.0..=1.0),
                data_type: DataType::Int,
                ndistinct: parent.reltuples.min(reltuples).max(1.0),
                null_frac: 0.0,
            });
        }
        let mut c = 0;
        while columns.len() < n_cols {
            let data_type = *[
                DataType::Int,
                DataType::Int,
                DataType::Float,
                DataType::Float,
                DataType::Categorical,
                DataType::Categorical,
                DataType::String,
                DataType::Misc,
            ]
            .choose(&mut rng)
            .expect("non-empty");
            let (width, ndistinct) = match data_type {
                DataType::Int => (4.0, log_uniform(&mut rng, 1.0, reltuples.max(1.0))),
                DataType::Float => (8.0, log_uniform(&mut rng, 1.0, reltuples.max(1.0))),
                DataType::Categorical => (
                    rng.random_range(4..=16) as f64,
                    rng.random_range(2..=100) as f64,
                ),
                DataType::String => (
                    rng.random_range(8..=64) as f64,
                    log_uniform(&mut rng, 1.0, reltuples.max(1.0)),
                ),
                DataType::Misc => (
                    rng.random_range(8..=32) as f64,
                    log_uniform(&mut rng, 1.0, reltuples.max(1.0)),
                ),
            };
            columns.push(ColumnStats {
                name: format!("c{c}"),
                width,
                correlation: rng.random_range(-1.0..=1.0),
                data_type,
                ndistinct: ndistinct.round().clamp(1.0, reltuples.max(1.0)),
                null_frac: null_dist.sample(&mut rng),
            });
            c += 1;
        }
        let row_width: f64 = columns.iter().map(|c| c.width).sum();
        tables.push(TableStats {
            name,
            relpages: relpages(reltuples, row_width),
            reltuples,
            storage_format: StorageFormat::Row,
            columns,
        });
    }
    let catalog = DatabaseCatalog {
        database_id: database_id.to_string(),
        tables,
    };
    catalog.validate()?;
    Ok(catalog)
}

pub fn relpages(reltuples: f64, row_width: f64) -> f64 {
    (reltuples * row_width / PAGE_SIZE).ceil()
}

/// `(child table, foreign-key column, parent table)` triples inferred from
/// the `<parent>_id` naming convention.
pub fn foreign_keys(catalog: &DatabaseCatalog) -> Vec<(String, String, String)> {
    let mut out = Vec::new();
    for t in &catalog.tables {
        for c in &t.columns {
            if let Some(parent) = c.name.strip_suffix("_id") {
                if parent != t.name && catalog.table(parent).is_some() {
                    out.push((t.name.clone(), c.name.clone(), parent.to_string()));
                }
            }
        }
    }
    out
}

fn is_key(col: &ColumnStats) -> bool {
    col.name == "id" || col.name.ends_with("_id")
}

/// Selectivity of a predicate under independence.
pub fn selectivity(
    pred: &PredicateExpr,
    catalog: &DatabaseCatalog,
    fractions: &mut impl FnMut() -> f64,
) -> f64 {
    match pred {
        PredicateExpr::Bool { op, children } => {
            let sels = children.iter().map(|c| selectivity(c, catalog, fractions));
            match op {
                BoolOp::And => sels.product(),
                BoolOp::Or => 1.0 - sels.map(|s| 1.0 - s).product::<f64>(),
            }
        }
        PredicateExpr::Comparison {
            column,
            op,
            literal_feat,
        } => {
            let Some(c) = catalog.column(column) else {
                return 1.0;
            };
            let present = 1.0 - c.null_frac;
            match op {
                ComparisonOp::Eq => present / c.ndistinct,
                ComparisonOp::Neq => present * (1.0 - 1.0 / c.ndistinct),
                ComparisonOp::Lt | ComparisonOp::Leq | ComparisonOp::Gt | ComparisonOp::Geq => {
                    present * fractions()
                }
                ComparisonOp::Like => present * 0.3 * fractions(),
                ComparisonOp::NotLike => present * (1.0 - 0.3 * fractions()),
                ComparisonOp::In => present * (literal_feat / c.ndistinct).min(1.0),
                ComparisonOp::IsNull => c.null_frac,
                ComparisonOp::IsNotNull => present,
            }
        }
    }
}

struct Generator<'a> {
    catalog: &'a DatabaseCatalog,
    mode: WorkloadMode,
    sigma_est: f64,
    rng: ChaCha8Rng,
    /// neighbours in the foreign-key graph: (other table, fk column owner, fk column, parent)
    fk: BTreeMap<String, Vec<(String, String, String, String)>>,
    indexes: BTreeSet<ColumnRef>,
}

struct Partial {
    op: PlanOperator,
    tables: Vec<String>,
}

impl<'a> Generator<'a> {
    fn new(catalog: &'a DatabaseCatalog, mode: WorkloadMode, sigma_est: f64, seed: u64) -> Self {
        let mut fk: BTreeMap<String, Vec<_>> = BTreeMap::new();
        for (child, col, parent) in foreign_keys(catalog) {
            fk.entry(child.clone()).or_default().push((
                parent.clone(),
                child.clone(),
                col.clone(),
                parent.clone(),
            ));
            fk.entry(parent.clone())
                .or_default()
                .push((child.clone(), child, col, parent));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "workload"));
        let mut indexes = BTreeSet::new();
        if mode == WorkloadMode::Index {
            for t in &catalog.tables {
                indexes.insert(ColumnRef::new(&t.name, "id"));
                for c in &t.columns {
                    if c.name != "id" && rng.random_bool(0.5) {
                        indexes.insert(ColumnRef::new(&t.name, &c.name));
                    }
                }
            }
        }
        Generator {
            catalog,
            mode,
            sigma_est,
            rng,
            fk,
            indexes,
        }
    }

    fn est(&mut self, act: f64) -> f64 {
        if self.sigma_est == 0.0 {
            return act;
        }
        let z: f64 = StandardNormal.sample(&mut self.rng);
        act * (self.sigma_est * z).exp()
    }

    fn operator(
        &mut self,
        opname: OpName,
        act: f64,
        width: f64,
        children: Vec<PlanOperator>,
    ) -> PlanOperator {
        let est_card_out = self.est(act);
        PlanOperator {
            opname,
            act_card_out: act,
            est_card_out,
            width,
            workers: 1,
            table: None,
            filter: None,
            output_columns: None,
            children,
        }
    }

    fn comparison(&mut self, table: &TableStats) -> Option<PredicateExpr> {
        let complex = self.mode == WorkloadMode::Complex;
        let candidates: Vec<&ColumnStats> = table
            .columns
            .iter()
            .filter(|c| {
                !is_key(c)
                    && (complex
                        || matches!(
                            c.data_type,
                            DataType::Int | DataType::Float | DataType::Categorical
                        ))
            })
            .collect();
        let col = *candidates.choose(&mut self.rng)?;
        let column = ColumnRef::new(&table.name, &col.name);
        let ranges = [
            ComparisonOp::Lt,
            ComparisonOp::Leq,
            ComparisonOp::Gt,
            ComparisonOp::Geq,
        ];
        let mut ops: Vec<ComparisonOp> = vec![ComparisonOp::Eq, ComparisonOp::Neq];
        match col.data_type {
            DataType::Int | DataType::Float => ops.extend(ranges),
            DataType::String if complex => ops.extend([
                ComparisonOp::Like,
                ComparisonOp::Like,
                ComparisonOp::NotLike,
            ]),
            _ => {}
        }
        if complex {
            ops.extend([
                ComparisonOp::In,
                ComparisonOp::IsNull,
                ComparisonOp::IsNotNull,
            ]);
        }
        let op = *ops.choose(&mut self.rng).expect("non-empty");
        let literal_feat = match op {
            ComparisonOp::Like | ComparisonOp::NotLike => {
                let len = self.rng.random_range(3..=12);
                let wildcards = self.rng.random_range(1..=3);
                (len + 3 * wildcards) as f64
            }
            ComparisonOp::In => self.rng.random_range(2..=10) as f64,
            ComparisonOp::IsNull | ComparisonOp::IsNotNull => 0.0,
            _ => 1.0,
        };
        Some(PredicateExpr::cmp(column, op, literal_feat))
    }

    fn filter(&mut self, table: &TableStats) -> Option<PredicateExpr> {
        let n = self.rng.random_range(1..=3);
        let mut comps: Vec<PredicateExpr> = (0..n).filter_map(|_| self.comparison(table)).collect();
        match comps.len() {
            0 => None,
            1 => comps.pop(),
            _ if self.mode != WorkloadMode::Complex => Some(PredicateExpr::and(comps)),
            _ => {
                let top = if self.rng.random_bool(0.5) {
                    BoolOp::And
                } else {
                    BoolOp::Or
                };
                if comps.len() >= 3 && self.rng.random_bool(0.5) {
                    let inner_op = match top {
                        BoolOp::And => BoolOp::Or,
                        BoolOp::Or => BoolOp::And,
                    };
                    let tail = comps.split_off(comps.len() - 2);
                    comps.push(PredicateExpr::Bool {
                        op: inner_op,
                        children: tail,
                    });
                }
                Some(PredicateExpr::Bool {
                    op: top,
                    children: comps,
                })
            }
        }
    }

    fn scan(&mut self, table: &TableStats, projected: f64) -> PlanOperator {
        let filter = if self.rng.random_bool(0.7) {
            self.filter(table)
        } else {
            None
        };
        let sel = match &filter {
            Some(f) => {
                let rng = &mut self.rng;
                selectivity(f, self.catalog, &mut || rng.random_range(0.01..0.99))
            }
            None => 1.0,
        };
        let act = (table.reltuples * sel).round();
        let single_indexed = match &filter {
            Some(PredicateExpr::Comparison { column, op, .. }) => {
                self.indexes.contains(column)
                    && matches!(
                        op,
                        ComparisonOp::Eq
                            | ComparisonOp::Lt
                            | ComparisonOp::Leq
                            | ComparisonOp::Gt
                            | ComparisonOp::Geq
                            | ComparisonOp::In
                    )
            }
            _ => false,
        };
        let opname = if single_indexed && self.rng.random_bool(0.8) {
            OpName::IndexScan
        } else {
            OpName::SeqScan
        };
        let mut op = self.operator(opname, act, projected, vec![]);
        op.table = Some(table.name.clone());
        op.filter = filter;
        if opname == OpName::SeqScan && table.reltuples > 1e5 {
            op.workers = *[1, 2, 4].choose(&mut self.rng).expect("non-empty");
        }
        op
    }

    fn projected_width(&mut self, table: &TableStats) -> f64 {
        let k = self.rng.random_range(1..=3.min(table.columns.len()));
        table
            .columns
            .choose_multiple(&mut self.rng, k)
            .map(|c| c.width)
            .sum::<f64>()
            + 4.0
    }

    fn query(&mut self) -> PlanOperator {
        let tables = &self.catalog.tables;
        let max_joins = 4.min(tables.len() - 1);
        let joins = self.rng.random_range(0..=max_joins);
        let start = &tables[self.rng.random_range(0..tables.len())];
        let w = self.projected_width(start);
        let mut plan = Partial {
            op: self.scan(start, w),
            tables: vec![start.name.clone()],
        };
        for _ in 0..joins {
            let mut frontier = Vec::new();
            for t in &plan.tables {
                for e in self.fk.get(t).into_iter().flatten() {
                    if !plan.tables.contains(&e.0) {
                        frontier.push(e.clone());
                    }
                }
            }
            let Some((other, _child, _col, parent)) = frontier.choose(&mut self.rng).cloned()
            else {
                break;
            };
            let other_stats = self.catalog.table(&other).expect("catalog table");
            let pk_rows = self
                .catalog
                .table(&parent)
                .expect("catalog table")
                .reltuples
                .max(1.0);
            let left = plan.op;
            let index_join = self.mode == WorkloadMode::Index
                && other == parent
                && left.act_card_out <= 1e4
                && self.rng.random_bool(0.5);
            let op = if index_join {
                // Parameterized index lookups on the primary key of `other`.
                let act = left.act_card_out;
                let width = left.width + 4.0 + self.projected_width(other_stats);
                let mut inner = self.operator(OpName::IndexScan, act, width - left.width, vec![]);
                inner.table = Some(other.clone());
                self.operator(OpName::NestedLoopJoin, act, width, vec![left, inner])
            } else {
                let w = self.projected_width(other_stats);
                let right = self.scan(other_stats, w);
                let act = (left.act_card_out * right.act_card_out / pk_rows).round();
                let width = left.width + right.width;
                let small = left.act_card_out.min(right.act_card_out) <= 100.0;
                let opname = if small && self.rng.random_bool(0.5) {
                    OpName::NestedLoopJoin
                } else if self.rng.random_bool(0.85) {
                    OpName::HashJoin
                } else {
                    OpName::MergeJoin
                };
                // hash joins build on the smaller input
                let children =
                    if opname == OpName::HashJoin && right.act_card_out > left.act_card_out {
                        vec![right, left]
                    } else {
                        vec![left, right]
                    };
                self.operator(opname, act, width, children)
            };
            plan.op = op;
            plan.tables.push(other);
        }
        self.finish(plan)
    }

    fn payload_columns(&self, tables: &[String]) -> Vec<(ColumnRef, &'a ColumnStats)> {
        let catalog = self.catalog;
        tables
            .iter()
            .flat_map(|t| {
                let ts = catalog.table(t).expect("catalog table");
                ts.columns
                    .iter()
                    .map(move |c| (ColumnRef::new(t, &c.name), c))
            })
            .collect()
    }

    fn finish(&mut self, plan: Partial) -> PlanOperator {
        let cols = self.payload_columns(&plan.tables);
        let mut root = plan.op;
        if self.rng.random_bool(0.5) {
            let n_aggs = self.rng.random_range(1..=3);
            let mut outputs = Vec::new();
            for _ in 0..n_aggs {
                let agg = *[
                    Aggregation::Count,
                    Aggregation::Sum,
                    Aggregation::Avg,
                    Aggregation::Min,
                    Aggregation::Max,
                ]
                .choose(&mut self.rng)
                .expect("non-empty");
                let columns = if agg == Aggregation::Count && self.rng.random_bool(0.5) {
                    vec![]
                } else {
                    vec![cols.choose(&mut self.rng).expect("columns").0.clone()]
                };
                outputs.push(OutputColumn {
                    aggregation: agg,
                    columns,
                });
            }
            let grouping: Vec<&(ColumnRef, &ColumnStats)> =
                cols.iter().filter(|(_, c)| !is_key(c)).collect();
            let group = if self.rng.random_bool(0.5) {
                grouping
                    .choose(&mut self.rng)
                    .map(|g| (g.0.clone(), g.1.ndistinct, g.1.width))
            } else {
                None
            };
            let n_in = root.act_card_out;
            let width = 8.0 * n_aggs as f64 + group.as_ref().map_or(0.0, |g| g.2);
            root = match group {
                None => self.operator(OpName::GroupAggregate, 1.0, width, vec![root]),
                Some((col, nd, _)) => {
                    // expected number of distinct values among n_in rows
                    let groups = if n_in == 0.0 {
                        0.0
                    } else {
                        (nd * (1.0 - (1.0 - 1.0 / nd).powf(n_in))).round().max(1.0)
                    };
                    outputs.insert(
                        0,
                        OutputColumn {
                            aggregation: Aggregation::None,
                            columns: vec![col],
                        },
                    );
                    if self.rng.random_bool(0.7) {
                        self.operator(OpName::HashAggregate, groups, width, vec![root])
                    } else {
                        let w = root.width;
                        let sorted = self.operator(OpName::Sort, n_in, w, vec![root]);
                        self.operator(OpName::GroupAggregate, groups, width, vec![sorted])
                    }
                }
            };
            root.output_columns = Some(outputs);
        } else {
            let k = self.rng.random_range(1..=4.min(cols.len()));
            let outputs = cols
                .choose_multiple(&mut self.rng, k)
                .map(|(c, _)| OutputColumn {
                    aggregation: Aggregation::None,
                    columns: vec![c.clone()],
                })
                .collect();
            if self.rng.random_bool(0.2) {
                let (act, w) = (root.act_card_out, root.width);
                root = self.operator(OpName::Sort, act, w, vec![root]);
            }
            root.output_columns = Some(outputs);
        }
        root
    }
}

/// `n` unlabeled plans over `catalog`.
pub fn gen_workload(
    catalog: &DatabaseCatalog,
    mode: WorkloadMode,
    n: usize,
    seed: u64,
    sigma_est: f64,
) -> Result<Vec<PlanOperator>> {
    if n < 1 {
        return Err(Error::InvalidArgument(
            "workload size must be at least 1".into(),
        ));
    }
    if catalog.tables.is_empty() {
        return Err(Error::InvalidArgument("catalog has no tables".into()));
    }
    let mut g = Generator::new(catalog, mode, sigma_est, seed);
    Ok((0..n).map(|_| g.query()).collect())
}

fn rows_in(op: &PlanOperator) -> f64 {
    op.children.iter().map(|c| c.act_card_out).sum()
}

fn operator_cost(
    op: &PlanOperator,
    catalog: &DatabaseCatalog,
    o: &OracleParams,
    lookups: f64,
) -> Result<f64> {
    let out = op.act_card_out;
    let pred_nodes = op.filter.as_ref().map_or(0, PredicateExpr::node_count) as f64;
    let child = |i: usize| op.children.get(i).map_or(0.0, |c| c.act_card_out);
    let serial = match op.opname {
        OpName::SeqScan => {
            let name = op.table.as_deref().unwrap_or_default();
            let t = catalog
                .table(name)
                .ok_or_else(|| Error::validation("table", format!("unknown table `{name}`")))?;
            o.c_page * t.relpages + o.c_tuple * t.reltuples + o.c_pred * t.reltuples * pred_nodes
        }
        OpName::IndexScan | OpName::IndexOnlyScan => {
            o.c_index_lookup * lookups + o.c_index_row * out
        }
        OpName::NestedLoopJoin => {
            let inner_indexed = op
                .children
                .get(1)
                .is_some_and(|c| matches!(c.opname, OpName::IndexScan | OpName::IndexOnlyScan));
            if inner_indexed {
                o.c_tuple * out
            } else {
                o.c_nl * child(0) * child(1) + o.c_tuple * out
            }
        }
        OpName::HashJoin => o.c_hash * child(1) + o.c_tuple * (child(0) + out),
        OpName::MergeJoin => {
            o.sort(child(0)) + o.sort(child(1)) + o.c_tuple * (child(0) + child(1) + out)
        }
        OpName::Sort => o.sort(rows_in(op)),
        OpName::HashAggregate => o.c_hash * rows_in(op) + o.c_tuple * out,
        OpName::GroupAggregate | OpName::Materialize | OpName::Gather | OpName::Other => {
            o.c_tuple * rows_in(op)
        }
        OpName::ShuffleBroadcast | OpName::ShufflePartition => o.c_shuffle * rows_in(op),
    };
    let mut total = serial / f64::from(op.workers.max(1)).powf(o.worker_exponent);
    for (i, c) in op.children.iter().enumerate() {
        // The inner index scan of a nested loop runs once per outer row.
        let l = if op.opname == OpName::NestedLoopJoin && i == 1 {
            child(0)
        } else {
            1.0
        };
        total += operator_cost(c, catalog, o, l)?;
    }
    Ok(total)
}

/// Noise-free runtime: the sum of all operator costs.
pub fn oracle_cost(
    plan: &PlanOperator,
    catalog: &DatabaseCatalog,
    oracle: &OracleParams,
) -> Result<f64> {
    operator_cost(plan, catalog, oracle, 1.0)
}

/// Runtime with multiplicative lognormal noise drawn from `noise_seed`.
pub fn oracle_runtime(
    plan: &PlanOperator,
    catalog: &DatabaseCatalog,
    oracle: &OracleParams,
    noise_seed: u64,
) -> Result<f64> {
    let base = oracle_cost(plan, catalog, oracle)?;
    if oracle.noise_sigma == 0.0 {
        return Ok(base);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let z: f64 = StandardNormal.sample(&mut rng);
    Ok(base * (oracle.noise_sigma * z).exp())
}

pub fn database_id(index: usize) -> String {
    format!("synth_{index:02}")
}

/// Labeled samples of one database; modes rotate round-robin over the
/// queries. Queries slower than the timeout are replaced.
pub fn gen_database_samples(
    catalog: &DatabaseCatalog,
    params: &SynthParams,
    oracle: &OracleParams,
    modes: &[WorkloadMode],
    n: usize,
    seed: u64,
) -> Result<Vec<PlanSample>> {
    if modes.is_empty() {
        return Err(Error::InvalidArgument(
            "at least one workload mode is required".into(),
        ));
    }
    let mut gens: Vec<Generator> = modes
        .iter()
        .map(|m| Generator::new(catalog, *m, params.sigma_est, derive_seed(seed, m.name())))
        .collect();
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let g = &mut gens[i % modes.len()];
        let mut attempt = 0;
        loop {
            let plan = g.query();
            let noise_seed = derive_seed(seed, &format!("noise-{i}-{attempt}"));
            let runtime = oracle_runtime(&plan, catalog, oracle, noise_seed)?;
            if runtime <= oracle.timeout_s {
                samples.push(PlanSample {
                    database_id: catalog.database_id.clone(),
                    sample_id: format!("{}-{i:05}", catalog.database_id),
                    runtime_s: Some(runtime),
                    root: plan,
                });
                break;
            }
            attempt += 1;
            if attempt > 10_000 {
                return Err(Error::InvalidArgument(format!(
                    "could not generate a query under {} s for {}",
                    oracle.timeout_s, catalog.database_id
                )));
            }
        }
    }
    Ok(samples)
}

/// Catalogs and samples of a whole synthetic corpus, in canonical order.
pub fn gen_corpus_data(
    params: &SynthParams,
    oracle: &OracleParams,
    modes: &[WorkloadMode],
    queries_per_db: usize,
    seed: u64,
) -> Result<(BTreeMap<String, DatabaseCatalog>, Vec<PlanSample>)> {
    params.validate()?;
    oracle.validate()?;
    if queries_per_db == 0 {
        return Err(Error::InvalidArgument(
            "queries per database must be positive".into(),
        ));
    }
    let per_db = (0..params.num_databases)
        .into_par_iter()
        .map(|i| {
            let db_seed = derive_seed(seed, &database_id(i));
            let catalog = gen_catalog(&database_id(i), db_seed, params)?;
            let samples =
                gen_database_samples(&catalog, params, oracle, modes, queries_per_db, db_seed)?;
            Ok((catalog, samples))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut catalogs = BTreeMap::new();
    let mut samples = Vec::new();
    for (c, s) in per_db {
        samples.extend(s);
        catalogs.insert(c.database_id.clone(), c);
    }
    Ok((catalogs, samples))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub seed: u64,
    pub queries_per_db: usize,
    pub modes: Vec<WorkloadMode>,
    pub synth: SynthParams,
    pub oracle: OracleParams,
}

#[derive(Debug, Clone, Serialize)]
pub struct CorpusSummary {
    pub databases: usize,
    pub queries: usize,
    pub mode_mix: BTreeMap<String, usize>,
}

/// Writes `catalogs/<db>.json`, `trace.jsonl` and `oracle.json` under `out`.
pub fn gen_corpus(
    params: &SynthParams,
    oracle: &OracleParams,
    modes: &[WorkloadMode],
    queries_per_db: usize,
    seed: u64,
    out: &Path,
) -> Result<CorpusSummary> {
    let (catalogs, samples) = gen_corpus_data(params, oracle, modes, queries_per_db, seed)?;
    let cat_dir = out.join("catalogs");
    std::fs::create_dir_all(&cat_dir).map_err(|e| Error::io(&cat_dir, e))?;
    for (id, c) in &catalogs {
        let p = cat_dir.join(format!("{id}.json"));
        std::fs::write(&p, c.to_json() + "\n").map_err(|e| Error::io(&p, e))?;
    }
    let mut trace = String::new();
    for s in &samples {
        trace.push_str(&s.to_json_line());
        trace.push('\n');
    }
    let p = out.join("trace.jsonl");
    std::fs::write(&p, trace).map_err(|e| Error::io(&p, e))?;
    let manifest = CorpusManifest {
        seed,
        queries_per_db,
        modes: modes.to_vec(),
        synth: params.clone(),
        oracle: oracle.clone(),
    };
    let p = out.join("oracle.json");
    std::fs::write(&p, serde_json::to_string_pretty(&manifest)? + "\n")
        .map_err(|e| Error::io(&p, e))?;
    let mut mode_mix = BTreeMap::new();
    for i in 0..queries_per_db {
        *mode_mix
            .entry(modes[i % modes.len()].name().to_string())
            .or_insert(0) += catalogs.len();
    }
    info!(
        "wrote {} samples over {} databases to {}",
        samples.len(),
        catalogs.len(),
        out.display()
    );
    Ok(CorpusSummary {
        databases: catalogs.len(),
        queries: samples.len(),
        mode_mix,
    })
}
