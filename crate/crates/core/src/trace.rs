//! Catalog and execution-trace formats.
//!
//! A catalog is one JSON document per database carrying the per-table and
//! per-column statistics the featurizer needs. A trace is JSON Lines: one
//! executed plan per line, annotated with both actual and estimated output
//! cardinalities so the cardinality source can be chosen at read time.
//!
//! Literal values never appear in either format. Predicates carry only a
//! `literal_feat` number: list length for `IN`, `pattern length + 3 x
//! wildcard count` for `LIKE`/`NOT_LIKE`, `0` for `IS (NOT) NULL` and `1`
//! for everything else.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::BufRead;
use std::path::Path;
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataType {
    Int,
    Float,
    Categorical,
    String,
    Misc,
}

impl DataType {
    pub const ALL: [DataType; 5] = [
        DataType::Int,
        DataType::Float,
        DataType::Categorical,
        DataType::String,
        DataType::Misc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DataType::Int => "int",
            DataType::Float => "float",
            DataType::Categorical => "categorical",
            DataType::String => "string",
            DataType::Misc => "misc",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StorageFormat {
    #[default]
    Row,
    Column,
}

impl StorageFormat {
    pub const ALL: [StorageFormat; 2] = [StorageFormat::Row, StorageFormat::Column];

    pub fn name(self) -> &'static str {
        match self {
            StorageFormat::Row => "row",
            StorageFormat::Column => "column",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub name: String,
    /// Average bytes per value.
    pub width: f64,
    /// Correlation between physical row order and value order.
    pub correlation: f64,
    pub data_type: DataType,
    pub ndistinct: f64,
    pub null_frac: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableStats {
    pub name: String,
    pub relpages: f64,
    pub reltuples: f64,
    #[serde(default)]
    pub storage_format: StorageFormat,
    pub columns: Vec<ColumnStats>,
}

impl TableStats {
    pub fn column(&self, name: &str) -> Option<&ColumnStats> {
        self.columns.iter().find(|c| c.name == name)
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    /// Sum of the average column widths.
    pub fn row_width(&self) -> f64 {
        self.columns.iter().map(|c| c.width).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatabaseCatalog {
    pub database_id: String,
    pub tables: Vec<TableStats>,
}

impl DatabaseCatalog {
    pub fn table(&self, name: &str) -> Option<&TableStats> {
        self.tables.iter().find(|t| t.name == name)
    }

    pub fn column(&self, col: &ColumnRef) -> Option<&ColumnStats> {
        self.table(&col.table).and_then(|t| t.column(&col.column))
    }

    pub fn validate(&self) -> Result<()> {
        let mut tables = BTreeSet::new();
        for (ti, t) in self.tables.iter().enumerate() {
            let field = |f: &str| format!("tables[{ti}].{f}");
            if !tables.insert(t.name.as_str()) {
                return Err(Error::validation(
                    field("name"),
                    format!("duplicate table `{}`", t.name),
                ));
            }
            if !(t.relpages >= 0.0 && t.relpages.is_finite()) {
                return Err(Error::validation(
                    field("relpages"),
                    "relpages must be >= 0",
                ));
            }
            if !(t.reltuples >= 0.0 && t.reltuples.is_finite()) {
                return Err(Error::validation(
                    field("reltuples"),
                    "reltuples must be >= 0",
                ));
            }
            let mut cols = BTreeSet::new();
            for (ci, c) in t.columns.iter().enumerate() {
                let field = |f: &str| format!("tables[{ti}].columns[{ci}].{f}");
                if !cols.insert(c.name.as_str()) {
                    return Err(Error::validation(
                        field("name"),
                        format!("duplicate column `{}`", c.name),
                    ));
                }
                if !(0.0..=1.0).contains(&c.null_frac) {
                    return Err(Error::validation(
                        field("null_frac"),
                        "null_frac out of [0,1]",
                    ));
                }
                if !(-1.0..=1.0).contains(&c.correlation) {
                    return Err(Error::validation(
                        field("correlation"),
                        "correlation out of [-1,1]",
                    ));
                }
                if !(c.width >= 0.0 && c.width.is_finite()) {
                    return Err(Error::validation(field("width"), "width must be >= 0"));
                }
                if !(c.ndistinct >= 1.0 && c.ndistinct.is_finite()) {
                    return Err(Error::validation(
                        field("ndistinct"),
                        "ndistinct must be >= 1",
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("catalog serializes")
    }
}

/// Parses and validates one catalog document. Unknown fields are ignored
/// with a warning.
pub fn parse_catalog(text: &str) -> Result<DatabaseCatalog> {
    let catalog: DatabaseCatalog = deserialize_warn(text, "catalog")?;
    catalog.validate()?;
    Ok(catalog)
}

pub fn load_catalog(path: &Path) -> Result<DatabaseCatalog> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_catalog(&text)
}

/// Loads every `*.json` file of a directory as a catalog, keyed by database id.
pub fn load_catalog_dir(dir: &Path) -> Result<BTreeMap<String, DatabaseCatalog>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut out = BTreeMap::new();
    for p in paths {
        let cat = load_catalog(&p)?;
        if out.contains_key(&cat.database_id) {
            return Err(Error::validation(
                "database_id",
                format!("duplicate catalog for `{}`", cat.database_id),
            ));
        }
        out.insert(cat.database_id.clone(), cat);
    }
    Ok(out)
}

fn deserialize_warn<'de, T: Deserialize<'de>>(text: &'de str, what: &str) -> Result<T> {
    let mut de = serde_json::Deserializer::from_str(text);
    let value: T = serde_ignored::deserialize(&mut de, |path| {
        warn!("ignoring unknown {what} field `{path}`");
    })
    .map_err(|e| Error::from_json(&e))?;
    de.end().map_err(|e| Error::from_json(&e))?;
    Ok(value)
}

/// `table.column`
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ColumnRef {
    pub table: String,
    pub column: String,
}

impl ColumnRef {
    pub fn new(table: impl Into<String>, column: impl Into<String>) -> Self {
        ColumnRef {
            table: table.into(),
            column: column.into(),
        }
    }
}

impl fmt::Display for ColumnRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.table, self.column)
    }
}

impl FromStr for ColumnRef {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.split_once('.') {
            Some((t, c)) if !t.is_empty() && !c.is_empty() => Ok(ColumnRef::new(t, c)),
            _ => Err(format!(
                "column reference `{s}` is not of the form table.column"
            )),
        }
    }
}

impl Serialize for ColumnRef {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ColumnRef {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ComparisonOp {
    Eq,
    Neq,
    Lt,
    Leq,
    Gt,
    Geq,
    Like,
    NotLike,
    In,
    IsNull,
    IsNotNull,
}

impl ComparisonOp {
    pub const ALL: [ComparisonOp; 11] = [
        ComparisonOp::Eq,
        ComparisonOp::Neq,
        ComparisonOp::Lt,
        ComparisonOp::Leq,
        ComparisonOp::Gt,
        ComparisonOp::Geq,
        ComparisonOp::Like,
        ComparisonOp::NotLike,
        ComparisonOp::In,
        ComparisonOp::IsNull,
        ComparisonOp::IsNotNull,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ComparisonOp::Eq => "EQ",
            ComparisonOp::Neq => "NEQ",
            ComparisonOp::Lt => "LT",
            ComparisonOp::Leq => "LEQ",
            ComparisonOp::Gt => "GT",
            ComparisonOp::Geq => "GEQ",
            ComparisonOp::Like => "LIKE",
            ComparisonOp::NotLike => "NOT_LIKE",
            ComparisonOp::In => "IN",
            ComparisonOp::IsNull => "IS_NULL",
            ComparisonOp::IsNotNull => "IS_NOT_NULL",
        }
    }

    fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|op| op.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum BoolOp {
    And,
    Or,
}

impl BoolOp {
    pub fn name(self) -> &'static str {
        match self {
            BoolOp::And => "AND",
            BoolOp::Or => "OR",
        }
    }
}

/// Filter predicate structure; literals are reduced to `literal_feat`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PredicateWire", into = "PredicateWire")]
pub enum PredicateExpr {
    Bool {
        op: BoolOp,
        children: Vec<PredicateExpr>,
    },
    Comparison {
        column: ColumnRef,
        op: ComparisonOp,
        literal_feat: f64,
    },
}

impl PredicateExpr {
    pub fn and(children: Vec<PredicateExpr>) -> Self {
        PredicateExpr::Bool {
            op: BoolOp::And,
            children,
        }
    }

    pub fn or(children: Vec<PredicateExpr>) -> Self {
        PredicateExpr::Bool {
            op: BoolOp::Or,
            children,
        }
    }

    pub fn cmp(column: ColumnRef, op: ComparisonOp, literal_feat: f64) -> Self {
        PredicateExpr::Comparison {
            column,
            op,
            literal_feat,
        }
    }

    /// Number of nodes in the predicate tree (comparisons and boolean connectives).
    pub fn node_count(&self) -> usize {
        match self {
            PredicateExpr::Bool { children, .. } => {
                1 + children.iter().map(|c| c.node_count()).sum::<usize>()
            }
            PredicateExpr::Comparison { .. } => 1,
        }
    }

    pub fn columns(&self) -> Vec<&ColumnRef> {
        let mut out = Vec::new();
        self.collect_columns(&mut out);
        out
    }

    fn collect_columns<'a>(&'a self, out: &mut Vec<&'a ColumnRef>) {
        match self {
            PredicateExpr::Bool { children, .. } => {
                children.iter().for_each(|c| c.collect_columns(out))
            }
            PredicateExpr::Comparison { column, .. } => out.push(column),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct PredicateWire {
    op: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    column: Option<ColumnRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    literal_feat: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    children: Option<Vec<PredicateWire>>,
}

impl TryFrom<PredicateWire> for PredicateExpr {
    type Error = String;

    fn try_from(w: PredicateWire) -> Result<Self, String> {
        let bool_op = match w.op.as_str() {
            "AND" => Some(BoolOp::And),
            "OR" => Some(BoolOp::Or),
            _ => None,
        };
        if let Some(op) = bool_op {
            let children = w
                .children
                .ok_or_else(|| format!("{} predicate without children", w.op))?
                .into_iter()
                .map(PredicateExpr::try_from)
                .collect::<Result<Vec<_>, _>>()?;
            return Ok(PredicateExpr::Bool { op, children });
        }
        let op = ComparisonOp::from_name(&w.op)
            .ok_or_else(|| format!("unknown predicate operator `{}`", w.op))?;
        let column = w
            .column
            .ok_or_else(|| format!("{} comparison without column", w.op))?;
        let literal_feat = w.literal_feat.unwrap_or(match op {
            ComparisonOp::IsNull | ComparisonOp::IsNotNull => 0.0,
            _ => 1.0,
        });
        Ok(PredicateExpr::Comparison {
            column,
            op,
            literal_feat,
        })
    }
}

impl From<PredicateExpr> for PredicateWire {
    fn from(p: PredicateExpr) -> Self {
        match p {
            PredicateExpr::Bool { op, children } => PredicateWire {
                op: op.name().to_string(),
                column: None,
                literal_feat: None,
                children: Some(children.into_iter().map(PredicateWire::from).collect()),
            },
            PredicateExpr::Comparison {
                column,
                op,
                literal_feat,
            } => PredicateWire {
                op: op.name().to_string(),
                column: Some(column),
                literal_feat: Some(literal_feat),
                children: None,
            },
        }
    }
}

/// Closed physical-operator vocabulary. Unknown names map to `Other`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "String", into = "String")]
pub enum OpName {
    SeqScan,
    IndexScan,
    IndexOnlyScan,
    NestedLoopJoin,
    HashJoin,
    MergeJoin,
    Sort,
    HashAggregate,
    GroupAggregate,
    Materialize,
    ShuffleBroadcast,
    ShufflePartition,
    Gather,
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arity {
    Leaf,
    Unary,
    Binary,
    Any,
}

impl OpName {
    pub const ALL: [OpName; 14] = [
        OpName::SeqScan,
        OpName::IndexScan,
        OpName::IndexOnlyScan,
        OpName::NestedLoopJoin,
        OpName::HashJoin,
        OpName::MergeJoin,
        OpName::Sort,
        OpName::HashAggregate,
        OpName::GroupAggregate,
        OpName::Materialize,
        OpName::ShuffleBroadcast,
        OpName::ShufflePartition,
        OpName::Gather,
        OpName::Other,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpName::SeqScan => "SeqScan",
            OpName::IndexScan => "IndexScan",
            OpName::IndexOnlyScan => "IndexOnlyScan",
            OpName::NestedLoopJoin => "NestedLoopJoin",
            OpName::HashJoin => "HashJoin",
            OpName::MergeJoin => "MergeJoin",
            OpName::Sort => "Sort",
            OpName::HashAggregate => "HashAggregate",
            OpName::GroupAggregate => "GroupAggregate",
            OpName::Materialize => "Materialize",
            OpName::ShuffleBroadcast => "ShuffleBroadcast",
            OpName::ShufflePartition => "ShufflePartition",
            OpName::Gather => "Gather",
            OpName::Other => "Other",
        }
    }

    /// Exact vocabulary lookup, without the `Other` fallback.
    pub fn lookup(s: &str) -> Option<OpName> {
        Self::ALL.into_iter().find(|op| op.name() == s)
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_scan(self) -> bool {
        matches!(
            self,
            OpName::SeqScan | OpName::IndexScan | OpName::IndexOnlyScan
        )
    }

    pub fn is_join(self) -> bool {
        matches!(
            self,
            OpName::NestedLoopJoin | OpName::HashJoin | OpName::MergeJoin
        )
    }

    pub fn arity(self) -> Arity {
        if self.is_scan() {
            Arity::Leaf
        } else if self.is_join() {
            Arity::Binary
        } else if self == OpName::Other {
            Arity::Any
        } else {
            Arity::Unary
        }
    }
}

impl From<String> for OpName {
    fn from(s: String) -> Self {
        OpName::lookup(&s).unwrap_or_else(|| {
            warn!("unknown operator `{s}` mapped to Other");
            OpName::Other
        })
    }
}

impl From<OpName> for String {
    fn from(op: OpName) -> Self {
        op.name().to_string()
    }
}

impl fmt::Display for OpName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum Aggregation {
    #[default]
    None,
    #[serde(rename = "SUM")]
    Sum,
    #[serde(rename = "AVG")]
    Avg,
    #[serde(rename = "COUNT")]
    Count,
    #[serde(rename = "MIN")]
    Min,
    #[serde(rename = "MAX")]
    Max,
}

impl Aggregation {
    pub const ALL: [Aggregation; 6] = [
        Aggregation::None,
        Aggregation::Sum,
        Aggregation::Avg,
        Aggregation::Count,
        Aggregation::Min,
        Aggregation::Max,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Aggregation::None => "None",
            Aggregation::Sum => "SUM",
            Aggregation::Avg => "AVG",
            Aggregation::Count => "COUNT",
            Aggregation::Min => "MIN",
            Aggregation::Max => "MAX",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputColumn {
    #[serde(default)]
    pub aggregation: Aggregation,
    #[serde(default)]
    pub columns: Vec<ColumnRef>,
}

/// Which cardinality annotation feeds the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CardSource {
    Actual,
    Estimated,
}

impl FromStr for CardSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "actual" => Ok(CardSource::Actual),
            "estimated" => Ok(CardSource::Estimated),
            _ => Err(format!(
                "unknown cardinality source `{s}` (expected actual|estimated)"
            )),
        }
    }
}

impl fmt::Display for CardSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CardSource::Actual => "actual",
            CardSource::Estimated => "estimated",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanOperator {
    pub opname: OpName,
    pub act_card_out: f64,
    pub est_card_out: f64,
    pub width: f64,
    pub workers: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filter: Option<PredicateExpr>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_columns: Option<Vec<OutputColumn>>,
    #[serde(default)]
    pub children: Vec<PlanOperator>,
}

impl PlanOperator {
    pub fn card(&self, source: CardSource) -> f64 {
        match source {
            CardSource::Actual => self.act_card_out,
            CardSource::Estimated => self.est_card_out,
        }
    }

    /// Pre-order traversal of the operator tree.
    pub fn iter(&self) -> impl Iterator<Item = &PlanOperator> {
        let mut stack = vec![self];
        std::iter::from_fn(move || {
            let op = stack.pop()?;
            stack.extend(op.children.iter().rev());
            Some(op)
        })
    }

    pub fn num_joins(&self) -> usize {
        self.iter().filter(|op| op.opname.is_join()).count()
    }

    /// Every column referenced by a filter or an output column in this subtree.
    pub fn referenced_columns(&self) -> BTreeSet<ColumnRef> {
        let mut out = BTreeSet::new();
        for op in self.iter() {
            if let Some(f) = &op.filter {
                out.extend(f.columns().into_iter().cloned());
            }
            for oc in op.output_columns.iter().flatten() {
                out.extend(oc.columns.iter().cloned());
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanSample {
    pub database_id: String,
    pub sample_id: String,
    /// Measured runtime in seconds. Absent only in unlabeled prediction input.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub runtime_s: Option<f64>,
    #[serde(rename = "plan")]
    pub root: PlanOperator,
}

impl PlanSample {
    pub fn runtime(&self) -> Result<f64> {
        match self.runtime_s {
            Some(r) if r > 0.0 && r.is_finite() => Ok(r),
            Some(_) => Err(Error::validation("runtime_s", "runtime_s must be > 0")),
            None => Err(Error::validation(
                "runtime_s",
                format!("sample `{}` has no runtime", self.sample_id),
            )),
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("sample serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, path: &str, message: impl Into<String>) {
        self.violations.push(Violation {
            path: path.to_string(),
            message: message.into(),
        });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.violations.iter().map(|v| v.to_string()).collect();
        f.write_str(&parts.join("; "))
    }
}

/// Checks a sample against every plan invariant. Violations are returned as
/// data; the function never fails.
pub fn validate_sample(sample: &PlanSample, catalog: &DatabaseCatalog) -> ValidationReport {
    let mut report = ValidationReport::default();
    if sample.database_id != catalog.database_id {
        report.push(
            "database_id",
            format!(
                "sample database `{}` does not match catalog `{}`",
                sample.database_id, catalog.database_id
            ),
        );
    }
    if let Some(r) = sample.runtime_s {
        if !(r > 0.0 && r.is_finite()) {
            report.push("runtime_s", "runtime_s must be > 0");
        }
    }
    validate_operator(&sample.root, catalog, "plan", &mut report);
    report
}

/// Returns the set of tables scanned in the subtree.
fn validate_operator<'a>(
    op: &'a PlanOperator,
    catalog: &DatabaseCatalog,
    path: &str,
    report: &mut ValidationReport,
) -> BTreeSet<&'a str> {
    let mut scanned = BTreeSet::new();
    for (i, child) in op.children.iter().enumerate() {
        scanned.extend(validate_operator(
            child,
            catalog,
            &format!("{path}.children[{i}]"),
            report,
        ));
    }

    for (name, v) in [
        ("act_card_out", op.act_card_out),
        ("est_card_out", op.est_card_out),
    ] {
        if !(v >= 0.0 && v.is_finite()) {
            report.push(
                &format!("{path}.{name}"),
                format!("{name} must be a finite value >= 0"),
            );
        }
    }
    if !(op.width >= 0.0 && op.width.is_finite()) {
        report.push(&format!("{path}.width"), "width must be >= 0");
    }
    if op.workers < 1 {
        report.push(&format!("{path}.workers"), "workers must be >= 1");
    }

    let n = op.children.len();
    match op.opname.arity() {
        Arity::Leaf if n != 0 => report.push(
            path,
            format!("scan arity: {} expects 0 children, found {n}", op.opname),
        ),
        Arity::Binary if n != 2 => report.push(
            path,
            format!("join arity: {} expects 2 children, found {n}", op.opname),
        ),
        Arity::Unary if n != 1 => report.push(
            path,
            format!("unary arity: {} expects 1 child, found {n}", op.opname),
        ),
        _ => {}
    }

    match (&op.table, op.opname.is_scan()) {
        (Some(t), true) => {
            if catalog.table(t).is_some() {
                scanned.insert(t.as_str());
            } else {
                report.push(
                    &format!("{path}.table"),
                    format!("table `{t}` not in catalog"),
                );
            }
        }
        (None, true) => report.push(
            &format!("{path}.table"),
            format!("{} without table reference", op.opname),
        ),
        (Some(_), false) => report.push(
            &format!("{path}.table"),
            format!("{} is not a scan but references a table", op.opname),
        ),
        (None, false) => {}
    }

    let check_column = |col: &ColumnRef, where_: &str, report: &mut ValidationReport| {
        if catalog.column(col).is_none() {
            report.push(where_, format!("column `{col}` not in catalog"));
        } else if !scanned.contains(col.table.as_str()) {
            if op.opname.is_scan() {
                report.push(
                    where_,
                    format!(
                        "column `{col}` does not belong to scanned table `{}`",
                        op.table.as_deref().unwrap_or("?")
                    ),
                );
            } else {
                report.push(
                    where_,
                    format!("column `{col}` refers to a table not scanned below this operator"),
                );
            }
        }
    };

    if let Some(f) = &op.filter {
        validate_predicate(f, &format!("{path}.filter"), &check_column, report);
    }
    for (i, oc) in op.output_columns.iter().flatten().enumerate() {
        let p = format!("{path}.output_columns[{i}]");
        if oc.columns.is_empty() && oc.aggregation != Aggregation::Count {
            report.push(
                &p,
                format!("{} output without columns", oc.aggregation.name()),
            );
        }
        for col in &oc.columns {
            check_column(col, &p, report);
        }
    }
    scanned
}

fn validate_predicate(
    pred: &PredicateExpr,
    path: &str,
    check_column: &dyn Fn(&ColumnRef, &str, &mut ValidationReport),
    report: &mut ValidationReport,
) {
    match pred {
        PredicateExpr::Bool { op, children } => {
            if children.len() < 2 {
                report.push(
                    path,
                    format!(
                        "{} needs at least 2 children, found {}",
                        op.name(),
                        children.len()
                    ),
                );
            }
            for (i, c) in children.iter().enumerate() {
                validate_predicate(c, &format!("{path}.children[{i}]"), check_column, report);
            }
        }
        PredicateExpr::Comparison {
            column,
            op,
            literal_feat,
        } => {
            check_column(column, path, report);
            let lf = *literal_feat;
            if !(lf >= 0.0 && lf.is_finite()) {
                report.push(path, "literal_feat must be >= 0");
            } else {
                match op {
                    ComparisonOp::IsNull | ComparisonOp::IsNotNull if lf != 0.0 => {
                        report.push(path, format!("literal_feat must be 0 for {}", op.name()))
                    }
                    ComparisonOp::In if lf < 1.0 => {
                        report.push(path, "literal_feat must be >= 1 for IN")
                    }
                    _ => {}
                }
            }
        }
    }
}

/// A rejected trace line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineError {
    /// 1-based line number.
    pub line: usize,
    pub message: String,
}

impl fmt::Display for LineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

#[derive(Debug, Clone, Default)]
pub struct TraceParse {
    pub samples: Vec<PlanSample>,
    pub errors: Vec<LineError>,
}

/// Whether trace records must carry a runtime label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Labels {
    Required,
    Optional,
}

/// Parses a labeled JSON Lines trace. Each bad line is rejected on its own
/// and reported with its line number; the remaining lines are unaffected.
pub fn parse_trace<R: BufRead>(
    reader: R,
    catalogs: &BTreeMap<String, DatabaseCatalog>,
) -> Result<TraceParse> {
    parse_trace_with(reader, catalogs, Labels::Required)
}

pub fn parse_trace_with<R: BufRead>(
    reader: R,
    catalogs: &BTreeMap<String, DatabaseCatalog>,
    labels: Labels,
) -> Result<TraceParse> {
    let mut out = TraceParse::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<trace>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_record(&line, catalogs, labels) {
            Ok(s) => out.samples.push(s),
            Err(message) => out.errors.push(LineError {
                line: i + 1,
                message,
            }),
        }
    }
    Ok(out)
}

pub fn parse_record(
    line: &str,
    catalogs: &BTreeMap<String, DatabaseCatalog>,
    labels: Labels,
) -> Result<PlanSample, String> {
    let sample: PlanSample = deserialize_warn(line, "trace").map_err(|e| e.to_string())?;
    let catalog = catalogs
        .get(&sample.database_id)
        .ok_or_else(|| format!("unknown database_id `{}`", sample.database_id))?;
    match sample.runtime_s {
        None if labels == Labels::Required => return Err("missing runtime_s".into()),
        Some(r) if !(r > 0.0 && r.is_finite()) => {
            return Err(format!("runtime_s must be > 0, got {r}"))
        }
        _ => {}
    }
    let report = validate_sample(&sample, catalog);
    if report.is_empty() {
        Ok(sample)
    } else {
        Err(report.to_string())
    }
}

/// Catalogs plus validated samples; the training data of all databases.
#[derive(Debug, Clone, Default)]
pub struct TraceCorpus {
    pub catalogs: BTreeMap<String, DatabaseCatalog>,
    pub samples: Vec<PlanSample>,
}

impl TraceCorpus {
    pub fn new(
        catalogs: BTreeMap<String, DatabaseCatalog>,
        samples: Vec<PlanSample>,
    ) -> Result<Self> {
        for s in &samples {
            let cat = catalogs.get(&s.database_id).ok_or_else(|| {
                Error::validation(
                    "database_id",
                    format!("unknown database_id `{}`", s.database_id),
                )
            })?;
            let report = validate_sample(s, cat);
            if !report.is_empty() {
                return Err(Error::validation(
                    format!("sample {}", s.sample_id),
                    report.to_string(),
                ));
            }
        }
        Ok(TraceCorpus { catalogs, samples })
    }

    /// Loads a trace file and a catalog directory. Lines that fail
    /// validation are logged and skipped.
    pub fn load(
        trace: &Path,
        catalog_dir: &Path,
        labels: Labels,
    ) -> Result<(Self, Vec<LineError>)> {
        let catalogs = load_catalog_dir(catalog_dir)?;
        let file = std::fs::File::open(trace).map_err(|e| Error::io(trace, e))?;
        let parsed = parse_trace_with(std::io::BufReader::new(file), &catalogs, labels)?;
        for e in &parsed.errors {
            warn!("{}: {e}", trace.display());
        }
        Ok((
            TraceCorpus {
                catalogs,
                samples: parsed.samples,
            },
            parsed.errors,
        ))
    }

    pub fn catalog(&self, database_id: &str) -> Result<&DatabaseCatalog> {
        self.catalogs.get(database_id).ok_or_else(|| {
            Error::validation(
                "database_id",
                format!("unknown database_id `{database_id}`"),
            )
        })
    }

    /// Database ids that have at least one sample, sorted.
    pub fn database_ids(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self
            .samples
            .iter()
            .map(|s| s.database_id.as_str())
            .collect();
        set.into_iter().map(str::to_string).collect()
    }

    pub fn by_database(&self) -> BTreeMap<&str, Vec<&PlanSample>> {
        let mut out: BTreeMap<&str, Vec<&PlanSample>> = BTreeMap::new();
        for s in &self.samples {
            out.entry(s.database_id.as_str()).or_default().push(s);
        }
        out
    }

    /// Corpus restricted to samples accepted by `keep`; catalogs are shared.
    pub fn filtered(&self, mut keep: impl FnMut(&PlanSample) -> bool) -> TraceCorpus {
        TraceCorpus {
            catalogs: self.catalogs.clone(),
            samples: self.samples.iter().filter(|s| keep(s)).cloned().collect(),
        }
    }

    pub fn restricted_to(&self, databases: &[String]) -> TraceCorpus {
        self.filtered(|s| databases.iter().any(|d| *d == s.database_id))
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}
