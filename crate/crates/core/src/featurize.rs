//! Query-graph construction and transferable node features.
//!
//! A plan becomes a DAG whose edges point from child to parent:
//!
//! * one `PlanOp` node per operator, child operator -> parent operator;
//! * per scanned table one `Table` node -> the scan. Row-format tables get
//!   an `Attribute` node for every column, column-format tables only for
//!   the columns the query references. Attribute -> table.
//! * each filter becomes `Predicate` nodes (comparisons and `AND`/`OR`
//!   connectives); the referenced attribute -> comparison, child
//!   predicate -> parent predicate, predicate root -> operator;
//! * each output column becomes an `OutputColumn` node with its attributes
//!   feeding it and an edge to the operator that carries it.
//!
//! Table and attribute nodes are shared within a query, so an attribute
//! can feed several consumers. Nodes are numbered in one pre-order walk of
//! the operator tree. At each operator the order is: the operator, then
//! (scans only) the table node and its attached attributes in catalog
//! column order, then the filter's predicate nodes in pre-order, then the
//! output columns. An attribute first referenced before its table's scan
//! is visited gets its number at that first reference.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{
    validate_sample, Aggregation, CardSource, ColumnRef, ComparisonOp, DataType, DatabaseCatalog,
    OpName, PlanOperator, PlanSample, PredicateExpr, StorageFormat,
};

pub const STD_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NodeType {
    PlanOp,
    Table,
    Attribute,
    Predicate,
    OutputColumn,
}

impl NodeType {
    pub const ALL: [NodeType; 5] = [
        NodeType::PlanOp,
        NodeType::Table,
        NodeType::Attribute,
        NodeType::Predicate,
        NodeType::OutputColumn,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            NodeType::PlanOp => "PlanOp",
            NodeType::Table => "Table",
            NodeType::Attribute => "Attribute",
            NodeType::Predicate => "Predicate",
            NodeType::OutputColumn => "OutputColumn",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transform {
    Log1p,
    Identity,
}

impl Transform {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Transform::Log1p => v.ln_1p(),
            Transform::Identity => v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NumericSlot {
    pub name: String,
    pub transform: Transform,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoricalSlot {
    pub name: String,
    pub vocabulary: Vec<String>,
    /// Index used for values outside the vocabulary.
    pub fallback: usize,
}

impl CategoricalSlot {
    fn new(name: &str, vocabulary: Vec<&str>, fallback: &str) -> Self {
        let fallback = vocabulary
            .iter()
            .position(|v| *v == fallback)
            .expect("fallback in vocabulary");
        CategoricalSlot {
            name: name.to_string(),
            vocabulary: vocabulary.into_iter().map(str::to_string).collect(),
            fallback,
        }
    }

    pub fn index_of(&self, value: &str) -> usize {
        self.vocabulary
            .iter()
            .position(|v| v == value)
            .unwrap_or_else(|| {
                warn!(
                    "category `{value}` not in `{}` vocabulary, using `{}`",
                    self.name, self.vocabulary[self.fallback]
                );
                self.fallback
            })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeFeatureSpec {
    pub node_type: NodeType,
    pub numeric: Vec<NumericSlot>,
    pub categorical: Vec<CategoricalSlot>,
}

impl NodeFeatureSpec {
    pub fn dim(&self) -> usize {
        self.numeric.len()
            + self
                .categorical
                .iter()
                .map(|c| c.vocabulary.len())
                .sum::<usize>()
    }
}

/// Ordered feature slots per node type.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub node_types: Vec<NodeFeatureSpec>,
}

pub const PREDICATE_OTHER: &str = "OTHER";

fn num(name: &str, transform: Transform) -> NumericSlot {
    NumericSlot {
        name: name.to_string(),
        transform,
    }
}

impl FeatureSpec {
    /// The transferable feature set: cardinalities, sizes and counts go
    /// through `log1p`; correlations, fractions and worker counts stay as is.
    pub fn standard() -> Self {
        use Transform::*;
        let mut predicate_ops: Vec<&str> = ComparisonOp::ALL.iter().map(|o| o.name()).collect();
        predicate_ops.extend(["AND", "OR", PREDICATE_OTHER]);
        FeatureSpec {
            node_types: vec![
                NodeFeatureSpec {
                    node_type: NodeType::PlanOp,
                    numeric: vec![
                        num("card_out", Log1p),
                        num("width", Log1p),
                        num("workers", Identity),
                        num("card_prod", Log1p),
                    ],
                    categorical: vec![CategoricalSlot::new(
                        "opname",
                        OpName::ALL.iter().map(|o| o.name()).collect(),
                        "Other",
                    )],
                },
                NodeFeatureSpec {
                    node_type: NodeType::Table,
                    numeric: vec![num("relpages", Log1p), num("reltuples", Log1p)],
                    categorical: vec![CategoricalSlot::new(
                        "storage_format",
                        StorageFormat::ALL.iter().map(|s| s.name()).collect(),
                        "row",
                    )],
                },
                NodeFeatureSpec {
                    node_type: NodeType::Attribute,
                    numeric: vec![
                        num("width", Log1p),
                        num("correlation", Identity),
                        num("ndistinct", Log1p),
                        num("null_frac", Identity),
                    ],
                    categorical: vec![CategoricalSlot::new(
                        "data_type",
                        DataType::ALL.iter().map(|d| d.name()).collect(),
                        "misc",
                    )],
                },
                NodeFeatureSpec {
                    node_type: NodeType::Predicate,
                    numeric: vec![num("literal_feat", Log1p)],
                    categorical: vec![CategoricalSlot::new(
                        "operator",
                        predicate_ops,
                        PREDICATE_OTHER,
                    )],
                },
                NodeFeatureSpec {
                    node_type: NodeType::OutputColumn,
                    numeric: vec![],
                    categorical: vec![CategoricalSlot::new(
                        "aggregation",
                        Aggregation::ALL.iter().map(|a| a.name()).collect(),
                        "None",
                    )],
                },
            ],
        }
    }

    pub fn get(&self, t: NodeType) -> &NodeFeatureSpec {
        &self.node_types[t.index()]
    }

    pub fn dim(&self, t: NodeType) -> usize {
        self.get(t).dim()
    }

    pub fn check(&self) -> Result<()> {
        if self.node_types.len() != NodeType::ALL.len()
            || self
                .node_types
                .iter()
                .zip(NodeType::ALL)
                .any(|(s, t)| s.node_type != t)
        {
            return Err(Error::SpecMismatch(
                "feature spec must list every node type in order".into(),
            ));
        }
        Ok(())
    }
}

/// Unencoded node description: raw numeric values in slot order and
/// category names in slot order.
#[derive(Debug, Clone, PartialEq)]
pub struct RawNode {
    pub node_type: NodeType,
    pub numeric: Vec<f64>,
    pub categorical: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlotStats {
    pub mean: f64,
    pub std: f64,
}

/// Mean and (population) standard deviation per numeric slot of the
/// transformed values, fitted on a training corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureNormalizer {
    pub node_types: Vec<Vec<SlotStats>>,
}

impl FeatureNormalizer {
    pub fn stats(&self, t: NodeType) -> &[SlotStats] {
        &self.node_types[t.index()]
    }

    pub fn check(&self, spec: &FeatureSpec) -> Result<()> {
        for t in NodeType::ALL {
            let have = self.node_types.get(t.index()).map_or(0, Vec::len);
            let want = spec.get(t).numeric.len();
            if have != want {
                return Err(Error::Dimension {
                    context: "normalizer slots",
                    expected: want,
                    actual: have,
                });
            }
        }
        Ok(())
    }

    /// Fits from raw nodes. Slots of node types that never occur get
    /// mean 0 and std 1.
    pub fn fit_raw<'a>(
        nodes: impl IntoIterator<Item = &'a RawNode>,
        spec: &FeatureSpec,
    ) -> Result<Self> {
        let mut sums: Vec<Vec<Vec<f64>>> = NodeType::ALL
            .iter()
            .map(|t| vec![Vec::new(); spec.get(*t).numeric.len()])
            .collect();
        let mut any = false;
        for n in nodes {
            any = true;
            let slots = &spec.get(n.node_type).numeric;
            if n.numeric.len() != slots.len() {
                return Err(Error::Dimension {
                    context: "raw numeric features",
                    expected: slots.len(),
                    actual: n.numeric.len(),
                });
            }
            for (i, (slot, v)) in slots.iter().zip(&n.numeric).enumerate() {
                sums[n.node_type.index()][i].push(slot.transform.apply(*v));
            }
        }
        if !any {
            return Err(Error::InsufficientData(
                "cannot fit a normalizer on an empty corpus".into(),
            ));
        }
        let node_types = sums
            .into_iter()
            .map(|slots| {
                slots
                    .into_iter()
                    .map(|values| {
                        if values.is_empty() {
                            return SlotStats {
                                mean: 0.0,
                                std: 1.0,
                            };
                        }
                        let n = values.len() as f64;
                        let mean = values.iter().sum::<f64>() / n;
                        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                        SlotStats {
                            mean,
                            std: var.sqrt().max(STD_FLOOR),
                        }
                    })
                    .collect()
            })
            .collect();
        Ok(FeatureNormalizer { node_types })
    }
}

/// Standardized numeric slots followed by the one-hot blocks, in spec order.
pub fn encode_node(
    raw: &RawNode,
    spec: &FeatureSpec,
    norm: &FeatureNormalizer,
) -> Result<Vec<f64>> {
    let ns = spec.get(raw.node_type);
    let stats = norm.stats(raw.node_type);
    if raw.numeric.len() != ns.numeric.len() || stats.len() != ns.numeric.len() {
        return Err(Error::Dimension {
            context: "numeric slots",
            expected: ns.numeric.len(),
            actual: raw.numeric.len().min(stats.len()),
        });
    }
    if raw.categorical.len() != ns.categorical.len() {
        return Err(Error::Dimension {
            context: "categorical slots",
            expected: ns.categorical.len(),
            actual: raw.categorical.len(),
        });
    }
    let mut out = Vec::with_capacity(ns.dim());
    for ((slot, st), v) in ns.numeric.iter().zip(stats).zip(&raw.numeric) {
        out.push((slot.transform.apply(*v) - st.mean) / st.std);
    }
    for (slot, value) in ns.categorical.iter().zip(&raw.categorical) {
        let start = out.len();
        out.resize(start + slot.vocabulary.len(), 0.0);
        out[start + slot.index_of(value)] = 1.0;
    }
    Ok(out)
}

/// Graph topology plus unencoded nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct RawGraph {
    pub nodes: Vec<RawNode>,
    /// (child, parent)
    pub edges: Vec<(usize, usize)>,
    pub root: usize,
}

impl RawGraph {
    pub fn encode(&self, spec: &FeatureSpec, norm: &FeatureNormalizer) -> Result<QueryGraph> {
        let nodes = self
            .nodes
            .iter()
            .enumerate()
            .map(|(id, raw)| {
                Ok(GraphNode {
                    node_id: id,
                    node_type: raw.node_type,
                    features: encode_node(raw, spec, norm)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        QueryGraph::new(nodes, self.edges.clone(), self.root)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphNode {
    pub node_id: usize,
    pub node_type: NodeType,
    pub features: Vec<f64>,
}

/// Validated, featurized plan graph. Edges point from child to parent.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryGraph {
    nodes: Vec<GraphNode>,
    edges: Vec<(usize, usize)>,
    root: usize,
    children: Vec<Vec<usize>>,
    topo: Vec<usize>,
}

impl QueryGraph {
    /// Checks the structural invariants: valid endpoints, a `PlanOp` root
    /// without outgoing edges, every other node with at least one outgoing
    /// edge, no cycles, every node reaching the root, and no auxiliary node
    /// above a plan operator.
    pub fn new(nodes: Vec<GraphNode>, edges: Vec<(usize, usize)>, root: usize) -> Result<Self> {
        let n = nodes.len();
        if root >= n {
            return Err(Error::Graph(format!("root {root} out of range")));
        }
        if nodes[root].node_type != NodeType::PlanOp {
            return Err(Error::Graph("root is not a plan operator".into()));
        }
        for (i, node) in nodes.iter().enumerate() {
            if node.node_id != i {
                return Err(Error::Graph(format!(
                    "node at position {i} has id {}",
                    node.node_id
                )));
            }
        }
        let mut children = vec![Vec::new(); n];
        let mut out_degree = vec![0usize; n];
        for &(c, p) in &edges {
            if c >= n || p >= n || c == p {
                return Err(Error::Graph(format!("invalid edge {c} -> {p}")));
            }
            if nodes[c].node_type == NodeType::PlanOp && nodes[p].node_type != NodeType::PlanOp {
                return Err(Error::Graph(format!(
                    "plan operator {c} feeds {} node {p}",
                    nodes[p].node_type.name()
                )));
            }
            children[p].push(c);
            out_degree[c] += 1;
        }
        for list in &mut children {
            list.sort_unstable();
            list.dedup();
        }
        if out_degree[root] != 0 {
            return Err(Error::Graph("root has an outgoing edge".into()));
        }
        if let Some(v) = (0..n).find(|&v| v != root && out_degree[v] == 0) {
            return Err(Error::Graph(format!("node {v} has no outgoing edge")));
        }

        // Post-order DFS from the root over children in ascending id order.
        const WHITE: u8 = 0;
        const GREY: u8 = 1;
        const BLACK: u8 = 2;
        let mut color = vec![WHITE; n];
        let mut topo = Vec::with_capacity(n);
        let mut stack: Vec<(usize, usize)> = vec![(root, 0)];
        color[root] = GREY;
        while let Some(&mut (v, ref mut next)) = stack.last_mut() {
            if let Some(&c) = children[v].get(*next) {
                *next += 1;
                match color[c] {
                    WHITE => {
                        color[c] = GREY;
                        stack.push((c, 0));
                    }
                    GREY => return Err(Error::Graph(format!("cycle through node {c}"))),
                    _ => {}
                }
            } else {
                color[v] = BLACK;
                topo.push(v);
                stack.pop();
            }
        }
        if topo.len() != n {
            let v = (0..n).find(|&v| color[v] == WHITE).unwrap_or(0);
            return Err(Error::Graph(format!("node {v} does not reach the root")));
        }
        Ok(QueryGraph {
            nodes,
            edges,
            root,
            children,
            topo,
        })
    }

    pub fn nodes(&self) -> &[GraphNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Children of `v` in ascending node id order.
    pub fn children(&self, v: usize) -> &[usize] {
        &self.children[v]
    }

    /// Children before parents; the root is last.
    pub fn topological_order(&self) -> &[usize] {
        &self.topo
    }

    /// Descendants of `v` (including `v`).
    pub fn subtree(&self, v: usize) -> BTreeSet<usize> {
        let mut seen = BTreeSet::new();
        let mut stack = vec![v];
        while let Some(u) = stack.pop() {
            if seen.insert(u) {
                stack.extend(&self.children[u]);
            }
        }
        seen
    }

    pub fn count(&self, t: NodeType) -> usize {
        self.nodes.iter().filter(|n| n.node_type == t).count()
    }

    /// Renumbers nodes: `perm[old] = new`.
    pub fn renumbered(&self, perm: &[usize]) -> Result<QueryGraph> {
        if perm.len() != self.nodes.len() {
            return Err(Error::Dimension {
                context: "permutation",
                expected: self.nodes.len(),
                actual: perm.len(),
            });
        }
        let mut nodes: Vec<Option<GraphNode>> = vec![None; self.nodes.len()];
        for (old, node) in self.nodes.iter().enumerate() {
            let new = perm[old];
            if new >= nodes.len() || nodes[new].is_some() {
                return Err(Error::InvalidArgument("not a permutation".into()));
            }
            nodes[new] = Some(GraphNode {
                node_id: new,
                ..node.clone()
            });
        }
        let nodes = nodes.into_iter().map(|n| n.expect("filled")).collect();
        let edges = self
            .edges
            .iter()
            .map(|&(c, p)| (perm[c], perm[p]))
            .collect();
        QueryGraph::new(nodes, edges, perm[self.root])
    }

    /// Stable text rendering: root, one line per node with its features,
    /// one line per edge.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "root {}", self.root);
        for n in &self.nodes {
            let feats: Vec<String> = n.features.iter().map(|f| format!("{f:.6}")).collect();
            let _ = writeln!(
                out,
                "node {} {} [{}]",
                n.node_id,
                n.node_type.name(),
                feats.join(", ")
            );
        }
        let mut edges = self.edges.clone();
        edges.sort_unstable_by_key(|&(c, p)| (p, c));
        edges.dedup();
        for (c, p) in edges {
            let _ = writeln!(out, "edge {c} -> {p}");
        }
        out
    }
}

struct GraphBuilder<'a> {
    catalog: &'a DatabaseCatalog,
    source: CardSource,
    referenced: BTreeSet<ColumnRef>,
    nodes: Vec<RawNode>,
    edges: Vec<(usize, usize)>,
    tables: HashMap<String, usize>,
    attributes: HashMap<ColumnRef, usize>,
}

impl<'a> GraphBuilder<'a> {
    fn add(&mut self, node: RawNode) -> usize {
        self.nodes.push(node);
        self.nodes.len() - 1
    }

    fn attribute(&mut self, col: &ColumnRef) -> Result<usize> {
        if let Some(&id) = self.attributes.get(col) {
            return Ok(id);
        }
        let stats = self
            .catalog
            .column(col)
            .ok_or_else(|| Error::validation("column", format!("column `{col}` not in catalog")))?;
        let id = self.add(RawNode {
            node_type: NodeType::Attribute,
            numeric: vec![
                stats.width,
                stats.correlation,
                stats.ndistinct,
                stats.null_frac,
            ],
            categorical: vec![stats.data_type.name().to_string()],
        });
        self.attributes.insert(col.clone(), id);
        Ok(id)
    }

    fn table(&mut self, name: &str) -> Result<usize> {
        if let Some(&id) = self.tables.get(name) {
            return Ok(id);
        }
        let stats = self
            .catalog
            .table(name)
            .ok_or_else(|| Error::validation("table", format!("table `{name}` not in catalog")))?;
        let id = self.add(RawNode {
            node_type: NodeType::Table,
            numeric: vec![stats.relpages, stats.reltuples],
            categorical: vec![stats.storage_format.name().to_string()],
        });
        self.tables.insert(name.to_string(), id);
        let attached: Vec<ColumnRef> = stats
            .columns
            .iter()
            .map(|c| ColumnRef::new(name, &c.name))
            .filter(|c| stats.storage_format == StorageFormat::Row || self.referenced.contains(c))
            .collect();
        for col in attached {
            let a = self.attribute(&col)?;
            self.edges.push((a, id));
        }
        Ok(id)
    }

    fn predicate(&mut self, pred: &PredicateExpr) -> Result<usize> {
        match pred {
            PredicateExpr::Bool { op, children } => {
                let id = self.add(RawNode {
                    node_type: NodeType::Predicate,
                    numeric: vec![0.0],
                    categorical: vec![op.name().to_string()],
                });
                for c in children {
                    let cid = self.predicate(c)?;
                    self.edges.push((cid, id));
                }
                Ok(id)
            }
            PredicateExpr::Comparison {
                column,
                op,
                literal_feat,
            } => {
                let id = self.add(RawNode {
                    node_type: NodeType::Predicate,
                    numeric: vec![*literal_feat],
                    categorical: vec![op.name().to_string()],
                });
                let a = self.attribute(column)?;
                self.edges.push((a, id));
                Ok(id)
            }
        }
    }

    fn operator(&mut self, op: &PlanOperator) -> Result<usize> {
        let card_prod = if op.children.is_empty() {
            1.0
        } else {
            op.children.iter().map(|c| c.card(self.source)).product()
        };
        let id = self.add(RawNode {
            node_type: NodeType::PlanOp,
            numeric: vec![op.card(self.source), op.width, op.workers as f64, card_prod],
            categorical: vec![op.opname.name().to_string()],
        });
        if op.opname.is_scan() {
            if let Some(t) = &op.table {
                let tid = self.table(t)?;
                self.edges.push((tid, id));
            }
        }
        if let Some(f) = &op.filter {
            let pid = self.predicate(f)?;
            self.edges.push((pid, id));
        }
        for oc in op.output_columns.iter().flatten() {
            let oid = self.add(RawNode {
                node_type: NodeType::OutputColumn,
                numeric: vec![],
                categorical: vec![oc.aggregation.name().to_string()],
            });
            for col in &oc.columns {
                let a = self.attribute(col)?;
                self.edges.push((a, oid));
            }
            self.edges.push((oid, id));
        }
        for child in &op.children {
            let cid = self.operator(child)?;
            self.edges.push((cid, id));
        }
        Ok(id)
    }
}

/// Builds the unencoded graph of a sample. The sample must validate
/// against the catalog.
pub fn build_raw_graph(
    sample: &PlanSample,
    catalog: &DatabaseCatalog,
    source: CardSource,
) -> Result<RawGraph> {
    let report = validate_sample(sample, catalog);
    if !report.is_empty() {
        return Err(Error::validation(
            format!("sample {}", sample.sample_id),
            report.to_string(),
        ));
    }
    let mut b = GraphBuilder {
        catalog,
        source,
        referenced: sample.root.referenced_columns(),
        nodes: Vec::new(),
        edges: Vec::new(),
        tables: HashMap::new(),
        attributes: HashMap::new(),
    };
    let root = b.operator(&sample.root)?;
    let mut edges = b.edges;
    let mut seen = BTreeSet::new();
    edges.retain(|e| seen.insert(*e));
    Ok(RawGraph {
        nodes: b.nodes,
        edges,
        root,
    })
}

pub fn build_query_graph(
    sample: &PlanSample,
    catalog: &DatabaseCatalog,
    source: CardSource,
    spec: &FeatureSpec,
    norm: &FeatureNormalizer,
) -> Result<QueryGraph> {
    norm.check(spec)?;
    build_raw_graph(sample, catalog, source)?.encode(spec, norm)
}

/// Fits the normalizer over every node of every sample's graph.
pub fn fit_normalizer<'a>(
    corpus: impl IntoIterator<Item = (&'a PlanSample, &'a DatabaseCatalog, CardSource)>,
    spec: &FeatureSpec,
) -> Result<FeatureNormalizer> {
    let mut raw = Vec::new();
    for (sample, catalog, source) in corpus {
        raw.push(build_raw_graph(sample, catalog, source)?);
    }
    FeatureNormalizer::fit_raw(raw.iter().flat_map(|g| g.nodes.iter()), spec)
}
