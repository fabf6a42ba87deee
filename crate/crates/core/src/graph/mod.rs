//! Directed-acyclic computation graphs with named adapter sites.
//!
//! A graph is declared as a [`GraphSpec`] (the JSON document), validated into a
//! [`ModelGraph`], and bound to parameter values as a [`ModelInstance`].
//!
//! Every activation is a `width × (samples · positions)` matrix: columns are
//! per-sample, per-position feature vectors, with each sample's positions
//! stored contiguously. Attention scores for `h` heads are stored as
//! `(h · positions) × (samples · positions)`: column `(b, t)` holds the scores
//! of query position `t` of sample `b` against every key position, head by head.

pub mod bound;
pub mod builders;
mod forward;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use bound::{iteration_bound, site_levels};
pub use forward::{capture_features, forward, task_features, CapturedFeatures, FeatureBatch, ModelInstance, Trace};

/// Identifier of an adapter site. Indices are dense `0..J`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SiteId {
    pub index: usize,
    pub label: String,
}

impl SiteId {
    pub fn new(index: usize, label: impl Into<String>) -> Self {
        Self {
            index,
            label: label.into(),
        }
    }
}

impl fmt::Display for SiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "site {} ({})", self.index, self.label)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Gelu,
    Tanh,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Gelu => {
                const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
                0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
            }
        }
    }
}

fn one() -> usize {
    1
}

fn is_one(v: &usize) -> bool {
    *v == 1
}

/// Operation performed by a node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NodeKind {
    /// Graph input of the given feature width.
    Input { width: usize },
    /// `(base + delta)ᵀ · x`; carries an adapter when `site` is set.
    Linear {
        weight: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        site: Option<SiteId>,
    },
    /// Adds a `width × 1` bias parameter to every column.
    BiasAdd { bias: String },
    Activation { function: Activation },
    /// Elementwise sum of all inputs.
    ResidualAdd,
    /// Per-column standardization (no affine parameters).
    LayerNorm { epsilon: f64 },
    /// Inputs `[query, key]`; scaled dot products within each sample.
    AttentionScore {
        scale: f64,
        #[serde(default = "one", skip_serializing_if = "is_one")]
        heads: usize,
    },
    /// Normalizes each query's score vector over key positions, per head.
    Softmax,
    /// Inputs `[weights, value]`; value mixing by attention weights.
    Matmul {
        #[serde(default = "one", skip_serializing_if = "is_one")]
        heads: usize,
    },
    Output,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: String,
    #[serde(flatten)]
    pub kind: NodeKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub inputs: Vec<String>,
}

impl NodeSpec {
    pub fn new(id: impl Into<String>, kind: NodeKind, inputs: &[&str]) -> Self {
        Self {
            id: id.into(),
            kind,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// The serialized graph document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphSpec {
    /// Sequence positions per sample; 1 for plain feed-forward graphs.
    #[serde(default = "one")]
    pub positions: usize,
    /// Declared `[rows, cols]` of every named parameter.
    pub params: BTreeMap<String, [usize; 2]>,
    pub nodes: Vec<NodeSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ValueShape {
    Features(usize),
    Scores { heads: usize },
}

/// A validated graph: acyclic, shape-consistent, with dense site indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GraphSpec", into = "GraphSpec")]
pub struct ModelGraph {
    spec: GraphSpec,
    order: Vec<usize>,
    index_of: HashMap<String, usize>,
    input_node: usize,
    output_node: usize,
    /// node index of the linear carrying each site, by site index
    site_nodes: Vec<usize>,
    sites: Vec<SiteId>,
    widths: Vec<usize>,
}

impl TryFrom<GraphSpec> for ModelGraph {
    type Error = Error;

    fn try_from(spec: GraphSpec) -> Result<Self> {
        ModelGraph::new(spec)
    }
}

impl From<ModelGraph> for GraphSpec {
    fn from(g: ModelGraph) -> Self {
        g.spec
    }
}

/// Validates a graph document and returns node ids in topological order.
pub fn validate(spec: &GraphSpec) -> Result<Vec<String>> {
    let g = ModelGraph::new(spec.clone())?;
    Ok(g.order.iter().map(|&i| g.spec.nodes[i].id.clone()).collect())
}

impl ModelGraph {
    pub fn new(spec: GraphSpec) -> Result<Self> {
        if spec.positions == 0 {
            return Err(Error::Graph("positions must be at least 1".into()));
        }
        let n = spec.nodes.len();
        let mut index_of = HashMap::with_capacity(n);
        for (i, node) in spec.nodes.iter().enumerate() {
            if index_of.insert(node.id.clone(), i).is_some() {
                return Err(Error::Graph(format!("duplicate node id '{}'", node.id)));
            }
        }
        let mut inputs_of: Vec<Vec<usize>> = Vec::with_capacity(n);
        for node in &spec.nodes {
            let mut ins = Vec::with_capacity(node.inputs.len());
            for name in &node.inputs {
                let &j = index_of.get(name).ok_or_else(|| {
                    Error::Graph(format!("node '{}' reads unknown node '{name}'", node.id))
                })?;
                ins.push(j);
            }
            inputs_of.push(ins);
        }

        let order = topological_order(&spec, &inputs_of)?;

        let mut input_node = None;
        let mut output_node = None;
        let mut consumers = vec![0usize; n];
        for ins in &inputs_of {
            for &j in ins {
                consumers[j] += 1;
            }
        }
        for (i, node) in spec.nodes.iter().enumerate() {
            let arity = inputs_of[i].len();
            let expect = |want: usize| -> Result<()> {
                if arity != want {
                    return Err(Error::Graph(format!(
                        "node '{}' takes {want} input(s), got {arity}",
                        node.id
                    )));
                }
                Ok(())
            };
            match &node.kind {
                NodeKind::Input { .. } => {
                    expect(0)?;
                    if input_node.replace(i).is_some() {
                        return Err(Error::Graph("graph must have exactly one input node".into()));
                    }
                }
                NodeKind::Output => {
                    expect(1)?;
                    if output_node.replace(i).is_some() {
                        return Err(Error::Graph(
                            "graph must have exactly one output node".into(),
                        ));
                    }
                    if consumers[i] > 0 {
                        return Err(Error::Graph(format!(
                            "output node '{}' has downstream edges",
                            node.id
                        )));
                    }
                }
                NodeKind::ResidualAdd => {
                    if arity < 2 {
                        return Err(Error::Graph(format!(
                            "residual_add '{}' needs at least two inputs",
                            node.id
                        )));
                    }
                }
                NodeKind::AttentionScore { .. } | NodeKind::Matmul { .. } => expect(2)?,
                _ => expect(1)?,
            }
        }
        let input_node = input_node.ok_or_else(|| Error::Graph("graph has no input node".into()))?;
        let output_node =
            output_node.ok_or_else(|| Error::Graph("graph has no output node".into()))?;

        // sites
        let mut site_slots: Vec<Option<(usize, SiteId)>> = Vec::new();
        for (i, node) in spec.nodes.iter().enumerate() {
            if let NodeKind::Linear {
                site: Some(site), ..
            } = &node.kind
            {
                if site.index >= site_slots.len() {
                    site_slots.resize(site.index + 1, None);
                }
                if let Some((other, _)) = &site_slots[site.index] {
                    return Err(Error::Graph(format!(
                        "site index {} used by both '{}' and '{}'",
                        site.index, spec.nodes[*other].id, node.id
                    )));
                }
                site_slots[site.index] = Some((i, site.clone()));
            }
        }
        let mut site_nodes = Vec::with_capacity(site_slots.len());
        let mut sites = Vec::with_capacity(site_slots.len());
        for (j, slot) in site_slots.into_iter().enumerate() {
            let (node, id) =
                slot.ok_or_else(|| Error::Graph(format!("site indices are not dense: {j} missing")))?;
            site_nodes.push(node);
            sites.push(id);
        }

        let shapes = propagate_shapes(&spec, &inputs_of, &order)?;
        let widths = shapes
            .iter()
            .map(|s| match s {
                ValueShape::Features(w) => *w,
                ValueShape::Scores { heads } => heads * spec.positions,
            })
            .collect();

        Ok(Self {
            spec,
            order,
            index_of,
            input_node,
            output_node,
            site_nodes,
            sites,
            widths,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str::<GraphSpec>(text)
            .map_err(|e| Error::Config(format!("invalid graph document: {e}")))
            .and_then(ModelGraph::new)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: GraphSpec =
            serde_json::from_str(&text).map_err(|e| Error::Json {
                path: path.to_path_buf(),
                source: e,
            })?;
        ModelGraph::new(spec).map_err(|e| e.context(path.display().to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.spec).expect("graph spec serializes")
    }

    pub fn spec(&self) -> &GraphSpec {
        &self.spec
    }

    pub fn positions(&self) -> usize {
        self.spec.positions
    }

    pub fn input_width(&self) -> usize {
        self.widths[self.input_node]
    }

    pub fn output_width(&self) -> usize {
        self.widths[self.output_node]
    }

    pub fn sites(&self) -> &[SiteId] {
        &self.sites
    }

    pub fn site_count(&self) -> usize {
        self.sites.len()
    }

    /// `(d_in, d_out)` of a site's weight.
    pub fn site_shape(&self, site: usize) -> (usize, usize) {
        let node = &self.spec.nodes[self.site_nodes[site]];
        match &node.kind {
            NodeKind::Linear { weight, .. } => {
                let [r, c] = self.spec.params[weight];
                (r, c)
            }
            _ => unreachable!("site nodes are linear"),
        }
    }

    /// Name of the base parameter a site adapts.
    pub fn site_weight(&self, site: usize) -> &str {
        match &self.spec.nodes[self.site_nodes[site]].kind {
            NodeKind::Linear { weight, .. } => weight,
            _ => unreachable!("site nodes are linear"),
        }
    }

    pub fn node_id(&self, node: usize) -> &str {
        &self.spec.nodes[node].id
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.index_of.get(id).copied()
    }

    pub fn order_ids(&self) -> Vec<&str> {
        self.order.iter().map(|&i| self.spec.nodes[i].id.as_str()).collect()
    }

    pub fn params(&self) -> &BTreeMap<String, [usize; 2]> {
        &self.spec.params
    }

    pub(crate) fn nodes(&self) -> &[NodeSpec] {
        &self.spec.nodes
    }

    pub(crate) fn order(&self) -> &[usize] {
        &self.order
    }

    pub(crate) fn site_node(&self, site: usize) -> usize {
        self.site_nodes[site]
    }

    pub(crate) fn output_node(&self) -> usize {
        self.output_node
    }

    pub(crate) fn input_indices(&self, node: usize) -> impl Iterator<Item = usize> + '_ {
        self.spec.nodes[node]
            .inputs
            .iter()
            .map(move |name| self.index_of[name])
    }
}

/// Depth-first topological sort. Reports the first back edge found.
fn topological_order(spec: &GraphSpec, inputs_of: &[Vec<usize>]) -> Result<Vec<usize>> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        New,
        Active,
        Done,
    }
    let n = inputs_of.len();
    let mut mark = vec![Mark::New; n];
    let mut order = Vec::with_capacity(n);
    for root in 0..n {
        if mark[root] != Mark::New {
            continue;
        }
        // (node, next input to visit)
        let mut stack = vec![(root, 0usize)];
        mark[root] = Mark::Active;
        while let Some(top) = stack.last_mut() {
            let node = top.0;
            if top.1 < inputs_of[node].len() {
                let up = inputs_of[node][top.1];
                top.1 += 1;
                match mark[up] {
                    Mark::New => {
                        mark[up] = Mark::Active;
                        stack.push((up, 0));
                    }
                    Mark::Active => {
                        return Err(Error::Graph(format!(
                            "cycle detected: back edge '{}' -> '{}'",
                            spec.nodes[up].id, spec.nodes[node].id
                        )));
                    }
                    Mark::Done => {}
                }
            } else {
                mark[node] = Mark::Done;
                order.push(node);
                stack.pop();
            }
        }
    }
    Ok(order)
}

fn propagate_shapes(
    spec: &GraphSpec,
    inputs_of: &[Vec<usize>],
    order: &[usize],
) -> Result<Vec<ValueShape>> {
    let mut shapes = vec![ValueShape::Features(0); spec.nodes.len()];
    let param = |node: &NodeSpec, name: &str| -> Result<[usize; 2]> {
        spec.params.get(name).copied().ok_or_else(|| {
            Error::Graph(format!(
                "node '{}' references undeclared parameter '{name}'",
                node.id
            ))
        })
    };
    for &i in order {
        let node = &spec.nodes[i];
        let ins = &inputs_of[i];
        let conflict = |what: String, j: usize| -> Error {
            Error::Shape(format!(
                "node '{}' vs input '{}': {what}",
                node.id, spec.nodes[j].id
            ))
        };
        let features = |j: usize| -> Result<usize> {
            match shapes[j] {
                ValueShape::Features(w) => Ok(w),
                ValueShape::Scores { .. } => {
                    Err(conflict("expects features, got attention scores".into(), j))
                }
            }
        };
        shapes[i] = match &node.kind {
            NodeKind::Input { width } => {
                if *width == 0 {
                    return Err(Error::Shape(format!("input '{}' has zero width", node.id)));
                }
                ValueShape::Features(*width)
            }
            NodeKind::Linear { weight, .. } => {
                let [r, c] = param(node, weight)?;
                let w = features(ins[0])?;
                if w != r {
                    return Err(conflict(
                        format!("weight '{weight}' is {r}x{c} but input width is {w}"),
                        ins[0],
                    ));
                }
                ValueShape::Features(c)
            }
            NodeKind::BiasAdd { bias } => {
                let [r, c] = param(node, bias)?;
                let w = features(ins[0])?;
                if c != 1 || r != w {
                    return Err(conflict(
                        format!("bias '{bias}' is {r}x{c} but input width is {w}"),
                        ins[0],
                    ));
                }
                ValueShape::Features(w)
            }
            NodeKind::Activation { .. } | NodeKind::LayerNorm { .. } | NodeKind::Output => {
                ValueShape::Features(features(ins[0])?)
            }
            NodeKind::ResidualAdd => {
                let w = features(ins[0])?;
                for &j in &ins[1..] {
                    let wj = features(j)?;
                    if wj != w {
                        return Err(conflict(format!("width {wj} differs from {w}"), j));
                    }
                }
                ValueShape::Features(w)
            }
            NodeKind::AttentionScore { heads, .. } => {
                let wq = features(ins[0])?;
                let wk = features(ins[1])?;
                if wq != wk {
                    return Err(conflict(format!("key width {wk} vs query width {wq}"), ins[1]));
                }
                if *heads == 0 || wq % heads != 0 {
                    return Err(conflict(format!("width {wq} not divisible by {heads} heads"), ins[0]));
                }
                ValueShape::Scores { heads: *heads }
            }
            NodeKind::Softmax => match shapes[ins[0]] {
                s @ ValueShape::Scores { .. } => s,
                ValueShape::Features(_) => {
                    return Err(conflict("softmax expects attention scores".into(), ins[0]))
                }
            },
            NodeKind::Matmul { heads } => {
                match shapes[ins[0]] {
                    ValueShape::Scores { heads: h } if h == *heads => {}
                    _ => {
                        return Err(conflict(
                            format!("expects attention weights with {heads} heads"),
                            ins[0],
                        ))
                    }
                }
                let w = features(ins[1])?;
                if w % heads != 0 {
                    return Err(conflict(format!("value width {w} not divisible by {heads} heads"), ins[1]));
                }
                ValueShape::Features(w)
            }
        };
    }
    Ok(shapes)
}
