use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;

use super::{ModelGraph, NodeKind, SiteId};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// A graph bound to base parameters and one dense delta per adapter site.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInstance {
    graph: Arc<ModelGraph>,
    params: BTreeMap<String, Matrix>,
    deltas: Vec<Matrix>,
}

impl ModelInstance {
    pub fn new(
        graph: Arc<ModelGraph>,
        params: BTreeMap<String, Matrix>,
        deltas: Vec<Matrix>,
    ) -> Result<Self> {
        for (name, &[r, c]) in graph.params() {
            let value = params
                .get(name)
                .ok_or_else(|| Error::Shape(format!("parameter '{name}' is not bound")))?;
            if value.shape() != (r, c) {
                return Err(Error::Shape(format!(
                    "parameter '{name}' declared {r}x{c}, bound {}x{}",
                    value.rows(),
                    value.cols()
                )));
            }
            if !value.is_finite() {
                return Err(Error::Data(format!("parameter '{name}' has non-finite entries")));
            }
        }
        if let Some(extra) = params.keys().find(|k| !graph.params().contains_key(*k)) {
            return Err(Error::Shape(format!("parameter '{extra}' is not declared by the graph")));
        }
        if deltas.len() != graph.site_count() {
            return Err(Error::Shape(format!(
                "graph has {} sites but {} deltas were given",
                graph.site_count(),
                deltas.len()
            )));
        }
        for (j, d) in deltas.iter().enumerate() {
            check_delta(&graph, j, d)?;
        }
        Ok(Self {
            graph,
            params,
            deltas,
        })
    }

    /// Instance with every adapter delta set to zero.
    pub fn base(graph: Arc<ModelGraph>, params: BTreeMap<String, Matrix>) -> Result<Self> {
        let deltas = (0..graph.site_count())
            .map(|j| {
                let (r, c) = graph.site_shape(j);
                Matrix::zeros(r, c)
            })
            .collect();
        Self::new(graph, params, deltas)
    }

    pub fn graph(&self) -> &ModelGraph {
        &self.graph
    }

    pub fn shared_graph(&self) -> Arc<ModelGraph> {
        Arc::clone(&self.graph)
    }

    pub fn params(&self) -> &BTreeMap<String, Matrix> {
        &self.params
    }

    pub fn deltas(&self) -> &[Matrix] {
        &self.deltas
    }

    pub fn delta(&self, site: usize) -> &Matrix {
        &self.deltas[site]
    }

    /// Base weight of the linear layer at `site`.
    pub fn site_base(&self, site: usize) -> &Matrix {
        &self.params[self.graph.site_weight(site)]
    }

    pub fn set_delta(&mut self, site: usize, delta: Matrix) -> Result<()> {
        if site >= self.deltas.len() {
            return Err(Error::Shape(format!("no site {site}")));
        }
        check_delta(&self.graph, site, &delta)?;
        self.deltas[site] = delta;
        Ok(())
    }

    pub fn with_deltas(&self, deltas: Vec<Matrix>) -> Result<Self> {
        Self::new(Arc::clone(&self.graph), self.params.clone(), deltas)
    }

    /// Same base parameters and graph (deltas may differ).
    pub fn shares_base_with(&self, other: &ModelInstance) -> bool {
        (Arc::ptr_eq(&self.graph, &other.graph) || self.graph == other.graph)
            && self.params == other.params
    }
}

fn check_delta(graph: &ModelGraph, site: usize, delta: &Matrix) -> Result<()> {
    let want = graph.site_shape(site);
    if delta.shape() != want {
        return Err(Error::Shape(format!(
            "delta for {} is {}x{}, expected {}x{}",
            graph.sites()[site],
            delta.rows(),
            delta.cols(),
            want.0,
            want.1
        )));
    }
    if !delta.is_finite() {
        return Err(Error::Data(format!(
            "delta for {} has non-finite entries",
            graph.sites()[site]
        )));
    }
    Ok(())
}

/// Every node's value from one forward evaluation.
#[derive(Debug, Clone)]
pub struct Trace {
    values: Vec<Matrix>,
    output_node: usize,
    site_inputs: Vec<usize>,
    site_nodes: Vec<usize>,
}

impl Trace {
    pub fn output(&self) -> &Matrix {
        &self.values[self.output_node]
    }

    pub fn value(&self, node: usize) -> &Matrix {
        &self.values[node]
    }

    /// The matrix fed into the site's linear transform.
    pub fn site_input(&self, site: usize) -> &Matrix {
        &self.values[self.site_inputs[site]]
    }

    /// The site's linear output (before any bias or normalization).
    pub fn site_output(&self, site: usize) -> &Matrix {
        &self.values[self.site_nodes[site]]
    }

    pub fn into_parts(self) -> (Matrix, Vec<Matrix>) {
        let mut values: Vec<Option<Matrix>> = self.values.into_iter().map(Some).collect();
        let features = self
            .site_inputs
            .iter()
            .map(|&i| values[i].clone().expect("present"))
            .collect();
        (values[self.output_node].take().expect("present"), features)
    }
}

impl ModelInstance {
    /// Runs the graph on `input` (width × samples·positions) and records every value.
    pub fn trace(&self, input: &Matrix) -> Result<Trace> {
        let g = &*self.graph;
        let positions = g.positions();
        if input.rows() != g.input_width() || input.cols() % positions != 0 {
            return Err(Error::Shape(format!(
                "input is {}x{}, graph expects {} rows and a multiple of {positions} columns",
                input.rows(),
                input.cols(),
                g.input_width()
            )));
        }
        if !input.is_finite() {
            return Err(Error::Data("input has non-finite entries".into()));
        }
        let mut site_of_node = vec![None; g.nodes().len()];
        for j in 0..g.site_count() {
            site_of_node[g.site_node(j)] = Some(j);
        }

        let mut values: Vec<Option<Matrix>> = vec![None; g.nodes().len()];
        for &i in g.order() {
            let ins: Vec<&Matrix> = g
                .input_indices(i)
                .map(|j| values[j].as_ref().expect("topological order"))
                .collect();
            let out = match &g.nodes()[i].kind {
                NodeKind::Input { .. } => input.clone(),
                NodeKind::Linear { weight, .. } => {
                    let base = &self.params[weight];
                    match site_of_node[i] {
                        Some(j) => base.add(&self.deltas[j])?.tr_matmul(ins[0])?,
                        None => base.tr_matmul(ins[0])?,
                    }
                }
                NodeKind::BiasAdd { bias } => {
                    let b = &self.params[bias];
                    let mut out = ins[0].clone();
                    for r in 0..out.rows() {
                        let shift = b[(r, 0)];
                        for v in out.row_mut(r) {
                            *v += shift;
                        }
                    }
                    out
                }
                NodeKind::Activation { function } => ins[0].map(|v| function.apply(v)),
                NodeKind::ResidualAdd => {
                    let mut out = ins[0].clone();
                    for other in &ins[1..] {
                        out.add_assign(other)?;
                    }
                    out
                }
                NodeKind::LayerNorm { epsilon } => layer_norm(ins[0], *epsilon),
                NodeKind::AttentionScore { scale, heads } => {
                    attention_scores(ins[0], ins[1], *scale, *heads, positions)
                }
                NodeKind::Softmax => {
                    let heads = ins[0].rows() / positions;
                    softmax_keys(ins[0], heads, positions)
                }
                NodeKind::Matmul { heads } => mix_values(ins[0], ins[1], *heads, positions),
                NodeKind::Output => ins[0].clone(),
            };
            values[i] = Some(out);
        }
        let site_inputs = (0..g.site_count())
            .map(|j| g.input_indices(g.site_node(j)).next().expect("linear has one input"))
            .collect();
        Ok(Trace {
            values: values.into_iter().map(|v| v.expect("evaluated")).collect(),
            output_node: g.output_node(),
            site_inputs,
            site_nodes: (0..g.site_count()).map(|j| g.site_node(j)).collect(),
        })
    }
}

pub fn forward(instance: &ModelInstance, input: &Matrix) -> Result<Matrix> {
    Ok(instance.trace(input)?.into_parts().0)
}

fn layer_norm(x: &Matrix, epsilon: f64) -> Matrix {
    let (d, n) = x.shape();
    let mut out = x.clone();
    for c in 0..n {
        let mean = (0..d).map(|r| x[(r, c)]).sum::<f64>() / d as f64;
        let var = (0..d).map(|r| (x[(r, c)] - mean).powi(2)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + epsilon).sqrt();
        for r in 0..d {
            out[(r, c)] = (x[(r, c)] - mean) * inv;
        }
    }
    out
}

fn attention_scores(q: &Matrix, k: &Matrix, scale: f64, heads: usize, p: usize) -> Matrix {
    let d = q.rows();
    let dh = d / heads;
    let n = q.cols();
    let mut out = Matrix::zeros(heads * p, n);
    for b in 0..n / p {
        for h in 0..heads {
            for t in 0..p {
                for s in 0..p {
                    let mut acc = 0.0;
                    for r in h * dh..(h + 1) * dh {
                        acc += k[(r, b * p + s)] * q[(r, b * p + t)];
                    }
                    out[(h * p + s, b * p + t)] = scale * acc;
                }
            }
        }
    }
    out
}

fn softmax_keys(scores: &Matrix, heads: usize, p: usize) -> Matrix {
    let mut out = scores.clone();
    for c in 0..scores.cols() {
        for h in 0..heads {
            let rows = h * p..(h + 1) * p;
            let max = rows
                .clone()
                .map(|r| scores[(r, c)])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for r in rows.clone() {
                let e = (scores[(r, c)] - max).exp();
                out[(r, c)] = e;
                total += e;
            }
            for r in rows {
                out[(r, c)] /= total;
            }
        }
    }
    out
}

fn mix_values(weights: &Matrix, v: &Matrix, heads: usize, p: usize) -> Matrix {
    let d = v.rows();
    let dh = d / heads;
    let n = v.cols();
    let mut out = Matrix::zeros(d, n);
    for b in 0..n / p {
        for h in 0..heads {
            for t in 0..p {
                for s in 0..p {
                    let a = weights[(h * p + s, b * p + t)];
                    for r in h * dh..(h + 1) * dh {
                        out[(r, b * p + t)] += a * v[(r, b * p + s)];
                    }
                }
            }
        }
    }
    out
}

/// Features captured at one adapter site for one task.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBatch {
    pub task: usize,
    pub site: SiteId,
    /// `d_in × (samples · positions)`.
    pub features: Matrix,
}

/// Site-input features for every (task, site) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct CapturedFeatures {
    sites: Vec<SiteId>,
    /// `[task][site]`
    per_task: Vec<Vec<Matrix>>,
}

impl CapturedFeatures {
    pub fn from_parts(sites: Vec<SiteId>, per_task: Vec<Vec<Matrix>>) -> Result<Self> {
        if per_task.iter().any(|t| t.len() != sites.len()) {
            return Err(Error::Shape("feature set does not cover every site".into()));
        }
        Ok(Self { sites, per_task })
    }

    pub fn tasks(&self) -> usize {
        self.per_task.len()
    }

    pub fn sites(&self) -> &[SiteId] {
        &self.sites
    }

    pub fn get(&self, task: usize, site: usize) -> &Matrix {
        &self.per_task[task][site]
    }

    /// One matrix per task at `site`.
    pub fn at_site(&self, site: usize) -> Vec<&Matrix> {
        self.per_task.iter().map(|t| &t[site]).collect()
    }

    pub fn batches(&self) -> impl Iterator<Item = FeatureBatch> + '_ {
        self.per_task.iter().enumerate().flat_map(move |(task, row)| {
            row.iter().enumerate().map(move |(j, m)| FeatureBatch {
                task,
                site: self.sites[j].clone(),
                features: m.clone(),
            })
        })
    }

    /// Scales every feature matrix of one task.
    pub fn scale_task(&mut self, task: usize, factor: f64) {
        for m in &mut self.per_task[task] {
            *m = m.scale(factor);
        }
    }
}

/// Features of each task on its own model: `X_n` from `tasks[n]` on `task_inputs[n]`.
pub fn task_features(tasks: &[ModelInstance], task_inputs: &[Matrix]) -> Result<CapturedFeatures> {
    if tasks.is_empty() || tasks.len() != task_inputs.len() {
        return Err(Error::Config(format!(
            "{} task models but {} input batches",
            tasks.len(),
            task_inputs.len()
        )));
    }
    let per_task = tasks
        .par_iter()
        .zip(task_inputs)
        .enumerate()
        .map(|(n, (model, input))| {
            model
                .trace(input)
                .map(|tr| tr.into_parts().1)
                .map_err(|e| e.context(format!("task {n}")))
        })
        .collect::<Result<Vec<_>>>()?;
    CapturedFeatures::from_parts(tasks[0].graph().sites().to_vec(), per_task)
}

/// Runs each task's inputs through `instance`, recording the input of every
/// adapter site. Tasks are evaluated concurrently.
pub fn capture_features(instance: &ModelInstance, task_inputs: &[Matrix]) -> Result<CapturedFeatures> {
    let per_task = task_inputs
        .par_iter()
        .enumerate()
        .map(|(n, x)| {
            instance
                .trace(x)
                .map(|t| t.into_parts().1)
                .map_err(|e| e.context(format!("task {n}")))
        })
        .collect::<Result<Vec<_>>>()?;
    CapturedFeatures::from_parts(instance.graph().sites().to_vec(), per_task)
}
