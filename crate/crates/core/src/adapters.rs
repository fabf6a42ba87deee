//! Low-rank adapters.
//!
//! Convention: an adapter with factors `down` (`r × d_in`) and `up`
//! (`d_out × r`) contributes `ΔW = scale · (up · down)ᵀ`, a `d_in × d_out`
//! update added to the base weight. Importers of other conventions must
//! transpose.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ModelGraph, ModelInstance, SiteId};
use crate::numerics::Matrix;

/// Whether merged weights are the adapter update alone or base plus update.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightScope {
    #[default]
    Delta,
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    site: SiteId,
    down: Matrix,
    up: Matrix,
    scale: f64,
}

impl LoraAdapter {
    pub fn new(site: SiteId, down: Matrix, up: Matrix, scale: f64) -> Result<Self> {
        let rank = down.rows();
        if up.cols() != rank {
            return Err(Error::Shape(format!(
                "{site}: down is {}x{} but up is {}x{}",
                down.rows(),
                down.cols(),
                up.rows(),
                up.cols()
            )));
        }
        if rank > down.cols().min(up.rows()) {
            return Err(Error::Domain(format!(
                "{site}: rank {rank} exceeds min(d_in, d_out) = {}",
                down.cols().min(up.rows())
            )));
        }
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::Domain(format!("{site}: scale must be positive, got {scale}")));
        }
        if !down.is_finite() || !up.is_finite() {
            return Err(Error::Data(format!("{site}: non-finite adapter factors")));
        }
        Ok(Self {
            site,
            down,
            up,
            scale,
        })
    }

    pub fn site(&self) -> &SiteId {
        &self.site
    }

    pub fn down(&self) -> &Matrix {
        &self.down
    }

    pub fn up(&self) -> &Matrix {
        &self.up
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn rank(&self) -> usize {
        self.down.rows()
    }

    pub fn d_in(&self) -> usize {
        self.down.cols()
    }

    pub fn d_out(&self) -> usize {
        self.up.rows()
    }

    /// `scale · (up · down)ᵀ`
    pub fn delta(&self) -> Matrix {
        self.down
            .tr_matmul(&self.up.transpose())
            .expect("factor shapes checked at construction")
            .scale(self.scale)
    }
}

pub fn effective_weight(adapter: &LoraAdapter, base: &Matrix, scope: WeightScope) -> Result<Matrix> {
    if base.shape() != (adapter.d_in(), adapter.d_out()) {
        return Err(Error::Shape(format!(
            "{}: base is {}x{} but adapter maps {} -> {}",
            adapter.site,
            base.rows(),
            base.cols(),
            adapter.d_in(),
            adapter.d_out()
        )));
    }
    let delta = adapter.delta();
    match scope {
        WeightScope::Delta => Ok(delta),
        WeightScope::Full => base.add(&delta),
    }
}

/// Best rank-`target_rank` factorization of a dense update by truncated SVD.
///
/// With `delta = U Σ Vᵀ`, the factors are `down = √Σ_r U_rᵀ` and
/// `up = V_r √Σ_r`, scale 1.
pub fn refactor_low_rank(site: SiteId, delta: &Matrix, target_rank: usize) -> Result<LoraAdapter> {
    let (d_in, d_out) = delta.shape();
    if target_rank == 0 || target_rank > d_in.min(d_out) {
        return Err(Error::Domain(format!(
            "{site}: target rank {target_rank} outside 1..={}",
            d_in.min(d_out)
        )));
    }
    let m = DMatrix::from_row_slice(d_in, d_out, delta.data());
    let svd = m.svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested Vᵀ");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));

    let mut down = Matrix::zeros(target_rank, d_in);
    let mut up = Matrix::zeros(d_out, target_rank);
    for (slot, &k) in order.iter().take(target_rank).enumerate() {
        let root = svd.singular_values[k].max(0.0).sqrt();
        for i in 0..d_in {
            down[(slot, i)] = root * u[(i, k)];
        }
        for o in 0..d_out {
            up[(o, slot)] = root * v_t[(k, o)];
        }
    }
    LoraAdapter::new(site, down, up, 1.0)
}

/// One task's adapters, one per graph site.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet {
    pub task: usize,
    pub adapters: Vec<LoraAdapter>,
    pub scope: WeightScope,
}

impl AdapterSet {
    pub fn new(task: usize, adapters: Vec<LoraAdapter>) -> Self {
        Self {
            task,
            adapters,
            scope: WeightScope::Delta,
        }
    }

    /// Checks that the set covers exactly the graph's sites with matching shapes.
    pub fn check_covers(&self, graph: &ModelGraph) -> Result<()> {
        if self.adapters.len() != graph.site_count() {
            return Err(Error::Shape(format!(
                "task {}: {} adapters for {} sites",
                self.task,
                self.adapters.len(),
                graph.site_count()
            )));
        }
        for (j, a) in self.adapters.iter().enumerate() {
            if a.site.index != j {
                return Err(Error::Shape(format!(
                    "task {}: adapter {j} is for {}",
                    self.task, a.site
                )));
            }
            if (a.d_in(), a.d_out()) != graph.site_shape(j) {
                return Err(Error::Shape(format!(
                    "task {}: adapter for {} maps {} -> {}, site expects {:?}",
                    self.task,
                    a.site,
                    a.d_in(),
                    a.d_out(),
                    graph.site_shape(j)
                )));
            }
        }
        Ok(())
    }

    pub fn deltas(&self) -> Vec<Matrix> {
        self.adapters.iter().map(LoraAdapter::delta).collect()
    }

    /// Per-site weights under the set's scope.
    pub fn weights(&self, base: &ModelInstance) -> Result<Vec<Matrix>> {
        self.adapters
            .iter()
            .enumerate()
            .map(|(j, a)| effective_weight(a, base.site_base(j), self.scope))
            .collect()
    }

    /// The task model: `base` with this set's deltas installed.
    pub fn instantiate(&self, base: &ModelInstance) -> Result<ModelInstance> {
        self.check_covers(base.graph())?;
        base.with_deltas(self.deltas())
    }
}
