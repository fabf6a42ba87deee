//! Iteration bound for the inference-solving loop.
//!
//! The dependency graph over adapter sites has an edge `A → B` whenever the
//! output of site `A`'s linear layer reaches the input of site `B`. A site's
//! level is the number of site vertices on the longest input-rooted path
//! ending at it. Sites at level 1 see only base computation of the raw input,
//! so their features never change; once every site at level `k` is fixed the
//! sites at level `k + 1` are too. The loop is therefore at a fixed point after
//! `max level − 1` refinements beyond the first solve.

use super::{ModelGraph, NodeKind};
use crate::error::{Error, Result};

/// Longest-path level (1-based) of every site.
pub fn site_levels(graph: &ModelGraph) -> Vec<usize> {
    let n = graph.nodes().len();
    // deepest site level upstream of (or at) each node
    let mut depth = vec![0usize; n];
    let mut levels = vec![0usize; graph.site_count()];
    for &i in graph.order() {
        let upstream = graph.input_indices(i).map(|j| depth[j]).max().unwrap_or(0);
        depth[i] = match &graph.nodes()[i].kind {
            NodeKind::Linear {
                site: Some(site), ..
            } => {
                levels[site.index] = upstream + 1;
                upstream + 1
            }
            _ => upstream,
        };
    }
    levels
}

/// Number of refinement iterations after which every adapter is fixed.
pub fn iteration_bound(graph: &ModelGraph) -> Result<usize> {
    if graph.site_count() == 0 {
        return Err(Error::Domain("graph has no adapter sites".into()));
    }
    let longest = site_levels(graph).into_iter().max().expect("at least one site");
    Ok(longest - 1)
}
