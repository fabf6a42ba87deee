//! Random feed-forward graphs with adapter sites, for exercising the bound.

use std::collections::BTreeMap;

use rand::Rng;

use crate::graph::{Activation, GraphSpec, ModelGraph, NodeKind, NodeSpec, SiteId};

#[derive(Debug, Clone, Copy)]
pub struct DagShape {
    pub max_sites: usize,
    /// Upper limit on any site's level.
    pub max_depth: usize,
    pub width: usize,
}

impl Default for DagShape {
    fn default() -> Self {
        Self {
            max_sites: 8,
            max_depth: 5,
            width: 5,
        }
    }
}

/// Draws a random graph: every new site reads from one available node or the
/// sum of two, optionally followed by bias, activation or normalization. All
/// unconsumed nodes are summed into the output.
pub fn random_dag(rng: &mut impl Rng, shape: DagShape) -> ModelGraph {
    let w = shape.width;
    let sites = rng.random_range(1..=shape.max_sites);
    let mut params = BTreeMap::new();
    let mut nodes = vec![NodeSpec::new("x", NodeKind::Input { width: w }, &[])];
    // (node id, deepest site level at or above it)
    let mut available: Vec<(String, usize)> = vec![("x".into(), 0)];
    let mut consumed: Vec<bool> = vec![false];
    let mut fresh = 0usize;
    let mut name = |prefix: &str| {
        fresh += 1;
        format!("{prefix}{fresh}")
    };

    for j in 0..sites {
        let eligible: Vec<usize> = (0..available.len())
            .filter(|&i| available[i].1 < shape.max_depth)
            .collect();
        let pick = |rng: &mut dyn rand::RngCore| eligible[rng.random_range(0..eligible.len())];
        let a = pick(rng);
        let mut source = available[a].0.clone();
        let mut level = available[a].1;
        consumed[a] = true;
        if eligible.len() > 1 && rng.random_bool(0.4) {
            let b = pick(rng);
            if b != a {
                let id = name("sum");
                nodes.push(NodeSpec::new(&id, NodeKind::ResidualAdd, &[&source, &available[b].0]));
                level = level.max(available[b].1);
                consumed[b] = true;
                source = id;
            }
        }
        // occasionally an unadapted projection in front of the site
        if rng.random_bool(0.2) {
            let id = name("proj");
            let weight = format!("{id}.weight");
            params.insert(weight.clone(), [w, w]);
            nodes.push(NodeSpec::new(&id, NodeKind::Linear { weight, site: None }, &[&source]));
            source = id;
        }
        let id = format!("site{j}");
        let weight = format!("{id}.weight");
        params.insert(weight.clone(), [w, w]);
        nodes.push(NodeSpec::new(
            &id,
            NodeKind::Linear {
                weight,
                site: Some(SiteId::new(j, &id)),
            },
            &[&source],
        ));
        let mut out = id;
        if rng.random_bool(0.5) {
            let bias = format!("{out}.bias");
            params.insert(bias.clone(), [w, 1]);
            let b = name("bias");
            nodes.push(NodeSpec::new(&b, NodeKind::BiasAdd { bias }, &[&out]));
            out = b;
        }
        match rng.random_range(0..4) {
            0 => {}
            1 => {
                let n = name("norm");
                nodes.push(NodeSpec::new(&n, NodeKind::LayerNorm { epsilon: 1e-5 }, &[&out]));
                out = n;
            }
            _ => {
                let function = if rng.random_bool(0.5) { Activation::Tanh } else { Activation::Gelu };
                let n = name("act");
                nodes.push(NodeSpec::new(&n, NodeKind::Activation { function }, &[&out]));
                out = n;
            }
        }
        available.push((out, level + 1));
        consumed.push(false);
    }

    let sinks: Vec<&str> = available
        .iter()
        .zip(&consumed)
        .filter(|(_, &c)| !c)
        .map(|((id, _), _)| id.as_str())
        .collect();
    let last = if sinks.len() == 1 {
        sinks[0].to_string()
    } else {
        nodes.push(NodeSpec::new("sum_out", NodeKind::ResidualAdd, &sinks));
        "sum_out".to_string()
    };
    nodes.push(NodeSpec::new("y", NodeKind::Output, &[&last]));
    ModelGraph::new(GraphSpec {
        positions: 1,
        params,
        nodes,
    })
    .expect("generated graph is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{iteration_bound, site_levels};
    use crate::harness::oracles;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn generated_graphs_respect_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let g = random_dag(&mut rng, DagShape::default());
            assert!((1..=8).contains(&g.site_count()));
            assert!(site_levels(&g).iter().all(|&l| (1..=5).contains(&l)));
            assert_eq!(
                iteration_bound(&g).unwrap(),
                oracles::brute_force_iteration_bound(g.spec()).unwrap()
            );
        }
    }
}
