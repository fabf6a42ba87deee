//! Graph documents for the architectures used by the synthetic harness and the
//! fixtures.

use std::collections::BTreeMap;

use super::{Activation, GraphSpec, ModelGraph, NodeKind, NodeSpec, SiteId};

/// Which attention projections carry adapters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdaptedProjections {
    pub q: bool,
    pub k: bool,
    pub v: bool,
}

impl AdaptedProjections {
    pub const QKV: Self = Self {
        q: true,
        k: true,
        v: true,
    };
    pub const KV: Self = Self {
        q: false,
        k: true,
        v: true,
    };
}

#[derive(Default)]
struct Builder {
    params: BTreeMap<String, [usize; 2]>,
    nodes: Vec<NodeSpec>,
    sites: usize,
}

impl Builder {
    fn node(&mut self, id: impl Into<String>, kind: NodeKind, inputs: &[&str]) -> String {
        let id = id.into();
        self.nodes.push(NodeSpec::new(id.clone(), kind, inputs));
        id
    }

    fn linear(&mut self, id: &str, input: &str, d_in: usize, d_out: usize, adapted: bool) -> String {
        let weight = format!("{id}.weight");
        self.params.insert(weight.clone(), [d_in, d_out]);
        let site = adapted.then(|| {
            self.sites += 1;
            SiteId::new(self.sites - 1, id)
        });
        self.node(id, NodeKind::Linear { weight, site }, &[input])
    }

    fn bias(&mut self, id: &str, input: &str, width: usize) -> String {
        let bias = format!("{id}.bias");
        self.params.insert(bias.clone(), [width, 1]);
        self.node(format!("{id}.add_bias"), NodeKind::BiasAdd { bias }, &[input])
    }

    /// Attention with queries from `query_src` and keys/values from `kv_src`,
    /// followed by an output projection, residual add onto `query_src` and
    /// layer normalization.
    fn attention(
        &mut self,
        prefix: &str,
        query_src: &str,
        kv_src: &str,
        width: usize,
        heads: usize,
        adapted: AdaptedProjections,
    ) -> String {
        let q = self.linear(&format!("{prefix}.q"), query_src, width, width, adapted.q);
        let k = self.linear(&format!("{prefix}.k"), kv_src, width, width, adapted.k);
        let v = self.linear(&format!("{prefix}.v"), kv_src, width, width, adapted.v);
        let scale = 1.0 / ((width / heads) as f64).sqrt();
        let scores = self.node(
            format!("{prefix}.scores"),
            NodeKind::AttentionScore { scale, heads },
            &[&q, &k],
        );
        let probs = self.node(format!("{prefix}.softmax"), NodeKind::Softmax, &[&scores]);
        let mixed = self.node(format!("{prefix}.mix"), NodeKind::Matmul { heads }, &[&probs, &v]);
        let out = self.linear(&format!("{prefix}.o"), &mixed, width, width, false);
        let res = self.node(format!("{prefix}.residual"), NodeKind::ResidualAdd, &[query_src, &out]);
        self.node(
            format!("{prefix}.norm"),
            NodeKind::LayerNorm { epsilon: 1e-5 },
            &[&res],
        )
    }

    fn finish(self, positions: usize) -> ModelGraph {
        ModelGraph::new(GraphSpec {
            positions,
            params: self.params,
            nodes: self.nodes,
        })
        .expect("builder produces a valid graph")
    }
}

/// `depth` blocks of adapted linear → bias → activation, all `width` wide.
pub fn mlp_chain(depth: usize, width: usize, activation: Activation) -> ModelGraph {
    assert!(depth >= 1 && width >= 1);
    let mut b = Builder::default();
    let mut cur = b.node("x", NodeKind::Input { width }, &[]);
    for l in 0..depth {
        let h = b.linear(&format!("fc{l}"), &cur, width, width, true);
        let hb = b.bias(&format!("fc{l}"), &h, width);
        cur = b.node(
            format!("act{l}"),
            NodeKind::Activation {
                function: activation,
            },
            &[&hb],
        );
    }
    b.node("y", NodeKind::Output, &[&cur]);
    b.finish(1)
}

/// A stack of self-attention blocks over sequences of `positions` tokens.
pub fn attention_chain(
    blocks: usize,
    width: usize,
    heads: usize,
    positions: usize,
    adapted: AdaptedProjections,
) -> ModelGraph {
    assert!(blocks >= 1 && heads >= 1 && width % heads == 0);
    let mut b = Builder::default();
    let mut cur = b.node("x", NodeKind::Input { width }, &[]);
    for l in 0..blocks {
        let prefix = format!("blk{l}");
        cur = b.attention(&prefix, &cur, &cur, width, heads, adapted);
    }
    b.node("y", NodeKind::Output, &[&cur]);
    b.finish(positions)
}

/// Encoder-decoder transformer with adapters on every key and value projection.
///
/// The encoder is `layers` self-attention blocks over the input. The decoder
/// stream starts from a fixed (unadapted) embedding of the same input; each
/// decoder layer cross-attends to the final encoder output and then applies
/// self-attention to the result, so decoder self-attention sits downstream
/// of cross-attention.
pub fn encoder_decoder(layers: usize, width: usize, heads: usize, positions: usize) -> ModelGraph {
    assert!(layers >= 1 && heads >= 1 && width % heads == 0);
    let mut b = Builder::default();
    let x = b.node("x", NodeKind::Input { width }, &[]);
    let mut enc = x.clone();
    for l in 0..layers {
        enc = b.attention(&format!("enc{l}.self"), &enc, &enc, width, heads, AdaptedProjections::KV);
    }
    let mut dec = b.linear("dec.embed", &x, width, width, false);
    for l in 0..layers {
        dec = b.attention(&format!("dec{l}.cross"), &dec, &enc, width, heads, AdaptedProjections::KV);
        dec = b.attention(&format!("dec{l}.self"), &dec, &dec, width, heads, AdaptedProjections::KV);
    }
    b.node("y", NodeKind::Output, &[&dec]);
    b.finish(positions)
}
