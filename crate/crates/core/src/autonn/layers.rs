use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, NnError, NodeId, ParamStore, Tensor};

/// He-uniform initialization: `U(-sqrt(6/fan_in), sqrt(6/fan_in))`.
pub fn he_uniform(shape: &[usize], fan_in: usize, seed: u64) -> Tensor {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product")
}

/// Parameter names of one multi-head self-attention block.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub wq: String,
    pub bq: String,
    pub wk: String,
    pub bk: String,
    pub wv: String,
    pub bv: String,
    pub wo: String,
    pub bo: String,
}

impl AttentionParams {
    pub fn with_prefix(prefix: &str) -> Self {
        let n = |s: &str| format!("{prefix}.{s}");
        Self {
            wq: n("wq"),
            bq: n("bq"),
            wk: n("wk"),
            bk: n("bk"),
            wv: n("wv"),
            bv: n("bv"),
            wo: n("wo"),
            bo: n("bo"),
        }
    }

    /// Registers `D×D` projections and zero biases.
    pub fn init(&self, store: &mut ParamStore, dim: usize, seed: u64) {
        for (i, (w, b)) in [(&self.wq, &self.bq), (&self.wk, &self.bk), (&self.wv, &self.bv), (&self.wo, &self.bo)]
            .into_iter()
            .enumerate()
        {
            store.insert(w.clone(), he_uniform(&[dim, dim], dim, seed.wrapping_add(i as u64)));
            store.insert(b.clone(), Tensor::zeros(&[dim]));
        }
    }
}

/// Multi-head self-attention over groups of `group` token rows of width D:
/// project to Q, K, V, attend per head with `softmax(QKᵀ/√(D/heads))V`,
/// concatenate heads, apply the output projection.
/// Returns the output node and the attention-core node (for its weights).
pub fn multi_head_self_attention(
    graph: &mut Graph,
    store: &ParamStore,
    tokens: NodeId,
    params: &AttentionParams,
    heads: usize,
    group: usize,
) -> Result<(NodeId, NodeId), NnError> {
    let d = graph.value(tokens).shape().get(1).copied().unwrap_or(0);
    if heads == 0 || d % heads != 0 {
        return Err(NnError::ShapeMismatch(format!("width {d} not divisible by {heads} heads")));
    }
    let proj = |w: &str, b: &str, g: &mut Graph| -> Result<NodeId, NnError> {
        let w = g.param(store, w)?;
        let b = g.param(store, b)?;
        g.affine(tokens, w, b)
    };
    let q = proj(&params.wq, &params.bq, graph)?;
    let k = proj(&params.wk, &params.bk, graph)?;
    let v = proj(&params.wv, &params.bv, graph)?;
    let core = graph.attention(q, k, v, heads, group)?;
    let wo = graph.param(store, &params.wo)?;
    let bo = graph.param(store, &params.bo)?;
    let out = graph.affine(core, wo, bo)?;
    Ok((out, core))
}
