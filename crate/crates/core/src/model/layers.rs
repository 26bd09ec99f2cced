//! Multi-head attention and the post-norm Transformer block shared by the
//! object encoder, the sentence encoder and the multi-modal decoder.

use std::rc::Rc;

use rand::Rng;

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Mask, NodeId, ParamId, ParamStore, Tensor};

/// Parameter handles of one Transformer block.
#[derive(Clone, Debug)]
pub struct LayerIds {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
}

pub(crate) fn uniform<T: Scalar>(rng: &mut impl Rng, shape: &[usize], range: f64) -> Tensor<T> {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = T::of(rng.random_range(-range..range));
    }
    t
}

impl LayerIds {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        hidden: usize,
        ff: usize,
        range: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut w = |name: &str, shape: &[usize], store: &mut ParamStore<T>| {
            store.add(format!("{prefix}.{name}"), uniform(rng, shape, range))
        };
        let wq = w("attn.wq", &[hidden, hidden], store)?;
        let wk = w("attn.wk", &[hidden, hidden], store)?;
        let wv = w("attn.wv", &[hidden, hidden], store)?;
        let wo = w("attn.wo", &[hidden, hidden], store)?;
        let w1 = w("ffn.w1", &[hidden, ff], store)?;
        let w2 = w("ffn.w2", &[ff, hidden], store)?;
        let z = |n: usize| Tensor::<T>::zeros(&[n]);
        let o = |n: usize| Tensor::<T>::full(&[n], T::one());
        Ok(LayerIds {
            wq,
            wk,
            wv,
            wo,
            w1,
            w2,
            bq: store.add(format!("{prefix}.attn.bq"), z(hidden))?,
            bk: store.add(format!("{prefix}.attn.bk"), z(hidden))?,
            bv: store.add(format!("{prefix}.attn.bv"), z(hidden))?,
            bo: store.add(format!("{prefix}.attn.bo"), z(hidden))?,
            ln1_g: store.add(format!("{prefix}.ln1.gamma"), o(hidden))?,
            ln1_b: store.add(format!("{prefix}.ln1.beta"), z(hidden))?,
            b1: store.add(format!("{prefix}.ffn.b1"), z(ff))?,
            b2: store.add(format!("{prefix}.ffn.b2"), z(hidden))?,
            ln2_g: store.add(format!("{prefix}.ln2.gamma"), o(hidden))?,
            ln2_b: store.add(format!("{prefix}.ln2.beta"), z(hidden))?,
        })
    }
}

/// `x W + b` for a rank-2 node.
pub fn linear<T: Scalar>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    x: NodeId,
    w: ParamId,
    b: ParamId,
) -> Result<NodeId> {
    let w = g.param(p, w);
    let b = g.param(p, b);
    let xw = g.matmul(x, w)?;
    g.add_bias(xw, b)
}

/// Key and value projections of a context block.
pub fn project_kv<T: Scalar>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    l: &LayerIds,
    ctx: NodeId,
) -> Result<(NodeId, NodeId)> {
    let k = linear(g, p, ctx, l.wk, l.bk)?;
    let v = linear(g, p, ctx, l.wv, l.bv)?;
    Ok((k, v))
}

/// Attention sublayer against already-projected keys and values, including
/// the query and output projections.
#[allow(clippy::too_many_arguments)]
pub fn attend<T: Scalar>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    l: &LayerIds,
    x: NodeId,
    k: NodeId,
    v: NodeId,
    heads: usize,
    allow: Option<Rc<Mask>>,
) -> Result<NodeId> {
    let q = linear(g, p, x, l.wq, l.bq)?;
    let a = g.attention(q, k, v, heads, allow)?;
    linear(g, p, a, l.wo, l.bo)
}

/// Multi-head attention of `queries` over `context`.
pub fn attention<T: Scalar>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    l: &LayerIds,
    queries: NodeId,
    context: NodeId,
    heads: usize,
    allow: Option<Rc<Mask>>,
) -> Result<NodeId> {
    let (k, v) = project_kv(g, p, l, context)?;
    attend(g, p, l, queries, k, v, heads, allow)
}

/// Block body given projected keys/values: attention, residual, LayerNorm,
/// then feed-forward, residual, LayerNorm.
#[allow(clippy::too_many_arguments)]
pub fn block_with_kv<T: Scalar>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    l: &LayerIds,
    x: NodeId,
    k: NodeId,
    v: NodeId,
    heads: usize,
    allow: Option<Rc<Mask>>,
    eps: T,
) -> Result<NodeId> {
    let a = attend(g, p, l, x, k, v, heads, allow)?;
    let r1 = g.add(x, a)?;
    let (g1, b1) = (g.param(p, l.ln1_g), g.param(p, l.ln1_b));
    let h1 = g.layer_norm(r1, g1, b1, eps)?;
    let f = linear(g, p, h1, l.w1, l.b1)?;
    let f = g.gelu(f);
    let f = linear(g, p, f, l.w2, l.b2)?;
    let r2 = g.add(h1, f)?;
    let (g2, b2) = (g.param(p, l.ln2_g), g.param(p, l.ln2_b));
    g.layer_norm(r2, g2, b2, eps)
}

/// One post-norm Transformer block: rows of `h` attend `context`.
#[allow(clippy::too_many_arguments)]
pub fn transformer_layer<T: Scalar>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    l: &LayerIds,
    h: NodeId,
    context: NodeId,
    heads: usize,
    allow: Option<Rc<Mask>>,
    eps: T,
) -> Result<NodeId> {
    let (k, v) = project_kv(g, p, l, context)?;
    block_with_kv(g, p, l, h, k, v, heads, allow, eps)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn setup(hidden: usize) -> (ParamStore<f64>, LayerIds) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let ids = LayerIds::register(&mut store, "l0", hidden, 2 * hidden, 0.3, &mut rng).unwrap();
        (store, ids)
    }

    fn rand_input(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        uniform(&mut rng, &[rows, cols], 1.0)
    }

    #[test]
    fn single_context_token_returns_its_value_projection() {
        let (store, l) = setup(8);
        let mut g = Graph::new();
        let q = g.constant(rand_input(5, 8, 1));
        let c = g.constant(rand_input(1, 8, 2));
        let out = attention(&mut g, &store, &l, q, c, 2, None).unwrap();
        // softmax over one element is exactly 1: output = (c Wv + bv) Wo + bo
        let v = linear(&mut g, &store, c, l.wv, l.bv).unwrap();
        let want = linear(&mut g, &store, v, l.wo, l.bo).unwrap();
        for r in 0..5 {
            for (a, b) in g.value(out).row(r).iter().zip(g.value(want).row(0)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_mask_attends_self_only() {
        let (store, l) = setup(8);
        let mut g = Graph::new();
        let x = g.constant(rand_input(4, 8, 5));
        let eye = Rc::new(Mask::from_fn(4, 4, |r, c| r == c));
        let out = attention(&mut g, &store, &l, x, x, 2, Some(eye)).unwrap();
        let v = linear(&mut g, &store, x, l.wv, l.bv).unwrap();
        let want = linear(&mut g, &store, v, l.wo, l.bo).unwrap();
        for (a, b) in g.value(out).data().iter().zip(g.value(want).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn all_true_mask_is_a_bitwise_no_op() {
        let (store, l) = setup(8);
        let mut g = Graph::new();
        let x = g.constant(rand_input(6, 8, 9));
        let a = transformer_layer(&mut g, &store, &l, x, x, 2, None, 1e-5).unwrap();
        let m = Rc::new(Mask::all(6, 6));
        let b = transformer_layer(&mut g, &store, &l, x, x, 2, Some(m), 1e-5).unwrap();
        assert_eq!(g.value(a), g.value(b));
    }

    #[test]
    fn fully_masked_row_is_rejected() {
        let (store, l) = setup(8);
        let mut g = Graph::new();
        let x = g.constant(rand_input(3, 8, 9));
        let mut m = Mask::all(3, 3);
        for c in 0..3 {
            m.set(1, c, false);
        }
        let err = attention(&mut g, &store, &l, x, x, 2, Some(Rc::new(m))).unwrap_err();
        assert!(err.to_string().contains("fully masked attention row"));
    }

    #[test]
    fn zeroed_output_projections_reduce_to_layer_norm_cascade() {
        let (mut store, l) = setup(8);
        for id in [l.wo, l.bo, l.w2, l.b2] {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = Graph::new();
        let x = g.constant(rand_input(5, 8, 4));
        let out = transformer_layer(&mut g, &store, &l, x, x, 2, None, 1e-5).unwrap();
        let (g1, b1) = (g.param(&store, l.ln1_g), g.param(&store, l.ln1_b));
        let n1 = g.layer_norm(x, g1, b1, 1e-5).unwrap();
        let (g2, b2) = (g.param(&store, l.ln2_g), g.param(&store, l.ln2_b));
        let n2 = g.layer_norm(n1, g2, b2, 1e-5).unwrap();
        assert_eq!(g.value(out), g.value(n2));
    }

    #[test]
    fn output_shape_follows_query_rows() {
        let (store, l) = setup(8);
        for t in 1..=8 {
            let mut g = Graph::new();
            let x = g.constant(rand_input(t, 8, t as u64));
            let out = transformer_layer(&mut g, &store, &l, x, x, 2, None, 1e-5).unwrap();
            assert_eq!(g.shape(out), &[t, 8]);
        }
    }
}
