//! Composite operations built from tape primitives.

use super::graph::{Graph, NodeId};
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// Row `index` of an embedding table.
pub fn embed(g: &mut Graph, store: &ParamStore, table: ParamId, index: usize) -> Result<NodeId> {
    g.gather(store, table, index)
}

/// Projection matrices of one single-head attention block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
}

impl AttentionParams {
    /// `w_q: query_dim x d`, `w_k`, `w_v`: `key_dim x d`.
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        query_dim: usize,
        key_dim: usize,
        d: usize,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        Ok(Self {
            w_q: store.init_uniform(&format!("{prefix}.w_q"), query_dim, d, query_dim, rng)?,
            w_k: store.init_uniform(&format!("{prefix}.w_k"), key_dim, d, key_dim, rng)?,
            w_v: store.init_uniform(&format!("{prefix}.w_v"), key_dim, d, key_dim, rng)?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Attended {
    /// `1 x d`
    pub output: NodeId,
    /// `1 x M` softmax weights.
    pub weights: NodeId,
}

/// Projected keys and values; independent of the query, so one projection can
/// serve every step of a window.
pub fn project_kv(
    g: &mut Graph,
    store: &ParamStore,
    keys: NodeId,
    values: NodeId,
    p: &AttentionParams,
) -> Result<(NodeId, NodeId)> {
    let wk = g.param(store, p.w_k);
    let wv = g.param(store, p.w_v);
    Ok((g.matmul(keys, wk)?, g.matmul(values, wv)?))
}

/// `softmax(Q K^T / sqrt(d)) V` with `Q = query W_Q` and pre-projected `K`, `V`.
pub fn attend(
    g: &mut Graph,
    store: &ParamStore,
    query: NodeId,
    k: NodeId,
    v: NodeId,
    p: &AttentionParams,
) -> Result<Attended> {
    let wq = g.param(store, p.w_q);
    if g.shape(query).1 != g.shape(wq).0 {
        return Err(Error::shape(format!(
            "query width {} but W_Q has {} rows",
            g.shape(query).1,
            g.shape(wq).0
        )));
    }
    let q = g.matmul(query, wq)?;
    let d = g.shape(q).1;
    let scores = g.matmul_t(q, k)?;
    let scaled = g.scale(scores, 1.0 / (d as f64).sqrt());
    let weights = g.softmax_rows(scaled);
    let output = g.matmul(weights, v)?;
    Ok(Attended { output, weights })
}

pub fn attention(
    g: &mut Graph,
    store: &ParamStore,
    query: NodeId,
    keys: NodeId,
    values: NodeId,
    p: &AttentionParams,
) -> Result<Attended> {
    if g.shape(keys) != g.shape(values) {
        return Err(Error::shape(format!(
            "keys {:?} vs values {:?}",
            g.shape(keys),
            g.shape(values)
        )));
    }
    let (k, v) = project_kv(g, store, keys, values, p)?;
    attend(g, store, query, k, v, p)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Affine layers with tanh between them and identity after the last.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    /// `dims = [input, hidden..., output]`
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        dims: &[usize],
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::invalid("an MLP needs input and output widths"));
        }
        let mut layers = Vec::new();
        for (i, w) in dims.windows(2).enumerate() {
            layers.push(Dense {
                weight: store.init_uniform(&format!("{prefix}.{i}.w"), w[0], w[1], w[0], rng)?,
                bias: store.init_uniform(&format!("{prefix}.{i}.b"), 1, w[1], w[0], rng)?,
            });
        }
        Ok(Self { layers })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, input: NodeId) -> Result<NodeId> {
        let mut x = input;
        for (i, layer) in self.layers.iter().enumerate() {
            let w = g.param(store, layer.weight);
            let b = g.param(store, layer.bias);
            let xw = g.matmul(x, w)?;
            x = g.add(xw, b)?;
            if i + 1 < self.layers.len() {
                x = g.tanh(x);
            }
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::gradcheck::grad_check;
    use crate::diffcore::tensor::Tensor;

    fn attention_fixture(m: usize, seed: u64) -> (ParamStore, AttentionParams, ParamId, ParamId) {
        let mut rng = SplitMix64::new(seed);
        let mut store = ParamStore::new();
        let p = AttentionParams::register(&mut store, "att", 3, 4, 4, &mut rng).unwrap();
        let q = store.init_uniform("q", 1, 3, 1, &mut rng).unwrap();
        let table = store.init_uniform("table", m, 4, 1, &mut rng).unwrap();
        (store, p, q, table)
    }

    #[test]
    fn single_candidate_returns_its_value() {
        let (store, p, q, table) = attention_fixture(1, 2);
        let mut g = Graph::new();
        let qn = g.param(&store, q);
        let t = g.param(&store, table);
        let a = attention(&mut g, &store, qn, t, t, &p).unwrap();
        assert_eq!(g.value(a.weights).data, vec![1.0]);
        let expect = store.value(table).matmul(store.value(p.w_v));
        for (x, y) in g.value(a.output).data.iter().zip(&expect.data) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn identical_keys_give_uniform_weights() {
        let (mut store, p, q, table) = attention_fixture(5, 3);
        let row: Vec<f64> = store.value(table).row(0).to_vec();
        let t = &mut store.get_mut(table).value;
        for r in 0..5 {
            t.row_mut(r).copy_from_slice(&row);
        }
        let mut g = Graph::new();
        let qn = g.param(&store, q);
        let t = g.param(&store, table);
        let a = attention(&mut g, &store, qn, t, t, &p).unwrap();
        for w in &g.value(a.weights).data {
            assert!((w - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn weights_are_a_distribution() {
        for seed in 0..20 {
            let (store, p, q, table) = attention_fixture(7, seed);
            let mut g = Graph::new();
            let qn = g.param(&store, q);
            let t = g.param(&store, table);
            let a = attention(&mut g, &store, qn, t, t, &p).unwrap();
            let w = &g.value(a.weights).data;
            assert!(w.iter().all(|&x| x > 0.0));
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_shape_mismatch() {
        let (store, p, _, table) = attention_fixture(3, 1);
        let mut g = Graph::new();
        let bad_q = g.input(Tensor::zeros(1, 5));
        let t = g.param(&store, table);
        assert!(attention(&mut g, &store, bad_q, t, t, &p).is_err());
        let other = g.input(Tensor::zeros(2, 4));
        let q = g.input(Tensor::zeros(1, 3));
        assert!(attention(&mut g, &store, q, t, other, &p).is_err());
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        // 3 candidates, 4-wide keys; loss = CE of the output against a class.
        let (mut store, p, q, table) = attention_fixture(3, 7);
        let report = grad_check(&mut store, 1e-6, |g, s| {
            let qn = g.param(s, q);
            let t = g.param(s, table);
            let a = attention(g, s, qn, t, t, &p)?;
            g.cross_entropy(a.output, 1)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-5, "{report:?}");
    }

    #[test]
    fn mlp_null_and_identity_maps() {
        let mut rng = SplitMix64::new(1);
        let mut store = ParamStore::new();
        let mlp = Mlp::register(&mut store, "m", &[3, 4, 2], &mut rng).unwrap();
        for p in store.iter_mut() {
            p.value.fill(0.0);
        }
        let mut g = Graph::new();
        let x = g.input(Tensor::row_vector(vec![1.0, -2.0, 3.0]));
        let y = mlp.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.value(y).data, vec![0.0, 0.0]);

        let mut store = ParamStore::new();
        let id = Mlp::register(&mut store, "id", &[3, 3], &mut rng).unwrap();
        let w = &mut store.get_mut(id.layers[0].weight).value;
        w.fill(0.0);
        for i in 0..3 {
            w.data[i * 3 + i] = 1.0;
        }
        store.get_mut(id.layers[0].bias).value.fill(0.0);
        let mut g = Graph::new();
        let x = g.input(Tensor::row_vector(vec![1.0, -2.0, 3.0]));
        let y = id.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.value(y).data, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let mut rng = SplitMix64::new(5);
        let mut store = ParamStore::new();
        let mlp = Mlp::register(&mut store, "m", &[4, 8, 3], &mut rng).unwrap();
        let x = store.init_uniform("x", 1, 4, 1, &mut rng).unwrap();
        let report = grad_check(&mut store, 1e-6, |g, s| {
            let xn = g.param(s, x);
            let y = mlp.forward(g, s, xn)?;
            g.cross_entropy(y, 2)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-5, "{report:?}");
    }

    #[test]
    fn mlp_shape_mismatch() {
        let mut rng = SplitMix64::new(5);
        let mut store = ParamStore::new();
        let mlp = Mlp::register(&mut store, "m", &[4, 2], &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(1, 3));
        assert!(mlp.forward(&mut g, &store, x).is_err());
        assert!(Mlp::register(&mut store, "z", &[4], &mut rng).is_err());
    }
}
