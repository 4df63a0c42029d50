//! Tape of forward values with reverse-mode gradients.
//!
//! Nodes are appended in evaluation order, so the tape is already a topological
//! order and `backward` walks it once from the end. Parameters enter the tape
//! either whole (`param`) or as a single row (`gather`); their gradients are
//! accumulated into the `ParamStore` at the end of `backward`.

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::{softmax, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(ParamId),
    Gather {
        param: ParamId,
        row: usize,
    },
    MatMul(NodeId, NodeId),
    MatMulT(NodeId, NodeId),
    /// `b` may be a single row broadcast over the rows of `a`.
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    OneMinus(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    SoftmaxRows(NodeId),
    Concat(Vec<NodeId>),
    WeightedSum(Vec<(NodeId, f64)>),
    Sum(Vec<NodeId>),
    CrossEntropy {
        logits: NodeId,
        target: usize,
        probs: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.data[0]
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Input)
    }

    /// Whole parameter tensor. Repeated calls within one tape share the node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&n) = self.params.get(&id) {
            return n;
        }
        let n = self.push(store.value(id).clone(), Op::Param(id));
        self.params.insert(id, n);
        n
    }

    /// One row of a parameter table; the gradient scatters back into that row only.
    pub fn gather(&mut self, store: &ParamStore, id: ParamId, row: usize) -> Result<NodeId> {
        let table = store.value(id);
        if row >= table.rows {
            return Err(Error::out_of_range(
                format!("rows of {}", store.get(id).name),
                row,
                table.rows,
            ));
        }
        let value = Tensor::row_vector(table.row(row).to_vec());
        Ok(self.push(value, Op::Gather { param: id, row }))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols != vb.rows {
            return Err(Error::shape(format!(
                "matmul {:?} x {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let v = va.matmul(vb);
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// `a * b^T`
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols != vb.cols {
            return Err(Error::shape(format!(
                "matmul_t {:?} x {:?}^T",
                va.shape(),
                vb.shape()
            )));
        }
        let v = va.matmul_t(vb);
        Ok(self.push(v, Op::MatMulT(a, b)))
    }

    fn elementwise(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
        allow_broadcast: bool,
    ) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let broadcast = allow_broadcast && vb.rows == 1 && vb.cols == va.cols && va.rows > 1;
        if va.shape() != vb.shape() && !broadcast {
            return Err(Error::shape(format!(
                "{name} {:?} with {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let cols = va.cols;
        let data = va
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                f(
                    x,
                    if broadcast {
                        vb.data[i % cols]
                    } else {
                        vb.data[i]
                    },
                )
            })
            .collect();
        let v = Tensor::from_vec(va.rows, va.cols, data)?;
        Ok(self.push(v, op))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, "add", |x, y| x + y, Op::Add(a, b), true)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, "sub", |x, y| x - y, Op::Sub(a, b), false)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, "mul", |x, y| x * y, Op::Mul(a, b), false)
    }

    fn map(&mut self, a: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let va = self.value(a);
        let v = Tensor {
            rows: va.rows,
            cols: va.cols,
            data: va.data.iter().map(|&x| f(x)).collect(),
        };
        self.push(v, op)
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        self.map(a, |x| x * k, Op::Scale(a, k))
    }

    /// `1 - a`
    pub fn one_minus(&mut self, a: NodeId) -> NodeId {
        self.map(a, |x| 1.0 - x, Op::OneMinus(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.map(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid(a))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let mut data = Vec::with_capacity(va.len());
        for r in 0..va.rows {
            data.extend(softmax(va.row(r)));
        }
        let v = Tensor {
            rows: va.rows,
            cols: va.cols,
            data,
        };
        self.push(v, Op::SoftmaxRows(a))
    }

    /// Concatenate row vectors end to end.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.rows != 1 {
                return Err(Error::shape(format!("concat of non-row {:?}", v.shape())));
            }
            data.extend_from_slice(&v.data);
        }
        let v = Tensor::row_vector(data);
        Ok(self.push(v, Op::Concat(parts.to_vec())))
    }

    /// `sum_j c_j * x_j` with constant coefficients.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> Result<NodeId> {
        let Some(&(first, _)) = terms.first() else {
            return Err(Error::shape("weighted sum of nothing"));
        };
        let shape = self.shape(first);
        let mut acc = Tensor::zeros(shape.0, shape.1);
        for &(n, c) in terms {
            let v = self.value(n);
            if v.shape() != shape {
                return Err(Error::shape(format!(
                    "weighted sum {:?} with {:?}",
                    shape,
                    v.shape()
                )));
            }
            for (a, &x) in acc.data.iter_mut().zip(&v.data) {
                *a += c * x;
            }
        }
        Ok(self.push(acc, Op::WeightedSum(terms.to_vec())))
    }

    /// Sum of scalar nodes, accumulated left to right.
    pub fn sum(&mut self, terms: &[NodeId]) -> Result<NodeId> {
        let mut total = 0.0;
        for &t in terms {
            let v = self.value(t);
            if v.len() != 1 {
                return Err(Error::shape(format!("sum of non-scalar {:?}", v.shape())));
            }
            total += v.data[0];
        }
        Ok(self.push(Tensor::scalar(total), Op::Sum(terms.to_vec())))
    }

    /// `-ln softmax(logits)[target]`, max-shifted.
    pub fn cross_entropy(&mut self, logits: NodeId, target: usize) -> Result<NodeId> {
        let v = self.value(logits);
        if v.rows != 1 {
            return Err(Error::shape(format!("logits shape {:?}", v.shape())));
        }
        if target >= v.cols {
            return Err(Error::out_of_range("cross-entropy target", target, v.cols));
        }
        let max = v.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let shifted: Vec<f64> = v.data.iter().map(|&x| (x - max).exp()).collect();
        let z: f64 = shifted.iter().sum();
        let loss = z.ln() - (v.data[target] - max);
        let probs = shifted.into_iter().map(|e| e / z).collect();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                target,
                probs,
            },
        ))
    }

    /// Back-propagate `d root / d node` for a scalar root and add parameter
    /// gradients into `store`.
    pub fn backward(&self, root: NodeId, store: &mut ParamStore) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::shape("backward from a non-scalar node"));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::scalar(1.0));

        fn acc(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
            match &mut grads[id.0] {
                Some(t) => t.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Param(p) => store.get_mut(*p).grad.add_assign(&g),
                Op::Gather { param, row } => {
                    let slot = store.get_mut(*param).grad.row_mut(*row);
                    for (s, v) in slot.iter_mut().zip(&g.data) {
                        *s += v;
                    }
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    acc(&mut grads, *a, g.matmul_t(vb));
                    acc(&mut grads, *b, va.t_matmul(&g));
                }
                Op::MatMulT(a, b) => {
                    // out = a b^T: da = g b, db = g^T a
                    let (va, vb) = (self.value(*a), self.value(*b));
                    acc(&mut grads, *a, g.matmul(vb));
                    acc(&mut grads, *b, g.t_matmul(va));
                }
                Op::Add(a, b) => {
                    let vb = self.value(*b);
                    let gb = if vb.rows == 1 && g.rows > 1 {
                        let mut s = Tensor::zeros(1, g.cols);
                        for r in 0..g.rows {
                            for (x, y) in s.data.iter_mut().zip(g.row(r)) {
                                *x += y;
                            }
                        }
                        s
                    } else {
                        g.clone()
                    };
                    acc(&mut grads, *b, gb);
                    acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    let mut neg = g.clone();
                    neg.data.iter_mut().for_each(|x| *x = -*x);
                    acc(&mut grads, *b, neg);
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let ga = zip_map(&g, vb, |x, y| x * y);
                    let gb = zip_map(&g, va, |x, y| x * y);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Scale(a, k) => {
                    let k = *k;
                    acc(&mut grads, *a, map(&g, |x| x * k));
                }
                Op::OneMinus(a) => acc(&mut grads, *a, map(&g, |x| -x)),
                Op::Tanh(a) => acc(
                    &mut grads,
                    *a,
                    zip_map(&g, &node.value, |x, y| x * (1.0 - y * y)),
                ),
                Op::Sigmoid(a) => acc(
                    &mut grads,
                    *a,
                    zip_map(&g, &node.value, |x, y| x * y * (1.0 - y)),
                ),
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = Tensor::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let inner: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for (o, (p, q)) in ga.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                            *o = p * (q - inner);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let n = self.value(p).cols;
                        acc(
                            &mut grads,
                            p,
                            Tensor::row_vector(g.data[off..off + n].to_vec()),
                        );
                        off += n;
                    }
                }
                Op::WeightedSum(terms) => {
                    for &(n, c) in terms {
                        acc(&mut grads, n, map(&g, |x| x * c));
                    }
                }
                Op::Sum(terms) => {
                    for &t in terms {
                        acc(&mut grads, t, g.clone());
                    }
                }
                Op::CrossEntropy {
                    logits,
                    target,
                    probs,
                } => {
                    let scale = g.data[0];
                    let mut gl = Tensor::row_vector(probs.iter().map(|p| p * scale).collect());
                    gl.data[*target] -= scale;
                    acc(&mut grads, *logits, gl);
                }
            }
        }
        Ok(())
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor {
        rows: t.rows,
        cols: t.cols,
        data: t.data.iter().map(|&x| f(x)).collect(),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor {
        rows: a.rows,
        cols: a.cols,
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}
