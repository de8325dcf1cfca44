//! Matrix-level reverse-mode differentiation.
//!
//! A [`Tape`] records every intermediate matrix of one forward pass together
//! with the operation that produced it. [`Tape::backward`] walks the record in
//! reverse and accumulates exact gradients for every parameter the loss
//! touched; untouched parameters get zero tensors. Accumulation order is fixed
//! by the recording order, so gradients are bit-reproducible.

use std::collections::HashMap;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::graph::NormalizedAdjacency;
use crate::model::{GradientSet, ParamStore};
use crate::training::loss::mp_loss_with_grad;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// One row of a multi-positive loss: flat row-major indices into the score
/// matrix for the positives and for the negatives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LossGroup {
    pub pos: Vec<usize>,
    pub neg: Vec<usize>,
}

enum Op<'a> {
    Param(usize),
    Const,
    MatMul(NodeId, NodeId),
    MatMulBT(NodeId, NodeId),
    SpMM(&'a NormalizedAdjacency, NodeId),
    Add(NodeId, NodeId),
    AddRowBias(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    RowNormalize(NodeId, Vec<f64>),
    GatherRows(NodeId, Vec<usize>),
    Reshape(NodeId),
    Gate { a: NodeId, b: NodeId, alpha: NodeId },
    PairwiseAdd { a: NodeId, b: NodeId, pairs: Vec<(usize, usize)> },
    SumSquares(NodeId),
    MpLoss { scores: NodeId, coef: Vec<(usize, f64)> },
    WeightedSum(Vec<(NodeId, f64)>),
}

struct Node<'a> {
    op: Op<'a>,
    value: DMatrix<f64>,
}

pub struct Tape<'a> {
    params: &'a ParamStore,
    nodes: Vec<Node<'a>>,
    param_nodes: HashMap<usize, NodeId>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn shape_err<T>(op: &str, a: (usize, usize), b: (usize, usize)) -> Result<T> {
    Err(Error::Shape(format!("{op}: {}x{} vs {}x{}", a.0, a.1, b.0, b.1)))
}

fn accumulate(slot: &mut Option<DMatrix<f64>>, g: DMatrix<f64>) {
    match slot {
        Some(acc) => *acc += g,
        None => *slot = Some(g),
    }
}

impl<'a> Tape<'a> {
    pub fn new(params: &'a ParamStore) -> Self {
        Tape { params, nodes: Vec::new(), param_nodes: HashMap::new() }
    }

    pub fn params(&self) -> &'a ParamStore {
        self.params
    }

    fn push(&mut self, op: Op<'a>, value: DMatrix<f64>) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &DMatrix<f64> {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value[(0, 0)]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn param(&mut self, idx: usize) -> NodeId {
        if let Some(&id) = self.param_nodes.get(&idx) {
            return id;
        }
        let id = self.push(Op::Param(idx), self.params.get(idx).clone());
        self.param_nodes.insert(idx, id);
        id
    }

    pub fn param_named(&mut self, name: &str) -> Result<NodeId> {
        let idx = self
            .params
            .index_of(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?;
        Ok(self.param(idx))
    }

    pub fn constant(&mut self, value: DMatrix<f64>) -> NodeId {
        self.push(Op::Const, value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.nrows() {
            return shape_err("matmul", va.shape(), vb.shape());
        }
        let v = va * vb;
        Ok(self.push(Op::MatMul(a, b), v))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.ncols() {
            return shape_err("matmul_bt", va.shape(), vb.shape());
        }
        let v = va * vb.transpose();
        Ok(self.push(Op::MatMulBT(a, b), v))
    }

    /// `Â · a` for a symmetric sparse adjacency.
    pub fn spmm(&mut self, adj: &'a NormalizedAdjacency, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        if adj.n() != va.nrows() {
            return shape_err("spmm", (adj.n(), adj.n()), va.shape());
        }
        let v = adj.matmul(va);
        Ok(self.push(Op::SpMM(adj, a), v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return shape_err("add", va.shape(), vb.shape());
        }
        let v = va + vb;
        Ok(self.push(Op::Add(a, b), v))
    }

    /// Adds the `1×c` row `bias` to every row of `a`.
    pub fn add_row_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(bias));
        if vb.nrows() != 1 || vb.ncols() != va.ncols() {
            return shape_err("add_row_bias", va.shape(), vb.shape());
        }
        let mut v = va.clone();
        for mut row in v.row_iter_mut() {
            row += vb.row(0);
        }
        Ok(self.push(Op::AddRowBias(a, bias), v))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a) * c;
        self.push(Op::Scale(a, c), v)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), v)
    }

    /// L2-normalizes every row. A zero row is an error, never patched.
    pub fn row_normalize(&mut self, a: NodeId, what: &'static str) -> Result<NodeId> {
        let mut v = self.value(a).clone();
        let mut norms = Vec::with_capacity(v.nrows());
        for mut row in v.row_iter_mut() {
            let n = row.norm();
            if !(n > 0.0) || !n.is_finite() {
                return Err(Error::DegenerateNorm(what));
            }
            row /= n;
            norms.push(n);
        }
        Ok(self.push(Op::RowNormalize(a, norms), v))
    }

    pub fn gather_rows(&mut self, a: NodeId, rows: Vec<usize>) -> Result<NodeId> {
        let va = self.value(a);
        if let Some(&bad) = rows.iter().find(|&&r| r >= va.nrows()) {
            return Err(Error::Shape(format!("gather_rows: row {bad} of {}", va.nrows())));
        }
        let v = DMatrix::from_fn(rows.len(), va.ncols(), |i, j| va[(rows[i], j)]);
        Ok(self.push(Op::GatherRows(a, rows), v))
    }

    /// Reinterprets the row-major entry sequence of `a` as `rows × cols`.
    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        let va = self.value(a);
        if va.len() != rows * cols {
            return shape_err("reshape", va.shape(), (rows, cols));
        }
        let c_in = va.ncols();
        let v = DMatrix::from_fn(rows, cols, |i, j| {
            let f = i * cols + j;
            va[(f / c_in, f % c_in)]
        });
        Ok(self.push(Op::Reshape(a), v))
    }

    /// `(1 - σ(α))·a + σ(α)·b` with `alpha` a `1×1` node.
    pub fn gate(&mut self, a: NodeId, b: NodeId, alpha: NodeId) -> Result<NodeId> {
        let (va, vb, valpha) = (self.value(a), self.value(b), self.value(alpha));
        if va.shape() != vb.shape() || valpha.shape() != (1, 1) {
            return shape_err("gate", va.shape(), vb.shape());
        }
        let s = sigmoid(valpha[(0, 0)]);
        let v = va * (1.0 - s) + vb * s;
        Ok(self.push(Op::Gate { a, b, alpha }, v))
    }

    /// Row `k` of the output is `a[i_k] + b[j_k]`.
    pub fn pairwise_add(&mut self, a: NodeId, b: NodeId, pairs: Vec<(usize, usize)>) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.ncols() {
            return shape_err("pairwise_add", va.shape(), vb.shape());
        }
        if pairs.iter().any(|&(i, j)| i >= va.nrows() || j >= vb.nrows()) {
            return Err(Error::Shape("pairwise_add: pair index out of range".into()));
        }
        let v = DMatrix::from_fn(pairs.len(), va.ncols(), |k, c| va[(pairs[k].0, c)] + vb[(pairs[k].1, c)]);
        Ok(self.push(Op::PairwiseAdd { a, b, pairs }, v))
    }

    pub fn sum_squares(&mut self, a: NodeId) -> NodeId {
        let v = DMatrix::from_element(1, 1, self.value(a).norm_squared());
        self.push(Op::SumSquares(a), v)
    }

    /// Mean multi-positive loss over `groups`, each indexing the row-major
    /// entries of `scores`.
    pub fn mp_loss(&mut self, scores: NodeId, groups: &[LossGroup], tau: f64) -> Result<NodeId> {
        if groups.is_empty() {
            return Err(Error::InvalidArgument("multi-positive loss over zero groups".into()));
        }
        let vs = self.value(scores);
        let cols = vs.ncols();
        let at = |f: usize| vs[(f / cols, f % cols)];
        let total = vs.len();
        let inv = 1.0 / groups.len() as f64;
        let mut loss = 0.0;
        let mut coef = Vec::new();
        for g in groups {
            if g.pos.iter().chain(&g.neg).any(|&f| f >= total) {
                return Err(Error::Shape("mp_loss: score index out of range".into()));
            }
            let pos: Vec<f64> = g.pos.iter().map(|&f| at(f)).collect();
            let neg: Vec<f64> = g.neg.iter().map(|&f| at(f)).collect();
            let (l, gp, gn) = mp_loss_with_grad(&pos, &neg, tau)?;
            loss += l;
            coef.extend(g.pos.iter().zip(gp).map(|(&f, d)| (f, d * inv)));
            coef.extend(g.neg.iter().zip(gn).map(|(&f, d)| (f, d * inv)));
        }
        let v = DMatrix::from_element(1, 1, loss * inv);
        Ok(self.push(Op::MpLoss { scores, coef }, v))
    }

    /// `Σ w_i · x_i` over same-shaped nodes.
    pub fn weighted_sum(&mut self, terms: Vec<(NodeId, f64)>) -> Result<NodeId> {
        let Some(&(first, _)) = terms.first() else {
            return Err(Error::InvalidArgument("weighted_sum of nothing".into()));
        };
        let shape = self.value(first).shape();
        let mut v = DMatrix::zeros(shape.0, shape.1);
        for &(id, w) in &terms {
            let x = self.value(id);
            if x.shape() != shape {
                return shape_err("weighted_sum", shape, x.shape());
            }
            v += x * w;
        }
        Ok(self.push(Op::WeightedSum(terms), v))
    }

    /// Gradients of the `1×1` node `loss` with respect to every parameter.
    pub fn backward(&self, loss: NodeId) -> Result<GradientSet> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::Shape("backward needs a scalar loss".into()));
        }
        let mut out = self.params.zeros_like();
        let mut grads: Vec<Option<DMatrix<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(DMatrix::from_element(1, 1, 1.0));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Param(idx) => *out.get_mut(*idx) += g,
                Op::Const => {}
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    accumulate(&mut grads[a.0], &g * vb.transpose());
                    accumulate(&mut grads[b.0], va.transpose() * &g);
                }
                Op::MatMulBT(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    accumulate(&mut grads[a.0], &g * vb);
                    accumulate(&mut grads[b.0], g.transpose() * va);
                }
                Op::SpMM(adj, a) => accumulate(&mut grads[a.0], adj.matmul(&g)),
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[b.0], g);
                }
                Op::AddRowBias(a, bias) => {
                    let colsum = DMatrix::from_fn(1, g.ncols(), |_, j| g.column(j).sum());
                    accumulate(&mut grads[bias.0], colsum);
                    accumulate(&mut grads[a.0], g);
                }
                Op::Scale(a, c) => accumulate(&mut grads[a.0], g * *c),
                Op::Relu(a) => {
                    let va = self.value(*a);
                    let d = g.zip_map(va, |gi, x| if x > 0.0 { gi } else { 0.0 });
                    accumulate(&mut grads[a.0], d);
                }
                Op::RowNormalize(a, norms) => {
                    let y = &node.value;
                    let mut d = g;
                    for (i, n) in norms.iter().enumerate() {
                        let proj = y.row(i).dot(&d.row(i));
                        let row = (d.row(i) - y.row(i) * proj) / *n;
                        d.set_row(i, &row);
                    }
                    accumulate(&mut grads[a.0], d);
                }
                Op::GatherRows(a, rows) => {
                    let va = self.value(*a);
                    let mut d = DMatrix::zeros(va.nrows(), va.ncols());
                    for (k, &r) in rows.iter().enumerate() {
                        let row = d.row(r) + g.row(k);
                        d.set_row(r, &row);
                    }
                    accumulate(&mut grads[a.0], d);
                }
                Op::Reshape(a) => {
                    let va = self.value(*a);
                    let (c_in, c_out) = (va.ncols(), g.ncols());
                    let d = DMatrix::from_fn(va.nrows(), c_in, |i, j| {
                        let f = i * c_in + j;
                        g[(f / c_out, f % c_out)]
                    });
                    accumulate(&mut grads[a.0], d);
                }
                Op::Gate { a, b, alpha } => {
                    let s = sigmoid(self.value(*alpha)[(0, 0)]);
                    let diff = self.value(*b) - self.value(*a);
                    let dalpha = s * (1.0 - s) * g.dot(&diff);
                    accumulate(&mut grads[alpha.0], DMatrix::from_element(1, 1, dalpha));
                    accumulate(&mut grads[a.0], &g * (1.0 - s));
                    accumulate(&mut grads[b.0], g * s);
                }
                Op::PairwiseAdd { a, b, pairs } => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let mut da = DMatrix::zeros(va.nrows(), va.ncols());
                    let mut db = DMatrix::zeros(vb.nrows(), vb.ncols());
                    for (k, &(i, j)) in pairs.iter().enumerate() {
                        for c in 0..g.ncols() {
                            da[(i, c)] += g[(k, c)];
                            db[(j, c)] += g[(k, c)];
                        }
                    }
                    accumulate(&mut grads[a.0], da);
                    accumulate(&mut grads[b.0], db);
                }
                Op::SumSquares(a) => accumulate(&mut grads[a.0], self.value(*a) * (2.0 * g[(0, 0)])),
                Op::MpLoss { scores, coef } => {
                    let vs = self.value(*scores);
                    let cols = vs.ncols();
                    let mut d = DMatrix::zeros(vs.nrows(), cols);
                    for &(f, c) in coef {
                        d[(f / cols, f % cols)] += c * g[(0, 0)];
                    }
                    accumulate(&mut grads[scores.0], d);
                }
                Op::WeightedSum(terms) => {
                    for &(t, w) in terms {
                        accumulate(&mut grads[t.0], &g * w);
                    }
                }
            }
        }
        out.check_finite()?;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::fd_check;
    use crate::graph::{build_adjacency, Entity, EntityId, Graph, Side};
    use crate::rng::{substream, Stream};
    use rand::Rng;

    fn random(rng: &mut crate::rng::Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn path_graph(n: usize) -> Graph {
        let entities = (0..n)
            .map(|i| Entity {
                id: EntityId(i as u32),
                side: Side::Tcm,
                type_tag: "t".into(),
                name: format!("e{i}"),
                description: format!("e{i}"),
            })
            .collect();
        let edges = (1..n).map(|i| (EntityId(i as u32 - 1), EntityId(i as u32))).collect();
        Graph::new(Side::Tcm, entities, edges).unwrap()
    }

    /// Exercises every op in one scalar function and checks it against
    /// central finite differences.
    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = substream(11, Stream::Test);
        let mut params = ParamStore::new();
        params.push("x", random(&mut rng, 4, 3));
        params.push("w", random(&mut rng, 3, 3));
        params.push("bias", random(&mut rng, 1, 3));
        params.push("alpha", DMatrix::from_element(1, 1, 0.3));
        params.push("flat", random(&mut rng, 1, 6));
        let adj = build_adjacency(&path_graph(4)).unwrap();
        let groups = vec![
            LossGroup { pos: vec![0, 5], neg: vec![1, 2, 9] },
            LossGroup { pos: vec![7], neg: vec![3, 4, 6, 8] },
        ];

        let build = |p: &ParamStore| -> Result<(f64, GradientSet)> {
            let mut t = Tape::new(p);
            let x = t.param_named("x")?;
            let w = t.param_named("w")?;
            let bias = t.param_named("bias")?;
            let alpha = t.param_named("alpha")?;
            let flat = t.param_named("flat")?;
            let h = t.matmul(x, w)?;
            let h = t.spmm(&adj, h)?;
            let h = t.add_row_bias(h, bias)?;
            let r = t.relu(h);
            let m = t.reshape(flat, 3, 2)?;
            let hm = t.matmul(r, m)?;
            let hm2 = t.matmul_bt(hm, m)?;
            let s = t.scale(x, 0.5);
            let sum = t.add(hm2, s)?;
            let gated = t.gate(sum, x, alpha)?;
            let n = t.row_normalize(gated, "test")?;
            let rows = t.gather_rows(n, vec![0, 2, 2])?;
            let pair = t.pairwise_add(rows, n, vec![(0, 1), (1, 3), (2, 0)])?;
            let scores = t.matmul_bt(pair, n)?;
            let l = t.mp_loss(scores, &groups, 0.5)?;
            let reg = t.sum_squares(w);
            let total = t.weighted_sum(vec![(l, 1.0), (reg, 0.1)])?;
            let g = t.backward(total)?;
            Ok((t.scalar(total), g))
        };
        let (_, analytic) = build(&params).unwrap();
        let report = fd_check(&params, &analytic, |p| build(p).map(|r| r.0), 1e-5, 1e-6).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn untouched_parameter_has_zero_gradient() {
        let mut params = ParamStore::new();
        params.push("used", DMatrix::from_element(2, 2, 1.0));
        params.push("unused", DMatrix::from_element(3, 1, 1.0));
        let mut t = Tape::new(&params);
        let u = t.param(0);
        let l = t.sum_squares(u);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(0), &DMatrix::from_element(2, 2, 2.0));
        assert_eq!(g.get(1), &DMatrix::zeros(3, 1));
    }

    #[test]
    fn zero_row_is_degenerate() {
        let params = ParamStore::new();
        let mut t = Tape::new(&params);
        let c = t.constant(DMatrix::zeros(2, 3));
        assert!(matches!(t.row_normalize(c, "zero"), Err(Error::DegenerateNorm("zero"))));
    }

    #[test]
    fn shape_errors_are_reported() {
        let params = ParamStore::new();
        let mut t = Tape::new(&params);
        let a = t.constant(DMatrix::zeros(2, 3));
        let b = t.constant(DMatrix::zeros(2, 3));
        assert!(matches!(t.matmul(a, b), Err(Error::Shape(_))));
        assert!(t.matmul_bt(a, b).is_ok());
        assert!(matches!(t.reshape(a, 4, 2), Err(Error::Shape(_))));
    }
}
