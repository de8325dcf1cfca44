//! The query-conditioned alignment model.
//!
//! Query path: `q = Norm(P_s · W_q · z)`.
//! Entity path: `H0 = Norm(W_side · x)`, then GCN layers `Â·H·θ_l` with
//! parameters shared by both graphs.
//! Target projection: a direction-conditioned Tucker map
//! `W(s) = U_o (Σ_r U_s[s,r] G_r) U_iᵀ` blended with a residual `R·g` through
//! the gate `σ(α)`, then normalized. Scores are dot products of unit vectors.
//!
//! Batched code keeps one representation per row, so every map above is
//! applied from the right as its transpose.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::params::{init_store, ParamStore, TensorSpec};
use crate::autodiff::{LossGroup, NodeId, Tape};
use crate::data::{DatasetBundle, QueryInstance};
use crate::error::{Error, Result};
use crate::eval::Scorer;
use crate::graph::{Direction, NormalizedAdjacency, Side};
use crate::rng::{substream, Stream};
use crate::training::{dense_groups, TrainBatch, Trainable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TuckerRanks {
    pub rs: usize,
    pub ro: usize,
    pub ri: usize,
}

impl TuckerRanks {
    pub fn new(rs: usize, ro: usize, ri: usize) -> Self {
        TuckerRanks { rs, ro, ri }
    }

    /// Parses `RS,RO,RI`.
    pub fn parse(s: &str) -> Option<Self> {
        let v: Vec<usize> = s.split(',').map(|p| p.trim().parse().ok()).collect::<Option<_>>()?;
        match v[..] {
            [rs, ro, ri] => Some(TuckerRanks { rs, ro, ri }),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub d_q: usize,
    pub d_t: usize,
    pub d_w: usize,
    pub gcn_layers: usize,
    pub ranks: TuckerRanks,
    pub activation: Activation,
}

impl ModelConfig {
    pub fn for_bundle(bundle: &DatasetBundle, d: usize, ranks: TuckerRanks) -> Self {
        let (d_q, d_t, d_w) = bundle.dims();
        ModelConfig { d, d_q, d_t, d_w, gcn_layers: 2, ranks, activation: Activation::Relu }
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.ranks;
        if [self.d, self.d_q, self.d_t, self.d_w, r.rs, r.ro, r.ri].contains(&0) {
            return Err(Error::InvalidArgument("model dimensions and ranks must be positive".into()));
        }
        if self.gcn_layers == 0 {
            return Err(Error::InvalidArgument("at least one graph layer is required".into()));
        }
        Ok(())
    }

    pub fn check_bundle(&self, bundle: &DatasetBundle) -> Result<()> {
        let dims = bundle.dims();
        if dims != (self.d_q, self.d_t, self.d_w) {
            return Err(Error::Shape(format!(
                "model expects input dims {:?}, bundle has {dims:?}",
                (self.d_q, self.d_t, self.d_w)
            )));
        }
        Ok(())
    }

    /// Parameter names and shapes in store order.
    pub fn layout(&self) -> Vec<(String, TensorSpec)> {
        let d = self.d;
        let r = self.ranks;
        let mut out = vec![
            ("W_q".to_string(), TensorSpec::matrix(d, self.d_q)),
            ("P_0".to_string(), TensorSpec::matrix(d, d)),
            ("P_1".to_string(), TensorSpec::matrix(d, d)),
            ("W_tcm".to_string(), TensorSpec::matrix(d, self.d_t)),
            ("W_wm".to_string(), TensorSpec::matrix(d, self.d_w)),
        ];
        for l in 0..self.gcn_layers {
            out.push((format!("theta_{l}"), TensorSpec::matrix(d, d)));
        }
        out.extend([
            ("U_s".to_string(), TensorSpec::matrix(2, r.rs)),
            ("U_o".to_string(), TensorSpec::matrix(d, r.ro)),
            ("U_i".to_string(), TensorSpec::matrix(d, r.ri)),
            // One R_o×R_i slice per row, stored row-major; fans are the slice's.
            ("core".to_string(), TensorSpec { rows: r.rs, cols: r.ro * r.ri, fan_in: r.ri, fan_out: r.ro }),
            ("R".to_string(), TensorSpec::matrix(d, d)),
            ("alpha".to_string(), TensorSpec { rows: 1, cols: 1, fan_in: 0, fan_out: 0 }),
        ]);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Slots {
    w_q: usize,
    p: [usize; 2],
    w_side: [usize; 2],
    theta: Vec<usize>,
    u_s: usize,
    u_o: usize,
    u_i: usize,
    core: usize,
    r: usize,
    alpha: usize,
}

impl Slots {
    fn resolve(store: &ParamStore, config: &ModelConfig) -> Result<Slots> {
        let find = |n: &str| {
            store.index_of(n).ok_or_else(|| Error::Checkpoint(format!("missing parameter {n}")))
        };
        Ok(Slots {
            w_q: find("W_q")?,
            p: [find("P_0")?, find("P_1")?],
            w_side: [find("W_tcm")?, find("W_wm")?],
            theta: (0..config.gcn_layers).map(|l| find(&format!("theta_{l}"))).collect::<Result<_>>()?,
            u_s: find("U_s")?,
            u_o: find("U_o")?,
            u_i: find("U_i")?,
            core: find("core")?,
            r: find("R")?,
            alpha: find("alpha")?,
        })
    }
}

fn side_slot(side: Side) -> usize {
    match side {
        Side::Tcm => 0,
        Side::Wm => 1,
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn normalize_rows(mut m: DMatrix<f64>, what: &'static str) -> Result<DMatrix<f64>> {
    for mut row in m.row_iter_mut() {
        let n = row.norm();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::DegenerateNorm(what));
        }
        row /= n;
    }
    Ok(m)
}

fn normalize(v: DVector<f64>, what: &'static str) -> Result<DVector<f64>> {
    let n = v.norm();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::DegenerateNorm(what));
    }
    Ok(v / n)
}

#[derive(Debug, Clone, PartialEq)]
pub struct QceaModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    slots: Slots,
}

/// Glorot-uniform initialization with `α = 0`.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<QceaModel> {
    config.validate()?;
    let mut rng = substream(seed, Stream::Init);
    let params = init_store(&mut rng, &config.layout());
    QceaModel::from_params(config.clone(), params)
}

impl QceaModel {
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<QceaModel> {
        config.validate()?;
        for (name, spec) in config.layout() {
            let p = params.by_name(&name).ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if p.shape() != (spec.rows, spec.cols) {
                return Err(Error::Shape(format!("parameter {name} is {:?}, expected {:?}", p.shape(), (spec.rows, spec.cols))));
            }
        }
        let slots = Slots::resolve(&params, &config)?;
        Ok(QceaModel { config, params, slots })
    }

    fn p(&self, idx: usize) -> &DMatrix<f64> {
        self.params.get(idx)
    }

    pub fn gate(&self) -> f64 {
        sigmoid(self.p(self.slots.alpha)[(0, 0)])
    }

    /// Slice `G_r` of the core tensor.
    pub fn core_slice(&self, r: usize) -> DMatrix<f64> {
        let TuckerRanks { ro, ri, .. } = self.config.ranks;
        let core = self.p(self.slots.core);
        DMatrix::from_fn(ro, ri, |a, b| core[(r, a * ri + b)])
    }

    /// `Σ_r U_s[s,r] · G_r`.
    pub fn direction_core(&self, dir: Direction) -> DMatrix<f64> {
        let TuckerRanks { rs, ro, ri } = self.config.ranks;
        let u_s = self.p(self.slots.u_s);
        let mut c = DMatrix::zeros(ro, ri);
        for r in 0..rs {
            c += self.core_slice(r) * u_s[(dir.bit(), r)];
        }
        c
    }

    /// The full `d×d` Tucker map `W(s) = U_o (Σ_r U_s[s,r] G_r) U_iᵀ`.
    pub fn tucker_matrix(&self, dir: Direction) -> DMatrix<f64> {
        self.p(self.slots.u_o) * self.direction_core(dir) * self.p(self.slots.u_i).transpose()
    }

    /// `Norm(P_s · W_q · z)`.
    pub fn encode_query(&self, z: &DVector<f64>, dir: Direction) -> Result<DVector<f64>> {
        if z.len() != self.config.d_q {
            return Err(Error::Shape(format!("query vector has dim {}, expected {}", z.len(), self.config.d_q)));
        }
        let zhat = self.p(self.slots.w_q) * z;
        normalize(self.p(self.slots.p[dir.bit()]) * zhat, "query representation")
    }

    /// Graph-aware entity representations for one side, one row per entity
    /// in graph order.
    pub fn encode_entities(&self, features: &DMatrix<f64>, adj: &NormalizedAdjacency, side: Side) -> Result<DMatrix<f64>> {
        let w = self.p(self.slots.w_side[side_slot(side)]);
        if features.ncols() != w.ncols() || features.nrows() != adj.n() {
            return Err(Error::Shape(format!(
                "{side} features {}x{} do not match projection {}x{} or adjacency {}",
                features.nrows(),
                features.ncols(),
                w.nrows(),
                w.ncols(),
                adj.n()
            )));
        }
        let mut h = normalize_rows(features * w.transpose(), "projected entity input")?;
        let layers = self.slots.theta.len();
        for (l, &t) in self.slots.theta.iter().enumerate() {
            h = adj.matmul(&(h * self.p(t)));
            if l + 1 < layers && self.config.activation == Activation::Relu {
                h = h.map(|x| x.max(0.0));
            }
        }
        Ok(h)
    }

    /// Tucker projection of one graph representation via the sum over
    /// direction ranks, gated with the residual branch and normalized.
    pub fn tucker_project(&self, g: &DVector<f64>, dir: Direction) -> Result<DVector<f64>> {
        let u_s = self.p(self.slots.u_s);
        let u_o = self.p(self.slots.u_o);
        let inner = self.p(self.slots.u_i).transpose() * g;
        let mut h_tucker = DVector::zeros(self.config.d);
        for r in 0..self.config.ranks.rs {
            h_tucker += (u_o * (self.core_slice(r) * &inner)) * u_s[(dir.bit(), r)];
        }
        let h_res = self.p(self.slots.r) * g;
        let s = self.gate();
        normalize(h_tucker * (1.0 - s) + h_res * s, "gated target representation")
    }

    /// Unit query representations, one row per query.
    pub fn query_representations(&self, bundle: &DatasetBundle, dir: Direction, queries: &[&QueryInstance]) -> Result<DMatrix<f64>> {
        let z = bundle.query_matrix(queries)?;
        let q = z * self.p(self.slots.w_q).transpose() * self.p(self.slots.p[dir.bit()]).transpose();
        normalize_rows(q, "query representation")
    }

    /// Unit target representations for every entity of the target graph
    /// under `dir`, in graph order.
    pub fn target_representations(&self, bundle: &DatasetBundle, dir: Direction) -> Result<DMatrix<f64>> {
        let side = dir.target_side();
        let g = self.encode_entities(bundle.features(side), bundle.adjacency(side), side)?;
        let w = self.tucker_matrix(dir);
        let s = self.gate();
        let blended = &g * w.transpose() * (1.0 - s) + &g * self.p(self.slots.r).transpose() * s;
        normalize_rows(blended, "gated target representation")
    }

    /// Records the query and target representations on `tape`. Returns the
    /// `B×d` query node and the `n×d` target node.
    pub fn record<'a>(
        &self,
        tape: &mut Tape<'a>,
        bundle: &'a DatasetBundle,
        dir: Direction,
        queries: &[&QueryInstance],
    ) -> Result<(NodeId, NodeId)> {
        let s = &self.slots;
        let z = tape.constant(bundle.query_matrix(queries)?);
        let w_q = tape.param(s.w_q);
        let p_s = tape.param(s.p[dir.bit()]);
        let zhat = tape.matmul_bt(z, w_q)?;
        let q = tape.matmul_bt(zhat, p_s)?;
        let q = tape.row_normalize(q, "query representation")?;

        let side = dir.target_side();
        let x = tape.constant(bundle.features(side).clone());
        let w_side = tape.param(s.w_side[side_slot(side)]);
        let h = tape.matmul_bt(x, w_side)?;
        let mut h = tape.row_normalize(h, "projected entity input")?;
        for (l, &t) in s.theta.iter().enumerate() {
            let theta = tape.param(t);
            let ht = tape.matmul(h, theta)?;
            h = tape.spmm(bundle.adjacency(side), ht)?;
            if l + 1 < s.theta.len() && self.config.activation == Activation::Relu {
                h = tape.relu(h);
            }
        }

        let TuckerRanks { ro, ri, .. } = self.config.ranks;
        let u_s = tape.param(s.u_s);
        let row = tape.gather_rows(u_s, vec![dir.bit()])?;
        let core = tape.param(s.core);
        let flat = tape.matmul(row, core)?;
        let c = tape.reshape(flat, ro, ri)?;
        let u_i = tape.param(s.u_i);
        let u_o = tape.param(s.u_o);
        let t1 = tape.matmul(h, u_i)?;
        let t2 = tape.matmul_bt(t1, c)?;
        let h_tucker = tape.matmul_bt(t2, u_o)?;
        let r = tape.param(s.r);
        let h_res = tape.matmul_bt(h, r)?;
        let alpha = tape.param(s.alpha);
        let blended = tape.gate(h_tucker, h_res, alpha)?;
        let t = tape.row_normalize(blended, "gated target representation")?;
        Ok((q, t))
    }
}

impl Scorer for QceaModel {
    fn score_matrix(&self, bundle: &DatasetBundle, dir: Direction, queries: &[&QueryInstance]) -> Result<DMatrix<f64>> {
        self.config.check_bundle(bundle)?;
        let q = self.query_representations(bundle, dir, queries)?;
        let t = self.target_representations(bundle, dir)?;
        Ok(q * t.transpose())
    }
}

impl Trainable for QceaModel {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn record_batch<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        bundle: &'a DatasetBundle,
        batch: &TrainBatch,
    ) -> Result<(NodeId, Vec<LossGroup>)> {
        let queries = batch
            .items
            .iter()
            .map(|it| bundle.query(it.query).ok_or_else(|| Error::InvalidArgument(format!("unknown query {}", it.query))))
            .collect::<Result<Vec<_>>>()?;
        let (q, t) = self.record(tape, bundle, batch.direction, &queries)?;
        let scores = tape.matmul_bt(q, t)?;
        Ok((scores, dense_groups(bundle, batch)))
    }
}

/// Dot product of two unit vectors.
pub fn score(q: &DVector<f64>, h: &DVector<f64>) -> f64 {
    q.dot(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_adjacency, Entity, EntityId, Graph};
    use crate::rng::Rng as ChaRng;
    use proptest::prelude::*;
    use rand::Rng;

    fn config(d: usize, ranks: (usize, usize, usize)) -> ModelConfig {
        ModelConfig {
            d,
            d_q: d + 1,
            d_t: d + 2,
            d_w: d - 1,
            gcn_layers: 2,
            ranks: TuckerRanks::new(ranks.0, ranks.1, ranks.2),
            activation: Activation::Relu,
        }
    }

    fn randomize(m: &mut QceaModel, rng: &mut ChaRng) {
        for i in 0..m.params.len() {
            let p = m.params.get_mut(i);
            *p = p.map(|_| rng.random_range(-1.0..1.0));
        }
    }

    fn rand_vec(rng: &mut ChaRng, n: usize) -> DVector<f64> {
        DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0))
    }

    fn graph(n: usize, edges: &[(u32, u32)], side: Side) -> Graph {
        let entities = (0..n)
            .map(|i| Entity {
                id: EntityId(i as u32),
                side,
                type_tag: "t".into(),
                name: format!("n{i}"),
                description: format!("n{i}"),
            })
            .collect();
        Graph::new(side, entities, edges.iter().map(|&(a, b)| (EntityId(a), EntityId(b))).collect()).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let c = config(6, (2, 3, 3));
        let a = init_params(&c, 9).unwrap();
        assert_eq!(a, init_params(&c, 9).unwrap());
        assert_ne!(a.params, init_params(&c, 10).unwrap().params);
        assert_eq!(a.gate(), 0.5);
        for (name, spec) in c.layout() {
            let p = a.params.by_name(&name).unwrap();
            if name == "alpha" {
                assert_eq!(p[(0, 0)], 0.0);
            } else {
                assert!(p.iter().all(|v| v.abs() <= spec.glorot_bound()), "{name}");
            }
        }
    }

    #[test]
    fn identity_query_pipeline() {
        let mut c = config(4, (1, 4, 4));
        c.d_q = 6;
        let mut m = init_params(&c, 0).unwrap();
        *m.params.by_name_mut("W_q").unwrap() = DMatrix::from_fn(4, 6, |i, j| (i == j) as u8 as f64);
        *m.params.by_name_mut("P_0").unwrap() = DMatrix::identity(4, 4);
        let mut z = DVector::zeros(6);
        z[0] = 1.0;
        let q = m.encode_query(&z, Direction::TcmToWm).unwrap();
        assert_eq!(q, DVector::from_fn(4, |i, _| (i == 0) as u8 as f64));
    }

    #[test]
    fn query_matches_dense_oracle() {
        let c = config(5, (2, 3, 3));
        let mut m = init_params(&c, 1).unwrap();
        let mut rng = substream(3, Stream::Test);
        randomize(&mut m, &mut rng);
        let z = rand_vec(&mut rng, c.d_q);
        for dir in [Direction::TcmToWm, Direction::WmToTcm] {
            let p = m.params.by_name(if dir == Direction::TcmToWm { "P_0" } else { "P_1" }).unwrap();
            let w = m.params.by_name("W_q").unwrap();
            let mut oracle = [0.0; 5];
            for (i, o) in oracle.iter_mut().enumerate() {
                for k in 0..5 {
                    let zh: f64 = (0..c.d_q).map(|j| w[(k, j)] * z[j]).sum();
                    *o += p[(i, k)] * zh;
                }
            }
            let n = oracle.iter().map(|x| x * x).sum::<f64>().sqrt();
            let q = m.encode_query(&z, dir).unwrap();
            for i in 0..5 {
                assert!((q[i] - oracle[i] / n).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_query_is_degenerate() {
        let c = config(4, (1, 2, 2));
        let m = init_params(&c, 0).unwrap();
        let z = DVector::zeros(c.d_q);
        assert!(matches!(m.encode_query(&z, Direction::TcmToWm), Err(Error::DegenerateNorm(_))));
    }

    #[test]
    fn isolated_node_identity_encoder() {
        let mut c = config(3, (1, 2, 2));
        c.d_t = 3;
        c.gcn_layers = 1;
        c.activation = Activation::Identity;
        let mut m = init_params(&c, 0).unwrap();
        *m.params.by_name_mut("theta_0").unwrap() = DMatrix::identity(3, 3);
        let g = graph(1, &[], Side::Tcm);
        let adj = build_adjacency(&g).unwrap();
        let x = DMatrix::from_row_slice(1, 3, &[0.3, -1.0, 2.0]);
        let out = m.encode_entities(&x, &adj, Side::Tcm).unwrap();
        let proj = &x * m.params.by_name("W_tcm").unwrap().transpose();
        let expected = &proj / proj.norm();
        assert!((out - expected).norm() < 1e-15);
    }

    #[test]
    fn shared_encoder_on_identical_sides() {
        let mut c = config(4, (1, 2, 2));
        c.d_t = 5;
        c.d_w = 5;
        let mut m = init_params(&c, 2).unwrap();
        let w = m.params.by_name("W_tcm").unwrap().clone();
        *m.params.by_name_mut("W_wm").unwrap() = w;
        let edges = [(0, 1), (1, 2), (2, 3)];
        let gt = graph(4, &edges, Side::Tcm);
        let gw = graph(4, &edges, Side::Wm);
        let mut rng = substream(5, Stream::Test);
        let x = DMatrix::from_fn(4, 5, |_, _| rng.random_range(-1.0..1.0));
        let a = m.encode_entities(&x, &build_adjacency(&gt).unwrap(), Side::Tcm).unwrap();
        let b = m.encode_entities(&x, &build_adjacency(&gw).unwrap(), Side::Wm).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn entity_encoder_matches_dense_oracle() {
        let c = config(4, (1, 2, 2));
        let mut m = init_params(&c, 4).unwrap();
        let mut rng = substream(6, Stream::Test);
        randomize(&mut m, &mut rng);
        let g = graph(5, &[(0, 1), (1, 2), (2, 3), (3, 4), (0, 4), (1, 3)], Side::Wm);
        let adj = build_adjacency(&g).unwrap();
        let x = DMatrix::from_fn(5, c.d_w, |_, _| rng.random_range(-1.0..1.0));

        // dense Â from degrees
        let mut a = DMatrix::<f64>::identity(5, 5);
        for &(u, v) in g.edges() {
            a[(u.0 as usize, v.0 as usize)] = 1.0;
            a[(v.0 as usize, u.0 as usize)] = 1.0;
        }
        let deg: Vec<f64> = (0..5).map(|i| a.row(i).sum()).collect();
        let ahat = DMatrix::from_fn(5, 5, |i, j| a[(i, j)] / (deg[i] * deg[j]).sqrt());
        let mut h0 = &x * m.params.by_name("W_wm").unwrap().transpose();
        for i in 0..5 {
            let n = h0.row(i).norm();
            for j in 0..c.d {
                h0[(i, j)] /= n;
            }
        }
        let h1 = (&ahat * &h0 * m.params.by_name("theta_0").unwrap()).map(|v| v.max(0.0));
        let h2 = &ahat * h1 * m.params.by_name("theta_1").unwrap();
        let out = m.encode_entities(&x, &adj, Side::Wm).unwrap();
        assert!((out - h2).amax() < 1e-10);
    }

    #[test]
    fn tucker_identity_and_residual_limits() {
        let c = config(3, (2, 3, 3));
        let mut m = init_params(&c, 0).unwrap();
        let g = DVector::from_vec(vec![0.5, -2.0, 1.0]);
        let expected = g.normalize();

        *m.params.by_name_mut("U_s").unwrap() = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        *m.params.by_name_mut("U_o").unwrap() = DMatrix::identity(3, 3);
        *m.params.by_name_mut("U_i").unwrap() = DMatrix::identity(3, 3);
        let mut core = DMatrix::zeros(2, 9);
        for k in 0..3 {
            core[(0, k * 3 + k)] = 1.0;
        }
        *m.params.by_name_mut("core").unwrap() = core;
        m.params.by_name_mut("alpha").unwrap()[(0, 0)] = -800.0;
        let out = m.tucker_project(&g, Direction::TcmToWm).unwrap();
        assert!((out - &expected).norm() < 1e-12);

        *m.params.by_name_mut("R").unwrap() = DMatrix::identity(3, 3);
        m.params.by_name_mut("alpha").unwrap()[(0, 0)] = 800.0;
        let out = m.tucker_project(&g, Direction::WmToTcm).unwrap();
        assert!((out - expected).norm() < 1e-12);
    }

    #[test]
    fn direction_changes_projection() {
        let c = config(6, (2, 3, 3));
        let m = init_params(&c, 8).unwrap();
        let mut rng = substream(1, Stream::Test);
        let g = rand_vec(&mut rng, 6);
        let a = m.tucker_project(&g, Direction::TcmToWm).unwrap();
        let b = m.tucker_project(&g, Direction::WmToTcm).unwrap();
        assert!((a - b).norm() > 1e-6);
    }

    #[test]
    fn gate_moves_from_tucker_to_residual() {
        let c = config(5, (2, 3, 3));
        let mut m = init_params(&c, 3).unwrap();
        let mut rng = substream(2, Stream::Test);
        let g = rand_vec(&mut rng, 5);
        let h_t = m.tucker_matrix(Direction::TcmToWm) * &g;
        let h_r = m.params.by_name("R").unwrap() * &g;
        let cos = |a: &DVector<f64>, b: &DVector<f64>| a.dot(b) / (a.norm() * b.norm());
        let mut last = (f64::INFINITY, f64::NEG_INFINITY);
        for k in -8..=8 {
            m.params.by_name_mut("alpha").unwrap()[(0, 0)] = k as f64;
            let out = m.tucker_project(&g, Direction::TcmToWm).unwrap();
            let now = (cos(&out, &h_t), cos(&out, &h_r));
            assert!(now.0 <= last.0 + 1e-12 && now.1 >= last.1 - 1e-12);
            last = now;
        }
    }

    #[test]
    fn score_is_cosine() {
        let mut rng = substream(7, Stream::Test);
        let e1 = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        let e2 = DVector::from_vec(vec![0.0, 1.0, 0.0]);
        assert_eq!(score(&e1, &e1), 1.0);
        assert_eq!(score(&e1, &e2), 0.0);
        for _ in 0..20 {
            let a = rand_vec(&mut rng, 8);
            let b = rand_vec(&mut rng, 8);
            let cos = a.dot(&b) / (a.norm() * b.norm());
            let s = score(&a.normalize(), &b.normalize());
            assert!((s - cos).abs() < 1e-12 && s.abs() <= 1.0 + 1e-9);
        }
    }

    #[test]
    fn ranks_parse() {
        assert_eq!(TuckerRanks::parse("16,128,128"), Some(TuckerRanks::new(16, 128, 128)));
        assert_eq!(TuckerRanks::parse("1,2"), None);
        assert_eq!(TuckerRanks::parse("a,b,c"), None);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn sum_and_matrix_forms_agree(seed in 0u64..10_000, rs in 1usize..4, ro in 1usize..5, ri in 1usize..5) {
            let c = config(5, (rs, ro, ri));
            let mut m = init_params(&c, seed).unwrap();
            let mut rng = substream(seed, Stream::Test);
            randomize(&mut m, &mut rng);
            let g = rand_vec(&mut rng, 5);
            for dir in [Direction::TcmToWm, Direction::WmToTcm] {
                let s = m.gate();
                let dense = (m.tucker_matrix(dir) * &g) * (1.0 - s) + m.params.by_name("R").unwrap() * &g * s;
                let dense = dense.normalize();
                let sum = m.tucker_project(&g, dir).unwrap();
                prop_assert!((dense - &sum).amax() < 1e-10);
                prop_assert!((sum.norm() - 1.0).abs() < 1e-9);
            }
        }
    }
}
