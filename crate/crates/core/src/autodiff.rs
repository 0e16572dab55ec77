//! Reverse-mode differentiation over a static graph of tensor operations,
//! and a central-difference gradient checker.
//!
//! A [`Graph`] is assembled once with the builder methods (`input`, `param`,
//! `matmul`, ...), each of which returns a [`NodeId`] that may only refer to
//! nodes created earlier. [`Graph::forward`] binds the named inputs and caches
//! every intermediate; [`Graph::backward`] then propagates a seed from the
//! output node back to every leaf.
//!
//! A few nodes are data dependent but not differentiated through: centroid
//! initialisers select or mix rows based on the values they see, and the
//! KNN mask thresholds distances. Both are recomputed on every forward pass
//! and held constant during backward.

use std::collections::{BTreeMap, HashMap};

use crate::clustering::Initializer;
use crate::error::{param_err, Error, Result};
use crate::tensor::{self, matmul, matmul_nt, matmul_tn, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input(String),
    Param(String),
    Const(Tensor),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    Transpose(NodeId),
    Softmax {
        a: NodeId,
        scale: f64,
        mask: Option<NodeId>,
    },
    LogSumExp {
        a: NodeId,
        alpha: f64,
    },
    SqDist(NodeId, NodeId),
    Sum(NodeId),
    Mean(NodeId),
    SumRows(NodeId),
    MeanRows(NodeId),
    MaxRows(NodeId),
    Relu(NodeId),
    LayerNorm {
        a: NodeId,
        eps: f64,
    },
    ConcatCols(Vec<NodeId>),
    Init {
        a: NodeId,
        init: Initializer,
        m: usize,
    },
    KnnMask {
        x: NodeId,
        u: NodeId,
        k: usize,
    },
}

/// Per-node data kept from the forward pass for use in backward.
#[derive(Debug, Clone)]
enum Aux {
    None,
    /// Mixing matrix applied by an initialiser node.
    Mixing(Tensor),
    /// Per-row inverse standard deviation of a layer norm.
    InvStd(Vec<f64>),
    /// Per-column argmax row of a max-pool.
    Argmax(Vec<usize>),
}

/// Gradients of the seeded output with respect to every named leaf.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientMap {
    pub params: BTreeMap<String, Tensor>,
    pub inputs: BTreeMap<String, Tensor>,
}

impl GradientMap {
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn input(&self, name: &str) -> Option<&Tensor> {
        self.inputs.get(name)
    }

    /// Elementwise `self += other` over parameters present in both.
    pub fn accumulate(&mut self, other: &GradientMap) -> Result<()> {
        for (name, g) in &other.params {
            match self.params.get_mut(name) {
                Some(acc) => *acc = acc.add(g)?,
                None => {
                    self.params.insert(name.clone(), g.clone());
                }
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.params.values_mut() {
            *g = g.scale(s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params.values().all(Tensor::is_finite)
    }
}

#[derive(Debug, Clone)]
struct Param {
    value: Tensor,
    trainable: bool,
}

/// A static computation graph with named inputs and parameters.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    ops: Vec<Op>,
    params: BTreeMap<String, Param>,
    output: Option<NodeId>,
    values: Vec<Tensor>,
    aux: Vec<Aux>,
    forwarded: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op) -> NodeId {
        self.forwarded = false;
        self.ops.push(op);
        NodeId(self.ops.len() - 1)
    }

    fn check(&self, ids: &[NodeId]) {
        for id in ids {
            assert!(id.0 < self.ops.len(), "node {} does not exist yet", id.0);
        }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn input(&mut self, name: &str) -> NodeId {
        self.push(Op::Input(name.to_string()))
    }

    /// Registers a trainable parameter leaf. Names must be unique.
    pub fn param(&mut self, name: &str, value: Tensor) -> NodeId {
        self.param_with(name, value, true)
    }

    pub fn param_with(&mut self, name: &str, value: Tensor, trainable: bool) -> NodeId {
        assert!(
            !self.params.contains_key(name),
            "duplicate parameter name `{name}`"
        );
        self.params
            .insert(name.to_string(), Param { value, trainable });
        self.push(Op::Param(name.to_string()))
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Const(value))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.check(&[a, b]);
        self.push(Op::MatMul(a, b))
    }

    /// Elementwise sum; `b` may also be a `1×c` row, an `r×1` column or a
    /// `1×1` scalar broadcast over `a`.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.check(&[a, b]);
        self.push(Op::Add(a, b))
    }

    /// Elementwise product with the same broadcasting rules as [`Graph::add`].
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.check(&[a, b]);
        self.push(Op::Mul(a, b))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.check(&[a]);
        self.push(Op::Neg(a))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let nb = self.neg(b);
        self.add(a, nb)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        self.check(&[a]);
        self.push(Op::Scale(a, s))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        self.check(&[a]);
        self.push(Op::Transpose(a))
    }

    pub fn row_softmax(&mut self, a: NodeId, scale: f64) -> NodeId {
        self.check(&[a]);
        self.push(Op::Softmax {
            a,
            scale,
            mask: None,
        })
    }

    /// Row softmax over entries where `mask` is nonzero.
    pub fn masked_row_softmax(&mut self, a: NodeId, scale: f64, mask: NodeId) -> NodeId {
        self.check(&[a, mask]);
        self.push(Op::Softmax {
            a,
            scale,
            mask: Some(mask),
        })
    }

    /// Per-row `(1/α) log Σ exp(α a)`, shape `r×1`.
    pub fn logsumexp(&mut self, a: NodeId, alpha: f64) -> NodeId {
        self.check(&[a]);
        assert!(alpha > 0.0, "logsumexp alpha must be positive");
        self.push(Op::LogSumExp { a, alpha })
    }

    pub fn sqdist(&mut self, x: NodeId, u: NodeId) -> NodeId {
        self.check(&[x, u]);
        self.push(Op::SqDist(x, u))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.check(&[a]);
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.check(&[a]);
        self.push(Op::Mean(a))
    }

    /// Column sums (reduction over rows), shape `1×c`.
    pub fn sum_rows(&mut self, a: NodeId) -> NodeId {
        self.check(&[a]);
        self.push(Op::SumRows(a))
    }

    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        self.check(&[a]);
        self.push(Op::MeanRows(a))
    }

    pub fn max_rows(&mut self, a: NodeId) -> NodeId {
        self.check(&[a]);
        self.push(Op::MaxRows(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.check(&[a]);
        self.push(Op::Relu(a))
    }

    /// Per-row standardisation without affine terms.
    pub fn layer_norm(&mut self, a: NodeId, eps: f64) -> NodeId {
        self.check(&[a]);
        self.push(Op::LayerNorm { a, eps })
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        self.check(parts);
        assert!(!parts.is_empty());
        self.push(Op::ConcatCols(parts.to_vec()))
    }

    /// `M` centroids produced from the rows of `a` by a value-dependent
    /// initialiser. Gradients flow through the mixing weights, not the
    /// selection.
    pub fn init_centroids(&mut self, a: NodeId, init: Initializer, m: usize) -> Result<NodeId> {
        self.check(&[a]);
        if matches!(init, Initializer::LearnedLinear(_)) {
            return Err(Error::Config(
                "learned initialisers are built from a parameter matmul".into(),
            ));
        }
        Ok(self.push(Op::Init { a, init, m }))
    }

    /// `M×N` 0/1 mask whose row `j` marks the `k` inputs nearest centroid `j`.
    pub fn knn_mask(&mut self, x: NodeId, u: NodeId, k: usize) -> NodeId {
        self.check(&[x, u]);
        self.push(Op::KnnMask { x, u, k })
    }

    pub fn set_output(&mut self, id: NodeId) {
        self.check(&[id]);
        self.output = Some(id);
        self.forwarded = false;
    }

    pub fn output_id(&self) -> Option<NodeId> {
        self.output.or_else(|| self.ops.len().checked_sub(1).map(NodeId))
    }

    pub fn param_value(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, p)| (k.as_str(), &p.value))
    }

    /// Replaces a parameter value; invalidates cached forward results.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Binding(name.to_string()))?;
        if p.value.shape() != value.shape() {
            return Err(Error::Dimension {
                op: "set_param",
                lhs: p.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        p.value = value;
        self.forwarded = false;
        Ok(())
    }

    /// Cached value of a node from the latest forward pass.
    pub fn value(&self, id: NodeId) -> Option<&Tensor> {
        if self.forwarded {
            self.values.get(id.0)
        } else {
            None
        }
    }

    /// Total elements held by cached node values; zero before a forward pass.
    pub fn live_elements(&self) -> usize {
        if self.forwarded {
            self.values.iter().map(Tensor::len).sum()
        } else {
            0
        }
    }

    /// Evaluates every node in order and returns the output node's value.
    pub fn forward(&mut self, inputs: &HashMap<String, Tensor>) -> Result<Tensor> {
        let out = self
            .output_id()
            .ok_or_else(|| Error::State("graph has no nodes".into()))?;
        self.forwarded = false;
        let mut values: Vec<Tensor> = Vec::with_capacity(self.ops.len());
        let mut aux = Vec::with_capacity(self.ops.len());
        for op in &self.ops {
            let (v, a) = eval(op, &values, inputs, &self.params)?;
            values.push(v);
            aux.push(a);
        }
        self.values = values;
        self.aux = aux;
        self.forwarded = true;
        Ok(self.values[out.0].clone())
    }

    /// Reverse-mode gradients of `⟨seed, output⟩` with respect to every
    /// trainable parameter and every bound input.
    pub fn backward(&self, seed: &Tensor) -> Result<GradientMap> {
        if !self.forwarded {
            return Err(Error::State("backward called before forward".into()));
        }
        let out = self.output_id().expect("forwarded graph has nodes");
        let out_shape = self.values[out.0].shape();
        if seed.shape() != out_shape {
            return Err(Error::Dimension {
                op: "backward seed",
                lhs: out_shape.to_vec(),
                rhs: seed.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; out.0 + 1];
        grads[out.0] = Some(seed.clone());
        let mut result = GradientMap::default();
        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            match &self.ops[idx] {
                Op::Input(name) => {
                    merge(&mut result.inputs, name, g)?;
                }
                Op::Param(name) => {
                    if self.params[name].trainable {
                        merge(&mut result.params, name, g)?;
                    }
                }
                op => {
                    for (id, contrib) in self.vjp(op, idx, &g)? {
                        accumulate(&mut grads[id.0], contrib)?;
                    }
                }
            }
        }
        for (name, p) in &self.params {
            if p.trainable && !result.params.contains_key(name) {
                let (r, c) = (p.value.rows(), p.value.cols());
                result.params.insert(name.clone(), Tensor::zeros(r, c));
            }
        }
        Ok(result)
    }

    fn vjp(&self, op: &Op, idx: usize, g: &Tensor) -> Result<Vec<(NodeId, Tensor)>> {
        let v = |id: NodeId| &self.values[id.0];
        let out = &self.values[idx];
        Ok(match op {
            Op::Input(_) | Op::Param(_) | Op::Const(_) | Op::KnnMask { .. } => vec![],
            Op::MatMul(a, b) => vec![
                (*a, matmul_nt(g, v(*b))?),
                (*b, matmul_tn(v(*a), g)?),
            ],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, reduce_to(g, v(*b).shape())?)],
            Op::Mul(a, b) => {
                let ga = broadcast_binary(g, v(*b), "mul", |x, y| x * y)?;
                let gb_full = broadcast_binary(g, v(*a), "mul", |x, y| x * y)?;
                // g ⊙ a has the shape of `a`; reduce onto b's broadcast shape.
                let gb = reduce_to(&gb_full, v(*b).shape())?;
                vec![(*a, ga), (*b, gb)]
            }
            Op::Neg(a) => vec![(*a, g.scale(-1.0))],
            Op::Scale(a, s) => vec![(*a, g.scale(*s))],
            Op::Transpose(a) => vec![(*a, g.transpose())],
            Op::Softmax { a, scale, .. } => {
                let mut ga = g.clone();
                for i in 0..out.rows() {
                    let s = out.row(i);
                    let gr = g.row(i);
                    let inner: f64 = s.iter().zip(gr).map(|(x, y)| x * y).sum();
                    for (o, (sv, gv)) in ga.row_mut(i).iter_mut().zip(s.iter().zip(gr)) {
                        *o = scale * sv * (gv - inner);
                    }
                }
                vec![(*a, ga)]
            }
            Op::LogSumExp { a, alpha } => {
                let av = v(*a);
                let p = tensor::row_softmax(av, *alpha);
                let mut ga = p;
                for i in 0..ga.rows() {
                    let gi = g.get(i, 0);
                    for o in ga.row_mut(i) {
                        *o *= gi;
                    }
                }
                vec![(*a, ga)]
            }
            Op::SqDist(x, u) => {
                let (xv, uv) = (v(*x), v(*u));
                let d = xv.cols();
                let mut gx = Tensor::zeros(xv.rows(), d);
                let mut gu = Tensor::zeros(uv.rows(), d);
                for i in 0..xv.rows() {
                    for j in 0..uv.rows() {
                        let gij = 2.0 * g.get(i, j);
                        if gij == 0.0 {
                            continue;
                        }
                        for k in 0..d {
                            let diff = xv.get(i, k) - uv.get(j, k);
                            gx.data_mut()[i * d + k] += gij * diff;
                            gu.data_mut()[j * d + k] -= gij * diff;
                        }
                    }
                }
                vec![(*x, gx), (*u, gu)]
            }
            Op::Sum(a) => {
                let av = v(*a);
                vec![(*a, Tensor::filled(av.rows(), av.cols(), g.get(0, 0)))]
            }
            Op::Mean(a) => {
                let av = v(*a);
                let s = g.get(0, 0) / av.len() as f64;
                vec![(*a, Tensor::filled(av.rows(), av.cols(), s))]
            }
            Op::SumRows(a) | Op::MeanRows(a) => {
                let av = v(*a);
                let s = if matches!(op, Op::MeanRows(_)) {
                    1.0 / av.rows() as f64
                } else {
                    1.0
                };
                let mut ga = Tensor::zeros(av.rows(), av.cols());
                for i in 0..av.rows() {
                    for (o, gv) in ga.row_mut(i).iter_mut().zip(g.row(0)) {
                        *o = s * gv;
                    }
                }
                vec![(*a, ga)]
            }
            Op::MaxRows(a) => {
                let av = v(*a);
                let Aux::Argmax(arg) = &self.aux[idx] else {
                    unreachable!("max_rows caches argmax")
                };
                let mut ga = Tensor::zeros(av.rows(), av.cols());
                for (j, &i) in arg.iter().enumerate() {
                    ga.set(i, j, g.get(0, j));
                }
                vec![(*a, ga)]
            }
            Op::Relu(a) => {
                let av = v(*a);
                let mut ga = g.clone();
                for (o, &x) in ga.data_mut().iter_mut().zip(av.data()) {
                    if x <= 0.0 {
                        *o = 0.0;
                    }
                }
                vec![(*a, ga)]
            }
            Op::LayerNorm { a, .. } => {
                let Aux::InvStd(inv) = &self.aux[idx] else {
                    unreachable!("layer norm caches inverse std")
                };
                let c = out.cols() as f64;
                let mut ga = g.clone();
                for (i, &is) in inv.iter().enumerate() {
                    let y = out.row(i);
                    let gr = g.row(i);
                    let mean_g: f64 = gr.iter().sum::<f64>() / c;
                    let mean_gy: f64 = gr.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / c;
                    for (o, (gv, yv)) in ga.row_mut(i).iter_mut().zip(gr.iter().zip(y)) {
                        *o = is * (gv - mean_g - yv * mean_gy);
                    }
                }
                vec![(*a, ga)]
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for p in parts {
                    let pv = v(*p);
                    let c = pv.cols();
                    let mut gp = Tensor::zeros(pv.rows(), c);
                    for i in 0..pv.rows() {
                        gp.row_mut(i).copy_from_slice(&g.row(i)[offset..offset + c]);
                    }
                    offset += c;
                    res.push((*p, gp));
                }
                res
            }
            Op::Init { a, .. } => {
                let Aux::Mixing(w) = &self.aux[idx] else {
                    unreachable!("initialiser caches its mixing matrix")
                };
                vec![(*a, matmul_tn(w, g)?)]
            }
        })
    }
}

fn merge(map: &mut BTreeMap<String, Tensor>, name: &str, g: Tensor) -> Result<()> {
    match map.get_mut(name) {
        Some(acc) => *acc = acc.add(&g)?,
        None => {
            map.insert(name.to_string(), g);
        }
    }
    Ok(())
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) -> Result<()> {
    match slot {
        Some(acc) => *acc = acc.add(&g)?,
        None => *slot = Some(g),
    }
    Ok(())
}

/// Broadcast `b` against `a` (same shape, `1×c`, `r×1` or `1×1`).
fn broadcast_binary(
    a: &Tensor,
    b: &Tensor,
    op: &'static str,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    let (r, c) = (a.rows(), a.cols());
    let (br, bc) = (b.rows(), b.cols());
    let ok = (br == r || br == 1) && (bc == c || bc == 1);
    if !ok || !a.is_matrix() || !b.is_matrix() {
        return Err(Error::Dimension {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = a.clone();
    for i in 0..r {
        let bi = if br == 1 { 0 } else { i };
        for j in 0..c {
            let bj = if bc == 1 { 0 } else { j };
            let idx = i * c + j;
            out.data_mut()[idx] = f(a.data()[idx], b.get(bi, bj));
        }
    }
    Ok(out)
}

/// Sums `g` down to a broadcast operand's shape.
fn reduce_to(g: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if g.shape() == shape {
        return Ok(g.clone());
    }
    let (br, bc) = (shape[0], shape[1]);
    let mut out = Tensor::zeros(br, bc);
    for i in 0..g.rows() {
        for j in 0..g.cols() {
            let (oi, oj) = (if br == 1 { 0 } else { i }, if bc == 1 { 0 } else { j });
            out.data_mut()[oi * bc + oj] += g.get(i, j);
        }
    }
    Ok(out)
}

fn eval(
    op: &Op,
    values: &[Tensor],
    inputs: &HashMap<String, Tensor>,
    params: &BTreeMap<String, Param>,
) -> Result<(Tensor, Aux)> {
    let v = |id: &NodeId| &values[id.0];
    let plain = |t: Tensor| Ok((t, Aux::None));
    match op {
        Op::Input(name) => plain(
            inputs
                .get(name)
                .cloned()
                .ok_or_else(|| Error::Binding(name.clone()))?,
        ),
        Op::Param(name) => plain(params[name].value.clone()),
        Op::Const(t) => plain(t.clone()),
        Op::MatMul(a, b) => plain(matmul(v(a), v(b))?),
        Op::Add(a, b) => plain(broadcast_binary(v(a), v(b), "add", |x, y| x + y)?),
        Op::Mul(a, b) => plain(broadcast_binary(v(a), v(b), "mul", |x, y| x * y)?),
        Op::Neg(a) => plain(v(a).scale(-1.0)),
        Op::Scale(a, s) => plain(v(a).scale(*s)),
        Op::Transpose(a) => plain(v(a).transpose()),
        Op::Softmax { a, scale, mask } => {
            let av = v(a);
            match mask {
                None => plain(tensor::row_softmax(av, *scale)),
                Some(m) => {
                    let mv = v(m);
                    if mv.shape() != av.shape() {
                        return Err(Error::Dimension {
                            op: "masked_row_softmax",
                            lhs: av.shape().to_vec(),
                            rhs: mv.shape().to_vec(),
                        });
                    }
                    let bits: Vec<bool> = mv.data().iter().map(|&x| x != 0.0).collect();
                    plain(tensor::masked_row_softmax(av, *scale, Some(&bits)))
                }
            }
        }
        Op::LogSumExp { a, alpha } => {
            let av = v(a);
            let data = (0..av.rows())
                .map(|i| tensor::logsumexp_unchecked(av.row(i), *alpha))
                .collect();
            plain(Tensor::matrix(av.rows(), 1, data)?)
        }
        Op::SqDist(x, u) => plain(tensor::pairwise_sqdist(v(x), v(u))?),
        Op::Sum(a) => plain(Tensor::scalar(v(a).sum())),
        Op::Mean(a) => plain(Tensor::scalar(v(a).sum() / v(a).len() as f64)),
        Op::SumRows(a) => plain(v(a).sum_rows()),
        Op::MeanRows(a) => plain(v(a).mean_rows()),
        Op::MaxRows(a) => {
            let av = v(a);
            let mut arg = vec![0usize; av.cols()];
            let mut out = Tensor::zeros(1, av.cols());
            for j in 0..av.cols() {
                let mut best = av.get(0, j);
                for i in 1..av.rows() {
                    if av.get(i, j) > best {
                        best = av.get(i, j);
                        arg[j] = i;
                    }
                }
                out.set(0, j, best);
            }
            Ok((out, Aux::Argmax(arg)))
        }
        Op::Relu(a) => plain(v(a).map(|x| x.max(0.0))),
        Op::LayerNorm { a, eps } => {
            let av = v(a);
            let c = av.cols() as f64;
            let mut out = av.clone();
            let mut inv = Vec::with_capacity(av.rows());
            for i in 0..av.rows() {
                let row = av.row(i);
                let mean = row.iter().sum::<f64>() / c;
                let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c;
                let is = 1.0 / (var + eps).sqrt();
                for (o, x) in out.row_mut(i).iter_mut().zip(row) {
                    *o = (x - mean) * is;
                }
                inv.push(is);
            }
            Ok((out, Aux::InvStd(inv)))
        }
        Op::ConcatCols(parts) => {
            let ts: Vec<Tensor> = parts.iter().map(|p| v(p).clone()).collect();
            plain(Tensor::concat_cols(&ts)?)
        }
        Op::Init { a, init, m } => {
            let w = init.mixing_matrix(v(a), *m)?;
            let out = matmul(&w, v(a))?;
            Ok((out, Aux::Mixing(w)))
        }
        Op::KnnMask { x, u, k } => {
            let (xv, uv) = (v(x), v(u));
            let mask = crate::attention::knn_mask(xv, uv, *k)?;
            plain(mask.to_dense(xv.rows()))
        }
    }
}

/// Outcome of a central-difference gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub pass: bool,
    pub numeric: Tensor,
}

/// Central-difference gradient of a scalar function.
pub fn numeric_gradient(
    mut f: impl FnMut(&Tensor) -> f64,
    x: &Tensor,
    h: f64,
) -> Result<Tensor> {
    if !(h > 0.0) {
        return Err(param_err("h", format!("step must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut grad = x.clone();
    for k in 0..x.len() {
        let orig = x.data()[k];
        probe.data_mut()[k] = orig + h;
        let fp = f(&probe);
        probe.data_mut()[k] = orig - h;
        let fm = f(&probe);
        probe.data_mut()[k] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Evaluation { index: k });
        }
        grad.data_mut()[k] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}

/// Compares `analytic` against central differences of `f` at `x`.
///
/// A coordinate passes when its relative error is at most `tol`, or when its
/// absolute error is at most `10·h²` (for entries near zero).
pub fn finite_diff_check(
    f: impl FnMut(&Tensor) -> f64,
    x: &Tensor,
    analytic: &Tensor,
    h: f64,
    tol: f64,
) -> Result<FdReport> {
    if analytic.shape() != x.shape() {
        return Err(Error::Dimension {
            op: "finite_diff_check",
            lhs: x.shape().to_vec(),
            rhs: analytic.shape().to_vec(),
        });
    }
    let numeric = numeric_gradient(f, x, h)?;
    let abs_floor = 10.0 * h * h;
    let mut max_abs = 0.0f64;
    let mut max_rel = 0.0f64;
    let mut pass = true;
    for (&a, &n) in analytic.data().iter().zip(numeric.data()) {
        let abs = (a - n).abs();
        let scale = a.abs().max(n.abs());
        let rel = if scale > 0.0 { abs / scale } else { 0.0 };
        max_abs = max_abs.max(abs);
        if abs > abs_floor {
            max_rel = max_rel.max(rel);
            if rel > tol {
                pass = false;
            }
        }
    }
    Ok(FdReport {
        max_abs_err: max_abs,
        max_rel_err: max_rel,
        pass,
        numeric,
    })
}
