//! Centroid transformer: self-attention, centroid-attention and MLP blocks
//! over a token set, followed by pooling and a classifier, built on the
//! autodiff graph so the unrolled centroid updates are trained end to end.
//!
//! Every attention and MLP block is pre-norm. Parameter names follow
//! `block{i}.{part}`, e.g. `block1.h0.wq` for the query projection of the
//! first head of block 1; see [`Model::param`].

use std::collections::HashMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::NormAxis;
use crate::autodiff::{GradientMap, Graph, NodeId};
use crate::clustering::{farthest_point_sample, lloyd_kmeans, Initializer};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

fn one() -> f64 {
    1.0
}

fn one_usize() -> usize {
    1
}

fn default_axis() -> NormAxis {
    NormAxis::Centroids
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelSpec {
    DotProduct,
    NegHalfSquaredDistance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueSpec {
    Decoupled,
    GradientTied,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombineSpec {
    Sum,
    Concat,
}

/// Centroid initialiser as named in configuration files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitSpec {
    Identity,
    Random {
        #[serde(default)]
        seed: u64,
    },
    Fps {
        #[serde(default)]
        start: usize,
    },
    MeanPool,
    Kmeans {
        #[serde(default = "three")]
        iters: usize,
    },
    Learned,
}

fn three() -> usize {
    3
}

impl InitSpec {
    pub fn label(&self) -> &'static str {
        match self {
            Self::Identity => "identity",
            Self::Random { .. } => "random",
            Self::Fps { .. } => "fps",
            Self::MeanPool => "mean-pool",
            Self::Kmeans { .. } => "k-means",
            Self::Learned => "learned",
        }
    }

    /// Value-dependent initialiser for `n` inputs and `m` centroids; `None`
    /// for the learned variant.
    pub fn initializer(&self, n: usize, m: usize) -> Option<Initializer> {
        Some(match *self {
            Self::Identity => Initializer::Identity,
            Self::Random { seed } => Initializer::RandomSample { seed },
            Self::Fps { start } => Initializer::FarthestPoint { start },
            Self::MeanPool => Initializer::MeanPool { stride: n / m.max(1) },
            Self::Kmeans { iters } => Initializer::KMeans { iters, start: 0 },
            Self::Learned => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum BlockSpec {
    SelfAttention {
        heads: usize,
        head_dim: usize,
        #[serde(default = "one")]
        epsilon: f64,
        #[serde(default = "default_combine")]
        combine: CombineSpec,
    },
    CentroidAttention {
        m: usize,
        #[serde(default = "one_usize")]
        t: usize,
        /// `None` means `1/T`.
        #[serde(default)]
        epsilon: Option<f64>,
        #[serde(default = "one")]
        alpha: f64,
        heads: usize,
        head_dim: usize,
        init: InitSpec,
        #[serde(default)]
        knn_k: Option<usize>,
        #[serde(default = "default_axis")]
        axis: NormAxis,
        #[serde(default = "default_kernel")]
        kernel: KernelSpec,
        #[serde(default = "default_values")]
        values: ValueSpec,
        #[serde(default = "default_combine")]
        combine: CombineSpec,
    },
    Mlp {
        hidden: usize,
    },
}

fn default_combine() -> CombineSpec {
    CombineSpec::Sum
}

fn default_kernel() -> KernelSpec {
    KernelSpec::DotProduct
}

fn default_values() -> ValueSpec {
    ValueSpec::Decoupled
}

impl BlockSpec {
    /// Centroid-attention block with one dot-product head and decoupled values.
    pub fn centroid(m: usize, t: usize, head_dim: usize, init: InitSpec) -> Self {
        Self::CentroidAttention {
            m,
            t,
            epsilon: None,
            alpha: 1.0,
            heads: 1,
            head_dim,
            init,
            knn_k: None,
            axis: NormAxis::Centroids,
            kernel: KernelSpec::DotProduct,
            values: ValueSpec::Decoupled,
            combine: CombineSpec::Sum,
        }
    }

    pub fn self_attention(heads: usize, head_dim: usize) -> Self {
        Self::SelfAttention {
            heads,
            head_dim,
            epsilon: 1.0,
            combine: CombineSpec::Sum,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Self::SelfAttention { .. } => "self_attention",
            Self::CentroidAttention { .. } => "centroid_attention",
            Self::Mlp { .. } => "mlp",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Mean,
    Max,
    MeanMax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    #[serde(default)]
    pub hidden: Vec<usize>,
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    /// Declared token count of every input set.
    pub input_len: usize,
    pub embed_dim: usize,
    pub blocks: Vec<BlockSpec>,
    pub pool: Pooling,
    pub classifier: ClassifierSpec,
    pub seed: u64,
}

impl ModelSpec {
    /// Token count entering each block, followed by the final count.
    pub fn token_schedule(&self) -> Result<Vec<usize>> {
        let mut n = self.input_len;
        let mut out = vec![n];
        for (i, b) in self.blocks.iter().enumerate() {
            if let BlockSpec::CentroidAttention { m, .. } = b {
                if *m == 0 || *m > n {
                    return Err(Error::Config(format!(
                        "block {i}: centroid count {m} exceeds the {n} tokens reaching it"
                    )));
                }
                n = *m;
            }
            out.push(n);
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.input_len == 0 || self.embed_dim == 0 {
            return Err(Error::Config(
                "input_dim, input_len and embed_dim must be positive".into(),
            ));
        }
        if self.classifier.classes < 2 {
            return Err(Error::Config("classifier needs at least 2 classes".into()));
        }
        if self.classifier.hidden.contains(&0) {
            return Err(Error::Config("classifier hidden widths must be positive".into()));
        }
        let schedule = self.token_schedule()?;
        for (i, b) in self.blocks.iter().enumerate() {
            let n = schedule[i];
            match b {
                BlockSpec::SelfAttention { heads, head_dim, .. } => {
                    if *heads == 0 || *head_dim == 0 {
                        return Err(Error::Config(format!("block {i}: heads and head_dim must be positive")));
                    }
                }
                BlockSpec::CentroidAttention {
                    m,
                    t,
                    alpha,
                    heads,
                    head_dim,
                    init,
                    knn_k,
                    epsilon,
                    ..
                } => {
                    if *heads == 0 || *head_dim == 0 || *t == 0 {
                        return Err(Error::Config(format!(
                            "block {i}: heads, head_dim and t must be positive"
                        )));
                    }
                    if !(*alpha > 0.0) {
                        return Err(Error::Config(format!("block {i}: alpha must be positive")));
                    }
                    if epsilon.is_some_and(|e| !(e >= 0.0)) {
                        return Err(Error::Config(format!("block {i}: epsilon must be >= 0")));
                    }
                    if let Some(k) = knn_k {
                        if *k == 0 || *k > n {
                            return Err(Error::Config(format!(
                                "block {i}: knn_k={k} must lie in 1..={n}"
                            )));
                        }
                    }
                    match init {
                        InitSpec::MeanPool if n % m != 0 => {
                            return Err(Error::Config(format!(
                                "block {i}: mean pooling needs {m} to divide {n}"
                            )))
                        }
                        InitSpec::Identity if *m != n => {
                            return Err(Error::Config(format!(
                                "block {i}: identity initialisation needs m = {n}"
                            )))
                        }
                        InitSpec::Fps { start } if *start >= n => {
                            return Err(Error::Config(format!(
                                "block {i}: fps start {start} out of range for {n} tokens"
                            )))
                        }
                        _ => {}
                    }
                }
                BlockSpec::Mlp { hidden } => {
                    if *hidden == 0 {
                        return Err(Error::Config(format!("block {i}: mlp hidden width must be positive")));
                    }
                }
            }
        }
        Ok(())
    }

    /// Same spec with every centroid block's iteration count replaced.
    pub fn with_iterations(&self, iters: usize) -> Self {
        let mut s = self.clone();
        for b in &mut s.blocks {
            if let BlockSpec::CentroidAttention { t, .. } = b {
                *t = iters;
            }
        }
        s
    }

    /// Same spec with every centroid block's initialiser replaced.
    pub fn with_init(&self, new_init: InitSpec) -> Self {
        let mut s = self.clone();
        for b in &mut s.blocks {
            if let BlockSpec::CentroidAttention { init, .. } = b {
                *init = new_init;
            }
        }
        s
    }
}

/// A built model: parameters plus the graph evaluating them.
#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    graph: Graph,
    logits: NodeId,
    token_nodes: Vec<NodeId>,
    schedule: Vec<usize>,
}

struct Builder<'a> {
    g: Graph,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn weight(&mut self, name: String, rows: usize, cols: usize) -> NodeId {
        let bound = 1.0 / (rows as f64).sqrt();
        let t = Tensor::uniform(rows, cols, bound, self.rng);
        self.g.param(&name, t)
    }

    fn bias(&mut self, name: String, fan_in: usize, cols: usize) -> NodeId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let t = Tensor::uniform(1, cols, bound, self.rng);
        self.g.param(&name, t)
    }

    fn norm_params(&mut self, prefix: &str, d: usize) -> (NodeId, NodeId) {
        let gain = self.g.param(&format!("{prefix}.gain"), Tensor::filled(1, d, 1.0));
        let shift = self.g.param(&format!("{prefix}.shift"), Tensor::zeros(1, d));
        (gain, shift)
    }

    fn apply_norm(&mut self, h: NodeId, (gain, shift): (NodeId, NodeId)) -> NodeId {
        let n = self.g.layer_norm(h, LAYER_NORM_EPS);
        let scaled = self.g.mul(n, gain);
        self.g.add(scaled, shift)
    }

    fn layer_norm(&mut self, prefix: &str, h: NodeId, d: usize) -> NodeId {
        let p = self.norm_params(prefix, d);
        self.apply_norm(h, p)
    }

    fn linear(&mut self, prefix: &str, h: NodeId, fan_in: usize, out: usize) -> NodeId {
        let w = self.weight(format!("{prefix}.w"), fan_in, out);
        let b = self.bias(format!("{prefix}.b"), fan_in, out);
        let z = self.g.matmul(h, w);
        self.g.add(z, b)
    }

    fn projection(&mut self, prefix: &str, combine: CombineSpec, heads: usize, dv: usize, d: usize) -> Option<NodeId> {
        match combine {
            CombineSpec::Sum => None,
            CombineSpec::Concat => Some(self.weight(format!("{prefix}.wo"), heads * dv, d)),
        }
    }

    fn combine(&mut self, outs: Vec<NodeId>, w_o: Option<NodeId>) -> NodeId {
        match w_o {
            None => {
                let mut acc = outs[0];
                for o in &outs[1..] {
                    acc = self.g.add(acc, *o);
                }
                acc
            }
            Some(w_o) => {
                let cat = self.g.concat_cols(&outs);
                self.g.matmul(cat, w_o)
            }
        }
    }
}

fn value_dim(values: ValueSpec, combine: CombineSpec, head_dim: usize, d: usize) -> usize {
    match (values, combine) {
        (ValueSpec::GradientTied, _) | (ValueSpec::Decoupled, CombineSpec::Sum) => d,
        (ValueSpec::Decoupled, CombineSpec::Concat) => head_dim,
    }
}

/// Builds the graph and initialises all parameters from `spec.seed`.
pub fn build_model(spec: &ModelSpec) -> Result<Model> {
    spec.validate()?;
    let schedule = spec.token_schedule()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut b = Builder {
        g: Graph::new(),
        rng: &mut rng,
    };
    let d = spec.embed_dim;
    let x = b.g.input("x");
    let y = b.g.input("y");
    let mut h = b.linear("embed", x, spec.input_dim, d);
    let mut token_nodes = vec![h];

    for (i, block) in spec.blocks.iter().enumerate() {
        let p = format!("block{i}");
        h = match block {
            BlockSpec::SelfAttention {
                heads,
                head_dim,
                epsilon,
                combine,
            } => {
                let ln = b.layer_norm(&format!("{p}.ln"), h, d);
                let dv = value_dim(ValueSpec::Decoupled, *combine, *head_dim, d);
                let scale = 1.0 / (*head_dim as f64).sqrt();
                let mut outs = Vec::with_capacity(*heads);
                for l in 0..*heads {
                    let wq = b.weight(format!("{p}.h{l}.wq"), d, *head_dim);
                    let wk = b.weight(format!("{p}.h{l}.wk"), d, *head_dim);
                    let wv = b.weight(format!("{p}.h{l}.wv"), d, dv);
                    let q = b.g.matmul(ln, wq);
                    let k = b.g.matmul(ln, wk);
                    let v = b.g.matmul(ln, wv);
                    let kt = b.g.transpose(k);
                    let scores = b.g.matmul(q, kt);
                    let s = b.g.row_softmax(scores, scale);
                    outs.push(b.g.matmul(s, v));
                }
                let w_o = b.projection(&p, *combine, *heads, dv, d);
                let merged = b.combine(outs, w_o);
                let step = b.g.scale(merged, *epsilon);
                b.g.add(h, step)
            }
            BlockSpec::CentroidAttention {
                m,
                t,
                epsilon,
                alpha,
                heads,
                head_dim,
                init,
                knn_k,
                axis,
                kernel,
                values,
                combine,
            } => {
                let n = schedule[i];
                let eps = epsilon.unwrap_or(1.0 / *t as f64);
                let ln_x = b.layer_norm(&format!("{p}.ln"), h, d);
                let mut u = match init.initializer(n, *m) {
                    Some(initializer) => b.g.init_centroids(h, initializer, *m)?,
                    None => {
                        let w = b.weight(format!("{p}.init"), n, *m);
                        let wt = b.g.transpose(w);
                        b.g.matmul(wt, h)
                    }
                };
                let dv = value_dim(*values, *combine, *head_dim, d);
                let scale = 1.0 / (*head_dim as f64).sqrt();
                struct Head {
                    wq: Option<NodeId>,
                    kt: Option<NodeId>,
                    v: Option<NodeId>,
                }
                let mut hs = Vec::with_capacity(*heads);
                for l in 0..*heads {
                    let (wq, kt) = match kernel {
                        KernelSpec::DotProduct => {
                            let wq = b.weight(format!("{p}.h{l}.wq"), d, *head_dim);
                            let wk = b.weight(format!("{p}.h{l}.wk"), d, *head_dim);
                            let k = b.g.matmul(ln_x, wk);
                            (Some((wq, wk)), Some(b.g.transpose(k)))
                        }
                        KernelSpec::NegHalfSquaredDistance => (None, None),
                    };
                    let v = match (values, kernel) {
                        (ValueSpec::Decoupled, _) => {
                            let wv = b.weight(format!("{p}.h{l}.wv"), d, dv);
                            Some(b.g.matmul(ln_x, wv))
                        }
                        (ValueSpec::GradientTied, KernelSpec::DotProduct) => {
                            // ∇_u φ = scale · W_Q W_Kᵀ x, as rows: scale · x W_K W_Qᵀ
                            let (wq, _) = wq.expect("dot-product head has projections");
                            let kx = kt.map(|kt| b.g.transpose(kt)).expect("keys");
                            let wqt = b.g.transpose(wq);
                            let v = b.g.matmul(kx, wqt);
                            Some(b.g.scale(v, scale))
                        }
                        (ValueSpec::GradientTied, KernelSpec::NegHalfSquaredDistance) => None,
                    };
                    hs.push(Head {
                        wq: wq.map(|(q, _)| q),
                        kt,
                        v,
                    });
                }
                let w_o = b.projection(&p, *combine, *heads, dv, d);
                let lnq = b.norm_params(&format!("{p}.lnq"), d);
                for _ in 0..*t {
                    let uq = b.apply_norm(u, lnq);
                    let mask = knn_k.map(|k| b.g.knn_mask(ln_x, uq, k));
                    let mut outs = Vec::with_capacity(*heads);
                    for head in &hs {
                        // scores laid out centroids × inputs
                        let (scores, s_scale) = match kernel {
                            KernelSpec::DotProduct => {
                                let q = b.g.matmul(uq, head.wq.expect("query projection"));
                                (b.g.matmul(q, head.kt.expect("keys")), alpha * scale)
                            }
                            KernelSpec::NegHalfSquaredDistance => {
                                let dist = b.g.sqdist(uq, ln_x);
                                (b.g.scale(dist, -0.5), *alpha)
                            }
                        };
                        let sim = match axis {
                            NormAxis::Inputs => match mask {
                                Some(mk) => b.g.masked_row_softmax(scores, s_scale, mk),
                                None => b.g.row_softmax(scores, s_scale),
                            },
                            NormAxis::Centroids => {
                                let st = b.g.transpose(scores);
                                let soft = match mask {
                                    Some(mk) => {
                                        let mt = b.g.transpose(mk);
                                        b.g.masked_row_softmax(st, s_scale, mt)
                                    }
                                    None => b.g.row_softmax(st, s_scale),
                                };
                                b.g.transpose(soft)
                            }
                        };
                        let inc = match head.v {
                            Some(v) => b.g.matmul(sim, v),
                            None => {
                                // Σ_i s_ji (x_i - u_j)
                                let pulled = b.g.matmul(sim, ln_x);
                                let simt = b.g.transpose(sim);
                                let mass_row = b.g.sum_rows(simt);
                                let mass = b.g.transpose(mass_row);
                                let held = b.g.mul(uq, mass);
                                b.g.sub(pulled, held)
                            }
                        };
                        outs.push(inc);
                    }
                    let merged = b.combine(outs, w_o);
                    let step = b.g.scale(merged, eps);
                    u = b.g.add(u, step);
                }
                u
            }
            BlockSpec::Mlp { hidden } => {
                let ln = b.layer_norm(&format!("{p}.ln"), h, d);
                let z = b.linear(&format!("{p}.fc1"), ln, d, *hidden);
                let a = b.g.relu(z);
                let o = b.linear(&format!("{p}.fc2"), a, *hidden, d);
                b.g.add(h, o)
            }
        };
        token_nodes.push(h);
    }

    let hn = b.layer_norm("final.ln", h, d);
    let (mut z, mut width) = match spec.pool {
        Pooling::Mean => (b.g.mean_rows(hn), d),
        Pooling::Max => (b.g.max_rows(hn), d),
        Pooling::MeanMax => {
            let mean = b.g.mean_rows(hn);
            let max = b.g.max_rows(hn);
            (b.g.concat_cols(&[mean, max]), 2 * d)
        }
    };
    for (li, &wdt) in spec.classifier.hidden.iter().enumerate() {
        let lin = b.linear(&format!("head.fc{li}"), z, width, wdt);
        z = b.g.relu(lin);
        width = wdt;
    }
    let logits = b.linear("head.out", z, width, spec.classifier.classes);
    // cross-entropy against a one-hot row: lse(z) - <z, y>
    let lse = b.g.logsumexp(logits, 1.0);
    let picked = b.g.mul(logits, y);
    let picked = b.g.sum(picked);
    let loss = b.g.sub(lse, picked);
    b.g.set_output(loss);

    Ok(Model {
        spec: spec.clone(),
        graph: b.g,
        logits,
        token_nodes,
        schedule,
    })
}

impl Model {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.graph.param_value(name)
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.graph.params()
    }

    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        self.graph.set_param(name, value)
    }

    pub fn num_params(&self) -> usize {
        self.graph.params().map(|(_, t)| t.len()).sum()
    }

    /// Declared token count entering each block, then the final count.
    pub fn token_schedule(&self) -> &[usize] {
        &self.schedule
    }

    fn bind(&self, x: &Tensor, label: Option<usize>) -> Result<HashMap<String, Tensor>> {
        if !x.is_matrix() || x.cols() != self.spec.input_dim {
            return Err(Error::Dimension {
                op: "model input",
                lhs: vec![self.spec.input_len, self.spec.input_dim],
                rhs: x.shape().to_vec(),
            });
        }
        let c = self.spec.classifier.classes;
        let mut y = Tensor::zeros(1, c);
        if let Some(l) = label {
            if l >= c {
                return Err(Error::Index { index: l, len: c });
            }
            y.set(0, l, 1.0);
        }
        Ok(HashMap::from([("x".to_string(), x.clone()), ("y".to_string(), y)]))
    }

    /// Class logits, shape `1 × C`.
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let inputs = self.bind(x, None)?;
        self.graph.forward(&inputs)?;
        Ok(self.graph.value(self.logits).expect("forwarded").clone())
    }

    /// Cross-entropy loss and logits for one labelled sample.
    pub fn loss(&mut self, x: &Tensor, label: usize) -> Result<(f64, Tensor)> {
        let inputs = self.bind(x, Some(label))?;
        let loss = self.graph.forward(&inputs)?;
        let logits = self.graph.value(self.logits).expect("forwarded").clone();
        Ok((loss.get(0, 0), logits))
    }

    /// Loss, logits and parameter gradients for one labelled sample.
    pub fn loss_and_grad(&mut self, x: &Tensor, label: usize) -> Result<(f64, Tensor, GradientMap)> {
        let (loss, logits) = self.loss(x, label)?;
        let grads = self.graph.backward(&Tensor::scalar(1.0))?;
        Ok((loss, logits, grads))
    }

    /// Token counts observed at each block boundary in the latest forward pass.
    pub fn live_token_counts(&self) -> Option<Vec<usize>> {
        self.token_nodes
            .iter()
            .map(|&id| self.graph.value(id).map(Tensor::rows))
            .collect()
    }

    /// Output of block `i` (or the embedding for `i = 0`) from the latest
    /// forward pass.
    pub fn tokens_after(&self, i: usize) -> Option<&Tensor> {
        self.token_nodes.get(i).and_then(|&id| self.graph.value(id))
    }

    /// Tensor elements alive after the latest forward pass, a stand-in for
    /// activation memory.
    pub fn live_elements(&self) -> usize {
        self.graph.live_elements()
    }

    pub fn predict(&mut self, x: &Tensor) -> Result<usize> {
        Ok(argmax(self.forward(x)?.row(0)))
    }

    /// `p ← p - lr · g` for every parameter with a gradient.
    pub fn sgd_step(&mut self, grads: &GradientMap, lr: f64) -> Result<()> {
        for (name, g) in &grads.params {
            let current = self
                .graph
                .param_value(name)
                .ok_or_else(|| Error::Binding(name.clone()))?;
            let next = current.axpy(-lr, g)?;
            self.graph.set_param(name, next)?;
        }
        Ok(())
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Synthetic set-classification task: each class is a fixed geometric
/// arrangement of Gaussian blobs, shifted by a random offset per sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub points: usize,
    pub classes: usize,
    pub blobs: usize,
    pub spread: f64,
    /// Half-width of the uniform per-sample translation.
    pub jitter: f64,
    pub samples_per_class: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            points: 64,
            classes: 3,
            blobs: 4,
            spread: 0.1,
            jitter: 0.25,
            samples_per_class: 50,
            seed: 7,
        }
    }
}

pub const MAX_SYNTH_CLASSES: usize = 4;

/// Blob centres of class `c` before translation.
pub fn class_layout(c: usize, blobs: usize) -> Vec<[f64; 2]> {
    let r = 1.5;
    let lin = |k: usize| {
        if blobs == 1 {
            0.0
        } else {
            -r + 2.0 * r * k as f64 / (blobs - 1) as f64
        }
    };
    (0..blobs)
        .map(|k| match c {
            0 => {
                let a = std::f64::consts::TAU * k as f64 / blobs as f64 + std::f64::consts::FRAC_PI_4;
                [r * a.cos(), r * a.sin()]
            }
            1 => [lin(k), 0.0],
            2 => [0.0, lin(k)],
            _ => [lin(k), lin(k).abs() - 0.75],
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub points: Tensor,
    pub label: usize,
    /// Translated blob centres the points were drawn around.
    pub centres: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthDataset {
    pub config: SynthConfig,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Class-balanced samples with a deterministic 80/20 split.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<SynthDataset> {
    if cfg.classes < 2 || cfg.classes > MAX_SYNTH_CLASSES {
        return Err(Error::Config(format!(
            "classes must lie in 2..={MAX_SYNTH_CLASSES}, got {}",
            cfg.classes
        )));
    }
    if cfg.blobs < 3 || cfg.points < cfg.blobs {
        return Err(Error::Config(format!(
            "need blobs >= 3 and points >= blobs (blobs={}, points={})",
            cfg.blobs, cfg.points
        )));
    }
    if cfg.samples_per_class < 5 || !(cfg.spread >= 0.0) || !(cfg.jitter >= 0.0) {
        return Err(Error::Config(
            "samples_per_class must be >= 5 and spread, jitter non-negative".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    let n_test = cfg.samples_per_class / 5;
    for c in 0..cfg.classes {
        let layout = class_layout(c, cfg.blobs);
        for s in 0..cfg.samples_per_class {
            let off = [
                rand::Rng::random_range(&mut rng, -cfg.jitter..=cfg.jitter),
                rand::Rng::random_range(&mut rng, -cfg.jitter..=cfg.jitter),
            ];
            let centres: Vec<[f64; 2]> = layout.iter().map(|p| [p[0] + off[0], p[1] + off[1]]).collect();
            let mut blob_of: Vec<usize> = (0..cfg.points).map(|i| i % cfg.blobs).collect();
            blob_of.shuffle(&mut rng);
            let mut data = Vec::with_capacity(2 * cfg.points);
            for &bl in &blob_of {
                for centre in &centres[bl] {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    data.push(centre + cfg.spread * z);
                }
            }
            let sample = Sample {
                points: Tensor::matrix(cfg.points, 2, data)?,
                label: c,
                centres,
            };
            if s < cfg.samples_per_class - n_test {
                train.push(sample);
            } else {
                test.push(sample);
            }
        }
    }
    Ok(SynthDataset {
        config: cfg.clone(),
        train,
        test,
    })
}

/// Translation-invariant summary of a point set: the covariance entries of
/// its k-means blob centres.
pub fn blob_feature(points: &Tensor, blobs: usize) -> Result<[f64; 3]> {
    let seeds = farthest_point_sample(points, blobs, 0)?;
    let (centres, _) = lloyd_kmeans(points, blobs, 10, &seeds)?;
    let mean = centres.mean_rows();
    let (mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0);
    for j in 0..blobs {
        let dx = centres.get(j, 0) - mean.get(0, 0);
        let dy = centres.get(j, 1) - mean.get(0, 1);
        xx += dx * dx;
        yy += dy * dy;
        xy += dx * dy;
    }
    let b = blobs as f64;
    Ok([xx / b, yy / b, xy / b])
}

/// Test accuracy of a nearest-class-mean classifier on [`blob_feature`].
pub fn nearest_centroid_accuracy(data: &SynthDataset) -> Result<f64> {
    let c = data.config.classes;
    let blobs = data.config.blobs;
    let mut means = vec![[0.0f64; 3]; c];
    let mut counts = vec![0usize; c];
    for s in &data.train {
        let f = blob_feature(&s.points, blobs)?;
        for k in 0..3 {
            means[s.label][k] += f[k];
        }
        counts[s.label] += 1;
    }
    for (m, &n) in means.iter_mut().zip(&counts) {
        for v in m.iter_mut() {
            *v /= n.max(1) as f64;
        }
    }
    let mut correct = 0;
    for s in &data.test {
        let f = blob_feature(&s.points, blobs)?;
        let dist: Vec<f64> = means
            .iter()
            .map(|m| -(0..3).map(|k| (f[k] - m[k]).powi(2)).sum::<f64>())
            .collect();
        if argmax(&dist) == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.test.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
}

/// One training epoch, as written to the line-delimited report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
    /// Seconds per epoch; kept out of the serialised records so reports are
    /// reproducible byte for byte.
    pub wall_times: Vec<f64>,
    pub seed: u64,
    pub config_hash: String,
}

impl TrainReport {
    pub fn final_test_acc(&self) -> f64 {
        self.records.last().map_or(0.0, |r| r.test_acc)
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).expect("records serialise"));
            s.push('\n');
        }
        s
    }

    pub fn parse_jsonl(text: &str) -> Result<Vec<EpochRecord>> {
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| Error::Parse {
                    line: i + 1,
                    reason: e.to_string(),
                })
            })
            .collect()
    }
}

/// Short stable digest of the model spec and hyperparameters.
pub fn config_hash(spec: &ModelSpec, hyper: &TrainHyper) -> String {
    let json = serde_json::to_string(&(spec, hyper)).expect("spec serialises");
    let digest = Sha256::digest(json.as_bytes());
    hex::encode(&digest[..8])
}

pub fn accuracy(model: &mut Model, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    for s in samples {
        if model.predict(&s.points)? == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// Mini-batch gradient descent on the mean cross-entropy of each batch.
pub fn train(model: &mut Model, data: &SynthDataset, hyper: &TrainHyper) -> Result<TrainReport> {
    if hyper.batch == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if data.train.is_empty() {
        return Err(Error::Config("empty training split".into()));
    }
    let sample_shape = data.train[0].points.shape();
    if sample_shape != [model.spec.input_len, model.spec.input_dim] {
        return Err(Error::Dimension {
            op: "train",
            lhs: vec![model.spec.input_len, model.spec.input_dim],
            rhs: sample_shape.to_vec(),
        });
    }
    let hash = config_hash(&model.spec, hyper);
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut records = Vec::with_capacity(hyper.epochs);
    let mut wall_times = Vec::with_capacity(hyper.epochs);
    for epoch in 0..hyper.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut total_loss = 0.0;
        let mut correct = 0usize;
        for chunk in order.chunks(hyper.batch) {
            let mut acc = GradientMap::default();
            for &i in chunk {
                let s = &data.train[i];
                let (loss, logits, grads) = model.loss_and_grad(&s.points, s.label)?;
                if !loss.is_finite() || !grads.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        config_hash: hash,
                    });
                }
                total_loss += loss;
                if argmax(logits.row(0)) == s.label {
                    correct += 1;
                }
                acc.accumulate(&grads)?;
            }
            acc.scale(1.0 / chunk.len() as f64);
            if hyper.lr != 0.0 {
                model.sgd_step(&acc, hyper.lr)?;
            }
        }
        let n = data.train.len() as f64;
        let test_acc = accuracy(model, &data.test)?;
        records.push(EpochRecord {
            epoch,
            loss: total_loss / n,
            train_acc: correct as f64 / n,
            test_acc,
            seed: hyper.seed,
            config_hash: hash.clone(),
        });
        wall_times.push(start.elapsed().as_secs_f64());
    }
    Ok(TrainReport {
        records,
        wall_times,
        seed: hyper.seed,
        config_hash: hash,
    })
}
