//! Self-attention, centroid attention and the KNN-restricted centroid update.
//!
//! Centroid attention maps `N` inputs to `M ≤ N` outputs by initialising `M`
//! centroids and then taking `T` ascent steps on the soft k-means objective
//!
//! ```text
//! F(U) = Σ_ℓ Σ_i (1/α) log Σ_j exp(α φ_ℓ(x_i, u_j))
//! u_j ← u_j + ε Σ_ℓ Σ_i sim_ℓ(x_i, u_j) V_ℓ(x_i, u_j)
//! ```
//!
//! With `V_ℓ = ∇_u φ_ℓ` and `sim` normalised over centroids, the increment is
//! exactly `ε ∇_U F`. The value function can also be decoupled from `φ` and
//! the normalisation axis switched to the inputs, which turns the update into
//! ordinary query–key–value attention with the centroids as queries.

use serde::{Deserialize, Serialize};

use crate::clustering::Initializer;
use crate::error::{param_err, Error, Result};
use crate::tensor::{self, matmul, matmul_nt, matmul_tn, pairwise_sqdist, Tensor};

/// Query, key and value projections of one attention head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    /// `d × d_h`
    pub w_q: Tensor,
    /// `d × d_h`
    pub w_k: Tensor,
    /// `d × d_v`
    pub w_v: Tensor,
}

impl HeadParams {
    pub fn new(w_q: Tensor, w_k: Tensor, w_v: Tensor) -> Result<Self> {
        let d = w_q.rows();
        if w_k.rows() != d || w_v.rows() != d || w_q.cols() != w_k.cols() {
            return Err(Error::Dimension {
                op: "head params",
                lhs: w_q.shape().to_vec(),
                rhs: w_k.shape().to_vec(),
            });
        }
        if !(w_q.is_finite() && w_k.is_finite() && w_v.is_finite()) {
            return Err(param_err("head params", "non-finite weights"));
        }
        Ok(Self { w_q, w_k, w_v })
    }

    /// Gaussian initialisation with standard deviation `1/√d`.
    pub fn random<R: rand::Rng + ?Sized>(d: usize, d_h: usize, d_v: usize, rng: &mut R) -> Self {
        let s = 1.0 / (d as f64).sqrt();
        Self {
            w_q: Tensor::randn(d, d_h, s, rng),
            w_k: Tensor::randn(d, d_h, s, rng),
            w_v: Tensor::randn(d, d_v, s, rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_q.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.w_q.cols()
    }

    pub fn value_dim(&self) -> usize {
        self.w_v.cols()
    }
}

/// How per-head outputs are merged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum HeadCombine {
    /// Add head outputs; every head must produce `d`-dimensional values.
    Sum,
    /// Concatenate head outputs and project with `W_O: (L·d_v) × d`.
    ConcatProject(Tensor),
}

/// Multi-head self-attention parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub heads: Vec<HeadParams>,
    pub combine: HeadCombine,
    /// Scale scores by `1/√d_h`.
    pub scaled: bool,
}

impl AttentionParams {
    pub fn summed(heads: Vec<HeadParams>) -> Self {
        Self {
            heads,
            combine: HeadCombine::Sum,
            scaled: true,
        }
    }

    pub fn score_scale(&self, head: &HeadParams) -> f64 {
        if self.scaled {
            1.0 / (head.head_dim() as f64).sqrt()
        } else {
            1.0
        }
    }
}

/// Similarity `φ(x, u)` between an input `x` and a centroid `u`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SimilarityKernel {
    /// `φ(x, u) = scale · (u W_Q) · (x W_K)`
    ScaledDotProduct { w_q: Tensor, w_k: Tensor, scale: f64 },
    /// `φ(x, u) = -½ ‖x - u‖²`
    NegHalfSquaredDistance,
}

impl SimilarityKernel {
    /// Dot-product kernel with the conventional `1/√d_h` scale.
    pub fn dot_product(w_q: Tensor, w_k: Tensor) -> Result<Self> {
        if w_q.shape() != w_k.shape() {
            return Err(Error::Dimension {
                op: "dot_product kernel",
                lhs: w_q.shape().to_vec(),
                rhs: w_k.shape().to_vec(),
            });
        }
        let scale = 1.0 / (w_q.cols() as f64).sqrt();
        Ok(Self::ScaledDotProduct { w_q, w_k, scale })
    }

    pub fn input_dim(&self) -> Option<usize> {
        match self {
            Self::ScaledDotProduct { w_q, .. } => Some(w_q.rows()),
            Self::NegHalfSquaredDistance => None,
        }
    }

    pub fn phi(&self, x: &[f64], u: &[f64]) -> f64 {
        match self {
            Self::ScaledDotProduct { w_q, w_k, scale } => {
                let q = project(u, w_q);
                let k = project(x, w_k);
                scale * tensor::dot(&q, &k)
            }
            Self::NegHalfSquaredDistance => -0.5 * tensor::sqdist(x, u),
        }
    }

    pub fn grad_u_phi(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        match self {
            Self::ScaledDotProduct { w_q, w_k, scale } => {
                // ∇_u = scale · W_Q (W_Kᵀ x)
                let k = project(x, w_k);
                (0..w_q.rows())
                    .map(|r| scale * tensor::dot(w_q.row(r), &k))
                    .collect()
            }
            Self::NegHalfSquaredDistance => x.iter().zip(u).map(|(a, b)| a - b).collect(),
        }
    }

    /// `φ(x_i, u_j)` for all pairs, shape `N × M`.
    pub fn score_matrix(&self, x: &Tensor, u: &Tensor) -> Result<Tensor> {
        match self {
            Self::ScaledDotProduct { w_q, w_k, scale } => {
                let k = matmul(x, w_k)?;
                let q = matmul(u, w_q)?;
                Ok(matmul_nt(&k, &q)?.scale(*scale))
            }
            Self::NegHalfSquaredDistance => Ok(pairwise_sqdist(x, u)?.scale(-0.5)),
        }
    }
}

/// Row vector `v` times matrix `w`.
fn project(v: &[f64], w: &Tensor) -> Vec<f64> {
    let mut out = vec![0.0; w.cols()];
    for (r, &vr) in v.iter().enumerate() {
        for (o, &wv) in out.iter_mut().zip(w.row(r)) {
            *o += vr * wv;
        }
    }
    out
}

/// Value function of a centroid-attention head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ValueFn {
    /// `V(x, u) = ∇_u φ(x, u)`; the step is then a gradient step.
    GradientTied,
    /// `V(x, u) = x W_V`, independent of `u`.
    Decoupled(Tensor),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentroidHead {
    pub kernel: SimilarityKernel,
    pub value: ValueFn,
}

impl CentroidHead {
    pub fn tied(kernel: SimilarityKernel) -> Self {
        Self {
            kernel,
            value: ValueFn::GradientTied,
        }
    }

    /// Head that scores with `W_Q`/`W_K` and aggregates `x W_V`, as a
    /// self-attention head would.
    pub fn from_attention(head: &HeadParams, scale: f64) -> Self {
        Self {
            kernel: SimilarityKernel::ScaledDotProduct {
                w_q: head.w_q.clone(),
                w_k: head.w_k.clone(),
                scale,
            },
            value: ValueFn::Decoupled(head.w_v.clone()),
        }
    }

    fn value_dim(&self, d: usize) -> usize {
        match &self.value {
            ValueFn::GradientTied => d,
            ValueFn::Decoupled(w) => w.cols(),
        }
    }
}

/// Axis along which `exp(α φ)` is normalised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormAxis {
    /// For each input, over the `M` centroids (the soft k-means gradient).
    Centroids,
    /// For each centroid, over the `N` inputs (standard attention).
    Inputs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentroidAttentionConfig {
    pub m: usize,
    pub t: usize,
    /// Step size; `None` means `1/T`.
    pub epsilon: Option<f64>,
    pub alpha: f64,
    pub heads: Vec<CentroidHead>,
    pub combine: HeadCombine,
    pub init: Initializer,
    pub knn_k: Option<usize>,
    pub axis: NormAxis,
}

impl CentroidAttentionConfig {
    /// One step, `α = 1`, FPS initialisation from the first input, centroid
    /// normalisation, summed heads.
    pub fn new(m: usize, heads: Vec<CentroidHead>) -> Self {
        Self {
            m,
            t: 1,
            epsilon: None,
            alpha: 1.0,
            heads,
            combine: HeadCombine::Sum,
            init: Initializer::FarthestPoint { start: 0 },
            knn_k: None,
            axis: NormAxis::Centroids,
        }
    }

    pub fn step_size(&self) -> f64 {
        self.epsilon.unwrap_or(1.0 / self.t as f64)
    }

    /// Checks the configuration against an `N × d` input.
    pub fn validate(&self, n: usize, d: usize) -> Result<()> {
        if n == 0 {
            return Err(Error::Config("empty input set".into()));
        }
        if self.m == 0 || self.m > n {
            return Err(Error::Config(format!(
                "centroid count M={} must satisfy 1 <= M <= N={n}",
                self.m
            )));
        }
        if self.t == 0 {
            return Err(Error::Config("iteration count T must be >= 1".into()));
        }
        if !(self.alpha > 0.0) {
            return Err(param_err("alpha", format!("must be positive, got {}", self.alpha)));
        }
        let eps = self.step_size();
        if !(eps >= 0.0) || !eps.is_finite() {
            return Err(param_err("epsilon", format!("must be finite and >= 0, got {eps}")));
        }
        if let Some(k) = self.knn_k {
            if k == 0 || k > n {
                return Err(Error::Config(format!("knn_k={k} must satisfy 1 <= k <= N={n}")));
            }
        }
        if self.heads.is_empty() {
            return Err(Error::Config("at least one head is required".into()));
        }
        for (l, h) in self.heads.iter().enumerate() {
            if let Some(kd) = h.kernel.input_dim() {
                if kd != d {
                    return Err(Error::Config(format!(
                        "head {l}: kernel expects d={kd}, input has d={d}"
                    )));
                }
            }
            if let ValueFn::Decoupled(w) = &h.value {
                if w.rows() != d {
                    return Err(Error::Config(format!(
                        "head {l}: value projection expects d={}, input has d={d}",
                        w.rows()
                    )));
                }
            }
        }
        check_combine(
            &self.combine,
            &self.heads.iter().map(|h| h.value_dim(d)).collect::<Vec<_>>(),
            d,
        )
    }
}

fn check_combine(mode: &HeadCombine, value_dims: &[usize], d: usize) -> Result<()> {
    match mode {
        HeadCombine::Sum => {
            if let Some(dv) = value_dims.iter().find(|&&dv| dv != d) {
                return Err(Error::Config(format!(
                    "sum head combination needs d_v = d, got d_v={dv}, d={d}"
                )));
            }
        }
        HeadCombine::ConcatProject(w_o) => {
            let total: usize = value_dims.iter().sum();
            if w_o.rows() != total || w_o.cols() != d {
                return Err(Error::Config(format!(
                    "output projection must be {total}x{d}, got {:?}",
                    w_o.shape()
                )));
            }
        }
    }
    Ok(())
}

/// Per-centroid neighbour lists for the KNN-restricted update.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnnMask {
    /// For centroid `j`, the indices of its nearest inputs in ascending
    /// index order.
    pub neighbors: Vec<Vec<usize>>,
    /// Set when the requested `k` exceeded `N` and was reduced.
    pub clamped: bool,
}

impl KnnMask {
    /// Dense `M × N` indicator matrix.
    pub fn to_dense(&self, n: usize) -> Tensor {
        let mut t = Tensor::zeros(self.neighbors.len(), n);
        for (j, list) in self.neighbors.iter().enumerate() {
            for &i in list {
                t.set(j, i, 1.0);
            }
        }
        t
    }

    /// `N × M` allowed-pair table matching [`similarity_matrix`] layout.
    fn allowed(&self, n: usize) -> Result<Vec<bool>> {
        let m = self.neighbors.len();
        let mut out = vec![false; n * m];
        for (j, list) in self.neighbors.iter().enumerate() {
            for &i in list {
                if i >= n {
                    return Err(Error::Index { index: i, len: n });
                }
                out[i * m + j] = true;
            }
        }
        Ok(out)
    }
}

/// The `min(k, N)` inputs nearest each centroid under squared L2 distance,
/// ties going to the lower index.
pub fn knn_mask(x: &Tensor, u: &Tensor, k: usize) -> Result<KnnMask> {
    if k == 0 {
        return Err(param_err("k", "must be at least 1"));
    }
    let d = pairwise_sqdist(x, u)?;
    let n = x.rows();
    let kk = k.min(n);
    let mut neighbors = Vec::with_capacity(u.rows());
    let mut order: Vec<usize> = Vec::with_capacity(n);
    for j in 0..u.rows() {
        order.clear();
        order.extend(0..n);
        let key = |&i: &usize| (d.get(i, j), i);
        if kk < n {
            order.select_nth_unstable_by(kk - 1, |a, b| key(a).partial_cmp(&key(b)).unwrap());
            order.truncate(kk);
        }
        order.sort_unstable();
        neighbors.push(order.clone());
    }
    Ok(KnnMask {
        neighbors,
        clamped: k > n,
    })
}

fn check_dims(x: &Tensor, u: &Tensor) -> Result<()> {
    if !x.is_matrix() || !u.is_matrix() || x.cols() != u.cols() {
        return Err(Error::Dimension {
            op: "centroid attention",
            lhs: x.shape().to_vec(),
            rhs: u.shape().to_vec(),
        });
    }
    Ok(())
}

fn normalise(scores: &Tensor, alpha: f64, axis: NormAxis, allowed: Option<&[bool]>) -> Tensor {
    match axis {
        NormAxis::Centroids => tensor::masked_row_softmax(scores, alpha, allowed),
        NormAxis::Inputs => {
            let allowed_t = allowed.map(|a| {
                let (n, m) = (scores.rows(), scores.cols());
                let mut t = vec![false; n * m];
                for i in 0..n {
                    for j in 0..m {
                        t[j * n + i] = a[i * m + j];
                    }
                }
                t
            });
            tensor::masked_row_softmax(&scores.transpose(), alpha, allowed_t.as_deref())
                .transpose()
        }
    }
}

/// `exp(α φ(x_i, u_j))` normalised along `axis`, shape `N × M`.
pub fn similarity_matrix(
    x: &Tensor,
    u: &Tensor,
    kernel: &SimilarityKernel,
    alpha: f64,
    axis: NormAxis,
) -> Result<Tensor> {
    if !(alpha > 0.0) {
        return Err(param_err("alpha", format!("must be positive, got {alpha}")));
    }
    check_dims(x, u)?;
    Ok(normalise(&kernel.score_matrix(x, u)?, alpha, axis, None))
}

/// Merges per-head `M × d_v` outputs into `M × d`.
pub fn combine_heads(per_head: &[Tensor], mode: &HeadCombine, d: usize) -> Result<Tensor> {
    let first = per_head
        .first()
        .ok_or_else(|| Error::Config("no head outputs to combine".into()))?;
    let dims: Vec<usize> = per_head.iter().map(Tensor::cols).collect();
    check_combine(mode, &dims, d)?;
    match mode {
        HeadCombine::Sum => {
            let mut acc = first.clone();
            for h in &per_head[1..] {
                acc = acc.add(h)?;
            }
            Ok(acc)
        }
        HeadCombine::ConcatProject(w_o) => matmul(&Tensor::concat_cols(per_head)?, w_o),
    }
}

/// Multi-head self-attention `x_i + ε Σ_ℓ Σ_j softmax_j(q_i·k_j) v_j`.
pub fn self_attention(x: &Tensor, params: &AttentionParams, epsilon: f64) -> Result<Tensor> {
    if !x.is_matrix() {
        return Err(Error::Shape {
            shape: x.shape().to_vec(),
            reason: "self_attention expects an N x d matrix".into(),
        });
    }
    if params.heads.is_empty() {
        return Err(Error::Config("at least one head is required".into()));
    }
    let d = x.cols();
    let mut outs = Vec::with_capacity(params.heads.len());
    for head in &params.heads {
        if head.input_dim() != d {
            return Err(Error::Dimension {
                op: "self_attention",
                lhs: x.shape().to_vec(),
                rhs: head.w_q.shape().to_vec(),
            });
        }
        let q = matmul(x, &head.w_q)?;
        let k = matmul(x, &head.w_k)?;
        let v = matmul(x, &head.w_v)?;
        let s = tensor::row_softmax(&matmul_nt(&q, &k)?, params.score_scale(head));
        outs.push(matmul(&s, &v)?);
    }
    x.axpy(epsilon, &combine_heads(&outs, &params.combine, d)?)
}

/// One update of all centroids. With a mask, both the aggregation and the
/// softmax normalisation run over each centroid's neighbour set only.
pub fn centroid_update_step(
    x: &Tensor,
    u: &Tensor,
    cfg: &CentroidAttentionConfig,
    mask: Option<&KnnMask>,
) -> Result<Tensor> {
    check_dims(x, u)?;
    let (n, d) = (x.rows(), x.cols());
    if u.rows() != cfg.m {
        return Err(Error::Dimension {
            op: "centroid_update_step",
            lhs: vec![cfg.m, d],
            rhs: u.shape().to_vec(),
        });
    }
    cfg.validate(n, d)?;
    let allowed = match mask {
        Some(mk) if mk.neighbors.len() != u.rows() => {
            return Err(Error::Index {
                index: mk.neighbors.len(),
                len: u.rows(),
            })
        }
        Some(mk) => Some(mk.allowed(n)?),
        None => None,
    };
    let eps = cfg.step_size();
    let mut per_head = Vec::with_capacity(cfg.heads.len());
    for head in &cfg.heads {
        let sim = normalise(
            &head.kernel.score_matrix(x, u)?,
            cfg.alpha,
            cfg.axis,
            allowed.as_deref(),
        );
        let inc = match (&head.value, &head.kernel) {
            (ValueFn::Decoupled(w_v), _) => matmul_tn(&sim, &matmul(x, w_v)?)?,
            (ValueFn::GradientTied, SimilarityKernel::NegHalfSquaredDistance) => {
                // Σ_i s_ij (x_i - u_j) = (Sᵀ X)_j - (Σ_i s_ij) u_j
                let mut inc = matmul_tn(&sim, x)?;
                let mass = sim.sum_rows();
                for j in 0..u.rows() {
                    let w = mass.get(0, j);
                    for (o, &uv) in inc.row_mut(j).iter_mut().zip(u.row(j)) {
                        *o -= w * uv;
                    }
                }
                inc
            }
            (ValueFn::GradientTied, SimilarityKernel::ScaledDotProduct { w_q, w_k, scale }) => {
                // ∇_u φ(x_i, u) = scale · W_Q W_Kᵀ x_i, independent of u
                let vals = matmul_nt(&matmul(x, w_k)?, w_q)?.scale(*scale);
                matmul_tn(&sim, &vals)?
            }
        };
        per_head.push(inc);
    }
    u.axpy(eps, &combine_heads(&per_head, &cfg.combine, d)?)
}

/// Initialise `M` centroids, then run `T` update steps. The KNN mask is
/// recomputed before every step.
pub fn centroid_attention(x: &Tensor, cfg: &CentroidAttentionConfig) -> Result<Tensor> {
    if !x.is_matrix() {
        return Err(Error::Shape {
            shape: x.shape().to_vec(),
            reason: "centroid_attention expects an N x d matrix".into(),
        });
    }
    cfg.validate(x.rows(), x.cols())?;
    let mut u = cfg.init.init(x, cfg.m)?;
    for _ in 0..cfg.t {
        let mask = match cfg.knn_k {
            Some(k) => Some(knn_mask(x, &u, k)?),
            None => None,
        };
        u = centroid_update_step(x, &u, cfg, mask.as_ref())?;
    }
    Ok(u)
}
