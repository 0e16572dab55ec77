//! Experiment drivers behind the `centroid-attn` binary: MAC accounting,
//! timing benchmarks, the gradient-equivalence suite, standalone clustering,
//! training from a JSON config and the iteration/initialiser ablation.
//!
//! Every driver returns plain records; file output is separate so the same
//! records can be re-parsed and compared.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{
    centroid_attention, centroid_update_step, self_attention, AttentionParams, CentroidAttentionConfig,
    CentroidHead, HeadParams, NormAxis, SimilarityKernel,
};
use crate::autodiff::numeric_gradient;
use crate::clustering::{assign, objective_gradient, soft_kmeans_objective, Initializer};
use crate::error::{Error, Result};
use crate::model::{
    accuracy, build_model, train, BlockSpec, ClassifierSpec, InitSpec, ModelSpec, Pooling, SynthConfig,
    SynthDataset, TrainHyper, TrainReport,
};
use crate::tensor::Tensor;

/// Runs `f` on a rayon pool capped at `threads` workers (0 = rayon default).
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

// ---------------------------------------------------------------------------
// MAC accounting

/// How a centroid layer's initial centroids are formed, for cost purposes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitCost {
    /// Row selection (random or identity): free.
    Select,
    /// Farthest point sampling: `N·M·d`.
    Fps,
    /// Block means: `N·d`.
    MeanPool,
    /// FPS seeding plus `iters` Lloyd rounds of `N·M·d` and an `N·d` mean.
    Kmeans { iters: usize },
    /// Learned `M × N` mixing: `M·N·d`.
    Learned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerDesc {
    SelfAttention,
    CentroidAttention { m: usize, t: usize, init: InitCost },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchDesc {
    pub layers: Vec<LayerDesc>,
    pub d: usize,
    /// FFN hidden width; `None` drops the FFN from every layer.
    pub d_ff: Option<usize>,
    /// Whether centroid initialisation is counted.
    pub count_init: bool,
}

impl ArchDesc {
    /// `layers` encoder layers of width `d` with a `4d` FFN, with centroid
    /// attention (FPS, one step) at the given layer indices.
    pub fn encoder(layers: usize, d: usize, ca_at: &[(usize, usize)]) -> Self {
        let mut descs = vec![LayerDesc::SelfAttention; layers];
        for &(i, m) in ca_at {
            descs[i] = LayerDesc::CentroidAttention {
                m,
                t: 1,
                init: InitCost::Fps,
            };
        }
        Self {
            layers: descs,
            d,
            d_ff: Some(4 * d),
            count_init: true,
        }
    }

    /// The same encoder with every centroid layer replaced by self-attention.
    pub fn vanilla(&self) -> Self {
        Self {
            layers: vec![LayerDesc::SelfAttention; self.layers.len()],
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMacs {
    pub layer: usize,
    pub kind: String,
    pub tokens_in: usize,
    pub tokens_out: usize,
    pub projections: u64,
    pub scores: u64,
    pub weighted_sum: u64,
    pub init: u64,
    pub ffn: u64,
    pub total: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacReport {
    pub arch: ArchDesc,
    pub n: usize,
    pub layers: Vec<LayerMacs>,
    pub total: u64,
}

/// Exact multiply-accumulate count of an encoder on `n` input tokens.
///
/// Counted: Q/K/V and output projections, score and weighted-sum products,
/// FFN matmuls, and (optionally) centroid initialisation. Embeddings,
/// softmax exponentials and layer norms are not counted.
pub fn mac_count(arch: &ArchDesc, n: usize) -> Result<MacReport> {
    if arch.d == 0 || n == 0 || arch.d_ff == Some(0) {
        return Err(Error::Config("d, N and d_ff must be positive".into()));
    }
    let d = arch.d as u64;
    let mut tokens = n;
    let mut layers = Vec::with_capacity(arch.layers.len());
    for (i, layer) in arch.layers.iter().enumerate() {
        let nin = tokens as u64;
        let (kind, q_rows, t_steps, init) = match *layer {
            LayerDesc::SelfAttention => ("self_attention", nin, 1u64, 0u64),
            LayerDesc::CentroidAttention { m, t, init } => {
                if m == 0 || m > tokens || t == 0 {
                    return Err(Error::Config(format!(
                        "layer {i}: need 1 <= m <= {tokens} and t >= 1, got m={m}, t={t}"
                    )));
                }
                let mm = m as u64;
                let cost = match init {
                    InitCost::Select => 0,
                    InitCost::Fps => nin * mm * d,
                    InitCost::MeanPool => nin * d,
                    InitCost::Kmeans { iters } => nin * mm * d * (1 + iters as u64) + nin * d,
                    InitCost::Learned => mm * nin * d,
                };
                ("centroid_attention", mm, t as u64, if arch.count_init { cost } else { 0 })
            }
        };
        // queries on the output rows, keys and values on the inputs, then
        // the output projection
        let projections = q_rows * d * d + 2 * nin * d * d + q_rows * d * d;
        let scores = t_steps * q_rows * nin * d;
        let weighted_sum = t_steps * q_rows * nin * d;
        let ffn = arch.d_ff.map_or(0, |f| 2 * q_rows * d * f as u64);
        let total = projections + scores + weighted_sum + init + ffn;
        tokens = q_rows as usize;
        layers.push(LayerMacs {
            layer: i,
            kind: kind.into(),
            tokens_in: nin as usize,
            tokens_out: tokens,
            projections,
            scores,
            weighted_sum,
            init,
            ffn,
            total,
        });
    }
    let total = layers.iter().map(|l| l.total).sum();
    Ok(MacReport {
        arch: arch.clone(),
        n,
        layers,
        total,
    })
}

// ---------------------------------------------------------------------------
// Benchmarks

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "self")]
    SelfAttention,
    #[serde(rename = "centroid")]
    Centroid,
    #[serde(rename = "centroid-knn")]
    CentroidKnn,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Self::SelfAttention, Self::Centroid, Self::CentroidKnn];

    pub fn name(&self) -> &'static str {
        match self {
            Self::SelfAttention => "self",
            Self::Centroid => "centroid",
            Self::CentroidKnn => "centroid-knn",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}` (self, centroid, centroid-knn)")))
    }
}

/// Centroid count as a function of `N`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MRule {
    Fixed(usize),
    Divisor(usize),
}

impl MRule {
    pub fn m(&self, n: usize) -> usize {
        match *self {
            Self::Fixed(m) => m.min(n),
            Self::Divisor(k) => (n / k).max(1),
        }
    }
}

impl std::str::FromStr for MRule {
    type Err = Error;

    /// `fixed:16` or `div:4`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("m rule `{s}` is not fixed:<m> or div:<k>"));
        let (kind, v) = s.split_once(':').ok_or_else(bad)?;
        let v: usize = v.parse().map_err(|_| bad())?;
        if v == 0 {
            return Err(bad());
        }
        match kind {
            "fixed" => Ok(Self::Fixed(v)),
            "div" => Ok(Self::Divisor(v)),
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub n: usize,
    pub m: usize,
    pub variant: Variant,
    pub reps: usize,
    pub median_ns: f64,
    pub iqr_ns: f64,
    pub macs: u64,
}

pub const BENCH_HEADER: &str = "n,m,variant,reps,median_ns,iqr_ns,macs";

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub n_list: Vec<usize>,
    pub m_rule: MRule,
    pub variants: Vec<Variant>,
    pub reps: usize,
    pub d: usize,
    /// Neighbours per centroid for the masked variant, capped at `N`.
    pub knn_k: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            n_list: vec![128, 256, 512],
            m_rule: MRule::Fixed(16),
            variants: Variant::ALL.to_vec(),
            reps: 7,
            d: 32,
            knn_k: 32,
            seed: 0,
        }
    }
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Median and interquartile range of the samples.
pub fn median_iqr(samples: &[f64]) -> (f64, f64) {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    (quantile(&s, 0.5), quantile(&s, 0.75) - quantile(&s, 0.25))
}

/// MACs of the single attention layer a bench row times (no FFN, no init).
pub fn bench_macs(variant: Variant, n: usize, m: usize, d: usize) -> Result<u64> {
    let layer = match variant {
        Variant::SelfAttention => LayerDesc::SelfAttention,
        Variant::Centroid | Variant::CentroidKnn => LayerDesc::CentroidAttention {
            m,
            t: 1,
            init: InitCost::Select,
        },
    };
    let arch = ArchDesc {
        layers: vec![layer],
        d,
        d_ff: None,
        count_init: false,
    };
    Ok(mac_count(&arch, n)?.total)
}

/// One attention call per variant, inputs and weights prepared up front.
struct BenchCase {
    x: Tensor,
    sa: AttentionParams,
    ca: CentroidAttentionConfig,
    variant: Variant,
}

impl BenchCase {
    fn new(variant: Variant, n: usize, m: usize, cfg: &BenchConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (n as u64) << 8);
        let d = cfg.d;
        let x = Tensor::randn(n, d, 1.0, &mut rng);
        let head = HeadParams::random(d, d, d, &mut rng);
        let scale = 1.0 / (d as f64).sqrt();
        let mut ca = CentroidAttentionConfig::new(m, vec![CentroidHead::from_attention(&head, scale)]);
        ca.init = Initializer::RandomSample { seed: cfg.seed };
        if variant == Variant::CentroidKnn {
            ca.knn_k = Some(cfg.knn_k.min(n));
        }
        Self {
            x,
            sa: AttentionParams::summed(vec![head]),
            ca,
            variant,
        }
    }

    fn run(&self) -> Result<Tensor> {
        match self.variant {
            Variant::SelfAttention => self_attention(&self.x, &self.sa, 1.0),
            _ => centroid_attention(&self.x, &self.ca),
        }
    }
}

/// Times each `(n, variant)` pair; rows follow `n_list` then `variants`.
pub fn bench(cfg: &BenchConfig) -> Result<Vec<BenchRecord>> {
    if cfg.reps < 5 {
        return Err(Error::Config(format!("reps must be >= 5, got {}", cfg.reps)));
    }
    if cfg.d == 0 || cfg.n_list.contains(&0) {
        return Err(Error::Config("d and every n must be positive".into()));
    }
    let mut out = Vec::new();
    for &n in &cfg.n_list {
        let m = cfg.m_rule.m(n);
        for &variant in &cfg.variants {
            let case = BenchCase::new(variant, n, m, cfg);
            std::hint::black_box(case.run()?);
            let mut times = Vec::with_capacity(cfg.reps);
            for _ in 0..cfg.reps {
                let start = Instant::now();
                std::hint::black_box(case.run()?);
                times.push(start.elapsed().as_nanos().max(1) as f64);
            }
            let (median_ns, iqr_ns) = median_iqr(&times);
            out.push(BenchRecord {
                n,
                m,
                variant,
                reps: cfg.reps,
                median_ns,
                iqr_ns,
                macs: bench_macs(variant, n, m, cfg.d)?,
            });
        }
    }
    Ok(out)
}

pub fn write_bench_csv<W: Write>(records: &[BenchRecord], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in records {
        wtr.serialize(r).map_err(|e| Error::Io(e.to_string()))?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_bench_csv(text: &str) -> Result<Vec<BenchRecord>> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let header = rdr
        .headers()
        .map_err(|e| Error::Parse { line: 1, reason: e.to_string() })?
        .iter()
        .collect::<Vec<_>>()
        .join(",");
    if header != BENCH_HEADER {
        return Err(Error::Parse {
            line: 1,
            reason: format!("header `{header}` is not `{BENCH_HEADER}`"),
        });
    }
    rdr.deserialize()
        .enumerate()
        .map(|(i, r)| r.map_err(|e| Error::Parse { line: i + 2, reason: e.to_string() }))
        .collect()
}

// ---------------------------------------------------------------------------
// Gradient-equivalence suite

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckRecord {
    pub seed: u64,
    pub kernel: String,
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub alpha: f64,
    /// `(update − U)/ε` against the finite-difference objective gradient.
    pub update_rel_err: f64,
    /// Pairwise analytic objective gradient against finite differences.
    pub analytic_rel_err: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub tol: f64,
    pub records: Vec<GradcheckRecord>,
    pub failures: usize,
    pub max_update_rel_err: f64,
    pub max_analytic_rel_err: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// `max |a − b| / max |b|`: the error relative to the gradient's scale.
pub fn scaled_error(a: &Tensor, b: &Tensor) -> f64 {
    let scale = b.max_abs().max(f64::MIN_POSITIVE);
    a.max_abs_diff(b) / scale
}

pub const GRADCHECK_ALPHAS: [f64; 3] = [0.5, 1.0, 5.0];

/// Random instance `(X, U, kernel, α)` for gradcheck seed `seed`; the kernel
/// alternates with the seed's parity and `α` cycles through
/// [`GRADCHECK_ALPHAS`].
pub fn gradcheck_instance(seed: u64) -> (Tensor, Tensor, SimilarityKernel, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=8);
    let m = rng.random_range(1..=n.min(4));
    let d = rng.random_range(1..=5);
    let x = Tensor::randn(n, d, 1.0, &mut rng);
    let u = Tensor::randn(m, d, 1.0, &mut rng);
    let kernel = if seed.is_multiple_of(2) {
        let dh = rng.random_range(1..=4);
        let w_q = Tensor::randn(d, dh, 0.7, &mut rng);
        let w_k = Tensor::randn(d, dh, 0.7, &mut rng);
        SimilarityKernel::dot_product(w_q, w_k).expect("shapes agree")
    } else {
        SimilarityKernel::NegHalfSquaredDistance
    };
    let alpha = GRADCHECK_ALPHAS[(seed / 2 % 3) as usize];
    (x, u, kernel, alpha)
}

fn gradcheck_one(seed: u64, tol: f64) -> Result<GradcheckRecord> {
    let (x, u, kernel, alpha) = gradcheck_instance(seed);
    let kernels = [kernel.clone()];
    let fd = numeric_gradient(|uu| soft_kmeans_objective(&x, uu, &kernels, alpha).unwrap_or(f64::NAN), &u, 1e-5)?;

    let mut cfg = CentroidAttentionConfig::new(u.rows(), vec![CentroidHead::tied(kernel.clone())]);
    cfg.alpha = alpha;
    let eps = 0.1;
    cfg.epsilon = Some(eps);
    let stepped = centroid_update_step(&x, &u, &cfg, None)?;
    let update = stepped.sub(&u)?.scale(1.0 / eps);
    let analytic = objective_gradient(&x, &u, &kernels, alpha)?;

    let update_rel_err = scaled_error(&update, &fd);
    let analytic_rel_err = scaled_error(&analytic, &fd);
    Ok(GradcheckRecord {
        seed,
        kernel: match kernel {
            SimilarityKernel::ScaledDotProduct { .. } => "dot_product".into(),
            SimilarityKernel::NegHalfSquaredDistance => "neg_half_sq_dist".into(),
        },
        n: x.rows(),
        m: u.rows(),
        d: x.cols(),
        alpha,
        update_rel_err,
        analytic_rel_err,
        pass: update_rel_err <= tol && analytic_rel_err <= tol,
    })
}

/// Runs seeds `base_seed .. base_seed + seeds`, in parallel, reporting in
/// seed order.
pub fn gradcheck(seeds: usize, tol: f64, base_seed: u64) -> Result<GradcheckReport> {
    if !(tol > 0.0) {
        return Err(Error::Config(format!("tol must be positive, got {tol}")));
    }
    let records = (0..seeds as u64)
        .into_par_iter()
        .map(|s| gradcheck_one(base_seed + s, tol))
        .collect::<Result<Vec<_>>>()?;
    Ok(GradcheckReport {
        tol,
        failures: records.iter().filter(|r| !r.pass).count(),
        max_update_rel_err: records.iter().map(|r| r.update_rel_err).fold(0.0, f64::max),
        max_analytic_rel_err: records.iter().map(|r| r.analytic_rel_err).fold(0.0, f64::max),
        records,
    })
}

// ---------------------------------------------------------------------------
// Clustering

/// Reads a CSV point set with header `x,y`.
pub fn parse_points_csv(text: &str) -> Result<Tensor> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Parse { line: 1, reason: e.to_string() })?
        .iter()
        .map(str::to_string)
        .collect();
    if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
        return Err(Error::Parse { line: 1, reason: "empty input".into() });
    }
    if header != ["x", "y"] {
        return Err(Error::Parse {
            line: 1,
            reason: format!("expected header `x,y`, found `{}`", header.join(",")),
        });
    }
    let mut data = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Parse { line, reason: e.to_string() })?;
        if rec.len() != 2 {
            return Err(Error::Parse { line, reason: format!("expected 2 fields, found {}", rec.len()) });
        }
        for field in rec.iter() {
            let v: f64 = field
                .parse()
                .map_err(|_| Error::Parse { line, reason: format!("`{field}` is not a number") })?;
            if !v.is_finite() {
                return Err(Error::Parse { line, reason: format!("`{field}` is not finite") });
            }
            data.push(v);
        }
    }
    if data.is_empty() {
        return Err(Error::Parse { line: 2, reason: "no points".into() });
    }
    Tensor::matrix(data.len() / 2, 2, data)
}

pub fn read_points_csv(path: &Path) -> Result<Tensor> {
    parse_points_csv(&std::fs::read_to_string(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub m: usize,
    pub alpha: f64,
    pub t: usize,
    /// `None` means `M/N`, one balanced-cluster mean step per iteration.
    pub epsilon: Option<f64>,
    pub init: InitSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterResult {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub objective: f64,
    pub config: ClusterConfig,
}

/// Untrained centroid attention with the squared-distance kernel and
/// gradient-tied values, used directly as a clustering procedure.
pub fn cluster(points: &Tensor, cfg: &ClusterConfig) -> Result<ClusterResult> {
    let n = points.rows();
    if cfg.m == 0 || cfg.m > n {
        return Err(Error::Config(format!("m={} must satisfy 1 <= m <= N={n}", cfg.m)));
    }
    let kernel = SimilarityKernel::NegHalfSquaredDistance;
    let mut ca = CentroidAttentionConfig::new(cfg.m, vec![CentroidHead::tied(kernel.clone())]);
    ca.t = cfg.t;
    ca.alpha = cfg.alpha;
    ca.epsilon = Some(cfg.epsilon.unwrap_or(cfg.m as f64 / n as f64));
    ca.init = cfg
        .init
        .initializer(n, cfg.m)
        .ok_or_else(|| Error::Config("cluster cannot use a learned initialiser".into()))?;
    ca.axis = NormAxis::Centroids;
    let u = centroid_attention(points, &ca)?;
    let labels = assign(points, &u, &kernel, cfg.alpha)?.labels;
    Ok(ClusterResult {
        centroids: u.to_rows(),
        assignments: labels,
        objective: soft_kmeans_objective(points, &u, &[kernel], cfg.alpha)?,
        config: cfg.clone(),
    })
}

// ---------------------------------------------------------------------------
// Training

/// JSON training configuration; the dataset section is optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub embed_dim: usize,
    pub blocks: Vec<BlockSpec>,
    pub pool: Pooling,
    pub classifier: ClassifierSpec,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    #[serde(default)]
    pub data: SynthConfig,
}

pub const DEFAULT_TRAIN_CONFIG: &str = include_str!("../configs/default_train.json");

impl TrainConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            reason: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn default_config() -> Self {
        Self::parse(DEFAULT_TRAIN_CONFIG).expect("bundled config is valid")
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            input_dim: 2,
            input_len: self.data.points,
            embed_dim: self.embed_dim,
            blocks: self.blocks.clone(),
            pool: self.pool,
            classifier: self.classifier.clone(),
            seed: self.seed,
        }
    }

    pub fn hyper(&self) -> TrainHyper {
        TrainHyper {
            lr: self.lr,
            epochs: self.epochs,
            batch: self.batch,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr: must be finite and >= 0, got {}", self.lr)));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch: must be positive".into()));
        }
        if self.classifier.classes != self.data.classes {
            return Err(Error::Config(format!(
                "classifier.classes: {} does not match data.classes {}",
                self.classifier.classes, self.data.classes
            )));
        }
        self.model_spec()
            .validate()
            .map_err(|e| Error::Config(format!("blocks: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub report: TrainReport,
    pub dataset: SynthDataset,
    pub untrained_test_acc: f64,
}

pub fn run_train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let dataset = crate::model::synth_dataset(&cfg.data)?;
    let mut model = build_model(&cfg.model_spec())?;
    let untrained_test_acc = accuracy(&mut model, &dataset.test)?;
    let report = train(&mut model, &dataset, &cfg.hyper())?;
    Ok(TrainOutcome {
        report,
        dataset,
        untrained_test_acc,
    })
}

// ---------------------------------------------------------------------------
// Ablation

#[derive(Debug, Clone, PartialEq)]
pub enum AblationAxis {
    Iterations(Vec<usize>),
    Init(Vec<InitSpec>),
}

impl AblationAxis {
    pub fn iterations() -> Self {
        Self::Iterations(vec![1, 2, 3])
    }

    pub fn inits() -> Self {
        Self::Init(vec![
            InitSpec::Random { seed: 0 },
            InitSpec::Fps { start: 0 },
            InitSpec::MeanPool,
            InitSpec::Kmeans { iters: 3 },
        ])
    }

    fn settings(&self, base: &ModelSpec) -> Vec<(String, ModelSpec)> {
        match self {
            Self::Iterations(ts) => ts.iter().map(|&t| (format!("T={t}"), base.with_iterations(t))).collect(),
            Self::Init(inits) => inits.iter().map(|i| (i.label().to_string(), base.with_init(*i))).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: String,
    pub test_acc: f64,
    pub train_acc: f64,
    pub final_loss: f64,
    /// Forward passes per second on the test split.
    pub throughput: f64,
}

/// Rounds of interleaved throughput timing; each setting keeps its best.
pub const THROUGHPUT_ROUNDS: usize = 15;

/// Trains one model per setting with identical seeds and budget, then times
/// inference for all settings in interleaved rounds so that machine noise
/// affects them alike.
pub fn ablate(
    data: &SynthDataset,
    base: &ModelSpec,
    hyper: &TrainHyper,
    axis: &AblationAxis,
) -> Result<Vec<AblationRow>> {
    let settings = axis.settings(base);
    let trained = settings
        .par_iter()
        .map(|(name, spec)| {
            let mut model = build_model(spec)?;
            let report = train(&mut model, data, hyper)?;
            Ok((name.clone(), model, report))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut models: Vec<_> = trained.into_iter().collect();
    let mut best = vec![f64::INFINITY; models.len()];
    let probe: Vec<&Tensor> = data.test.iter().take(16).map(|s| &s.points).collect();
    for _ in 0..THROUGHPUT_ROUNDS {
        for (slot, (_, model, _)) in best.iter_mut().zip(models.iter_mut()) {
            let start = Instant::now();
            for x in &probe {
                std::hint::black_box(model.forward(x)?);
            }
            *slot = slot.min(start.elapsed().as_secs_f64() / probe.len() as f64);
        }
    }
    Ok(models
        .into_iter()
        .zip(best)
        .map(|((setting, _, report), secs)| {
            let last = report.records.last();
            AblationRow {
                setting,
                test_acc: last.map_or(0.0, |r| r.test_acc),
                train_acc: last.map_or(0.0, |r| r.train_acc),
                final_loss: last.map_or(f64::NAN, |r| r.loss),
                throughput: 1.0 / secs,
            }
        })
        .collect())
}

pub fn write_ablation_csv<W: Write>(rows: &[AblationRow], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in rows {
        wtr.serialize(r).map_err(|e| Error::Io(e.to_string()))?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_ablation_csv(text: &str) -> Result<Vec<AblationRow>> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    rdr.deserialize()
        .enumerate()
        .map(|(i, r)| r.map_err(|e| Error::Parse { line: i + 2, reason: e.to_string() }))
        .collect()
}

/// Plain-text table of ablation rows.
pub struct AblationTable<'a>(pub &'a [AblationRow]);

impl fmt::Display for AblationTable<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<12} {:>9} {:>9} {:>9} {:>12}", "setting", "test_acc", "train_acc", "loss", "samples/s")?;
        for r in self.0 {
            writeln!(
                f,
                "{:<12} {:>9.3} {:>9.3} {:>9.4} {:>12.1}",
                r.setting, r.test_acc, r.train_acc, r.final_loss, r.throughput
            )?;
        }
        Ok(())
    }
}

/// Default spec of the synthetic task, `[SA, CA, SA]` over 64 points.
pub fn default_spec() -> ModelSpec {
    TrainConfig::default_config().model_spec()
}

/// Helper for tests and examples: a `[SA, CA(M, T), SA]` spec.
pub fn sandwich_spec(n: usize, m: usize, t: usize, embed_dim: usize, classes: usize, seed: u64) -> ModelSpec {
    ModelSpec {
        input_dim: 2,
        input_len: n,
        embed_dim,
        blocks: vec![
            BlockSpec::self_attention(1, embed_dim),
            BlockSpec::centroid(m, t, embed_dim, InitSpec::Fps { start: 0 }),
            BlockSpec::self_attention(1, embed_dim),
        ],
        pool: Pooling::Mean,
        classifier: ClassifierSpec {
            hidden: vec![],
            classes,
        },
        seed,
    }
}
