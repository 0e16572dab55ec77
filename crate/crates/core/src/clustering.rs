//! Soft k-means objective and gradient, centroid initialisers, and a
//! Lloyd's k-means reference implementation.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{similarity_matrix, NormAxis, SimilarityKernel};
use crate::error::{param_err, Error, Result};
use crate::tensor::{self, matmul, Tensor};

/// Produces the initial `M` centroids from the `N` inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Initializer {
    /// `U⁰ = X`; requires `M = N`.
    Identity,
    /// `M` distinct rows drawn without replacement.
    RandomSample { seed: u64 },
    /// Greedy farthest point sampling from row `start`.
    FarthestPoint { start: usize },
    /// Means of consecutive blocks of `stride` rows; requires `M = N / stride`.
    MeanPool { stride: usize },
    /// Lloyd's k-means centres after `iters` iterations from an FPS seeding.
    KMeans { iters: usize, start: usize },
    /// `U⁰ = W X` with a trainable `M × N` mixing matrix.
    LearnedLinear(Tensor),
}

impl Initializer {
    /// Row indices chosen by the selecting variants.
    pub fn indices(&self, x: &Tensor, m: usize) -> Result<Option<Vec<usize>>> {
        check_m(x, m)?;
        Ok(match self {
            Self::Identity => {
                if m != x.rows() {
                    return Err(Error::Config(format!(
                        "identity initialiser needs M = N, got M={m}, N={}",
                        x.rows()
                    )));
                }
                Some((0..m).collect())
            }
            Self::RandomSample { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                Some(index::sample(&mut rng, x.rows(), m).into_vec())
            }
            Self::FarthestPoint { start } => Some(farthest_point_sample(x, m, *start)?),
            _ => None,
        })
    }

    /// `M × N` matrix `W` with `U⁰ = W X`.
    pub fn mixing_matrix(&self, x: &Tensor, m: usize) -> Result<Tensor> {
        let n = x.rows();
        if let Some(idx) = self.indices(x, m)? {
            let mut w = Tensor::zeros(m, n);
            for (j, &i) in idx.iter().enumerate() {
                w.set(j, i, 1.0);
            }
            return Ok(w);
        }
        match self {
            Self::MeanPool { stride } => {
                check_pool(n, m, *stride)?;
                let mut w = Tensor::zeros(m, n);
                for j in 0..m {
                    for i in j * stride..(j + 1) * stride {
                        w.set(j, i, 1.0 / *stride as f64);
                    }
                }
                Ok(w)
            }
            Self::KMeans { iters, start } => {
                let seeds = farthest_point_sample(x, m, *start)?;
                lloyd_mixing(x, m, *iters, &seeds)
            }
            Self::LearnedLinear(w) => {
                if w.rows() != m || w.cols() != n {
                    return Err(Error::Config(format!(
                        "learned initialiser is {:?}, expected {m}x{n}",
                        w.shape()
                    )));
                }
                Ok(w.clone())
            }
            _ => unreachable!("selecting variants handled above"),
        }
    }

    /// Initial centroids `U⁰`, shape `M × d`.
    pub fn init(&self, x: &Tensor, m: usize) -> Result<Tensor> {
        if let Some(idx) = self.indices(x, m)? {
            return x.select_rows(&idx);
        }
        match self {
            Self::MeanPool { stride } => {
                check_pool(x.rows(), m, *stride)?;
                let d = x.cols();
                let mut out = Tensor::zeros(m, d);
                for j in 0..m {
                    let row = out.row_mut(j);
                    for i in j * stride..(j + 1) * stride {
                        for (o, v) in row.iter_mut().zip(x.row(i)) {
                            *o += v;
                        }
                    }
                    for o in row.iter_mut() {
                        *o /= *stride as f64;
                    }
                }
                Ok(out)
            }
            _ => matmul(&self.mixing_matrix(x, m)?, x),
        }
    }
}

fn check_m(x: &Tensor, m: usize) -> Result<()> {
    if m == 0 || m > x.rows() {
        return Err(Error::Config(format!(
            "centroid count M={m} must satisfy 1 <= M <= N={}",
            x.rows()
        )));
    }
    Ok(())
}

fn check_pool(n: usize, m: usize, stride: usize) -> Result<()> {
    if stride == 0 || !n.is_multiple_of(stride) || m != n / stride {
        return Err(Error::Config(format!(
            "mean pooling with stride {stride} needs N divisible by stride and M = N/stride (N={n}, M={m})"
        )));
    }
    Ok(())
}

/// Lloyd iterations expressed as the mixing matrix whose product with `x`
/// gives the centres.
fn lloyd_mixing(x: &Tensor, m: usize, iters: usize, seeds: &[usize]) -> Result<Tensor> {
    let n = x.rows();
    let mut w = Tensor::zeros(m, n);
    for (j, &i) in seeds.iter().enumerate() {
        w.set(j, i, 1.0);
    }
    for _ in 0..iters {
        let centres = matmul(&w, x)?;
        let mut labels = vec![0usize; n];
        let mut counts = vec![0usize; m];
        for (i, label) in labels.iter_mut().enumerate() {
            let mut best_d = f64::INFINITY;
            for j in 0..m {
                let dd = tensor::sqdist(x.row(i), centres.row(j));
                if dd < best_d {
                    best_d = dd;
                    *label = j;
                }
            }
            counts[*label] += 1;
        }
        for j in 0..m {
            if counts[j] > 0 {
                w.row_mut(j).fill(0.0);
            }
        }
        for (i, &l) in labels.iter().enumerate() {
            w.set(l, i, 1.0 / counts[l] as f64);
        }
    }
    Ok(w)
}

/// Greedy max–min selection: start at `start`, then repeatedly take the row
/// farthest from everything chosen so far (ties to the lower index).
pub fn farthest_point_sample(x: &Tensor, m: usize, start: usize) -> Result<Vec<usize>> {
    check_m(x, m)?;
    let n = x.rows();
    if start >= n {
        return Err(Error::Index { index: start, len: n });
    }
    let mut picks = Vec::with_capacity(m);
    picks.push(start);
    let mut nearest: Vec<f64> = (0..n).map(|i| tensor::sqdist(x.row(i), x.row(start))).collect();
    // chosen rows drop out of contention even when duplicates leave ties at 0
    nearest[start] = f64::NEG_INFINITY;
    while picks.len() < m {
        let mut best = 0;
        for i in 1..n {
            if nearest[i] > nearest[best] {
                best = i;
            }
        }
        picks.push(best);
        nearest[best] = f64::NEG_INFINITY;
        let pr = x.row(best);
        for (i, slot) in nearest.iter_mut().enumerate() {
            let dd = tensor::sqdist(x.row(i), pr);
            if dd < *slot {
                *slot = dd;
            }
        }
    }
    Ok(picks)
}

/// Hard and soft assignment of each input to the centroids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub labels: Vec<usize>,
    /// `N × M`, rows sum to one.
    pub weights: Tensor,
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

/// Soft assignment from the centroid-normalised similarity; hard label is
/// the argmax (ties to the lower index).
pub fn assign(
    x: &Tensor,
    u: &Tensor,
    kernel: &SimilarityKernel,
    alpha: f64,
) -> Result<ClusterAssignment> {
    let weights = similarity_matrix(x, u, kernel, alpha, NormAxis::Centroids)?;
    let labels = (0..weights.rows()).map(|i| argmax(weights.row(i))).collect();
    Ok(ClusterAssignment { labels, weights })
}

/// Lloyd's algorithm from the given seed rows. Empty clusters keep their
/// previous centre.
pub fn lloyd_kmeans(
    x: &Tensor,
    m: usize,
    iters: usize,
    init: &[usize],
) -> Result<(Tensor, ClusterAssignment)> {
    if init.len() != m {
        return Err(Error::Config(format!(
            "expected {m} seed indices, got {}",
            init.len()
        )));
    }
    let mut centres = x.select_rows(init)?;
    let (n, d) = (x.rows(), x.cols());
    let nearest = |c: &Tensor| -> Vec<usize> {
        (0..n)
            .map(|i| {
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                for j in 0..m {
                    let dd = tensor::sqdist(x.row(i), c.row(j));
                    if dd < best_d {
                        best_d = dd;
                        best = j;
                    }
                }
                best
            })
            .collect()
    };
    for _ in 0..iters {
        let labels = nearest(&centres);
        let mut sums = Tensor::zeros(m, d);
        let mut counts = vec![0usize; m];
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            for (s, v) in sums.row_mut(l).iter_mut().zip(x.row(i)) {
                *s += v;
            }
        }
        for j in 0..m {
            if counts[j] > 0 {
                let c = counts[j] as f64;
                for (o, s) in centres.row_mut(j).iter_mut().zip(sums.row(j)) {
                    *o = s / c;
                }
            }
        }
    }
    let labels = nearest(&centres);
    let mut weights = Tensor::zeros(n, m);
    for (i, &l) in labels.iter().enumerate() {
        weights.set(i, l, 1.0);
    }
    Ok((centres, ClusterAssignment { labels, weights }))
}

/// `Σ_ℓ Σ_i (1/α) log Σ_j exp(α φ_ℓ(x_i, u_j))`.
pub fn soft_kmeans_objective(
    x: &Tensor,
    u: &Tensor,
    kernels: &[SimilarityKernel],
    alpha: f64,
) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(param_err("alpha", format!("must be positive, got {alpha}")));
    }
    check_shapes(x, u)?;
    let mut total = 0.0;
    for k in kernels {
        let scores = k.score_matrix(x, u)?;
        for i in 0..scores.rows() {
            total += tensor::logsumexp_unchecked(scores.row(i), alpha);
        }
    }
    Ok(total)
}

fn check_shapes(x: &Tensor, u: &Tensor) -> Result<()> {
    if !x.is_matrix() || !u.is_matrix() || x.cols() != u.cols() {
        return Err(Error::Dimension {
            op: "soft k-means",
            lhs: x.shape().to_vec(),
            rhs: u.shape().to_vec(),
        });
    }
    Ok(())
}

/// Analytic `∇_U` of [`soft_kmeans_objective`], accumulated pair by pair as
/// `Σ_ℓ Σ_i sim_ℓ(x_i, u_j) ∇_u φ_ℓ(x_i, u_j)`.
pub fn objective_gradient(
    x: &Tensor,
    u: &Tensor,
    kernels: &[SimilarityKernel],
    alpha: f64,
) -> Result<Tensor> {
    if !(alpha > 0.0) {
        return Err(param_err("alpha", format!("must be positive, got {alpha}")));
    }
    check_shapes(x, u)?;
    let (n, m) = (x.rows(), u.rows());
    let mut grad = Tensor::zeros(m, u.cols());
    let mut phis = vec![0.0; m];
    let mut sims = vec![0.0; m];
    for k in kernels {
        for i in 0..n {
            for (j, p) in phis.iter_mut().enumerate() {
                *p = k.phi(x.row(i), u.row(j));
            }
            tensor::softmax_into(&phis, alpha, None, &mut sims);
            for j in 0..m {
                let g = k.grad_u_phi(x.row(i), u.row(j));
                for (o, gv) in grad.row_mut(j).iter_mut().zip(&g) {
                    *o += sims[j] * gv;
                }
            }
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn col(vals: &[f64]) -> Tensor {
        Tensor::matrix(vals.len(), 1, vals.to_vec()).unwrap()
    }

    #[test]
    fn objective_single_centroid_is_sum_of_phi() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(5, 3, 1.0, &mut rng);
        let u = Tensor::randn(1, 3, 1.0, &mut rng);
        let k = SimilarityKernel::NegHalfSquaredDistance;
        let direct: f64 = (0..5).map(|i| k.phi(x.row(i), u.row(0))).sum();
        let f = soft_kmeans_objective(&x, &u, &[k], 2.5).unwrap();
        assert!((f - direct).abs() < 1e-12);
    }

    #[test]
    fn duplicated_centroid_adds_log_two_per_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(6, 2, 1.0, &mut rng);
        let u = Tensor::randn(1, 2, 1.0, &mut rng);
        let u2 = u.select_rows(&[0, 0]).unwrap();
        let kernels = [
            SimilarityKernel::NegHalfSquaredDistance,
            SimilarityKernel::dot_product(
                Tensor::randn(2, 2, 1.0, &mut rng),
                Tensor::randn(2, 2, 1.0, &mut rng),
            )
            .unwrap(),
        ];
        let alpha = 0.7;
        let f1 = soft_kmeans_objective(&x, &u, &kernels, alpha).unwrap();
        let f2 = soft_kmeans_objective(&x, &u2, &kernels, alpha).unwrap();
        let expect = 6.0 * 2.0 * 2f64.ln() / alpha;
        assert!((f2 - f1 - expect).abs() < 1e-10);
    }

    #[test]
    fn objective_rejects_nonpositive_alpha() {
        let x = Tensor::zeros(2, 2);
        let k = [SimilarityKernel::NegHalfSquaredDistance];
        assert!(soft_kmeans_objective(&x, &x, &k, 0.0).is_err());
        assert!(objective_gradient(&x, &x, &k, -1.0).is_err());
    }

    #[test]
    fn gradient_vanishes_at_the_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(8, 3, 1.0, &mut rng);
        let g = objective_gradient(&x, &x.mean_rows(), &[SimilarityKernel::NegHalfSquaredDistance], 1.0)
            .unwrap();
        assert!(g.max_abs() < 1e-12);
    }

    #[test]
    fn fps_hand_traces() {
        let x = col(&[0.0, 1.0, 10.0]);
        assert_eq!(farthest_point_sample(&x, 2, 0).unwrap(), vec![0, 2]);
        assert_eq!(farthest_point_sample(&x, 3, 0).unwrap(), vec![0, 2, 1]);
        let mut all = farthest_point_sample(&x, 3, 1).unwrap();
        all.sort();
        assert_eq!(all, vec![0, 1, 2]);
        assert!(matches!(farthest_point_sample(&x, 4, 0), Err(Error::Config(_))));
        assert!(farthest_point_sample(&x, 2, 3).is_err());
    }

    #[test]
    fn fps_ties_go_to_lower_index() {
        // 1 and 3 are both at distance 1 from 2
        let x = col(&[1.0, 2.0, 3.0]);
        assert_eq!(farthest_point_sample(&x, 2, 1).unwrap(), vec![1, 0]);
    }

    #[test]
    fn lloyd_hand_run() {
        let x = col(&[0.0, 1.0, 9.0, 10.0]);
        let (c, a) = lloyd_kmeans(&x, 2, 1, &[0, 2]).unwrap();
        assert_eq!(c.data(), &[0.5, 9.5]);
        assert_eq!(a.labels, vec![0, 0, 1, 1]);
        let (c5, _) = lloyd_kmeans(&x, 2, 5, &[0, 2]).unwrap();
        assert_eq!(c5, c);

        let (c0, _) = lloyd_kmeans(&x, 2, 0, &[3, 1]).unwrap();
        assert_eq!(c0.data(), &[10.0, 1.0]);

        let (cn, an) = lloyd_kmeans(&x, 4, 3, &[0, 1, 2, 3]).unwrap();
        assert_eq!(cn, x);
        assert_eq!(an.labels, vec![0, 1, 2, 3]);
    }

    #[test]
    fn lloyd_keeps_empty_cluster_centre() {
        // both seeds at the left end; the second never wins a point
        let x = col(&[0.0, 0.0, 4.0]);
        let (c, _) = lloyd_kmeans(&x, 2, 1, &[0, 1]).unwrap();
        assert_eq!(c.data(), &[4.0 / 3.0, 0.0]);
        // the retained centre then captures the two zeros
        let (c, a) = lloyd_kmeans(&x, 2, 2, &[0, 1]).unwrap();
        assert_eq!(c.data(), &[4.0, 0.0]);
        assert_eq!(a.labels, vec![1, 1, 0]);
    }

    #[test]
    fn assign_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn(4, 2, 1.0, &mut rng);
        let k = SimilarityKernel::NegHalfSquaredDistance;
        let a = assign(&x, &Tensor::zeros(1, 2), &k, 1.0).unwrap();
        assert_eq!(a.labels, vec![0; 4]);
        assert!(a.weights.data().iter().all(|&w| w == 1.0));

        let u = col(&[-1.0, 1.0]);
        let a = assign(&col(&[0.0]), &u, &k, 3.0).unwrap();
        assert_eq!(a.weights.data(), &[0.5, 0.5]);
        assert_eq!(a.labels, vec![0]);
    }

    #[test]
    fn initialiser_variants() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(6, 2, 1.0, &mut rng);

        assert_eq!(Initializer::Identity.init(&x, 6).unwrap(), x);
        assert!(Initializer::Identity.init(&x, 3).is_err());

        let r = Initializer::RandomSample { seed: 9 };
        let idx = r.indices(&x, 4).unwrap().unwrap();
        let mut sorted = idx.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), 4);
        assert_eq!(r.init(&x, 4).unwrap(), x.select_rows(&idx).unwrap());
        assert_eq!(r.init(&x, 4).unwrap(), r.init(&x, 4).unwrap());

        let mp = Initializer::MeanPool { stride: 3 };
        let u = mp.init(&x, 2).unwrap();
        let first = x.select_rows(&[0, 1, 2]).unwrap().mean_rows();
        assert!(u.select_rows(&[0]).unwrap().max_abs_diff(&first) < 1e-15);
        assert!(mp.init(&x, 3).is_err());
        assert_eq!(Initializer::MeanPool { stride: 1 }.init(&x, 6).unwrap(), x);

        let mut w = Tensor::zeros(2, 6);
        w.set(0, 5, 1.0);
        w.set(1, 0, 0.5);
        w.set(1, 1, 0.5);
        let ll = Initializer::LearnedLinear(w.clone());
        assert!(ll.init(&x, 2).unwrap().max_abs_diff(&matmul(&w, &x).unwrap()) < 1e-15);
        assert!(ll.init(&x, 3).is_err());

        for init in [
            Initializer::FarthestPoint { start: 2 },
            Initializer::RandomSample { seed: 1 },
            Initializer::MeanPool { stride: 2 },
            Initializer::KMeans { iters: 3, start: 0 },
        ] {
            let direct = init.init(&x, 3).unwrap();
            let mixed = matmul(&init.mixing_matrix(&x, 3).unwrap(), &x).unwrap();
            assert!(direct.max_abs_diff(&mixed) < 1e-12, "{init:?}");
        }
    }

    #[test]
    fn kmeans_initialiser_matches_lloyd_centres() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::randn(12, 2, 1.0, &mut rng);
        let seeds = farthest_point_sample(&x, 3, 0).unwrap();
        let (c, _) = lloyd_kmeans(&x, 3, 3, &seeds).unwrap();
        let u = Initializer::KMeans { iters: 3, start: 0 }.init(&x, 3).unwrap();
        assert!(u.max_abs_diff(&c) < 1e-12);
    }
}
