//! Energy-based reading of attention.
//!
//! Self-attention as one descent step on a fully observed pairwise energy
//! `E(X) = Σ_i Σ_j ζ(x_iᵀ x_j)`, and centroid attention as one descent step
//! on the hidden units of an RBM-style energy `E(X, U) = Σ_i Σ_j ζ(u_jᵀ x_i)`.
//! All updates are simultaneous: every row reads the pre-update values.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{dot, matmul_nt, matmul_tn, Tensor};

/// Scalar interaction `ζ(s)` and its derivative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum EnergyKernel {
    /// `ζ(s) = c·s`
    Linear(f64),
    /// `ζ(s) = -exp(s)`; descent on it yields exp-weighted (unnormalised)
    /// attention.
    NegExp,
}

impl EnergyKernel {
    pub fn zeta(&self, s: f64) -> f64 {
        match self {
            Self::Linear(c) => c * s,
            Self::NegExp => -s.exp(),
        }
    }

    pub fn zeta_prime(&self, s: f64) -> f64 {
        match self {
            Self::Linear(c) => *c,
            Self::NegExp => -s.exp(),
        }
    }
}

/// Whether the `i = j` terms enter the pairwise energy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum SelfTerms {
    #[default]
    Include,
    Exclude,
}

fn keep(i: usize, j: usize, terms: SelfTerms) -> bool {
    terms == SelfTerms::Include || i != j
}

pub fn pairwise_energy(x: &Tensor, zeta: EnergyKernel, terms: SelfTerms) -> f64 {
    let n = x.rows();
    let mut e = 0.0;
    for i in 0..n {
        for j in 0..n {
            if keep(i, j, terms) {
                e += zeta.zeta(dot(x.row(i), x.row(j)));
            }
        }
    }
    e
}

/// `x_i ← x_i - ε Σ_j ζ′(x_iᵀ x_j) x_j` for every `i`.
pub fn pairwise_energy_step(x: &Tensor, zeta: EnergyKernel, epsilon: f64, terms: SelfTerms) -> Tensor {
    let gram = matmul_nt(x, x).expect("x is a matrix");
    let mut out = x.clone();
    for i in 0..x.rows() {
        for j in 0..x.rows() {
            if !keep(i, j, terms) {
                continue;
            }
            let w = epsilon * zeta.zeta_prime(gram.get(i, j));
            for (o, &v) in out.row_mut(i).iter_mut().zip(x.row(j)) {
                *o -= w * v;
            }
        }
    }
    out
}

fn check(x: &Tensor, u: &Tensor) -> Result<()> {
    if !x.is_matrix() || !u.is_matrix() || x.cols() != u.cols() {
        return Err(Error::Dimension {
            op: "rbm energy",
            lhs: x.shape().to_vec(),
            rhs: u.shape().to_vec(),
        });
    }
    Ok(())
}

/// `Σ_i Σ_j ζ(u_jᵀ x_i)` over visible rows `x` and hidden rows `u`.
pub fn rbm_energy(x: &Tensor, u: &Tensor, zeta: EnergyKernel) -> Result<f64> {
    check(x, u)?;
    let mut e = 0.0;
    for i in 0..x.rows() {
        for j in 0..u.rows() {
            e += zeta.zeta(dot(u.row(j), x.row(i)));
        }
    }
    Ok(e)
}

/// Interaction weights `-ζ′(x_iᵀ u_j)`, shape `N × M`.
pub fn rbm_weights(x: &Tensor, u: &Tensor, zeta: EnergyKernel) -> Result<Tensor> {
    check(x, u)?;
    Ok(matmul_nt(x, u)?.map(|s| -zeta.zeta_prime(s)))
}

/// `u_j ← u_j + ε Σ_i w_ij x_i` for an `N × M` weight table.
pub fn apply_hidden_update(x: &Tensor, u: &Tensor, weights: &Tensor, epsilon: f64) -> Result<Tensor> {
    check(x, u)?;
    if weights.rows() != x.rows() || weights.cols() != u.rows() {
        return Err(Error::Dimension {
            op: "apply_hidden_update",
            lhs: vec![x.rows(), u.rows()],
            rhs: weights.shape().to_vec(),
        });
    }
    u.axpy(epsilon, &matmul_tn(weights, x)?)
}

/// `u_j ← u_j - ε Σ_i ζ′(x_iᵀ u_j) x_i` for every `j`.
pub fn rbm_energy_step(x: &Tensor, u: &Tensor, zeta: EnergyKernel, epsilon: f64) -> Result<Tensor> {
    apply_hidden_update(x, u, &rbm_weights(x, u, zeta)?, epsilon)
}

/// Analytic `∇_U` of [`rbm_energy`].
pub fn rbm_energy_gradient(x: &Tensor, u: &Tensor, zeta: EnergyKernel) -> Result<Tensor> {
    Ok(matmul_tn(&rbm_weights(x, u, zeta)?, x)?.scale(-1.0))
}
