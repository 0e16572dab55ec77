//! Attention updates read as descent on an energy: a pairwise energy for
//! self-attention and an RBM-style visible/hidden energy for centroids.

use centroid_attention::energy::{
    pairwise_energy, pairwise_energy_step, rbm_energy, rbm_energy_step, rbm_weights, EnergyKernel, SelfTerms,
};
use centroid_attention::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> centroid_attention::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = Tensor::randn(8, 3, 0.5, &mut rng);
    let mut u = Tensor::randn(3, 3, 0.5, &mut rng);
    let zeta = EnergyKernel::NegExp;

    println!("hidden-unit descent:");
    for step in 0..5 {
        println!("  step {step}: E = {:.6}", rbm_energy(&x, &u, zeta)?);
        u = rbm_energy_step(&x, &u, zeta, 1e-2)?;
    }

    // -exp is unbounded below, so large steps run away; keep them small
    let mut v = x.clone();
    println!("pairwise descent:");
    for step in 0..5 {
        println!("  step {step}: E = {:.6}", pairwise_energy(&v, zeta, SelfTerms::Include));
        v = pairwise_energy_step(&v, zeta, 1e-3, SelfTerms::Include);
    }

    // -ζ′ is exp(xᵀu): unnormalised dot-product attention weights
    let w = rbm_weights(&x, &u, zeta)?;
    println!("first row of exp(x·u) weights: {:?}", w.row(0));
    Ok(())
}
