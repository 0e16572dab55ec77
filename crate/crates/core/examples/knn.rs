//! KNN-masked centroid attention: each centroid only attends to its `k`
//! nearest inputs, and `k = N` recovers the dense update.

use centroid_attention::{
    centroid_attention, knn_mask, CentroidAttentionConfig, CentroidHead, SimilarityKernel, Tensor,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> centroid_attention::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::randn(32, 3, 1.0, &mut rng);
    let mut cfg = CentroidAttentionConfig::new(4, vec![CentroidHead::tied(SimilarityKernel::NegHalfSquaredDistance)]);
    cfg.t = 3;
    cfg.epsilon = Some(0.1);

    let u0 = cfg.init.init(&x, 4)?;
    let mask = knn_mask(&x, &u0, 5)?;
    for (j, nb) in mask.neighbors.iter().enumerate() {
        println!("centroid {j} neighbours: {nb:?}");
    }

    let dense = centroid_attention(&x, &cfg)?;
    for k in [32, 16, 8, 4] {
        cfg.knn_k = Some(k);
        let masked = centroid_attention(&x, &cfg)?;
        let rel = masked.sub(&dense)?.frobenius() / dense.frobenius();
        println!("k = {k:>2}: relative distance to dense trajectory {rel:.3e}");
    }
    Ok(())
}
