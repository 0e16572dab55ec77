//! Self-attention as the `M = N` special case of centroid attention.
//!
//! With identity initialisation, one step of size 1, normalisation over the
//! inputs and `x W_V` values, the centroid update is exactly a self-attention
//! layer with a residual connection.

use centroid_attention::{
    centroid_attention, self_attention, AttentionParams, CentroidAttentionConfig, CentroidHead, HeadParams,
    Initializer, NormAxis, Tensor,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> centroid_attention::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (n, d) = (6, 4);
    let x = Tensor::randn(n, d, 1.0, &mut rng);
    let head = HeadParams::random(d, 3, d, &mut rng);
    let params = AttentionParams::summed(vec![head.clone()]);

    let sa = self_attention(&x, &params, 1.0)?;

    let mut cfg = CentroidAttentionConfig::new(n, vec![CentroidHead::from_attention(&head, params.score_scale(&head))]);
    cfg.init = Initializer::Identity;
    cfg.axis = NormAxis::Inputs;
    let ca = centroid_attention(&x, &cfg)?;

    println!("self-attention output:\n{:?}", sa.to_rows());
    println!("max |self - centroid| = {:.2e}", sa.max_abs_diff(&ca));

    // fewer centroids summarise the same set
    cfg.m = 2;
    cfg.init = Initializer::FarthestPoint { start: 0 };
    let summary = centroid_attention(&x, &cfg)?;
    println!("{n} tokens -> {} centroids: {:?}", summary.rows(), summary.to_rows());
    Ok(())
}
