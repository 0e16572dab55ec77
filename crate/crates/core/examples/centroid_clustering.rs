//! Untrained centroid attention used directly as a clustering procedure on
//! two Gaussian blobs, compared with Lloyd's k-means.

use centroid_attention::clustering::lloyd_kmeans;
use centroid_attention::harness::{cluster, ClusterConfig};
use centroid_attention::model::InitSpec;
use centroid_attention::{farthest_point_sample, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn main() -> centroid_attention::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let noise = Normal::new(0.0, 0.3).expect("valid std");
    let mut data = Vec::new();
    for (cx, cy) in [(-2.0, 0.0), (2.0, 1.0)] {
        for _ in 0..50 {
            data.push(cx + noise.sample(&mut rng));
            data.push(cy + noise.sample(&mut rng));
        }
    }
    let points = Tensor::matrix(100, 2, data)?;

    let result = cluster(
        &points,
        &ClusterConfig {
            m: 2,
            alpha: 5.0,
            t: 3,
            epsilon: None,
            init: InitSpec::Fps { start: 0 },
        },
    )?;
    let seeds = farthest_point_sample(&points, 2, 0)?;
    let (lloyd, labels) = lloyd_kmeans(&points, 2, 20, &seeds)?;

    let agree = result
        .assignments
        .iter()
        .zip(&labels.labels)
        .filter(|(a, b)| a == b)
        .count();
    println!("centroid attention centres: {:?}", result.centroids);
    println!("lloyd centres:              {:?}", lloyd.to_rows());
    println!("soft k-means objective:     {:.4}", result.objective);
    println!("label agreement with lloyd: {agree}/100");
    Ok(())
}
