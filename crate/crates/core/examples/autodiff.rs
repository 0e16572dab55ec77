//! Differentiating through two unrolled centroid updates with the graph
//! engine, checked against central differences.

use std::collections::HashMap;

use centroid_attention::autodiff::{finite_diff_check, Graph};
use centroid_attention::{Initializer, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> centroid_attention::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::randn(6, 3, 1.0, &mut rng);
    let w_k = Tensor::randn(3, 3, 0.5, &mut rng);

    let build = |w: &Tensor| -> centroid_attention::Result<Graph> {
        let mut g = Graph::new();
        let xi = g.input("x");
        let wk = g.param("w_k", w.clone());
        let mut u = g.init_centroids(xi, Initializer::FarthestPoint { start: 0 }, 2)?;
        let keys = g.matmul(xi, wk);
        let kt = g.transpose(keys);
        for _ in 0..2 {
            let scores = g.matmul(u, kt);
            let sim = g.row_softmax(scores, 1.0);
            let pulled = g.matmul(sim, xi);
            let step = g.scale(pulled, 0.5);
            u = g.add(u, step);
        }
        let sq = g.mul(u, u);
        let loss = g.sum(sq);
        g.set_output(loss);
        Ok(g)
    };
    let inputs = HashMap::from([("x".to_string(), x.clone())]);

    let mut g = build(&w_k)?;
    let loss = g.forward(&inputs)?;
    let grads = g.backward(&Tensor::scalar(1.0))?;
    let analytic = grads.param("w_k").expect("trainable").clone();

    let f = |w: &Tensor| build(w).and_then(|mut g| g.forward(&inputs)).map_or(f64::NAN, |t| t.get(0, 0));
    let report = finite_diff_check(f, &w_k, &analytic, 1e-5, 1e-6)?;
    println!("loss {:.6}", loss.get(0, 0));
    println!("gradient w.r.t. W_K: {:?}", analytic.to_rows());
    println!("max relative error vs finite differences: {:.2e} (pass: {})", report.max_rel_err, report.pass);
    Ok(())
}
