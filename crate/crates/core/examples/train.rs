//! Trains the bundled default model on the synthetic blob-layout task.
//!
//! `cargo run --release --example train [config.json]`

use centroid_attention::harness::{run_train, TrainConfig};
use centroid_attention::model::nearest_centroid_accuracy;

fn main() -> centroid_attention::Result<()> {
    let cfg = match std::env::args().nth(1) {
        Some(path) => TrainConfig::load(path.as_ref())?,
        None => TrainConfig::default_config(),
    };
    let out = run_train(&cfg)?;
    println!(
        "nearest-centroid oracle test accuracy: {:.3}",
        nearest_centroid_accuracy(&out.dataset)?
    );
    println!("untrained test accuracy: {:.3}", out.untrained_test_acc);
    for (r, secs) in out.report.records.iter().zip(&out.report.wall_times) {
        println!(
            "epoch {:>3}  loss {:.4}  train {:.3}  test {:.3}  {:.2}s",
            r.epoch, r.loss, r.train_acc, r.test_acc, secs
        );
    }
    println!("final test accuracy: {:.3}", out.report.final_test_acc());
    Ok(())
}
