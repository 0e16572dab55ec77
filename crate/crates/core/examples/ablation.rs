//! Iteration-count and initialiser ablation on the synthetic task.

use centroid_attention::harness::{ablate, AblationAxis, AblationTable, TrainConfig};
use centroid_attention::model::synth_dataset;

fn main() -> centroid_attention::Result<()> {
    let mut cfg = TrainConfig::default_config();
    cfg.epochs = 20;
    let data = synth_dataset(&cfg.data)?;
    for axis in [AblationAxis::iterations(), AblationAxis::inits()] {
        let rows = ablate(&data, &cfg.model_spec(), &cfg.hyper(), &axis)?;
        println!("{}", AblationTable(&rows));
    }
    Ok(())
}
