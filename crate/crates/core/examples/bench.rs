//! Wall-clock scaling of self-attention against centroid attention with a
//! fixed number of centroids. Run with `--release`.

use centroid_attention::harness::{bench, write_bench_csv, BenchConfig, MRule};

fn main() -> centroid_attention::Result<()> {
    let cfg = BenchConfig {
        n_list: vec![128, 256, 512],
        m_rule: MRule::Fixed(16),
        reps: 7,
        ..BenchConfig::default()
    };
    let records = bench(&cfg)?;
    write_bench_csv(&records, std::io::stdout().lock())?;
    for v in &cfg.variants {
        let t: Vec<f64> = records.iter().filter(|r| r.variant == *v).map(|r| r.median_ns).collect();
        let ratios: Vec<String> = t.windows(2).map(|w| format!("{:.2}", w[1] / w[0])).collect();
        println!("{:<13} doubling-N time ratios: {}", v.name(), ratios.join(", "));
    }
    Ok(())
}
