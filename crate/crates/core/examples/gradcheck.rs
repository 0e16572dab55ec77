//! The centroid update equals a gradient step on the soft k-means
//! objective; this checks it on random instances against finite
//! differences.

use centroid_attention::harness::gradcheck;

fn main() -> centroid_attention::Result<()> {
    let report = gradcheck(50, 1e-6, 0)?;
    for r in report.records.iter().take(6) {
        println!(
            "seed {:>2} {:<16} N={} M={} d={} alpha={:<3} err {:.2e}",
            r.seed, r.kernel, r.n, r.m, r.d, r.alpha, r.update_rel_err
        );
    }
    println!(
        "{} / {} passed, worst error {:.2e}",
        report.records.len() - report.failures,
        report.records.len(),
        report.max_update_rel_err
    );
    Ok(())
}
