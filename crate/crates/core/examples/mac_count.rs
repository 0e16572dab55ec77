//! Multiply-accumulate counts of a 4-layer encoder with and without a
//! centroid layer that shrinks 45 tokens to 15.

use centroid_attention::harness::{mac_count, ArchDesc};

fn main() -> centroid_attention::Result<()> {
    let arch = ArchDesc::encoder(4, 512, &[(1, 15)]);
    let centroid = mac_count(&arch, 45)?;
    let vanilla = mac_count(&arch.vanilla(), 45)?;
    println!("{:<6} {:<20} {:>8} {:>14}", "layer", "kind", "tokens", "MACs");
    for l in &centroid.layers {
        println!(
            "{:<6} {:<20} {:>3}->{:<4} {:>14}",
            l.layer, l.kind, l.tokens_in, l.tokens_out, l.total
        );
    }
    println!("centroid total: {:.1}M", centroid.total as f64 / 1e6);
    println!("vanilla total:  {:.1}M", vanilla.total as f64 / 1e6);
    println!("ratio:          {:.3}", centroid.total as f64 / vanilla.total as f64);
    Ok(())
}
