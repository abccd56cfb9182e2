//! Samples N-way K-shot episodes from a synthetic dataset.
//!
//! `cargo run --example episodes`

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rsad::data::{generate_synthetic, sample_episode, Dataset, SynthSpec};

fn main() -> rsad::Result<()> {
    let data = Dataset::from_synthetic(&generate_synthetic(&SynthSpec::new(8, 10, 40, 1))?)?;
    let section = data.section(&data.classes())?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..3 {
        let ep = sample_episode(&section, 5, 1, 3, &mut rng)?;
        let support: Vec<&str> = ep.support.iter().map(|i| data.samples[i.sample].id.as_str()).collect();
        println!("classes {:?}", ep.class_map);
        println!("  support {support:?}");
        println!("  query labels {:?}", ep.query_labels());
    }
    match sample_episode(&section, 5, 5, 10, &mut rng) {
        Err(e) => println!("oversized episode: {e}"),
        Ok(_) => println!("oversized episode unexpectedly sampled"),
    }
    Ok(())
}
