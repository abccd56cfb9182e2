//! Refines prototypes against a query with the highlight-and-summarize head
//! and prints the relation matrix it uses.
//!
//! `cargo run --example highlight_summarize`

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rsad::nn::Tensor;
use rsad::rhs::{relation_matrix, summarize, Rhs, RhsMode};

fn main() -> rsad::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let map = |rng: &mut ChaCha8Rng| Tensor::<f64>::from_fn(&[4, 2, 2], |_| StandardNormal.sample(rng));
    let proto = map(&mut rng);
    let query = map(&mut rng);
    let m = relation_matrix(&query, &proto)?;
    for row in m.data().chunks(4) {
        println!("M row {:.3?} sums to {:.6}", row, row.iter().sum::<f64>());
    }
    for mode in [RhsMode::Off, RhsMode::Highlight, RhsMode::CrossAttention] {
        let head = Rhs::new(mode, 4, &mut rng);
        let refined = head.highlight(&proto, &query)?;
        println!("{:>15}: embedding {:.3?}", mode.to_string(), summarize(&refined));
    }
    Ok(())
}
