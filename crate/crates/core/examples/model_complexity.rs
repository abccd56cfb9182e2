//! Parameter counts of the backbones and of the deployable main branch.
//!
//! `cargo run --example model_complexity`

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rsad::backbone::{build_backbone, BackboneConfig, BackboneKind};
use rsad::evaluation::report_complexity;
use rsad::rhs::RhsMode;
use rsad::training::Branch;

fn main() -> rsad::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for kind in [BackboneKind::Conv4, BackboneKind::ResNet12] {
        let cfg = BackboneConfig::standard(kind, 84);
        let encoder = build_backbone::<f32, _>(&cfg, &mut rng)?;
        println!("{:>9} backbone: {}", kind.to_string(), report_complexity(&encoder));
        for mode in [RhsMode::Off, RhsMode::Highlight, RhsMode::CrossAttention] {
            let branch = Branch::<f32>::new(&cfg, mode, &mut rng)?;
            println!("{:>9} + {:<15} {}", kind.to_string(), mode.to_string(), report_complexity(&branch));
        }
    }
    Ok(())
}
