//! Davies-Bouldin index of query embeddings, on hand-made clusters and on a
//! freshly initialised main branch.
//!
//! `cargo run --release --example embedding_quality`

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rsad::backbone::BackboneConfig;
use rsad::data::{generate_synthetic, Dataset, NormStats, SynthSpec};
use rsad::evaluation::{dbi, query_embeddings, EpisodeShape};
use rsad::rhs::RhsMode;
use rsad::training::{Branch, Model, ModelMeta};

fn main() -> rsad::Result<()> {
    let tight = dbi(&[vec![0.0], vec![0.2], vec![5.0], vec![5.2]], &[0, 0, 1, 1])?;
    let loose = dbi(&[vec![0.0], vec![2.0], vec![5.0], vec![7.0]], &[0, 0, 1, 1])?;
    println!("tight clusters {tight:.3}, loose clusters {loose:.3}");

    let synth = generate_synthetic(&SynthSpec::new(5, 10, 40, 2))?;
    let data = Dataset::from_synthetic(&synth)?;
    let backbone = BackboneConfig::conv4(32);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let meta = ModelMeta {
        backbone: backbone.clone(),
        rhs: RhsMode::Highlight,
        tau: 10.0,
        norm: NormStats::from_images(data.samples.iter().map(|s| &s.raw))?,
    };
    let model = Model::new(meta, Branch::<f32>::new(&backbone, RhsMode::Highlight, &mut rng)?)?;
    let section = data.section(&data.classes())?;
    let (embs, labels) = query_embeddings(&model, &data, &section, EpisodeShape::new(5, 1, 5), 20, 0)?;
    println!("untrained encoder: DBI {:.3} over {} embeddings", dbi(&embs, &labels)?, embs.len());
    Ok(())
}
