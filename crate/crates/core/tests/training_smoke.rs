//! Short dual-branch runs on small synthetic images.

use std::time::Instant;

use rsad::backbone::BackboneKind;
use rsad::data::{generate_synthetic, Dataset, NormStats, SplitSpec, SynthSpec};
use rsad::training::{episodic_train, TrainConfig, TrainState};

const BLOCK: usize = 25;

fn run(seed: u64) -> Vec<f64> {
    let synth = generate_synthetic(&SynthSpec::new(10, 12, 40, 100 + seed)).unwrap();
    let data = Dataset::from_synthetic(&synth).unwrap();
    let split = SplitSpec {
        dataset_id: "synthetic".into(),
        seed,
        base: synth.classes[..7].to_vec(),
        val: vec![],
        novel: synth.classes[7..].to_vec(),
        norm: None,
    };
    let norm = NormStats::from_images(data.samples.iter().map(|s| &s.raw)).unwrap();
    let config = TrainConfig {
        input_size: 32,
        way: 5,
        shot: 1,
        query: 3,
        episodes: 200,
        val_every: 0,
        seed,
        ..TrainConfig::episodic("synthetic", BackboneKind::Conv4)
    };
    let mut state = TrainState::<f32>::new(config, norm, None, None).unwrap();
    let mut totals = Vec::new();
    episodic_train(&mut state, &data, &split, &mut |m| {
        totals.push(m.total);
        Ok(())
    })
    .unwrap();
    totals
}

#[test]
fn smoothed_loss_decreases_over_the_first_hundred_episodes() {
    let start = Instant::now();
    for seed in 0..3 {
        let totals = run(seed);
        assert_eq!(totals.len(), 200);
        assert!(totals.iter().all(|t| t.is_finite()));
        let blocks: Vec<f64> = totals[..100]
            .chunks(BLOCK)
            .map(|c| c.iter().sum::<f64>() / BLOCK as f64)
            .collect();
        assert!(
            blocks.windows(2).all(|w| w[1] < w[0]),
            "seed {seed}: block means {blocks:?}"
        );
    }
    assert!(start.elapsed().as_secs() < 300, "took {:?}", start.elapsed());
}
