//! A small component ablation: each row trains from scratch and is scored on
//! novel classes.
//!
//! `cargo run --release --example ablation`

use rsad::backbone::BackboneKind;
use rsad::data::{generate_synthetic, Dataset, NormStats, SplitSpec, SynthSpec};
use rsad::evaluation::{ablation_preset, ablation_table, evaluate, EvalContext};
use rsad::training::{episodic_train, TrainConfig, TrainState};

fn main() -> rsad::Result<()> {
    let synth = generate_synthetic(&SynthSpec::new(10, 12, 40, 5))?;
    let data = Dataset::from_synthetic(&synth)?;
    let split = SplitSpec {
        dataset_id: "synthetic".into(),
        seed: 5,
        base: synth.classes[..6].to_vec(),
        val: vec![],
        novel: synth.classes[6..].to_vec(),
        norm: None,
    };
    let norm = NormStats::from_images(data.samples.iter().filter(|s| split.base.contains(&s.class)).map(|s| &s.raw))?;
    let novel = data.section(&split.novel)?;
    let base = TrainConfig {
        input_size: 32,
        way: 4,
        shot: 1,
        query: 2,
        episodes: 60,
        val_every: 0,
        eval_way: 4,
        eval_query: 5,
        ..TrainConfig::episodic("synthetic", BackboneKind::Conv4)
    };
    let mut rows = Vec::new();
    for row in ablation_preset("components", 1.0)? {
        let config = TrainConfig {
            sag: row.sag,
            rhs: row.rhs,
            alpha: row.alpha,
            variant: row.variant,
            ..base.clone()
        };
        let mut state = TrainState::<f32>::new(config, norm, None, None)?;
        episodic_train(&mut state, &data, &split, &mut |_| Ok(()))?;
        let ctx = EvalContext {
            dataset: "synthetic".into(),
            section: "novel".into(),
            model_id: row.name.clone(),
        };
        let report = evaluate(&state.main_model(), &data, &novel, base.eval_shape(), 200, 0, &ctx)?;
        rows.push((row, report));
    }
    print!("{}", ablation_table(&rows));
    Ok(())
}
