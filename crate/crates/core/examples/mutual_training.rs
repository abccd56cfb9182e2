//! Dual-branch episodic training with saliency guidance, followed by export
//! of the main branch and novel-class evaluation.
//!
//! `cargo run --release --example mutual_training`

use rsad::backbone::BackboneKind;
use rsad::data::{generate_synthetic, make_split, Dataset, NormStats, SynthSpec};
use rsad::evaluation::{evaluate, EvalContext};
use rsad::training::checkpoint::load_model;
use rsad::training::{episodic_train, export_main_branch, TrainConfig, TrainState};

fn main() -> rsad::Result<()> {
    let synth = generate_synthetic(&SynthSpec::new(10, 12, 48, 4))?;
    let data = Dataset::from_synthetic(&synth)?;
    let split = make_split("synthetic", &synth.classes, (6, 2, 2), 4)?;
    let norm = NormStats::from_images(data.samples.iter().filter(|s| split.base.contains(&s.class)).map(|s| &s.raw))?;
    let config = TrainConfig {
        input_size: 40,
        way: 5,
        shot: 1,
        query: 2,
        episodes: 120,
        val_every: 40,
        val_episodes: 40,
        eval_way: 2,
        eval_query: 5,
        ..TrainConfig::episodic("synthetic", BackboneKind::Conv4)
    };
    let mut state = TrainState::<f32>::new(config, norm, None, None)?;
    episodic_train(&mut state, &data, &split, &mut |m| {
        if m.step % 20 == 0 {
            println!(
                "step {:>3} cls1 {:.3} cls2 {:.3} sag {:.3} total {:.3} val {}",
                m.step,
                m.cls1,
                m.cls2,
                m.sag,
                m.total,
                m.val_acc.map_or("-".into(), |v| format!("{v:.2}"))
            );
        }
        Ok(())
    })?;
    if let Some(best) = &state.best {
        println!("best validation accuracy {:.2} at step {}", best.val_acc, best.step);
    }

    let dir = tempfile::tempdir().map_err(|e| rsad::RsadError::io(std::env::temp_dir(), e))?;
    let path = dir.path().join("model.ckpt");
    export_main_branch(&state, &path)?;
    let model = load_model::<f32>(&path)?;
    let novel = data.section(&split.novel)?;
    let ctx = EvalContext {
        dataset: "synthetic".into(),
        section: "novel".into(),
        model_id: "example".into(),
    };
    let report = evaluate(&model, &data, &novel, state.config.eval_shape(), 200, 0, &ctx)?;
    println!("{}", report.line());
    Ok(())
}
