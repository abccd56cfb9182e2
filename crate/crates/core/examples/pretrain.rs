//! Whole-classification pre-training of a Conv4 encoder on the base classes,
//! keeping the epoch with the best prototype accuracy on validation classes.
//!
//! `cargo run --release --example pretrain`

use rsad::backbone::BackboneKind;
use rsad::data::{generate_synthetic, make_split, Dataset, NormStats, SynthSpec};
use rsad::training::{load_pretrained, pretrain, save_pretrained, PretrainInput, TrainConfig};

fn main() -> rsad::Result<()> {
    let synth = generate_synthetic(&SynthSpec::new(9, 12, 40, 3))?;
    let data = Dataset::from_synthetic(&synth)?;
    let split = make_split("synthetic", &synth.classes, (5, 2, 2), 3)?;
    let norm = NormStats::from_images(data.samples.iter().filter(|s| split.base.contains(&s.class)).map(|s| &s.raw))?;
    let config = TrainConfig {
        input_size: 32,
        epochs: 6,
        milestones: vec![4],
        batch_size: 16,
        val_episodes: 50,
        eval_way: 2,
        eval_query: 5,
        ..TrainConfig::pretrain("synthetic", BackboneKind::Conv4)
    };
    let trained = pretrain::<f32>(&config, &data, &split, norm, PretrainInput::Raw, &mut |m| {
        println!(
            "epoch {} loss {:.3} train acc {:.1} val {}",
            m.epoch,
            m.loss,
            m.train_acc,
            m.val_acc.map_or("-".into(), |v| format!("{v:.1}"))
        );
        Ok(())
    })?;
    if let Some(best) = trained.best_val {
        println!("best validation accuracy {best:.1}");
    }
    let dir = tempfile::tempdir().map_err(|e| rsad::RsadError::io(std::env::temp_dir(), e))?;
    let path = dir.path().join("pretrain.ckpt");
    save_pretrained(&trained, &path)?;
    let back = load_pretrained::<f32>(&path)?;
    println!("reloaded encoder for classes {:?}", back.classes);
    Ok(())
}
