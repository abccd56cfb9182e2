//! Flat `key = value` run configuration with environment overrides.
//!
//! `cargo run --example run_config`

use std::collections::BTreeMap;

use rsad::cli::{emit_config, parse_config_text};

fn main() -> rsad::Result<()> {
    let text = "\
# dual-branch fine-tuning on CUB
dataset = cub
backbone = resnet12
alpha = 5
images = data/cub/images
priors = data/cub/priors
split = data/cub/split.ndjson
";
    let env = BTreeMap::from([("RSAD_ALPHA".to_string(), "1".to_string())]);
    let cfg = parse_config_text(text, &env)?;
    println!("alpha after override: {}", cfg.train.alpha);
    println!("optimizer: {:?} lr {}", cfg.train.optimizer.kind, cfg.train.optimizer.lr);
    print!("{}", emit_config(&cfg));
    match parse_config_text("aplha = 1\n", &BTreeMap::new()) {
        Err(e) => println!("typo rejected: {e}"),
        Ok(_) => println!("typo accepted"),
    }
    Ok(())
}
