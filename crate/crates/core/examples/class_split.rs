//! Seeded base / val / novel class splits for the registry datasets.
//!
//! `cargo run --example class_split`

use rsad::data::{indexed_class_names, make_split, SplitSpec, REGISTRY};

fn main() -> rsad::Result<()> {
    for info in &REGISTRY {
        let split = make_split(info.id, &indexed_class_names(info.classes), info.counts, 0)?;
        let back = SplitSpec::from_ndjson(&split.to_ndjson())?;
        println!(
            "{:<5} {} classes -> {} / {} / {}, first novel {:?}, round trip {}",
            info.id,
            info.classes,
            split.base.len(),
            split.val.len(),
            split.novel.len(),
            split.novel.first(),
            back == split
        );
    }
    Ok(())
}
