//! Turns saliency maps from two detectors into foreground priors and builds
//! an on-disk prior cache.
//!
//! `cargo run --example saliency_priors`

use rsad::data::{generate_synthetic, write_synthetic, SynthSpec};
use rsad::saliency_prior::{binarize_map, build_prior_cache, or_masks, SaliencyMap, DEFAULT_THRESHOLD};

fn main() -> rsad::Result<()> {
    let a = SaliencyMap::new(4, 1, vec![0.9, 0.5, 0.2, 0.1], "detector-a")?;
    let b = SaliencyMap::new(4, 1, vec![0.1, 0.2, 0.3, 0.7], "detector-b")?;
    let ma = binarize_map(&a, DEFAULT_THRESHOLD)?;
    let mb = binarize_map(&b, DEFAULT_THRESHOLD)?;
    println!("a >= t: {:?}", ma.bits);
    println!("b >= t: {:?}", mb.bits);
    println!("union:  {:?}", or_masks(&[ma, mb])?.bits);

    let dir = tempfile::tempdir().map_err(|e| rsad::RsadError::io(std::env::temp_dir(), e))?;
    let synth = generate_synthetic(&SynthSpec::new(3, 4, 48, 0))?;
    write_synthetic(&synth, dir.path())?;
    let out = dir.path().join("priors");
    let manifest = build_prior_cache(&[dir.path().join("masks")], &dir.path().join("images"), DEFAULT_THRESHOLD, &out)?;
    println!("cache: {} priors, {} images without maps", manifest.entries.len(), manifest.errors.len());
    let again = build_prior_cache(&[dir.path().join("masks")], &dir.path().join("images"), DEFAULT_THRESHOLD, &out)?;
    println!("rebuild keeps the same entries: {}", again.entries == manifest.entries);
    Ok(())
}
