//! Classification and saliency-guidance losses on hand-made distributions.
//!
//! `cargo run --example losses`

use rsad::losses::{cross_entropy, kl_div, sag_grads, sag_loss, softmax_rows, total_loss};
use rsad::nn::Tensor;

fn main() -> rsad::Result<()> {
    let raw = softmax_rows(&Tensor::<f64>::from_vec(&[2, 3], vec![2.0, 0.5, 0.1, 0.3, 1.5, 0.2]));
    let prior = softmax_rows(&Tensor::<f64>::from_vec(&[2, 3], vec![1.0, 0.9, 0.1, 0.1, 2.5, 0.0]));
    let labels = [0, 1];
    let cls1 = cross_entropy(&raw, &labels)?;
    let cls2 = cross_entropy(&prior, &labels)?;
    let sag = sag_loss(&raw, &prior)?;
    println!("cls1 {cls1:.4}  cls2 {cls2:.4}");
    println!("KL(raw||prior) {:.4}  KL(prior||raw) {:.4}  sag {sag:.4}", kl_div(&raw, &prior)?, kl_div(&prior, &raw)?);
    for alpha in [0.1, 1.0, 5.0, 10.0] {
        println!("alpha {alpha:>4}: total {:.4}", total_loss(cls1, cls2, sag, alpha));
    }
    let (g_raw, g_prior) = sag_grads(&raw, &prior);
    println!("logit gradients raw {:.4?}", g_raw.data());
    println!("logit gradients prior {:.4?}", g_prior.data());
    Ok(())
}
