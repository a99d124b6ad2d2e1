//! Training the bundled tiny detector on synthetic rectangles.
//!
//! The default is a short smoke run. `EPOCHS=25 TRAIN_FRAMES=500` reproduces
//! the full `train-tiny` configuration (a few minutes on one core).

use fastyolo::tiny::{train_tiny_with, TinyTrainConfig};

fn env_or(key: &str, default: usize) -> usize {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

pub fn main() -> fastyolo::Result<()> {
    let cfg = TinyTrainConfig {
        epochs: env_or("EPOCHS", 2),
        train_frames: env_or("TRAIN_FRAMES", 48),
        eval_frames: env_or("EVAL_FRAMES", 16),
        ..TinyTrainConfig::default()
    };
    let model = train_tiny_with(&cfg, |r| println!("epoch {:>2}  loss {:.4}", r.epoch, r.mean_loss))?;
    let anchors: Vec<String> = model.detector.anchors().iter().map(|a| format!("{:.2}x{:.2}", a.w, a.h)).collect();
    println!("anchors (grid cells): {}", anchors.join(", "));
    println!("held-out mean best IOU: {:.4}", model.held_out_iou);
    Ok(())
}
