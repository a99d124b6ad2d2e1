//! k-means anchor priors from synthetic ground truth, in grid-cell units.

use fastyolo::detector::kmeans_anchors_traced;
use fastyolo::synth::still_images;

pub fn main() -> fastyolo::Result<()> {
    let video = still_images(200, 96, 96, 3);
    let grid = 6.0;
    let boxes: Vec<(f32, f32)> = video.truth.iter().flatten().map(|b| (b.w * grid, b.h * grid)).collect();
    for k in 1..=3 {
        let out = kmeans_anchors_traced(&boxes, k, 7)?;
        let anchors: Vec<String> = out.anchors.iter().map(|a| format!("{:.2}x{:.2}", a.w, a.h)).collect();
        println!(
            "k={k}: {}  mean 1-IOU {:.4} after {} iterations",
            anchors.join(" "),
            out.cost_history.last().copied().unwrap_or(0.0) / boxes.len() as f64,
            out.iterations
        );
    }
    Ok(())
}
