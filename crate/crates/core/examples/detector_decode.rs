//! Decoding a raw head output into boxes, then suppression and scoring.

use fastyolo::detector::{decode, evaluate_mean_best_iou, iou, nms, AnchorPrior, ClassProbabilityMap, DetectionBox};
use fastyolo::Tensor;

pub fn main() -> fastyolo::Result<()> {
    // grid 2, one anchor, one class: channels tx, ty, tw, th, tobj, class
    let (s, per) = (2, 6);
    let mut raw = vec![0.0f32; per * s * s];
    let mut set = |k: usize, i: usize, j: usize, v: f32| raw[(k * s + i) * s + j] = v;
    for (i, j, obj) in [(0, 0, 3.0), (0, 1, 2.5), (1, 1, -4.0), (1, 0, -4.0)] {
        set(4, i, j, obj);
    }
    // make the two confident cells predict wide boxes that overlap
    set(2, 0, 0, 0.9);
    set(2, 0, 1, 0.9);
    let map = ClassProbabilityMap::new(Tensor::new(vec![per, s, s], raw)?, s, 1, 1)?;
    let anchors = [AnchorPrior::new(1.0, 1.0)];

    let boxes = decode(&map, &anchors, 0.5)?;
    for b in &boxes {
        println!("decoded  cx {:.3} cy {:.3} w {:.3} h {:.3} obj {:.3}", b.cx, b.cy, b.w, b.h, b.objectness);
    }
    println!("overlap of the two: {:.3}", iou(&boxes[0], &boxes[1]));
    let kept = nms(&boxes, 0.3);
    println!("after nms(0.3): {} box(es)", kept.len());

    let truth = vec![vec![DetectionBox::truth(0.3, 0.25, 0.6, 0.5, 0)]];
    println!("mean best IOU vs truth: {:.3}", evaluate_mean_best_iou(&[kept], &truth)?);
    Ok(())
}
