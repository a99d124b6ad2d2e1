//! Single-shot grid/anchor detection: decoding, IOU, non-maximum suppression,
//! k-means anchor priors and mean-best-IOU evaluation.
//!
//! Raw head layout: a `[A·(5+C), S, S]` tensor where slot `a` of cell `(i, j)`
//! reads channels `a·(5+C) .. (a+1)·(5+C)` at row `i`, column `j`, in the
//! order `t_x, t_y, t_w, t_h, t_obj, class_0 .. class_{C-1}`.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netdef::HeadSpec;
use crate::tensor::{sigmoid, Tensor};

/// Canonical box width/height, in grid-cell units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorPrior {
    pub w: f32,
    pub h: f32,
}

impl AnchorPrior {
    pub fn new(w: f32, h: f32) -> Self {
        Self { w, h }
    }

    /// Parses `w,h;w,h` or `wxh,wxh`.
    pub fn parse_list(s: &str) -> std::result::Result<Vec<Self>, String> {
        let s = s.trim();
        if s.is_empty() {
            return Ok(Vec::new());
        }
        let (outer, inner) = if s.contains('x') { (',', 'x') } else { (';', ',') };
        s.split(outer)
            .map(|pair| {
                let (w, h) = pair
                    .split_once(inner)
                    .ok_or_else(|| format!("anchor {pair:?}: expected w{inner}h"))?;
                let w: f32 = w.trim().parse().map_err(|_| format!("anchor width {w:?}"))?;
                let h: f32 = h.trim().parse().map_err(|_| format!("anchor height {h:?}"))?;
                if !(w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite()) {
                    return Err(format!("anchor {pair:?} must have positive extents"));
                }
                Ok(AnchorPrior::new(w, h))
            })
            .collect()
    }

    pub fn format_list(anchors: &[AnchorPrior]) -> String {
        anchors
            .iter()
            .map(|a| format!("{}x{}", a.w, a.h))
            .collect::<Vec<_>>()
            .join(",")
    }
}

/// Center-format box in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionBox {
    pub cx: f32,
    pub cy: f32,
    pub w: f32,
    pub h: f32,
    pub objectness: f32,
    pub class_id: usize,
    pub class_score: f32,
}

impl DetectionBox {
    /// A ground-truth style box: objectness and class score 1.
    pub fn truth(cx: f32, cy: f32, w: f32, h: f32, class_id: usize) -> Self {
        Self {
            cx,
            cy,
            w,
            h,
            objectness: 1.0,
            class_id,
            class_score: 1.0,
        }
    }

    /// Ranking score used by NMS.
    pub fn score(&self) -> f32 {
        self.objectness * self.class_score
    }

    pub fn corners(&self) -> [f64; 4] {
        let (cx, cy, w, h) = (self.cx as f64, self.cy as f64, self.w as f64, self.h as f64);
        [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0]
    }
}

/// Raw detector output for one frame, kept as the reusable reference result.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassProbabilityMap {
    grid: usize,
    anchors: usize,
    classes: usize,
    raw: Tensor,
}

impl ClassProbabilityMap {
    pub fn new(raw: Tensor, grid: usize, anchors: usize, classes: usize) -> Result<Self> {
        let expected = [anchors * (5 + classes), grid, grid];
        if raw.shape() != expected {
            return Err(Error::shape("class probability map", raw.shape(), &expected));
        }
        Ok(Self {
            grid,
            anchors,
            classes,
            raw,
        })
    }

    pub fn from_head(raw: Tensor, head: &HeadSpec) -> Result<Self> {
        Self::new(raw, head.grid, head.anchors, head.classes)
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn anchors(&self) -> usize {
        self.anchors
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn raw(&self) -> &Tensor {
        &self.raw
    }

    /// Raw value `k` (0..5+C) of anchor slot `a` at cell `(i, j)`.
    #[inline]
    pub fn value(&self, i: usize, j: usize, a: usize, k: usize) -> f32 {
        let ch = a * (5 + self.classes) + k;
        self.raw.data()[(ch * self.grid + i) * self.grid + j]
    }
}

/// Softmax over `raw`, returning `(argmax, max probability)`. Ties go to the
/// lower class index.
fn softmax_argmax(raw: &[f32]) -> (usize, f32) {
    let max = raw.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    let mut best = (0, f32::NEG_INFINITY);
    for (c, &v) in raw.iter().enumerate() {
        let e = (v - max).exp();
        sum += e;
        if e > best.1 {
            best = (c, e);
        }
    }
    (best.0, best.1 / sum)
}

/// Decodes every anchor slot in cell-major, anchor-minor order and drops slots
/// whose objectness falls below `obj_threshold`.
pub fn decode(map: &ClassProbabilityMap, anchors: &[AnchorPrior], obj_threshold: f32) -> Result<Vec<DetectionBox>> {
    if anchors.len() != map.anchors {
        return Err(Error::InvalidArgument(format!(
            "map has {} anchor slots but {} priors were given",
            map.anchors,
            anchors.len()
        )));
    }
    let s = map.grid as f32;
    let mut classes = vec![0.0f32; map.classes];
    let mut out = Vec::new();
    for i in 0..map.grid {
        for j in 0..map.grid {
            for (a, prior) in anchors.iter().enumerate() {
                let objectness = sigmoid(map.value(i, j, a, 4));
                if objectness < obj_threshold {
                    continue;
                }
                for (c, v) in classes.iter_mut().enumerate() {
                    *v = map.value(i, j, a, 5 + c);
                }
                let (class_id, class_score) = softmax_argmax(&classes);
                out.push(DetectionBox {
                    cx: (j as f32 + sigmoid(map.value(i, j, a, 0))) / s,
                    cy: (i as f32 + sigmoid(map.value(i, j, a, 1))) / s,
                    w: prior.w * map.value(i, j, a, 2).exp() / s,
                    h: prior.h * map.value(i, j, a, 3).exp() / s,
                    objectness,
                    class_id,
                    class_score,
                });
            }
        }
    }
    Ok(out)
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(a: &DetectionBox, b: &DetectionBox) -> f32 {
    let [ax0, ay0, ax1, ay1] = a.corners();
    let [bx0, by0, bx1, by1] = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.w as f64 * a.h as f64 + b.w as f64 * b.h as f64 - inter;
    (inter / union).clamp(0.0, 1.0) as f32
}

/// Greedy per-class suppression. Boxes are visited by descending score; equal
/// scores keep their input order, which for [`decode`] output is cell index
/// then anchor index. A box survives unless a previously kept box of the same
/// class overlaps it by more than `iou_threshold`.
pub fn nms(boxes: &[DetectionBox], iou_threshold: f32) -> Vec<DetectionBox> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&x, &y| boxes[y].score().total_cmp(&boxes[x].score()));
    let mut kept: Vec<DetectionBox> = Vec::new();
    for idx in order {
        let cand = &boxes[idx];
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == cand.class_id && iou(k, cand) > iou_threshold);
        if !suppressed {
            kept.push(*cand);
        }
    }
    kept
}

/// IOU of two co-centered boxes given only their extents.
pub fn wh_iou(a: (f32, f32), b: (f32, f32)) -> f32 {
    let inter = a.0.min(b.0) * a.1.min(b.1);
    inter / (a.0 * a.1 + b.0 * b.1 - inter)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansOutcome {
    /// Sorted by area, ascending.
    pub anchors: Vec<AnchorPrior>,
    /// Total `Σ (1 − iou)` after each iteration.
    pub cost_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

pub const KMEANS_MAX_ITERATIONS: usize = 100;

/// Anchor priors from box extents by k-means under `1 − iou` with co-centered
/// boxes. Returned anchors are in the same units as the input.
pub fn kmeans_anchors(boxes: &[(f32, f32)], k: usize, seed: u64) -> Result<Vec<AnchorPrior>> {
    Ok(kmeans_anchors_traced(boxes, k, seed)?.anchors)
}

pub fn kmeans_anchors_traced(boxes: &[(f32, f32)], k: usize, seed: u64) -> Result<KMeansOutcome> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be positive".into()));
    }
    if boxes.len() < k {
        return Err(Error::InvalidArgument(format!(
            "k-means needs at least k = {k} boxes, got {}",
            boxes.len()
        )));
    }
    if let Some(b) = boxes.iter().find(|b| !(b.0 > 0.0 && b.1 > 0.0)) {
        return Err(Error::InvalidArgument(format!("box extents must be positive, got {b:?}")));
    }
    let dist = |b: (f32, f32), c: (f32, f32)| 1.0 - wh_iou(b, c) as f64;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids: Vec<(f32, f32)> = rand::seq::index::sample(&mut rng, boxes.len(), k)
        .into_iter()
        .map(|i| boxes[i])
        .collect();
    let nearest = |centroids: &[(f32, f32)], b: (f32, f32)| -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for (c, &cen) in centroids.iter().enumerate() {
            let d = dist(b, cen);
            if d < best.1 {
                best = (c, d);
            }
        }
        best
    };

    let mut assignment: Vec<usize> = vec![usize::MAX; boxes.len()];
    let mut cost_history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < KMEANS_MAX_ITERATIONS {
        iterations += 1;
        let next: Vec<usize> = boxes.iter().map(|&b| nearest(&centroids, b).0).collect();
        let reassigned = next != assignment;
        assignment = next;

        let mut moved = false;
        let mut reseeded: Vec<usize> = Vec::new();
        for c in 0..k {
            let members: Vec<(f32, f32)> = boxes
                .iter()
                .zip(&assignment)
                .filter(|(_, &a)| a == c)
                .map(|(&b, _)| b)
                .collect();
            if members.is_empty() {
                // Re-seed on the box worst served by its current centroid.
                let far = (0..boxes.len())
                    .filter(|i| !reseeded.contains(i))
                    .max_by(|&x, &y| {
                        let dx = dist(boxes[x], centroids[assignment[x]]);
                        let dy = dist(boxes[y], centroids[assignment[y]]);
                        dx.total_cmp(&dy).then(y.cmp(&x))
                    });
                if let Some(i) = far {
                    reseeded.push(i);
                    if centroids[c] != boxes[i] {
                        centroids[c] = boxes[i];
                        moved = true;
                    }
                }
                continue;
            }
            let n = members.len() as f64;
            let mean = (
                (members.iter().map(|b| b.0 as f64).sum::<f64>() / n) as f32,
                (members.iter().map(|b| b.1 as f64).sum::<f64>() / n) as f32,
            );
            let cluster_cost = |cen: (f32, f32)| members.iter().map(|&b| dist(b, cen)).sum::<f64>();
            // The mean is not the exact minimizer of 1 - iou; only accept it
            // when it does not raise the cluster's cost.
            if mean != centroids[c] && cluster_cost(mean) <= cluster_cost(centroids[c]) {
                centroids[c] = mean;
                moved = true;
            }
        }
        let cost: f64 = boxes
            .iter()
            .zip(&assignment)
            .map(|(&b, &a)| dist(b, centroids[a]))
            .sum();
        cost_history.push(cost);
        if !reassigned && !moved {
            converged = true;
            break;
        }
    }

    let mut anchors: Vec<AnchorPrior> = centroids.into_iter().map(|(w, h)| AnchorPrior::new(w, h)).collect();
    anchors.sort_by(|a, b| (a.w * a.h).total_cmp(&(b.w * b.h)).then(a.w.total_cmp(&b.w)));
    Ok(KMeansOutcome {
        anchors,
        cost_history,
        iterations,
        converged,
    })
}

/// For each ground-truth box, the best IOU against that frame's predictions
/// (0 without predictions); averaged over all truth boxes. Returns 0 when
/// there are no truth boxes at all.
pub fn evaluate_mean_best_iou(predictions: &[Vec<DetectionBox>], truth: &[Vec<DetectionBox>]) -> Result<f64> {
    if predictions.len() != truth.len() {
        return Err(Error::InvalidArgument(format!(
            "{} prediction frames vs {} truth frames",
            predictions.len(),
            truth.len()
        )));
    }
    let mut total = 0.0f64;
    let mut count = 0usize;
    for (preds, gts) in predictions.iter().zip(truth) {
        for gt in gts {
            total += preds.iter().map(|p| iou(gt, p)).fold(0.0f32, f32::max) as f64;
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Training target for the composite detector loss, shaped like the raw head
/// output. Per slot: `σ(t_x)`, `σ(t_y)`, `t_w`, `t_h` targets, a
/// responsibility flag in place of `t_obj`, then a one-hot class vector. Each
/// truth box is owned by the cell holding its center and the anchor with the
/// best co-centered IOU; a later box claiming an owned slot replaces it.
pub fn encode_targets(truth: &[DetectionBox], head: &HeadSpec, anchors: &[AnchorPrior]) -> Result<Tensor> {
    if anchors.len() != head.anchors {
        return Err(Error::InvalidArgument(format!(
            "head has {} anchors, {} priors given",
            head.anchors,
            anchors.len()
        )));
    }
    let s = head.grid;
    let per = 5 + head.classes;
    let mut target = Tensor::zeros(vec![head.anchors * per, s, s]);
    let data = target.data_mut();
    for gt in truth {
        if gt.class_id >= head.classes {
            return Err(Error::InvalidArgument(format!(
                "truth class {} outside head's {} classes",
                gt.class_id, head.classes
            )));
        }
        let gx = gt.cx * s as f32;
        let gy = gt.cy * s as f32;
        let j = (gx.floor().max(0.0) as usize).min(s - 1);
        let i = (gy.floor().max(0.0) as usize).min(s - 1);
        let (gw, gh) = (gt.w * s as f32, gt.h * s as f32);
        let a = (0..anchors.len())
            .max_by(|&x, &y| {
                wh_iou((gw, gh), (anchors[x].w, anchors[x].h))
                    .total_cmp(&wh_iou((gw, gh), (anchors[y].w, anchors[y].h)))
                    .then(y.cmp(&x))
            })
            .expect("at least one anchor");
        let mut set = |k: usize, v: f32| data[((a * per + k) * s + i) * s + j] = v;
        set(0, gx - j as f32);
        set(1, gy - i as f32);
        set(2, (gw / anchors[a].w).ln());
        set(3, (gh / anchors[a].h).ln());
        set(4, 1.0);
        for c in 0..head.classes {
            set(5 + c, if c == gt.class_id { 1.0 } else { 0.0 });
        }
    }
    Ok(target)
}

/// One line per box: `frame cx cy w h objectness class_id class_score`.
pub fn format_detections(frame: usize, boxes: &[DetectionBox]) -> String {
    let mut s = String::new();
    for b in boxes {
        let _ = writeln!(
            s,
            "{frame} {:.6} {:.6} {:.6} {:.6} {:.6} {} {:.6}",
            b.cx, b.cy, b.w, b.h, b.objectness, b.class_id, b.class_score
        );
    }
    s
}

/// Parses the detection line format into `(frame, box)` pairs. Blank lines
/// and `#` comments are skipped.
pub fn parse_detections(text: &str) -> Result<Vec<(usize, DetectionBox)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let bad = || Error::InvalidArgument(format!("detection line {}: {line:?}", n + 1));
        if fields.len() != 8 {
            return Err(bad());
        }
        let f = |k: usize| fields[k].parse::<f32>().map_err(|_| bad());
        out.push((
            fields[0].parse().map_err(|_| bad())?,
            DetectionBox {
                cx: f(1)?,
                cy: f(2)?,
                w: f(3)?,
                h: f(4)?,
                objectness: f(5)?,
                class_id: fields[6].parse().map_err(|_| bad())?,
                class_score: f(7)?,
            },
        ));
    }
    Ok(out)
}

/// Groups parsed detections into per-frame lists for frames `first..first+count`.
pub fn group_by_frame(items: &[(usize, DetectionBox)], first: usize, count: usize) -> Vec<Vec<DetectionBox>> {
    let mut frames = vec![Vec::new(); count];
    for (f, b) in items {
        if let Some(slot) = f.checked_sub(first).and_then(|k| frames.get_mut(k)) {
            slot.push(*b);
        }
    }
    frames
}
