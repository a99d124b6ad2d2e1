//! Desk-scale detector training: the bundled tiny detector fitted on
//! synthetic rectangles, with anchors clustered from the training truth.

use serde::{Deserialize, Serialize};

use crate::detector::{encode_targets, evaluate_mean_best_iou, kmeans_anchors, AnchorPrior};
use crate::error::{Error, Result};
use crate::netdef::{bundled, NetworkDescriptor, WeightStore};
use crate::nn::{train_sgd_with, EpochReport, Loss, TrainConfig};
use crate::pipeline::Detector;
use crate::synth::{still_images, SyntheticVideo};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct TinyTrainConfig {
    pub train_frames: usize,
    pub eval_frames: usize,
    pub epochs: usize,
    pub learning_rate: f32,
    pub batch_size: usize,
    pub momentum: f32,
    pub seed: u64,
    pub obj_threshold: f32,
    pub nms_threshold: f32,
}

impl Default for TinyTrainConfig {
    fn default() -> Self {
        Self {
            train_frames: 500,
            eval_frames: 100,
            epochs: 25,
            learning_rate: 0.001,
            batch_size: 8,
            momentum: 0.9,
            seed: 7,
            obj_threshold: 0.3,
            nms_threshold: 0.45,
        }
    }
}

impl TinyTrainConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            loss: Loss::DetectorComposite,
            momentum: self.momentum,
        }
    }
}

/// Training and held-out images for a config; the two sets use unrelated
/// seeds.
pub fn datasets(cfg: &TinyTrainConfig) -> (SyntheticVideo, SyntheticVideo) {
    let [_, h, w] = bundled::tiny_detector().input_shape();
    (
        still_images(cfg.train_frames, w, h, cfg.seed),
        still_images(cfg.eval_frames, w, h, cfg.seed ^ 0x5E_ED0F_E7A1),
    )
}

/// k-means anchors in grid-cell units from every truth box of a video.
pub fn cluster_anchors(video: &SyntheticVideo, net: &NetworkDescriptor, seed: u64) -> Result<Vec<AnchorPrior>> {
    let head = net
        .head()
        .ok_or_else(|| Error::InvalidArgument("network has no detect head".into()))?;
    let s = head.grid as f32;
    let boxes: Vec<(f32, f32)> = video.truth.iter().flatten().map(|b| (b.w * s, b.h * s)).collect();
    kmeans_anchors(&boxes, head.anchors, seed)
}

/// `(input, target)` pairs for the composite loss.
pub fn training_pairs(video: &SyntheticVideo, net: &NetworkDescriptor, anchors: &[AnchorPrior]) -> Result<Vec<(Tensor, Tensor)>> {
    let head = net
        .head()
        .ok_or_else(|| Error::InvalidArgument("network has no detect head".into()))?;
    video
        .frames
        .iter()
        .zip(&video.truth)
        .map(|(f, t)| Ok((f.pixels().clone(), encode_targets(t, head, anchors)?)))
        .collect()
}

/// Mean best IOU of a detector over a labelled video.
pub fn evaluate(detector: &Detector, video: &SyntheticVideo) -> Result<f64> {
    let preds = video.frames.iter().map(|f| detector.detect(f)).collect::<Result<Vec<_>>>()?;
    evaluate_mean_best_iou(&preds, &video.truth)
}

#[derive(Debug, Clone)]
pub struct TinyModel {
    pub detector: Detector,
    /// Mean best IOU on the held-out images.
    pub held_out_iou: f64,
    pub epoch_losses: Vec<f32>,
}

pub fn train_tiny(cfg: &TinyTrainConfig) -> Result<TinyModel> {
    train_tiny_with(cfg, |_| {})
}

/// [`train_tiny`] with a progress callback per epoch.
pub fn train_tiny_with(cfg: &TinyTrainConfig, mut on_epoch: impl FnMut(&EpochReport)) -> Result<TinyModel> {
    if cfg.train_frames == 0 || cfg.eval_frames == 0 {
        return Err(Error::InvalidArgument("train-tiny needs at least one training and one held-out frame".into()));
    }
    let (train, held_out) = datasets(cfg);
    let base = bundled::tiny_detector();
    let anchors = cluster_anchors(&train, &base, cfg.seed)?;
    let net = base.with_priors(anchors.clone())?;
    let pairs = training_pairs(&train, &net, &anchors)?;
    let init = WeightStore::init(&net, cfg.seed);
    let mut losses = Vec::with_capacity(cfg.epochs);
    let weights = train_sgd_with(&net, &init, &pairs, &cfg.train_config(), |r, _| {
        losses.push(r.mean_loss);
        on_epoch(r);
    })?;
    let detector = Detector::new(net, weights, anchors, cfg.obj_threshold, cfg.nms_threshold)?;
    let held_out_iou = evaluate(&detector, &held_out)?;
    Ok(TinyModel {
        detector,
        held_out_iou,
        epoch_losses: losses,
    })
}
