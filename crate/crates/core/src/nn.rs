//! Forward inference, backpropagation and plain SGD over [`NetworkDescriptor`]s.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netdef::{HeadSpec, LayerSpec, NetworkDescriptor, WeightStore};
use crate::tensor::{
    conv2d, conv2d_backward, maxpool2, maxpool2_backward, pointwise, pointwise_backward, sigmoid, Tensor,
};

/// Composite detector loss weights.
pub const COORD_WEIGHT: f32 = 5.0;
pub const OBJ_WEIGHT: f32 = 1.0;
pub const CLASS_WEIGHT: f32 = 1.0;
pub const NOOBJ_WEIGHT: f32 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Loss {
    SquaredError,
    DetectorComposite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: Loss,
    /// Heavy-ball momentum in `[0, 1)`; 0 is plain SGD.
    #[serde(default)]
    pub momentum: f32,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        Ok(())
    }
}

/// Everything the backward pass needs from a forward pass.
struct Trace {
    /// Input of each layer.
    inputs: Vec<Tensor>,
    /// Pre-activation output of conv layers.
    pre: Vec<Option<Tensor>>,
}

fn check_input(net: &NetworkDescriptor, input: &Tensor) -> Result<()> {
    if input.shape() != net.input_shape() {
        return Err(Error::shape("network input", input.shape(), &net.input_shape()));
    }
    Ok(())
}

fn run_layers(net: &NetworkDescriptor, weights: &WeightStore, input: &Tensor, mut trace: Option<&mut Trace>) -> Result<Tensor> {
    check_input(net, input)?;
    weights.validate(net)?;
    let mut x = input.clone();
    for (i, layer) in net.layers().iter().enumerate() {
        let at = |e: Error| Error::layer(i, e.to_string());
        let next = match layer {
            LayerSpec::Conv(conv) => {
                let w = weights.layer(i).ok_or_else(|| Error::layer(i, "missing weights"))?;
                let pre = conv2d(&x, w.kernel(), w.bias(), conv.stride, conv.pad).map_err(at)?;
                let out = pointwise(&pre, conv.activation);
                if let Some(t) = trace.as_deref_mut() {
                    t.pre.push(Some(pre));
                }
                out
            }
            LayerSpec::MaxPool2 => {
                if let Some(t) = trace.as_deref_mut() {
                    t.pre.push(None);
                }
                maxpool2(&x).map_err(at)?
            }
            LayerSpec::Pointwise(act) => {
                if let Some(t) = trace.as_deref_mut() {
                    t.pre.push(None);
                }
                pointwise(&x, *act)
            }
            LayerSpec::DetectHead(_) => {
                if let Some(t) = trace.as_deref_mut() {
                    t.pre.push(None);
                }
                x.clone()
            }
        };
        if let Some(t) = trace.as_deref_mut() {
            t.inputs.push(std::mem::replace(&mut x, next));
        } else {
            x = next;
        }
    }
    Ok(x)
}

/// One deterministic forward pass.
pub fn forward(net: &NetworkDescriptor, weights: &WeightStore, input: &Tensor) -> Result<Tensor> {
    run_layers(net, weights, input, None)
}

/// Parameter gradients aligned with the descriptor's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Option<(Tensor, Vec<f32>)>>,
    /// Gradient with respect to the network input.
    pub input: Tensor,
}

/// Runs a forward pass, then backpropagates `loss_grad(output)`.
pub fn backward(
    net: &NetworkDescriptor,
    weights: &WeightStore,
    input: &Tensor,
    loss_grad: impl FnOnce(&Tensor) -> Result<(f32, Tensor)>,
) -> Result<(f32, Gradients)> {
    let mut trace = Trace {
        inputs: Vec::with_capacity(net.layers().len()),
        pre: Vec::with_capacity(net.layers().len()),
    };
    let output = run_layers(net, weights, input, Some(&mut trace))?;
    let (loss, mut grad) = loss_grad(&output)?;
    if grad.shape() != output.shape() {
        return Err(Error::shape("loss gradient vs output", grad.shape(), output.shape()));
    }
    let mut layers: Vec<Option<(Tensor, Vec<f32>)>> = vec![None; net.layers().len()];
    for (i, layer) in net.layers().iter().enumerate().rev() {
        let x = &trace.inputs[i];
        grad = match layer {
            LayerSpec::Conv(conv) => {
                let pre = trace.pre[i].as_ref().expect("conv pre-activation recorded");
                let g_pre = pointwise_backward(pre, &grad, conv.activation);
                let w = weights.layer(i).expect("validated");
                let g = conv2d_backward(x, w.kernel(), &g_pre, conv.stride, conv.pad, true)?;
                let mut gk = g.kernel;
                if let Some(mask) = w.mask() {
                    for (v, &keep) in gk.data_mut().iter_mut().zip(mask) {
                        if !keep {
                            *v = 0.0;
                        }
                    }
                }
                layers[i] = Some((gk, g.bias));
                g.input.expect("requested")
            }
            LayerSpec::MaxPool2 => maxpool2_backward(x, &grad)?,
            LayerSpec::Pointwise(act) => pointwise_backward(x, &grad, *act),
            LayerSpec::DetectHead(_) => grad,
        };
    }
    Ok((loss, Gradients { layers, input: grad }))
}

/// Per-sample loss and its gradient with respect to the network output.
pub fn loss_and_grad(loss: Loss, output: &Tensor, target: &Tensor, head: Option<&HeadSpec>) -> Result<(f32, Tensor)> {
    if output.shape() != target.shape() {
        return Err(Error::shape("loss target vs output", target.shape(), output.shape()));
    }
    match loss {
        Loss::SquaredError => {
            let mut total = 0.0f32;
            let grad = output
                .data()
                .iter()
                .zip(target.data())
                .map(|(&y, &t)| {
                    let d = y - t;
                    total += d * d;
                    2.0 * d
                })
                .collect();
            Ok((total, Tensor::new(output.shape().to_vec(), grad)?))
        }
        Loss::DetectorComposite => {
            let head = head.ok_or_else(|| Error::InvalidArgument("composite loss needs a detect head".into()))?;
            composite(output, target, head)
        }
    }
}

/// Coordinate, objectness and class squared errors on the responsible slot of
/// each target box, plus a down-weighted objectness penalty everywhere else.
fn composite(output: &Tensor, target: &Tensor, head: &HeadSpec) -> Result<(f32, Tensor)> {
    let expected = [head.channels(), head.grid, head.grid];
    if output.shape() != expected {
        return Err(Error::shape("composite loss output", output.shape(), &expected));
    }
    let plane = head.grid * head.grid;
    let per = 5 + head.classes;
    let y = output.data();
    let t = target.data();
    let mut g = vec![0.0f32; y.len()];
    let mut total = 0.0f32;
    let mut probs = vec![0.0f32; head.classes];
    let mut dprob = vec![0.0f32; head.classes];
    for a in 0..head.anchors {
        for cell in 0..plane {
            let idx = |k: usize| (a * per + k) * plane + cell;
            let obj = sigmoid(y[idx(4)]);
            let dobj = obj * (1.0 - obj);
            if t[idx(4)] < 0.5 {
                total += NOOBJ_WEIGHT * obj * obj;
                g[idx(4)] = NOOBJ_WEIGHT * 2.0 * obj * dobj;
                continue;
            }
            for k in 0..2 {
                let s = sigmoid(y[idx(k)]);
                let d = s - t[idx(k)];
                total += COORD_WEIGHT * d * d;
                g[idx(k)] = COORD_WEIGHT * 2.0 * d * s * (1.0 - s);
            }
            for k in 2..4 {
                let d = y[idx(k)] - t[idx(k)];
                total += COORD_WEIGHT * d * d;
                g[idx(k)] = COORD_WEIGHT * 2.0 * d;
            }
            let d = obj - 1.0;
            total += OBJ_WEIGHT * d * d;
            g[idx(4)] = OBJ_WEIGHT * 2.0 * d * dobj;

            let max = (0..head.classes).map(|c| y[idx(5 + c)]).fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f32;
            for (c, p) in probs.iter_mut().enumerate() {
                *p = (y[idx(5 + c)] - max).exp();
                sum += *p;
            }
            let mut dot = 0.0f32;
            for c in 0..head.classes {
                probs[c] /= sum;
                let d = probs[c] - t[idx(5 + c)];
                total += CLASS_WEIGHT * d * d;
                dprob[c] = CLASS_WEIGHT * 2.0 * d;
                dot += dprob[c] * probs[c];
            }
            for c in 0..head.classes {
                g[idx(5 + c)] = probs[c] * (dprob[c] - dot);
            }
        }
    }
    Ok((total, Tensor::new(output.shape().to_vec(), g)?))
}

/// Mean per-sample loss over a dataset.
pub fn mean_loss(net: &NetworkDescriptor, weights: &WeightStore, dataset: &[(Tensor, Tensor)], loss: Loss) -> Result<f32> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let mut total = 0.0f32;
    for (x, t) in dataset {
        let y = forward(net, weights, x)?;
        total += loss_and_grad(loss, &y, t, net.head())?.0;
    }
    Ok(total / dataset.len() as f32)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochReport {
    /// 1-based.
    pub epoch: usize,
    /// Mean per-sample loss seen during the epoch (pre-update weights).
    pub mean_loss: f32,
}

/// Minibatch SGD with optional momentum. Gradients of masked synapses are dropped,
/// so a pruned synapse stays exactly zero.
pub fn train_sgd(
    net: &NetworkDescriptor,
    weights: &WeightStore,
    dataset: &[(Tensor, Tensor)],
    cfg: &TrainConfig,
) -> Result<WeightStore> {
    train_sgd_with(net, weights, dataset, cfg, |_, _| {})
}

/// [`train_sgd`] with a callback after every epoch.
pub fn train_sgd_with(
    net: &NetworkDescriptor,
    weights: &WeightStore,
    dataset: &[(Tensor, Tensor)],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochReport, &WeightStore),
) -> Result<WeightStore> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("training dataset is empty".into()));
    }
    weights.validate(net)?;
    let out_shape = net.output_shape();
    for (n, (x, t)) in dataset.iter().enumerate() {
        check_input(net, x).map_err(|e| Error::InvalidArgument(format!("sample {n}: {e}")))?;
        if t.shape() != out_shape {
            return Err(Error::shape(format!("sample {n} target vs network output"), t.shape(), &out_shape));
        }
    }
    if cfg.loss == Loss::DetectorComposite && net.head().is_none() {
        return Err(Error::InvalidArgument("composite loss needs a network with a detect head".into()));
    }

    let mut store = weights.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let head = net.head();
    let mut velocity: Vec<Option<(Vec<f32>, Vec<f32>)>> = vec![None; net.layers().len()];
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f32;
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Vec<Option<(Tensor, Vec<f32>)>> = vec![None; net.layers().len()];
            for &n in batch {
                let (x, t) = &dataset[n];
                let (loss, grads) = backward(net, &store, x, |y| loss_and_grad(cfg.loss, y, t, head))?;
                if !loss.is_finite() {
                    return Err(Error::Diverged { epoch, loss });
                }
                epoch_loss += loss;
                for (slot, g) in acc.iter_mut().zip(grads.layers) {
                    let Some((gk, gb)) = g else { continue };
                    match slot {
                        None => *slot = Some((gk, gb)),
                        Some((ak, ab)) => {
                            for (a, v) in ak.data_mut().iter_mut().zip(gk.data()) {
                                *a += v;
                            }
                            for (a, v) in ab.iter_mut().zip(&gb) {
                                *a += v;
                            }
                        }
                    }
                }
            }
            let scale = 1.0 / batch.len() as f32;
            for (i, g) in acc.into_iter().enumerate() {
                let Some((gk, gb)) = g else { continue };
                let (vk, vb) = velocity[i].get_or_insert_with(|| (vec![0.0; gk.len()], vec![0.0; gb.len()]));
                for (v, d) in vk.iter_mut().zip(gk.data()).chain(vb.iter_mut().zip(&gb)) {
                    *v = cfg.momentum * *v + scale * d;
                }
                let w = store.layer_mut(i).expect("conv layer has weights");
                w.update_kernel(|k| {
                    for (p, v) in k.iter_mut().zip(vk.iter()) {
                        *p -= cfg.learning_rate * v;
                    }
                });
                for (p, v) in w.bias_mut().iter_mut().zip(vb.iter()) {
                    *p -= cfg.learning_rate * v;
                }
            }
        }
        let mean = epoch_loss / dataset.len() as f32;
        let finite = store
            .layers()
            .iter()
            .flatten()
            .all(|w| w.kernel().is_finite() && w.bias().iter().all(|b| b.is_finite()));
        if !mean.is_finite() || !finite {
            return Err(Error::Diverged { epoch, loss: mean });
        }
        on_epoch(&EpochReport { epoch, mean_loss: mean }, &store);
    }
    Ok(store)
}
