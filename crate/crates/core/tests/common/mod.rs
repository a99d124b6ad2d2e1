//! Helpers shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use fastyolo::detector::{encode_targets, AnchorPrior, DetectionBox};
use fastyolo::netdef::{ConvSpec, HeadSpec, LayerSpec, NetworkDescriptor, WeightStore};
use fastyolo::nn::{backward, forward, loss_and_grad, Loss, CLASS_WEIGHT, COORD_WEIGHT, NOOBJ_WEIGHT, OBJ_WEIGHT};
use fastyolo::tensor::{conv2d, maxpool2};
use fastyolo::{Activation, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f32 = 1e-3;

/// `‖a − n‖ / max(‖a‖, ‖n‖)` over one layer's parameters. Per-element
/// ratios are dominated by f32 forward noise on near-zero entries.
pub fn relative_error(analytic: &[f32], numeric: &[f32]) -> f32 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(&a, &n)| (a - n) as f64));
    let scale = norm(&mut analytic.iter().map(|&a| a as f64)).max(norm(&mut numeric.iter().map(|&n| n as f64)));
    if scale == 0.0 {
        0.0
    } else {
        (diff / scale) as f32
    }
}

/// A network, weights, an input and a target for gradient checking.
pub struct GradCase {
    pub name: &'static str,
    pub net: NetworkDescriptor,
    pub weights: WeightStore,
    pub input: Tensor,
    pub target: Tensor,
    pub loss: Loss,
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f32) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

fn random_weights(net: &NetworkDescriptor, rng: &mut ChaCha8Rng) -> WeightStore {
    let mut w = WeightStore::init(net, rng.random());
    let convs: Vec<usize> = net.conv_layers().map(|(i, _)| i).collect();
    for i in convs {
        for b in w.layer_mut(i).unwrap().bias_mut() {
            *b = rng.random_range(-0.2..0.2);
        }
    }
    w
}

/// Random instances covering every layer kind and every smooth activation.
pub fn grad_cases(seed: u64) -> Vec<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::new();

    let net = NetworkDescriptor::new(
        "mixed",
        [3, 8, 8],
        vec![
            LayerSpec::Conv(ConvSpec::new(3, 4, 3).pad(1).activation(Activation::LeakyRelu(0.1))),
            LayerSpec::MaxPool2,
            LayerSpec::Conv(ConvSpec::new(4, 5, 3).stride(2).pad(1).activation(Activation::Tanh)),
            LayerSpec::Pointwise(Activation::Sigmoid),
            LayerSpec::Conv(ConvSpec::new(5, 3, 1)),
        ],
    )
    .unwrap();
    let weights = random_weights(&net, &mut rng);
    let input = random_tensor(&mut rng, vec![3, 8, 8], 1.0);
    let target = random_tensor(&mut rng, net.output_shape().to_vec(), 0.5);
    cases.push(GradCase {
        name: "conv/pool/pointwise, squared error",
        input,
        target,
        net,
        weights,
        loss: Loss::SquaredError,
    });

    let head = HeadSpec {
        grid: 4,
        anchors: 2,
        classes: 2,
        priors: vec![],
    };
    let net = NetworkDescriptor::new(
        "head",
        [2, 8, 8],
        vec![
            LayerSpec::Conv(ConvSpec::new(2, 3, 3).pad(1).activation(Activation::LeakyRelu(0.1))),
            LayerSpec::MaxPool2,
            LayerSpec::Conv(ConvSpec::new(3, head.channels(), 1)),
            LayerSpec::DetectHead(head.clone()),
        ],
    )
    .unwrap();
    let weights = random_weights(&net, &mut rng);
    let anchors = [AnchorPrior::new(1.0, 1.0), AnchorPrior::new(2.0, 1.5)];
    let truth: Vec<DetectionBox> = (0..3)
        .map(|_| {
            DetectionBox::truth(
                rng.random_range(0.05..0.95),
                rng.random_range(0.05..0.95),
                rng.random_range(0.1..0.5),
                rng.random_range(0.1..0.5),
                rng.random_range(0..2),
            )
        })
        .collect();
    cases.push(GradCase {
        name: "detect head, composite loss",
        input: random_tensor(&mut rng, vec![2, 8, 8], 1.0),
        target: encode_targets(&truth, &head, &anchors).unwrap(),
        net,
        weights,
        loss: Loss::DetectorComposite,
    });
    cases
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// The training losses written out again in f64, so the finite differences
/// are not swamped by rounding in the loss sum.
pub fn oracle_loss(loss: Loss, output: &Tensor, target: &Tensor, head: Option<&HeadSpec>) -> f64 {
    let y: Vec<f64> = output.data().iter().map(|&v| v as f64).collect();
    let t: Vec<f64> = target.data().iter().map(|&v| v as f64).collect();
    let Loss::DetectorComposite = loss else {
        return y.iter().zip(&t).map(|(a, b)| (a - b).powi(2)).sum();
    };
    let head = head.expect("composite loss needs a head");
    let plane = head.grid * head.grid;
    let per = 5 + head.classes;
    let mut total = 0.0;
    for a in 0..head.anchors {
        for cell in 0..plane {
            let at = |k: usize| (a * per + k) * plane + cell;
            let obj = sigmoid(y[at(4)]);
            if t[at(4)] < 0.5 {
                total += NOOBJ_WEIGHT as f64 * obj * obj;
                continue;
            }
            for k in 0..2 {
                total += COORD_WEIGHT as f64 * (sigmoid(y[at(k)]) - t[at(k)]).powi(2);
            }
            for k in 2..4 {
                total += COORD_WEIGHT as f64 * (y[at(k)] - t[at(k)]).powi(2);
            }
            total += OBJ_WEIGHT as f64 * (obj - 1.0).powi(2);
            let z: f64 = (0..head.classes).map(|c| y[at(5 + c)].exp()).sum();
            for c in 0..head.classes {
                total += CLASS_WEIGHT as f64 * (y[at(5 + c)].exp() / z - t[at(5 + c)]).powi(2);
            }
        }
    }
    total
}

fn loss_at(case: &GradCase, weights: &WeightStore) -> f64 {
    let y = forward(&case.net, weights, &case.input).unwrap();
    oracle_loss(case.loss, &y, &case.target, case.net.head())
}

/// Which branch every leaky unit and every pooling window takes. Two weight
/// settings with equal patterns lie on the same smooth piece of the loss.
fn switch_pattern(net: &NetworkDescriptor, weights: &WeightStore, input: &Tensor) -> Vec<u8> {
    let mut pattern = Vec::new();
    let mut x = input.clone();
    for (i, layer) in net.layers().iter().enumerate() {
        x = match layer {
            LayerSpec::Conv(spec) => {
                let w = weights.layer(i).unwrap();
                let pre = conv2d(&x, w.kernel(), w.bias(), spec.stride, spec.pad).unwrap();
                if let Activation::LeakyRelu(_) = spec.activation {
                    pattern.extend(pre.data().iter().map(|&v| u8::from(v >= 0.0)));
                }
                pre.map(|v| spec.activation.apply(v))
            }
            LayerSpec::MaxPool2 => {
                let (c, h, w) = x.dims3().unwrap();
                let d = x.data();
                for ch in 0..c {
                    for oy in 0..h / 2 {
                        for ox in 0..w / 2 {
                            let at = |dy: usize, dx: usize| d[ch * h * w + (2 * oy + dy) * w + 2 * ox + dx];
                            let window = [at(0, 0), at(0, 1), at(1, 0), at(1, 1)];
                            let best = window.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                            pattern.push(window.iter().position(|&v| v == best).unwrap() as u8);
                        }
                    }
                }
                maxpool2(&x).unwrap()
            }
            LayerSpec::Pointwise(act) => x.map(|v| act.apply(v)),
            LayerSpec::DetectHead(_) => x,
        };
    }
    pattern
}

/// Per conv layer: the norm-relative error between the analytic gradient
/// and central differences in f64, and how many entries were skipped because
/// the two probes straddle a leaky-unit or pooling switch.
pub fn check_gradients(case: &GradCase) -> Vec<LayerCheck> {
    let (_, grads) = backward(&case.net, &case.weights, &case.input, |y| {
        loss_and_grad(case.loss, y, &case.target, case.net.head())
    })
    .unwrap();
    let mut out = Vec::new();
    for (i, _) in case.net.conv_layers() {
        let (gk, gb) = grads.layers[i].as_ref().unwrap();
        let n_kernel = gk.len();
        let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
        let mut skipped = 0;
        for idx in 0..n_kernel + gb.len() {
            let nudged = |delta: f32| {
                let mut w = case.weights.clone();
                let layer = w.layer_mut(i).unwrap();
                if idx < n_kernel {
                    layer.update_kernel(|k| k[idx] += delta);
                } else {
                    layer.bias_mut()[idx - n_kernel] += delta;
                }
                w
            };
            let (plus, minus) = (nudged(FD_STEP), nudged(-FD_STEP));
            if switch_pattern(&case.net, &plus, &case.input) != switch_pattern(&case.net, &minus, &case.input) {
                skipped += 1;
                continue;
            }
            numeric.push(((loss_at(case, &plus) - loss_at(case, &minus)) / (2.0 * FD_STEP as f64)) as f32);
            analytic.push(if idx < n_kernel { gk.data()[idx] } else { gb[idx - n_kernel] });
        }
        out.push(LayerCheck {
            layer: i,
            entries: n_kernel + gb.len(),
            skipped,
            error: relative_error(&analytic, &numeric),
        });
    }
    out
}

pub struct LayerCheck {
    pub layer: usize,
    pub entries: usize,
    pub skipped: usize,
    pub error: f32,
}
