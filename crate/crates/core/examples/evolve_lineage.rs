//! Two generations of evolutionary compression on a small conv regressor.

use fastyolo::evolve::{evolve_generations, EnvironmentalFactor, Task};
use fastyolo::netdef::{ConvSpec, LayerSpec, NetworkDescriptor, WeightStore};
use fastyolo::nn::{mean_loss, train_sgd, Loss, TrainConfig};
use fastyolo::{Activation, Tensor};

pub fn main() -> fastyolo::Result<()> {
    let net = NetworkDescriptor::new(
        "toy",
        [2, 8, 8],
        vec![
            LayerSpec::Conv(ConvSpec::new(2, 12, 3).pad(1).activation(Activation::LeakyRelu(0.1))),
            LayerSpec::Conv(ConvSpec::new(12, 12, 3).pad(1).activation(Activation::LeakyRelu(0.1))),
            LayerSpec::Conv(ConvSpec::new(12, 1, 1)),
        ],
    )?;
    // target: a blurred difference of the two input channels
    let data: Vec<(Tensor, Tensor)> = (0..24)
        .map(|n| {
            let x = Tensor::from_fn(vec![2, 8, 8], |i| (((i * 37 + n * 11) % 17) as f32) / 17.0);
            let t = Tensor::from_fn(vec![1, 8, 8], |p| 0.5 * (x.data()[p] - x.data()[64 + p]));
            (x, t)
        })
        .collect();
    let cfg = TrainConfig {
        learning_rate: 0.0005,
        epochs: 60,
        batch_size: 4,
        seed: 1,
        loss: Loss::SquaredError,
        momentum: 0.9,
    };
    let ancestor = train_sgd(&net, &WeightStore::init(&net, 1), &data, &cfg)?;
    let metric = |w: &WeightStore| mean_loss(&net, w, &data, Loss::SquaredError).map(f64::from);
    let task = Task {
        train: &data,
        metric: &metric,
    };
    let retrain = TrainConfig { epochs: 30, ..cfg };
    let lineage = evolve_generations(&net, &ancestor, &task, 2, &EnvironmentalFactor::Uniform(1.0), &retrain, 5, |g| {
        println!(
            "generation {}: {:>5} params (expected {:>8}), loss {:.5}",
            g.generation,
            g.params,
            g.expected_params.map_or("-".to_string(), |e| format!("{e:.1}")),
            g.metric
        )
    })?;
    let dir = tempfile::tempdir().map_err(|e| fastyolo::Error::io("tempdir", e))?;
    lineage.save(dir.path())?;
    let mut files: Vec<String> = std::fs::read_dir(dir.path())
        .map_err(|e| fastyolo::Error::io(dir.path(), e))?
        .filter_map(|e| e.ok().map(|e| e.file_name().to_string_lossy().into_owned()))
        .collect();
    files.sort();
    println!("saved: {}", files.join(" "));
    Ok(())
}
