//! Convolution, pooling and activations on small hand-checkable tensors.

use fastyolo::tensor::{conv2d, maxpool2, pointwise};
use fastyolo::{Activation, Tensor};

pub fn main() -> fastyolo::Result<()> {
    // 3x3 ramp, 2x2 box filter, stride 1, no padding
    let x = Tensor::from_fn(vec![1, 3, 3], |i| i as f32);
    let k = Tensor::full(vec![1, 1, 2, 2], 1.0);
    let y = conv2d(&x, &k, &[0.5], 1, 0)?;
    println!("box filter: {:?} -> {:?}", y.shape(), y.data());
    assert_eq!(y.data(), &[8.5, 12.5, 20.5, 24.5]);

    // same filter with padding 1 and stride 2
    let y = conv2d(&x, &k, &[0.0], 2, 1)?;
    println!("padded, stride 2: {:?} -> {:?}", y.shape(), y.data());

    let pooled = maxpool2(&Tensor::from_fn(vec![1, 4, 4], |i| ((i * 7) % 16) as f32))?;
    println!("maxpool2: {:?}", pooled.data());

    let v = Tensor::new(vec![4], vec![-2.0, -0.5, 0.0, 3.0])?;
    for act in [Activation::LeakyRelu(0.1), Activation::Sigmoid, Activation::Clamp01] {
        println!("{:<16} {:?}", act.name(), pointwise(&v, act).data());
    }
    Ok(())
}
