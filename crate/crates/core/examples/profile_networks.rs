//! Parameter and FLOP accounting for the bundled network descriptors.

use fastyolo::netdef::{bundled, count_flops, count_params, profile_layers};

pub fn main() -> fastyolo::Result<()> {
    for net in [bundled::tiny_detector(), bundled::darknet19(), bundled::yolov2_voc(), bundled::vgg16()] {
        let flops = count_flops(&net, net.input_shape())?;
        println!(
            "{:<14} input {:?}  params {:>11}  flops {:>8.3}e9",
            net.name(),
            net.input_shape(),
            count_params(&net, None),
            flops as f64 / 1e9
        );
    }

    let vgg = bundled::vgg16();
    let heaviest = profile_layers(&vgg, [3, 224, 224], None)?
        .into_iter()
        .max_by_key(|l| l.flops)
        .expect("vgg16 has layers");
    println!("heaviest VGG-16 layer: #{} {} {:?}, {} flops", heaviest.index, heaviest.kind, heaviest.output_shape, heaviest.flops);

    // the same network at twice the resolution
    println!("vgg16 at 448: {:.3}e9 flops", count_flops(&vgg, [3, 448, 448])? as f64 / 1e9);
    Ok(())
}
