//! Reference architectures shipped as descriptor-only FNET files.

use super::{from_bytes, NetworkDescriptor};

const TINY_DETECTOR: &str = include_str!("../../data/tiny_detector.fnet");
const YOLOV2_VOC: &str = include_str!("../../data/yolov2_voc.fnet");
const DARKNET19: &str = include_str!("../../data/darknet19.fnet");
const VGG16: &str = include_str!("../../data/vgg16.fnet");

fn parse(text: &str) -> NetworkDescriptor {
    from_bytes(text.as_bytes()).expect("bundled descriptor parses").0
}

/// 3×96×96 input, four conv3x3+maxpool blocks (8/16/32/64 channels), a 1×1
/// conv into a 6×6 grid with 2 anchors and 1 class.
pub fn tiny_detector() -> NetworkDescriptor {
    parse(TINY_DETECTOR)
}

/// Darknet-19 backbone with the 20-class, 5-anchor VOC head at 416×416.
pub fn yolov2_voc() -> NetworkDescriptor {
    parse(YOLOV2_VOC)
}

/// Darknet-19 classifier (global average pool omitted).
pub fn darknet19() -> NetworkDescriptor {
    parse(DARKNET19)
}

/// VGG-16 with its fully-connected layers expressed as convolutions.
pub fn vgg16() -> NetworkDescriptor {
    parse(VGG16)
}

/// Looks up a bundled descriptor by name (`tiny`, `yolov2-voc`, `darknet19`, `vgg16`).
pub fn by_name(name: &str) -> Option<NetworkDescriptor> {
    Some(match name {
        "tiny" | "tiny-detector" => tiny_detector(),
        "yolov2-voc" | "yolov2" => yolov2_voc(),
        "darknet19" | "darknet-19" => darknet19(),
        "vgg16" | "vgg-16" => vgg16(),
        _ => return None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netdef::{count_flops, count_params};

    #[test]
    fn all_bundled_parse() {
        for name in ["tiny", "yolov2-voc", "darknet19", "vgg16"] {
            assert!(by_name(name).is_some(), "{name}");
        }
    }

    #[test]
    fn tiny_detector_shape() {
        let net = tiny_detector();
        assert_eq!(net.output_shape(), [12, 6, 6]);
        assert_eq!(count_params(&net, None), 224 + 1168 + 4640 + 18496 + 780);
    }

    #[test]
    fn yolov2_head_grid() {
        let net = yolov2_voc();
        assert_eq!(net.output_shape(), [125, 13, 13]);
        assert_eq!(count_params(&net, None), 48_252_925);
    }

    #[test]
    fn vgg16_flops_near_reference() {
        let flops = count_flops(&vgg16(), [3, 224, 224]).unwrap() as f64;
        assert!((flops / 30.69e9 - 1.0).abs() < 0.02, "{flops}");
    }
}
