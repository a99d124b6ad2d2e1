//! Saving a masked network to FNET v1 and reading it back.

use fastyolo::netdef::{bundled, count_params, from_bytes, to_bytes, WeightStore};

pub fn main() -> fastyolo::Result<()> {
    let net = bundled::tiny_detector();
    let mut weights = WeightStore::init(&net, 1);

    // prune every other synapse of the first conv layer
    let first = weights.layer_mut(0).expect("first layer is a conv");
    let mask = (0..first.kernel().len()).map(|i| i % 2 == 0).collect();
    first.set_mask(mask)?;

    let bytes = to_bytes(&net, Some(&weights))?;
    let header_end = bytes.windows(8).position(|w| w == b"WEIGHTS\n").unwrap_or(bytes.len());
    println!("{}", String::from_utf8_lossy(&bytes[..header_end]));

    let (back, store) = from_bytes(&bytes)?;
    let store = store.expect("weights were saved");
    assert_eq!(back, net);
    assert_eq!(store, weights);
    println!(
        "{} bytes; {} of {} params live after pruning",
        bytes.len(),
        count_params(&back, Some(&store)),
        count_params(&back, None)
    );

    let mut broken = bytes.clone();
    broken[0] = b'X';
    println!("corrupted magic: {}", from_bytes(&broken).unwrap_err());
    Ok(())
}
