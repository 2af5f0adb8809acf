//! The BTSF container: magic + version + JSON directory + raw f32 payload,
//! with canonical serialization so write(read(bytes)) is bit-identical.

use serde_json::json;
use spikeformer::checkpoint::Container;
use spikeformer::tensor::rand_uniform;
use spikeformer::Rng;

fn main() -> spikeformer::Result<()> {
    let mut rng = Rng::new(3);
    let mut c = Container::new(json!({
        "model.mode": "ann",
        "model.bits": 4,
        "model.d_model": 8
    }));
    c.insert("embed", rand_uniform(&mut rng, &[8, 4], -1.0, 1.0)?)?;
    c.insert("head.w", rand_uniform(&mut rng, &[4, 8], -1.0, 1.0)?)?;
    c.insert("head.b", rand_uniform(&mut rng, &[4], -0.1, 0.1)?)?;

    let bytes = c.to_bytes()?;
    println!("container: {} tensors, {} bytes total", c.names().len(), bytes.len());
    println!("header: magic {:?}, version {}", &bytes[..4], u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]));

    let back = Container::from_bytes(&bytes)?;
    let again = back.to_bytes()?;
    println!("round trip bit-identical: {}", bytes == again);
    println!("tensor directory: {:?}", back.names());

    // Corruption is rejected with a named error.
    let mut bad = bytes.clone();
    bad[0] = b'X';
    println!("bad magic -> {}", Container::from_bytes(&bad).unwrap_err());
    let truncated = &bytes[..bytes.len() - 3];
    println!("truncated -> {}", Container::from_bytes(truncated).unwrap_err());
    Ok(())
}
