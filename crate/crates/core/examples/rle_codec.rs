//! Run-length encoding: our row-major runs and COCO's compressed strings.
//!
//! cargo run --example rle_codec

use clickseg::data::{decode_coco_string, encode_coco_string, Rle};
use ndarray::Array2;

fn main() -> anyhow::Result<()> {
    let mask = Array2::from_shape_fn((6, 8), |(y, x)| (1..5).contains(&y) && (2..7).contains(&x) && !(y == 2 && x == 4));
    let rle = Rle::encode(mask.view());
    println!("{}x{} mask, area {}", rle.height(), rle.width(), rle.area());
    assert_eq!(rle.decode()?, mask);

    // COCO stores runs column-major; the codec transposes on the way in and out.
    let counts = rle.to_coco_counts()?;
    let packed = encode_coco_string(&counts);
    println!("COCO counts {counts:?} -> {packed:?}");
    let back = Rle::from_coco_string(6, 8, &packed)?;
    assert_eq!(decode_coco_string(&packed)?, counts);
    assert_eq!(back.decode()?, mask);
    println!("round trip ok");
    Ok(())
}
