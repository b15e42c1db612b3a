//! Run-length encoding of binary masks.
//!
//! Counts alternate background/foreground and always start with a
//! background run (possibly zero). Pixels are visited in row-major order.
//! COCO annotation files store counts in column-major order; the
//! `from_coco_*` constructors transpose on the way in.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::DataError;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rle {
    /// `[height, width]`
    pub size: [usize; 2],
    pub counts: Vec<u32>,
}

impl Rle {
    pub fn encode(mask: ArrayView2<'_, bool>) -> Self {
        let (h, w) = mask.dim();
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u32;
        for &v in mask.iter() {
            if v != current {
                counts.push(run);
                run = 0;
                current = v;
            }
            run += 1;
        }
        counts.push(run);
        Rle { size: [h, w], counts }
    }

    /// An all-background mask.
    pub fn empty(height: usize, width: usize) -> Self {
        Rle {
            size: [height, width],
            counts: vec![(height * width) as u32],
        }
    }

    pub fn height(&self) -> usize {
        self.size[0]
    }

    pub fn width(&self) -> usize {
        self.size[1]
    }

    /// Number of foreground pixels.
    pub fn area(&self) -> usize {
        self.counts.iter().skip(1).step_by(2).map(|&c| c as usize).sum()
    }

    pub fn decode(&self) -> Result<Array2<bool>, DataError> {
        let (h, w) = (self.height(), self.width());
        let total: usize = self.counts.iter().map(|&c| c as usize).sum();
        if total != h * w {
            return Err(DataError::RleLength {
                expected: h * w,
                actual: total,
            });
        }
        let mut flat = Vec::with_capacity(h * w);
        for (i, &c) in self.counts.iter().enumerate() {
            flat.extend(std::iter::repeat_n(i % 2 == 1, c as usize));
        }
        Ok(Array2::from_shape_vec((h, w), flat).expect("length checked above"))
    }

    /// Build from COCO uncompressed counts (column-major).
    pub fn from_coco_counts(height: usize, width: usize, counts: &[u32]) -> Result<Self, DataError> {
        let column_major = Rle {
            size: [width, height],
            counts: counts.to_vec(),
        };
        let transposed = column_major.decode()?;
        Ok(Rle::encode(transposed.t()))
    }

    /// Build from the COCO compressed string form (column-major).
    pub fn from_coco_string(height: usize, width: usize, s: &str) -> Result<Self, DataError> {
        let counts = decode_coco_string(s)?;
        Self::from_coco_counts(height, width, &counts)
    }

    /// Counts in COCO's column-major order.
    pub fn to_coco_counts(&self) -> Result<Vec<u32>, DataError> {
        let mask = self.decode()?;
        Ok(Rle::encode(mask.t()).counts)
    }
}

/// Decode pycocotools' LEB128-like count string.
pub fn decode_coco_string(s: &str) -> Result<Vec<u32>, DataError> {
    let bytes = s.as_bytes();
    let mut counts: Vec<i64> = Vec::new();
    let mut p = 0;
    while p < bytes.len() {
        let mut x: i64 = 0;
        let mut k = 0;
        let mut more = true;
        while more {
            let Some(&b) = bytes.get(p) else {
                return Err(DataError::RleString("truncated count".into()));
            };
            if !(48..48 + 64).contains(&b) {
                return Err(DataError::RleString(format!("invalid byte {b:#x} at {p}")));
            }
            let c = (b - 48) as i64;
            x |= (c & 0x1f) << (5 * k);
            more = c & 0x20 != 0;
            p += 1;
            k += 1;
            if !more && (c & 0x10) != 0 {
                x |= -1i64 << (5 * k);
            }
        }
        let m = counts.len();
        if m > 2 {
            x += counts[m - 2];
        }
        counts.push(x);
    }
    counts
        .into_iter()
        .map(|c| u32::try_from(c).map_err(|_| DataError::RleString(format!("negative count {c}"))))
        .collect()
}

/// Encode counts into pycocotools' string form.
pub fn encode_coco_string(counts: &[u32]) -> String {
    let mut out = Vec::new();
    for (i, &c) in counts.iter().enumerate() {
        let mut x = c as i64;
        if i > 2 {
            x -= counts[i - 2] as i64;
        }
        loop {
            let mut c = x & 0x1f;
            x >>= 5;
            let more = if c & 0x10 != 0 { x != -1 } else { x != 0 };
            if more {
                c |= 0x20;
            }
            out.push((c + 48) as u8);
            if !more {
                break;
            }
        }
    }
    String::from_utf8(out).expect("ascii")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn starts_with_background_run() {
        let m = array![[true, true], [false, true]];
        let rle = Rle::encode(m.view());
        assert_eq!(rle.counts, vec![0, 2, 1, 1]);
        assert_eq!(rle.area(), 3);
        assert_eq!(rle.decode().unwrap(), m);
    }

    #[test]
    fn rejects_wrong_total() {
        let rle = Rle { size: [2, 2], counts: vec![1, 2] };
        assert!(matches!(rle.decode(), Err(DataError::RleLength { .. })));
    }

    #[test]
    fn coco_column_major_is_transposed() {
        // 2x3 mask, foreground at (0,1) and (1,1): column-major counts [2,2,2].
        let rle = Rle::from_coco_counts(2, 3, &[2, 2, 2]).unwrap();
        let m = rle.decode().unwrap();
        assert_eq!(m, array![[false, true, false], [false, true, false]]);
        assert_eq!(rle.to_coco_counts().unwrap(), vec![2, 2, 2]);
    }

    #[test]
    fn coco_string_codec() {
        // Single-chunk counts encode as one char each: c + 48.
        assert_eq!(encode_coco_string(&[2, 2, 2]), "222");
        assert_eq!(decode_coco_string("222").unwrap(), vec![2, 2, 2]);
        let counts = vec![100, 3, 250, 7, 90, 1, 40];
        assert_eq!(decode_coco_string(&encode_coco_string(&counts)).unwrap(), counts);
    }

    proptest! {
        #[test]
        fn roundtrip(h in 1usize..=64, w in 1usize..=64, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let density: f64 = rng.random();
            let m = Array2::from_shape_fn((h, w), |_| rng.random::<f64>() < density);
            let rle = Rle::encode(m.view());
            prop_assert_eq!(rle.area(), m.iter().filter(|&&v| v).count());
            prop_assert_eq!(rle.decode().unwrap(), m);
        }

        #[test]
        fn coco_string_roundtrip(counts in proptest::collection::vec(0u32..5000, 1..40)) {
            prop_assert_eq!(decode_coco_string(&encode_coco_string(&counts)).unwrap(), counts);
        }
    }
}
