//! Exact Euclidean distance transform (Felzenszwalb & Huttenlocher's
//! separable lower-envelope algorithm).

use ndarray::{Array2, ArrayView2, Axis};

/// Squared distance from every pixel to the nearest `true` seed.
/// Pixels are `f64::INFINITY` when there are no seeds at all.
pub fn squared_edt(seeds: ArrayView2<'_, bool>) -> Array2<f64> {
    let (h, w) = seeds.dim();
    let mut grid = seeds.mapv(|s| if s { 0.0 } else { f64::INFINITY });
    let n = h.max(w);
    let mut scratch = Scratch::new(n);
    let mut line = vec![0.0; n];
    let mut out = vec![0.0; n];

    for axis in [Axis(0), Axis(1)] {
        for mut lane in grid.lanes_mut(axis) {
            let len = lane.len();
            for (dst, &src) in line.iter_mut().zip(lane.iter()) {
                *dst = src;
            }
            scratch.transform(&line[..len], &mut out[..len]);
            for (dst, &src) in lane.iter_mut().zip(out.iter()) {
                *dst = src;
            }
        }
    }
    grid
}

struct Scratch {
    v: Vec<usize>,
    z: Vec<f64>,
}

impl Scratch {
    fn new(n: usize) -> Self {
        Scratch { v: vec![0; n], z: vec![0.0; n + 1] }
    }

    /// 1-D squared distance transform of sampled function `f`. Infinite
    /// samples never enter the lower envelope.
    fn transform(&mut self, f: &[f64], d: &mut [f64]) {
        let n = f.len();
        let (v, z) = (&mut self.v, &mut self.z);
        let mut k: isize = -1;
        for q in 0..n {
            if !f[q].is_finite() {
                continue;
            }
            let fq = f[q] + (q * q) as f64;
            let mut s = f64::NEG_INFINITY;
            while k >= 0 {
                let p = v[k as usize];
                s = (fq - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
                if s <= z[k as usize] {
                    k -= 1;
                } else {
                    break;
                }
            }
            if k < 0 {
                s = f64::NEG_INFINITY;
            }
            k += 1;
            v[k as usize] = q;
            z[k as usize] = s;
            z[k as usize + 1] = f64::INFINITY;
        }
        if k < 0 {
            d.fill(f64::INFINITY);
            return;
        }
        let mut j = 0usize;
        for (q, dq) in d.iter_mut().enumerate() {
            while z[j + 1] < q as f64 {
                j += 1;
            }
            let p = v[j];
            let diff = q as f64 - p as f64;
            *dq = diff * diff + f[p];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;

    fn brute(seeds: &Array2<bool>) -> Array2<f64> {
        let pts: Vec<(usize, usize)> = seeds.indexed_iter().filter(|(_, &s)| s).map(|(p, _)| p).collect();
        Array2::from_shape_fn(seeds.dim(), |(y, x)| {
            pts.iter()
                .map(|&(py, px)| {
                    let dy = y as f64 - py as f64;
                    let dx = x as f64 - px as f64;
                    dy * dy + dx * dx
                })
                .fold(f64::INFINITY, f64::min)
        })
    }

    #[test]
    fn no_seeds_is_infinite() {
        let d = squared_edt(Array2::from_elem((3, 4), false).view());
        assert!(d.iter().all(|v| v.is_infinite()));
    }

    #[test]
    fn single_row_and_column() {
        let mut s = Array2::from_elem((1, 7), false);
        s[[0, 2]] = true;
        let d = squared_edt(s.view());
        assert_eq!(d.row(0).to_vec(), vec![4.0, 1.0, 0.0, 1.0, 4.0, 9.0, 16.0]);
        let d = squared_edt(s.t());
        assert_eq!(d.column(0).to_vec(), vec![4.0, 1.0, 0.0, 1.0, 4.0, 9.0, 16.0]);
    }

    proptest! {
        #[test]
        fn matches_brute_force(h in 1usize..24, w in 1usize..24, seed in any::<u64>(), density in 0.0f64..0.3) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let s = Array2::from_shape_fn((h, w), |_| rng.random::<f64>() < density);
            prop_assert_eq!(squared_edt(s.view()), brute(&s));
        }
    }
}
