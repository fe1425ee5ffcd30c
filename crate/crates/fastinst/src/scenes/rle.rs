//! Row-major run-length encoding for binary masks. The first count is the
//! leading run of zeros (possibly 0); runs alternate zero/one.

use crate::error::{Error, Result};

use super::Mask;

pub fn rle_encode(mask: &Mask) -> Vec<u32> {
    let mut counts = Vec::new();
    let mut current = false; // runs start with zeros
    let mut run: u32 = 0;
    for &bit in &mask.data {
        if bit == current {
            run += 1;
        } else {
            counts.push(run);
            current = bit;
            run = 1;
        }
    }
    counts.push(run);
    counts
}

pub fn rle_decode(counts: &[u32], h: usize, w: usize) -> Result<Mask> {
    let total: u64 = counts.iter().map(|&c| c as u64).sum();
    if total != (h * w) as u64 {
        return Err(Error::Dataset(format!(
            "rle: counts sum {total} != {h}x{w}"
        )));
    }
    let mut mask = Mask::zeros(h, w);
    let mut pos = 0usize;
    let mut value = false;
    for &c in counts {
        for _ in 0..c {
            mask.data[pos] = value;
            pos += 1;
        }
        value = !value;
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;
    use rand::Rng;

    #[test]
    fn all_zeros_2x2() {
        let m = Mask::zeros(2, 2);
        assert_eq!(rle_encode(&m), vec![4]);
    }

    #[test]
    fn all_ones_2x2() {
        let m = Mask {
            h: 2,
            w: 2,
            data: vec![true; 4],
        };
        assert_eq!(rle_encode(&m), vec![0, 4]);
    }

    #[test]
    fn decode_rejects_count_sum_mismatch() {
        assert!(rle_decode(&[3], 2, 2).is_err());
        assert!(rle_decode(&[5], 2, 2).is_err());
    }

    #[test]
    fn roundtrip_500_random_masks() {
        for seed in 0..500u64 {
            let mut rng = rng_for(seed, "rle", 0);
            let h = rng.gen_range(1..12);
            let w = rng.gen_range(1..12);
            let density: f64 = rng.gen_range(0.0..1.0);
            let mask = Mask {
                h,
                w,
                data: (0..h * w).map(|_| rng.gen_bool(density)).collect(),
            };
            let counts = rle_encode(&mask);
            let back = rle_decode(&counts, h, w).unwrap();
            assert_eq!(back, mask, "seed {seed}");
        }
    }
}
