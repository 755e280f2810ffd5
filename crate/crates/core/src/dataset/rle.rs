//! Uncompressed COCO run-length encoding.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::InstanceMask;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RleError {
    #[error("counts sum to {got}, expected {expected}")]
    CountSum { expected: u64, got: u64 },
    #[error("mask size must be at least 1x1, got {0}x{1}")]
    Empty(u32, u32),
}

/// `size` is `[height, width]`; `counts` alternate zero-runs and one-runs in
/// column-major order, starting with a (possibly empty) zero-run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    pub size: [u32; 2],
    pub counts: Vec<u64>,
}

pub fn rle_encode(mask: &InstanceMask) -> RleMask {
    let (w, h) = mask.dims();
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u64;
    for x in 0..w {
        for y in 0..h {
            if mask.get(x, y) != current {
                counts.push(run);
                run = 0;
                current = !current;
            }
            run += 1;
        }
    }
    counts.push(run);
    RleMask { size: [h, w], counts }
}

pub fn rle_decode(rle: &RleMask) -> Result<InstanceMask, RleError> {
    let [h, w] = rle.size;
    if w == 0 || h == 0 {
        return Err(RleError::Empty(w, h));
    }
    let expected = w as u64 * h as u64;
    let got = rle
        .counts
        .iter()
        .try_fold(0u64, |acc, c| acc.checked_add(*c))
        .unwrap_or(u64::MAX);
    if got != expected {
        return Err(RleError::CountSum { expected, got });
    }
    let mut mask = InstanceMask::new(w, h);
    let mut pos = 0u64;
    for (i, &c) in rle.counts.iter().enumerate() {
        if i % 2 == 1 {
            for p in pos..pos + c {
                mask.set((p / h as u64) as u32, (p % h as u64) as u32, true);
            }
        }
        pos += c;
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Column-major scan written independently of the encoder.
    fn oracle(mask: &InstanceMask) -> Vec<u64> {
        let (w, h) = mask.dims();
        let flat: Vec<bool> = (0..w * h).map(|i| mask.get(i / h, i % h)).collect();
        let mut counts = vec![];
        let mut i = 0;
        let mut want = false;
        while i < flat.len() || counts.is_empty() {
            let start = i;
            while i < flat.len() && flat[i] == want {
                i += 1;
            }
            counts.push((i - start) as u64);
            want = !want;
        }
        counts
    }

    #[test]
    fn fixtures() {
        assert_eq!(rle_encode(&InstanceMask::new(2, 2)).counts, vec![4]);
        assert_eq!(rle_encode(&InstanceMask::from_fn(2, 2, |_, _| true)).counts, vec![0, 4]);
        let centre = InstanceMask::from_fn(3, 3, |x, y| (x, y) == (1, 1));
        assert_eq!(rle_encode(&centre).counts, vec![4, 1, 4]);
        assert_eq!(rle_encode(&centre).counts, oracle(&centre));
        let decoded = rle_decode(&RleMask {
            size: [3, 3],
            counts: vec![4, 1, 4],
        })
        .unwrap();
        assert_eq!(decoded, centre);
    }

    #[test]
    fn column_major_order() {
        // width 3, height 2: bit at (x=1, y=0) is the third pixel in column order
        let m = InstanceMask::from_fn(3, 2, |x, y| (x, y) == (1, 0));
        assert_eq!(
            rle_encode(&m),
            RleMask {
                size: [2, 3],
                counts: vec![2, 1, 3]
            }
        );
    }

    #[test]
    fn wrong_sum_is_rejected() {
        let err = rle_decode(&RleMask {
            size: [3, 3],
            counts: vec![4, 1, 3],
        })
        .unwrap_err();
        assert_eq!(err, RleError::CountSum { expected: 9, got: 8 });
        assert!(rle_decode(&RleMask {
            size: [0, 3],
            counts: vec![]
        })
        .is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(500))]
        #[test]
        fn round_trip(w in 1u32..64, h in 1u32..64, density in 0.0f64..1.0, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let m = InstanceMask::from_fn(w, h, |_, _| rng.random::<f64>() < density);
            let rle = rle_encode(&m);
            prop_assert_eq!(rle.counts.iter().sum::<u64>(), (w * h) as u64);
            prop_assert_eq!(&rle.counts, &oracle(&m));
            prop_assert_eq!(rle_decode(&rle).unwrap(), m);
        }
    }
}
