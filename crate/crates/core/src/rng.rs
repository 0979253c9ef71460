//! Named, splittable random streams.
//!
//! Every consumer derives its own generator from the run seed plus a path of
//! labels, e.g. `("train", task, "shuffle")`. Two paths never share draws, so
//! adding a consumer (or a method) leaves every other stream untouched.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub type Rng = ChaCha8Rng;

/// A seed plus a label path; `child` extends the path, `rng` materializes it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedStream {
    key: u64,
}

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        Self {
            key: splitmix(seed ^ 0x6e73_7032_5f72_6e67),
        }
    }

    pub fn child(&self, label: &str) -> Self {
        let mut h = self.key;
        for b in label.bytes() {
            h = splitmix(h ^ u64::from(b));
        }
        Self { key: splitmix(h) }
    }

    pub fn index(&self, i: u64) -> Self {
        Self {
            key: splitmix(self.key ^ splitmix(i.wrapping_add(0x9e37_79b9))),
        }
    }

    pub fn rng(&self) -> Rng {
        ChaCha8Rng::seed_from_u64(self.key)
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn normal_vec(rng: &mut Rng, n: usize, std: f64) -> Vec<f64> {
    let dist = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| dist.sample(rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let root = SeedStream::new(7);
        let a: u64 = root.child("train").index(1).rng().gen();
        let b: u64 = root.child("train").index(1).rng().gen();
        let c: u64 = root.child("train").index(2).rng().gen();
        let d: u64 = root.child("eval").index(1).rng().gen();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
        assert_ne!(SeedStream::new(7), SeedStream::new(8));
    }
}
