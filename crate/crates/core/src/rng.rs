//! Counter-based, splittable random streams.
//!
//! Every stream is addressed by a key (a short list of 64-bit words, e.g.
//! `[base_seed, n, c.to_bits(), replicate]`) plus a tag. The key is mixed into a
//! ChaCha8 seed and the tag selects the ChaCha stream, so any cell or replicate
//! can be regenerated independently of execution order or thread count.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

/// Stream tags. Distinct tags under the same key give independent streams.
pub mod tag {
    pub const DESIGN: u64 = 1;
    pub const NOISE: u64 = 2;
    pub const MC_FS: u64 = 3;
    pub const MC_GCV: u64 = 4;
    pub const MC: u64 = 5;
    pub const RETRY: u64 = 6;
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds a key into a single 64-bit seed.
pub fn derive_seed(words: &[u64]) -> u64 {
    let mut acc = 0x6a09_e667_f3bc_c908u64;
    for &w in words {
        acc = splitmix64(acc ^ splitmix64(w));
    }
    acc
}

/// A keyed random stream producing uniforms on (0,1) and standard normals by
/// inversion.
pub struct Stream {
    rng: ChaCha8Rng,
}

impl Stream {
    pub fn new(key: &[u64], tag: u64) -> Self {
        let mut seed = [0u8; 32];
        let mut s = derive_seed(key);
        for chunk in seed.chunks_mut(8) {
            s = splitmix64(s);
            chunk.copy_from_slice(&s.to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(tag);
        Stream { rng }
    }

    /// Uniform on the open interval (0,1), 53-bit resolution.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        ((self.rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    #[inline]
    pub fn normal(&mut self) -> f64 {
        std_normal_quantile(self.uniform())
    }

    pub fn fill_uniform(&mut self, out: &mut [f64]) {
        for v in out.iter_mut() {
            *v = self.uniform();
        }
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for v in out.iter_mut() {
            *v = self.normal();
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }
}

/// Standard normal quantile function.
pub fn std_normal_quantile(p: f64) -> f64 {
    thread_local! {
        static STD: Normal = Normal::new(0.0, 1.0).expect("unit normal");
    }
    STD.with(|d| d.inverse_cdf(p))
}
