//! Counter-based random numbers.
//!
//! The generator is Philox4x32-10: a keyed bijection from a 128-bit counter to
//! four 32-bit words. The 64-bit seed is the key, the upper half of the counter
//! is a stream id and the lower half is the block index, so any position of any
//! stream can be produced directly. Known-answer vectors:
//!
//! | counter                             | key                 | output                              |
//! |-------------------------------------|---------------------|-------------------------------------|
//! | `0 0 0 0`                           | `0 0`               | `6627e8d5 e169c58d bc57ac4c 9b00dbd8` |
//! | `ffffffff ×4`                       | `ffffffff ×2`       | `408f276d 41c83b0e a20bc7c6 6d5451fd` |
//! | `243f6a88 85a308d3 13198a2e 03707344` | `a4093822 299f31d0` | `d16cfe09 94fdcceb 5001e420 24126ea1` |
//!
//! Normals use Box–Muller: block `b` yields normals `4b..4b+4`, words 0/1 and
//! 2/3 forming the two uniform pairs. Signs use one bit each, 128 per block.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MUL0: u32 = 0xD251_1F53;
const MUL1: u32 = 0xCD9E_8D57;
const WEYL0: u32 = 0x9E37_79B9;
const WEYL1: u32 = 0xBB67_AE85;

const TWO_POW_32_INV: f64 = 1.0 / 4_294_967_296.0;

/// Raw Philox4x32-10 block function.
pub fn philox4x32(counter: [u32; 4], key: [u32; 2]) -> [u32; 4] {
    let mut c = counter;
    let mut k = key;
    for round in 0..10 {
        if round > 0 {
            k[0] = k[0].wrapping_add(WEYL0);
            k[1] = k[1].wrapping_add(WEYL1);
        }
        let p0 = u64::from(MUL0) * u64::from(c[0]);
        let p1 = u64::from(MUL1) * u64::from(c[2]);
        c = [
            ((p1 >> 32) as u32) ^ c[1] ^ k[0],
            p1 as u32,
            ((p0 >> 32) as u32) ^ c[3] ^ k[1],
            p0 as u32,
        ];
    }
    c
}

/// Folds a list of ids into one stream id (splitmix64 finalizer per step).
pub fn stream_id(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x6A09_E667_F3BC_C909;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

// Kept out of line so every caller runs the same instruction sequence; an
// inlined copy may pair sin and cos differently and disagree in the last bit.
#[inline(never)]
fn box_muller(w0: u32, w1: u32) -> (f64, f64) {
    let u1 = (f64::from(w0) + 1.0) * TWO_POW_32_INV;
    let u2 = f64::from(w1) * TWO_POW_32_INV;
    let r = (-2.0 * u1.ln()).sqrt();
    let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
    (r * c, r * s)
}

/// A position-addressable stream: `(seed, stream)` selects the sequence and
/// every draw is a pure function of its index.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NoiseStream {
    seed: u64,
    stream: u64,
}

impl NoiseStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self { seed, stream }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Child stream for a sub-purpose (layer, example block, ...).
    pub fn derive(&self, tag: u64) -> NoiseStream {
        NoiseStream::new(self.seed, stream_id(&[self.stream, tag]))
    }

    #[inline]
    pub fn block(&self, index: u64) -> [u32; 4] {
        philox4x32(
            [
                index as u32,
                (index >> 32) as u32,
                self.stream as u32,
                (self.stream >> 32) as u32,
            ],
            [self.seed as u32, (self.seed >> 32) as u32],
        )
    }

    /// The standard normal at position `i`.
    #[inline]
    pub fn normal_at(&self, i: u64) -> f64 {
        let w = self.block(i / 4);
        let lane = (i % 4) as usize;
        let (z0, z1) = box_muller(w[lane & !1], w[lane | 1]);
        if lane.is_multiple_of(2) {
            z0
        } else {
            z1
        }
    }

    /// Normals at positions `start..start + out.len()`.
    pub fn fill_normal<T: Scalar>(&self, start: u64, out: &mut [T]) {
        let mut i = 0usize;
        while i < out.len() {
            let pos = start + i as u64;
            let lane = (pos % 4) as usize;
            let w = self.block(pos / 4);
            let (a0, a1) = box_muller(w[0], w[1]);
            let (b0, b1) = box_muller(w[2], w[3]);
            let vals = [a0, a1, b0, b1];
            for v in &vals[lane..] {
                if i == out.len() {
                    break;
                }
                out[i] = T::of(*v);
                i += 1;
            }
        }
    }

    /// Normals at ascending `positions`, one Philox block per distinct block index.
    pub fn gather_normal<T: Scalar>(&self, positions: impl IntoIterator<Item = u64>, out: &mut Vec<T>) {
        let mut cached = u64::MAX;
        let mut vals = [0.0f64; 4];
        for pos in positions {
            let blk = pos / 4;
            if blk != cached {
                let w = self.block(blk);
                let (a0, a1) = box_muller(w[0], w[1]);
                let (b0, b1) = box_muller(w[2], w[3]);
                vals = [a0, a1, b0, b1];
                cached = blk;
            }
            out.push(T::of(vals[(pos % 4) as usize]));
        }
    }

    /// `true` means +1 at bit position `i`.
    #[inline]
    pub fn sign_at(&self, i: u64) -> bool {
        let w = self.block(i / 128);
        let bit = (i % 128) as usize;
        (w[bit / 32] >> (bit % 32)) & 1 == 1
    }

    /// ±1 values at bit positions `start..start + out.len()`.
    pub fn fill_sign<T: Scalar>(&self, start: u64, out: &mut [T]) {
        let (one, neg) = (T::one(), -T::one());
        let mut i = 0usize;
        while i < out.len() {
            let pos = start + i as u64;
            let w = self.block(pos / 128);
            let mut bit = (pos % 128) as usize;
            while bit < 128 && i < out.len() {
                let word = w[bit / 32] >> (bit % 32);
                let take = (32 - bit % 32).min(out.len() - i);
                for (k, o) in out[i..i + take].iter_mut().enumerate() {
                    *o = if (word >> k) & 1 == 1 { one } else { neg };
                }
                bit += take;
                i += take;
            }
        }
    }
}

/// Sequential generator over a [`NoiseStream`]; its whole state is
/// `(seed, stream, word)` so it can be checkpointed and restored exactly.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeededRng {
    noise: NoiseStream,
    word: u64,
}

/// Serializable position of a [`SeededRng`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word: u64,
}

impl SeededRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self {
            noise: NoiseStream::new(seed, stream),
            word: 0,
        }
    }

    pub fn from_state(state: RngState) -> Self {
        Self {
            noise: NoiseStream::new(state.seed, state.stream),
            word: state.word,
        }
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.noise.seed,
            stream: self.noise.stream,
            word: self.word,
        }
    }

    pub fn noise(&self) -> NoiseStream {
        self.noise
    }

    pub fn next_u32(&mut self) -> u32 {
        let w = self.noise.block(self.word / 4)[(self.word % 4) as usize];
        self.word += 1;
        w
    }

    pub fn next_u64(&mut self) -> u64 {
        (u64::from(self.next_u32()) << 32) | u64::from(self.next_u32())
    }

    /// Uniform in `[0, 1)` with 53 bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        ((u128::from(self.next_u64()) * u128::from(n)) >> 64) as u64
    }

    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    fn align_block(&mut self) -> u64 {
        self.word.div_ceil(4)
    }

    pub fn fill_normal<T: Scalar>(&mut self, out: &mut [T]) {
        let block = self.align_block();
        self.noise.fill_normal(block * 4, out);
        self.word = (block + (out.len() as u64).div_ceil(4)) * 4;
    }

    pub fn fill_sign<T: Scalar>(&mut self, out: &mut [T]) {
        let block = self.align_block();
        self.noise.fill_sign(block * 128, out);
        self.word = (block + (out.len() as u64).div_ceil(128)) * 4;
    }
}

/// i.i.d. standard normal tensor.
pub fn sample_normal<T: Scalar>(rng: &mut SeededRng, shape: &[usize]) -> Tensor<T> {
    let mut t = Tensor::zeros(shape);
    rng.fill_normal(t.data_mut());
    t
}

/// i.i.d. uniform ±1 tensor.
pub fn sample_sign<T: Scalar>(rng: &mut SeededRng, shape: &[usize]) -> Tensor<T> {
    let mut t = Tensor::zeros(shape);
    rng.fill_sign(t.data_mut());
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn philox_known_answers() {
        assert_eq!(
            philox4x32([0; 4], [0; 2]),
            [0x6627e8d5, 0xe169c58d, 0xbc57ac4c, 0x9b00dbd8]
        );
        assert_eq!(
            philox4x32([u32::MAX; 4], [u32::MAX; 2]),
            [0x408f276d, 0x41c83b0e, 0xa20bc7c6, 0x6d5451fd]
        );
        assert_eq!(
            philox4x32(
                [0x243f6a88, 0x85a308d3, 0x13198a2e, 0x03707344],
                [0xa4093822, 0x299f31d0]
            ),
            [0xd16cfe09, 0x94fdcceb, 0x5001e420, 0x24126ea1]
        );
    }

    #[test]
    fn fill_matches_positional_access() {
        let s = NoiseStream::new(7, 3);
        let mut buf = vec![0f64; 37];
        s.fill_normal(5, &mut buf);
        for (i, v) in buf.iter().enumerate() {
            assert_eq!(*v, s.normal_at(5 + i as u64));
        }
        let mut signs = vec![0f32; 300];
        s.fill_sign(77, &mut signs);
        for (i, v) in signs.iter().enumerate() {
            assert_eq!(*v > 0.0, s.sign_at(77 + i as u64));
        }
    }

    #[test]
    fn normal_moments() {
        let mut rng = SeededRng::new(42, 0);
        let t: Tensor<f64> = sample_normal(&mut rng, &[1_000_000]);
        let n = t.len() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let var = t.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.005, "mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "var {var}");
    }

    #[test]
    fn sign_moments() {
        let mut rng = SeededRng::new(42, 1);
        let t: Tensor<f32> = sample_sign(&mut rng, &[1_000_000]);
        assert!(t.data().iter().all(|&x| x == 1.0 || x == -1.0));
        let mean = t.data().iter().map(|&x| f64::from(x)).sum::<f64>() / t.len() as f64;
        assert!(mean.abs() < 0.005, "mean {mean}");
    }

    #[test]
    fn same_seed_and_stream_is_bitwise_identical() {
        let a: Tensor<f32> = sample_normal(&mut SeededRng::new(9, 4), &[3, 5]);
        let b: Tensor<f32> = sample_normal(&mut SeededRng::new(9, 4), &[3, 5]);
        assert_eq!(a.data(), b.data());
        let c: Tensor<f32> = sample_normal(&mut SeededRng::new(9, 5), &[3, 5]);
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn distinct_streams_are_uncorrelated() {
        let n = 200_000;
        let a = NoiseStream::new(1, 10);
        let b = NoiseStream::new(1, 11);
        let mut xa = vec![0f64; n];
        let mut xb = vec![0f64; n];
        a.fill_normal(0, &mut xa);
        b.fill_normal(0, &mut xb);
        let corr = xa.iter().zip(&xb).map(|(x, y)| x * y).sum::<f64>() / n as f64;
        // stderr of the product mean is 1/sqrt(n)
        assert!(corr.abs() < 4.0 / (n as f64).sqrt(), "corr {corr}");
    }

    #[test]
    fn state_round_trip_resumes_sequence() {
        let mut rng = SeededRng::new(3, 8);
        rng.next_u32();
        let mut buf = vec![0f32; 5];
        rng.fill_normal(&mut buf);
        let saved = rng.state();
        let expect = rng.next_u64();
        assert_eq!(SeededRng::from_state(saved).next_u64(), expect);
    }

    #[test]
    fn below_stays_in_range() {
        let mut rng = SeededRng::new(0, 0);
        for n in [1u64, 2, 3, 10, 1000] {
            for _ in 0..100 {
                assert!(rng.below(n) < n);
            }
        }
    }
}
