use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Counter-based random stream identified by `(seed, stream_id)`.
///
/// Backed by ChaCha8, whose keystream is addressed by key, stream and word
/// position, so any stream can be reproduced bit for bit on any platform.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        Self { seed, stream_id, inner }
    }

    /// Stream whose id is a hash of a structured path, e.g. `[stage, epoch, example, sample]`.
    pub fn from_path(seed: u64, path: &[u64]) -> Self {
        Self::new(seed, path_stream_id(path))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Number of 32-bit words consumed so far.
    pub fn counter(&self) -> u64 {
        // word position is < 2^68; the low 64 bits are enough for any realistic run
        self.inner.get_word_pos() as u64
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand::Error> {
        self.inner.try_fill_bytes(dest)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn path_stream_id(path: &[u64]) -> u64 {
    path.iter().fold(0x6a09_e667_f3bc_c908, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_stream_is_reproducible() {
        let mut a = RngStream::new(7, 3);
        let mut b = RngStream::new(7, 3);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        assert_eq!(a.counter(), 200);
    }

    #[test]
    fn distinct_streams_diverge() {
        let mut a = RngStream::new(7, 3);
        let mut b = RngStream::new(7, 4);
        let same = (0..64).filter(|_| a.next_u64() == b.next_u64()).count();
        assert_eq!(same, 0);
    }

    #[test]
    fn streams_are_uncorrelated() {
        let mut a = RngStream::new(11, 0);
        let mut b = RngStream::new(11, 1);
        let n = 20_000;
        let xs: Vec<f64> = (0..n).map(|_| a.uniform() - 0.5).collect();
        let ys: Vec<f64> = (0..n).map(|_| b.uniform() - 0.5).collect();
        let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| x * y).sum::<f64>() / n as f64;
        // var of U(-.5,.5) is 1/12; correlation well under 0.05
        assert!((cov * 12.0).abs() < 0.05, "corr {}", cov * 12.0);
    }

    const PINNED: u64 = 13_080_132_717_333_068_652;

    #[test]
    fn known_first_values_are_pinned() {
        // guards the platform-independence contract against dependency drift
        let mut a = RngStream::new(0, 0);
        assert_eq!(a.next_u64(), PINNED);
        assert_ne!(path_stream_id(&[1, 2]), path_stream_id(&[2, 1]));
    }
}
