use rand::seq::SliceRandom;
use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Deterministic random source. The same seed yields the same stream on
/// every platform, and `subrng` splits off independent named streams so
/// that adding a consumer in one code path cannot shift the draws seen by
/// another.
#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha8Rng,
}

/// FNV-1a over the tag bytes; used to derive stream ids. The std hasher is
/// not guaranteed stable across releases, so the hash is spelled out.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Independent stream keyed by `tag`; the parent is not advanced.
    pub fn subrng(&self, tag: &str) -> Rng {
        let mut inner = self.inner.clone();
        inner.set_stream(fnv1a(tag.as_bytes()));
        inner.set_word_pos(0);
        Rng { inner }
    }

    pub fn uniform_f64(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn range_f64(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform_f64()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform draw from `0..n`. Panics if `n == 0`.
    pub fn usize_below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    /// A permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        self.shuffle(&mut idx);
        idx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::new(7);
        let mut b = Rng::new(7);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn different_seeds_diverge() {
        let mut a = Rng::new(7);
        let mut b = Rng::new(8);
        let same = (0..32).filter(|_| a.next_u64() == b.next_u64()).count();
        assert!(same < 2);
    }

    #[test]
    fn subrng_is_deterministic_and_tag_dependent() {
        let root = Rng::new(42);
        let mut s1 = root.subrng("data");
        let mut s2 = root.subrng("data");
        let mut s3 = root.subrng("init");
        let a: Vec<u64> = (0..16).map(|_| s1.next_u64()).collect();
        let b: Vec<u64> = (0..16).map(|_| s2.next_u64()).collect();
        let c: Vec<u64> = (0..16).map(|_| s3.next_u64()).collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn subrng_does_not_advance_parent() {
        let mut root = Rng::new(3);
        let before = root.clone().next_u64();
        let _ = root.subrng("anything");
        assert_eq!(root.next_u64(), before);
    }

    #[test]
    fn range_respects_bounds() {
        let mut rng = Rng::new(1);
        for _ in 0..1000 {
            let v = rng.range_f64(-2.5, 3.5);
            assert!((-2.5..3.5).contains(&v));
        }
    }

    #[test]
    fn permutation_is_a_permutation() {
        let mut rng = Rng::new(5);
        let mut p = rng.permutation(50);
        p.sort_unstable();
        assert_eq!(p, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn fnv1a_known_values() {
        // Empty input hashes to the offset basis.
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_ne!(fnv1a(b"a"), fnv1a(b"b"));
    }
}
