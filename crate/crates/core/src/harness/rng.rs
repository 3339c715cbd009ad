//! Portable random streams.
//!
//! Every draw in a run comes from ChaCha8 keyed by the run seed, with the
//! 64-bit stream id `purpose << 48 | step`. ChaCha is a counter-based cipher
//! whose output is specified bit for bit, so a given `(seed, purpose, step)`
//! yields the same values on every platform and independently of the order
//! in which streams are created.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Train = 1,
    Eval = 2,
    Bench = 3,
}

pub const MAX_STEP: u64 = (1 << 48) - 1;

pub fn stream(seed: u64, purpose: Purpose, step: u64) -> ChaCha8Rng {
    assert!(step <= MAX_STEP, "step {step} exceeds the stream id range");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 48) | step);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let draw = |p, s| stream(7, p, s).next_u64();
        assert_eq!(draw(Purpose::Train, 3), draw(Purpose::Train, 3));
        assert_ne!(draw(Purpose::Train, 3), draw(Purpose::Train, 4));
        assert_ne!(draw(Purpose::Train, 3), draw(Purpose::Eval, 3));
        assert_ne!(stream(8, Purpose::Train, 3).next_u64(), draw(Purpose::Train, 3));
    }

    #[test]
    fn pinned_first_word() {
        // Guards against silent changes in the generator or key derivation.
        let first = stream(0, Purpose::Train, 0).next_u64();
        assert_eq!(first, 15_463_945_212_985_891_878);
    }
}
