use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Seedable generator used for every random draw in the crate.
///
/// ChaCha8 produces the same stream for the same seed on every platform,
/// and its position can be captured and restored exactly, which is what
/// checkpoints rely on.
#[derive(Clone, Debug, PartialEq)]
pub struct RngState(ChaCha8Rng);

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngSnapshot {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos_hi: u64,
    pub word_pos_lo: u64,
}

impl RngState {
    pub fn seeded(seed: u64) -> Self {
        RngState(ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn snapshot(&self) -> RngSnapshot {
        let pos = self.0.get_word_pos();
        RngSnapshot {
            seed: self.0.get_seed(),
            stream: self.0.get_stream(),
            word_pos_hi: (pos >> 64) as u64,
            word_pos_lo: pos as u64,
        }
    }

    pub fn restore(snap: &RngSnapshot) -> Self {
        let mut rng = ChaCha8Rng::from_seed(snap.seed);
        rng.set_stream(snap.stream);
        rng.set_word_pos(((snap.word_pos_hi as u128) << 64) | snap.word_pos_lo as u128);
        RngState(rng)
    }
}

impl RngCore for RngState {
    fn next_u32(&mut self) -> u32 {
        self.0.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.0.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand::Error> {
        self.0.try_fill_bytes(dest)
    }
}
