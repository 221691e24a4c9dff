//! Named random substreams.
//!
//! Every random decision in the simulator draws from a ChaCha8 stream keyed
//! by the experiment seed plus a fixed label path, so results never depend
//! on scheduling or on how many other streams were consumed first.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a stream is used for. The discriminant is part of the stream key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    DirichletLabel = 1,
    DomainSubsample = 2,
    LdsCoefficients = 3,
    LdsSubsample = 4,
    SynthBasis = 5,
    SynthMeans = 6,
    SynthSamples = 7,
    AugmentStep1 = 8,
    AugmentStep2 = 9,
    Shuffle = 10,
}

/// Identifies one substream: `(seed, client, class, purpose)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamId {
    pub seed: u64,
    pub client: u64,
    pub class: u64,
    pub purpose: Purpose,
}

impl StreamId {
    pub fn new(seed: u64, client: u64, class: u64, purpose: Purpose) -> Self {
        Self {
            seed,
            client,
            class,
            purpose,
        }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        substream(self.seed, &[self.purpose as u64, self.client, self.class])
    }
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a stream from a seed and an arbitrary label path.
pub fn substream(seed: u64, labels: &[u64]) -> ChaCha8Rng {
    let mut state = seed;
    let mut acc = splitmix64(&mut state);
    for &label in labels {
        state ^= acc.rotate_left(17) ^ label.wrapping_mul(0xD6E8_FEB8_6659_FD93);
        acc = splitmix64(&mut state);
    }
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
