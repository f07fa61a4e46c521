use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Seed plus stream id. Two equal states always produce the same draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
}

pub type Rng = ChaCha8Rng;

impl RngState {
    pub fn new(seed: u64, stream: u64) -> Self {
        RngState { seed, stream }
    }

    pub fn rng(&self) -> Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }

    /// A state on a different stream of the same seed.
    pub fn fork(&self, stream: u64) -> Self {
        RngState::new(self.seed, stream)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn same_state_same_draws() {
        let a: Vec<u32> = (0..8).map({
            let mut r = RngState::new(7, 3).rng();
            move |_| r.gen()
        }).collect();
        let b: Vec<u32> = (0..8).map({
            let mut r = RngState::new(7, 3).rng();
            move |_| r.gen()
        }).collect();
        assert_eq!(a, b);
        let mut other = RngState::new(7, 4).rng();
        assert_ne!(a[0], other.gen::<u32>());
    }
}
