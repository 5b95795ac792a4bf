use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Seed for the crate's counter-based generator.
///
/// Independent consumers draw from disjoint ChaCha streams of the same key,
/// so adding a consumer never perturbs the numbers another one sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn stream(&self, id: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(id);
        rng
    }
}
