use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Smallest batch that forms an episode.
pub const MIN_EPISODE: usize = 3;

/// Index sets into a batch of scenes. `context` is a prefix of a shuffled
/// order and `targets` is the whole batch, so context is a subset of targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpisodeSplit {
    pub context: Vec<usize>,
    pub targets: Vec<usize>,
}

/// Seeded shuffle of `0..n`, context size `m ~ U[3, n]`.
pub fn make_episode(n: usize, seed: u64) -> Result<EpisodeSplit> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    make_episode_with(n, &mut rng)
}

pub fn make_episode_with(n: usize, rng: &mut impl Rng) -> Result<EpisodeSplit> {
    if n < MIN_EPISODE {
        return Err(Error::Invalid(format!(
            "an episode needs at least {MIN_EPISODE} scenes, got {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let m = rng.random_range(MIN_EPISODE..=n);
    Ok(EpisodeSplit {
        context: order[..m].to_vec(),
        targets: order,
    })
}
