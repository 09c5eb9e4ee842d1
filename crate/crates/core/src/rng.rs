//! Keyed random streams.
//!
//! Every random draw in a rollout comes from a stream keyed by
//! `(seed, chunk, step, role)`, so two rollouts that share a seed see the
//! same numbers regardless of which optional components run in between.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::frames::Frames;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    InitNoise,
    PathNoise,
    /// Search candidates; the index keeps candidate streams apart.
    Candidate(u32),
    Data,
    Condition,
    DmdNoise,
    FakeScore,
    TrainStep,
    Init,
}

impl Role {
    fn code(self) -> u64 {
        match self {
            Role::InitNoise => 1,
            Role::PathNoise => 2,
            Role::Candidate(k) => 0x100 + k as u64,
            Role::Data => 3,
            Role::Condition => 4,
            Role::DmdNoise => 5,
            Role::FakeScore => 6,
            Role::TrainStep => 7,
            Role::Init => 8,
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a list of words into one 64-bit key.
pub fn mix(words: &[u64]) -> u64 {
    words.iter().fold(0x51_7cc1_b727_220a_u64, |h, &w| splitmix(h ^ splitmix(w)))
}

/// Independent stream for `(seed, chunk, step, role)`.
pub fn stream(seed: u64, chunk: usize, step: usize, role: Role) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(&[seed, chunk as u64, step as u64, role.code()]))
}

/// Derives a child seed, e.g. one per evaluation sample.
pub fn child_seed(seed: u64, index: u64) -> u64 {
    mix(&[seed, 0xc41d, index])
}

pub fn normal_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn normal_frames(rng: &mut impl Rng, rows: usize, dim: usize) -> Frames {
    Frames {
        rows,
        dim,
        data: normal_vec(rng, rows * dim),
    }
}
