//! Keyed random streams.
//!
//! Every Gaussian draw in an experiment is addressed by a [`DrawKey`]
//! `(seed, replicate, step, member, role)`. The key is embedded directly into
//! the 256-bit key and 64-bit stream id of a ChaCha8 counter-mode generator,
//! so the key-to-stream map is injective and a draw depends on nothing but
//! its key: no generator state is shared, ensembles of different sizes share
//! their leading members, and members can be produced in any order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a draw is used for. Different roles never share a stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    /// Initial ensemble member `U_i^(0)`.
    Init,
    /// Perturbed observation `D_i^(k)`.
    DataPerturbation,
}

impl Role {
    fn stream_id(self) -> u64 {
        match self {
            Role::Init => 0x494e_4954,
            Role::DataPerturbation => 0x4441_5441,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DrawKey {
    pub experiment_seed: u64,
    pub replicate: u64,
    /// 0 for the initial ensemble, `k >= 1` for data at step `k`.
    pub step: u64,
    /// 0-based member (column) index.
    pub member: u64,
    pub role: Role,
}

impl DrawKey {
    pub fn init(experiment_seed: u64, replicate: u64, member: u64) -> Self {
        Self {
            experiment_seed,
            replicate,
            step: 0,
            member,
            role: Role::Init,
        }
    }

    pub fn data(experiment_seed: u64, replicate: u64, step: u64, member: u64) -> Self {
        Self {
            experiment_seed,
            replicate,
            step,
            member,
            role: Role::DataPerturbation,
        }
    }

    /// The generator for this key, positioned at the start of its stream.
    pub fn stream(&self) -> ChaCha8Rng {
        let mut seed = [0u8; 32];
        for (chunk, word) in seed
            .chunks_exact_mut(8)
            .zip([self.experiment_seed, self.replicate, self.step, self.member])
        {
            chunk.copy_from_slice(&word.to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.role.stream_id());
        rng
    }
}
