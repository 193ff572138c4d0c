//! Master-seed fan-out.
//!
//! Every random consumer draws from `ChaCha8Rng::seed_from_u64(master)` on its
//! own ChaCha stream. The 64-bit stream id packs a purpose tag in the top 8
//! bits, a primary index (client, domain, task) in the next 24 bits and a
//! secondary index (round) in the low 32 bits. Adding a client therefore never
//! shifts the randomness of any other client, domain or task.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    /// Shared latent map and task label maps.
    Tasks,
    /// Mean and mixing matrix of one data domain.
    Domain(u32),
    /// Train/test samples of one client.
    ClientData(u32),
    /// Encoder and decoder initialization, shared by every client.
    ModelInit,
    /// Head initialization for one task.
    HeadInit(u32),
    /// Mini-batch order of one client in one round.
    ClientRound { client: u32, round: u32 },
}

impl Stream {
    pub fn id(self) -> u64 {
        let (tag, primary, secondary): (u64, u32, u32) = match self {
            Stream::Tasks => (1, 0, 0),
            Stream::Domain(d) => (2, d, 0),
            Stream::ClientData(c) => (3, c, 0),
            Stream::ModelInit => (4, 0, 0),
            Stream::HeadInit(t) => (5, t, 0),
            Stream::ClientRound { client, round } => (6, client, round),
        };
        (tag << 56) | ((u64::from(primary) & 0xFF_FFFF) << 32) | u64::from(secondary)
    }
}

pub fn rng_for(master: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(stream.id());
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_distinct_and_reproducible() {
        let a: u64 = rng_for(5, Stream::ClientData(0)).random();
        let b: u64 = rng_for(5, Stream::ClientData(1)).random();
        let a2: u64 = rng_for(5, Stream::ClientData(0)).random();
        assert_ne!(a, b);
        assert_eq!(a, a2);
        assert_ne!(
            Stream::ClientRound { client: 1, round: 2 }.id(),
            Stream::ClientRound { client: 2, round: 1 }.id()
        );
    }
}
