//! Reproducible random streams.
//!
//! Every path owns a family of ChaCha streams keyed by the run seed. The
//! stream id packs the path index and the purpose of the stream, so draws
//! for a path never depend on which worker simulated it or on how many
//! other paths ran before it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a stream is used for. Distinct purposes never share draws.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    /// Factor noise of Levy driver `k`.
    Levy(usize),
    /// Uniforms for the rating chain (canonical construction).
    Chain,
    /// Candidate points and acceptance uniforms of the Cox process.
    Cox,
}

const PURPOSE_BITS: u32 = 8;

impl Stream {
    fn code(self) -> u64 {
        match self {
            Stream::Chain => 1,
            Stream::Cox => 2,
            Stream::Levy(k) => {
                assert!(k < 200, "too many Levy drivers");
                16 + k as u64
            }
        }
    }
}

pub fn stream_rng(seed: u64, path: u64, purpose: Stream) -> ChaCha8Rng {
    assert!(path < (1u64 << (64 - PURPOSE_BITS)), "path index out of range");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((path << PURPOSE_BITS) | purpose.code());
    rng
}
