//! Counter-keyed random number streams.
//!
//! Every draw in a run comes from a stream keyed by
//! `(seed, run, agent, aux, purpose, time)`. The same key yields the same
//! draw sequence on any platform, which is what lets every CA hold an
//! identical copy of shared sample sets (the common-seed contract) without
//! exchanging them, and what makes runs reproducible and parallelizable.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// What a stream is consumed for. Part of the stream key, so draws for one
/// purpose can never alias draws for another.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum Purpose {
    /// Prior sampling at run start.
    Init = 1,
    /// CA process noise in the true dynamics.
    TrueProcessNoise = 2,
    /// Target process noise in the true dynamics.
    TrueTargetNoise = 3,
    /// Measurement noise when acquiring a bundle.
    MeasNoise = 4,
    /// CA belief prediction noise.
    PredictCa = 5,
    /// Target belief prediction noise (shared per target).
    PredictTarget = 6,
    /// Resampling draws (shared per target, per-CA for own beliefs).
    Resample = 7,
    /// Future-measurement noise in the control layer, keyed per measuring pair.
    FutureNoise = 8,
    /// Target prediction inside the control layer (shared per target).
    ControlTargetPredict = 9,
    /// Subselection of estimation samples for the control layer.
    ControlSubsample = 10,
    /// Fixed per-run movement heading for uncontrolled CAs.
    Heading = 11,
    /// Free-form test streams.
    Test = 12,
}

/// Stream key: `(run, agent, aux, purpose, time)`.
///
/// `agent` is the owning agent for private streams or the subject agent for
/// shared streams (e.g. the target whose samples all CAs must agree on).
/// `aux` disambiguates pairs, e.g. the measured agent of a future
/// measurement.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamId {
    pub run: u32,
    pub agent: u32,
    pub aux: u32,
    pub purpose: Purpose,
    pub time: u32,
}

impl StreamId {
    pub fn new(run: u32, agent: u32, purpose: Purpose, time: u32) -> Self {
        Self {
            run,
            agent,
            aux: 0,
            purpose,
            time,
        }
    }

    pub fn with_aux(mut self, aux: u32) -> Self {
        self.aux = aux;
        self
    }
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic generator for the given `(seed, id)` pair.
pub fn stream(seed: u64, id: StreamId) -> ChaCha12Rng {
    let mut state = seed
        ^ ((id.run as u64) << 32 | id.time as u64).wrapping_mul(0xa076_1d64_78bd_642f)
        ^ ((id.agent as u64) << 32 | id.aux as u64).wrapping_mul(0xe703_7ed1_a0b4_28db)
        ^ (id.purpose as u64).wrapping_mul(0x8ebc_6af0_9c88_c6e3);
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha12Rng::from_seed(key)
}
