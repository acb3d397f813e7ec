//! Deterministic derivation of independent RNG streams from one master seed.

/// Stream tags keep draws for different purposes decorrelated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Subset = 1,
    Partition = 2,
    ModelInit = 3,
    LocalTraining = 4,
    ClientSampling = 5,
    FineTune = 6,
    Synthetic = 7,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for `(master, stream, a, b)`; distinct inputs give unrelated seeds.
pub fn derive_seed(master: u64, stream: Stream, a: u64, b: u64) -> u64 {
    let mut h = splitmix64(master);
    for word in [stream as u64, a, b] {
        h = splitmix64(h ^ word);
    }
    h
}
