//! Named random streams derived from a single root seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datagen::fnv1a64;

pub type StreamRng = ChaCha8Rng;

/// Independent consumers of randomness. Each gets its own stream so that, for
/// example, the data order does not depend on how the model was initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Data,
    ModelInit,
    LabelPe,
    Sampling,
    Oracle,
    Eval,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Data => 1,
            Stream::ModelInit => 2,
            Stream::LabelPe => 3,
            Stream::Sampling => 4,
            Stream::Oracle => 5,
            Stream::Eval => 6,
        }
    }
}

pub fn stream(root_seed: u64, which: Stream) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(root_seed);
    rng.set_stream(which.id());
    rng
}

/// A stream keyed by an arbitrary label, e.g. `("eval-batch", 3)`.
pub fn keyed(root_seed: u64, which: Stream, label: &str, index: u64) -> StreamRng {
    let key = format!("{root_seed}/{}/{label}/{index}", which.id());
    ChaCha8Rng::seed_from_u64(fnv1a64(key.as_bytes()))
}
