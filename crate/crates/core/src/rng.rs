use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// ChaCha stream for `(seed, stream, block)`.
///
/// Each block owns 2^32 words of keystream, so independent consumers (one per dialogue, per
/// instance, per epoch) never overlap and can run in any order.
pub fn derived_rng(seed: u64, stream: u64, block: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(u128::from(block) << 32);
    rng
}

/// Stream tags, so different consumers of one seed do not share keystream.
pub(crate) mod streams {
    pub const NEGATIVES: u64 = 1 << 60;
    pub const TAP_SHUFFLE: u64 = 2 << 60;
    pub const MLM_MASK: u64 = 3 << 60;
    pub const EPOCH_SHUFFLE: u64 = 4 << 60;
    pub const INIT: u64 = 5 << 60;
    pub const SYNTH: u64 = 6 << 60;
    pub const DROPOUT: u64 = 7 << 60;
}
