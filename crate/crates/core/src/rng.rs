use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent named streams derived from one user seed, so that adding a
/// consumer never shifts the draws of another.
pub mod stream {
    pub const FPS: u64 = 1;
    pub const DROP: u64 = 2;
    pub const SCENE: u64 = 3;
    pub const PROXY_TEXT: u64 = 4;
    pub const PROXY_VIEWS: u64 = 5;
    pub const OFFSET_NET: u64 = 16;
    pub const POINTNET: u64 = 17;
    pub const TEXT_BLOCKS: u64 = 18;
    pub const IMAGE_BLOCKS: u64 = 19;
    pub const POOL: u64 = 20;
    pub const HEADS: u64 = 21;
}

pub fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
