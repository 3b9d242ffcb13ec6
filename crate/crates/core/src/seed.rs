/// splitmix64 finaliser; derives independent stream seeds from a master
/// seed and a counter.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(index.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for stream `index` within the named sub-stream `tag` of `master`.
pub fn tagged_seed(master: u64, tag: u64, index: u64) -> u64 {
    derive_seed(derive_seed(master, tag), index)
}
