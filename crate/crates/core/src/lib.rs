pub mod autodiff;
pub mod control;
pub mod ebm;
pub mod io;
pub mod lml;
pub mod nn;
pub mod optimizers;

#[cfg(test)]
pub(crate) mod test_util;

/// Derives an independent seed for a numbered stream from a base seed
/// (splitmix64 finalizer).
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
