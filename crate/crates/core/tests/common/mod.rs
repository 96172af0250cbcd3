//! Helpers shared by the integration test targets.

#![allow(dead_code)]

use sha2::{Digest, Sha256};

const BLOCK: usize = 64;

/// HMAC-SHA256 written out from the definition, independent of the `hmac`
/// and `pbkdf2` crates.
pub fn hmac_sha256(key: &[u8], message: &[u8]) -> [u8; 32] {
    let mut k = [0u8; BLOCK];
    if key.len() > BLOCK {
        k[..32].copy_from_slice(&Sha256::digest(key));
    } else {
        k[..key.len()].copy_from_slice(key);
    }
    let pad = |byte: u8| k.map(|b| b ^ byte);
    let inner = Sha256::new().chain_update(pad(0x36)).chain_update(message).finalize();
    Sha256::new().chain_update(pad(0x5c)).chain_update(inner).finalize().into()
}

pub fn pbkdf2_sha256(password: &[u8], salt: &[u8], iterations: u32, len: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(len);
    let mut index = 1u32;
    while out.len() < len {
        let mut msg = salt.to_vec();
        msg.extend_from_slice(&index.to_be_bytes());
        let mut u = hmac_sha256(password, &msg);
        let mut t = u;
        for _ in 1..iterations {
            u = hmac_sha256(password, &u);
            t.iter_mut().zip(u).for_each(|(a, b)| *a ^= b);
        }
        out.extend_from_slice(&t);
        index += 1;
    }
    out.truncate(len);
    out
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Mean Hamming fraction between bitmaps of `trials` random passwords and
/// the same passwords with one bit flipped, plus the per-trial extremes.
pub fn avalanche(trials: usize, side: usize, seed: u64) -> (f64, f64, f64) {
    use proface::keygen::{derive_bitmap, KeygenConfig, SecretKey};
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let cfg = KeygenConfig::default();
    let (mut sum, mut lo, mut hi) = (0.0, f64::INFINITY, f64::NEG_INFINITY);
    for _ in 0..trials {
        let len = rng.gen_range(1..=24);
        let pw: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
        let mut flipped = pw.clone();
        let bit = rng.gen_range(0..len * 8);
        flipped[bit / 8] ^= 1 << (bit % 8);
        let a = derive_bitmap(&SecretKey::new(pw).unwrap(), side, side, &cfg).unwrap();
        let b = derive_bitmap(&SecretKey::new(flipped).unwrap(), side, side, &cfg).unwrap();
        let f = a.hamming_fraction(&b);
        sum += f;
        lo = lo.min(f);
        hi = hi.max(f);
    }
    (sum / trials as f64, lo, hi)
}
