//! Password to secret map derivation.
//!
//! A password is stretched with PBKDF2 into `W * H` pseudorandom bits, the
//! bits become a `{-1, +1}` map the size of the image, and the map is taken
//! to the wavelet domain. The resulting 4-channel secret map conditions every
//! coupling block and, repeated three times, stands in for the discarded
//! byproduct during recovery.

use std::fmt;

use sha2::{Sha256, Sha512};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::wavelet;

/// Salt used unless a checkpoint says otherwise.
pub const DEFAULT_SALT: &[u8; 16] = b"proface-kdf-salt";
pub const DEFAULT_ITERATIONS: u32 = 10;

/// Pseudorandom function for PBKDF2. The discriminant is the id stored in
/// checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum KdfHash {
    HmacSha256 = 1,
    HmacSha512 = 2,
}

impl KdfHash {
    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Option<Self> {
        match id {
            1 => Some(KdfHash::HmacSha256),
            2 => Some(KdfHash::HmacSha512),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeygenConfig {
    pub salt: Vec<u8>,
    pub iterations: u32,
    pub hash: KdfHash,
}

impl Default for KeygenConfig {
    fn default() -> Self {
        Self {
            salt: DEFAULT_SALT.to_vec(),
            iterations: DEFAULT_ITERATIONS,
            hash: KdfHash::HmacSha256,
        }
    }
}

/// A user password. Never printed.
#[derive(Clone, PartialEq, Eq)]
pub struct SecretKey(Vec<u8>);

impl SecretKey {
    pub fn new(bytes: impl Into<Vec<u8>>) -> Result<Self> {
        let bytes = bytes.into();
        if bytes.is_empty() {
            return Err(Error::EmptyKey);
        }
        Ok(Self(bytes))
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }
}

impl fmt::Debug for SecretKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SecretKey(<{} bytes>)", self.0.len())
    }
}

/// Raw PBKDF2 output of `len` bytes.
pub fn derive_bytes(key: &SecretKey, config: &KeygenConfig, len: usize) -> Vec<u8> {
    let mut out = vec![0u8; len];
    match config.hash {
        KdfHash::HmacSha256 => {
            pbkdf2::pbkdf2_hmac::<Sha256>(key.as_bytes(), &config.salt, config.iterations, &mut out)
        }
        KdfHash::HmacSha512 => {
            pbkdf2::pbkdf2_hmac::<Sha512>(key.as_bytes(), &config.salt, config.iterations, &mut out)
        }
    }
    out
}

/// Row-major `height x width` map of `-1`/`+1` entries.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryKeyMap {
    height: usize,
    width: usize,
    signs: Vec<i8>,
}

impl BinaryKeyMap {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn signs(&self) -> &[i8] {
        &self.signs
    }

    /// The map as a `[1, 1, height, width]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            &[1, 1, self.height, self.width],
            self.signs.iter().map(|&s| f32::from(s)).collect(),
        )
        .expect("length matches dimensions")
    }

    /// Fraction of positions where two maps of equal size disagree.
    pub fn hamming_fraction(&self, other: &Self) -> f64 {
        let diff = self
            .signs
            .iter()
            .zip(&other.signs)
            .filter(|(a, b)| a != b)
            .count();
        diff as f64 / self.signs.len().max(1) as f64
    }
}

/// Derives `width * height` bits and lays them out row-major, most
/// significant bit of each byte first, with bit 0 as -1 and bit 1 as +1.
pub fn derive_bitmap(key: &SecretKey, width: usize, height: usize, config: &KeygenConfig) -> Result<BinaryKeyMap> {
    let n = width * height;
    if n == 0 || n % 8 != 0 {
        return Err(Error::Dimension(format!(
            "key map of {width}x{height} must hold a positive multiple of 8 bits"
        )));
    }
    let bytes = derive_bytes(key, config, n / 8);
    let signs = bytes
        .iter()
        .flat_map(|&b| (0..8).rev().map(move |bit| if (b >> bit) & 1 == 1 { 1i8 } else { -1 }))
        .collect();
    Ok(BinaryKeyMap {
        height,
        width,
        signs,
    })
}

/// Wavelet-domain secret map, a `[1, 4, height/2, width/2]` tensor with
/// entries in `{-2, -1, 0, 1, 2}`.
#[derive(Clone, Debug, PartialEq)]
pub struct SecretMap(Tensor);

impl SecretMap {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

pub fn keygen(key: &SecretKey, width: usize, height: usize, config: &KeygenConfig) -> Result<SecretMap> {
    if width % 2 != 0 || height % 2 != 0 {
        return Err(Error::Dimension(format!(
            "secret map needs even width and height, got {width}x{height}"
        )));
    }
    let bits = derive_bitmap(key, width, height, config)?;
    Ok(SecretMap(wavelet::dwt(&bits.to_tensor())?))
}

/// Auxiliary recovery input: the secret map repeated three times along the
/// channel axis, one copy per colour channel's sub-bands.
pub fn expand_for_recovery(map: &SecretMap) -> Tensor {
    let k = map.tensor();
    crate::tensor::ops::concat_channels(&[k, k, k]).expect("copies share their shape")
}
