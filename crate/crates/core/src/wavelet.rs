//! Single-level orthonormal 2-D Haar transform, applied channel by channel.
//!
//! Each input channel `c` expands to four output channels `4c..4c+4` holding
//! the LL, HL, LH and HH sub-bands in that order. For a 2x2 block with
//! top-left `a`, top-right `b`, bottom-left `c` and bottom-right `d`:
//!
//! ```text
//! LL = (a + b + c + d) / 2      HL = (a - b + c - d) / 2
//! LH = (a + b - c - d) / 2      HH = (a - b - c + d) / 2
//! ```
//!
//! The 1/2 scaling makes the transform orthonormal, so the inverse is the
//! transpose and energy is preserved.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Forward transform: (B, C, H, W) -> (B, 4C, H/2, W/2).
pub fn dwt<T: Scalar>(spatial: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = spatial.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Dimension(format!(
            "wavelet transform needs even height and width, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let band = oh * ow;
    let half = T::from_f64(0.5);
    let mut out = vec![T::zero(); b * 4 * c * band];
    for (plane, bands) in spatial
        .data()
        .chunks_exact(h * w)
        .zip(out.chunks_exact_mut(4 * band))
    {
        let (ll, rest) = bands.split_at_mut(band);
        let (hl, rest) = rest.split_at_mut(band);
        let (lh, hh) = rest.split_at_mut(band);
        for y in 0..oh {
            let top = &plane[2 * y * w..(2 * y + 1) * w];
            let bot = &plane[(2 * y + 1) * w..(2 * y + 2) * w];
            for x in 0..ow {
                let (a, bb) = (top[2 * x], top[2 * x + 1]);
                let (cc, d) = (bot[2 * x], bot[2 * x + 1]);
                let i = y * ow + x;
                ll[i] = (a + bb + cc + d) * half;
                hl[i] = (a - bb + cc - d) * half;
                lh[i] = (a + bb - cc - d) * half;
                hh[i] = (a - bb - cc + d) * half;
            }
        }
    }
    Tensor::new(&[b, 4 * c, oh, ow], out)
}

/// Inverse transform: (B, 4C, h, w) -> (B, C, 2h, 2w).
pub fn iwt<T: Scalar>(freq: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c4, oh, ow) = freq.dims4()?;
    if c4 % 4 != 0 {
        return Err(Error::Dimension(format!(
            "inverse wavelet transform needs a multiple of 4 channels, got {c4}"
        )));
    }
    let (h, w) = (oh * 2, ow * 2);
    let band = oh * ow;
    let half = T::from_f64(0.5);
    let mut out = vec![T::zero(); b * (c4 / 4) * h * w];
    for (bands, plane) in freq
        .data()
        .chunks_exact(4 * band)
        .zip(out.chunks_exact_mut(h * w))
    {
        let (ll, rest) = bands.split_at(band);
        let (hl, rest) = rest.split_at(band);
        let (lh, hh) = rest.split_at(band);
        for y in 0..oh {
            for x in 0..ow {
                let i = y * ow + x;
                let (s, p, q, r) = (ll[i], hl[i], lh[i], hh[i]);
                plane[2 * y * w + 2 * x] = (s + p + q + r) * half;
                plane[2 * y * w + 2 * x + 1] = (s - p + q - r) * half;
                plane[(2 * y + 1) * w + 2 * x] = (s + p - q - r) * half;
                plane[(2 * y + 1) * w + 2 * x + 1] = (s - p - q + r) * half;
            }
        }
    }
    Tensor::new(&[b, c4 / 4, h, w], out)
}
