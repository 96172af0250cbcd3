//! Conventional pre-obfuscators producing the template the protected image
//! has to resemble: Gaussian blur, pixelation, median blur and sticker
//! masking.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imageio::{resize_bilinear, Image, Role};
use crate::tensor::Tensor;

pub const GAUSSIAN_TAPS: usize = 21;
pub const EVAL_SIGMA: f32 = 8.0;
pub const EVAL_BLOCK: usize = 9;
pub const EVAL_MEDIAN_KERNEL: usize = 15;
pub const TRAIN_SIGMA: (f32, f32) = (6.0, 10.0);
pub const TRAIN_BLOCK: (usize, usize) = (5, 13);
pub const TRAIN_MEDIAN_KERNEL: (usize, usize) = (8, 22);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ObfuscatorKind {
    GaussianBlur,
    Pixelate,
    MedianBlur,
    Mask,
}

impl ObfuscatorKind {
    pub const ALL: [ObfuscatorKind; 4] = [
        ObfuscatorKind::GaussianBlur,
        ObfuscatorKind::Pixelate,
        ObfuscatorKind::MedianBlur,
        ObfuscatorKind::Mask,
    ];

    pub fn short_name(self) -> &'static str {
        match self {
            ObfuscatorKind::GaussianBlur => "gb",
            ObfuscatorKind::Pixelate => "pl",
            ObfuscatorKind::MedianBlur => "mb",
            ObfuscatorKind::Mask => "ms",
        }
    }
}

impl fmt::Display for ObfuscatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for ObfuscatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ObfuscatorKind::ALL
            .into_iter()
            .find(|k| k.short_name() == s.trim())
            .ok_or_else(|| Error::InvalidConfig(format!("unknown obfuscator {s:?}; expected gb, pl, mb or ms")))
    }
}

/// An RGBA overlay.
#[derive(Clone, Debug, PartialEq)]
pub struct Sticker {
    pub color: Image,
    /// `[1, h, w]`, same size as `color`.
    pub alpha: Tensor,
}

impl Sticker {
    pub fn new(color: Image, alpha: Tensor) -> Result<Self> {
        if alpha.shape() != [1, color.height(), color.width()] {
            return Err(Error::shape("Sticker::new", "alpha must be [1, h, w] matching the colour image"));
        }
        Ok(Self { color, alpha })
    }

    /// A flat cartoon face: opaque yellow ellipse with dark eyes and mouth,
    /// transparent outside the ellipse.
    pub fn procedural(height: usize, width: usize) -> Self {
        let (h, w) = (height.max(1), width.max(1));
        let mut alpha = vec![0.0f32; h * w];
        let mut rgb = vec![0.0f32; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                let u = (x as f32 + 0.5) / w as f32 * 2.0 - 1.0;
                let v = (y as f32 + 0.5) / h as f32 * 2.0 - 1.0;
                if u * u + v * v > 1.0 {
                    continue;
                }
                let eye = |cx: f32| (u - cx).powi(2) + (v + 0.25).powi(2) < 0.02;
                let mouth = v > 0.35 && v < 0.5 && u.abs() < 0.4;
                let c = if eye(-0.35) || eye(0.35) || mouth {
                    [0.1, 0.08, 0.05]
                } else {
                    [0.98, 0.82, 0.25]
                };
                let p = y * w + x;
                alpha[p] = 1.0;
                for (ch, v) in c.into_iter().enumerate() {
                    rgb[ch * h * w + p] = v;
                }
            }
        }
        Self {
            color: Image::new(Tensor::new(&[3, h, w], rgb).expect("sized"), Role::Original).expect("3 channels"),
            alpha: Tensor::new(&[1, h, w], alpha).expect("sized"),
        }
    }
}

/// Axis-aligned pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Region {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl Region {
    /// Centered box spanning 60% of each side.
    pub fn inner(height: usize, width: usize) -> Self {
        let rw = ((width as f64 * 0.6).round() as usize).max(1);
        let rh = ((height as f64 * 0.6).round() as usize).max(1);
        Self {
            x: (width - rw) / 2,
            y: (height - rh) / 2,
            width: rw,
            height: rh,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ObfuscatorSpec {
    GaussianBlur { sigma: f32 },
    Pixelate { block: usize },
    MedianBlur { kernel: usize },
    /// `None` fields fall back to [`Sticker::procedural`] and [`Region::inner`].
    Mask {
        sticker: Option<Sticker>,
        region: Option<Region>,
    },
}

impl ObfuscatorSpec {
    /// The fixed evaluation configuration of a kind.
    pub fn eval(kind: ObfuscatorKind) -> Self {
        match kind {
            ObfuscatorKind::GaussianBlur => ObfuscatorSpec::GaussianBlur { sigma: EVAL_SIGMA },
            ObfuscatorKind::Pixelate => ObfuscatorSpec::Pixelate { block: EVAL_BLOCK },
            ObfuscatorKind::MedianBlur => ObfuscatorSpec::MedianBlur {
                kernel: EVAL_MEDIAN_KERNEL,
            },
            ObfuscatorKind::Mask => ObfuscatorSpec::Mask {
                sticker: None,
                region: None,
            },
        }
    }

    pub fn kind(&self) -> ObfuscatorKind {
        match self {
            ObfuscatorSpec::GaussianBlur { .. } => ObfuscatorKind::GaussianBlur,
            ObfuscatorSpec::Pixelate { .. } => ObfuscatorKind::Pixelate,
            ObfuscatorSpec::MedianBlur { .. } => ObfuscatorKind::MedianBlur,
            ObfuscatorSpec::Mask { .. } => ObfuscatorKind::Mask,
        }
    }

    /// Produces the template `y = O(x)`.
    pub fn apply(&self, img: &Image) -> Result<Image> {
        let out = match self {
            ObfuscatorSpec::GaussianBlur { sigma } => gaussian_blur(img, *sigma)?,
            ObfuscatorSpec::Pixelate { block } => pixelate(img, *block)?,
            ObfuscatorSpec::MedianBlur { kernel } => median_blur(img, *kernel)?,
            ObfuscatorSpec::Mask { sticker, region } => {
                let region = region.unwrap_or_else(|| Region::inner(img.height(), img.width()));
                match sticker {
                    Some(s) => mask_overlay(img, s, region)?,
                    None => mask_overlay(img, &Sticker::procedural(region.height, region.width), region)?,
                }
            }
        };
        Ok(out.with_role(Role::PreObfuscated))
    }
}

/// Mirror index without repeating the edge sample (`dcb|abcd|cba`).
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// Normalized `GAUSSIAN_TAPS`-tap kernel.
pub fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let r = (GAUSSIAN_TAPS / 2) as f64;
    let s = sigma as f64;
    let raw: Vec<f64> = (0..GAUSSIAN_TAPS)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * s * s)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| (v / total) as f32).collect()
}

pub fn gaussian_blur(img: &Image, sigma: f32) -> Result<Image> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidConfig(format!("gaussian sigma must be positive, got {sigma}")));
    }
    let k = gaussian_kernel(sigma);
    let r = (GAUSSIAN_TAPS / 2) as isize;
    let (h, w) = (img.height(), img.width());
    // Accumulates weighted offsets from the center sample; the kernel sums
    // to one, and flat neighbourhoods come out unchanged bit for bit.
    let pass = |src: &[f32], horizontal: bool| -> Vec<f32> {
        let mut out = vec![0.0f32; src.len()];
        for (plane, dst) in src.chunks_exact(h * w).zip(out.chunks_exact_mut(h * w)) {
            for y in 0..h {
                for x in 0..w {
                    let center = plane[y * w + x];
                    let mut acc = 0.0f32;
                    for (t, &kv) in k.iter().enumerate() {
                        let d = t as isize - r;
                        let v = if horizontal {
                            plane[y * w + reflect(x as isize + d, w)]
                        } else {
                            plane[reflect(y as isize + d, h) * w + x]
                        };
                        acc += kv * (v - center);
                    }
                    dst[y * w + x] = center + acc;
                }
            }
        }
        out
    };
    let tmp = pass(img.tensor().data(), true);
    let out = pass(&tmp, false);
    Image::new(Tensor::new(&[3, h, w], out)?, img.role())
}

/// Replaces each `block x block` tile (truncated at the right and bottom
/// edges) with its mean.
pub fn pixelate(img: &Image, block: usize) -> Result<Image> {
    if block == 0 {
        return Err(Error::InvalidConfig("pixelate block must be at least 1".into()));
    }
    let (h, w) = (img.height(), img.width());
    let mut out = img.tensor().clone();
    for plane in out.data_mut().chunks_exact_mut(h * w) {
        for ty in (0..h).step_by(block) {
            for tx in (0..w).step_by(block) {
                let (ye, xe) = ((ty + block).min(h), (tx + block).min(w));
                let first = plane[ty * w + tx];
                let n = ((ye - ty) * (xe - tx)) as f32;
                let mut acc = 0.0f32;
                for y in ty..ye {
                    for x in tx..xe {
                        acc += plane[y * w + x] - first;
                    }
                }
                let mean = first + acc / n;
                for y in ty..ye {
                    plane[y * w + tx..y * w + xe].fill(mean);
                }
            }
        }
    }
    Image::new(out, img.role())
}

/// Sliding-window median with mirrored borders. The window spans offsets
/// `-(kernel-1)/2 ..= kernel/2`; even windows take the lower median.
pub fn median_blur(img: &Image, kernel: usize) -> Result<Image> {
    if kernel == 0 {
        return Err(Error::InvalidConfig("median kernel must be at least 1".into()));
    }
    let (h, w) = (img.height(), img.width());
    let lo = (kernel as isize - 1) / 2;
    let mut out = vec![0.0f32; 3 * h * w];
    let mut window = Vec::with_capacity(kernel * kernel);
    for (plane, dst) in img.tensor().data().chunks_exact(h * w).zip(out.chunks_exact_mut(h * w)) {
        for y in 0..h {
            for x in 0..w {
                window.clear();
                for dy in 0..kernel as isize {
                    let sy = reflect(y as isize - lo + dy, h);
                    for dx in 0..kernel as isize {
                        window.push(plane[sy * w + reflect(x as isize - lo + dx, w)]);
                    }
                }
                let mid = (window.len() - 1) / 2;
                let (_, m, _) = window.select_nth_unstable_by(mid, f32::total_cmp);
                dst[y * w + x] = *m;
            }
        }
    }
    Image::new(Tensor::new(&[3, h, w], out)?, img.role())
}

/// Alpha-composites `sticker`, resized to the region, over `img`.
pub fn mask_overlay(img: &Image, sticker: &Sticker, region: Region) -> Result<Image> {
    let (h, w) = (img.height(), img.width());
    if region.width == 0 || region.height == 0 {
        return Err(Error::InvalidConfig("mask region is empty".into()));
    }
    if region.x + region.width > w || region.y + region.height > h {
        return Err(Error::InvalidConfig(format!(
            "mask region {region:?} exceeds the {w}x{h} image"
        )));
    }
    let color = resize_bilinear(sticker.color.tensor(), region.height, region.width)?;
    let alpha = resize_bilinear(&sticker.alpha, region.height, region.width)?;
    let (rh, rw) = (region.height, region.width);
    let mut out = img.tensor().clone();
    for (c, plane) in out.data_mut().chunks_exact_mut(h * w).enumerate() {
        for y in 0..rh {
            for x in 0..rw {
                let a = alpha.data()[y * rw + x];
                let s = color.data()[(c * rh + y) * rw + x];
                let p = &mut plane[(region.y + y) * w + region.x + x];
                *p = a * s + (1.0 - a) * *p;
            }
        }
    }
    Image::new(out, img.role())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplerMode {
    Train,
    Eval,
}

/// Draws obfuscator configurations: random kinds and parameters while
/// training, the fixed evaluation parameters otherwise.
#[derive(Clone, Debug)]
pub struct ObfuscatorSampler {
    rng: ChaCha8Rng,
    mode: SamplerMode,
    kinds: Vec<ObfuscatorKind>,
    sticker: Option<Sticker>,
}

impl ObfuscatorSampler {
    pub fn new(seed: u64, mode: SamplerMode, kinds: &[ObfuscatorKind]) -> Result<Self> {
        if kinds.is_empty() {
            return Err(Error::InvalidConfig("at least one obfuscator kind must be enabled".into()));
        }
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            mode,
            kinds: kinds.to_vec(),
            sticker: None,
        })
    }

    pub fn with_sticker(mut self, sticker: Sticker) -> Self {
        self.sticker = Some(sticker);
        self
    }

    pub fn mode(&self) -> SamplerMode {
        self.mode
    }

    pub fn sample(&mut self) -> ObfuscatorSpec {
        let kind = self.kinds[self.rng.gen_range(0..self.kinds.len())];
        match (self.mode, kind) {
            (_, ObfuscatorKind::Mask) => ObfuscatorSpec::Mask {
                sticker: self.sticker.clone(),
                region: None,
            },
            (SamplerMode::Eval, k) => ObfuscatorSpec::eval(k),
            (SamplerMode::Train, ObfuscatorKind::GaussianBlur) => ObfuscatorSpec::GaussianBlur {
                sigma: self.rng.gen_range(TRAIN_SIGMA.0..=TRAIN_SIGMA.1),
            },
            (SamplerMode::Train, ObfuscatorKind::Pixelate) => ObfuscatorSpec::Pixelate {
                block: self.rng.gen_range(TRAIN_BLOCK.0..=TRAIN_BLOCK.1),
            },
            (SamplerMode::Train, ObfuscatorKind::MedianBlur) => ObfuscatorSpec::MedianBlur {
                kernel: self.rng.gen_range(TRAIN_MEDIAN_KERNEL.0..=TRAIN_MEDIAN_KERNEL.1),
            },
        }
    }
}
