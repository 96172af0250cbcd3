//! 8-bit image files in and out of the unit-interval float domain.
//!
//! Images are stored channel-major as a `[3, height, width]` tensor. Values
//! are nominally in `[0, 1]`, but images produced by the flow are left
//! unclamped in memory; clamping and quantization happen only in
//! [`save_image`].

use std::path::Path;

use image::{ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which symbol of the protect/recover pipeline an image plays.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Original,
    PreObfuscated,
    Protected,
    Recovered,
    Byproduct,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pixels: Tensor,
    role: Role,
}

impl Image {
    /// Wraps a `[3, h, w]` tensor.
    pub fn new(pixels: Tensor, role: Role) -> Result<Self> {
        match pixels.shape() {
            [3, h, w] if *h > 0 && *w > 0 => Ok(Self { pixels, role }),
            s => Err(Error::Dimension(format!(
                "an image is a [3, h, w] tensor with h, w > 0, got {s:?}"
            ))),
        }
    }

    pub fn filled(height: usize, width: usize, value: f32, role: Role) -> Self {
        Self {
            pixels: Tensor::full(&[3, height, width], value),
            role,
        }
    }

    pub fn from_fn(height: usize, width: usize, role: Role, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let pixels = Tensor::from_fn(&[3, height, width], |i| {
            f(i / (height * width), (i / width) % height, i % width)
        });
        Self { pixels, role }
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    pub fn tensor(&self) -> &Tensor {
        &self.pixels
    }

    pub fn into_tensor(self) -> Tensor {
        self.pixels
    }

    pub fn get(&self, channel: usize, y: usize, x: usize) -> f32 {
        self.pixels.data()[(channel * self.height() + y) * self.width() + x]
    }

    pub fn same_size(&self, other: &Image) -> bool {
        self.pixels.shape() == other.pixels.shape()
    }

    /// Rounds every value through the 8-bit quantizer used on save.
    pub fn quantized(&self) -> Self {
        Self {
            pixels: self.pixels.map(|v| f32::from(quantize(v)) / 255.0),
            role: self.role,
        }
    }

    fn from_rgb8(rgb: &RgbImage, role: Role) -> Result<Self> {
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let raw = rgb.as_raw();
        let pixels = Tensor::from_fn(&[3, h, w], |i| {
            let (c, p) = (i / (h * w), i % (h * w));
            f32::from(raw[p * 3 + c]) / 255.0
        });
        Self::new(pixels, role)
    }

    fn to_rgb8(&self) -> RgbImage {
        let (h, w) = (self.height(), self.width());
        let data = self.pixels.data();
        let mut raw = vec![0u8; h * w * 3];
        for (p, px) in raw.chunks_exact_mut(3).enumerate() {
            for (c, v) in px.iter_mut().enumerate() {
                *v = quantize(data[c * h * w + p]);
            }
        }
        RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer sized from dimensions")
    }
}

/// `round(clamp(v, 0, 1) * 255)` with halves rounded away from zero.
pub fn quantize(v: f32) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (v * 255.0).round() as u8
}

fn codec_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Codec {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    image::load_from_memory(&bytes).map_err(|e| codec_err(path, e))
}

/// Decodes a PNG or binary PPM into an image of whatever size the file
/// declares; alpha is dropped.
pub fn decode_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    Image::from_rgb8(&open(path)?.to_rgb8(), Role::Original)
}

/// Loads a working image. Without `crop` both sides must be even; with
/// `crop = Some(side)` the image is center-cropped and resized to
/// `side x side`.
pub fn load_image(path: impl AsRef<Path>, crop: Option<usize>) -> Result<Image> {
    let img = decode_image(path.as_ref())?;
    match crop {
        Some(side) => center_crop_resize(&img, side),
        None if img.height() % 2 != 0 || img.width() % 2 != 0 => Err(Error::Dimension(format!(
            "{}: {}x{} has an odd side; request cropping to a working size",
            path.as_ref().display(),
            img.width(),
            img.height()
        ))),
        None => Ok(img),
    }
}

/// Loads an RGBA image (alpha defaults to opaque) as colour plus a
/// `[1, h, w]` alpha tensor.
pub fn load_rgba(path: impl AsRef<Path>) -> Result<(Image, Tensor)> {
    let path = path.as_ref();
    let rgba = open(path)?.to_rgba8();
    let (w, h) = (rgba.width() as usize, rgba.height() as usize);
    let raw = rgba.as_raw();
    let color = Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        f32::from(raw[p * 4 + c]) / 255.0
    });
    let alpha = Tensor::from_fn(&[1, h, w], |p| f32::from(raw[p * 4 + 3]) / 255.0);
    Ok((Image::new(color, Role::Original)?, alpha))
}

/// Writes PNG for `.png` and binary PPM for `.ppm`/`.pnm`.
pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase);
    let format = match ext.as_deref() {
        Some("png") => ImageFormat::Png,
        Some("ppm") | Some("pnm") => ImageFormat::Pnm,
        _ => return Err(codec_err(path, "unsupported extension; use .png or .ppm")),
    };
    let mut buf = std::io::Cursor::new(Vec::new());
    img.to_rgb8()
        .write_to(&mut buf, format)
        .map_err(|e| codec_err(path, e))?;
    std::fs::write(path, buf.into_inner()).map_err(|e| Error::io(path, e))
}

/// Bilinear resize of a `[c, h, w]` tensor using half-pixel centers.
pub fn resize_bilinear(src: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = match src.shape() {
        [c, h, w] if *h > 0 && *w > 0 => (*c, *h, *w),
        s => return Err(Error::Dimension(format!("cannot resize tensor of shape {s:?}"))),
    };
    if out_h == 0 || out_w == 0 {
        return Err(Error::Dimension("resize target must be non-empty".into()));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(src.clone());
    }
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f32)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, (s - i0 as f64) as f32)
            })
            .collect()
    };
    let (ys, xs) = (taps(h, out_h), taps(w, out_w));
    let data = src.data();
    let lerp = |a: f32, b: f32, t: f32| a + t * (b - a);
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for plane in data.chunks_exact(h * w) {
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = lerp(plane[y0 * w + x0], plane[y0 * w + x1], fx);
                let bot = lerp(plane[y1 * w + x0], plane[y1 * w + x1], fx);
                out.push(lerp(top, bot, fy));
            }
        }
    }
    Tensor::new(&[c, out_h, out_w], out)
}

/// Crops the largest centered square and resizes it to `side x side`.
pub fn center_crop_resize(img: &Image, side: usize) -> Result<Image> {
    if side == 0 {
        return Err(Error::Dimension("target side must be positive".into()));
    }
    let (h, w) = (img.height(), img.width());
    let s = h.min(w);
    let (y0, x0) = ((h - s) / 2, (w - s) / 2);
    let data = img.tensor().data();
    let cropped = Tensor::from_fn(&[3, s, s], |i| {
        let (c, y, x) = (i / (s * s), (i / s) % s, i % s);
        data[(c * h + y0 + y) * w + x0 + x]
    });
    Image::new(resize_bilinear(&cropped, side, side)?, img.role())
}
