//! Image quality metrics and the evaluation report.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::flow::{FlowModel, WrongRecoveryMode};
use crate::imageio::Image;
use crate::keygen::SecretKey;
use crate::objective::perceptual_distance;
use crate::obfuscators::{ObfuscatorKind, ObfuscatorSpec};
use crate::pipeline::{self, Template};

pub const PSNR_CAP_DB: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

pub const CSV_HEADER: &str = "role_pair,obfuscator,mode,psnr_db,ssim,perc";

fn check_same(a: &Image, b: &Image, op: &'static str) -> Result<()> {
    if !a.same_size(b) {
        return Err(Error::shape(
            op,
            format!("{}x{} vs {}x{}", a.width(), a.height(), b.width(), b.height()),
        ));
    }
    Ok(())
}

/// Peak signal-to-noise ratio for unit dynamic range, capped at
/// [`PSNR_CAP_DB`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    check_same(a, b, "psnr")?;
    let (x, y) = (a.tensor().data(), b.tensor().data());
    let mse = x
        .iter()
        .zip(y)
        .map(|(&p, &q)| {
            let d = p as f64 - q as f64;
            d * d
        })
        .sum::<f64>()
        / x.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

fn ssim_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering of an `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5), averaged
/// over every valid window position and colour channel.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_same(a, b, "ssim")?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Dimension(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {w}x{h}"
        )));
    }
    let k = ssim_window();
    let plane = h * w;
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..3 {
        let x: Vec<f64> = a.tensor().data()[c * plane..(c + 1) * plane].iter().map(|&v| v as f64).collect();
        let y: Vec<f64> = b.tensor().data()[c * plane..(c + 1) * plane].iter().map(|&v| v as f64).collect();
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
        let mx = filter_valid(&x, h, w, &k);
        let my = filter_valid(&y, h, w, &k);
        let sxx = filter_valid(&prod(&x, &x), h, w, &k);
        let syy = filter_valid(&prod(&y, &y), h, w, &k);
        let sxy = filter_valid(&prod(&x, &y), h, w, &k);
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            let num = (2.0 * ux * uy + SSIM_C1) * (2.0 * cov + SSIM_C2);
            let den = (ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2);
            total += num / den;
        }
        count += mx.len();
    }
    Ok(total / count as f64)
}

/// Which two images a row compares.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RolePair {
    /// Protected vs template: the privacy score.
    Privacy,
    /// Correct-key recovery vs original.
    Recovery,
    /// Recovery with a key one bit away.
    WrongOneBit,
    /// Recovery with an independently drawn key.
    WrongRandom,
}

impl RolePair {
    pub const ALL: [RolePair; 4] = [
        RolePair::Privacy,
        RolePair::Recovery,
        RolePair::WrongOneBit,
        RolePair::WrongRandom,
    ];

    pub fn label(self, mode: WrongRecoveryMode) -> &'static str {
        match (self, mode) {
            (RolePair::Privacy, _) => "protected_vs_template",
            (RolePair::Recovery, _) => "recovered_vs_original",
            (RolePair::WrongOneBit, WrongRecoveryMode::Randomized) => "wrong1bit_vs_original",
            (RolePair::WrongOneBit, WrongRecoveryMode::Obfuscated) => "wrong1bit_vs_template",
            (RolePair::WrongRandom, WrongRecoveryMode::Randomized) => "wrongrand_vs_original",
            (RolePair::WrongRandom, WrongRecoveryMode::Obfuscated) => "wrongrand_vs_template",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub image: usize,
    pub pair: RolePair,
    pub obfuscator: ObfuscatorKind,
    pub mode: WrongRecoveryMode,
    pub psnr_db: f64,
    pub ssim: f64,
    pub perc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregateRow {
    pub pair: RolePair,
    pub obfuscator: ObfuscatorKind,
    pub mode: WrongRecoveryMode,
    pub count: usize,
    pub psnr_db: f64,
    pub ssim: f64,
    pub perc: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

/// Order-independent mean: values are summed in sorted order.
fn mean(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.iter().sum::<f64>() / v.len() as f64
}

impl MetricReport {
    /// Means per (pair, obfuscator, mode), in that sort order.
    pub fn aggregate(&self) -> Vec<AggregateRow> {
        let mut keys: Vec<_> = self
            .rows
            .iter()
            .map(|r| (r.pair, r.obfuscator, r.mode.name()))
            .collect();
        keys.sort();
        keys.dedup();
        keys.into_iter()
            .map(|(pair, obfuscator, mode)| {
                let group: Vec<&MetricRow> = self
                    .rows
                    .iter()
                    .filter(|r| r.pair == pair && r.obfuscator == obfuscator && r.mode.name() == mode)
                    .collect();
                AggregateRow {
                    pair,
                    obfuscator,
                    mode: group[0].mode,
                    count: group.len(),
                    psnr_db: mean(group.iter().map(|r| r.psnr_db).collect()),
                    ssim: mean(group.iter().map(|r| r.ssim).collect()),
                    perc: mean(group.iter().map(|r| r.perc).collect()),
                }
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{},{:.4},{:.6},{:.6}",
                r.pair.label(r.mode),
                r.obfuscator,
                r.mode.name(),
                r.psnr_db,
                r.ssim,
                r.perc
            )
            .expect("writing to a String");
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes()).map_err(|e| Error::io(path, e))
    }
}

fn compare(a: &Image, b: &Image) -> Result<(f64, f64, f64)> {
    let s = if a.height() >= SSIM_WINDOW && a.width() >= SSIM_WINDOW {
        ssim(a, b)?
    } else {
        f64::NAN
    };
    Ok((psnr(a, b)?, s, perceptual_distance(a, b)?))
}

/// Flips one uniformly chosen bit of the password.
pub fn flip_one_bit(key: &SecretKey, rng: &mut impl Rng) -> SecretKey {
    let mut bytes = key.as_bytes().to_vec();
    let bit = rng.gen_range(0..bytes.len() * 8);
    bytes[bit / 8] ^= 0x80 >> (bit % 8);
    SecretKey::new(bytes).expect("flipping a bit keeps the length")
}

/// A random 16-byte password different from `key`.
pub fn random_key_except(key: &SecretKey, rng: &mut impl Rng) -> SecretKey {
    loop {
        let bytes: [u8; 16] = rng.gen();
        if bytes[..] != *key.as_bytes() {
            return SecretKey::new(bytes.to_vec()).expect("non-empty");
        }
    }
}

/// Protects every image under every spec, then recovers with the correct
/// key, a one-bit flip of it and an unrelated key. Wrong-key rows compare
/// against the original for randomized models and against the template for
/// obfuscated ones.
pub fn evaluate_suite(
    model: &FlowModel,
    images: &[Image],
    specs: &[ObfuscatorSpec],
    key: &SecretKey,
    seed: u64,
) -> Result<MetricReport> {
    if images.is_empty() {
        return Err(Error::InvalidConfig("evaluation needs at least one image".into()));
    }
    if specs.is_empty() {
        return Err(Error::InvalidConfig("evaluation needs at least one obfuscator".into()));
    }
    let mode = model.config.mode;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(images.len() * specs.len() * RolePair::ALL.len());
    for (i, x) in images.iter().enumerate() {
        for spec in specs {
            let out = pipeline::protect(model, x, Template::Obfuscate(spec), key)?;
            let good = pipeline::recover(model, &out.protected, key)?;
            let one_bit = pipeline::recover(model, &out.protected, &flip_one_bit(key, &mut rng))?;
            let random = pipeline::recover(model, &out.protected, &random_key_except(key, &mut rng))?;
            let wrong_ref = match mode {
                WrongRecoveryMode::Randomized => x,
                WrongRecoveryMode::Obfuscated => &out.template,
            };
            let pairs = [
                (RolePair::Privacy, &out.protected, &out.template),
                (RolePair::Recovery, &good.recovered, x),
                (RolePair::WrongOneBit, &one_bit.recovered, wrong_ref),
                (RolePair::WrongRandom, &random.recovered, wrong_ref),
            ];
            for (pair, a, b) in pairs {
                let (psnr_db, ssim, perc) = compare(a, b)?;
                rows.push(MetricRow {
                    image: i,
                    pair,
                    obfuscator: spec.kind(),
                    mode,
                    psnr_db,
                    ssim,
                    perc,
                });
            }
        }
    }
    Ok(MetricReport { rows })
}
