use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imageio::{self, Image, Role};

/// A synthetic face: a two-colour gradient background, an elliptical head,
/// two dark eyes, a mouth and a little pixel noise.
pub fn procedural_face(side: usize, rng: &mut impl Rng) -> Image {
    let s = side as f32;
    let bg0: [f32; 3] = [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)];
    let bg1: [f32; 3] = [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)];
    let tone = rng.gen_range(0.35..0.85f32);
    let skin = [tone, tone * rng.gen_range(0.7..0.9), tone * rng.gen_range(0.55..0.8)];
    let (cx, cy) = (s * rng.gen_range(0.44..0.56), s * rng.gen_range(0.46..0.56));
    let (rx, ry) = (s * rng.gen_range(0.26..0.34), s * rng.gen_range(0.34..0.42));
    let eye_dx = rx * rng.gen_range(0.35..0.5);
    let eye_y = cy - ry * rng.gen_range(0.15..0.3);
    let eye_r = s * rng.gen_range(0.04..0.07);
    let mouth_y = cy + ry * rng.gen_range(0.35..0.5);
    let mouth_w = rx * rng.gen_range(0.3..0.55);
    let mouth_h = s * rng.gen_range(0.02..0.04);
    let noise: Vec<f32> = (0..3 * side * side).map(|_| rng.gen_range(-0.02..0.02)).collect();

    Image::from_fn(side, side, Role::Original, |c, y, x| {
        let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
        let t = py / s;
        let mut v = bg0[c] * (1.0 - t) + bg1[c] * t;
        let e = ((px - cx) / rx).powi(2) + ((py - cy) / ry).powi(2);
        if e <= 1.0 {
            v = skin[c] * (1.0 - 0.25 * e);
            for ex in [cx - eye_dx, cx + eye_dx] {
                let d2 = (px - ex).powi(2) + (py - eye_y).powi(2);
                v *= 1.0 - 0.85 * (-d2 / (2.0 * eye_r * eye_r)).exp();
            }
            if (px - cx).abs() <= mouth_w && (py - mouth_y).abs() <= mouth_h {
                v *= 0.45;
            }
        }
        (v + noise[(c * side + y) * side + x]).clamp(0.0, 1.0)
    })
}

/// `count` procedural faces of `side x side` from `seed`.
pub fn procedural_faces(count: usize, side: usize, seed: u64) -> Vec<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| procedural_face(side, &mut rng)).collect()
}

/// Loads every `.png`/`.ppm` file of a directory, sorted by file name,
/// center-cropped and resized to `side x side`.
pub fn load_folder(dir: impl AsRef<Path>, side: usize) -> Result<Vec<Image>> {
    let dir = dir.as_ref();
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "ppm" | "pnm"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::InvalidConfig(format!("no .png or .ppm images in {}", dir.display())));
    }
    paths.iter().map(|p| imageio::load_image(p, Some(side))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn faces_are_seeded_and_in_range() {
        let a = procedural_faces(3, 32, 9);
        assert_eq!(a, procedural_faces(3, 32, 9));
        assert_ne!(a, procedural_faces(3, 32, 10));
        for img in &a {
            assert_eq!((img.height(), img.width()), (32, 32));
            assert!(img.tensor().data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
