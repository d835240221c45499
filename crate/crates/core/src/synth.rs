//! Deterministic procedural test images: a smooth base gradient overlaid
//! with flat rectangles, directional sine textures and noise patches. The
//! mix gives the partition search both easy regions (flat, smooth) and
//! regions that want deep splits (edges, texture boundaries).

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::Plane;
use crate::data::{write_pgm, Split};
use crate::Result;

/// Renders one image. The same (w, h, seed) always gives the same pixels.
pub fn synth_image(w: usize, h: usize, seed: u64) -> Plane {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = vec![0.0f64; w * h];

    // Base: linear or radial gradient.
    let radial = rng.gen_bool(0.3);
    if radial {
        let cx = rng.gen_range(0.0..w as f64);
        let cy = rng.gen_range(0.0..h as f64);
        let scale = rng.gen_range(0.3..1.2) / (w.max(h) as f64);
        let base = rng.gen_range(60.0..190.0);
        let amp = rng.gen_range(-80.0..80.0);
        for y in 0..h {
            for x in 0..w {
                let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                acc[y * w + x] = base + amp * (d * scale).min(1.0);
            }
        }
    } else {
        let gx = rng.gen_range(-0.6..0.6);
        let gy = rng.gen_range(-0.6..0.6);
        let base = rng.gen_range(60.0..190.0);
        for y in 0..h {
            for x in 0..w {
                acc[y * w + x] = base + gx * x as f64 + gy * y as f64;
            }
        }
    }

    // Flat rectangles with hard edges.
    let n_rects = rng.gen_range(4..10);
    for _ in 0..n_rects {
        let rw = rng.gen_range(w / 16..=w / 2).max(2);
        let rh = rng.gen_range(h / 16..=h / 2).max(2);
        let x0 = rng.gen_range(0..w.saturating_sub(rw).max(1));
        let y0 = rng.gen_range(0..h.saturating_sub(rh).max(1));
        let v = rng.gen_range(10.0..245.0);
        for y in y0..(y0 + rh).min(h) {
            for x in x0..(x0 + rw).min(w) {
                acc[y * w + x] = v;
            }
        }
    }

    // Directional sine texture patches.
    let n_waves = rng.gen_range(1..5);
    for _ in 0..n_waves {
        let rw = rng.gen_range(w / 8..=w / 2).max(4);
        let rh = rng.gen_range(h / 8..=h / 2).max(4);
        let x0 = rng.gen_range(0..w.saturating_sub(rw).max(1));
        let y0 = rng.gen_range(0..h.saturating_sub(rh).max(1));
        let fx = rng.gen_range(0.0..1.4);
        let fy = rng.gen_range(0.0..1.4);
        let amp = rng.gen_range(15.0..75.0);
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        for y in y0..(y0 + rh).min(h) {
            for x in x0..(x0 + rw).min(w) {
                acc[y * w + x] += amp * (fx * x as f64 + fy * y as f64 + phase).sin();
            }
        }
    }

    // Low-amplitude noise patches.
    let n_noise = rng.gen_range(1..4);
    for _ in 0..n_noise {
        let rw = rng.gen_range(w / 8..=w / 2).max(2);
        let rh = rng.gen_range(h / 8..=h / 2).max(2);
        let x0 = rng.gen_range(0..w.saturating_sub(rw).max(1));
        let y0 = rng.gen_range(0..h.saturating_sub(rh).max(1));
        let amp = rng.gen_range(3.0..18.0);
        for y in y0..(y0 + rh).min(h) {
            for x in x0..(x0 + rw).min(w) {
                acc[y * w + x] += rng.gen_range(-amp..amp);
            }
        }
    }

    let mut img = Plane::new(w, h, 0);
    for y in 0..h {
        for x in 0..w {
            img.set(x, y, acc[y * w + x].round().clamp(0.0, 255.0) as u8);
        }
    }
    img
}

/// Deterministic per-image seed derivation.
pub fn image_seed(corpus_seed: u64, index: usize) -> u64 {
    corpus_seed ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// 80/10/10 split assignment by index, deterministic and order-stable.
pub fn default_split(index: usize, count: usize) -> Split {
    if count < 3 {
        // Degenerate corpora go entirely to train.
        return Split::Train;
    }
    let val_from = count - (count / 10).max(1) * 2;
    let test_from = count - (count / 10).max(1);
    if index >= test_from {
        Split::Test
    } else if index >= val_from {
        Split::Val
    } else {
        Split::Train
    }
}

/// Writes `count` PGM images plus a manifest listing them with the default
/// split assignment. Returns the manifest path.
pub fn synth_corpus(dir: &Path, count: usize, w: usize, h: usize, seed: u64) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for i in 0..count {
        let img = synth_image(w, h, image_seed(seed, i));
        let name = format!("img_{i:04}.pgm");
        write_pgm(&dir.join(&name), &img)?;
        manifest.push_str(&format!("{name} {w} {h} 1 {}\n", default_split(i, count)));
    }
    let manifest_path = dir.join("manifest.txt");
    std::fs::write(&manifest_path, manifest)?;
    Ok(manifest_path)
}
