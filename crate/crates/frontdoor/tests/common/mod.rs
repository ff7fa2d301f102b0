#![allow(dead_code)]

use std::path::{Path, PathBuf};

use semcolor_core::tensor_io::{lab_pixel_to_srgb, rgb_to_lab, write_png, RgbImage};

const SEEDS: [(f32, f32); 5] = [
    (0.2, 0.25),
    (0.75, 0.2),
    (0.5, 0.55),
    (0.15, 0.8),
    (0.8, 0.8),
];
/// Per region: base L, texture amplitude, texture frequency in x and y (per pixel at 256 px).
const LOOKS: [(f32, f32, f32, f32); 5] = [
    (70.0, 6.0, 0.9, 0.0),
    (35.0, 12.0, 0.0, 0.8),
    (55.0, 18.0, 0.5, 0.5),
    (45.0, 3.0, 1.6, 1.1),
    (62.0, 10.0, 0.3, -0.7),
];
const COLORS: [(f32, f32); 5] = [
    (-8.0, -38.0),
    (-42.0, 35.0),
    (55.0, 30.0),
    (15.0, -10.0),
    (5.0, 60.0),
];
const SOFTNESS: f32 = 0.03;

/// Synthetic scene of five textured regions, each with its own hue, blended
/// smoothly into one another. `shift` moves the region layout horizontally.
pub fn regions(w: usize, h: usize, shift: f32) -> RgbImage {
    let scale = 256.0 / w.max(h) as f32;
    RgbImage::from_fn(w, h, |x, y| {
        let (u, v) = (x as f32 / w as f32, y as f32 / h as f32);
        let weights: Vec<f32> = SEEDS
            .iter()
            .map(|&(sx, sy)| (-((u - sx - shift).powi(2) + (v - sy).powi(2)) / SOFTNESS).exp())
            .collect();
        let total: f32 = weights.iter().sum();
        let (mut l, mut a, mut b) = (0.0, 0.0, 0.0);
        for (k, &wk) in weights.iter().enumerate() {
            let (base, amp, fx, fy) = LOOKS[k];
            let t = wk / total;
            l += t * (base + amp * ((x as f32 * fx + y as f32 * fy) * scale).sin());
            a += t * COLORS[k].0;
            b += t * COLORS[k].1;
        }
        lab_pixel_to_srgb([l, a + 4.0 * u, b - 3.0 * v])
    })
    .unwrap()
}

/// Luminance-only copy of `img`.
pub fn grayscale(img: &RgbImage) -> RgbImage {
    let lab = rgb_to_lab(img);
    RgbImage::from_fn(img.width(), img.height(), |x, y| {
        lab_pixel_to_srgb([lab.l[y * img.width() + x], 0.0, 0.0])
    })
    .unwrap()
}

pub fn save(dir: &Path, name: &str, img: &RgbImage) -> PathBuf {
    let path = dir.join(name);
    write_png(img, &path).unwrap();
    path
}

/// A grayscale target and a color reference written as PNGs into `dir`.
pub fn write_pair(dir: &Path, size: usize) -> (PathBuf, PathBuf) {
    let target = save(dir, "target.png", &grayscale(&regions(size, size, 0.08)));
    let reference = save(dir, "reference.png", &regions(size, size, 0.0));
    (target, reference)
}
