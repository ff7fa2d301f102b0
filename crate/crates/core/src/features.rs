//! Per-cell feature grids.
//!
//! The built-in extractor produces a 12-dimensional luminance descriptor per
//! `stride x stride` cell. Deep features computed elsewhere can be loaded from
//! SPTN files instead; downstream code only looks at the grid size and
//! dimension, so the two sources are interchangeable.

use std::path::Path;

use rayon::prelude::*;

use crate::error::{data, param, Error, Result};
use crate::tensor_io::{load_tensor, LabImage, Tensor};

/// Dimension of the built-in descriptor.
pub const BUILTIN_DIM: usize = 12;

pub const DEFAULT_STRIDE: usize = 4;

const ORIENTATION_BINS: usize = 8;

/// Mapping between image pixels and feature cells.
///
/// When the image size is not a multiple of the stride the image is padded
/// by edge replication, split as evenly as possible between the two sides.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridGeometry {
    pub width: usize,
    pub height: usize,
    pub stride: usize,
    pub grid_w: usize,
    pub grid_h: usize,
    pub pad_left: usize,
    pub pad_top: usize,
}

impl GridGeometry {
    pub fn new(width: usize, height: usize, stride: usize) -> Result<Self> {
        if stride == 0 {
            return Err(param("stride must be at least 1"));
        }
        if width == 0 || height == 0 {
            return Err(param("image must be nonempty"));
        }
        let grid_w = width.div_ceil(stride);
        let grid_h = height.div_ceil(stride);
        Ok(GridGeometry {
            width,
            height,
            stride,
            grid_w,
            grid_h,
            pad_left: (grid_w * stride - width) / 2,
            pad_top: (grid_h * stride - height) / 2,
        })
    }

    pub fn cells(&self) -> usize {
        self.grid_w * self.grid_h
    }

    /// Samples `plane` at padded coordinates, replicating edges.
    #[inline]
    fn sample(&self, plane: &[f32], px: isize, py: isize) -> f32 {
        let x = (px - self.pad_left as isize).clamp(0, self.width as isize - 1) as usize;
        let y = (py - self.pad_top as isize).clamp(0, self.height as isize - 1) as usize;
        plane[y * self.width + x]
    }

    /// Mean of `plane` over a square window of `side` padded pixels whose
    /// top-left corner is (`x0`, `y0`).
    fn window_mean(&self, plane: &[f32], x0: isize, y0: isize, side: usize) -> f64 {
        let mut sum = 0.0f64;
        for dy in 0..side as isize {
            for dx in 0..side as isize {
                sum += self.sample(plane, x0 + dx, y0 + dy) as f64;
            }
        }
        sum / (side * side) as f64
    }

    /// Averages an image-resolution plane down to one value per cell.
    pub fn cell_means(&self, plane: &[f32]) -> Vec<f32> {
        assert_eq!(
            plane.len(),
            self.width * self.height,
            "plane does not match geometry"
        );
        let s = self.stride;
        (0..self.cells())
            .map(|c| {
                let (gy, gx) = (c / self.grid_w, c % self.grid_w);
                self.window_mean(plane, (gx * s) as isize, (gy * s) as isize, s) as f32
            })
            .collect()
    }

    /// Continuous grid coordinate of the centre of image pixel `x` (resp. `y`).
    pub fn grid_coord_x(&self, x: usize) -> f64 {
        (x as f64 + self.pad_left as f64 + 0.5) / self.stride as f64 - 0.5
    }

    pub fn grid_coord_y(&self, y: usize) -> f64 {
        (y as f64 + self.pad_top as f64 + 0.5) / self.stride as f64 - 0.5
    }

    /// Cell containing image pixel (`x`, `y`).
    pub fn cell_of(&self, x: usize, y: usize) -> usize {
        let gx = (x + self.pad_left) / self.stride;
        let gy = (y + self.pad_top) / self.stride;
        gy * self.grid_w + gx
    }
}

/// Feature vectors on a `grid_h x grid_w` grid, row-major, `dim` values per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    grid_h: usize,
    grid_w: usize,
    dim: usize,
    stride: usize,
    values: Vec<f32>,
}

impl FeatureMap {
    /// Validates shape, finiteness and that some cell carries energy.
    pub fn new(
        grid_h: usize,
        grid_w: usize,
        dim: usize,
        stride: usize,
        values: Vec<f32>,
    ) -> Result<Self> {
        if grid_h == 0 || grid_w == 0 || dim == 0 {
            return Err(param(format!(
                "feature grid {grid_h}x{grid_w}x{dim} must be nonempty"
            )));
        }
        if grid_h * grid_w * dim != values.len() {
            return Err(param(format!(
                "feature grid {grid_h}x{grid_w}x{dim} needs {} values, got {}",
                grid_h * grid_w * dim,
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            let cell = pos / dim;
            return Err(data(format!(
                "non-finite feature value at cell ({}, {}), channel {}",
                cell / grid_w,
                cell % grid_w,
                pos % dim
            )));
        }
        if values.iter().all(|&v| v == 0.0) {
            return Err(data("no feature energy"));
        }
        Ok(FeatureMap {
            grid_h,
            grid_w,
            dim,
            stride,
            values,
        })
    }

    pub fn grid_h(&self) -> usize {
        self.grid_h
    }

    pub fn grid_w(&self) -> usize {
        self.grid_w
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn cells(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn cell(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter_cells(&self) -> std::slice::ChunksExact<'_, f32> {
        self.values.chunks_exact(self.dim)
    }

    /// Wraps a rank-3 `[H, W, D]` f32 tensor.
    pub fn from_tensor(t: &Tensor, stride: usize) -> Result<Self> {
        let shape = t.shape();
        if shape.len() != 3 {
            return Err(Error::Format(format!(
                "feature tensor must be rank 3 [H, W, D], got shape {shape:?}"
            )));
        }
        let values = t.as_f32().ok_or_else(|| {
            Error::Format(format!("feature tensor must be f32, got {:?}", t.dtype()))
        })?;
        Self::new(shape[0], shape[1], shape[2], stride, values.to_vec())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_f32(
            vec![self.grid_h, self.grid_w, self.dim],
            self.values.clone(),
        )
        .expect("feature map shape is valid")
    }
}

/// Loads externally computed features from an SPTN `[H, W, D]` f32 file.
pub fn load_external_features(
    path: impl AsRef<Path>,
    expected_stride: usize,
) -> Result<FeatureMap> {
    if expected_stride == 0 {
        return Err(param("stride must be at least 1"));
    }
    FeatureMap::from_tensor(&load_tensor(path)?, expected_stride)
}

/// Gradient orientation bin in [0, 8), 45 degrees per bin, counter-clockwise
/// from +x. Uses only sign and magnitude comparisons so that rotating a
/// gradient by a quarter turn shifts its bin by exactly two.
fn orientation_bin(gx: f32, gy: f32) -> usize {
    let (quadrant, u, v) = if gx > 0.0 && gy >= 0.0 {
        (0, gx, gy)
    } else if gx <= 0.0 && gy > 0.0 {
        (1, gy, -gx)
    } else if gx < 0.0 && gy <= 0.0 {
        (2, -gx, -gy)
    } else {
        (3, -gy, gx)
    };
    2 * quadrant + usize::from(v >= u)
}

/// Unnormalized descriptor for every cell, `BUILTIN_DIM` values per cell.
pub(crate) fn raw_descriptors(img: &LabImage, geom: &GridGeometry) -> Vec<f32> {
    let plane = &img.l;
    let s = geom.stride;
    let mut out = vec![0.0f32; geom.cells() * BUILTIN_DIM];
    out.par_chunks_mut(BUILTIN_DIM)
        .enumerate()
        .for_each(|(c, desc)| {
            let (gy, gx) = (c / geom.grid_w, c % geom.grid_w);
            let (x0, y0) = ((gx * s) as isize, (gy * s) as isize);

            let mut sum = 0.0f64;
            let mut sum_sq = 0.0f64;
            let mut hist = [0.0f64; ORIENTATION_BINS];
            for py in y0..y0 + s as isize {
                for px in x0..x0 + s as isize {
                    let v = geom.sample(plane, px, py) as f64;
                    sum += v;
                    sum_sq += v * v;
                    let dx = geom.sample(plane, px + 1, py) - geom.sample(plane, px - 1, py);
                    let dy = geom.sample(plane, px, py + 1) - geom.sample(plane, px, py - 1);
                    if dx != 0.0 || dy != 0.0 {
                        hist[orientation_bin(dx, dy)] += (dx as f64).hypot(dy as f64);
                    }
                }
            }
            let n = (s * s) as f64;
            let mean = sum / n;
            desc[0] = mean as f32;
            desc[1] = (sum_sq / n - mean * mean).max(0.0).sqrt() as f32;
            for (d, h) in desc[2..2 + ORIENTATION_BINS].iter_mut().zip(hist) {
                *d = (h / n) as f32;
            }
            for (slot, mult) in [(10, 2), (11, 4)] {
                let side = mult * s;
                let off = ((mult - 1) * s / 2) as isize;
                desc[slot] = geom.window_mean(plane, x0 - off, y0 - off, side) as f32;
            }
        });
    out
}

/// Extracts the built-in descriptor from the L channel of `img`.
///
/// Channels: mean L, std L, 8-bin magnitude-weighted gradient orientation
/// histogram, mean L over windows of 2x and 4x the cell size. Every channel is
/// z-normalized over the image. Constant channels become 0, except the mean
/// channel, which falls back to `L / 100` so a flat nonzero image still yields
/// usable features.
pub fn extract_builtin_features(img: &LabImage, stride: usize) -> Result<FeatureMap> {
    let geom = GridGeometry::new(img.width(), img.height(), stride)?;
    let mut values = raw_descriptors(img, &geom);
    let cells = geom.cells();
    for ch in 0..BUILTIN_DIM {
        let mean = (0..cells)
            .map(|c| values[c * BUILTIN_DIM + ch] as f64)
            .sum::<f64>()
            / cells as f64;
        let var = (0..cells)
            .map(|c| {
                let d = values[c * BUILTIN_DIM + ch] as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / cells as f64;
        let sd = var.sqrt();
        let degenerate = sd <= 1e-9 * (1.0 + mean.abs());
        for c in 0..cells {
            let v = &mut values[c * BUILTIN_DIM + ch];
            *v = match (degenerate, ch) {
                (true, 0) => (mean / 100.0) as f32,
                (true, _) => 0.0,
                (false, _) => ((*v as f64 - mean) / sd) as f32,
            };
        }
    }
    FeatureMap::new(geom.grid_h, geom.grid_w, BUILTIN_DIM, stride, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lab_from_fn(w: usize, h: usize, f: impl Fn(usize, usize) -> f32) -> LabImage {
        let l = (0..w * h).map(|i| f(i % w, i / w)).collect();
        LabImage::from_luminance(w, h, l).unwrap()
    }

    fn textured(x: usize, y: usize) -> f32 {
        let (xf, yf) = (x as f32, y as f32);
        (50.0 + 20.0 * (xf * 0.37).sin() * (yf * 0.21).cos() + 0.3 * xf - 0.1 * yf
            + ((x * 7 + y * 13) % 5) as f32)
            .clamp(0.0, 100.0)
    }

    #[test]
    fn shape_256_stride_4() {
        let img = lab_from_fn(256, 256, textured);
        let f = extract_builtin_features(&img, 4).unwrap();
        assert_eq!((f.grid_h(), f.grid_w(), f.dim()), (64, 64, 12));
    }

    #[test]
    fn padding_geometry() {
        let g = GridGeometry::new(10, 7, 4).unwrap();
        assert_eq!((g.grid_w, g.grid_h, g.pad_left, g.pad_top), (3, 2, 1, 0));
        let g = GridGeometry::new(1, 1, 4).unwrap();
        assert_eq!((g.grid_w, g.grid_h, g.pad_left, g.pad_top), (1, 1, 1, 1));
        assert_eq!(g.cell_of(0, 0), 0);
        assert!(GridGeometry::new(4, 4, 0).is_err());
    }

    #[test]
    fn constant_image_is_valid_with_zero_variance_channels() {
        let img = lab_from_fn(16, 16, |_, _| 42.0);
        let f = extract_builtin_features(&img, 4).unwrap();
        for cell in f.iter_cells() {
            assert!((cell[0] - 0.42).abs() < 1e-6);
            assert!(cell[1..].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn zero_image_has_no_energy() {
        let img = lab_from_fn(8, 8, |_, _| 0.0);
        let err = extract_builtin_features(&img, 4).unwrap_err();
        assert!(err.to_string().contains("no feature energy"), "{err}");
    }

    #[test]
    fn orientation_bins_rotate_by_two() {
        let vectors = [
            (1.0, 0.0),
            (1.0, 1.0),
            (0.0, 1.0),
            (-2.0, 0.5),
            (-1.0, -1.0),
            (0.3, -4.0),
            (3.0, -3.0),
        ];
        for (x, y) in vectors {
            let b = orientation_bin(x, y);
            assert_eq!(orientation_bin(-y, x), (b + 2) % 8, "({x}, {y})");
        }
        assert_eq!(orientation_bin(1.0, 0.0), 0);
        assert_eq!(orientation_bin(1.0, 1.0), 1);
        assert_eq!(orientation_bin(-1.0, -0.5), 4);
    }

    #[test]
    fn rotation_permutes_histogram_by_two_bins() {
        let n = 32;
        let img = lab_from_fn(n, n, textured);
        // rotated(x', y') = img(n - 1 - y', x'); gradients turn clockwise
        let rot = lab_from_fn(n, n, |x, y| textured(n - 1 - y, x));
        let g = GridGeometry::new(n, n, 4).unwrap();
        let a = raw_descriptors(&img, &g);
        let b = raw_descriptors(&rot, &g);
        let gw = g.grid_w;
        for cy in 0..g.grid_h {
            for cx in 0..gw {
                let rc = cy * gw + cx;
                let oc = cx * gw + (gw - 1 - cy);
                for bin in 0..8 {
                    let new = b[rc * BUILTIN_DIM + 2 + bin];
                    let old = a[oc * BUILTIN_DIM + 2 + (bin + 2) % 8];
                    assert!(
                        (new - old).abs() <= 1e-4 * (1.0 + old.abs()),
                        "cell {rc} bin {bin}: {new} vs {old}"
                    );
                }
            }
        }
    }

    #[test]
    fn shift_by_one_stride_shifts_interior_cells() {
        let (w, h, s) = (40, 32, 4);
        let img = lab_from_fn(w, h, textured);
        let shifted = lab_from_fn(w, h, |x, y| textured((x + w - s) % w, y));
        let g = GridGeometry::new(w, h, s).unwrap();
        let a = raw_descriptors(&img, &g);
        let b = raw_descriptors(&shifted, &g);
        // shifted(x) = img(x - s) for x >= s, so shifted cell gx holds img cell gx - 1.
        // Cells whose 4x window stays inside both images are compared.
        for gy in 2..g.grid_h - 2 {
            for gx in 3..g.grid_w - 2 {
                let bc = gy * g.grid_w + gx;
                let ac = gy * g.grid_w + gx - 1;
                assert_eq!(
                    &b[bc * BUILTIN_DIM..(bc + 1) * BUILTIN_DIM],
                    &a[ac * BUILTIN_DIM..(ac + 1) * BUILTIN_DIM]
                );
            }
        }
    }

    #[test]
    fn external_features_checks() {
        let dir = tempfile::tempdir().unwrap();
        let ok = dir.path().join("ok.sptn");
        let t = Tensor::from_f32(vec![2, 3, 4], (0..24).map(|v| v as f32).collect()).unwrap();
        crate::tensor_io::save_tensor(&t, &ok).unwrap();
        let f = load_external_features(&ok, 4).unwrap();
        assert_eq!((f.grid_h(), f.grid_w(), f.dim()), (2, 3, 4));
        assert_eq!(f.cell(1), &[4.0, 5.0, 6.0, 7.0]);

        let rank2 = dir.path().join("rank2.sptn");
        crate::tensor_io::save_tensor(
            &Tensor::from_f32(vec![4, 6], vec![1.0; 24]).unwrap(),
            &rank2,
        )
        .unwrap();
        assert!(matches!(
            load_external_features(&rank2, 4),
            Err(Error::Format(_))
        ));

        let mut vals: Vec<f32> = vec![1.0; 24];
        vals[4 * 4 + 2] = f32::NAN;
        let nan = dir.path().join("nan.sptn");
        crate::tensor_io::save_tensor(&Tensor::from_f32(vec![2, 3, 4], vals).unwrap(), &nan)
            .unwrap();
        let err = load_external_features(&nan, 4).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
        assert!(err.to_string().contains("cell (1, 1)"), "{err}");
    }

    #[test]
    fn deterministic() {
        let img = lab_from_fn(33, 29, textured);
        assert_eq!(
            extract_builtin_features(&img, 4).unwrap(),
            extract_builtin_features(&img, 4).unwrap()
        );
    }
}
