//! sRGB <-> CIELAB (D65) conversion.

use crate::error::{param, Result};

// Linear sRGB -> XYZ, D65.
const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

const XYZ_TO_RGB: [[f64; 3]; 3] = [
    [3.2404542, -1.5371385, -0.4985314],
    [-0.9692660, 1.8760108, 0.0415560],
    [0.0556434, -0.2040259, 1.0572252],
];

// Reference white, taken as the row sums of RGB_TO_XYZ so that sRGB white maps
// to a = b = 0.
const WHITE: [f64; 3] = [0.9504700, 1.0000001, 1.0888300];

const EPSILON: f64 = 216.0 / 24389.0;
const KAPPA: f64 = 24389.0 / 27.0;

/// 8-bit sRGB image, interleaved RGB.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(param(format!(
                "image dimensions {width}x{height} must be positive"
            )));
        }
        if pixels.len() != 3 * width * height {
            return Err(param(format!(
                "rgb buffer has {} bytes, expected {}",
                pixels.len(),
                3 * width * height
            )));
        }
        Ok(RgbImage {
            width,
            height,
            pixels,
        })
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        f: impl Fn(usize, usize) -> [u8; 3],
    ) -> Result<Self> {
        let mut pixels = Vec::with_capacity(3 * width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.extend_from_slice(&f(x, y));
            }
        }
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let o = 3 * (y * self.width + x);
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }
}

/// Planar CIELAB image. `l` is in [0, 100]; `a` and `b` in [-128, 127].
#[derive(Debug, Clone, PartialEq)]
pub struct LabImage {
    width: usize,
    height: usize,
    pub l: Vec<f32>,
    pub a: Vec<f32>,
    pub b: Vec<f32>,
}

impl LabImage {
    pub fn new(width: usize, height: usize, l: Vec<f32>, a: Vec<f32>, b: Vec<f32>) -> Result<Self> {
        let n = width * height;
        if n == 0 {
            return Err(param(format!(
                "image dimensions {width}x{height} must be positive"
            )));
        }
        if l.len() != n || a.len() != n || b.len() != n {
            return Err(param(format!("lab planes must each hold {n} values")));
        }
        Ok(LabImage {
            width,
            height,
            l,
            a,
            b,
        })
    }

    /// Luminance-only image with zero chrominance.
    pub fn from_luminance(width: usize, height: usize, l: Vec<f32>) -> Result<Self> {
        let n = l.len();
        Self::new(width, height, l, vec![0.0; n], vec![0.0; n])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn linear_to_srgb(c: f64) -> f64 {
    if c <= 0.0031308 {
        12.92 * c
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

fn lab_f(t: f64) -> f64 {
    if t > EPSILON {
        t.cbrt()
    } else {
        (KAPPA * t + 16.0) / 116.0
    }
}

fn lab_f_inv(f: f64) -> f64 {
    let f3 = f * f * f;
    if f3 > EPSILON {
        f3
    } else {
        (116.0 * f - 16.0) / KAPPA
    }
}

fn mul(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

/// Converts a single 8-bit sRGB pixel to (L, a, b).
pub fn srgb_pixel_to_lab(rgb: [u8; 3]) -> [f32; 3] {
    let lin = rgb.map(|c| srgb_to_linear(c as f64 / 255.0));
    let xyz = mul(&RGB_TO_XYZ, lin);
    let fx = lab_f(xyz[0] / WHITE[0]);
    let fy = lab_f(xyz[1] / WHITE[1]);
    let fz = lab_f(xyz[2] / WHITE[2]);
    let l = 116.0 * fy - 16.0;
    let a = 500.0 * (fx - fy);
    let b = 200.0 * (fy - fz);
    [
        l.clamp(0.0, 100.0) as f32,
        a.clamp(-128.0, 127.0) as f32,
        b.clamp(-128.0, 127.0) as f32,
    ]
}

/// Converts (L, a, b) to an 8-bit sRGB pixel, clamping out-of-gamut values.
pub fn lab_pixel_to_srgb(lab: [f32; 3]) -> [u8; 3] {
    let (l, a, b) = (lab[0] as f64, lab[1] as f64, lab[2] as f64);
    let fy = (l + 16.0) / 116.0;
    let fx = fy + a / 500.0;
    let fz = fy - b / 200.0;
    let y = if l > KAPPA * EPSILON {
        fy * fy * fy
    } else {
        l / KAPPA
    };
    let xyz = [
        lab_f_inv(fx) * WHITE[0],
        y * WHITE[1],
        lab_f_inv(fz) * WHITE[2],
    ];
    mul(&XYZ_TO_RGB, xyz).map(|c| {
        (linear_to_srgb(c.clamp(0.0, 1.0)) * 255.0)
            .round()
            .clamp(0.0, 255.0) as u8
    })
}

pub fn rgb_to_lab(img: &RgbImage) -> LabImage {
    let n = img.width * img.height;
    let (mut l, mut a, mut b) = (
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    );
    for px in img.pixels.chunks_exact(3) {
        let lab = srgb_pixel_to_lab([px[0], px[1], px[2]]);
        l.push(lab[0]);
        a.push(lab[1]);
        b.push(lab[2]);
    }
    LabImage {
        width: img.width,
        height: img.height,
        l,
        a,
        b,
    }
}

pub fn lab_to_rgb(img: &LabImage) -> RgbImage {
    let mut pixels = Vec::with_capacity(3 * img.len());
    for i in 0..img.len() {
        pixels.extend_from_slice(&lab_pixel_to_srgb([img.l[i], img.a[i], img.b[i]]));
    }
    RgbImage {
        width: img.width,
        height: img.height,
        pixels,
    }
}
