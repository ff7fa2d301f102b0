//! Small image products for the editor: label legends and heatmaps.

use serde::Serialize;

use semcolor_core::segmentation::ClassMap;
use semcolor_core::tensor_io::{encode_gray_png, Tensor};
use semcolor_core::Result;

/// Label grid as sent to clients.
#[derive(Debug, Clone, Serialize)]
pub struct LabelGrid {
    pub grid_h: usize,
    pub grid_w: usize,
    pub stride: usize,
    pub labels: Vec<u32>,
}

impl LabelGrid {
    pub fn new(map: &ClassMap, stride: usize) -> Self {
        LabelGrid {
            grid_h: map.grid_h(),
            grid_w: map.grid_w(),
            stride,
            labels: map.labels().to_vec(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LegendEntry {
    pub label: u32,
    pub color: String,
    pub target_cells: usize,
    pub reference_cells: usize,
    pub related: bool,
}

/// Display color for a label: hues spaced by the golden angle so adjacent
/// labels stay distinguishable for any k.
pub fn label_color(label: u32) -> [u8; 3] {
    let h = (label as f64 * 0.618_033_988_749_895).fract() * 6.0;
    let (s, v) = (0.65, 0.92);
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r, g, b].map(|u| ((u + m) * 255.0).round() as u8)
}

pub fn legend(target: &ClassMap, reference: &ClassMap) -> Vec<LegendEntry> {
    let count = |m: &ClassMap, l: u32| m.labels().iter().filter(|&&x| x == l).count();
    (0..target.classes().max(reference.classes()) as u32)
        .map(|label| {
            let [r, g, b] = label_color(label);
            let (t, rf) = (count(target, label), count(reference, label));
            LegendEntry {
                label,
                color: format!("#{r:02x}{g:02x}{b:02x}"),
                target_cells: t,
                reference_cells: rf,
                related: t > 0 && rf > 0,
            }
        })
        .collect()
}

/// Grid-resolution grayscale PNG of a `[H, W]` map with values in [0, 1].
pub fn heatmap_png(map: &Tensor) -> Result<Vec<u8>> {
    let values = map.as_f32().unwrap_or(&[]);
    let (h, w) = match map.shape() {
        [h, w] => (*h, *w),
        _ => (1, values.len()),
    };
    let bytes: Vec<u8> = values
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    encode_gray_png(w, h, &bytes)
}
