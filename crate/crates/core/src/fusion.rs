//! Confidence composition and output assembly.
//!
//! Assembly is deterministic: related cells take their warped chrominance,
//! unrelated cells are filled by a [`FillPolicy`], and the filled grid is
//! upsampled bilinearly to image resolution. Luminance is never modified.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::correspondence::ChannelGrid;
use crate::error::{param, Result};
use crate::features::GridGeometry;
use crate::segmentation::{ClassMap, ConfidenceMap};
use crate::tensor_io::{LabImage, Tensor};

/// Composite correspondence confidence in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct FusedConfidence {
    grid_h: usize,
    grid_w: usize,
    values: Vec<f32>,
}

impl FusedConfidence {
    pub fn new(grid_h: usize, grid_w: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != grid_h * grid_w || values.is_empty() {
            return Err(param(format!(
                "confidence grid {grid_h}x{grid_w} needs {} values",
                grid_h * grid_w
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(param(format!("fused confidence {v} outside [0, 1]")));
        }
        Ok(FusedConfidence {
            grid_h,
            grid_w,
            values,
        })
    }

    pub fn uniform(grid_h: usize, grid_w: usize, value: f32) -> Result<Self> {
        Self::new(grid_h, grid_w, vec![value; grid_h * grid_w])
    }

    pub fn grid_h(&self) -> usize {
        self.grid_h
    }

    pub fn grid_w(&self) -> usize {
        self.grid_w
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_f32(vec![self.grid_h, self.grid_w], self.values.clone()).expect("valid shape")
    }
}

/// How unrelated cells get their chrominance.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FillPolicy {
    /// ab = (0, 0): unrelated regions stay gray.
    Neutral,
    /// Copy ab from the nearest related cell on the grid.
    #[default]
    Propagate,
}

impl std::str::FromStr for FillPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "neutral" => Ok(FillPolicy::Neutral),
            "propagate" => Ok(FillPolicy::Propagate),
            other => Err(format!(
                "unknown fill policy {other:?} (expected neutral or propagate)"
            )),
        }
    }
}

/// `clamp(S_w, 0, 1) * S_cl_T * S'_cl_R`, cell by cell.
pub fn compose_confidence(
    similarity: &Tensor,
    target_conf: &ConfidenceMap,
    warped_ref_conf: &ChannelGrid,
) -> Result<FusedConfidence> {
    let (h, w) = (target_conf.grid_h(), target_conf.grid_w());
    let sim = similarity
        .as_f32()
        .filter(|_| similarity.shape() == [h, w])
        .ok_or_else(|| {
            param(format!(
                "similarity map {:?} does not match {h}x{w}",
                similarity.shape()
            ))
        })?;
    if (
        warped_ref_conf.grid_h(),
        warped_ref_conf.grid_w(),
        warped_ref_conf.channels(),
    ) != (h, w, 1)
    {
        return Err(param(
            "aligned reference confidence must be a 1-channel map on the target grid",
        ));
    }
    let values = sim
        .iter()
        .zip(target_conf.values())
        .zip(warped_ref_conf.values())
        .map(|((&s, &t), &r)| (s.clamp(0.0, 1.0) * t * r.clamp(0.0, 1.0)).clamp(0.0, 1.0))
        .collect();
    FusedConfidence::new(h, w, values)
}

/// Metadata describing an assembled output.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssemblyReport {
    pub policy_requested: FillPolicy,
    pub policy_used: FillPolicy,
    pub related_fraction: f64,
    pub mean_confidence: f64,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Assembled {
    pub image: LabImage,
    pub report: AssemblyReport,
}

/// Index of the nearest related cell for every cell (itself when related).
/// Distance is Euclidean on the grid; ties go to the row-major first cell.
fn nearest_related(related: &[bool], grid_w: usize) -> Vec<usize> {
    let sources: Vec<usize> = (0..related.len()).filter(|&i| related[i]).collect();
    (0..related.len())
        .into_par_iter()
        .map(|i| {
            if related[i] {
                return i;
            }
            let (y, x) = ((i / grid_w) as i64, (i % grid_w) as i64);
            let mut best = (usize::MAX, i64::MAX);
            for &s in &sources {
                let (sy, sx) = ((s / grid_w) as i64, (s % grid_w) as i64);
                let d = (sy - y).pow(2) + (sx - x).pow(2);
                if d < best.1 {
                    best = (s, d);
                }
            }
            best.0
        })
        .collect()
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

/// Bilinear sample of a grid plane at the centre of each image pixel.
fn upsample(plane: &[f64], geom: &GridGeometry) -> Vec<f32> {
    let (gw, gh) = (geom.grid_w, geom.grid_h);
    let axis = |coord: f64, n: usize| {
        let c = coord.clamp(0.0, (n - 1) as f64);
        let i0 = c.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, c - i0 as f64)
    };
    let xs: Vec<_> = (0..geom.width)
        .map(|x| axis(geom.grid_coord_x(x), gw))
        .collect();
    let mut out = vec![0.0f32; geom.width * geom.height];
    out.par_chunks_mut(geom.width)
        .enumerate()
        .for_each(|(y, row)| {
            let (y0, y1, ty) = axis(geom.grid_coord_y(y), gh);
            for (px, &(x0, x1, tx)) in row.iter_mut().zip(&xs) {
                let top = lerp(plane[y0 * gw + x0], plane[y0 * gw + x1], tx);
                let bottom = lerp(plane[y1 * gw + x0], plane[y1 * gw + x1], tx);
                *px = lerp(top, bottom, ty) as f32;
            }
        });
    out
}

/// Builds the output image: target luminance, warped chrominance where the
/// target class is matched, fill elsewhere.
pub fn assemble_output(
    target: &LabImage,
    geom: &GridGeometry,
    warped_ab: &ChannelGrid,
    confidence: &FusedConfidence,
    target_classes: &ClassMap,
    related_classes: &BTreeSet<u32>,
    policy: FillPolicy,
) -> Result<Assembled> {
    if (target.width(), target.height()) != (geom.width, geom.height) {
        return Err(param("target image does not match grid geometry"));
    }
    let grid = (geom.grid_h, geom.grid_w);
    if (warped_ab.grid_h(), warped_ab.grid_w()) != grid || warped_ab.channels() != 2 {
        return Err(param(
            "warped ab must be a 2-channel map on the target grid",
        ));
    }
    if (confidence.grid_h(), confidence.grid_w()) != grid
        || (target_classes.grid_h(), target_classes.grid_w()) != grid
    {
        return Err(param(
            "confidence and class maps must be on the target grid",
        ));
    }

    let cells = geom.cells();
    let related: Vec<bool> = target_classes
        .labels()
        .iter()
        .map(|l| related_classes.contains(l))
        .collect();
    let related_count = related.iter().filter(|&&r| r).count();
    let mut warnings = Vec::new();
    let policy_used = if policy == FillPolicy::Propagate && related_count == 0 {
        warnings.push("no related cells; propagate fill fell back to neutral".to_string());
        FillPolicy::Neutral
    } else {
        policy
    };

    let source: Vec<Option<usize>> = match policy_used {
        FillPolicy::Neutral => (0..cells).map(|i| related[i].then_some(i)).collect(),
        FillPolicy::Propagate => nearest_related(&related, geom.grid_w)
            .into_iter()
            .map(Some)
            .collect(),
    };
    let plane = |ch: usize| -> Vec<f64> {
        source
            .iter()
            .map(|s| s.map_or(0.0, |j| warped_ab.cell(j)[ch] as f64))
            .collect()
    };
    let a = upsample(&plane(0), geom);
    let b = upsample(&plane(1), geom);

    let mean_confidence = confidence.values().iter().map(|&v| v as f64).sum::<f64>()
        / confidence.values().len() as f64;
    Ok(Assembled {
        image: LabImage::new(target.width(), target.height(), target.l.clone(), a, b)?,
        report: AssemblyReport {
            policy_requested: policy,
            policy_used,
            related_fraction: related_count as f64 / cells as f64,
            mean_confidence,
            warnings,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conf(h: usize, w: usize, v: Vec<f32>) -> ConfidenceMap {
        ConfidenceMap::new(h, w, v).unwrap()
    }

    #[test]
    fn compose_examples() {
        let s = Tensor::from_f32(vec![1, 3], vec![1.0, 0.0, 0.8]).unwrap();
        let t = conf(1, 3, vec![1.0, 0.7, 0.9]);
        let r = ChannelGrid::new(1, 3, 1, vec![1.0, 0.0, 0.5]).unwrap();
        let f = compose_confidence(&s, &t, &r).unwrap();
        assert_eq!(f.values()[0], 1.0);
        assert_eq!(f.values()[1], 0.0);
        assert!((f.values()[2] - 0.36).abs() < 1e-6);
    }

    #[test]
    fn negative_similarity_clamps_to_zero() {
        let s = Tensor::from_f32(vec![1, 1], vec![-0.4]).unwrap();
        let f = compose_confidence(
            &s,
            &conf(1, 1, vec![1.0]),
            &ChannelGrid::new(1, 1, 1, vec![1.0]).unwrap(),
        )
        .unwrap();
        assert_eq!(f.values(), &[0.0]);
    }

    #[test]
    fn compose_grid_mismatch() {
        let s = Tensor::from_f32(vec![1, 2], vec![1.0, 1.0]).unwrap();
        let r = ChannelGrid::new(1, 1, 1, vec![1.0]).unwrap();
        assert!(compose_confidence(&s, &conf(1, 1, vec![1.0]), &r).is_err());
    }

    #[test]
    fn compose_bounded_and_monotone() {
        let grid = [0.0f32, 0.2, 0.5, 0.9, 1.0];
        for &a in &grid {
            for &b in &grid {
                for &c in &grid {
                    let s = Tensor::from_f32(vec![1, 1], vec![a]).unwrap();
                    let f = compose_confidence(
                        &s,
                        &conf(1, 1, vec![b]),
                        &ChannelGrid::new(1, 1, 1, vec![c]).unwrap(),
                    )
                    .unwrap()
                    .values()[0];
                    assert!(f <= a && f <= b && f <= c);
                    let s2 = Tensor::from_f32(vec![1, 1], vec![(a + 0.1).min(1.0)]).unwrap();
                    let f2 = compose_confidence(
                        &s2,
                        &conf(1, 1, vec![b]),
                        &ChannelGrid::new(1, 1, 1, vec![c]).unwrap(),
                    )
                    .unwrap()
                    .values()[0];
                    assert!(f2 >= f);
                }
            }
        }
    }

    fn gray(w: usize, h: usize) -> LabImage {
        LabImage::from_luminance(w, h, (0..w * h).map(|i| (i % 97) as f32).collect()).unwrap()
    }

    #[test]
    fn all_unrelated_neutral_is_gray() {
        let img = gray(8, 8);
        let g = GridGeometry::new(8, 8, 4).unwrap();
        let ab = ChannelGrid::new(2, 2, 2, vec![9.0; 8]).unwrap();
        let s = FusedConfidence::uniform(2, 2, 0.0).unwrap();
        let ct = ClassMap::uniform(2, 2, 1, 2).unwrap();
        let out = assemble_output(
            &img,
            &g,
            &ab,
            &s,
            &ct,
            &BTreeSet::from([0]),
            FillPolicy::Neutral,
        )
        .unwrap();
        assert!(out.image.a.iter().chain(&out.image.b).all(|&v| v == 0.0));
        assert_eq!(out.image.l, img.l);
        assert_eq!(out.report.related_fraction, 0.0);

        let out = assemble_output(
            &img,
            &g,
            &ab,
            &s,
            &ct,
            &BTreeSet::from([0]),
            FillPolicy::Propagate,
        )
        .unwrap();
        assert_eq!(out.report.policy_used, FillPolicy::Neutral);
        assert_eq!(out.report.warnings.len(), 1);
        assert!(out.image.a.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn corner_cell_propagates_everywhere() {
        let img = gray(12, 8);
        let g = GridGeometry::new(12, 8, 4).unwrap();
        let mut ab = vec![0.0f32; 12];
        ab[0] = 20.0;
        ab[1] = -7.5;
        let ab = ChannelGrid::new(2, 3, 2, ab).unwrap();
        let labels = vec![0, 1, 1, 1, 1, 1];
        let ct = ClassMap::new(2, 3, 2, labels).unwrap();
        let s = FusedConfidence::uniform(2, 3, 0.5).unwrap();
        let out = assemble_output(
            &img,
            &g,
            &ab,
            &s,
            &ct,
            &BTreeSet::from([0]),
            FillPolicy::Propagate,
        )
        .unwrap();
        assert!(out.image.a.iter().all(|&v| v == 20.0));
        assert!(out.image.b.iter().all(|&v| v == -7.5));
    }

    #[test]
    fn nearest_ties_go_row_major_first() {
        // related cells at (0,0) and (0,2); cell (0,1) is equidistant
        let near = nearest_related(&[true, false, true], 3);
        assert_eq!(near, vec![0, 0, 2]);
    }

    #[test]
    fn identity_at_cell_centres_with_odd_stride() {
        let (w, h, s) = (9, 6, 3);
        let img = gray(w, h);
        let g = GridGeometry::new(w, h, s).unwrap();
        let a: Vec<f32> = (0..6).map(|i| i as f32 * 3.5 - 4.0).collect();
        let b: Vec<f32> = (0..6).map(|i| 10.0 - i as f32).collect();
        let ab = ChannelGrid::from_planes(2, 3, &[&a, &b]).unwrap();
        let ct = ClassMap::uniform(2, 3, 0, 1).unwrap();
        let conf = FusedConfidence::uniform(2, 3, 1.0).unwrap();
        for policy in [FillPolicy::Neutral, FillPolicy::Propagate] {
            let out =
                assemble_output(&img, &g, &ab, &conf, &ct, &BTreeSet::from([0]), policy).unwrap();
            for gy in 0..2 {
                for gx in 0..3 {
                    let (x, y) = (gx * s + 1, gy * s + 1);
                    assert!((out.image.a[y * w + x] - a[gy * 3 + gx]).abs() <= 1e-6);
                    assert!((out.image.b[y * w + x] - b[gy * 3 + gx]).abs() <= 1e-6);
                }
            }
        }
    }
}
