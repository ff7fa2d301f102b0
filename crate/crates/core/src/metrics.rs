//! Loss quantities used as evaluation metrics.
//!
//! All reductions are means (not sums) accumulated in f64 in index order, so
//! values are resolution independent and reproducible.

use serde::Serialize;

use crate::error::{data, param, Result};
use crate::features::FeatureMap;
use crate::fusion::FusedConfidence;
use crate::tensor_io::{LabImage, Tensor};

/// Squared L2 distance between feature vectors, per cell, as `[grid_h, grid_w]`.
pub fn perceptual_distance_map(a: &FeatureMap, b: &FeatureMap) -> Result<Tensor> {
    if (a.grid_h(), a.grid_w(), a.dim()) != (b.grid_h(), b.grid_w(), b.dim()) {
        return Err(param(format!(
            "feature maps differ: {}x{}x{} vs {}x{}x{}",
            a.grid_h(),
            a.grid_w(),
            a.dim(),
            b.grid_h(),
            b.grid_w(),
            b.dim()
        )));
    }
    let values = a
        .iter_cells()
        .zip(b.iter_cells())
        .map(|(u, v)| {
            u.iter()
                .zip(v)
                .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
                .sum::<f64>() as f32
        })
        .collect();
    Tensor::from_f32(vec![a.grid_h(), a.grid_w()], values)
}

fn f32_values<'a>(t: &'a Tensor, what: &str) -> Result<&'a [f32]> {
    t.as_f32()
        .ok_or_else(|| param(format!("{what} must be f32")))
}

/// Mean of a perceptual distance map.
pub fn mean_distance(perc_map: &Tensor) -> Result<f64> {
    let v = f32_values(perc_map, "perceptual map")?;
    Ok(v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64)
}

/// Mean over cells of `(1 - S) * perc`.
pub fn smp_loss(perc_map: &Tensor, s: &FusedConfidence) -> Result<f64> {
    let v = f32_values(perc_map, "perceptual map")?;
    if perc_map.shape() != [s.grid_h(), s.grid_w()] {
        return Err(param(format!(
            "perceptual map {:?} does not match confidence grid {}x{}",
            perc_map.shape(),
            s.grid_h(),
            s.grid_w()
        )));
    }
    let sum: f64 = v
        .iter()
        .zip(s.values())
        .map(|(&p, &c)| (1.0 - c as f64) * p as f64)
        .sum();
    Ok(sum / v.len() as f64)
}

/// Mean absolute chrominance difference over all pixels and both ab channels.
pub fn l1_loss(x: &LabImage, y: &LabImage) -> Result<f64> {
    if (x.width(), x.height()) != (y.width(), y.height()) {
        return Err(param(format!(
            "image sizes differ: {}x{} vs {}x{}",
            x.width(),
            x.height(),
            y.width(),
            y.height()
        )));
    }
    let sum: f64 =
        x.a.iter()
            .zip(&y.a)
            .chain(x.b.iter().zip(&y.b))
            .map(|(&p, &q)| (p as f64 - q as f64).abs())
            .sum();
    Ok(sum / (2 * x.len()) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossWeights {
    pub l1: f64,
    /// Weight of the similarity-masked perceptual term (listed as the
    /// perceptual weight in the original training setup).
    pub smp: f64,
    pub adv: f64,
    pub smooth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            l1: 2.0,
            smp: 0.01,
            adv: 0.4,
            smooth: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LossComponents {
    pub perc: f64,
    pub smp: f64,
    pub l1: f64,
}

/// Loss components with their weights. Adversarial and smoothness terms are
/// not computed by this engine and are always 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossReport {
    pub perc: f64,
    pub smp: f64,
    pub l1: f64,
    pub adv: f64,
    pub smooth: f64,
    pub lambda_l1: f64,
    pub lambda_smp: f64,
    pub lambda_adv: f64,
    pub lambda_smooth: f64,
    pub total: f64,
}

pub fn total_loss(c: LossComponents, w: LossWeights) -> Result<LossReport> {
    let inputs = [c.perc, c.smp, c.l1, w.l1, w.smp, w.adv, w.smooth];
    if inputs.iter().any(|v| !v.is_finite()) {
        return Err(data(format!("non-finite loss input in {c:?} / {w:?}")));
    }
    let (adv, smooth) = (0.0, 0.0);
    Ok(LossReport {
        perc: c.perc,
        smp: c.smp,
        l1: c.l1,
        adv,
        smooth,
        lambda_l1: w.l1,
        lambda_smp: w.smp,
        lambda_adv: w.adv,
        lambda_smooth: w.smooth,
        total: w.l1 * c.l1 + w.smp * c.smp + w.adv * adv + w.smooth * smooth,
    })
}
