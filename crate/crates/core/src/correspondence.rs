//! Non-local correspondence between target and reference feature grids.
//!
//! Every target cell gets a softmax distribution over a pool of candidate
//! reference cells. In global mode the pool is the whole reference grid; in
//! class-partitioned mode it is the reference cells sharing the target cell's
//! class, and cells whose class is absent from the reference get no
//! candidates at all (unrelated cells). Both modes go through the same
//! row kernel, so a single shared class reproduces global matching exactly.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{param, Result};
use crate::features::FeatureMap;
use crate::segmentation::{intersecting_classes, ClassMap};
use crate::tensor_io::Tensor;

pub const DEFAULT_TAU: f32 = 0.01;

/// Norms below this are treated as zero; such cells have similarity 0 to everything.
pub const NORM_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchMode {
    Global,
    Spc,
}

#[derive(Debug, Clone, Copy)]
struct RowSpan {
    pool: u32,
    offset: usize,
}

/// Soft assignment of target cells to reference cells.
#[derive(Debug, Clone)]
pub struct Correspondence {
    target_grid: (usize, usize),
    reference_grid: (usize, usize),
    tau: f32,
    mode: MatchMode,
    pools: Vec<Vec<u32>>,
    rows: Vec<Option<RowSpan>>,
    weights: Vec<f32>,
    max_sim: Vec<f32>,
}

impl Correspondence {
    pub fn mode(&self) -> MatchMode {
        self.mode
    }

    pub fn tau(&self) -> f32 {
        self.tau
    }

    /// (grid_h, grid_w) of the target.
    pub fn target_grid(&self) -> (usize, usize) {
        self.target_grid
    }

    pub fn reference_grid(&self) -> (usize, usize) {
        self.reference_grid
    }

    pub fn target_cells(&self) -> usize {
        self.rows.len()
    }

    pub fn is_related(&self, i: usize) -> bool {
        self.rows[i].is_some()
    }

    pub fn related_cells(&self) -> usize {
        self.rows.iter().filter(|r| r.is_some()).count()
    }

    /// Candidate reference cells of target cell `i`; empty when unrelated.
    pub fn candidates(&self, i: usize) -> &[u32] {
        match self.rows[i] {
            Some(span) => &self.pools[span.pool as usize],
            None => &[],
        }
    }

    /// Softmax weights aligned with [`candidates`](Self::candidates).
    pub fn weights(&self, i: usize) -> &[f32] {
        match self.rows[i] {
            Some(span) => {
                let len = self.pools[span.pool as usize].len();
                &self.weights[span.offset..span.offset + len]
            }
            None => &[],
        }
    }

    /// Maximum cosine similarity over the candidates, 0 when unrelated.
    pub fn max_sim(&self, i: usize) -> f32 {
        self.max_sim[i]
    }

    pub fn max_sims(&self) -> &[f32] {
        &self.max_sim
    }

    /// Highest-weight candidate, first one on ties.
    pub fn argmax(&self, i: usize) -> Option<u32> {
        let w = self.weights(i);
        let best =
            w.iter()
                .enumerate()
                .fold(None, |best: Option<(usize, f32)>, (j, &v)| match best {
                    Some((_, bv)) if bv >= v => best,
                    _ => Some((j, v)),
                })?;
        Some(self.candidates(i)[best.0])
    }
}

/// Per-cell channel values on a grid, e.g. ab chrominance (2 channels) or a
/// confidence (1 channel).
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelGrid {
    grid_h: usize,
    grid_w: usize,
    channels: usize,
    values: Vec<f32>,
}

/// Output of [`warp_channels`]; unrelated cells are exactly zero.
pub type WarpedChannels = ChannelGrid;

impl ChannelGrid {
    pub fn new(grid_h: usize, grid_w: usize, channels: usize, values: Vec<f32>) -> Result<Self> {
        if channels == 0 || grid_h * grid_w == 0 || values.len() != grid_h * grid_w * channels {
            return Err(param(format!(
                "channel grid {grid_h}x{grid_w}x{channels} needs {} values, got {}",
                grid_h * grid_w * channels,
                values.len()
            )));
        }
        Ok(ChannelGrid {
            grid_h,
            grid_w,
            channels,
            values,
        })
    }

    /// Interleaves equally sized planes.
    pub fn from_planes(grid_h: usize, grid_w: usize, planes: &[&[f32]]) -> Result<Self> {
        let n = grid_h * grid_w;
        if planes.iter().any(|p| p.len() != n) {
            return Err(param("plane length does not match grid"));
        }
        let values = (0..n)
            .flat_map(|i| planes.iter().map(move |p| p[i]))
            .collect();
        Self::new(grid_h, grid_w, planes.len(), values)
    }

    pub fn grid_h(&self) -> usize {
        self.grid_h
    }

    pub fn grid_w(&self) -> usize {
        self.grid_w
    }

    pub fn cells(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn cell(&self, i: usize) -> &[f32] {
        &self.values[i * self.channels..(i + 1) * self.channels]
    }

    /// Values of one channel across all cells.
    pub fn plane(&self, channel: usize) -> Vec<f32> {
        self.values
            .iter()
            .skip(channel)
            .step_by(self.channels)
            .copied()
            .collect()
    }

    /// Rank-3 `[grid_h, grid_w, channels]` f32 tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_f32(
            vec![self.grid_h, self.grid_w, self.channels],
            self.values.clone(),
        )
        .expect("valid shape")
    }
}

/// Cosine similarity, defined as 0 when either vector has (near) zero norm.
pub fn cosine_similarity(u: &[f32], v: &[f32]) -> Result<f32> {
    if u.len() != v.len() {
        return Err(param(format!(
            "vector lengths differ: {} vs {}",
            u.len(),
            v.len()
        )));
    }
    let (mut dot, mut nu, mut nv) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in u.iter().zip(v) {
        let (a, b) = (a as f64, b as f64);
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    let (nu, nv) = (nu.sqrt(), nv.sqrt());
    if nu < NORM_EPSILON || nv < NORM_EPSILON {
        return Ok(0.0);
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0) as f32)
}

fn unit_vectors(f: &FeatureMap) -> Vec<f64> {
    let mut out = Vec::with_capacity(f.values().len());
    for cell in f.iter_cells() {
        let norm = cell
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt();
        if norm < NORM_EPSILON {
            out.extend(std::iter::repeat_n(0.0, cell.len()));
        } else {
            out.extend(cell.iter().map(|&v| v as f64 / norm));
        }
    }
    out
}

fn check_tau(tau: f32) -> Result<()> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(param(format!("tau must be positive and finite, got {tau}")));
    }
    Ok(())
}

/// Softmax over `pool` for one target unit vector. Returns weights and the
/// maximum similarity.
fn softmax_row(
    target: &[f64],
    reference: &[f64],
    dim: usize,
    pool: &[u32],
    tau: f64,
) -> (Vec<f32>, f32) {
    let sims: Vec<f64> = pool
        .iter()
        .map(|&j| {
            let r = &reference[j as usize * dim..(j as usize + 1) * dim];
            target
                .iter()
                .zip(r)
                .map(|(a, b)| a * b)
                .sum::<f64>()
                .clamp(-1.0, 1.0)
        })
        .collect();
    let max = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = sims.iter().map(|s| ((s - max) / tau).exp()).collect();
    let total: f64 = exps.iter().sum();
    (
        exps.iter().map(|e| (e / total) as f32).collect(),
        max as f32,
    )
}

fn build(
    ft: &FeatureMap,
    fr: &FeatureMap,
    pools: Vec<Vec<u32>>,
    row_pools: Vec<Option<u32>>,
    tau: f32,
    mode: MatchMode,
) -> Correspondence {
    let dim = ft.dim();
    let ut = unit_vectors(ft);
    let ur = unit_vectors(fr);
    let tau64 = tau as f64;

    let results: Vec<Option<(Vec<f32>, f32)>> = row_pools
        .par_iter()
        .enumerate()
        .map(|(i, pool)| {
            pool.map(|p| {
                softmax_row(
                    &ut[i * dim..(i + 1) * dim],
                    &ur,
                    dim,
                    &pools[p as usize],
                    tau64,
                )
            })
        })
        .collect();

    let total: usize = results.iter().flatten().map(|(w, _)| w.len()).sum();
    let mut weights = Vec::with_capacity(total);
    let mut rows = Vec::with_capacity(results.len());
    let mut max_sim = Vec::with_capacity(results.len());
    for (pool, result) in row_pools.iter().zip(results) {
        match (pool, result) {
            (Some(p), Some((w, m))) => {
                rows.push(Some(RowSpan {
                    pool: *p,
                    offset: weights.len(),
                }));
                weights.extend_from_slice(&w);
                max_sim.push(m);
            }
            _ => {
                rows.push(None);
                max_sim.push(0.0);
            }
        }
    }

    Correspondence {
        target_grid: (ft.grid_h(), ft.grid_w()),
        reference_grid: (fr.grid_h(), fr.grid_w()),
        tau,
        mode,
        pools,
        rows,
        weights,
        max_sim,
    }
}

fn check_dims(ft: &FeatureMap, fr: &FeatureMap) -> Result<()> {
    if ft.dim() != fr.dim() {
        return Err(param(format!(
            "feature dims differ: target {} vs reference {}",
            ft.dim(),
            fr.dim()
        )));
    }
    Ok(())
}

/// Dense matching of every target cell against every reference cell.
pub fn global_correspondence(ft: &FeatureMap, fr: &FeatureMap, tau: f32) -> Result<Correspondence> {
    check_dims(ft, fr)?;
    check_tau(tau)?;
    if fr.cells() == 0 {
        return Err(param("reference feature map is empty"));
    }
    let pools = vec![(0..fr.cells() as u32).collect()];
    Ok(build(
        ft,
        fr,
        pools,
        vec![Some(0); ft.cells()],
        tau,
        MatchMode::Global,
    ))
}

/// Class-partitioned matching: a target cell only sees reference cells of its
/// own class, and cells whose class does not occur in the reference are
/// unrelated.
pub fn spc_correspondence(
    ft: &FeatureMap,
    fr: &FeatureMap,
    ct: &ClassMap,
    cr: &ClassMap,
    tau: f32,
) -> Result<Correspondence> {
    check_dims(ft, fr)?;
    check_tau(tau)?;
    if (ct.grid_h(), ct.grid_w()) != (ft.grid_h(), ft.grid_w()) {
        return Err(param(format!(
            "target class map {}x{} does not match feature grid {}x{}",
            ct.grid_h(),
            ct.grid_w(),
            ft.grid_h(),
            ft.grid_w()
        )));
    }
    if (cr.grid_h(), cr.grid_w()) != (fr.grid_h(), fr.grid_w()) {
        return Err(param(format!(
            "reference class map {}x{} does not match feature grid {}x{}",
            cr.grid_h(),
            cr.grid_w(),
            fr.grid_h(),
            fr.grid_w()
        )));
    }
    let inter: Vec<u32> = intersecting_classes(ct, cr).into_iter().collect();
    let pools: Vec<Vec<u32>> = inter
        .iter()
        .map(|&c| {
            (0..cr.cells() as u32)
                .filter(|&j| cr.label(j as usize) == c)
                .collect()
        })
        .collect();
    let row_pools = ct
        .labels()
        .iter()
        .map(|l| inter.binary_search(l).ok().map(|p| p as u32))
        .collect();
    Ok(build(ft, fr, pools, row_pools, tau, MatchMode::Spc))
}

/// Weighted sum of reference cell channels for every target cell.
pub fn warp_channels(c: &Correspondence, reference: &ChannelGrid) -> Result<WarpedChannels> {
    if (reference.grid_h, reference.grid_w) != c.reference_grid {
        return Err(param(format!(
            "reference channels {}x{} do not match correspondence reference grid {:?}",
            reference.grid_h, reference.grid_w, c.reference_grid
        )));
    }
    let ch = reference.channels;
    let mut values = vec![0.0f32; c.target_cells() * ch];
    values.par_chunks_mut(ch).enumerate().for_each(|(i, out)| {
        let mut acc = vec![0.0f64; ch];
        for (&j, &w) in c.candidates(i).iter().zip(c.weights(i)) {
            for (a, &v) in acc.iter_mut().zip(reference.cell(j as usize)) {
                *a += w as f64 * v as f64;
            }
        }
        for (o, a) in out.iter_mut().zip(acc) {
            *o = a as f32;
        }
    });
    ChannelGrid::new(c.target_grid.0, c.target_grid.1, ch, values)
}

/// Per-cell maximum similarity as a `[grid_h, grid_w]` f32 tensor.
pub fn similarity_map(c: &Correspondence) -> Tensor {
    Tensor::from_f32(vec![c.target_grid.0, c.target_grid.1], c.max_sim.clone())
        .expect("valid shape")
}

/// Best candidate index per target cell as `[grid_h, grid_w]` i32; -1 when unrelated.
pub fn argmax_map(c: &Correspondence) -> Tensor {
    let data = (0..c.target_cells())
        .map(|i| c.argmax(i).map_or(-1, |j| j as i32))
        .collect();
    Tensor::from_i32(vec![c.target_grid.0, c.target_grid.1], data).expect("valid shape")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct OpCounts {
    pub global: u64,
    pub spc: u64,
}

/// Pairwise similarity evaluations needed by global vs class-partitioned matching.
pub fn count_pairwise_ops(ct: &ClassMap, cr: &ClassMap) -> OpCounts {
    let global = ct.cells() as u64 * cr.cells() as u64;
    let classes = ct.classes().max(cr.classes()).max(
        ct.labels()
            .iter()
            .chain(cr.labels())
            .map(|&l| l as usize + 1)
            .max()
            .unwrap_or(0),
    );
    let mut nt = vec![0u64; classes];
    let mut nr = vec![0u64; classes];
    ct.labels().iter().for_each(|&l| nt[l as usize] += 1);
    cr.labels().iter().for_each(|&l| nr[l as usize] += 1);
    let spc = nt.iter().zip(&nr).map(|(a, b)| a * b).sum();
    OpCounts { global, spc }
}
