//! Pseudo-class segmentation: cluster centers, class assignment with
//! confidences, category reduction and user remapping.

mod kmeans;

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{data, param, Error, Result};
use crate::features::FeatureMap;
use crate::tensor_io::Tensor;

use kmeans::{kmeans, sq_dist, Points};
pub use kmeans::{MAX_ITERATIONS, RELATIVE_TOLERANCE};

pub const DEFAULT_INITIAL_CLASSES: usize = 27;
pub const DEFAULT_REDUCED_CLASSES: usize = 22;

/// Cluster centers, `count x dim`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Centers {
    count: usize,
    dim: usize,
    vectors: Vec<f32>,
}

impl Centers {
    pub fn new(count: usize, dim: usize, vectors: Vec<f32>) -> Result<Self> {
        if count == 0 || dim == 0 || vectors.len() != count * dim {
            return Err(param(format!(
                "centers need {count}x{dim} values, got {}",
                vectors.len()
            )));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(data("non-finite center"));
        }
        Ok(Centers {
            count,
            dim,
            vectors,
        })
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vectors(&self) -> &[f32] {
        &self.vectors
    }

    pub fn center(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    fn as_f64(&self) -> Vec<f64> {
        self.vectors.iter().map(|&v| v as f64).collect()
    }
}

/// Per-cell class labels in `[0, classes)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassMap {
    grid_h: usize,
    grid_w: usize,
    classes: usize,
    labels: Vec<u32>,
}

impl ClassMap {
    pub fn new(grid_h: usize, grid_w: usize, classes: usize, labels: Vec<u32>) -> Result<Self> {
        if grid_h * grid_w != labels.len() || labels.is_empty() {
            return Err(param(format!(
                "class map {grid_h}x{grid_w} needs {} labels, got {}",
                grid_h * grid_w,
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(data(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        Ok(ClassMap {
            grid_h,
            grid_w,
            classes,
            labels,
        })
    }

    /// Same label everywhere.
    pub fn uniform(grid_h: usize, grid_w: usize, label: u32, classes: usize) -> Result<Self> {
        Self::new(grid_h, grid_w, classes, vec![label; grid_h * grid_w])
    }

    pub fn grid_h(&self) -> usize {
        self.grid_h
    }

    pub fn grid_w(&self) -> usize {
        self.grid_w
    }

    pub fn cells(&self) -> usize {
        self.labels.len()
    }

    /// Current class count `k`.
    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> u32 {
        self.labels[i]
    }

    pub fn present(&self) -> BTreeSet<u32> {
        self.labels.iter().copied().collect()
    }

    pub fn with_classes(mut self, classes: usize) -> Result<Self> {
        if let Some(bad) = self.labels.iter().find(|&&l| l as usize >= classes) {
            return Err(data(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        self.classes = classes;
        Ok(self)
    }

    /// Rank-2 i32 tensor `[grid_h, grid_w]`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_i32(
            vec![self.grid_h, self.grid_w],
            self.labels.iter().map(|&l| l as i32).collect(),
        )
        .expect("class map shape is valid")
    }

    /// Imports an externally computed segmentation. The class count is one
    /// more than the largest label.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let shape = t.shape();
        if shape.len() != 2 {
            return Err(Error::Format(format!(
                "class map must be rank 2, got shape {shape:?}"
            )));
        }
        let raw = t
            .as_i32()
            .ok_or_else(|| Error::Format(format!("class map must be i32, got {:?}", t.dtype())))?;
        if let Some(pos) = raw.iter().position(|&l| l < 0) {
            return Err(data(format!("negative label {} at cell {pos}", raw[pos])));
        }
        let labels: Vec<u32> = raw.iter().map(|&l| l as u32).collect();
        let classes = labels.iter().max().map_or(1, |&m| m as usize + 1);
        Self::new(shape[0], shape[1], classes, labels)
    }
}

/// Classes present in both maps.
pub fn intersecting_classes(target: &ClassMap, reference: &ClassMap) -> BTreeSet<u32> {
    let r = reference.present();
    target
        .present()
        .into_iter()
        .filter(|l| r.contains(l))
        .collect()
}

/// Per-cell classification confidence in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMap {
    grid_h: usize,
    grid_w: usize,
    values: Vec<f32>,
}

impl ConfidenceMap {
    pub fn new(grid_h: usize, grid_w: usize, values: Vec<f32>) -> Result<Self> {
        if grid_h * grid_w != values.len() || values.is_empty() {
            return Err(param(format!(
                "confidence map {grid_h}x{grid_w} needs {} values",
                grid_h * grid_w
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(data(format!("confidence {v} outside [0, 1]")));
        }
        Ok(ConfidenceMap {
            grid_h,
            grid_w,
            values,
        })
    }

    pub fn ones(grid_h: usize, grid_w: usize) -> Self {
        ConfidenceMap {
            grid_h,
            grid_w,
            values: vec![1.0; grid_h * grid_w],
        }
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

/// Many-to-one merge of `original_count` classes onto `reduced_count`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReductionTable {
    original_count: usize,
    reduced_count: usize,
    mapping: Vec<u32>,
}

impl ReductionTable {
    /// Checks that the mapping is surjective onto `[0, reduced_count)`.
    pub fn new(reduced_count: usize, mapping: Vec<u32>) -> Result<Self> {
        if mapping.is_empty() || reduced_count == 0 {
            return Err(param("reduction table must be nonempty"));
        }
        let mut hit = vec![false; reduced_count];
        for &m in &mapping {
            *hit.get_mut(m as usize).ok_or_else(|| {
                param(format!(
                    "mapping value {m} out of range for {reduced_count} classes"
                ))
            })? = true;
        }
        if let Some(missing) = hit.iter().position(|h| !h) {
            return Err(param(format!(
                "mapping is not surjective: class {missing} unused"
            )));
        }
        Ok(ReductionTable {
            original_count: mapping.len(),
            reduced_count,
            mapping,
        })
    }

    pub fn identity(n: usize) -> Self {
        ReductionTable {
            original_count: n,
            reduced_count: n,
            mapping: (0..n as u32).collect(),
        }
    }

    pub fn original_count(&self) -> usize {
        self.original_count
    }

    pub fn reduced_count(&self) -> usize {
        self.reduced_count
    }

    pub fn mapping(&self) -> &[u32] {
        &self.mapping
    }

    /// `self` followed by `next`.
    pub fn then(&self, next: &ReductionTable) -> Result<ReductionTable> {
        if next.original_count != self.reduced_count {
            return Err(param(format!(
                "cannot compose {}->{} with {}->{}",
                self.original_count, self.reduced_count, next.original_count, next.reduced_count
            )));
        }
        ReductionTable::new(
            next.reduced_count,
            self.mapping
                .iter()
                .map(|&m| next.mapping[m as usize])
                .collect(),
        )
    }
}

/// User label overrides, applied after reduction and before matching.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemapSpec {
    #[serde(default)]
    pub target: BTreeMap<u32, u32>,
    #[serde(default)]
    pub reference: BTreeMap<u32, u32>,
}

impl RemapSpec {
    pub fn is_empty(&self) -> bool {
        self.target.is_empty() && self.reference.is_empty()
    }

    /// Every label on both sides mapped onto `label`.
    pub fn collapse_all(classes: usize, label: u32) -> Self {
        let all: BTreeMap<u32, u32> = (0..classes as u32).map(|l| (l, label)).collect();
        RemapSpec {
            target: all.clone(),
            reference: all,
        }
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        for (side, map) in [("target", &self.target), ("reference", &self.reference)] {
            validate_overrides(side, map, classes)?;
        }
        Ok(())
    }
}

fn validate_overrides(side: &str, overrides: &BTreeMap<u32, u32>, classes: usize) -> Result<()> {
    for (&from, &to) in overrides {
        if from as usize >= classes || to as usize >= classes {
            return Err(param(format!(
                "{side} override {from} -> {to}: labels must be below k = {classes}"
            )));
        }
    }
    Ok(())
}

fn stack_points(maps: &[&FeatureMap]) -> Result<(Vec<f64>, usize)> {
    let dim = maps
        .first()
        .ok_or_else(|| param("no feature maps to fit"))?
        .dim();
    if let Some(m) = maps.iter().find(|m| m.dim() != dim) {
        return Err(param(format!(
            "feature dimension mismatch: {} vs {dim}",
            m.dim()
        )));
    }
    Ok((
        maps.iter()
            .flat_map(|m| m.values().iter().map(|&v| v as f64))
            .collect(),
        dim,
    ))
}

/// Number of distinct feature vectors across `maps`, an upper bound on the
/// cluster count `fit_centers` can honour.
pub fn distinct_cells(maps: &[&FeatureMap]) -> Result<usize> {
    let (data, dim) = stack_points(maps)?;
    Ok(kmeans::distinct_count(&Points { data: &data, dim }))
}

/// Fits `n` centers jointly over every cell of `maps`, so all maps share one
/// label space.
pub fn fit_centers(maps: &[&FeatureMap], n: usize, seed: u64) -> Result<Centers> {
    let (data, dim) = stack_points(maps)?;
    let cells = data.len() / dim;
    if n < 1 || n > cells {
        return Err(param(format!(
            "initial class count {n} must be in [1, {cells}]"
        )));
    }
    let fit = kmeans(&Points { data: &data, dim }, n, seed)?;
    log::debug!(
        "fitted {n} centers in {} iterations, inertia {:.6}",
        fit.iterations,
        fit.inertia
    );
    Centers::new(n, dim, fit.centers.iter().map(|&v| v as f32).collect())
}

/// Labels each cell with its nearest center (ties to the lowest index) and a
/// margin confidence `1 - d1 / d2`.
pub fn assign_classes(f: &FeatureMap, c: &Centers) -> Result<(ClassMap, ConfidenceMap)> {
    assign_reduced(f, c, &ReductionTable::identity(c.count()))
}

/// Assignment under a reduction table. The label is the reduced class of the
/// nearest center; the confidence margin compares the nearest center against
/// the nearest center of any other reduced class. With an identity table this
/// is exactly [`assign_classes`].
pub fn assign_reduced(
    f: &FeatureMap,
    c: &Centers,
    table: &ReductionTable,
) -> Result<(ClassMap, ConfidenceMap)> {
    if f.dim() != c.dim() {
        return Err(param(format!(
            "feature dim {} does not match center dim {}",
            f.dim(),
            c.dim()
        )));
    }
    if table.original_count() != c.count() {
        return Err(param(format!(
            "reduction table covers {} classes but there are {} centers",
            table.original_count(),
            c.count()
        )));
    }
    let centers = c.as_f64();
    let dim = c.dim();
    let k = table.reduced_count();
    let groups = table.mapping();

    let (labels, conf): (Vec<u32>, Vec<f32>) = (0..f.cells())
        .into_par_iter()
        .map(|i| {
            let p: Vec<f64> = f.cell(i).iter().map(|&v| v as f64).collect();
            let mut best = (0usize, f64::INFINITY);
            let mut per_group = vec![f64::INFINITY; k];
            for (ci, center) in centers.chunks_exact(dim).enumerate() {
                let d = sq_dist(&p, center);
                if d < best.1 {
                    best = (ci, d);
                }
                let g = &mut per_group[groups[ci] as usize];
                if d < *g {
                    *g = d;
                }
            }
            let label = groups[best.0];
            if k == 1 {
                return (label, 1.0);
            }
            let d1 = best.1.sqrt();
            let d2 = per_group
                .iter()
                .enumerate()
                .filter(|&(g, _)| g != label as usize)
                .map(|(_, &d)| d)
                .fold(f64::INFINITY, f64::min)
                .sqrt();
            let confidence = if d2 > 0.0 {
                (1.0 - d1 / d2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            (label, confidence as f32)
        })
        .unzip();

    Ok((
        ClassMap::new(f.grid_h(), f.grid_w(), k, labels)?,
        ConfidenceMap::new(f.grid_h(), f.grid_w(), conf)?,
    ))
}

/// Category reduction: K-Means over the center vectors themselves, merging
/// nearby centers into `k` classes. Labels are renumbered by first occurrence.
pub fn cra_reduce(c: &Centers, k: usize, seed: u64) -> Result<ReductionTable> {
    if k < 1 || k > c.count() {
        return Err(param(format!(
            "reduced class count {k} must be in [1, {}]",
            c.count()
        )));
    }
    let data = c.as_f64();
    let fit = kmeans(
        &Points {
            data: &data,
            dim: c.dim(),
        },
        k,
        seed,
    )?;
    let mut relabel = vec![u32::MAX; k];
    let mut next = 0u32;
    let mapping = fit
        .assignment
        .iter()
        .map(|&a| {
            if relabel[a] == u32::MAX {
                relabel[a] = next;
                next += 1;
            }
            relabel[a]
        })
        .collect();
    ReductionTable::new(k, mapping)
}

pub fn apply_reduction(m: &ClassMap, t: &ReductionTable) -> Result<ClassMap> {
    let labels = m
        .labels
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            t.mapping.get(l as usize).copied().ok_or_else(|| {
                data(format!(
                    "label {l} at cell {i} exceeds reduction table size {}",
                    t.original_count
                ))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ClassMap::new(m.grid_h, m.grid_w, t.reduced_count, labels)
}

/// Replaces every label that has an override. Substitution is simultaneous:
/// overrides are looked up on the original label only.
pub fn apply_remap(m: &ClassMap, overrides: &BTreeMap<u32, u32>) -> Result<ClassMap> {
    validate_overrides("class", overrides, m.classes)?;
    let labels = m
        .labels
        .iter()
        .map(|l| *overrides.get(l).unwrap_or(l))
        .collect();
    ClassMap::new(m.grid_h, m.grid_w, m.classes, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fmap(h: usize, w: usize, dim: usize, values: Vec<f32>) -> FeatureMap {
        FeatureMap::new(h, w, dim, 1, values).unwrap()
    }

    #[test]
    fn two_blobs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut v = Vec::new();
        let (ma, mb) = ([-5.0f32, 2.0], [6.0f32, -3.0]);
        let mut sums = [[0.0f64; 2]; 2];
        for i in 0..200 {
            let m = if i % 2 == 0 { ma } else { mb };
            let p = [
                m[0] + rng.random_range(-0.5..0.5),
                m[1] + rng.random_range(-0.5..0.5),
            ];
            sums[i % 2][0] += p[0] as f64;
            sums[i % 2][1] += p[1] as f64;
            v.extend_from_slice(&p);
        }
        let f = fmap(10, 20, 2, v);
        let c = fit_centers(&[&f], 2, 1).unwrap();
        let blob_means = sums.map(|s| [s[0] / 100.0, s[1] / 100.0]);
        for bm in blob_means {
            let close = (0..2).any(|i| {
                let ci = c.center(i);
                (ci[0] as f64 - bm[0]).abs() < 0.1 && (ci[1] as f64 - bm[1]).abs() < 0.1
            });
            assert!(close, "no center near {bm:?}: {:?}", c.vectors());
        }
        // and near the generating means
        for m in [ma, mb] {
            assert!((0..2).any(
                |i| (c.center(i)[0] - m[0]).abs() < 0.1 && (c.center(i)[1] - m[1]).abs() < 0.1
            ));
        }
    }

    #[test]
    fn n_equals_distinct_points() {
        let f = fmap(1, 3, 1, vec![1.0, 4.0, 9.0]);
        let c = fit_centers(&[&f], 3, 0).unwrap();
        let mut v = c.vectors().to_vec();
        v.sort_by(f32::total_cmp);
        assert_eq!(v, vec![1.0, 4.0, 9.0]);
    }

    #[test]
    fn n_one_is_centroid() {
        let a = fmap(1, 2, 2, vec![0.0, 1.0, 2.0, 3.0]);
        let b = fmap(1, 2, 2, vec![4.0, 5.0, 6.0, 7.0]);
        let c = fit_centers(&[&a, &b], 1, 0).unwrap();
        assert_eq!(c.vectors(), &[3.0, 4.0]);
    }

    #[test]
    fn fit_parameter_errors() {
        let f = fmap(1, 2, 1, vec![1.0, 2.0]);
        assert!(matches!(fit_centers(&[&f], 0, 0), Err(Error::Parameter(_))));
        assert!(matches!(fit_centers(&[&f], 3, 0), Err(Error::Parameter(_))));
        let g = fmap(1, 1, 2, vec![1.0, 2.0]);
        assert!(fit_centers(&[&f, &g], 1, 0).is_err());
    }

    #[test]
    fn assignment_cases() {
        let c = Centers::new(2, 1, vec![0.0, 10.0]).unwrap();
        let f = fmap(1, 4, 1, vec![2.0, 10.0, 5.0, 100.0]);
        let (m, conf) = assign_classes(&f, &c).unwrap();
        assert_eq!(m.labels(), &[0, 1, 0, 1]);
        assert!((conf.values()[0] - 0.75).abs() < 1e-7);
        assert_eq!(conf.values()[1], 1.0);
        assert_eq!(conf.values()[2], 0.0);
        assert!((conf.values()[3] - (1.0 - 90.0 / 100.0)).abs() < 1e-6);
    }

    #[test]
    fn single_center_confidence_is_one() {
        let c = Centers::new(1, 1, vec![3.0]).unwrap();
        let f = fmap(1, 2, 1, vec![2.0, -8.0]);
        let (m, conf) = assign_classes(&f, &c).unwrap();
        assert_eq!(m.labels(), &[0, 0]);
        assert_eq!(conf.values(), &[1.0, 1.0]);
    }

    #[test]
    fn assign_dim_mismatch() {
        let c = Centers::new(1, 2, vec![0.0, 0.0]).unwrap();
        let f = fmap(1, 1, 1, vec![1.0]);
        assert!(matches!(assign_classes(&f, &c), Err(Error::Parameter(_))));
    }

    #[test]
    fn confidence_scale_invariant() {
        let c = Centers::new(3, 2, vec![0.0, 0.0, 4.0, 1.0, -2.0, 3.0]).unwrap();
        let c2 = Centers::new(3, 2, c.vectors().iter().map(|v| v * 8.0).collect()).unwrap();
        let pts = vec![1.0, 0.5, 3.0, 2.0, -1.0, 1.0];
        let f = fmap(1, 3, 2, pts.clone());
        let f2 = fmap(1, 3, 2, pts.iter().map(|v| v * 8.0).collect());
        let (_, a) = assign_classes(&f, &c).unwrap();
        let (_, b) = assign_classes(&f2, &c2).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn grouped_assignment_matches_reduced_labels() {
        let c = Centers::new(4, 1, vec![0.0, 1.0, 10.0, 11.0]).unwrap();
        let t = ReductionTable::new(2, vec![0, 0, 1, 1]).unwrap();
        let f = fmap(1, 3, 1, vec![0.4, 6.0, 10.5]);
        let (fine, _) = assign_classes(&f, &c).unwrap();
        let (m, conf) = assign_reduced(&f, &c, &t).unwrap();
        assert_eq!(m, apply_reduction(&fine, &t).unwrap());
        // 0.4: nearest 0.4 (center 0), other group nearest 9.6
        assert!((conf.values()[0] as f64 - (1.0 - 0.4 / 9.6)).abs() < 1e-6);
    }

    #[test]
    fn cra_identity_and_constant() {
        let c = Centers::new(
            5,
            2,
            vec![0.0, 0.0, 3.0, 1.0, -4.0, 2.0, 7.0, 7.0, 1.0, -9.0],
        )
        .unwrap();
        let t = cra_reduce(&c, 5, 0).unwrap();
        assert_eq!(t.mapping(), &[0, 1, 2, 3, 4]);
        let t = cra_reduce(&c, 1, 0).unwrap();
        assert_eq!(t.mapping(), &[0, 0, 0, 0, 0]);
        assert!(cra_reduce(&c, 0, 0).is_err());
        assert!(cra_reduce(&c, 6, 0).is_err());
    }

    /// Minimum-inertia 2-partition by enumeration.
    fn brute_force_two_partition(points: &[f64]) -> Vec<u32> {
        let n = points.len();
        let mut best = (f64::INFINITY, 0u32);
        for mask in 1u32..(1 << n) - 1 {
            let inertia: f64 = [true, false]
                .iter()
                .map(|&side| {
                    let members: Vec<f64> = (0..n)
                        .filter(|&i| (mask >> i & 1 == 1) == side)
                        .map(|i| points[i])
                        .collect();
                    let mean = members.iter().sum::<f64>() / members.len() as f64;
                    members.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>()
                })
                .sum();
            if inertia < best.0 {
                best = (inertia, mask);
            }
        }
        let first = best.1 & 1;
        (0..n)
            .map(|i| u32::from((best.1 >> i & 1) != first))
            .collect()
    }

    #[test]
    fn cra_one_dimensional_fixture() {
        let pts = [0.0, 0.1, 5.0, 5.1];
        let oracle = brute_force_two_partition(&pts);
        assert_eq!(oracle, vec![0, 0, 1, 1]);
        let c = Centers::new(4, 1, pts.iter().map(|&v| v as f32).collect()).unwrap();
        for seed in 0..20 {
            assert_eq!(
                cra_reduce(&c, 2, seed).unwrap().mapping(),
                oracle.as_slice(),
                "seed {seed}"
            );
        }
    }

    #[test]
    fn reduction_and_remap_basics() {
        let m = ClassMap::new(2, 2, 3, vec![0, 1, 2, 1]).unwrap();
        assert_eq!(
            apply_reduction(&m, &ReductionTable::identity(3)).unwrap(),
            m
        );
        let zero = apply_reduction(&m, &ReductionTable::new(1, vec![0, 0, 0]).unwrap()).unwrap();
        assert_eq!(zero.labels(), &[0, 0, 0, 0]);
        assert_eq!(zero.classes(), 1);
        assert!(matches!(
            apply_reduction(&m, &ReductionTable::identity(2)),
            Err(Error::Data(_))
        ));

        assert_eq!(apply_remap(&m, &BTreeMap::new()).unwrap(), m);
        let swapped = apply_remap(&m, &BTreeMap::from([(0, 1), (1, 0)])).unwrap();
        assert_eq!(swapped.labels(), &[1, 0, 2, 0]);
        assert!(matches!(
            apply_remap(&m, &BTreeMap::from([(0, 3)])),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn reduction_table_validation() {
        assert!(ReductionTable::new(3, vec![0, 1, 1]).is_err());
        assert!(ReductionTable::new(2, vec![0, 2]).is_err());
    }

    #[test]
    fn remap_json() {
        let spec: RemapSpec =
            serde_json::from_str(r#"{"target": {"3": 5}, "reference": {}}"#).unwrap();
        assert_eq!(spec.target, BTreeMap::from([(3, 5)]));
        let only_target: RemapSpec = serde_json::from_str(r#"{"target": {"1": 0}}"#).unwrap();
        assert!(only_target.reference.is_empty());
        let err = spec.validate(5).unwrap_err().to_string();
        assert!(err.contains("target override 3 -> 5"), "{err}");
        assert!(spec.validate(6).is_ok());
    }

    #[test]
    fn class_map_tensor_import() {
        let t = Tensor::from_i32(vec![2, 2], vec![0, 3, 1, 3]).unwrap();
        let m = ClassMap::from_tensor(&t).unwrap();
        assert_eq!(m.classes(), 4);
        assert_eq!(m.to_tensor(), t);
        assert!(
            ClassMap::from_tensor(&Tensor::from_i32(vec![1, 2], vec![0, -1]).unwrap()).is_err()
        );
        assert!(ClassMap::from_tensor(&Tensor::from_i32(vec![4], vec![0; 4]).unwrap()).is_err());
    }

    fn arb_map_and_tables() -> impl Strategy<Value = (ClassMap, ReductionTable, ReductionTable)> {
        (2usize..10, 1usize..10).prop_flat_map(|(n, k1)| {
            let k1 = k1.min(n);
            (1usize..=k1).prop_flat_map(move |k2| {
                (
                    prop::collection::vec(0..n as u32, 30),
                    prop::collection::vec(0..k1 as u32, n - k1),
                    prop::collection::vec(0..k2 as u32, k1 - k2),
                )
                    .prop_map(move |(labels, t1_rest, t2_rest)| {
                        let mut t1: Vec<u32> = (0..k1 as u32).collect();
                        t1.extend(t1_rest);
                        let mut t2: Vec<u32> = (0..k2 as u32).collect();
                        t2.extend(t2_rest);
                        (
                            ClassMap::new(5, 6, n, labels).unwrap(),
                            ReductionTable::new(k1, t1).unwrap(),
                            ReductionTable::new(k2, t2).unwrap(),
                        )
                    })
            })
        })
    }

    proptest! {
        #[test]
        fn reduction_composes((m, t1, t2) in arb_map_and_tables()) {
            let twice = apply_reduction(&apply_reduction(&m, &t1).unwrap(), &t2).unwrap();
            let once = apply_reduction(&m, &t1.then(&t2).unwrap()).unwrap();
            prop_assert_eq!(twice, once);
        }

        #[test]
        fn reduction_never_adds_labels((m, t1, _t2) in arb_map_and_tables()) {
            let reduced = apply_reduction(&m, &t1).unwrap();
            prop_assert!(reduced.present().len() <= m.present().len());
        }

        #[test]
        fn confidence_in_unit_interval(
            centers in prop::collection::vec(-50.0f32..50.0, 6),
            pts in prop::collection::vec(-80.0f32..80.0, 20),
        ) {
            let c = Centers::new(3, 2, centers).unwrap();
            prop_assume!(pts.iter().any(|&v| v != 0.0));
            let f = fmap(2, 5, 2, pts);
            let (_, conf) = assign_classes(&f, &c).unwrap();
            prop_assert!(conf.values().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
