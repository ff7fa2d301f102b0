//! End-to-end orchestration.
//!
//! [`prepare`] runs everything that depends only on the images and the
//! configuration (features, clustering, class reduction, reference
//! chrominance). [`Prepared::render`] runs the stages a label remap can
//! affect (matching, warping, confidence, assembly), so interactive edits
//! reuse the expensive part.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::correspondence::{
    argmax_map, count_pairwise_ops, global_correspondence, similarity_map, spc_correspondence,
    warp_channels, ChannelGrid, Correspondence, MatchMode, OpCounts, DEFAULT_TAU,
};
use crate::error::{param, Result};
use crate::features::{
    extract_builtin_features, load_external_features, raw_descriptors, FeatureMap, GridGeometry,
    BUILTIN_DIM, DEFAULT_STRIDE,
};
use crate::fusion::{
    assemble_output, compose_confidence, AssemblyReport, FillPolicy, FusedConfidence,
};
use crate::metrics::{
    l1_loss, mean_distance, smp_loss, total_loss, LossComponents, LossReport, LossWeights,
};
use crate::segmentation::{
    apply_remap, assign_reduced, cra_reduce, distinct_cells, fit_centers, intersecting_classes,
    Centers, ClassMap, ConfidenceMap, ReductionTable, RemapSpec, DEFAULT_INITIAL_CLASSES,
    DEFAULT_REDUCED_CLASSES,
};
use crate::tensor_io::{
    lab_to_rgb, load_tensor, read_image, rgb_to_lab, LabImage, RgbImage, Tensor,
};

/// Where a per-image input comes from: computed in-process or loaded from a
/// pair of SPTN files (target, reference).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Source {
    #[default]
    Builtin,
    Files {
        target: PathBuf,
        reference: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub stride: usize,
    pub initial_classes: usize,
    pub reduced_k: usize,
    pub tau: f32,
    pub seed: u64,
    pub fill: FillPolicy,
    pub matching: MatchMode,
    pub feature_source: Source,
    pub class_source: Source,
    pub remap: RemapSpec,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            stride: DEFAULT_STRIDE,
            initial_classes: DEFAULT_INITIAL_CLASSES,
            reduced_k: DEFAULT_REDUCED_CLASSES,
            tau: DEFAULT_TAU,
            seed: 0,
            fill: FillPolicy::default(),
            matching: MatchMode::Spc,
            feature_source: Source::Builtin,
            class_source: Source::Builtin,
            remap: RemapSpec::default(),
        }
    }
}

impl PipelineConfig {
    /// Checks the static invariants. Remap labels are checked against the
    /// configured k here and again against the effective class count once
    /// segmentation has run.
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(param("stride must be at least 1"));
        }
        if self.initial_classes == 0 {
            return Err(param("initial class count must be at least 1"));
        }
        if self.reduced_k == 0 || self.reduced_k > self.initial_classes {
            return Err(param(format!(
                "reduced class count {} must be in [1, {}]",
                self.reduced_k, self.initial_classes
            )));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(param(format!(
                "tau must be positive and finite, got {}",
                self.tau
            )));
        }
        if self.class_source == Source::Builtin {
            self.remap.validate(self.reduced_k)?;
        }
        Ok(())
    }
}

/// Decoded inputs for one run.
#[derive(Debug, Clone)]
pub struct Inputs {
    pub target: RgbImage,
    pub reference: RgbImage,
    pub features: Option<(FeatureMap, FeatureMap)>,
    pub classes: Option<(ClassMap, ClassMap)>,
}

impl Inputs {
    pub fn builtin(target: RgbImage, reference: RgbImage) -> Self {
        Inputs {
            target,
            reference,
            features: None,
            classes: None,
        }
    }

    /// Reads both images and any file-backed sources named by `config`.
    pub fn load(
        target: impl AsRef<Path>,
        reference: impl AsRef<Path>,
        config: &PipelineConfig,
    ) -> Result<Self> {
        let mut inputs = Inputs::builtin(read_image(target)?, read_image(reference)?);
        if let Source::Files { target, reference } = &config.feature_source {
            inputs.features = Some((
                load_external_features(target, config.stride)?,
                load_external_features(reference, config.stride)?,
            ));
        }
        if let Source::Files { target, reference } = &config.class_source {
            inputs.classes = Some((
                ClassMap::from_tensor(&load_tensor(target)?)?,
                ClassMap::from_tensor(&load_tensor(reference)?)?,
            ));
        }
        Ok(inputs)
    }
}

/// Fitted clustering state shared by both images.
#[derive(Debug, Clone)]
pub struct Segmentation {
    pub centers: Centers,
    pub table: ReductionTable,
}

impl Segmentation {
    pub fn initial_classes(&self) -> usize {
        self.centers.count()
    }

    pub fn reduced_classes(&self) -> usize {
        self.table.reduced_count()
    }
}

/// Reduced class maps and margin confidences for a target/reference pair.
#[derive(Debug, Clone)]
pub struct Labelling {
    pub table: ReductionTable,
    pub target: (ClassMap, ConfidenceMap),
    pub reference: (ClassMap, ConfidenceMap),
}

/// Reduces `centers` to `k` classes and labels both feature maps.
pub fn label_pair(
    ft: &FeatureMap,
    fr: &FeatureMap,
    centers: &Centers,
    k: usize,
    seed: u64,
) -> Result<Labelling> {
    let table = cra_reduce(centers, k, seed)?;
    let target = assign_reduced(ft, centers, &table)?;
    let reference = assign_reduced(fr, centers, &table)?;
    Ok(Labelling {
        table,
        target,
        reference,
    })
}

/// Cluster counts actually used: the configured counts, capped by the number
/// of distinct feature vectors available to cluster.
pub fn effective_counts(maps: &[&FeatureMap], n: usize, k: usize) -> Result<(usize, usize)> {
    let distinct = distinct_cells(maps)?;
    let n_eff = n.min(distinct).max(1);
    let k_eff = k.min(n_eff);
    if n_eff < n {
        log::info!(
            "only {distinct} distinct cells; clustering into {n_eff} classes instead of {n}"
        );
    }
    Ok((n_eff, k_eff))
}

#[derive(Debug, Clone)]
pub struct Prepared {
    config: PipelineConfig,
    pub target_lab: LabImage,
    pub reference_lab: LabImage,
    pub target_geom: GridGeometry,
    pub reference_geom: GridGeometry,
    pub target_features: FeatureMap,
    pub reference_features: FeatureMap,
    pub segmentation: Option<Segmentation>,
    pub target_classes: ClassMap,
    pub reference_classes: ClassMap,
    pub target_confidence: ConfidenceMap,
    pub reference_confidence: ConfidenceMap,
    pub reference_ab: ChannelGrid,
    pub reference_conf: ChannelGrid,
}

fn check_grid(what: &str, got: (usize, usize), geom: &GridGeometry) -> Result<()> {
    if got != (geom.grid_h, geom.grid_w) {
        return Err(param(format!(
            "{what} grid {}x{} does not match the {}x{} image at stride {} ({}x{})",
            got.0, got.1, geom.width, geom.height, geom.stride, geom.grid_h, geom.grid_w
        )));
    }
    Ok(())
}

/// Runs the remap-independent stages.
pub fn prepare(inputs: &Inputs, config: &PipelineConfig) -> Result<Prepared> {
    config.validate()?;
    let target_lab = rgb_to_lab(&inputs.target);
    let reference_lab = rgb_to_lab(&inputs.reference);
    let target_geom = GridGeometry::new(target_lab.width(), target_lab.height(), config.stride)?;
    let reference_geom =
        GridGeometry::new(reference_lab.width(), reference_lab.height(), config.stride)?;

    let (target_features, reference_features) = match &inputs.features {
        Some((ft, fr)) => (ft.clone(), fr.clone()),
        None => (
            extract_builtin_features(&target_lab, config.stride)?,
            extract_builtin_features(&reference_lab, config.stride)?,
        ),
    };
    check_grid(
        "target feature",
        (target_features.grid_h(), target_features.grid_w()),
        &target_geom,
    )?;
    check_grid(
        "reference feature",
        (reference_features.grid_h(), reference_features.grid_w()),
        &reference_geom,
    )?;

    let (
        segmentation,
        (target_classes, target_confidence),
        (reference_classes, reference_confidence),
    ) = match &inputs.classes {
        Some((ct, cr)) => {
            check_grid("target class", (ct.grid_h(), ct.grid_w()), &target_geom)?;
            check_grid(
                "reference class",
                (cr.grid_h(), cr.grid_w()),
                &reference_geom,
            )?;
            let classes = ct.classes().max(cr.classes());
            let ct = ct.clone().with_classes(classes)?;
            let cr = cr.clone().with_classes(classes)?;
            let conf_t = ConfidenceMap::ones(ct.grid_h(), ct.grid_w());
            let conf_r = ConfidenceMap::ones(cr.grid_h(), cr.grid_w());
            (None, (ct, conf_t), (cr, conf_r))
        }
        None => {
            let maps = [&target_features, &reference_features];
            let (n, k) = effective_counts(&maps, config.initial_classes, config.reduced_k)?;
            let centers = fit_centers(&maps, n, config.seed)?;
            let labels = label_pair(
                &target_features,
                &reference_features,
                &centers,
                k,
                config.seed,
            )?;
            (
                Some(Segmentation {
                    centers,
                    table: labels.table,
                }),
                labels.target,
                labels.reference,
            )
        }
    };

    let (gh, gw) = (reference_geom.grid_h, reference_geom.grid_w);
    let reference_ab = ChannelGrid::from_planes(
        gh,
        gw,
        &[
            &reference_geom.cell_means(&reference_lab.a),
            &reference_geom.cell_means(&reference_lab.b),
        ],
    )?;
    let reference_conf = ChannelGrid::new(gh, gw, 1, reference_confidence.values().to_vec())?;

    Ok(Prepared {
        config: config.clone(),
        target_lab,
        reference_lab,
        target_geom,
        reference_geom,
        target_features,
        reference_features,
        segmentation,
        target_classes,
        reference_classes,
        target_confidence,
        reference_confidence,
        reference_ab,
        reference_conf,
    })
}

/// Names of the grid artifacts a [`Rendered`] can export.
pub const ARTIFACT_NAMES: [&str; 6] = [
    "similarity",
    "confidence",
    "warped_ab",
    "classes_target",
    "classes_reference",
    "argmax",
];

#[derive(Debug, Clone)]
pub struct Rendered {
    pub target_classes: ClassMap,
    pub reference_classes: ClassMap,
    pub related_classes: BTreeSet<u32>,
    pub correspondence: Correspondence,
    pub warped_ab: ChannelGrid,
    pub warped_confidence: ChannelGrid,
    pub similarity: Tensor,
    pub fused: FusedConfidence,
    pub output: LabImage,
    pub rgb: RgbImage,
    pub assembly: AssemblyReport,
    pub ops: OpCounts,
    pub losses: LossReport,
}

impl Rendered {
    pub fn artifact(&self, name: &str) -> Option<Tensor> {
        Some(match name {
            "similarity" => self.similarity.clone(),
            "confidence" => self.fused.to_tensor(),
            "warped_ab" => self.warped_ab.to_tensor(),
            "classes_target" => self.target_classes.to_tensor(),
            "classes_reference" => self.reference_classes.to_tensor(),
            "argmax" => argmax_map(&self.correspondence),
            _ => return None,
        })
    }
}

/// Run summary written next to CLI outputs and returned by the service.
#[derive(Debug, Clone, Serialize)]
pub struct RunMetadata {
    pub width: usize,
    pub height: usize,
    pub stride: usize,
    pub target_grid: [usize; 2],
    pub reference_grid: [usize; 2],
    pub initial_classes: Option<usize>,
    pub classes: usize,
    pub tau: f32,
    pub seed: u64,
    pub matching: MatchMode,
    pub related_classes: Vec<u32>,
    pub assembly: AssemblyReport,
    pub ops: OpCounts,
    pub losses: LossReport,
}

impl Prepared {
    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    /// Number of classes in the shared label space (valid remap labels are below this).
    pub fn classes(&self) -> usize {
        self.target_classes.classes()
    }

    /// Runs matching, warping, confidence composition and assembly with
    /// `remap` applied to the reduced class maps.
    pub fn render(&self, remap: &RemapSpec) -> Result<Rendered> {
        remap.validate(self.classes())?;
        let ct = apply_remap(&self.target_classes, &remap.target)?;
        let cr = apply_remap(&self.reference_classes, &remap.reference)?;
        let tau = self.config.tau;
        let (correspondence, related_classes) = match self.config.matching {
            MatchMode::Spc => (
                spc_correspondence(
                    &self.target_features,
                    &self.reference_features,
                    &ct,
                    &cr,
                    tau,
                )?,
                intersecting_classes(&ct, &cr),
            ),
            MatchMode::Global => (
                global_correspondence(&self.target_features, &self.reference_features, tau)?,
                ct.present(),
            ),
        };
        let warped_ab = warp_channels(&correspondence, &self.reference_ab)?;
        let warped_confidence = warp_channels(&correspondence, &self.reference_conf)?;
        let similarity = similarity_map(&correspondence);
        let fused = compose_confidence(&similarity, &self.target_confidence, &warped_confidence)?;
        let assembled = assemble_output(
            &self.target_lab,
            &self.target_geom,
            &warped_ab,
            &fused,
            &ct,
            &related_classes,
            self.config.fill,
        )?;
        for w in &assembled.report.warnings {
            log::warn!("{w}");
        }
        let rgb = lab_to_rgb(&assembled.image);
        let losses = self.losses(&rgb, &assembled.image, &fused)?;
        Ok(Rendered {
            ops: count_pairwise_ops(&ct, &cr),
            target_classes: ct,
            reference_classes: cr,
            related_classes,
            correspondence,
            warped_ab,
            warped_confidence,
            similarity,
            fused,
            output: assembled.image,
            rgb,
            assembly: assembled.report,
            losses,
        })
    }

    /// Evaluation losses of a rendered result against the target. The
    /// perceptual term compares unnormalized built-in descriptors of the
    /// delivered 8-bit image with those of the target, so it measures
    /// luminance structure lost to gamut clipping and quantization.
    fn losses(
        &self,
        rgb: &RgbImage,
        output: &LabImage,
        fused: &FusedConfidence,
    ) -> Result<LossReport> {
        let delivered = rgb_to_lab(rgb);
        let a = raw_descriptors(&delivered, &self.target_geom);
        let b = raw_descriptors(&self.target_lab, &self.target_geom);
        let perc: Vec<f32> = a
            .chunks_exact(BUILTIN_DIM)
            .zip(b.chunks_exact(BUILTIN_DIM))
            .map(|(u, v)| {
                u.iter()
                    .zip(v)
                    .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
                    .sum::<f64>() as f32
            })
            .collect();
        let perc = Tensor::from_f32(vec![self.target_geom.grid_h, self.target_geom.grid_w], perc)?;
        let components = LossComponents {
            perc: mean_distance(&perc)?,
            smp: smp_loss(&perc, fused)?,
            l1: l1_loss(output, &self.target_lab)?,
        };
        total_loss(components, LossWeights::default())
    }

    pub fn metadata(&self, r: &Rendered) -> RunMetadata {
        RunMetadata {
            width: self.target_geom.width,
            height: self.target_geom.height,
            stride: self.config.stride,
            target_grid: [self.target_geom.grid_h, self.target_geom.grid_w],
            reference_grid: [self.reference_geom.grid_h, self.reference_geom.grid_w],
            initial_classes: self
                .segmentation
                .as_ref()
                .map(Segmentation::initial_classes),
            classes: self.classes(),
            tau: self.config.tau,
            seed: self.config.seed,
            matching: self.config.matching,
            related_classes: r.related_classes.iter().copied().collect(),
            assembly: r.assembly.clone(),
            ops: r.ops,
            losses: r.losses,
        }
    }
}

/// Convenience: prepare and render with the configured remap.
pub fn run(inputs: &Inputs, config: &PipelineConfig) -> Result<(Prepared, Rendered)> {
    let prepared = prepare(inputs, config)?;
    let rendered = prepared.render(&config.remap)?;
    Ok((prepared, rendered))
}

/// Clusters a single image on its own and returns its reduced class map.
pub fn segment_image(img: &RgbImage, config: &PipelineConfig) -> Result<(ClassMap, ConfidenceMap)> {
    config.validate()?;
    let features = extract_builtin_features(&rgb_to_lab(img), config.stride)?;
    let (n, k) = effective_counts(&[&features], config.initial_classes, config.reduced_k)?;
    let centers = fit_centers(&[&features], n, config.seed)?;
    let table = cra_reduce(&centers, k, config.seed)?;
    assign_reduced(&features, &centers, &table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_io::lab_pixel_to_srgb;

    fn smooth(w: usize, h: usize, phase: f32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| {
            let (u, v) = (x as f32 / w as f32, y as f32 / h as f32);
            lab_pixel_to_srgb([
                30.0 + 40.0 * u + 10.0 * (v * 3.0 + phase).sin(),
                40.0 * (u * 2.5 + phase).cos(),
                35.0 * (v * 2.0 - phase).sin(),
            ])
        })
        .unwrap()
    }

    #[test]
    fn config_invariants() {
        assert!(PipelineConfig::default().validate().is_ok());
        let bad = [
            PipelineConfig {
                reduced_k: 0,
                ..Default::default()
            },
            PipelineConfig {
                reduced_k: 28,
                ..Default::default()
            },
            PipelineConfig {
                tau: 0.0,
                ..Default::default()
            },
            PipelineConfig {
                tau: f32::NAN,
                ..Default::default()
            },
            PipelineConfig {
                stride: 0,
                ..Default::default()
            },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
        let mut c = PipelineConfig::default();
        c.remap.target.insert(22, 0);
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_json_defaults() {
        let c: PipelineConfig =
            serde_json::from_str(r#"{"reduced_k": 5, "fill": "neutral"}"#).unwrap();
        assert_eq!(c.reduced_k, 5);
        assert_eq!(c.fill, FillPolicy::Neutral);
        assert_eq!(c.initial_classes, 27);
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn luminance_passes_through() {
        let t = smooth(40, 28, 0.0);
        let r = smooth(36, 36, 1.0);
        let (p, out) = run(&Inputs::builtin(t, r), &PipelineConfig::default()).unwrap();
        assert_eq!(out.output.l, p.target_lab.l);
        assert_eq!((out.rgb.width(), out.rgb.height()), (40, 28));
        assert!(out.losses.total.is_finite());
    }

    #[test]
    fn remap_to_present_label_relates_everything() {
        let t = smooth(32, 32, 0.0);
        let r = smooth(32, 32, 2.0);
        let cfg = PipelineConfig {
            reduced_k: 6,
            ..Default::default()
        };
        let p = prepare(&Inputs::builtin(t, r), &cfg).unwrap();
        let label = p.reference_classes.label(0);
        let remap = RemapSpec {
            target: (0..p.classes() as u32).map(|l| (l, label)).collect(),
            ..Default::default()
        };
        let out = p.render(&remap).unwrap();
        assert_eq!(out.assembly.related_fraction, 1.0);
        assert!(p
            .render(&RemapSpec {
                target: [(6, 0)].into(),
                ..Default::default()
            })
            .is_err());
    }

    #[test]
    fn tiny_images_are_valid() {
        let t = RgbImage::new(1, 1, vec![10, 200, 30]).unwrap();
        let r = RgbImage::new(1, 1, vec![200, 20, 30]).unwrap();
        let (p, out) = run(&Inputs::builtin(t.clone(), r), &PipelineConfig::default()).unwrap();
        assert_eq!(p.target_classes.cells(), 1);
        assert_eq!((out.rgb.width(), out.rgb.height()), (1, 1));
        let (p, out) = run(&Inputs::builtin(t.clone(), t), &PipelineConfig::default()).unwrap();
        assert_eq!(p.classes(), 1);
        assert_eq!(out.assembly.related_fraction, 1.0);
    }

    #[test]
    fn external_class_maps() {
        let t = smooth(8, 8, 0.0);
        let r = smooth(8, 8, 1.0);
        let ct = ClassMap::new(2, 2, 3, vec![0, 0, 2, 2]).unwrap();
        let cr = ClassMap::new(2, 2, 1, vec![0, 0, 0, 0]).unwrap();
        let inputs = Inputs {
            classes: Some((ct, cr)),
            ..Inputs::builtin(t, r)
        };
        let cfg = PipelineConfig {
            fill: FillPolicy::Neutral,
            ..Default::default()
        };
        let (p, out) = run(&inputs, &cfg).unwrap();
        assert!(p.segmentation.is_none());
        assert_eq!(p.classes(), 3);
        assert_eq!(out.assembly.related_fraction, 0.5);
        let bad = Inputs {
            classes: Some((
                ClassMap::uniform(3, 2, 0, 1).unwrap(),
                ClassMap::uniform(2, 2, 0, 1).unwrap(),
            )),
            ..inputs
        };
        assert!(prepare(&bad, &cfg).is_err());
    }

    #[test]
    fn segment_single_image() {
        let (c, conf) = segment_image(
            &smooth(32, 16, 0.5),
            &PipelineConfig {
                reduced_k: 4,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!((c.grid_h(), c.grid_w(), c.classes()), (4, 8, 4));
        assert!(conf.values().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
