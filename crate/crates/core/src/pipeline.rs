//! End-to-end orchestration: pose initialization, refinement, NOCS rendering
//! and warp fitting per image, plus the file layouts the command-line tool
//! reads and writes.
//!
//! Output directory of an alignment run:
//!
//! ```text
//! poses.json          [{"id", "pose"}] in manifest order, successful images only
//! warps/<id>.tnsr     h × w × 2 displacement grid
//! nocs/<id>.tnsr      h × w × 4 NOCS render (last channel = validity)
//! report.json         per-image status, scores, timings, optional pose evaluation
//! trajectories.csv    refinement scores per iteration, when recorded
//! ```
//!
//! Synthetic dataset directory written by [`write_dataset`]:
//!
//! ```text
//! manifest.json
//! poses.json                 ground-truth poses as [{"id", "pose"}]
//! keypoints.json             {"image_ids", "keypoints": [{"position", "projections"}]}
//! field/field.json           plus density, color and descriptor tensors
//! views/<id>.ppm             color
//! views/<id>_mask.pgm        mask
//! views/<id>_features.tnsr   h × w × C descriptors
//! views/<id>_nocs.tnsr       h × w × 4 NOCS render
//! views/<id>_pose.json       ground-truth pose
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{
    read_image_tensor, read_json, read_mask, read_nocs, read_pose, write_field, write_image_tensor, write_json,
    write_nocs, write_pgm, write_pose, write_ppm, Manifest, ManifestEntry, PoseRecord,
};
use crate::error::{Error, Result};
use crate::eval::{procrustes_align, PoseReport};
use crate::field::VoxelField;
use crate::geometry::CameraPose;
use crate::pose_fit::{
    candidate_grid, crop_to_grid, fit_to_mask, refine_pose, Candidate, CandidateBank, CandidateGrid, InitConfig, OptimConfig,
    PoseEstimate,
};
use crate::raster::{FeatureImage, Image};
use crate::render::{render, render_nocs, Channels, NocsImage, RenderConfig};
use crate::synth::{dataset_from_field, make_field, random_views, DatasetConfig, Keypoint, SynthDataset, SynthSpec, ViewSpec};
use crate::warp::{fit_forward_warp, MappingContext, WarpConfig, WarpField, WarpFit};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignConfig {
    /// `None` uses the default grid for the field's domain.
    pub grid: Option<CandidateGrid>,
    pub init: InitConfig,
    pub refine: OptimConfig,
    /// Renderer settings for the refinement objective.
    pub refine_render: RenderConfig,
    pub warp: WarpConfig,
    /// Renderer settings for NOCS and descriptor renders at the final pose.
    pub congeal_render: RenderConfig,
    pub seed: u64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            grid: None,
            init: InitConfig::default(),
            refine: OptimConfig::default(),
            refine_render: RenderConfig {
                min_transmittance: 1e-4,
                ..Default::default()
            },
            warp: WarpConfig::default(),
            congeal_render: RenderConfig::default(),
            seed: 0,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(g) = &self.grid {
            g.validate()?;
        }
        self.init.render.validate()?;
        self.refine.validate()?;
        self.refine_render.validate()?;
        self.warp.validate()?;
        self.congeal_render.validate()?;
        let (a, b) = self.init.render_size;
        let (c, d) = self.init.feature_grid;
        if a == 0 || b == 0 || c == 0 || d == 0 {
            return Err(Error::Invalid("render and feature grid sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn grid_for(&self, field: &VoxelField) -> CandidateGrid {
        self.grid.clone().unwrap_or_else(|| CandidateGrid::default_for(field.domain()))
    }
}

/// Which stages [`align_image`] runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stages {
    pub init: bool,
    pub refine: bool,
    pub congeal: bool,
}

impl Stages {
    pub const ALL: Stages = Stages {
        init: true,
        refine: true,
        congeal: true,
    };
}

/// One image's observations.
#[derive(Debug, Clone)]
pub struct ImageInput {
    pub id: String,
    pub features: FeatureImage,
    pub mask: Image,
    pub gt_pose: Option<CameraPose>,
}

impl ImageInput {
    pub fn load(entry: &ManifestEntry) -> Result<Self> {
        Ok(Self {
            id: entry.id.clone(),
            features: read_image_tensor(&entry.features_path)?,
            mask: read_mask(&entry.mask_path)?,
            gt_pose: entry.pose_path.as_ref().map(read_pose).transpose()?,
        })
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.mask.width(), self.mask.height())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub init_ms: f64,
    pub refine_ms: f64,
    pub congeal_ms: f64,
}

#[derive(Debug, Clone)]
pub struct ImageOutcome {
    pub id: String,
    pub init: Option<PoseEstimate>,
    pub refine: Option<PoseEstimate>,
    /// Pose after the last stage that ran.
    pub pose: Option<CameraPose>,
    pub nocs: Option<NocsImage>,
    pub warp: Option<WarpFit>,
    pub gt_pose: Option<CameraPose>,
    pub error: Option<String>,
    pub timings: StageTimings,
}

impl ImageOutcome {
    fn new(id: &str) -> Self {
        Self {
            id: id.to_string(),
            init: None,
            refine: None,
            pose: None,
            nocs: None,
            warp: None,
            gt_pose: None,
            error: None,
            timings: StageTimings::default(),
        }
    }

    fn failed(id: &str, e: &Error) -> Self {
        Self {
            error: Some(e.to_string()),
            ..Self::new(id)
        }
    }

    pub fn ok(&self) -> bool {
        self.error.is_none()
    }

    /// Mapping context from the fitted warp and NOCS render.
    pub fn context(&self, image_size: (usize, usize)) -> Option<MappingContext> {
        let mut warp = self.warp.as_ref()?.warp.clone();
        warp.source_size = image_size;
        Some(MappingContext {
            warp,
            nocs: self.nocs.clone()?,
            pose: self.pose?,
            image_size,
        })
    }
}

fn millis(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Runs the requested stages on one image. `start` supplies the pose when
/// initialization is skipped.
pub fn align_image(
    field: &VoxelField,
    bank: Option<&CandidateBank>,
    input: &ImageInput,
    start: Option<CameraPose>,
    stages: Stages,
    cfg: &AlignConfig,
) -> ImageOutcome {
    let mut out = ImageOutcome::new(&input.id);
    out.gt_pose = input.gt_pose;
    match run_stages(field, bank, input, start, stages, cfg, &mut out) {
        Ok(()) => log::info!(
            "{}: done (refine score {:?}, warp objective {:?})",
            input.id,
            out.refine.as_ref().map(|r| r.score),
            out.warp.as_ref().map(|w| w.objective)
        ),
        Err(e) => {
            log::warn!("{}: {e}", input.id);
            out.error = Some(e.to_string());
        }
    }
    out
}

fn run_stages(
    field: &VoxelField,
    bank: Option<&CandidateBank>,
    input: &ImageInput,
    start: Option<CameraPose>,
    stages: Stages,
    cfg: &AlignConfig,
    out: &mut ImageOutcome,
) -> Result<()> {
    let size = input.image_size();
    let mut pose = start.map(|p| p.with_size(size.0, size.1));
    if stages.init {
        let t = Instant::now();
        let bank = bank.ok_or_else(|| Error::Invalid("initialization needs candidate renders".into()))?;
        let target = crop_to_grid(&input.mask, &input.features, &cfg.init)?;
        let est = bank.best(&target, size)?;
        pose = Some(fit_to_mask(field, &est.pose, &input.mask, &cfg.init)?);
        out.init = Some(est);
        out.timings.init_ms = millis(t);
    }
    let mut current = pose.ok_or_else(|| Error::Invalid(format!("no starting pose for {}", input.id)))?;
    out.pose = Some(current);
    if stages.refine {
        let t = Instant::now();
        let est = refine_pose(field, &input.mask, &current, &cfg.refine, &cfg.refine_render)?;
        current = est.pose;
        out.pose = Some(current);
        out.refine = Some(est);
        out.timings.refine_ms = millis(t);
    }
    if stages.congeal {
        let t = Instant::now();
        let (fw, fh) = (input.features.width(), input.features.height());
        let feature_pose = current.with_size(fw, fh);
        out.nocs = Some(render_nocs(field, &feature_pose, &cfg.congeal_render)?);
        let rendered = render(field, &feature_pose, &cfg.congeal_render, Channels::MASK.with_features())?;
        let mut fit = fit_forward_warp(&input.features, rendered.features.as_ref().expect("features requested"), &cfg.warp)?;
        fit.warp.source_size = size;
        out.warp = Some(fit);
        out.timings.congeal_ms = millis(t);
    }
    Ok(())
}

/// Runs stages for all images in parallel; results keep input order.
pub fn align_all(
    field: &VoxelField,
    bank: Option<&CandidateBank>,
    inputs: &[Result<ImageInput>],
    ids: &[String],
    starts: &[Option<CameraPose>],
    stages: Stages,
    cfg: &AlignConfig,
) -> Vec<ImageOutcome> {
    inputs
        .par_iter()
        .zip(ids)
        .zip(starts)
        .map(|((input, id), start)| match input {
            Ok(input) => align_image(field, bank, input, *start, stages, cfg),
            Err(e) => ImageOutcome::failed(id, e),
        })
        .collect()
}

/// Per-image line of the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageReport {
    pub id: String,
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub candidate_index: Option<usize>,
    pub init_score: Option<f64>,
    pub refine_score: Option<f64>,
    pub warp_objective: Option<f64>,
    pub timings: StageTimings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub images: Vec<ImageReport>,
    pub succeeded: usize,
    pub failed: usize,
    /// Pose errors against ground truth when every successful image has one.
    pub evaluation: Option<PoseReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub evaluation_error: Option<String>,
    pub wall_seconds: f64,
}

pub fn build_report(outcomes: &[ImageOutcome], wall_seconds: f64) -> RunReport {
    let images: Vec<ImageReport> = outcomes
        .iter()
        .map(|o| ImageReport {
            id: o.id.clone(),
            status: if o.ok() { "ok" } else { "failed" }.to_string(),
            error: o.error.clone(),
            candidate_index: o.init.as_ref().and_then(|e| e.candidate_index),
            init_score: o.init.as_ref().map(|e| e.score),
            refine_score: o.refine.as_ref().map(|e| e.score),
            warp_objective: o.warp.as_ref().map(|w| w.objective),
            timings: o.timings.clone(),
        })
        .collect();
    let ok: Vec<&ImageOutcome> = outcomes.iter().filter(|o| o.ok() && o.pose.is_some()).collect();
    let (mut evaluation, mut evaluation_error) = (None, None);
    if !ok.is_empty() && ok.iter().all(|o| o.gt_pose.is_some()) {
        let pred: Vec<_> = ok.iter().map(|o| o.pose.expect("filtered").camera_to_world()).collect();
        let gt: Vec<_> = ok.iter().map(|o| o.gt_pose.expect("checked").camera_to_world()).collect();
        match procrustes_align(&pred, &gt) {
            Ok(a) => evaluation = Some(a.report),
            Err(e) => evaluation_error = Some(e.to_string()),
        }
    }
    RunReport {
        succeeded: ok.len(),
        failed: outcomes.len() - ok.len(),
        images,
        evaluation,
        evaluation_error,
        wall_seconds,
    }
}

/// Writes poses, warps, NOCS renders, the report and optional trajectories.
pub fn write_outputs(dir: &Path, outcomes: &[ImageOutcome], report: &RunReport) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let poses: Vec<PoseRecord> = outcomes
        .iter()
        .filter(|o| o.ok())
        .filter_map(|o| {
            o.pose.map(|pose| PoseRecord {
                id: o.id.clone(),
                pose,
            })
        })
        .collect();
    write_json(dir.join("poses.json"), &poses)?;
    for o in outcomes.iter().filter(|o| o.ok()) {
        if let Some(w) = &o.warp {
            let sub = dir.join("warps");
            fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
            write_image_tensor(sub.join(format!("{}.tnsr", o.id)), &w.warp.displacement)?;
        }
        if let Some(n) = &o.nocs {
            let sub = dir.join("nocs");
            fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
            write_nocs(sub.join(format!("{}.tnsr", o.id)), n)?;
        }
    }
    write_json(dir.join("report.json"), report)?;
    if outcomes.iter().any(|o| o.refine.as_ref().is_some_and(|r| r.trajectory.is_some())) {
        let mut csv = String::from("id,iteration,score\n");
        for o in outcomes {
            if let Some(t) = o.refine.as_ref().and_then(|r| r.trajectory.as_ref()) {
                for (i, s) in t.iter().enumerate() {
                    let _ = writeln!(csv, "{},{i},{s:.9}", o.id);
                }
            }
        }
        let p = dir.join("trajectories.csv");
        fs::write(&p, csv).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

pub fn read_poses(path: impl AsRef<Path>) -> Result<Vec<PoseRecord>> {
    read_json(path)
}

/// Start poses matched to manifest ids (`None` for ids without one).
pub fn poses_for(manifest: &Manifest, records: &[PoseRecord]) -> Vec<Option<CameraPose>> {
    manifest
        .images
        .iter()
        .map(|e| records.iter().find(|r| r.id == e.id).map(|r| r.pose))
        .collect()
}

/// Mapping context of one image from an alignment output directory.
pub fn load_context(run_dir: &Path, entry: &ManifestEntry, poses: &[PoseRecord]) -> Result<MappingContext> {
    let pose = poses
        .iter()
        .find(|r| r.id == entry.id)
        .map(|r| r.pose)
        .ok_or_else(|| Error::Invalid(format!("no pose for image {:?}", entry.id)))?;
    let mask = read_mask(&entry.mask_path)?;
    let image_size = (mask.width(), mask.height());
    let mut warp = WarpField::from_displacement(read_image_tensor(run_dir.join("warps").join(format!("{}.tnsr", entry.id)))?)?;
    let nocs = read_nocs(run_dir.join("nocs").join(format!("{}.tnsr", entry.id)))?;
    warp.source_size = image_size;
    warp.render_size = (nocs.width(), nocs.height());
    Ok(MappingContext {
        warp,
        nocs,
        pose,
        image_size,
    })
}

pub const RENDER_INDEX: &str = "renders.json";
pub const COMPLETE_MARKER: &str = "_COMPLETE";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderEntry {
    pub id: String,
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    pub fov_deg: f64,
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
}

/// Listing of exported candidate renders for an external featurizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderIndex {
    /// Requested feature grid `(height, width)`.
    pub feature_grid: (usize, usize),
    pub renders: Vec<RenderEntry>,
}

pub fn candidate_id(index: usize) -> String {
    format!("cand_{index:04}")
}

/// Renders every candidate's color and mask into `dir` with an index file.
pub fn export_candidates(field: &VoxelField, grid: &CandidateGrid, cfg: &InitConfig, dir: &Path) -> Result<RenderIndex> {
    grid.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let candidates = candidate_grid(grid, cfg.render_size.0, cfg.render_size.1);
    let renders = candidates
        .par_iter()
        .map(|c| {
            let r = render(field, &c.pose, &cfg.render, Channels::MASK.with_color())?;
            let id = candidate_id(c.index);
            let (img, mask) = (PathBuf::from(format!("{id}.ppm")), PathBuf::from(format!("{id}.pgm")));
            write_ppm(dir.join(&img), r.color.as_ref().expect("color requested"))?;
            write_pgm(dir.join(&mask), &r.mask)?;
            Ok(RenderEntry {
                id,
                image_path: img,
                mask_path: mask,
                fov_deg: c.fov_deg,
                azimuth_deg: c.azimuth_deg,
                elevation_deg: c.elevation_deg,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let index = RenderIndex {
        feature_grid: (cfg.feature_grid.1, cfg.feature_grid.0),
        renders,
    };
    write_json(dir.join(RENDER_INDEX), &index)?;
    Ok(index)
}

/// Builds the candidate bank from exported renders and externally computed
/// `<id>.tnsr` descriptor files, once the completion marker exists.
pub fn import_candidates(grid: &CandidateGrid, cfg: &InitConfig, render_dir: &Path, feature_dir: &Path) -> Result<CandidateBank> {
    if !feature_dir.join(COMPLETE_MARKER).exists() {
        return Err(Error::Invalid(format!(
            "{}: candidate features are incomplete (no {COMPLETE_MARKER} marker)",
            feature_dir.display()
        )));
    }
    let index: RenderIndex = read_json(render_dir.join(RENDER_INDEX))?;
    let candidates: Vec<Candidate> = candidate_grid(grid, cfg.render_size.0, cfg.render_size.1);
    if index.renders.len() != candidates.len() {
        return Err(Error::ShapeMismatch(format!(
            "render index lists {} candidates, grid has {}",
            index.renders.len(),
            candidates.len()
        )));
    }
    let loaded = index
        .renders
        .par_iter()
        .map(|r| {
            let mask = read_mask(render_dir.join(&r.mask_path))?;
            let features = read_image_tensor(feature_dir.join(format!("{}.tnsr", r.id)))?;
            Ok((mask, features))
        })
        .collect::<Result<Vec<_>>>()?;
    let (masks, features): (Vec<Image>, Vec<Image>) = loaded.into_iter().unzip();
    CandidateBank::from_features(candidates, &masks, &features, cfg)
}

/// Scene, view sampling and render settings of a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthJob {
    pub scene: SynthSpec,
    #[serde(default)]
    pub views: ViewSpec,
    #[serde(default)]
    pub dataset: DatasetConfig,
}

impl SynthJob {
    pub fn generate(&self) -> Result<SynthDataset> {
        self.scene.validate()?;
        let field = make_field(&self.scene)?;
        let poses = random_views(&self.views, field.domain(), self.scene.seed);
        dataset_from_field(field, self.scene.seed, self.scene.noise_sigma, &poses, &self.dataset)
    }
}

pub fn view_id(index: usize) -> String {
    format!("view_{index:03}")
}

/// Keypoints with projections listed in `image_ids` order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointFile {
    pub image_ids: Vec<String>,
    pub keypoints: Vec<Keypoint>,
}

/// Writes a dataset directory (layout in the module docs) and returns the
/// manifest path.
pub fn write_dataset(dir: &Path, ds: &SynthDataset) -> Result<PathBuf> {
    let views_dir = dir.join("views");
    fs::create_dir_all(&views_dir).map_err(|e| Error::io(&views_dir, e))?;
    write_field(dir.join("field"), &ds.field)?;
    let mut entries = Vec::with_capacity(ds.views.len());
    let mut poses = Vec::with_capacity(ds.views.len());
    for (i, v) in ds.views.iter().enumerate() {
        let id = view_id(i);
        let rel = |suffix: &str| PathBuf::from("views").join(format!("{id}{suffix}"));
        let entry = ManifestEntry {
            id: id.clone(),
            image_path: rel(".ppm"),
            mask_path: rel("_mask.pgm"),
            features_path: rel("_features.tnsr"),
            pose_path: Some(rel("_pose.json")),
        };
        write_ppm(dir.join(&entry.image_path), &v.color)?;
        write_pgm(dir.join(&entry.mask_path), &v.mask)?;
        write_image_tensor(dir.join(&entry.features_path), &v.features)?;
        write_nocs(dir.join(rel("_nocs.tnsr")), &v.nocs)?;
        write_pose(dir.join(rel("_pose.json")), &v.pose)?;
        poses.push(PoseRecord { id, pose: v.pose });
        entries.push(entry);
    }
    write_json(dir.join("poses.json"), &poses)?;
    write_json(
        dir.join("keypoints.json"),
        &KeypointFile {
            image_ids: entries.iter().map(|e| e.id.clone()).collect(),
            keypoints: ds.keypoints.clone(),
        },
    )?;
    let manifest = dir.join("manifest.json");
    write_json(&manifest, &Manifest { images: entries })?;
    Ok(manifest)
}
