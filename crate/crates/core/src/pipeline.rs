//! End-to-end orchestration. Every stage reads its inputs from and writes its
//! artifacts to one output directory, so stages can run one at a time or all
//! together with identical results.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::{align_group, AlignConfig, AlignRecord};
use crate::clustering::{cluster_planes, PlaneCluster, DEFAULT_THRESHOLD};
use crate::dataset::{filter_same_date, DatasetError, DatasetManifest, PanoRecord, Panorama};
use crate::eval::{evaluate, GroundTruth};
use crate::facade::{build_reliable_set, crop_bounds, crop_facades, detect_line_segments, ransac_facade, FacadeBox, FacadeConfig};
use crate::fusion::{filter_single_view, fuse_multiview, Detection, DetectionsFile, FusionConfig};
use crate::geometry::Vec3;
use crate::model::{assemble_model, FacadeFrame, FacadeModel, ThermalModel};
use crate::ortho::{ortho_from_volume, ortho_per_segment, ConstantOracle, OrthoConfig, OrthoImage, RayColorOracle};
use crate::synth::{oracle_window_detector, write_dataset, SynthBuilding, SynthConfig, WINDOW_COLOR};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_IO: i32 = 4;
pub const EXIT_INVARIANT: i32 = 5;
pub const EXIT_STAGE: i32 = 6;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("{path}: parse error: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("stage {stage} failed: {message}")]
    Stage { stage: String, message: String },
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => EXIT_CONFIG,
            PipelineError::Io { .. } | PipelineError::Parse { .. } => EXIT_IO,
            PipelineError::Invariant(_) => EXIT_INVARIANT,
            PipelineError::Stage { .. } => EXIT_STAGE,
        }
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;

fn stage_err(stage: &str, e: impl ToString) -> PipelineError {
    PipelineError::Stage { stage: stage.to_string(), message: e.to_string() }
}

fn dataset_err(e: DatasetError) -> PipelineError {
    match e {
        DatasetError::Io { path, source } => PipelineError::Io { path, message: source.to_string() },
        DatasetError::MissingFile(path) => PipelineError::Io { path, message: "file not found".into() },
        DatasetError::Image { path, message } => PipelineError::Io { path, message },
        DatasetError::Parse { path, message } => PipelineError::Parse { path, message },
        DatasetError::InvariantViolation { field, message } => PipelineError::Invariant(format!("{field}: {message}")),
        e @ (DatasetError::EmptySelection { .. } | DatasetError::Geometry(_)) => stage_err("ingest", e),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DataSourceType {
    #[default]
    Streetview,
    Camera2d,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DetectorSource {
    /// Color-palette oracle on synthetic imagery.
    #[default]
    Oracle,
    /// `<detections_dir>/<facade_id>.json` written by an external detector.
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Selection {
    pub center: Vec3,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum VolumeOracleSpec {
    /// A synthetic building file answers ray queries.
    Synthetic { building: PathBuf },
    Constant { color: [u8; 3] },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeFacade {
    pub facade_id: String,
    /// Bottom-left, bottom-right and top-left corners, meters.
    pub corners: [Vec3; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Camera2dConfig {
    pub oracle: VolumeOracleSpec,
    /// Facades to render; empty takes every facade of a synthetic building.
    #[serde(default)]
    pub facades: Vec<VolumeFacade>,
    #[serde(default = "default_spp")]
    pub samples_per_pixel: u32,
}

fn default_spp() -> u32 {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Palette {
    pub window: [u8; 3],
    pub others: Vec<[u8; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub data_source_type: DataSourceType,
    pub seed: u64,
    /// `dataset.json`; defaults to the synthetic dataset written by `synth`.
    pub dataset: Option<PathBuf>,
    pub ground_truth: Option<PathBuf>,
    pub synth: Option<SynthConfig>,
    pub selection: Option<Selection>,
    pub same_date_only: bool,
    pub cluster_threshold: f64,
    pub ortho: OrthoConfig,
    pub align: AlignConfig,
    pub facade: FacadeConfig,
    pub fusion: FusionConfig,
    pub detector: DetectorSource,
    pub detections_dir: Option<PathBuf>,
    pub palette: Option<Palette>,
    pub oracle_min_pixels: usize,
    pub camera2d: Option<Camera2dConfig>,
    /// Worker threads; `None` uses every available core.
    pub threads: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            data_source_type: DataSourceType::Streetview,
            seed: 0,
            dataset: None,
            ground_truth: None,
            synth: None,
            selection: None,
            same_date_only: true,
            cluster_threshold: DEFAULT_THRESHOLD,
            ortho: OrthoConfig::default(),
            align: AlignConfig::default(),
            facade: FacadeConfig::default(),
            fusion: FusionConfig::default(),
            detector: DetectorSource::Oracle,
            detections_dir: None,
            palette: None,
            oracle_min_pixels: 50,
            camera2d: None,
            threads: None,
        }
    }
}

impl PipelineConfig {
    /// Reads a JSON config; relative paths resolve against its directory and
    /// the synthetic scene takes the pipeline seed.
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: PipelineConfig = read_json(path)?;
        let seed = cfg.seed;
        let mut cfg = cfg.with_seed(seed);
        let base = path.parent().unwrap_or(Path::new(""));
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(q) = p.as_mut() {
                if q.is_relative() {
                    *q = base.join(&*q);
                }
            }
        };
        fix(&mut cfg.dataset);
        fix(&mut cfg.ground_truth);
        fix(&mut cfg.detections_dir);
        if let Some(Camera2dConfig { oracle: VolumeOracleSpec::Synthetic { building }, .. }) = cfg.camera2d.as_mut() {
            if building.is_relative() {
                *building = base.join(&*building);
            }
        }
        Ok(cfg)
    }

    /// Applies a seed override to the pipeline and its synthetic scene.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        if let Some(s) = self.synth.as_mut() {
            s.seed = seed;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if !(self.ortho.pixel_size > 0.0 && self.ortho.pixel_size.is_finite()) {
            return bad(format!("ortho.pixel_size = {} must be positive", self.ortho.pixel_size));
        }
        if !(self.cluster_threshold >= 0.0) {
            return bad("cluster_threshold must be non-negative".into());
        }
        self.fusion.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        if !(0.0..=1.0).contains(&self.align.min_inlier_ratio) || !(self.align.ratio > 0.0 && self.align.ratio <= 1.0) {
            return bad("align ratios must lie in (0, 1]".into());
        }
        if self.facade.iterations == 0 || self.align.ransac_iterations == 0 {
            return bad("RANSAC iteration counts must be positive".into());
        }
        if self.threads == Some(0) {
            return bad("threads must be positive".into());
        }
        if self.detector == DetectorSource::File && self.detections_dir.is_none() {
            return bad("detector = file requires detections_dir".into());
        }
        match self.data_source_type {
            DataSourceType::Streetview => {
                if self.dataset.is_none() && self.synth.is_none() {
                    return bad("streetview needs a dataset or a synth section".into());
                }
            }
            DataSourceType::Camera2d => {
                let Some(c) = &self.camera2d else {
                    return bad("camera2d needs a camera2d section".into());
                };
                if c.samples_per_pixel == 0 {
                    return bad("camera2d.samples_per_pixel must be positive".into());
                }
                if c.facades.is_empty() && !matches!(c.oracle, VolumeOracleSpec::Synthetic { .. }) {
                    return bad("camera2d.facades is required unless the oracle is a synthetic building".into());
                }
            }
        }
        if let Some(s) = &self.synth {
            s.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        }
        Ok(())
    }

    fn dataset_path(&self, out: &Path) -> PathBuf {
        self.dataset.clone().unwrap_or_else(|| out.join("dataset").join("dataset.json"))
    }

    fn ground_truth_path(&self, out: &Path) -> Option<PathBuf> {
        if let Some(p) = &self.ground_truth {
            return Some(p.clone());
        }
        if self.data_source_type == DataSourceType::Camera2d {
            if let Some(Camera2dConfig { oracle: VolumeOracleSpec::Synthetic { building }, .. }) = &self.camera2d {
                let p = building.with_file_name("ground_truth.json");
                return p.exists().then_some(p);
            }
        }
        let p = self.dataset_path(out).with_file_name("ground_truth.json");
        p.exists().then_some(p)
    }

    /// Deterministic seed of one stage and work item.
    fn stage_seed(&self, stage: u64, item: u64) -> u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ stage.rotate_left(40) ^ item.rotate_left(20));
        rng.next_u64()
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| PipelineError::Io { path: path.to_path_buf(), message: e.to_string() })?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Parse { path: path.to_path_buf(), message: e.to_string() })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        make_dir(dir)?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| PipelineError::Invariant(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| PipelineError::Io { path: path.to_path_buf(), message: e.to_string() })
}

fn make_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| PipelineError::Io { path: dir.to_path_buf(), message: e.to_string() })
}

/// Empties an artifact directory so stale files from earlier runs never leak in.
fn fresh_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| PipelineError::Io { path: dir.to_path_buf(), message: e.to_string() })?;
    }
    make_dir(dir)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestArtifact {
    pub dataset_id: String,
    pub pano_ids: Vec<String>,
}

/// Ortho images of one cluster, as file stems inside a stage directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageSet {
    pub cluster_id: usize,
    pub stems: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignArtifact {
    pub sets: Vec<ImageSet>,
    pub reports: BTreeMap<usize, Vec<AlignRecord>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FacadeEntry {
    pub cluster_id: usize,
    pub facade_id: String,
    pub facade_box: FacadeBox,
    /// Integer crop bounds inside `frame`'s pixel grid.
    pub crop: [u32; 4],
    pub frame: FacadeFrame,
    /// Cropped images, stems inside `cropped/`.
    pub images: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FacadeArtifact {
    pub building_id: String,
    pub frame: String,
    pub footprint: Option<Vec<Vec3>>,
    pub facades: Vec<FacadeEntry>,
    /// Clusters without a facade, with the reason.
    pub skipped: BTreeMap<usize, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedArtifact {
    pub facade_id: String,
    pub raw: usize,
    pub detections: Vec<Detection>,
}

const INGEST: &str = "ingest.json";
const CLUSTERS: &str = "clusters.json";
const ORTHO_DIR: &str = "ortho";
const ALIGNED_DIR: &str = "aligned";
const CROPPED_DIR: &str = "cropped";
const FACADES: &str = "facades.json";
const FUSED_DIR: &str = "fused";
const DETECTIONS_DIR: &str = "detections";
pub const MODEL: &str = "model.json";
pub const EVAL_REPORT: &str = "eval_report.json";
pub const EVAL_CSV: &str = "eval_report.csv";

fn index_path(dir: &Path) -> PathBuf {
    dir.join("index.json")
}

fn load_images(dir: &Path, stems: &[String]) -> Result<Vec<OrthoImage>> {
    stems
        .par_iter()
        .map(|s| {
            let p = dir.join(format!("{s}.png"));
            OrthoImage::load(&p).map_err(|e| PipelineError::Io { path: p, message: e.to_string() })
        })
        .collect()
}

fn save_image(img: &OrthoImage, dir: &Path, stem: &str) -> Result<()> {
    img.save(dir, stem).map(|_| ()).map_err(|e| PipelineError::Io { path: dir.join(stem), message: e.to_string() })
}

fn require_streetview(cfg: &PipelineConfig, stage: &str) -> Result<()> {
    if cfg.data_source_type == DataSourceType::Streetview {
        Ok(())
    } else {
        Err(PipelineError::Config(format!("stage {stage} only applies to streetview data")))
    }
}

/// Writes a synthetic dataset into `<out>/dataset`.
pub fn stage_synth(cfg: &PipelineConfig, out: &Path) -> Result<PathBuf> {
    let synth = cfg.synth.as_ref().ok_or_else(|| PipelineError::Config("synth section missing".into()))?;
    let dir = out.join("dataset");
    fresh_dir(&dir)?;
    let written = write_dataset(synth, &dir).map_err(|e| stage_err("synth", e))?;
    info!("synth: wrote {}", written.manifest.display());
    Ok(written.manifest)
}

pub fn stage_ingest(cfg: &PipelineConfig, out: &Path) -> Result<IngestArtifact> {
    require_streetview(cfg, "ingest")?;
    let manifest = DatasetManifest::load(&cfg.dataset_path(out)).map_err(dataset_err)?;
    let mut panos = match &cfg.selection {
        Some(s) => manifest.select_origin_and_traverse(s.center, s.radius).map_err(dataset_err)?,
        None => manifest.panos.clone(),
    };
    if cfg.same_date_only {
        panos = filter_same_date(&panos);
    }
    if panos.is_empty() {
        return Err(stage_err("ingest", "no panoramas selected"));
    }
    let art = IngestArtifact { dataset_id: manifest.dataset_id.clone(), pano_ids: panos.iter().map(|p| p.pano_id.clone()).collect() };
    write_json(&out.join(INGEST), &art)?;
    info!("ingest: {} panoramas", art.pano_ids.len());
    Ok(art)
}

fn selected_panos(cfg: &PipelineConfig, out: &Path) -> Result<(DatasetManifest, Vec<PanoRecord>)> {
    let manifest = DatasetManifest::load(&cfg.dataset_path(out)).map_err(dataset_err)?;
    let ingest: IngestArtifact = read_json(&out.join(INGEST))?;
    let panos = ingest
        .pano_ids
        .iter()
        .map(|id| manifest.get(id).cloned().ok_or_else(|| PipelineError::Invariant(format!("pano {id} missing from dataset"))))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, panos))
}

pub fn stage_cluster(cfg: &PipelineConfig, out: &Path) -> Result<Vec<PlaneCluster>> {
    require_streetview(cfg, "cluster")?;
    let (_, panos) = selected_panos(cfg, out)?;
    let clusters = cluster_planes(&panos, cfg.cluster_threshold).map_err(|e| stage_err("cluster", e))?;
    write_json(&out.join(CLUSTERS), &clusters)?;
    info!("cluster: {} clusters", clusters.len());
    Ok(clusters)
}

pub fn stage_ortho(cfg: &PipelineConfig, out: &Path) -> Result<Vec<ImageSet>> {
    match cfg.data_source_type {
        DataSourceType::Streetview => ortho_streetview(cfg, out),
        DataSourceType::Camera2d => ortho_camera2d(cfg, out),
    }
}

fn ortho_streetview(cfg: &PipelineConfig, out: &Path) -> Result<Vec<ImageSet>> {
    let (_, panos) = selected_panos(cfg, out)?;
    let clusters: Vec<PlaneCluster> = read_json(&out.join(CLUSTERS))?;
    let records: Vec<PanoRecord> =
        panos.into_iter().filter(|p| clusters.iter().any(|c| c.members.iter().any(|m| m.pano_id == p.pano_id))).collect();
    let loaded = records.into_par_iter().map(Panorama::load).collect::<std::result::Result<Vec<_>, _>>().map_err(dataset_err)?;
    let images = ortho_per_segment(&clusters, &loaded, &cfg.ortho);
    let dir = out.join(ORTHO_DIR);
    fresh_dir(&dir)?;
    let mut sets = Vec::new();
    for c in &clusters {
        let mut stems = Vec::new();
        for m in &c.members {
            if let Some(img) = images.get(m) {
                let stem = format!("c{:02}_{}_p{}", c.cluster_id, m.pano_id, m.plane_idx);
                save_image(img, &dir, &stem)?;
                stems.push(stem);
            }
        }
        if !stems.is_empty() {
            sets.push(ImageSet { cluster_id: c.cluster_id, stems });
        }
    }
    write_json(&index_path(&dir), &sets)?;
    info!("ortho: {} images over {} clusters", images.len(), sets.len());
    Ok(sets)
}

fn volume_inputs(cfg: &PipelineConfig) -> Result<(Box<dyn RayColorOracle>, Vec<VolumeFacade>, Palette, String)> {
    let c = cfg.camera2d.as_ref().ok_or_else(|| PipelineError::Config("camera2d section missing".into()))?;
    match &c.oracle {
        VolumeOracleSpec::Synthetic { building } => {
            let b = SynthBuilding::load(building).map_err(|e| PipelineError::Io { path: building.clone(), message: e.to_string() })?;
            let facades = if c.facades.is_empty() {
                b.facades
                    .iter()
                    .map(|f| {
                        let k = f.corners();
                        VolumeFacade { facade_id: f.facade_id.clone(), corners: [k[0], k[1], k[3]] }
                    })
                    .collect()
            } else {
                c.facades.clone()
            };
            let palette = Palette { window: b.window_color, others: b.other_colors() };
            let id = b.building_id.clone();
            Ok((Box::new(b), facades, palette, id))
        }
        VolumeOracleSpec::Constant { color } => {
            let palette = Palette { window: WINDOW_COLOR, others: vec![*color] };
            let oracle = ConstantOracle(image::Rgba([color[0], color[1], color[2], 255]));
            Ok((Box::new(oracle), c.facades.clone(), palette, "camera2d".to_string()))
        }
    }
}

/// Renders each facade from the volume oracle; the images are already
/// facade crops, so this also writes the facade artifact.
fn ortho_camera2d(cfg: &PipelineConfig, out: &Path) -> Result<Vec<ImageSet>> {
    let (oracle, facades, _, building_id) = volume_inputs(cfg)?;
    let spp = cfg.camera2d.as_ref().map_or(default_spp(), |c| c.samples_per_pixel);
    let dir = out.join(CROPPED_DIR);
    fresh_dir(&dir)?;
    let mut entries = Vec::new();
    let mut sets = Vec::new();
    for (k, f) in facades.iter().enumerate() {
        let img = ortho_from_volume(oracle.as_ref(), &f.corners, cfg.ortho.pixel_size, spp, &f.facade_id)
            .map_err(|e| stage_err("ortho", format!("{}: {e}", f.facade_id)))?;
        let stem = f.facade_id.clone();
        save_image(&img, &dir, &stem)?;
        let (w, h) = (img.width(), img.height());
        entries.push(FacadeEntry {
            cluster_id: k,
            facade_id: f.facade_id.clone(),
            facade_box: FacadeBox { bbox: [0.0, 0.0, f64::from(w), f64::from(h)], score: 1.0 },
            crop: [0, 0, w, h],
            frame: FacadeFrame { plane: img.plane, basis: img.basis, grid_origin2d: img.grid_origin2d, pixel_size: img.pixel_size },
            images: vec![stem.clone()],
        });
        sets.push(ImageSet { cluster_id: k, stems: vec![stem] });
    }
    let art = FacadeArtifact {
        building_id,
        frame: "volume frame, meters".into(),
        footprint: None,
        facades: entries,
        skipped: BTreeMap::new(),
    };
    write_json(&out.join(FACADES), &art)?;
    info!("ortho: {} volume renders", sets.len());
    Ok(sets)
}

pub fn stage_align(cfg: &PipelineConfig, out: &Path) -> Result<AlignArtifact> {
    require_streetview(cfg, "align")?;
    let src = out.join(ORTHO_DIR);
    let sets: Vec<ImageSet> = read_json(&index_path(&src))?;
    let dir = out.join(ALIGNED_DIR);
    fresh_dir(&dir)?;
    let mut art = AlignArtifact { sets: Vec::new(), reports: BTreeMap::new() };
    for set in &sets {
        let images = load_images(&src, &set.stems)?;
        let group = align_group(&images, &cfg.align, cfg.stage_seed(1, set.cluster_id as u64));
        let mut stems = Vec::new();
        for img in &group.images {
            let k = set.stems.iter().zip(&images).position(|(_, i)| i.source_id == img.source_id);
            let stem = k.map_or_else(|| img.source_id.clone(), |k| set.stems[k].clone());
            save_image(img, &dir, &stem)?;
            stems.push(stem);
        }
        art.sets.push(ImageSet { cluster_id: set.cluster_id, stems });
        art.reports.insert(set.cluster_id, group.report);
    }
    write_json(&index_path(&dir), &art.sets)?;
    write_json(&out.join("align_report.json"), &art)?;
    info!("align: {} clusters", art.sets.len());
    Ok(art)
}

pub fn stage_facade(cfg: &PipelineConfig, out: &Path) -> Result<FacadeArtifact> {
    require_streetview(cfg, "facade")?;
    let manifest = DatasetManifest::load(&cfg.dataset_path(out)).map_err(dataset_err)?;
    let src = out.join(ALIGNED_DIR);
    let sets: Vec<ImageSet> = read_json(&index_path(&src))?;
    let dir = out.join(CROPPED_DIR);
    fresh_dir(&dir)?;
    let mut art = FacadeArtifact {
        building_id: manifest.dataset_id.clone(),
        frame: manifest.frame_origin.clone(),
        footprint: manifest.footprint.clone(),
        facades: Vec::new(),
        skipped: BTreeMap::new(),
    };
    for set in &sets {
        let images = load_images(&src, &set.stems)?;
        let lines: Vec<_> = images.par_iter().map(|img| detect_line_segments(&img.pixels, &cfg.facade)).collect();
        let reliable = build_reliable_set(&lines, &cfg.facade);
        let found = ransac_facade(&lines, &reliable, &cfg.facade, cfg.stage_seed(2, set.cluster_id as u64));
        let fbox = match found {
            Ok(b) => b,
            Err(e) => {
                warn!("cluster {}: {e}", set.cluster_id);
                art.skipped.insert(set.cluster_id, e.to_string());
                continue;
            }
        };
        let reference = &images[0];
        let Some(crop) = crop_bounds(&fbox, reference.width(), reference.height()) else {
            art.skipped.insert(set.cluster_id, "facade box outside the image".into());
            continue;
        };
        let cropped = crop_facades(&images, &fbox).map_err(|e| stage_err("facade", e))?;
        let facade_id = format!("facade_c{:02}", set.cluster_id);
        for (img, stem) in cropped.iter().zip(&set.stems) {
            save_image(img, &dir, stem)?;
        }
        art.facades.push(FacadeEntry {
            cluster_id: set.cluster_id,
            facade_id,
            facade_box: fbox,
            crop,
            frame: FacadeFrame {
                plane: reference.plane,
                basis: reference.basis,
                grid_origin2d: reference.grid_origin2d,
                pixel_size: reference.pixel_size,
            },
            images: set.stems.clone(),
        });
    }
    if art.facades.is_empty() {
        write_json(&out.join(FACADES), &art)?;
        return Err(stage_err("facade", "no facade found in any cluster"));
    }
    write_json(&out.join(FACADES), &art)?;
    info!("facade: {} facades, {} clusters skipped", art.facades.len(), art.skipped.len());
    Ok(art)
}

fn palette(cfg: &PipelineConfig, out: &Path) -> Result<Palette> {
    if let Some(p) = &cfg.palette {
        return Ok(p.clone());
    }
    match cfg.data_source_type {
        DataSourceType::Camera2d => Ok(volume_inputs(cfg)?.2),
        DataSourceType::Streetview => {
            let manifest = DatasetManifest::load(&cfg.dataset_path(out)).map_err(dataset_err)?;
            let s = manifest
                .synthetic
                .ok_or_else(|| PipelineError::Config("oracle detector needs a palette or a synthetic dataset".into()))?;
            Ok(Palette { window: s.window_color, others: s.other_colors })
        }
    }
}

fn detections_for(cfg: &PipelineConfig, out: &Path, entry: &FacadeEntry, pal: Option<&Palette>) -> Result<Vec<Detection>> {
    match (cfg.detector, pal) {
        (DetectorSource::Oracle, Some(pal)) => {
            let images = load_images(&out.join(CROPPED_DIR), &entry.images)?;
            let per: Vec<Vec<Detection>> = images
                .par_iter()
                .map(|img| oracle_window_detector(img, pal.window, &pal.others, cfg.oracle_min_pixels))
                .collect();
            let dets: Vec<Detection> = per.into_iter().flatten().collect();
            let file = DetectionsFile { facade_id: entry.facade_id.clone(), detections: dets.clone() };
            write_json(&out.join(DETECTIONS_DIR).join(format!("{}.json", entry.facade_id)), &file)?;
            Ok(dets)
        }
        _ => {
            let dir = cfg.detections_dir.as_ref().ok_or_else(|| PipelineError::Config("detections_dir missing".into()))?;
            let path = dir.join(format!("{}.json", entry.facade_id));
            if !path.exists() {
                return Err(PipelineError::Config(format!("detections file {} not found", path.display())));
            }
            let file = DetectionsFile::load(&path).map_err(|e| PipelineError::Parse { path: path.clone(), message: e.to_string() })?;
            Ok(file.detections)
        }
    }
}

pub fn stage_fuse(cfg: &PipelineConfig, out: &Path) -> Result<Vec<FusedArtifact>> {
    let facades: FacadeArtifact = read_json(&out.join(FACADES))?;
    let pal = match cfg.detector {
        DetectorSource::Oracle => Some(palette(cfg, out)?),
        DetectorSource::File => None,
    };
    fresh_dir(&out.join(FUSED_DIR))?;
    if cfg.detector == DetectorSource::Oracle {
        fresh_dir(&out.join(DETECTIONS_DIR))?;
    }
    let mut all = Vec::new();
    for entry in &facades.facades {
        let raw = detections_for(cfg, out, entry, pal.as_ref())?;
        let detections = match cfg.data_source_type {
            DataSourceType::Streetview => fuse_multiview(&raw, &cfg.fusion),
            DataSourceType::Camera2d => filter_single_view(&raw, cfg.fusion.tau_conf),
        };
        let art = FusedArtifact { facade_id: entry.facade_id.clone(), raw: raw.len(), detections };
        write_json(&out.join(FUSED_DIR).join(format!("{}.json", entry.facade_id)), &art)?;
        all.push(art);
    }
    info!("fuse: {} facades", all.len());
    Ok(all)
}

pub fn stage_model(cfg: &PipelineConfig, out: &Path) -> Result<ThermalModel> {
    let _ = cfg;
    let facades: FacadeArtifact = read_json(&out.join(FACADES))?;
    let mut models = Vec::new();
    for entry in &facades.facades {
        let fused: FusedArtifact = read_json(&out.join(FUSED_DIR).join(format!("{}.json", entry.facade_id)))?;
        let (ox, oy) = (f64::from(entry.crop[0]), f64::from(entry.crop[1]));
        let shifted: Vec<Detection> = fused
            .detections
            .iter()
            .map(|d| Detection { bbox: [d.bbox[0] + ox, d.bbox[1] + oy, d.bbox[2] + ox, d.bbox[3] + oy], ..d.clone() })
            .collect();
        let crop = entry.crop.map(f64::from);
        let fbox = FacadeBox { bbox: crop, score: entry.facade_box.score };
        let m = FacadeModel::build(&entry.facade_id, entry.frame, fbox, &shifted).map_err(|e| stage_err("model", e))?;
        models.push(m);
    }
    let model = assemble_model(&facades.building_id, &facades.frame, models, facades.footprint.clone())
        .map_err(|e| PipelineError::Invariant(e.to_string()))?;
    write_json(&out.join(MODEL), &model)?;
    info!("model: {} facades", model.facades.len());
    Ok(model)
}

pub fn stage_eval(cfg: &PipelineConfig, out: &Path) -> Result<crate::eval::EvalReport> {
    let gt_path = cfg.ground_truth_path(out).ok_or_else(|| PipelineError::Config("no ground truth available".into()))?;
    let gt: GroundTruth = read_json(&gt_path)?;
    let model: ThermalModel = read_json(&out.join(MODEL))?;
    let report = evaluate(&model, &gt).map_err(|e| stage_err("eval", e))?;
    write_json(&out.join(EVAL_REPORT), &report)?;
    let csv = out.join(EVAL_CSV);
    fs::write(&csv, report.to_csv()).map_err(|e| PipelineError::Io { path: csv, message: e.to_string() })?;
    info!("eval: f1 {:?}, wwr error {:?}", report.detection.f1, report.wwr.standard);
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub model: ThermalModel,
    pub report: Option<crate::eval::EvalReport>,
}

#[derive(Serialize)]
struct RunReport<'a> {
    config: &'a PipelineConfig,
    stages: Vec<&'static str>,
    facades: usize,
}

fn run_stages(cfg: &PipelineConfig, out: &Path) -> Result<RunOutput> {
    make_dir(out)?;
    let mut stages = Vec::new();
    if cfg.data_source_type == DataSourceType::Streetview {
        if cfg.dataset.is_none() {
            stage_synth(cfg, out)?;
            stages.push("synth");
        }
        stage_ingest(cfg, out)?;
        stage_cluster(cfg, out)?;
        stage_ortho(cfg, out)?;
        stage_align(cfg, out)?;
        stage_facade(cfg, out)?;
        stages.extend(["ingest", "cluster", "ortho", "align", "facade"]);
    } else {
        stage_ortho(cfg, out)?;
        stages.push("ortho");
    }
    stage_fuse(cfg, out)?;
    let model = stage_model(cfg, out)?;
    stages.extend(["fuse", "model"]);
    let report = if cfg.ground_truth_path(out).is_some() {
        stages.push("eval");
        Some(stage_eval(cfg, out)?)
    } else {
        None
    };
    write_json(&out.join("run_report.json"), &RunReport { config: cfg, stages, facades: model.facades.len() })?;
    Ok(RunOutput { model, report })
}

/// Runs every stage in order, on `cfg.threads` workers when set.
pub fn run_pipeline(cfg: &PipelineConfig, out: &Path) -> Result<RunOutput> {
    cfg.validate()?;
    match cfg.threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build().map_err(|e| PipelineError::Config(e.to_string()))?;
            pool.install(|| run_stages(cfg, out))
        }
        None => run_stages(cfg, out),
    }
}
