//! Deterministic synthetic buildings, an analytic panorama renderer and
//! color-based oracles standing in for capture and detection.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use image::{Rgba, RgbaImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{ManifestFile, PanoEntry, PanoRecord, Panorama, PlaneAssocMatrix, RawPlane, SyntheticInfo, ASSOC_COLS, ASSOC_ROWS};
use crate::eval::{GroundTruth, GtFacade, GtWindow};
use crate::fusion::{Detection, WINDOW_CATEGORY};
use crate::geometry::{plane_basis, Mat3, PanoPose, Plane, PlaneBasis, UnitVec3, Vec3};
use crate::ortho::{OrthoImage, RayColorOracle};

pub const WINDOW_COLOR: [u8; 3] = [40, 55, 95];
pub const SKY_COLOR: [u8; 3] = [135, 170, 215];
pub const GROUND_COLOR: [u8; 3] = [70, 72, 68];
pub const WALL_COLORS: [[u8; 3]; 4] = [[230, 215, 190], [150, 125, 110], [215, 185, 155], [125, 105, 95]];

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    Config(String),
    #[error("pose at ({x:.2}, {y:.2}) lies inside the building")]
    DegeneratePose { x: f64, y: f64 },
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
}

pub type Result<T> = std::result::Result<T, SynthError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WindowSpec {
    /// Regular grid of equally sized windows, meters.
    Grid { rows: usize, cols: usize, width: f64, height: f64 },
    /// Grid sized per facade so that the WWR is drawn from `wwr`.
    Target { wwr: [f64; 2] },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    /// 1 gives a single wall, 4 a rectangle, any other n >= 3 a regular polygon.
    pub n_facades: usize,
    pub facade_width: [f64; 2],
    pub facade_height: [f64; 2],
    pub windows: WindowSpec,
    pub position_jitter_m: f64,
    /// Relative window size jitter.
    pub size_jitter: f64,
    /// Minimum gap between a window and its grid cell border, meters.
    pub cell_margin_m: f64,
    pub n_panos: usize,
    /// Distance from the footprint's bounding circle to the camera ring.
    pub ring_offset_m: f64,
    pub camera_height_m: f64,
    pub width: u32,
    pub height: u32,
    /// Subsamples per pixel side.
    pub supersample: u32,
    pub noise_sigma: f64,
    /// Uniform jitter applied to exported plane offsets, meters.
    pub plane_jitter_m: f64,
    pub capture_date: NaiveDate,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_facades: 4,
            facade_width: [14.0, 20.0],
            facade_height: [8.0, 12.0],
            windows: WindowSpec::Target { wwr: [0.18, 0.32] },
            position_jitter_m: 0.15,
            size_jitter: 0.05,
            cell_margin_m: 0.3,
            n_panos: 8,
            ring_offset_m: 12.0,
            camera_height_m: 2.5,
            width: 4096,
            height: 2048,
            supersample: 2,
            noise_sigma: 0.0,
            plane_jitter_m: 0.0,
            capture_date: NaiveDate::from_ymd_opt(2024, 6, 1).expect("valid date"),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SynthError::Config(m));
        if self.n_facades == 0 || self.n_facades == 2 {
            return bad(format!("n_facades = {} must be 1 or at least 3", self.n_facades));
        }
        for (name, r) in [("facade_width", self.facade_width), ("facade_height", self.facade_height)] {
            if !(r[0] > 0.0 && r[1] >= r[0] && r[1].is_finite()) {
                return bad(format!("{name} range {r:?} must be positive and ordered"));
            }
        }
        match self.windows {
            WindowSpec::Grid { rows, cols, width, height } => {
                if rows == 0 || cols == 0 || !(width > 0.0 && height > 0.0) {
                    return bad("window grid needs positive rows, cols and sizes".into());
                }
            }
            WindowSpec::Target { wwr } => {
                if !(wwr[0] > 0.0 && wwr[1] >= wwr[0] && wwr[1] < 1.0) {
                    return bad(format!("target wwr range {wwr:?} must lie in (0, 1)"));
                }
            }
        }
        if self.width < 512 || self.height < 256 {
            return bad(format!("resolution {}x{} below 512x256", self.width, self.height));
        }
        if self.n_panos == 0 || self.supersample == 0 {
            return bad("n_panos and supersample must be positive".into());
        }
        for (name, v) in [
            ("position_jitter_m", self.position_jitter_m),
            ("size_jitter", self.size_jitter),
            ("cell_margin_m", self.cell_margin_m),
            ("ring_offset_m", self.ring_offset_m),
            ("noise_sigma", self.noise_sigma),
            ("plane_jitter_m", self.plane_jitter_m),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} = {v} must be finite and non-negative"));
            }
        }
        if self.size_jitter >= 1.0 {
            return bad("size_jitter must be below 1".into());
        }
        if !(self.camera_height_m > 0.0) {
            return bad("camera_height_m must be positive".into());
        }
        Ok(())
    }
}

/// One planar facade; `extent` and `windows` are `[u0, v0, u1, v1]` in `basis`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthFacade {
    pub facade_id: String,
    /// Outward-facing plane.
    pub plane: Plane,
    pub basis: PlaneBasis,
    pub extent: [f64; 4],
    pub wall_color: [u8; 3],
    pub windows: Vec<[f64; 4]>,
}

impl SynthFacade {
    fn rect_corners(&self, r: &[f64; 4]) -> [Vec3; 4] {
        let b = &self.basis;
        [b.to_world((r[0], r[1])), b.to_world((r[2], r[1])), b.to_world((r[2], r[3])), b.to_world((r[0], r[3]))]
    }

    pub fn corners(&self) -> [Vec3; 4] {
        self.rect_corners(&self.extent)
    }

    pub fn area(&self) -> f64 {
        (self.extent[2] - self.extent[0]) * (self.extent[3] - self.extent[1])
    }

    pub fn wwr(&self) -> f64 {
        self.windows.iter().map(|w| (w[2] - w[0]) * (w[3] - w[1])).sum::<f64>() / self.area()
    }

    fn contains(&self, uv: (f64, f64)) -> bool {
        let e = &self.extent;
        uv.0 >= e[0] && uv.0 <= e[2] && uv.1 >= e[1] && uv.1 <= e[3]
    }

    fn color_at(&self, uv: (f64, f64), window: [u8; 3]) -> [u8; 3] {
        if self.windows.iter().any(|w| uv.0 >= w[0] && uv.0 < w[2] && uv.1 >= w[1] && uv.1 < w[3]) {
            window
        } else {
            self.wall_color
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthBuilding {
    pub building_id: String,
    pub facades: Vec<SynthFacade>,
    /// Ground-level footprint vertices, counter-clockwise seen from above.
    pub footprint: Vec<Vec3>,
    pub window_color: [u8; 3],
    pub sky_color: [u8; 3],
    pub ground_color: [u8; 3],
}

/// What a ray sees first.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Hit {
    Facade { index: usize, t: f64, uv: (f64, f64) },
    Ground { t: f64 },
    Sky,
}

impl SynthBuilding {
    pub fn ground_truth(&self) -> GroundTruth {
        GroundTruth {
            building_id: self.building_id.clone(),
            facades: self
                .facades
                .iter()
                .map(|f| GtFacade {
                    facade_id: f.facade_id.clone(),
                    plane: f.plane,
                    corners: f.corners(),
                    windows: f.windows.iter().map(|w| GtWindow { corners: f.rect_corners(w) }).collect(),
                    wwr: f.wwr(),
                })
                .collect(),
        }
    }

    /// Nearest front-facing facade or ground hit along a forward ray.
    pub fn trace(&self, origin: Vec3, dir: Vec3) -> Hit {
        let mut best: Option<(usize, f64, (f64, f64))> = None;
        for (i, f) in self.facades.iter().enumerate() {
            let denom = f.plane.normal.vec().dot(dir);
            if denom >= -1e-12 {
                continue;
            }
            let t = (f.plane.d - f.plane.normal.vec().dot(origin)) / denom;
            if t <= 0.0 || best.is_some_and(|b| t >= b.1) {
                continue;
            }
            let uv = f.basis.to_plane(origin + dir * t);
            if f.contains(uv) {
                best = Some((i, t, uv));
            }
        }
        let ground = (dir.z < -1e-12).then(|| -origin.z / dir.z).filter(|t| *t > 0.0);
        match (best, ground) {
            (Some((index, t, uv)), g) if g.is_none_or(|g| t <= g) => Hit::Facade { index, t, uv },
            (_, Some(t)) => Hit::Ground { t },
            _ => Hit::Sky,
        }
    }

    fn hit_color(&self, hit: Hit) -> [u8; 3] {
        match hit {
            Hit::Facade { index, uv, .. } => self.facades[index].color_at(uv, self.window_color),
            Hit::Ground { .. } => self.ground_color,
            Hit::Sky => self.sky_color,
        }
    }

    pub fn contains_xy(&self, p: Vec3) -> bool {
        let fp = &self.footprint;
        if fp.len() < 3 {
            return false;
        }
        let mut inside = false;
        let mut j = fp.len() - 1;
        for i in 0..fp.len() {
            let (a, b) = (fp[i], fp[j]);
            if (a.y > p.y) != (b.y > p.y) && p.x < (b.x - a.x) * (p.y - a.y) / (b.y - a.y) + a.x {
                inside = !inside;
            }
            j = i;
        }
        inside
    }

    pub fn other_colors(&self) -> Vec<[u8; 3]> {
        let mut c: Vec<[u8; 3]> = self.facades.iter().map(|f| f.wall_color).collect();
        c.push(self.sky_color);
        c.push(self.ground_color);
        c.sort_unstable();
        c.dedup();
        c
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        serde_json::from_str(&text).map_err(|e| io_err(path, e))
    }
}

/// Color of the facade surface met along the full line through `origin`
/// (closest to `origin`), standing in for a trained radiance field.
impl RayColorOracle for SynthBuilding {
    fn query(&self, origin: Vec3, dir: UnitVec3, _samples: u32) -> Rgba<u8> {
        let d = dir.vec();
        let mut best: Option<(f64, [u8; 3])> = None;
        for f in &self.facades {
            let denom = f.plane.normal.vec().dot(d);
            if denom.abs() < 1e-12 {
                continue;
            }
            let t = (f.plane.d - f.plane.normal.vec().dot(origin)) / denom;
            if best.is_some_and(|b| t.abs() >= b.0) {
                continue;
            }
            let uv = f.basis.to_plane(origin + d * t);
            if f.contains(uv) {
                best = Some((t.abs(), f.color_at(uv, self.window_color)));
            }
        }
        let [r, g, b] = best.map_or(self.sky_color, |b| b.1);
        Rgba([r, g, b, 255])
    }
}

fn io_err(path: &Path, e: impl ToString) -> SynthError {
    SynthError::Io { path: path.to_path_buf(), message: e.to_string() }
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.gen_range(r[0]..r[1])
    } else {
        r[0]
    }
}

fn footprint(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Vec3> {
    match cfg.n_facades {
        1 => {
            let w = uniform(rng, cfg.facade_width);
            vec![Vec3::new(-w / 2.0, 0.0, 0.0), Vec3::new(w / 2.0, 0.0, 0.0)]
        }
        4 => {
            let (w, d) = (uniform(rng, cfg.facade_width), uniform(rng, cfg.facade_width));
            vec![
                Vec3::new(-w / 2.0, -d / 2.0, 0.0),
                Vec3::new(w / 2.0, -d / 2.0, 0.0),
                Vec3::new(w / 2.0, d / 2.0, 0.0),
                Vec3::new(-w / 2.0, d / 2.0, 0.0),
            ]
        }
        n => {
            let side = uniform(rng, cfg.facade_width);
            let radius = side / (2.0 * (PI / n as f64).sin());
            (0..n)
                .map(|k| {
                    let a = -FRAC_PI_2 - PI / n as f64 + 2.0 * PI * k as f64 / n as f64;
                    Vec3::new(radius * a.cos(), radius * a.sin(), 0.0)
                })
                .collect()
        }
    }
}

fn layout_windows(cfg: &SynthConfig, rng: &mut ChaCha8Rng, extent: [f64; 4]) -> Result<Vec<[f64; 4]>> {
    let (fw, fh) = (extent[2] - extent[0], extent[3] - extent[1]);
    let (rows, cols, base_w, base_h) = match cfg.windows {
        WindowSpec::Grid { rows, cols, width, height } => (rows, cols, width, height),
        WindowSpec::Target { wwr } => {
            let rows = ((fh / 3.3).floor() as usize).max(1);
            let cols = ((fw / 3.2).floor() as usize).max(1);
            let target = uniform(rng, wwr);
            let area = target * fw * fh / (rows * cols) as f64;
            let aspect = rng.gen_range(1.1..1.5);
            let w = (area / aspect).sqrt();
            (rows, cols, w, w * aspect)
        }
    };
    let (cw, ch) = (fw / cols as f64, fh / rows as f64);
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let w = base_w * (1.0 + cfg.size_jitter * rng.gen_range(-1.0..=1.0));
            let h = base_h * (1.0 + cfg.size_jitter * rng.gen_range(-1.0..=1.0));
            let slack_x = (cw - w) / 2.0 - cfg.cell_margin_m;
            let slack_y = (ch - h) / 2.0 - cfg.cell_margin_m;
            if slack_x < 0.0 || slack_y < 0.0 {
                return Err(SynthError::Config(format!(
                    "{w:.2} x {h:.2} m window does not fit a {cw:.2} x {ch:.2} m cell with {} m margin",
                    cfg.cell_margin_m
                )));
            }
            let jx = cfg.position_jitter_m.min(slack_x);
            let jy = cfg.position_jitter_m.min(slack_y);
            let cx = extent[0] + (c as f64 + 0.5) * cw + if jx > 0.0 { rng.gen_range(-jx..=jx) } else { 0.0 };
            let cy = extent[1] + (r as f64 + 0.5) * ch + if jy > 0.0 { rng.gen_range(-jy..=jy) } else { 0.0 };
            out.push([cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0]);
        }
    }
    Ok(out)
}

/// Windows must lie inside the facade and must not overlap each other.
pub fn validate_windows(extent: &[f64; 4], windows: &[[f64; 4]]) -> Result<()> {
    let eps = 1e-9;
    for (i, w) in windows.iter().enumerate() {
        if w[0] < extent[0] - eps || w[1] < extent[1] - eps || w[2] > extent[2] + eps || w[3] > extent[3] + eps {
            return Err(SynthError::Config(format!("window {i} {w:?} exceeds facade {extent:?}")));
        }
        for (j, o) in windows.iter().enumerate().skip(i + 1) {
            if w[0] < o[2] && o[0] < w[2] && w[1] < o[3] && o[1] < w[3] {
                return Err(SynthError::Config(format!("windows {i} and {j} overlap")));
            }
        }
    }
    Ok(())
}

/// Building and its exact ground truth; deterministic per `cfg.seed`.
pub fn generate_building(cfg: &SynthConfig) -> Result<(SynthBuilding, GroundTruth)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let fp = footprint(cfg, &mut rng);
    let n_edges = if cfg.n_facades == 1 { 1 } else { fp.len() };
    let mut facades = Vec::with_capacity(n_edges);
    for k in 0..n_edges {
        let (a, b) = (fp[k], fp[(k + 1) % fp.len()]);
        let edge = b - a;
        let normal = Vec3::new(edge.y, -edge.x, 0.0).normalize().map_err(|_| SynthError::Config("degenerate edge".into()))?;
        let plane = Plane::new(normal, normal.vec().dot(a));
        let basis = plane_basis(&plane);
        let (ua, ub) = (basis.to_plane(a).0, basis.to_plane(b).0);
        let height = uniform(&mut rng, cfg.facade_height);
        let extent = [ua.min(ub), 0.0, ua.max(ub), height];
        let windows = layout_windows(cfg, &mut rng, extent)?;
        validate_windows(&extent, &windows)?;
        facades.push(SynthFacade {
            facade_id: format!("facade_{k}"),
            plane,
            basis,
            extent,
            wall_color: WALL_COLORS[k % WALL_COLORS.len()],
            windows,
        });
    }
    let building = SynthBuilding {
        building_id: format!("synth_{}", cfg.seed),
        facades,
        footprint: fp,
        window_color: WINDOW_COLOR,
        sky_color: SKY_COLOR,
        ground_color: GROUND_COLOR,
    };
    let gt = building.ground_truth();
    Ok((building, gt))
}

/// Camera poses on a ring around the building, with random headings.
pub fn ring_poses(b: &SynthBuilding, cfg: &SynthConfig) -> Result<Vec<PanoPose>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_0F_u64.rotate_left(32));
    let (mut cx, mut cy) = (0.0, 0.0);
    for p in &b.footprint {
        cx += p.x;
        cy += p.y;
    }
    let (cx, cy) = (cx / b.footprint.len() as f64, cy / b.footprint.len() as f64);
    let reach = b.footprint.iter().map(|p| (p.x - cx).hypot(p.y - cy)).fold(0.0, f64::max);
    let radius = reach + cfg.ring_offset_m;
    // A lone wall is only photographed from its front half-space.
    let (start, span) = if b.facades.len() == 1 {
        let n = b.facades[0].plane.normal;
        let a = n.y().atan2(n.x());
        (a - 70f64.to_radians(), 140f64.to_radians())
    } else {
        (rng.gen_range(0.0..2.0 * PI), 2.0 * PI)
    };
    let step = if b.facades.len() == 1 && cfg.n_panos > 1 { span / (cfg.n_panos - 1) as f64 } else { span / cfg.n_panos as f64 };
    (0..cfg.n_panos)
        .map(|k| {
            let a = start + step * k as f64;
            let pos = Vec3::new(cx + radius * a.cos(), cy + radius * a.sin(), cfg.camera_height_m);
            if b.contains_xy(pos) {
                return Err(SynthError::DegeneratePose { x: pos.x, y: pos.y });
            }
            let heading = rng.gen_range(0.0..360.0);
            PanoPose::new(pos, heading, 0.0, 0.0).map_err(|e| SynthError::Config(e.to_string()))
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct RenderedPano {
    pub image: RgbaImage,
    /// Exported planes in the panorama-local frame.
    pub planes: Vec<RawPlane>,
    /// Facade index of each exported plane; `None` marks the ground plane.
    pub plane_sources: Vec<Option<usize>>,
    pub assoc: PlaneAssocMatrix,
}

fn local_dir(theta_sc: (f64, f64), phi_sc: (f64, f64), rot: &Mat3) -> Vec3 {
    let (st, ct) = theta_sc;
    let (sp, cp) = phi_sc;
    rot.mul_vec(Vec3::new(cp * st, cp * ct, sp))
}

/// Renders one equirectangular panorama with its planes and association grid.
pub fn render_panorama(b: &SynthBuilding, pose: &PanoPose, width: u32, height: u32, cfg: &SynthConfig, noise_seed: u64) -> Result<RenderedPano> {
    if b.contains_xy(pose.position) {
        return Err(SynthError::DegeneratePose { x: pose.position.x, y: pose.position.y });
    }
    let rot = pose.rotation();
    let o = pose.position;
    let ss = cfg.supersample.max(1);
    let sub: Vec<f64> = (0..ss).map(|k| (f64::from(k) + 0.5) / f64::from(ss)).collect();
    let (w, h) = (f64::from(width), f64::from(height));
    let cols: Vec<Vec<(f64, f64)>> = (0..width)
        .map(|x| sub.iter().map(|s| (2.0 * PI * (f64::from(x) + s) / w - PI).sin_cos()).collect())
        .collect();
    let noise = (cfg.noise_sigma > 0.0).then(|| Normal::new(0.0, cfg.noise_sigma).expect("finite sigma"));
    let rows: Vec<Vec<u8>> = (0..height)
        .into_par_iter()
        .map(|y| {
            let phis: Vec<(f64, f64)> = sub.iter().map(|s| (FRAC_PI_2 - PI * (f64::from(y) + s) / h).sin_cos()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(noise_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(u64::from(y)));
            let mut row = Vec::with_capacity(width as usize * 4);
            for col in &cols {
                let mut acc = [0.0f64; 3];
                for phi in &phis {
                    for th in col {
                        let c = b.hit_color(b.trace(o, local_dir(*th, *phi, &rot)));
                        for k in 0..3 {
                            acc[k] += f64::from(c[k]);
                        }
                    }
                }
                let n = f64::from(ss * ss);
                for a in acc {
                    let mut v = a / n;
                    if let Some(dist) = &noise {
                        v += dist.sample(&mut rng);
                    }
                    row.push(v.round().clamp(0.0, 255.0) as u8);
                }
                row.push(255);
            }
            row
        })
        .collect();
    let image = RgbaImage::from_raw(width, height, rows.concat()).expect("buffer matches dimensions");

    // Association grid from cell-center rays, in facade/ground indices first.
    let ground = b.facades.len();
    let mut raw = vec![-1i64; ASSOC_COLS * ASSOC_ROWS];
    for row in 0..ASSOC_ROWS {
        let phi = (FRAC_PI_2 - PI * (row as f64 + 0.5) / ASSOC_ROWS as f64).sin_cos();
        for col in 0..ASSOC_COLS {
            let th = (2.0 * PI * (col as f64 + 0.5) / ASSOC_COLS as f64 - PI).sin_cos();
            raw[row * ASSOC_COLS + col] = match b.trace(o, local_dir(th, phi, &rot)) {
                Hit::Facade { index, .. } => index as i64,
                Hit::Ground { .. } => ground as i64,
                Hit::Sky => -1,
            };
        }
    }
    let mut seen = vec![false; ground + 1];
    for &v in &raw {
        if v >= 0 {
            seen[v as usize] = true;
        }
    }
    let mut plane_sources = Vec::new();
    let mut remap = vec![-1i32; ground + 1];
    for (i, _) in seen.iter().enumerate().filter(|(_, s)| **s) {
        remap[i] = plane_sources.len() as i32;
        plane_sources.push((i < ground).then_some(i));
    }
    let mut jitter = ChaCha8Rng::seed_from_u64(noise_seed ^ 0xD1CE);
    let rt = rot.transpose();
    let planes = plane_sources
        .iter()
        .map(|src| {
            let world = match src {
                Some(i) => b.facades[*i].plane,
                None => Plane::new(UnitVec3::Z, 0.0),
            };
            let n_local = rt.mul_vec(world.normal.vec());
            let mut d_local = world.d - world.normal.vec().dot(o);
            if cfg.plane_jitter_m > 0.0 {
                d_local += jitter.gen_range(-cfg.plane_jitter_m..=cfg.plane_jitter_m);
            }
            let s = if d_local < 0.0 { -1.0 } else { 1.0 };
            RawPlane { abcd: [s * n_local.x, s * n_local.y, s * n_local.z, s * d_local] }
        })
        .collect();
    let indices = raw.iter().map(|&v| if v < 0 { -1 } else { remap[v as usize] }).collect();
    let assoc = PlaneAssocMatrix::new(ASSOC_COLS, ASSOC_ROWS, indices).map_err(|e| SynthError::Config(e.to_string()))?;
    Ok(RenderedPano { image, planes, plane_sources, assoc })
}

/// Renders a panorama and wraps it as an in-memory [`Panorama`] with no
/// backing file.
pub fn render_record(b: &SynthBuilding, pose: &PanoPose, pano_id: &str, cfg: &SynthConfig, noise_seed: u64) -> Result<Panorama> {
    let r = render_panorama(b, pose, cfg.width, cfg.height, cfg, noise_seed)?;
    let record = PanoRecord {
        pano_id: pano_id.to_string(),
        image_path: PathBuf::new(),
        width: cfg.width,
        height: cfg.height,
        pose: *pose,
        capture_date: cfg.capture_date,
        neighbor_ids: Vec::new(),
        planes: r.planes,
        transform: pose.to_world(),
        assoc: r.assoc,
    };
    Ok(Panorama { record, image: r.image })
}

/// Files written by [`write_dataset`].
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub manifest: PathBuf,
    pub building: PathBuf,
    pub ground_truth: PathBuf,
}

/// Generates a building, renders its panorama ring and writes
/// `dataset.json`, `building.json` and `ground_truth.json` into `dir`.
pub fn write_dataset(cfg: &SynthConfig, dir: &Path) -> Result<SynthOutput> {
    let (building, gt) = generate_building(cfg)?;
    let poses = ring_poses(&building, cfg)?;
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let n = poses.len();
    let ids: Vec<String> = (0..n).map(|k| format!("pano_{k:02}")).collect();
    let mut entries = Vec::with_capacity(n);
    for (k, pose) in poses.iter().enumerate() {
        let r = render_panorama(&building, pose, cfg.width, cfg.height, cfg, cfg.seed.wrapping_add(k as u64))?;
        let image = format!("{}.png", ids[k]);
        let assoc = format!("{}_assoc.png", ids[k]);
        r.image.save(dir.join(&image)).map_err(|e| io_err(&dir.join(&image), e))?;
        r.assoc.write_png(&dir.join(&assoc)).map_err(|e| io_err(&dir.join(&assoc), e))?;
        // Ring adjacency; an arc in front of a lone wall does not wrap.
        let wrap = building.facades.len() > 1;
        let mut neighbors = Vec::new();
        for j in [k.checked_sub(1).or(wrap.then(|| n - 1)), (k + 1 < n).then_some(k + 1).or(wrap.then_some(0))].into_iter().flatten() {
            if j != k && !neighbors.contains(&ids[j]) {
                neighbors.push(ids[j].clone());
            }
        }
        entries.push(PanoEntry {
            pano_id: ids[k].clone(),
            image,
            width: cfg.width,
            height: cfg.height,
            pose: *pose,
            capture_date: cfg.capture_date,
            neighbors,
            planes: r.planes,
            transform: pose.to_world(),
            assoc,
            assoc_size: None,
        });
    }
    let manifest = ManifestFile {
        dataset_id: building.building_id.clone(),
        frame_origin: "synthetic local ENU, meters, z up".into(),
        panos: entries,
        footprint: Some(building.footprint.clone()),
        synthetic: Some(SyntheticInfo {
            window_color: building.window_color,
            other_colors: building.other_colors(),
            building: Some("building.json".into()),
        }),
    };
    let out = SynthOutput {
        manifest: dir.join("dataset.json"),
        building: dir.join("building.json"),
        ground_truth: dir.join("ground_truth.json"),
    };
    let write = |p: &Path, text: String| fs::write(p, text).map_err(|e| io_err(p, e));
    write(&out.manifest, serde_json::to_string_pretty(&manifest).expect("manifest serializes"))?;
    write(&out.building, serde_json::to_string_pretty(&building).expect("building serializes"))?;
    gt.save(&out.ground_truth).map_err(|e| io_err(&out.ground_truth, e))?;
    Ok(out)
}

/// Unmixes `c` against the blend line of the window color and each other
/// palette color; the best-fitting line decides whether the window share is
/// at least one half.
fn is_window(c: [u8; 3], window: [u8; 3], others: &[[u8; 3]]) -> bool {
    let f = |p: [u8; 3]| p.map(f64::from);
    let (c, w) = (f(c), f(window));
    let mut best: Option<(f64, f64)> = None;
    for o in others {
        let o = f(*o);
        let d: Vec<f64> = (0..3).map(|k| o[k] - w[k]).collect();
        let dd: f64 = d.iter().map(|v| v * v).sum();
        if dd == 0.0 {
            continue;
        }
        let t = ((0..3).map(|k| (c[k] - w[k]) * d[k]).sum::<f64>() / dd).clamp(0.0, 1.0);
        let resid: f64 = (0..3).map(|k| (c[k] - w[k] - t * d[k]).powi(2)).sum();
        if best.is_none_or(|b| resid < b.0) {
            best = Some((resid, t));
        }
    }
    match best {
        Some((_, t)) => t <= 0.5,
        None => c == w,
    }
}

/// Connected components (4-connectivity) of pixels that are at least half
/// window color, as tight boxes `[x0, y0, x1 + 1, y1 + 1]`.
pub fn oracle_window_detector(img: &OrthoImage, window: [u8; 3], others: &[[u8; 3]], min_pixels: usize) -> Vec<Detection> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mask: Vec<bool> = img
        .pixels
        .pixels()
        .map(|p| p.0[3] > 0 && is_window([p.0[0], p.0[1], p.0[2]], window, others))
        .collect();
    let mut label = vec![false; w * h];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if !mask[start] || label[start] {
            continue;
        }
        label[start] = true;
        stack.push(start);
        let (mut x0, mut y0, mut x1, mut y1, mut count) = (w, h, 0, 0, 0usize);
        while let Some(i) = stack.pop() {
            let (x, y) = (i % w, i / w);
            count += 1;
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
            let mut push = |j: usize| {
                if mask[j] && !label[j] {
                    label[j] = true;
                    stack.push(j);
                }
            };
            if x > 0 {
                push(i - 1);
            }
            if x + 1 < w {
                push(i + 1);
            }
            if y > 0 {
                push(i - w);
            }
            if y + 1 < h {
                push(i + w);
            }
        }
        if count >= min_pixels {
            out.push(Detection {
                bbox: [x0 as f64, y0 as f64, (x1 + 1) as f64, (y1 + 1) as f64],
                score: 1.0,
                category_id: WINDOW_CATEGORY,
                source_id: img.source_id.clone(),
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::pixel_to_dir;
    use crate::ortho::BACKGROUND;

    fn small() -> SynthConfig {
        SynthConfig { width: 1024, height: 512, n_panos: 4, ..SynthConfig::default() }
    }

    #[test]
    fn grid_wwr_example() {
        let cfg = SynthConfig {
            n_facades: 1,
            facade_width: [10.0, 10.0],
            facade_height: [20.0, 20.0],
            windows: WindowSpec::Grid { rows: 5, cols: 2, width: 2.5, height: 2.0 },
            size_jitter: 0.0,
            ..small()
        };
        let (b, gt) = generate_building(&cfg).unwrap();
        assert_eq!(b.facades[0].windows.len(), 10);
        assert!((gt.facades[0].wwr - 0.25).abs() < 1e-12);
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_building(&SynthConfig { seed: 7, ..small() }).unwrap();
        let b = generate_building(&SynthConfig { seed: 7, ..small() }).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        let c = generate_building(&SynthConfig { seed: 8, ..small() }).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn oversized_windows_rejected() {
        let cfg = SynthConfig {
            n_facades: 1,
            facade_width: [10.0, 10.0],
            windows: WindowSpec::Grid { rows: 1, cols: 2, width: 6.0, height: 2.0 },
            ..small()
        };
        assert!(matches!(generate_building(&cfg), Err(SynthError::Config(_))));
        let e = [0.0, 0.0, 10.0, 10.0];
        assert!(validate_windows(&e, &[[9.0, 1.0, 11.0, 2.0]]).is_err());
        assert!(validate_windows(&e, &[[1.0, 1.0, 3.0, 3.0], [2.0, 2.0, 4.0, 4.0]]).is_err());
    }

    #[test]
    fn target_wwr_in_range() {
        for seed in 0..10 {
            let (_, gt) = generate_building(&SynthConfig { seed, ..small() }).unwrap();
            for f in &gt.facades {
                assert!((0.15..=0.35).contains(&f.wwr), "seed {seed}: wwr {}", f.wwr);
            }
        }
    }

    #[test]
    fn render_center_sky_and_assoc() {
        let cfg = small();
        let (b, _) = generate_building(&cfg).unwrap();
        let f = &b.facades[0];
        let center = f.basis.to_world((0.5 * (f.extent[0] + f.extent[2]), 0.5 * (f.extent[1] + f.extent[3])));
        let pos = center + f.plane.normal.vec() * 15.0;
        let pose = PanoPose::new(Vec3::new(pos.x, pos.y, 2.5), 0.0, 0.0, 0.0).unwrap();
        let r = render_panorama(&b, &pose, cfg.width, cfg.height, &cfg, 0).unwrap();
        // Straight up is sky with no plane.
        let top = r.image.get_pixel(10, 0).0;
        assert_eq!([top[0], top[1], top[2]], b.sky_color);
        assert_eq!(r.assoc.get(0, 10), -1);
        // Every cell center agrees with a direct trace.
        let rec_w = cfg.width;
        for row in (0..ASSOC_ROWS).step_by(7) {
            for col in (0..ASSOC_COLS).step_by(5) {
                let x = (col as f64 + 0.5) * f64::from(rec_w) / ASSOC_COLS as f64;
                let y = (row as f64 + 0.5) * f64::from(cfg.height) / ASSOC_ROWS as f64;
                let dir = pixel_to_dir(x, y, cfg.width, cfg.height, &pose).unwrap();
                let expect = match b.trace(pose.position, dir.vec()) {
                    Hit::Facade { index, .. } => r.plane_sources.iter().position(|s| *s == Some(index)).map(|i| i as i32),
                    Hit::Ground { .. } => r.plane_sources.iter().position(Option::is_none).map(|i| i as i32),
                    Hit::Sky => Some(-1),
                };
                assert_eq!(Some(r.assoc.get(row, col)), expect);
            }
        }
        // The facade center pixel shows the wall or a window as painted.
        let (u, v) = crate::geometry::project_world_to_pano(center, &pose, cfg.width, cfg.height).unwrap();
        let px = r.image.get_pixel(u as u32, v as u32).0;
        let expect = f.color_at(f.basis.to_plane(center), b.window_color);
        assert_eq!([px[0], px[1], px[2]], expect);
    }

    #[test]
    fn pose_inside_is_rejected() {
        let cfg = small();
        let (b, _) = generate_building(&cfg).unwrap();
        let pose = PanoPose::new(Vec3::new(0.0, 0.0, 2.5), 0.0, 0.0, 0.0).unwrap();
        assert!(matches!(render_panorama(&b, &pose, 512, 256, &cfg, 0), Err(SynthError::DegeneratePose { .. })));
    }

    #[test]
    fn exported_planes_round_trip_to_world() {
        let cfg = small();
        let (b, _) = generate_building(&cfg).unwrap();
        let poses = ring_poses(&b, &cfg).unwrap();
        let r = render_panorama(&b, &poses[0], 512, 256, &cfg, 0).unwrap();
        for (p, src) in r.planes.iter().zip(&r.plane_sources) {
            let local = p.normalized().unwrap();
            let world = crate::geometry::transform_plane(&local, &poses[0].to_world());
            let truth = src.map_or(Plane::new(UnitVec3::Z, 0.0), |i| b.facades[i].plane);
            let cos = world.normal.dot(truth.normal);
            assert!((cos.abs() - 1.0).abs() < 1e-12);
            assert!((world.d - cos.signum() * truth.d).abs() < 1e-9);
        }
    }

    fn ortho_with(rects: &[[u32; 4]], color: [u8; 3]) -> OrthoImage {
        let mut pixels = RgbaImage::from_pixel(40, 30, Rgba([200, 200, 200, 255]));
        for r in rects {
            for y in r[1]..r[3] {
                for x in r[0]..r[2] {
                    pixels.put_pixel(x, y, Rgba([color[0], color[1], color[2], 255]));
                }
            }
        }
        pixels.put_pixel(0, 0, BACKGROUND);
        let plane = Plane::new(UnitVec3::Y, 0.0);
        OrthoImage { pixels, pixel_size: 0.1, plane, basis: plane_basis(&plane), grid_origin2d: (0.0, 0.0), source_id: "s".into() }
    }

    #[test]
    fn oracle_detector_examples() {
        let others = [[200, 200, 200]];
        let two = ortho_with(&[[2, 2, 8, 9], [20, 5, 30, 12]], WINDOW_COLOR);
        let d = oracle_window_detector(&two, WINDOW_COLOR, &others, 1);
        assert_eq!(d.len(), 2);
        assert_eq!(d[0].bbox, [2.0, 2.0, 8.0, 9.0]);
        assert_eq!(d[1].bbox, [20.0, 5.0, 30.0, 12.0]);
        assert!(d.iter().all(|d| d.score == 1.0 && d.category_id == WINDOW_CATEGORY));
        assert!(oracle_window_detector(&ortho_with(&[], WINDOW_COLOR), WINDOW_COLOR, &others, 1).is_empty());
        let touching = ortho_with(&[[2, 2, 8, 9], [8, 2, 14, 9]], WINDOW_COLOR);
        assert_eq!(oracle_window_detector(&touching, WINDOW_COLOR, &others, 1).len(), 1);
        let diagonal = ortho_with(&[[2, 2, 8, 9], [8, 9, 14, 15]], WINDOW_COLOR);
        assert_eq!(oracle_window_detector(&diagonal, WINDOW_COLOR, &others, 1).len(), 2);
    }

    #[test]
    fn volume_oracle_sees_facade_surface() {
        let (b, _) = generate_building(&small()).unwrap();
        let f = &b.facades[0];
        let w = f.windows[0];
        let p = f.basis.to_world((0.5 * (w[0] + w[2]), 0.5 * (w[1] + w[3])));
        let c = b.query(p, f.plane.normal, 1).0;
        assert_eq!([c[0], c[1], c[2]], b.window_color);
        let wall = f.basis.to_world((f.extent[0] + 0.1, f.extent[1] + 0.1));
        let c = b.query(wall + f.plane.normal.vec() * 0.5, f.plane.normal, 1).0;
        assert_eq!([c[0], c[1], c[2]], f.wall_color);
    }
}
