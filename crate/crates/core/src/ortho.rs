//! True-to-scale orthographic facade images, sampled either from panoramas or
//! from a volumetric ray-color oracle.
//!
//! Ortho pixel `(x, y)` covers the in-plane square
//! `grid_origin2d + [x, x+1) x [y, y+1)` (times `pixel_size`) and is sampled
//! at its center. Row index grows along the basis `v` axis, i.e. upwards on a
//! wall.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgba, RgbaImage};
use log::{debug, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::{PlaneCluster, SegmentRef};
use crate::dataset::Panorama;
use crate::geometry::{
    pixel_to_dir, plane_basis, project_world_to_pano, ray_plane_intersect, transform_plane, Plane, PlaneBasis,
    UnitVec3, Vec3,
};

pub const DEFAULT_PIXEL_SIZE: f64 = 0.02;
pub const BACKGROUND: Rgba<u8> = Rgba([0, 0, 0, 0]);

#[derive(Debug, Error)]
pub enum OrthoError {
    #[error("segment has no 3D points")]
    EmptySegment,
    #[error("degenerate extent: {0}")]
    DegenerateExtent(String),
    #[error("segment points are {0:.3} m off the plane")]
    NotCoplanar(f64),
    #[error("invalid pixel size {0}")]
    InvalidPixelSize(f64),
    #[error("i/o error on {path}: {message}")]
    Io { path: PathBuf, message: String },
}

pub type Result<T> = std::result::Result<T, OrthoError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    #[default]
    Bilinear,
    Nearest,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ExtentMode {
    Percentile { lo: f64, hi: f64 },
    MinMax,
}

impl Default for ExtentMode {
    fn default() -> Self {
        ExtentMode::Percentile { lo: 2.0, hi: 98.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OrthoConfig {
    pub pixel_size: f64,
    pub sampling: Sampling,
    pub extent: ExtentMode,
    /// Padding added on every side of the measured extent, meters.
    pub margin_m: f64,
    /// Views whose line of sight to the segment centroid is further than this
    /// from the plane normal are skipped, degrees.
    pub max_incidence_deg: f64,
}

impl Default for OrthoConfig {
    fn default() -> Self {
        Self {
            pixel_size: DEFAULT_PIXEL_SIZE,
            sampling: Sampling::Bilinear,
            extent: ExtentMode::default(),
            margin_m: 1.0,
            max_incidence_deg: 70.0,
        }
    }
}

/// Orthographic image of a plane plus the geometry needed to georeference it.
#[derive(Debug, Clone, PartialEq)]
pub struct OrthoImage {
    pub pixels: RgbaImage,
    pub pixel_size: f64,
    pub plane: Plane,
    pub basis: PlaneBasis,
    pub grid_origin2d: (f64, f64),
    pub source_id: String,
}

/// JSON sidecar stored next to the PNG.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrthoSidecar {
    pub width: u32,
    pub height: u32,
    pub pixel_size: f64,
    pub plane: Plane,
    pub basis: PlaneBasis,
    pub grid_origin2d: (f64, f64),
    pub source_id: String,
}

impl OrthoImage {
    pub fn width(&self) -> u32 {
        self.pixels.width()
    }

    pub fn height(&self) -> u32 {
        self.pixels.height()
    }

    /// In-plane coordinates of continuous pixel position `(x, y)`.
    pub fn pixel_to_plane(&self, x: f64, y: f64) -> (f64, f64) {
        (self.grid_origin2d.0 + x * self.pixel_size, self.grid_origin2d.1 + y * self.pixel_size)
    }

    pub fn plane_to_pixel(&self, uv: (f64, f64)) -> (f64, f64) {
        ((uv.0 - self.grid_origin2d.0) / self.pixel_size, (uv.1 - self.grid_origin2d.1) / self.pixel_size)
    }

    pub fn pixel_to_world(&self, x: f64, y: f64) -> Vec3 {
        self.basis.to_world(self.pixel_to_plane(x, y))
    }

    pub fn world_to_pixel(&self, p: Vec3) -> (f64, f64) {
        self.plane_to_pixel(self.basis.to_plane(p))
    }

    pub fn foreground_count(&self) -> usize {
        self.pixels.pixels().filter(|p| p.0[3] != 0).count()
    }

    pub fn sidecar(&self) -> OrthoSidecar {
        OrthoSidecar {
            width: self.width(),
            height: self.height(),
            pixel_size: self.pixel_size,
            plane: self.plane,
            basis: self.basis,
            grid_origin2d: self.grid_origin2d,
            source_id: self.source_id.clone(),
        }
    }

    /// Writes `<stem>.png` and `<stem>.json`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<PathBuf> {
        let png = dir.join(format!("{stem}.png"));
        self.pixels.save(&png).map_err(|e| OrthoError::Io { path: png.clone(), message: e.to_string() })?;
        let json = dir.join(format!("{stem}.json"));
        let text = serde_json::to_string_pretty(&self.sidecar()).expect("sidecar serializes");
        fs::write(&json, text).map_err(|e| OrthoError::Io { path: json.clone(), message: e.to_string() })?;
        Ok(png)
    }

    /// Loads an image from its PNG path; the sidecar is the same path with a
    /// `.json` extension.
    pub fn load(png: &Path) -> Result<Self> {
        let json = png.with_extension("json");
        let io = |p: &Path, e: String| OrthoError::Io { path: p.to_path_buf(), message: e };
        let text = fs::read_to_string(&json).map_err(|e| io(&json, e.to_string()))?;
        let side: OrthoSidecar = serde_json::from_str(&text).map_err(|e| io(&json, e.to_string()))?;
        let pixels = image::open(png).map_err(|e| io(png, e.to_string()))?.into_rgba8();
        if pixels.dimensions() != (side.width, side.height) {
            return Err(io(png, "image size disagrees with sidecar".into()));
        }
        Ok(Self {
            pixels,
            pixel_size: side.pixel_size,
            plane: side.plane,
            basis: side.basis,
            grid_origin2d: side.grid_origin2d,
            source_id: side.source_id,
        })
    }
}

/// Volumetric renderer queried with single rays.
pub trait RayColorOracle: Sync {
    fn query(&self, origin: Vec3, dir: UnitVec3, samples: u32) -> Rgba<u8>;
}

/// Returns the same color for every ray.
#[derive(Debug, Clone, Copy)]
pub struct ConstantOracle(pub Rgba<u8>);

impl RayColorOracle for ConstantOracle {
    fn query(&self, _: Vec3, _: UnitVec3, _: u32) -> Rgba<u8> {
        self.0
    }
}

/// Linear-interpolated percentile of sorted data, `q` in percent.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = (q / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let j = (i + 1).min(sorted.len() - 1);
    sorted[i] + (sorted[j] - sorted[i]) * (pos - i as f64)
}

fn axis_extent(mut values: Vec<f64>, mode: ExtentMode) -> (f64, f64) {
    values.sort_by(f64::total_cmp);
    match mode {
        ExtentMode::MinMax => (values[0], values[values.len() - 1]),
        ExtentMode::Percentile { lo, hi } => (percentile(&values, lo), percentile(&values, hi)),
    }
}

fn check_pixel_size(s: f64) -> Result<()> {
    if s.is_finite() && s > 0.0 {
        Ok(())
    } else {
        Err(OrthoError::InvalidPixelSize(s))
    }
}

/// Color of continuous panorama position `(u, v)`; wraps horizontally.
pub fn sample_pano(img: &RgbaImage, u: f64, v: f64, sampling: Sampling) -> Rgba<u8> {
    let (w, h) = (img.width() as i64, img.height() as i64);
    if !(0.0..h as f64).contains(&v) || !u.is_finite() {
        return BACKGROUND;
    }
    let wrap = |x: i64| x.rem_euclid(w) as u32;
    let clamp = |y: i64| y.clamp(0, h - 1) as u32;
    match sampling {
        Sampling::Nearest => *img.get_pixel(wrap(u.floor() as i64), clamp(v.floor() as i64)),
        Sampling::Bilinear => {
            let (fx, fy) = (u - 0.5, v - 0.5);
            let (x0, y0) = (fx.floor(), fy.floor());
            let (ax, ay) = (fx - x0, fy - y0);
            let (x0, y0) = (x0 as i64, y0 as i64);
            let taps = [
                (wrap(x0), clamp(y0), (1.0 - ax) * (1.0 - ay)),
                (wrap(x0 + 1), clamp(y0), ax * (1.0 - ay)),
                (wrap(x0), clamp(y0 + 1), (1.0 - ax) * ay),
                (wrap(x0 + 1), clamp(y0 + 1), ax * ay),
            ];
            let mut acc = [0.0f64; 4];
            for (x, y, wt) in taps {
                let p = img.get_pixel(x, y);
                for c in 0..4 {
                    acc[c] += wt * f64::from(p.0[c]);
                }
            }
            Rgba(acc.map(|c| c.round().clamp(0.0, 255.0) as u8))
        }
    }
}

/// Orthographic image of `plane` as seen in one panorama, sized to the
/// in-plane extent of `segment_points`.
pub fn ortho_from_pano(
    pano: &Panorama,
    plane: &Plane,
    segment_points: &[Vec3],
    cfg: &OrthoConfig,
) -> Result<OrthoImage> {
    check_pixel_size(cfg.pixel_size)?;
    if segment_points.is_empty() {
        return Err(OrthoError::EmptySegment);
    }
    let off = segment_points.iter().map(|p| plane.signed_distance(*p).abs()).fold(0.0, f64::max);
    if off >= 0.2 {
        return Err(OrthoError::NotCoplanar(off));
    }
    let basis = plane_basis(plane);
    let (us, vs): (Vec<f64>, Vec<f64>) = segment_points.iter().map(|p| basis.to_plane(*p)).unzip();
    let (u0, u1) = axis_extent(us, cfg.extent);
    let (v0, v1) = axis_extent(vs, cfg.extent);
    let (u0, u1, v0, v1) = (u0 - cfg.margin_m, u1 + cfg.margin_m, v0 - cfg.margin_m, v1 + cfg.margin_m);
    let s = cfg.pixel_size;
    let width = ((u1 - u0) / s).round();
    let height = ((v1 - v0) / s).round();
    if !(width >= 2.0 && height >= 2.0) {
        return Err(OrthoError::DegenerateExtent(format!(
            "{:.3} x {:.3} m at {s} m/px",
            u1 - u0,
            v1 - v0
        )));
    }
    let (width, height) = (width as u32, height as u32);
    let rec = &pano.record;
    let rows: Vec<Vec<Rgba<u8>>> = (0..height)
        .into_par_iter()
        .map(|y| {
            (0..width)
                .map(|x| {
                    let p = basis.to_world((u0 + (f64::from(x) + 0.5) * s, v0 + (f64::from(y) + 0.5) * s));
                    match project_world_to_pano(p, &rec.pose, rec.width, rec.height) {
                        Ok((pu, pv)) => sample_pano(&pano.image, pu, pv, cfg.sampling),
                        Err(_) => BACKGROUND,
                    }
                })
                .collect()
        })
        .collect();
    let mut pixels = RgbaImage::new(width, height);
    for (y, row) in rows.into_iter().enumerate() {
        for (x, c) in row.into_iter().enumerate() {
            pixels.put_pixel(x as u32, y as u32, c);
        }
    }
    Ok(OrthoImage {
        pixels,
        pixel_size: s,
        plane: *plane,
        basis,
        grid_origin2d: (u0, v0),
        source_id: rec.pano_id.clone(),
    })
}

/// World points of every association cell of plane `plane_idx` in `pano`.
pub fn segment_points(pano: &Panorama, plane_idx: usize) -> Vec<Vec3> {
    let rec = &pano.record;
    let Some(local) = rec.planes.get(plane_idx).and_then(|p| p.normalized()) else {
        return Vec::new();
    };
    let world = transform_plane(&local, &rec.transform);
    let mut out = Vec::new();
    for row in 0..rec.assoc.rows {
        for col in 0..rec.assoc.cols {
            if rec.assoc.get(row, col) != plane_idx as i32 {
                continue;
            }
            let (x, y) = rec.cell_center(row, col);
            let Ok(dir) = pixel_to_dir(x, y, rec.width, rec.height, &rec.pose) else { continue };
            if let Ok(p) = ray_plane_intersect(rec.pose.position, dir, &world) {
                out.push(p);
            }
        }
    }
    out
}

/// Angle between the view direction to `target` and the plane normal, degrees.
pub fn incidence_deg(camera: Vec3, target: Vec3, plane: &Plane) -> f64 {
    let Ok(dir) = (target - camera).normalize() else { return 90.0 };
    plane.normal.dot(dir).abs().clamp(0.0, 1.0).acos().to_degrees()
}

/// `plane` oriented so that `viewer` lies on its positive side, which keeps
/// ortho images unmirrored when seen from the viewer.
pub fn facing(plane: &Plane, viewer: Vec3) -> Plane {
    if plane.signed_distance(viewer) < 0.0 {
        plane.flipped()
    } else {
        *plane
    }
}

/// One ortho image per cluster member with a non-empty point set.
pub fn ortho_per_segment(
    clusters: &[PlaneCluster],
    panos: &[Panorama],
    cfg: &OrthoConfig,
) -> BTreeMap<SegmentRef, OrthoImage> {
    let by_id: BTreeMap<&str, &Panorama> = panos.iter().map(|p| (p.record.pano_id.as_str(), p)).collect();
    let members: Vec<&SegmentRef> = clusters.iter().flat_map(|c| c.members.iter()).collect();
    let results: Vec<Option<(SegmentRef, OrthoImage)>> = members
        .par_iter()
        .map(|seg| {
            let pano = by_id.get(seg.pano_id.as_str())?;
            let points = segment_points(pano, seg.plane_idx);
            if points.is_empty() {
                debug!("segment {}:{} has no points, skipped", seg.pano_id, seg.plane_idx);
                return None;
            }
            let local = pano.record.planes[seg.plane_idx].normalized()?;
            let plane = facing(&transform_plane(&local, &pano.record.transform), pano.record.pose.position);
            let mut centroid = Vec3::ZERO;
            for p in &points {
                centroid += *p;
            }
            let centroid = centroid * (1.0 / points.len() as f64);
            let inc = incidence_deg(pano.record.pose.position, centroid, &plane);
            if inc > cfg.max_incidence_deg {
                debug!("segment {}:{} seen at {inc:.1} deg, skipped", seg.pano_id, seg.plane_idx);
                return None;
            }
            match ortho_from_pano(pano, &plane, &points, cfg) {
                Ok(img) => Some(((*seg).clone(), img)),
                Err(e) => {
                    warn!("segment {}:{}: {e}", seg.pano_id, seg.plane_idx);
                    None
                }
            }
        })
        .collect();
    results.into_iter().flatten().collect()
}

/// Eq.-2 sample point for continuous pixel `(x, y)` of a volume ortho.
pub fn volume_point(corners: &[Vec3; 3], pixel_size: f64, x: f64, y: f64) -> Result<Vec3> {
    let (u_hat, v_hat, _) = volume_axes(corners)?;
    Ok(corners[0] + u_hat.vec() * (x * pixel_size) + v_hat.vec() * (y * pixel_size))
}

fn volume_axes(corners: &[Vec3; 3]) -> Result<(UnitVec3, UnitVec3, UnitVec3)> {
    let u = corners[1] - corners[0];
    let v = corners[2] - corners[0];
    let degenerate = |m: &str| OrthoError::DegenerateExtent(m.to_string());
    let u_hat = u.normalize().map_err(|_| degenerate("corner v1 coincides with v0"))?;
    let v_hat = v.normalize().map_err(|_| degenerate("corner v2 coincides with v0"))?;
    let cos = u_hat.dot(v_hat).abs();
    if cos > 2f64.to_radians().sin() {
        return Err(degenerate("corner edges are not orthogonal within 2 degrees"));
    }
    let n = u_hat.vec().cross(v_hat.vec()).normalize().map_err(|_| degenerate("collinear corners"))?;
    // Re-orthogonalize v against u so the basis is exact.
    let v_hat = n.vec().cross(u_hat.vec()).normalize().map_err(|_| degenerate("collinear corners"))?;
    Ok((u_hat, v_hat, n))
}

/// Orthographic image of the rectangle spanned by `corners` rendered from a
/// ray-color oracle, one ray per pixel along the facade normal `u x v`.
pub fn ortho_from_volume(
    oracle: &dyn RayColorOracle,
    corners: &[Vec3; 3],
    pixel_size: f64,
    samples_per_pixel: u32,
    source_id: &str,
) -> Result<OrthoImage> {
    check_pixel_size(pixel_size)?;
    let (u_hat, v_hat, n) = volume_axes(corners)?;
    let width = ((corners[1] - corners[0]).norm() / pixel_size).round();
    let height = ((corners[2] - corners[0]).norm() / pixel_size).round();
    if width < 1.0 || height < 1.0 {
        return Err(OrthoError::DegenerateExtent(format!("{width} x {height} px")));
    }
    let (width, height) = (width as u32, height as u32);
    let rows: Vec<Vec<Rgba<u8>>> = (0..height)
        .into_par_iter()
        .map(|y| {
            (0..width)
                .map(|x| {
                    let p = corners[0]
                        + u_hat.vec() * ((f64::from(x) + 0.5) * pixel_size)
                        + v_hat.vec() * ((f64::from(y) + 0.5) * pixel_size);
                    oracle.query(p, n, samples_per_pixel)
                })
                .collect()
        })
        .collect();
    let mut pixels = RgbaImage::new(width, height);
    for (y, row) in rows.into_iter().enumerate() {
        for (x, c) in row.into_iter().enumerate() {
            pixels.put_pixel(x as u32, y as u32, c);
        }
    }
    let plane = Plane::new(n, n.vec().dot(corners[0]));
    let basis = PlaneBasis { u: u_hat, v: v_hat, n, origin3d: corners[0] };
    Ok(OrthoImage { pixels, pixel_size, plane, basis, grid_origin2d: (0.0, 0.0), source_id: source_id.to_string() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{PanoRecord, PlaneAssocMatrix};
    use crate::geometry::{PanoPose, RigidTransform};
    use std::path::PathBuf;

    fn flat_pano(w: u32, h: u32, color: Rgba<u8>) -> Panorama {
        let record = PanoRecord {
            pano_id: "p".into(),
            image_path: PathBuf::new(),
            width: w,
            height: h,
            pose: PanoPose::at(Vec3::ZERO),
            capture_date: "2023-01-01".parse().unwrap(),
            neighbor_ids: vec![],
            planes: vec![],
            transform: RigidTransform::IDENTITY,
            assoc: PlaneAssocMatrix::filled(8, 4, -1),
        };
        Panorama { record, image: RgbaImage::from_pixel(w, h, color) }
    }

    fn exact_cfg() -> OrthoConfig {
        OrthoConfig { extent: ExtentMode::MinMax, margin_m: 0.0, ..OrthoConfig::default() }
    }

    #[test]
    fn extent_rounding_sizes_buffer() {
        let pano = flat_pano(256, 128, Rgba([9, 9, 9, 255]));
        let plane = Plane::new(UnitVec3::Y, 5.0);
        let pts = [Vec3::new(-2.0, 5.0, -1.0), Vec3::new(2.0, 5.0, 1.0)];
        let img = ortho_from_pano(&pano, &plane, &pts, &exact_cfg()).unwrap();
        assert_eq!((img.width(), img.height()), (200, 100));
        let origin = img.pixel_to_world(0.0, 0.0);
        assert!(origin.distance(img.basis.to_world(img.grid_origin2d)) < 1e-12);
        assert!(img.pixels.pixels().all(|p| *p == Rgba([9, 9, 9, 255])));
    }

    #[test]
    fn empty_and_degenerate_segments() {
        let pano = flat_pano(64, 32, Rgba([1, 1, 1, 255]));
        let plane = Plane::new(UnitVec3::Y, 5.0);
        assert!(matches!(ortho_from_pano(&pano, &plane, &[], &exact_cfg()), Err(OrthoError::EmptySegment)));
        let pts = [Vec3::new(0.0, 5.0, 0.0), Vec3::new(0.01, 5.0, 2.0)];
        assert!(matches!(
            ortho_from_pano(&pano, &plane, &pts, &exact_cfg()),
            Err(OrthoError::DegenerateExtent(_))
        ));
        let off = [Vec3::new(0.0, 5.5, 0.0), Vec3::new(1.0, 5.0, 1.0)];
        assert!(matches!(ortho_from_pano(&pano, &plane, &off, &exact_cfg()), Err(OrthoError::NotCoplanar(_))));
    }

    #[test]
    fn out_of_bounds_sample_is_background() {
        let img = RgbaImage::from_pixel(8, 4, Rgba([5, 5, 5, 255]));
        assert_eq!(sample_pano(&img, 1.0, -0.1, Sampling::Bilinear), BACKGROUND);
        assert_eq!(sample_pano(&img, 1.0, 4.0, Sampling::Nearest), BACKGROUND);
        assert_eq!(sample_pano(&img, 7.9, 2.0, Sampling::Bilinear), Rgba([5, 5, 5, 255]));
    }

    #[test]
    fn percentile_interpolates() {
        let v: Vec<f64> = (0..=100).map(f64::from).collect();
        assert_eq!(percentile(&v, 2.0), 2.0);
        assert_eq!(percentile(&v, 98.0), 98.0);
        assert_eq!(percentile(&[1.0, 2.0], 50.0), 1.5);
    }

    #[test]
    fn volume_eq2_points() {
        let corners = [Vec3::new(0.0, 5.0, 0.0), Vec3::new(4.0, 5.0, 0.0), Vec3::new(0.0, 5.0, 2.0)];
        let s = 0.02;
        assert_eq!(volume_point(&corners, s, 0.0, 0.0).unwrap(), corners[0]);
        let img = ortho_from_volume(&ConstantOracle(Rgba([1, 2, 3, 255])), &corners, s, 4, "v").unwrap();
        assert_eq!((img.width(), img.height()), (200, 100));
        let end = volume_point(&corners, s, f64::from(img.width()), 0.0).unwrap();
        assert!(end.distance(corners[1]) < 1e-12);
        assert!(img.pixels.pixels().all(|p| *p == Rgba([1, 2, 3, 255])));
        assert!(img.pixel_to_world(0.0, 0.0).distance(corners[0]) < 1e-12);
        assert!(img.pixel_to_world(200.0, 100.0).distance(Vec3::new(4.0, 5.0, 2.0)) < 1e-12);
    }

    #[test]
    fn volume_rejects_skewed_corners() {
        let skew = [Vec3::ZERO, Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.1, 0.0, 1.0)];
        assert!(matches!(
            ortho_from_volume(&ConstantOracle(BACKGROUND), &skew, 0.02, 1, "v"),
            Err(OrthoError::DegenerateExtent(_))
        ));
        let same = [Vec3::ZERO, Vec3::ZERO, Vec3::new(0.0, 0.0, 1.0)];
        assert!(ortho_from_volume(&ConstantOracle(BACKGROUND), &same, 0.02, 1, "v").is_err());
    }

    #[test]
    fn sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let corners = [Vec3::new(0.0, 5.0, 0.0), Vec3::new(1.0, 5.0, 0.0), Vec3::new(0.0, 5.0, 0.5)];
        let img = ortho_from_volume(&ConstantOracle(Rgba([7, 8, 9, 255])), &corners, 0.05, 1, "v").unwrap();
        let png = img.save(dir.path(), "facade").unwrap();
        assert_eq!(OrthoImage::load(&png).unwrap(), img);
    }
}
