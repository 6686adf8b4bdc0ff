//! On-disk panorama datasets: `dataset.json` manifests, equirectangular
//! images and 16-bit plane-association PNGs.
//!
//! All paths in a manifest are relative to the manifest's directory.

use std::collections::{BTreeMap, HashSet, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use image::{ImageBuffer, Luma, RgbaImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{GeometryError, PanoPose, Plane, RigidTransform, Vec3};

pub const ASSOC_COLS: usize = 512;
pub const ASSOC_ROWS: usize = 256;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invariant violation at {field}: {message}")]
    InvariantViolation { field: String, message: String },
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("image error on {path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("no panorama within {radius} m of the selection center")]
    EmptySelection { radius: f64 },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

fn violation(field: impl Into<String>, message: impl Into<String>) -> DatasetError {
    DatasetError::InvariantViolation { field: field.into(), message: message.into() }
}

pub type Result<T> = std::result::Result<T, DatasetError>;

/// Plane as delivered by the data source: `a*x + b*y + c*z = d`, not
/// necessarily normalized, possibly all zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct RawPlane {
    pub abcd: [f64; 4],
}

impl From<[f64; 4]> for RawPlane {
    fn from(abcd: [f64; 4]) -> Self {
        Self { abcd }
    }
}

impl From<RawPlane> for [f64; 4] {
    fn from(p: RawPlane) -> Self {
        p.abcd
    }
}

impl From<Plane> for RawPlane {
    fn from(p: Plane) -> Self {
        let n = p.normal.vec();
        Self { abcd: [n.x, n.y, n.z, p.d] }
    }
}

impl RawPlane {
    pub fn normal_magnitude(&self) -> f64 {
        Vec3::new(self.abcd[0], self.abcd[1], self.abcd[2]).norm()
    }

    /// Unit-normal form, `None` for a zero plane.
    pub fn normalized(&self) -> Option<Plane> {
        if self.normal_magnitude() < 1e-9 {
            return None;
        }
        Plane::from_abcd(self.abcd).ok()
    }
}

/// Low-resolution grid of plane indices aligned with a panorama; `-1` marks
/// cells without a plane.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneAssocMatrix {
    pub cols: usize,
    pub rows: usize,
    indices: Vec<i32>,
}

impl PlaneAssocMatrix {
    pub fn new(cols: usize, rows: usize, indices: Vec<i32>) -> Result<Self> {
        if cols == 0 || rows == 0 || indices.len() != cols * rows {
            return Err(violation(
                "assoc",
                format!("expected {}x{} = {} cells, got {}", cols, rows, cols * rows, indices.len()),
            ));
        }
        Ok(Self { cols, rows, indices })
    }

    pub fn filled(cols: usize, rows: usize, value: i32) -> Self {
        Self { cols, rows, indices: vec![value; cols * rows] }
    }

    pub fn get(&self, row: usize, col: usize) -> i32 {
        self.indices[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: i32) {
        self.indices[row * self.cols + col] = value;
    }

    pub fn indices(&self) -> &[i32] {
        &self.indices
    }

    /// Reads a 16-bit grayscale PNG where 0 means "no plane" and `k + 1`
    /// means plane `k`.
    pub fn read_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| DatasetError::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let gray = img.into_luma16();
        let (w, h) = gray.dimensions();
        let indices = gray.pixels().map(|p| i32::from(p.0[0]) - 1).collect();
        Self::new(w as usize, h as usize, indices)
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let mut buf: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::new(self.cols as u32, self.rows as u32);
        for (px, &idx) in buf.pixels_mut().zip(&self.indices) {
            let v = u16::try_from(idx + 1).map_err(|_| violation("assoc", format!("index {idx} not encodable")))?;
            *px = Luma([v]);
        }
        buf.save(path).map_err(|e| DatasetError::Image { path: path.to_path_buf(), message: e.to_string() })
    }
}

/// One panorama with its pose, planes and plane association.
#[derive(Debug, Clone, PartialEq)]
pub struct PanoRecord {
    pub pano_id: String,
    /// Absolute path of the equirectangular image.
    pub image_path: PathBuf,
    pub width: u32,
    pub height: u32,
    pub pose: PanoPose,
    pub capture_date: NaiveDate,
    pub neighbor_ids: Vec<String>,
    /// Planes in the panorama-local frame.
    pub planes: Vec<RawPlane>,
    /// Local-to-world transform.
    pub transform: RigidTransform,
    pub assoc: PlaneAssocMatrix,
}

impl PanoRecord {
    /// Index of the plane associated with full-resolution pixel `(x, y)`.
    pub fn plane_for_pixel(&self, x: f64, y: f64) -> Result<Option<usize>> {
        let (w, h) = (f64::from(self.width), f64::from(self.height));
        if !(0.0..w).contains(&x) || !(0.0..h).contains(&y) {
            return Err(DatasetError::Geometry(GeometryError::Domain(format!(
                "pixel ({x}, {y}) outside {}x{} panorama",
                self.width, self.height
            ))));
        }
        let row = ((y * self.assoc.rows as f64 / h).floor() as usize).min(self.assoc.rows - 1);
        let col = ((x * self.assoc.cols as f64 / w).floor() as usize).min(self.assoc.cols - 1);
        let idx = self.assoc.get(row, col);
        Ok(usize::try_from(idx).ok())
    }

    /// Full-resolution coordinates of the center of assoc cell `(row, col)`.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            (col as f64 + 0.5) * f64::from(self.width) / self.assoc.cols as f64,
            (row as f64 + 0.5) * f64::from(self.height) / self.assoc.rows as f64,
        )
    }

    pub fn load_image(&self) -> Result<RgbaImage> {
        let img = image::open(&self.image_path).map_err(|e| DatasetError::Image {
            path: self.image_path.clone(),
            message: e.to_string(),
        })?;
        let img = img.into_rgba8();
        if img.dimensions() != (self.width, self.height) {
            return Err(violation(
                format!("panos[{}].image", self.pano_id),
                format!(
                    "image is {}x{}, manifest says {}x{}",
                    img.width(),
                    img.height(),
                    self.width,
                    self.height
                ),
            ));
        }
        Ok(img)
    }
}

/// A panorama record together with its decoded pixels.
#[derive(Debug, Clone)]
pub struct Panorama {
    pub record: PanoRecord,
    pub image: RgbaImage,
}

impl Panorama {
    pub fn load(record: PanoRecord) -> Result<Self> {
        let image = record.load_image()?;
        Ok(Self { record, image })
    }
}

/// Palette of a synthetic dataset, used by the color-based oracle detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticInfo {
    pub window_color: [u8; 3],
    pub other_colors: Vec<[u8; 3]>,
    /// File holding the full synthetic building description, if written.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub building: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub dataset_id: String,
    pub frame_origin: String,
    pub panos: Vec<PanoRecord>,
    pub footprint: Option<Vec<Vec3>>,
    pub synthetic: Option<SyntheticInfo>,
    /// Directory relative paths resolve against.
    pub base_dir: PathBuf,
}

/// JSON layout of `dataset.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestFile {
    pub dataset_id: String,
    #[serde(default)]
    pub frame_origin: String,
    pub panos: Vec<PanoEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub footprint: Option<Vec<Vec3>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PanoEntry {
    pub pano_id: String,
    pub image: String,
    pub width: u32,
    pub height: u32,
    pub pose: PanoPose,
    pub capture_date: NaiveDate,
    #[serde(default)]
    pub neighbors: Vec<String>,
    pub planes: Vec<RawPlane>,
    pub transform: RigidTransform,
    pub assoc: String,
    /// Overrides the default 512x256 association grid size.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assoc_size: Option<[usize; 2]>,
}

impl DatasetManifest {
    /// Loads and eagerly validates a manifest.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                DatasetError::MissingFile(path.to_path_buf())
            } else {
                DatasetError::Io { path: path.to_path_buf(), source: e }
            }
        })?;
        let file: ManifestFile = serde_json::from_str(&text)
            .map_err(|e| DatasetError::Parse { path: path.to_path_buf(), message: e.to_string() })?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_file(file, &base_dir)
    }

    pub fn from_file(file: ManifestFile, base_dir: &Path) -> Result<Self> {
        let mut seen: HashSet<String> = HashSet::new();
        for (i, p) in file.panos.iter().enumerate() {
            if !seen.insert(p.pano_id.clone()) {
                return Err(violation(format!("panos[{i}].pano_id"), format!("duplicate pano id {}", p.pano_id)));
            }
        }
        let mut panos = Vec::with_capacity(file.panos.len());
        for (i, entry) in file.panos.into_iter().enumerate() {
            let field = |f: &str| format!("panos[{i}].{f}");
            if entry.width == 0 || entry.height == 0 {
                return Err(violation(field("width"), "image dimensions must be positive"));
            }
            if !entry.transform.rotation.is_rotation(1e-9) || !entry.transform.translation.is_finite() {
                return Err(violation(field("transform"), "rotation must be orthonormal with det +1"));
            }
            for n in &entry.neighbors {
                if !seen.contains(n) {
                    return Err(violation(field("neighbors"), format!("dangling neighbor {n}")));
                }
            }
            let image_path = base_dir.join(&entry.image);
            if !image_path.is_file() {
                return Err(DatasetError::MissingFile(image_path));
            }
            let assoc_path = base_dir.join(&entry.assoc);
            if !assoc_path.is_file() {
                return Err(DatasetError::MissingFile(assoc_path));
            }
            let assoc = PlaneAssocMatrix::read_png(&assoc_path)?;
            let [cols, rows] = entry.assoc_size.unwrap_or([ASSOC_COLS, ASSOC_ROWS]);
            if assoc.cols != cols || assoc.rows != rows {
                return Err(violation(
                    field("assoc"),
                    format!("assoc matrix is {}x{}, expected {cols}x{rows}", assoc.cols, assoc.rows),
                ));
            }
            let n_planes = entry.planes.len() as i32;
            if let Some(bad) = assoc.indices().iter().find(|&&v| v < -1 || v >= n_planes) {
                return Err(violation(
                    field("assoc"),
                    format!("assoc index out of range: {bad} with {n_planes} planes"),
                ));
            }
            panos.push(PanoRecord {
                pano_id: entry.pano_id,
                image_path,
                width: entry.width,
                height: entry.height,
                pose: entry.pose,
                capture_date: entry.capture_date,
                neighbor_ids: entry.neighbors,
                planes: entry.planes,
                transform: entry.transform,
                assoc,
            });
        }
        Ok(Self {
            dataset_id: file.dataset_id,
            frame_origin: file.frame_origin,
            panos,
            footprint: file.footprint,
            synthetic: file.synthetic,
            base_dir: base_dir.to_path_buf(),
        })
    }

    pub fn get(&self, pano_id: &str) -> Option<&PanoRecord> {
        self.panos.iter().find(|p| p.pano_id == pano_id)
    }

    /// Picks the most recent panorama within `radius` (horizontal distance)
    /// of `center` as origin, then walks neighbor links breadth-first,
    /// keeping panoramas inside the radius.
    pub fn select_origin_and_traverse(&self, center: Vec3, radius: f64) -> Result<Vec<PanoRecord>> {
        if !(radius > 0.0) {
            return Err(violation("radius", "radius must be positive"));
        }
        let inside = |p: &PanoRecord| p.pose.position.horizontal_distance(center) <= radius;
        let origin = self
            .panos
            .iter()
            .filter(|p| inside(p))
            .min_by(|a, b| b.capture_date.cmp(&a.capture_date).then_with(|| a.pano_id.cmp(&b.pano_id)))
            .ok_or(DatasetError::EmptySelection { radius })?;

        let by_id: BTreeMap<&str, &PanoRecord> = self.panos.iter().map(|p| (p.pano_id.as_str(), p)).collect();
        let mut visited: HashSet<&str> = HashSet::new();
        let mut queue = VecDeque::from([origin]);
        visited.insert(&origin.pano_id);
        let mut out = Vec::new();
        while let Some(p) = queue.pop_front() {
            out.push(p.clone());
            for n in &p.neighbor_ids {
                if let Some(&next) = by_id.get(n.as_str()) {
                    if inside(next) && visited.insert(&next.pano_id) {
                        queue.push_back(next);
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Keeps the panoramas captured on the most recent date, in input order.
pub fn filter_same_date(panos: &[PanoRecord]) -> Vec<PanoRecord> {
    let Some(latest) = panos.iter().map(|p| p.capture_date).max() else {
        return Vec::new();
    };
    panos.iter().filter(|p| p.capture_date == latest).cloned().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Mat3, UnitVec3};
    use image::Rgba;

    fn write_pano(dir: &Path, id: &str, pos: [f64; 3], date: &str, neighbors: &[&str]) -> PanoEntry {
        let img = RgbaImage::from_pixel(64, 32, Rgba([10, 20, 30, 255]));
        img.save(dir.join(format!("{id}.png"))).unwrap();
        let mut assoc = PlaneAssocMatrix::filled(ASSOC_COLS, ASSOC_ROWS, -1);
        assoc.set(0, 0, 0);
        assoc.set(ASSOC_ROWS - 1, ASSOC_COLS - 1, 0);
        assoc.write_png(&dir.join(format!("{id}_assoc.png"))).unwrap();
        PanoEntry {
            pano_id: id.into(),
            image: format!("{id}.png"),
            width: 64,
            height: 32,
            pose: PanoPose::at(pos.into()),
            capture_date: date.parse().unwrap(),
            neighbors: neighbors.iter().map(|s| s.to_string()).collect(),
            planes: vec![Plane::new(UnitVec3::Y, 5.0).into()],
            transform: RigidTransform::new(Mat3::IDENTITY, pos.into()).unwrap(),
            assoc: format!("{id}_assoc.png"),
            assoc_size: None,
        }
    }

    fn write_manifest(dir: &Path, panos: Vec<PanoEntry>) -> PathBuf {
        let file = ManifestFile {
            dataset_id: "t".into(),
            frame_origin: "local".into(),
            panos,
            footprint: None,
            synthetic: None,
        };
        let path = dir.join("dataset.json");
        fs::write(&path, serde_json::to_string_pretty(&file).unwrap()).unwrap();
        path
    }

    #[test]
    fn loads_valid_two_pano_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let a = write_pano(dir.path(), "A", [0.0, 0.0, 2.5], "2021-05-01", &["B"]);
        let b = write_pano(dir.path(), "B", [5.0, 0.0, 2.5], "2023-06-01", &["A"]);
        let m = DatasetManifest::load(&write_manifest(dir.path(), vec![a, b])).unwrap();
        assert_eq!(m.panos.len(), 2);
        assert_eq!(m.panos[0].assoc.get(0, 0), 0);
        assert_eq!(m.panos[0].assoc.get(1, 1), -1);
        assert_eq!(m.panos[1].load_image().unwrap().dimensions(), (64, 32));
    }

    #[test]
    fn rejects_out_of_range_assoc_index() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = write_pano(dir.path(), "A", [0.0, 0.0, 2.5], "2021-05-01", &[]);
        a.planes.clear();
        let err = DatasetManifest::load(&write_manifest(dir.path(), vec![a])).unwrap_err();
        match err {
            DatasetError::InvariantViolation { message, .. } => assert!(message.contains("assoc index out of range")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_dangling_neighbor() {
        let dir = tempfile::tempdir().unwrap();
        let a = write_pano(dir.path(), "A", [0.0, 0.0, 2.5], "2021-05-01", &["X"]);
        let err = DatasetManifest::load(&write_manifest(dir.path(), vec![a])).unwrap_err();
        match err {
            DatasetError::InvariantViolation { message, field } => {
                assert!(message.contains("dangling neighbor"));
                assert_eq!(field, "panos[0].neighbors");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_image_and_parse_errors_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let a = write_pano(dir.path(), "A", [0.0, 0.0, 2.5], "2021-05-01", &[]);
        let path = write_manifest(dir.path(), vec![a]);
        fs::remove_file(dir.path().join("A.png")).unwrap();
        assert!(matches!(DatasetManifest::load(&path), Err(DatasetError::MissingFile(_))));
        fs::write(&path, "{ not json").unwrap();
        assert!(matches!(DatasetManifest::load(&path), Err(DatasetError::Parse { .. })));
    }

    fn record(id: &str, x: f64, date: &str, neighbors: &[&str]) -> PanoRecord {
        PanoRecord {
            pano_id: id.into(),
            image_path: PathBuf::new(),
            width: 1024,
            height: 512,
            pose: PanoPose::at(Vec3::new(x, 0.0, 2.5)),
            capture_date: date.parse().unwrap(),
            neighbor_ids: neighbors.iter().map(|s| s.to_string()).collect(),
            planes: vec![],
            transform: RigidTransform::IDENTITY,
            assoc: PlaneAssocMatrix::filled(ASSOC_COLS, ASSOC_ROWS, -1),
        }
    }

    fn manifest(panos: Vec<PanoRecord>) -> DatasetManifest {
        DatasetManifest {
            dataset_id: "t".into(),
            frame_origin: String::new(),
            panos,
            footprint: None,
            synthetic: None,
            base_dir: PathBuf::new(),
        }
    }

    #[test]
    fn origin_is_most_recent_in_radius() {
        let m = manifest(vec![record("A", 0.0, "2021-05-01", &["B"]), record("B", 3.0, "2023-06-01", &["A"])]);
        let sel = m.select_origin_and_traverse(Vec3::ZERO, 10.0).unwrap();
        assert_eq!(sel[0].pano_id, "B");
        assert_eq!(sel.len(), 2);
    }

    #[test]
    fn origin_ties_break_on_smallest_id() {
        let m = manifest(vec![record("Z", 0.0, "2023-06-01", &[]), record("M", 1.0, "2023-06-01", &[])]);
        let sel = m.select_origin_and_traverse(Vec3::ZERO, 10.0).unwrap();
        assert_eq!(sel[0].pano_id, "M");
    }

    #[test]
    fn empty_selection_and_chain_cutoff() {
        let m = manifest(vec![
            record("A", 0.0, "2023-01-01", &["B"]),
            record("B", 4.0, "2022-01-01", &["A", "C"]),
            record("C", 40.0, "2022-01-01", &["B"]),
        ]);
        assert!(matches!(
            m.select_origin_and_traverse(Vec3::new(1000.0, 0.0, 0.0), 5.0),
            Err(DatasetError::EmptySelection { .. })
        ));
        let ids: Vec<_> = m
            .select_origin_and_traverse(Vec3::ZERO, 10.0)
            .unwrap()
            .into_iter()
            .map(|p| p.pano_id)
            .collect();
        assert_eq!(ids, ["A", "B"]);
    }

    #[test]
    fn radius_uses_horizontal_distance() {
        let mut high = record("A", 0.0, "2023-01-01", &[]);
        high.pose.position.z = 100.0;
        let m = manifest(vec![high]);
        assert_eq!(m.select_origin_and_traverse(Vec3::ZERO, 1.0).unwrap().len(), 1);
    }

    #[test]
    fn same_date_filter() {
        let p = vec![
            record("A", 0.0, "2020-01-01", &[]),
            record("B", 0.0, "2020-01-01", &[]),
            record("C", 0.0, "2022-01-01", &[]),
        ];
        let out = filter_same_date(&p);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].pano_id, "C");
        let same = vec![p[0].clone(), p[1].clone()];
        assert_eq!(filter_same_date(&same), same);
        assert_eq!(filter_same_date(&p[..1]), p[..1].to_vec());
    }

    #[test]
    fn plane_for_pixel_cells() {
        let mut r = record("A", 0.0, "2020-01-01", &[]);
        r.assoc.set(0, 0, 3);
        r.assoc.set(ASSOC_ROWS - 1, ASSOC_COLS - 1, 2);
        assert_eq!(r.plane_for_pixel(0.0, 0.0).unwrap(), Some(3));
        assert_eq!(r.plane_for_pixel(1023.0, 511.0).unwrap(), Some(2));
        assert_eq!(r.plane_for_pixel(10.0, 10.0).unwrap(), None);
        assert!(r.plane_for_pixel(1024.0, 0.0).is_err());
        // 1024 / 512 = 2 px per cell: pixels 0 and 1 share a cell.
        assert_eq!(r.plane_for_pixel(1.9, 1.9).unwrap(), Some(3));
        assert_eq!(r.plane_for_pixel(2.0, 0.0).unwrap(), None);
    }
}
