//! Facade and window geometry in meters, window-to-wall ratios and the
//! thermal-model JSON document.
//!
//! The document loosely follows HBJSON: a `Model` holds `faces` (facades),
//! each with `apertures` (windows). Rooms and thermal properties are left out;
//! `properties` objects are reserved for them.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::facade::FacadeBox;
use crate::fusion::Detection;
use crate::geometry::{Plane, PlaneBasis, Vec3};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("window bbox {bbox:?} lies outside facade bbox {facade:?}")]
    OutOfFacade { bbox: [f64; 4], facade: [f64; 4] },
    #[error("facade {0} has zero area")]
    DegenerateFacade(String),
    #[error("invariant violation: {0}")]
    InvariantViolation(String),
    #[error("model file {path}: {message}")]
    File { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowGeometry3D {
    pub identifier: String,
    /// World corners, counter-clockwise seen from the side the facade normal
    /// points to.
    #[serde(rename = "boundary")]
    pub corners: [Vec3; 4],
    pub bbox_px: [f64; 4],
    pub width_m: f64,
    pub height_m: f64,
    pub area_m2: f64,
    pub score: f64,
}

impl WindowGeometry3D {
    pub fn center(&self) -> Vec3 {
        (self.corners[0] + self.corners[2]) * 0.5
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FacadeModel {
    #[serde(rename = "identifier")]
    pub facade_id: String,
    pub face_type: String,
    pub boundary: [Vec3; 4],
    pub plane: Plane,
    pub basis: PlaneBasis,
    /// In-plane coordinates of pixel `(0, 0)` of the grid `bbox_px` refers to.
    pub grid_origin2d: (f64, f64),
    pub pixel_size: f64,
    pub bbox_px: FacadeBox,
    pub center3d: Vec3,
    pub width_m: f64,
    pub height_m: f64,
    pub wwr: f64,
    #[serde(rename = "apertures")]
    pub windows: Vec<WindowGeometry3D>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub properties: Option<serde_json::Value>,
}

/// Geometry context shared by a facade and its windows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FacadeFrame {
    pub plane: Plane,
    pub basis: PlaneBasis,
    pub grid_origin2d: (f64, f64),
    pub pixel_size: f64,
}

impl FacadeFrame {
    pub fn to_plane(&self, x: f64, y: f64) -> (f64, f64) {
        (self.grid_origin2d.0 + x * self.pixel_size, self.grid_origin2d.1 + y * self.pixel_size)
    }

    pub fn to_world(&self, x: f64, y: f64) -> Vec3 {
        self.basis.to_world(self.to_plane(x, y))
    }

    /// Corners of a pixel box, counter-clockwise about the basis normal.
    pub fn box_corners(&self, b: &[f64; 4]) -> [Vec3; 4] {
        [self.to_world(b[0], b[1]), self.to_world(b[2], b[1]), self.to_world(b[2], b[3]), self.to_world(b[0], b[3])]
    }
}

/// World geometry of a detection inside a facade.
pub fn bbox_to_world(det: &Detection, frame: &FacadeFrame, facade_bbox: &[f64; 4], identifier: &str) -> Result<WindowGeometry3D> {
    let b = det.bbox;
    let eps = 1e-6;
    if b[0] < facade_bbox[0] - eps || b[1] < facade_bbox[1] - eps || b[2] > facade_bbox[2] + eps || b[3] > facade_bbox[3] + eps {
        return Err(ModelError::OutOfFacade { bbox: b, facade: *facade_bbox });
    }
    let width_m = (b[2] - b[0]) * frame.pixel_size;
    let height_m = (b[3] - b[1]) * frame.pixel_size;
    Ok(WindowGeometry3D {
        identifier: identifier.to_string(),
        corners: frame.box_corners(&b),
        bbox_px: b,
        width_m,
        height_m,
        area_m2: width_m * height_m,
        score: det.score,
    })
}

/// Exact area of a union of axis-aligned rectangles `[x0, y0, x1, y1]`.
pub fn union_area(rects: &[[f64; 4]]) -> f64 {
    let rects: Vec<&[f64; 4]> = rects.iter().filter(|r| r[2] > r[0] && r[3] > r[1]).collect();
    let mut xs: Vec<f64> = rects.iter().flat_map(|r| [r[0], r[2]]).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    let mut total = 0.0;
    for win in xs.windows(2) {
        let (a, b) = (win[0], win[1]);
        let mut spans: Vec<(f64, f64)> = rects.iter().filter(|r| r[0] <= a && r[2] >= b).map(|r| (r[1], r[3])).collect();
        spans.sort_by(|p, q| p.0.total_cmp(&q.0));
        let mut covered = 0.0;
        let mut cur: Option<(f64, f64)> = None;
        for (lo, hi) in spans {
            match cur {
                Some((cl, ch)) if lo <= ch => cur = Some((cl, ch.max(hi))),
                Some((cl, ch)) => {
                    covered += ch - cl;
                    cur = Some((lo, hi));
                }
                None => cur = Some((lo, hi)),
            }
        }
        if let Some((cl, ch)) = cur {
            covered += ch - cl;
        }
        total += covered * (b - a);
    }
    total
}

/// Union of window areas over facade area.
pub fn compute_wwr(facade: &FacadeModel) -> Result<f64> {
    let area = facade.width_m * facade.height_m;
    if !(area > 0.0) {
        return Err(ModelError::DegenerateFacade(facade.facade_id.clone()));
    }
    let s = facade.pixel_size;
    let rects: Vec<[f64; 4]> = facade.windows.iter().map(|w| w.bbox_px.map(|v| v * s)).collect();
    Ok((union_area(&rects) / area).clamp(0.0, 1.0))
}

impl FacadeModel {
    /// Builds a facade with its windows; `bbox_px` and detections share the
    /// pixel grid described by `frame`.
    pub fn build(facade_id: &str, frame: FacadeFrame, bbox_px: FacadeBox, detections: &[Detection]) -> Result<Self> {
        if !(frame.pixel_size > 0.0) {
            return Err(ModelError::InvariantViolation(format!("pixel size {} must be positive", frame.pixel_size)));
        }
        let b = bbox_px.bbox;
        let windows = detections
            .iter()
            .enumerate()
            .map(|(i, d)| bbox_to_world(d, &frame, &b, &format!("{facade_id}_w{i}")))
            .collect::<Result<Vec<_>>>()?;
        let mut model = FacadeModel {
            facade_id: facade_id.to_string(),
            face_type: "Wall".into(),
            boundary: frame.box_corners(&b),
            plane: frame.plane,
            basis: frame.basis,
            grid_origin2d: frame.grid_origin2d,
            pixel_size: frame.pixel_size,
            bbox_px,
            center3d: frame.to_world(0.5 * (b[0] + b[2]), 0.5 * (b[1] + b[3])),
            width_m: (b[2] - b[0]) * frame.pixel_size,
            height_m: (b[3] - b[1]) * frame.pixel_size,
            wwr: 0.0,
            windows,
            properties: None,
        };
        model.wwr = compute_wwr(&model)?;
        Ok(model)
    }

    pub fn frame(&self) -> FacadeFrame {
        FacadeFrame { plane: self.plane, basis: self.basis, grid_origin2d: self.grid_origin2d, pixel_size: self.pixel_size }
    }

    pub fn area_m2(&self) -> f64 {
        self.width_m * self.height_m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThermalModel {
    #[serde(rename = "type")]
    pub kind: String,
    #[serde(rename = "identifier")]
    pub building_id: String,
    pub units: String,
    pub frame: String,
    #[serde(rename = "faces")]
    pub facades: Vec<FacadeModel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub footprint: Option<Vec<Vec3>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub properties: Option<serde_json::Value>,
}

pub fn assemble_model(
    building_id: &str,
    frame_note: &str,
    facades: Vec<FacadeModel>,
    footprint: Option<Vec<Vec3>>,
) -> Result<ThermalModel> {
    let mut seen = HashSet::new();
    for f in &facades {
        if !seen.insert(f.facade_id.as_str()) {
            return Err(ModelError::InvariantViolation(format!("duplicate facade id {}", f.facade_id)));
        }
        if !(0.0..=1.0).contains(&f.wwr) {
            return Err(ModelError::InvariantViolation(format!("facade {} has wwr {}", f.facade_id, f.wwr)));
        }
    }
    Ok(ThermalModel {
        kind: "Model".into(),
        building_id: building_id.to_string(),
        units: "Meters".into(),
        frame: frame_note.to_string(),
        facades,
        footprint,
        properties: None,
    })
}

impl ThermalModel {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| ModelError::File { path: path.display().to_string(), message: e.to_string() })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let err = |m: String| ModelError::File { path: path.display().to_string(), message: m };
        let text = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        Self::from_json(&text).map_err(|e| err(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::WINDOW_CATEGORY;
    use crate::geometry::{plane_basis, UnitVec3};

    fn frame(s: f64) -> FacadeFrame {
        let plane = Plane::new(UnitVec3::Y.flipped(), -5.0);
        FacadeFrame { plane, basis: plane_basis(&plane), grid_origin2d: (-3.0, 0.0), pixel_size: s }
    }

    fn det(b: [f64; 4]) -> Detection {
        Detection { bbox: b, score: 1.0, category_id: WINDOW_CATEGORY, source_id: "fused".into() }
    }

    #[test]
    fn bbox_scaling_example() {
        let f = frame(0.02);
        let w = bbox_to_world(&det([100.0, 50.0, 160.0, 125.0]), &f, &[0.0, 0.0, 500.0, 500.0], "w").unwrap();
        assert!((w.width_m - 1.2).abs() < 1e-12);
        assert!((w.height_m - 1.5).abs() < 1e-12);
        assert!((w.area_m2 - 1.8).abs() < 1e-12);
        for c in w.corners {
            assert!(f.plane.signed_distance(c).abs() < 1e-9);
        }
        let err = bbox_to_world(&det([0.0, 0.0, 600.0, 10.0]), &f, &[0.0, 0.0, 500.0, 500.0], "w");
        assert!(matches!(err, Err(ModelError::OutOfFacade { .. })));
    }

    #[test]
    fn corners_are_ccw_about_the_normal() {
        let f = frame(0.02);
        let w = bbox_to_world(&det([0.0, 0.0, 50.0, 100.0]), &f, &[0.0, 0.0, 500.0, 500.0], "w").unwrap();
        let c = w.corners;
        let turn = (c[1] - c[0]).cross(c[2] - c[1]);
        assert!(turn.dot(f.plane.normal.vec()) > 0.0);
    }

    #[test]
    fn wwr_examples() {
        // 10 m x 20 m facade at 0.1 m/px = 100 x 200 px.
        let f = frame(0.1);
        let full = FacadeBox { bbox: [0.0, 0.0, 100.0, 200.0], score: 0.0 };
        let dets: Vec<Detection> = (0..2).flat_map(|c| (0..5).map(move |r| {
            let (x, y) = (10.0 + 50.0 * f64::from(c), 10.0 + 40.0 * f64::from(r));
            det([x, y, x + 25.0, y + 20.0])
        })).collect();
        let m = FacadeModel::build("f", f, full, &dets).unwrap();
        assert!((m.wwr - 0.25).abs() < 1e-12);
        assert_eq!(FacadeModel::build("f", f, full, &[]).unwrap().wwr, 0.0);
        let whole = FacadeModel::build("f", f, full, &[det(full.bbox)]).unwrap();
        assert!((whole.wwr - 1.0).abs() < 1e-12);
        let degenerate = FacadeBox { bbox: [5.0, 5.0, 5.0, 50.0], score: 0.0 };
        assert!(matches!(FacadeModel::build("f", f, degenerate, &[]), Err(ModelError::DegenerateFacade(_))));
    }

    #[test]
    fn union_area_counts_overlap_once() {
        assert_eq!(union_area(&[[0.0, 0.0, 1.0, 1.0], [0.0, 0.0, 1.0, 1.0]]), 1.0);
        assert_eq!(union_area(&[[0.0, 0.0, 2.0, 2.0], [1.0, 1.0, 3.0, 3.0]]), 7.0);
        assert_eq!(union_area(&[[0.0, 0.0, 1.0, 1.0], [2.0, 0.0, 3.0, 1.0]]), 2.0);
        assert_eq!(union_area(&[]), 0.0);
    }

    #[test]
    fn json_round_trip_and_duplicates() {
        let f = frame(0.02);
        let fb = FacadeBox { bbox: [0.0, 0.0, 400.0, 300.0], score: 12.5 };
        let a = FacadeModel::build("a", f, fb, &[det([10.0, 10.0, 70.0, 85.0])]).unwrap();
        let fp = vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(8.0, 0.0, 0.0), Vec3::new(8.0, 6.0, 0.0)];
        let m = assemble_model("b1", "local", vec![a.clone()], Some(fp.clone())).unwrap();
        let text = m.to_json();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["faces"].as_array().unwrap().len(), 1);
        assert_eq!(v["faces"][0]["apertures"].as_array().unwrap().len(), 1);
        assert_eq!(ThermalModel::from_json(&text).unwrap(), m);
        assert_eq!(m.footprint, Some(fp));
        assert!(matches!(assemble_model("b1", "", vec![a.clone(), a], None), Err(ModelError::InvariantViolation(_))));
    }
}
