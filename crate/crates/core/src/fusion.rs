//! Multi-view fusion of window detections expressed in one aligned grid.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const WINDOW_CATEGORY: i64 = 1;
pub const FUSED_SOURCE: &str = "fused";

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("invalid detection {index}: {message}")]
    InvalidDetection { index: usize, message: String },
    #[error("invalid fusion config: {0}")]
    InvalidConfig(String),
    #[error("detections file {path}: {message}")]
    File { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// `[x_min, y_min, x_max, y_max]` in pixels.
    pub bbox: [f64; 4],
    pub score: f64,
    pub category_id: i64,
    pub source_id: String,
}

impl Detection {
    pub fn validate(&self) -> Result<(), String> {
        let [x0, y0, x1, y1] = self.bbox;
        if !self.bbox.iter().all(|v| v.is_finite()) || x0 > x1 || y0 > y1 {
            return Err(format!("bad bbox {:?}", self.bbox));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(format!("score {} outside [0, 1]", self.score));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        area(&self.bbox)
    }
}

fn area(b: &[f64; 4]) -> f64 {
    (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0)
}

/// Intersection over union; 0 for disjoint or degenerate boxes.
pub fn iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let inter = area(&[a[0].max(b[0]), a[1].max(b[1]), a[2].min(b[2]), a[3].min(b[3])]);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub tau_conf: f64,
    pub tau_iou: f64,
    pub n_min: usize,
    pub tau_score2: f64,
    /// Count distinct source images instead of cluster members against `n_min`.
    pub distinct_sources: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { tau_conf: 0.2, tau_iou: 0.3, n_min: 2, tau_score2: 0.4, distinct_sources: false }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<(), FusionError> {
        for (name, v) in [("tau_conf", self.tau_conf), ("tau_iou", self.tau_iou), ("tau_score2", self.tau_score2)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(FusionError::InvalidConfig(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if self.n_min < 1 {
            return Err(FusionError::InvalidConfig("n_min must be at least 1".into()));
        }
        Ok(())
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Per-coordinate median box with the mean square-rooted score.
pub fn merge_cluster(members: &[&Detection]) -> Detection {
    let mut bbox = [0.0; 4];
    for (k, v) in bbox.iter_mut().enumerate() {
        let mut vals: Vec<f64> = members.iter().map(|d| d.bbox[k]).collect();
        *v = median(&mut vals);
    }
    let mut roots: Vec<f64> = members.iter().map(|d| d.score.sqrt()).collect();
    roots.sort_by(f64::total_cmp);
    let score = roots.iter().sum::<f64>() / roots.len() as f64;
    Detection { bbox, score, category_id: members[0].category_id, source_id: FUSED_SOURCE.to_string() }
}

/// Connected components of the graph with an edge wherever IoU exceeds `tau`.
pub fn iou_components(boxes: &[[f64; 4]], tau: f64) -> Vec<Vec<usize>> {
    let n = boxes.len();
    let mut comp: Vec<usize> = (0..n).collect();
    fn root(c: &mut [usize], mut i: usize) -> usize {
        while c[i] != i {
            c[i] = c[c[i]];
            i = c[i];
        }
        i
    }
    for i in 0..n {
        for j in i + 1..n {
            if iou(&boxes[i], &boxes[j]) > tau {
                let (a, b) = (root(&mut comp, i), root(&mut comp, j));
                if a != b {
                    comp[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let r = root(&mut comp, i);
        groups.entry(r).or_default().push(i);
    }
    groups.into_values().collect()
}

fn sort_detections(dets: &mut [Detection]) {
    dets.sort_by(|a, b| {
        a.category_id
            .cmp(&b.category_id)
            .then_with(|| {
                a.bbox.iter().zip(&b.bbox).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
            })
            .then(a.score.total_cmp(&b.score))
            .then_with(|| a.source_id.cmp(&b.source_id))
    });
}

/// Confidence filter, IoU clustering per category, support check and merge.
/// Output is sorted, so it does not depend on input order.
pub fn fuse_multiview(dets: &[Detection], cfg: &FusionConfig) -> Vec<Detection> {
    let mut by_cat: BTreeMap<i64, Vec<&Detection>> = BTreeMap::new();
    for d in dets.iter().filter(|d| d.score >= cfg.tau_conf) {
        by_cat.entry(d.category_id).or_default().push(d);
    }
    let mut out = Vec::new();
    for (_, mut group) in by_cat {
        // Canonical order makes component discovery independent of input order.
        group.sort_by(|a, b| {
            a.bbox
                .iter()
                .zip(&b.bbox)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.score.total_cmp(&b.score))
                .then_with(|| a.source_id.cmp(&b.source_id))
        });
        let boxes: Vec<[f64; 4]> = group.iter().map(|d| d.bbox).collect();
        for comp in iou_components(&boxes, cfg.tau_iou) {
            let members: Vec<&Detection> = comp.iter().map(|&i| group[i]).collect();
            let support = if cfg.distinct_sources {
                let mut ids: Vec<&str> = members.iter().map(|d| d.source_id.as_str()).collect();
                ids.sort_unstable();
                ids.dedup();
                ids.len()
            } else {
                members.len()
            };
            if support < cfg.n_min {
                continue;
            }
            let merged = merge_cluster(&members);
            if merged.score >= cfg.tau_score2 {
                out.push(merged);
            }
        }
    }
    sort_detections(&mut out);
    out
}

/// Keeps detections scoring at least `tau_conf`.
pub fn filter_single_view(dets: &[Detection], tau_conf: f64) -> Vec<Detection> {
    dets.iter().filter(|d| d.score >= tau_conf).cloned().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionsFile {
    pub facade_id: String,
    pub detections: Vec<Detection>,
}

impl DetectionsFile {
    pub fn load(path: &Path) -> Result<Self, FusionError> {
        let err = |m: String| FusionError::File { path: path.display().to_string(), message: m };
        let text = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let file: DetectionsFile = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        for (index, d) in file.detections.iter().enumerate() {
            d.validate().map_err(|message| FusionError::InvalidDetection { index, message })?;
        }
        Ok(file)
    }

    pub fn save(&self, path: &Path) -> Result<(), FusionError> {
        let text = serde_json::to_string_pretty(self).expect("detections serialize");
        fs::write(path, text).map_err(|e| FusionError::File { path: path.display().to_string(), message: e.to_string() })
    }
}
