//! Facade rectangle detection from line structure shared by aligned views.
//!
//! Line and box coordinates are continuous pixel coordinates: pixel `(i, j)`
//! covers `[i, i+1) x [j, j+1)`.

use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use image::RgbaImage;
use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ortho::OrthoImage;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FacadeError {
    #[error("reliable set has {vertical} vertical and {horizontal} horizontal lines, need 2 of each")]
    InsufficientStructure { vertical: usize, horizontal: usize },
    #[error("box does not intersect image {0}")]
    CropOutOfBounds(String),
    #[error("no candidate box could be formed")]
    NoCandidate,
    #[error("lines file {path}: {message}")]
    LinesFile { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineSegment {
    pub p0: (f64, f64),
    pub p1: (f64, f64),
    /// Degrees in `[0, 180)`.
    pub angle: f64,
    pub length: f64,
}

impl LineSegment {
    pub fn new(p0: (f64, f64), p1: (f64, f64)) -> Self {
        let (dx, dy) = (p1.0 - p0.0, p1.1 - p0.1);
        let angle = dy.atan2(dx).to_degrees().rem_euclid(180.0);
        let angle = if angle >= 180.0 { 0.0 } else { angle };
        Self { p0, p1, angle, length: dx.hypot(dy) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FacadeBox {
    pub bbox: [f64; 4],
    pub score: f64,
}

impl FacadeBox {
    pub fn width(&self) -> f64 {
        self.bbox[2] - self.bbox[0]
    }

    pub fn height(&self) -> f64 {
        self.bbox[3] - self.bbox[1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FacadeConfig {
    pub grad_percentile: f64,
    /// Lower bound on the gradient threshold, gray levels.
    pub min_gradient: f64,
    pub region_angle_tol_deg: f64,
    pub min_line_length: f64,
    pub axis_tol_deg: f64,
    pub reliable_offset_px: f64,
    pub reliable_overlap: f64,
    pub reliable_min_views: usize,
    pub iterations: usize,
    pub score_tol_px: f64,
    pub min_box_px: f64,
    pub dbscan_eps: f64,
    pub dbscan_min_pts: usize,
}

impl Default for FacadeConfig {
    fn default() -> Self {
        Self {
            grad_percentile: 70.0,
            min_gradient: 2.0,
            region_angle_tol_deg: 22.5,
            min_line_length: 20.0,
            axis_tol_deg: 10.0,
            reliable_offset_px: 5.0,
            reliable_overlap: 0.5,
            reliable_min_views: 2,
            iterations: 1000,
            score_tol_px: 3.0,
            min_box_px: 20.0,
            dbscan_eps: 15.0,
            dbscan_min_pts: 2,
        }
    }
}

/// Axial orientation difference in degrees, in `[0, 90]`.
fn axial_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(180.0);
    d.min(180.0 - d)
}

/// LSD-style detector: strong-gradient pixels are grown into regions of
/// consistent (axial) gradient orientation and each region is fitted with a
/// segment along its principal axis.
pub fn detect_line_segments(img: &RgbaImage, cfg: &FacadeConfig) -> Vec<LineSegment> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w < 3 || h < 3 {
        return Vec::new();
    }
    let gray: Vec<f64> = img
        .pixels()
        .map(|p| 0.299 * f64::from(p.0[0]) + 0.587 * f64::from(p.0[1]) + 0.114 * f64::from(p.0[2]))
        .collect();
    let alpha: Vec<bool> = img.pixels().map(|p| p.0[3] != 0).collect();
    let mut mag = vec![0.0f64; w * h];
    let mut ang = vec![0.0f64; w * h];
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let i = y * w + x;
            if !(alpha[i] && alpha[i - 1] && alpha[i + 1] && alpha[i - w] && alpha[i + w]) {
                continue;
            }
            let gx = 0.5 * (gray[i + 1] - gray[i - 1]);
            let gy = 0.5 * (gray[i + w] - gray[i - w]);
            mag[i] = gx.hypot(gy);
            ang[i] = gy.atan2(gx).to_degrees().rem_euclid(180.0);
        }
    }
    let mut sorted = mag.clone();
    sorted.sort_by(f64::total_cmp);
    let pidx = ((cfg.grad_percentile / 100.0) * (sorted.len() - 1) as f64).round() as usize;
    let thresh = sorted[pidx].max(cfg.min_gradient);

    let mut seeds: Vec<usize> = (0..w * h).filter(|&i| mag[i] > thresh).collect();
    seeds.sort_by(|&a, &b| mag[b].total_cmp(&mag[a]).then(a.cmp(&b)));
    let mut used = vec![false; w * h];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for seed in seeds {
        if used[seed] {
            continue;
        }
        used[seed] = true;
        let mut region = vec![seed];
        // Doubled-angle sum gives the mean of axial angles.
        let (mut sc, mut ss) = ((2.0 * ang[seed]).to_radians().cos(), (2.0 * ang[seed]).to_radians().sin());
        stack.clear();
        stack.push(seed);
        while let Some(i) = stack.pop() {
            let (x, y) = ((i % w) as i64, (i / w) as i64);
            let mean = 0.5 * ss.atan2(sc).to_degrees();
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if (dx, dy) == (0, 0) || nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if used[j] || mag[j] <= thresh || axial_diff(ang[j], mean) > cfg.region_angle_tol_deg {
                        continue;
                    }
                    used[j] = true;
                    region.push(j);
                    stack.push(j);
                    sc += (2.0 * ang[j]).to_radians().cos();
                    ss += (2.0 * ang[j]).to_radians().sin();
                }
            }
        }
        if let Some(seg) = fit_region(&region, &mag, w) {
            if seg.length >= cfg.min_line_length {
                out.push(seg);
            }
        }
    }
    out
}

fn fit_region(region: &[usize], mag: &[f64], w: usize) -> Option<LineSegment> {
    if region.len() < 2 {
        return None;
    }
    let (mut sw, mut cx, mut cy) = (0.0, 0.0, 0.0);
    for &i in region {
        let m = mag[i];
        sw += m;
        cx += m * (i % w) as f64;
        cy += m * (i / w) as f64;
    }
    let (cx, cy) = (cx / sw, cy / sw);
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for &i in region {
        let m = mag[i];
        let (dx, dy) = ((i % w) as f64 - cx, (i / w) as f64 - cy);
        sxx += m * dx * dx;
        syy += m * dy * dy;
        sxy += m * dx * dy;
    }
    let theta = 0.5 * (2.0 * sxy).atan2(sxx - syy);
    let (ux, uy) = (theta.cos(), theta.sin());
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &i in region {
        let t = ((i % w) as f64 - cx) * ux + ((i / w) as f64 - cy) * uy;
        lo = lo.min(t);
        hi = hi.max(t);
    }
    // Index coordinates to continuous coordinates; each end pixel contributes
    // half a pixel of length.
    let (lo, hi) = (lo - 0.5, hi + 0.5);
    let p0 = (cx + 0.5 + lo * ux, cy + 0.5 + lo * uy);
    let p1 = (cx + 0.5 + hi * ux, cy + 0.5 + hi * uy);
    Some(LineSegment::new(p0, p1))
}

/// Per-image segment lists from a JSON file (`[[segment, ...], ...]`).
pub fn load_lines(path: &Path) -> Result<Vec<Vec<LineSegment>>, FacadeError> {
    let err = |m: String| FacadeError::LinesFile { path: path.display().to_string(), message: m };
    let text = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| err(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Vertical,
    Horizontal,
}

pub fn classify_line(line: &LineSegment, tol_deg: f64) -> Option<Axis> {
    if (line.angle - 90.0).abs() <= tol_deg {
        Some(Axis::Vertical)
    } else if line.angle.min(180.0 - line.angle) <= tol_deg {
        Some(Axis::Horizontal)
    } else {
        None
    }
}

/// Splits lines into (vertical, horizontal, other).
pub fn classify_axis_lines(
    lines: &[LineSegment],
    tol_deg: f64,
) -> (Vec<LineSegment>, Vec<LineSegment>, Vec<LineSegment>) {
    let (mut v, mut h, mut o) = (Vec::new(), Vec::new(), Vec::new());
    for l in lines {
        match classify_line(l, tol_deg) {
            Some(Axis::Vertical) => v.push(*l),
            Some(Axis::Horizontal) => h.push(*l),
            None => o.push(*l),
        }
    }
    (v, h, o)
}

/// An axis-parallel line: constant `offset` along the other axis, covering
/// `[lo, hi]` along its own axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisLine {
    pub axis: Axis,
    pub offset: f64,
    pub lo: f64,
    pub hi: f64,
}

impl AxisLine {
    pub fn from_segment(l: &LineSegment, axis: Axis) -> Self {
        match axis {
            Axis::Vertical => AxisLine {
                axis,
                offset: 0.5 * (l.p0.0 + l.p1.0),
                lo: l.p0.1.min(l.p1.1),
                hi: l.p0.1.max(l.p1.1),
            },
            Axis::Horizontal => AxisLine {
                axis,
                offset: 0.5 * (l.p0.1 + l.p1.1),
                lo: l.p0.0.min(l.p1.0),
                hi: l.p0.0.max(l.p1.0),
            },
        }
    }

    pub fn length(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn to_segment(&self) -> LineSegment {
        match self.axis {
            Axis::Vertical => LineSegment::new((self.offset, self.lo), (self.offset, self.hi)),
            Axis::Horizontal => LineSegment::new((self.lo, self.offset), (self.hi, self.offset)),
        }
    }

    fn overlap_ratio(&self, o: &AxisLine) -> f64 {
        let inter = self.hi.min(o.hi) - self.lo.max(o.lo);
        let shorter = self.length().min(o.length());
        if shorter <= 0.0 {
            return 0.0;
        }
        (inter / shorter).max(0.0)
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

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

fn union(parent: &mut [usize], a: usize, b: usize) {
    let (ra, rb) = (find(parent, a), find(parent, b));
    if ra != rb {
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        parent[hi] = lo;
    }
}

/// Axis lines observed consistently in at least `reliable_min_views` images,
/// merged to their median offset and union span.
pub fn build_reliable_set(per_image_lines: &[Vec<LineSegment>], cfg: &FacadeConfig) -> Vec<AxisLine> {
    let mut nodes: Vec<(usize, AxisLine)> = Vec::new();
    for (k, lines) in per_image_lines.iter().enumerate() {
        for l in lines {
            if let Some(axis) = classify_line(l, cfg.axis_tol_deg) {
                nodes.push((k, AxisLine::from_segment(l, axis)));
            }
        }
    }
    let n = nodes.len();
    let mut parent: Vec<usize> = (0..n).collect();
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (&nodes[i].1, &nodes[j].1);
            if a.axis == b.axis
                && (a.offset - b.offset).abs() <= cfg.reliable_offset_px
                && a.overlap_ratio(b) >= cfg.reliable_overlap
            {
                union(&mut parent, i, j);
            }
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = std::collections::BTreeMap::new();
    for i in 0..n {
        let r = find(&mut parent, i);
        groups.entry(r).or_default().push(i);
    }
    let mut out = Vec::new();
    for members in groups.values() {
        let mut views: Vec<usize> = members.iter().map(|&i| nodes[i].0).collect();
        views.sort_unstable();
        views.dedup();
        if views.len() < cfg.reliable_min_views {
            continue;
        }
        let mut offsets: Vec<f64> = members.iter().map(|&i| nodes[i].1.offset).collect();
        let lo = members.iter().map(|&i| nodes[i].1.lo).fold(f64::INFINITY, f64::min);
        let hi = members.iter().map(|&i| nodes[i].1.hi).fold(f64::NEG_INFINITY, f64::max);
        out.push(AxisLine { axis: nodes[members[0]].1.axis, offset: median(&mut offsets), lo, hi });
    }
    out.sort_by(|a, b| {
        (a.axis as u8, a.offset, a.lo).partial_cmp(&(b.axis as u8, b.offset, b.lo)).unwrap_or(Ordering::Equal)
    });
    out
}

/// Length of lines inside `bbox` minus length of lines crossing its border.
pub fn score_box(bbox: &[f64; 4], lines: &[LineSegment], tol: f64) -> f64 {
    let [x0, y0, x1, y1] = *bbox;
    let inside_grown = |p: (f64, f64)| p.0 >= x0 - tol && p.0 <= x1 + tol && p.1 >= y0 - tol && p.1 <= y1 + tol;
    let mut score = 0.0;
    for l in lines {
        if inside_grown(l.p0) && inside_grown(l.p1) {
            score += l.length;
        } else if crosses_interior(l, [x0 + tol, y0 + tol, x1 - tol, y1 - tol]) {
            score -= l.length;
        }
    }
    score
}

/// Whether the segment has a point strictly inside `b` (Liang-Barsky clip).
fn crosses_interior(l: &LineSegment, b: [f64; 4]) -> bool {
    if b[0] >= b[2] || b[1] >= b[3] {
        return false;
    }
    let (dx, dy) = (l.p1.0 - l.p0.0, l.p1.1 - l.p0.1);
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    for (p, q) in [(-dx, l.p0.0 - b[0]), (dx, b[2] - l.p0.0), (-dy, l.p0.1 - b[1]), (dy, b[3] - l.p0.1)] {
        if p == 0.0 {
            if q <= 0.0 {
                return false;
            }
        } else {
            let r = q / p;
            if p < 0.0 {
                t0 = t0.max(r);
            } else {
                t1 = t1.min(r);
            }
        }
    }
    t0 < t1
}

/// Best-scoring candidate box for one image's lines.
pub fn ransac_single(
    lines: &[LineSegment],
    vertical: &[AxisLine],
    horizontal: &[AxisLine],
    cfg: &FacadeConfig,
    seed: u64,
) -> Option<FacadeBox> {
    let weights = |ls: &[AxisLine]| -> Option<WeightedIndex<f64>> {
        WeightedIndex::new(ls.iter().map(|l| l.length().max(1e-6).powi(2))).ok()
    };
    let (wv, wh) = (weights(vertical)?, weights(horizontal)?);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<FacadeBox> = None;
    for _ in 0..cfg.iterations {
        let (a, b) = (wv.sample(&mut rng), wv.sample(&mut rng));
        let (c, d) = (wh.sample(&mut rng), wh.sample(&mut rng));
        if a == b || c == d {
            continue;
        }
        let (xa, xb) = (vertical[a].offset, vertical[b].offset);
        let (ya, yb) = (horizontal[c].offset, horizontal[d].offset);
        let bbox = [xa.min(xb), ya.min(yb), xa.max(xb), ya.max(yb)];
        if bbox[2] - bbox[0] < cfg.min_box_px || bbox[3] - bbox[1] < cfg.min_box_px {
            continue;
        }
        let score = score_box(&bbox, lines, cfg.score_tol_px);
        let better = match &best {
            None => true,
            Some(b) => score > b.score || (score == b.score && bbox_key(&bbox) < bbox_key(&b.bbox)),
        };
        if better {
            best = Some(FacadeBox { bbox, score });
        }
    }
    best
}

fn bbox_key(b: &[f64; 4]) -> [i64; 4] {
    b.map(|v| (v * 1e6).round() as i64)
}

/// Chebyshev distance between two boxes seen as 4-vectors.
fn box_distance(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    (0..4).map(|i| (a[i] - b[i]).abs()).fold(0.0, f64::max)
}

/// DBSCAN labels (`None` = noise), clusters numbered in discovery order.
pub fn dbscan(boxes: &[[f64; 4]], eps: f64, min_pts: usize) -> Vec<Option<usize>> {
    let n = boxes.len();
    let neighbors: Vec<Vec<usize>> =
        (0..n).map(|i| (0..n).filter(|&j| box_distance(&boxes[i], &boxes[j]) <= eps).collect()).collect();
    let mut label: Vec<Option<usize>> = vec![None; n];
    let mut visited = vec![false; n];
    let mut next = 0;
    for i in 0..n {
        if visited[i] || neighbors[i].len() < min_pts {
            continue;
        }
        let id = next;
        next += 1;
        let mut queue = vec![i];
        visited[i] = true;
        while let Some(p) = queue.pop() {
            label[p] = Some(id);
            if neighbors[p].len() < min_pts {
                continue;
            }
            for &q in &neighbors[p] {
                if label[q].is_none() {
                    label[q] = Some(id);
                }
                if !visited[q] {
                    visited[q] = true;
                    queue.push(q);
                }
            }
        }
    }
    label
}

/// Consensus of per-image boxes: per-coordinate median of the largest DBSCAN
/// cluster, or the best-scoring box when every box is noise.
pub fn consensus_box(candidates: &[FacadeBox], cfg: &FacadeConfig) -> Option<FacadeBox> {
    if candidates.is_empty() {
        return None;
    }
    let boxes: Vec<[f64; 4]> = candidates.iter().map(|c| c.bbox).collect();
    let labels = dbscan(&boxes, cfg.dbscan_eps, cfg.dbscan_min_pts);
    let n_clusters = labels.iter().flatten().max().map_or(0, |m| m + 1);
    let best_single = || {
        candidates
            .iter()
            .copied()
            .max_by(|a, b| a.score.total_cmp(&b.score).then(bbox_key(&b.bbox).cmp(&bbox_key(&a.bbox))))
    };
    if n_clusters == 0 {
        return best_single();
    }
    let members = |c: usize| -> Vec<usize> { (0..candidates.len()).filter(|&i| labels[i] == Some(c)).collect() };
    let top = |c: usize| members(c).iter().map(|&i| candidates[i].score).fold(f64::NEG_INFINITY, f64::max);
    let dominant = (0..n_clusters)
        .max_by(|&a, &b| {
            members(a).len().cmp(&members(b).len()).then(top(a).total_cmp(&top(b))).then(b.cmp(&a))
        })
        .unwrap_or(0);
    let idx = members(dominant);
    let mut bbox = [0.0; 4];
    for (k, v) in bbox.iter_mut().enumerate() {
        let mut vals: Vec<f64> = idx.iter().map(|&i| candidates[i].bbox[k]).collect();
        *v = median(&mut vals);
    }
    let mut scores: Vec<f64> = idx.iter().map(|&i| candidates[i].score).collect();
    Some(FacadeBox { bbox, score: median(&mut scores) })
}

/// Per-image RANSAC over reliable lines followed by corner consensus.
pub fn ransac_facade(
    per_image_lines: &[Vec<LineSegment>],
    reliable: &[AxisLine],
    cfg: &FacadeConfig,
    seed: u64,
) -> Result<FacadeBox, FacadeError> {
    let vertical: Vec<AxisLine> = reliable.iter().filter(|l| l.axis == Axis::Vertical).copied().collect();
    let horizontal: Vec<AxisLine> = reliable.iter().filter(|l| l.axis == Axis::Horizontal).copied().collect();
    if vertical.len() < 2 || horizontal.len() < 2 {
        return Err(FacadeError::InsufficientStructure { vertical: vertical.len(), horizontal: horizontal.len() });
    }
    let candidates: Vec<FacadeBox> = per_image_lines
        .par_iter()
        .enumerate()
        .filter_map(|(k, lines)| ransac_single(lines, &vertical, &horizontal, cfg, seed.wrapping_add(k as u64)))
        .collect();
    consensus_box(&candidates, cfg).ok_or(FacadeError::NoCandidate)
}

/// Integer pixel bounds of `b` clipped to a `w x h` image.
pub fn crop_bounds(b: &FacadeBox, w: u32, h: u32) -> Option<[u32; 4]> {
    let r = b.bbox.map(f64::round);
    let x0 = r[0].max(0.0);
    let y0 = r[1].max(0.0);
    let x1 = r[2].min(f64::from(w));
    let y1 = r[3].min(f64::from(h));
    if x1 - x0 < 1.0 || y1 - y0 < 1.0 {
        return None;
    }
    Some([x0 as u32, y0 as u32, x1 as u32, y1 as u32])
}

/// Crops every image to the box, shifting the grid origin accordingly.
pub fn crop_facades(images: &[OrthoImage], b: &FacadeBox) -> Result<Vec<OrthoImage>, FacadeError> {
    images
        .iter()
        .map(|img| {
            let [x0, y0, x1, y1] =
                crop_bounds(b, img.width(), img.height()).ok_or_else(|| FacadeError::CropOutOfBounds(img.source_id.clone()))?;
            let pixels = image::imageops::crop_imm(&img.pixels, x0, y0, x1 - x0, y1 - y0).to_image();
            Ok(OrthoImage {
                pixels,
                grid_origin2d: img.pixel_to_plane(f64::from(x0), f64::from(y0)),
                ..img.clone()
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{plane_basis, Plane, UnitVec3};
    use image::Rgba;

    fn outline(w: u32, h: u32, rect: [u32; 4], thick: u32) -> RgbaImage {
        let mut img = RgbaImage::from_pixel(w, h, Rgba([255, 255, 255, 255]));
        let [x0, y0, x1, y1] = rect;
        for y in y0..y1 {
            for x in x0..x1 {
                let edge = x < x0 + thick || x >= x1 - thick || y < y0 + thick || y >= y1 - thick;
                if edge {
                    img.put_pixel(x, y, Rgba([0, 0, 0, 255]));
                }
            }
        }
        img
    }

    #[test]
    fn outline_gives_four_sides() {
        let img = outline(200, 150, [40, 30, 160, 120], 2);
        let lines = detect_line_segments(&img, &FacadeConfig::default());
        assert_eq!(lines.len(), 4, "{lines:?}");
        let (v, h, o) = classify_axis_lines(&lines, 10.0);
        assert_eq!((v.len(), h.len(), o.len()), (2, 2, 0));
        let mut xs: Vec<f64> = v.iter().map(|l| 0.5 * (l.p0.0 + l.p1.0)).collect();
        xs.sort_by(f64::total_cmp);
        assert!((xs[0] - 41.0).abs() <= 2.0 && (xs[1] - 159.0).abs() <= 2.0, "{xs:?}");
        let mut ys: Vec<f64> = h.iter().map(|l| 0.5 * (l.p0.1 + l.p1.1)).collect();
        ys.sort_by(f64::total_cmp);
        assert!((ys[0] - 31.0).abs() <= 2.0 && (ys[1] - 119.0).abs() <= 2.0, "{ys:?}");
        for l in &v {
            assert!((l.length - 90.0).abs() <= 4.0);
        }
    }

    #[test]
    fn step_edge_is_located_on_the_boundary() {
        let img = RgbaImage::from_fn(100, 60, |x, _| if x < 37 { Rgba([0, 0, 0, 255]) } else { Rgba([200, 200, 200, 255]) });
        let lines = detect_line_segments(&img, &FacadeConfig::default());
        assert_eq!(lines.len(), 1);
        assert!((lines[0].p0.0 - 37.0).abs() < 1e-9);
    }

    #[test]
    fn uniform_image_has_no_lines() {
        let img = RgbaImage::from_pixel(100, 100, Rgba([80, 80, 80, 255]));
        assert!(detect_line_segments(&img, &FacadeConfig::default()).is_empty());
    }

    #[test]
    fn lines_file_passthrough() {
        let dir = tempfile::tempdir().unwrap();
        let lines = vec![vec![LineSegment::new((1.0, 2.0), (3.5, 40.25))], vec![]];
        let path = dir.path().join("lines.json");
        fs::write(&path, serde_json::to_string(&lines).unwrap()).unwrap();
        assert_eq!(load_lines(&path).unwrap(), lines);
    }

    fn at_angle(deg: f64) -> LineSegment {
        let r = deg.to_radians();
        LineSegment::new((0.0, 0.0), (50.0 * r.cos(), 50.0 * r.sin()))
    }

    #[test]
    fn axis_classification_boundaries() {
        assert_eq!(classify_line(&at_angle(8.0), 10.0), Some(Axis::Horizontal));
        assert_eq!(classify_line(&at_angle(12.0), 10.0), None);
        assert_eq!(classify_line(&at_angle(90.0), 10.0), Some(Axis::Vertical));
        assert_eq!(classify_line(&at_angle(172.0), 10.0), Some(Axis::Horizontal));
        assert_eq!(classify_line(&at_angle(100.0), 10.0), Some(Axis::Vertical));
        assert_eq!(classify_line(&at_angle(101.0), 10.0), None);
    }

    fn vline(x: f64, y0: f64, y1: f64) -> LineSegment {
        LineSegment::new((x, y0), (x, y1))
    }

    fn hline(y: f64, x0: f64, x1: f64) -> LineSegment {
        LineSegment::new((x0, y), (x1, y))
    }

    #[test]
    fn reliable_set_median_and_exclusion() {
        let cfg = FacadeConfig::default();
        let per = vec![
            vec![vline(100.0, 10.0, 200.0), hline(50.0, 0.0, 80.0)],
            vec![vline(102.0, 20.0, 210.0)],
            vec![vline(101.0, 0.0, 190.0)],
        ];
        let r = build_reliable_set(&per, &cfg);
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].offset, 101.0);
        assert_eq!((r[0].lo, r[0].hi), (0.0, 210.0));
        assert!(build_reliable_set(&[], &cfg).is_empty());
    }

    fn box_lines(b: [f64; 4]) -> Vec<LineSegment> {
        vec![vline(b[0], b[1], b[3]), vline(b[2], b[1], b[3]), hline(b[1], b[0], b[2]), hline(b[3], b[0], b[2])]
    }

    #[test]
    fn ransac_needs_structure() {
        let r = vec![AxisLine::from_segment(&vline(5.0, 0.0, 50.0), Axis::Vertical)];
        assert_eq!(
            ransac_facade(&[vec![]], &r, &FacadeConfig::default(), 0),
            Err(FacadeError::InsufficientStructure { vertical: 1, horizontal: 0 })
        );
    }

    #[test]
    fn ransac_recovers_clean_box_and_consensus_of_identical() {
        let cfg = FacadeConfig::default();
        let truth = [20.0, 30.0, 220.0, 180.0];
        let mut lines = box_lines(truth);
        // Window edges inside and a distractor crossing line outside.
        lines.extend(box_lines([50.0, 60.0, 90.0, 110.0]));
        lines.extend(box_lines([140.0, 60.0, 180.0, 110.0]));
        let per = vec![lines.clone(), lines.clone(), lines];
        let reliable = build_reliable_set(&per, &cfg);
        let b = ransac_facade(&per, &reliable, &cfg, 3).unwrap();
        assert_eq!(b.bbox, truth);
    }

    #[test]
    fn shrinking_across_a_border_line_lowers_score() {
        let truth = [20.0, 30.0, 220.0, 180.0];
        let lines = box_lines(truth);
        let full = score_box(&truth, &lines, 3.0);
        let shrunk = score_box(&[20.0, 30.0, 150.0, 180.0], &lines, 3.0);
        assert!(shrunk < full);
    }

    #[test]
    fn dbscan_majority_median() {
        let cfg = FacadeConfig::default();
        let c = |b: [f64; 4], s| FacadeBox { bbox: b, score: s };
        let cands = [c([10.0, 10.0, 100.0, 100.0], 5.0), c([12.0, 10.0, 101.0, 99.0], 4.0), c([11.0, 11.0, 99.0, 100.0], 3.0), c([300.0, 300.0, 400.0, 400.0], 50.0)];
        let b = consensus_box(&cands, &cfg).unwrap();
        assert_eq!(b.bbox, [11.0, 10.0, 100.0, 100.0]);
        let lone = consensus_box(&cands[3..], &cfg).unwrap();
        assert_eq!(lone.bbox, [300.0, 300.0, 400.0, 400.0]);
    }

    fn ortho(w: u32, h: u32) -> OrthoImage {
        let plane = Plane::new(UnitVec3::Y, 5.0);
        OrthoImage {
            pixels: RgbaImage::from_pixel(w, h, Rgba([1, 2, 3, 255])),
            pixel_size: 0.02,
            plane,
            basis: plane_basis(&plane),
            grid_origin2d: (1.0, 2.0),
            source_id: "a".into(),
        }
    }

    #[test]
    fn crop_examples() {
        let img = ortho(200, 100);
        let full = crop_facades(std::slice::from_ref(&img), &FacadeBox { bbox: [0.0, 0.0, 200.0, 100.0], score: 0.0 }).unwrap();
        assert_eq!(full[0], img);
        let c = crop_facades(&[img.clone()], &FacadeBox { bbox: [10.0, 10.0, 110.0, 60.0], score: 0.0 }).unwrap();
        assert_eq!((c[0].width(), c[0].height()), (100, 50));
        assert!((c[0].grid_origin2d.0 - 1.2).abs() < 1e-12 && (c[0].grid_origin2d.1 - 2.2).abs() < 1e-12);
        assert_eq!(c[0].pixel_size, 0.02);
        assert!(matches!(
            crop_facades(&[img], &FacadeBox { bbox: [300.0, 300.0, 400.0, 400.0], score: 0.0 }),
            Err(FacadeError::CropOutOfBounds(_))
        ));
    }
}
