//! Registration of ortho views of one facade onto a common reference grid.
//!
//! Pixel positions here are index coordinates: `(x, y)` is the center of
//! pixel `(x, y)`.

use image::imageops;
use image::{ImageBuffer, Luma, Rgba, RgbaImage};
use log::warn;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ortho::{OrthoImage, BACKGROUND};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AlignError {
    #[error("need at least 4 correspondences, got {0}")]
    InsufficientMatches(usize),
    #[error("best inlier ratio {0:.3} below 0.5")]
    AlignmentFailed(f64),
}

/// Maps source pixel `(x, y)` to reference pixel `(scale*x + tx, scale*y + ty)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Alignment2D {
    pub scale: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Alignment2D {
    pub const IDENTITY: Alignment2D = Alignment2D { scale: 1.0, tx: 0.0, ty: 0.0 };

    pub fn apply(&self, p: (f64, f64)) -> (f64, f64) {
        (self.scale * p.0 + self.tx, self.scale * p.1 + self.ty)
    }

    pub fn invert(&self, p: (f64, f64)) -> (f64, f64) {
        ((p.0 - self.tx) / self.scale, (p.1 - self.ty) / self.scale)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    pub src: (f64, f64),
    pub reference: (f64, f64),
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignConfig {
    pub ratio: f64,
    pub max_features: usize,
    /// Descriptor grid is `grid x grid` samples spaced `step` pixels apart.
    pub descriptor_grid: usize,
    pub descriptor_step: f64,
    pub blur_sigma: f32,
    pub ransac_iterations: usize,
    pub inlier_threshold: f64,
    pub min_inlier_ratio: f64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            ratio: 0.75,
            max_features: 600,
            descriptor_grid: 16,
            descriptor_step: 14.0,
            blur_sigma: 1.5,
            ransac_iterations: 500,
            inlier_threshold: 2.0,
            min_inlier_ratio: 0.5,
        }
    }
}

type Gray = ImageBuffer<Luma<f32>, Vec<f32>>;

fn to_gray(img: &RgbaImage) -> Gray {
    ImageBuffer::from_fn(img.width(), img.height(), |x, y| {
        let p = img.get_pixel(x, y).0;
        if p[3] == 0 {
            Luma([0.0])
        } else {
            Luma([(0.299 * f32::from(p[0]) + 0.587 * f32::from(p[1]) + 0.114 * f32::from(p[2])) / 255.0])
        }
    })
}

#[derive(Debug, Clone)]
struct Feature {
    pos: (f64, f64),
    desc: Vec<f32>,
}

fn bilinear(img: &Gray, x: f64, y: f64) -> Option<f32> {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let (x0, y0) = (x.floor() as i64, y.floor() as i64);
    if x0 < 0 || y0 < 0 || x0 + 1 >= w || y0 + 1 >= h {
        return None;
    }
    let (ax, ay) = ((x - x0 as f64) as f32, (y - y0 as f64) as f32);
    let g = |xx: i64, yy: i64| img.get_pixel(xx as u32, yy as u32).0[0];
    Some(
        g(x0, y0) * (1.0 - ax) * (1.0 - ay)
            + g(x0 + 1, y0) * ax * (1.0 - ay)
            + g(x0, y0 + 1) * (1.0 - ax) * ay
            + g(x0 + 1, y0 + 1) * ax * ay,
    )
}

/// Minimum-eigenvalue corner response of the 5x5 structure tensor.
fn corner_response(g: &Gray) -> Vec<f32> {
    let (w, h) = (g.width() as usize, g.height() as usize);
    let raw = g.as_raw();
    let mut ixx = vec![0.0f32; w * h];
    let mut iyy = vec![0.0f32; w * h];
    let mut ixy = vec![0.0f32; w * h];
    for y in 1..h.saturating_sub(1) {
        for x in 1..w - 1 {
            let i = y * w + x;
            let gx = 0.5 * (raw[i + 1] - raw[i - 1]);
            let gy = 0.5 * (raw[i + w] - raw[i - w]);
            ixx[i] = gx * gx;
            iyy[i] = gy * gy;
            ixy[i] = gx * gy;
        }
    }
    let box5 = |src: &[f32]| -> Vec<f32> {
        let mut tmp = vec![0.0f32; w * h];
        for y in 0..h {
            for x in 2..w.saturating_sub(2) {
                tmp[y * w + x] = (x - 2..=x + 2).map(|xx| src[y * w + xx]).sum();
            }
        }
        let mut out = vec![0.0f32; w * h];
        for y in 2..h.saturating_sub(2) {
            for x in 0..w {
                out[y * w + x] = (y - 2..=y + 2).map(|yy| tmp[yy * w + x]).sum();
            }
        }
        out
    };
    let (sxx, syy, sxy) = (box5(&ixx), box5(&iyy), box5(&ixy));
    (0..w * h)
        .map(|i| {
            let tr = 0.5 * (sxx[i] + syy[i]);
            let det = sxx[i] * syy[i] - sxy[i] * sxy[i];
            tr - (tr * tr - det).max(0.0).sqrt()
        })
        .collect()
}

fn detect_features(img: &RgbaImage, cfg: &AlignConfig) -> Vec<Feature> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w < 8 || h < 8 {
        return Vec::new();
    }
    let gray = to_gray(img);
    let resp = corner_response(&gray);
    let max = resp.iter().cloned().fold(0.0f32, f32::max);
    if max < 1e-4 {
        return Vec::new();
    }
    let thresh = 0.01 * max;
    let radius = 3usize;
    let half = cfg.descriptor_step * (cfg.descriptor_grid as f64 - 1.0) / 2.0;
    let border = (half.ceil() as usize + 2).max(radius + 1);
    let mut peaks: Vec<(f32, usize, usize)> = Vec::new();
    for y in border..h.saturating_sub(border) {
        'px: for x in border..w.saturating_sub(border) {
            let r = resp[y * w + x];
            if r <= thresh {
                continue;
            }
            for yy in y - radius..=y + radius {
                for xx in x - radius..=x + radius {
                    let o = resp[yy * w + xx];
                    // Strict on earlier pixels, non-strict on later ones, so
                    // plateaus keep exactly one peak.
                    if o > r || (o == r && (yy, xx) < (y, x)) {
                        continue 'px;
                    }
                }
            }
            peaks.push((r, x, y));
        }
    }
    peaks.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.2, a.1).cmp(&(b.2, b.1))));
    peaks.truncate(cfg.max_features);

    let blurred = imageops::blur(&gray, cfg.blur_sigma);
    let alpha_ok = |x: f64, y: f64| {
        let (xi, yi) = (x.round() as i64, y.round() as i64);
        xi >= 0 && yi >= 0 && (xi as u32) < img.width() && (yi as u32) < img.height() && img.get_pixel(xi as u32, yi as u32).0[3] != 0
    };
    peaks
        .into_iter()
        .filter_map(|(_, x, y)| {
            let r = |xx: usize, yy: usize| f64::from(resp[yy * w + xx]);
            let sub = |m: f64, c: f64, p: f64| {
                let den = m - 2.0 * c + p;
                if den.abs() < 1e-12 {
                    0.0
                } else {
                    (0.5 * (m - p) / den).clamp(-0.5, 0.5)
                }
            };
            let dx = sub(r(x - 1, y), r(x, y), r(x + 1, y));
            let dy = sub(r(x, y - 1), r(x, y), r(x, y + 1));
            let pos = (x as f64 + dx, y as f64 + dy);
            let n = cfg.descriptor_grid;
            let mut desc = Vec::with_capacity(n * n);
            for j in 0..n {
                for i in 0..n {
                    let sx = pos.0 - half + i as f64 * cfg.descriptor_step;
                    let sy = pos.1 - half + j as f64 * cfg.descriptor_step;
                    if !alpha_ok(sx, sy) {
                        return None;
                    }
                    desc.push(bilinear(&blurred, sx, sy)?);
                }
            }
            let mean = desc.iter().sum::<f32>() / desc.len() as f32;
            desc.iter_mut().for_each(|v| *v -= mean);
            let norm = desc.iter().map(|v| v * v).sum::<f32>().sqrt();
            if norm < 1e-3 {
                return None;
            }
            desc.iter_mut().for_each(|v| *v /= norm);
            Some(Feature { pos, desc })
        })
        .collect()
}

fn dist2(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// For each query, (index of nearest, nearest distance^2, second distance^2).
fn nearest_two(query: &[Feature], train: &[Feature]) -> Vec<(usize, f32, f32)> {
    query
        .par_iter()
        .map(|q| {
            let mut best = (usize::MAX, f32::INFINITY, f32::INFINITY);
            for (i, t) in train.iter().enumerate() {
                let d = dist2(&q.desc, &t.desc);
                if d < best.1 {
                    best = (i, d, best.1);
                } else if d < best.2 {
                    best.2 = d;
                }
            }
            best
        })
        .collect()
}

fn match_features(reference: &[Feature], src: &[Feature], ratio: f64) -> Vec<Correspondence> {
    if reference.is_empty() || src.is_empty() {
        return Vec::new();
    }
    let fwd = nearest_two(src, reference);
    let bwd = nearest_two(reference, src);
    let r2 = (ratio * ratio) as f32;
    let mut out = Vec::new();
    for (si, &(ri, d1, d2)) in fwd.iter().enumerate() {
        if ri == usize::MAX || bwd[ri].0 != si {
            continue;
        }
        if d2.is_finite() && d1 >= r2 * d2 {
            continue;
        }
        let d = f64::from(d1).sqrt();
        out.push(Correspondence {
            src: src[si].pos,
            reference: reference[ri].pos,
            score: (1.0 - d / 2.0).clamp(0.0, 1.0),
        });
    }
    out
}

/// Corner features of both images matched with a ratio test and a mutual
/// nearest-neighbor check.
pub fn detect_and_match(reference: &OrthoImage, src: &OrthoImage, cfg: &AlignConfig) -> Vec<Correspondence> {
    let (fr, fs) = rayon::join(
        || detect_features(&reference.pixels, cfg),
        || detect_features(&src.pixels, cfg),
    );
    match_features(&fr, &fs, cfg.ratio)
}

fn fit_least_squares(corrs: &[Correspondence], idx: &[usize]) -> Option<Alignment2D> {
    let n = idx.len() as f64;
    let (mut cs, mut cr) = ((0.0, 0.0), (0.0, 0.0));
    for &i in idx {
        let c = &corrs[i];
        cs = (cs.0 + c.src.0, cs.1 + c.src.1);
        cr = (cr.0 + c.reference.0, cr.1 + c.reference.1);
    }
    let cs = (cs.0 / n, cs.1 / n);
    let cr = (cr.0 / n, cr.1 / n);
    let (mut num, mut den) = (0.0, 0.0);
    for &i in idx {
        let c = &corrs[i];
        let s = (c.src.0 - cs.0, c.src.1 - cs.1);
        let r = (c.reference.0 - cr.0, c.reference.1 - cr.1);
        num += s.0 * r.0 + s.1 * r.1;
        den += s.0 * s.0 + s.1 * s.1;
    }
    if den < 1e-9 {
        return None;
    }
    let scale = num / den;
    if !(scale > 0.0) {
        return None;
    }
    Some(Alignment2D { scale, tx: cr.0 - scale * cs.0, ty: cr.1 - scale * cs.1 })
}

fn inliers(corrs: &[Correspondence], a: &Alignment2D, thresh: f64) -> Vec<usize> {
    corrs
        .iter()
        .enumerate()
        .filter(|(_, c)| {
            let p = a.apply(c.src);
            (p.0 - c.reference.0).hypot(p.1 - c.reference.1) < thresh
        })
        .map(|(i, _)| i)
        .collect()
}

/// RANSAC estimate of a scale + translation mapping; returns the transform
/// and its inlier ratio.
pub fn estimate_alignment(
    corrs: &[Correspondence],
    cfg: &AlignConfig,
    seed: u64,
) -> Result<(Alignment2D, f64), AlignError> {
    if corrs.len() < 4 {
        return Err(AlignError::InsufficientMatches(corrs.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Vec<usize> = Vec::new();
    for _ in 0..cfg.ransac_iterations {
        let pick = sample(&mut rng, corrs.len(), 2);
        let Some(model) = fit_least_squares(corrs, &[pick.index(0), pick.index(1)]) else { continue };
        let inl = inliers(corrs, &model, cfg.inlier_threshold);
        if inl.len() > best.len() {
            best = inl;
        }
    }
    let ratio_of = |k: usize| k as f64 / corrs.len() as f64;
    let mut model = fit_least_squares(corrs, &best).ok_or(AlignError::AlignmentFailed(ratio_of(best.len())))?;
    for _ in 0..3 {
        let inl = inliers(corrs, &model, cfg.inlier_threshold);
        if inl.len() < best.len() || inl == best {
            break;
        }
        match fit_least_squares(corrs, &inl) {
            Some(m) => {
                model = m;
                best = inl;
            }
            None => break,
        }
    }
    let ratio = ratio_of(best.len());
    if ratio < cfg.min_inlier_ratio {
        return Err(AlignError::AlignmentFailed(ratio));
    }
    Ok((model, ratio))
}

/// Resamples `src` into a `width x height` grid through `a`. Output pixels
/// touching source background or lying outside the source are background.
pub fn resample(src: &RgbaImage, a: &Alignment2D, width: u32, height: u32) -> RgbaImage {
    let (sw, sh) = (i64::from(src.width()), i64::from(src.height()));
    let rows: Vec<Vec<Rgba<u8>>> = (0..height)
        .into_par_iter()
        .map(|y| {
            (0..width)
                .map(|x| {
                    let (fx, fy) = a.invert((f64::from(x), f64::from(y)));
                    let (x0, y0) = (fx.floor(), fy.floor());
                    let (ax, ay) = (fx - x0, fy - y0);
                    let (x0, y0) = (x0 as i64, y0 as i64);
                    let taps = [
                        (x0, y0, (1.0 - ax) * (1.0 - ay)),
                        (x0 + 1, y0, ax * (1.0 - ay)),
                        (x0, y0 + 1, (1.0 - ax) * ay),
                        (x0 + 1, y0 + 1, ax * ay),
                    ];
                    let mut acc = [0.0f64; 4];
                    for (tx, ty, wt) in taps {
                        if wt <= 1e-12 {
                            continue;
                        }
                        if tx < 0 || ty < 0 || tx >= sw || ty >= sh {
                            return BACKGROUND;
                        }
                        let p = src.get_pixel(tx as u32, ty as u32).0;
                        if p[3] == 0 {
                            return BACKGROUND;
                        }
                        for c in 0..4 {
                            acc[c] += wt * f64::from(p[c]);
                        }
                    }
                    Rgba(acc.map(|c| c.round().clamp(0.0, 255.0) as u8))
                })
                .collect()
        })
        .collect();
    let mut out = RgbaImage::new(width, height);
    for (y, row) in rows.into_iter().enumerate() {
        for (x, c) in row.into_iter().enumerate() {
            out.put_pixel(x as u32, y as u32, c);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignStatus {
    Reference,
    Aligned,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignRecord {
    pub source_id: String,
    pub status: AlignStatus,
    pub transform: Option<Alignment2D>,
    pub inlier_ratio: Option<f64>,
    pub matches: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct AlignedGroup {
    /// Index of the reference in the input list.
    pub reference: usize,
    /// Successfully aligned images in input order, reference included.
    pub images: Vec<OrthoImage>,
    pub report: Vec<AlignRecord>,
}

/// Aligns every image to the one with the most foreground pixels.
pub fn align_group(images: &[OrthoImage], cfg: &AlignConfig, seed: u64) -> AlignedGroup {
    assert!(!images.is_empty(), "align_group needs at least one image");
    let counts: Vec<usize> = images.iter().map(OrthoImage::foreground_count).collect();
    let reference = (0..images.len()).max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a))).unwrap_or(0);
    let ref_img = &images[reference];
    let ref_features = detect_features(&ref_img.pixels, cfg);
    let results: Vec<(Option<OrthoImage>, AlignRecord)> = images
        .par_iter()
        .enumerate()
        .map(|(i, img)| {
            if i == reference {
                let rec = AlignRecord {
                    source_id: img.source_id.clone(),
                    status: AlignStatus::Reference,
                    transform: Some(Alignment2D::IDENTITY),
                    inlier_ratio: Some(1.0),
                    matches: 0,
                    error: None,
                };
                return (Some(img.clone()), rec);
            }
            let corrs = match_features(&ref_features, &detect_features(&img.pixels, cfg), cfg.ratio);
            match estimate_alignment(&corrs, cfg, seed.wrapping_add(i as u64)) {
                Ok((a, ratio)) => {
                    let pixels = resample(&img.pixels, &a, ref_img.width(), ref_img.height());
                    let out = OrthoImage { pixels, source_id: img.source_id.clone(), ..ref_img.clone() };
                    let rec = AlignRecord {
                        source_id: img.source_id.clone(),
                        status: AlignStatus::Aligned,
                        transform: Some(a),
                        inlier_ratio: Some(ratio),
                        matches: corrs.len(),
                        error: None,
                    };
                    (Some(out), rec)
                }
                Err(e) => {
                    warn!("alignment of {} failed: {e}", img.source_id);
                    let rec = AlignRecord {
                        source_id: img.source_id.clone(),
                        status: AlignStatus::Failed,
                        transform: None,
                        inlier_ratio: None,
                        matches: corrs.len(),
                        error: Some(e.to_string()),
                    };
                    (None, rec)
                }
            }
        })
        .collect();
    let mut out = Vec::new();
    let mut report = Vec::new();
    let mut ref_pos = 0;
    for (i, (img, rec)) in results.into_iter().enumerate() {
        if i == reference {
            ref_pos = out.len();
        }
        if let Some(img) = img {
            out.push(img);
        }
        report.push(rec);
    }
    AlignedGroup { reference: ref_pos, images: out, report }
}
