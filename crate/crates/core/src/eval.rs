//! Detection, geometry and WWR metrics against ground-truth facades.
//!
//! Metrics whose denominator is empty are `None` (JSON `null`). Precision is
//! 0 when there are no predictions but some ground truth, recall is 0 when
//! there is no ground truth but some predictions, and F1 is 0 whenever
//! precision and recall are both 0. With neither predictions nor ground truth
//! all three are `None`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::iou;
use crate::geometry::{Plane, PlaneBasis, Vec3};
use crate::model::{FacadeModel, ThermalModel};

pub const MATCH_IOU: f64 = 0.5;
pub const FACADE_MATCH_IOU: f64 = 0.3;
pub const FACADE_MAX_ANGLE_DEG: f64 = 15.0;
pub const FACADE_MAX_OFFSET_M: f64 = 1.0;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("ground truth has no facades")]
    EmptyGroundTruth,
    #[error("file {path}: {message}")]
    File { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtWindow {
    /// World corners `[bottom-left, bottom-right, top-right, top-left]`.
    pub corners: [Vec3; 4],
}

impl GtWindow {
    pub fn area(&self) -> f64 {
        (self.corners[1] - self.corners[0]).norm() * (self.corners[3] - self.corners[0]).norm()
    }

    pub fn center(&self) -> Vec3 {
        (self.corners[0] + self.corners[2]) * 0.5
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtFacade {
    pub facade_id: String,
    /// Outward-facing plane.
    pub plane: Plane,
    pub corners: [Vec3; 4],
    pub windows: Vec<GtWindow>,
    pub wwr: f64,
}

impl GtFacade {
    pub fn area(&self) -> f64 {
        (self.corners[1] - self.corners[0]).norm() * (self.corners[3] - self.corners[0]).norm()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub building_id: String,
    pub facades: Vec<GtFacade>,
}

impl GroundTruth {
    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let err = |m: String| EvalError::File { path: path.display().to_string(), message: m };
        let text = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| err(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), EvalError> {
        let text = serde_json::to_string_pretty(self).expect("ground truth serializes");
        fs::write(path, text).map_err(|e| EvalError::File { path: path.display().to_string(), message: e.to_string() })
    }
}

/// Axis-aligned rectangle in a facade-plane frame, meters.
pub type Rect = [f64; 4];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchSet {
    /// `(pred index, gt index, iou)`.
    pub pairs: Vec<(usize, usize, f64)>,
    pub unmatched_pred: Vec<usize>,
    pub unmatched_gt: Vec<usize>,
}

impl MatchSet {
    pub fn tp(&self) -> usize {
        self.pairs.len()
    }

    pub fn fp(&self) -> usize {
        self.unmatched_pred.len()
    }

    pub fn fn_(&self) -> usize {
        self.unmatched_gt.len()
    }
}

/// Greedy one-to-one matching by descending IoU; ties go to the higher
/// prediction score, then the lower prediction index, then the lower
/// ground-truth index. Only pairs with IoU above `threshold` are kept.
pub fn match_windows(pred: &[Rect], pred_scores: &[f64], gt: &[Rect], threshold: f64) -> MatchSet {
    let mut cand: Vec<(usize, usize, f64)> = Vec::new();
    for (i, p) in pred.iter().enumerate() {
        for (j, g) in gt.iter().enumerate() {
            let v = iou(p, g);
            if v > threshold {
                cand.push((i, j, v));
            }
        }
    }
    let score = |i: usize| pred_scores.get(i).copied().unwrap_or(0.0);
    cand.sort_by(|a, b| {
        b.2.total_cmp(&a.2).then(score(b.0).total_cmp(&score(a.0))).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1))
    });
    let mut used_p = vec![false; pred.len()];
    let mut used_g = vec![false; gt.len()];
    let mut pairs = Vec::new();
    for (i, j, v) in cand {
        if !used_p[i] && !used_g[j] {
            used_p[i] = true;
            used_g[j] = true;
            pairs.push((i, j, v));
        }
    }
    MatchSet {
        pairs,
        unmatched_pred: (0..pred.len()).filter(|&i| !used_p[i]).collect(),
        unmatched_gt: (0..gt.len()).filter(|&j| !used_g[j]).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1 {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

pub fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> F1 {
    let n_pred = tp + fp;
    let n_gt = tp + fn_;
    if n_pred == 0 && n_gt == 0 {
        return F1 { precision: None, recall: None, f1: None };
    }
    let p = if n_pred == 0 { 0.0 } else { tp as f64 / n_pred as f64 };
    let r = if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 };
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    F1 { precision: Some(p), recall: Some(r), f1: Some(f) }
}

pub fn f1_score(ms: &MatchSet) -> F1 {
    f1_from_counts(ms.tp(), ms.fp(), ms.fn_())
}

/// Matched pair of windows with everything the pair metrics need.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairGeometry {
    pub iou: f64,
    pub pred_area: f64,
    pub gt_area: f64,
    pub pred_center: Vec3,
    pub gt_center: Vec3,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

pub fn mean_iou(pairs: &[PairGeometry]) -> Option<f64> {
    mean(pairs.iter().map(|p| p.iou))
}

pub fn mean_abs_rel_area_err(pairs: &[PairGeometry]) -> Option<f64> {
    mean(pairs.iter().map(|p| ((p.pred_area - p.gt_area) / p.gt_area).abs()))
}

pub fn mean_abs_pos_err(pairs: &[PairGeometry]) -> Option<f64> {
    mean(pairs.iter().map(|p| p.pred_center.distance(p.gt_center)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WwrErrors {
    /// Mean signed error over facades with predictions.
    pub standard: Option<f64>,
    /// Mean over all ground-truth facades, missing predictions counted as 0.
    pub total: Option<f64>,
    /// Mean over all ground-truth facades, missing predictions imputed with
    /// the mean predicted WWR.
    pub imputed: Option<f64>,
}

/// `facades[j] = (predicted WWR if facade j was predicted, ground-truth WWR)`.
pub fn wwr_errors(facades: &[(Option<f64>, f64)]) -> WwrErrors {
    if facades.is_empty() {
        return WwrErrors { standard: None, total: None, imputed: None };
    }
    let standard = mean(facades.iter().filter_map(|(p, g)| p.map(|p| p - g)));
    let total = mean(facades.iter().map(|(p, g)| p.unwrap_or(0.0) - g));
    let avg_pred = mean(facades.iter().filter_map(|(p, _)| *p));
    let imputed = avg_pred.and_then(|avg| mean(facades.iter().map(|(p, g)| p.unwrap_or(avg) - g)));
    WwrErrors { standard, total, imputed }
}

fn project_rect(basis: &PlaneBasis, corners: &[Vec3]) -> Rect {
    let mut r = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
    for c in corners {
        let (u, v) = basis.to_plane(*c);
        r = [r[0].min(u), r[1].min(v), r[2].max(u), r[3].max(v)];
    }
    r
}

/// IoU of the projected extents when the planes agree, `None` otherwise.
pub fn facade_overlap(pred: &FacadeModel, gt: &GtFacade) -> Option<f64> {
    let cos = pred.plane.normal.dot(gt.plane.normal);
    if cos.abs() < FACADE_MAX_ANGLE_DEG.to_radians().cos() {
        return None;
    }
    let g = if cos < 0.0 { gt.plane.flipped() } else { gt.plane };
    if (g.d - pred.plane.d).abs() > FACADE_MAX_OFFSET_M {
        return None;
    }
    let v = iou(&project_rect(&pred.basis, &pred.boundary), &project_rect(&pred.basis, &gt.corners));
    (v > FACADE_MATCH_IOU).then_some(v)
}

/// Greedy facade correspondence, `(pred index, gt index)` pairs.
pub fn match_facades(pred: &[FacadeModel], gt: &[GtFacade]) -> Vec<(usize, usize)> {
    let mut cand = Vec::new();
    for (i, p) in pred.iter().enumerate() {
        for (j, g) in gt.iter().enumerate() {
            if let Some(v) = facade_overlap(p, g) {
                cand.push((i, j, v));
            }
        }
    }
    cand.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    let (mut up, mut ug) = (vec![false; pred.len()], vec![false; gt.len()]);
    let mut out = Vec::new();
    for (i, j, _) in cand {
        if !up[i] && !ug[j] {
            up[i] = true;
            ug[j] = true;
            out.push((i, j));
        }
    }
    out.sort_unstable();
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FacadeEval {
    pub gt_facade: String,
    pub pred_facade: Option<String>,
    pub gt_wwr: f64,
    pub pred_wwr: Option<f64>,
    pub wwr_error: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub building_id: String,
    /// Windows on facades that received a prediction.
    pub detection: F1,
    /// Windows on all ground-truth facades.
    pub detection_total: F1,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub fn_total: usize,
    pub mean_iou: Option<f64>,
    pub mean_abs_rel_area_err: Option<f64>,
    pub mean_abs_pos_err_m: Option<f64>,
    pub wwr: WwrErrors,
    pub facades: Vec<FacadeEval>,
    pub pairs: Vec<PairGeometry>,
}

pub fn evaluate(model: &ThermalModel, gt: &GroundTruth) -> Result<EvalReport, EvalError> {
    if gt.facades.is_empty() {
        return Err(EvalError::EmptyGroundTruth);
    }
    let fmatch = match_facades(&model.facades, &gt.facades);
    let mut pairs = Vec::new();
    let (mut tp, mut fp, mut fn_, mut fn_missing) = (0, 0, 0, 0);
    let mut facades = Vec::new();
    for (j, g) in gt.facades.iter().enumerate() {
        let Some(&(i, _)) = fmatch.iter().find(|(_, gj)| *gj == j) else {
            fn_missing += g.windows.len();
            facades.push(FacadeEval {
                gt_facade: g.facade_id.clone(),
                pred_facade: None,
                gt_wwr: g.wwr,
                pred_wwr: None,
                wwr_error: None,
                tp: 0,
                fp: 0,
                fn_: g.windows.len(),
            });
            continue;
        };
        let p = &model.facades[i];
        let pr: Vec<Rect> = p.windows.iter().map(|w| project_rect(&p.basis, &w.corners)).collect();
        let ps: Vec<f64> = p.windows.iter().map(|w| w.score).collect();
        let gr: Vec<Rect> = g.windows.iter().map(|w| project_rect(&p.basis, &w.corners)).collect();
        let ms = match_windows(&pr, &ps, &gr, MATCH_IOU);
        for &(pi, gi, v) in &ms.pairs {
            let w = &p.windows[pi];
            pairs.push(PairGeometry {
                iou: v,
                pred_area: w.area_m2,
                gt_area: g.windows[gi].area(),
                pred_center: w.center(),
                gt_center: g.windows[gi].center(),
            });
        }
        tp += ms.tp();
        fp += ms.fp();
        fn_ += ms.fn_();
        facades.push(FacadeEval {
            gt_facade: g.facade_id.clone(),
            pred_facade: Some(p.facade_id.clone()),
            gt_wwr: g.wwr,
            pred_wwr: Some(p.wwr),
            wwr_error: Some(p.wwr - g.wwr),
            tp: ms.tp(),
            fp: ms.fp(),
            fn_: ms.fn_(),
        });
    }
    // Predicted facades without a ground-truth counterpart only add false
    // positives.
    for (i, p) in model.facades.iter().enumerate() {
        if !fmatch.iter().any(|(pi, _)| *pi == i) {
            fp += p.windows.len();
        }
    }
    let wwr_in: Vec<(Option<f64>, f64)> = facades.iter().map(|f| (f.pred_wwr, f.gt_wwr)).collect();
    Ok(EvalReport {
        building_id: gt.building_id.clone(),
        detection: f1_from_counts(tp, fp, fn_),
        detection_total: f1_from_counts(tp, fp, fn_ + fn_missing),
        tp,
        fp,
        fn_,
        fn_total: fn_ + fn_missing,
        mean_iou: mean_iou(&pairs),
        mean_abs_rel_area_err: mean_abs_rel_area_err(&pairs),
        mean_abs_pos_err_m: mean_abs_pos_err(&pairs),
        wwr: wwr_errors(&wwr_in),
        facades,
        pairs,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.6}"))
}

impl EvalReport {
    /// One-row CSV with a header: detection, geometry and WWR columns.
    pub fn to_csv(&self) -> String {
        let header = "building,f1,f1_total,mean_iou,mean_abs_rel_area_err,mean_abs_pos_err_m,wwr_error,wwr_error_total,wwr_error_imputed";
        let row = [
            self.building_id.clone(),
            cell(self.detection.f1),
            cell(self.detection_total.f1),
            cell(self.mean_iou),
            cell(self.mean_abs_rel_area_err),
            cell(self.mean_abs_pos_err_m),
            cell(self.wwr.standard),
            cell(self.wwr.total),
            cell(self.wwr.imputed),
        ]
        .join(",");
        format!("{header}\n{row}\n")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn match_examples() {
        let b = [0.0, 0.0, 1.0, 1.0];
        let ms = match_windows(&[b], &[1.0], &[b], MATCH_IOU);
        assert_eq!(ms.pairs.len(), 1);
        assert!(ms.unmatched_pred.is_empty() && ms.unmatched_gt.is_empty());

        // IoU 0.4: [0,0,1,1] vs [0,0,1.4,1]... choose widths to hit 0.4.
        let g = [0.0, 0.0, 2.5, 1.0];
        assert!((iou(&b, &g) - 0.4).abs() < 1e-12);
        let ms = match_windows(&[b], &[1.0], &[g], MATCH_IOU);
        assert_eq!((ms.tp(), ms.fp(), ms.fn_()), (0, 1, 1));

        let gt = [0.0, 0.0, 10.0, 10.0];
        let p90 = [0.0, 0.0, 10.0, 9.0];
        let p60 = [0.0, 0.0, 10.0, 6.0];
        let ms = match_windows(&[p60, p90], &[1.0, 1.0], &[gt], MATCH_IOU);
        assert_eq!(ms.pairs.len(), 1);
        assert_eq!(ms.pairs[0].0, 1);
        assert!((ms.pairs[0].2 - 0.9).abs() < 1e-12);
        assert_eq!(ms.unmatched_pred, vec![0]);
    }

    #[test]
    fn tie_prefers_higher_score_then_lower_index() {
        let g = [0.0, 0.0, 1.0, 1.0];
        let ms = match_windows(&[g, g], &[0.5, 0.9], &[g], MATCH_IOU);
        assert_eq!(ms.pairs[0].0, 1);
        let ms = match_windows(&[g, g], &[0.5, 0.5], &[g], MATCH_IOU);
        assert_eq!(ms.pairs[0].0, 0);
    }

    #[test]
    fn f1_examples() {
        let perfect = f1_from_counts(3, 0, 0);
        assert_eq!((perfect.precision, perfect.recall, perfect.f1), (Some(1.0), Some(1.0), Some(1.0)));
        let none = f1_from_counts(0, 0, 3);
        assert_eq!((none.precision, none.recall, none.f1), (Some(0.0), Some(0.0), Some(0.0)));
        let m = f1_from_counts(3, 1, 1);
        assert!((m.precision.unwrap() - 0.75).abs() < 1e-15);
        assert!((m.recall.unwrap() - 0.75).abs() < 1e-15);
        assert!((m.f1.unwrap() - 0.75).abs() < 1e-15);
        assert_eq!(f1_from_counts(0, 0, 0).f1, None);
    }

    fn pair(iou: f64, pa: f64, ga: f64, pc: Vec3, gc: Vec3) -> PairGeometry {
        PairGeometry { iou, pred_area: pa, gt_area: ga, pred_center: pc, gt_center: gc }
    }

    #[test]
    fn pair_metric_examples() {
        let c = Vec3::new(1.0, 2.0, 3.0);
        let same = [pair(1.0, 1.0, 1.0, c, c)];
        assert_eq!((mean_iou(&same), mean_abs_rel_area_err(&same), mean_abs_pos_err(&same)), (Some(1.0), Some(0.0), Some(0.0)));
        let area = [pair(0.8, 1.2, 1.0, c, c)];
        assert!((mean_abs_rel_area_err(&area).unwrap() - 0.2).abs() < 1e-12);
        let shifted = [pair(0.8, 1.0, 1.0, c, c + Vec3::new(0.3, 0.0, 0.0))];
        assert!((mean_abs_pos_err(&shifted).unwrap() - 0.3).abs() < 1e-12);
        assert_eq!(mean_iou(&[]), None);
    }

    #[test]
    fn wwr_examples() {
        let e = wwr_errors(&[(Some(0.2), 0.2), (None, 0.3)]);
        assert!((e.standard.unwrap() - 0.0).abs() <= 1e-12);
        assert!((e.total.unwrap() + 0.15).abs() <= 1e-12);
        assert!((e.imputed.unwrap() + 0.05).abs() <= 1e-12);
        let all = wwr_errors(&[(Some(0.2), 0.2), (Some(0.3), 0.3)]);
        assert_eq!((all.standard, all.total, all.imputed), (Some(0.0), Some(0.0), Some(0.0)));
        let missing = wwr_errors(&[(None, 0.2), (None, 0.3)]);
        assert_eq!(missing.standard, None);
        assert!((missing.total.unwrap() + 0.25).abs() <= 1e-12);
        assert_eq!(missing.imputed, None);
    }
}
