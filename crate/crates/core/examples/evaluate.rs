//! Window matching, F1 and the WWR error variants on a small example.

use facade3d::eval::{f1_score, match_windows, mean_iou, wwr_errors, PairGeometry, MATCH_IOU};
use facade3d::fusion::iou;

fn main() {
    let gt = [[0.0, 0.0, 1.0, 1.5], [2.0, 0.0, 3.0, 1.5], [4.0, 0.0, 5.0, 1.5]];
    let pred = [[0.05, 0.0, 1.0, 1.45], [2.1, 0.1, 3.1, 1.6], [6.0, 0.0, 7.0, 1.5]];
    let ms = match_windows(&pred, &[0.9, 0.8, 0.7], &gt, MATCH_IOU);
    println!("pairs {:?}, fp {:?}, fn {:?}", ms.pairs, ms.unmatched_pred, ms.unmatched_gt);
    println!("{:?}", f1_score(&ms));
    let geo: Vec<PairGeometry> = ms
        .pairs
        .iter()
        .map(|&(p, g, _)| PairGeometry {
            iou: iou(&pred[p], &gt[g]),
            pred_area: (pred[p][2] - pred[p][0]) * (pred[p][3] - pred[p][1]),
            gt_area: (gt[g][2] - gt[g][0]) * (gt[g][3] - gt[g][1]),
            pred_center: [0.5 * (pred[p][0] + pred[p][2]), 0.0, 0.5 * (pred[p][1] + pred[p][3])].into(),
            gt_center: [0.5 * (gt[g][0] + gt[g][2]), 0.0, 0.5 * (gt[g][1] + gt[g][3])].into(),
        })
        .collect();
    println!("mean iou {:?}", mean_iou(&geo));
    println!("{:?}", wwr_errors(&[(Some(0.2), 0.2), (None, 0.3)]));
}
