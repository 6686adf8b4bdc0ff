//! Merges per-view window detections into multi-view consensus boxes.

use facade3d::fusion::{fuse_multiview, Detection, FusionConfig, WINDOW_CATEGORY};

fn det(bbox: [f64; 4], score: f64, view: &str) -> Detection {
    Detection { bbox, score, category_id: WINDOW_CATEGORY, source_id: view.into() }
}

fn main() {
    let raw = vec![
        det([100.0, 50.0, 160.0, 125.0], 0.81, "a"),
        det([102.0, 51.0, 161.0, 124.0], 0.64, "b"),
        det([99.0, 49.0, 158.0, 126.0], 0.49, "c"),
        // Seen by one view only.
        det([300.0, 50.0, 360.0, 125.0], 0.95, "a"),
        // Below the confidence floor.
        det([500.0, 50.0, 560.0, 125.0], 0.1, "b"),
        det([501.0, 50.0, 560.0, 125.0], 0.15, "c"),
    ];
    for d in fuse_multiview(&raw, &FusionConfig::default()) {
        println!("{:?} score {:.3}", d.bbox, d.score);
    }
}
