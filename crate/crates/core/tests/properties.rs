//! Property tests for module invariants.

use facade3d::align::{estimate_alignment, AlignConfig, Correspondence};
use facade3d::clustering::{cluster_planes, plane_distance, SegmentRef};
use facade3d::dataset::{PanoRecord, PlaneAssocMatrix, RawPlane};
use facade3d::eval::{f1_from_counts, match_windows, wwr_errors, MATCH_IOU};
use facade3d::facade::{classify_axis_lines, LineSegment};
use facade3d::fusion::{fuse_multiview, iou, iou_components, Detection, FusionConfig, WINDOW_CATEGORY};
use facade3d::geometry::{
    pixel_to_dir, plane_basis, project_world_to_pano, ray_plane_intersect, PanoPose, Plane, UnitVec3, Vec3,
};
use facade3d::model::{assemble_model, union_area, FacadeFrame, FacadeModel, ThermalModel};
use facade3d::facade::FacadeBox;
use facade3d::ortho::{ortho_from_volume, volume_point, ConstantOracle};
use image::Rgba;
use proptest::prelude::*;
use std::collections::BTreeSet;

fn unit_xy() -> impl Strategy<Value = UnitVec3> {
    (0.0..std::f64::consts::TAU).prop_map(|a: f64| UnitVec3::try_from([a.cos(), a.sin(), 0.0]).unwrap())
}

fn rect() -> impl Strategy<Value = [f64; 4]> {
    (0.0..200.0, 0.0..200.0, 5.0..80.0, 5.0..80.0).prop_map(|(x, y, w, h)| [x, y, x + w, y + h])
}

fn det(bbox: [f64; 4], score: f64, source: usize) -> Detection {
    Detection { bbox, score, category_id: WINDOW_CATEGORY, source_id: format!("view{source}") }
}

fn frame(normal: UnitVec3, d: f64, pixel_size: f64) -> FacadeFrame {
    let plane = Plane::new(normal, d);
    FacadeFrame { plane, basis: plane_basis(&plane), grid_origin2d: (-3.0, 0.5), pixel_size }
}

fn pano_record(id: &str, pose: PanoPose, planes: Vec<RawPlane>) -> PanoRecord {
    PanoRecord {
        pano_id: id.into(),
        image_path: Default::default(),
        width: 64,
        height: 32,
        pose,
        capture_date: chrono::NaiveDate::from_ymd_opt(2024, 6, 1).unwrap(),
        neighbor_ids: Vec::new(),
        planes,
        transform: pose.to_world(),
        assoc: PlaneAssocMatrix::filled(8, 4, -1),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pano_plane_round_trip(
        x in 0.0..4096.0f64, y in 10.0..2038.0f64, heading in 0.0..360.0f64,
        n in unit_xy(), d in -20.0..20.0f64,
    ) {
        let pose = PanoPose::new(Vec3::new(1.0, -2.0, 2.5), heading, 0.0, 0.0).unwrap();
        let plane = Plane::new(n, d);
        let dir = pixel_to_dir(x, y, 4096, 2048, &pose).unwrap();
        if let Ok(p) = ray_plane_intersect(pose.position, dir, &plane) {
            prop_assert!(plane.signed_distance(p).abs() < 1e-6);
            let (u, v) = project_world_to_pano(p, &pose, 4096, 2048).unwrap();
            let du = (u - x).abs().min(4096.0 - (u - x).abs());
            prop_assert!(du.hypot(v - y) < 1e-6);
        }
    }

    #[test]
    fn plane_distance_is_a_premetric(a in unit_xy(), b in unit_xy(), da in -10.0..10.0f64, db in -10.0..10.0f64) {
        let (p, q) = (Plane::new(a, da), Plane::new(b, db));
        prop_assert!(plane_distance(&p, &q) >= -1e-15);
        prop_assert!((plane_distance(&p, &q) - plane_distance(&q, &p)).abs() < 1e-15);
        prop_assert!(plane_distance(&p, &p).abs() < 1e-15);
    }

    #[test]
    fn clustering_is_permutation_invariant(
        walls in proptest::collection::vec((unit_xy(), -15.0..15.0f64), 1..4),
        headings in proptest::collection::vec(0.0..360.0f64, 3),
        shuffle_seed in any::<u64>(),
    ) {
        use rand::{seq::SliceRandom, SeedableRng};
        let panos: Vec<PanoRecord> = headings
            .iter()
            .enumerate()
            .map(|(k, &h)| {
                let pose = PanoPose::new(Vec3::new(k as f64, -(k as f64), 2.0), h, 0.0, 0.0).unwrap();
                let to_local = pose.to_world().inverse();
                let planes = walls
                    .iter()
                    .map(|(n, d)| RawPlane::from(facade3d::geometry::transform_plane(&Plane::new(*n, *d), &to_local)))
                    .collect();
                pano_record(&format!("p{k}"), pose, planes)
            })
            .collect();
        let part = |ps: &[PanoRecord]| -> BTreeSet<BTreeSet<SegmentRef>> {
            cluster_planes(ps, 1e-5).unwrap().into_iter().map(|c| c.members.into_iter().collect()).collect()
        };
        let mut shuffled = panos.clone();
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(shuffle_seed));
        prop_assert_eq!(part(&panos), part(&shuffled));
    }

    #[test]
    fn volume_corners_and_constant_oracle(w in 1.0..4.0f64, h in 1.0..3.0f64, n in unit_xy()) {
        let b = plane_basis(&Plane::new(n, 0.0));
        let v0 = Vec3::new(0.3, -0.2, 0.1);
        let corners = [v0, v0 + b.u.vec() * w, v0 + b.v.vec() * h];
        let s = 0.05;
        prop_assert!(volume_point(&corners, s, 0.0, 0.0).unwrap().distance(v0) < 1e-12);
        let width = (w / s).round();
        let far = volume_point(&corners, s, w / s, 0.0).unwrap();
        prop_assert!(far.distance(corners[1]) < 1e-9);
        let img = ortho_from_volume(&ConstantOracle(Rgba([9, 8, 7, 255])), &corners, s, 4, "c").unwrap();
        prop_assert_eq!(f64::from(img.width()), width);
        prop_assert!(img.pixels.pixels().all(|p| *p == Rgba([9, 8, 7, 255])));
    }

    #[test]
    fn fusion_is_order_invariant_and_inside_hull(
        boxes in proptest::collection::vec((rect(), 0.0..1.0f64, 0usize..4), 0..12),
        rot in 0usize..12,
    ) {
        let cfg = FusionConfig::default();
        let dets: Vec<Detection> = boxes.iter().map(|(b, s, v)| det(*b, *s, *v)).collect();
        let fused = fuse_multiview(&dets, &cfg);
        let mut rotated = dets.clone();
        rotated.reverse();
        if !rotated.is_empty() {
            let k = rot % rotated.len();
            rotated.rotate_left(k);
        }
        prop_assert_eq!(&fused, &fuse_multiview(&rotated, &cfg));
        let lo = |k: usize| dets.iter().map(|d| d.bbox[k]).fold(f64::INFINITY, f64::min);
        let hi = |k: usize| dets.iter().map(|d| d.bbox[k]).fold(f64::NEG_INFINITY, f64::max);
        for f in &fused {
            prop_assert!((0..4).all(|k| f.bbox[k] >= lo(k) && f.bbox[k] <= hi(k)));
            prop_assert!(f.score >= cfg.tau_score2);
        }
    }

    #[test]
    fn duplicating_views_keeps_fused_boxes(boxes in proptest::collection::vec((rect(), 0.2..1.0f64, 0usize..3), 1..8)) {
        let cfg = FusionConfig::default();
        let dets: Vec<Detection> = boxes.iter().map(|(b, s, v)| det(*b, *s, *v)).collect();
        let mut doubled = dets.clone();
        doubled.extend(boxes.iter().map(|(b, s, v)| det(*b, *s, v + 10)));
        let a = fuse_multiview(&dets, &cfg);
        let b = fuse_multiview(&doubled, &cfg);
        prop_assert!(b.len() >= a.len());
        for f in &a {
            prop_assert!(b.iter().any(|g| g.bbox == f.bbox));
        }
    }

    #[test]
    fn components_match_pairwise_closure(boxes in proptest::collection::vec(rect(), 0..10)) {
        let n = boxes.len();
        let mut reach = vec![vec![false; n]; n];
        for i in 0..n {
            for j in 0..n {
                reach[i][j] = i == j || iou(&boxes[i], &boxes[j]) > 0.3;
            }
        }
        for k in 0..n {
            for i in 0..n {
                for j in 0..n {
                    if reach[i][k] && reach[k][j] {
                        reach[i][j] = true;
                    }
                }
            }
        }
        let comps = iou_components(&boxes, 0.3);
        let mut label = vec![usize::MAX; n];
        for (c, g) in comps.iter().enumerate() {
            for &i in g {
                label[i] = c;
            }
        }
        for i in 0..n {
            for j in 0..n {
                prop_assert_eq!(reach[i][j], label[i] == label[j]);
            }
        }
    }

    #[test]
    fn union_area_matches_raster(rects in proptest::collection::vec((0u8..20, 0u8..20, 1u8..8, 1u8..8), 0..6)) {
        let rs: Vec<[f64; 4]> = rects
            .iter()
            .map(|&(x, y, w, h)| [f64::from(x), f64::from(y), f64::from(x + w), f64::from(y + h)])
            .collect();
        let mut cells = 0;
        for cy in 0..30 {
            for cx in 0..30 {
                let (px, py) = (f64::from(cx) + 0.5, f64::from(cy) + 0.5);
                if rs.iter().any(|r| px > r[0] && px < r[2] && py > r[1] && py < r[3]) {
                    cells += 1;
                }
            }
        }
        prop_assert!((union_area(&rs) - f64::from(cells)).abs() < 1e-9);
    }

    #[test]
    fn wwr_is_scale_free_and_model_round_trips(
        n in unit_xy(), d in -5.0..5.0f64, s in 0.01..0.05f64, k in 1.0..4.0f64,
        wins in proptest::collection::vec((10.0..150.0f64, 10.0..150.0f64, 5.0..40.0f64, 5.0..40.0f64), 0..5),
    ) {
        let fb = FacadeBox { bbox: [0.0, 0.0, 200.0, 200.0], score: 1.0 };
        let dets: Vec<Detection> = wins.iter().map(|&(x, y, w, h)| det([x, y, x + w, y + h], 0.9, 0)).collect();
        let a = FacadeModel::build("f", frame(n, d, s), fb, &dets).unwrap();
        let scaled_box = FacadeBox { bbox: fb.bbox.map(|v| v * k), score: 1.0 };
        let scaled: Vec<Detection> = dets.iter().map(|x| det(x.bbox.map(|v| v * k), 0.9, 0)).collect();
        let b = FacadeModel::build("f", frame(n, d, s / k), scaled_box, &scaled).unwrap();
        prop_assert!((a.wwr - b.wwr).abs() < 1e-9);
        prop_assert!((0.0..=1.0).contains(&a.wwr));
        for w in &a.windows {
            prop_assert!(w.corners.iter().all(|c| a.plane.signed_distance(*c).abs() < 1e-6));
            prop_assert!((w.area_m2 - w.width_m * w.height_m).abs() < 1e-9);
        }
        let m = assemble_model("b", "local", vec![a], None).unwrap();
        prop_assert_eq!(ThermalModel::from_json(&m.to_json()).unwrap(), m);
    }

    #[test]
    fn matching_is_one_to_one_and_scale_free(
        pred in proptest::collection::vec(rect(), 0..6), gt in proptest::collection::vec(rect(), 0..6), k in 0.1..10.0f64,
    ) {
        let scores = vec![0.5; pred.len()];
        let ms = match_windows(&pred, &scores, &gt, MATCH_IOU);
        let preds: BTreeSet<usize> = ms.pairs.iter().map(|p| p.0).collect();
        let gts: BTreeSet<usize> = ms.pairs.iter().map(|p| p.1).collect();
        prop_assert_eq!(preds.len(), ms.pairs.len());
        prop_assert_eq!(gts.len(), ms.pairs.len());
        prop_assert!(ms.pairs.iter().all(|p| p.2 > MATCH_IOU));
        prop_assert_eq!(ms.pairs.len() + ms.unmatched_pred.len(), pred.len());
        prop_assert_eq!(ms.pairs.len() + ms.unmatched_gt.len(), gt.len());
        let sc = |v: &[[f64; 4]]| v.iter().map(|b| b.map(|x| x * k)).collect::<Vec<_>>();
        let scaled = match_windows(&sc(&pred), &scores, &sc(&gt), MATCH_IOU);
        prop_assert_eq!(
            ms.pairs.iter().map(|p| (p.0, p.1)).collect::<Vec<_>>(),
            scaled.pairs.iter().map(|p| (p.0, p.1)).collect::<Vec<_>>()
        );
        let f = f1_from_counts(ms.tp(), ms.fp(), ms.fn_());
        if let Some(v) = f.f1 {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn wwr_variants_agree_without_missing(pairs in proptest::collection::vec((0.0..0.6f64, 0.0..0.6f64), 1..6)) {
        let input: Vec<(Option<f64>, f64)> = pairs.iter().map(|&(p, g)| (Some(p), g)).collect();
        let w = wwr_errors(&input);
        prop_assert_eq!(w.standard, w.total);
        prop_assert_eq!(w.total, w.imputed);
    }

    #[test]
    fn axis_classification_partitions(
        lines in proptest::collection::vec((0.0..100.0f64, 0.0..100.0f64, 0.0..180.0f64, 1.0..50.0f64), 0..20),
    ) {
        let segs: Vec<LineSegment> = lines
            .iter()
            .map(|&(x, y, a, l)| {
                let r = a.to_radians();
                LineSegment::new((x, y), (x + l * r.cos(), y + l * r.sin()))
            })
            .collect();
        let (v, h, o) = classify_axis_lines(&segs, 10.0);
        prop_assert_eq!(v.len() + h.len() + o.len(), segs.len());
    }

    #[test]
    fn alignment_recovers_scale_and_shift(
        s in 0.95..1.05f64, tx in -30.0..30.0f64, ty in -30.0..30.0f64, seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let corrs: Vec<Correspondence> = (0..60)
            .map(|i| {
                let src = (rng.gen_range(0.0..500.0), rng.gen_range(0.0..300.0));
                let reference = if i % 5 == 0 {
                    (rng.gen_range(0.0..500.0), rng.gen_range(0.0..300.0))
                } else {
                    (s * src.0 + tx, s * src.1 + ty)
                };
                Correspondence { src, reference, score: 1.0 }
            })
            .collect();
        let (a, ratio) = estimate_alignment(&corrs, &AlignConfig::default(), seed).unwrap();
        prop_assert!(ratio >= 0.75);
        prop_assert!((a.scale - s).abs() < 5e-4 && (a.tx - tx).abs() < 0.25 && (a.ty - ty).abs() < 0.25);
    }
}
