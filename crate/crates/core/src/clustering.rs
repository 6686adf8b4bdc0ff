//! Groups plane segments seen from several panoramas into physical facades.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{PanoRecord, RawPlane};
use crate::geometry::{transform_plane, Plane, Vec3};

pub const DEFAULT_THRESHOLD: f64 = 1e-5;
pub const NORMAL_WEIGHT: f64 = 1.0;
pub const OFFSET_WEIGHT: f64 = 0.01;
/// Planes with `|n_z|` above this are treated as horizontal.
pub const HORIZONTAL_NZ: f64 = 0.9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClusterError {
    #[error("no facade candidate planes in the input")]
    EmptyClusterSet,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SegmentRef {
    pub pano_id: String,
    pub plane_idx: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaneCluster {
    pub cluster_id: usize,
    pub members: Vec<SegmentRef>,
    pub world_plane: Plane,
}

pub fn plane_distance(p1: &Plane, p2: &Plane) -> f64 {
    NORMAL_WEIGHT * (1.0 - p1.normal.dot(p2.normal)) + OFFSET_WEIGHT * (p1.d - p2.d).abs()
}

pub fn is_facade_candidate(p: &RawPlane) -> bool {
    match p.normalized() {
        Some(plane) => plane.normal.z().abs() <= HORIZONTAL_NZ,
        None => false,
    }
}

/// Facade candidate segments of `panos` with their world planes, sorted by
/// segment reference.
pub fn world_candidates(panos: &[PanoRecord]) -> Vec<(SegmentRef, Plane)> {
    let mut out: Vec<(SegmentRef, Plane)> = panos
        .iter()
        .flat_map(|rec| {
            rec.planes.iter().enumerate().filter(|(_, p)| is_facade_candidate(p)).filter_map(move |(i, p)| {
                let local = p.normalized()?;
                Some((
                    SegmentRef { pano_id: rec.pano_id.clone(), plane_idx: i },
                    transform_plane(&local, &rec.transform),
                ))
            })
        })
        .collect();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

/// Average-linkage agglomerative clustering over a symmetric distance matrix.
///
/// Clusters are merged while the smallest inter-cluster distance is at most
/// `threshold`. Ties go to the lexicographically smallest cluster pair.
/// Returns groups of item indices, each sorted, ordered by first item.
pub fn average_linkage(dist: &[Vec<f64>], threshold: f64) -> Vec<Vec<usize>> {
    let n = dist.len();
    let mut d: Vec<Vec<f64>> = dist.to_vec();
    let mut groups: Vec<Option<Vec<usize>>> = (0..n).map(|i| Some(vec![i])).collect();
    loop {
        let mut best: Option<(usize, usize, f64)> = None;
        for i in 0..n {
            if groups[i].is_none() {
                continue;
            }
            for j in i + 1..n {
                if groups[j].is_none() {
                    continue;
                }
                if best.map_or(true, |(_, _, b)| d[i][j] < b) {
                    best = Some((i, j, d[i][j]));
                }
            }
        }
        let Some((i, j, dij)) = best else { break };
        if dij > threshold {
            break;
        }
        let ni = groups[i].as_ref().map_or(0, Vec::len) as f64;
        let nj = groups[j].as_ref().map_or(0, Vec::len) as f64;
        for k in 0..n {
            if k == i || k == j || groups[k].is_none() {
                continue;
            }
            let merged = (ni * d[i][k] + nj * d[j][k]) / (ni + nj);
            d[i][k] = merged;
            d[k][i] = merged;
        }
        let absorbed = groups[j].take().unwrap_or_default();
        if let Some(g) = groups[i].as_mut() {
            g.extend(absorbed);
            g.sort_unstable();
        }
    }
    let mut out: Vec<Vec<usize>> = groups.into_iter().flatten().collect();
    out.sort_by_key(|g| g[0]);
    out
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Median offset and normalized mean normal of the member planes.
pub fn representative_plane(planes: &[Plane]) -> Plane {
    let mut sum = Vec3::ZERO;
    for p in planes {
        sum += p.normal.vec();
    }
    let normal = sum.normalize().unwrap_or(planes[0].normal);
    let mut ds: Vec<f64> = planes.iter().map(|p| p.d).collect();
    Plane::new(normal, median(&mut ds))
}

pub fn cluster_planes(panos: &[PanoRecord], threshold: f64) -> Result<Vec<PlaneCluster>, ClusterError> {
    let candidates = world_candidates(panos);
    if candidates.is_empty() {
        return Err(ClusterError::EmptyClusterSet);
    }
    let dist: Vec<Vec<f64>> = candidates
        .par_iter()
        .map(|(_, a)| candidates.iter().map(|(_, b)| plane_distance(a, b)).collect())
        .collect();
    let groups = average_linkage(&dist, threshold);
    Ok(groups
        .into_iter()
        .enumerate()
        .map(|(cluster_id, g)| {
            let planes: Vec<Plane> = g.iter().map(|&i| candidates[i].1).collect();
            PlaneCluster {
                cluster_id,
                members: g.iter().map(|&i| candidates[i].0.clone()).collect(),
                world_plane: representative_plane(&planes),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{PlaneAssocMatrix, ASSOC_COLS, ASSOC_ROWS};
    use crate::geometry::{PanoPose, RigidTransform, UnitVec3};
    use std::path::PathBuf;

    fn plane(n: [f64; 3], d: f64) -> Plane {
        Plane::new(Vec3::from(n).normalize().unwrap(), d)
    }

    #[test]
    fn distance_examples() {
        let a = plane([0.0, 1.0, 0.0], 5.0);
        assert!((plane_distance(&a, &a) - 0.0).abs() <= 1e-12);
        assert!((plane_distance(&a, &plane([0.0, 1.0, 0.0], 6.0)) - 0.01).abs() <= 1e-12);
        assert!((plane_distance(&a, &plane([1.0, 0.0, 0.0], 5.0)) - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn candidate_filter() {
        assert!(!is_facade_candidate(&RawPlane::from([0.0, 0.0, 1.0, 0.0])));
        assert!(is_facade_candidate(&RawPlane::from([0.0, 1.0, 0.0, 4.0])));
        assert!(!is_facade_candidate(&RawPlane::from([0.0, 0.0, 0.0, 0.0])));
        // Exactly at the cutoff still counts as a wall.
        let s = (1.0f64 - 0.81).sqrt();
        assert!(is_facade_candidate(&RawPlane::from([0.0, s, 0.9, 1.0])));
    }

    fn pano(id: &str, planes: &[[f64; 4]]) -> PanoRecord {
        PanoRecord {
            pano_id: id.into(),
            image_path: PathBuf::new(),
            width: 1024,
            height: 512,
            pose: PanoPose::at(Vec3::ZERO),
            capture_date: "2023-01-01".parse().unwrap(),
            neighbor_ids: vec![],
            planes: planes.iter().map(|&p| RawPlane::from(p)).collect(),
            transform: RigidTransform::IDENTITY,
            assoc: PlaneAssocMatrix::filled(ASSOC_COLS, ASSOC_ROWS, -1),
        }
    }

    #[test]
    fn threshold_examples() {
        let merged = cluster_planes(
            &[pano("a", &[[0.0, 1.0, 0.0, 5.0]]), pano("b", &[[0.0, 1.0, 0.0, 5.0009]])],
            DEFAULT_THRESHOLD,
        )
        .unwrap();
        assert_eq!(merged.len(), 1);
        assert_eq!(merged[0].members.len(), 2);
        let split = cluster_planes(
            &[pano("a", &[[0.0, 1.0, 0.0, 5.0]]), pano("b", &[[0.0, 1.0, 0.0, 5.002]])],
            DEFAULT_THRESHOLD,
        )
        .unwrap();
        assert_eq!(split.len(), 2);
        let single = cluster_planes(&[pano("a", &[[0.0, 1.0, 0.0, 5.0]])], DEFAULT_THRESHOLD).unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!(single[0].world_plane, Plane::new(UnitVec3::Y, 5.0));
    }

    #[test]
    fn no_candidates_is_an_error() {
        let r = cluster_planes(&[pano("a", &[[0.0, 0.0, 1.0, 0.0], [0.0; 4]])], DEFAULT_THRESHOLD);
        assert_eq!(r, Err(ClusterError::EmptyClusterSet));
    }

    #[test]
    fn representative_uses_median_offset() {
        let planes = [plane([0.0, 1.0, 0.0], 5.0), plane([0.0, 1.0, 0.0], 5.1), plane([0.0, 1.0, 0.0], 9.0)];
        let r = representative_plane(&planes);
        assert_eq!(r.d, 5.1);
        assert!((r.normal.y() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn linkage_uses_average_not_single() {
        // 0-1 close, 2 close to 1 only: average(0,2)=0.3, (1,2)=0.1 -> avg 0.2 > 0.15.
        let d = vec![vec![0.0, 0.1, 0.3], vec![0.1, 0.0, 0.1], vec![0.3, 0.1, 0.0]];
        assert_eq!(average_linkage(&d, 0.15), vec![vec![0, 1], vec![2]]);
        assert_eq!(average_linkage(&d, 0.2), vec![vec![0, 1, 2]]);
    }
}
