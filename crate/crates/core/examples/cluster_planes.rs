//! Groups the plane segments of a synthetic panorama ring into facades.

use facade3d::clustering::{cluster_planes, DEFAULT_THRESHOLD};
use facade3d::dataset::DatasetManifest;
use facade3d::synth::{write_dataset, SynthConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join("facade3d_cluster");
    let cfg = SynthConfig { seed: 3, n_facades: 5, width: 1024, height: 512, ..SynthConfig::default() };
    let out = write_dataset(&cfg, &dir)?;
    let manifest = DatasetManifest::load(&out.manifest)?;
    let clusters = cluster_planes(&manifest.panos, DEFAULT_THRESHOLD)?;
    for c in &clusters {
        let n = c.world_plane.normal;
        let members: Vec<String> = c.members.iter().map(|m| format!("{}:{}", m.pano_id, m.plane_idx)).collect();
        println!("cluster {} n=({:.3}, {:.3}) d={:.3} [{}]", c.cluster_id, n.x(), n.y(), c.world_plane.d, members.join(" "));
    }
    Ok(())
}
