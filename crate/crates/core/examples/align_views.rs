//! Registers orthos of one wall taken from different panoramas.

use facade3d::align::{align_group, AlignConfig};
use facade3d::geometry::{PanoPose, Vec3};
use facade3d::ortho::{ortho_from_pano, OrthoConfig};
use facade3d::synth::{generate_building, render_record, SynthConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = SynthConfig { seed: 8, n_facades: 1, ..SynthConfig::default() };
    let (building, _) = generate_building(&cfg)?;
    let wall = &building.facades[0];
    let [u0, _, u1, _] = wall.extent;
    let mut views = Vec::new();
    for (k, lateral) in [-4.0, 0.0, 4.0].into_iter().enumerate() {
        let p = wall.basis.to_world((0.5 * (u0 + u1) + lateral, 0.0)) + wall.plane.normal.vec() * 12.0;
        let pose = PanoPose::at(Vec3::new(p.x, p.y, cfg.camera_height_m));
        let pano = render_record(&building, &pose, &format!("view{k}"), &cfg, k as u64)?;
        // Each view measures the wall slightly differently, so the grids disagree.
        let corners: Vec<Vec3> = wall.corners().iter().map(|c| *c + wall.basis.u.vec() * (0.1 * k as f64)).collect();
        views.push(ortho_from_pano(&pano, &wall.plane, &corners, &OrthoConfig::default())?);
    }
    let group = align_group(&views, &AlignConfig::default(), 7);
    for r in &group.report {
        println!("{:?}", r);
    }
    Ok(())
}
