//! Finds the facade rectangle in aligned orthos from line segments seen
//! consistently across views.

use facade3d::facade::{build_reliable_set, detect_line_segments, ransac_facade, FacadeConfig};
use facade3d::geometry::{PanoPose, Vec3};
use facade3d::ortho::{ortho_from_pano, ExtentMode, OrthoConfig};
use facade3d::synth::{generate_building, render_record, SynthConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = SynthConfig { seed: 11, n_facades: 1, ..SynthConfig::default() };
    let (building, _) = generate_building(&cfg)?;
    let wall = &building.facades[0];
    let [u0, _, u1, _] = wall.extent;
    let ocfg = OrthoConfig { extent: ExtentMode::MinMax, ..OrthoConfig::default() };
    let mut views = Vec::new();
    for (k, lateral) in [-5.0, 0.0, 5.0].into_iter().enumerate() {
        let p = wall.basis.to_world((0.5 * (u0 + u1) + lateral, 0.0)) + wall.plane.normal.vec() * 12.0;
        let pose = PanoPose::at(Vec3::new(p.x, p.y, cfg.camera_height_m));
        let pano = render_record(&building, &pose, &format!("view{k}"), &cfg, 0)?;
        views.push(ortho_from_pano(&pano, &wall.plane, &wall.corners(), &ocfg)?);
    }
    let fcfg = FacadeConfig::default();
    let lines: Vec<_> = views.iter().map(|v| detect_line_segments(&v.pixels, &fcfg)).collect();
    let reliable = build_reliable_set(&lines, &fcfg);
    let found = ransac_facade(&lines, &reliable, &fcfg, 0)?;
    let (x0, y0) = views[0].world_to_pixel(wall.basis.to_world((wall.extent[0], wall.extent[1])));
    let (x1, y1) = views[0].world_to_pixel(wall.basis.to_world((wall.extent[2], wall.extent[3])));
    println!("lines per view {:?}, reliable {}", lines.iter().map(Vec::len).collect::<Vec<_>>(), reliable.len());
    println!("found {:?}", found.bbox.map(|v| (v * 10.0).round() / 10.0));
    println!("truth {:?}", [x0, y0, x1, y1].map(|v| (v * 10.0).round() / 10.0));
    Ok(())
}
