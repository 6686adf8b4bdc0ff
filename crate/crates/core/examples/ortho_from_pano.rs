//! Rectifies a synthetic wall seen from one panorama into a true-to-scale
//! orthographic image.

use facade3d::geometry::{PanoPose, Vec3};
use facade3d::ortho::{ortho_from_pano, ExtentMode, OrthoConfig};
use facade3d::synth::{generate_building, render_record, SynthConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = SynthConfig { seed: 2, n_facades: 1, ..SynthConfig::default() };
    let (building, _) = generate_building(&cfg)?;
    let wall = &building.facades[0];
    let [u0, _, u1, _] = wall.extent;
    let front = wall.basis.to_world((0.5 * (u0 + u1), 0.0)) + wall.plane.normal.vec() * 12.0;
    let pose = PanoPose::at(Vec3::new(front.x, front.y, cfg.camera_height_m));
    let pano = render_record(&building, &pose, "front", &cfg, 0)?;
    let ocfg = OrthoConfig { extent: ExtentMode::MinMax, ..OrthoConfig::default() };
    let ortho = ortho_from_pano(&pano, &wall.plane, &wall.corners(), &ocfg)?;
    let dir = std::env::temp_dir().join("facade3d_ortho");
    std::fs::create_dir_all(&dir)?;
    let png = ortho.save(&dir, "front")?;
    println!(
        "{}x{} px at {} m/px for a {:.2} x {:.2} m wall -> {}",
        ortho.width(),
        ortho.height(),
        ortho.pixel_size,
        u1 - u0,
        wall.extent[3] - wall.extent[1],
        png.display()
    );
    Ok(())
}
