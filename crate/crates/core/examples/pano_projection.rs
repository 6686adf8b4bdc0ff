//! Casts panorama pixels onto a wall plane and projects them back.

use facade3d::geometry::{pixel_to_dir, project_world_to_pano, ray_plane_intersect, PanoPose, Plane, UnitVec3, Vec3};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let pose = PanoPose::new(Vec3::new(0.0, 0.0, 2.5), 30.0, 0.0, 0.0)?;
    let wall = Plane::new(UnitVec3::Y, 10.0);
    let (w, h) = (4096, 2048);
    for (x, y) in [(2048.0, 1024.0), (2300.0, 900.0), (1800.0, 1200.0)] {
        let dir = pixel_to_dir(x, y, w, h, &pose)?;
        match ray_plane_intersect(pose.position, dir, &wall) {
            Ok(p) => {
                let (u, v) = project_world_to_pano(p, &pose, w, h)?;
                println!("pixel ({x}, {y}) -> ({:.3}, {:.3}, {:.3}) -> ({u:.6}, {v:.6})", p.x, p.y, p.z);
            }
            Err(e) => println!("pixel ({x}, {y}) misses the wall: {e}"),
        }
    }
    Ok(())
}
