//! Turns window boxes on a facade grid into metric 3D apertures and writes
//! the thermal-model JSON.

use facade3d::facade::FacadeBox;
use facade3d::fusion::{Detection, WINDOW_CATEGORY};
use facade3d::geometry::{plane_basis, Plane, UnitVec3};
use facade3d::model::{assemble_model, FacadeFrame, FacadeModel};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let plane = Plane::new(UnitVec3::Y, 8.0);
    let frame = FacadeFrame { plane, basis: plane_basis(&plane), grid_origin2d: (-5.0, 0.0), pixel_size: 0.02 };
    let facade = FacadeBox { bbox: [0.0, 0.0, 500.0, 400.0], score: 1.0 };
    let windows: Vec<Detection> = (0..4)
        .map(|i| {
            let x = 40.0 + 115.0 * f64::from(i);
            Detection { bbox: [x, 120.0, x + 60.0, 195.0], score: 0.9, category_id: WINDOW_CATEGORY, source_id: "fused".into() }
        })
        .collect();
    let f = FacadeModel::build("south", frame, facade, &windows)?;
    println!("{} {:.1} x {:.1} m, {} windows, wwr {:.4}", f.facade_id, f.width_m, f.height_m, f.windows.len(), f.wwr);
    let model = assemble_model("example", "local ENU, meters", vec![f], None)?;
    println!("{}", model.to_json());
    Ok(())
}
