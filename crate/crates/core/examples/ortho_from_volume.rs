//! Renders facade orthos by querying a ray-color oracle, here the analytic
//! synthetic building.

use facade3d::ortho::ortho_from_volume;
use facade3d::synth::{generate_building, oracle_window_detector, SynthConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (building, gt) = generate_building(&SynthConfig { seed: 5, ..SynthConfig::default() })?;
    for (f, g) in building.facades.iter().zip(&gt.facades) {
        let [bl, br, _, tl] = f.corners();
        let img = ortho_from_volume(&building, &[bl, br, tl], 0.02, 16, &f.facade_id)?;
        let windows = oracle_window_detector(&img, building.window_color, &building.other_colors(), 50);
        let px: f64 = windows.iter().map(|d| d.area()).sum();
        let wwr = px / f64::from(img.width() * img.height());
        println!("{} {}x{} px, {} windows, wwr {:.3} (truth {:.3})", f.facade_id, img.width(), img.height(), windows.len(), wwr, g.wwr);
    }
    Ok(())
}
