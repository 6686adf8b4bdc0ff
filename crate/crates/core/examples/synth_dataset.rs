//! Writes a synthetic building, its panorama ring and ground truth.
//!
//! cargo run --release --example synth_dataset -- [out_dir] [seed]

use facade3d::synth::{write_dataset, SynthConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let dir = args.next().map_or_else(|| std::env::temp_dir().join("facade3d_synth"), Into::into);
    let seed = args.next().map_or(Ok(1), |s| s.parse())?;
    let cfg = SynthConfig { seed, n_panos: 6, ..SynthConfig::default() };
    let out = write_dataset(&cfg, &dir)?;
    let gt = facade3d::eval::GroundTruth::load(&out.ground_truth)?;
    println!("manifest {}", out.manifest.display());
    for f in &gt.facades {
        println!("{} windows {:2} wwr {:.3}", f.facade_id, f.windows.len(), f.wwr);
    }
    Ok(())
}
