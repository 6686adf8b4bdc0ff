//! Full street-view pipeline on a synthetic building, from panoramas to the
//! evaluated thermal model.
//!
//! cargo run --release --example run_pipeline -- [out_dir] [seed]

use facade3d::pipeline::{run_pipeline, PipelineConfig};
use facade3d::synth::SynthConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let out = args.next().map_or_else(|| std::env::temp_dir().join("facade3d_run"), Into::into);
    let seed = args.next().map_or(Ok(1), |s| s.parse())?;
    let cfg = PipelineConfig { seed, synth: Some(SynthConfig { seed, n_panos: 6, ..SynthConfig::default() }), ..PipelineConfig::default() };
    let run = run_pipeline(&cfg, &out)?;
    for f in &run.model.facades {
        println!("{} {:.2} x {:.2} m, {} windows, wwr {:.4}", f.facade_id, f.width_m, f.height_m, f.windows.len(), f.wwr);
    }
    if let Some(r) = run.report {
        print!("{}", r.to_csv());
    }
    println!("artifacts in {}", out.display());
    Ok(())
}
