use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use facade3d::pipeline::{self, PipelineConfig, PipelineError, EXIT_USAGE};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Stage {
    Synth,
    Ingest,
    Cluster,
    Ortho,
    Align,
    Facade,
    Fuse,
    Model,
    Eval,
    Run,
}

/// Facade parsing pipeline: panoramas to facade orthos, windows and a
/// thermal-model JSON.
#[derive(Debug, Parser)]
#[command(name = "facade3d", version)]
struct Cli {
    #[arg(value_enum)]
    stage: Stage,
    /// Pipeline config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Artifact directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn run(cli: &Cli) -> Result<(), PipelineError> {
    let mut cfg = PipelineConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    cfg.validate()?;
    let out = cli.out.as_path();
    if !matches!(cli.stage, Stage::Run) {
        std::fs::create_dir_all(out).map_err(|e| PipelineError::Io { path: out.to_path_buf(), message: e.to_string() })?;
    }
    match cli.stage {
        Stage::Synth => pipeline::stage_synth(&cfg, out).map(|p| println!("{}", p.display())),
        Stage::Ingest => pipeline::stage_ingest(&cfg, out).map(|a| println!("{} panoramas", a.pano_ids.len())),
        Stage::Cluster => pipeline::stage_cluster(&cfg, out).map(|c| println!("{} clusters", c.len())),
        Stage::Ortho => pipeline::stage_ortho(&cfg, out).map(|s| println!("{} image sets", s.len())),
        Stage::Align => pipeline::stage_align(&cfg, out).map(|a| println!("{} aligned sets", a.sets.len())),
        Stage::Facade => pipeline::stage_facade(&cfg, out).map(|a| println!("{} facades", a.facades.len())),
        Stage::Fuse => pipeline::stage_fuse(&cfg, out).map(|f| println!("{} facades fused", f.len())),
        Stage::Model => pipeline::stage_model(&cfg, out).map(|_| println!("{}", out.join(pipeline::MODEL).display())),
        Stage::Eval => pipeline::stage_eval(&cfg, out).map(|r| println!("{}", r.to_csv().trim_end())),
        Stage::Run => pipeline::run_pipeline(&cfg, out).map(|r| {
            for f in &r.model.facades {
                println!("{} wwr {:.4} windows {}", f.facade_id, f.wwr, f.windows.len());
            }
            if let Some(rep) = r.report {
                println!("{}", rep.to_csv().trim_end());
            }
        }),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_USAGE as u8),
            };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
