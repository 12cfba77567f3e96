//! `finsler`: runs one experiment from a TOML configuration and writes its
//! CSV/JSON outputs plus a `manifest.json` into the output directory.
//!
//! Exit codes: 0 success, 1 invalid configuration or input, 2 numerical failure.

mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde_json::json;
use sha2::{Digest, Sha256};

use finsler_core::FinslerError;

use crate::config::Config;

#[derive(Parser, Debug)]
#[command(name = "finsler", version, about = "Numerical experiments on simple Finsler metrics of the disc")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML configuration; defaults apply to every missing key.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, env = "FINSLER_OUT", default_value = "finsler-out")]
    out: PathBuf,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Multiplies every grid resolution.
    #[arg(long = "resolution-scale", global = true, default_value_t = 1.0)]
    resolution_scale: f64,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Flow and connect geodesics; writes traces.
    Geodesic,
    /// Boundary distance table.
    Bdist,
    /// Holmes-Thompson volume by every available route.
    Volume,
    /// Enveloping function and its validity checks.
    Envelope,
    /// Sinogram, distance variation and injectivity experiment.
    Raytransform,
    /// Randomized monotonicity trials.
    Monotonicity,
    /// Smoothness probe of the boundary-matching map.
    Psi,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Geodesic => "geodesic",
            Command::Bdist => "bdist",
            Command::Volume => "volume",
            Command::Envelope => "envelope",
            Command::Raytransform => "raytransform",
            Command::Monotonicity => "monotonicity",
            Command::Psi => "psi",
        }
    }
}

fn load_config(cli: &Cli) -> Result<Config, FinslerError> {
    let mut config = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| FinslerError::Io(format!("{}: {e}", path.display())))?;
            Config::parse(&text)?
        }
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    config.scale_resolution(cli.resolution_scale)?;
    config.validate()?;
    Ok(config)
}

fn write_outputs(dir: &Path, files: &[(String, Vec<u8>)]) -> Result<(), FinslerError> {
    for (name, bytes) in files {
        std::fs::write(dir.join(name), bytes)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let started = Instant::now();
    let config = match load_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 || rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            eprintln!("error: cannot use {n} worker threads");
            return ExitCode::from(1);
        }
    }
    if let Err(e) = std::fs::create_dir_all(&cli.out) {
        eprintln!("error: cannot create {}: {e}", cli.out.display());
        return ExitCode::from(1);
    }

    let result = match cli.command {
        Command::Geodesic => commands::geodesic(&config),
        Command::Bdist => commands::bdist(&config),
        Command::Volume => commands::volume(&config),
        Command::Envelope => commands::envelope(&config),
        Command::Raytransform => commands::raytransform(&config),
        Command::Monotonicity => commands::monotonicity(&config),
        Command::Psi => commands::psi(&config),
    };
    let canonical = serde_json::to_string(&config).expect("configuration serializes");
    let hash: String = Sha256::digest(canonical.as_bytes()).iter().map(|b| format!("{b:02x}")).collect();
    let (code, files, error) = match result {
        Ok(files) => match write_outputs(&cli.out, &files) {
            Ok(()) => (0, files, None),
            Err(e) => (1, Vec::new(), Some(e)),
        },
        Err(e) => (if e.is_validation() { 1 } else { 2 }, Vec::new(), Some(e)),
    };
    let manifest = json!({
        "tool": "finsler",
        "subcommand": cli.command.name(),
        "version": env!("CARGO_PKG_VERSION"),
        "config_sha256": hash,
        "seed": config.seed,
        "resolution_scale": cli.resolution_scale,
        "threads": rayon::current_num_threads(),
        "outputs": files.iter().map(|f| f.0.as_str()).collect::<Vec<_>>(),
        "status": match code { 0 => "ok", 1 => "invalid input", _ => "numerical failure" },
        "error": error.as_ref().map(|e| json!({ "message": e.to_string(), "residual": e.residual() })),
        "wall_time_seconds": started.elapsed().as_secs_f64(),
        "config": config,
    });
    let mut buf = Vec::new();
    if finsler_core::io::write_json(&mut buf, &manifest).is_err() || std::fs::write(cli.out.join("manifest.json"), buf).is_err() {
        eprintln!("error: cannot write the manifest");
        return ExitCode::from(1);
    }
    if let Some(e) = error {
        eprintln!("error: {e}");
    }
    ExitCode::from(code)
}
