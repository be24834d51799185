use std::panic;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use uhimap::ortho::DEFAULT_GSD;
use uhimap::par::Execution;
use uhimap::pipeline::{
    run_georef, run_ortho, run_pipeline, run_raycast, run_refine, run_simulate, BandSelection, GeorefArgs, OrthoArgs, PipelineArgs,
    PipelineError, RaycastArgs, RefineArgs, SimulateArgs,
};

/// Geo-referenced hyperspectral reconstruction from push-broom surveys.
#[derive(Debug, Parser)]
#[command(name = "uhimap", version)]
struct Cli {
    /// Run every stage on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Scale and geo-reference a SLAM map with INS fixes.
    Georef(GeorefCmd),
    /// Raycast every scanline onto the mesh into a hyperspectral cloud.
    Raycast(RaycastCmd),
    /// Rasterize a cloud or a colored mesh into a north-aligned ortho-image.
    Ortho(OrthoCmd),
    /// Refine the RGB-to-scanner transform from ortho-image matches.
    Refine(RefineCmd),
    /// Write a synthetic survey bundle and its ground truth.
    Simulate(SimulateCmd),
    /// Run every stage on a survey bundle.
    Pipeline(PipelineCmd),
}

#[derive(Debug, Args)]
struct GeorefCmd {
    #[arg(long)]
    map: PathBuf,
    #[arg(long)]
    fixes: PathBuf,
    #[arg(long)]
    out_traj: PathBuf,
    #[arg(long)]
    out_map: PathBuf,
    /// Largest fix-to-keyframe time gap, seconds.
    #[arg(long, default_value_t = 0.1)]
    max_dt: f64,
    /// Pixel sigma for every observation; the map's own sigmas when absent.
    #[arg(long)]
    pixel_sigma: Option<f64>,
    /// Seconds added to fix timestamps.
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    clock_offset: f64,
    /// NED origin as `lat,lon,alt`; the first fix when absent.
    #[arg(long, value_parser = parse_origin, allow_hyphen_values = true)]
    origin: Option<Origin>,
}

#[derive(Debug, Args)]
struct RaycastCmd {
    /// ENVI header of the cube; `.bil` and `.times` sit beside it.
    #[arg(long)]
    cube: PathBuf,
    #[arg(long)]
    traj: PathBuf,
    #[arg(long)]
    mesh: PathBuf,
    #[arg(long)]
    trel: PathBuf,
    #[arg(long)]
    out_cloud: PathBuf,
}

#[derive(Debug, Args)]
struct OrthoCmd {
    /// HSC1 cloud or PLY mesh.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value_t = DEFAULT_GSD, allow_hyphen_values = true)]
    gsd: f64,
    /// `rgb`, `all`, or comma-separated wavelengths in nanometers.
    #[arg(long, default_value = "rgb", value_parser = parse_bands)]
    bands: BandSelection,
    /// Reuse the grid of an existing ortho header.
    #[arg(long)]
    grid_from: Option<PathBuf>,
    /// Output ENVI header; `.bil` and `.wld` sit beside it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct RefineCmd {
    #[arg(long)]
    rgb_ortho: PathBuf,
    #[arg(long)]
    hs_ortho: PathBuf,
    #[arg(long)]
    cube: PathBuf,
    #[arg(long)]
    traj: PathBuf,
    #[arg(long)]
    trel_init: PathBuf,
    #[arg(long)]
    out_trel: PathBuf,
    /// Also write the lifted correspondences.
    #[arg(long)]
    export_matches: Option<PathBuf>,
    /// Hyperspectral channel matched against RGB luminance, nanometers.
    #[arg(long, default_value_t = 550.0)]
    match_nm: f64,
}

#[derive(Debug, Args)]
struct SimulateCmd {
    /// TOML simulator configuration; built-in defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct PipelineCmd {
    /// Bundle manifest (`bundle.toml`).
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = DEFAULT_GSD, allow_hyphen_values = true)]
    gsd: f64,
    #[arg(long, default_value_t = 0.1)]
    max_dt: f64,
    #[arg(long)]
    pixel_sigma: Option<f64>,
    #[arg(long, default_value = "rgb", value_parser = parse_bands)]
    bands: BandSelection,
    #[arg(long, default_value_t = 550.0)]
    match_nm: f64,
}

#[derive(Debug, Clone, Copy)]
struct Origin([f64; 3]);

fn parse_origin(s: &str) -> Result<Origin, String> {
    let v: Vec<f64> = s.split(',').map(|x| x.trim().parse::<f64>().map_err(|e| e.to_string())).collect::<Result<_, _>>()?;
    match v[..] {
        [lat, lon, alt] => Ok(Origin([lat, lon, alt])),
        _ => Err("expected lat,lon,alt".into()),
    }
}

fn parse_bands(s: &str) -> Result<BandSelection, String> {
    match s {
        "rgb" => Ok(BandSelection::RgbProxy),
        "all" => Ok(BandSelection::All),
        _ => {
            let nm: Vec<f64> = s.split(',').map(|x| x.trim().parse::<f64>().map_err(|e| e.to_string())).collect::<Result<_, _>>()?;
            Ok(BandSelection::Nearest(nm))
        }
    }
}

fn run(cli: Cli) -> Result<String, PipelineError> {
    let exec = if cli.sequential { Execution::Sequential } else { Execution::Parallel };
    let report = match cli.command {
        Command::Georef(c) => run_georef(
            &GeorefArgs {
                map: c.map,
                fixes: c.fixes,
                out_traj: c.out_traj,
                out_map: c.out_map,
                max_dt: c.max_dt,
                pixel_sigma: c.pixel_sigma,
                clock_offset: c.clock_offset,
                origin: c.origin.map(|o| o.0),
            },
            exec,
        )?
        .render(),
        Command::Raycast(c) => run_raycast(
            &RaycastArgs {
                cube: c.cube,
                traj: c.traj,
                mesh: c.mesh,
                trel: c.trel,
                out_cloud: c.out_cloud,
            },
            exec,
        )?
        .render(),
        Command::Ortho(c) => run_ortho(
            &OrthoArgs {
                input: c.input,
                gsd: c.gsd,
                bands: c.bands,
                grid_from: c.grid_from,
                out: c.out,
            },
            exec,
        )?
        .render(),
        Command::Refine(c) => run_refine(
            &RefineArgs {
                rgb_ortho: c.rgb_ortho,
                hs_ortho: c.hs_ortho,
                cube: c.cube,
                traj: c.traj,
                trel_init: c.trel_init,
                out_trel: c.out_trel,
                export_matches: c.export_matches,
                match_nm: c.match_nm,
            },
            exec,
        )?
        .render(),
        Command::Simulate(c) => run_simulate(
            &SimulateArgs {
                config: c.config,
                out_dir: c.out_dir,
                seed: c.seed,
            },
            exec,
        )?
        .render(),
        Command::Pipeline(c) => run_pipeline(
            &PipelineArgs {
                bundle: c.bundle,
                out_dir: c.out_dir,
                gsd: c.gsd,
                max_dt: c.max_dt,
                pixel_sigma: c.pixel_sigma,
                bands: c.bands,
                match_nm: c.match_nm,
            },
            exec,
        )?
        .render(),
    };
    Ok(report)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match panic::catch_unwind(|| run(cli)) {
        Ok(Ok(report)) => {
            print!("{report}");
            ExitCode::SUCCESS
        }
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
        Err(_) => {
            eprintln!("error: internal failure");
            ExitCode::from(4)
        }
    }
}
