//! File-to-file pipeline stages and their run reports.
//!
//! Every stage reads its inputs from disk and writes its outputs to disk, so
//! `run_pipeline` produces the same artifacts as running the stages one by one.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::Vector3;
use thiserror::Error;

use crate::cube::nearest_band;
use crate::geodesy::GeodesyError;
use crate::geom::GeomError;
use crate::georef::{georeference_full, umeyama_align, GeorefError, GeorefOptions};
use crate::io::{self, CubeFiles, IoError, OrthoFiles};
use crate::ortho::{rasterize_cloud, rasterize_mesh, Grid, OrthoError, OrthoImage, RasterOptions, DEFAULT_GSD};
use crate::par::Execution;
use crate::raycast::{build_hyper_cloud, Bvh, RaycastError};
use crate::refine::{
    lift_correspondences, match_orthos, refine_extrinsics, DetectOptions, MatchOptions, OrthoMatches, RefineError, RefineOptions,
};
use crate::sim::{simulate_survey, SimConfig, SimError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("InvalidArgument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Georef(#[from] GeorefError),
    #[error(transparent)]
    Raycast(#[from] RaycastError),
    #[error(transparent)]
    Ortho(#[from] OrthoError),
    #[error(transparent)]
    Refine(#[from] RefineError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Exit status of a failed run: 2 for bad input, 3 for numerical failure.
impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::InvalidArgument(_) | PipelineError::Io(_) | PipelineError::Sim(_) => 2,
            PipelineError::Georef(e) => match e {
                GeorefError::InvalidMap(_) | GeorefError::Geodesy(_) => 2,
                GeorefError::Geom(g) => geom_code(g),
                _ => 3,
            },
            PipelineError::Raycast(e) => raycast_code(e),
            PipelineError::Ortho(e) => match e {
                OrthoError::Raycast(r) => raycast_code(r),
                _ => 2,
            },
            PipelineError::Refine(e) => match e {
                RefineError::MissingProvenance | RefineError::GridMismatch => 2,
                RefineError::Geom(g) => geom_code(g),
                _ => 3,
            },
        }
    }
}

fn geom_code(e: &GeomError) -> i32 {
    match e {
        GeomError::InvalidIntrinsics(_) | GeomError::NonMonotonicTime(_) | GeomError::TooFewSamples(_) | GeomError::InvalidQuaternion => 2,
        _ => 3,
    }
}

fn raycast_code(e: &RaycastError) -> i32 {
    match e {
        RaycastError::EmptyOutput => 3,
        RaycastError::Geom(g) => geom_code(g),
        _ => 2,
    }
}

impl From<GeodesyError> for PipelineError {
    fn from(e: GeodesyError) -> Self {
        PipelineError::Georef(e.into())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Count(u64),
    Real(f64),
    Text(String),
}

impl std::fmt::Display for Value {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Value::Count(v) => write!(f, "{v}"),
            Value::Real(v) => f.write_str(&io::format_f64(*v)),
            Value::Text(v) => f.write_str(v),
        }
    }
}

/// Key-value record of one stage: inputs, outputs, counts and statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub stage: String,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub entries: Vec<(String, Value)>,
    /// Seconds; omitted from the rendering when `None`.
    pub wall_time: Option<f64>,
}

impl RunReport {
    fn new(stage: &str) -> Self {
        Self {
            stage: stage.into(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            entries: Vec::new(),
            wall_time: None,
        }
    }

    fn count(&mut self, key: &str, v: usize) {
        self.entries.push((key.into(), Value::Count(v as u64)));
    }

    fn real(&mut self, key: &str, v: f64) {
        self.entries.push((key.into(), Value::Real(v)));
    }

    fn text(&mut self, key: &str, v: impl Into<String>) {
        self.entries.push((key.into(), Value::Text(v.into())));
    }

    pub fn get(&self, key: &str) -> Option<&Value> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v)
    }

    pub fn real_value(&self, key: &str) -> Option<f64> {
        match self.get(key)? {
            Value::Real(v) => Some(*v),
            Value::Count(v) => Some(*v as f64),
            Value::Text(_) => None,
        }
    }

    pub fn render(&self) -> String {
        let mut s = format!("[{}]\n", self.stage);
        for p in &self.inputs {
            let _ = writeln!(s, "input = {}", p.display());
        }
        for p in &self.outputs {
            let _ = writeln!(s, "output = {}", p.display());
        }
        for (k, v) in &self.entries {
            let _ = writeln!(s, "{k} = {v}");
        }
        if let Some(t) = self.wall_time {
            let _ = writeln!(s, "wall_time_s = {t:.3}");
        }
        s
    }
}

/// Tracks files written by a stage and removes them unless committed.
struct Outputs {
    paths: Vec<PathBuf>,
    committed: bool,
}

impl Outputs {
    fn new() -> Self {
        Self {
            paths: Vec::new(),
            committed: false,
        }
    }

    fn add(&mut self, p: impl Into<PathBuf>) {
        self.paths.push(p.into());
    }

    fn commit(mut self) -> Vec<PathBuf> {
        self.committed = true;
        std::mem::take(&mut self.paths)
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if !self.committed {
            for p in &self.paths {
                let _ = std::fs::remove_file(p);
            }
        }
    }
}

fn ensure_parent(path: &Path) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|source| IoError::File {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    Ok(())
}

/// Path of the report written beside `output`.
pub fn report_path(output: &Path) -> PathBuf {
    let mut s = output.as_os_str().to_owned();
    s.push(".report");
    PathBuf::from(s)
}

/// Output paths relative to `dir` where possible.
fn relative_to(paths: &[PathBuf], dir: &Path) -> Vec<PathBuf> {
    paths.iter().map(|p| p.strip_prefix(dir).map_or_else(|_| p.clone(), Path::to_path_buf)).collect()
}

/// Writes the report beside the first output, listing outputs relative to it.
fn finish(mut report: RunReport, outputs: Outputs, start: Instant, timed: bool) -> Result<RunReport, PipelineError> {
    let path = report_path(&outputs.paths[0]);
    let dir = path.parent().unwrap_or(Path::new(""));
    report.outputs = relative_to(&outputs.paths, dir);
    if timed {
        report.wall_time = Some(start.elapsed().as_secs_f64());
    }
    io::write_text(&path, &report.render())?;
    report.outputs = outputs.paths.clone();
    outputs.commit();
    Ok(report)
}

fn read_cube(header: &Path) -> Result<crate::cube::HyperCube, PipelineError> {
    let f = CubeFiles::beside(header);
    let cube = io::read_hypercube(&f.header, &f.data, &f.times)?;
    Ok(cube)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeorefArgs {
    pub map: PathBuf,
    pub fixes: PathBuf,
    pub out_traj: PathBuf,
    pub out_map: PathBuf,
    pub max_dt: f64,
    /// Overrides the per-observation sigma when set.
    pub pixel_sigma: Option<f64>,
    pub clock_offset: f64,
    /// NED origin `[lat, lon, alt]`; the first fix when absent.
    pub origin: Option<[f64; 3]>,
}

pub fn run_georef(args: &GeorefArgs, exec: Execution) -> Result<RunReport, PipelineError> {
    let start = Instant::now();
    if !(args.max_dt > 0.0) {
        return Err(PipelineError::InvalidArgument(format!("max-dt must be positive, got {}", args.max_dt)));
    }
    if args.pixel_sigma.is_some_and(|s| !(s > 0.0)) {
        return Err(PipelineError::InvalidArgument("pixel-sigma must be positive".into()));
    }
    let map = io::read_sparse_map(&args.map)?;
    let fixes = io::read_fixes(&args.fixes)?;
    let opts = GeorefOptions {
        max_dt: args.max_dt,
        pixel_sigma: args.pixel_sigma,
        clock_offset: args.clock_offset,
        origin: args.origin.map(|o| (o[0], o[1], o[2])),
        exec,
        ..Default::default()
    };
    let result = georeference_full(&map, &fixes, &opts)?;
    // overall SLAM → NED scale over every keyframe
    let (src, dst): (Vec<Vector3<f64>>, Vec<Vector3<f64>>) = map
        .keyframes
        .iter()
        .map(|(id, k)| (*k.pose.translation(), *result.map.keyframes[id].pose.translation()))
        .unzip();
    let overall = umeyama_align(&src, &dst)?;

    let mut out = Outputs::new();
    ensure_parent(&args.out_traj)?;
    ensure_parent(&args.out_map)?;
    out.add(&args.out_traj);
    io::write_trajectory(&result.trajectory, &args.out_traj)?;
    out.add(&args.out_map);
    io::write_sparse_map(&result.map, &args.out_map)?;
    let r = &result.report;
    let mut report = RunReport::new("georef");
    report.inputs = vec![args.map.clone(), args.fixes.clone()];
    report.text("ned_origin", format!("{} {} {}", io::format_f64(r.frame.lat), io::format_f64(r.frame.lon), io::format_f64(r.frame.alt)));
    report.count("keyframes", result.map.keyframes.len());
    report.count("landmarks", result.map.landmarks.len());
    report.count("observations", result.map.observations.len());
    report.count("fixes", r.fixes);
    report.count("anchors", r.anchors);
    report.count("zeta_landmarks", r.zeta_landmarks);
    report.count("pnp_registered", r.pnp_registered);
    report.real("initial_scale", r.similarity.scale);
    report.real("scale", overall.scale);
    report.real("initial_rmse_px", r.init_rmse_px);
    report.real("final_rmse_px", r.final_rmse_px);
    report.count("iterations", r.bundle.iterations);
    report.text("termination", format!("{:?}", r.bundle.termination));
    finish(report, out, start, true)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RaycastArgs {
    /// ENVI header; `.bil` data and `.times` sit beside it.
    pub cube: PathBuf,
    pub traj: PathBuf,
    pub mesh: PathBuf,
    pub trel: PathBuf,
    pub out_cloud: PathBuf,
}

pub fn run_raycast(args: &RaycastArgs, exec: Execution) -> Result<RunReport, PipelineError> {
    let start = Instant::now();
    let cube = read_cube(&args.cube)?;
    let lens = cube.lens.ok_or_else(|| IoError::Invalid("cube header lacks 'focal length'".into()))?;
    let traj = io::read_trajectory(&args.traj)?;
    let mesh = io::read_mesh(&args.mesh)?;
    let t_rel = io::read_pose(&args.trel)?;
    let bvh = Bvh::build(&mesh)?;
    let (cloud, stats) = build_hyper_cloud(&cube, &traj, &t_rel, &lens, &bvh, exec)?;
    let mut out = Outputs::new();
    ensure_parent(&args.out_cloud)?;
    out.add(&args.out_cloud);
    io::write_cloud(&cloud, &args.out_cloud)?;
    let mut report = RunReport::new("raycast");
    report.inputs = vec![args.cube.clone(), args.traj.clone(), args.mesh.clone(), args.trel.clone()];
    report.count("faces", mesh.num_faces());
    report.count("scanlines", stats.scanlines);
    report.count("scanlines_dropped", stats.scanlines_dropped);
    report.count("rays", stats.rays);
    report.count("hits", stats.hits);
    report.count("misses", stats.misses);
    report.real("hit_ratio", stats.hit_ratio());
    report.count("points", cloud.len());
    report.count("bands", cloud.bands());
    finish(report, out, start, true)
}

/// Which cloud bands go into a hyperspectral ortho.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum BandSelection {
    /// Bands nearest 650, 550 and 450 nm.
    #[default]
    RgbProxy,
    All,
    /// Bands nearest the given wavelengths, nanometers.
    Nearest(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrthoArgs {
    /// A cloud (`HSC1`) or a PLY mesh with vertex colors.
    pub input: PathBuf,
    pub gsd: f64,
    pub bands: BandSelection,
    /// Reuse the grid of an existing ortho header instead of auto bounds.
    pub grid_from: Option<PathBuf>,
    /// Output ENVI header; `.bil` and `.wld` sit beside it.
    pub out: PathBuf,
}

fn check_gsd(gsd: f64) -> Result<(), PipelineError> {
    if gsd > 0.0 && gsd.is_finite() {
        Ok(())
    } else {
        Err(OrthoError::InvalidGsd(gsd).into())
    }
}

pub fn run_ortho(args: &OrthoArgs, exec: Execution) -> Result<RunReport, PipelineError> {
    let start = Instant::now();
    check_gsd(args.gsd)?;
    let grid: Option<Grid> = match &args.grid_from {
        Some(p) => {
            let g = io::read_ortho(&OrthoFiles::beside(p))?.grid;
            if g.gsd != args.gsd {
                return Err(PipelineError::InvalidArgument(format!("gsd {} differs from the reference grid's {}", args.gsd, g.gsd)));
            }
            Some(g)
        }
        None => None,
    };
    let bytes = std::fs::read(&args.input).map_err(|source| IoError::File {
        path: args.input.clone(),
        source,
    })?;
    let mut report = RunReport::new("ortho");
    report.inputs.push(args.input.clone());
    if let Some(p) = &args.grid_from {
        report.inputs.push(p.clone());
    }
    let img: OrthoImage = if bytes.starts_with(b"HSC1") {
        let cloud = io::decode_cloud(&bytes)?;
        let bands: Vec<usize> = match &args.bands {
            BandSelection::RgbProxy => io::rgb_proxy_bands(&cloud.wavelengths).to_vec(),
            BandSelection::All => (0..cloud.bands()).collect(),
            BandSelection::Nearest(nm) => nm.iter().map(|w| nearest_band(&cloud.wavelengths, *w)).collect(),
        };
        report.text("source", "cloud");
        report.count("points", cloud.len());
        let opts = RasterOptions {
            exec,
            ..Default::default()
        };
        rasterize_cloud(&cloud, args.gsd, &bands, grid, &opts)?
    } else if bytes.starts_with(b"ply") {
        let mesh = io::decode_ply(&bytes)?;
        report.text("source", "mesh");
        report.count("faces", mesh.num_faces());
        rasterize_mesh(&mesh, args.gsd, grid, exec)?
    } else {
        return Err(IoError::Unsupported(format!("{} is neither an HSC1 cloud nor a PLY mesh", args.input.display())).into());
    };
    let files = OrthoFiles::beside(&args.out);
    let mut out = Outputs::new();
    ensure_parent(&files.header)?;
    out.add(&files.header);
    out.add(&files.data);
    out.add(&files.world);
    io::write_ortho(&img, &files)?;
    report.real("gsd", img.grid.gsd);
    report.count("rows", img.rows());
    report.count("cols", img.cols());
    report.count("channels", img.channels.len());
    report.count("valid_cells", img.valid_count());
    finish(report, out, start, true)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineArgs {
    pub rgb_ortho: PathBuf,
    pub hs_ortho: PathBuf,
    pub cube: PathBuf,
    pub traj: PathBuf,
    pub trel_init: PathBuf,
    pub out_trel: PathBuf,
    pub export_matches: Option<PathBuf>,
    /// Hyperspectral channel matched against RGB luminance, by wavelength.
    pub match_nm: f64,
}

/// Channel of `img` nearest `nm`, or the first one without wavelengths.
pub fn matching_channel(img: &OrthoImage, nm: f64) -> usize {
    img.wavelengths.as_deref().map_or(0, |w| nearest_band(w, nm))
}

/// Matches an RGB ortho against the hyperspectral channel nearest `nm`.
pub fn compare_orthos(rgb: &OrthoImage, hs: &OrthoImage, nm: f64, exec: Execution) -> Result<OrthoMatches, PipelineError> {
    let detect = DetectOptions {
        exec,
        ..Default::default()
    };
    let matching = MatchOptions {
        exec,
        ..Default::default()
    };
    Ok(match_orthos(rgb, hs, matching_channel(hs, nm), &detect, &matching)?)
}

pub fn run_refine(args: &RefineArgs, exec: Execution) -> Result<RunReport, PipelineError> {
    let start = Instant::now();
    let rgb = io::read_ortho(&OrthoFiles::beside(&args.rgb_ortho))?;
    let hs = io::read_ortho(&OrthoFiles::beside(&args.hs_ortho))?;
    let cube = read_cube(&args.cube)?;
    let lens = cube.lens.ok_or_else(|| IoError::Invalid("cube header lacks 'focal length'".into()))?;
    let traj = io::read_trajectory(&args.traj)?;
    let init = io::read_pose(&args.trel_init)?;
    let m = compare_orthos(&rgb, &hs, args.match_nm, exec)?;
    if m.matches.is_empty() {
        return Err(RefineError::NoMatches.into());
    }
    let (corrs, skipped) = lift_correspondences(&m.matches, &m.rgb, &m.hs, &rgb, &hs)?;
    let (refined, r) = refine_extrinsics(&corrs, &traj, cube.timestamps(), &lens, &init, &RefineOptions::default())?;
    let mut out = Outputs::new();
    ensure_parent(&args.out_trel)?;
    out.add(&args.out_trel);
    io::write_pose(&refined, &args.out_trel)?;
    if let Some(p) = &args.export_matches {
        ensure_parent(p)?;
        out.add(p);
        io::write_correspondences(&corrs, p)?;
    }
    let mut report = RunReport::new("refine");
    report.inputs = vec![args.rgb_ortho.clone(), args.hs_ortho.clone(), args.cube.clone(), args.traj.clone(), args.trel_init.clone()];
    report.count("rgb_features", m.rgb.len());
    report.count("hs_features", m.hs.len());
    report.count("matches", m.matches.len());
    report.real("mean_displacement_px", m.mean_displacement_px);
    report.count("correspondences", r.correspondences);
    report.count("skipped", skipped);
    report.count("rejected", r.rejected);
    report.count("dropped", r.dropped);
    report.count("scanlines", r.scanlines);
    report.real("initial_rmse_px", r.initial_rmse_px);
    report.real("final_rmse_px", r.final_rmse_px);
    report.real("rotation_change_deg", r.rotation_change_deg);
    report.real("translation_change_m", r.translation_change);
    report.count("iterations", r.solve.iterations);
    report.text("termination", format!("{:?}", r.solve.termination));
    finish(report, out, start, true)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulateArgs {
    pub config: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub seed: Option<u64>,
}

/// Writes a survey bundle plus a `truth/` directory. The report carries no
/// wall time so that equal seeds give identical trees.
pub fn run_simulate(args: &SimulateArgs, exec: Execution) -> Result<RunReport, PipelineError> {
    let mut cfg = match &args.config {
        Some(p) => {
            let bytes = std::fs::read(p).map_err(|source| IoError::File { path: p.clone(), source })?;
            let text = String::from_utf8(bytes).map_err(|_| IoError::Invalid(format!("{} is not UTF-8", p.display())))?;
            SimConfig::from_toml(&text)?
        }
        None => SimConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let survey = simulate_survey(&cfg, exec)?;
    let dir = &args.out_dir;
    let truth = dir.join("truth");
    std::fs::create_dir_all(&truth).map_err(|source| IoError::File { path: truth.clone(), source })?;
    let mut out = Outputs::new();
    for p in io::SurveyBundle::files(&survey.bundle.manifest, dir) {
        out.add(p);
    }
    io::write_bundle(&survey.bundle, dir)?;
    let t = &survey.truth;
    out.add(truth.join("trajectory.txt"));
    io::write_trajectory(&t.trajectory, &truth.join("trajectory.txt"))?;
    out.add(truth.join("trel.txt"));
    io::write_pose(&t.t_rel, &truth.join("trel.txt"))?;
    out.add(truth.join("config.toml"));
    io::write_text(&truth.join("config.toml"), &cfg.to_toml())?;
    out.add(truth.join("summary.toml"));
    let summary = toml::to_string(&survey.summary()).map_err(|e| IoError::Invalid(e.to_string()))?;
    io::write_text(&truth.join("summary.toml"), &summary)?;
    let mut report = RunReport::new("simulate");
    if let Some(p) = &args.config {
        report.inputs.push(p.clone());
    }
    let s = survey.summary();
    report.count("seed", cfg.seed as usize);
    report.count("keyframes", s.keyframes);
    report.count("landmarks", s.landmarks);
    report.count("observations", s.observations);
    report.count("fixes", s.fixes);
    report.count("scanlines", s.scanlines);
    report.count("faces", survey.bundle.mesh.num_faces());
    report.real("expected_scale", s.expected_scale);
    finish(report, out, Instant::now(), false)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineArgs {
    /// Bundle manifest (`bundle.toml`).
    pub bundle: PathBuf,
    pub out_dir: PathBuf,
    pub gsd: f64,
    pub max_dt: f64,
    pub pixel_sigma: Option<f64>,
    pub bands: BandSelection,
    pub match_nm: f64,
}

impl PipelineArgs {
    pub fn new(bundle: impl Into<PathBuf>, out_dir: impl Into<PathBuf>) -> Self {
        Self {
            bundle: bundle.into(),
            out_dir: out_dir.into(),
            gsd: DEFAULT_GSD,
            max_dt: 0.1,
            pixel_sigma: None,
            bands: BandSelection::RgbProxy,
            match_nm: 550.0,
        }
    }
}

/// Artifact paths of a pipeline run, relative to its output directory.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineLayout {
    pub trajectory: PathBuf,
    pub map: PathBuf,
    pub cloud_initial: PathBuf,
    pub hs_ortho_initial: PathBuf,
    pub rgb_ortho: PathBuf,
    pub trel: PathBuf,
    pub matches: PathBuf,
    pub cloud: PathBuf,
    pub hs_ortho: PathBuf,
    pub report: PathBuf,
}

impl PipelineLayout {
    pub fn new(dir: &Path) -> Self {
        Self {
            trajectory: dir.join("trajectory.txt"),
            map: dir.join("map_georef.txt"),
            cloud_initial: dir.join("cloud_initial.hsc"),
            hs_ortho_initial: dir.join("ortho_hs_initial.hdr"),
            rgb_ortho: dir.join("ortho_rgb.hdr"),
            trel: dir.join("trel_refined.txt"),
            matches: dir.join("matches.txt"),
            cloud: dir.join("cloud.hsc"),
            hs_ortho: dir.join("ortho_hs.hdr"),
            report: dir.join("pipeline.report"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineReport {
    pub stages: Vec<RunReport>,
    pub summary: RunReport,
}

impl PipelineReport {
    pub fn stage(&self, name: &str) -> Option<&RunReport> {
        self.stages.iter().find(|s| s.stage == name)
    }

    pub fn render(&self) -> String {
        let mut s: Vec<String> = self.stages.iter().map(RunReport::render).collect();
        s.push(self.summary.render());
        s.join("\n")
    }
}

fn stage_files(r: &RunReport) -> Vec<PathBuf> {
    let mut v = r.outputs.clone();
    if let Some(first) = r.outputs.first() {
        v.push(report_path(first));
    }
    v
}

/// georef → raycast → ortho → refine → re-raycast → re-ortho, then compares
/// match displacement before and after refinement.
pub fn run_pipeline(args: &PipelineArgs, exec: Execution) -> Result<PipelineReport, PipelineError> {
    let start = Instant::now();
    check_gsd(args.gsd)?;
    let bundle = io::read_bundle(&args.bundle)?;
    let dir = args.bundle.parent().unwrap_or(Path::new("."));
    let m = &bundle.manifest;
    let cube = dir.join(&m.cube);
    let mesh = dir.join(&m.mesh);
    drop(bundle.cube);
    let l = PipelineLayout::new(&args.out_dir);
    let mut written = Outputs::new();
    let mut stages = Vec::new();
    let mut track = |r: RunReport, written: &mut Outputs| {
        for p in stage_files(&r) {
            written.add(p);
        }
        stages.push(r);
    };

    let r = run_georef(
        &GeorefArgs {
            map: dir.join(&m.map),
            fixes: dir.join(&m.fixes),
            out_traj: l.trajectory.clone(),
            out_map: l.map.clone(),
            max_dt: args.max_dt,
            pixel_sigma: args.pixel_sigma,
            clock_offset: m.clock_offset,
            origin: m.ned_origin,
        },
        exec,
    )?;
    track(r, &mut written);
    let raycast = |trel: PathBuf, out: &Path| {
        run_raycast(
            &RaycastArgs {
                cube: cube.clone(),
                traj: l.trajectory.clone(),
                mesh: mesh.clone(),
                trel,
                out_cloud: out.to_path_buf(),
            },
            exec,
        )
    };
    track(raycast(dir.join(&m.trel), &l.cloud_initial)?, &mut written);
    let ortho = |input: &Path, grid_from: Option<&Path>, out: &Path| {
        run_ortho(
            &OrthoArgs {
                input: input.to_path_buf(),
                gsd: args.gsd,
                bands: args.bands.clone(),
                grid_from: grid_from.map(Path::to_path_buf),
                out: out.to_path_buf(),
            },
            exec,
        )
    };
    track(ortho(&l.cloud_initial, None, &l.hs_ortho_initial)?, &mut written);
    track(ortho(&mesh, Some(&l.hs_ortho_initial), &l.rgb_ortho)?, &mut written);
    let refine = run_refine(
        &RefineArgs {
            rgb_ortho: l.rgb_ortho.clone(),
            hs_ortho: l.hs_ortho_initial.clone(),
            cube: cube.clone(),
            traj: l.trajectory.clone(),
            trel_init: dir.join(&m.trel),
            out_trel: l.trel.clone(),
            export_matches: Some(l.matches.clone()),
            match_nm: args.match_nm,
        },
        exec,
    )?;
    let pre = refine.real_value("mean_displacement_px").unwrap_or(f64::NAN);
    track(refine, &mut written);
    track(raycast(l.trel.clone(), &l.cloud)?, &mut written);
    track(ortho(&l.cloud, Some(&l.rgb_ortho), &l.hs_ortho)?, &mut written);

    let rgb = io::read_ortho(&OrthoFiles::beside(&l.rgb_ortho))?;
    let hs = io::read_ortho(&OrthoFiles::beside(&l.hs_ortho))?;
    let post = compare_orthos(&rgb, &hs, args.match_nm, exec)?;
    let mut summary = RunReport::new("pipeline");
    summary.inputs.push(args.bundle.clone());
    summary.outputs = relative_to(&written.paths, &args.out_dir);
    summary.outputs.push(relative_to(&[l.report.clone()], &args.out_dir).remove(0));
    let georef = &stages[0];
    for k in ["keyframes", "anchors"] {
        if let Some(Value::Count(v)) = georef.get(k) {
            summary.count(k, *v as usize);
        }
    }
    summary.real("scale", georef.real_value("scale").unwrap_or(f64::NAN));
    summary.real("pre_refinement_displacement_px", pre);
    summary.count("post_refinement_matches", post.matches.len());
    summary.real("post_refinement_displacement_px", post.mean_displacement_px);
    summary.wall_time = Some(start.elapsed().as_secs_f64());
    let report = PipelineReport { stages, summary };
    written.add(&l.report);
    io::write_text(&l.report, &report.render())?;
    written.commit();
    Ok(report)
}
