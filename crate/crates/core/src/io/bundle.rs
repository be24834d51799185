use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::envi::{read_hypercube, write_hypercube, CubeFiles};
use super::ply::{read_mesh, write_mesh, PlyEncoding};
use super::text::{read_fixes, read_pose, read_sparse_map, utf8, write_fixes, write_pose, write_sparse_map};
use super::{read_file, write_file, IoError};
use crate::cube::HyperCube;
use crate::geodesy::GeodeticFix;
use crate::geom::Pose;
use crate::georef::SparseMap;
use crate::raycast::TriMesh;

/// `bundle.toml`: file names relative to the manifest plus survey constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurveyManifest {
    pub map: String,
    pub fixes: String,
    /// ENVI header; data (`.bil`) and timestamps (`.times`) sit beside it.
    pub cube: String,
    pub mesh: String,
    pub trel: String,
    #[serde(default)]
    pub clock_offset: f64,
    /// Geodetic origin (lat, lon, alt) of the NED frame the mesh is expressed in.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ned_origin: Option<[f64; 3]>,
}

impl Default for SurveyManifest {
    fn default() -> Self {
        Self {
            map: "map.txt".into(),
            fixes: "fixes.txt".into(),
            cube: "cube.hdr".into(),
            mesh: "mesh.ply".into(),
            trel: "trel.txt".into(),
            clock_offset: 0.0,
            ned_origin: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurveyBundle {
    pub manifest: SurveyManifest,
    pub map: SparseMap,
    pub fixes: Vec<GeodeticFix>,
    pub cube: HyperCube,
    pub mesh: TriMesh,
    pub t_rel: Pose,
}

impl SurveyBundle {
    /// Paths of every bundle file, manifest first.
    pub fn files(manifest: &SurveyManifest, dir: &Path) -> Vec<PathBuf> {
        let cube = CubeFiles::beside(&dir.join(&manifest.cube));
        vec![
            dir.join("bundle.toml"),
            dir.join(&manifest.map),
            dir.join(&manifest.fixes),
            cube.header,
            cube.data,
            cube.times,
            dir.join(&manifest.mesh),
            dir.join(&manifest.trel),
        ]
    }
}

pub fn parse_manifest(bytes: &[u8]) -> Result<SurveyManifest, IoError> {
    toml::from_str(utf8(bytes)?).map_err(|e| {
        let line = e.span().map_or(0, |s| 1 + bytes[..s.start.min(bytes.len())].iter().filter(|b| **b == b'\n').count());
        IoError::parse(line, e.message().to_string())
    })
}

fn span(ts: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    ts.fold(None, |acc, t| match acc {
        None => Some((t, t)),
        Some((a, b)) => Some((a.min(t), b.max(t))),
    })
}

/// Loads a bundle from its manifest path and checks that map, cube and fix
/// time spans overlap by at least one second.
pub fn read_bundle(manifest_path: &Path) -> Result<SurveyBundle, IoError> {
    let manifest = parse_manifest(&read_file(manifest_path)?)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let map = read_sparse_map(&dir.join(&manifest.map))?;
    let fixes = read_fixes(&dir.join(&manifest.fixes))?;
    let cf = CubeFiles::beside(&dir.join(&manifest.cube));
    let cube = read_hypercube(&cf.header, &cf.data, &cf.times)?;
    if cube.lens.is_none() {
        return Err(IoError::Invalid("cube header lacks 'focal length'".into()));
    }
    let mesh = read_mesh(&dir.join(&manifest.mesh))?;
    let t_rel = read_pose(&dir.join(&manifest.trel))?;
    let spans = [
        span(map.keyframes.values().map(|k| k.t)),
        span(fixes.iter().map(|f| f.t + manifest.clock_offset)),
        span(cube.timestamps().iter().copied()),
    ];
    let (lo, hi) = spans.iter().try_fold((f64::NEG_INFINITY, f64::INFINITY), |(lo, hi), s| {
        s.map(|(a, b)| (lo.max(a), hi.min(b)))
    })
    .ok_or(IoError::EmptyInput("keyframes"))?;
    if hi - lo < 1.0 {
        return Err(IoError::Invalid(format!(
            "map, fix and cube time spans overlap by {:.3} s, at least 1 s is required",
            (hi - lo).max(0.0)
        )));
    }
    Ok(SurveyBundle {
        manifest,
        map,
        fixes,
        cube,
        mesh,
        t_rel,
    })
}

/// Writes every bundle file into `dir` and returns the manifest path.
pub fn write_bundle(bundle: &SurveyBundle, dir: &Path) -> Result<PathBuf, IoError> {
    let m = &bundle.manifest;
    write_sparse_map(&bundle.map, &dir.join(&m.map))?;
    write_fixes(&bundle.fixes, &dir.join(&m.fixes))?;
    write_hypercube(&bundle.cube, &CubeFiles::beside(&dir.join(&m.cube)))?;
    write_mesh(&bundle.mesh, &dir.join(&m.mesh), PlyEncoding::BinaryLittleEndian)?;
    write_pose(&bundle.t_rel, &dir.join(&m.trel))?;
    let text = toml::to_string(m).map_err(|e| IoError::Invalid(e.to_string()))?;
    let path = dir.join("bundle.toml");
    write_file(&path, text.as_bytes())?;
    Ok(path)
}
