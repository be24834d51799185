use std::collections::BTreeMap;
use std::fmt::Write;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{Vector2, Vector3};

use super::{read_file, write_file, IoError};
use crate::geodesy::GeodeticFix;
use crate::geom::{PinholeIntrinsics, Pose, TimedPose, Trajectory};
use crate::georef::{Keyframe, Observation, SparseMap};
use crate::refine::Correspondence;

/// Shortest representation that parses back to the same bits.
pub fn format_f64(v: f64) -> String {
    format!("{v:?}")
}

pub(crate) fn utf8(bytes: &[u8]) -> Result<&str, IoError> {
    std::str::from_utf8(bytes).map_err(|e| {
        let line = 1 + bytes[..e.valid_up_to()].iter().filter(|b| **b == b'\n').count();
        IoError::parse(line, "invalid UTF-8")
    })
}

/// Non-empty, non-comment lines as (1-based line number, tokens).
pub(crate) fn records(src: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    src.lines().enumerate().filter_map(|(i, l)| {
        let l = l.trim();
        (!l.is_empty() && !l.starts_with('#')).then(|| (i + 1, l.split_whitespace().collect()))
    })
}

pub(crate) fn num<T: FromStr>(tok: &str, line: usize, what: &str) -> Result<T, IoError> {
    tok.parse()
        .map_err(|_| IoError::parse(line, format!("{what}: cannot parse '{}'", truncate(tok))))
}

pub(crate) fn real(tok: &str, line: usize, what: &str) -> Result<f64, IoError> {
    let v: f64 = num(tok, line, what)?;
    if !v.is_finite() {
        return Err(IoError::parse(line, format!("{what}: non-finite value")));
    }
    Ok(v)
}

fn truncate(s: &str) -> &str {
    match s.char_indices().nth(32) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

fn arity(tokens: &[&str], n: usize, line: usize, what: &str) -> Result<(), IoError> {
    if tokens.len() != n {
        return Err(IoError::parse(
            line,
            format!("{what}: expected {n} fields, found {}", tokens.len()),
        ));
    }
    Ok(())
}

fn reals<const N: usize>(tokens: &[&str], line: usize, what: &str) -> Result<[f64; N], IoError> {
    let mut out = [0.0; N];
    for (o, t) in out.iter_mut().zip(tokens) {
        *o = real(t, line, what)?;
    }
    Ok(out)
}

fn pose_fields(tokens: &[&str], line: usize) -> Result<Pose, IoError> {
    let v: [f64; 7] = reals(tokens, line, "pose")?;
    Pose::from_xyzw([v[3], v[4], v[5], v[6]], [v[0], v[1], v[2]])
        .map_err(|e| IoError::parse(line, e.to_string()))
}

fn push_pose(out: &mut String, p: &Pose) {
    let t = p.translation();
    for v in [t.x, t.y, t.z].into_iter().chain(p.quaternion_xyzw()) {
        out.push(' ');
        out.push_str(&format_f64(v));
    }
}

pub fn parse_sparse_map(bytes: &[u8]) -> Result<SparseMap, IoError> {
    let src = utf8(bytes)?;
    let mut camera = None;
    let mut keyframes = BTreeMap::new();
    let mut landmarks = BTreeMap::new();
    let mut observations = Vec::new();
    let mut obs_lines = Vec::new();
    for (line, tok) in records(src) {
        match tok[0] {
            "CAMERA" => {
                arity(&tok, 11, line, "CAMERA")?;
                if camera.is_some() {
                    return Err(IoError::parse(line, "duplicate CAMERA"));
                }
                let v: [f64; 8] = reals(&tok[1..9], line, "CAMERA")?;
                let cam = PinholeIntrinsics {
                    fx: v[0],
                    fy: v[1],
                    cx: v[2],
                    cy: v[3],
                    k1: v[4],
                    k2: v[5],
                    p1: v[6],
                    p2: v[7],
                    width: num(tok[9], line, "width")?,
                    height: num(tok[10], line, "height")?,
                };
                cam.validate().map_err(|e| IoError::parse(line, e.to_string()))?;
                camera = Some(cam);
            }
            "KEYFRAME" => {
                arity(&tok, 10, line, "KEYFRAME")?;
                let id: u64 = num(tok[1], line, "keyframe id")?;
                let t = real(tok[2], line, "time")?;
                let pose = pose_fields(&tok[3..], line)?;
                if keyframes.insert(id, Keyframe { t, pose }).is_some() {
                    return Err(IoError::parse(line, format!("duplicate keyframe {id}")));
                }
            }
            "LANDMARK" => {
                arity(&tok, 5, line, "LANDMARK")?;
                let id: u64 = num(tok[1], line, "landmark id")?;
                let p: [f64; 3] = reals(&tok[2..], line, "LANDMARK")?;
                if landmarks.insert(id, Vector3::from(p)).is_some() {
                    return Err(IoError::parse(line, format!("duplicate landmark {id}")));
                }
            }
            "OBS" => {
                arity(&tok, 6, line, "OBS")?;
                let keyframe: u64 = num(tok[1], line, "keyframe id")?;
                let landmark: u64 = num(tok[2], line, "landmark id")?;
                let v: [f64; 3] = reals(&tok[3..], line, "OBS")?;
                if !(v[2] > 0.0) {
                    return Err(IoError::parse(line, "pixel sigma must be positive"));
                }
                observations.push(Observation {
                    keyframe,
                    landmark,
                    pixel: Vector2::new(v[0], v[1]),
                    sigma: v[2],
                });
                obs_lines.push(line);
            }
            other => return Err(IoError::parse(line, format!("unknown record '{}'", truncate(other)))),
        }
    }
    let camera = camera.ok_or_else(|| IoError::parse(0, "missing CAMERA record"))?;
    for (o, line) in observations.iter().zip(obs_lines) {
        if !keyframes.contains_key(&o.keyframe) {
            return Err(IoError::DanglingReference {
                line,
                msg: format!("unknown keyframe {}", o.keyframe),
            });
        }
        if !landmarks.contains_key(&o.landmark) {
            return Err(IoError::DanglingReference {
                line,
                msg: format!("unknown landmark {}", o.landmark),
            });
        }
    }
    Ok(SparseMap {
        camera,
        keyframes,
        landmarks,
        observations,
    })
}

pub fn render_sparse_map(map: &SparseMap) -> String {
    let c = &map.camera;
    let mut out = String::from("# CAMERA fx fy cx cy k1 k2 p1 p2 width height\n# KEYFRAME id t tx ty tz qx qy qz qw\n# LANDMARK id x y z\n# OBS keyframe landmark u v sigma\n");
    out.push_str("CAMERA");
    for v in [c.fx, c.fy, c.cx, c.cy, c.k1, c.k2, c.p1, c.p2] {
        out.push(' ');
        out.push_str(&format_f64(v));
    }
    let _ = writeln!(out, " {} {}", c.width, c.height);
    for (id, k) in &map.keyframes {
        let _ = write!(out, "KEYFRAME {id} {}", format_f64(k.t));
        push_pose(&mut out, &k.pose);
        out.push('\n');
    }
    for (id, p) in &map.landmarks {
        let _ = writeln!(out, "LANDMARK {id} {} {} {}", format_f64(p.x), format_f64(p.y), format_f64(p.z));
    }
    for o in &map.observations {
        let _ = writeln!(
            out,
            "OBS {} {} {} {} {}",
            o.keyframe,
            o.landmark,
            format_f64(o.pixel.x),
            format_f64(o.pixel.y),
            format_f64(o.sigma)
        );
    }
    out
}

pub fn parse_fixes(bytes: &[u8]) -> Result<Vec<GeodeticFix>, IoError> {
    let src = utf8(bytes)?;
    let mut out: Vec<GeodeticFix> = Vec::new();
    for (line, tok) in records(src) {
        arity(&tok, 7, line, "fix")?;
        let v: [f64; 7] = reals(&tok, line, "fix")?;
        let fix = GeodeticFix {
            t: v[0],
            lat: v[1],
            lon: v[2],
            alt: v[3],
            sigma: Vector3::new(v[4], v[5], v[6]),
        };
        fix.validate().map_err(|e| IoError::parse(line, e.to_string()))?;
        if out.last().is_some_and(|p| p.t >= fix.t) {
            return Err(IoError::parse(line, "fix timestamps must increase"));
        }
        out.push(fix);
    }
    if out.is_empty() {
        return Err(IoError::EmptyInput("fixes"));
    }
    Ok(out)
}

pub fn render_fixes(fixes: &[GeodeticFix]) -> String {
    let mut out = String::from("# t lat lon alt sigma_n sigma_e sigma_d\n");
    for f in fixes {
        let v = [f.t, f.lat, f.lon, f.alt, f.sigma.x, f.sigma.y, f.sigma.z];
        out.push_str(&v.map(format_f64).join(" "));
        out.push('\n');
    }
    out
}

pub fn parse_trajectory(bytes: &[u8]) -> Result<Trajectory, IoError> {
    let src = utf8(bytes)?;
    let mut samples: Vec<TimedPose> = Vec::new();
    for (line, tok) in records(src) {
        arity(&tok, 8, line, "trajectory sample")?;
        let t = real(tok[0], line, "time")?;
        if samples.last().is_some_and(|p| p.t >= t) {
            return Err(IoError::parse(line, "trajectory timestamps must increase"));
        }
        samples.push(TimedPose {
            t,
            pose: pose_fields(&tok[1..], line)?,
        });
    }
    if samples.is_empty() {
        return Err(IoError::EmptyInput("trajectory"));
    }
    Trajectory::new(samples).map_err(|e| IoError::Invalid(e.to_string()))
}

pub fn render_trajectory(traj: &Trajectory) -> String {
    let mut out = String::from("# t tx ty tz qx qy qz qw\n");
    for s in traj.samples() {
        out.push_str(&format_f64(s.t));
        push_pose(&mut out, &s.pose);
        out.push('\n');
    }
    out
}

/// Single rigid transform: `tx ty tz qx qy qz qw`.
pub fn parse_pose(bytes: &[u8]) -> Result<Pose, IoError> {
    let src = utf8(bytes)?;
    let mut it = records(src);
    let (line, tok) = it.next().ok_or(IoError::EmptyInput("pose"))?;
    arity(&tok, 7, line, "pose")?;
    let pose = pose_fields(&tok, line)?;
    if let Some((line, _)) = it.next() {
        return Err(IoError::parse(line, "pose file holds a single record"));
    }
    Ok(pose)
}

pub fn render_pose(pose: &Pose) -> String {
    let mut body = String::new();
    push_pose(&mut body, pose);
    format!("# tx ty tz qx qy qz qw\n{}\n", body.trim_start())
}

pub fn parse_correspondences(bytes: &[u8]) -> Result<Vec<Correspondence>, IoError> {
    let src = utf8(bytes)?;
    let mut out = Vec::new();
    for (line, tok) in records(src) {
        arity(&tok, 6, line, "correspondence")?;
        let w: [f64; 3] = reals(&tok[..3], line, "correspondence")?;
        out.push(Correspondence {
            world: Vector3::from(w),
            scanline: num(tok[3], line, "scanline")?,
            column: num(tok[4], line, "column")?,
            score: real(tok[5], line, "score")?,
        });
    }
    Ok(out)
}

pub fn render_correspondences(corr: &[Correspondence]) -> String {
    let mut out = String::from("# north east down scanline column score\n");
    for c in corr {
        let _ = writeln!(
            out,
            "{} {} {} {} {} {}",
            format_f64(c.world.x),
            format_f64(c.world.y),
            format_f64(c.world.z),
            c.scanline,
            c.column,
            format_f64(c.score)
        );
    }
    out
}

pub fn read_sparse_map(path: &Path) -> Result<SparseMap, IoError> {
    parse_sparse_map(&read_file(path)?)
}

pub fn write_sparse_map(map: &SparseMap, path: &Path) -> Result<(), IoError> {
    write_file(path, render_sparse_map(map).as_bytes())
}

pub fn read_fixes(path: &Path) -> Result<Vec<GeodeticFix>, IoError> {
    parse_fixes(&read_file(path)?)
}

pub fn write_fixes(fixes: &[GeodeticFix], path: &Path) -> Result<(), IoError> {
    write_file(path, render_fixes(fixes).as_bytes())
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory, IoError> {
    parse_trajectory(&read_file(path)?)
}

pub fn write_trajectory(traj: &Trajectory, path: &Path) -> Result<(), IoError> {
    write_file(path, render_trajectory(traj).as_bytes())
}

pub fn read_pose(path: &Path) -> Result<Pose, IoError> {
    parse_pose(&read_file(path)?)
}

pub fn write_pose(pose: &Pose, path: &Path) -> Result<(), IoError> {
    write_file(path, render_pose(pose).as_bytes())
}

pub fn read_correspondences(path: &Path) -> Result<Vec<Correspondence>, IoError> {
    parse_correspondences(&read_file(path)?)
}

pub fn write_correspondences(corr: &[Correspondence], path: &Path) -> Result<(), IoError> {
    write_file(path, render_correspondences(corr).as_bytes())
}
