//! Extrinsic refinement between the RGB camera and the line scanner.
//!
//! Corners are detected on the RGB and hyperspectral ortho-images, matched
//! by normalized cross-correlation, lifted to (world point, scanline, column)
//! correspondences and fed to a single-pose least-squares problem.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, Matrix2x3, Vector3};
use thiserror::Error;

use crate::georef::camera_point;
use crate::geom::{GeomError, Pose, PushBroomIntrinsics, Trajectory};
use crate::optim::{solve_lm, BlockId, CostFunction, EvalFailure, LinearSolver, Loss, OptimError, Problem, SolveReport, SolverOptions, Termination};
use crate::ortho::OrthoImage;
use crate::par::{self, Execution};

/// Side length of the square descriptor patch.
pub const PATCH: usize = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RefineError {
    #[error("NoValidRegion: image needs a 32x32 valid region")]
    NoValidRegion,
    #[error("NoMatches")]
    NoMatches,
    #[error("MissingProvenance: hyperspectral ortho has no provenance plane")]
    MissingProvenance,
    #[error("TooFewCorrespondences: {0} correspondences over {1} scanlines")]
    TooFewCorrespondences(usize, usize),
    #[error("Diverged: rotation update of {0:.2} deg")]
    Diverged(f64),
    #[error("GridMismatch: ortho-images do not share a grid")]
    GridMismatch,
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Geom(#[from] GeomError),
}

/// Single-channel raster with a validity mask.
#[derive(Debug, Clone, Copy)]
pub struct Plane<'a> {
    pub data: &'a [f32],
    pub valid: &'a [bool],
    pub rows: usize,
    pub cols: usize,
}

impl Plane<'_> {
    #[inline]
    fn ok(&self, r: isize, c: isize) -> bool {
        r >= 0 && c >= 0 && (r as usize) < self.rows && (c as usize) < self.cols && self.valid[r as usize * self.cols + c as usize]
    }

    #[inline]
    fn at(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    /// Bilinear sample; `None` if any of the four supporting cells is invalid.
    fn bilinear(&self, r: f64, c: f64) -> Option<f64> {
        let r0 = r.floor();
        let c0 = c.floor();
        let (ri, ci) = (r0 as isize, c0 as isize);
        if !(self.ok(ri, ci) && self.ok(ri + 1, ci) && self.ok(ri, ci + 1) && self.ok(ri + 1, ci + 1)) {
            return None;
        }
        let (fr, fc) = (r - r0, c - c0);
        let (ri, ci) = (ri as usize, ci as usize);
        let v = (1.0 - fr) * ((1.0 - fc) * self.at(ri, ci) as f64 + fc * self.at(ri, ci + 1) as f64)
            + fr * ((1.0 - fc) * self.at(ri + 1, ci) as f64 + fc * self.at(ri + 1, ci + 1) as f64);
        Some(v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Feature {
    /// Sub-pixel (row, col) in the ortho grid.
    pub row: f64,
    pub col: f64,
    /// Zero-mean, unit-norm 16×16 patch.
    pub descriptor: Vec<f32>,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectOptions {
    pub max_features: usize,
    pub harris_k: f64,
    /// Standard deviation of the Gaussian integration window, pixels.
    pub sigma: f64,
    /// Responses below this fraction of the strongest one are ignored.
    pub rel_threshold: f64,
    pub nms_radius: f64,
    pub exec: Execution,
}

impl Default for DetectOptions {
    fn default() -> Self {
        Self {
            max_features: 2000,
            harris_k: 0.04,
            sigma: 1.5,
            rel_threshold: 0.01,
            nms_radius: 8.0,
            exec: Execution::Parallel,
        }
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable blur with zero padding outside the image.
fn blur(src: &[f64], rows: usize, cols: usize, k: &[f64], exec: Execution) -> Vec<f64> {
    let r = (k.len() / 2) as isize;
    let tmp: Vec<Vec<f64>> = par::map_range(exec, rows, |y| {
        (0..cols)
            .map(|x| {
                let mut s = 0.0;
                for (i, w) in k.iter().enumerate() {
                    let xx = x as isize + i as isize - r;
                    if xx >= 0 && (xx as usize) < cols {
                        s += w * src[y * cols + xx as usize];
                    }
                }
                s
            })
            .collect()
    });
    let out: Vec<Vec<f64>> = par::map_range(exec, rows, |y| {
        (0..cols)
            .map(|x| {
                let mut s = 0.0;
                for (i, w) in k.iter().enumerate() {
                    let yy = y as isize + i as isize - r;
                    if yy >= 0 && (yy as usize) < rows {
                        s += w * tmp[yy as usize][x];
                    }
                }
                s
            })
            .collect()
    });
    out.concat()
}

/// Harris response; zero where the gradient is undefined.
pub fn harris_response(img: &Plane, opts: &DetectOptions) -> Vec<f64> {
    let (rows, cols) = (img.rows, img.cols);
    let grads: Vec<Vec<(f64, f64, bool)>> = par::map_range(opts.exec, rows, |r| {
        (0..cols)
            .map(|c| {
                let (ri, ci) = (r as isize, c as isize);
                if img.ok(ri, ci) && img.ok(ri - 1, ci) && img.ok(ri + 1, ci) && img.ok(ri, ci - 1) && img.ok(ri, ci + 1) {
                    let gx = 0.5 * (img.at(r, c + 1) as f64 - img.at(r, c - 1) as f64);
                    let gy = 0.5 * (img.at(r + 1, c) as f64 - img.at(r - 1, c) as f64);
                    (gx, gy, true)
                } else {
                    (0.0, 0.0, false)
                }
            })
            .collect()
    });
    let flat: Vec<(f64, f64, bool)> = grads.concat();
    let k = gaussian_kernel(opts.sigma);
    let sxx = blur(&flat.iter().map(|g| g.0 * g.0).collect::<Vec<_>>(), rows, cols, &k, opts.exec);
    let syy = blur(&flat.iter().map(|g| g.1 * g.1).collect::<Vec<_>>(), rows, cols, &k, opts.exec);
    let sxy = blur(&flat.iter().map(|g| g.0 * g.1).collect::<Vec<_>>(), rows, cols, &k, opts.exec);
    (0..rows * cols)
        .map(|i| {
            if !flat[i].2 {
                return 0.0;
            }
            let tr = sxx[i] + syy[i];
            sxx[i] * syy[i] - sxy[i] * sxy[i] - opts.harris_k * tr * tr
        })
        .collect()
}

/// Zero-mean, unit-norm patch around a sub-pixel position.
pub fn describe(img: &Plane, row: f64, col: f64) -> Option<Vec<f32>> {
    let half = (PATCH as f64 - 1.0) / 2.0;
    let mut v = Vec::with_capacity(PATCH * PATCH);
    for i in 0..PATCH {
        for j in 0..PATCH {
            v.push(img.bilinear(row - half + i as f64, col - half + j as f64)?);
        }
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= mean);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 1e-9) {
        return None;
    }
    Some(v.iter().map(|x| (x / norm) as f32).collect())
}

/// Harris corners with greedy non-maximum suppression and sub-pixel refinement.
pub fn detect_features(img: &Plane, opts: &DetectOptions) -> Result<Vec<Feature>, RefineError> {
    if img.rows < 32 || img.cols < 32 || img.valid.iter().filter(|v| **v).count() < 32 * 32 {
        return Err(RefineError::NoValidRegion);
    }
    let (rows, cols) = (img.rows, img.cols);
    let resp = harris_response(img, opts);
    let peak = resp.iter().cloned().fold(0.0, f64::max);
    if !(peak > 0.0) {
        return Ok(Vec::new());
    }
    let thr = opts.rel_threshold * peak;
    let mut cand: Vec<(usize, usize)> = Vec::new();
    for r in 1..rows - 1 {
        for c in 1..cols - 1 {
            let v = resp[r * cols + c];
            if v <= thr {
                continue;
            }
            let mut is_max = true;
            'n: for dr in -1isize..=1 {
                for dc in -1isize..=1 {
                    if (dr, dc) != (0, 0) && resp[(r as isize + dr) as usize * cols + (c as isize + dc) as usize] > v {
                        is_max = false;
                        break 'n;
                    }
                }
            }
            if is_max {
                cand.push((r, c));
            }
        }
    }
    cand.sort_by(|a, b| resp[b.0 * cols + b.1].total_cmp(&resp[a.0 * cols + a.1]).then(a.cmp(b)));
    let rad = opts.nms_radius;
    let ri = rad.ceil() as isize;
    let mut taken = vec![false; rows * cols];
    let mut out = Vec::new();
    for (r, c) in cand {
        if out.len() >= opts.max_features {
            break;
        }
        let mut blocked = false;
        'w: for dr in -ri..=ri {
            for dc in -ri..=ri {
                let (rr, cc) = (r as isize + dr, c as isize + dc);
                if rr >= 0 && cc >= 0 && (rr as usize) < rows && (cc as usize) < cols && taken[rr as usize * cols + cc as usize] && ((dr * dr + dc * dc) as f64) <= rad * rad {
                    blocked = true;
                    break 'w;
                }
            }
        }
        if blocked {
            continue;
        }
        let at = |dr: isize, dc: isize| resp[(r as isize + dr) as usize * cols + (c as isize + dc) as usize];
        let parabola = |m: f64, z: f64, p: f64| {
            let den = m - 2.0 * z + p;
            if den < 0.0 {
                (0.5 * (m - p) / den).clamp(-0.5, 0.5)
            } else {
                0.0
            }
        };
        let row = r as f64 + parabola(at(-1, 0), at(0, 0), at(1, 0));
        let col = c as f64 + parabola(at(0, -1), at(0, 0), at(0, 1));
        let Some(descriptor) = describe(img, row, col) else { continue };
        taken[r * cols + c] = true;
        out.push(Feature {
            row,
            col,
            descriptor,
            score: resp[r * cols + c],
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchOptions {
    pub search_radius: f64,
    /// Best descriptor distance must be below `ratio` times the second best.
    pub ratio: f64,
    pub min_ncc: f64,
    pub exec: Execution,
}

impl Default for MatchOptions {
    fn default() -> Self {
        Self {
            search_radius: 40.0,
            ratio: 0.9,
            min_ncc: 0.5,
            exec: Execution::Parallel,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub a: usize,
    pub b: usize,
    pub ncc: f64,
}

fn ncc(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x as f64) * (*y as f64)).sum()
}

fn best_two(f: &Feature, others: &[Feature], radius: f64) -> Option<(usize, f64, f64)> {
    let mut best: Option<(usize, f64)> = None;
    let mut second = f64::NEG_INFINITY;
    for (j, g) in others.iter().enumerate() {
        let d2 = (f.row - g.row).powi(2) + (f.col - g.col).powi(2);
        if d2 > radius * radius {
            continue;
        }
        let s = ncc(&f.descriptor, &g.descriptor);
        match best {
            Some((_, bs)) if s <= bs => second = second.max(s),
            _ => {
                if let Some((_, bs)) = best {
                    second = second.max(bs);
                }
                best = Some((j, s));
            }
        }
    }
    best.map(|(j, s)| (j, s, second))
}

/// Descriptor distance of unit vectors with correlation `s`.
fn distance(s: f64) -> f64 {
    (2.0 - 2.0 * s).max(0.0).sqrt()
}

/// Mutual-best NCC matching within a search radius, filtered by a ratio test.
pub fn match_features(a: &[Feature], b: &[Feature], opts: &MatchOptions) -> Result<Vec<Match>, RefineError> {
    let forward: Vec<Option<(usize, f64, f64)>> = par::map(opts.exec, a, |f| best_two(f, b, opts.search_radius));
    let backward: Vec<Option<(usize, f64, f64)>> = par::map(opts.exec, b, |g| best_two(g, a, opts.search_radius));
    let mut out = Vec::new();
    for (i, fw) in forward.iter().enumerate() {
        let Some((j, s, second)) = *fw else { continue };
        if s < opts.min_ncc || backward[j].map(|bw| bw.0) != Some(i) {
            continue;
        }
        // a missing runner-up counts as an uncorrelated one
        let d2 = if second.is_finite() { distance(second) } else { std::f64::consts::SQRT_2 };
        if distance(s) >= opts.ratio * d2 {
            continue;
        }
        out.push(Match { a: i, b: j, ncc: s });
    }
    if out.is_empty() {
        return Err(RefineError::NoMatches);
    }
    Ok(out)
}

/// Mean pixel distance between matched features.
pub fn mean_displacement(a: &[Feature], b: &[Feature], matches: &[Match]) -> f64 {
    if matches.is_empty() {
        return f64::NAN;
    }
    matches
        .iter()
        .map(|m| ((a[m.a].row - b[m.b].row).powi(2) + (a[m.a].col - b[m.b].col).powi(2)).sqrt())
        .sum::<f64>()
        / matches.len() as f64
}

/// 3D point from the RGB side and (scanline, column) from the scanner side.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub world: Vector3<f64>,
    pub scanline: u32,
    pub column: u32,
    pub score: f64,
}

fn nearest_cell(img: &OrthoImage, row: f64, col: f64) -> Option<usize> {
    let (r, c) = (row.round(), col.round());
    if r < 0.0 || c < 0.0 || r >= img.rows() as f64 || c >= img.cols() as f64 {
        return None;
    }
    let i = img.index(r as usize, c as usize);
    img.valid[i].then_some(i)
}

/// Converts matches into correspondences; returns them with the number skipped.
pub fn lift_correspondences(
    matches: &[Match],
    rgb_features: &[Feature],
    hs_features: &[Feature],
    rgb: &OrthoImage,
    hs: &OrthoImage,
) -> Result<(Vec<Correspondence>, usize), RefineError> {
    let prov = hs.provenance.as_ref().ok_or(RefineError::MissingProvenance)?;
    if rgb.grid != hs.grid {
        return Err(RefineError::GridMismatch);
    }
    let g = rgb.grid;
    let mut out = Vec::new();
    let mut skipped = 0;
    for m in matches {
        let fa = &rgb_features[m.a];
        let fb = &hs_features[m.b];
        let (Some(ia), Some(ib)) = (nearest_cell(rgb, fa.row, fa.col), nearest_cell(hs, fb.row, fb.col)) else {
            skipped += 1;
            continue;
        };
        let (s, u) = prov[ib];
        if s == u32::MAX {
            skipped += 1;
            continue;
        }
        // the sample sits at the center of its cell, not at the feature
        let (row, col) = (fa.row + fb.row.round() - fb.row, fa.col + fb.col.round() - fb.col);
        let ia = nearest_cell(rgb, row, col).unwrap_or(ia);
        let north = g.origin_north() - row * g.gsd;
        let east = g.origin_east() + col * g.gsd;
        out.push(Correspondence {
            world: Vector3::new(north, east, rgb.height[ia]),
            scanline: s,
            column: u,
            score: m.ncc,
        });
    }
    Ok((out, skipped))
}

/// Line-scanner residual `(u_pred − u_obs, f·v_pred)` of a point expressed
/// in the RGB camera frame, as a function of `T_rel`.
pub struct ScanlineCost {
    pub lens: PushBroomIntrinsics,
    /// World point in the RGB camera frame at the scanline time.
    pub point: Vector3<f64>,
    pub column: f64,
}

impl CostFunction for ScanlineCost {
    fn residual_dim(&self) -> usize {
        2
    }

    fn evaluate(&self, params: &[&[f64]], residuals: &mut [f64], jacobians: Option<&mut [DMatrix<f64>]>) -> Result<(), EvalFailure> {
        let t_rel = Pose::from_params(params[0]);
        let (p, dpose, _) = camera_point(&t_rel, &self.point);
        if p.z <= 1e-9 {
            return Err(EvalFailure);
        }
        let f = self.lens.focal;
        let iz = 1.0 / p.z;
        residuals[0] = f * p.x * iz + self.lens.principal - self.column;
        residuals[1] = f * p.y * iz;
        if let Some(js) = jacobians {
            let d = Matrix2x3::new(f * iz, 0.0, -f * p.x * iz * iz, 0.0, f * iz, -f * p.y * iz * iz);
            js[0].copy_from(&(d * dpose));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineOptions {
    pub huber_px: f64,
    pub max_rotation_deg: f64,
    pub min_correspondences: usize,
    /// Re-solves after dropping residuals above `trim_factor` times the median.
    pub trim_rounds: usize,
    pub trim_factor: f64,
    pub solver: SolverOptions,
}

impl Default for RefineOptions {
    fn default() -> Self {
        Self {
            huber_px: 2.0,
            max_rotation_deg: 15.0,
            min_correspondences: 10,
            trim_rounds: 3,
            trim_factor: 3.0,
            solver: SolverOptions {
                linear_solver: LinearSolver::Dense,
                exec: Execution::Sequential,
                ..Default::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineReport {
    /// Correspondences kept in the final solve.
    pub correspondences: usize,
    /// Correspondences removed as outliers.
    pub rejected: usize,
    pub scanlines: usize,
    pub dropped: usize,
    pub initial_rmse_px: f64,
    pub final_rmse_px: f64,
    pub rotation_change_deg: f64,
    pub translation_change: f64,
    pub solve: SolveReport,
}

fn rmse(problem: &Problem) -> f64 {
    let n = problem.num_residual_blocks();
    if n == 0 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..n {
        if let Ok(r) = problem.raw_residual(i) {
            s += r.iter().map(|v| v * v).sum::<f64>();
        }
    }
    (s / n as f64).sqrt()
}

/// Solves for the rigid RGB→scanner transform with trajectory and points fixed.
///
/// `times` are the cube's scanline timestamps; correspondences whose
/// scanline lies outside the trajectory span are dropped.
pub fn refine_extrinsics(
    correspondences: &[Correspondence],
    trajectory: &Trajectory,
    times: &[f64],
    lens: &PushBroomIntrinsics,
    init: &Pose,
    opts: &RefineOptions,
) -> Result<(Pose, RefineReport), RefineError> {
    lens.validate()?;
    // (point in the RGB camera frame, column, scanline)
    let mut obs = Vec::with_capacity(correspondences.len());
    let mut dropped = 0;
    for c in correspondences {
        let Some(&t) = times.get(c.scanline as usize) else {
            dropped += 1;
            continue;
        };
        let Ok(pose) = trajectory.interpolate(t) else {
            dropped += 1;
            continue;
        };
        obs.push((pose.inverse().apply(&c.world), c.column as f64, c.scanline));
    }
    let build = |subset: &[(Vector3<f64>, f64, u32)], start: &Pose| -> Result<Problem, RefineError> {
        let mut problem = Problem::new();
        let block = problem.add_pose_block(start);
        for (point, column, _) in subset {
            problem.add_residual_block(
                Box::new(ScanlineCost {
                    lens: *lens,
                    point: *point,
                    column: *column,
                }),
                &[block],
                None,
                Loss::Huber(opts.huber_px),
            )?;
        }
        Ok(problem)
    };
    let scanlines = |subset: &[(Vector3<f64>, f64, u32)]| subset.iter().map(|o| o.2).collect::<BTreeSet<_>>().len();
    if obs.len() < opts.min_correspondences || scanlines(&obs) < 2 {
        return Err(RefineError::TooFewCorrespondences(obs.len(), scanlines(&obs)));
    }
    let mut problem = build(&obs, init)?;
    let initial_rmse_px = rmse(&problem);
    let mut solve = solve_lm(&mut problem, &opts.solver)?;
    let mut kept = obs;
    for _ in 0..opts.trim_rounds {
        if solve.termination == Termination::NumericalFailure {
            break;
        }
        let norms: Vec<f64> = (0..kept.len())
            .map(|i| problem.raw_residual(i).map_or(f64::INFINITY, |r| r.norm()))
            .collect();
        let mut sorted = norms.clone();
        sorted.sort_by(f64::total_cmp);
        let limit = (opts.trim_factor * sorted[sorted.len() / 2]).max(opts.huber_px);
        let next: Vec<_> = kept.iter().zip(&norms).filter(|(_, r)| **r <= limit).map(|(o, _)| *o).collect();
        if next.len() == kept.len() || next.len() < opts.min_correspondences || scanlines(&next) < 2 {
            break;
        }
        let start = problem.pose(BlockId(0));
        kept = next;
        problem = build(&kept, &start)?;
        solve = solve_lm(&mut problem, &opts.solver)?;
    }
    if solve.termination == Termination::NumericalFailure {
        return Err(RefineError::Optim(OptimError::NumericalFailure("refinement".into())));
    }
    let refined = problem.pose(BlockId(0));
    let rotation_change_deg = refined.angle_to(init).to_degrees();
    if rotation_change_deg > opts.max_rotation_deg {
        return Err(RefineError::Diverged(rotation_change_deg));
    }
    let report = RefineReport {
        correspondences: kept.len(),
        rejected: correspondences.len() - dropped - kept.len(),
        scanlines: scanlines(&kept),
        dropped,
        initial_rmse_px,
        final_rmse_px: rmse(&problem),
        rotation_change_deg,
        translation_change: refined.distance_to(init),
        solve,
    };
    Ok((refined, report))
}

/// Which hyperspectral channel is matched against RGB luminance.
pub fn matching_plane(img: &OrthoImage, channel: usize) -> Vec<f32> {
    img.plane(channel)
}

/// Detection and matching between an RGB ortho and one hyperspectral channel.
#[derive(Debug, Clone)]
pub struct OrthoMatches {
    pub rgb: Vec<Feature>,
    pub hs: Vec<Feature>,
    pub matches: Vec<Match>,
    pub mean_displacement_px: f64,
}

pub fn match_orthos(
    rgb: &OrthoImage,
    hs: &OrthoImage,
    hs_channel: usize,
    detect: &DetectOptions,
    matching: &MatchOptions,
) -> Result<OrthoMatches, RefineError> {
    if rgb.grid != hs.grid {
        return Err(RefineError::GridMismatch);
    }
    let lum = rgb.luminance();
    let band = matching_plane(hs, hs_channel);
    let pa = Plane {
        data: &lum,
        valid: &rgb.valid,
        rows: rgb.rows(),
        cols: rgb.cols(),
    };
    let pb = Plane {
        data: &band,
        valid: &hs.valid,
        rows: hs.rows(),
        cols: hs.cols(),
    };
    let fa = detect_features(&pa, detect)?;
    let fb = detect_features(&pb, detect)?;
    let matches = match_features(&fa, &fb, matching)?;
    let mean_displacement_px = mean_displacement(&fa, &fb, &matches);
    Ok(OrthoMatches {
        rgb: fa,
        hs: fb,
        matches,
        mean_displacement_px,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::TimedPose;
    use crate::optim::{check_jacobian, is_monotone_non_increasing, Manifold};
    use crate::raycast::{Bvh, TriMesh};
    use nalgebra::UnitQuaternion;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Img {
        data: Vec<f32>,
        valid: Vec<bool>,
        rows: usize,
        cols: usize,
    }

    impl Img {
        fn new(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f32) -> Self {
            let data = (0..rows * cols).map(|i| f(i / cols, i % cols)).collect();
            Self {
                data,
                valid: vec![true; rows * cols],
                rows,
                cols,
            }
        }

        fn plane(&self) -> Plane<'_> {
            Plane {
                data: &self.data,
                valid: &self.valid,
                rows: self.rows,
                cols: self.cols,
            }
        }
    }

    /// Smooth random texture: sum of a few random sinusoids plus blobs.
    fn texture(seed: u64) -> impl Fn(f64, f64) -> f32 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blobs: Vec<(f64, f64, f64, f64)> = (0..400)
            .map(|_| (rng.random_range(-20.0..220.0), rng.random_range(-20.0..220.0), rng.random_range(2.0..6.0), rng.random_range(-1.0..1.0)))
            .collect();
        move |r, c| {
            blobs
                .iter()
                .map(|(br, bc, s, a)| a * (-((r - br).powi(2) + (c - bc).powi(2)) / (2.0 * s * s)).exp())
                .sum::<f64>() as f32
        }
    }

    #[test]
    fn constant_image_has_no_features() {
        let img = Img::new(64, 64, |_, _| 3.0);
        assert!(detect_features(&img.plane(), &DetectOptions::default()).unwrap().is_empty());
        let small = Img::new(20, 64, |_, _| 0.0);
        assert_eq!(detect_features(&small.plane(), &DetectOptions::default()).unwrap_err(), RefineError::NoValidRegion);
    }

    #[test]
    fn square_corners() {
        let img = Img::new(96, 96, |r, c| if (30..70).contains(&r) && (30..70).contains(&c) { 1.0 } else { 0.0 });
        let f = detect_features(&img.plane(), &DetectOptions::default()).unwrap();
        // the step lies between pixel 29/30 and 69/70
        let truth = [(29.5, 29.5), (29.5, 69.5), (69.5, 29.5), (69.5, 69.5)];
        for (tr, tc) in truth {
            assert!(
                f.iter().any(|x| (x.row - tr).abs() <= 1.0 && (x.col - tc).abs() <= 1.0),
                "corner ({tr}, {tc}) missing from {:?}",
                f.iter().map(|x| (x.row, x.col)).collect::<Vec<_>>()
            );
        }
        assert_eq!(f.len(), 4);
        for x in &f {
            let n: f64 = x.descriptor.iter().map(|v| (*v as f64).powi(2)).sum();
            assert!((n.sqrt() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn checkerboard_corners() {
        let sq = 16;
        let img = Img::new(8 * sq, 8 * sq, |r, c| ((r / sq + c / sq) % 2) as f32);
        let f = detect_features(&img.plane(), &DetectOptions::default()).unwrap();
        let interior = f
            .iter()
            .filter(|x| {
                let near = |v: f64| {
                    let k = ((v + 0.5) / sq as f64).round();
                    k >= 1.0 && k <= 7.0 && (v + 0.5 - k * sq as f64).abs() <= 1.0
                };
                near(x.row) && near(x.col)
            })
            .count();
        assert!(interior >= 40, "{interior}");
    }

    #[test]
    fn identical_images_match_themselves() {
        let t = texture(1);
        let img = Img::new(200, 200, |r, c| t(r as f64, c as f64));
        let f = detect_features(&img.plane(), &DetectOptions::default()).unwrap();
        assert!(f.len() > 20);
        let m = match_features(&f, &f, &MatchOptions::default()).unwrap();
        assert_eq!(m.len(), f.len());
        assert!(m.iter().all(|m| m.a == m.b));
        assert_eq!(mean_displacement(&f, &f, &m), 0.0);
    }

    #[test]
    fn shifted_copy_recovers_offset() {
        let t = texture(2);
        let a = Img::new(200, 200, |r, c| t(r as f64, c as f64));
        let b = Img::new(200, 200, |r, c| t(r as f64 - 5.0, c as f64));
        let fa = detect_features(&a.plane(), &DetectOptions::default()).unwrap();
        let fb = detect_features(&b.plane(), &DetectOptions::default()).unwrap();
        let m = match_features(&fa, &fb, &MatchOptions::default()).unwrap();
        let good = m
            .iter()
            .filter(|m| (fb[m.b].row - fa[m.a].row - 5.0).abs() <= 1.0 && (fb[m.b].col - fa[m.a].col).abs() <= 1.0)
            .count();
        assert!(m.len() >= 10);
        assert!(good as f64 >= 0.9 * m.len() as f64, "{good}/{}", m.len());
    }

    #[test]
    fn noise_images_rarely_match() {
        let mut total = 0;
        let mut spurious = 0;
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let a = Img::new(160, 160, |_, _| 0.0);
            let a = Img {
                data: a.data.iter().map(|_| rng.random::<f32>()).collect(),
                ..a
            };
            let b = Img {
                data: a.data.iter().map(|_| rng.random::<f32>()).collect(),
                valid: a.valid.clone(),
                rows: a.rows,
                cols: a.cols,
            };
            let fa = detect_features(&a.plane(), &DetectOptions::default()).unwrap();
            let fb = detect_features(&b.plane(), &DetectOptions::default()).unwrap();
            total += fa.len().min(fb.len());
            spurious += match_features(&fa, &fb, &MatchOptions::default()).map_or(0, |m| m.len());
        }
        assert!(total > 100);
        assert!((spurious as f64) < 0.05 * total as f64, "{spurious}/{total}");
    }

    #[test]
    fn invalid_cells_do_not_create_corners() {
        let t = texture(3);
        let mut img = Img::new(120, 120, |r, c| t(r as f64, c as f64) + 5.0);
        for r in 0..120 {
            for c in 60..120 {
                img.valid[r * 120 + c] = false;
                img.data[r * 120 + c] = 0.0;
            }
        }
        let f = detect_features(&img.plane(), &DetectOptions::default()).unwrap();
        assert!(f.iter().all(|x| x.col + 7.5 < 60.0));
    }

    fn lens() -> PushBroomIntrinsics {
        PushBroomIntrinsics {
            focal: 1000.0,
            principal: 959.5,
            width: 1920,
            band_count: 8,
        }
    }

    #[test]
    fn scanline_jacobian() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let t_rel = Pose::new(
                UnitQuaternion::from_euler_angles(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)),
                Vector3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)),
            );
            let cost = ScanlineCost {
                lens: lens(),
                point: Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-0.2..0.2), rng.random_range(1.5..3.0)),
                column: 900.0,
            };
            let p = t_rel.to_params();
            let dev = check_jacobian(&cost, &[Manifold::Pose], &[&p]).unwrap();
            assert!(dev < 1e-5, "{dev}");
        }
    }

    /// Downward-looking sway trajectory over a wavy floor; correspondences are
    /// exact ray hits of random (scanline, column) pairs.
    struct Scene {
        traj: Trajectory,
        times: Vec<f64>,
        truth: Pose,
        corr: Vec<Correspondence>,
    }

    fn scene(n: usize, seed: u64) -> Scene {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let heading = UnitQuaternion::from_matrix(&nalgebra::Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0));
        let samples: Vec<TimedPose> = (0..=100)
            .map(|i| {
                let t = i as f64 * 0.04;
                let sway = UnitQuaternion::from_euler_angles(0.05 * (1.3 * t).sin(), 0.04 * (0.9 * t).cos(), 0.03 * (0.7 * t).sin());
                TimedPose {
                    t,
                    pose: Pose::new(sway * heading, Vector3::new(0.3 * t, 0.1 * (0.5 * t).sin(), -2.0 + 0.1 * (1.1 * t).sin())),
                }
            })
            .collect();
        let traj = Trajectory::new(samples).unwrap();
        let times: Vec<f64> = (0..120).map(|s| s as f64 / 30.0).collect();
        let truth = Pose::new(UnitQuaternion::from_euler_angles(0.02, -0.03, 0.01), Vector3::new(0.05, -0.1, 0.02));
        let g = 120;
        let mut v = Vec::new();
        let mut f = Vec::new();
        for i in 0..=g {
            for j in 0..=g {
                let (x, y) = (-2.0 + 6.0 * i as f64 / g as f64, -4.0 + 8.0 * j as f64 / g as f64);
                v.push(Vector3::new(x, y, 0.3 * (2.0 * x).sin() * (1.5 * y).cos()));
            }
        }
        for i in 0..g {
            for j in 0..g {
                let k = |a: usize, b: usize| (a * (g + 1) + b) as u32;
                f.push([k(i, j), k(i + 1, j), k(i + 1, j + 1)]);
                f.push([k(i, j), k(i + 1, j + 1), k(i, j + 1)]);
            }
        }
        let mesh = TriMesh::new(v, f, None).unwrap().0;
        let bvh = Bvh::build(&mesh).unwrap();
        let mut corr = Vec::new();
        while corr.len() < n {
            let s = rng.random_range(0..times.len());
            let u = rng.random_range(0..1920u32);
            let pose = traj.interpolate(times[s]).unwrap().compose(&truth);
            let dir = pose.rotation_matrix() * lens().ray(u as f64).unwrap();
            if let Some(h) = bvh.intersect(pose.translation(), &dir) {
                corr.push(Correspondence {
                    world: h.point,
                    scanline: s as u32,
                    column: u,
                    score: 1.0,
                });
            }
        }
        Scene { traj, times, truth, corr }
    }

    #[test]
    fn truth_is_a_fixed_point() {
        let sc = scene(50, 1);
        let (p, rep) = refine_extrinsics(&sc.corr, &sc.traj, &sc.times, &lens(), &sc.truth, &RefineOptions::default()).unwrap();
        assert!(rep.solve.final_cost < 1e-12);
        assert!(p.distance_to(&sc.truth) < 1e-9);
        assert!(p.angle_to(&sc.truth) < 1e-9);
    }

    fn perturbed(truth: &Pose) -> Pose {
        let axis = nalgebra::Unit::new_normalize(Vector3::new(1.0, -2.0, 0.5));
        let d = Pose::new(UnitQuaternion::from_axis_angle(&axis, 2f64.to_radians()), Vector3::new(0.03, -0.03, 0.0287228));
        truth.compose(&d)
    }

    #[test]
    fn recovers_from_two_degrees_five_cm() {
        let sc = scene(300, 2);
        let init = perturbed(&sc.truth);
        assert!((init.angle_to(&sc.truth).to_degrees() - 2.0).abs() < 1e-9);
        let (p, rep) = refine_extrinsics(&sc.corr, &sc.traj, &sc.times, &lens(), &init, &RefineOptions::default()).unwrap();
        assert!(p.angle_to(&sc.truth).to_degrees() < 0.1);
        assert!(p.distance_to(&sc.truth) < 0.002);
        assert!(is_monotone_non_increasing(&rep.solve.cost_history));
        assert!(rep.final_rmse_px < rep.initial_rmse_px);
    }

    #[test]
    fn quantized_correspondences() {
        let sc = scene(300, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let gsd = 0.005;
        let noisy: Vec<Correspondence> = sc
            .corr
            .iter()
            .map(|c| {
                let mut w = c.world;
                w.x += rng.random_range(-0.5..0.5) * gsd;
                w.y += rng.random_range(-0.5..0.5) * gsd;
                Correspondence { world: w, ..*c }
            })
            .collect();
        let init = perturbed(&sc.truth);
        let (p, _) = refine_extrinsics(&noisy, &sc.traj, &sc.times, &lens(), &init, &RefineOptions::default()).unwrap();
        assert!(p.angle_to(&sc.truth).to_degrees() < 0.5);
        assert!(p.distance_to(&sc.truth) < 0.01);
    }

    #[test]
    fn refine_errors() {
        let sc = scene(20, 5);
        let few = &sc.corr[..9];
        assert!(matches!(
            refine_extrinsics(few, &sc.traj, &sc.times, &lens(), &sc.truth, &RefineOptions::default()),
            Err(RefineError::TooFewCorrespondences(9, _))
        ));
        let one_line: Vec<Correspondence> = sc.corr.iter().map(|c| Correspondence { scanline: 7, ..*c }).collect();
        assert!(matches!(
            refine_extrinsics(&one_line, &sc.traj, &sc.times, &lens(), &sc.truth, &RefineOptions::default()),
            Err(RefineError::TooFewCorrespondences(20, 1))
        ));
        // a tight rotation gate turns the 2 degree correction into a divergence
        let gate = RefineOptions {
            max_rotation_deg: 1.0,
            ..Default::default()
        };
        let sc = scene(100, 6);
        assert!(matches!(
            refine_extrinsics(&sc.corr, &sc.traj, &sc.times, &lens(), &perturbed(&sc.truth), &gate),
            Err(RefineError::Diverged(_))
        ));
    }
}
