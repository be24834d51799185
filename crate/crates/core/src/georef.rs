//! Scaling and geo-referencing of a monocular SLAM map against INS fixes.
//!
//! Pipeline: fixes are converted to NED, paired with the keyframes closest in
//! time, a similarity (Umeyama) brings the whole map into the fix frame, a
//! bundle adjustment over the anchored keyframes and the landmarks they see
//! fuses reprojection and positioning errors, and every remaining keyframe
//! is re-registered against the optimized landmarks with PnP.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use nalgebra::{DMatrix, Matrix3, UnitQuaternion, Vector2, Vector3};
use thiserror::Error;

use crate::geodesy::{fixes_to_ned, GeodesyError, GeodeticFix, LocalFrame, NedFix};
use crate::geom::{skew, GeomError, PinholeIntrinsics, Pose, TimedPose, Trajectory};
use crate::optim::{
    solve_lm, CostFunction, EvalFailure, Loss, OptimError, Problem, SolveReport, SolverOptions,
};
use crate::par::{self, Execution};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeorefError {
    #[error("NoAssociations: no fix lies within max_dt of a keyframe")]
    NoAssociations,
    #[error("InsufficientAnchors: {0} anchored keyframes, at least 3 are needed to fix the gauge")]
    InsufficientAnchors(usize),
    #[error("DegenerateConfiguration: {0}")]
    DegenerateConfiguration(&'static str),
    #[error("TooFewPoints: {0} observations, at least {1} are needed")]
    TooFewPoints(usize, usize),
    #[error("DivergedFromInit: translation moved {0:.3} m from its initial value")]
    DivergedFromInit(f64),
    #[error("InvalidMap: {0}")]
    InvalidMap(String),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Geodesy(#[from] GeodesyError),
    #[error(transparent)]
    Geom(#[from] GeomError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keyframe {
    pub t: f64,
    /// Camera-to-world pose.
    pub pose: Pose,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub keyframe: u64,
    pub landmark: u64,
    pub pixel: Vector2<f64>,
    /// Isotropic pixel standard deviation.
    pub sigma: f64,
}

/// SLAM output: keyframes, landmarks and their 2D observations.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMap {
    pub camera: PinholeIntrinsics,
    pub keyframes: BTreeMap<u64, Keyframe>,
    pub landmarks: BTreeMap<u64, Vector3<f64>>,
    pub observations: Vec<Observation>,
}

impl SparseMap {
    pub fn validate(&self) -> Result<(), GeorefError> {
        self.camera
            .validate()
            .map_err(|e| GeorefError::InvalidMap(e.to_string()))?;
        let mut counts: HashMap<u64, usize> = HashMap::new();
        for o in &self.observations {
            if !self.keyframes.contains_key(&o.keyframe) {
                return Err(GeorefError::InvalidMap(format!(
                    "observation references unknown keyframe {}",
                    o.keyframe
                )));
            }
            if !self.landmarks.contains_key(&o.landmark) {
                return Err(GeorefError::InvalidMap(format!(
                    "observation references unknown landmark {}",
                    o.landmark
                )));
            }
            if !(o.sigma > 0.0) {
                return Err(GeorefError::InvalidMap("pixel sigma must be positive".into()));
            }
            *counts.entry(o.landmark).or_default() += 1;
        }
        if let Some(id) = self.landmarks.keys().find(|id| counts.get(id).copied().unwrap_or(0) < 2) {
            return Err(GeorefError::InvalidMap(format!(
                "landmark {id} is observed fewer than 2 times"
            )));
        }
        Ok(())
    }

    /// Keyframe ids ordered by timestamp.
    pub fn keyframes_by_time(&self) -> Vec<(f64, u64)> {
        let mut v: Vec<(f64, u64)> = self.keyframes.iter().map(|(id, k)| (k.t, *id)).collect();
        v.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        v
    }

    pub fn transformed(&self, s: &Similarity) -> SparseMap {
        let mut out = self.clone();
        for k in out.keyframes.values_mut() {
            k.pose = s.apply_pose(&k.pose);
        }
        for l in out.landmarks.values_mut() {
            *l = s.apply(l);
        }
        out
    }

    /// RMS reprojection error in pixels over the observations accepted by `filter`.
    pub fn reprojection_rmse(&self, filter: impl Fn(&Observation) -> bool) -> f64 {
        let (mut sum, mut n) = (0.0, 0usize);
        for o in self.observations.iter().filter(|o| filter(o)) {
            let kf = &self.keyframes[&o.keyframe];
            let p = kf.pose.inverse().apply(&self.landmarks[&o.landmark]);
            if let Ok(px) = self.camera.project(&p) {
                sum += (px - o.pixel).norm_squared();
                n += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            (sum / n as f64).sqrt()
        }
    }

    pub fn trajectory(&self) -> Result<Trajectory, GeomError> {
        Trajectory::new(
            self.keyframes_by_time()
                .into_iter()
                .map(|(t, id)| TimedPose {
                    t,
                    pose: self.keyframes[&id].pose,
                })
                .collect(),
        )
    }
}

/// `x ↦ s·R·x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * p) + self.translation
    }

    pub fn apply_pose(&self, pose: &Pose) -> Pose {
        Pose::new(self.rotation * pose.rotation(), self.apply(pose.translation()))
    }

    pub fn inverse(&self) -> Similarity {
        let r = self.rotation.inverse();
        Similarity {
            scale: 1.0 / self.scale,
            rotation: r,
            translation: -(r * self.translation) / self.scale,
        }
    }
}

/// Closed-form least-squares similarity mapping `src` onto `dst`.
pub fn umeyama_align(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Result<Similarity, GeorefError> {
    if src.len() != dst.len() {
        return Err(GeorefError::DegenerateConfiguration("point sets differ in length"));
    }
    if src.len() < 3 {
        return Err(GeorefError::DegenerateConfiguration("fewer than 3 correspondences"));
    }
    let n = src.len() as f64;
    let ms = src.iter().sum::<Vector3<f64>>() / n;
    let md = dst.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    let mut scatter = Matrix3::zeros();
    let mut var_src = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let sc = s - ms;
        cov += (d - md) * sc.transpose();
        scatter += sc * sc.transpose();
        var_src += sc.norm_squared();
    }
    cov /= n;
    var_src /= n;
    let eig = scatter.symmetric_eigen();
    let mut ev: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if !(ev[0] > 1e-24) || ev[1] <= 1e-10 * ev[0] {
        return Err(GeorefError::DegenerateConfiguration("source points are collinear or coincident"));
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut s = Matrix3::identity();
    if (u.determinant() * v_t.determinant()) < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let r = u * s * v_t;
    let scale = (Matrix3::from_diagonal(&svd.singular_values) * s).trace() / var_src;
    if !(scale > 0.0) {
        return Err(GeorefError::DegenerateConfiguration("non-positive scale"));
    }
    let rotation = UnitQuaternion::from_matrix(&r);
    Ok(Similarity {
        scale,
        rotation,
        translation: md - scale * (rotation * ms),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    pub keyframe: u64,
    pub fix: NedFix,
    /// Fix time minus keyframe time.
    pub dt: f64,
}

/// Keyframes paired with fixes; together with the landmarks they observe
/// these form the optimized subset of the bundle adjustment.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AnchorSet {
    pub pairs: Vec<Anchor>,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn keyframes(&self) -> BTreeSet<u64> {
        self.pairs.iter().map(|a| a.keyframe).collect()
    }

    /// Landmarks observed by at least one anchored keyframe.
    /// Landmarks seen by at least two anchored keyframes; single-view
    /// landmarks have no depth constraint and are left out.
    pub fn landmarks(&self, map: &SparseMap) -> BTreeSet<u64> {
        let kfs = self.keyframes();
        let mut counts: HashMap<u64, usize> = HashMap::new();
        for o in map.observations.iter().filter(|o| kfs.contains(&o.keyframe)) {
            *counts.entry(o.landmark).or_default() += 1;
        }
        counts.into_iter().filter(|(_, c)| *c >= 2).map(|(id, _)| id).collect()
    }
}

/// Pairs each fix with the keyframe nearest in time (ties toward the earlier
/// keyframe) if within `max_dt`; a keyframe keeps only its closest fix.
pub fn associate_fixes(map: &SparseMap, fixes: &[NedFix], max_dt: f64) -> Result<AnchorSet, GeorefError> {
    let kfs = map.keyframes_by_time();
    let mut best: BTreeMap<u64, Anchor> = BTreeMap::new();
    if !kfs.is_empty() {
        for fix in fixes {
            let i = kfs.partition_point(|k| k.0 < fix.t);
            let mut cand: Option<(f64, usize)> = None;
            for j in [i.checked_sub(1), Some(i)].into_iter().flatten() {
                if let Some(k) = kfs.get(j) {
                    let d = (fix.t - k.0).abs();
                    // earlier keyframe is visited first, so `<` keeps it on ties
                    if cand.is_none_or(|(bd, _)| d < bd) {
                        cand = Some((d, j));
                    }
                }
            }
            let Some((d, j)) = cand else { continue };
            if d > max_dt {
                continue;
            }
            let (kt, kid) = kfs[j];
            let a = Anchor {
                keyframe: kid,
                fix: *fix,
                dt: fix.t - kt,
            };
            match best.get(&kid) {
                Some(prev) if prev.dt.abs() <= d => {}
                _ => {
                    best.insert(kid, a);
                }
            }
        }
    }
    if best.is_empty() {
        return Err(GeorefError::NoAssociations);
    }
    let mut pairs: Vec<Anchor> = best.into_values().collect();
    pairs.sort_by(|a, b| {
        map.keyframes[&a.keyframe]
            .t
            .total_cmp(&map.keyframes[&b.keyframe].t)
    });
    Ok(AnchorSet { pairs })
}

/// Reprojection residual `x − π(T_wc⁻¹ · λ)` over a pose block and a point block.
pub struct ReprojectionCost {
    pub camera: PinholeIntrinsics,
    pub observed: Vector2<f64>,
}

/// Camera-frame point and its derivatives with respect to the pose tangent
/// `(δθ, δt)` and to the world point.
pub(crate) fn camera_point(pose: &Pose, world: &Vector3<f64>) -> (Vector3<f64>, nalgebra::Matrix3x6<f64>, Matrix3<f64>) {
    let rt = pose.rotation_matrix().transpose();
    let d = world - pose.translation();
    let pc = rt * d;
    let mut dpose = nalgebra::Matrix3x6::zeros();
    dpose.fixed_view_mut::<3, 3>(0, 0).copy_from(&(rt * skew(&d)));
    dpose.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-rt));
    (pc, dpose, rt)
}

fn reprojection(
    camera: &PinholeIntrinsics,
    observed: &Vector2<f64>,
    pose: &Pose,
    world: &Vector3<f64>,
    residuals: &mut [f64],
    jacobians: Option<(&mut DMatrix<f64>, Option<&mut DMatrix<f64>>)>,
) -> Result<(), EvalFailure> {
    let (pc, dpose, dpoint) = camera_point(pose, world);
    let (px, jp) = camera.project_with_jacobian(&pc).map_err(|_| EvalFailure)?;
    residuals[0] = observed.x - px.x;
    residuals[1] = observed.y - px.y;
    if let Some((jpose, jpoint)) = jacobians {
        let a = -(jp * dpose);
        jpose.copy_from(&a);
        if let Some(jl) = jpoint {
            jl.copy_from(&(-(jp * dpoint)));
        }
    }
    Ok(())
}

impl CostFunction for ReprojectionCost {
    fn residual_dim(&self) -> usize {
        2
    }

    fn evaluate(&self, params: &[&[f64]], residuals: &mut [f64], jacobians: Option<&mut [DMatrix<f64>]>) -> Result<(), EvalFailure> {
        let pose = Pose::from_params(params[0]);
        let world = Vector3::new(params[1][0], params[1][1], params[1][2]);
        match jacobians {
            Some(js) => {
                let (a, b) = js.split_at_mut(1);
                reprojection(&self.camera, &self.observed, &pose, &world, residuals, Some((&mut a[0], Some(&mut b[0]))))
            }
            None => reprojection(&self.camera, &self.observed, &pose, &world, residuals, None),
        }
    }
}

/// Reprojection residual of a fixed world point; pose block only.
pub struct FixedPointReprojectionCost {
    pub camera: PinholeIntrinsics,
    pub observed: Vector2<f64>,
    pub world: Vector3<f64>,
}

impl CostFunction for FixedPointReprojectionCost {
    fn residual_dim(&self) -> usize {
        2
    }

    fn evaluate(&self, params: &[&[f64]], residuals: &mut [f64], jacobians: Option<&mut [DMatrix<f64>]>) -> Result<(), EvalFailure> {
        let pose = Pose::from_params(params[0]);
        let j = jacobians.map(|js| (&mut js[0], None));
        reprojection(&self.camera, &self.observed, &pose, &self.world, residuals, j)
    }
}

/// Positioning residual `p − t_wc` on a pose block.
pub struct PositionCost {
    pub target: Vector3<f64>,
}

impl CostFunction for PositionCost {
    fn residual_dim(&self) -> usize {
        3
    }

    fn evaluate(&self, params: &[&[f64]], residuals: &mut [f64], jacobians: Option<&mut [DMatrix<f64>]>) -> Result<(), EvalFailure> {
        for i in 0..3 {
            residuals[i] = self.target[i] - params[0][4 + i];
        }
        if let Some(js) = jacobians {
            js[0].fill(0.0);
            for i in 0..3 {
                js[0][(i, 3 + i)] = -1.0;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PnpOptions {
    pub min_points: usize,
    /// Huber threshold in pixels; `None` disables robustification.
    pub huber_px: Option<f64>,
    /// Maximum translation change from the initial pose, meters.
    pub max_translation_change: f64,
    pub solver: SolverOptions,
}

impl Default for PnpOptions {
    fn default() -> Self {
        Self {
            min_points: 6,
            huber_px: Some(2.0),
            max_translation_change: 2.0,
            solver: SolverOptions {
                exec: Execution::Sequential,
                ..Default::default()
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PnpObservation {
    pub world: Vector3<f64>,
    pub pixel: Vector2<f64>,
    pub sigma: f64,
}

/// Refines one camera-to-world pose against fixed world points.
pub fn pnp_register(
    camera: &PinholeIntrinsics,
    observations: &[PnpObservation],
    init: &Pose,
    opts: &PnpOptions,
) -> Result<(Pose, SolveReport), GeorefError> {
    if observations.len() < opts.min_points {
        return Err(GeorefError::TooFewPoints(observations.len(), opts.min_points));
    }
    let mut problem = Problem::new();
    let id = problem.add_pose_block(init);
    for o in observations {
        let w = DMatrix::from_diagonal_element(2, 2, 1.0 / o.sigma);
        let loss = opts.huber_px.map_or(Loss::Trivial, |h| Loss::Huber(h / o.sigma));
        problem.add_residual_block(
            Box::new(FixedPointReprojectionCost {
                camera: *camera,
                observed: o.pixel,
                world: o.world,
            }),
            &[id],
            Some(w),
            loss,
        )?;
    }
    let report = solve_lm(&mut problem, &opts.solver)?;
    let pose = problem.pose(id);
    let moved = pose.distance_to(init);
    if moved > opts.max_translation_change {
        return Err(GeorefError::DivergedFromInit(moved));
    }
    Ok((pose, report))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeorefOptions {
    /// Maximum fix-to-keyframe time difference, seconds.
    pub max_dt: f64,
    /// Overrides the per-observation pixel sigma when set.
    pub pixel_sigma: Option<f64>,
    /// Overrides the per-fix sigma when set.
    pub fix_sigma: Option<Vector3<f64>>,
    /// Huber threshold on reprojection residuals, pixels.
    pub huber_px: Option<f64>,
    /// Added to fix timestamps to express them on the SLAM clock.
    pub clock_offset: f64,
    /// NED origin `(lat, lon, alt)`; the first fix when `None`.
    pub origin: Option<(f64, f64, f64)>,
    pub solver: SolverOptions,
    pub pnp: PnpOptions,
    pub exec: Execution,
}

impl Default for GeorefOptions {
    fn default() -> Self {
        Self {
            max_dt: 0.1,
            pixel_sigma: None,
            fix_sigma: None,
            huber_px: Some(2.0),
            clock_offset: 0.0,
            origin: None,
            solver: SolverOptions::default(),
            pnp: PnpOptions::default(),
            exec: Execution::Parallel,
        }
    }
}

/// Joint refinement of the anchored keyframes and the landmarks they
/// observe. Everything else in the map is left untouched.
pub fn georef_bundle_adjust(
    map: &SparseMap,
    anchors: &AnchorSet,
    opts: &GeorefOptions,
) -> Result<(SparseMap, SolveReport), GeorefError> {
    if anchors.len() < 3 {
        return Err(GeorefError::InsufficientAnchors(anchors.len()));
    }
    let kf_ids = anchors.keyframes();
    let lm_ids = anchors.landmarks(map);
    let mut problem = Problem::new();
    let mut pose_blocks = BTreeMap::new();
    for id in &kf_ids {
        let kf = map
            .keyframes
            .get(id)
            .ok_or_else(|| GeorefError::InvalidMap(format!("anchor references unknown keyframe {id}")))?;
        pose_blocks.insert(*id, problem.add_pose_block(&kf.pose));
    }
    let mut point_blocks = BTreeMap::new();
    for id in &lm_ids {
        let b = problem.add_point_block(&map.landmarks[id]);
        problem.set_eliminate(b, true);
        point_blocks.insert(*id, b);
    }
    for o in &map.observations {
        let Some(&pb) = pose_blocks.get(&o.keyframe) else { continue };
        let Some(&lb) = point_blocks.get(&o.landmark) else { continue };
        let sigma = opts.pixel_sigma.unwrap_or(o.sigma);
        let w = DMatrix::from_diagonal_element(2, 2, 1.0 / sigma);
        let loss = opts.huber_px.map_or(Loss::Trivial, |h| Loss::Huber(h / sigma));
        problem.add_residual_block(
            Box::new(ReprojectionCost {
                camera: map.camera,
                observed: o.pixel,
            }),
            &[pb, lb],
            Some(w),
            loss,
        )?;
    }
    for a in &anchors.pairs {
        let sigma = opts.fix_sigma.unwrap_or(a.fix.sigma);
        let w = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(3, sigma.iter().map(|s| 1.0 / s)));
        problem.add_residual_block(
            Box::new(PositionCost { target: a.fix.position }),
            &[pose_blocks[&a.keyframe]],
            Some(w),
            Loss::Trivial,
        )?;
    }
    let report = solve_lm(&mut problem, &opts.solver)?;
    let mut out = map.clone();
    for (id, b) in &pose_blocks {
        out.keyframes.get_mut(id).unwrap().pose = problem.pose(*b);
    }
    for (id, b) in &point_blocks {
        *out.landmarks.get_mut(id).unwrap() = problem.point(*b);
    }
    Ok((out, report))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeorefReport {
    pub frame: LocalFrame,
    pub fixes: usize,
    pub anchors: usize,
    pub zeta_landmarks: usize,
    pub similarity: Similarity,
    pub bundle: SolveReport,
    pub pnp_registered: usize,
    pub init_rmse_px: f64,
    pub final_rmse_px: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeorefResult {
    pub trajectory: Trajectory,
    pub map: SparseMap,
    pub anchors: AnchorSet,
    pub report: GeorefReport,
}

/// Full geo-referencing: NED conversion, association, similarity
/// initialization, bundle adjustment, then PnP for the remaining keyframes.
pub fn georeference_full(
    map: &SparseMap,
    fixes: &[GeodeticFix],
    opts: &GeorefOptions,
) -> Result<GeorefResult, GeorefError> {
    map.validate()?;
    let first = fixes.first().ok_or(GeodesyError::EmptyInput("fixes"))?;
    let frame = match opts.origin {
        Some((lat, lon, alt)) => LocalFrame::new(lat, lon, alt)?,
        None => LocalFrame::at_fix(first)?,
    };
    let mut ned = fixes_to_ned(fixes, &frame)?;
    for f in ned.iter_mut() {
        f.t += opts.clock_offset;
    }
    let anchors = associate_fixes(map, &ned, opts.max_dt)?;
    if anchors.len() < 3 {
        return Err(GeorefError::InsufficientAnchors(anchors.len()));
    }
    let src: Vec<Vector3<f64>> = anchors
        .pairs
        .iter()
        .map(|a| *map.keyframes[&a.keyframe].pose.translation())
        .collect();
    let dst: Vec<Vector3<f64>> = anchors.pairs.iter().map(|a| a.fix.position).collect();
    let similarity = umeyama_align(&src, &dst)?;
    let aligned = map.transformed(&similarity);
    let zeta_kf = anchors.keyframes();
    let zeta_lm = anchors.landmarks(&aligned);
    let in_zeta = |o: &Observation| zeta_kf.contains(&o.keyframe);
    let init_rmse_px = aligned.reprojection_rmse(in_zeta);
    let (mut adjusted, bundle) = georef_bundle_adjust(&aligned, &anchors, opts)?;
    let final_rmse_px = adjusted.reprojection_rmse(in_zeta);

    // anchored trajectory used to initialize the remaining keyframes
    let anchored = Trajectory::new(
        adjusted
            .keyframes_by_time()
            .into_iter()
            .filter(|(_, id)| zeta_kf.contains(id))
            .map(|(t, id)| TimedPose {
                t,
                pose: adjusted.keyframes[&id].pose,
            })
            .collect(),
    )?;
    let mut per_kf: HashMap<u64, Vec<PnpObservation>> = HashMap::new();
    for o in &adjusted.observations {
        if zeta_kf.contains(&o.keyframe) || !zeta_lm.contains(&o.landmark) {
            continue;
        }
        per_kf.entry(o.keyframe).or_default().push(PnpObservation {
            world: adjusted.landmarks[&o.landmark],
            pixel: o.pixel,
            sigma: opts.pixel_sigma.unwrap_or(o.sigma),
        });
    }
    let remaining: Vec<(u64, f64)> = adjusted
        .keyframes_by_time()
        .into_iter()
        .filter(|(_, id)| !zeta_kf.contains(id))
        .map(|(t, id)| (id, t))
        .collect();
    let empty = Vec::new();
    let registered = par::map(opts.exec, &remaining, |(id, t)| {
        let init = anchored
            .interpolate(*t)
            .unwrap_or(aligned.keyframes[id].pose);
        let obs = per_kf.get(id).unwrap_or(&empty);
        pnp_register(&adjusted.camera, obs, &init, &opts.pnp).map(|(p, _)| (*id, p))
    });
    let mut pnp_registered = 0;
    for r in registered {
        let (id, pose) = r?;
        adjusted.keyframes.get_mut(&id).unwrap().pose = pose;
        pnp_registered += 1;
    }
    let trajectory = adjusted.trajectory()?;
    Ok(GeorefResult {
        trajectory,
        report: GeorefReport {
            frame,
            fixes: fixes.len(),
            anchors: anchors.len(),
            zeta_landmarks: zeta_lm.len(),
            similarity,
            bundle,
            pnp_registered,
            init_rmse_px,
            final_rmse_px,
        },
        map: adjusted,
        anchors,
    })
}
