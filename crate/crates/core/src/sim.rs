//! Synthetic surveys with known ground truth: height-field scenes with a
//! spectral texture, a swaying vehicle, SLAM-like sparse maps expressed in a
//! random similarity frame, noisy INS fixes and rendered push-broom cubes.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;

use nalgebra::{Matrix3, Unit, UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cube::{nearest_band, CubeData, HyperCube};
use crate::geodesy::{GeodesyError, GeodeticFix, LocalFrame};
use crate::geom::{GeomError, PinholeIntrinsics, Pose, PushBroomIntrinsics, TimedPose, Trajectory};
use crate::georef::{Keyframe, Observation, Similarity, SparseMap};
use crate::io::{SurveyBundle, SurveyManifest};
use crate::par::{self, Execution};
use crate::raycast::{Bvh, RaycastError, TriMesh};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("InvalidSpec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Geodesy(#[from] GeodesyError),
    #[error(transparent)]
    Raycast(#[from] RaycastError),
}

fn invalid(msg: impl Into<String>) -> SimError {
    SimError::InvalidSpec(msg.into())
}

/// Height field: Down coordinate of the seabed as a function of (north, east).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Terrain {
    Plane { depth: f64 },
    /// Tent-shaped ridge running north, centered on the footprint.
    Ridge { depth: f64, height: f64, width: f64 },
    /// Egg-crate relief `a·sin(2πn/p)·sin(2πe/p)`.
    Sinusoid { depth: f64, amplitude: f64, period: f64 },
}

impl Terrain {
    pub fn base_depth(&self) -> f64 {
        match *self {
            Terrain::Plane { depth } | Terrain::Ridge { depth, .. } | Terrain::Sinusoid { depth, .. } => depth,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum TextureSpec {
    /// The same spectrum everywhere, scaled by `level`.
    Constant { level: f64 },
    /// Two spectra alternating on squares of side `size` meters.
    Checker { size: f64 },
    /// Sum of random plane waves with wavelengths in `[scale, 4·scale]` meters.
    Noise { scale: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub terrain: Terrain,
    /// Tessellation step, meters.
    pub resolution: f64,
    /// `[north_min, north_max, east_min, east_max]`; derived from the
    /// trajectory when absent.
    pub footprint: Option<[f64; 4]>,
    pub texture: TextureSpec,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            terrain: Terrain::Plane { depth: 5.0 },
            resolution: 0.01,
            footprint: None,
            texture: TextureSpec::Noise { scale: 0.05 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectorySpec {
    pub duration: f64,
    pub speed: f64,
    /// Height of the RGB camera above the terrain base depth, meters.
    pub altitude: f64,
    pub heading_deg: f64,
    /// (north, east) of the first keyframe.
    pub start: [f64; 2],
    /// Number of parallel legs; more than one gives a lawn-mower pattern.
    pub legs: usize,
    pub leg_spacing: f64,
    /// (amplitude deg, period s) of the attitude sway about each axis.
    pub roll_sway: [f64; 2],
    pub pitch_sway: [f64; 2],
    pub yaw_sway: [f64; 2],
    /// (amplitude m, period s).
    pub altitude_sway: [f64; 2],
    pub rgb_hz: f64,
    pub uhi_hz: f64,
    pub ins_hz: f64,
    /// Time of the first keyframe, seconds.
    pub t0: f64,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        Self {
            duration: 60.0,
            speed: 0.1,
            altitude: 1.0,
            heading_deg: 0.0,
            start: [0.0, 0.0],
            legs: 1,
            leg_spacing: 2.0,
            roll_sway: [1.0, 7.0],
            pitch_sway: [0.7, 5.0],
            yaw_sway: [0.5, 11.0],
            altitude_sway: [0.05, 13.0],
            rgb_hz: 25.0,
            uhi_hz: 30.0,
            ins_hz: 1.0,
            t0: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorSpec {
    pub rgb_width: u32,
    pub rgb_height: u32,
    pub rgb_focal: f64,
    pub uhi_width: u32,
    pub uhi_focal: f64,
    pub bands: usize,
    /// First and last band center, nanometers.
    pub wavelength_range: [f64; 2],
    /// True RGB→UHI transform: `[tx, ty, tz, roll, pitch, yaw]`, meters and degrees.
    pub trel: [f64; 6],
    /// Error of the initial estimate written to the bundle: `[degrees, meters]`.
    pub trel_error: [f64; 2],
}

impl Default for SensorSpec {
    fn default() -> Self {
        Self {
            rgb_width: 960,
            rgb_height: 540,
            rgb_focal: 500.0,
            uhi_width: 1920,
            uhi_focal: 1000.0,
            bands: 16,
            wavelength_range: [400.0, 700.0],
            trel: [0.05, -0.15, 0.02, 0.5, -0.8, 0.3],
            trel_error: [0.0, 0.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    /// Keypoint noise, pixels.
    pub pixel: f64,
    /// INS position noise per axis, meters.
    pub ins: f64,
    /// Relative spectral noise.
    pub spectral: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            pixel: 0.5,
            ins: 0.3,
            spectral: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapSpec {
    /// Landmarks per square meter of footprint.
    pub landmark_density: f64,
    /// Observations beyond this slant range are dropped, meters.
    pub max_range: f64,
    /// Scale of the SLAM frame; random in [0.2, 5] when absent.
    pub similarity_scale: Option<f64>,
    /// Keep the SLAM frame identical to NED.
    pub identity_similarity: bool,
    /// Geodetic origin of the NED frame: `[lat, lon, alt]`.
    pub ned_origin: [f64; 3],
    /// Pixel sigma stored with each observation.
    pub stored_pixel_sigma: f64,
}

impl Default for MapSpec {
    fn default() -> Self {
        Self {
            landmark_density: 50.0,
            max_range: 10.0,
            similarity_scale: None,
            identity_similarity: false,
            ned_origin: [63.44, 10.40, 0.0],
            stored_pixel_sigma: 1.0,
        }
    }
}

/// Complete simulator configuration, read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub seed: u64,
    pub scene: SceneSpec,
    pub trajectory: TrajectorySpec,
    pub sensors: SensorSpec,
    pub noise: NoiseSpec,
    pub map: MapSpec,
}

impl SimConfig {
    pub fn from_toml(text: &str) -> Result<Self, SimError> {
        toml::from_str(text).map_err(|e| invalid(e.message().to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let t = &self.trajectory;
        for (name, v) in [("rgb_hz", t.rgb_hz), ("uhi_hz", t.uhi_hz), ("ins_hz", t.ins_hz), ("altitude", t.altitude), ("duration", t.duration)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} must be positive")));
            }
        }
        if !(t.speed >= 0.0 && t.speed.is_finite()) || t.legs == 0 || (t.legs > 1 && !(t.leg_spacing > 0.0)) {
            return Err(invalid("speed, legs and leg_spacing must be positive"));
        }
        if !(self.scene.resolution > 0.0) {
            return Err(invalid("resolution must be positive"));
        }
        let s = &self.sensors;
        if s.bands == 0 || !(s.wavelength_range[1] > s.wavelength_range[0]) && s.bands > 1 {
            return Err(invalid("bands must be positive over an increasing wavelength range"));
        }
        let n = &self.noise;
        if [n.pixel, n.ins, n.spectral].iter().any(|v| !(*v >= 0.0)) {
            return Err(invalid("noise levels must be non-negative"));
        }
        let m = &self.map;
        if !(m.landmark_density > 0.0) || !(m.max_range > 0.0) || !(m.stored_pixel_sigma > 0.0) {
            return Err(invalid("landmark density, range and stored sigma must be positive"));
        }
        if let Some(sc) = m.similarity_scale {
            if !(sc > 0.0 && sc.is_finite()) {
                return Err(invalid("similarity scale must be positive"));
            }
        }
        match self.scene.texture {
            TextureSpec::Constant { level } if !(level > 0.0) => return Err(invalid("texture level must be positive")),
            TextureSpec::Checker { size: v } | TextureSpec::Noise { scale: v } if !(v > 0.0) => {
                return Err(invalid("texture size must be positive"))
            }
            _ => {}
        }
        match self.scene.terrain {
            Terrain::Ridge { height, width, .. } if !(height.is_finite() && width > 0.0) => Err(invalid("ridge width must be positive")),
            Terrain::Sinusoid { period, .. } if !(period > 0.0) => Err(invalid("sinusoid period must be positive")),
            _ => Ok(()),
        }
    }

    pub fn rgb_camera(&self) -> PinholeIntrinsics {
        let s = &self.sensors;
        PinholeIntrinsics::ideal(
            s.rgb_focal,
            s.rgb_focal,
            (s.rgb_width as f64 - 1.0) / 2.0,
            (s.rgb_height as f64 - 1.0) / 2.0,
            s.rgb_width,
            s.rgb_height,
        )
    }

    pub fn uhi_lens(&self) -> PushBroomIntrinsics {
        let s = &self.sensors;
        PushBroomIntrinsics {
            focal: s.uhi_focal,
            principal: (s.uhi_width as f64 - 1.0) / 2.0,
            width: s.uhi_width,
            band_count: s.bands as u32,
        }
    }

    pub fn wavelengths(&self) -> Vec<f64> {
        let [lo, hi] = self.sensors.wavelength_range;
        let b = self.sensors.bands;
        if b == 1 {
            return vec![lo];
        }
        (0..b).map(|k| lo + (hi - lo) * k as f64 / (b - 1) as f64).collect()
    }

    pub fn trel_true(&self) -> Pose {
        let v = self.sensors.trel;
        Pose::new(
            UnitQuaternion::from_euler_angles(v[3].to_radians(), v[4].to_radians(), v[5].to_radians()),
            Vector3::new(v[0], v[1], v[2]),
        )
    }
}

/// Independent generator for `(domain, index)`, so results do not depend on
/// scheduling.
fn stream(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut z = seed ^ domain.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

const D_TEXTURE: u64 = 1;
const D_LANDMARKS: u64 = 2;
const D_OBS: u64 = 3;
const D_FIXES: u64 = 4;
const D_SCANLINE: u64 = 5;
const D_FRAME: u64 = 6;
const D_TREL: u64 = 7;

#[derive(Debug, Clone, Copy)]
struct Wave {
    k: Vector2<f64>,
    phase: f64,
    amp: f64,
}

fn waves(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<Wave> {
    (0..n)
        .map(|_| {
            let lambda = rng.random_range(scale..4.0 * scale);
            let dir = rng.random_range(0.0..PI);
            Wave {
                k: Vector2::new(dir.cos(), dir.sin()) * (2.0 * PI / lambda),
                phase: rng.random_range(0.0..2.0 * PI),
                amp: rng.random_range(0.5..1.0),
            }
        })
        .collect()
}

fn field(waves: &[Wave], n: f64, e: f64) -> f64 {
    let total: f64 = waves.iter().map(|w| w.amp).sum();
    waves.iter().map(|w| w.amp * (w.k.x * n + w.k.y * e + w.phase).cos()).sum::<f64>() / total
}

/// Spectral texture: one reflectance spectrum per (north, east).
#[derive(Debug, Clone)]
pub struct Texture {
    kind: TextureSpec,
    base: Vec<f64>,
    tilt: Vec<f64>,
    brightness: Vec<Wave>,
    tint: Vec<Wave>,
}

impl Texture {
    pub fn new(spec: TextureSpec, wavelengths: &[f64], seed: u64) -> Self {
        let mut rng = stream(seed, D_TEXTURE, 0);
        let b = wavelengths.len();
        let x = |k: usize| if b > 1 { k as f64 / (b - 1) as f64 } else { 0.5 };
        let base = (0..b).map(|k| 0.45 + 0.2 * (PI * x(k)).sin()).collect();
        let tilt = (0..b).map(|k| 2.0 * x(k) - 1.0).collect();
        let scale = match spec {
            TextureSpec::Noise { scale } => scale,
            _ => 1.0,
        };
        Self {
            kind: spec,
            base,
            tilt,
            brightness: waves(&mut rng, 24, scale),
            tint: waves(&mut rng, 12, 2.0 * scale),
        }
    }

    pub fn bands(&self) -> usize {
        self.base.len()
    }

    /// Writes the spectrum at (north, east); values lie in (0, 1).
    pub fn sample(&self, n: f64, e: f64, out: &mut [f32]) {
        match self.kind {
            TextureSpec::Constant { level } => {
                for (o, b) in out.iter_mut().zip(&self.base) {
                    *o = (level * b) as f32;
                }
            }
            TextureSpec::Checker { size } => {
                let dark = ((n / size).floor() + (e / size).floor()).rem_euclid(2.0) == 1.0;
                for ((o, b), t) in out.iter_mut().zip(&self.base).zip(&self.tilt) {
                    *o = if dark { 0.3 * b + 0.05 * (1.0 - t) } else { 1.2 * b + 0.1 * t } as f32;
                }
            }
            TextureSpec::Noise { .. } => {
                let f1 = field(&self.brightness, n, e);
                let f2 = field(&self.tint, n, e);
                for ((o, b), t) in out.iter_mut().zip(&self.base).zip(&self.tilt) {
                    *o = (b * (1.0 + 0.8 * f1) + 0.08 * t * f2) as f32;
                }
            }
        }
    }

    pub fn spectrum(&self, n: f64, e: f64) -> Vec<f32> {
        let mut v = vec![0.0; self.bands()];
        self.sample(n, e, &mut v);
        v
    }
}

/// Tessellated scene with its analytic description.
#[derive(Debug, Clone)]
pub struct Scene {
    pub terrain: Terrain,
    /// `[north_min, north_max, east_min, east_max]`, snapped to the resolution.
    pub footprint: [f64; 4],
    pub resolution: f64,
    pub mesh: TriMesh,
    pub texture: Texture,
    ridge_center: f64,
}

impl Scene {
    /// Down coordinate of the surface at (north, east).
    pub fn down(&self, n: f64, e: f64) -> f64 {
        match self.terrain {
            Terrain::Plane { depth } => depth,
            Terrain::Ridge { depth, height, width } => depth - height * (1.0 - (e - self.ridge_center).abs() / (width / 2.0)).max(0.0),
            Terrain::Sinusoid { depth, amplitude, period } => depth + amplitude * (2.0 * PI * n / period).sin() * (2.0 * PI * e / period).sin(),
        }
    }

    pub fn contains(&self, n: f64, e: f64) -> bool {
        let f = self.footprint;
        n >= f[0] && n <= f[1] && e >= f[2] && e <= f[3]
    }

    /// Closed-form first hit for plane and ridge scenes; `None` for sinusoids.
    pub fn analytic_hit(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<Option<Vector3<f64>>> {
        // pieces of Down = a + b·e valid on [lo, hi]
        let pieces: Vec<(f64, f64, f64, f64)> = match self.terrain {
            Terrain::Plane { depth } => vec![(depth, 0.0, f64::NEG_INFINITY, f64::INFINITY)],
            Terrain::Ridge { depth, height, width } => {
                let (c, w) = (self.ridge_center, width / 2.0);
                let s = height / w;
                vec![
                    (depth, 0.0, f64::NEG_INFINITY, c - w),
                    (depth - height + s * c, -s, c - w, c),
                    (depth - height - s * c, s, c, c + w),
                    (depth, 0.0, c + w, f64::INFINITY),
                ]
            }
            Terrain::Sinusoid { .. } => return None,
        };
        let mut best: Option<(f64, Vector3<f64>)> = None;
        for (a, b, lo, hi) in pieces {
            let den = d.z - b * d.y;
            if den.abs() < 1e-15 {
                continue;
            }
            let t = (a + b * o.y - o.z) / den;
            if !(t > 1e-6) || best.is_some_and(|(bt, _)| bt <= t) {
                continue;
            }
            let p = o + d * t;
            let tol = 1e-9;
            if p.y >= lo - tol && p.y <= hi + tol && self.contains(p.x, p.y) {
                best = Some((t, p));
            }
        }
        Some(best.map(|(_, p)| p))
    }
}

/// Builds the scene over an explicit footprint.
pub fn build_scene(spec: &SceneSpec, footprint: [f64; 4], wavelengths: &[f64], seed: u64) -> Result<Scene, SimError> {
    let r = spec.resolution;
    if !(r > 0.0) {
        return Err(invalid("resolution must be positive"));
    }
    if !(footprint[1] > footprint[0] && footprint[3] > footprint[2]) || footprint.iter().any(|v| !v.is_finite()) {
        return Err(invalid("footprint must be a non-empty rectangle"));
    }
    let n0 = (footprint[0] / r).floor();
    let e0 = (footprint[2] / r).floor();
    let rows = ((footprint[1] / r).ceil() - n0) as usize;
    let cols = ((footprint[3] / r).ceil() - e0) as usize;
    if rows.saturating_mul(cols) > 50_000_000 {
        return Err(invalid("tessellation exceeds 5e7 cells"));
    }
    let fp = [n0 * r, (n0 + rows as f64) * r, e0 * r, (e0 + cols as f64) * r];
    let ridge_center = (e0 + (cols / 2) as f64) * r;
    if let Terrain::Ridge { width, .. } = spec.terrain {
        let half = width / 2.0 / r;
        if (half - half.round()).abs() > 1e-9 {
            return Err(invalid("ridge half-width must be a multiple of the resolution"));
        }
    }
    let texture = Texture::new(spec.texture, wavelengths, seed);
    let mut scene = Scene {
        terrain: spec.terrain,
        footprint: fp,
        resolution: r,
        mesh: TriMesh {
            vertices: Vec::new(),
            faces: Vec::new(),
            colors: None,
        },
        texture,
        ridge_center,
    };
    let rgb = [650.0, 550.0, 450.0].map(|nm| nearest_band(wavelengths, nm));
    let mut vertices = Vec::with_capacity((rows + 1) * (cols + 1));
    let mut colors = Vec::with_capacity((rows + 1) * (cols + 1));
    let mut spec_buf = vec![0f32; wavelengths.len()];
    for i in 0..=rows {
        for j in 0..=cols {
            let (n, e) = ((n0 + i as f64) * r, (e0 + j as f64) * r);
            vertices.push(Vector3::new(n, e, scene.down(n, e)));
            scene.texture.sample(n, e, &mut spec_buf);
            colors.push(rgb.map(|b| (spec_buf[b] as f64 * 255.0).round().clamp(0.0, 255.0) as u8));
        }
    }
    let mut faces = Vec::with_capacity(2 * rows * cols);
    let k = |a: usize, b: usize| (a * (cols + 1) + b) as u32;
    for i in 0..rows {
        for j in 0..cols {
            faces.push([k(i, j), k(i + 1, j), k(i + 1, j + 1)]);
            faces.push([k(i, j), k(i + 1, j + 1), k(i, j + 1)]);
        }
    }
    scene.mesh = TriMesh::new(vertices, faces, Some(colors))?.0;
    Ok(scene)
}

/// Path of the vehicle: straight legs joined by semicircular turns.
#[derive(Debug, Clone)]
struct Path {
    start: Vector2<f64>,
    heading: f64,
    leg_length: f64,
    spacing: f64,
    legs: usize,
}

impl Path {
    fn new(t: &TrajectorySpec) -> Self {
        let turn = PI * t.leg_spacing / 2.0;
        let total = t.speed * t.duration;
        let legs = t.legs.max(1);
        let leg_length = if legs == 1 { total } else { ((total - (legs - 1) as f64 * turn) / legs as f64).max(0.0) };
        Self {
            start: Vector2::new(t.start[0], t.start[1]),
            heading: t.heading_deg.to_radians(),
            leg_length,
            spacing: t.leg_spacing,
            legs,
        }
    }

    /// (north, east) and heading at arc length `s`.
    fn at(&self, s: f64) -> (Vector2<f64>, f64) {
        let fwd = Vector2::new(self.heading.cos(), self.heading.sin());
        let right = Vector2::new(-fwd.y, fwd.x);
        let turn = PI * self.spacing / 2.0;
        let period = self.leg_length + turn;
        let mut leg = if period > 0.0 { (s / period).floor() as usize } else { 0 };
        leg = leg.min(self.legs - 1);
        let local = s - leg as f64 * period;
        let dir = if leg % 2 == 0 { 1.0 } else { -1.0 };
        let leg_start = self.start + right * (leg as f64 * self.spacing) + if leg % 2 == 1 { fwd * self.leg_length } else { Vector2::zeros() };
        if local <= self.leg_length || leg == self.legs - 1 {
            return (leg_start + fwd * dir * local, self.heading + if dir < 0.0 { PI } else { 0.0 });
        }
        // turn toward the right of the current leg
        let a = (local - self.leg_length) / (self.spacing / 2.0);
        let end = leg_start + fwd * dir * self.leg_length;
        let center = end + right * (self.spacing / 2.0);
        let p = center - right * (self.spacing / 2.0) * a.cos() + fwd * dir * (self.spacing / 2.0) * a.sin();
        let h = self.heading + if dir < 0.0 { PI } else { 0.0 } + a * dir;
        (p, h)
    }
}

/// Truth pose of the RGB camera at time `t`: camera x starboard, y aft, z down.
pub fn rgb_pose(spec: &TrajectorySpec, base_depth: f64, t: f64) -> Pose {
    let path = Path::new(spec);
    let tau = t - spec.t0;
    let (p, heading) = path.at(spec.speed * tau);
    let sway = |a: [f64; 2]| a[0] * (2.0 * PI * tau / a[1]).sin();
    let (fwd, right) = (Vector3::new(heading.cos(), heading.sin(), 0.0), Vector3::new(-heading.sin(), heading.cos(), 0.0));
    let level = Matrix3::from_columns(&[right, -fwd, Vector3::z()]);
    let level = UnitQuaternion::from_matrix(&level);
    let roll = UnitQuaternion::from_axis_angle(&-Vector3::y_axis(), sway(spec.roll_sway).to_radians());
    let pitch = UnitQuaternion::from_axis_angle(&Vector3::x_axis(), sway(spec.pitch_sway).to_radians());
    let yaw = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), sway(spec.yaw_sway).to_radians());
    let down = base_depth - spec.altitude + sway(spec.altitude_sway);
    Pose::new(level * yaw * pitch * roll, Vector3::new(p.x, p.y, down))
}

fn keyframe_times(spec: &TrajectorySpec) -> Vec<f64> {
    let n = (spec.duration * spec.rgb_hz + 1e-9).floor() as usize;
    (0..=n).map(|k| spec.t0 + k as f64 / spec.rgb_hz).collect()
}

fn rate_times(spec: &TrajectorySpec, hz: f64) -> Vec<f64> {
    let n = (spec.duration * hz + 1e-9).floor() as usize;
    (0..=n).map(|k| spec.t0 + k as f64 / hz).collect()
}

/// Footprint covering every camera ray of the survey, with a margin.
pub fn auto_footprint(cfg: &SimConfig) -> [f64; 4] {
    let t = &cfg.trajectory;
    let s = &cfg.sensors;
    let tilt = (t.roll_sway[0].abs() + t.pitch_sway[0].abs() + t.yaw_sway[0].abs()).to_radians();
    let half_uhi = (s.uhi_width as f64 / 2.0 / s.uhi_focal).atan();
    let half_rgb = (s.rgb_width.max(s.rgb_height) as f64 / 2.0 / s.rgb_focal).atan();
    let relief = match cfg.scene.terrain {
        Terrain::Plane { .. } => 0.0,
        Terrain::Ridge { height, .. } => height.abs(),
        Terrain::Sinusoid { amplitude, .. } => amplitude.abs(),
    };
    let h = t.altitude + t.altitude_sway[0].abs() + relief;
    let reach = h * (half_uhi.max(half_rgb) + tilt).min(1.4).tan() * 1.1 + 0.1 + s.trel[..3].iter().map(|v| v.abs()).sum::<f64>();
    let path = Path::new(t);
    let total = t.speed * t.duration;
    let steps = ((total / 0.05).ceil() as usize).clamp(1, 1_000_000);
    let mut fp = [f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY];
    for i in 0..=steps {
        let (p, _) = path.at(total * i as f64 / steps as f64);
        fp = [fp[0].min(p.x - reach), fp[1].max(p.x + reach), fp[2].min(p.y - reach), fp[3].max(p.y + reach)];
    }
    fp
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// RGB camera poses in NED at every keyframe.
    pub trajectory: Trajectory,
    /// NED → SLAM frame.
    pub similarity: Similarity,
    pub t_rel: Pose,
    pub frame: LocalFrame,
    /// Landmark positions in NED, by id.
    pub landmarks: BTreeMap<u64, Vector3<f64>>,
    pub terrain: Terrain,
}

impl GroundTruth {
    /// Scale a geo-referencing run should recover (SLAM → NED).
    pub fn expected_scale(&self) -> f64 {
        1.0 / self.similarity.scale
    }
}

#[derive(Debug, Clone)]
pub struct Survey {
    pub bundle: SurveyBundle,
    pub truth: GroundTruth,
    pub scene: Scene,
}

fn random_similarity(cfg: &SimConfig, seed: u64) -> Similarity {
    if cfg.map.identity_similarity {
        return Similarity {
            scale: cfg.map.similarity_scale.unwrap_or(1.0),
            ..Similarity::identity()
        };
    }
    let mut rng = stream(seed, D_FRAME, 0);
    let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
    let rotation = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[3], q[0], q[1], q[2]));
    let scale = (rng.random_range(0.2f64.ln()..5f64.ln())).exp();
    let translation = Vector3::new(rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0));
    Similarity {
        scale: cfg.map.similarity_scale.unwrap_or(scale),
        rotation,
        translation,
    }
}

fn perturbed_trel(truth: &Pose, err: [f64; 2], seed: u64) -> Pose {
    if err == [0.0, 0.0] {
        return *truth;
    }
    let mut rng = stream(seed, D_TREL, 0);
    let unit = |rng: &mut ChaCha8Rng| {
        let v = Vector3::new(StandardNormal.sample(rng), StandardNormal.sample(rng), StandardNormal.sample(rng));
        Unit::new_normalize(v)
    };
    let axis = unit(&mut rng);
    let dir = unit(&mut rng);
    truth.compose(&Pose::new(UnitQuaternion::from_axis_angle(&axis, err[0].to_radians()), dir.into_inner() * err[1]))
}

/// Renders a full survey bundle and its ground truth.
pub fn simulate_survey(cfg: &SimConfig, exec: Execution) -> Result<Survey, SimError> {
    cfg.validate()?;
    let seed = cfg.seed;
    let t = &cfg.trajectory;
    let wavelengths = cfg.wavelengths();
    let footprint = cfg.scene.footprint.unwrap_or_else(|| auto_footprint(cfg));
    let scene = build_scene(&cfg.scene, footprint, &wavelengths, seed)?;
    let base = cfg.scene.terrain.base_depth();

    let times = keyframe_times(t);
    let truth_traj = Trajectory::new(times.iter().map(|&tk| TimedPose { t: tk, pose: rgb_pose(t, base, tk) }).collect())?;
    for s in truth_traj.samples() {
        let p = s.pose.translation();
        if !scene.contains(p.x, p.y) {
            return Err(invalid(format!("vehicle at ({:.2}, {:.2}) leaves the scene footprint", p.x, p.y)));
        }
    }

    // landmarks on the surface, kept when seen by at least two keyframes
    let camera = cfg.rgb_camera();
    let fp = scene.footprint;
    let area = (fp[1] - fp[0]) * (fp[3] - fp[2]);
    let count = (cfg.map.landmark_density * area).round() as usize;
    let mut rng = stream(seed, D_LANDMARKS, 0);
    let candidates: Vec<Vector3<f64>> = (0..count)
        .map(|_| {
            let n = rng.random_range(fp[0]..fp[1]);
            let e = rng.random_range(fp[2]..fp[3]);
            Vector3::new(n, e, scene.down(n, e))
        })
        .collect();
    let kf_poses: Vec<Pose> = truth_traj.samples().iter().map(|s| s.pose).collect();
    let max_range = cfg.map.max_range;
    let pixel = Normal::new(0.0, cfg.noise.pixel).map_err(|e| invalid(e.to_string()))?;
    let per_kf: Vec<Vec<(usize, Vector2<f64>)>> = par::map_range(exec, kf_poses.len(), |k| {
        let inv = kf_poses[k].inverse();
        let mut rng = stream(seed, D_OBS, k as u64);
        let mut out = Vec::new();
        for (i, x) in candidates.iter().enumerate() {
            let p = inv.apply(x);
            if p.z <= 0.0 || p.norm() > max_range {
                continue;
            }
            let Ok(px) = camera.project(&p) else { continue };
            if px.x < 0.0 || px.y < 0.0 || px.x >= camera.width as f64 || px.y >= camera.height as f64 {
                continue;
            }
            let noise = Vector2::new(pixel.sample(&mut rng), pixel.sample(&mut rng));
            out.push((i, px + noise));
        }
        out
    });
    let mut seen: HashMap<usize, usize> = HashMap::new();
    for obs in &per_kf {
        for (i, _) in obs {
            *seen.entry(*i).or_default() += 1;
        }
    }
    let similarity = random_similarity(cfg, seed);
    let mut map = SparseMap {
        camera,
        keyframes: BTreeMap::new(),
        landmarks: BTreeMap::new(),
        observations: Vec::new(),
    };
    let mut truth_landmarks = BTreeMap::new();
    for (i, x) in candidates.iter().enumerate() {
        if seen.get(&i).copied().unwrap_or(0) >= 2 {
            truth_landmarks.insert(i as u64, *x);
            map.landmarks.insert(i as u64, similarity.apply(x));
        }
    }
    for (k, s) in truth_traj.samples().iter().enumerate() {
        map.keyframes.insert(
            k as u64,
            Keyframe {
                t: s.t,
                pose: similarity.apply_pose(&s.pose),
            },
        );
        for (i, px) in &per_kf[k] {
            if truth_landmarks.contains_key(&(*i as u64)) {
                map.observations.push(Observation {
                    keyframe: k as u64,
                    landmark: *i as u64,
                    pixel: *px,
                    sigma: cfg.map.stored_pixel_sigma,
                });
            }
        }
    }

    // INS fixes: the RGB camera position with Gaussian noise
    let [lat, lon, alt] = cfg.map.ned_origin;
    let frame = LocalFrame::new(lat, lon, alt)?;
    let ins = Normal::new(0.0, cfg.noise.ins).map_err(|e| invalid(e.to_string()))?;
    let declared = if cfg.noise.ins > 0.0 { cfg.noise.ins } else { 0.01 };
    let fixes: Vec<GeodeticFix> = rate_times(t, t.ins_hz)
        .into_iter()
        .enumerate()
        .map(|(k, tf)| {
            let mut rng = stream(seed, D_FIXES, k as u64);
            let p = truth_traj.interpolate(tf).map(|p| *p.translation())?;
            let noisy = p + Vector3::new(ins.sample(&mut rng), ins.sample(&mut rng), ins.sample(&mut rng));
            let (la, lo, al) = frame.ned_to_geodetic(&noisy);
            Ok(GeodeticFix {
                t: tf,
                lat: la,
                lon: lo,
                alt: al,
                sigma: Vector3::repeat(declared),
            })
        })
        .collect::<Result<_, GeomError>>()?;

    // push-broom cube
    let lens = cfg.uhi_lens();
    let t_rel = cfg.trel_true();
    let rays: Vec<Vector3<f64>> = (0..lens.width).map(|u| lens.ray(u as f64)).collect::<Result<_, _>>()?;
    let bvh = Bvh::build(&scene.mesh)?;
    let line_times = rate_times(t, t.uhi_hz);
    let bands = wavelengths.len();
    let width = lens.width as usize;
    let spectral = cfg.noise.spectral;
    let lines: Vec<Vec<f32>> = par::map_range(exec, line_times.len(), |s| {
        let pose = truth_traj.interpolate(line_times[s]).expect("inside span").compose(&t_rel);
        let r = pose.rotation_matrix();
        let mut rng = stream(seed, D_SCANLINE, s as u64);
        let mut out = vec![0f32; bands * width];
        let mut buf = vec![0f32; bands];
        for (u, ray) in rays.iter().enumerate() {
            let d = r * ray;
            let hit = match scene.analytic_hit(pose.translation(), &d) {
                Some(h) => h,
                None => bvh.intersect(pose.translation(), &d).map(|h| h.point),
            };
            let Some(p) = hit else { continue };
            scene.texture.sample(p.x, p.y, &mut buf);
            for (b, v) in buf.iter().enumerate() {
                let z: f64 = StandardNormal.sample(&mut rng);
                out[b * width + u] = (*v as f64 * (1.0 + spectral * z)) as f32;
            }
        }
        out
    });
    let cube = HyperCube::new(width, line_times.len(), bands, CubeData::F32(lines.concat()), wavelengths, line_times)
        .map_err(|e| invalid(e.to_string()))?
        .with_lens(lens);

    let bundle = SurveyBundle {
        manifest: SurveyManifest {
            ned_origin: Some(cfg.map.ned_origin),
            ..Default::default()
        },
        map,
        fixes,
        cube,
        mesh: scene.mesh.clone(),
        t_rel: perturbed_trel(&t_rel, cfg.sensors.trel_error, seed),
    };
    let truth = GroundTruth {
        trajectory: truth_traj,
        similarity,
        t_rel,
        frame,
        landmarks: truth_landmarks,
        terrain: cfg.scene.terrain,
    };
    Ok(Survey { bundle, truth, scene })
}

/// Summary of the ground truth written beside a simulated bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthSummary {
    /// Scale of the SLAM frame relative to NED.
    pub slam_scale: f64,
    /// Scale a geo-referencing run should recover.
    pub expected_scale: f64,
    pub slam_rotation_xyzw: [f64; 4],
    pub slam_translation: [f64; 3],
    pub keyframes: usize,
    pub landmarks: usize,
    pub observations: usize,
    pub scanlines: usize,
    pub fixes: usize,
}

impl Survey {
    pub fn summary(&self) -> TruthSummary {
        let s = &self.truth.similarity;
        let q = s.rotation.coords;
        TruthSummary {
            slam_scale: s.scale,
            expected_scale: self.truth.expected_scale(),
            slam_rotation_xyzw: [q[0], q[1], q[2], q[3]],
            slam_translation: [s.translation.x, s.translation.y, s.translation.z],
            keyframes: self.bundle.map.keyframes.len(),
            landmarks: self.bundle.map.landmarks.len(),
            observations: self.bundle.map.observations.len(),
            scanlines: self.bundle.cube.lines(),
            fixes: self.bundle.fixes.len(),
        }
    }
}
