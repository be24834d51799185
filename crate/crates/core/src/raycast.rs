//! Ray–mesh intersection and hyperspectral point-cloud construction.
//!
//! Triangles are tested with the watertight algorithm of Woop, Benthin and
//! Wald (2013) in double precision, so rays through a shared edge or vertex
//! never slip between neighbouring faces. A median-split BVH stored in
//! depth-first order keeps queries logarithmic in the face count.

use nalgebra::Vector3;
use thiserror::Error;

use crate::cube::HyperCube;
use crate::geom::{GeomError, Pose, PushBroomIntrinsics, Trajectory};
use crate::par::{self, Execution};

/// Hits closer than this along the ray are ignored.
pub const T_MIN: f64 = 1e-6;

const LEAF_SIZE: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RaycastError {
    #[error("EmptyMesh")]
    EmptyMesh,
    #[error("InvalidMesh: {0}")]
    InvalidMesh(String),
    #[error("EmptyOutput: no ray hit the mesh")]
    EmptyOutput,
    #[error("InvalidInput: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Geom(#[from] GeomError),
}

/// Triangle mesh in the world frame.
#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub faces: Vec<[u32; 3]>,
    pub colors: Option<Vec<[u8; 3]>>,
}

impl TriMesh {
    /// Validates indices and drops zero-area faces; returns the mesh and the
    /// number of faces removed.
    pub fn new(
        vertices: Vec<Vector3<f64>>,
        faces: Vec<[u32; 3]>,
        colors: Option<Vec<[u8; 3]>>,
    ) -> Result<(Self, usize), RaycastError> {
        if let Some(c) = &colors {
            if c.len() != vertices.len() {
                return Err(RaycastError::InvalidMesh(format!(
                    "{} colors for {} vertices",
                    c.len(),
                    vertices.len()
                )));
            }
        }
        if let Some(i) = vertices.iter().position(|v| !v.iter().all(|x| x.is_finite())) {
            return Err(RaycastError::InvalidMesh(format!("vertex {i} is not finite")));
        }
        let n = vertices.len();
        let mut kept = Vec::with_capacity(faces.len());
        for (i, f) in faces.iter().enumerate() {
            if f.iter().any(|&v| v as usize >= n) {
                return Err(RaycastError::InvalidMesh(format!("face {i} references a missing vertex")));
            }
            let [a, b, c] = f.map(|v| vertices[v as usize]);
            if (b - a).cross(&(c - a)).norm() > 0.0 {
                kept.push(*f);
            }
        }
        let removed = faces.len() - kept.len();
        Ok((
            Self {
                vertices,
                faces: kept,
                colors,
            },
            removed,
        ))
    }

    pub fn num_faces(&self) -> usize {
        self.faces.len()
    }

    pub fn triangle(&self, face: usize) -> [Vector3<f64>; 3] {
        self.faces[face].map(|v| self.vertices[v as usize])
    }

    /// Axis-aligned bounds of the vertices.
    pub fn bounds(&self) -> Option<(Vector3<f64>, Vector3<f64>)> {
        let first = *self.vertices.first()?;
        Some(self.vertices.iter().fold((first, first), |(lo, hi), v| (lo.inf(v), hi.sup(v))))
    }

    /// Barycentric interpolation of the vertex colors of `face`.
    pub fn color_at(&self, face: usize, bary: [f64; 3]) -> Option<[f64; 3]> {
        let colors = self.colors.as_ref()?;
        let mut out = [0.0; 3];
        for (k, &v) in self.faces[face].iter().enumerate() {
            let c = colors[v as usize];
            for ch in 0..3 {
                out[ch] += bary[k] * c[ch] as f64;
            }
        }
        Some(out)
    }
}

/// One ray–mesh intersection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub face: u32,
    pub point: Vector3<f64>,
    /// Barycentric weights of the face's three vertices.
    pub bary: [f64; 3],
}

/// Ray with the per-ray constants of the watertight test and slab test.
#[derive(Debug, Clone, Copy)]
pub struct Ray {
    origin: [f64; 3],
    inv_dir: [f64; 3],
    k: [usize; 3],
    shear: [f64; 3],
}

impl Ray {
    pub fn new(origin: &Vector3<f64>, dir: &Vector3<f64>) -> Self {
        let d = [dir.x, dir.y, dir.z];
        let mut kz = 0;
        for i in 1..3 {
            if d[i].abs() > d[kz].abs() {
                kz = i;
            }
        }
        let mut kx = (kz + 1) % 3;
        let mut ky = (kx + 1) % 3;
        if d[kz] < 0.0 {
            std::mem::swap(&mut kx, &mut ky);
        }
        Self {
            origin: [origin.x, origin.y, origin.z],
            inv_dir: d.map(|v| 1.0 / v),
            k: [kx, ky, kz],
            shear: [d[kx] / d[kz], d[ky] / d[kz], 1.0 / d[kz]],
        }
    }

    /// Watertight ray–triangle test; returns `(t, barycentrics)`.
    #[inline(always)]
    fn triangle(&self, tri: &[[f64; 3]; 3]) -> Option<(f64, [f64; 3])> {
        let [kx, ky, kz] = self.k;
        let [sx, sy, sz] = self.shear;
        let o = &self.origin;
        let rel = |v: &[f64; 3]| [v[0] - o[0], v[1] - o[1], v[2] - o[2]];
        let a = rel(&tri[0]);
        let b = rel(&tri[1]);
        let c = rel(&tri[2]);
        let ax = a[kx] - sx * a[kz];
        let ay = a[ky] - sy * a[kz];
        let bx = b[kx] - sx * b[kz];
        let by = b[ky] - sy * b[kz];
        let cx = c[kx] - sx * c[kz];
        let cy = c[ky] - sy * c[kz];
        let u = cx * by - cy * bx;
        let v = ax * cy - ay * cx;
        let w = bx * ay - by * ax;
        if (u < 0.0 || v < 0.0 || w < 0.0) && (u > 0.0 || v > 0.0 || w > 0.0) {
            return None;
        }
        let det = u + v + w;
        if det == 0.0 {
            return None;
        }
        let az = sz * a[kz];
        let bz = sz * b[kz];
        let cz = sz * c[kz];
        let t = (u * az + v * bz + w * cz) / det;
        if !(t >= T_MIN) || !t.is_finite() {
            return None;
        }
        Some((t, [u / det, v / det, w / det]))
    }

    /// Entry distance into the box, if the ray overlaps it before `t_max`.
    #[inline(always)]
    fn slab(&self, lo: &[f64; 3], hi: &[f64; 3], t_max: f64) -> Option<f64> {
        let mut t0 = T_MIN;
        let mut t1 = t_max;
        for i in 0..3 {
            let a = (lo[i] - self.origin[i]) * self.inv_dir[i];
            let b = (hi[i] - self.origin[i]) * self.inv_dir[i];
            // 0 * inf: axis-parallel ray on the slab plane, no constraint
            if a.is_nan() || b.is_nan() {
                continue;
            }
            t0 = t0.max(a.min(b));
            t1 = t1.min(a.max(b));
        }
        // widen slightly so rounding never prunes a box holding an exact tie
        (t0 <= t1 * (1.0 + 1e-12)).then_some(t0)
    }
}

#[inline(always)]
fn better(t: f64, face: u32, best: &Option<(f64, u32, [f64; 3])>) -> bool {
    match best {
        None => true,
        Some((bt, bf, _)) => t < *bt || (t == *bt && face < *bf),
    }
}

fn finish(origin: &Vector3<f64>, tris: &[Vector3<f64>; 3], best: (f64, u32, [f64; 3])) -> Hit {
    let (t, face, bary) = best;
    let point = tris[0] * bary[0] + tris[1] * bary[1] + tris[2] * bary[2];
    debug_assert!(point.iter().all(|v| v.is_finite()) && origin.iter().all(|v| v.is_finite()));
    Hit { t, face, point, bary }
}

fn as_arrays(tri: &[Vector3<f64>; 3]) -> [[f64; 3]; 3] {
    tri.map(|v| [v.x, v.y, v.z])
}

/// Nearest hit by testing every face; the reference for the BVH.
pub fn intersect_brute_force(mesh: &TriMesh, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
    let ray = Ray::new(origin, dir);
    let mut best = None;
    for f in 0..mesh.num_faces() {
        let tri = as_arrays(&mesh.triangle(f));
        if let Some((t, bary)) = ray.triangle(&tri) {
            if better(t, f as u32, &best) {
                best = Some((t, f as u32, bary));
            }
        }
    }
    best.map(|b| finish(origin, &mesh.triangle(b.1 as usize), b))
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Node {
    lo: [f64; 3],
    hi: [f64; 3],
    /// Leaf: index of the first triangle. Inner: index of the right child
    /// (the left child is the next node).
    index: u32,
    /// Number of triangles; zero for inner nodes.
    count: u32,
}

/// Bounding-volume hierarchy over a mesh's faces.
#[derive(Debug, Clone)]
pub struct Bvh {
    nodes: Vec<Node>,
    /// Triangles in leaf order.
    tris: Vec<[[f64; 3]; 3]>,
    /// Original face id of each entry in `tris`.
    ids: Vec<u32>,
}

struct BuildItem {
    lo: [f64; 3],
    hi: [f64; 3],
    centroid: [f64; 3],
    face: u32,
}

impl Bvh {
    pub fn build(mesh: &TriMesh) -> Result<Self, RaycastError> {
        if mesh.num_faces() == 0 {
            return Err(RaycastError::EmptyMesh);
        }
        let mut items: Vec<BuildItem> = (0..mesh.num_faces())
            .map(|f| {
                let t = as_arrays(&mesh.triangle(f));
                let mut lo = t[0];
                let mut hi = t[0];
                for v in &t[1..] {
                    for i in 0..3 {
                        lo[i] = lo[i].min(v[i]);
                        hi[i] = hi[i].max(v[i]);
                    }
                }
                let centroid = [0, 1, 2].map(|i| (t[0][i] + t[1][i] + t[2][i]) / 3.0);
                BuildItem {
                    lo,
                    hi,
                    centroid,
                    face: f as u32,
                }
            })
            .collect();
        let mut nodes = Vec::with_capacity(2 * items.len() / LEAF_SIZE + 1);
        build_node(&mut items, 0, &mut nodes);
        let ids: Vec<u32> = items.iter().map(|it| it.face).collect();
        let tris = ids.iter().map(|&f| as_arrays(&mesh.triangle(f as usize))).collect();
        Ok(Self { nodes, tris, ids })
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.count > 0).count()
    }

    pub fn face_count(&self) -> usize {
        self.ids.len()
    }

    /// Checks the structural invariants: every face in exactly one leaf,
    /// leaves hold at most four faces, and child boxes lie inside parents.
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut seen = vec![0u8; self.ids.len()];
        self.check_node(0, None, &mut seen)?;
        if seen.iter().any(|&c| c != 1) {
            return Err("a face is not in exactly one leaf".into());
        }
        Ok(())
    }

    fn check_node(&self, i: usize, parent: Option<&Node>, seen: &mut [u8]) -> Result<(), String> {
        let n = self.nodes.get(i).ok_or("node index out of range")?;
        if let Some(p) = parent {
            for k in 0..3 {
                if n.lo[k] < p.lo[k] || n.hi[k] > p.hi[k] {
                    return Err(format!("node {i} escapes its parent"));
                }
            }
        }
        if n.count > 0 {
            if n.count as usize > LEAF_SIZE {
                return Err(format!("leaf {i} holds {} faces", n.count));
            }
            for j in n.index..n.index + n.count {
                seen[self.ids[j as usize] as usize] += 1;
            }
            Ok(())
        } else {
            self.check_node(i + 1, Some(n), seen)?;
            self.check_node(n.index as usize, Some(n), seen)
        }
    }

    /// Bounds of a node as (lo, hi); node 0 is the root.
    pub fn node_bounds(&self, i: usize) -> ([f64; 3], [f64; 3]) {
        (self.nodes[i].lo, self.nodes[i].hi)
    }

    /// Nearest hit with `t ≥ T_MIN`; ties on `t` go to the lower face id.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
        let ray = Ray::new(origin, dir);
        let mut best: Option<(f64, u32, [f64; 3])> = None;
        let mut best_slot = 0usize;
        let mut stack = [0u32; 64];
        let mut sp = 0usize;
        let root = &self.nodes[0];
        if ray.slab(&root.lo, &root.hi, f64::INFINITY).is_none() {
            return None;
        }
        let mut i = 0usize;
        loop {
            let n = &self.nodes[i];
            if n.count > 0 {
                let start = n.index as usize;
                for j in start..start + n.count as usize {
                    if let Some((t, bary)) = ray.triangle(&self.tris[j]) {
                        if better(t, self.ids[j], &best) {
                            best = Some((t, self.ids[j], bary));
                            best_slot = j;
                        }
                    }
                }
            } else {
                let t_max = best.map_or(f64::INFINITY, |b| b.0);
                let l = i + 1;
                let r = n.index as usize;
                let tl = ray.slab(&self.nodes[l].lo, &self.nodes[l].hi, t_max);
                let tr = ray.slab(&self.nodes[r].lo, &self.nodes[r].hi, t_max);
                match (tl, tr) {
                    (Some(a), Some(b)) => {
                        let (near, far) = if a <= b { (l, r) } else { (r, l) };
                        stack[sp] = far as u32;
                        sp += 1;
                        i = near;
                        continue;
                    }
                    (Some(_), None) => {
                        i = l;
                        continue;
                    }
                    (None, Some(_)) => {
                        i = r;
                        continue;
                    }
                    (None, None) => {}
                }
            }
            // pop, skipping subtrees that start beyond the current best
            loop {
                if sp == 0 {
                    return best.map(|b| {
                        let tri = self.tris[best_slot].map(|v| Vector3::new(v[0], v[1], v[2]));
                        finish(origin, &tri, b)
                    });
                }
                sp -= 1;
                let c = stack[sp] as usize;
                let t_max = best.map_or(f64::INFINITY, |b| b.0);
                if ray.slab(&self.nodes[c].lo, &self.nodes[c].hi, t_max).is_some() {
                    i = c;
                    break;
                }
            }
        }
    }
}

fn build_node(items: &mut [BuildItem], offset: usize, nodes: &mut Vec<Node>) -> usize {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    let mut clo = [f64::INFINITY; 3];
    let mut chi = [f64::NEG_INFINITY; 3];
    for it in items.iter() {
        for k in 0..3 {
            lo[k] = lo[k].min(it.lo[k]);
            hi[k] = hi[k].max(it.hi[k]);
            clo[k] = clo[k].min(it.centroid[k]);
            chi[k] = chi[k].max(it.centroid[k]);
        }
    }
    let me = nodes.len();
    if items.len() <= LEAF_SIZE {
        nodes.push(Node {
            lo,
            hi,
            index: offset as u32,
            count: items.len() as u32,
        });
        return me;
    }
    nodes.push(Node {
        lo,
        hi,
        index: 0,
        count: 0,
    });
    let mut axis = 0;
    for k in 1..3 {
        if chi[k] - clo[k] > chi[axis] - clo[axis] {
            axis = k;
        }
    }
    let mid = items.len() / 2;
    items.select_nth_unstable_by(mid, |a, b| {
        a.centroid[axis]
            .total_cmp(&b.centroid[axis])
            .then(a.face.cmp(&b.face))
    });
    let (left, right) = items.split_at_mut(mid);
    build_node(left, offset, nodes);
    let r = build_node(right, offset + mid, nodes);
    nodes[me].index = r as u32;
    me
}

/// Per-column intersections of one scanline.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthLine {
    pub scanline: usize,
    pub hits: Vec<Option<Hit>>,
}

/// World-frame unit rays of the line camera in its own frame, one per column.
pub fn column_rays(lens: &PushBroomIntrinsics) -> Result<Vec<Vector3<f64>>, RaycastError> {
    lens.validate()?;
    (0..lens.width).map(|u| Ok(lens.ray(u as f64)?)).collect()
}

/// Casts every column of one scanline taken at `pose` (camera to world).
pub fn raycast_scanline(
    scanline: usize,
    pose: &Pose,
    lens: &PushBroomIntrinsics,
    bvh: &Bvh,
) -> Result<DepthLine, RaycastError> {
    let rays = column_rays(lens)?;
    Ok(cast_with_rays(scanline, pose, &rays, bvh))
}

fn cast_with_rays(scanline: usize, pose: &Pose, rays: &[Vector3<f64>], bvh: &Bvh) -> DepthLine {
    let r = pose.rotation_matrix();
    let o = *pose.translation();
    let hits = rays
        .iter()
        .map(|d| {
            let dw = (r * d).normalize();
            bvh.intersect(&o, &dw)
        })
        .collect();
    DepthLine { scanline, hits }
}

/// Point cloud in struct-of-arrays layout; spectra are stored flat.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperCloud {
    pub positions: Vec<Vector3<f64>>,
    /// (scanline, column) each point came from.
    pub sources: Vec<(u32, u32)>,
    pub spectra: Vec<f32>,
    pub wavelengths: Vec<f64>,
}

impl HyperCloud {
    pub fn empty(wavelengths: Vec<f64>) -> Self {
        Self {
            positions: Vec::new(),
            sources: Vec::new(),
            spectra: Vec::new(),
            wavelengths,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn bands(&self) -> usize {
        self.wavelengths.len()
    }

    pub fn spectrum(&self, i: usize) -> &[f32] {
        let b = self.bands();
        &self.spectra[i * b..(i + 1) * b]
    }

    pub fn push(&mut self, position: Vector3<f64>, source: (u32, u32), spectrum: &[f32]) {
        debug_assert_eq!(spectrum.len(), self.bands());
        self.positions.push(position);
        self.sources.push(source);
        self.spectra.extend_from_slice(spectrum);
    }

    /// Checks the length and finiteness invariants.
    pub fn validate(&self) -> Result<(), String> {
        if self.sources.len() != self.positions.len() || self.spectra.len() != self.positions.len() * self.bands() {
            return Err("cloud arrays disagree in length".into());
        }
        if let Some(i) = self.positions.iter().position(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(format!("point {i} is not finite"));
        }
        Ok(())
    }
}

/// Counters reported by [`build_hyper_cloud`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CloudStats {
    pub scanlines: usize,
    pub scanlines_dropped: usize,
    pub rays: usize,
    pub hits: usize,
    pub misses: usize,
}

impl CloudStats {
    pub fn hit_ratio(&self) -> f64 {
        if self.rays == 0 {
            0.0
        } else {
            self.hits as f64 / self.rays as f64
        }
    }
}

/// Raycasts every scanline of `cube` from `trajectory(t_s) ∘ t_rel` and
/// attaches the cube spectrum to each hit. Scanlines outside the trajectory
/// span are dropped and counted.
pub fn build_hyper_cloud(
    cube: &HyperCube,
    trajectory: &Trajectory,
    t_rel: &Pose,
    lens: &PushBroomIntrinsics,
    bvh: &Bvh,
    exec: Execution,
) -> Result<(HyperCloud, CloudStats), RaycastError> {
    if lens.width as usize != cube.samples() {
        return Err(RaycastError::InvalidInput(format!(
            "lens width {} differs from cube width {}",
            lens.width,
            cube.samples()
        )));
    }
    let rays = column_rays(lens)?;
    let bands = cube.bands();
    let lines: Vec<Option<DepthLine>> = par::map_range(exec, cube.lines(), |s| {
        let pose = trajectory.interpolate(cube.timestamps()[s]).ok()?;
        Some(cast_with_rays(s, &pose.compose(t_rel), &rays, bvh))
    });
    let mut stats = CloudStats {
        scanlines: cube.lines(),
        ..Default::default()
    };
    let mut cloud = HyperCloud::empty(cube.wavelengths().to_vec());
    let mut spectrum = vec![0f32; bands];
    for line in lines {
        let Some(line) = line else {
            stats.scanlines_dropped += 1;
            continue;
        };
        for (u, hit) in line.hits.iter().enumerate() {
            stats.rays += 1;
            match hit {
                Some(h) => {
                    stats.hits += 1;
                    cube.spectrum_into(line.scanline, u, &mut spectrum);
                    cloud.push(h.point, (line.scanline as u32, u as u32), &spectrum);
                }
                None => stats.misses += 1,
            }
        }
    }
    if cloud.is_empty() {
        return Err(RaycastError::EmptyOutput);
    }
    Ok((cloud, stats))
}
