//! North-aligned ortho-images from hyperspectral clouds and colored meshes.
//!
//! Cell `(row, col)` covers north in `[(i0 - row)·gsd, (i0 - row + 1)·gsd)` and
//! east in `[(j0 + col)·gsd, (j0 + col + 1)·gsd)`. Row 0 is the northernmost
//! row; the stored origin is the center of cell (0, 0).

use nalgebra::Vector3;
use thiserror::Error;

use crate::par::{self, Execution};
use crate::raycast::{Bvh, HyperCloud, RaycastError, TriMesh};

/// Value written to invalid cells on disk.
pub const NODATA: f64 = -9999.0;

/// Default ground sampling distance, 5 mm.
pub const DEFAULT_GSD: f64 = 0.005;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OrthoError {
    #[error("EmptyCloud")]
    EmptyCloud,
    #[error("EmptyInput")]
    EmptyInput,
    #[error("InvalidGsd: {0}")]
    InvalidGsd(f64),
    #[error("NoColor: mesh has no vertex colors")]
    NoColor,
    #[error("BandOutOfRange: band {0} of {1}")]
    BandOutOfRange(usize, usize),
    #[error("InvalidGrid: {0}")]
    InvalidGrid(String),
    #[error(transparent)]
    Raycast(#[from] RaycastError),
}

/// Raster geometry snapped to multiples of `gsd`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub gsd: f64,
    /// North cell index of row 0.
    pub north0: i64,
    /// East cell index of column 0.
    pub east0: i64,
    pub rows: usize,
    pub cols: usize,
}

impl Grid {
    pub fn new(gsd: f64, north0: i64, east0: i64, rows: usize, cols: usize) -> Result<Self, OrthoError> {
        check_gsd(gsd)?;
        if rows == 0 || cols == 0 {
            return Err(OrthoError::InvalidGrid(format!("{rows}x{cols} grid")));
        }
        Ok(Self {
            gsd,
            north0,
            east0,
            rows,
            cols,
        })
    }

    /// Rebuilds a grid from the center of cell (0, 0).
    pub fn from_origin(gsd: f64, origin_north: f64, origin_east: f64, rows: usize, cols: usize) -> Result<Self, OrthoError> {
        check_gsd(gsd)?;
        let n0 = (origin_north / gsd - 0.5).round();
        let e0 = (origin_east / gsd - 0.5).round();
        if !n0.is_finite() || !e0.is_finite() || n0.abs() > 1e15 || e0.abs() > 1e15 {
            return Err(OrthoError::InvalidGrid("origin out of range".into()));
        }
        Self::new(gsd, n0 as i64, e0 as i64, rows, cols)
    }

    pub fn origin_north(&self) -> f64 {
        (self.north0 as f64 + 0.5) * self.gsd
    }

    pub fn origin_east(&self) -> f64 {
        (self.east0 as f64 + 0.5) * self.gsd
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Cell containing (north, east), if inside the grid.
    pub fn cell(&self, north: f64, east: f64) -> Option<(usize, usize)> {
        let row = self.north0 - (north / self.gsd).floor() as i64;
        let col = (east / self.gsd).floor() as i64 - self.east0;
        (row >= 0 && col >= 0 && (row as usize) < self.rows && (col as usize) < self.cols)
            .then_some((row as usize, col as usize))
    }

    /// (north, east) of a cell center.
    pub fn center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            ((self.north0 - row as i64) as f64 + 0.5) * self.gsd,
            ((self.east0 + col as i64) as f64 + 0.5) * self.gsd,
        )
    }
}

fn check_gsd(gsd: f64) -> Result<(), OrthoError> {
    if gsd > 0.0 && gsd.is_finite() {
        Ok(())
    } else {
        Err(OrthoError::InvalidGsd(gsd))
    }
}

/// Grid covering every (north, east) point, padded by two cells on each side.
pub fn auto_bounds<I>(points: I, gsd: f64) -> Result<Grid, OrthoError>
where
    I: IntoIterator<Item = (f64, f64)>,
{
    check_gsd(gsd)?;
    let mut range: Option<(i64, i64, i64, i64)> = None;
    for (n, e) in points {
        if !n.is_finite() || !e.is_finite() {
            continue;
        }
        let i = (n / gsd).floor() as i64;
        let j = (e / gsd).floor() as i64;
        range = Some(match range {
            None => (i, i, j, j),
            Some((a, b, c, d)) => (a.min(i), b.max(i), c.min(j), d.max(j)),
        });
    }
    let (imin, imax, jmin, jmax) = range.ok_or(OrthoError::EmptyInput)?;
    Grid::new(
        gsd,
        imax + 2,
        jmin - 2,
        (imax - imin + 5) as usize,
        (jmax - jmin + 5) as usize,
    )
}

/// Grid around all mesh vertices.
pub fn auto_bounds_mesh(mesh: &TriMesh, gsd: f64) -> Result<Grid, OrthoError> {
    auto_bounds(mesh.vertices.iter().map(|v| (v.x, v.y)), gsd)
}

/// Grid around all cloud points.
pub fn auto_bounds_cloud(cloud: &HyperCloud, gsd: f64) -> Result<Grid, OrthoError> {
    auto_bounds(cloud.positions.iter().map(|p| (p.x, p.y)), gsd)
}

/// Raster with `C` data planes plus height, validity and optional provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct OrthoImage {
    pub grid: Grid,
    /// Channel-major planes, each `rows * cols` long.
    pub channels: Vec<Vec<f32>>,
    /// Down coordinate of the surface in each cell.
    pub height: Vec<f64>,
    pub valid: Vec<bool>,
    /// (scanline, column) of the contributing sample; hyperspectral only.
    pub provenance: Option<Vec<(u32, u32)>>,
    /// Wavelength of each channel, if spectral.
    pub wavelengths: Option<Vec<f64>>,
}

impl OrthoImage {
    pub fn empty(grid: Grid, channels: usize, with_provenance: bool) -> Self {
        let n = grid.len();
        Self {
            grid,
            channels: vec![vec![NODATA as f32; n]; channels],
            height: vec![NODATA; n],
            valid: vec![false; n],
            provenance: with_provenance.then(|| vec![(u32::MAX, u32::MAX); n]),
            wavelengths: None,
        }
    }

    pub fn rows(&self) -> usize {
        self.grid.rows
    }

    pub fn cols(&self) -> usize {
        self.grid.cols
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.grid.cols + col
    }

    pub fn is_valid(&self, row: usize, col: usize) -> bool {
        self.valid[self.index(row, col)]
    }

    pub fn value(&self, channel: usize, row: usize, col: usize) -> f32 {
        self.channels[channel][self.index(row, col)]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// World point (north, east, down) of a valid cell.
    pub fn lift(&self, row: usize, col: usize) -> Option<Vector3<f64>> {
        let i = self.index(row, col);
        if !self.valid[i] {
            return None;
        }
        let (n, e) = self.grid.center(row, col);
        Some(Vector3::new(n, e, self.height[i]))
    }

    /// Rec. 601 luminance of the first three channels.
    pub fn luminance(&self) -> Vec<f32> {
        let n = self.grid.len();
        (0..n)
            .map(|i| {
                if !self.valid[i] {
                    return 0.0;
                }
                match self.channels.len() {
                    0 => 0.0,
                    1 | 2 => self.channels[0][i],
                    _ => 0.299 * self.channels[0][i] + 0.587 * self.channels[1][i] + 0.114 * self.channels[2][i],
                }
            })
            .collect()
    }

    /// A copy of one channel with invalid cells zeroed.
    pub fn plane(&self, channel: usize) -> Vec<f32> {
        self.channels[channel]
            .iter()
            .zip(&self.valid)
            .map(|(v, ok)| if *ok { *v } else { 0.0 })
            .collect()
    }
}

/// Per-cell combination of the points on the winning surface.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Aggregation {
    #[default]
    Mean,
    /// Value of the point nearest the cell center.
    Nearest,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RasterOptions {
    pub aggregation: Aggregation,
    /// Points at least this many gsd deeper than the shallowest one are occluded.
    pub occlusion_cells: f64,
    pub exec: Execution,
}

impl Default for RasterOptions {
    fn default() -> Self {
        Self {
            aggregation: Aggregation::Mean,
            occlusion_cells: 2.0,
            exec: Execution::Parallel,
        }
    }
}

/// Maps f64 to a u64 with the same total order.
fn order_key(x: f64) -> u64 {
    let b = x.to_bits();
    if b >> 63 == 1 {
        !b
    } else {
        b | (1 << 63)
    }
}

struct CellOut {
    cell: usize,
    values: Vec<f32>,
    height: f64,
    source: (u32, u32),
}

/// Top-down z-buffered rasterization of selected bands of `cloud`.
pub fn rasterize_cloud(
    cloud: &HyperCloud,
    gsd: f64,
    bands: &[usize],
    grid: Option<Grid>,
    opts: &RasterOptions,
) -> Result<OrthoImage, OrthoError> {
    if cloud.is_empty() {
        return Err(OrthoError::EmptyCloud);
    }
    check_gsd(gsd)?;
    let nb = cloud.bands();
    if let Some(&b) = bands.iter().find(|&&b| b >= nb) {
        return Err(OrthoError::BandOutOfRange(b, nb));
    }
    let grid = match grid {
        Some(g) => {
            if g.gsd != gsd {
                return Err(OrthoError::InvalidGrid(format!("grid gsd {} differs from {gsd}", g.gsd)));
            }
            g
        }
        None => auto_bounds_cloud(cloud, gsd)?,
    };
    // (cell, depth order, point index) is unique, so the unstable sort is deterministic
    let mut keyed: Vec<(usize, u64, u32)> = cloud
        .positions
        .iter()
        .enumerate()
        .filter_map(|(i, p)| {
            let (r, c) = grid.cell(p.x, p.y)?;
            Some((r * grid.cols + c, order_key(p.z), i as u32))
        })
        .collect();
    par::sort_unstable_by_key(opts.exec, &mut keyed, |k| *k);
    let mut runs: Vec<(usize, usize)> = Vec::new();
    let mut start = 0;
    for i in 1..=keyed.len() {
        if i == keyed.len() || keyed[i].0 != keyed[start].0 {
            runs.push((start, i));
            start = i;
        }
    }
    let window = opts.occlusion_cells * gsd;
    let cells: Vec<CellOut> = par::map(opts.exec, &runs, |&(a, b)| {
        let run = &keyed[a..b];
        let cell = run[0].0;
        let (cn, ce) = grid.center(cell / grid.cols, cell % grid.cols);
        let top = cloud.positions[run[0].2 as usize].z;
        let members: Vec<usize> = run
            .iter()
            .map(|k| k.2 as usize)
            .filter(|&i| cloud.positions[i].z - top < window)
            .collect();
        let mut nearest = members[0];
        let mut best = f64::INFINITY;
        for &i in &members {
            let p = cloud.positions[i];
            let d = (p.x - cn).powi(2) + (p.y - ce).powi(2);
            if d < best || (d == best && i < nearest) {
                best = d;
                nearest = i;
            }
        }
        let (values, height) = match opts.aggregation {
            Aggregation::Nearest => (
                bands.iter().map(|&b| cloud.spectrum(nearest)[b]).collect(),
                cloud.positions[nearest].z,
            ),
            Aggregation::Mean => {
                let mut sums = vec![0f64; bands.len()];
                let mut h = 0.0;
                for &i in &members {
                    let s = cloud.spectrum(i);
                    for (k, &b) in bands.iter().enumerate() {
                        sums[k] += s[b] as f64;
                    }
                    h += cloud.positions[i].z;
                }
                let m = members.len() as f64;
                (sums.iter().map(|s| (s / m) as f32).collect(), h / m)
            }
        };
        CellOut {
            cell,
            values,
            height,
            source: cloud.sources[nearest],
        }
    });
    let mut img = OrthoImage::empty(grid, bands.len(), true);
    img.wavelengths = Some(bands.iter().map(|&b| cloud.wavelengths[b]).collect());
    let prov = img.provenance.as_mut().expect("provenance plane");
    for c in cells {
        for (k, v) in c.values.iter().enumerate() {
            img.channels[k][c.cell] = *v;
        }
        img.height[c.cell] = c.height;
        img.valid[c.cell] = true;
        prov[c.cell] = c.source;
    }
    Ok(img)
}

/// Color and height of the first surface below each cell center.
pub fn rasterize_mesh(mesh: &TriMesh, gsd: f64, grid: Option<Grid>, exec: Execution) -> Result<OrthoImage, OrthoError> {
    if mesh.colors.is_none() {
        return Err(OrthoError::NoColor);
    }
    check_gsd(gsd)?;
    let grid = match grid {
        Some(g) => g,
        None => auto_bounds_mesh(mesh, gsd)?,
    };
    let bvh = Bvh::build(mesh)?;
    let (lo, _) = mesh.bounds().ok_or(OrthoError::EmptyInput)?;
    let top = lo.z - 1.0;
    let down = Vector3::z();
    let rows: Vec<Vec<Option<([f64; 3], f64)>>> = par::map_range(exec, grid.rows, |r| {
        (0..grid.cols)
            .map(|c| {
                let (n, e) = grid.center(r, c);
                let h = bvh.intersect(&Vector3::new(n, e, top), &down)?;
                let color = mesh.color_at(h.face as usize, h.bary)?;
                Some((color, h.point.z))
            })
            .collect()
    });
    let mut img = OrthoImage::empty(grid, 3, false);
    for (r, row) in rows.into_iter().enumerate() {
        for (c, cell) in row.into_iter().enumerate() {
            if let Some((color, z)) = cell {
                let i = r * grid.cols + c;
                for k in 0..3 {
                    img.channels[k][i] = color[k] as f32;
                }
                img.height[i] = z;
                img.valid[i] = true;
            }
        }
    }
    Ok(img)
}
