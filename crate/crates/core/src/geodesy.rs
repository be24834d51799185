//! WGS84 geodetic ↔ ECEF conversions and the local North-East-Down frame.
//!
//! Altitudes are ellipsoidal heights; no geoid model is applied.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

pub const WGS84_A: f64 = 6378137.0;
pub const WGS84_F: f64 = 1.0 / 298.257223563;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeodesyError {
    #[error("EmptyInput: {0}")]
    EmptyInput(&'static str),
    #[error("InvalidFix: {0}")]
    InvalidFix(String),
}

fn e2() -> f64 {
    WGS84_F * (2.0 - WGS84_F)
}

/// Position fix from the INS, with per-axis (N, E, D) standard deviations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeodeticFix {
    pub t: f64,
    pub lat: f64,
    pub lon: f64,
    pub alt: f64,
    pub sigma: Vector3<f64>,
}

impl GeodeticFix {
    pub fn validate(&self) -> Result<(), GeodesyError> {
        if !(-90.0..=90.0).contains(&self.lat) || !(-180.0..=180.0).contains(&self.lon) {
            return Err(GeodesyError::InvalidFix(format!(
                "lat/lon ({}, {}) outside geodetic bounds",
                self.lat, self.lon
            )));
        }
        if !self.t.is_finite() || !self.alt.is_finite() {
            return Err(GeodesyError::InvalidFix("non-finite time or altitude".into()));
        }
        if self.sigma.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(GeodesyError::InvalidFix("sigma components must be positive".into()));
        }
        Ok(())
    }
}

/// A fix expressed in the local NED frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NedFix {
    pub t: f64,
    pub position: Vector3<f64>,
    pub sigma: Vector3<f64>,
}

pub fn geodetic_to_ecef(lat_deg: f64, lon_deg: f64, alt: f64) -> Vector3<f64> {
    let (sl, cl) = lat_deg.to_radians().sin_cos();
    let (so, co) = lon_deg.to_radians().sin_cos();
    let n = WGS84_A / (1.0 - e2() * sl * sl).sqrt();
    Vector3::new(
        (n + alt) * cl * co,
        (n + alt) * cl * so,
        (n * (1.0 - e2()) + alt) * sl,
    )
}

/// Inverse conversion by five fixed-point iterations on latitude.
/// Returns `(lat_deg, lon_deg, alt)`.
pub fn ecef_to_geodetic(p: &Vector3<f64>) -> (f64, f64, f64) {
    let e2 = e2();
    let lon = p.y.atan2(p.x);
    let rho = (p.x * p.x + p.y * p.y).sqrt();
    let mut lat = p.z.atan2(rho * (1.0 - e2));
    for _ in 0..5 {
        let s = lat.sin();
        let n = WGS84_A / (1.0 - e2 * s * s).sqrt();
        lat = (p.z + e2 * n * s).atan2(rho);
    }
    let (s, c) = lat.sin_cos();
    let alt = rho * c + p.z * s - WGS84_A * (1.0 - e2 * s * s).sqrt();
    (lat.to_degrees(), lon.to_degrees(), alt)
}

/// Local tangent-plane frame anchored at a geodetic origin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalFrame {
    pub lat: f64,
    pub lon: f64,
    pub alt: f64,
    origin_ecef: Vector3<f64>,
    ecef_to_ned: Matrix3<f64>,
}

impl LocalFrame {
    pub fn new(lat: f64, lon: f64, alt: f64) -> Result<Self, GeodesyError> {
        if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) || !alt.is_finite() {
            return Err(GeodesyError::InvalidFix(format!(
                "frame origin ({lat}, {lon}, {alt}) outside geodetic bounds"
            )));
        }
        let (sl, cl) = lat.to_radians().sin_cos();
        let (so, co) = lon.to_radians().sin_cos();
        let r = Matrix3::new(
            -sl * co, -sl * so, cl, //
            -so, co, 0.0, //
            -cl * co, -cl * so, -sl,
        );
        Ok(Self {
            lat,
            lon,
            alt,
            origin_ecef: geodetic_to_ecef(lat, lon, alt),
            ecef_to_ned: r,
        })
    }

    /// Frame whose origin is the given fix.
    pub fn at_fix(fix: &GeodeticFix) -> Result<Self, GeodesyError> {
        Self::new(fix.lat, fix.lon, fix.alt)
    }

    pub fn ecef_to_ned(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.ecef_to_ned * (p - self.origin_ecef)
    }

    pub fn ned_to_ecef(&self, ned: &Vector3<f64>) -> Vector3<f64> {
        self.ecef_to_ned.transpose() * ned + self.origin_ecef
    }

    pub fn geodetic_to_ned(&self, lat: f64, lon: f64, alt: f64) -> Vector3<f64> {
        self.ecef_to_ned(&geodetic_to_ecef(lat, lon, alt))
    }

    pub fn ned_to_geodetic(&self, ned: &Vector3<f64>) -> (f64, f64, f64) {
        ecef_to_geodetic(&self.ned_to_ecef(ned))
    }
}

/// Converts fixes to the local frame, preserving timestamps and sigmas.
pub fn fixes_to_ned(fixes: &[GeodeticFix], frame: &LocalFrame) -> Result<Vec<NedFix>, GeodesyError> {
    if fixes.is_empty() {
        return Err(GeodesyError::EmptyInput("fixes"));
    }
    fixes
        .iter()
        .map(|f| {
            f.validate()?;
            Ok(NedFix {
                t: f.t,
                position: frame.geodetic_to_ned(f.lat, f.lon, f.alt),
                sigma: f.sigma,
            })
        })
        .collect()
}
