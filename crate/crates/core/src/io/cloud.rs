use std::path::Path;

use nalgebra::Vector3;

use super::ply::{encode_ply_parts, PlyEncoding};
use super::{read_file, write_file, IoError, Reader};
use crate::cube::nearest_band;
use crate::raycast::HyperCloud;

const MAGIC: &[u8; 4] = b"HSC1";

/// `HSC1`, u64 points, u32 bands, f64 wavelengths, then per point
/// 3×f64 position, 2×u32 (scanline, column), bands×f32 spectrum.
pub fn encode_cloud(cloud: &HyperCloud) -> Vec<u8> {
    let b = cloud.bands();
    let mut out = Vec::with_capacity(16 + 8 * b + cloud.len() * (32 + 4 * b));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(cloud.len() as u64).to_le_bytes());
    out.extend_from_slice(&(b as u32).to_le_bytes());
    for w in &cloud.wavelengths {
        out.extend_from_slice(&w.to_le_bytes());
    }
    for i in 0..cloud.len() {
        let p = cloud.positions[i];
        for v in [p.x, p.y, p.z] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&cloud.sources[i].0.to_le_bytes());
        out.extend_from_slice(&cloud.sources[i].1.to_le_bytes());
        for s in cloud.spectrum(i) {
            out.extend_from_slice(&s.to_le_bytes());
        }
    }
    out
}

pub fn decode_cloud(bytes: &[u8]) -> Result<HyperCloud, IoError> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != MAGIC {
        return Err(IoError::binary(0, "missing HSC1 magic"));
    }
    let n = r.u64()?;
    let b = r.u32()? as usize;
    let record = 32 + 4 * b as u64;
    let expected = (b as u64 * 8)
        .checked_add(n.checked_mul(record).ok_or_else(|| IoError::binary(4, "point count overflows"))?)
        .ok_or_else(|| IoError::binary(4, "point count overflows"))?;
    if expected != r.remaining() as u64 {
        return Err(IoError::binary(
            r.pos(),
            format!("header declares {expected} payload bytes, file holds {}", r.remaining()),
        ));
    }
    let mut wavelengths = Vec::with_capacity(b);
    for i in 0..b {
        let w = r.f64()?;
        if !w.is_finite() || wavelengths.last().is_some_and(|p| *p >= w) {
            return Err(IoError::binary(r.pos() - 8, format!("wavelength {i} is not increasing")));
        }
        wavelengths.push(w);
    }
    let n = n as usize;
    let mut cloud = HyperCloud {
        positions: Vec::with_capacity(n),
        sources: Vec::with_capacity(n),
        spectra: Vec::with_capacity(n * b),
        wavelengths,
    };
    for _ in 0..n {
        let at = r.pos();
        let p = Vector3::new(r.f64()?, r.f64()?, r.f64()?);
        if !p.iter().all(|v| v.is_finite()) {
            return Err(IoError::binary(at, "non-finite position"));
        }
        cloud.positions.push(p);
        cloud.sources.push((r.u32()?, r.u32()?));
        for _ in 0..b {
            cloud.spectra.push(r.f32()?);
        }
    }
    Ok(cloud)
}

/// Bands nearest 650, 550 and 450 nm.
pub fn rgb_proxy_bands(wavelengths: &[f64]) -> [usize; 3] {
    [650.0, 550.0, 450.0].map(|nm| nearest_band(wavelengths, nm))
}

/// Three-band colored point export. Values are scaled by the largest
/// selected sample so the relative balance between channels is kept.
pub fn cloud_to_ply(cloud: &HyperCloud, bands: [usize; 3], encoding: PlyEncoding) -> Result<Vec<u8>, IoError> {
    if let Some(b) = bands.iter().find(|b| **b >= cloud.bands()) {
        return Err(IoError::Invalid(format!("band {b} out of range for {} bands", cloud.bands())));
    }
    let peak = (0..cloud.len())
        .flat_map(|i| bands.map(|b| cloud.spectrum(i)[b]))
        .filter(|v| v.is_finite())
        .fold(0f32, f32::max);
    let scale = if peak > 0.0 { 255.0 / peak as f64 } else { 0.0 };
    let colors: Vec<[u8; 3]> = (0..cloud.len())
        .map(|i| bands.map(|b| (cloud.spectrum(i)[b] as f64 * scale).round().clamp(0.0, 255.0) as u8))
        .collect();
    Ok(encode_ply_parts(&cloud.positions, Some(&colors), &[], false, encoding))
}

pub fn read_cloud(path: &Path) -> Result<HyperCloud, IoError> {
    decode_cloud(&read_file(path)?)
}

pub fn write_cloud(cloud: &HyperCloud, path: &Path) -> Result<(), IoError> {
    write_file(path, &encode_cloud(cloud))
}

pub fn write_cloud_ply(cloud: &HyperCloud, bands: [usize; 3], path: &Path) -> Result<(), IoError> {
    write_file(path, &cloud_to_ply(cloud, bands, PlyEncoding::BinaryLittleEndian)?)
}
