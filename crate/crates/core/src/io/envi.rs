use std::collections::BTreeMap;
use std::fmt::Write;
use std::path::{Path, PathBuf};

use super::text::{format_f64, records, real, utf8};
use super::{read_file, write_file, IoError};
use crate::cube::{CubeData, CubeError, HyperCube};
use crate::geom::PushBroomIntrinsics;
use crate::ortho::{Grid, OrthoImage, NODATA};

const DT_U16: u32 = 12;
const DT_F32: u32 = 4;
const DT_F64: u32 = 5;

/// `key = value` header; braced values may span lines.
struct Header(BTreeMap<String, (usize, String)>);

impl Header {
    fn parse(bytes: &[u8]) -> Result<Self, IoError> {
        let src = utf8(bytes)?;
        let mut lines = src.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l.trim() == "ENVI" => {}
            _ => return Err(IoError::parse(1, "missing ENVI magic")),
        }
        let mut map = BTreeMap::new();
        while let Some((i, l)) = lines.next() {
            let line = i + 1;
            let l = l.trim();
            if l.is_empty() || l.starts_with(';') {
                continue;
            }
            let (k, v) = l
                .split_once('=')
                .ok_or_else(|| IoError::parse(line, "expected 'key = value'"))?;
            let mut value = v.trim().to_string();
            if value.starts_with('{') {
                while !value.ends_with('}') {
                    let (_, more) = lines
                        .next()
                        .ok_or_else(|| IoError::parse(line, "unterminated '{'"))?;
                    value.push(' ');
                    value.push_str(more.trim());
                }
                value = value[1..value.len() - 1].trim().to_string();
            }
            let key = k.trim().to_ascii_lowercase();
            if map.insert(key.clone(), (line, value)).is_some() {
                return Err(IoError::parse(line, format!("duplicate key '{key}'")));
            }
        }
        Ok(Self(map))
    }

    fn raw(&self, key: &str) -> Option<(usize, &str)> {
        self.0.get(key).map(|(l, v)| (*l, v.as_str()))
    }

    fn required(&self, key: &str) -> Result<(usize, &str), IoError> {
        self.raw(key)
            .ok_or_else(|| IoError::parse(0, format!("header lacks '{key}'")))
    }

    fn int(&self, key: &str) -> Result<usize, IoError> {
        let (line, v) = self.required(key)?;
        v.parse().map_err(|_| IoError::parse(line, format!("{key}: not an integer")))
    }

    fn int_or(&self, key: &str, default: usize) -> Result<usize, IoError> {
        if self.raw(key).is_some() {
            self.int(key)
        } else {
            Ok(default)
        }
    }

    fn real(&self, key: &str) -> Result<Option<f64>, IoError> {
        self.raw(key).map(|(line, v)| real(v, line, key)).transpose()
    }

    fn reals(&self, key: &str) -> Result<Option<Vec<f64>>, IoError> {
        self.raw(key)
            .map(|(line, v)| {
                v.split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| real(s, line, key))
                    .collect()
            })
            .transpose()
    }

    fn check_layout(&self) -> Result<usize, IoError> {
        let interleave = self.required("interleave")?.1.to_ascii_lowercase();
        if interleave != "bil" {
            return Err(IoError::Unsupported(format!("interleave '{interleave}'")));
        }
        if self.int_or("byte order", 0)? != 0 {
            return Err(IoError::Unsupported("big-endian data".into()));
        }
        self.int_or("header offset", 0)
    }
}

fn list(values: &[f64]) -> String {
    values.iter().map(|v| format_f64(*v)).collect::<Vec<_>>().join(", ")
}

fn payload(data: &[u8], offset: usize, expected: Option<usize>) -> Result<&[u8], CubeError> {
    let actual = data.len().saturating_sub(offset);
    match expected {
        Some(e) if e == actual && offset <= data.len() => Ok(&data[offset..]),
        Some(e) => Err(CubeError::HeaderMismatch(format!(
            "header declares {e} data bytes, file holds {actual}"
        ))),
        None => Err(CubeError::HeaderMismatch("declared size overflows".into())),
    }
}

/// File triple of a cube: ENVI header, raw BIL data, one timestamp per line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CubeFiles {
    pub header: PathBuf,
    pub data: PathBuf,
    pub times: PathBuf,
}

impl CubeFiles {
    /// `<stem>.hdr`, `<stem>.bil`, `<stem>.times`.
    pub fn beside(header: &Path) -> Self {
        Self {
            header: header.to_path_buf(),
            data: header.with_extension("bil"),
            times: header.with_extension("times"),
        }
    }
}

pub fn decode_hypercube(header: &[u8], data: &[u8], times: &[u8]) -> Result<HyperCube, IoError> {
    let h = Header::parse(header)?;
    let samples = h.int("samples")?;
    let lines = h.int("lines")?;
    let bands = h.int("bands")?;
    let offset = h.check_layout()?;
    let dtype = h.int("data type")? as u32;
    let size = match dtype {
        DT_U16 => 2,
        DT_F32 => 4,
        other => return Err(IoError::Unsupported(format!("data type {other}"))),
    };
    let expected = samples
        .checked_mul(lines)
        .and_then(|v| v.checked_mul(bands))
        .and_then(|v| v.checked_mul(size));
    let raw = payload(data, offset, expected)?;
    let data = if dtype == DT_U16 {
        CubeData::U16(raw.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect())
    } else {
        CubeData::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    };
    let wavelengths = h
        .reals("wavelength")?
        .ok_or_else(|| IoError::parse(0, "header lacks 'wavelength'"))?;
    let mut stamps = Vec::new();
    for (line, tok) in records(utf8(times)?) {
        if tok.len() != 1 {
            return Err(IoError::parse(line, "one timestamp per line"));
        }
        stamps.push(real(tok[0], line, "timestamp")?);
    }
    let mut cube = HyperCube::new(samples, lines, bands, data, wavelengths, stamps)?;
    if let Some(focal) = h.real("focal length")? {
        let principal = h.real("principal point")?.unwrap_or((samples as f64 - 1.0) / 2.0);
        let lens = PushBroomIntrinsics {
            focal,
            principal,
            width: u32::try_from(samples).map_err(|_| IoError::Invalid("samples exceed u32".into()))?,
            band_count: u32::try_from(bands).map_err(|_| IoError::Invalid("bands exceed u32".into()))?,
        };
        lens.validate().map_err(|e| IoError::Invalid(e.to_string()))?;
        cube = cube.with_lens(lens);
    }
    Ok(cube)
}

/// Header text, raw data and timestamp text of a cube.
pub fn encode_hypercube(cube: &HyperCube) -> (String, Vec<u8>, String) {
    let (dtype, data) = match cube.data() {
        CubeData::U16(v) => (DT_U16, v.iter().flat_map(|x| x.to_le_bytes()).collect()),
        CubeData::F32(v) => (DT_F32, v.iter().flat_map(|x| x.to_le_bytes()).collect()),
    };
    let mut h = String::from("ENVI\ndescription = {push-broom hyperspectral cube}\n");
    let _ = writeln!(h, "samples = {}", cube.samples());
    let _ = writeln!(h, "lines = {}", cube.lines());
    let _ = writeln!(h, "bands = {}", cube.bands());
    h.push_str("header offset = 0\nfile type = ENVI Standard\n");
    let _ = writeln!(h, "data type = {dtype}");
    h.push_str("interleave = bil\nbyte order = 0\nwavelength units = Nanometers\n");
    let _ = writeln!(h, "wavelength = {{{}}}", list(cube.wavelengths()));
    if let Some(l) = &cube.lens {
        let _ = writeln!(h, "focal length = {}", format_f64(l.focal));
        let _ = writeln!(h, "principal point = {}", format_f64(l.principal));
    }
    let mut t = String::from("# scanline timestamps, seconds\n");
    for s in cube.timestamps() {
        t.push_str(&format_f64(*s));
        t.push('\n');
    }
    (h, data, t)
}

pub fn read_hypercube(header: &Path, data: &Path, times: &Path) -> Result<HyperCube, IoError> {
    decode_hypercube(&read_file(header)?, &read_file(data)?, &read_file(times)?)
}

pub fn write_hypercube(cube: &HyperCube, files: &CubeFiles) -> Result<(), IoError> {
    let (h, d, t) = encode_hypercube(cube);
    write_file(&files.header, h.as_bytes())?;
    write_file(&files.data, &d)?;
    write_file(&files.times, t.as_bytes())
}

/// File triple of an ortho raster: ENVI header, float64 BIL data, worldfile.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OrthoFiles {
    pub header: PathBuf,
    pub data: PathBuf,
    pub world: PathBuf,
}

impl OrthoFiles {
    /// `<stem>.hdr`, `<stem>.bil`, `<stem>.wld`.
    pub fn beside(header: &Path) -> Self {
        Self {
            header: header.to_path_buf(),
            data: header.with_extension("bil"),
            world: header.with_extension("wld"),
        }
    }
}

/// Header, data and worldfile of an ortho raster. Bands are the data
/// channels, then height, then scanline and column when provenance is kept.
/// Invalid cells hold the nodata value in every band.
pub fn encode_ortho(img: &OrthoImage) -> (String, Vec<u8>, String) {
    let g = &img.grid;
    let c = img.channels.len();
    let prov = img.provenance.is_some();
    let bands = c + 1 + if prov { 2 } else { 0 };
    let mut names: Vec<String> = (0..c).map(|i| format!("channel {i}")).collect();
    names.push("height".into());
    if prov {
        names.push("scanline".into());
        names.push("column".into());
    }
    let mut h = String::from("ENVI\ndescription = {ortho raster}\n");
    let _ = writeln!(h, "samples = {}", g.cols);
    let _ = writeln!(h, "lines = {}", g.rows);
    let _ = writeln!(h, "bands = {bands}");
    h.push_str("header offset = 0\nfile type = ENVI Standard\n");
    let _ = writeln!(h, "data type = {DT_F64}");
    h.push_str("interleave = bil\nbyte order = 0\n");
    let _ = writeln!(h, "channels = {c}");
    let _ = writeln!(h, "provenance = {}", prov as u8);
    let _ = writeln!(h, "data ignore value = {}", format_f64(NODATA));
    let _ = writeln!(h, "band names = {{{}}}", names.join(", "));
    if let Some(w) = &img.wavelengths {
        let _ = writeln!(h, "wavelength = {{{}}}", list(w));
    }
    let mut data = Vec::with_capacity(g.len() * bands * 8);
    for r in 0..g.rows {
        for b in 0..bands {
            for col in 0..g.cols {
                let i = img.index(r, col);
                let v = if !img.valid[i] {
                    NODATA
                } else if b < c {
                    img.channels[b][i] as f64
                } else if b == c {
                    img.height[i]
                } else {
                    let p = img.provenance.as_ref().unwrap()[i];
                    if b == c + 1 {
                        p.0 as f64
                    } else {
                        p.1 as f64
                    }
                };
                data.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let mut w = String::from("# ortho grid; row 0 is the northern edge\n");
    let _ = writeln!(w, "gsd = {}", format_f64(g.gsd));
    let _ = writeln!(w, "origin_north = {}", format_f64(g.origin_north()));
    let _ = writeln!(w, "origin_east = {}", format_f64(g.origin_east()));
    let _ = writeln!(w, "north_index = {}", g.north0);
    let _ = writeln!(w, "east_index = {}", g.east0);
    let _ = writeln!(w, "rows = {}", g.rows);
    let _ = writeln!(w, "cols = {}", g.cols);
    let _ = writeln!(w, "nodata = {}", format_f64(NODATA));
    (h, data, w)
}

fn world_value<'a>(src: &'a str, key: &str) -> Result<(usize, &'a str), IoError> {
    let mut found = None;
    for (line, tok) in records(src) {
        if tok.len() != 3 || tok[1] != "=" {
            return Err(IoError::parse(line, "expected 'key = value'"));
        }
        if tok[0] == key {
            if found.is_some() {
                return Err(IoError::parse(line, format!("duplicate key '{key}'")));
            }
            found = Some((line, tok[2]));
        }
    }
    found.ok_or_else(|| IoError::parse(0, format!("worldfile lacks '{key}'")))
}

fn provenance_index(v: f64) -> Option<u32> {
    (v >= 0.0 && v <= u32::MAX as f64 && v.fract() == 0.0).then_some(v as u32)
}

pub fn decode_ortho(header: &[u8], data: &[u8], world: &[u8]) -> Result<OrthoImage, IoError> {
    let h = Header::parse(header)?;
    let offset = h.check_layout()?;
    if h.int("data type")? as u32 != DT_F64 {
        return Err(IoError::Unsupported("ortho data must be float64".into()));
    }
    let cols = h.int("samples")?;
    let rows = h.int("lines")?;
    let bands = h.int("bands")?;
    let c = h.int("channels")?;
    let prov = h.int_or("provenance", 0)? == 1;
    if bands != c + 1 + if prov { 2 } else { 0 } {
        return Err(IoError::Invalid(format!("{bands} bands cannot hold {c} channels")));
    }
    let w = utf8(world)?;
    let get = |k: &str| -> Result<i64, IoError> {
        let (line, v) = world_value(w, k)?;
        v.parse().map_err(|_| IoError::parse(line, format!("{k}: not an integer")))
    };
    let (gl, gs) = world_value(w, "gsd")?;
    let gsd = real(gs, gl, "gsd")?;
    if get("rows")? != rows as i64 || get("cols")? != cols as i64 {
        return Err(IoError::Invalid("worldfile and header disagree on the raster size".into()));
    }
    let (nl, ns) = world_value(w, "nodata")?;
    if real(ns, nl, "nodata")? != NODATA {
        return Err(IoError::Unsupported("nodata value other than -9999".into()));
    }
    let grid = Grid::new(gsd, get("north_index")?, get("east_index")?, rows, cols)
        .map_err(|e| IoError::Invalid(e.to_string()))?;
    let expected = rows
        .checked_mul(cols)
        .and_then(|v| v.checked_mul(bands))
        .and_then(|v| v.checked_mul(8));
    let raw = payload(data, offset, expected)?;
    let at = |r: usize, b: usize, col: usize| {
        let k = ((r * bands + b) * cols + col) * 8;
        f64::from_le_bytes(raw[k..k + 8].try_into().unwrap())
    };
    let mut img = OrthoImage::empty(grid, c, prov);
    if let Some(wl) = h.reals("wavelength")? {
        if wl.len() != c {
            return Err(IoError::Invalid(format!("{} wavelengths for {c} channels", wl.len())));
        }
        img.wavelengths = Some(wl);
    }
    for r in 0..rows {
        for col in 0..cols {
            let i = img.index(r, col);
            let height = at(r, c, col);
            if height == NODATA {
                continue;
            }
            if !height.is_finite() {
                return Err(IoError::Invalid(format!("non-finite height at ({r}, {col})")));
            }
            img.valid[i] = true;
            img.height[i] = height;
            for b in 0..c {
                img.channels[b][i] = at(r, b, col) as f32;
            }
            if let Some(p) = img.provenance.as_mut() {
                let (s, u) = (at(r, c + 1, col), at(r, c + 2, col));
                p[i] = match (provenance_index(s), provenance_index(u)) {
                    (Some(s), Some(u)) => (s, u),
                    _ => return Err(IoError::Invalid(format!("provenance at ({r}, {col}) is not an index"))),
                };
            }
        }
    }
    Ok(img)
}

pub fn read_ortho(files: &OrthoFiles) -> Result<OrthoImage, IoError> {
    decode_ortho(&read_file(&files.header)?, &read_file(&files.data)?, &read_file(&files.world)?)
}

pub fn write_ortho(img: &OrthoImage, files: &OrthoFiles) -> Result<(), IoError> {
    let (h, d, w) = encode_ortho(img);
    write_file(&files.header, h.as_bytes())?;
    write_file(&files.data, &d)?;
    write_file(&files.world, w.as_bytes())
}
