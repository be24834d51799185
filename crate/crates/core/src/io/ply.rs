use std::fmt::Write;
use std::path::Path;

use nalgebra::Vector3;

use super::text::{format_f64, utf8};
use super::{read_file, write_file, IoError, Reader};
use crate::raycast::TriMesh;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PlyEncoding {
    Ascii,
    #[default]
    BinaryLittleEndian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn read(self, r: &mut Reader) -> Result<f64, IoError> {
        Ok(match self {
            Scalar::I8 => i8::from_le_bytes(r.array()?) as f64,
            Scalar::U8 => u8::from_le_bytes(r.array()?) as f64,
            Scalar::I16 => i16::from_le_bytes(r.array()?) as f64,
            Scalar::U16 => u16::from_le_bytes(r.array()?) as f64,
            Scalar::I32 => i32::from_le_bytes(r.array()?) as f64,
            Scalar::U32 => r.u32()? as f64,
            Scalar::F32 => r.f32()? as f64,
            Scalar::F64 => r.f64()?,
        })
    }

    fn is_integer(self) -> bool {
        !matches!(self, Scalar::F32 | Scalar::F64)
    }
}

#[derive(Debug, Clone)]
enum Property {
    Scalar(String, Scalar),
    List(String, Scalar, Scalar),
}

impl Property {
    fn name(&self) -> &str {
        match self {
            Property::Scalar(n, _) | Property::List(n, _, _) => n,
        }
    }

    fn min_size(&self) -> usize {
        match self {
            Property::Scalar(_, t) | Property::List(_, t, _) => t.size(),
        }
    }
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    properties: Vec<Property>,
}

struct Header {
    binary: bool,
    elements: Vec<Element>,
    /// Byte offset of the body.
    body: usize,
    /// Line number of the first body line.
    body_line: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header, IoError> {
    let end = bytes
        .windows(10)
        .position(|w| w == b"end_header")
        .ok_or_else(|| IoError::parse(1, "missing end_header"))?;
    let mut body = end + 10;
    if bytes.get(body) == Some(&b'\r') {
        body += 1;
    }
    if bytes.get(body) != Some(&b'\n') {
        return Err(IoError::binary(body, "end_header must end its line"));
    }
    body += 1;
    let text = utf8(&bytes[..end])?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == "ply" => {}
        _ => return Err(IoError::parse(1, "missing 'ply' magic")),
    }
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    for (i, l) in lines {
        let line = i + 1;
        let tok: Vec<&str> = l.split_whitespace().collect();
        match tok.first().copied() {
            None | Some("comment") | Some("obj_info") => {}
            Some("format") => {
                if tok.len() != 3 || tok[2] != "1.0" {
                    return Err(IoError::parse(line, "malformed format line"));
                }
                format = Some(match tok[1] {
                    "ascii" => false,
                    "binary_little_endian" => true,
                    other => return Err(IoError::Unsupported(format!("PLY format '{other}'"))),
                });
            }
            Some("element") => {
                if tok.len() != 3 {
                    return Err(IoError::parse(line, "malformed element line"));
                }
                let count = tok[2]
                    .parse()
                    .map_err(|_| IoError::parse(line, "element count"))?;
                elements.push(Element {
                    name: tok[1].to_string(),
                    count,
                    properties: Vec::new(),
                });
            }
            Some("property") => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| IoError::parse(line, "property before element"))?;
                let bad = || IoError::parse(line, "malformed property line");
                let prop = if tok.get(1) == Some(&"list") {
                    if tok.len() != 5 {
                        return Err(bad());
                    }
                    let ct = Scalar::parse(tok[2]).ok_or_else(bad)?;
                    if !ct.is_integer() {
                        return Err(IoError::parse(line, "list count must be an integer type"));
                    }
                    Property::List(tok[4].to_string(), ct, Scalar::parse(tok[3]).ok_or_else(bad)?)
                } else {
                    if tok.len() != 3 {
                        return Err(bad());
                    }
                    Property::Scalar(tok[2].to_string(), Scalar::parse(tok[1]).ok_or_else(bad)?)
                };
                el.properties.push(prop);
            }
            Some(other) => return Err(IoError::parse(line, format!("unknown header keyword '{other}'"))),
        }
    }
    let binary = format.ok_or_else(|| IoError::parse(1, "missing format line"))?;
    Ok(Header {
        binary,
        elements,
        body,
        body_line: text.lines().count() + 2,
    })
}

/// Values of one element instance: scalars and lists flattened per property.
type Record = Vec<Vec<f64>>;

/// Streams element instances from either encoding.
enum Body<'a> {
    Ascii { lines: std::iter::Enumerate<std::str::Lines<'a>>, first: usize },
    Binary(Reader<'a>),
}

impl Body<'_> {
    fn record(&mut self, el: &Element, out: &mut Record) -> Result<(), IoError> {
        out.resize(el.properties.len(), Vec::new());
        match self {
            Body::Binary(r) => {
                for (p, o) in el.properties.iter().zip(out.iter_mut()) {
                    o.clear();
                    match p {
                        Property::Scalar(_, t) => o.push(t.read(r)?),
                        Property::List(_, ct, vt) => {
                            let at = r.pos();
                            let n = ct.read(r)?;
                            if n < 0.0 || n as usize * vt.size() > r.remaining() {
                                return Err(IoError::binary(at, "list length exceeds data"));
                            }
                            for _ in 0..n as usize {
                                o.push(vt.read(r)?);
                            }
                        }
                    }
                }
            }
            Body::Ascii { lines, first } => {
                let (i, l) = loop {
                    match lines.next() {
                        Some((_, l)) if l.trim().is_empty() => continue,
                        Some(x) => break x,
                        None => return Err(IoError::parse(0, format!("truncated {} data", el.name))),
                    }
                };
                let line = *first + i;
                let mut tok = l.split_whitespace();
                let mut next = |t: Scalar| -> Result<f64, IoError> {
                    let s = tok.next().ok_or_else(|| IoError::parse(line, "too few values"))?;
                    let v: f64 = s.parse().map_err(|_| IoError::parse(line, "malformed number"))?;
                    if t.is_integer() && v.fract() != 0.0 {
                        return Err(IoError::parse(line, "expected an integer"));
                    }
                    Ok(v)
                };
                for (p, o) in el.properties.iter().zip(out.iter_mut()) {
                    o.clear();
                    match p {
                        Property::Scalar(_, t) => o.push(next(*t)?),
                        Property::List(_, ct, vt) => {
                            let n = next(*ct)?;
                            if !(0.0..=1e6).contains(&n) {
                                return Err(IoError::parse(line, "list length out of range"));
                            }
                            for _ in 0..n as usize {
                                o.push(next(*vt)?);
                            }
                        }
                    }
                }
                if tok.next().is_some() {
                    return Err(IoError::parse(line, "too many values"));
                }
            }
        }
        Ok(())
    }
}

fn index_of(el: &Element, names: &[&str]) -> Option<usize> {
    el.properties.iter().position(|p| names.contains(&p.name()))
}

fn color_channel(v: f64, what: &str) -> Result<u8, IoError> {
    if !(0.0..=255.0).contains(&v) || v.fract() != 0.0 {
        return Err(IoError::Invalid(format!("{what} channel value {v} is not a byte")));
    }
    Ok(v as u8)
}

/// Triangle mesh from PLY bytes. Zero-area faces are dropped.
pub fn decode_ply(bytes: &[u8]) -> Result<TriMesh, IoError> {
    let h = parse_header(bytes)?;
    let mut body = if h.binary {
        let mut r = Reader::new(bytes);
        r.take(h.body)?;
        Body::Binary(r)
    } else {
        Body::Ascii {
            lines: utf8(&bytes[h.body..])?.lines().enumerate(),
            first: h.body_line,
        }
    };
    let remaining = bytes.len() - h.body;
    let mut vertices = Vec::new();
    let mut colors: Option<Vec<[u8; 3]>> = None;
    let mut faces = Vec::new();
    let mut seen_vertex = false;
    let mut rec = Record::new();
    for el in &h.elements {
        let min = el.properties.iter().map(Property::min_size).sum::<usize>().max(1);
        let bound = if h.binary { remaining / min } else { remaining / 2 + 1 };
        if el.count > bound {
            return Err(IoError::Invalid(format!(
                "element '{}' declares {} records, data holds at most {bound}",
                el.name, el.count
            )));
        }
        match el.name.as_str() {
            "vertex" => {
                seen_vertex = true;
                let xyz = ["x", "y", "z"].map(|n| index_of(el, &[n]));
                let [Some(ix), Some(iy), Some(iz)] = xyz else {
                    return Err(IoError::Invalid("vertex element lacks x/y/z".into()));
                };
                let rgb = ["red", "green", "blue"].map(|n| index_of(el, &[n]));
                let rgb = match rgb {
                    [Some(r), Some(g), Some(b)] => Some([r, g, b]),
                    _ => None,
                };
                vertices.reserve(el.count);
                if rgb.is_some() {
                    colors = Some(Vec::with_capacity(el.count));
                }
                for _ in 0..el.count {
                    body.record(el, &mut rec)?;
                    let g = |i: usize| rec[i].first().copied().unwrap_or(f64::NAN);
                    vertices.push(Vector3::new(g(ix), g(iy), g(iz)));
                    if let (Some([r, gg, b]), Some(c)) = (rgb, colors.as_mut()) {
                        c.push([color_channel(g(r), "red")?, color_channel(g(gg), "green")?, color_channel(g(b), "blue")?]);
                    }
                }
            }
            "face" => {
                if !seen_vertex {
                    return Err(IoError::Invalid("face element before vertex element".into()));
                }
                let Some(iv) = index_of(el, &["vertex_indices", "vertex_index"]) else {
                    return Err(IoError::Invalid("face element lacks vertex_indices".into()));
                };
                faces.reserve(el.count);
                for k in 0..el.count {
                    body.record(el, &mut rec)?;
                    let idx = &rec[iv];
                    if idx.len() != 3 {
                        return Err(IoError::Unsupported(format!(
                            "face {k} has {} vertices, only triangles are accepted",
                            idx.len()
                        )));
                    }
                    let mut f = [0u32; 3];
                    for (o, v) in f.iter_mut().zip(idx) {
                        if !(0.0..=u32::MAX as f64).contains(v) || v.fract() != 0.0 {
                            return Err(IoError::Invalid(format!("face {k} has index {v}")));
                        }
                        *o = *v as u32;
                    }
                    faces.push(f);
                }
            }
            _ => {
                for _ in 0..el.count {
                    body.record(el, &mut rec)?;
                }
            }
        }
    }
    if !seen_vertex {
        return Err(IoError::Invalid("no vertex element".into()));
    }
    TriMesh::new(vertices, faces, colors)
        .map(|(m, _)| m)
        .map_err(|e| IoError::Invalid(e.to_string()))
}

/// Vertex-only or mesh PLY body writer shared with the cloud export.
pub(crate) fn encode_ply_parts(
    vertices: &[Vector3<f64>],
    colors: Option<&[[u8; 3]]>,
    faces: &[[u32; 3]],
    with_faces: bool,
    encoding: PlyEncoding,
) -> Vec<u8> {
    let mut head = String::from("ply\n");
    head.push_str(match encoding {
        PlyEncoding::Ascii => "format ascii 1.0\n",
        PlyEncoding::BinaryLittleEndian => "format binary_little_endian 1.0\n",
    });
    let _ = writeln!(head, "element vertex {}", vertices.len());
    head.push_str("property double x\nproperty double y\nproperty double z\n");
    if colors.is_some() {
        head.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    if with_faces {
        let _ = writeln!(head, "element face {}", faces.len());
        head.push_str("property list uchar uint vertex_indices\n");
    }
    head.push_str("end_header\n");
    let mut out = head.into_bytes();
    match encoding {
        PlyEncoding::Ascii => {
            let mut s = String::new();
            for (i, v) in vertices.iter().enumerate() {
                let _ = write!(s, "{} {} {}", format_f64(v.x), format_f64(v.y), format_f64(v.z));
                if let Some(c) = colors {
                    let _ = write!(s, " {} {} {}", c[i][0], c[i][1], c[i][2]);
                }
                s.push('\n');
            }
            for f in faces.iter().filter(|_| with_faces) {
                let _ = writeln!(s, "3 {} {} {}", f[0], f[1], f[2]);
            }
            out.extend_from_slice(s.as_bytes());
        }
        PlyEncoding::BinaryLittleEndian => {
            for (i, v) in vertices.iter().enumerate() {
                for x in [v.x, v.y, v.z] {
                    out.extend_from_slice(&x.to_le_bytes());
                }
                if let Some(c) = colors {
                    out.extend_from_slice(&c[i]);
                }
            }
            for f in faces.iter().filter(|_| with_faces) {
                out.push(3);
                for k in f {
                    out.extend_from_slice(&k.to_le_bytes());
                }
            }
        }
    }
    out
}

pub fn encode_ply(mesh: &TriMesh, encoding: PlyEncoding) -> Vec<u8> {
    encode_ply_parts(&mesh.vertices, mesh.colors.as_deref(), &mesh.faces, true, encoding)
}

pub fn read_mesh(path: &Path) -> Result<TriMesh, IoError> {
    decode_ply(&read_file(path)?)
}

pub fn write_mesh(mesh: &TriMesh, path: &Path, encoding: PlyEncoding) -> Result<(), IoError> {
    write_file(path, &encode_ply(mesh, encoding))
}
