//! Minimal PLY reader/writer for colored point clouds.
//!
//! Supports `ascii` and `binary_little_endian` encodings. The `vertex`
//! element must carry scalar `x`, `y`, `z` (float or double); `red`,
//! `green`, `blue` are optional uchar properties. Other scalar vertex
//! properties are skipped. Elements after `vertex` are ignored.

use std::fmt::Write as _;
use std::path::Path;

use crate::geometry::{ColoredPoint, Point3, Rgb};

#[derive(Debug, thiserror::Error)]
pub enum PlyError {
    #[error("io error reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed PLY header at byte {offset}: {message}")]
    Header { offset: usize, message: String },
    #[error("unsupported PLY layout at byte {offset}: {message}")]
    Unsupported { offset: usize, message: String },
    #[error("truncated PLY body at byte {offset}: header declares {declared} vertices, only {parsed} present")]
    Truncated { offset: usize, declared: usize, parsed: usize },
    #[error("bad PLY value at byte {offset}: {message}")]
    Value { offset: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Encoding {
    Ascii,
    BinaryLe,
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
    fn parse(name: &str) -> Option<Scalar> {
        Some(match name {
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

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }

    /// ASCII tokens are parsed at the declared width so both encodings of
    /// the same data produce identical values.
    fn parse_ascii(self, tok: &str) -> Option<f64> {
        match self {
            Scalar::F32 => tok.parse::<f32>().ok().map(f64::from),
            Scalar::F64 => tok.parse::<f64>().ok(),
            Scalar::I8 => tok.parse::<i8>().ok().map(f64::from),
            Scalar::U8 => tok.parse::<u8>().ok().map(f64::from),
            Scalar::I16 => tok.parse::<i16>().ok().map(f64::from),
            Scalar::U16 => tok.parse::<u16>().ok().map(f64::from),
            Scalar::I32 => tok.parse::<i32>().ok().map(f64::from),
            Scalar::U32 => tok.parse::<u32>().ok().map(f64::from),
        }
    }
}

#[derive(Debug)]
struct Property {
    name: String,
    scalar: Option<Scalar>,
}

#[derive(Debug)]
struct Element {
    name: String,
    count: usize,
    properties: Vec<Property>,
    offset: usize,
}

struct Header {
    encoding: Encoding,
    elements: Vec<Element>,
    body_offset: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header, PlyError> {
    let mut offset = 0usize;
    let mut lines = Vec::new();
    loop {
        let rest = &bytes[offset..];
        let Some(nl) = rest.iter().position(|&b| b == b'\n') else {
            return Err(PlyError::Header { offset, message: "missing end_header".into() });
        };
        let line = std::str::from_utf8(&rest[..nl])
            .map_err(|_| PlyError::Header { offset, message: "non-UTF-8 header line".into() })?
            .trim_end_matches('\r')
            .to_string();
        let done = line.trim() == "end_header";
        lines.push((offset, line));
        offset += nl + 1;
        if done {
            break;
        }
    }

    let mut it = lines.into_iter();
    if !matches!(it.next(), Some((_, ref l)) if l.trim() == "ply") {
        return Err(PlyError::Header { offset: 0, message: "missing 'ply' magic".into() });
    }

    let mut encoding = None;
    let mut elements: Vec<Element> = Vec::new();
    for (off, line) in it {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            [] => {}
            ["comment", ..] | ["obj_info", ..] | ["end_header"] => {}
            ["format", fmt, _version] => {
                encoding = Some(match *fmt {
                    "ascii" => Encoding::Ascii,
                    "binary_little_endian" => Encoding::BinaryLe,
                    other => {
                        return Err(PlyError::Unsupported { offset: off, message: format!("format '{other}'") });
                    }
                });
            }
            ["element", name, count] => {
                let count = count
                    .parse()
                    .map_err(|_| PlyError::Header { offset: off, message: format!("bad element count '{count}'") })?;
                elements.push(Element { name: name.to_string(), count, properties: Vec::new(), offset: off });
            }
            ["property", "list", _, _, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| PlyError::Header { offset: off, message: "property before element".into() })?;
                el.properties.push(Property { name: name.to_string(), scalar: None });
            }
            ["property", ty, name] => {
                let scalar = Scalar::parse(ty)
                    .ok_or_else(|| PlyError::Header { offset: off, message: format!("unknown property type '{ty}'") })?;
                let el = elements
                    .last_mut()
                    .ok_or_else(|| PlyError::Header { offset: off, message: "property before element".into() })?;
                el.properties.push(Property { name: name.to_string(), scalar: Some(scalar) });
            }
            _ => return Err(PlyError::Header { offset: off, message: format!("unrecognized line '{line}'") }),
        }
    }
    let encoding = encoding.ok_or(PlyError::Header { offset: 0, message: "missing format line".into() })?;
    Ok(Header { encoding, elements, body_offset: offset })
}

struct VertexLayout {
    xyz: [usize; 3],
    rgb: Option<[usize; 3]>,
    scalars: Vec<Scalar>,
    row_bytes: usize,
}

fn vertex_layout(el: &Element) -> Result<VertexLayout, PlyError> {
    let unsupported = |message: String| PlyError::Unsupported { offset: el.offset, message };
    let mut scalars = Vec::with_capacity(el.properties.len());
    for p in &el.properties {
        scalars.push(p.scalar.ok_or_else(|| unsupported(format!("list property '{}' on vertex", p.name)))?);
    }
    let find = |name: &str| el.properties.iter().position(|p| p.name == name);
    let mut xyz = [0; 3];
    for (slot, name) in xyz.iter_mut().zip(["x", "y", "z"]) {
        let i = find(name).ok_or_else(|| unsupported(format!("vertex has no '{name}' property")))?;
        if !matches!(scalars[i], Scalar::F32 | Scalar::F64) {
            return Err(unsupported(format!("vertex '{name}' must be float or double")));
        }
        *slot = i;
    }
    let rgb = match (find("red"), find("green"), find("blue")) {
        (Some(r), Some(g), Some(b)) => {
            for i in [r, g, b] {
                if scalars[i] != Scalar::U8 {
                    return Err(unsupported(format!("color property '{}' must be uchar", el.properties[i].name)));
                }
            }
            Some([r, g, b])
        }
        (None, None, None) => None,
        _ => return Err(unsupported("partial red/green/blue color properties".into())),
    };
    let row_bytes = scalars.iter().map(|s| s.size()).sum();
    Ok(VertexLayout { xyz, rgb, scalars, row_bytes })
}

fn to_point(vals: &[f64], layout: &VertexLayout, offset: usize) -> Result<ColoredPoint, PlyError> {
    let position = Point3::new(vals[layout.xyz[0]], vals[layout.xyz[1]], vals[layout.xyz[2]]);
    if !position.is_finite() {
        return Err(PlyError::Value { offset, message: "non-finite vertex coordinate".into() });
    }
    let color = match layout.rgb {
        Some([r, g, b]) => Rgb([vals[r] as u8, vals[g] as u8, vals[b] as u8]),
        None => Rgb::MID_GRAY,
    };
    Ok(ColoredPoint { position, color })
}

/// Parse an in-memory PLY file.
pub fn parse_ply(bytes: &[u8]) -> Result<Vec<ColoredPoint>, PlyError> {
    let header = parse_header(bytes)?;
    let vi = header
        .elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or(PlyError::Unsupported { offset: 0, message: "no 'vertex' element".into() })?;
    let layout = vertex_layout(&header.elements[vi])?;
    let declared = header.elements[vi].count;
    let mut out = Vec::with_capacity(declared);

    match header.encoding {
        Encoding::BinaryLe => {
            let mut cursor = header.body_offset;
            for el in &header.elements[..vi] {
                if el.properties.iter().any(|p| p.scalar.is_none()) {
                    return Err(PlyError::Unsupported {
                        offset: el.offset,
                        message: format!("list properties in element '{}' preceding vertex", el.name),
                    });
                }
                let row: usize = el.properties.iter().map(|p| p.scalar.unwrap().size()).sum();
                cursor += row * el.count;
            }
            let mut vals = vec![0.0; layout.scalars.len()];
            for parsed in 0..declared {
                if cursor + layout.row_bytes > bytes.len() {
                    return Err(PlyError::Truncated { offset: cursor.min(bytes.len()), declared, parsed });
                }
                let mut at = cursor;
                for (v, s) in vals.iter_mut().zip(&layout.scalars) {
                    *v = s.read_le(&bytes[at..]);
                    at += s.size();
                }
                out.push(to_point(&vals, &layout, cursor)?);
                cursor = at;
            }
        }
        Encoding::Ascii => {
            let body = std::str::from_utf8(&bytes[header.body_offset..]).map_err(|e| PlyError::Value {
                offset: header.body_offset + e.valid_up_to(),
                message: "non-UTF-8 ASCII body".into(),
            })?;
            let mut lines = Vec::new();
            let mut off = header.body_offset;
            for line in body.split_inclusive('\n') {
                if !line.trim().is_empty() {
                    lines.push((off, line.trim()));
                }
                off += line.len();
            }
            let skip: usize = header.elements[..vi].iter().map(|e| e.count).sum();
            let end = header.body_offset + body.len();
            let mut vals = vec![0.0; layout.scalars.len()];
            for parsed in 0..declared {
                let Some(&(line_off, line)) = lines.get(skip + parsed) else {
                    return Err(PlyError::Truncated { offset: end, declared, parsed });
                };
                let toks: Vec<&str> = line.split_whitespace().collect();
                if toks.len() != layout.scalars.len() {
                    return Err(PlyError::Value {
                        offset: line_off,
                        message: format!("expected {} values, found {}", layout.scalars.len(), toks.len()),
                    });
                }
                for ((v, s), tok) in vals.iter_mut().zip(&layout.scalars).zip(&toks) {
                    *v = s.parse_ascii(tok).ok_or_else(|| PlyError::Value {
                        offset: line_off,
                        message: format!("cannot parse '{tok}' as {s:?}"),
                    })?;
                }
                out.push(to_point(&vals, &layout, line_off)?);
            }
        }
    }
    Ok(out)
}

pub fn load_point_cloud(path: &Path) -> Result<Vec<ColoredPoint>, PlyError> {
    let bytes = std::fs::read(path).map_err(|source| PlyError::Io { path: path.display().to_string(), source })?;
    parse_ply(&bytes)
}

fn header_text(format: &str, n: usize) -> String {
    let mut h = String::new();
    let _ = write!(
        h,
        "ply\nformat {format} 1.0\nelement vertex {n}\nproperty float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n"
    );
    h
}

/// Encode points as ASCII PLY (float32 coordinates, uchar colors).
pub fn encode_ply_ascii(points: &[ColoredPoint]) -> Vec<u8> {
    let mut s = header_text("ascii", points.len());
    for p in points {
        let [r, g, b] = p.color.0;
        let _ = writeln!(
            s,
            "{} {} {} {r} {g} {b}",
            p.position.x as f32, p.position.y as f32, p.position.z as f32
        );
    }
    s.into_bytes()
}

/// Encode points as binary little-endian PLY (float32 coordinates, uchar colors).
pub fn encode_ply_binary(points: &[ColoredPoint]) -> Vec<u8> {
    let mut out = header_text("binary_little_endian", points.len()).into_bytes();
    for p in points {
        for c in [p.position.x, p.position.y, p.position.z] {
            out.extend_from_slice(&(c as f32).to_le_bytes());
        }
        out.extend_from_slice(&p.color.0);
    }
    out
}
