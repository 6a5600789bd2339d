use std::fs;
use std::io::Write;
use std::path::Path;

use super::{Point, PointCloud};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Encoding {
    Ascii,
    BinaryLe,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
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
    fn parse(s: &str) -> Option<Scalar> {
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

    fn is_float(self) -> bool {
        matches!(self, Scalar::F32 | Scalar::F64)
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
}

struct Property {
    name: String,
    ty: Scalar,
}

struct Header {
    encoding: Encoding,
    vertex_count: usize,
    props: Vec<Property>,
    /// Column of x, y, z, red, green, blue within a vertex record.
    slots: [usize; 6],
    body_offset: usize,
    /// 1-based line of the first vertex record (ascii only).
    body_line: usize,
}

fn format_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        line,
        msg: msg.into(),
    }
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let mut offset = 0usize;
    let mut line_no = 0usize;
    let mut encoding = None;
    let mut vertex_count = None;
    let mut props: Vec<Property> = Vec::new();
    // Element currently receiving `property` lines; only vertex is kept.
    let mut in_vertex = false;
    let mut seen_other_before_vertex = false;

    loop {
        let rest = &bytes[offset..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| format_err(line_no + 1, "header not terminated by end_header"))?;
        line_no += 1;
        let raw = &rest[..nl];
        offset += nl + 1;
        let line = std::str::from_utf8(raw)
            .map_err(|_| format_err(line_no, "header line is not valid UTF-8"))?
            .trim_end_matches('\r')
            .trim();

        if line_no == 1 {
            if line != "ply" {
                return Err(format_err(line_no, format!("expected `ply`, found `{line}`")));
            }
            continue;
        }
        let mut tok = line.split_whitespace();
        match tok.next() {
            None => continue,
            Some("comment") | Some("obj_info") => continue,
            Some("format") => {
                let kind = tok.next().unwrap_or("");
                let version = tok.next().unwrap_or("");
                if version != "1.0" {
                    return Err(format_err(line_no, format!("unknown format version `{version}`")));
                }
                encoding = Some(match kind {
                    "ascii" => Encoding::Ascii,
                    "binary_little_endian" => Encoding::BinaryLe,
                    "binary_big_endian" => {
                        return Err(Error::Unsupported("big-endian PLY".into()));
                    }
                    other => {
                        return Err(format_err(line_no, format!("unknown format `{other}`")));
                    }
                });
            }
            Some("element") => {
                let name = tok
                    .next()
                    .ok_or_else(|| format_err(line_no, "element without name"))?;
                let count: usize = tok
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| format_err(line_no, "element count is not an integer"))?;
                if name == "vertex" {
                    if vertex_count.is_some() {
                        return Err(format_err(line_no, "duplicate vertex element"));
                    }
                    if seen_other_before_vertex {
                        return Err(Error::Unsupported(
                            "elements declared before vertex".into(),
                        ));
                    }
                    vertex_count = Some(count);
                    in_vertex = true;
                } else {
                    if vertex_count.is_none() && count > 0 {
                        seen_other_before_vertex = true;
                    }
                    in_vertex = false;
                }
            }
            Some("property") => {
                let ty = tok
                    .next()
                    .ok_or_else(|| format_err(line_no, "property without type"))?;
                if !in_vertex {
                    continue;
                }
                if ty == "list" {
                    return Err(Error::Unsupported("list property on vertex".into()));
                }
                let ty = Scalar::parse(ty)
                    .ok_or_else(|| format_err(line_no, format!("unknown property type `{ty}`")))?;
                let name = tok
                    .next()
                    .ok_or_else(|| format_err(line_no, "property without name"))?;
                props.push(Property {
                    name: name.to_string(),
                    ty,
                });
            }
            Some("end_header") => break,
            Some(other) => {
                return Err(format_err(line_no, format!("unexpected header keyword `{other}`")));
            }
        }
    }

    let encoding = encoding.ok_or_else(|| format_err(line_no, "missing format line"))?;
    let vertex_count = vertex_count.ok_or_else(|| format_err(line_no, "missing vertex element"))?;
    let find = |n: &str| props.iter().position(|p| p.name == n);
    let coord = |n: &str| {
        find(n).ok_or_else(|| format_err(line_no, format!("vertex property `{n}` missing")))
    };
    let (x, y, z) = (coord("x")?, coord("y")?, coord("z")?);
    let color = |n: &str| {
        find(n).ok_or_else(|| Error::Unsupported(format!("vertex color property `{n}` missing")))
    };
    let (r, g, b) = (color("red")?, color("green")?, color("blue")?);
    if !(r < g && g < b) {
        return Err(Error::Unsupported("color properties not in red, green, blue order".into()));
    }
    for &c in &[r, g, b] {
        if props[c].ty != Scalar::U8 {
            return Err(Error::Unsupported(format!(
                "color property `{}` is not uchar",
                props[c].name
            )));
        }
    }
    Ok(Header {
        encoding,
        vertex_count,
        props,
        slots: [x, y, z, r, g, b],
        body_offset: offset,
        body_line: line_no + 1,
    })
}

fn to_coord(v: f64, float: bool, line: usize) -> Result<i32> {
    if float && v.fract() != 0.0 {
        return Err(Error::contract(
            "pointcloud",
            format!("coordinate {v} at record line {line} is not integral"),
        ));
    }
    if !(0.0..=i32::MAX as f64).contains(&v) {
        return Err(Error::contract(
            "pointcloud",
            format!("coordinate {v} at record line {line} outside [0, 2^31)"),
        ));
    }
    Ok(v as i32)
}

fn make_point(vals: &[f64], h: &Header, line: usize) -> Result<Point> {
    let [x, y, z, r, g, b] = h.slots;
    let c = |i: usize| to_coord(vals[i], h.props[i].ty.is_float(), line);
    Ok(Point::new(
        c(x)?,
        c(y)?,
        c(z)?,
        vals[r] as u8,
        vals[g] as u8,
        vals[b] as u8,
    ))
}

/// Parses PLY bytes (ascii or binary little-endian) into a validated cloud.
pub fn read_ply(bytes: &[u8]) -> Result<PointCloud> {
    let h = parse_header(bytes)?;
    let body = &bytes[h.body_offset..];
    let mut points = Vec::with_capacity(h.vertex_count);
    let mut vals = vec![0f64; h.props.len()];
    match h.encoding {
        Encoding::BinaryLe => {
            let stride: usize = h.props.iter().map(|p| p.ty.size()).sum();
            if body.len() < stride * h.vertex_count {
                return Err(format_err(
                    h.body_line,
                    format!(
                        "binary body holds {} bytes, {} vertices need {}",
                        body.len(),
                        h.vertex_count,
                        stride * h.vertex_count
                    ),
                ));
            }
            for rec in body.chunks_exact(stride).take(h.vertex_count) {
                let mut at = 0;
                for (v, p) in vals.iter_mut().zip(&h.props) {
                    *v = p.ty.read_le(&rec[at..]);
                    at += p.ty.size();
                }
                points.push(make_point(&vals, &h, h.body_line)?);
            }
        }
        Encoding::Ascii => {
            let text = std::str::from_utf8(body)
                .map_err(|_| format_err(h.body_line, "ascii body is not valid UTF-8"))?;
            let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
            for _ in 0..h.vertex_count {
                let (i, l) = lines.next().ok_or_else(|| {
                    format_err(h.body_line, format!("expected {} vertex lines", h.vertex_count))
                })?;
                let line = h.body_line + i;
                let mut n = 0;
                for (slot, tok) in l.split_whitespace().enumerate() {
                    if slot >= vals.len() {
                        return Err(format_err(line, "too many values in vertex record"));
                    }
                    vals[slot] = tok
                        .parse()
                        .map_err(|_| format_err(line, format!("`{tok}` is not a number")))?;
                    n += 1;
                }
                if n != vals.len() {
                    return Err(format_err(
                        line,
                        format!("vertex record has {n} values, header declares {}", vals.len()),
                    ));
                }
                for (v, p) in vals.iter().zip(&h.props) {
                    if p.ty == Scalar::U8 && !(0.0..=255.0).contains(v) {
                        return Err(format_err(line, format!("`{v}` does not fit uchar `{}`", p.name)));
                    }
                }
                points.push(make_point(&vals, &h, line)?);
            }
        }
    }
    PointCloud::new(points)
}

pub fn load_ply(path: &Path) -> Result<PointCloud> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_ply(&bytes)
}

fn header(n: usize, binary: bool) -> String {
    format!(
        "ply\nformat {} 1.0\nelement vertex {n}\nproperty int x\nproperty int y\nproperty int z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        if binary { "binary_little_endian" } else { "ascii" }
    )
}

/// Canonical serialization: int32 coordinates, uchar colors, fixed header.
pub fn write_ply(pc: &PointCloud, binary: bool) -> Vec<u8> {
    let mut out = header(pc.len(), binary).into_bytes();
    if binary {
        out.reserve(pc.len() * 15);
        for p in pc.points() {
            out.extend_from_slice(&p.x.to_le_bytes());
            out.extend_from_slice(&p.y.to_le_bytes());
            out.extend_from_slice(&p.z.to_le_bytes());
            out.extend_from_slice(&[p.r, p.g, p.b]);
        }
    } else {
        for p in pc.points() {
            writeln!(out, "{} {} {} {} {} {}", p.x, p.y, p.z, p.r, p.g, p.b).unwrap();
        }
    }
    out
}

pub fn save_ply(pc: &PointCloud, path: &Path, binary: bool) -> Result<()> {
    fs::write(path, write_ply(pc, binary)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    const ONE: &str = "ply\nformat ascii 1.0\nelement vertex 1\nproperty int x\nproperty int y\n\
                       property int z\nproperty uchar red\nproperty uchar green\nproperty uchar blue\n\
                       end_header\n1 2 3 255 0 0\n";

    #[test]
    fn single_ascii_point() {
        let pc = read_ply(ONE.as_bytes()).unwrap();
        assert_eq!(pc.points(), &[Point::new(1, 2, 3, 255, 0, 0)]);
        assert_eq!(pc.bit_depth(), 8);
    }

    #[test]
    fn duplicate_voxel_in_file() {
        let src = ONE.replace("vertex 1", "vertex 2") + "1 2 3 0 255 0\n";
        let pc = read_ply(src.as_bytes()).unwrap();
        assert_eq!(pc.len(), 1);
        assert_eq!(pc.points()[0].rgb(), [255, 0, 0]);
    }

    #[test]
    fn empty_cloud_is_valid() {
        let bytes = write_ply(&PointCloud::empty(), false);
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert!(text.contains("element vertex 0\n"));
        assert!(read_ply(&bytes).unwrap().is_empty());
    }

    #[test]
    fn binary_size_follows_layout() {
        let pc = PointCloud::new(vec![
            Point::new(0, 0, 0, 1, 2, 3),
            Point::new(5, 6, 7, 4, 5, 6),
            Point::new(900, 1, 2, 7, 8, 9),
        ])
        .unwrap();
        let bytes = write_ply(&pc, true);
        assert_eq!(bytes.len(), header(3, true).len() + 3 * (3 * 4 + 3));
        assert_eq!(read_ply(&bytes).unwrap(), pc);
        assert_eq!(read_ply(&write_ply(&pc, false)).unwrap(), pc);
    }

    #[test]
    fn float_coordinates_and_extra_properties() {
        let src = "ply\nformat ascii 1.0\ncomment 8i style\nelement vertex 2\nproperty float x\n\
                   property float y\nproperty float z\nproperty float nx\nproperty uchar red\n\
                   property uchar green\nproperty uchar blue\nelement face 0\n\
                   property list uchar int vertex_indices\nend_header\n\
                   1.0 2 3 0.5 10 20 30\n4 5 6 -0.5 40 50 60\n";
        let pc = read_ply(src.as_bytes()).unwrap();
        assert_eq!(pc.points()[1], Point::new(4, 5, 6, 40, 50, 60));
    }

    #[test]
    fn fractional_coordinate_rejected() {
        let src = ONE.replace("property int x", "property float x").replace("1 2 3 255", "1.5 2 3 255");
        assert!(matches!(read_ply(src.as_bytes()), Err(Error::Contract { .. })));
    }

    #[test]
    fn malformed_header_names_line() {
        let src = ONE.replace("element vertex 1", "element vertex one");
        match read_ply(src.as_bytes()) {
            Err(Error::Format { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        match read_ply(b"plx\n") {
            Err(Error::Format { line, .. }) => assert_eq!(line, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_color_is_unsupported() {
        let src = "ply\nformat ascii 1.0\nelement vertex 1\nproperty int x\nproperty int y\n\
                   property int z\nend_header\n1 2 3\n";
        assert!(matches!(read_ply(src.as_bytes()), Err(Error::Unsupported(_))));
    }

    #[test]
    fn swapped_color_order_rejected() {
        let src = ONE.replace("property uchar red\nproperty uchar green", "property uchar green\nproperty uchar red");
        assert!(matches!(read_ply(src.as_bytes()), Err(Error::Unsupported(_))));
    }
}
