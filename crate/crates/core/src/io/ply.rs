//! PLY point clouds: ASCII and binary little-endian, `x y z` with optional
//! `nx ny nz`. Other vertex properties and other elements are skipped.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyEncoding {
    Ascii,
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
    fn parse(name: &str) -> Option<Self> {
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
            Scalar::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

#[derive(Debug, Clone)]
enum Property {
    Scalar(String, Scalar),
    List(Scalar, Scalar),
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

struct Header {
    encoding: PlyEncoding,
    elements: Vec<Element>,
    /// Byte offset of the body.
    body: usize,
    /// Line number of the first body line (ASCII).
    body_line: usize,
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<Header> {
    let perr = |line: usize, msg: String| Error::Parse {
        path: path.into(),
        line,
        msg,
    };
    let mut pos = 0;
    let mut line_no = 0;
    let mut encoding = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| perr(line_no + 1, "header is not terminated by end_header".into()))?;
        let raw = std::str::from_utf8(&bytes[pos..pos + end]).map_err(|_| perr(line_no + 1, "header is not valid text".into()))?;
        pos += end + 1;
        line_no += 1;
        let tokens: Vec<&str> = raw.trim_end_matches('\r').split_whitespace().collect();
        if line_no == 1 {
            if tokens != ["ply"] {
                return Err(perr(1, "missing `ply` magic".into()));
            }
            continue;
        }
        match tokens.first().copied() {
            None | Some("comment") | Some("obj_info") => {}
            Some("format") => {
                encoding = Some(match tokens.get(1).copied() {
                    Some("ascii") => PlyEncoding::Ascii,
                    Some("binary_little_endian") => PlyEncoding::BinaryLittleEndian,
                    Some("binary_big_endian") => {
                        return Err(Error::Unsupported {
                            path: path.into(),
                            line: line_no,
                            msg: "big-endian PLY".into(),
                        })
                    }
                    other => return Err(perr(line_no, format!("unknown format {other:?}"))),
                });
            }
            Some("element") => {
                if tokens.len() != 3 {
                    return Err(perr(line_no, "element needs a name and a count".into()));
                }
                let count = tokens[2].parse().map_err(|_| perr(line_no, format!("invalid element count `{}`", tokens[2])))?;
                elements.push(Element {
                    name: tokens[1].to_string(),
                    count,
                    props: Vec::new(),
                });
            }
            Some("property") => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| perr(line_no, "property before any element".into()))?;
                let ty = |name: &str| Scalar::parse(name).ok_or_else(|| perr(line_no, format!("unknown property type `{name}`")));
                match tokens.as_slice() {
                    ["property", "list", count_ty, item_ty, _name] => el.props.push(Property::List(ty(count_ty)?, ty(item_ty)?)),
                    ["property", t, name] => el.props.push(Property::Scalar(name.to_string(), ty(t)?)),
                    _ => return Err(perr(line_no, "malformed property".into())),
                }
            }
            Some("end_header") => break,
            Some(other) => return Err(perr(line_no, format!("unexpected header keyword `{other}`"))),
        }
    }
    Ok(Header {
        encoding: encoding.ok_or_else(|| perr(line_no, "missing format line".into()))?,
        elements,
        body: pos,
        body_line: line_no + 1,
    })
}

/// Indices of x, y, z and optionally nx, ny, nz among the scalar properties.
fn vertex_layout(el: &Element, path: &Path) -> Result<([usize; 3], Option<[usize; 3]>)> {
    let find = |n: &str| {
        el.props
            .iter()
            .position(|p| matches!(p, Property::Scalar(name, _) if name == n))
    };
    let xyz = match (find("x"), find("y"), find("z")) {
        (Some(x), Some(y), Some(z)) => [x, y, z],
        _ => {
            return Err(Error::Parse {
                path: path.into(),
                line: 0,
                msg: "vertex element lacks x, y, z properties".into(),
            })
        }
    };
    let normals = match (find("nx"), find("ny"), find("nz")) {
        (Some(x), Some(y), Some(z)) => Some([x, y, z]),
        (None, None, None) => None,
        _ => {
            return Err(Error::Parse {
                path: path.into(),
                line: 0,
                msg: "vertex element has an incomplete normal".into(),
            })
        }
    };
    Ok((xyz, normals))
}

fn build_cloud(rows: Vec<Vec<f64>>, xyz: [usize; 3], nrm: Option<[usize; 3]>) -> Result<PointCloud> {
    let points = rows.iter().map(|r| Vec3::new(r[xyz[0]], r[xyz[1]], r[xyz[2]])).collect();
    let normals = match nrm {
        None => None,
        Some(ix) => Some(
            rows.iter()
                .enumerate()
                .map(|(i, r)| {
                    let n = Vec3::new(r[ix[0]], r[ix[1]], r[ix[2]]);
                    let len = n.norm();
                    if len == 0.0 || !len.is_finite() {
                        return Err(Error::ZeroNormal(i));
                    }
                    // float32 normals are only unit to single precision;
                    // already-unit values are kept bit for bit
                    Ok(if (len - 1.0).abs() <= 1e-12 { n } else { n / len })
                })
                .collect::<Result<Vec<_>>>()?,
        ),
    };
    PointCloud::new(points, normals)
}

fn read_ascii(text: &str, header: &Header, path: &Path) -> Result<PointCloud> {
    let mut lines = text.lines().enumerate().skip(header.body_line - 1).filter(|(_, l)| !l.trim().is_empty());
    let mut cloud = None;
    for el in &header.elements {
        let is_vertex = el.name == "vertex";
        let layout = if is_vertex { Some(vertex_layout(el, path)?) } else { None };
        let mut rows = Vec::with_capacity(if is_vertex { el.count } else { 0 });
        for _ in 0..el.count {
            let (k, line) = lines.next().ok_or_else(|| Error::Parse {
                path: path.into(),
                line: text.lines().count(),
                msg: format!("file ends inside element `{}`", el.name),
            })?;
            if !is_vertex {
                continue;
            }
            let perr = |msg: String| Error::Parse {
                path: path.into(),
                line: k + 1,
                msg,
            };
            let values: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|_| perr(format!("invalid number `{t}`"))))
                .collect::<Result<_>>()?;
            if el.props.iter().any(|p| matches!(p, Property::List(..))) {
                return Err(perr("list properties on vertices are not supported".into()));
            }
            if values.len() != el.props.len() {
                return Err(perr(format!("expected {} values, found {}", el.props.len(), values.len())));
            }
            rows.push(values);
        }
        if let Some((xyz, nrm)) = layout {
            cloud = Some(build_cloud(rows, xyz, nrm)?);
        }
    }
    cloud.ok_or_else(|| missing_vertex(path))
}

fn missing_vertex(path: &Path) -> Error {
    Error::Parse {
        path: path.into(),
        line: 0,
        msg: "no vertex element".into(),
    }
}

fn read_binary(body: &[u8], header: &Header, path: &Path) -> Result<PointCloud> {
    let truncated = || Error::Parse {
        path: path.into(),
        line: 0,
        msg: "binary body is truncated".into(),
    };
    let mut pos = 0;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = body.get(pos..pos + n).ok_or_else(truncated)?;
        pos += n;
        Ok(s)
    };
    let mut cloud = None;
    for el in &header.elements {
        let is_vertex = el.name == "vertex";
        let layout = if is_vertex { Some(vertex_layout(el, path)?) } else { None };
        let mut rows = Vec::with_capacity(if is_vertex { el.count } else { 0 });
        for _ in 0..el.count {
            let mut row = Vec::with_capacity(el.props.len());
            for p in &el.props {
                match p {
                    Property::Scalar(_, t) => row.push(t.read_le(take(t.size())?)),
                    Property::List(ct, it) => {
                        let n = ct.read_le(take(ct.size())?);
                        if is_vertex {
                            return Err(Error::Parse {
                                path: path.into(),
                                line: 0,
                                msg: "list properties on vertices are not supported".into(),
                            });
                        }
                        take(n as usize * it.size())?;
                    }
                }
            }
            if is_vertex {
                rows.push(row);
            }
        }
        if let Some((xyz, nrm)) = layout {
            cloud = Some(build_cloud(rows, xyz, nrm)?);
        }
    }
    cloud.ok_or_else(|| missing_vertex(path))
}

pub fn parse_ply(bytes: &[u8], path: &Path) -> Result<PointCloud> {
    let header = parse_header(bytes, path)?;
    match header.encoding {
        PlyEncoding::Ascii => {
            let text = std::str::from_utf8(bytes).map_err(|_| Error::Parse {
                path: path.into(),
                line: header.body_line,
                msg: "ASCII body is not valid text".into(),
            })?;
            read_ascii(text, &header, path)
        }
        PlyEncoding::BinaryLittleEndian => read_binary(&bytes[header.body..], &header, path),
    }
}

pub fn read_ply(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_ply(&bytes, path)
}

pub fn encode_ply(cloud: &PointCloud, encoding: PlyEncoding) -> Vec<u8> {
    let mut header = String::from("ply\n");
    header.push_str(match encoding {
        PlyEncoding::Ascii => "format ascii 1.0\n",
        PlyEncoding::BinaryLittleEndian => "format binary_little_endian 1.0\n",
    });
    let _ = writeln!(header, "element vertex {}", cloud.len());
    let mut names = vec!["x", "y", "z"];
    if cloud.normals().is_some() {
        names.extend(["nx", "ny", "nz"]);
    }
    for n in &names {
        let _ = writeln!(header, "property double {n}");
    }
    header.push_str("end_header\n");
    let mut out = header.into_bytes();
    for (i, p) in cloud.points().iter().enumerate() {
        let mut row = vec![p.x, p.y, p.z];
        if let Some(ns) = cloud.normals() {
            row.extend([ns[i].x, ns[i].y, ns[i].z]);
        }
        match encoding {
            PlyEncoding::Ascii => {
                // shortest representation that parses back to the same bits
                let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
                out.extend(line.join(" ").bytes());
                out.push(b'\n');
            }
            PlyEncoding::BinaryLittleEndian => row.iter().for_each(|v| out.extend(v.to_le_bytes())),
        }
    }
    out
}

pub fn write_ply(path: impl AsRef<Path>, cloud: &PointCloud, encoding: PlyEncoding) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_ply(cloud, encoding)).map_err(|e| Error::io(path, e))
}
