//! Wavefront OBJ subset: `v`, `vn` and triangular `f` records.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, TriMesh, Vec3};

use super::{fmt_sig, read_text, write_text};

/// Statements that carry nothing we use and are skipped.
const IGNORED: [&str; 7] = ["vt", "vp", "o", "g", "s", "usemtl", "mtllib"];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ObjData {
    pub vertices: Vec<Vec3>,
    pub normals: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
}

impl ObjData {
    pub fn into_mesh(self) -> Result<TriMesh> {
        TriMesh::new(self.vertices, self.faces)
    }

    /// Vertices as a cloud; `vn` records are used as per-point normals when
    /// there is exactly one per vertex.
    pub fn into_cloud(self) -> Result<PointCloud> {
        let normals = if !self.normals.is_empty() && self.normals.len() == self.vertices.len() {
            let mut out = Vec::with_capacity(self.normals.len());
            for (i, n) in self.normals.iter().enumerate() {
                let len = n.norm();
                if len == 0.0 {
                    return Err(Error::ZeroNormal(i));
                }
                out.push(n / len);
            }
            Some(out)
        } else {
            None
        };
        PointCloud::new(self.vertices, normals)
    }
}

fn parse_coords(path: &Path, line: usize, rest: &[&str]) -> Result<Vec3> {
    if rest.len() != 3 && rest.len() != 4 {
        return Err(Error::Parse {
            path: path.into(),
            line,
            msg: format!("expected 3 coordinates, found {}", rest.len()),
        });
    }
    let mut c = [0.0; 3];
    for (k, tok) in rest.iter().take(3).enumerate() {
        c[k] = tok.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::Parse {
            path: path.into(),
            line,
            msg: format!("invalid coordinate `{tok}`"),
        })?;
    }
    Ok(Vec3::new(c[0], c[1], c[2]))
}

fn parse_index(path: &Path, line: usize, tok: &str, count: usize) -> Result<usize> {
    let head = tok.split('/').next().unwrap_or("");
    let bad = |msg: String| Error::Parse {
        path: path.into(),
        line,
        msg,
    };
    let i: i64 = head.parse().map_err(|_| bad(format!("invalid face index `{tok}`")))?;
    if i < 1 {
        return Err(bad(format!("face index {i} is not a positive 1-based index")));
    }
    let i = i as usize;
    if i > count {
        return Err(bad(format!("face index {i} exceeds the {count} vertices defined so far")));
    }
    Ok(i - 1)
}

pub fn parse_obj(text: &str, path: &Path) -> Result<ObjData> {
    let mut data = ObjData::default();
    for (k, raw) in text.lines().enumerate() {
        let line = k + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let tokens: Vec<&str> = content.split_whitespace().collect();
        match tokens[0] {
            "v" => data.vertices.push(parse_coords(path, line, &tokens[1..])?),
            "vn" => data.normals.push(parse_coords(path, line, &tokens[1..])?),
            "f" => {
                let idx = &tokens[1..];
                if idx.len() > 3 {
                    return Err(Error::Unsupported {
                        path: path.into(),
                        line,
                        msg: format!("{}-sided face (only triangles are supported)", idx.len()),
                    });
                }
                if idx.len() < 3 {
                    return Err(Error::Parse {
                        path: path.into(),
                        line,
                        msg: format!("face with {} indices", idx.len()),
                    });
                }
                let mut f = [0; 3];
                for (slot, tok) in f.iter_mut().zip(idx) {
                    *slot = parse_index(path, line, tok, data.vertices.len())?;
                }
                data.faces.push(f);
            }
            kw if IGNORED.contains(&kw) => {}
            kw => {
                return Err(Error::Unsupported {
                    path: path.into(),
                    line,
                    msg: format!("statement `{kw}`"),
                })
            }
        }
    }
    Ok(data)
}

pub fn read_obj(path: impl AsRef<Path>) -> Result<ObjData> {
    let path = path.as_ref();
    parse_obj(&read_text(path)?, path)
}

fn push_vec(out: &mut String, tag: &str, v: &Vec3) {
    let _ = writeln!(out, "{tag} {} {} {}", fmt_sig(v.x), fmt_sig(v.y), fmt_sig(v.z));
}

pub fn format_obj(vertices: &[Vec3], normals: Option<&[Vec3]>, faces: &[[usize; 3]]) -> String {
    let mut out = String::new();
    for v in vertices {
        push_vec(&mut out, "v", v);
    }
    for n in normals.into_iter().flatten() {
        push_vec(&mut out, "vn", n);
    }
    for f in faces {
        let _ = writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    out
}

pub fn write_obj_mesh(path: impl AsRef<Path>, mesh: &TriMesh) -> Result<()> {
    write_text(path.as_ref(), &format_obj(mesh.vertices(), None, mesh.faces()))
}

pub fn write_obj_cloud(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    write_text(path.as_ref(), &format_obj(cloud.points(), cloud.normals(), &[]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<ObjData> {
        parse_obj(text, Path::new("t.obj"))
    }

    #[test]
    fn single_vertex_is_a_cloud() {
        let c = parse("v 0 0 0\n").unwrap().into_cloud().unwrap();
        assert_eq!(c.len(), 1);
        assert!(c.normals().is_none());
    }

    #[test]
    fn one_based_indices() {
        let ok = parse("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n").unwrap();
        assert_eq!(ok.faces, vec![[0, 1, 2]]);
        let err = parse("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 0 1 2\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 4, .. }), "{err}");
        assert!(parse("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 4\n").is_err());
    }

    #[test]
    fn slash_forms_and_comments() {
        let d = parse("# header\nv 0 0 0\nv 1 0 0 1.0\nv 0 1 0 # trailing\nvt 0 0\nvn 0 0 2\nf 1/1/1 2//1 3/1\n").unwrap();
        assert_eq!(d.vertices.len(), 3);
        assert_eq!(d.faces, vec![[0, 1, 2]]);
    }

    #[test]
    fn quads_are_unsupported_with_line() {
        let err = parse("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n").unwrap_err();
        assert!(matches!(err, Error::Unsupported { line: 5, .. }), "{err}");
    }

    #[test]
    fn malformed_lines_report_line_numbers() {
        assert!(matches!(parse("v 0 0 0\nv 1 x 0\n"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(parse("v 0 0\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse("v 0 0 0\nl 1 1\n"), Err(Error::Unsupported { line: 2, .. })));
        assert!(matches!(parse("v nan 0 0\n"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn round_trip_mesh_and_cloud() {
        let dir = tempfile::tempdir().unwrap();
        let mesh = crate::synthgen::icosphere(162).unwrap();
        let moved = mesh
            .with_vertices(mesh.vertices().iter().map(|p| p * 0.731 + Vec3::new(1e-5, -3.25, 0.1)).collect())
            .unwrap();
        let p = dir.path().join("m.obj");
        write_obj_mesh(&p, &moved).unwrap();
        let back = read_obj(&p).unwrap().into_mesh().unwrap();
        assert_eq!(back.faces(), moved.faces());
        for (a, b) in back.vertices().iter().zip(moved.vertices()) {
            assert!((a - b).amax() < 1e-7);
        }
        let normals = crate::geometry::vertex_normals(&moved).unwrap();
        let cloud = PointCloud::new(moved.vertices().to_vec(), Some(normals)).unwrap();
        let q = dir.path().join("c.obj");
        write_obj_cloud(&q, &cloud).unwrap();
        let back = read_obj(&q).unwrap().into_cloud().unwrap();
        assert_eq!(back.len(), cloud.len());
        for (a, b) in back.normals().unwrap().iter().zip(cloud.normals().unwrap()) {
            assert!((a - b).amax() < 1e-7);
        }
    }
}
