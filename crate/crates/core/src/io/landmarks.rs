//! Landmark text files: one record per line, `id x y z` for positions on a
//! scan or `id index` for template vertex indices. `#` starts a comment.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::preprocess::LandmarkSet;

use super::{fmt_sig, read_text, write_text};

#[derive(Debug, Clone, PartialEq)]
pub enum LandmarkFile {
    Positions(LandmarkSet),
    Indices(Vec<(String, usize)>),
}

pub fn parse_landmarks(text: &str, path: &Path) -> Result<LandmarkFile> {
    let mut positions = Vec::new();
    let mut indices = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (k, raw) in text.lines().enumerate() {
        let line = k + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let perr = |msg: String| Error::Parse {
            path: path.into(),
            line,
            msg,
        };
        let tokens: Vec<&str> = content.split_whitespace().collect();
        let id = tokens[0].to_string();
        if !seen.insert(id.clone()) {
            return Err(Error::DuplicateLandmark(id));
        }
        match tokens.len() {
            2 => {
                let i = tokens[1].parse().map_err(|_| perr(format!("invalid vertex index `{}`", tokens[1])))?;
                indices.push((id, i));
            }
            4 => {
                let mut c = [0.0; 3];
                for (slot, t) in c.iter_mut().zip(&tokens[1..]) {
                    *slot = t.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| perr(format!("invalid coordinate `{t}`")))?;
                }
                positions.push((id, Vec3::new(c[0], c[1], c[2])));
            }
            n => return Err(perr(format!("expected `id index` or `id x y z`, found {n} fields"))),
        }
        if !positions.is_empty() && !indices.is_empty() {
            return Err(perr("file mixes position and index records".into()));
        }
    }
    if !indices.is_empty() {
        Ok(LandmarkFile::Indices(indices))
    } else if !positions.is_empty() {
        Ok(LandmarkFile::Positions(LandmarkSet::new(positions)?))
    } else {
        Err(Error::Parse {
            path: path.into(),
            line: 0,
            msg: "no landmark records".into(),
        })
    }
}

pub fn read_landmarks(path: impl AsRef<Path>) -> Result<LandmarkFile> {
    let path = path.as_ref();
    parse_landmarks(&read_text(path)?, path)
}

/// Reads a file that must hold positions.
pub fn read_landmark_positions(path: impl AsRef<Path>) -> Result<LandmarkSet> {
    let path = path.as_ref();
    match read_landmarks(path)? {
        LandmarkFile::Positions(set) => Ok(set),
        LandmarkFile::Indices(_) => Err(Error::Parse {
            path: path.into(),
            line: 0,
            msg: "expected `id x y z` position records".into(),
        }),
    }
}

/// Reads a file that must hold vertex indices.
pub fn read_landmark_indices(path: impl AsRef<Path>) -> Result<Vec<(String, usize)>> {
    let path = path.as_ref();
    match read_landmarks(path)? {
        LandmarkFile::Indices(v) => Ok(v),
        LandmarkFile::Positions(_) => Err(Error::Parse {
            path: path.into(),
            line: 0,
            msg: "expected `id index` records".into(),
        }),
    }
}

pub fn format_positions(set: &LandmarkSet) -> String {
    let mut out = String::new();
    for (id, p) in set.entries() {
        let _ = writeln!(out, "{id} {} {} {}", fmt_sig(p.x), fmt_sig(p.y), fmt_sig(p.z));
    }
    out
}

pub fn format_indices(entries: &[(String, usize)]) -> String {
    entries.iter().map(|(id, i)| format!("{id} {i}\n")).collect()
}

pub fn write_landmark_positions(path: impl AsRef<Path>, set: &LandmarkSet) -> Result<()> {
    write_text(path.as_ref(), &format_positions(set))
}

pub fn write_landmark_indices(path: impl AsRef<Path>, entries: &[(String, usize)]) -> Result<()> {
    write_text(path.as_ref(), &format_indices(entries))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(t: &str) -> Result<LandmarkFile> {
        parse_landmarks(t, Path::new("l.txt"))
    }

    #[test]
    fn both_forms() {
        match parse("# template\nnose_tip 12\nchin 40 # comment\n").unwrap() {
            LandmarkFile::Indices(v) => assert_eq!(v, vec![("nose_tip".into(), 12), ("chin".into(), 40)]),
            other => panic!("{other:?}"),
        }
        match parse("nose_tip 0.1 -0.2 0.9\n").unwrap() {
            LandmarkFile::Positions(s) => assert_eq!(s.get("nose_tip"), Some(Vec3::new(0.1, -0.2, 0.9))),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn errors() {
        assert!(matches!(parse("a 1\nb 0 0 0\n"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(parse("a 1\na 2\n"), Err(Error::DuplicateLandmark(_))));
        assert!(matches!(parse("a 1 2\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse("a -1\n"), Err(Error::Parse { line: 1, .. })));
        assert!(parse("# nothing\n").is_err());
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let set = LandmarkSet::new(vec![("a".into(), Vec3::new(0.123456789, 2.0, -3.5)), ("b".into(), Vec3::zeros())]).unwrap();
        let p = dir.path().join("p.lmk");
        write_landmark_positions(&p, &set).unwrap();
        assert_eq!(read_landmark_positions(&p).unwrap(), set);
        assert!(read_landmark_indices(&p).is_err());
        let idx = vec![("x".to_string(), 3usize), ("y".to_string(), 0)];
        let q = dir.path().join("i.lmk");
        write_landmark_indices(&q, &idx).unwrap();
        assert_eq!(read_landmark_indices(&q).unwrap(), idx);
    }
}
