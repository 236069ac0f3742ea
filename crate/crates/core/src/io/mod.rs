//! File formats: OBJ and PLY geometry, landmark text files, TOML run
//! configs, binary checkpoints, JSON-lines metric reports and dataset
//! manifests.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod landmarks;
pub mod obj;
pub mod ply;
pub mod report;

use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::PointCloud;

pub(crate) fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `x` rounded to nine significant digits, printed without an exponent.
pub(crate) fn fmt_sig(x: f64) -> String {
    let rounded: f64 = format!("{x:.8e}").parse().unwrap_or(x);
    // avoid printing "-0"
    if rounded == 0.0 {
        "0".into()
    } else {
        format!("{rounded}")
    }
}

/// Reads a cloud from `.obj` or `.ply` by extension.
pub fn read_cloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    match extension(path).as_deref() {
        Some("obj") => obj::read_obj(path)?.into_cloud(),
        Some("ply") => ply::read_ply(path),
        _ => Err(Error::Unsupported {
            path: path.into(),
            line: 0,
            msg: "geometry files must end in .obj or .ply".into(),
        }),
    }
}

/// Writes a cloud as `.obj` or binary `.ply` by extension.
pub fn write_cloud(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    let path = path.as_ref();
    match extension(path).as_deref() {
        Some("obj") => obj::write_obj_cloud(path, cloud),
        Some("ply") => ply::write_ply(path, cloud, ply::PlyEncoding::BinaryLittleEndian),
        _ => Err(Error::Unsupported {
            path: path.into(),
            line: 0,
            msg: "geometry files must end in .obj or .ply".into(),
        }),
    }
}

fn extension(path: &Path) -> Option<String> {
    path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase)
}
