//! Raw-scan conditioning: landmark similarity alignment into the template
//! frame, unit-sphere normalization, cropping, resampling and augmentation.

use std::collections::HashSet;

use nalgebra::{Matrix3, SymmetricEigen, SVD};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geometry::{interpolating_subdivide, vertex_normals, PointCloud, TriMesh, Vec3};
use crate::spatial::KdIndex;

/// Standard deviation of the jitter added when sampling with replacement.
pub const RESAMPLE_JITTER: f64 = 1e-4;
/// Neighbourhood size for plane-fit normal estimation.
pub const NORMAL_NEIGHBOURS: usize = 16;

/// `x -> scale * R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl Default for Similarity {
    fn default() -> Self {
        Self::identity()
    }
}

impl Similarity {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p * self.scale + self.translation
    }

    /// Normals only rotate.
    pub fn apply_normal(&self, n: &Vec3) -> Vec3 {
        self.rotation * n
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            scale: 1.0 / self.scale,
            rotation: rt,
            translation: -(rt * self.translation) / self.scale,
        }
    }

    /// `self` after `first`.
    pub fn compose(&self, first: &Similarity) -> Self {
        Self {
            scale: self.scale * first.scale,
            rotation: self.rotation * first.rotation,
            translation: self.apply(&first.translation),
        }
    }

    pub fn apply_cloud(&self, cloud: &PointCloud) -> Result<PointCloud> {
        let points = cloud.points().iter().map(|p| self.apply(p)).collect();
        let normals = cloud
            .normals()
            .map(|ns| ns.iter().map(|n| self.apply_normal(n).normalize()).collect());
        PointCloud::new(points, normals)
    }
}

/// Named 3D landmarks.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet {
    entries: Vec<(String, Vec3)>,
}

impl LandmarkSet {
    pub fn new(entries: Vec<(String, Vec3)>) -> Result<Self> {
        let mut seen = HashSet::new();
        for (id, p) in &entries {
            if !seen.insert(id.as_str()) {
                return Err(Error::DuplicateLandmark(id.clone()));
            }
            if !p.iter().all(|c| c.is_finite()) {
                return Err(Error::NonFinite("landmark position"));
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[(String, Vec3)] {
        &self.entries
    }

    pub fn get(&self, id: &str) -> Option<Vec3> {
        self.entries.iter().find(|(l, _)| l == id).map(|(_, p)| *p)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Pairs of positions sharing an id, in `self` order.
    pub fn matched(&self, other: &LandmarkSet) -> (Vec<Vec3>, Vec<Vec3>) {
        self.entries
            .iter()
            .filter_map(|(id, p)| other.get(id).map(|q| (*p, q)))
            .unzip()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SimilarityFit {
    pub transform: Similarity,
    pub residual_rms: f64,
}

const DEGENERATE_RATIO: f64 = 1e-10;

/// Closed-form least-squares similarity taking `source` onto `target`
/// (cross-covariance SVD with a reflection guard).
pub fn fit_similarity(source: &LandmarkSet, target: &LandmarkSet) -> Result<SimilarityFit> {
    let (src, dst) = source.matched(target);
    let m = src.len();
    if m < 3 {
        return Err(Error::Degenerate(format!("{m} matched landmarks, need at least 3")));
    }
    let mf = m as f64;
    let mu_s = src.iter().sum::<Vec3>() / mf;
    let mu_d = dst.iter().sum::<Vec3>() / mf;

    let mut cov_s = Matrix3::zeros();
    let mut cross = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, d) in src.iter().zip(&dst) {
        let cs = s - mu_s;
        let cd = d - mu_d;
        cov_s += cs * cs.transpose();
        cross += cd * cs.transpose();
        var_s += cs.norm_squared();
    }
    cov_s /= mf;
    cross /= mf;
    var_s /= mf;

    let mut spread = SymmetricEigen::new(cov_s).eigenvalues.as_slice().to_vec();
    spread.sort_by(|a, b| b.total_cmp(a));
    if spread[0] <= 0.0 || spread[1] <= DEGENERATE_RATIO * spread[0] {
        return Err(Error::Degenerate("source landmarks are coincident or collinear".into()));
    }

    let svd = SVD::new(cross, true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut sv: Vec<f64> = svd.singular_values.as_slice().to_vec();
    sv.sort_by(|a, b| b.total_cmp(a));
    if sv[1] <= DEGENERATE_RATIO * sv[0].max(f64::MIN_POSITIVE) {
        return Err(Error::Degenerate("target landmarks are coincident or collinear".into()));
    }
    let mut sign = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        sign[(2, 2)] = -1.0;
    }
    // nalgebra does not sort singular values; the reflection must flip the
    // smallest one
    let smallest = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap();
    if sign[(2, 2)] < 0.0 && smallest != 2 {
        sign[(2, 2)] = 1.0;
        sign[(smallest, smallest)] = -1.0;
    }
    let rotation = u * sign * v_t;
    let d = Matrix3::from_diagonal(&svd.singular_values);
    let scale = (d * sign).trace() / var_s;
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::Degenerate(format!("non-positive scale {scale}")));
    }
    let translation = mu_d - rotation * mu_s * scale;
    let transform = Similarity {
        scale,
        rotation,
        translation,
    };
    let residual_rms = (src
        .iter()
        .zip(&dst)
        .map(|(s, d)| (transform.apply(s) - d).norm_squared())
        .sum::<f64>()
        / mf)
        .sqrt();
    Ok(SimilarityFit {
        transform,
        residual_rms,
    })
}

/// Centres on the point centroid and scales the farthest point to radius 1.
/// Returns the applied transform.
pub fn normalize_unit_sphere(cloud: &PointCloud) -> Result<(PointCloud, Similarity)> {
    if cloud.is_empty() {
        return Err(Error::Empty("cannot normalize an empty cloud"));
    }
    let centroid = cloud.points().iter().sum::<Vec3>() / cloud.len() as f64;
    let radius = cloud
        .points()
        .iter()
        .map(|p| (p - centroid).norm())
        .fold(0.0, f64::max);
    if radius == 0.0 {
        return Err(Error::Degenerate("all points coincide".into()));
    }
    let t = Similarity {
        scale: 1.0 / radius,
        rotation: Matrix3::identity(),
        translation: -centroid / radius,
    };
    Ok((t.apply_cloud(cloud)?, t))
}

/// Keeps the points with norm <= 1 (boundary inclusive).
pub fn crop_unit_sphere(cloud: &PointCloud) -> Result<PointCloud> {
    let keep: Vec<usize> = (0..cloud.len()).filter(|&i| cloud.points()[i].norm() <= 1.0).collect();
    if keep.is_empty() {
        return Err(Error::Empty("no points inside the unit sphere"));
    }
    Ok(cloud.select(&keep))
}

/// Drops vertices outside the unit sphere together with every face touching
/// them. Returns `None` when no face survives.
pub fn crop_mesh_unit_sphere(mesh: &TriMesh) -> Result<Option<TriMesh>> {
    let inside: Vec<bool> = mesh.vertices().iter().map(|p| p.norm() <= 1.0).collect();
    let faces: Vec<[usize; 3]> = mesh
        .faces()
        .iter()
        .filter(|f| f.iter().all(|&v| inside[v]))
        .copied()
        .collect();
    if faces.is_empty() {
        return Ok(None);
    }
    let mut remap = vec![usize::MAX; mesh.vertex_count()];
    let mut vertices = Vec::new();
    for f in &faces {
        for &v in f {
            if remap[v] == usize::MAX {
                remap[v] = vertices.len();
                vertices.push(mesh.vertices()[v]);
            }
        }
    }
    let faces = faces.iter().map(|f| [remap[f[0]], remap[f[1]], remap[f[2]]]).collect();
    TriMesh::new(vertices, faces).map(Some)
}

/// Draws exactly `n` points.
///
/// Without replacement when the source is large enough. A smaller source is
/// first densified by repeated interpolating subdivision of `mesh` (its
/// vertices then replace the cloud); without a mesh the draw falls back to
/// sampling with replacement plus Gaussian jitter.
pub fn resample(cloud: &PointCloud, n: usize, seed: u64, mesh: Option<&TriMesh>) -> Result<PointCloud> {
    if n == 0 {
        return Err(Error::InvalidArgument("cannot resample to zero points".into()));
    }
    if cloud.is_empty() {
        return Err(Error::Empty("cannot resample an empty cloud"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let densified;
    let source = match mesh {
        Some(mesh) if cloud.len() < n => {
            let mut m = mesh.clone();
            while m.vertex_count() < n {
                m = interpolating_subdivide(&m);
            }
            let normals = if cloud.normals().is_some() {
                Some(vertex_normals(&m)?)
            } else {
                None
            };
            densified = PointCloud::new(m.vertices().to_vec(), normals)?;
            &densified
        }
        _ => cloud,
    };

    if source.len() >= n {
        let mut idx: Vec<usize> = (0..source.len()).collect();
        let (chosen, _) = idx.partial_shuffle(&mut rng, n);
        return Ok(source.select(chosen));
    }

    let jitter = Normal::new(0.0, RESAMPLE_JITTER).expect("valid jitter sigma");
    let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..source.len())).collect();
    let base = source.select(&idx);
    let (points, normals) = base.into_parts();
    let points = points
        .into_iter()
        .map(|p| p + Vec3::new(jitter.sample(&mut rng), jitter.sample(&mut rng), jitter.sample(&mut rng)))
        .collect();
    PointCloud::new(points, normals)
}

/// `k` resamplings with seeds `seed, seed + 1, ..., seed + k - 1`.
pub fn augment(cloud: &PointCloud, n: usize, k: usize, seed: u64, mesh: Option<&TriMesh>) -> Result<Vec<PointCloud>> {
    if k == 0 {
        return Err(Error::InvalidArgument("augmentation needs at least one repetition".into()));
    }
    (0..k as u64)
        .map(|i| resample(cloud, n, seed.wrapping_add(i), mesh))
        .collect()
}

/// Plane-fit normals over the `NORMAL_NEIGHBOURS` nearest neighbours,
/// oriented to agree with the nearest vertex normal of `reference`.
pub fn estimate_normals(points: &[Vec3], reference: &TriMesh) -> Result<Vec<Vec3>> {
    if points.len() < 3 {
        return Err(Error::Degenerate("normal estimation needs at least 3 points".into()));
    }
    let kd = KdIndex::build(points)?;
    let ref_kd = KdIndex::build(reference.vertices())?;
    let ref_normals = vertex_normals(reference)?;
    points
        .iter()
        .map(|p| {
            let nbrs = kd.knn(p, NORMAL_NEIGHBOURS);
            let mean = nbrs.iter().map(|&(i, _)| points[i]).sum::<Vec3>() / nbrs.len() as f64;
            let cov = nbrs.iter().fold(Matrix3::zeros(), |acc, &(i, _)| {
                let d = points[i] - mean;
                acc + d * d.transpose()
            });
            let eig = SymmetricEigen::new(cov);
            let k = eig.eigenvalues.imin();
            let mut n: Vec3 = eig.eigenvectors.column(k).into_owned();
            let (ri, _) = ref_kd.nearest(p);
            if n.dot(&ref_normals[ri]) < 0.0 {
                n = -n;
            }
            Ok(n.normalize())
        })
        .collect()
}

/// A raw scan conditioned for the encoder.
#[derive(Debug, Clone)]
pub struct PreparedScan {
    /// `n` sampled points for the encoder.
    pub cloud: PointCloud,
    /// Every aligned point inside the unit sphere, with normals; the target
    /// of the unsupervised losses.
    pub raw: PointCloud,
    /// Scan frame to template frame.
    pub alignment: Similarity,
    pub landmark_rms: f64,
}

/// Inputs of the full align, normalize, crop, resample chain.
pub struct ScanInput<'a> {
    pub cloud: &'a PointCloud,
    pub mesh: Option<&'a TriMesh>,
    pub landmarks: &'a LandmarkSet,
}

/// Aligns a raw scan to the template and samples `n` points from it.
///
/// `template_landmarks` are positions on the unit-sphere-normalized template,
/// so the fitted similarity lands the scan directly in the normalized frame.
/// Scans without normals get plane-fit normals oriented by `template`.
pub fn prepare_scan(
    scan: &ScanInput<'_>,
    template: &TriMesh,
    template_landmarks: &LandmarkSet,
    n: usize,
    seed: u64,
) -> Result<PreparedScan> {
    let fit = fit_similarity(scan.landmarks, template_landmarks)?;
    let aligned = fit.transform.apply_cloud(scan.cloud)?;
    let aligned_mesh = match scan.mesh {
        Some(m) => {
            let v = m.vertices().iter().map(|p| fit.transform.apply(p)).collect();
            crop_mesh_unit_sphere(&m.with_vertices(v)?)?
        }
        None => None,
    };
    let cropped = crop_unit_sphere(&aligned)?;
    let cropped = match cropped.normals() {
        Some(_) => cropped,
        None => {
            let normals = estimate_normals(cropped.points(), template)?;
            let (points, _) = cropped.into_parts();
            PointCloud::new(points, Some(normals))?
        }
    };
    let cloud = match &aligned_mesh {
        Some(m) if cropped.len() < n => {
            let base = PointCloud::new(m.vertices().to_vec(), Some(vertex_normals(m)?))?;
            resample(&base, n, seed, Some(m))?
        }
        _ => resample(&cropped, n, seed, None)?,
    };
    Ok(PreparedScan {
        cloud,
        raw: cropped,
        alignment: fit.transform,
        landmark_rms: fit.residual_rms,
    })
}
