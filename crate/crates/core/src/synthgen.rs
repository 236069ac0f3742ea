//! Procedural toy morphable model standing in for licensed face models: an
//! icosphere-derived head template, orthonormal identity and expression
//! displacement bases, and an optional quadratic identity warp.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::geometry::{interpolating_subdivide, vertex_normals_from, PointCloud, Template, TriMesh, Vec3};
use crate::preprocess::{crop_unit_sphere, normalize_unit_sphere, LandmarkSet, Similarity};

pub const SIGMA_ID: f64 = 1.0;
pub const SIGMA_EXP: f64 = 0.5;

/// Vertex counts reachable by icosphere subdivision that the toy model accepts.
pub const ICOSPHERE_LADDER: [usize; 3] = [162, 642, 2562];

/// Semantic landmarks of the toy template and the sphere direction each one
/// is snapped to. The first five are the alignment landmarks.
pub const TOY_LANDMARKS: [(&str, [f64; 3]); 8] = [
    ("eye_outer_left", [-0.42, 0.30, 0.86]),
    ("eye_outer_right", [0.42, 0.30, 0.86]),
    ("nose_tip", [0.0, 0.0, 1.0]),
    ("mouth_left", [-0.26, -0.40, 0.88]),
    ("mouth_right", [0.26, -0.40, 0.88]),
    ("brow_centre", [0.0, 0.45, 0.89]),
    ("chin", [0.0, -0.75, 0.66]),
    ("cheek_left", [-0.70, -0.10, 0.70]),
];

pub const ALIGNMENT_LANDMARKS: [&str; 5] = ["eye_outer_left", "eye_outer_right", "nose_tip", "mouth_left", "mouth_right"];

const MOUTH_CENTRE: [f64; 3] = [0.0, -0.40, 0.92];
const BROW_CENTRE: [f64; 3] = [0.0, 0.45, 0.89];
const MOUTH_RADIUS: f64 = 0.38;

fn unit(a: [f64; 3]) -> Vec3 {
    Vec3::new(a[0], a[1], a[2]).normalize()
}

fn icosahedron() -> (Vec<Vec3>, Vec<[usize; 3]>) {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let v = [
        [-1.0, t, 0.0],
        [1.0, t, 0.0],
        [-1.0, -t, 0.0],
        [1.0, -t, 0.0],
        [0.0, -1.0, t],
        [0.0, 1.0, t],
        [0.0, -1.0, -t],
        [0.0, 1.0, -t],
        [t, 0.0, -1.0],
        [t, 0.0, 1.0],
        [-t, 0.0, -1.0],
        [-t, 0.0, 1.0],
    ];
    let f = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    (v.iter().map(|p| unit(*p)).collect(), f)
}

/// Unit icosphere with exactly `n` vertices (12, 42, 162, 642, 2562, ...).
pub fn icosphere(n: usize) -> Result<TriMesh> {
    let (v, f) = icosahedron();
    let mut mesh = TriMesh::new(v, f)?;
    while mesh.vertex_count() < n {
        let sub = interpolating_subdivide(&mesh);
        let projected = sub.vertices().iter().map(|p| p.normalize()).collect();
        mesh = sub.with_vertices(projected)?;
    }
    if mesh.vertex_count() != n {
        return Err(Error::InvalidArgument(format!(
            "{n} is not an icosphere vertex count"
        )));
    }
    Ok(mesh)
}

/// Head-like deformation of the unit sphere: flattened sides, a nose bump and
/// a brow ridge.
fn head_shape(d: &Vec3) -> Vec3 {
    let bump = |c: [f64; 3], w: f64| (-(d - unit(c)).norm_squared() / (2.0 * w * w)).exp();
    let nose = 0.22 * bump([0.0, 0.02, 1.0], 0.16);
    let brow = 0.06 * bump(BROW_CENTRE, 0.22);
    let chin = 0.05 * bump([0.0, -0.8, 0.6], 0.25);
    let r = 1.0 + nose + brow + chin;
    Vec3::new(0.82 * d.x, 1.0 * d.y, 0.78 * d.z) * r
}

/// The toy face template: a deformed icosphere normalized to the unit sphere,
/// with [`TOY_LANDMARKS`] and a mouth disc.
pub fn toy_template(n: usize) -> Result<Template> {
    if !ICOSPHERE_LADDER.contains(&n) {
        return Err(Error::InvalidArgument(format!(
            "template size {n} is not one of {ICOSPHERE_LADDER:?}"
        )));
    }
    let sphere = icosphere(n)?;
    let dirs = sphere.vertices().to_vec();
    let shaped = sphere.with_vertices(dirs.iter().map(head_shape).collect())?;
    let cloud = PointCloud::from_points(shaped.vertices().to_vec())?;
    let (normalized, _) = normalize_unit_sphere(&cloud)?;
    let mesh = shaped.with_vertices(normalized.into_parts().0)?;

    let nearest_dir = |target: Vec3| {
        dirs.iter()
            .enumerate()
            .max_by(|a, b| a.1.dot(&target).total_cmp(&b.1.dot(&target)).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .unwrap()
    };
    let landmarks: Vec<(String, usize)> = TOY_LANDMARKS
        .iter()
        .map(|(id, d)| (id.to_string(), nearest_dir(unit(*d))))
        .collect();
    let mc = unit(MOUTH_CENTRE);
    let mouth: Vec<usize> = (0..n).filter(|&i| dirs[i].dot(&mc) >= MOUTH_RADIUS.cos()).collect();
    Template::new(mesh, landmarks, mouth)
}

/// Landmark positions of `shape` at the template's landmark vertices.
pub fn landmarks_of(template: &Template, shape: &[Vec3]) -> Result<LandmarkSet> {
    LandmarkSet::new(
        template
            .landmarks()
            .iter()
            .map(|(id, i)| (id.clone(), shape[*i]))
            .collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyConfig {
    pub seed: u64,
    pub n: usize,
    pub k_id: usize,
    pub k_exp: usize,
    pub gamma: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n: 642,
            k_id: 6,
            k_exp: 4,
            gamma: 0.3,
        }
    }
}

/// Flattened per-vertex displacement field, `3n` entries.
pub type Field = Vec<f64>;

#[derive(Debug, Clone)]
pub struct ToyMorphable {
    pub template: Template,
    pub identity_basis: Vec<Field>,
    pub expression_basis: Vec<Field>,
    /// One warp field per identity component, driven by its squared coefficient.
    pub warp_fields: Vec<Field>,
    pub gamma: f64,
    pub sigma_id: f64,
    pub sigma_exp: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Modified Gram-Schmidt with one re-orthogonalization pass.
fn orthonormalize(fields: &mut [Field]) -> Result<()> {
    for i in 0..fields.len() {
        for _ in 0..2 {
            for j in 0..i {
                let (done, rest) = fields.split_at_mut(i);
                let proj = dot(&rest[0], &done[j]);
                for (x, y) in rest[0].iter_mut().zip(&done[j]) {
                    *x -= proj * y;
                }
            }
        }
        let norm = dot(&fields[i], &fields[i]).sqrt();
        if norm < 1e-8 {
            return Err(Error::Degenerate(format!("basis field {i} is linearly dependent")));
        }
        fields[i].iter_mut().for_each(|x| *x /= norm);
    }
    Ok(())
}

/// Sum of Gaussian bumps on the sphere, each pushing along a blend of the
/// outward direction and a random vector.
fn bump_field(rng: &mut ChaCha8Rng, dirs: &[Vec3], centres: &[Vec3], width: f64) -> Field {
    let mut field = vec![0.0; dirs.len() * 3];
    for c in centres {
        let radial: f64 = StandardNormal.sample(rng);
        let lateral = Vec3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ) * 0.4;
        for (i, d) in dirs.iter().enumerate() {
            let w = (-(d - c).norm_squared() / (2.0 * width * width)).exp();
            let v = (d * radial + lateral) * w;
            field[3 * i] += v.x;
            field[3 * i + 1] += v.y;
            field[3 * i + 2] += v.z;
        }
    }
    field
}

fn random_dir(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(StandardNormal.sample(rng), StandardNormal.sample(rng), StandardNormal.sample(rng));
        if v.norm() > 1e-6 {
            return v.normalize();
        }
    }
}

/// Random direction within `spread` radians of `around`.
fn jittered_dir(rng: &mut ChaCha8Rng, around: Vec3, spread: f64) -> Vec3 {
    (around + random_dir(rng) * rng.random_range(0.0..spread)).normalize()
}

pub fn build_toy_model(cfg: &ToyConfig) -> Result<ToyMorphable> {
    if cfg.k_id == 0 || cfg.k_exp == 0 {
        return Err(Error::InvalidArgument("k_id and k_exp must be at least 1".into()));
    }
    if cfg.k_id + cfg.k_exp > 3 * cfg.n {
        return Err(Error::InvalidArgument(format!(
            "k_id + k_exp = {} exceeds 3n = {}",
            cfg.k_id + cfg.k_exp,
            3 * cfg.n
        )));
    }
    if 2 * cfg.k_id + cfg.k_exp > 3 * cfg.n {
        return Err(Error::InvalidArgument("not enough degrees of freedom for the warp fields".into()));
    }
    if !(cfg.gamma >= 0.0 && cfg.gamma.is_finite()) {
        return Err(Error::InvalidArgument(format!("gamma must be >= 0, got {}", cfg.gamma)));
    }
    let template = toy_template(cfg.n)?;
    let dirs: Vec<Vec3> = icosphere(cfg.n)?.vertices().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mouth = unit(MOUTH_CENTRE);
    let brow = unit(BROW_CENTRE);
    let mut fields: Vec<Field> = Vec::with_capacity(2 * cfg.k_id + cfg.k_exp);
    for j in 0..cfg.k_exp {
        let anchor = if j % 2 == 0 { mouth } else { brow };
        let centres: Vec<Vec3> = (0..2).map(|_| jittered_dir(&mut rng, anchor, 0.15)).collect();
        fields.push(bump_field(&mut rng, &dirs, &centres, 0.18));
    }
    for _ in 0..2 * cfg.k_id {
        let centres: Vec<Vec3> = (0..3)
            .map(|_| {
                let d = random_dir(&mut rng);
                // favour the face side
                if d.z < -0.3 { Vec3::new(d.x, d.y, -d.z) } else { d }
            })
            .collect();
        let width = rng.random_range(0.45..0.8);
        fields.push(bump_field(&mut rng, &dirs, &centres, width));
    }
    orthonormalize(&mut fields)?;
    let warp_fields = fields.split_off(cfg.k_exp + cfg.k_id);
    let identity_basis = fields.split_off(cfg.k_exp);
    let expression_basis = fields;

    Ok(ToyMorphable {
        template,
        identity_basis,
        expression_basis,
        warp_fields,
        gamma: cfg.gamma,
        sigma_id: SIGMA_ID,
        sigma_exp: SIGMA_EXP,
    })
}

impl ToyMorphable {
    pub fn vertex_count(&self) -> usize {
        self.template.vertex_count()
    }

    pub fn k_id(&self) -> usize {
        self.identity_basis.len()
    }

    pub fn k_exp(&self) -> usize {
        self.expression_basis.len()
    }

    /// All linear basis fields, expression first then identity.
    pub fn linear_basis(&self) -> impl Iterator<Item = &Field> {
        self.expression_basis.iter().chain(&self.identity_basis)
    }

    /// Identity shape with the quadratic warp applied.
    pub fn identity_shape(&self, id: &[f64]) -> Result<Vec<Vec3>> {
        self.shape(id, &vec![0.0; self.k_exp()])
    }

    /// `template + sum c_k B_k + gamma sum c_k^2 W_k + sum e_j E_j`.
    pub fn shape(&self, id: &[f64], exp: &[f64]) -> Result<Vec<Vec3>> {
        if id.len() != self.k_id() {
            return Err(Error::shape(format!("{} identity coefficients", self.k_id()), id.len()));
        }
        if exp.len() != self.k_exp() {
            return Err(Error::shape(format!("{} expression coefficients", self.k_exp()), exp.len()));
        }
        let mut flat: Vec<f64> = self.template.mesh().vertices().iter().flat_map(|p| [p.x, p.y, p.z]).collect();
        let mut add = |field: &Field, c: f64| {
            if c != 0.0 {
                flat.iter_mut().zip(field).for_each(|(x, f)| *x += c * f);
            }
        };
        for (b, &c) in self.identity_basis.iter().zip(id) {
            add(b, c);
        }
        if self.gamma != 0.0 {
            for (w, &c) in self.warp_fields.iter().zip(id) {
                add(w, self.gamma * c * c);
            }
        }
        for (e, &c) in self.expression_basis.iter().zip(exp) {
            add(e, c);
        }
        Ok(flat.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect())
    }
}

/// One generated scan with known correspondence.
#[derive(Debug, Clone)]
pub struct SynthSample {
    pub subject: usize,
    pub neutral: bool,
    pub identity: Vec<f64>,
    pub expression: Vec<f64>,
    /// Unit-sphere normalized shape in template vertex order.
    pub ground_truth: Vec<Vec3>,
    /// Generator frame to normalized frame.
    pub normalization: Similarity,
    /// Shuffled input: `input.points()[j] == ground_truth[permutation[j]]`.
    pub input: PointCloud,
    pub permutation: Vec<usize>,
}

impl SynthSample {
    /// Puts the input points back into template order.
    pub fn restore_order(&self) -> Vec<Vec3> {
        let mut out = vec![Vec3::zeros(); self.permutation.len()];
        for (j, &i) in self.permutation.iter().enumerate() {
            out[i] = self.input.points()[j];
        }
        out
    }
}

/// Generates `subjects` neutral samples each followed by
/// `expressions_per_subject` expressive ones.
pub fn sample_dataset(
    model: &ToyMorphable,
    subjects: usize,
    expressions_per_subject: usize,
    seed: u64,
) -> Result<Vec<SynthSample>> {
    sample_subjects(model, 0..subjects, expressions_per_subject, seed)
}

/// As [`sample_dataset`] for an explicit subject range; subject `s` always
/// draws the same coefficients for a given seed, so disjoint ranges give
/// disjoint, reproducible subject sets.
pub fn sample_subjects(
    model: &ToyMorphable,
    subjects: std::ops::Range<usize>,
    expressions_per_subject: usize,
    seed: u64,
) -> Result<Vec<SynthSample>> {
    if subjects.is_empty() {
        return Err(Error::InvalidArgument("need at least one subject".into()));
    }
    let id_dist = Normal::new(0.0, model.sigma_id).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let exp_dist = Normal::new(0.0, model.sigma_exp).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let faces = model.template.mesh().faces();
    let mut out = Vec::with_capacity(subjects.len() * (1 + expressions_per_subject));
    for subject in subjects {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (subject as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let identity: Vec<f64> = (0..model.k_id()).map(|_| id_dist.sample(&mut rng)).collect();
        for e in 0..=expressions_per_subject {
            let neutral = e == 0;
            let expression: Vec<f64> = if neutral {
                vec![0.0; model.k_exp()]
            } else {
                (0..model.k_exp()).map(|_| exp_dist.sample(&mut rng)).collect()
            };
            let raw = model.shape(&identity, &expression)?;
            let (normalized, normalization) = normalize_unit_sphere(&PointCloud::from_points(raw)?)?;
            let ground_truth = normalized.into_parts().0;
            let normals = vertex_normals_from(&ground_truth, faces)?;
            let mut permutation: Vec<usize> = (0..ground_truth.len()).collect();
            permutation.shuffle(&mut rng);
            let input = PointCloud::new(
                permutation.iter().map(|&i| ground_truth[i]).collect(),
                Some(permutation.iter().map(|&i| normals[i]).collect()),
            )?;
            out.push(SynthSample {
                subject,
                neutral,
                identity: identity.clone(),
                expression,
                ground_truth,
                normalization,
                input,
                permutation,
            });
        }
    }
    Ok(out)
}

/// Scanner-like raw cloud for a sample: the ground-truth surface densified
/// by one interpolating subdivision, with optional isotropic noise, cropped
/// to the unit sphere. Normals come from the noiseless surface.
pub fn scan_cloud(sample: &SynthSample, faces: &[[usize; 3]], noise: f64, seed: u64) -> Result<PointCloud> {
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise must be >= 0, got {noise}")));
    }
    let dense = interpolating_subdivide(&TriMesh::new(sample.ground_truth.clone(), faces.to_vec())?);
    let normals = vertex_normals_from(dense.vertices(), dense.faces())?;
    let mut points = dense.vertices().to_vec();
    if noise > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, noise).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        for p in &mut points {
            *p += Vec3::new(dist.sample(&mut rng), dist.sample(&mut rng), dist.sample(&mut rng));
        }
    }
    crop_unit_sphere(&PointCloud::new(points, Some(normals))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn small() -> ToyConfig {
        ToyConfig {
            seed: 11,
            n: 162,
            k_id: 5,
            k_exp: 3,
            gamma: 0.0,
        }
    }

    #[test]
    fn scan_cloud_is_dense_and_inside() {
        let model = build_toy_model(&small()).unwrap();
        let s = &sample_dataset(&model, 1, 0, 3).unwrap()[0];
        let faces = model.template.mesh().faces();
        let clean = scan_cloud(s, faces, 0.0, 1).unwrap();
        assert_eq!(clean.len(), 642);
        assert!(clean.points()[..162].iter().zip(&s.ground_truth).all(|(a, b)| a == b));
        let noisy = scan_cloud(s, faces, 0.01, 1).unwrap();
        assert!(noisy.len() <= 642 && noisy.points().iter().all(|p| p.norm() <= 1.0));
        assert_eq!(noisy, scan_cloud(s, faces, 0.01, 1).unwrap());
    }

    #[test]
    fn icosphere_ladder_counts() {
        for (n, f) in [(162, 320), (642, 1280), (2562, 5120)] {
            let m = icosphere(n).unwrap();
            assert_eq!(m.faces().len(), f);
            assert_eq!(m.euler_characteristic(), 2);
        }
        assert!(icosphere(100).is_err());
    }

    #[test]
    fn template_is_unit_normalized_and_labelled() {
        let t = toy_template(642).unwrap();
        let max_r = t.mesh().vertices().iter().map(|p| p.norm()).fold(0.0, f64::max);
        assert!(max_r <= 1.0 + 1e-12);
        let idx: std::collections::HashSet<usize> = t.landmarks().iter().map(|l| l.1).collect();
        assert_eq!(idx.len(), TOY_LANDMARKS.len());
        assert!(!t.mouth().is_empty());
        assert!(toy_template(600).is_err());
    }

    #[test]
    fn zero_coefficients_give_template() {
        let m = build_toy_model(&ToyConfig { gamma: 0.3, ..small() }).unwrap();
        let s = m.shape(&[0.0; 5], &[0.0; 3]).unwrap();
        assert_eq!(s, m.template.mesh().vertices());
    }

    #[test]
    fn deterministic_and_orthonormal() {
        let a = build_toy_model(&small()).unwrap();
        let b = build_toy_model(&small()).unwrap();
        assert_eq!(a.identity_basis, b.identity_basis);
        assert_eq!(a.warp_fields, b.warp_fields);
        let all: Vec<&Field> = a.linear_basis().chain(&a.warp_fields).collect();
        for (i, x) in all.iter().enumerate() {
            for (j, y) in all.iter().enumerate() {
                let g = dot(x, y);
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((g - want).abs() < 1e-6, "gram[{i}][{j}] = {g}");
            }
        }
    }

    #[test]
    fn too_many_components_rejected() {
        let cfg = ToyConfig { k_id: 400, k_exp: 100, ..small() };
        assert!(build_toy_model(&cfg).is_err());
    }

    #[test]
    fn linear_model_rank_is_bounded() {
        let m = build_toy_model(&small()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let base: Vec<f64> = m.template.mesh().vertices().iter().flat_map(|p| [p.x, p.y, p.z]).collect();
        let rows = 1000;
        let mut data = DMatrix::zeros(rows, base.len());
        for r in 0..rows {
            let id: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
            let ex: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let s = m.shape(&id, &ex).unwrap();
            for (c, v) in s.iter().flat_map(|p| [p.x, p.y, p.z]).enumerate() {
                data[(r, c)] = v - base[c];
            }
        }
        let sv = data.singular_values();
        let tol = sv[0] * 1e-9;
        assert!(sv.iter().filter(|&&s| s > tol).count() <= 8);
    }

    #[test]
    fn counts_and_neutral_samples() {
        let m = build_toy_model(&small()).unwrap();
        let ds = sample_dataset(&m, 50, 4, 3).unwrap();
        assert_eq!(ds.len(), 250);
        assert_eq!(ds.iter().filter(|s| s.neutral).count(), 50);
        let first = &ds[0];
        assert!(first.neutral && first.expression.iter().all(|&e| e == 0.0));
        let (expected, _) =
            normalize_unit_sphere(&PointCloud::from_points(m.identity_shape(&first.identity).unwrap()).unwrap()).unwrap();
        assert_eq!(first.ground_truth, expected.points());
    }

    #[test]
    fn permutation_restores_ground_truth() {
        let m = build_toy_model(&small()).unwrap();
        for s in sample_dataset(&m, 3, 2, 9).unwrap() {
            assert_eq!(s.restore_order(), s.ground_truth);
        }
    }

    #[test]
    fn subject_ranges_are_consistent() {
        let m = build_toy_model(&small()).unwrap();
        let all = sample_dataset(&m, 4, 1, 5).unwrap();
        let tail = sample_subjects(&m, 2..4, 1, 5).unwrap();
        assert_eq!(all[4].identity, tail[0].identity);
        assert_eq!(all[7].ground_truth, tail[3].ground_truth);
    }
}
