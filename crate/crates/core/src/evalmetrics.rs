//! Evaluation metrics over corresponded shapes, plus a PCA shape model used
//! as the linear baseline.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Template, Vec3};
use crate::preprocess::LandmarkSet;
use crate::spatial::KdIndex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    PerVertex,
    Fitting,
    /// Estimated-to-test direction of the fitting error; diagnostic only.
    FittingReverse,
    SemanticLandmark,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::PerVertex => "per_vertex",
            MetricKind::Fitting => "fitting",
            MetricKind::FittingReverse => "fitting_reverse",
            MetricKind::SemanticLandmark => "semantic_landmark",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Units {
    Model,
    Millimetres,
}

/// Mean and population standard deviation of per-item distances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub kind: MetricKind,
    pub mean: f64,
    pub std: f64,
    pub values: Vec<f64>,
    pub units: Units,
}

impl MetricReport {
    pub fn from_values(kind: MetricKind, values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("metric over zero items"));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        Ok(Self {
            kind,
            mean,
            std,
            values,
            units: Units::Model,
        })
    }

    /// Converts model units to millimetres with `mm_per_unit`.
    pub fn to_millimetres(&self, mm_per_unit: f64) -> Result<Self> {
        if self.units != Units::Model {
            return Err(Error::InvalidArgument("report is already in millimetres".into()));
        }
        if !(mm_per_unit > 0.0 && mm_per_unit.is_finite()) {
            return Err(Error::InvalidArgument(format!("invalid unit scale {mm_per_unit}")));
        }
        let mut out = Self::from_values(self.kind, self.values.iter().map(|v| v * mm_per_unit).collect())?;
        out.units = Units::Millimetres;
        Ok(out)
    }

    /// Report over the means of several reports of the same kind.
    pub fn over_items(reports: &[MetricReport]) -> Result<Self> {
        let first = reports.first().ok_or(Error::Empty("no reports to aggregate"))?;
        if reports.iter().any(|r| r.kind != first.kind || r.units != first.units) {
            return Err(Error::InvalidArgument("cannot aggregate reports of different kinds or units".into()));
        }
        let mut out = Self::from_values(first.kind, reports.iter().map(|r| r.mean).collect())?;
        out.units = first.units;
        Ok(out)
    }
}

fn check_finite(points: &[Vec3], what: &'static str) -> Result<()> {
    if points.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
        return Err(Error::NonFinite(what));
    }
    Ok(())
}

/// Mean of `|a_i - b_i|` over corresponding vertices.
pub fn per_vertex_error(a: &[Vec3], b: &[Vec3]) -> Result<MetricReport> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("{} vertices", a.len()), format!("{} vertices", b.len())));
    }
    check_finite(a, "per-vertex error input")?;
    check_finite(b, "per-vertex error input")?;
    MetricReport::from_values(MetricKind::PerVertex, a.iter().zip(b).map(|(p, q)| (p - q).norm()).collect())
}

/// Mean distance from every test vertex to its nearest estimated vertex.
pub fn fitting_error(test: &[Vec3], est: &[Vec3]) -> Result<MetricReport> {
    if test.is_empty() {
        return Err(Error::Empty("fitting error needs a nonempty test shape"));
    }
    check_finite(test, "fitting error input")?;
    let kd = KdIndex::build(est)?;
    MetricReport::from_values(MetricKind::Fitting, test.iter().map(|p| kd.nearest(p).1.sqrt()).collect())
}

/// Estimated-to-test direction of [`fitting_error`].
pub fn fitting_error_reverse(test: &[Vec3], est: &[Vec3]) -> Result<MetricReport> {
    let mut r = fitting_error(est, test)?;
    r.kind = MetricKind::FittingReverse;
    Ok(r)
}

/// Manually placed landmarks on a test shape.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedLandmarks(LandmarkSet);

impl AnnotatedLandmarks {
    pub fn new(entries: Vec<(String, Vec3)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Empty("annotations need at least one landmark"));
        }
        Ok(Self(LandmarkSet::new(entries)?))
    }

    pub fn entries(&self) -> &[(String, Vec3)] {
        self.0.entries()
    }
}

impl From<AnnotatedLandmarks> for LandmarkSet {
    fn from(a: AnnotatedLandmarks) -> Self {
        a.0
    }
}

/// Mean distance between annotations and the estimated vertices at the
/// template's landmark indices.
pub fn semantic_landmark_error(est: &[Vec3], template: &Template, annotations: &AnnotatedLandmarks) -> Result<MetricReport> {
    if est.len() != template.vertex_count() {
        return Err(Error::shape(template.vertex_count(), est.len()));
    }
    let values = annotations
        .entries()
        .iter()
        .map(|(id, l)| {
            let i = template.landmark_index(id).ok_or_else(|| Error::MissingLandmark(id.clone()))?;
            Ok((est[i] - l).norm())
        })
        .collect::<Result<Vec<f64>>>()?;
    MetricReport::from_values(MetricKind::SemanticLandmark, values)
}

/// PCA over flattened corresponded shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub mean: Vec<f64>,
    /// Orthonormal principal directions, strongest first.
    pub components: Vec<Vec<f64>>,
    /// Sample variance along each component.
    pub variances: Vec<f64>,
}

fn flatten(shape: &[Vec3]) -> Vec<f64> {
    shape.iter().flat_map(|p| [p.x, p.y, p.z]).collect()
}

impl LinearModel {
    /// Fits `k` components to `shapes` via the eigen-decomposition of the
    /// sample Gram matrix.
    pub fn fit(shapes: &[Vec<Vec3>], k: usize) -> Result<Self> {
        let m = shapes.len();
        if m < 2 {
            return Err(Error::InvalidArgument("PCA needs at least two shapes".into()));
        }
        let d = 3 * shapes[0].len();
        if let Some(bad) = shapes.iter().find(|s| 3 * s.len() != d) {
            return Err(Error::shape(d / 3, bad.len()));
        }
        if k == 0 || k > m - 1 {
            return Err(Error::InvalidArgument(format!("k must be in 1..={} for {m} shapes, got {k}", m - 1)));
        }
        let rows: Vec<Vec<f64>> = shapes.iter().map(|s| flatten(s)).collect();
        let mut mean = vec![0.0; d];
        for r in &rows {
            mean.iter_mut().zip(r).for_each(|(a, b)| *a += b);
        }
        mean.iter_mut().for_each(|a| *a /= m as f64);
        let x = DMatrix::from_fn(m, d, |i, j| rows[i][j] - mean[j]);
        let gram = &x * x.transpose();
        let eig = SymmetricEigen::new(gram);
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let mut components = Vec::with_capacity(k);
        let mut variances = Vec::with_capacity(k);
        for &j in order.iter().take(k) {
            let lambda = eig.eigenvalues[j];
            if lambda <= 1e-12 * eig.eigenvalues[order[0]].max(f64::MIN_POSITIVE) {
                return Err(Error::Degenerate(format!("only {} nonzero principal components", components.len())));
            }
            let u = eig.eigenvectors.column(j);
            let v = x.transpose() * u / lambda.sqrt();
            components.push(v.iter().copied().collect());
            variances.push(lambda / (m - 1) as f64);
        }
        Ok(Self {
            mean,
            components,
            variances,
        })
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn project(&self, shape: &[Vec3]) -> Result<Vec<f64>> {
        if 3 * shape.len() != self.mean.len() {
            return Err(Error::shape(self.mean.len() / 3, shape.len()));
        }
        let centred: Vec<f64> = flatten(shape).iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        Ok(self
            .components
            .iter()
            .map(|c| c.iter().zip(&centred).map(|(a, b)| a * b).sum())
            .collect())
    }

    pub fn synthesize(&self, coefficients: &[f64]) -> Result<Vec<Vec3>> {
        if coefficients.len() != self.dim() {
            return Err(Error::shape(self.dim(), coefficients.len()));
        }
        let mut flat = self.mean.clone();
        for (c, comp) in coefficients.iter().zip(&self.components) {
            flat.iter_mut().zip(comp).for_each(|(x, v)| *x += c * v);
        }
        Ok(flat.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect())
    }

    /// Least-squares reconstruction of a corresponded shape.
    pub fn reconstruct(&self, shape: &[Vec3]) -> Result<Vec<Vec3>> {
        self.synthesize(&self.project(shape)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Rotation3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(n: usize, seed: u64) -> Vec<Vec3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect()
    }

    #[test]
    fn per_vertex_basics() {
        let a = random_points(30, 1);
        assert_eq!(per_vertex_error(&a, &a).unwrap().mean, 0.0);
        let b: Vec<Vec3> = a.iter().map(|p| p + Vec3::new(1.0, 0.0, 0.0)).collect();
        let r = per_vertex_error(&a, &b).unwrap();
        assert!((r.mean - 1.0).abs() < 1e-12 && r.std < 1e-12);
        assert!(per_vertex_error(&a, &b[..29]).is_err());
    }

    #[test]
    fn per_vertex_matches_recompute() {
        let a = random_points(50, 2);
        let b = random_points(50, 3);
        let mut sum = 0.0;
        for i in 0..50 {
            let d = a[i] - b[i];
            sum += (d.x * d.x + d.y * d.y + d.z * d.z).sqrt();
        }
        assert!((per_vertex_error(&a, &b).unwrap().mean - sum / 50.0).abs() < 1e-12);
    }

    #[test]
    fn fitting_matches_brute_force() {
        let test = random_points(200, 4);
        let est = random_points(300, 5);
        let brute: f64 = test
            .iter()
            .map(|p| est.iter().map(|q| (p - q).norm()).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / 200.0;
        assert!((fitting_error(&test, &est).unwrap().mean - brute).abs() < 1e-12);
    }

    #[test]
    fn fitting_superset_is_zero_and_bounded_by_per_vertex() {
        let test = random_points(40, 6);
        let mut est = test.clone();
        est.extend(random_points(10, 7));
        assert_eq!(fitting_error(&test, &est).unwrap().mean, 0.0);
        for seed in 0..20 {
            let a = random_points(60, 100 + seed);
            let b: Vec<Vec3> = a.iter().zip(random_points(60, 200 + seed)).map(|(p, n)| p + n * 0.1).collect();
            assert!(fitting_error(&a, &b).unwrap().mean <= per_vertex_error(&a, &b).unwrap().mean);
        }
    }

    #[test]
    fn reverse_direction_differs() {
        let test = vec![Vec3::zeros()];
        let est = vec![Vec3::zeros(), Vec3::new(2.0, 0.0, 0.0)];
        assert_eq!(fitting_error(&test, &est).unwrap().mean, 0.0);
        assert_eq!(fitting_error_reverse(&test, &est).unwrap().mean, 1.0);
    }

    fn line_template() -> Template {
        let mesh = crate::geometry::TriMesh::new(
            vec![Vec3::zeros(), Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0)],
            vec![[0, 1, 2]],
        )
        .unwrap();
        Template::new(mesh, vec![("a".into(), 0), ("b".into(), 1)], vec![]).unwrap()
    }

    #[test]
    fn semantic_landmarks() {
        let t = line_template();
        let est = t.mesh().vertices().to_vec();
        let exact = AnnotatedLandmarks::new(vec![("a".into(), est[0]), ("b".into(), est[1])]).unwrap();
        assert_eq!(semantic_landmark_error(&est, &t, &exact).unwrap().mean, 0.0);
        let off = AnnotatedLandmarks::new(vec![
            ("a".into(), est[0] + Vec3::new(0.0, 0.0, 1.0)),
            ("b".into(), est[1] + Vec3::new(0.0, 3.0, 0.0)),
        ])
        .unwrap();
        assert_eq!(semantic_landmark_error(&est, &t, &off).unwrap().mean, 2.0);
        let missing = AnnotatedLandmarks::new(vec![("z".into(), Vec3::zeros())]).unwrap();
        assert!(matches!(semantic_landmark_error(&est, &t, &missing), Err(Error::MissingLandmark(_))));
        assert!(AnnotatedLandmarks::new(vec![]).is_err());
    }

    #[test]
    fn metrics_invariant_under_rigid_motion() {
        let a = random_points(80, 8);
        let b = random_points(80, 9);
        let r = Rotation3::from_euler_angles(0.3, -1.1, 2.0);
        let t = Vec3::new(0.4, -2.0, 7.0);
        let mv = |s: &[Vec3]| s.iter().map(|p| r * p + t).collect::<Vec<_>>();
        let (ma, mb) = (mv(&a), mv(&b));
        assert!((per_vertex_error(&a, &b).unwrap().mean - per_vertex_error(&ma, &mb).unwrap().mean).abs() < 1e-9);
        assert!((fitting_error(&a, &b).unwrap().mean - fitting_error(&ma, &mb).unwrap().mean).abs() < 1e-9);
        let tm = line_template();
        let est = tm.mesh().vertices().to_vec();
        let ann = AnnotatedLandmarks::new(vec![("a".into(), Vec3::new(0.2, 0.1, 0.0)), ("b".into(), Vec3::new(1.0, 1.0, 1.0))]).unwrap();
        let moved_t = Template::new(tm.mesh().with_vertices(mv(&est)).unwrap(), tm.landmarks().to_vec(), vec![]).unwrap();
        let moved_ann = AnnotatedLandmarks::new(ann.entries().iter().map(|(k, p)| (k.clone(), r * p + t)).collect()).unwrap();
        let e1 = semantic_landmark_error(&est, &tm, &ann).unwrap().mean;
        let e2 = semantic_landmark_error(moved_t.mesh().vertices(), &moved_t, &moved_ann).unwrap().mean;
        assert!((e1 - e2).abs() < 1e-9);
    }

    #[test]
    fn report_statistics_and_units() {
        let r = MetricReport::from_values(MetricKind::PerVertex, vec![1.0, 3.0]).unwrap();
        assert_eq!((r.mean, r.std), (2.0, 1.0));
        let mm = r.to_millimetres(10.0).unwrap();
        assert_eq!((mm.mean, mm.std, mm.units), (20.0, 10.0, Units::Millimetres));
        assert!(mm.to_millimetres(2.0).is_err());
        let agg = MetricReport::over_items(&[r.clone(), mm.clone()]);
        assert!(agg.is_err());
        assert!(MetricReport::from_values(MetricKind::Fitting, vec![]).is_err());
    }

    #[test]
    fn pca_recovers_a_linear_subspace() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let basis: Vec<Vec<Vec3>> = (0..3).map(|i| random_points(20, 50 + i)).collect();
        let mean = random_points(20, 60);
        let shapes: Vec<Vec<Vec3>> = (0..30)
            .map(|_| {
                let c: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
                (0..20).map(|v| mean[v] + (0..3).map(|k| basis[k][v] * c[k]).sum::<Vec3>()).collect()
            })
            .collect();
        let pca = LinearModel::fit(&shapes, 3).unwrap();
        for s in &shapes {
            assert!(per_vertex_error(s, &pca.reconstruct(s).unwrap()).unwrap().mean < 1e-9);
        }
        for (i, a) in pca.components.iter().enumerate() {
            for (j, b) in pca.components.iter().enumerate() {
                let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                assert!((d - if i == j { 1.0 } else { 0.0 }).abs() < 1e-9);
            }
        }
        assert!(pca.variances.windows(2).all(|w| w[0] >= w[1]));
        let fewer = LinearModel::fit(&shapes, 2).unwrap();
        let err = shapes.iter().map(|s| per_vertex_error(s, &fewer.reconstruct(s).unwrap()).unwrap().mean).sum::<f64>();
        assert!(err > 1e-3);
        assert!(matches!(LinearModel::fit(&shapes, 5), Err(Error::Degenerate(_))));
    }
}
