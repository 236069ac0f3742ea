//! Loss terms with analytic gradients with respect to the predicted vertices.
//!
//! Supervised samples use the L1 vertex loss, the cosine normal loss and the
//! edge-ratio loss against ground truth. Unsupervised samples use the
//! truncated Chamfer distance, the normal loss at closest-vertex or
//! normal-ray counterparts, the edge-ratio loss against the template and,
//! for expressive scans, the mouth Laplacian regularizer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    dist2, normal_sums, vertex_normals_backward, vertex_normals_from, PointCloud, Template, Vec3,
    UmbrellaLaplacian,
};
use crate::spatial::{brute_nearest, KdIndex, RayIndex, RayQuery};

pub const DEFAULT_LAMBDA_NORMAL: f64 = 1.6e-4;
pub const DEFAULT_LAMBDA_EDGE: f64 = 1.6e-4;
pub const DEFAULT_LAMBDA_LAP: f64 = 0.005;
pub const DEFAULT_EPSILON: f64 = 0.001;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CounterpartMode {
    ClosestVertex,
    NormalRay,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_normal: f64,
    pub lambda_edge: f64,
    pub lambda_lap: f64,
    /// Squared-distance cutoff beyond which a counterpart is a flying vertex.
    pub epsilon: f64,
    pub counterpart_mode: CounterpartMode,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_normal: DEFAULT_LAMBDA_NORMAL,
            lambda_edge: DEFAULT_LAMBDA_EDGE,
            lambda_lap: DEFAULT_LAMBDA_LAP,
            epsilon: DEFAULT_EPSILON,
            counterpart_mode: CounterpartMode::ClosestVertex,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_normal, self.lambda_edge, self.lambda_lap, self.epsilon];
        if all.iter().any(|w| !(*w >= 0.0) || w.is_nan()) {
            return Err(Error::Config(format!("loss weights must be nonnegative: {self:?}")));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// A scalar loss value and its gradient with respect to each vertex.
#[derive(Debug, Clone, PartialEq)]
pub struct TermValue {
    pub value: f64,
    pub grad: Vec<Vec3>,
}

fn check_len(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::shape(format!("{expected} vertices"), format!("{actual} vertices")));
    }
    Ok(())
}

/// `sum |gt - pred|` over all coordinates.
pub fn l1_vertex(pred: &[Vec3], gt: &[Vec3]) -> Result<TermValue> {
    check_len(gt.len(), pred.len())?;
    let mut value = 0.0;
    let grad = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| {
            let d = p - g;
            value += d.x.abs() + d.y.abs() + d.z.abs();
            d.map(|c| if c > 0.0 { 1.0 } else if c < 0.0 { -1.0 } else { 0.0 })
        })
        .collect();
    Ok(TermValue { value, grad })
}

/// `(1/n) sum (1 - target_i . pred_i)` over unit normals, with the gradient
/// with respect to the predicted normals.
pub fn normal_cosine_on_normals(pred: &[Vec3], target: &[Vec3]) -> Result<TermValue> {
    check_len(target.len(), pred.len())?;
    for (i, (p, t)) in pred.iter().zip(target).enumerate() {
        if p.norm() == 0.0 || t.norm() == 0.0 {
            return Err(Error::ZeroNormal(i));
        }
    }
    let n = pred.len().max(1) as f64;
    let value = pred.iter().zip(target).map(|(p, t)| 1.0 - t.dot(p)).sum::<f64>() / n;
    let grad = target.iter().map(|t| -t / n).collect();
    Ok(TermValue { value, grad })
}

/// Cosine normal loss of the mesh `(pred, faces)` against per-vertex target
/// normals, differentiated through the vertex-normal computation.
pub fn normal_cosine(pred: &[Vec3], faces: &[[usize; 3]], target: &[Vec3]) -> Result<TermValue> {
    let normals = vertex_normals_from(pred, faces)?;
    let on_normals = normal_cosine_on_normals(&normals, target)?;
    let sums = normal_sums(pred, faces);
    Ok(TermValue {
        value: on_normals.value,
        grad: vertex_normals_backward(pred, faces, &sums, &on_normals.grad),
    })
}

/// Reference edge lengths for the edge-ratio loss.
#[derive(Debug, Clone)]
pub struct EdgeReference {
    edges: Vec<(usize, usize)>,
    lengths: Vec<f64>,
}

impl EdgeReference {
    pub fn new(reference: &[Vec3], edges: &[(usize, usize)]) -> Result<Self> {
        let mut lengths = Vec::with_capacity(edges.len());
        for &(i, j) in edges {
            if i >= reference.len() || j >= reference.len() {
                return Err(Error::InvalidArgument(format!("edge ({i}, {j}) out of range")));
            }
            let l = (reference[i] - reference[j]).norm();
            if l == 0.0 {
                return Err(Error::ZeroLengthEdge(i, j));
            }
            lengths.push(l);
        }
        Ok(Self {
            edges: edges.to_vec(),
            lengths,
        })
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }
}

/// `(1/|E|) sum | |pred_i - pred_j| / |ref_i - ref_j| - 1 |`.
pub fn edge_ratio(pred: &[Vec3], reference: &[Vec3], edges: &[(usize, usize)]) -> Result<TermValue> {
    check_len(reference.len(), pred.len())?;
    edge_ratio_with(pred, &EdgeReference::new(reference, edges)?)
}

pub fn edge_ratio_with(pred: &[Vec3], reference: &EdgeReference) -> Result<TermValue> {
    let mut grad = vec![Vec3::zeros(); pred.len()];
    if reference.edges.is_empty() {
        return Ok(TermValue { value: 0.0, grad });
    }
    let m = reference.edges.len() as f64;
    let mut value = 0.0;
    for (&(i, j), &l) in reference.edges.iter().zip(&reference.lengths) {
        if i >= pred.len() || j >= pred.len() {
            return Err(Error::InvalidArgument(format!("edge ({i}, {j}) out of range")));
        }
        let d = pred[i] - pred[j];
        let len = d.norm();
        let r = len / l - 1.0;
        value += r.abs();
        if r != 0.0 && len > 0.0 {
            let g = d * (r.signum() / (l * len * m));
            grad[i] += g;
            grad[j] -= g;
        }
    }
    Ok(TermValue { value: value / m, grad })
}

/// Truncated Chamfer distance and its counterpart maps.
#[derive(Debug, Clone, PartialEq)]
pub struct ChamferResult {
    pub value: f64,
    pub grad: Vec<Vec3>,
    /// Nearest raw point of every predicted vertex.
    pub pred_to_raw: Vec<usize>,
    /// Nearest predicted vertex of every raw point.
    pub raw_to_pred: Vec<usize>,
    /// Predicted vertices whose nearest raw point is beyond the cutoff.
    pub flying_pred: usize,
    /// Raw points whose nearest predicted vertex is beyond the cutoff.
    pub flying_raw: usize,
}

impl ChamferResult {
    pub fn flying_count(&self) -> usize {
        self.flying_pred + self.flying_raw
    }
}

fn chamfer_from_maps(
    pred: &[Vec3],
    raw: &[Vec3],
    p2r: Vec<(usize, f64)>,
    r2p: Vec<(usize, f64)>,
    eps: f64,
) -> ChamferResult {
    let mut grad = vec![Vec3::zeros(); pred.len()];
    let mut value = 0.0;
    let mut flying_pred = 0;
    let mut flying_raw = 0;
    for (i, &(q, d)) in p2r.iter().enumerate() {
        if d > eps {
            flying_pred += 1;
            continue;
        }
        value += d;
        grad[i] += (pred[i] - raw[q]) * 2.0;
    }
    for (q, &(i, d)) in r2p.iter().enumerate() {
        if d > eps {
            flying_raw += 1;
            continue;
        }
        value += d;
        grad[i] += (pred[i] - raw[q]) * 2.0;
    }
    ChamferResult {
        value,
        grad,
        pred_to_raw: p2r.into_iter().map(|(q, _)| q).collect(),
        raw_to_pred: r2p.into_iter().map(|(i, _)| i).collect(),
        flying_pred,
        flying_raw,
    }
}

/// Kd-accelerated Chamfer distance between `pred` and the indexed raw scan.
/// Each directional term whose minimum squared distance exceeds `eps` is
/// dropped. Counterparts are constant for the gradient.
pub fn chamfer(pred: &[Vec3], raw: &KdIndex, eps: f64) -> Result<ChamferResult> {
    if pred.is_empty() {
        return Err(Error::Empty("chamfer needs a nonempty prediction"));
    }
    let pred_index = KdIndex::build(pred)?;
    let p2r = pred.iter().map(|p| raw.nearest(p)).collect();
    let r2p = raw.points().iter().map(|q| pred_index.nearest(q)).collect();
    Ok(chamfer_from_maps(pred, raw.points(), p2r, r2p, eps))
}

/// Quadratic-time Chamfer distance; the oracle for [`chamfer`].
pub fn brute_chamfer(pred: &[Vec3], raw: &[Vec3], eps: f64) -> Result<ChamferResult> {
    if pred.is_empty() || raw.is_empty() {
        return Err(Error::Empty("chamfer needs two nonempty sets"));
    }
    let p2r = pred.iter().map(|p| brute_nearest(raw, p)).collect();
    let r2p = raw.iter().map(|q| brute_nearest(pred, q)).collect();
    Ok(chamfer_from_maps(pred, raw, p2r, r2p, eps))
}

/// A raw scan with the indices the unsupervised losses query.
#[derive(Debug, Clone)]
pub struct RawTarget {
    cloud: PointCloud,
    kd: KdIndex,
    rays: RayIndex,
}

impl RawTarget {
    pub fn new(cloud: PointCloud) -> Result<Self> {
        let kd = KdIndex::build(cloud.points())?;
        let rays = RayIndex::from_points(cloud.points())?;
        Ok(Self { cloud, kd, rays })
    }

    pub fn cloud(&self) -> &PointCloud {
        &self.cloud
    }

    pub fn kd(&self) -> &KdIndex {
        &self.kd
    }

    pub fn rays(&self) -> &RayIndex {
        &self.rays
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalTermResult {
    pub value: f64,
    pub grad: Vec<Vec3>,
    /// Raw point used for each predicted vertex; `None` when excluded.
    pub counterparts: Vec<Option<usize>>,
    pub excluded: usize,
}

/// Picks the raw counterpart of every predicted vertex: the closest raw
/// point, or in normal-ray mode the ray counterpart along the predicted normal
/// when one exists. Counterparts farther than `eps` (squared) are dropped.
pub fn find_counterparts(
    pred: &[Vec3],
    pred_normals: &[Vec3],
    raw: &RawTarget,
    closest: Option<&[usize]>,
    mode: CounterpartMode,
    eps: f64,
    ray_query: &RayQuery,
) -> Result<Vec<Option<usize>>> {
    let pts = raw.cloud.points();
    pred.iter()
        .enumerate()
        .map(|(i, p)| {
            let nearest = match closest {
                Some(c) => c[i],
                None => raw.kd.nearest(p).0,
            };
            let chosen = match mode {
                CounterpartMode::ClosestVertex => nearest,
                CounterpartMode::NormalRay => raw
                    .rays
                    .ray_counterpart(p, &pred_normals[i], ray_query)?
                    .map_or(nearest, |hit| hit.primitive),
            };
            Ok((dist2(p, &pts[chosen]) <= eps).then_some(chosen))
        })
        .collect()
}

/// Unsupervised normal loss: cosine distance between predicted vertex
/// normals and the raw normals at each counterpart, averaged over all
/// predicted vertices (excluded vertices contribute zero).
pub fn unsup_normal(
    pred: &[Vec3],
    faces: &[[usize; 3]],
    raw: &RawTarget,
    closest: Option<&[usize]>,
    mode: CounterpartMode,
    eps: f64,
    ray_query: &RayQuery,
) -> Result<NormalTermResult> {
    let raw_normals = raw.cloud.normals().ok_or(Error::MissingNormals)?;
    let normals = vertex_normals_from(pred, faces)?;
    let counterparts = find_counterparts(pred, &normals, raw, closest, mode, eps, ray_query)?;
    let n = pred.len() as f64;
    let mut value = 0.0;
    let mut grad_normals = vec![Vec3::zeros(); pred.len()];
    let mut excluded = 0;
    for (i, c) in counterparts.iter().enumerate() {
        match c {
            Some(q) => {
                let t = raw_normals[*q];
                value += 1.0 - t.dot(&normals[i]);
                grad_normals[i] = -t / n;
            }
            None => excluded += 1,
        }
    }
    let sums = normal_sums(pred, faces);
    Ok(NormalTermResult {
        value: value / n,
        grad: vertex_normals_backward(pred, faces, &sums, &grad_normals),
        counterparts,
        excluded,
    })
}

/// `|| L S_mouth ||_2`: Euclidean norm of the stacked umbrella rows.
pub fn laplacian_reg(pred: &[Vec3], lap: &UmbrellaLaplacian) -> TermValue {
    let rows = lap.apply(pred);
    let value = rows.iter().map(|r| r.norm_squared()).sum::<f64>().sqrt();
    let grad = if value > 0.0 {
        let scaled: Vec<Vec3> = rows.iter().map(|r| r / value).collect();
        lap.apply_transpose(&scaled, pred.len())
    } else {
        vec![Vec3::zeros(); pred.len()]
    };
    TermValue { value, grad }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTerm {
    Vertex,
    Chamfer,
    Normal,
    Edge,
    Laplacian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TermReport {
    pub term: LossTerm,
    pub value: f64,
    pub weight: f64,
}

/// Per-term values, the weighted total and its vertex gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub terms: Vec<TermReport>,
    pub total: f64,
    pub grad: Vec<Vec3>,
    pub counterparts: Option<Vec<Option<usize>>>,
    pub flying_count: usize,
    /// Hash of every discrete choice behind the value (absolute-value signs,
    /// nearest-neighbour maps, cutoffs). Equal signatures mean the same
    /// smooth piece of the loss.
    pub piece: u64,
}

/// FNV-1a style accumulator for [`LossReport::piece`].
#[derive(Debug, Clone, Copy)]
pub struct PieceHash(u64);

impl Default for PieceHash {
    fn default() -> Self {
        Self(0xcbf2_9ce4_8422_2325)
    }
}

impl PieceHash {
    pub fn mix(&mut self, v: u64) {
        self.0 ^= v;
        self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
    }

    pub fn signs(&mut self, values: impl IntoIterator<Item = f64>) {
        for v in values {
            self.mix(if v > 0.0 { 1 } else if v < 0.0 { 2 } else { 3 });
        }
    }

    pub fn indices(&mut self, values: impl IntoIterator<Item = usize>) {
        for v in values {
            self.mix(v as u64 + 4);
        }
    }

    pub fn finish(self) -> u64 {
        self.0
    }
}

/// Signs of `ratio - 1` for every reference edge.
pub fn edge_ratio_signs<'a>(pred: &'a [Vec3], reference: &'a EdgeReference) -> impl Iterator<Item = f64> + 'a {
    reference
        .edges
        .iter()
        .zip(&reference.lengths)
        .map(move |(&(i, j), &l)| (pred[i] - pred[j]).norm() / l - 1.0)
}

impl LossReport {
    /// `sum weight * value`, recomputed from the parts.
    pub fn recomputed_total(&self) -> f64 {
        self.terms.iter().map(|t| t.weight * t.value).sum()
    }

    pub fn term(&self, term: LossTerm) -> Option<f64> {
        self.terms.iter().find(|t| t.term == term).map(|t| t.value)
    }
}

/// Per-template data shared by every loss evaluation.
#[derive(Debug, Clone)]
pub struct LossContext {
    vertex_count: usize,
    faces: Vec<[usize; 3]>,
    template_edges: EdgeReference,
    mouth: UmbrellaLaplacian,
    pub weights: LossWeights,
    pub ray_query: RayQuery,
}

impl LossContext {
    pub fn new(template: &Template, weights: LossWeights) -> Result<Self> {
        weights.validate()?;
        let mesh = template.mesh();
        Ok(Self {
            vertex_count: mesh.vertex_count(),
            faces: mesh.faces().to_vec(),
            template_edges: EdgeReference::new(mesh.vertices(), mesh.edges())?,
            mouth: crate::geometry::graph_laplacian(mesh, template.mouth())?,
            weights,
            ray_query: RayQuery::default(),
        })
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn template_edges(&self) -> &EdgeReference {
        &self.template_edges
    }

    pub fn mouth(&self) -> &UmbrellaLaplacian {
        &self.mouth
    }
}

/// Ground truth of a supervised sample with its derived normals and edges.
#[derive(Debug, Clone)]
pub struct SupervisedTarget {
    pub shape: Vec<Vec3>,
    pub normals: Vec<Vec3>,
    pub edges: EdgeReference,
}

impl SupervisedTarget {
    pub fn new(shape: Vec<Vec3>, ctx: &LossContext) -> Result<Self> {
        let normals = vertex_normals_from(&shape, &ctx.faces)?;
        let edges = EdgeReference::new(&shape, ctx.template_edges.edges())?;
        Ok(Self { shape, normals, edges })
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Supervision<'a> {
    Supervised(&'a SupervisedTarget),
    Unsupervised { raw: &'a RawTarget, expressive: bool },
}

fn add_scaled(acc: &mut [Vec3], g: &[Vec3], w: f64) {
    if w != 0.0 {
        acc.iter_mut().zip(g).for_each(|(a, b)| *a += b * w);
    }
}

/// Weighted total loss for one prediction.
pub fn total_loss(pred: &[Vec3], supervision: Supervision<'_>, ctx: &LossContext, mode: CounterpartMode) -> Result<LossReport> {
    let w = &ctx.weights;
    let mut grad = vec![Vec3::zeros(); pred.len()];
    let mut terms = Vec::with_capacity(4);
    let mut push = |term: LossTerm, tv: &TermValue, weight: f64, grad: &mut Vec<Vec3>| {
        terms.push(TermReport {
            term,
            value: tv.value,
            weight,
        });
        add_scaled(grad, &tv.grad, weight);
    };
    match supervision {
        Supervision::Supervised(target) => {
            check_len(target.shape.len(), pred.len())?;
            let vt = l1_vertex(pred, &target.shape)?;
            let normal = normal_cosine(pred, &ctx.faces, &target.normals)?;
            let edge = edge_ratio_with(pred, &target.edges)?;
            push(LossTerm::Vertex, &vt, 1.0, &mut grad);
            push(LossTerm::Normal, &normal, w.lambda_normal, &mut grad);
            push(LossTerm::Edge, &edge, w.lambda_edge, &mut grad);
            let total = terms.iter().map(|t| t.weight * t.value).sum();
            let mut piece = PieceHash::default();
            piece.signs(pred.iter().zip(&target.shape).flat_map(|(p, g)| {
                let d = p - g;
                [d.x, d.y, d.z]
            }));
            piece.signs(edge_ratio_signs(pred, &target.edges));
            Ok(LossReport {
                terms,
                total,
                grad,
                counterparts: None,
                flying_count: 0,
                piece: piece.finish(),
            })
        }
        Supervision::Unsupervised { raw, expressive } => {
            check_len(ctx.vertex_count, pred.len())?;
            let ch = chamfer(pred, &raw.kd, w.epsilon)?;
            let normal = unsup_normal(pred, &ctx.faces, raw, Some(&ch.pred_to_raw), mode, w.epsilon, &ctx.ray_query)?;
            let edge = edge_ratio_with(pred, &ctx.template_edges)?;
            push(
                LossTerm::Chamfer,
                &TermValue {
                    value: ch.value,
                    grad: ch.grad.clone(),
                },
                1.0,
                &mut grad,
            );
            push(
                LossTerm::Normal,
                &TermValue {
                    value: normal.value,
                    grad: normal.grad.clone(),
                },
                w.lambda_normal,
                &mut grad,
            );
            push(LossTerm::Edge, &edge, w.lambda_edge, &mut grad);
            if expressive {
                let lap = laplacian_reg(pred, &ctx.mouth);
                push(LossTerm::Laplacian, &lap, w.lambda_lap, &mut grad);
            }
            let total = terms.iter().map(|t| t.weight * t.value).sum();
            let mut piece = PieceHash::default();
            piece.indices(ch.pred_to_raw.iter().chain(&ch.raw_to_pred).copied());
            piece.indices([ch.flying_pred, ch.flying_raw]);
            piece.indices(normal.counterparts.iter().map(|c| c.map_or(0, |q| q + 1)));
            piece.signs(edge_ratio_signs(pred, &ctx.template_edges));
            Ok(LossReport {
                terms,
                total,
                grad,
                counterparts: Some(normal.counterparts),
                flying_count: ch.flying_count(),
                piece: piece.finish(),
            })
        }
    }
}

/// Signals once when a loss curve stops improving: the moving average over
/// `window` epochs improves by less than `threshold` (relative) for
/// `patience` consecutive epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaturationDetector {
    pub window: usize,
    pub threshold: f64,
    pub patience: usize,
    #[serde(skip)]
    history: Vec<f64>,
    #[serde(skip)]
    streak: usize,
    #[serde(skip)]
    fired: bool,
}

impl Default for SaturationDetector {
    fn default() -> Self {
        Self::new(5, 0.01, 3)
    }
}

impl SaturationDetector {
    pub fn new(window: usize, threshold: f64, patience: usize) -> Self {
        Self {
            window: window.max(1),
            threshold,
            patience: patience.max(1),
            history: Vec::new(),
            streak: 0,
            fired: false,
        }
    }

    fn smoothed(&self, end: usize) -> f64 {
        let start = end.saturating_sub(self.window);
        let s = &self.history[start..end];
        s.iter().sum::<f64>() / s.len() as f64
    }

    /// Feeds one epoch loss. Returns `true` exactly once, on the epoch where
    /// saturation is first detected.
    pub fn observe(&mut self, loss: f64) -> bool {
        self.history.push(loss);
        if self.fired || self.history.len() <= self.window {
            return false;
        }
        let n = self.history.len();
        let prev = self.smoothed(n - 1);
        let cur = self.smoothed(n);
        let rel = if prev.abs() > 0.0 { (prev - cur) / prev.abs() } else { 0.0 };
        if rel < self.threshold {
            self.streak += 1;
        } else {
            self.streak = 0;
        }
        if self.streak >= self.patience {
            self.fired = true;
            return true;
        }
        false
    }

    pub fn fired(&self) -> bool {
        self.fired
    }

    /// Clears the history but remembers whether it already fired.
    pub fn reset_history(&mut self) {
        self.history.clear();
        self.streak = 0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{graph_laplacian, TriMesh};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(x: f64, y: f64, z: f64) -> Vec3 {
        Vec3::new(x, y, z)
    }

    #[test]
    fn l1_cases() {
        let a = vec![v(0.0, 0.0, 0.0), v(1.0, 2.0, 3.0)];
        assert_eq!(l1_vertex(&a, &a).unwrap().value, 0.0);
        let b: Vec<Vec3> = a.iter().map(|p| p + v(1.0, 0.0, 0.0)).collect();
        let t = l1_vertex(&b, &a).unwrap();
        assert_eq!(t.value, 2.0);
        for g in &t.grad {
            assert!(g.iter().all(|c| [-1.0, 0.0, 1.0].contains(c)));
        }
        assert!(l1_vertex(&a[..1], &a).is_err());
    }

    #[test]
    fn cosine_cases() {
        let z = vec![Vec3::z(); 4];
        assert_eq!(normal_cosine_on_normals(&z, &z).unwrap().value, 0.0);
        let mz = vec![-Vec3::z(); 4];
        assert_eq!(normal_cosine_on_normals(&z, &mz).unwrap().value, 2.0);
        let x = vec![Vec3::x(); 4];
        assert_eq!(normal_cosine_on_normals(&z, &x).unwrap().value, 1.0);
        assert!(matches!(
            normal_cosine_on_normals(&[Vec3::zeros()], &[Vec3::z()]),
            Err(Error::ZeroNormal(0))
        ));
    }

    #[test]
    fn edge_ratio_cases() {
        let r = vec![v(0.0, 0.0, 0.0), v(1.0, 0.0, 0.0), v(0.0, 1.0, 0.0)];
        let e = vec![(0, 1), (0, 2), (1, 2)];
        assert_eq!(edge_ratio(&r, &r, &e).unwrap().value, 0.0);
        let doubled: Vec<Vec3> = r.iter().map(|p| p * 2.0).collect();
        assert!((edge_ratio(&doubled, &r, &e).unwrap().value - 1.0).abs() < 1e-15);
        let half = vec![v(0.0, 0.0, 0.0), v(0.5, 0.0, 0.0), v(0.0, 1.0, 0.0)];
        assert_eq!(edge_ratio(&half, &r, &[(0, 1)]).unwrap().value, 0.5);
        let degenerate = vec![v(0.0, 0.0, 0.0), v(0.0, 0.0, 0.0), v(0.0, 1.0, 0.0)];
        assert!(matches!(edge_ratio(&r, &degenerate, &[(0, 1)]), Err(Error::ZeroLengthEdge(0, 1))));
    }

    #[test]
    fn chamfer_hand_cases() {
        let pred = vec![v(0.0, 0.0, 0.0)];
        let raw = KdIndex::build(&[v(1.0, 0.0, 0.0)]).unwrap();
        let c = chamfer(&pred, &raw, f64::INFINITY).unwrap();
        assert_eq!(c.value, 2.0);
        assert_eq!(c.grad[0], v(-4.0, 0.0, 0.0));
        let c = chamfer(&pred, &raw, 0.5).unwrap();
        assert_eq!(c.value, 0.0);
        assert_eq!(c.flying_count(), 2);
        assert_eq!(c.grad[0], Vec3::zeros());
    }

    #[test]
    fn chamfer_of_identical_sets_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p: Vec<Vec3> = (0..50).map(|_| v(rng.random(), rng.random(), rng.random())).collect();
        let mut shuffled = p.clone();
        shuffled.reverse();
        let c = chamfer(&p, &KdIndex::build(&shuffled).unwrap(), DEFAULT_EPSILON).unwrap();
        assert_eq!(c.value, 0.0);
        assert_eq!(c.flying_count(), 0);
    }

    #[test]
    fn chamfer_symmetric_without_cutoff() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a: Vec<Vec3> = (0..40).map(|_| v(rng.random(), rng.random(), rng.random())).collect();
        let b: Vec<Vec3> = (0..30).map(|_| v(rng.random(), rng.random(), rng.random())).collect();
        let ab = chamfer(&a, &KdIndex::build(&b).unwrap(), f64::INFINITY).unwrap().value;
        let ba = chamfer(&b, &KdIndex::build(&a).unwrap(), f64::INFINITY).unwrap().value;
        assert!((ab - ba).abs() <= 1e-12 * ab.max(1.0));
    }

    #[test]
    fn chamfer_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<Vec3> = (0..300).map(|_| v(rng.random(), rng.random(), rng.random())).collect();
        let b: Vec<Vec3> = (0..250).map(|_| v(rng.random(), rng.random(), rng.random())).collect();
        let fast = chamfer(&a, &KdIndex::build(&b).unwrap(), 0.01).unwrap();
        assert_eq!(fast, brute_chamfer(&a, &b, 0.01).unwrap());
    }

    fn plane(nx: usize, ny: usize, h: f64) -> (Vec<Vec3>, Vec<[usize; 3]>) {
        let mut verts = Vec::new();
        for j in 0..ny {
            for i in 0..nx {
                verts.push(v(i as f64 * h, j as f64 * h, 0.0));
            }
        }
        let mut faces = Vec::new();
        for j in 0..ny - 1 {
            for i in 0..nx - 1 {
                let a = j * nx + i;
                faces.push([a, a + 1, a + nx + 1]);
                faces.push([a, a + nx + 1, a + nx]);
            }
        }
        (verts, faces)
    }

    #[test]
    fn unsup_normal_zero_on_coincident_surface() {
        let (verts, faces) = plane(6, 6, 0.01);
        let raw = RawTarget::new(PointCloud::new(verts.clone(), Some(vec![Vec3::z(); verts.len()])).unwrap()).unwrap();
        for mode in [CounterpartMode::ClosestVertex, CounterpartMode::NormalRay] {
            let r = unsup_normal(&verts, &faces, &raw, None, mode, DEFAULT_EPSILON, &RayQuery::default()).unwrap();
            assert!(r.value.abs() < 1e-15);
            assert_eq!(r.excluded, 0);
        }
    }

    #[test]
    fn plane_modes_agree() {
        let (raw_pts, _) = plane(20, 20, 0.005);
        let raw = RawTarget::new(PointCloud::new(raw_pts.clone(), Some(vec![Vec3::z(); raw_pts.len()])).unwrap()).unwrap();
        // predicted patch hovering above the raw plane, offset in-plane
        let (mut pred, faces) = plane(5, 5, 0.01);
        for p in &mut pred {
            *p += v(0.0213, 0.0171, 0.02);
        }
        let q = RayQuery::default();
        let a = unsup_normal(&pred, &faces, &raw, None, CounterpartMode::ClosestVertex, 1.0, &q).unwrap();
        let b = unsup_normal(&pred, &faces, &raw, None, CounterpartMode::NormalRay, 1.0, &q).unwrap();
        assert_eq!(a.counterparts, b.counterparts);
    }

    #[test]
    fn unsup_normal_cutoff_and_missing_normals() {
        let (verts, faces) = plane(4, 4, 0.1);
        let far: Vec<Vec3> = verts.iter().map(|p| p + v(0.0, 0.0, 1.0)).collect();
        let raw = RawTarget::new(PointCloud::new(far.clone(), Some(vec![Vec3::z(); far.len()])).unwrap()).unwrap();
        let r = unsup_normal(&verts, &faces, &raw, None, CounterpartMode::ClosestVertex, DEFAULT_EPSILON, &RayQuery::default())
            .unwrap();
        assert_eq!(r.value, 0.0);
        assert_eq!(r.excluded, verts.len());
        let bare = RawTarget::new(PointCloud::from_points(far).unwrap()).unwrap();
        assert!(matches!(
            unsup_normal(&verts, &faces, &bare, None, CounterpartMode::ClosestVertex, 1.0, &RayQuery::default()),
            Err(Error::MissingNormals)
        ));
    }

    #[test]
    fn laplacian_cases() {
        let verts = vec![v(0.0, 0.0, 0.0), v(1.0, 0.0, 0.0), v(0.0, 1.0, 0.0), v(-1.0, 0.0, 0.0), v(0.0, -1.0, 0.0)];
        let mesh = TriMesh::new(verts.clone(), vec![[0, 1, 2], [0, 2, 3], [0, 3, 4], [0, 4, 1]]).unwrap();
        let lap = graph_laplacian(&mesh, &[0]).unwrap();
        assert_eq!(laplacian_reg(&verts, &lap).value, 0.0);
        let mut moved = verts.clone();
        moved[0].z = 0.3;
        assert!((laplacian_reg(&moved, &lap).value - 0.3).abs() < 1e-15);
        let shifted: Vec<Vec3> = moved.iter().map(|p| p + v(5.0, -2.0, 1.0)).collect();
        assert!((laplacian_reg(&shifted, &lap).value - 0.3).abs() < 1e-12);
    }

    #[test]
    fn saturation_fires_once() {
        let mut d = SaturationDetector::default();
        let mut fired_at = Vec::new();
        for e in 0..40 {
            let loss = if e < 10 { 10.0 / (e + 1) as f64 } else { 1.0 };
            if d.observe(loss) {
                fired_at.push(e);
            }
        }
        assert_eq!(fired_at.len(), 1);
        assert!(fired_at[0] >= 10);
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        let bad = LossWeights {
            epsilon: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let neg = LossWeights {
            lambda_edge: -1.0,
            ..Default::default()
        };
        assert!(neg.validate().is_err());
    }
}
