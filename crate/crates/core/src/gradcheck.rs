//! Central finite-difference checks of every analytic gradient: each loss
//! term and the weighted total with respect to predicted vertices, and the
//! total with respect to every network parameter.
//!
//! Coordinates whose perturbation moves the loss onto a different smooth
//! piece (a nearest-neighbour switch, a cutoff crossing, a ReLU or max-pool
//! change, a sign flip inside an absolute value) are skipped and counted.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autonet::{row_to_vertices, vertices_to_row, FaceModel, Graph, ModelConfig};
use crate::error::{Error, Result};
use crate::geometry::{interpolating_subdivide, vertex_normals, PointCloud, Template, TriMesh, Vec3};
use crate::losses::{
    chamfer, edge_ratio_signs, edge_ratio_with, l1_vertex, laplacian_reg, normal_cosine, total_loss, unsup_normal, CounterpartMode,
    EdgeReference, LossContext, LossWeights, PieceHash, RawTarget, SupervisedTarget, Supervision,
};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Gradient magnitudes below this are compared absolutely.
pub const MAGNITUDE_FLOOR: f64 = 1e-6;
pub const GRID: (usize, usize) = (5, 10);

/// `|a - f| / max(|a|, |f|, MAGNITUDE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub compared: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceReport {
    pub seed: u64,
    pub checks: Vec<CheckResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub instances: Vec<InstanceReport>,
    pub max_rel_err: f64,
    pub worst: String,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// Randomized test fixture: a bumpy 5x10 grid template, a perturbed
/// prediction, a perturbed ground truth and a noisy raw scan with outliers.
pub struct Instance {
    pub seed: u64,
    pub template: Template,
    pub pred: Vec<Vec3>,
    pub ctx: LossContext,
    pub target: SupervisedTarget,
    pub raw: RawTarget,
    /// Encoder input for the network check.
    pub input: Vec<Vec3>,
}

fn grid_mesh(rng: &mut ChaCha8Rng) -> Result<TriMesh> {
    let (w, h) = GRID;
    let spacing = 0.1;
    let (a, b, c) = (rng.random_range(0.5..1.5), rng.random_range(0.5..1.5), rng.random_range(0.0..6.0));
    let mut vertices = Vec::with_capacity(w * h);
    for j in 0..h {
        for i in 0..w {
            let (x, y) = (i as f64 * spacing, j as f64 * spacing);
            vertices.push(Vec3::new(x, y, 0.05 * (a * 6.0 * x + c).sin() * (b * 4.0 * y).cos()));
        }
    }
    let mut faces = Vec::new();
    for j in 0..h - 1 {
        for i in 0..w - 1 {
            let v = j * w + i;
            faces.push([v, v + 1, v + w]);
            faces.push([v + 1, v + w + 1, v + w]);
        }
    }
    TriMesh::new(vertices, faces)
}

fn jitter(points: &[Vec3], sigma: f64, rng: &mut ChaCha8Rng) -> Vec<Vec3> {
    let d = Normal::new(0.0, sigma).unwrap();
    points
        .iter()
        .map(|p| p + Vec3::new(d.sample(rng), d.sample(rng), d.sample(rng)))
        .collect()
}

impl Instance {
    pub fn new(seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mesh = grid_mesh(&mut rng)?;
        let (w, _) = GRID;
        let mouth: Vec<usize> = (3..6).flat_map(|j| (1..4).map(move |i| j * w + i)).collect();
        let template = Template::new(mesh.clone(), vec![("centre".into(), 4 * w + 2)], mouth)?;
        let weights = LossWeights {
            // large enough that every term moves the total visibly
            lambda_normal: 0.3,
            lambda_edge: 0.2,
            lambda_lap: 0.1,
            epsilon: 0.001,
            counterpart_mode: CounterpartMode::ClosestVertex,
        };
        let ctx = LossContext::new(&template, weights)?;
        let mut pred = jitter(mesh.vertices(), 0.01, &mut rng);
        // a few vertices far from the scan become flying vertices
        for k in 0..3 {
            let i = rng.random_range(0..pred.len());
            pred[i].z += 0.08 + 0.02 * k as f64;
        }
        let gt = jitter(mesh.vertices(), 0.01, &mut rng);
        let target = SupervisedTarget::new(gt.clone(), &ctx)?;
        let dense = interpolating_subdivide(&mesh.with_vertices(gt)?);
        let normals = vertex_normals(&dense)?;
        let mut points = jitter(dense.vertices(), 0.004, &mut rng);
        let mut raw_normals = normals;
        for _ in 0..5 {
            let i = rng.random_range(0..points.len());
            points.push(points[i] + Vec3::new(0.0, 0.0, 0.3));
            raw_normals.push(raw_normals[i]);
        }
        let input: Vec<Vec3> = (0..mesh.vertex_count()).map(|i| points[(i * 7) % points.len()]).collect();
        let raw = RawTarget::new(PointCloud::new(points, Some(raw_normals))?)?;
        Ok(Self {
            seed,
            template,
            pred,
            ctx,
            target,
            raw,
            input,
        })
    }

    pub fn small_model_config(&self) -> ModelConfig {
        ModelConfig {
            vertex_count: self.template.vertex_count(),
            latent_id: 4,
            latent_exp: 3,
            encoder_widths: vec![8, 16, 24],
            decoder_hidden: 12,
            anchor_zero_expression: self.seed % 2 == 1,
        }
    }
}

/// Compares `analytic` against central differences of `f` at `x0`. `f`
/// returns the value and a piece signature; coordinates whose signature
/// changes under the perturbation are skipped.
fn check_vertices<F>(name: &str, x0: &[Vec3], analytic: &[Vec3], f: F) -> Result<CheckResult>
where
    F: Fn(&[Vec3]) -> Result<(f64, u64)>,
{
    let (_, base_piece) = f(x0)?;
    let mut x = x0.to_vec();
    let mut max_rel_err: f64 = 0.0;
    let (mut compared, mut skipped) = (0, 0);
    for i in 0..x0.len() {
        for a in 0..3 {
            x[i][a] = x0[i][a] + STEP;
            let (plus, p_piece) = f(&x)?;
            x[i][a] = x0[i][a] - STEP;
            let (minus, m_piece) = f(&x)?;
            x[i][a] = x0[i][a];
            if p_piece != base_piece || m_piece != base_piece {
                skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * STEP);
            max_rel_err = max_rel_err.max(relative_error(analytic[i][a], numeric));
            compared += 1;
        }
    }
    Ok(CheckResult {
        name: name.into(),
        max_rel_err,
        compared,
        skipped,
    })
}

fn sup_signs(pred: &[Vec3], gt: &[Vec3]) -> u64 {
    let mut h = PieceHash::default();
    h.signs(pred.iter().zip(gt).flat_map(|(p, g)| {
        let d = p - g;
        [d.x, d.y, d.z]
    }));
    h.finish()
}

fn edge_piece(pred: &[Vec3], r: &EdgeReference) -> u64 {
    let mut h = PieceHash::default();
    h.signs(edge_ratio_signs(pred, r));
    h.finish()
}

/// Vertex-space checks of every term and of the totals.
pub fn check_loss_terms(inst: &Instance) -> Result<Vec<CheckResult>> {
    let pred = &inst.pred;
    let ctx = &inst.ctx;
    let faces = ctx.faces();
    let eps = ctx.weights.epsilon;
    let rq = ctx.ray_query;
    let gt = &inst.target.shape;
    let mut out = Vec::new();

    let a = l1_vertex(pred, gt)?;
    out.push(check_vertices("l1_vertex", pred, &a.grad, |x| Ok((l1_vertex(x, gt)?.value, sup_signs(x, gt))))?);

    let a = normal_cosine(pred, faces, &inst.target.normals)?;
    out.push(check_vertices("normal_cosine", pred, &a.grad, |x| {
        Ok((normal_cosine(x, faces, &inst.target.normals)?.value, 0))
    })?);

    let a = edge_ratio_with(pred, &inst.target.edges)?;
    out.push(check_vertices("edge_ratio_gt", pred, &a.grad, |x| {
        Ok((edge_ratio_with(x, &inst.target.edges)?.value, edge_piece(x, &inst.target.edges)))
    })?);

    let a = edge_ratio_with(pred, ctx.template_edges())?;
    out.push(check_vertices("edge_ratio_template", pred, &a.grad, |x| {
        Ok((edge_ratio_with(x, ctx.template_edges())?.value, edge_piece(x, ctx.template_edges())))
    })?);

    let chamfer_piece = |x: &[Vec3]| -> Result<(f64, u64)> {
        let c = chamfer(x, inst.raw.kd(), eps)?;
        let mut h = PieceHash::default();
        h.indices(c.pred_to_raw.iter().chain(&c.raw_to_pred).copied());
        h.indices([c.flying_pred, c.flying_raw]);
        Ok((c.value, h.finish()))
    };
    let a = chamfer(pred, inst.raw.kd(), eps)?;
    if a.flying_pred == 0 || a.flying_raw == 0 {
        return Err(Error::Degenerate("gradcheck fixture should contain flying points".into()));
    }
    out.push(check_vertices("chamfer", pred, &a.grad, chamfer_piece)?);

    for (name, mode) in [
        ("unsup_normal_closest", CounterpartMode::ClosestVertex),
        ("unsup_normal_ray", CounterpartMode::NormalRay),
    ] {
        let a = unsup_normal(pred, faces, &inst.raw, None, mode, eps, &rq)?;
        out.push(check_vertices(name, pred, &a.grad, |x| {
            let r = unsup_normal(x, faces, &inst.raw, None, mode, eps, &rq)?;
            let mut h = PieceHash::default();
            h.indices(r.counterparts.iter().map(|c| c.map_or(0, |q| q + 1)));
            Ok((r.value, h.finish()))
        })?);
    }

    let a = laplacian_reg(pred, ctx.mouth());
    out.push(check_vertices("laplacian", pred, &a.grad, |x| Ok((laplacian_reg(x, ctx.mouth()).value, 0)))?);

    let cases: [(&str, Supervision<'_>, CounterpartMode); 3] = [
        ("total_supervised", Supervision::Supervised(&inst.target), CounterpartMode::ClosestVertex),
        (
            "total_unsupervised_closest",
            Supervision::Unsupervised {
                raw: &inst.raw,
                expressive: false,
            },
            CounterpartMode::ClosestVertex,
        ),
        (
            "total_unsupervised_ray_expressive",
            Supervision::Unsupervised {
                raw: &inst.raw,
                expressive: true,
            },
            CounterpartMode::NormalRay,
        ),
    ];
    for (name, sup, mode) in cases {
        let a = total_loss(pred, sup, ctx, mode)?;
        out.push(check_vertices(name, pred, &a.grad, |x| {
            let r = total_loss(x, sup, ctx, mode)?;
            Ok((r.total, r.piece))
        })?);
    }
    Ok(out)
}

/// Total loss through the network with respect to every parameter entry.
pub fn check_network(inst: &Instance) -> Result<CheckResult> {
    let (sup, mode, with_expression) = match inst.seed % 3 {
        0 => (Supervision::Supervised(&inst.target), CounterpartMode::ClosestVertex, true),
        1 => (
            Supervision::Unsupervised {
                raw: &inst.raw,
                expressive: true,
            },
            CounterpartMode::ClosestVertex,
            true,
        ),
        _ => (
            Supervision::Unsupervised {
                raw: &inst.raw,
                expressive: false,
            },
            CounterpartMode::NormalRay,
            false,
        ),
    };
    let mut model = FaceModel::new(inst.small_model_config(), Some(inst.template.mesh().vertices()), inst.seed)?;
    let eval = |m: &FaceModel| -> Result<(f64, u64, u64)> {
        let mut g = Graph::new();
        let nodes = m.forward(&mut g, &inst.input, false, with_expression)?;
        let pred = row_to_vertices(g.value(nodes.shape));
        let r = total_loss(&pred, sup, &inst.ctx, mode)?;
        Ok((r.total, r.piece, g.activation_signature()))
    };
    let analytic: Vec<Vec<f64>> = {
        let mut g = Graph::new();
        let nodes = model.forward(&mut g, &inst.input, false, with_expression)?;
        let pred = row_to_vertices(g.value(nodes.shape));
        let r = total_loss(&pred, sup, &inst.ctx, mode)?;
        let grads = g.backward_seeded(vec![(nodes.shape, vertices_to_row(&r.grad))])?;
        model
            .params()
            .iter()
            .enumerate()
            .map(|(i, (_, _, t))| match grads.params.get(i) {
                Some(Some(gr)) => gr.iter().copied().collect(),
                _ => vec![0.0; t.value().len()],
            })
            .collect()
    };
    let (_, base_piece, base_act) = eval(&model)?;
    let mut max_rel_err: f64 = 0.0;
    let (mut compared, mut skipped) = (0, 0);
    let count = model.params().len();
    for p in 0..count {
        let len = model.params()[p].2.value().len();
        for k in 0..len {
            let orig = model.params()[p].2.value().as_slice().unwrap()[k];
            let set = |m: &mut FaceModel, v: f64| m.params_mut()[p].value_mut().as_slice_mut().unwrap()[k] = v;
            set(&mut model, orig + STEP);
            let (plus, pp, pa) = eval(&model)?;
            set(&mut model, orig - STEP);
            let (minus, mp, ma) = eval(&model)?;
            set(&mut model, orig);
            if pp != base_piece || mp != base_piece || pa != base_act || ma != base_act {
                skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * STEP);
            max_rel_err = max_rel_err.max(relative_error(analytic[p][k], numeric));
            compared += 1;
        }
    }
    Ok(CheckResult {
        name: "network_params".into(),
        max_rel_err,
        compared,
        skipped,
    })
}

/// Runs every check on `instances` fixtures derived from `seed`.
pub fn run(seed: u64, instances: usize) -> Result<GradcheckReport> {
    let mut reports = Vec::with_capacity(instances);
    let mut max_rel_err: f64 = 0.0;
    let mut worst = String::new();
    for i in 0..instances as u64 {
        let inst = Instance::new(seed.wrapping_mul(1000).wrapping_add(i))?;
        let mut checks = check_loss_terms(&inst)?;
        checks.push(check_network(&inst)?);
        for c in &checks {
            if c.max_rel_err > max_rel_err || worst.is_empty() {
                max_rel_err = max_rel_err.max(c.max_rel_err);
                worst = format!("{} (instance {})", c.name, inst.seed);
            }
        }
        reports.push(InstanceReport { seed: inst.seed, checks });
    }
    Ok(GradcheckReport {
        step: STEP,
        tolerance: TOLERANCE,
        instances: reports,
        max_rel_err,
        worst,
    })
}
