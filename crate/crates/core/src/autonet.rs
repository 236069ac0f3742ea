//! A small reverse-mode autodiff tape over dense `f64` matrices, and the
//! point-set encoder / twin decoder network built on it.
//!
//! The tape records only the handful of ops the network needs. Loss terms do
//! not go through the tape: they produce analytic gradients with respect to
//! the decoded vertices, which are fed back in as seeds.

use ndarray::{Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::Vec3;

/// Dense matrix with an optional gradient buffer of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    value: Array2<f64>,
    grad: Option<Array2<f64>>,
}

impl Tensor {
    pub fn new(value: Array2<f64>) -> Self {
        Self { value, grad: None }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(Array2::zeros((rows, cols)))
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value.dim()
    }

    pub fn value(&self) -> &Array2<f64> {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Array2<f64> {
        &mut self.value
    }

    pub fn grad(&self) -> Option<&Array2<f64>> {
        self.grad.as_ref()
    }

    pub fn accumulate_grad(&mut self, g: &Array2<f64>) {
        debug_assert_eq!(g.dim(), self.value.dim());
        match &mut self.grad {
            Some(acc) => *acc += g,
            None => self.grad = Some(g.clone()),
        }
    }

    pub fn take_grad(&mut self) -> Option<Array2<f64>> {
        self.grad.take()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Input { requires_grad: bool },
    Param(usize),
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Relu(NodeId),
    MaxPoolRows { input: NodeId, argmax: Vec<usize> },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Sum(NodeId),
}

#[derive(Debug)]
enum Val<'p> {
    Owned(Array2<f64>),
    Borrowed(&'p Array2<f64>),
}

#[derive(Debug)]
struct Node<'p> {
    op: Op,
    value: Val<'p>,
    needs_grad: bool,
}

/// Gradients produced by one backward pass.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    /// Indexed by the parameter key given to [`Graph::param`].
    pub params: Vec<Option<Array2<f64>>>,
    inputs: Vec<(NodeId, Array2<f64>)>,
}

impl Gradients {
    pub fn input(&self, id: NodeId) -> Option<&Array2<f64>> {
        self.inputs.iter().find(|(n, _)| *n == id).map(|(_, g)| g)
    }

    /// Adds `other` into `self` entry by entry.
    pub fn merge(&mut self, other: Gradients) {
        if self.params.len() < other.params.len() {
            self.params.resize(other.params.len(), None);
        }
        for (mine, theirs) in self.params.iter_mut().zip(other.params) {
            match (mine.as_mut(), theirs) {
                (Some(a), Some(b)) => *a += &b,
                (None, Some(b)) => *mine = Some(b),
                _ => {}
            }
        }
        for (id, g) in other.inputs {
            match self.inputs.iter_mut().find(|(n, _)| *n == id) {
                Some((_, acc)) => *acc += &g,
                None => self.inputs.push((id, g)),
            }
        }
    }
}

/// Fraction of nonzero upstream entries below which matmul backward switches
/// to the sparse path (max-pool gradients touch one row per column).
const SPARSE_BACKWARD: f64 = 0.05;

/// Records a forward pass and runs reverse-mode differentiation over it.
#[derive(Debug, Default)]
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Val<'p>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    pub fn value(&self, id: NodeId) -> ArrayView2<'_, f64> {
        match &self.nodes[id.0].value {
            Val::Owned(a) => a.view(),
            Val::Borrowed(a) => a.view(),
        }
    }

    pub fn input(&mut self, value: Array2<f64>, requires_grad: bool) -> NodeId {
        self.push(Op::Input { requires_grad }, Val::Owned(value), requires_grad)
    }

    /// Registers a parameter under `key`; gradients come back at that index.
    pub fn param(&mut self, tensor: &'p Tensor, key: usize) -> NodeId {
        self.push(Op::Param(key), Val::Borrowed(&tensor.value), true)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.nrows() {
            return Err(Error::shape(format!("{} rows", va.ncols()), format!("{:?}", vb.dim())));
        }
        let out = va.dot(&vb);
        let needs = self.needs(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), Val::Owned(out), needs))
    }

    /// `x + 1 b` with `b` a single row broadcast over the rows of `x`.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (vx, vb) = (self.value(x), self.value(b));
        if vb.nrows() != 1 || vb.ncols() != vx.ncols() {
            return Err(Error::shape(format!("1x{}", vx.ncols()), format!("{:?}", vb.dim())));
        }
        let out = &vx + &vb;
        let needs = self.needs(&[x, b]);
        Ok(self.push(Op::AddBias(x, b), Val::Owned(out), needs))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).mapv(|v| if v > 0.0 { v } else { 0.0 });
        let needs = self.needs(&[x]);
        self.push(Op::Relu(x), Val::Owned(out), needs)
    }

    /// Column-wise max over rows; ties go to the lowest row.
    pub fn max_pool_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        if vx.nrows() == 0 {
            return Err(Error::Empty("max-pool over zero rows"));
        }
        let cols = vx.ncols();
        let mut best = vx.row(0).to_owned();
        let mut argmax = vec![0usize; cols];
        for (r, row) in vx.outer_iter().enumerate().skip(1) {
            for (c, &v) in row.iter().enumerate() {
                if v > best[c] {
                    best[c] = v;
                    argmax[c] = r;
                }
            }
        }
        let out = best.insert_axis(Axis(0));
        let needs = self.needs(&[x]);
        Ok(self.push(Op::MaxPoolRows { input: x, argmax }, Val::Owned(out), needs))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.dim() != vb.dim() {
            return Err(Error::shape(format!("{:?}", va.dim()), format!("{:?}", vb.dim())));
        }
        let out = &va + &vb;
        let needs = self.needs(&[a, b]);
        Ok(self.push(Op::Add(a, b), Val::Owned(out), needs))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.dim() != vb.dim() {
            return Err(Error::shape(format!("{:?}", va.dim()), format!("{:?}", vb.dim())));
        }
        let out = &va - &vb;
        let needs = self.needs(&[a, b]);
        Ok(self.push(Op::Sub(a, b), Val::Owned(out), needs))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let out = Array2::from_elem((1, 1), self.value(x).sum());
        let needs = self.needs(&[x]);
        self.push(Op::Sum(x), Val::Owned(out), needs)
    }

    /// Hash of every ReLU active set and max-pool argmax in the graph. Two
    /// evaluations with equal signatures are on the same smooth piece.
    pub fn activation_signature(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |v: u64| {
            h ^= v;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for &v in self.value(*x).iter() {
                        mix((v > 0.0) as u64);
                    }
                }
                Op::MaxPoolRows { argmax, .. } => argmax.iter().for_each(|&a| mix(a as u64 + 2)),
                _ => {}
            }
        }
        h
    }

    /// Backward from a scalar (1x1) node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let node = self.nodes.get(loss.0).ok_or(Error::NoForward)?;
        let dim = match &node.value {
            Val::Owned(a) => a.dim(),
            Val::Borrowed(a) => a.dim(),
        };
        if dim != (1, 1) {
            return Err(Error::shape("1x1 loss", format!("{dim:?}")));
        }
        self.backward_seeded(vec![(loss, Array2::ones((1, 1)))])
    }

    /// Backward from arbitrary nodes with given upstream gradients. Seeds on
    /// the same node add up.
    pub fn backward_seeded(&self, seeds: Vec<(NodeId, Array2<f64>)>) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::NoForward);
        }
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut start = 0;
        for (id, g) in seeds {
            if id.0 >= self.nodes.len() {
                return Err(Error::NoForward);
            }
            if g.dim() != self.value(id).dim() {
                return Err(Error::shape(format!("{:?}", self.value(id).dim()), format!("{:?}", g.dim())));
            }
            accumulate(&mut grads[id.0], g);
            start = start.max(id.0);
        }

        let mut out = Gradients::default();
        for idx in (0..=start).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Input { requires_grad } => {
                    if *requires_grad {
                        out.inputs.push((NodeId(idx), g));
                    }
                }
                Op::Param(key) => {
                    if out.params.len() <= *key {
                        out.params.resize(key + 1, None);
                    }
                    accumulate(&mut out.params[*key], g);
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let want_a = self.nodes[a.0].needs_grad;
                    let want_b = self.nodes[b.0].needs_grad;
                    let nnz = g.iter().filter(|&&v| v != 0.0).count();
                    if (nnz as f64) < SPARSE_BACKWARD * g.len() as f64 {
                        let mut ga = want_a.then(|| Array2::zeros(va.dim()));
                        let mut gb = want_b.then(|| Array2::zeros(vb.dim()));
                        for ((r, c), &v) in g.indexed_iter() {
                            if v == 0.0 {
                                continue;
                            }
                            if let Some(ga) = ga.as_mut() {
                                ga.row_mut(r).scaled_add(v, &vb.column(c));
                            }
                            if let Some(gb) = gb.as_mut() {
                                gb.column_mut(c).scaled_add(v, &va.row(r));
                            }
                        }
                        if let Some(ga) = ga {
                            accumulate(&mut grads[a.0], ga);
                        }
                        if let Some(gb) = gb {
                            accumulate(&mut grads[b.0], gb);
                        }
                    } else {
                        if want_a {
                            accumulate(&mut grads[a.0], g.dot(&vb.t()));
                        }
                        if want_b {
                            accumulate(&mut grads[b.0], va.t().dot(&g));
                        }
                    }
                }
                Op::AddBias(x, b) => {
                    if self.nodes[b.0].needs_grad {
                        accumulate(&mut grads[b.0], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.nodes[x.0].needs_grad {
                        accumulate(&mut grads[x.0], g);
                    }
                }
                Op::Relu(x) => {
                    let mut g = g;
                    g.zip_mut_with(&self.value(*x), |gi, &xi| {
                        if xi <= 0.0 {
                            *gi = 0.0;
                        }
                    });
                    accumulate(&mut grads[x.0], g);
                }
                Op::MaxPoolRows { input, argmax } => {
                    let mut gi = Array2::zeros(self.value(*input).dim());
                    for (c, &r) in argmax.iter().enumerate() {
                        gi[(r, c)] = g[(0, c)];
                    }
                    accumulate(&mut grads[input.0], gi);
                }
                Op::Add(a, b) => {
                    if self.nodes[a.0].needs_grad {
                        accumulate(&mut grads[a.0], g.clone());
                    }
                    if self.nodes[b.0].needs_grad {
                        accumulate(&mut grads[b.0], g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.nodes[a.0].needs_grad {
                        accumulate(&mut grads[a.0], g.clone());
                    }
                    if self.nodes[b.0].needs_grad {
                        accumulate(&mut grads[b.0], -g);
                    }
                }
                Op::Sum(x) => {
                    let gx = Array2::from_elem(self.value(*x).dim(), g[(0, 0)]);
                    accumulate(&mut grads[x.0], gx);
                }
            }
        }
        out.inputs.sort_by_key(|(id, _)| *id);
        Ok(out)
    }
}

fn accumulate(slot: &mut Option<Array2<f64>>, g: Array2<f64>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

/// Affine layer `x W + b`, `W` stored as `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Uniform init with bound `gain * sqrt(6 / fan_in)`, zero bias.
    pub fn init(fan_in: usize, fan_out: usize, gain: f64, rng: &mut ChaCha8Rng) -> Self {
        let bound = gain * (6.0 / fan_in as f64).sqrt();
        let w = Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-bound..bound));
        Self {
            weight: Tensor::new(w),
            bias: Tensor::zeros(1, fan_out),
        }
    }

    fn record<'p>(&'p self, g: &mut Graph<'p>, x: NodeId, key: usize) -> Result<NodeId> {
        let w = g.param(&self.weight, key);
        let b = g.param(&self.bias, key + 1);
        let xw = g.matmul(x, w)?;
        g.add_bias(xw, b)
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape().0
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape().1
    }
}

/// Which part of the network a parameter belongs to; phases mask by group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Trunk,
    IdentityHead,
    ExpressionHead,
    IdentityDecoder,
    ExpressionDecoder,
}

/// Shared per-point MLP, max-pool, then two affine latent heads.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderNet {
    pub trunk: Vec<Linear>,
    pub id_head: Linear,
    pub exp_head: Linear,
}

/// `l -> hidden (ReLU) -> 3n`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderNet {
    pub hidden: Linear,
    pub output: Linear,
}

impl DecoderNet {
    fn record<'p>(&'p self, g: &mut Graph<'p>, code: NodeId, key: usize) -> Result<NodeId> {
        let h = self.hidden.record(g, code, key)?;
        let h = g.relu(h);
        self.output.record(g, h, key + 2)
    }

    pub fn latent_dim(&self) -> usize {
        self.hidden.in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.output.out_dim()
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vertex_count: usize,
    pub latent_id: usize,
    pub latent_exp: usize,
    pub encoder_widths: Vec<usize>,
    pub decoder_hidden: usize,
    /// Decode expressions as `D_exp(f) - D_exp(0)` so a zero code is neutral.
    #[serde(default)]
    pub anchor_zero_expression: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vertex_count: 642,
            latent_id: 64,
            latent_exp: 64,
            encoder_widths: vec![64, 64, 128, 1024],
            decoder_hidden: 1024,
            anchor_zero_expression: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vertex_count == 0
            || self.latent_id == 0
            || self.latent_exp == 0
            || self.decoder_hidden == 0
            || self.encoder_widths.is_empty()
            || self.encoder_widths.contains(&0)
        {
            return Err(Error::Config(format!("all model dimensions must be positive: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    pub id: Vec<f64>,
    pub exp: Vec<f64>,
}

/// Decoder outputs: identity shape, expression offset and their sum.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub identity: Vec<Vec3>,
    pub expression: Vec<Vec3>,
    pub shape: Vec<Vec3>,
}

/// Graph handles produced by [`FaceModel::forward`].
#[derive(Debug, Clone, Copy)]
pub struct ForwardNodes {
    pub input: NodeId,
    pub pooled: NodeId,
    pub f_id: NodeId,
    pub f_exp: NodeId,
    pub s_id: NodeId,
    pub ds_exp: Option<NodeId>,
    pub shape: NodeId,
}

/// Encoder plus identity and expression decoders.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceModel {
    pub config: ModelConfig,
    pub encoder: EncoderNet,
    pub id_decoder: DecoderNet,
    pub exp_decoder: DecoderNet,
}

/// Scale applied to the init bound of the final decoder layers so that a
/// fresh model starts close to its output bias.
const OUTPUT_INIT_GAIN: f64 = 0.05;

pub fn points_to_matrix(points: &[Vec3]) -> Array2<f64> {
    Array2::from_shape_fn((points.len(), 3), |(i, a)| points[i][a])
}

pub fn row_to_vertices(row: ArrayView2<'_, f64>) -> Vec<Vec3> {
    row.as_slice()
        .map(|s| s.to_vec())
        .unwrap_or_else(|| row.iter().copied().collect())
        .chunks_exact(3)
        .map(|c| Vec3::new(c[0], c[1], c[2]))
        .collect()
}

pub fn vertices_to_row(v: &[Vec3]) -> Array2<f64> {
    Array2::from_shape_fn((1, 3 * v.len()), |(_, j)| v[j / 3][j % 3])
}

impl FaceModel {
    /// Seeded initialization. When `template` is given the identity decoder's
    /// output bias starts at the template, so decoding begins near the mean
    /// shape.
    pub fn new(config: ModelConfig, template: Option<&[Vec3]>, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut trunk = Vec::new();
        let mut prev = 3;
        for &w in &config.encoder_widths {
            trunk.push(Linear::init(prev, w, 1.0, &mut rng));
            prev = w;
        }
        let head_gain = (0.5f64).sqrt();
        let id_head = Linear::init(prev, config.latent_id, head_gain, &mut rng);
        let exp_head = Linear::init(prev, config.latent_exp, head_gain, &mut rng);
        let out = 3 * config.vertex_count;
        let decoder = |l: usize, rng: &mut ChaCha8Rng| DecoderNet {
            hidden: Linear::init(l, config.decoder_hidden, 1.0, rng),
            output: Linear::init(config.decoder_hidden, out, OUTPUT_INIT_GAIN, rng),
        };
        let mut id_decoder = decoder(config.latent_id, &mut rng);
        let exp_decoder = decoder(config.latent_exp, &mut rng);
        if let Some(t) = template {
            if t.len() != config.vertex_count {
                return Err(Error::shape(config.vertex_count, t.len()));
            }
            id_decoder.output.bias = Tensor::new(vertices_to_row(t));
        }
        Ok(Self {
            config,
            encoder: EncoderNet { trunk, id_head, exp_head },
            id_decoder,
            exp_decoder,
        })
    }

    pub fn vertex_count(&self) -> usize {
        self.config.vertex_count
    }

    /// Every parameter with its stable name and group, in checkpoint order.
    pub fn params(&self) -> Vec<(String, ParamGroup, &Tensor)> {
        fn push<'a>(out: &mut Vec<(String, ParamGroup, &'a Tensor)>, prefix: &str, group: ParamGroup, l: &'a Linear) {
            out.push((format!("{prefix}.weight"), group, &l.weight));
            out.push((format!("{prefix}.bias"), group, &l.bias));
        }
        let mut out = Vec::new();
        for (i, l) in self.encoder.trunk.iter().enumerate() {
            push(&mut out, &format!("encoder.trunk.{i}"), ParamGroup::Trunk, l);
        }
        push(&mut out, "encoder.id_head", ParamGroup::IdentityHead, &self.encoder.id_head);
        push(&mut out, "encoder.exp_head", ParamGroup::ExpressionHead, &self.encoder.exp_head);
        push(&mut out, "id_decoder.hidden", ParamGroup::IdentityDecoder, &self.id_decoder.hidden);
        push(&mut out, "id_decoder.output", ParamGroup::IdentityDecoder, &self.id_decoder.output);
        push(&mut out, "exp_decoder.hidden", ParamGroup::ExpressionDecoder, &self.exp_decoder.hidden);
        push(&mut out, "exp_decoder.output", ParamGroup::ExpressionDecoder, &self.exp_decoder.output);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for l in &mut self.encoder.trunk {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        for l in [
            &mut self.encoder.id_head,
            &mut self.encoder.exp_head,
            &mut self.id_decoder.hidden,
            &mut self.id_decoder.output,
            &mut self.exp_decoder.hidden,
            &mut self.exp_decoder.output,
        ] {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, _, t)| t.value().len()).sum()
    }

    fn keys(&self) -> (usize, usize, usize, usize, usize) {
        let trunk = 2 * self.encoder.trunk.len();
        (0, trunk, trunk + 2, trunk + 4, trunk + 8)
    }

    /// Records the full forward pass. With `with_expression == false` the
    /// output is the identity shape alone.
    pub fn forward<'p>(
        &'p self,
        g: &mut Graph<'p>,
        points: &[Vec3],
        input_requires_grad: bool,
        with_expression: bool,
    ) -> Result<ForwardNodes> {
        if points.is_empty() {
            return Err(Error::Empty("cannot encode an empty cloud"));
        }
        if points.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::NonFinite("encoder input"));
        }
        let (trunk_key, id_head_key, exp_head_key, id_dec_key, exp_dec_key) = self.keys();
        let input = g.input(points_to_matrix(points), input_requires_grad);
        let mut h = input;
        for (i, layer) in self.encoder.trunk.iter().enumerate() {
            let z = layer.record(g, h, trunk_key + 2 * i)?;
            h = g.relu(z);
        }
        let pooled = g.max_pool_rows(h)?;
        let f_id = self.encoder.id_head.record(g, pooled, id_head_key)?;
        let f_exp = self.encoder.exp_head.record(g, pooled, exp_head_key)?;
        let s_id = self.id_decoder.record(g, f_id, id_dec_key)?;
        let (ds_exp, shape) = if with_expression {
            let mut ds = self.exp_decoder.record(g, f_exp, exp_dec_key)?;
            if self.config.anchor_zero_expression {
                let zero = g.input(Array2::zeros((1, self.config.latent_exp)), false);
                let base = self.exp_decoder.record(g, zero, exp_dec_key)?;
                ds = g.sub(ds, base)?;
            }
            (Some(ds), g.add(s_id, ds)?)
        } else {
            (None, s_id)
        };
        Ok(ForwardNodes {
            input,
            pooled,
            f_id,
            f_exp,
            s_id,
            ds_exp,
            shape,
        })
    }

    pub fn encode(&self, points: &[Vec3]) -> Result<LatentCode> {
        let mut g = Graph::new();
        let nodes = self.forward(&mut g, points, false, false)?;
        Ok(LatentCode {
            id: g.value(nodes.f_id).iter().copied().collect(),
            exp: g.value(nodes.f_exp).iter().copied().collect(),
        })
    }

    pub fn decode(&self, code: &LatentCode) -> Result<Decoded> {
        if code.id.len() != self.config.latent_id {
            return Err(Error::shape(format!("{}-dim identity code", self.config.latent_id), code.id.len()));
        }
        if code.exp.len() != self.config.latent_exp {
            return Err(Error::shape(format!("{}-dim expression code", self.config.latent_exp), code.exp.len()));
        }
        if code.id.iter().chain(&code.exp).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("latent code"));
        }
        let (_, _, _, id_dec_key, exp_dec_key) = self.keys();
        let mut g = Graph::new();
        let fi = g.input(Array2::from_shape_vec((1, code.id.len()), code.id.clone()).unwrap(), false);
        let fe = g.input(Array2::from_shape_vec((1, code.exp.len()), code.exp.clone()).unwrap(), false);
        let s_id = self.id_decoder.record(&mut g, fi, id_dec_key)?;
        let mut ds = self.exp_decoder.record(&mut g, fe, exp_dec_key)?;
        if self.config.anchor_zero_expression {
            let zero = g.input(Array2::zeros((1, self.config.latent_exp)), false);
            let base = self.exp_decoder.record(&mut g, zero, exp_dec_key)?;
            ds = g.sub(ds, base)?;
        }
        let shape = g.add(s_id, ds)?;
        Ok(Decoded {
            identity: row_to_vertices(g.value(s_id)),
            expression: row_to_vertices(g.value(ds)),
            shape: row_to_vertices(g.value(shape)),
        })
    }

    /// Adds parameter gradients from a backward pass into the tensors.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (t, g) in self.params_mut().into_iter().zip(&grads.params) {
            if let Some(g) = g {
                t.accumulate_grad(g);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.params_mut().into_iter().for_each(Tensor::zero_grad);
    }

    /// Per-parameter trainable flags for the given groups.
    pub fn mask(&self, groups: &[ParamGroup]) -> Vec<bool> {
        self.params().iter().map(|(_, g, _)| groups.contains(g)).collect()
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Bias-corrected Adam moments for an ordered parameter list.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(shapes: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let (m, v): (Vec<_>, Vec<_>) = shapes
            .into_iter()
            .map(|s| (Array2::zeros(s), Array2::zeros(s)))
            .unzip();
        Self {
            m,
            v,
            step: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
        }
    }

    pub fn for_model(model: &FaceModel) -> Self {
        Self::new(model.params().iter().map(|(_, _, t)| t.shape()))
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update of every parameter whose `trainable` flag is set, using and
    /// clearing its accumulated gradient scaled by `grad_scale`. Frozen
    /// parameters are left bit-identical and their gradients dropped.
    pub fn step(&mut self, params: Vec<&mut Tensor>, trainable: &[bool], lr: f64, grad_scale: f64) -> Result<()> {
        if params.len() != self.m.len() || trainable.len() != params.len() {
            return Err(Error::shape(self.m.len(), params.len()));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, p) in params.into_iter().enumerate() {
            let grad = p.take_grad();
            if !trainable[i] {
                continue;
            }
            let Some(grad) = grad else { continue };
            if grad.dim() != self.m[i].dim() {
                return Err(Error::shape(format!("{:?}", self.m[i].dim()), format!("{:?}", grad.dim())));
            }
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            ndarray::Zip::from(&mut p.value)
                .and(&mut self.m[i])
                .and(&mut self.v[i])
                .and(&grad)
                .for_each(|w, m, v, &g| {
                    let g = g * grad_scale;
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *w -= lr * m_hat / (v_hat.sqrt() + eps);
                });
        }
        Ok(())
    }
}

/// Vertex `vertex` of a flat `1 x 3n` row.
pub fn decoded_slice(row: &Array2<f64>, vertex: usize) -> Vec3 {
    let b = 3 * vertex;
    Vec3::new(row[[0, b]], row[[0, b + 1]], row[[0, b + 2]])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            vertex_count: 5,
            latent_id: 3,
            latent_exp: 2,
            encoder_widths: vec![6, 8],
            decoder_hidden: 7,
            anchor_zero_expression: false,
        }
    }

    fn cloud(seed: u64, n: usize) -> Vec<Vec3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect()
    }

    #[test]
    fn sum_of_parameters_has_unit_gradient() {
        let t = Tensor::new(Array2::from_shape_fn((2, 3), |(i, j)| (i * 3 + j) as f64));
        let mut g = Graph::new();
        let p = g.param(&t, 0);
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.params[0].as_ref().unwrap(), &Array2::<f64>::ones((2, 3)));
    }

    #[test]
    fn backward_without_forward() {
        let g = Graph::new();
        assert!(matches!(g.backward(NodeId(0)), Err(Error::NoForward)));
    }

    #[test]
    fn max_pool_routes_to_lowest_argmax() {
        let x = Array2::from_shape_vec((3, 2), vec![1.0, 5.0, 3.0, 5.0, 3.0, 2.0]).unwrap();
        let mut g = Graph::new();
        let xi = g.input(x, true);
        let m = g.max_pool_rows(xi).unwrap();
        let s = g.sum(m);
        let grads = g.backward(s).unwrap();
        let gx = grads.input(xi).unwrap();
        assert_eq!(gx, &Array2::from_shape_vec((3, 2), vec![0.0, 1.0, 1.0, 0.0, 0.0, 0.0]).unwrap());
    }

    #[test]
    fn sparse_and_dense_matmul_backward_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Array2::from_shape_fn((40, 6), |_| rng.random_range(-1.0..1.0));
        let w = Tensor::new(Array2::from_shape_fn((6, 30), |_| rng.random_range(-1.0..1.0)));
        let mut g = Graph::new();
        let ai = g.input(a.clone(), true);
        let wi = g.param(&w, 0);
        let y = g.matmul(ai, wi).unwrap();
        let pooled = g.max_pool_rows(y).unwrap();
        let s = g.sum(pooled);
        let sparse = g.backward(s).unwrap();

        // Dense reference: route the max-pool gradient by hand.
        let yv = a.dot(w.value());
        let mut gy = Array2::<f64>::zeros(yv.dim());
        for c in 0..yv.ncols() {
            let mut best = 0;
            for r in 1..yv.nrows() {
                if yv[(r, c)] > yv[(best, c)] {
                    best = r;
                }
            }
            gy[(best, c)] = 1.0;
        }
        let gw = a.t().dot(&gy);
        let ga = gy.dot(&w.value().t());
        let dw = sparse.params[0].as_ref().unwrap();
        assert!((dw - &gw).iter().all(|d| d.abs() < 1e-12));
        assert!((sparse.input(ai).unwrap() - &ga).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn encode_is_permutation_invariant_and_ignores_duplicates() {
        let m = FaceModel::new(tiny_config(), None, 4).unwrap();
        let pts = cloud(1, 30);
        let base = m.encode(&pts).unwrap();
        let mut rev = pts.clone();
        rev.reverse();
        assert_eq!(m.encode(&rev).unwrap(), base);
        let mut dup = pts.clone();
        dup.push(pts[7]);
        assert_eq!(m.encode(&dup).unwrap(), base);
    }

    #[test]
    fn encode_rejects_nan() {
        let m = FaceModel::new(tiny_config(), None, 4).unwrap();
        let mut pts = cloud(1, 4);
        pts[2].y = f64::NAN;
        assert!(matches!(m.encode(&pts), Err(Error::NonFinite(_))));
    }

    #[test]
    fn decode_composition_and_dims() {
        let m = FaceModel::new(tiny_config(), None, 4).unwrap();
        let code = LatentCode {
            id: vec![0.3, -0.2, 1.0],
            exp: vec![0.5, 0.1],
        };
        let d = m.decode(&code).unwrap();
        assert_eq!(d.shape.len(), 5);
        for i in 0..5 {
            assert_eq!(d.shape[i], d.identity[i] + d.expression[i]);
        }
        let bad = LatentCode {
            id: vec![0.0; 2],
            exp: vec![0.0; 2],
        };
        assert!(m.decode(&bad).is_err());
    }

    #[test]
    fn decoder_is_nonlinear_across_relu_boundary() {
        let mut m = FaceModel::new(tiny_config(), None, 4).unwrap();
        // hidden unit 0 pre-activation = f[0] - 1: inactive at f = 1, active at 2f = 2
        let hid = &mut m.id_decoder.hidden;
        hid.weight.value_mut().fill(0.0);
        hid.bias.value_mut().fill(0.0);
        hid.weight.value_mut()[(0, 0)] = 1.0;
        hid.bias.value_mut()[(0, 0)] = -1.0;
        let code = |s: f64| LatentCode {
            id: vec![s, 0.0, 0.0],
            exp: vec![0.0, 0.0],
        };
        let at = |s: f64| m.decode(&code(s)).unwrap().identity;
        let (d0, d1, d2) = (at(0.0), at(1.0), at(2.0));
        let lin: f64 = (0..5).map(|i| ((d2[i] - d0[i]) - (d1[i] - d0[i]) * 2.0).norm()).sum();
        assert!(lin > 1e-6, "decoder behaved linearly across the ReLU boundary");
    }

    #[test]
    fn template_bias_init() {
        let t: Vec<Vec3> = (0..5).map(|i| Vec3::new(i as f64, 0.0, 1.0)).collect();
        let m = FaceModel::new(tiny_config(), Some(&t), 4).unwrap();
        assert_eq!(decoded_slice(m.id_decoder.output.bias.value(), 3), t[3]);
    }

    #[test]
    fn adam_hand_step() {
        let mut x = Tensor::new(Array2::from_elem((1, 1), 1.0));
        let mut adam = AdamState::new([(1, 1)]);
        x.accumulate_grad(&Array2::from_elem((1, 1), 2.0));
        adam.step(vec![&mut x], &[true], 0.1, 1.0).unwrap();
        // m_hat = 2, v_hat = 4, update = 0.1 * 2 / (2 + 1e-8)
        let expected = 1.0 - 0.1 * 2.0 / (2.0 + 1e-8);
        assert!((x.value()[(0, 0)] - expected).abs() < 1e-15);
        assert!((x.value()[(0, 0)] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn adam_zero_gradient_and_mask() {
        let mut a = Tensor::new(Array2::from_elem((1, 2), 1.0));
        let mut b = Tensor::new(Array2::from_elem((1, 2), 1.0));
        let mut adam = AdamState::new([(1, 2), (1, 2)]);
        a.accumulate_grad(&Array2::zeros((1, 2)));
        b.accumulate_grad(&Array2::from_elem((1, 2), 3.0));
        adam.step(vec![&mut a, &mut b], &[true, false], 0.1, 1.0).unwrap();
        assert_eq!(a.value(), &Array2::from_elem((1, 2), 1.0));
        assert_eq!(b.value(), &Array2::from_elem((1, 2), 1.0));
        assert!(b.grad().is_none());
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut m = FaceModel::new(tiny_config(), None, 9).unwrap();
            let mut adam = AdamState::for_model(&m);
            let mask = vec![true; m.params().len()];
            for step in 0..3 {
                let grads = {
                    let mut g = Graph::new();
                    let nodes = m.forward(&mut g, &cloud(step, 12), false, true).unwrap();
                    let s = g.sum(nodes.shape);
                    g.backward(s).unwrap()
                };
                m.accumulate(&grads);
                adam.step(m.params_mut(), &mask, 1e-2, 1.0).unwrap();
            }
            m
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn anchored_expression_is_zero_at_zero_code() {
        let cfg = ModelConfig {
            anchor_zero_expression: true,
            ..tiny_config()
        };
        let m = FaceModel::new(cfg, None, 1).unwrap();
        let d = m
            .decode(&LatentCode {
                id: vec![0.1, 0.2, 0.3],
                exp: vec![0.0, 0.0],
            })
            .unwrap();
        assert!(d.expression.iter().all(|v| *v == Vec3::zeros()));
    }
}
