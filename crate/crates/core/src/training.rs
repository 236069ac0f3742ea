//! Three-phase training over mixed supervised (synthetic) and unsupervised
//! (raw scan) samples: identity only on neutral scans, expression with the
//! identity decoder frozen, then everything jointly. Each phase runs a
//! synthetic-only stage followed by a mixed stage.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autonet::{row_to_vertices, vertices_to_row, AdamState, FaceModel, Graph, LatentCode, ModelConfig, ParamGroup};
use crate::error::{Error, Result};
use crate::geometry::{PointCloud, Template, TriMesh, Vec3};
use crate::preprocess::augment;
use crate::synthgen::{scan_cloud, SynthSample};
use crate::losses::{total_loss, CounterpartMode, LossContext, LossWeights, RawTarget, SaturationDetector, SupervisedTarget, Supervision};

pub const CONFIG_VERSION: u32 = 1;

/// Inputs may exceed the unit sphere by this much and still count as
/// preprocessed.
pub const UNIT_SPHERE_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseId {
    IdentityOnly,
    ExpressionOnly,
    Joint,
}

impl PhaseId {
    pub const ALL: [PhaseId; 3] = [PhaseId::IdentityOnly, PhaseId::ExpressionOnly, PhaseId::Joint];

    pub fn index(self) -> usize {
        match self {
            PhaseId::IdentityOnly => 0,
            PhaseId::ExpressionOnly => 1,
            PhaseId::Joint => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PhaseId::IdentityOnly => "identity_only",
            PhaseId::ExpressionOnly => "expression_only",
            PhaseId::Joint => "joint",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    SyntheticOnly,
    Mixed,
}

/// Trainable groups, sample filter and decoder path of one phase.
#[derive(Debug, Clone, PartialEq)]
pub struct Phase {
    pub id: PhaseId,
    pub trainable: Vec<ParamGroup>,
    /// Whether the expression decoder contributes to the prediction.
    pub with_expression: bool,
}

impl Phase {
    pub fn new(id: PhaseId) -> Self {
        use ParamGroup::*;
        let (trainable, with_expression) = match id {
            PhaseId::IdentityOnly => (vec![Trunk, IdentityHead, IdentityDecoder], false),
            PhaseId::ExpressionOnly => (vec![Trunk, IdentityHead, ExpressionHead, ExpressionDecoder], true),
            PhaseId::Joint => (vec![Trunk, IdentityHead, ExpressionHead, IdentityDecoder, ExpressionDecoder], true),
        };
        Self {
            id,
            trainable,
            with_expression,
        }
    }

    pub fn accepts(&self, sample: &TrainSample) -> bool {
        match self.id {
            PhaseId::IdentityOnly => !sample.expressive,
            PhaseId::ExpressionOnly => sample.expressive,
            PhaseId::Joint => true,
        }
    }
}

/// Where the learning-rate epoch counter restarts from zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrRestart {
    Stage,
    Phase,
    Run,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub initial: f64,
    pub factor: f64,
    pub every: usize,
    pub restart: LrRestart,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            initial: 1e-4,
            factor: 0.5,
            every: 5,
            restart: LrRestart::Stage,
        }
    }
}

impl LrSchedule {
    /// `initial * factor^floor(epoch / every)`.
    pub fn rate(&self, epoch: usize) -> f64 {
        self.initial * self.factor.powi((epoch / self.every) as i32)
    }
}

/// How a stage decides it is done.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageEnd {
    /// Run the configured epoch budget.
    Fixed,
    /// Stop early once the loss saturates, up to the epoch budget.
    Saturation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaturationConfig {
    pub window: usize,
    pub threshold: f64,
    pub patience: usize,
}

impl Default for SaturationConfig {
    fn default() -> Self {
        Self {
            window: 5,
            threshold: 0.01,
            patience: 3,
        }
    }
}

impl SaturationConfig {
    fn detector(&self) -> SaturationDetector {
        SaturationDetector::new(self.window, self.threshold, self.patience)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub loss: LossWeights,
    #[serde(default)]
    pub lr: LrSchedule,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub synthetic_epochs: usize,
    #[serde(default = "default_epochs")]
    pub mixed_epochs: usize,
    #[serde(default = "default_stage_end")]
    pub stage_end: StageEnd,
    /// Switch unsupervised counterparts from closest vertex to normal ray the
    /// first time the mixed-stage loss saturates.
    #[serde(default = "default_true")]
    pub switch_on_saturation: bool,
    #[serde(default)]
    pub saturation: SaturationConfig,
}

fn default_batch() -> usize {
    1
}

fn default_epochs() -> usize {
    10
}

fn default_stage_end() -> StageEnd {
    StageEnd::Fixed
}

fn default_true() -> bool {
    true
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            lr: LrSchedule::default(),
            batch_size: default_batch(),
            synthetic_epochs: default_epochs(),
            mixed_epochs: default_epochs(),
            stage_end: default_stage_end(),
            switch_on_saturation: true,
            saturation: SaturationConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.model.validate()?;
        self.loss.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr.initial > 0.0 && self.lr.initial.is_finite()) || !(self.lr.factor > 0.0) || self.lr.every == 0 {
            return Err(Error::Config(format!("invalid learning-rate schedule: {:?}", self.lr)));
        }
        if self.saturation.window == 0 || self.saturation.patience == 0 || !(self.saturation.threshold >= 0.0) {
            return Err(Error::Config(format!("invalid saturation settings: {:?}", self.saturation)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub enum Provenance {
    /// Known correspondence: supervised losses.
    Synthetic(SupervisedTarget),
    /// Raw scan: unsupervised losses.
    Real(RawTarget),
}

/// One training item: the encoder input cloud plus its supervision.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub input: Vec<Vec3>,
    pub provenance: Provenance,
    pub expressive: bool,
}

impl TrainSample {
    pub fn synthetic(input: &PointCloud, ground_truth: Vec<Vec3>, expressive: bool, ctx: &LossContext) -> Result<Self> {
        Ok(Self {
            input: input.points().to_vec(),
            provenance: Provenance::Synthetic(SupervisedTarget::new(ground_truth, ctx)?),
            expressive,
        })
    }

    pub fn real(input: &PointCloud, raw: PointCloud, expressive: bool) -> Result<Self> {
        if raw.normals().is_none() {
            return Err(Error::MissingNormals);
        }
        Ok(Self {
            input: input.points().to_vec(),
            provenance: Provenance::Real(RawTarget::new(raw)?),
            expressive,
        })
    }

    pub fn is_synthetic(&self) -> bool {
        matches!(self.provenance, Provenance::Synthetic(_))
    }

    fn supervision(&self) -> Supervision<'_> {
        match &self.provenance {
            Provenance::Synthetic(t) => Supervision::Supervised(t),
            Provenance::Real(raw) => Supervision::Unsupervised {
                raw,
                expressive: self.expressive,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: PhaseId,
    pub stage: Stage,
    /// Epoch within the stage.
    pub epoch: usize,
    /// Epoch counted over the whole run.
    pub global_epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub synthetic: usize,
    pub real: usize,
    pub counterpart_mode: CounterpartMode,
    /// Mean flying-vertex count over the unsupervised samples.
    pub mean_flying: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TrainEvent {
    CounterpartSwitch {
        phase: PhaseId,
        global_epoch: usize,
        from: CounterpartMode,
        to: CounterpartMode,
    },
    StageSkipped {
        phase: PhaseId,
        stage: Stage,
        reason: String,
    },
    StageSaturated {
        phase: PhaseId,
        stage: Stage,
        epoch: usize,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    pub events: Vec<TrainEvent>,
}

impl TrainingLog {
    pub fn phase_epochs(&self, phase: PhaseId, stage: Stage) -> impl Iterator<Item = &EpochRecord> {
        self.epochs.iter().filter(move |r| r.phase == phase && r.stage == stage)
    }

    pub fn switch_count(&self) -> usize {
        self.events
            .iter()
            .filter(|e| matches!(e, TrainEvent::CounterpartSwitch { .. }))
            .count()
    }
}

/// Called after every epoch with the record and the current model; used to
/// write checkpoints.
pub type EpochObserver<'a> = dyn FnMut(&EpochRecord, &FaceModel) -> Result<()> + 'a;

/// State carried across phases within one run.
#[derive(Debug, Clone)]
pub struct RunState {
    pub mode: CounterpartMode,
    pub log: TrainingLog,
    detector: SaturationDetector,
    global_epoch: usize,
    phase_epoch: usize,
}

impl RunState {
    pub fn new(config: &RunConfig) -> Self {
        Self {
            mode: config.loss.counterpart_mode,
            log: TrainingLog::default(),
            detector: config.saturation.detector(),
            global_epoch: 0,
            phase_epoch: 0,
        }
    }
}

fn mix_seed(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(seed ^ 0x5DEE_CE66_D1CE_4E5B, |h, &p| {
        (h ^ p).wrapping_mul(0x1000_0000_01B3).rotate_left(29)
    })
}

/// Interleaves two orderings so each pool is spread evenly over the epoch in
/// proportion to its size.
fn interleave(a: &[usize], b: &[usize]) -> Vec<usize> {
    let total = a.len() + b.len();
    let mut out = Vec::with_capacity(total);
    let (mut i, mut j) = (0, 0);
    for k in 0..total {
        // take from `a` while it is behind its proportional share
        if j >= b.len() || (i < a.len() && i * total < a.len() * (k + 1)) {
            out.push(a[i]);
            i += 1;
        } else {
            out.push(b[j]);
            j += 1;
        }
    }
    out
}

/// Forward, loss and backward for one sample; adds parameter gradients into
/// the model and returns the loss report's total and flying count.
pub fn sample_step(
    model: &mut FaceModel,
    sample: &TrainSample,
    phase: &Phase,
    ctx: &LossContext,
    mode: CounterpartMode,
) -> Result<(f64, usize)> {
    let (grads, total, flying) = {
        let mut g = Graph::new();
        let nodes = model.forward(&mut g, &sample.input, false, phase.with_expression)?;
        let pred = row_to_vertices(g.value(nodes.shape));
        let report = total_loss(&pred, sample.supervision(), ctx, mode)?;
        if !report.total.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        let grads = g.backward_seeded(vec![(nodes.shape, vertices_to_row(&report.grad))])?;
        (grads, report.total, report.flying_count)
    };
    model.accumulate(&grads);
    Ok((total, flying))
}

/// Loss of the model on one sample without touching gradients.
pub fn evaluate_sample(model: &FaceModel, sample: &TrainSample, phase: &Phase, ctx: &LossContext, mode: CounterpartMode) -> Result<f64> {
    let mut g = Graph::new();
    let nodes = model.forward(&mut g, &sample.input, false, phase.with_expression)?;
    let pred = row_to_vertices(g.value(nodes.shape));
    Ok(total_loss(&pred, sample.supervision(), ctx, mode)?.total)
}

#[allow(clippy::too_many_arguments)]
fn run_stage(
    model: &mut FaceModel,
    data: &[TrainSample],
    synthetic: &[usize],
    real: &[usize],
    phase: &Phase,
    stage: Stage,
    config: &RunConfig,
    ctx: &LossContext,
    adam: &mut AdamState,
    state: &mut RunState,
    observer: &mut EpochObserver<'_>,
) -> Result<()> {
    let budget = match stage {
        Stage::SyntheticOnly => config.synthetic_epochs,
        Stage::Mixed => config.mixed_epochs,
    };
    let trainable = model.mask(&phase.trainable);
    let mut stage_detector = config.saturation.detector();
    for epoch in 0..budget {
        let lr_epoch = match config.lr.restart {
            LrRestart::Stage => epoch,
            LrRestart::Phase => state.phase_epoch,
            LrRestart::Run => state.global_epoch,
        };
        let lr = config.lr.rate(lr_epoch);
        let seed = mix_seed(
            config.seed,
            &[phase.id.index() as u64, stage as u64, epoch as u64],
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = synthetic.to_vec();
        s.shuffle(&mut rng);
        let order = match stage {
            Stage::SyntheticOnly => s,
            Stage::Mixed => {
                let mut r = real.to_vec();
                r.shuffle(&mut rng);
                interleave(&s, &r)
            }
        };

        model.zero_grads();
        let mut loss_sum = 0.0;
        let mut flying_sum = 0usize;
        let mut pending = 0;
        for &idx in &order {
            let sample = &data[idx];
            let (loss, flying) = sample_step(model, sample, phase, ctx, state.mode)?;
            loss_sum += loss;
            if !sample.is_synthetic() {
                flying_sum += flying;
            }
            pending += 1;
            if pending == config.batch_size {
                adam.step(model.params_mut(), &trainable, lr, 1.0 / pending as f64)?;
                model.zero_grads();
                pending = 0;
            }
        }
        if pending > 0 {
            adam.step(model.params_mut(), &trainable, lr, 1.0 / pending as f64)?;
            model.zero_grads();
        }

        let n_real = order.iter().filter(|&&i| !data[i].is_synthetic()).count();
        let record = EpochRecord {
            phase: phase.id,
            stage,
            epoch,
            global_epoch: state.global_epoch,
            lr,
            mean_loss: loss_sum / order.len() as f64,
            synthetic: order.len() - n_real,
            real: n_real,
            counterpart_mode: state.mode,
            mean_flying: if n_real > 0 { flying_sum as f64 / n_real as f64 } else { 0.0 },
        };
        observer(&record, model)?;
        state.log.epochs.push(record.clone());
        state.global_epoch += 1;
        state.phase_epoch += 1;

        if stage == Stage::Mixed
            && config.switch_on_saturation
            && state.mode == CounterpartMode::ClosestVertex
            && state.detector.observe(record.mean_loss)
        {
            state.mode = CounterpartMode::NormalRay;
            state.log.events.push(TrainEvent::CounterpartSwitch {
                phase: phase.id,
                global_epoch: record.global_epoch,
                from: CounterpartMode::ClosestVertex,
                to: CounterpartMode::NormalRay,
            });
        }
        if config.stage_end == StageEnd::Saturation && stage_detector.observe(record.mean_loss) {
            state.log.events.push(TrainEvent::StageSaturated {
                phase: phase.id,
                stage,
                epoch,
            });
            break;
        }
    }
    Ok(())
}

/// Trains one phase: synthetic-only stage, then mixed stage.
pub fn run_phase(
    model: &mut FaceModel,
    data: &[TrainSample],
    phase: &Phase,
    config: &RunConfig,
    ctx: &LossContext,
    state: &mut RunState,
    observer: &mut EpochObserver<'_>,
) -> Result<()> {
    let selected: Vec<usize> = (0..data.len()).filter(|&i| phase.accepts(&data[i])).collect();
    if selected.is_empty() {
        return Err(Error::Empty("no training samples match the phase filter"));
    }
    let (synthetic, real): (Vec<usize>, Vec<usize>) = selected.iter().partition(|&&i| data[i].is_synthetic());
    let mut adam = AdamState::for_model(model);
    state.phase_epoch = 0;
    state.detector.reset_history();
    if synthetic.is_empty() {
        state.log.events.push(TrainEvent::StageSkipped {
            phase: phase.id,
            stage: Stage::SyntheticOnly,
            reason: "no synthetic samples".into(),
        });
    } else {
        run_stage(model, data, &synthetic, &[], phase, Stage::SyntheticOnly, config, ctx, &mut adam, state, observer)?;
    }
    run_stage(model, data, &synthetic, &real, phase, Stage::Mixed, config, ctx, &mut adam, state, observer)
}

/// Builds a model initialized at the template and trains all three phases.
pub fn train_full(
    template: &Template,
    data: &[TrainSample],
    config: &RunConfig,
    observer: &mut EpochObserver<'_>,
) -> Result<(FaceModel, TrainingLog)> {
    config.validate()?;
    if config.model.vertex_count != template.vertex_count() {
        return Err(Error::Config(format!(
            "model vertex_count {} does not match the template ({})",
            config.model.vertex_count,
            template.vertex_count()
        )));
    }
    let ctx = LossContext::new(template, config.loss)?;
    let mut model = FaceModel::new(config.model.clone(), Some(template.mesh().vertices()), config.seed)?;
    let mut state = RunState::new(config);
    for id in PhaseId::ALL {
        run_phase(&mut model, data, &Phase::new(id), config, &ctx, &mut state, observer)?;
    }
    Ok((model, state.log))
}

/// How toy samples are split between the supervised and unsupervised pools.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyMix {
    /// Every `real_every`-th subject (by id) is treated as a raw scan;
    /// 0 makes everything synthetic.
    pub real_every: usize,
    /// Standard deviation of the noise added to raw scans.
    pub scan_noise: f64,
    /// Number of input resamplings per neutral sample.
    pub neutral_repeats: usize,
    pub seed: u64,
}

impl Default for ToyMix {
    fn default() -> Self {
        Self {
            real_every: 2,
            scan_noise: 0.0,
            neutral_repeats: 1,
            seed: 0,
        }
    }
}

/// Turns generated samples into training items. Every sample's encoder input
/// is an `n`-point draw from its densified surface; neutral samples get
/// `neutral_repeats` such draws. Raw-scan subjects keep the densified cloud
/// as unsupervised target, synthetic subjects their ground truth.
pub fn toy_training_set(samples: &[SynthSample], ctx: &LossContext, mix: &ToyMix) -> Result<Vec<TrainSample>> {
    if mix.neutral_repeats == 0 {
        return Err(Error::InvalidArgument("neutral_repeats must be at least 1".into()));
    }
    let mut out = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let expressive = !s.neutral;
        let real = mix.real_every > 0 && s.subject % mix.real_every == mix.real_every - 1;
        let seed = mix_seed(mix.seed, &[s.subject as u64, i as u64]);
        let noise = if real { mix.scan_noise } else { 0.0 };
        let dense = scan_cloud(s, ctx.faces(), noise, seed)?;
        let repeats = if expressive { 1 } else { mix.neutral_repeats };
        for input in augment(&dense, s.ground_truth.len(), repeats, seed ^ 1, None)? {
            out.push(if real {
                TrainSample::real(&input, dense.clone(), expressive)?
            } else {
                TrainSample::synthetic(&input, s.ground_truth.clone(), expressive, ctx)?
            });
        }
    }
    Ok(out)
}

/// A scan expressed in template topology.
#[derive(Debug, Clone)]
pub struct Correspondence {
    pub mesh: TriMesh,
    pub code: LatentCode,
    pub identity: Vec<Vec3>,
}

/// Encodes a preprocessed cloud and decodes it onto the template topology.
pub fn infer_correspondence(model: &FaceModel, cloud: &PointCloud, template: &Template) -> Result<Correspondence> {
    if model.vertex_count() != template.vertex_count() {
        return Err(Error::shape(template.vertex_count(), model.vertex_count()));
    }
    if let Some((index, p)) = cloud
        .points()
        .iter()
        .enumerate()
        .find(|(_, p)| p.norm() > 1.0 + UNIT_SPHERE_TOL)
    {
        return Err(Error::NotPreprocessed { index, norm: p.norm() });
    }
    let code = model.encode(cloud.points())?;
    let decoded = model.decode(&code)?;
    Ok(Correspondence {
        mesh: template.mesh().with_vertices(decoded.shape)?,
        code,
        identity: decoded.identity,
    })
}
