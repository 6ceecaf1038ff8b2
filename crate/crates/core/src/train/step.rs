use crate::error::{Error, Result};
use crate::objectives::{
    dino_loss, dino_pairs, gram_loss, ibot_loss, koleo_loss, masked_positions, sinkhorn_knopp, LossReport, LossWeights,
};
use crate::scalar::Scalar;
use crate::diagnostics::highres_smooth_map;
use crate::tensor::{Graph, Tensor, Var};
use crate::vit::{forward_graph, CropKind, ForwardOptions, ViTState};

use super::batch::CropBatch;
use super::model::{Model, ModelOptimizer, ModelVars};
use super::schedule::{schedule, ScheduleConfig, ScheduleValues};

/// Loss hyper-parameters shared by every phase.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveConfig {
    pub weights: LossWeights,
    pub student_temp: f64,
    pub sinkhorn_iters: usize,
    pub koleo_group: usize,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig { weights: LossWeights::pretrain(), student_temp: 0.1, sinkhorn_iters: 3, koleo_group: 16 }
    }
}

/// Teacher-side targets of one batch; never differentiated.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets<S: Scalar> {
    /// `[n_images * n_global, K]` assignment of every teacher global crop.
    pub dino: Tensor<S>,
    /// One row per masked student patch, crop-major.
    pub ibot: Option<Tensor<S>>,
    /// Row-normalized Gram-teacher patch features on the student grid.
    pub gram: Option<Tensor<S>>,
}

fn cast_all<S: Scalar>(xs: &[Tensor<f32>]) -> Vec<Tensor<S>> {
    xs.iter().map(Tensor::cast).collect()
}

/// Teacher inference: CLS and masked-position patch targets after Sinkhorn.
pub fn teacher_targets<S: Scalar>(teacher: &Model<S>, batch: &CropBatch, teacher_temp: f64, sinkhorn_iters: usize) -> Result<Targets<S>> {
    let mut g = Graph::new();
    let vars = teacher.bind(&mut g, false);
    let globals = cast_all::<S>(&batch.globals);
    let opts = ForwardOptions { crop_kind: Some(CropKind::Global), ..Default::default() };
    let out = forward_graph(&mut g, &teacher.backbone, &vars.backbone, &globals, &opts)?;
    let cls_logits = teacher.dino_head.forward(&mut g, &vars.dino_head, out.cls)?;
    let dino = sinkhorn_knopp(g.value(cls_logits), sinkhorn_iters, teacher_temp)?;
    let (_, positions) = masked_positions(&batch.masks);
    let ibot = if positions.is_empty() {
        None
    } else {
        let rows = g.gather_rows(out.patches, &positions)?;
        let logits = teacher.ibot_head.forward(&mut g, &vars.ibot_head, rows)?;
        Some(sinkhorn_knopp(g.value(logits), sinkhorn_iters, teacher_temp)?)
    };
    Ok(Targets { dino, ibot, gram: None })
}

/// Gram-teacher patch features of the batch's high-resolution global crops,
/// bicubic-resized to the student patch grid and row-normalized.
pub fn gram_targets<S: Scalar>(gram_teacher: &ViTState<S>, batch: &CropBatch) -> Result<Tensor<S>> {
    let crops = batch
        .gram_globals
        .as_ref()
        .ok_or_else(|| Error::Config("batch has no high-resolution crops for the Gram teacher".into()))?;
    let mut g = Graph::new();
    let vars = gram_teacher.params.bind(&mut g, false);
    let opts = ForwardOptions { crop_kind: Some(CropKind::Global), ..Default::default() };
    let out = forward_graph(&mut g, gram_teacher, &vars, &cast_all::<S>(crops), &opts)?;
    let ps = gram_teacher.config.patch_size;
    let (gh, gw) = (batch.global_size / ps, batch.global_size / ps);
    let d = gram_teacher.config.embed_dim;
    let (th, tw) = out.grid;
    let all = g.value(out.patches).data();
    let mut rows = Vec::with_capacity(crops.len() * gh * gw * d);
    for c in 0..crops.len() {
        let block = &all[c * th * tw * d..(c + 1) * th * tw * d];
        let map = Tensor::new(vec![th, tw, d], block.to_vec())?;
        let small = highres_smooth_map(&map, gh, gw)?;
        rows.extend_from_slice(small.data());
    }
    Tensor::new(vec![crops.len() * gh * gw, d], rows)
}

/// Graph handles of the individual loss terms.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub dino: Var,
    pub ibot: Var,
    pub koleo: Var,
    pub gram: Option<Var>,
    pub total: Var,
}

/// Student forward and the weighted objective against fixed `targets`.
pub fn student_objective<S: Scalar>(
    g: &mut Graph<S>,
    student: &Model<S>,
    vars: &ModelVars,
    batch: &CropBatch,
    targets: &Targets<S>,
    cfg: &ObjectiveConfig,
) -> Result<LossTerms> {
    let n = batch.n_images();
    let (ng, nl) = (batch.n_global, batch.n_local);
    let bb = &student.backbone;
    let globals = cast_all::<S>(&batch.globals);
    let gopts = ForwardOptions {
        crop_kind: Some(CropKind::Global),
        masks: Some(&batch.masks),
        jitter_scale: Some(batch.jitter.0),
        drop_path: batch.drop_global.as_deref(),
        taps: false,
    };
    let gout = forward_graph(g, bb, &vars.backbone, &globals, &gopts)?;
    let mut cls_parts = vec![gout.cls];
    if nl > 0 {
        let locals = cast_all::<S>(&batch.locals);
        let lopts = ForwardOptions {
            crop_kind: Some(CropKind::Local),
            masks: None,
            jitter_scale: Some(batch.jitter.1),
            drop_path: batch.drop_local.as_deref(),
            taps: false,
        };
        let lout = forward_graph(g, bb, &vars.backbone, &locals, &lopts)?;
        cls_parts.push(lout.cls);
    }

    // DINO: reorder CLS rows image-major, globals before locals
    let all_cls = g.concat(&cls_parts, 0)?;
    let mut order = Vec::with_capacity(n * (ng + nl));
    for i in 0..n {
        order.extend((0..ng).map(|c| i * ng + c));
        order.extend((0..nl).map(|c| n * ng + i * nl + c));
    }
    let ordered = g.gather_rows(all_cls, &order)?;
    let logits = student.dino_head.forward(g, &vars.dino_head, ordered)?;
    let dino = dino_loss(g, logits, &targets.dino, &dino_pairs(n, ng, nl), cfg.student_temp)?;

    // iBOT on masked global patches
    let (flat, positions) = masked_positions(&batch.masks);
    let ibot_logits = if positions.is_empty() {
        None
    } else {
        let rows = g.gather_rows(gout.patches, &positions)?;
        Some(student.ibot_head.forward(g, &vars.ibot_head, rows)?)
    };
    let ibot = ibot_loss(g, ibot_logits, targets.ibot.as_ref(), &flat, &positions, cfg.student_temp)?.loss;

    // Koleo on the first global crop's CLS
    let first: Vec<usize> = (0..n).map(|i| i * ng).collect();
    let first_cls = g.gather_rows(gout.cls, &first)?;
    let koleo = koleo_loss(g, first_cls, cfg.koleo_group)?;

    let w = cfg.weights;
    let mut total = g.scale(dino, S::c(w.dino));
    let t = g.scale(ibot, S::c(w.ibot));
    total = g.add(total, t)?;
    let t = g.scale(koleo, S::c(w.koleo));
    total = g.add(total, t)?;
    let mut gram = None;
    if w.gram > 0.0 {
        let xg = targets.gram.as_ref().ok_or_else(|| Error::Config("Gram weight set without Gram targets".into()))?;
        let xs = g.l2_normalize(gout.patches, S::c(1e-12))?;
        let gl = gram_loss(g, xs, xg, n * ng)?;
        let t = g.scale(gl, S::c(w.gram));
        total = g.add(total, t)?;
        gram = Some(gl);
    }
    Ok(LossTerms { dino, ibot, koleo, gram, total })
}

/// Frozen earlier checkpoint anchoring the patch Gram matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct GramTeacherPolicy {
    pub source_checkpoint_step: u64,
    pub refresh_interval: u64,
    pub max_refreshes: u32,
    pub highres_factor: usize,
    pub enabled: bool,
}

impl Default for GramTeacherPolicy {
    fn default() -> Self {
        GramTeacherPolicy { source_checkpoint_step: 2000, refresh_interval: 100, max_refreshes: 3, highres_factor: 2, enabled: true }
    }
}

impl GramTeacherPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.highres_factor < 1 {
            return Err(Error::Config("highres_factor must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GramTeacher<S: Scalar = f32> {
    pub state: ViTState<S>,
    pub policy: GramTeacherPolicy,
    pub refreshes: u32,
}

impl<S: Scalar> GramTeacher<S> {
    /// Replace the Gram teacher with the EMA teacher when `steps_into_phase`
    /// hits a refresh boundary, at most `max_refreshes` times.
    pub fn maybe_refresh(&mut self, teacher: &ViTState<S>, steps_into_phase: u64) -> bool {
        let p = &self.policy;
        if !p.enabled || p.refresh_interval == 0 || steps_into_phase == 0 || steps_into_phase % p.refresh_interval != 0 {
            return false;
        }
        if self.refreshes >= p.max_refreshes {
            return false;
        }
        self.state = teacher.clone();
        self.refreshes += 1;
        true
    }
}

/// Student, EMA teacher, optimizer and optional Gram teacher.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<S: Scalar = f32> {
    pub student: Model<S>,
    pub teacher: Model<S>,
    pub optimizer: ModelOptimizer<S>,
    pub gram: Option<GramTeacher<S>>,
}

impl<S: Scalar> TrainState<S> {
    pub fn new(student: Model<S>) -> Self {
        TrainState { teacher: student.clone(), optimizer: ModelOptimizer::new(&student), student, gram: None }
    }
}

/// Learning rate and teacher temperature actually used by a step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub report: LossReport,
    pub lr: f64,
    pub teacher_temp: f64,
}

fn value<S: Scalar>(g: &Graph<S>, v: Var) -> f64 {
    g.value(v).item().f64()
}

/// Student loss against fixed targets, backward, AdamW with layer-wise rates
/// and prototype renormalization.
#[allow(clippy::too_many_arguments)]
pub fn optimize_student<S: Scalar>(
    student: &mut Model<S>,
    optimizer: &mut ModelOptimizer<S>,
    batch: &CropBatch,
    targets: &Targets<S>,
    sv: &ScheduleValues,
    layerwise_decay: f64,
    obj: &ObjectiveConfig,
    step: u64,
) -> Result<LossReport> {
    let mut g = Graph::new();
    let vars = student.bind(&mut g, true);
    let terms = student_objective(&mut g, student, &vars, batch, targets, obj)?;
    let report = LossReport {
        step,
        dino: value(&g, terms.dino),
        ibot: value(&g, terms.ibot),
        koleo: value(&g, terms.koleo),
        gram: terms.gram.map(|v| value(&g, v)).unwrap_or(0.0),
        total: value(&g, terms.total),
    };
    if !report.total.is_finite() {
        return Err(Error::NonFinite(format!("loss at step {step}")));
    }
    g.backward(terms.total)?;
    let groups = [&vars.backbone, &vars.dino_head, &vars.ibot_head];
    let grads: Vec<Vec<Vec<S>>> = groups
        .iter()
        .map(|vs| vs.iter().map(|v| g.take_grad(*v).expect("trainable leaf has a gradient")).collect())
        .collect();
    drop(g);
    let lrs = student.learning_rates(sv.lr, layerwise_decay);
    let decay = student.decay_mask();
    for (i, params) in student.parts_mut().into_iter().enumerate() {
        optimizer.groups[i].step(params, &grads[i], &lrs[i], sv.weight_decay, &decay[i])?;
    }
    student.dino_head.normalize_prototypes();
    student.ibot_head.normalize_prototypes();
    if !student.is_finite() {
        return Err(Error::NonFinite(format!("student parameters at step {step}")));
    }
    Ok(report)
}

/// One optimization step: teacher targets, student loss, AdamW with
/// layer-wise rates, prototype renormalization and the EMA update.
///
/// Refinement is the same step with a Gram weight and a Gram teacher.
pub fn train_step<S: Scalar>(
    state: &mut TrainState<S>,
    batch: &CropBatch,
    sched: &ScheduleConfig,
    obj: &ObjectiveConfig,
    step: u64,
) -> Result<StepInfo> {
    let sv = schedule(step, sched);
    let mut targets = teacher_targets(&state.teacher, batch, sv.teacher_temp, obj.sinkhorn_iters)?;
    if obj.weights.gram > 0.0 {
        let gt = state.gram.as_ref().ok_or_else(|| Error::Config("refinement requires a Gram teacher".into()))?;
        targets.gram = Some(gram_targets(&gt.state, batch)?);
    }
    let report = optimize_student(&mut state.student, &mut state.optimizer, batch, &targets, &sv, sched.layerwise_decay, obj, step)?;
    state.teacher.ema_from(&state.student, sv.momentum)?;
    Ok(StepInfo { report, lr: sv.lr, teacher_temp: sv.teacher_temp })
}
