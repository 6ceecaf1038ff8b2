use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::diagnostics::{cls_patch_cosine, knn_probe, locality_score, FeatureMap, Provenance};
use crate::error::{Error, Result};
use crate::rng::{derive, stream_rng, Stream};
use crate::tensor::{io, Graph, Tensor};
use crate::vit::{forward_graph, CropKind, ForwardOptions, ViTState};

use super::batch::{build_batch, CropBatch, StudentNoise};
use super::config::{parse_pairs, EvalConfig, TrainConfig, TrainPhase};
use super::crops::{adaptation_triples, sample_triple, CropConfig};
use super::data::ShapesDataset;
use super::mix::next_batch;
use super::model::Model;
use super::step::{train_step, GramTeacher, StepInfo, TrainState};

pub const METRICS_HEADER: &str = "step,dino,ibot,koleo,gram,total,lr,teacher_temp";

/// One metrics CSV row; shortest round-trip float formatting.
pub fn metrics_row(info: &StepInfo) -> String {
    let r = &info.report;
    format!("{},{},{},{},{},{},{},{}", r.step, r.dino, r.ibot, r.koleo, r.gram, r.total, info.lr, info.teacher_temp)
}

pub const EVAL_HEADER: &str = "step,locality,cls_patch_cosine,knn";

/// Frozen-feature monitoring numbers of one backbone.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub step: u64,
    pub locality: f64,
    pub cls_patch_cosine: f64,
    pub knn: f64,
}

impl EvalReport {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.step, self.locality, self.cls_patch_cosine, self.knn)
    }
}

/// Held-out images for monitoring; disjoint seeds from the training data.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub train: ShapesDataset,
    pub test: ShapesDataset,
}

impl EvalSet {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        Ok(EvalSet {
            train: ShapesDataset::generate(cfg.eval.train_size, cfg.image_size, derive(cfg.seed, Stream::Probe, 1))?,
            test: ShapesDataset::generate(cfg.eval.test_size, cfg.image_size, derive(cfg.seed, Stream::Probe, 2))?,
        })
    }
}

/// Final-norm CLS and patch features of whole images, unmasked and unjittered.
pub fn extract_features(backbone: &ViTState<f32>, images: &[Tensor<f32>]) -> Result<Vec<(Vec<f64>, FeatureMap)>> {
    let chunks: Vec<Result<Vec<(Vec<f64>, FeatureMap)>>> = images
        .par_chunks(16)
        .map(|chunk| {
            let mut g = Graph::new();
            let vars = backbone.params.bind(&mut g, false);
            let opts = ForwardOptions { crop_kind: Some(CropKind::Global), ..Default::default() };
            let out = forward_graph(&mut g, backbone, &vars, chunk, &opts)?;
            let d = backbone.config.embed_dim;
            let np = out.grid.0 * out.grid.1;
            let cls = g.value(out.cls).data();
            let patches = g.value(out.patches).data();
            (0..chunk.len())
                .map(|i| {
                    let c = cls[i * d..(i + 1) * d].iter().map(|&v| v as f64).collect();
                    let p = patches[i * np * d..(i + 1) * np * d].iter().map(|&v| v as f64).collect();
                    let prov = Provenance { checkpoint: String::new(), layer: backbone.config.depth, resolution: chunk[i].shape()[0], norm_applied: true };
                    Ok((c, FeatureMap::new(out.grid.0, out.grid.1, d, p, prov)?))
                })
                .collect()
        })
        .collect();
    let mut all = Vec::with_capacity(images.len());
    for c in chunks {
        all.extend(c?);
    }
    Ok(all)
}

/// Locality and CLS-patch cosine averaged over the test images, plus a kNN
/// probe on CLS features.
pub fn evaluate(backbone: &ViTState<f32>, set: &EvalSet, cfg: &EvalConfig, step: u64) -> Result<EvalReport> {
    let test = extract_features(backbone, &set.test.images)?;
    let train = extract_features(backbone, &set.train.images)?;
    let n = test.len() as f64;
    let mut locality = 0.0;
    let mut cos = 0.0;
    for (cls, fm) in &test {
        locality += locality_score(fm, cfg.radius)? / n;
        cos += cls_patch_cosine(cls, fm) / n;
    }
    let tr: Vec<Vec<f64>> = train.into_iter().map(|(c, _)| c).collect();
    let te: Vec<Vec<f64>> = test.into_iter().map(|(c, _)| c).collect();
    let knn = knn_probe(&tr, &set.train.labels, &te, &set.test.labels, cfg.knn_k)?.value;
    Ok(EvalReport { step, locality, cls_patch_cosine: cos, knn })
}

/// Everything a checkpoint records besides tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub phase: TrainPhase,
    /// Next step to run.
    pub step: u64,
    pub phase_start: u64,
    pub adam_t: u64,
    pub gram_refreshes: Option<u32>,
    pub config: TrainConfig,
}

fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

fn meta_text(m: &CheckpointMeta) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "checkpoint.phase = {}", m.phase);
    let _ = writeln!(s, "checkpoint.step = {}", m.step);
    let _ = writeln!(s, "checkpoint.phase_start = {}", m.phase_start);
    let _ = writeln!(s, "checkpoint.adam_t = {}", m.adam_t);
    if let Some(r) = m.gram_refreshes {
        let _ = writeln!(s, "checkpoint.gram_refreshes = {r}");
    }
    s + &m.config.to_text()
}

fn parse_meta(text: &str) -> Result<CheckpointMeta> {
    let pairs = parse_pairs(text)?;
    let get = |k: &str| pairs.iter().find(|(key, _)| key == k).map(|(_, v)| v.as_str());
    let need = |k: &str| get(k).ok_or_else(|| Error::Format(format!("checkpoint metadata lacks {k}")));
    let num = |k: &str| -> Result<u64> { need(k)?.parse().map_err(|_| Error::Format(format!("bad {k}"))) };
    let rest: Vec<(String, String)> = pairs.iter().filter(|(k, _)| !k.starts_with("checkpoint.")).cloned().collect();
    Ok(CheckpointMeta {
        phase: need("checkpoint.phase")?.parse()?,
        step: num("checkpoint.step")?,
        phase_start: num("checkpoint.phase_start")?,
        adam_t: num("checkpoint.adam_t")?,
        gram_refreshes: get("checkpoint.gram_refreshes").map(|v| v.parse().map_err(|_| Error::Format("bad gram_refreshes".into()))).transpose()?,
        config: TrainConfig::from_pairs(&rest)?,
    })
}

/// Write student, teacher, optimizer moments and Gram teacher atomically.
pub fn save_checkpoint(path: &Path, state: &TrainState<f32>, meta: &CheckpointMeta) -> Result<()> {
    let mut named = state.student.named("student.");
    named.extend(state.teacher.named("teacher."));
    named.extend(state.optimizer.named("optim.", &state.student));
    if let Some(gt) = &state.gram {
        named.extend(gt.state.params.to_named("gram."));
    }
    io::save(path, &named)?;
    io::write_atomic(&meta_path(path), meta_text(meta).as_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<(TrainState<f32>, CheckpointMeta)> {
    let mp = meta_path(path);
    let text = std::fs::read_to_string(&mp).map_err(|e| Error::io(mp, e))?;
    let meta = parse_meta(&text)?;
    let named = io::load::<f32>(path)?;
    let c = &meta.config;
    let mut rng = stream_rng(0, Stream::Init, 0);
    let mut student = Model::init(c.vit.clone(), c.dino_head, c.ibot_head, &mut rng)?;
    student.load_named("student.", &named)?;
    let mut teacher = student.clone();
    teacher.load_named("teacher.", &named)?;
    let mut state = TrainState::new(student);
    state.teacher = teacher;
    state.optimizer.load_named("optim.", &state.student, &named, meta.adam_t)?;
    if let Some(refreshes) = meta.gram_refreshes {
        let mut gs = state.student.backbone.clone();
        gs.params.load_named("gram.", &named)?;
        state.gram = Some(GramTeacher { state: gs, policy: c.gram.clone(), refreshes });
    }
    Ok((state, meta))
}

/// Checkpoint file name for the state before `step`.
pub fn checkpoint_name(step: u64) -> String {
    format!("step_{step:06}.ckpt")
}

/// Deterministic batch source of one phase: dataset, mixing parts and crop policy.
#[derive(Debug, Clone)]
pub struct Batcher {
    pub cfg: TrainConfig,
    pub phase: TrainPhase,
    pub data: ShapesDataset,
    parts: Vec<Vec<usize>>,
}

fn split_parts(n: usize, k: usize) -> Vec<Vec<usize>> {
    (0..k).map(|p| (p * n / k..(p + 1) * n / k).collect()).collect()
}

impl Batcher {
    pub fn new(cfg: TrainConfig, phase: TrainPhase) -> Result<Self> {
        cfg.validate()?;
        if phase == TrainPhase::Adapt {
            let need = adaptation_triples().iter().map(|t| t.global).max().unwrap_or(0);
            if cfg.image_size < need {
                return Err(Error::Config(format!("hires-adapt needs image_size >= {need}, got {}", cfg.image_size)));
            }
        }
        let data = ShapesDataset::generate(cfg.dataset_size, cfg.image_size, derive(cfg.seed, Stream::Data, 0))?;
        let parts = split_parts(data.len(), 1 + cfg.mix.weights.len());
        Ok(Batcher { cfg, phase, data, parts })
    }

    fn gram_size(&self, global: usize) -> Option<usize> {
        let active = self.phase != TrainPhase::Pretrain && self.cfg.objective.weights.gram > 0.0;
        active.then(|| global * self.cfg.gram.highres_factor)
    }

    /// The batch of `step`; a pure function of the seed, config and step.
    pub fn batch(&self, step: u64) -> Result<CropBatch> {
        let cfg = &self.cfg;
        let mut rng = stream_rng(cfg.seed, Stream::Sampler, step);
        let desc = next_batch(&cfg.mix, &self.parts, cfg.batch_size, &mut rng)?;
        let ids: Vec<usize> = desc.samples.iter().map(|&(_, i)| i).collect();
        let images: Vec<&Tensor<f32>> = ids.iter().map(|&i| &self.data.images[i]).collect();
        let (crops, gram_size) = match self.phase {
            TrainPhase::Adapt => {
                let t = sample_triple(&adaptation_triples(), &mut rng);
                let crops = CropConfig { global_size: t.global, local_size: t.local, ..cfg.crops.clone() };
                (crops, self.gram_size(t.global).map(|_| t.gram))
            }
            _ => (cfg.crops.clone(), self.gram_size(cfg.crops.global_size)),
        };
        let noise = StudentNoise {
            jitter_range: Some(cfg.vit.rope_jitter_range),
            depth: cfg.vit.depth,
            drop_rate: cfg.vit.stochastic_depth_rate,
        };
        build_batch(&images, ids, &crops, &cfg.masks, cfg.vit.patch_size, gram_size, noise, cfg.seed, step)
    }
}

/// Step-by-step driver of one phase.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub phase: TrainPhase,
    pub batcher: Batcher,
    pub state: TrainState<f32>,
    /// Next step to run.
    pub step: u64,
    pub phase_start: u64,
}

impl Trainer {
    fn with_state(cfg: TrainConfig, phase: TrainPhase, state: TrainState<f32>, step: u64, phase_start: u64) -> Result<Self> {
        let batcher = Batcher::new(cfg.clone(), phase)?;
        Ok(Trainer { cfg, phase, batcher, state, step, phase_start })
    }

    /// Fresh student and teacher from the seed.
    pub fn pretrain(cfg: TrainConfig) -> Result<Self> {
        let mut rng = stream_rng(cfg.seed, Stream::Init, 0);
        let model = Model::init(cfg.vit.clone(), cfg.dino_head, cfg.ibot_head, &mut rng)?;
        Self::with_state(cfg, TrainPhase::Pretrain, TrainState::new(model), 0, 0)
    }

    /// Start refinement or adaptation from a finished checkpoint.
    ///
    /// `gram_source` is the backbone the Gram teacher starts from; it is
    /// required whenever the Gram weight is positive.
    pub fn continue_from(
        cfg: TrainConfig,
        phase: TrainPhase,
        source: (TrainState<f32>, CheckpointMeta),
        gram_source: Option<ViTState<f32>>,
    ) -> Result<Self> {
        if phase == TrainPhase::Pretrain {
            return Err(Error::Lineage("pretraining starts from scratch, not from a checkpoint".into()));
        }
        let (mut state, meta) = source;
        if meta.config.architecture_kv() != cfg.architecture_kv() {
            return Err(Error::Lineage("architecture keys differ from the source checkpoint".into()));
        }
        state.gram = None;
        if cfg.objective.weights.gram > 0.0 {
            let gs = gram_source.ok_or_else(|| Error::Lineage(format!("{phase} with a Gram weight needs a Gram teacher checkpoint")))?;
            if !gs.params.same_layout(&state.student.backbone.params) {
                return Err(Error::Lineage("Gram teacher architecture differs from the student".into()));
            }
            state.gram = Some(GramTeacher { state: gs, policy: cfg.gram.clone(), refreshes: 0 });
        }
        let step = meta.step;
        Self::with_state(cfg, phase, state, step, step)
    }

    /// Continue an interrupted run exactly where its checkpoint stopped.
    pub fn resume(source: (TrainState<f32>, CheckpointMeta)) -> Result<Self> {
        let (state, meta) = source;
        Self::with_state(meta.config, meta.phase, state, meta.step, meta.phase_start)
    }

    pub fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            phase: self.phase,
            step: self.step,
            phase_start: self.phase_start,
            adam_t: self.state.optimizer.groups[0].t,
            gram_refreshes: self.state.gram.as_ref().map(|g| g.refreshes),
            config: self.cfg.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.state, &self.meta())
    }

    pub fn batch(&self, step: u64) -> Result<CropBatch> {
        self.batcher.batch(step)
    }

    /// Run the next step and refresh the Gram teacher on its boundaries.
    pub fn step(&mut self) -> Result<StepInfo> {
        let batch = self.batch(self.step)?;
        let info = train_step(&mut self.state, &batch, &self.cfg.schedule, &self.cfg.objective, self.step)?;
        self.step += 1;
        let into = self.step - self.phase_start;
        if let Some(gt) = self.state.gram.as_mut() {
            gt.maybe_refresh(&self.state.teacher.backbone, into);
        }
        Ok(info)
    }

    /// Steps still to run in this invocation's budget.
    pub fn remaining(&self) -> u64 {
        (self.phase_start + self.cfg.steps).saturating_sub(self.step)
    }
}
