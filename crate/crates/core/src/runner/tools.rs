use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::curation::{balanced_sample, build_hierarchy, pixel_embedding, write_index, CurationReport};
use crate::diagnostics::{
    cls_patch_cosine, cosine_map, knn_probe, linear_probe, locality_score, pca_rgb, write_pgm, write_ppm, FeatureMap, LinearProbeConfig,
    PcaImage, ProbeResult, Provenance,
};
use crate::distill::{distill_step, parse_roster, per_worker_cost, plan_assignment, simulate_iteration, CostModel, DistillPlan, DistillStudent, StudentSpec, Timeline};
use crate::error::{Error, Result};
use crate::rng::{derive, stream_rng, Stream};
use crate::tensor::io::write_atomic;
use crate::tensor::{Graph, Tensor};
use crate::train::{
    checkpoint_name, extract_features, load_checkpoint, save_checkpoint, schedule, Batcher, CheckpointMeta, EvalSet, Model, ShapesDataset,
    TrainConfig, TrainPhase, TrainState,
};
use crate::vit::{forward_graph, CropKind, ForwardOptions, ViTConfig, ViTState};

use super::{canonical, checkpoint_dir, config_hash, RunLock, RunManifest, RunStatus};

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

fn finish_manifest(run: &Path, subcommand: &str, config_text: &str, seed: u64, parent: Option<PathBuf>) -> Result<()> {
    let mut m = RunManifest::new(subcommand, config_text, seed, 0, parent, None);
    m.status = RunStatus::Complete;
    write_text(&run.join("config.txt"), config_text)?;
    m.write(&run.join("manifest.txt"))
}

// ---------------------------------------------------------------- distill

#[derive(Debug, Clone)]
pub struct DistillOptions {
    /// Frozen teacher checkpoint; its EMA teacher weights are used.
    pub teacher: PathBuf,
    pub roster: Vec<StudentSpec>,
    /// Data, schedule, crops and step budget of the distillation run.
    pub cfg: TrainConfig,
}

/// Backbone shape of a roster entry, inheriting everything else from the teacher.
pub fn student_vit(teacher: &ViTConfig, spec: &StudentSpec) -> Result<ViTConfig> {
    if spec.dim % teacher.head_count != 0 {
        return Err(Error::Config(format!("student `{}`: dim {} not divisible by {} heads", spec.name, spec.dim, teacher.head_count)));
    }
    Ok(ViTConfig {
        depth: spec.depth,
        embed_dim: spec.dim,
        head_dim: spec.dim / teacher.head_count,
        ffn_hidden_dim: spec.dim * teacher.ffn_hidden_dim / teacher.embed_dim,
        ..teacher.clone()
    })
}

fn student_checkpoint(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.ckpt"))
}

fn save_students(dir: &Path, students: &[DistillStudent], cfg: &TrainConfig, step: u64) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for s in students {
        let mut state = TrainState::new(s.model.clone());
        state.optimizer = s.optimizer.clone();
        let mut c = cfg.clone();
        c.vit = s.model.backbone.config.clone();
        let meta = CheckpointMeta { phase: TrainPhase::Pretrain, step, phase_start: 0, adam_t: s.optimizer.groups[0].t, gram_refreshes: None, config: c };
        save_checkpoint(&student_checkpoint(dir, &s.name), &state, &meta)?;
    }
    // the marker goes last so a half-written step directory is never resumed from
    write_text(&dir.join("complete"), "")
}

fn latest_student_dir(run: &Path) -> Result<Option<(u64, PathBuf)>> {
    let dir = checkpoint_dir(run);
    if !dir.exists() {
        return Ok(None);
    }
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
        let p = entry.map_err(|e| Error::io(&dir, e))?.path();
        let step = p.file_name().and_then(|n| n.to_str()).and_then(|n| n.strip_prefix("step_")).and_then(|s| s.parse::<u64>().ok());
        if let Some(step) = step {
            if p.join("complete").exists() && best.as_ref().map_or(true, |(b, _)| step > *b) {
                best = Some((step, p));
            }
        }
    }
    Ok(best)
}

pub const DISTILL_HEADER: &str = "step,student,dino,ibot,koleo,total,lr";

/// Train every roster student against one frozen teacher; resumable.
///
/// Returns the final per-student checkpoint paths.
pub fn distill(opts: &DistillOptions, run: &Path) -> Result<Vec<PathBuf>> {
    let _lock = RunLock::acquire(run)?;
    let cfg = &opts.cfg;
    let (tstate, tmeta) = load_checkpoint(&opts.teacher)?;
    let teacher: Model<f32> = tstate.teacher;
    if tmeta.config.vit.patch_size != cfg.vit.patch_size {
        return Err(Error::Geometry("run config patch size differs from the teacher checkpoint".into()));
    }
    let roster_text: String = opts.roster.iter().map(|s| format!("{}, {}, {}, {}\n", s.name, s.depth, s.dim, s.cost)).collect();
    let config_text = cfg.to_text() + "# roster\n" + &roster_text.lines().map(|l| format!("# {l}\n")).collect::<String>();
    let metrics = run.join("metrics.csv");
    let manifest_path = run.join("manifest.txt");
    let (mut students, start) = match (manifest_path.exists(), latest_student_dir(run)?) {
        (true, Some((step, dir))) => {
            let m = RunManifest::read(&manifest_path)?;
            if m.subcommand != "distill" {
                return Err(Error::Lineage(format!("run directory holds a `{}` run, not `distill`", m.subcommand)));
            }
            if m.config_hash != config_hash(&config_text) {
                return Err(Error::Config("resolved config or roster differs from the run being resumed".into()));
            }
            let mut out = Vec::new();
            for spec in &opts.roster {
                let (state, _) = load_checkpoint(&student_checkpoint(&dir, &spec.name))?;
                out.push(DistillStudent { name: spec.name.clone(), model: state.student, optimizer: state.optimizer });
            }
            super::truncate_csv(&metrics, DISTILL_HEADER, step)?;
            (out, step)
        }
        _ => {
            let mut out = Vec::new();
            for (i, spec) in opts.roster.iter().enumerate() {
                let vit = student_vit(&teacher.backbone.config, spec)?;
                let mut rng = stream_rng(cfg.seed, Stream::Init, 1 + i as u64);
                out.push(DistillStudent::new(spec.name.clone(), Model::init(vit, teacher.dino_head.config, teacher.ibot_head.config, &mut rng)?));
            }
            write_text(&metrics, &format!("{DISTILL_HEADER}\n"))?;
            (out, 0)
        }
    };
    write_text(&run.join("config.txt"), &config_text)?;
    write_text(&run.join("roster.txt"), &roster_text)?;
    let mut manifest = RunManifest::new("distill", &config_text, cfg.seed, start, Some(opts.teacher.clone()), None);
    manifest.write(&manifest_path)?;

    let batcher = Batcher::new(cfg.clone(), TrainPhase::Pretrain)?;
    let ckpts = checkpoint_dir(run);
    let mut step = start;
    let result = (|| -> Result<()> {
        while step < cfg.steps {
            let reports = distill_step(&teacher, &mut students, &batcher.batch(step)?, &cfg.schedule, &cfg.objective, step)?;
            let lr = schedule(step, &cfg.schedule).lr;
            for (s, r) in students.iter().zip(&reports) {
                super::append(&metrics, &format!("{step},{},{},{},{},{},{lr}", s.name, r.dino, r.ibot, r.koleo, r.total))?;
            }
            step += 1;
            if step % cfg.checkpoint_every == 0 || step == cfg.steps {
                save_students(&ckpts.join(format!("step_{step:06}")), &students, cfg, step)?;
            }
        }
        Ok(())
    })();
    manifest.end_step = step;
    manifest.status = if result.is_ok() { RunStatus::Complete } else { RunStatus::Failed };
    manifest.write(&manifest_path)?;
    result?;
    let last = ckpts.join(format!("step_{step:06}"));
    if !last.join("complete").exists() {
        save_students(&last, &students, cfg, step)?;
    }
    Ok(opts.roster.iter().map(|s| student_checkpoint(&last, &s.name)).collect())
}

pub fn read_roster(path: &Path) -> Result<Vec<StudentSpec>> {
    parse_roster(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

// ------------------------------------------------------- simulate-distill

#[derive(Debug, Clone)]
pub struct SimulateOptions {
    pub roster: Vec<StudentSpec>,
    pub teacher_cost: f64,
    pub workers: usize,
    pub batch_size: f64,
    pub allgather_cost: f64,
}

/// Plan, per-worker cost table and one simulated iteration; CSVs go to `out`.
pub fn simulate_distill(opts: &SimulateOptions, out: &Path) -> Result<(DistillPlan, Timeline)> {
    let mut model = CostModel::new(opts.teacher_cost, opts.roster.iter().map(|s| s.cost).collect(), opts.batch_size, opts.workers);
    model.allgather_cost = opts.allgather_cost;
    let plan = plan_assignment(&model)?;
    let timeline = simulate_iteration(&plan, &model);
    let table = per_worker_cost(&plan, &model);
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_text(&out.join("plan.csv"), &plan.to_csv())?;
    write_text(&out.join("timeline.csv"), &timeline.to_csv())?;
    let mut costs = String::from("kind,student,workers,teacher_share,student_share\n");
    for (kind, rows) in [("plan", &table.rows), ("baseline", &table.baseline)] {
        for r in rows {
            let _ = writeln!(costs, "{kind},{},{},{},{}", r.student, r.workers, r.teacher_share, r.student_share);
        }
    }
    write_text(&out.join("costs.csv"), &costs)?;
    let text = format!(
        "teacher_cost = {}\nworkers = {}\nbatch_size = {}\nallgather_cost = {}\n",
        opts.teacher_cost, opts.workers, opts.batch_size, opts.allgather_cost
    );
    finish_manifest(out, "simulate-distill", &text, 0, None)?;
    Ok((plan, timeline))
}

// ----------------------------------------------------------------- curate

#[derive(Debug, Clone)]
pub enum Embedding {
    /// Average-pooled pixels on a `side x side` grid.
    Pixels { side: usize },
    /// Final-norm CLS features of a checkpoint's teacher backbone.
    Checkpoint(PathBuf),
}

#[derive(Debug, Clone)]
pub struct CurateOptions {
    /// Supplies seed, dataset_size and image_size.
    pub cfg: TrainConfig,
    pub embedding: Embedding,
    /// Cluster counts, finest level first.
    pub levels: Vec<usize>,
    pub sample: usize,
    pub max_iter: usize,
}

/// Cluster the training pool and write a balanced index plus its report.
pub fn curate(opts: &CurateOptions, out: &Path) -> Result<(Vec<usize>, CurationReport)> {
    let cfg = &opts.cfg;
    let data = ShapesDataset::generate(cfg.dataset_size, cfg.image_size, derive(cfg.seed, Stream::Data, 0))?;
    let (points, parent): (Vec<Vec<f64>>, Option<PathBuf>) = match &opts.embedding {
        Embedding::Pixels { side } => (data.images.iter().map(|im| pixel_embedding(im, *side)).collect::<Result<_>>()?, None),
        Embedding::Checkpoint(p) => {
            let (state, _) = load_checkpoint(p)?;
            let feats = extract_features(&state.teacher.backbone, &data.images)?;
            (feats.into_iter().map(|(c, _)| c).collect(), Some(p.clone()))
        }
    };
    let seed = derive(cfg.seed, Stream::Curation, 2);
    let h = build_hierarchy(&points, &opts.levels, opts.max_iter, seed)?;
    let (ids, report) = balanced_sample(&h, opts.sample, seed)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_index(&out.join("index.txt"), &ids)?;
    write_text(&out.join("report.csv"), &report.to_csv())?;
    let levels: Vec<String> = opts.levels.iter().map(usize::to_string).collect();
    let embedding = match &opts.embedding {
        Embedding::Pixels { side } => format!("pixels:{side}"),
        Embedding::Checkpoint(p) => format!("checkpoint:{}", p.display()),
    };
    let text = format!(
        "{}curate.levels = {}\ncurate.sample = {}\ncurate.max_iter = {}\ncurate.embedding = {embedding}\n",
        cfg.to_text(),
        levels.join(","),
        opts.sample,
        opts.max_iter
    );
    finish_manifest(out, "curate", &text, cfg.seed, parent)?;
    Ok((ids, report))
}

// ------------------------------------------------------------------ probe

#[derive(Debug, Clone)]
pub struct ProbeOptions {
    pub checkpoint: PathBuf,
    pub knn_k: usize,
    pub linear: Option<LinearProbeConfig>,
    /// Overrides of the checkpoint's eval set sizes.
    pub train_size: Option<usize>,
    pub test_size: Option<usize>,
}

fn probe_csv(results: &[ProbeResult]) -> String {
    let mut s = String::from("task,metric,value,train_size,val_size,test_size,hyperparameters\n");
    for r in results {
        let hp: Vec<String> = r.hyperparameters.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let _ = writeln!(s, "{},{},{},{},{},{},{}", r.task, r.metric, r.value, r.train_size, r.val_size, r.test_size, hp.join(";"));
    }
    s
}

/// kNN (and optionally linear) probes on the teacher's CLS features.
pub fn probe(opts: &ProbeOptions, out: &Path) -> Result<Vec<ProbeResult>> {
    let (state, meta) = load_checkpoint(&opts.checkpoint)?;
    let mut cfg = meta.config;
    cfg.eval.train_size = opts.train_size.unwrap_or(cfg.eval.train_size);
    cfg.eval.test_size = opts.test_size.unwrap_or(cfg.eval.test_size);
    let set = EvalSet::new(&cfg)?;
    let cls = |ds: &ShapesDataset| -> Result<Vec<Vec<f64>>> {
        Ok(extract_features(&state.teacher.backbone, &ds.images)?.into_iter().map(|(c, _)| c).collect())
    };
    let (tr, te) = (cls(&set.train)?, cls(&set.test)?);
    let mut results = vec![knn_probe(&tr, &set.train.labels, &te, &set.test.labels, opts.knn_k)?];
    if let Some(lc) = &opts.linear {
        let lc = LinearProbeConfig { seed: cfg.seed, ..lc.clone() };
        results.push(linear_probe(&tr, &set.train.labels, &te, &set.test.labels, &lc)?);
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_text(&out.join("probe.csv"), &probe_csv(&results))?;
    let text = format!("{}probe.knn_k = {}\nprobe.linear = {}\n", cfg.to_text(), opts.knn_k, opts.linear.is_some());
    finish_manifest(out, "probe", &text, cfg.seed, Some(opts.checkpoint.clone()))?;
    Ok(results)
}

// --------------------------------------------------------------- diagnose

#[derive(Debug, Clone)]
pub struct DiagnoseOptions {
    pub checkpoint: PathBuf,
    /// Block index 1..=depth; `None` or `depth` reads the final-norm output.
    pub layer: Option<usize>,
    /// Input side in pixels; defaults to the checkpoint's image size.
    pub resolution: Option<usize>,
    /// Index of the held-out image to render.
    pub image: usize,
    pub variant: Option<usize>,
    pub radius: usize,
}

/// Numbers behind the written images.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagnoseReport {
    pub features: FeatureMap,
    pub pca: PcaImage,
    pub locality: f64,
    pub cls_patch_cosine: f64,
}

/// CLS vector and patch map of one image at `layer` (1-based block count).
pub fn layer_features(backbone: &ViTState<f32>, image: &Tensor<f32>, layer: usize, label: &str) -> Result<(Vec<f64>, FeatureMap)> {
    let depth = backbone.config.depth;
    if layer == 0 || layer > depth {
        return Err(Error::Config(format!("layer must be in 1..={depth}, got {layer}")));
    }
    let mut g = Graph::new();
    let vars = backbone.params.bind(&mut g, false);
    let opts = ForwardOptions { crop_kind: Some(CropKind::Global), taps: layer < depth, ..Default::default() };
    let out = forward_graph(&mut g, backbone, &vars, std::slice::from_ref(image), &opts)?;
    let final_norm = layer == depth;
    let patches = if final_norm { out.patches } else { out.taps[layer - 1] };
    let prov = Provenance { checkpoint: label.to_string(), layer, resolution: image.shape()[0], norm_applied: final_norm };
    let cls = g.value(out.cls).data().iter().map(|&v| v as f64).collect();
    Ok((cls, FeatureMap::from_patches(g.value(patches), out.grid, prov)?))
}

/// PCA colouring, centre-patch cosine map and locality of one held-out image.
pub fn diagnose(opts: &DiagnoseOptions, out: &Path) -> Result<DiagnoseReport> {
    let (state, meta) = load_checkpoint(&opts.checkpoint)?;
    let cfg = meta.config;
    let res = opts.resolution.unwrap_or(cfg.image_size);
    let ds = ShapesDataset::generate(opts.image + 1, res, derive(cfg.seed, Stream::Probe, 2))?;
    let image = &ds.images[opts.image];
    let backbone = &state.teacher.backbone;
    let layer = opts.layer.unwrap_or(backbone.config.depth);
    let (cls, fm) = layer_features(backbone, image, layer, &opts.checkpoint.display().to_string())?;
    let pca = pca_rgb(&fm, opts.variant)?;
    let locality = locality_score(&fm, opts.radius)?;
    let cpc = cls_patch_cosine(&cls, &fm);
    let cos = cosine_map(&fm, (fm.h / 2, fm.w / 2))?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let px: Vec<f64> = image.data().iter().map(|&v| v as f64).collect();
    write_ppm(&out.join("input.ppm"), res, res, &px)?;
    write_ppm(&out.join("pca.ppm"), pca.h, pca.w, &pca.rgb)?;
    write_pgm(&out.join("cosine.pgm"), fm.h, fm.w, &cos, Some((-1.0, 1.0)))?;
    let mut csv = String::from("checkpoint,layer,resolution,norm_applied,locality,cls_patch_cosine,pca_variant,explained_1,explained_2,explained_3,degenerate\n");
    let degenerate: Vec<String> = pca.degenerate.iter().map(|d| d.to_string()).collect();
    let _ = writeln!(
        csv,
        "{},{layer},{res},{},{locality},{cpc},{},{},{},{},{}",
        opts.checkpoint.display(),
        fm.provenance.norm_applied,
        pca.variant,
        pca.explained[0],
        pca.explained[1],
        pca.explained[2],
        degenerate.join(";")
    );
    write_text(&out.join("diagnostics.csv"), &csv)?;
    let text = format!("checkpoint = {}\nlayer = {layer}\nresolution = {res}\nimage = {}\nradius = {}\n", canonical(&opts.checkpoint).display(), opts.image, opts.radius);
    finish_manifest(out, "diagnose", &text, cfg.seed, Some(opts.checkpoint.clone()))?;
    Ok(DiagnoseReport { features: fm, pca, locality, cls_patch_cosine: cpc })
}

/// Checkpoint written by a training run at `step`.
pub fn run_checkpoint(run: &Path, step: u64) -> PathBuf {
    checkpoint_dir(run).join(checkpoint_name(step))
}
