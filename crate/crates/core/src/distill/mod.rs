//! Multi-student distillation: cost model, worker allocation, iteration
//! timeline and the shared-teacher training step.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::objectives::{LossReport, LossWeights};
use crate::train::{optimize_student, schedule, teacher_targets, CropBatch, Model, ModelOptimizer, ObjectiveConfig, ScheduleConfig};

/// Per-sample work of the frozen teacher and of every student.
#[derive(Debug, Clone, PartialEq)]
pub struct CostModel {
    pub teacher_cost: f64,
    pub student_costs: Vec<f64>,
    pub batch_size: f64,
    pub workers: usize,
    /// Duration of the all-gather barrier; zero by default.
    pub allgather_cost: f64,
}

impl CostModel {
    pub fn new(teacher_cost: f64, student_costs: Vec<f64>, batch_size: f64, workers: usize) -> Self {
        CostModel { teacher_cost, student_costs, batch_size, workers, allgather_cost: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.student_costs.len();
        if s == 0 {
            return Err(Error::Config("cost model needs at least one student".into()));
        }
        if self.workers < s {
            return Err(Error::Config(format!("{} workers cannot host {s} students", self.workers)));
        }
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.teacher_cost) || !positive(self.batch_size) || !self.student_costs.iter().all(|&c| positive(c)) {
            return Err(Error::Config("costs and batch size must be positive".into()));
        }
        if !(self.allgather_cost.is_finite() && self.allgather_cost >= 0.0) {
            return Err(Error::Config("all-gather cost must be non-negative".into()));
        }
        Ok(())
    }

    /// Teacher work per worker when all workers share the inference.
    pub fn teacher_share(&self) -> f64 {
        self.batch_size / self.workers as f64 * self.teacher_cost
    }

    /// Training work per worker of student `i` on `n` workers.
    pub fn student_share(&self, i: usize, n: usize) -> f64 {
        self.batch_size / n as f64 * self.student_costs[i]
    }

    /// Iteration time of group `i` with `n` workers.
    pub fn group_time(&self, i: usize, n: usize) -> f64 {
        self.teacher_share() + self.student_share(i, n)
    }

    /// `B * C_T + sum_i B * C_Si`.
    pub fn total_work(&self) -> f64 {
        self.batch_size * self.teacher_cost + self.student_costs.iter().map(|c| self.batch_size * c).sum::<f64>()
    }
}

/// Worker allocation and its per-iteration accounting.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillPlan {
    pub workers: Vec<usize>,
    pub teacher_share: f64,
    pub student_shares: Vec<f64>,
    pub group_times: Vec<f64>,
    pub makespan: f64,
    pub idle: Vec<f64>,
}

impl DistillPlan {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("student,workers,teacher_share,student_share,iteration_time,idle\n");
        for i in 0..self.workers.len() {
            let _ = writeln!(
                s,
                "{i},{},{},{},{},{}",
                self.workers[i], self.teacher_share, self.student_shares[i], self.group_times[i], self.idle[i]
            );
        }
        s
    }
}

/// Accounting of an explicit allocation.
pub fn plan_with(model: &CostModel, workers: &[usize]) -> Result<DistillPlan> {
    model.validate()?;
    if workers.len() != model.student_costs.len() || workers.contains(&0) || workers.iter().sum::<usize>() != model.workers {
        return Err(Error::Config(format!(
            "allocation {workers:?} must give every one of {} students at least one of {} workers",
            model.student_costs.len(),
            model.workers
        )));
    }
    let student_shares: Vec<f64> = workers.iter().enumerate().map(|(i, &n)| model.student_share(i, n)).collect();
    let group_times: Vec<f64> = workers.iter().enumerate().map(|(i, &n)| model.group_time(i, n)).collect();
    let makespan = group_times.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(DistillPlan {
        workers: workers.to_vec(),
        teacher_share: model.teacher_share(),
        student_shares,
        idle: group_times.iter().map(|t| makespan - t).collect(),
        group_times,
        makespan,
    })
}

/// Fewest workers that bring group `i` to time `<= t`, if any count up to `max` does.
fn min_workers(model: &CostModel, i: usize, t: f64, max: usize) -> Option<usize> {
    if model.group_time(i, max) > t {
        return None;
    }
    let (mut lo, mut hi) = (1, max);
    while lo < hi {
        let mid = (lo + hi) / 2;
        if model.group_time(i, mid) <= t {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    Some(lo)
}

/// Makespan-optimal integer allocation.
///
/// The optimum equals some group's time at some worker count, so candidate
/// thresholds are scanned in increasing order; the first one whose minimal
/// allocation fits is optimal. Spare workers then go one at a time to the
/// slowest group, lowest student index on ties.
pub fn plan_assignment(model: &CostModel) -> Result<DistillPlan> {
    model.validate()?;
    let s = model.student_costs.len();
    let n = model.workers;
    let max_each = n - (s - 1);
    let mut candidates: Vec<f64> = (0..s).flat_map(|i| (1..=max_each).map(move |k| (i, k))).map(|(i, k)| model.group_time(i, k)).collect();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    for t in candidates {
        let need: Option<Vec<usize>> = (0..s).map(|i| min_workers(model, i, t, max_each)).collect();
        let Some(mut alloc) = need else { continue };
        if alloc.iter().sum::<usize>() > n {
            continue;
        }
        while alloc.iter().sum::<usize>() < n {
            let slowest = (0..s)
                .fold(None::<usize>, |best, i| match best {
                    Some(b) if model.group_time(b, alloc[b]) >= model.group_time(i, alloc[i]) => Some(b),
                    _ => Some(i),
                })
                .expect("at least one student");
            alloc[slowest] += 1;
        }
        return plan_with(model, &alloc);
    }
    Err(Error::Config("no feasible allocation".into()))
}

/// Per-worker work split for one group.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkerCost {
    pub student: usize,
    pub workers: usize,
    pub teacher_share: f64,
    pub student_share: f64,
}

/// Per-worker costs of a plan, plus the single-student baseline where the
/// one student and the teacher both split over all `N` workers.
#[derive(Debug, Clone, PartialEq)]
pub struct CostTable {
    pub rows: Vec<WorkerCost>,
    pub baseline: Vec<WorkerCost>,
}

impl CostTable {
    /// `sum over groups of workers * (teacher share + student share)`.
    pub fn total_work(&self) -> f64 {
        self.rows.iter().map(|r| r.workers as f64 * (r.teacher_share + r.student_share)).sum()
    }
}

pub fn per_worker_cost(plan: &DistillPlan, model: &CostModel) -> CostTable {
    let rows = plan
        .workers
        .iter()
        .enumerate()
        .map(|(i, &w)| WorkerCost { student: i, workers: w, teacher_share: model.teacher_share(), student_share: model.student_share(i, w) })
        .collect();
    let baseline = (0..model.student_costs.len())
        .map(|i| WorkerCost {
            student: i,
            workers: model.workers,
            teacher_share: model.teacher_share(),
            student_share: model.student_share(i, model.workers),
        })
        .collect();
    CostTable { rows, baseline }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    TeacherInference,
    AllGather,
    StudentTraining,
    Sync,
}

impl Stage {
    fn name(self) -> &'static str {
        match self {
            Stage::TeacherInference => "teacher_inference",
            Stage::AllGather => "all_gather",
            Stage::StudentTraining => "student_training",
            Stage::Sync => "sync",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimelineEvent {
    pub group: usize,
    pub stage: Stage,
    pub start: f64,
    pub end: f64,
}

/// One synchronized iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct Timeline {
    pub events: Vec<TimelineEvent>,
    pub finish: Vec<f64>,
    pub makespan: f64,
    pub idle: Vec<f64>,
}

impl Timeline {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("group,stage,start,end\n");
        for e in &self.events {
            let _ = writeln!(s, "{},{},{},{}", e.group, e.stage.name(), e.start, e.end);
        }
        s
    }
}

/// Shared teacher inference, all-gather barrier, per-group student training
/// and the final synchronization barrier.
pub fn simulate_iteration(plan: &DistillPlan, model: &CostModel) -> Timeline {
    let t_teacher = model.teacher_share();
    let t_gather = t_teacher + model.allgather_cost;
    let finish: Vec<f64> = plan.student_shares.iter().map(|s| t_gather + s).collect();
    let makespan = finish.iter().copied().fold(t_gather, f64::max);
    let mut events = Vec::new();
    for (gi, (&f, &s)) in finish.iter().zip(&plan.student_shares).enumerate() {
        events.push(TimelineEvent { group: gi, stage: Stage::TeacherInference, start: 0.0, end: t_teacher });
        events.push(TimelineEvent { group: gi, stage: Stage::AllGather, start: t_teacher, end: t_gather });
        events.push(TimelineEvent { group: gi, stage: Stage::StudentTraining, start: t_gather, end: t_gather + s });
        events.push(TimelineEvent { group: gi, stage: Stage::Sync, start: f, end: makespan });
    }
    Timeline { idle: finish.iter().map(|f| makespan - f).collect(), events, finish, makespan }
}

/// One roster line: `name, depth, dim, cost`.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentSpec {
    pub name: String,
    pub depth: usize,
    pub dim: usize,
    pub cost: f64,
}

pub fn parse_roster(text: &str) -> Result<Vec<StudentSpec>> {
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = || Error::Config(format!("roster line {}: expected `name, depth, dim, cost`, got `{line}`", ln + 1));
        if f.len() != 4 || f[0].is_empty() {
            return Err(bad());
        }
        let spec = StudentSpec {
            name: f[0].to_string(),
            depth: f[1].parse().map_err(|_| bad())?,
            dim: f[2].parse().map_err(|_| bad())?,
            cost: f[3].parse().map_err(|_| bad())?,
        };
        if spec.depth == 0 || spec.dim == 0 || !(spec.cost > 0.0) {
            return Err(bad());
        }
        if out.iter().any(|s: &StudentSpec| s.name == spec.name) {
            return Err(Error::Config(format!("duplicate student name `{}`", spec.name)));
        }
        out.push(spec);
    }
    if out.is_empty() {
        return Err(Error::Config("roster lists no students".into()));
    }
    Ok(out)
}

/// A student with its own optimizer; no EMA copy is kept.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillStudent {
    pub name: String,
    pub model: Model<f32>,
    pub optimizer: ModelOptimizer<f32>,
}

impl DistillStudent {
    pub fn new(name: impl Into<String>, model: Model<f32>) -> Self {
        DistillStudent { name: name.into(), optimizer: ModelOptimizer::new(&model), model }
    }
}

/// Distillation objective: the pre-training weights without the Gram term.
pub fn distill_objective(base: &ObjectiveConfig) -> ObjectiveConfig {
    ObjectiveConfig { weights: LossWeights { gram: 0.0, ..base.weights }, ..*base }
}

/// Teacher targets computed once and shared by every student.
pub fn distill_step(
    teacher: &Model<f32>,
    students: &mut [DistillStudent],
    batch: &CropBatch,
    sched: &ScheduleConfig,
    obj: &ObjectiveConfig,
    step: u64,
) -> Result<Vec<LossReport>> {
    let sv = schedule(step, sched);
    let targets = teacher_targets(teacher, batch, sv.teacher_temp, obj.sinkhorn_iters)?;
    let tp = teacher.backbone.config.patch_size;
    for s in students.iter() {
        let m = &s.model;
        if m.dino_head.config.prototype_count != teacher.dino_head.config.prototype_count
            || m.ibot_head.config.prototype_count != teacher.ibot_head.config.prototype_count
        {
            return Err(Error::Config(format!("student `{}` prototype counts differ from the teacher heads", s.name)));
        }
        if m.backbone.config.patch_size != tp {
            return Err(Error::Geometry(format!("student `{}` patch size differs from the teacher", s.name)));
        }
    }
    let obj = distill_objective(obj);
    students
        .par_iter_mut()
        .map(|s| optimize_student(&mut s.model, &mut s.optimizer, batch, &targets, &sv, sched.layerwise_decay, &obj, step))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_student_reference_case() {
        let m = CostModel::new(1.0, vec![1.0, 2.0], 8.0, 6);
        let p = plan_assignment(&m).unwrap();
        assert_eq!(p.workers, vec![2, 4]);
        assert_eq!(p.student_shares, vec![4.0, 4.0]);
        assert!(p.idle.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_student_takes_all() {
        let p = plan_assignment(&CostModel::new(3.0, vec![2.0], 16.0, 5)).unwrap();
        assert_eq!(p.workers, vec![5]);
        assert!(plan_assignment(&CostModel::new(3.0, vec![2.0, 1.0], 16.0, 1)).is_err());
    }

    #[test]
    fn roster_parsing() {
        let r = parse_roster("# name, depth, dim, cost\nsmall, 2, 32, 1.0\nbase, 4, 64, 2.5\n").unwrap();
        assert_eq!(r[1], StudentSpec { name: "base".into(), depth: 4, dim: 64, cost: 2.5 });
        assert!(parse_roster("a, 2, 32").is_err());
        assert!(parse_roster("a, 2, 32, 1\na, 2, 32, 1").is_err());
    }
}
