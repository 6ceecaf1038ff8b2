use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gramssl_core::diagnostics::LinearProbeConfig;
use gramssl_core::error::Result;
use gramssl_core::runner::{self, CurateOptions, DiagnoseOptions, DistillOptions, Embedding, Lineage, ProbeOptions, SimulateOptions};
use gramssl_core::train::TrainPhase;

#[derive(Parser, Debug)]
#[command(name = "gramssl", version, about = "Desk-scale self-supervised ViT training with Gram anchoring")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// `key = value` config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key (repeatable), applied after the file
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Master seed; shorthand for `--set seed=N`
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn overrides(&self) -> Vec<String> {
        let mut o = self.overrides.clone();
        if let Some(s) = self.seed {
            o.push(format!("seed={s}"));
        }
        o
    }

    fn load(&self, phase: TrainPhase) -> Result<gramssl_core::train::TrainConfig> {
        runner::load_config(phase, self.config.as_deref(), &self.overrides())
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Run directory; an existing one is resumed from its latest checkpoint
    #[arg(long)]
    run_dir: PathBuf,
}

#[derive(Args, Debug)]
struct ContinueArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// Checkpoint to continue from
    #[arg(long)]
    from: Option<PathBuf>,
    /// Gram teacher checkpoint (default: sibling step_<gram.source_step>.ckpt of --from)
    #[arg(long)]
    gram_teacher: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pre-train from scratch
    Pretrain(TrainArgs),
    /// Continue with Gram anchoring
    Refine(ContinueArgs),
    /// Mixed-resolution adaptation with Gram anchoring
    HiresAdapt(ContinueArgs),
    /// Train a roster of students against a frozen teacher
    Distill {
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        teacher: PathBuf,
        /// Lines of `name, depth, dim, cost`
        #[arg(long)]
        roster: PathBuf,
    },
    /// Hierarchical k-means and balanced sampling of the training pool
    Curate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Cluster counts, finest first
        #[arg(long, value_delimiter = ',', default_value = "32,8")]
        levels: Vec<usize>,
        #[arg(long)]
        sample: usize,
        /// Embed with this checkpoint's CLS features instead of pooled pixels
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        pixel_side: usize,
        #[arg(long, default_value_t = 50)]
        max_iter: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// kNN and linear probes on frozen CLS features
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        knn_k: usize,
        /// Also run the linear probe grid
        #[arg(long)]
        linear: bool,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        train_size: Option<usize>,
        #[arg(long)]
        test_size: Option<usize>,
    },
    /// PCA image, cosine map and locality of one held-out image
    Diagnose {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Block index, 1..=depth (default: final output)
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long)]
        resolution: Option<usize>,
        #[arg(long, default_value_t = 0)]
        image: usize,
        /// PCA sign/permutation variant 0..48 (default: automatic)
        #[arg(long)]
        variant: Option<usize>,
        #[arg(long, default_value_t = 1)]
        radius: usize,
    },
    /// Worker assignment and one simulated iteration of multi-student distillation
    SimulateDistill {
        #[arg(long)]
        roster: PathBuf,
        #[arg(long)]
        teacher_cost: f64,
        #[arg(long)]
        workers: usize,
        #[arg(long)]
        batch_size: f64,
        #[arg(long, default_value_t = 0.0)]
        allgather_cost: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn train(phase: TrainPhase, args: &TrainArgs, lineage: Lineage) -> Result<()> {
    let cfg = args.config.load(phase)?;
    let out = runner::train(phase, cfg, &args.run_dir, &lineage)?;
    let verb = if out.resumed { "resumed" } else { "ran" };
    println!("{phase}: {verb} steps {}..{} in {}", out.start_step, out.end_step, out.run_dir.display());
    println!("last checkpoint: {}", out.last_checkpoint.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    runner::init_threads()?;
    match cli.command {
        Command::Pretrain(a) => train(TrainPhase::Pretrain, &a, Lineage::default()),
        Command::Refine(a) => train(TrainPhase::Refine, &a.train, Lineage { from: a.from, gram_teacher: a.gram_teacher }),
        Command::HiresAdapt(a) => train(TrainPhase::Adapt, &a.train, Lineage { from: a.from, gram_teacher: a.gram_teacher }),
        Command::Distill { train, teacher, roster } => {
            let opts = DistillOptions { teacher, roster: runner::read_roster(&roster)?, cfg: train.config.load(TrainPhase::Pretrain)? };
            for p in runner::distill(&opts, &train.run_dir)? {
                println!("student checkpoint: {}", p.display());
            }
            Ok(())
        }
        Command::Curate { config, levels, sample, checkpoint, pixel_side, max_iter, out } => {
            let embedding = checkpoint.map_or(Embedding::Pixels { side: pixel_side }, Embedding::Checkpoint);
            let opts = CurateOptions { cfg: config.load(TrainPhase::Pretrain)?, embedding, levels, sample, max_iter };
            let (ids, report) = runner::curate(&opts, &out)?;
            println!("sampled {} of {} requested into {}", ids.len(), sample, out.join("index.txt").display());
            for (l, e) in report.entropy.iter().enumerate() {
                println!("level {l}: occupancy entropy {e:.4}");
            }
            Ok(())
        }
        Command::Probe { checkpoint, out, knn_k, linear, epochs, train_size, test_size } => {
            let linear = linear.then(|| {
                let d = LinearProbeConfig::default();
                LinearProbeConfig { epochs: epochs.unwrap_or(d.epochs), ..d }
            });
            for r in runner::probe(&ProbeOptions { checkpoint, knn_k, linear, train_size, test_size }, &out)? {
                println!("{} {}: {:.4}", r.task, r.metric, r.value);
            }
            Ok(())
        }
        Command::Diagnose { checkpoint, out, layer, resolution, image, variant, radius } => {
            let rep = runner::diagnose(&DiagnoseOptions { checkpoint, layer, resolution, image, variant, radius }, &out)?;
            println!(
                "layer {} at {}px: locality {:.4}, cls-patch cosine {:.4}, pca variant {}",
                rep.features.provenance.layer, rep.features.provenance.resolution, rep.locality, rep.cls_patch_cosine, rep.pca.variant
            );
            Ok(())
        }
        Command::SimulateDistill { roster, teacher_cost, workers, batch_size, allgather_cost, out } => {
            let opts = SimulateOptions { roster: runner::read_roster(&roster)?, teacher_cost, workers, batch_size, allgather_cost };
            let (plan, timeline) = runner::simulate_distill(&opts, &out)?;
            print!("{}", plan.to_csv());
            println!("makespan {}", timeline.makespan);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(runner::exit_code(&e) as u8)
        }
    }
}
