mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};
use shapeedit_core::diffusion::{make_schedule, SamplerSettings};
use shapeedit_core::evalbench::{ablate, build_bench, edit_with_model, evaluate, write_sample_grid, BenchSet};
use shapeedit_core::instruction::Instruction;
use shapeedit_core::microworld::Raster;
use shapeedit_core::pipeline::{self, Layout, StageOutcome};
use shapeedit_core::record::read_dataset;
use shapeedit_core::scoring::export_distillation;
use shapeedit_core::training::load_checkpoint;

use config::{Keys, Resolved, UsageError};

#[derive(Parser)]
#[command(name = "shapeedit", version, about = "Instruction-guided editing on a procedural shape world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML file with config keys
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Raise log verbosity (-v info, -vv debug)
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,
    #[command(flatten)]
    keys: Keys,
}

#[derive(Subcommand)]
enum Command {
    /// Generate specialist edit records
    Gen(Common),
    /// Score generated records and write a retention report
    Score(Common),
    /// Keep records with importance weight 1
    Filter(Common),
    /// Pretrain the base model, then train the editing model
    Train(Common),
    /// Edit one PPM image with a trained model
    Edit {
        /// Model checkpoint
        #[arg(long)]
        checkpoint: PathBuf,
        /// Source PPM image
        #[arg(long)]
        input: PathBuf,
        /// JSON instruction sidecar (task, args, surface_text)
        #[arg(long)]
        instruction: PathBuf,
        /// Output PPM, relative to the output root
        #[arg(long, default_value = "edits/edit.ppm")]
        output: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on the bench
    Eval {
        /// Model checkpoint [default: <out_root>/checkpoints/model.oemc]
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Bench JSON [default: built from bench_seed and bench_scenes]
        #[arg(long)]
        bench: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Run a seeded ablation over training arms
    Ablate(Common),
    /// Build the evaluation bench
    Bench(Common),
    /// Export scored records as scorer-distillation samples
    ExportDistill(Common),
}

enum Failure {
    Usage(String),
    Op(String),
}

impl From<UsageError> for Failure {
    fn from(e: UsageError) -> Self {
        Failure::Usage(e.0)
    }
}

impl From<shapeedit_core::Error> for Failure {
    fn from(e: shapeedit_core::Error) -> Self {
        Failure::Op(e.to_string())
    }
}

fn setup(common: &Common) -> Result<Resolved, Failure> {
    let level = match common.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).format_timestamp(None).try_init();
    let file = match &common.config {
        Some(p) => config::load_file(p)?,
        None => Keys::default(),
    };
    Ok(config::resolve(&file.overlay(common.keys.clone()))?)
}

fn report(o: StageOutcome) {
    let state = if o.skipped { "up to date" } else { "done" };
    eprintln!("{}: {state}", o.stage.name());
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d).map_err(|e| Failure::Op(format!("{}: {e}", d.display())))?;
    }
    std::fs::write(path, bytes).map_err(|e| Failure::Op(format!("{}: {e}", path.display())))
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Gen(c) => {
            let r = setup(&c)?;
            report(pipeline::stage_gen(&r.pipeline)?);
        }
        Command::Score(c) => {
            let r = setup(&c)?;
            report(pipeline::stage_score(&r.pipeline)?);
            let l = Layout::new(&r.pipeline.out_root);
            print!("{}", std::fs::read_to_string(l.retention_txt()).unwrap_or_default());
        }
        Command::Filter(c) => {
            let r = setup(&c)?;
            report(pipeline::stage_filter(&r.pipeline)?);
        }
        Command::Train(c) => {
            let r = setup(&c)?;
            report(pipeline::stage_pretrain(&r.pipeline)?);
            report(pipeline::stage_train(&r.pipeline)?);
        }
        Command::Edit { checkpoint, input, instruction, output, common } => {
            let r = setup(&common)?;
            let out = config::under_root(&r.pipeline.out_root, &output)?;
            let (params, _) = load_checkpoint::<f32>(&checkpoint)?;
            let src = Raster::read_ppm(&input)?;
            let text = std::fs::read_to_string(&instruction)
                .map_err(|e| Failure::Usage(format!("--instruction {}: {e}", instruction.display())))?;
            let instr: Instruction = serde_json::from_str(&text)
                .map_err(|e| Failure::Usage(format!("--instruction {}: {e}", instruction.display())))?;
            instr.validate().map_err(|e| Failure::Usage(format!("--instruction: {e}")))?;
            let e = &r.pipeline.eval;
            let sched = make_schedule(e.schedule, e.t_max)?;
            let settings = SamplerSettings { steps: e.steps, mode: e.mode, guidance_scale: e.guidance_scale, seed: e.seed };
            let edited = edit_with_model(&params, &src, &instr.surface_text, &sched, &settings)?;
            write_file(&out, &edited.to_ppm())?;
            println!("{}", out.display());
        }
        Command::Eval { checkpoint, bench, common } => {
            let r = setup(&common)?;
            let l = Layout::new(&r.pipeline.out_root);
            let ckpt = checkpoint.unwrap_or_else(|| l.model_ckpt());
            let (params, _) = load_checkpoint::<f32>(&ckpt)?;
            let bench = match bench {
                Some(p) => BenchSet::read(&p)?,
                None => build_bench(r.pipeline.bench_seed, r.pipeline.bench_scenes)?,
            };
            let (rep, outputs) = evaluate(&params, &bench, &r.pipeline.endpoint, &r.pipeline.eval, r.pipeline.workers)?;
            pipeline::write_report(&l.eval_report(), &rep)?;
            if r.pipeline.write_samples {
                write_sample_grid(&l.samples(), &bench, &outputs)?;
            }
            println!("{:<16} {:>6} {:>6} {:>6} {:>6}", "task", "sc", "pq", "o", "acc");
            for (task, m) in rep.per_task.iter().chain([(&"avg".to_string(), &rep.avg)]) {
                println!("{task:<16} {:>6.2} {:>6.2} {:>6.2} {:>6.3}", m.sc, m.pq, m.o, m.acc);
            }
            println!("{}", l.eval_report().display());
        }
        Command::Ablate(c) => {
            let r = setup(&c)?;
            let rep = ablate(&r.ablation, r.pipeline.workers)?;
            let dir = r.pipeline.out_root.join("reports");
            let mut json = serde_json::to_vec_pretty(&rep).map_err(|e| Failure::Op(e.to_string()))?;
            json.push(b'\n');
            write_file(&dir.join("ablation.json"), &json)?;
            write_file(&dir.join("ablation.txt"), rep.to_table().as_bytes())?;
            print!("{}", rep.to_table());
        }
        Command::Bench(c) => {
            let r = setup(&c)?;
            let l = Layout::new(&r.pipeline.out_root);
            let bench = build_bench(r.pipeline.bench_seed, r.pipeline.bench_scenes)?;
            write_file(&l.bench(), &bench.to_json()?)?;
            println!("{} entries -> {}", bench.entries.len(), l.bench().display());
        }
        Command::ExportDistill(c) => {
            let r = setup(&c)?;
            let l = Layout::new(&r.pipeline.out_root);
            let records = read_dataset(&l.scored())?;
            let samples = export_distillation(&records, r.distill_per_task, r.pipeline.gen.seed)?;
            let mut out = Vec::new();
            for s in &samples {
                serde_json::to_writer(&mut out, s).map_err(|e| Failure::Op(e.to_string()))?;
                out.push(b'\n');
            }
            let path = l.scored().with_file_name("distill.jsonl");
            write_file(&path, &out)?;
            println!("{} samples -> {}", samples.len(), path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Op(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
