//! `progalign` command-line driver: every pipeline step as a subcommand
//! plus `run-all`. Outputs land under `--out`; each successful command
//! writes `manifest.json` there.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use progalign::curriculum::CurriculumSchedule;
use progalign::data_io::{
    read_pseudo_labels, write_embeddings, write_labels, write_metrics_csv, write_pseudo_labels, Checkpoint,
    Config, DomainDataset,
};
use progalign::pseudo_labeler::{source_models_checkpoint, source_models_from_checkpoint, SourceModel};
use progalign::rehearse_pipeline::{
    ensemble_predict, evaluate, initial_labels, initial_params, initial_schedule, restore, run_stages,
    train_source_models, PipelineData, PipelineRun, PipelineState,
};
use progalign::{Error, Tensor};

const SOURCE_MODELS: &str = "source_models.ckpt";
const PSEUDO_LABELS: &str = "pseudo_labels.plbl";
const SCHEDULE: &str = "schedule.txt";
const FINAL: &str = "final.ckpt";
const METRICS: &str = "metrics.csv";

#[derive(Parser, Debug)]
#[command(name = "progalign", version, about = "Progressive multi-source prompt alignment on a toy dual encoder")]
struct Cli {
    /// Configuration file (`key = value` lines).
    #[arg(long, global = true, env = "PROGALIGN_CONFIG")]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Renders the synthetic domains to files.
    Synth,
    /// Trains one source-only model per source domain.
    PretrainSource,
    /// Labels the target by ensemble vote of the source models.
    PseudoLabel(PseudoLabelArgs),
    /// Builds the curriculum schedule from initial pseudo-labels.
    Schedule(ScheduleArgs),
    /// Runs the curriculum stages.
    Train(TrainArgs),
    /// Writes final ensembled target predictions.
    Infer(CheckpointArgs),
    /// Reports target accuracy of a checkpoint against held-out labels.
    Evaluate(CheckpointArgs),
    /// All steps in sequence.
    RunAll,
}

#[derive(Args, Debug)]
struct PseudoLabelArgs {
    /// Source-model checkpoint (default: `<out>/source_models.ckpt`).
    #[arg(long)]
    models: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ScheduleArgs {
    /// Initial pseudo-labels (default: `<out>/pseudo_labels.plbl`).
    #[arg(long)]
    labels: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    models: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Schedule file (default: `<out>/schedule.txt`).
    #[arg(long)]
    schedule: Option<PathBuf>,
    /// Continue from a stage checkpoint instead of starting fresh.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many stages in total.
    #[arg(long)]
    stop_after: Option<usize>,
}

#[derive(Args, Debug)]
struct CheckpointArgs {
    /// Checkpoint to load (default: `<out>/final.ckpt`).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

/// Exit status 1: bad input or configuration; 2: failure while running.
#[derive(Debug)]
enum Failure {
    Invalid(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Validation { .. } | Error::Config(_) | Error::Contract(_) | Error::Format { .. } => {
                Failure::Invalid(e.to_string())
            }
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

type Outcome<T> = Result<T, Failure>;

struct Ctx {
    cfg: Config,
    out: PathBuf,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn input(&self, given: &Option<PathBuf>, default: &str, what: &str) -> Outcome<PathBuf> {
        let p = given.clone().unwrap_or_else(|| self.path(default));
        if !p.is_file() {
            return Err(Failure::Invalid(format!("{what} not found at {}", p.display())));
        }
        Ok(p)
    }

    fn data(&self) -> Outcome<(PipelineData<f32>, Vec<usize>)> {
        Ok(PipelineData::synthetic(&self.cfg)?)
    }

    fn manifest(&self, command: &str, body: Value) -> Outcome<()> {
        let mut m = json!({
            "command": command,
            "seed": self.cfg.seed,
            "config": self.cfg.render(),
        });
        if let (Value::Object(m), Value::Object(b)) = (&mut m, body) {
            m.extend(b);
        }
        let text = serde_json::to_string_pretty(&m).map_err(|e| Failure::Runtime(e.to_string()))?;
        write(&self.path("manifest.json"), text.as_bytes())
    }
}

fn write(path: &Path, bytes: &[u8]) -> Outcome<()> {
    fs::write(path, bytes).map_err(|e| Failure::Runtime(format!("writing {}: {e}", path.display())))
}

fn load_config(cli: &Cli) -> Outcome<Config> {
    let mut cfg = match &cli.config {
        Some(p) => {
            if !p.is_file() {
                return Err(Failure::Invalid(format!("config file {} not found", p.display())));
            }
            Config::load(p).map_err(|e| Failure::Invalid(e.to_string()))?
        }
        None => Config::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(|e| Failure::Invalid(e.to_string()))?;
    Ok(cfg)
}

fn flatten(samples: &[Tensor<f32>]) -> Outcome<Tensor<f32>> {
    let dim = samples.first().map_or(0, |s| s.numel());
    let data = samples.iter().flat_map(|s| s.data().iter().copied()).collect();
    Ok(Tensor::new([samples.len(), dim], data)?)
}

fn synth(ctx: &Ctx) -> Outcome<Value> {
    let (data, truth) = ctx.data()?;
    let dir = ctx.path("data");
    fs::create_dir_all(&dir).map_err(|e| Failure::Runtime(e.to_string()))?;
    let mut files = Vec::new();
    let mut save = |ds: &DomainDataset<f32>, name: &str, labels: &[usize]| -> Outcome<()> {
        write_embeddings(&dir.join(format!("{name}.img")), &flatten(&ds.samples)?)?;
        write_labels(&dir.join(format!("{name}.lbl")), labels)?;
        files.push(format!("data/{name}.img"));
        files.push(format!("data/{name}.lbl"));
        Ok(())
    };
    for s in &data.sources {
        save(s, &format!("source{}", s.domain), s.labels.as_deref().unwrap_or_default())?;
    }
    save(&data.target, "target", &truth)?;
    Ok(json!({ "files": files, "encoder_checksum": data.encoder.checksum() }))
}

fn pretrain(ctx: &Ctx, data: &PipelineData<f32>) -> Outcome<(Vec<SourceModel<f32>>, Value)> {
    let models = train_source_models(&ctx.cfg, data)?;
    source_models_checkpoint(&ctx.cfg, &models)?.write(&ctx.path(SOURCE_MODELS))?;
    let info = json!({
        "source_models": SOURCE_MODELS,
        "source_accuracy": models.iter().map(|m| m.source_accuracy).collect::<Vec<_>>(),
        "loss_curves": models.iter().map(|m| m.loss_curve.clone()).collect::<Vec<_>>(),
    });
    Ok((models, info))
}

fn load_models(ctx: &Ctx, given: &Option<PathBuf>) -> Outcome<Vec<SourceModel<f32>>> {
    let p = ctx.input(given, SOURCE_MODELS, "source-model checkpoint")?;
    Ok(source_models_from_checkpoint(&ctx.cfg, &Checkpoint::read(&p)?)?)
}

fn pseudo_label(ctx: &Ctx, data: &PipelineData<f32>, models: &[SourceModel<f32>]) -> Outcome<Value> {
    let records = initial_labels(&ctx.cfg, data, models)?;
    write_pseudo_labels(&ctx.path(PSEUDO_LABELS), &records)?;
    Ok(json!({
        "pseudo_labels": PSEUDO_LABELS,
        "records": records.len(),
        "accepted": records.iter().filter(|r| r.accepted).count(),
    }))
}

fn schedule(ctx: &Ctx, data: &PipelineData<f32>, labels: &Path) -> Outcome<(CurriculumSchedule, Value)> {
    let records = read_pseudo_labels(labels)?;
    let sched = initial_schedule(&ctx.cfg, data, &records)?;
    let text = sched.to_text();
    write(&ctx.path(SCHEDULE), text.as_bytes())?;
    print!("{text}");
    Ok((sched.clone(), json!({ "schedule": SCHEDULE, "clusters": schedule_json(&sched) })))
}

fn schedule_json(s: &CurriculumSchedule) -> Value {
    s.order
        .iter()
        .map(|&c| json!({ "cluster": c, "score": s.scores[c], "classes": s.clusters[c] }))
        .collect()
}

fn finish_training(ctx: &Ctx, run: &PipelineRun<f32>) -> Outcome<Value> {
    let dir = ctx.path("checkpoints");
    fs::create_dir_all(&dir).map_err(|e| Failure::Runtime(e.to_string()))?;
    let mut stage_files = Vec::new();
    for ck in &run.checkpoints {
        let name = format!("checkpoints/stage{}.ckpt", ck.stage);
        ck.write(&ctx.path(&name))?;
        stage_files.push(name);
    }
    let last = run.checkpoint()?;
    last.write(&ctx.path(FINAL))?;
    let mut csv = Vec::new();
    write_metrics_csv(&mut csv, &run.state.metrics)?;
    write(&ctx.path(METRICS), &csv)?;
    Ok(json!({
        "checkpoint": FINAL,
        "checkpoint_digest": last.digest()?,
        "stage_checkpoints": stage_files,
        "metrics": METRICS,
        "stages_done": run.state.stages_done,
        "schedule_clusters": schedule_json(&run.state.schedule),
        "encoder_checksum": run.encoder_checksum,
    }))
}

fn train(ctx: &Ctx, data: &PipelineData<f32>, args: &TrainArgs) -> Outcome<Value> {
    let (state, params) = match &args.resume {
        Some(p) => {
            if !p.is_file() {
                return Err(Failure::Invalid(format!("checkpoint not found at {}", p.display())));
            }
            restore(&ctx.cfg, &Checkpoint::read(p)?)?
        }
        None => {
            let models = load_models(ctx, &args.models)?;
            let labels = read_pseudo_labels(&ctx.input(&args.labels, PSEUDO_LABELS, "pseudo-label file")?)?;
            let sched_path = ctx.input(&args.schedule, SCHEDULE, "schedule file")?;
            let text = fs::read_to_string(&sched_path).map_err(|e| Failure::Runtime(e.to_string()))?;
            let sched = CurriculumSchedule::from_text(&text)?;
            sched.validate(ctx.cfg.classes)?;
            let acc = models.iter().map(|m| m.source_accuracy).collect();
            (PipelineState::new(labels, sched, acc), initial_params(&ctx.cfg)?)
        }
    };
    let run = run_stages(&ctx.cfg, data, state, params, args.stop_after)?;
    finish_training(ctx, &run)
}

fn load_checkpoint(ctx: &Ctx, args: &CheckpointArgs) -> Outcome<Checkpoint> {
    let p = ctx.input(&args.checkpoint, FINAL, "checkpoint")?;
    Ok(Checkpoint::read(&p)?)
}

fn infer(ctx: &Ctx, data: &PipelineData<f32>, ckpt: &Checkpoint) -> Outcome<Value> {
    let (_, params) = restore::<f32>(&ctx.cfg, ckpt)?;
    let (pred, _) = ensemble_predict(&data.encoder, &params, &data.target.samples)?;
    write_labels(&ctx.path("predictions.lbl"), &pred)?;
    Ok(json!({ "predictions": "predictions.lbl", "count": pred.len() }))
}

fn evaluate_cmd(ctx: &Ctx, data: &PipelineData<f32>, truth: &[usize], ckpt: &Checkpoint) -> Outcome<Value> {
    let (_, params) = restore::<f32>(&ctx.cfg, ckpt)?;
    let acc = evaluate(&data.encoder, &params, &data.target.samples, truth)?;
    let zero_shot = evaluate(&data.encoder, &initial_params(&ctx.cfg)?, &data.target.samples, truth)?;
    println!("accuracy {acc:.4} (zero-shot {zero_shot:.4})");
    let report = json!({ "accuracy": acc, "zero_shot": zero_shot, "stage": ckpt.stage });
    let text = serde_json::to_string_pretty(&report).map_err(|e| Failure::Runtime(e.to_string()))?;
    write(&ctx.path("evaluation.json"), text.as_bytes())?;
    Ok(json!({ "evaluation": "evaluation.json", "accuracy": acc, "zero_shot": zero_shot }))
}

fn run_all(ctx: &Ctx) -> Outcome<Value> {
    let mut body = synth(ctx)?;
    let (data, truth) = ctx.data()?;
    let (models, info) = pretrain(ctx, &data)?;
    merge(&mut body, info);
    merge(&mut body, pseudo_label(ctx, &data, &models)?);
    let (_, info) = schedule(ctx, &data, &ctx.path(PSEUDO_LABELS))?;
    merge(&mut body, info);
    let train_args = TrainArgs {
        models: None,
        labels: None,
        schedule: None,
        resume: None,
        stop_after: None,
    };
    merge(&mut body, train(ctx, &data, &train_args)?);
    let ckpt = Checkpoint::read(&ctx.path(FINAL))?;
    merge(&mut body, infer(ctx, &data, &ckpt)?);
    merge(&mut body, evaluate_cmd(ctx, &data, &truth, &ckpt)?);
    Ok(body)
}

fn merge(into: &mut Value, from: Value) {
    if let (Value::Object(a), Value::Object(b)) = (into, from) {
        a.extend(b);
    }
}

fn dispatch(cli: &Cli) -> Outcome<()> {
    let cfg = load_config(cli)?;
    if let Some(w) = cli.workers {
        if w == 0 {
            return Err(Failure::Invalid("--workers must be at least 1".into()));
        }
        // only fails if a pool already exists, which is harmless
        let _ = rayon::ThreadPoolBuilder::new().num_threads(w).build_global();
    }
    fs::create_dir_all(&cli.out).map_err(|e| Failure::Runtime(format!("creating {}: {e}", cli.out.display())))?;
    let ctx = Ctx {
        cfg,
        out: cli.out.clone(),
    };
    let (name, body) = match &cli.command {
        Command::Synth => ("synth", synth(&ctx)?),
        Command::PretrainSource => {
            let (data, _) = ctx.data()?;
            ("pretrain-source", pretrain(&ctx, &data)?.1)
        }
        Command::PseudoLabel(a) => {
            let models = load_models(&ctx, &a.models)?;
            let (data, _) = ctx.data()?;
            ("pseudo-label", pseudo_label(&ctx, &data, &models)?)
        }
        Command::Schedule(a) => {
            let labels = ctx.input(&a.labels, PSEUDO_LABELS, "pseudo-label file")?;
            let (data, _) = ctx.data()?;
            ("schedule", schedule(&ctx, &data, &labels)?.1)
        }
        Command::Train(a) => {
            let (data, _) = ctx.data()?;
            ("train", train(&ctx, &data, a)?)
        }
        Command::Infer(a) => {
            let ckpt = load_checkpoint(&ctx, a)?;
            let (data, _) = ctx.data()?;
            ("infer", infer(&ctx, &data, &ckpt)?)
        }
        Command::Evaluate(a) => {
            let ckpt = load_checkpoint(&ctx, a)?;
            let (data, truth) = ctx.data()?;
            ("evaluate", evaluate_cmd(&ctx, &data, &truth, &ckpt)?)
        }
        Command::RunAll => ("run-all", run_all(&ctx)?),
    };
    ctx.manifest(name, body)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
