//! `dfqlab`: teacher training, synthesis, quantized distillation and the
//! study drivers. Every command writes a `<command>_report.json` under
//! `--out` next to its artifacts.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dfqlab::attnsim::{image_coherency, Metric};
use dfqlab::checkpoint::{container_kind, load_model, load_student, load_synth, save_model, save_student, save_synth, Container};
use dfqlab::config::LabConfig;
use dfqlab::data::{LabeledImages, ToyDataset};
use dfqlab::distill::{evaluate_quantized, head_quant_corr_study, run_distillation};
use dfqlab::experiments::{motiv_study, sweep_bits, synth_pairs};
use dfqlab::quant::{BitWidths, QuantConfig, QuantMode, QuantizedViT};
use dfqlab::report::{write_csv, write_text, RunReport};
use dfqlab::synthesis::synthesize;
use dfqlab::train::{evaluate, train_teacher};
use dfqlab::vit::MicroViT;
use dfqlab::LabError;

#[derive(Parser)]
#[command(name = "dfqlab", version, about = "Data-free quantization lab for a micro ViT")]
struct Cli {
    /// TOML file with [data], [model], [train], [synth], [distill], [corr],
    /// [motiv] and [sweep] sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for reports and artifacts.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    /// Seed of the command's own stage (motiv-study: a single pool seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Only log warnings and errors.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct TeacherArg {
    /// Teacher checkpoint [default: <out>/teacher.ckpt]
    #[arg(long)]
    teacher: Option<PathBuf>,
}

#[derive(Args, Clone, Default)]
struct DataArg {
    /// Synthetic set [default: <out>/synth.ckpt]
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args, Clone, Default)]
struct QuantArgs {
    /// Bit widths, e.g. W4A4; 32 disables quantization on that side.
    #[arg(long)]
    quant: Option<BitWidths>,
    /// Activation quantizer: minmax or lsq.
    #[arg(long)]
    quant_mode: Option<QuantMode>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the full-precision teacher on the toy dataset.
    TrainTeacher,
    /// Synthesize images from the teacher.
    Synth {
        #[command(flatten)]
        teacher: TeacherArg,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
        /// Number of images.
        #[arg(long)]
        n: Option<usize>,
        /// Drop the coherency term (writes synth_base.ckpt).
        #[arg(long)]
        base: bool,
    },
    /// Quantize and distill a student on a synthetic set.
    Dfq {
        #[command(flatten)]
        teacher: TeacherArg,
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        quant: QuantArgs,
        #[arg(long)]
        gamma: Option<f64>,
        /// Head-wise distance: dssim, mse, l1 or kl.
        #[arg(long)]
        metric: Option<Metric>,
    },
    /// Held-out accuracy of a teacher or student checkpoint.
    Eval {
        /// Checkpoint to evaluate [default: <out>/student.ckpt]
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Relate head-wise attention distances to accuracy over random
    /// head-quantization settings.
    CorrStudy {
        #[command(flatten)]
        teacher: TeacherArg,
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        quant: QuantArgs,
        /// Number of sampled settings.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Train students on coherency-stratified subsets of base synthesis.
    MotivStudy {
        #[command(flatten)]
        teacher: TeacherArg,
        #[command(flatten)]
        quant: QuantArgs,
        #[arg(long)]
        gamma: Option<f64>,
    },
    /// Vary weight and activation bits one at a time.
    SweepBits {
        #[command(flatten)]
        teacher: TeacherArg,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        quant_mode: Option<QuantMode>,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        metric: Option<Metric>,
    },
    /// Collect the metrics of every report under --out into summary.csv.
    Report,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                LabError::Config { .. } => 2,
                LabError::MissingCheckpoint(_) => 3,
                _ => 1,
            })
        }
    }
}

struct Ctx {
    cfg: LabConfig,
    out: PathBuf,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn teacher(&self, arg: &TeacherArg) -> dfqlab::Result<MicroViT> {
        load_model(&arg.teacher.clone().unwrap_or_else(|| self.path("teacher.ckpt")))
    }

    fn data_path(&self, arg: &DataArg) -> PathBuf {
        arg.data.clone().unwrap_or_else(|| self.path("synth.ckpt"))
    }

    fn eval_set(&self) -> dfqlab::Result<LabeledImages> {
        Ok(ToyDataset::generate(&self.cfg.data)?.test)
    }

    fn finish(&self, report: &RunReport, name: &str) -> dfqlab::Result<()> {
        let path = self.path(&format!("{name}_report.json"));
        report.save(&path)?;
        log::info!("wrote {}", path.display());
        Ok(())
    }
}

fn apply_quant(cfg: &mut LabConfig, q: &QuantArgs) {
    if let Some(b) = q.quant {
        cfg.distill.bits = b;
        cfg.corr.bits = b;
        cfg.motiv.bits = b;
    }
    if let Some(m) = q.quant_mode {
        cfg.distill.mode = m;
        cfg.corr.mode = m;
    }
}

fn run(cli: Cli) -> dfqlab::Result<()> {
    let mut cfg = match &cli.config {
        Some(p) if !p.exists() => return Err(LabError::config("--config", format!("{} does not exist", p.display()))),
        Some(p) => LabConfig::load(p)?,
        None => LabConfig::default(),
    };
    let seed = cli.seed;
    match &cli.command {
        Command::TrainTeacher => {
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
        }
        Command::Synth { alpha, beta, n, base, .. } => {
            if let Some(s) = seed {
                cfg.synth.seed = s;
            }
            cfg.synth.alpha = alpha.unwrap_or(cfg.synth.alpha);
            cfg.synth.beta = beta.unwrap_or(cfg.synth.beta);
            cfg.synth.samples_total = n.unwrap_or(cfg.synth.samples_total);
            if *base {
                cfg.synth.coherency = false;
            }
        }
        Command::Dfq {
            quant, gamma, metric, ..
        } => {
            apply_quant(&mut cfg, quant);
            if let Some(s) = seed {
                cfg.distill.seed = s;
            }
            cfg.distill.gamma = gamma.unwrap_or(cfg.distill.gamma);
            cfg.distill.metric = metric.unwrap_or(cfg.distill.metric);
        }
        Command::Eval { .. } | Command::Report => {}
        Command::CorrStudy { quant, n, .. } => {
            apply_quant(&mut cfg, quant);
            if let Some(s) = seed {
                cfg.corr.seed = s;
            }
            cfg.corr.n_configs = n.unwrap_or(cfg.corr.n_configs);
        }
        Command::MotivStudy { quant, gamma, .. } => {
            apply_quant(&mut cfg, quant);
            if let Some(s) = seed {
                cfg.motiv.seeds = vec![s];
            }
            cfg.motiv.gamma = gamma.unwrap_or(cfg.motiv.gamma);
        }
        Command::SweepBits {
            quant_mode,
            gamma,
            metric,
            ..
        } => {
            if let Some(s) = seed {
                cfg.distill.seed = s;
            }
            if let Some(m) = quant_mode {
                cfg.distill.mode = *m;
            }
            cfg.distill.gamma = gamma.unwrap_or(cfg.distill.gamma);
            cfg.distill.metric = metric.unwrap_or(cfg.distill.metric);
        }
    }
    cfg.validate()?;
    fs::create_dir_all(&cli.out)?;
    let ctx = Ctx { cfg, out: cli.out };
    match cli.command {
        Command::TrainTeacher => cmd_train_teacher(&ctx),
        Command::Synth { teacher, base, .. } => cmd_synth(&ctx, &teacher, base),
        Command::Dfq { teacher, data, .. } => cmd_dfq(&ctx, &teacher, &data),
        Command::Eval { model } => cmd_eval(&ctx, model),
        Command::CorrStudy { teacher, data, .. } => cmd_corr(&ctx, &teacher, &data),
        Command::MotivStudy { teacher, .. } => cmd_motiv(&ctx, &teacher),
        Command::SweepBits { teacher, data, .. } => cmd_sweep(&ctx, &teacher, &data),
        Command::Report => cmd_report(&ctx),
    }
}

fn cmd_train_teacher(ctx: &Ctx) -> dfqlab::Result<()> {
    let ds = ToyDataset::generate(&ctx.cfg.data)?;
    let out = train_teacher(&ctx.cfg.model, &ds.train, &ds.test, &ctx.cfg.train)?;
    save_model(&out.model, &ctx.path("teacher.ckpt"))?;
    let mut r = RunReport::new("train-teacher", &ctx.cfg);
    r.metric("accuracy", out.best_accuracy)
        .metric("best_epoch", out.best_epoch as f64)
        .metric("parameters", out.model.num_params() as f64)
        .series("train_loss", out.log.iter().map(|e| e.train_loss).collect())
        .series("train_accuracy", out.log.iter().map(|e| e.train_accuracy).collect())
        .series("eval_accuracy", out.log.iter().map(|e| e.eval_accuracy).collect())
        .artifact("teacher.ckpt");
    ctx.finish(&r, "train-teacher")
}

fn cmd_synth(ctx: &Ctx, teacher: &TeacherArg, base: bool) -> dfqlab::Result<()> {
    let t = ctx.teacher(teacher)?;
    let set = synthesize(&t, &ctx.cfg.synth)?;
    let name = if base { "synth_base.ckpt" } else { "synth.ckpt" };
    save_synth(&set, &ctx.cfg.synth, &ctx.path(name))?;
    let preds = t.predict(&set.images, 256)?;
    let mut r = RunReport::new("synth", &ctx.cfg);
    r.metric("mean_coherency", set.mean_coherency())
        .metric("teacher_label_agreement", dfqlab::vit::accuracy(&preds, &set.labels))
        .metric("restarts", set.batches.iter().map(|b| b.restarts).sum::<usize>() as f64);
    if let Some(b) = set.batches.first() {
        r.series("batch0_objective", b.history.iter().map(|(_, t)| t.total).collect());
    }
    r.artifact(name);
    ctx.finish(&r, if base { "synth_base" } else { "synth" })
}

fn cmd_dfq(ctx: &Ctx, teacher: &TeacherArg, data: &DataArg) -> dfqlab::Result<()> {
    let t = ctx.teacher(teacher)?;
    let (set, _) = load_synth(&ctx.data_path(data))?;
    let eval = ctx.eval_set()?;
    let d = &ctx.cfg.distill;
    let mut q = QuantizedViT::new(t.clone(), QuantConfig { bits: d.bits, mode: d.mode, ema_momentum: d.ema_momentum })?;
    q.calibrate(&set.images, d.batch)?;
    let calibrated = evaluate_quantized(&q, &eval, 256)?;
    let out = run_distillation(&t, &set.images, &eval, d)?;
    save_student(&out.student, &ctx.path("student.ckpt"))?;
    let mut r = RunReport::new("dfq", &ctx.cfg);
    r.metric("accuracy", out.log.accuracy())
        .metric("final_accuracy", out.log.final_accuracy)
        .metric("best_accuracy", out.log.best_accuracy)
        .metric("best_epoch", out.log.best_epoch as f64)
        .metric("calibrated_accuracy", calibrated)
        .metric("teacher_accuracy", evaluate(&t, &eval, 256)?)
        .series("loss", out.log.epochs.iter().map(|e| e.loss).collect())
        .series("kl", out.log.epochs.iter().map(|e| e.kl).collect())
        .series("had", out.log.epochs.iter().map(|e| e.had).collect())
        .series(
            "eval_accuracy",
            out.log.epochs.iter().map(|e| e.eval_accuracy.unwrap_or(f64::NAN)).collect(),
        )
        .artifact("student.ckpt");
    ctx.finish(&r, "dfq")
}

fn cmd_eval(ctx: &Ctx, model: Option<PathBuf>) -> dfqlab::Result<()> {
    let path = model.unwrap_or_else(|| ctx.path("student.ckpt"));
    let kind = container_kind(&Container::load(&path)?);
    let eval = ctx.eval_set()?;
    let mut r = RunReport::new("eval", &ctx.cfg);
    let fp = match kind.as_deref() {
        Some("student") => {
            let q = load_student(&path)?;
            r.metric("accuracy", evaluate_quantized(&q, &eval, 256)?);
            q.model
        }
        Some("model") => {
            let m = load_model(&path)?;
            r.metric("accuracy", evaluate(&m, &eval, 256)?);
            m
        }
        other => return Err(LabError::Format(format!("cannot evaluate a {other:?} container"))),
    };
    let coh = image_coherency(&fp, &eval.images, ctx.cfg.synth.map_source, 256)?;
    r.metric("held_out_mean_coherency", coh.iter().sum::<f64>() / coh.len() as f64);
    ctx.finish(&r, "eval")
}

fn cmd_corr(ctx: &Ctx, teacher: &TeacherArg, data: &DataArg) -> dfqlab::Result<()> {
    let t = ctx.teacher(teacher)?;
    let (set, _) = load_synth(&ctx.data_path(data))?;
    let eval = ctx.eval_set()?;
    let st = head_quant_corr_study(&t, &eval, &set.images, &ctx.cfg.corr)?;
    write_text(&ctx.path("corr_table.csv"), &st.table_csv())?;
    write_text(&ctx.path("corr_scatter.csv"), &st.scatter_csv())?;
    let mut r = RunReport::new("corr-study", &ctx.cfg);
    for e in &st.table {
        r.metric(format!("spearman_abs.{}", e.metric), e.spearman_abs.unwrap_or(f64::NAN));
        r.metric(format!("kendall_abs.{}", e.metric), e.kendall_abs.unwrap_or(f64::NAN));
    }
    r.artifact("corr_table.csv").artifact("corr_scatter.csv");
    ctx.finish(&r, "corr-study")
}

fn cmd_motiv(ctx: &Ctx, teacher: &TeacherArg) -> dfqlab::Result<()> {
    let t = ctx.teacher(teacher)?;
    let eval = ctx.eval_set()?;
    let pairs = synth_pairs(&t, &ctx.cfg)?;
    let st = motiv_study(&t, &pairs, &eval, &ctx.cfg.distill, &ctx.cfg.motiv)?;
    write_csv(&ctx.path("motiv_histogram.csv"), &st.histogram)?;
    write_csv(&ctx.path("motiv_runs.csv"), &st.runs)?;
    let mut r = RunReport::new("motiv-study", &ctx.cfg);
    for (k, v) in &st.mean_accuracy {
        r.metric(format!("accuracy.{k}"), *v);
    }
    r.metric("base_mean_coherency", st.base_mean_coherency)
        .metric("coherent_mean_coherency", st.coherent_mean_coherency)
        .metric("high_minus_low", st.high_minus_low())
        .artifact("motiv_histogram.csv")
        .artifact("motiv_runs.csv");
    ctx.finish(&r, "motiv-study")
}

fn cmd_sweep(ctx: &Ctx, teacher: &TeacherArg, data: &DataArg) -> dfqlab::Result<()> {
    let t = ctx.teacher(teacher)?;
    let (set, _) = load_synth(&ctx.data_path(data))?;
    let eval = ctx.eval_set()?;
    let st = sweep_bits(&t, &set.images, &eval, &ctx.cfg.distill, &ctx.cfg.sweep)?;
    write_csv(&ctx.path("sweep.csv"), &st.rows)?;
    let mut r = RunReport::new("sweep-bits", &ctx.cfg);
    for row in &st.rows {
        r.metric(format!("accuracy.{}", row.bits), row.accuracy);
    }
    r.metric("act_delta", st.act_delta)
        .metric("weight_delta", st.weight_delta)
        .artifact("sweep.csv");
    ctx.finish(&r, "sweep-bits")
}

#[derive(serde::Serialize)]
struct SummaryRow {
    report: String,
    command: String,
    metric: String,
    value: Option<f64>,
}

fn cmd_report(ctx: &Ctx) -> dfqlab::Result<()> {
    let mut names: Vec<String> = fs::read_dir(&ctx.out)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with("_report.json"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(LabError::MissingCheckpoint(ctx.out.join("*_report.json")));
    }
    let mut rows = Vec::new();
    for n in &names {
        let r = RunReport::load(&ctx.out.join(n))?;
        for (k, v) in &r.metrics {
            rows.push(SummaryRow {
                report: n.clone(),
                command: r.command.clone(),
                metric: k.clone(),
                value: *v,
            });
        }
    }
    let path = ctx.path("summary.csv");
    write_csv(&path, &rows)?;
    print!("{}", fs::read_to_string(&path)?);
    Ok(())
}
