//! `dkit` command-line interface.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Parser, Subcommand, ValueEnum};

use dkit::config::RunConfig;
use dkit::evaluation::{evaluate, EvalOptions, Oracle};
use dkit::metrics::{embed_samples, flow_probe, pca_2d, read_rows_csv, write_rows_csv, Report, ReportRow};
use dkit::model::objective::{EncoderLoss, GrlMode};
use dkit::model::ReferenceTransform;
use dkit::numerics::derive_seed;
use dkit::selfaug::AugMode;
use dkit::synthdata::{load_dataset, make_dataset, save_dataset, Dataset, FactorSample};
use dkit::trainer::{load_checkpoint, save_checkpoint, train, write_history, Checkpoint, TrainOptions};
use dkit::Error;

#[derive(Parser)]
#[command(name = "dkit", version, about = "Speaker/emotion disentanglement experiments on synthetic factor data")]
struct Cli {
    /// Run configuration (JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the training seed (dataset seed for gen-data).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    /// Suppress progress output.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    GenData,
    /// Train both stages and write checkpoints plus metrics history.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint into a report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// LK-CKA per flow step.
    FlowProbe {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// 2-D PCA coordinates of held-out emotion embeddings.
    Project {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train and evaluate one run per axis value and seed.
    Sweep {
        #[arg(long, value_enum)]
        axis: Axis,
        /// Replicates per axis value.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        /// Use an existing dataset instead of generating one from the config.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Merge report.json files into one report and a mean/std summary.
    Report {
        /// Report files, or directories searched recursively for report.json.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
enum Axis {
    GrlMode,
    EncoderLoss,
    AugProportion,
    AugMode,
    ReferenceTransform,
}

/// Failure with the process exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::Json(_) | Error::InvalidSpec(_) | Error::InvalidProportion(_) => 2,
            Error::Io(_) => 3,
            Error::NonFiniteLoss { .. } => 4,
            Error::Format(_) => 5,
            _ => 1,
        };
        Failure { code, message: e.to_string() }
    }
}

type CliResult<T> = Result<T, Failure>;

fn io_failure(message: String) -> Failure {
    Failure { code: 3, message }
}

fn config_failure(e: Error, path: &Path) -> Failure {
    let mut f = Failure::from(e);
    if f.code == 3 {
        f.message = format!("cannot read config {}: {}", path.display(), f.message);
    } else {
        f.code = 2;
        f.message = format!("invalid config {}: {}", path.display(), f.message);
    }
    f
}

struct Ctx {
    config: RunConfig,
    /// Whether `--config` was given; resumed runs otherwise keep the
    /// checkpoint's own configuration.
    config_given: bool,
    seed: Option<u64>,
    out: Option<PathBuf>,
    force: bool,
    quiet: bool,
}

impl Ctx {
    fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn out(&self) -> CliResult<&Path> {
        self.out.as_deref().ok_or_else(|| Failure { code: 2, message: "--out is required".into() })
    }

    /// Training-side config with the `--seed` override applied.
    fn run_config(&self) -> RunConfig {
        match self.seed {
            Some(s) => self.config.clone().with_seed(s),
            None => self.config.clone(),
        }
    }
}

/// Creates `dir`, refusing a non-empty existing directory without `--force`.
fn prepare_dir(dir: &Path, force: bool) -> CliResult<()> {
    if dir.exists() {
        if !dir.is_dir() {
            return Err(io_failure(format!("{} exists and is not a directory", dir.display())));
        }
        let non_empty = fs::read_dir(dir).map_err(Error::from)?.next().is_some();
        if non_empty && !force {
            return Err(io_failure(format!("{} is not empty (use --force to overwrite)", dir.display())));
        }
    }
    fs::create_dir_all(dir).map_err(Error::from)?;
    Ok(())
}

fn prepare_file(path: &Path, force: bool) -> CliResult<()> {
    if path.exists() && !force {
        return Err(io_failure(format!("{} exists (use --force to overwrite)", path.display())));
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(Error::from)?;
    }
    Ok(())
}

fn load_ckpt(path: &Path) -> CliResult<Checkpoint> {
    load_checkpoint(path).map_err(|e| {
        let mut f = Failure::from(e);
        f.message = format!("checkpoint {}: {}", path.display(), f.message);
        if f.code != 3 {
            f.code = 5;
        }
        f
    })
}

fn load_data(path: &Path) -> CliResult<Dataset> {
    load_dataset(path).map_err(|e| {
        let mut f = Failure::from(e);
        f.message = format!("dataset {}: {}", path.display(), f.message);
        f
    })
}

fn check_pair(ckpt: &Checkpoint, data: &Dataset) -> CliResult<()> {
    if ckpt.config.dataset != data.spec {
        return Err(Failure {
            code: 5,
            message: "checkpoint was trained on a dataset with a different spec".into(),
        });
    }
    Ok(())
}

fn cmd_gen_data(ctx: &Ctx) -> CliResult<()> {
    let mut spec = ctx.config.dataset.clone();
    if let Some(s) = ctx.seed {
        spec.seed = s;
    }
    let out = ctx.out()?;
    let ds = make_dataset(&spec)?;
    prepare_dir(out, ctx.force)?;
    save_dataset(&ds, out)?;
    println!("train: {}", ds.train.len());
    println!("eval_heldout: {}", ds.eval_heldout.len());
    Ok(())
}

fn write_train_outputs(dir: &Path, out: &dkit::trainer::TrainOutput) -> CliResult<()> {
    let name = if out.failure.is_some() { "last_good.dkc" } else { "final.dkc" };
    save_checkpoint(&out.checkpoint, &dir.join(name))?;
    if let Some(best) = &out.best {
        save_checkpoint(best, &dir.join("best.dkc"))?;
    }
    write_history(&out.history, &dir.join("metrics.csv"))?;
    fs::write(dir.join("config.json"), out.checkpoint.config.to_json()).map_err(Error::from)?;
    Ok(())
}

fn run_training(ctx: &Ctx, cfg: &RunConfig, ds: &Dataset, resume: Option<Checkpoint>, dir: &Path) -> CliResult<dkit::trainer::TrainOutput> {
    let mut log = |rows: &[dkit::trainer::HistoryRow]| {
        if let Some(r) = rows.first() {
            let parts: Vec<String> = rows.iter().map(|r| format!("{}={:.4}", r.metric, r.value)).collect();
            ctx.say(format!("[stage {} step {}] {}", r.stage, r.step, parts.join(" ")));
        }
    };
    let opts = TrainOptions { resume, stop_after: None, on_log: Some(&mut log) };
    let out = train(cfg, ds, opts)?;
    write_train_outputs(dir, &out)?;
    Ok(out)
}

fn cmd_train(ctx: &Ctx, data: &Path, resume: Option<&Path>) -> CliResult<()> {
    let out_dir = ctx.out()?;
    let ds = load_data(data)?;
    let resume = match resume {
        Some(p) => {
            let c = load_ckpt(p)?;
            check_pair(&c, &ds)?;
            Some(c)
        }
        None => None,
    };
    let mut cfg = ctx.run_config();
    let resume = match resume {
        Some(mut c) => {
            if ctx.config_given {
                // The new config may change the schedule, not the model.
                cfg.dataset = c.config.dataset.clone();
                if cfg.model != c.config.model || cfg.ablation.reference_transform != c.config.ablation.reference_transform {
                    return Err(Failure {
                        code: 2,
                        message: "config changes the model architecture of the checkpoint being resumed".into(),
                    });
                }
                c.config = cfg.clone();
            } else if let Some(s) = ctx.seed {
                c.config = c.config.clone().with_seed(s);
            }
            cfg = c.config.clone();
            Some(c)
        }
        None => None,
    };
    prepare_dir(out_dir, ctx.force)?;
    let out = run_training(ctx, &cfg, &ds, resume, out_dir)?;
    if let Some(e) = out.failure {
        return Err(Failure {
            code: 4,
            message: format!("{e}; last good checkpoint written to {}", out_dir.join("last_good.dkc").display()),
        });
    }
    ctx.say(format!("wrote {}", out_dir.join("final.dkc").display()));
    Ok(())
}

fn run_label(cfg: &RunConfig) -> String {
    format!(
        "{}+{}/{}/{}@{}",
        cfg.ablation.encoder_loss.name(),
        cfg.ablation.grl_mode.name(),
        cfg.ablation.reference_transform.name(),
        cfg.self_augmentation.mode.name(),
        cfg.self_augmentation.proportion
    )
}

fn eval_report(ckpt: &Checkpoint, ds: &Dataset, label: &str, oracle: &Oracle) -> CliResult<Report> {
    let cfg = &ckpt.config;
    let seed = cfg.train.seed;
    let opts = EvalOptions { transform: cfg.ablation.reference_transform, seed, probes: true };
    let summary = evaluate(&ckpt.state, ds, oracle, opts)?;
    let rows = summary
        .metrics()
        .into_iter()
        .map(|(m, v)| ReportRow { metric: m.to_string(), config: label.to_string(), value: v, seed })
        .collect();
    let mut meta = BTreeMap::new();
    meta.insert("step".into(), ckpt.step.to_string());
    meta.insert("stage".into(), ckpt.stage.to_string());
    meta.insert("encoder_loss".into(), cfg.ablation.encoder_loss.name().into());
    meta.insert("grl_mode".into(), cfg.ablation.grl_mode.name().into());
    meta.insert("reference_transform".into(), cfg.ablation.reference_transform.name().into());
    meta.insert("aug_mode".into(), cfg.self_augmentation.mode.name().into());
    meta.insert("aug_proportion".into(), cfg.self_augmentation.proportion.to_string());
    meta.insert("conversions".into(), summary.conversion.count.to_string());
    meta.insert("projection".into(), "pca (exact PCA in place of UMAP)".into());
    meta.insert("similarity_metrics".into(), "secs/eecs are cosine similarities of ground-truth factor readouts".into());
    Ok(Report { meta, rows })
}

fn cmd_eval(ctx: &Ctx, ckpt_path: &Path, data: &Path) -> CliResult<()> {
    let out_dir = ctx.out()?;
    let ckpt = load_ckpt(ckpt_path)?;
    let ds = load_data(data)?;
    check_pair(&ckpt, &ds)?;
    let oracle = Oracle::fit(&ds)?;
    let report = eval_report(&ckpt, &ds, &run_label(&ckpt.config), &oracle)?;
    prepare_dir(out_dir, ctx.force)?;
    report.write(&out_dir.join("report.csv"), &out_dir.join("report.json"))?;
    for r in &report.rows {
        ctx.say(format!("{:<34} {:.4}", r.metric, r.value));
    }
    Ok(())
}

fn cmd_flow_probe(ctx: &Ctx, ckpt_path: &Path, data: &Path) -> CliResult<()> {
    let out = ctx.out()?;
    let ckpt = load_ckpt(ckpt_path)?;
    let ds = load_data(data)?;
    check_pair(&ckpt, &ds)?;
    let samples: Vec<&FactorSample> = ds.train_samples().collect();
    let table = flow_probe(&ckpt.state, &samples, ckpt.config.ablation.reference_transform, ckpt.config.train.seed)?;
    prepare_file(out, ctx.force)?;
    table.write_csv(out)?;
    for r in &table.rows {
        ctx.say(format!(
            "step {} reverse={} speaker={:.4} emotion={:.4}",
            r.flow_step, r.reverse, r.lk_cka_speaker, r.lk_cka_emotion
        ));
    }
    Ok(())
}

fn cmd_project(ctx: &Ctx, ckpt_path: &Path, data: &Path) -> CliResult<()> {
    let out = ctx.out()?;
    let ckpt = load_ckpt(ckpt_path)?;
    let ds = load_data(data)?;
    check_pair(&ckpt, &ds)?;
    let samples: Vec<&FactorSample> = ds.heldout_samples().collect();
    let emb = embed_samples(&ckpt.state, &samples, ckpt.config.ablation.reference_transform, ckpt.config.train.seed)?;
    let (coords, var) = pca_2d(&emb.emotion)?;
    prepare_file(out, ctx.force)?;
    let mut text = String::from("sample_id,x,y,emotion,speaker\n");
    for (i, s) in samples.iter().enumerate() {
        text.push_str(&format!("{},{},{},{},{}\n", s.id, coords.get(i, 0), coords.get(i, 1), s.emotion_id, s.speaker_id));
    }
    fs::write(out, text).map_err(Error::from)?;
    ctx.say(format!("explained variance: axis 1 {:.4}, axis 2 {:.4}", var[0], var[1]));
    Ok(())
}

/// One sub-run of a sweep: the config it trains and its label.
struct SubRun {
    label: String,
    replicate: u64,
    config: RunConfig,
}

/// Axis columns of the consolidated table, per sub-run.
fn axis_columns(axis: Axis) -> &'static [&'static str] {
    match axis {
        Axis::GrlMode => &["encoder_loss", "grl_mode"],
        Axis::EncoderLoss => &["encoder_loss"],
        Axis::AugProportion => &["aug_proportion"],
        Axis::AugMode => &["aug_mode"],
        Axis::ReferenceTransform => &["reference_transform"],
    }
}

fn axis_values(axis: Axis, base: &RunConfig) -> Vec<(Vec<String>, RunConfig)> {
    let with = |f: &dyn Fn(&mut RunConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    match axis {
        Axis::GrlMode => EncoderLoss::ALL
            .iter()
            .flat_map(|&l| GrlMode::ALL.iter().map(move |&g| (l, g)))
            .map(|(l, g)| {
                let c = with(&|c| {
                    c.ablation.encoder_loss = l;
                    c.ablation.grl_mode = g;
                });
                (vec![l.name().to_string(), g.name().to_string()], c)
            })
            .collect(),
        Axis::EncoderLoss => EncoderLoss::ALL
            .iter()
            .map(|&l| (vec![l.name().to_string()], with(&|c| c.ablation.encoder_loss = l)))
            .collect(),
        Axis::AugProportion => [0.0, 0.25, 0.5, 0.75, 1.0]
            .iter()
            .map(|&p| (vec![p.to_string()], with(&|c| c.self_augmentation.proportion = p)))
            .collect(),
        Axis::AugMode => AugMode::ALL
            .iter()
            .map(|&m| (vec![m.name().to_string()], with(&|c| c.self_augmentation.mode = m)))
            .collect(),
        Axis::ReferenceTransform => ReferenceTransform::ALL
            .iter()
            .map(|&t| (vec![t.name().to_string()], with(&|c| c.ablation.reference_transform = t)))
            .collect(),
    }
}

/// FNV-1a, stable across platforms and releases.
fn stable_hash(s: &str) -> u64 {
    s.bytes().fold(0xcbf29ce484222325, |h, b| (h ^ b as u64).wrapping_mul(0x100000001b3))
}

fn thread_cap() -> CliResult<usize> {
    match std::env::var("DKIT_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Failure { code: 2, message: format!("DKIT_THREADS must be a positive integer, got {v:?}") }),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn cmd_sweep(ctx: &Ctx, axis: Axis, seeds: u64, data: Option<&Path>) -> CliResult<()> {
    let out_dir = ctx.out()?;
    let base = ctx.run_config();
    let threads = thread_cap()?;
    let ds = match data {
        Some(p) => load_data(p)?,
        None => make_dataset(&base.dataset)?,
    };
    prepare_dir(out_dir, ctx.force)?;
    let oracle = Oracle::fit(&ds)?;
    let columns = axis_columns(axis);
    let mut runs = Vec::new();
    let mut values = Vec::new();
    for (cols, cfg) in axis_values(axis, &base) {
        let label = cols.join("+");
        for r in 0..seeds {
            let seed = derive_seed(base.train.seed, &[stable_hash(&label), r]);
            runs.push(SubRun { label: label.clone(), replicate: r, config: cfg.clone().with_seed(seed) });
        }
        values.push((label, cols));
    }

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<Report, Failure>>>> = Mutex::new((0..runs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..threads.min(runs.len()).max(1) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(run) = runs.get(i) else { break };
                let dir = out_dir.join(format!("{}/seed{}", run.label, run.replicate));
                let res = (|| {
                    fs::create_dir_all(&dir).map_err(Error::from)?;
                    let sub = Ctx { quiet: true, config: run.config.clone(), config_given: true, seed: None, out: None, force: true };
                    let out = run_training(&sub, &run.config, &ds, None, &dir)?;
                    if let Some(e) = out.failure {
                        return Err(Failure::from(e));
                    }
                    let report = eval_report(&out.checkpoint, &ds, &run.label, &oracle)?;
                    report.write(&dir.join("report.csv"), &dir.join("report.json"))?;
                    Ok(report)
                })();
                match &res {
                    Ok(_) => ctx.say(format!("done {} seed{}", run.label, run.replicate)),
                    Err(f) => ctx.say(format!("failed {} seed{}: {}", run.label, run.replicate, f.message)),
                }
                results.lock().unwrap()[i] = Some(res);
            });
        }
    });

    let mut rows = Vec::new();
    let mut first_failure = None;
    for r in results.into_inner().unwrap().into_iter().flatten() {
        match r {
            Ok(rep) => rows.extend(rep.rows),
            Err(f) => {
                first_failure.get_or_insert(f);
            }
        }
    }
    let mut meta = BTreeMap::new();
    meta.insert("axis".into(), format!("{axis:?}"));
    meta.insert("replicates".into(), seeds.to_string());
    meta.insert("projection".into(), "pca (exact PCA in place of UMAP)".into());
    let report = Report { meta, rows };
    report.write(&out_dir.join("report.csv"), &out_dir.join("report.json"))?;
    write_comparison(&out_dir.join("comparison.csv"), columns, &values, &report.rows)?;
    ctx.say(format!("wrote {}", out_dir.join("comparison.csv").display()));
    match first_failure {
        Some(f) => Err(f),
        None => Ok(()),
    }
}

/// One row per axis value: the axis columns, the replicate count, then the
/// across-seed mean of every metric.
fn write_comparison(path: &Path, columns: &[&str], values: &[(String, Vec<String>)], rows: &[ReportRow]) -> CliResult<()> {
    let metrics: Vec<&str> = dkit::evaluation::METRIC_NAMES.to_vec();
    let mut text = columns.join(",");
    text.push_str(",n_seeds,");
    text.push_str(&metrics.join(","));
    text.push('\n');
    for (label, cols) in values {
        let of_label: Vec<&ReportRow> = rows.iter().filter(|r| &r.config == label).collect();
        let n_seeds = of_label.iter().map(|r| r.seed).collect::<std::collections::BTreeSet<_>>().len();
        let means: Vec<String> = metrics
            .iter()
            .map(|m| {
                let v: Vec<f64> = of_label.iter().filter(|r| r.metric == *m).map(|r| r.value).collect();
                if v.is_empty() {
                    String::new()
                } else {
                    format!("{}", v.iter().sum::<f64>() / v.len() as f64)
                }
            })
            .collect();
        text.push_str(&format!("{},{},{}\n", cols.join(","), n_seeds, means.join(",")));
    }
    fs::write(path, text).map_err(Error::from)?;
    Ok(())
}

fn collect_reports(path: &Path, found: &mut Vec<PathBuf>) -> CliResult<()> {
    if path.is_file() {
        found.push(path.to_path_buf());
        return Ok(());
    }
    if !path.is_dir() {
        return Err(io_failure(format!("{} does not exist", path.display())));
    }
    let mut entries: Vec<PathBuf> = fs::read_dir(path)
        .map_err(Error::from)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()
        .map_err(Error::from)?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_reports(&p, found)?;
        } else if p.file_name().is_some_and(|n| n == "report.json") {
            found.push(p);
        }
    }
    Ok(())
}

fn cmd_report(ctx: &Ctx, inputs: &[PathBuf]) -> CliResult<()> {
    let out_dir = ctx.out()?;
    let mut files = Vec::new();
    for p in inputs {
        collect_reports(p, &mut files)?;
    }
    if files.is_empty() {
        return Err(io_failure("no report.json files found".into()));
    }
    let mut rows = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for f in &files {
        let rep = if f.extension().is_some_and(|e| e == "csv") {
            Report { meta: BTreeMap::new(), rows: read_rows_csv(f)? }
        } else {
            Report::read_json(f)?
        };
        for r in rep.rows {
            if seen.insert((r.metric.clone(), r.config.clone(), r.seed)) {
                rows.push(r);
            }
        }
    }
    prepare_dir(out_dir, ctx.force)?;
    let mut meta = BTreeMap::new();
    meta.insert("sources".into(), files.len().to_string());
    let report = Report { meta, rows };
    report.write(&out_dir.join("report.csv"), &out_dir.join("report.json"))?;

    let mut groups: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for r in &report.rows {
        groups.entry((r.config.clone(), r.metric.clone())).or_default().push(r.value);
    }
    let summary: Vec<ReportRow> = groups
        .iter()
        .flat_map(|((config, metric), v)| {
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
            [
                ReportRow { metric: format!("{metric}_mean"), config: config.clone(), value: mean, seed: 0 },
                ReportRow { metric: format!("{metric}_std"), config: config.clone(), value: std, seed: 0 },
            ]
        })
        .collect();
    write_rows_csv(&summary, &out_dir.join("summary.csv"))?;
    ctx.say(format!("merged {} rows from {} reports", report.rows.len(), files.len()));
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    let config = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(|e| config_failure(e, p))?,
        None => RunConfig::default(),
    };
    let ctx = Ctx { config, config_given: cli.config.is_some(), seed: cli.seed, out: cli.out, force: cli.force, quiet: cli.quiet };
    match &cli.command {
        Command::GenData => cmd_gen_data(&ctx),
        Command::Train { data, resume } => cmd_train(&ctx, data, resume.as_deref()),
        Command::Eval { ckpt, data } => cmd_eval(&ctx, ckpt, data),
        Command::FlowProbe { ckpt, data } => cmd_flow_probe(&ctx, ckpt, data),
        Command::Project { ckpt, data } => cmd_project(&ctx, ckpt, data),
        Command::Sweep { axis, seeds, data } => cmd_sweep(&ctx, *axis, *seeds, data.as_deref()),
        Command::Report { inputs } => cmd_report(&ctx, inputs),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
