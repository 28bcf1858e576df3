use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use hpdp::checkpoint::{load_prototypes, save_prototypes, write_atomic, Checkpoint};
use hpdp::metrics::{km_csv, MetricReport};
use hpdp::model::{check_model_gradient, ModelParams, Task};
use hpdp::priors::{kmeans_with, KMeansOptions};
use hpdp::rng::stream;
use hpdp::synthdata::{generate_cohort, read_cohort, write_cohort, Cohort, GeneratorConfig};
use hpdp::trainer::{
    architecture_for, attention_csv, evaluate, history_csv, km_by_risk, partition, train, TrainConfig,
};
use hpdp::HpdpError;
use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Parser)]
#[command(
    name = "hpdp",
    version,
    about = "Synthetic cohorts, training and evaluation for prototype-routed multimodal MIL"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort on disk.
    GenData(GenDataArgs),
    /// Cluster the pooled instances of a cohort into prototypes.
    Cluster(ClusterArgs),
    /// Train a model and write its checkpoint and history.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a cohort.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients of the full model.
    Gradcheck(GradcheckArgs),
    /// Aggregate several metric reports into one table.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Generator config (TOML, or JSON by extension).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Spatially random coordinates.
    #[arg(long)]
    scatter: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ClusterArgs {
    /// Cohort directory.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = hpdp::priors::DEFAULT_K)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Classification,
    Survival,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Classification => Task::Classification,
            TaskArg::Survival => Task::Survival,
        }
    }
}

#[derive(Args)]
struct ModelFlags {
    /// Train config (TOML, or JSON by extension).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
    #[arg(long)]
    cox_batch: Option<usize>,
    #[arg(long, value_name = "BOOL")]
    toggle_spe: Option<bool>,
    #[arg(long, value_name = "BOOL")]
    toggle_maps: Option<bool>,
    #[arg(long, value_name = "BOOL")]
    toggle_hcma: Option<bool>,
    #[arg(long, value_name = "BOOL")]
    toggle_text: Option<bool>,
}

impl ModelFlags {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg: TrainConfig = match &self.config {
            Some(p) => load_config(p)?,
            None => TrainConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(t) = self.task {
            cfg.task = t.into();
        }
        if self.cox_batch.is_some() {
            cfg.cox_batch = self.cox_batch;
        }
        let t = &mut cfg.toggles;
        for (flag, slot) in [
            (self.toggle_spe, &mut t.use_spe),
            (self.toggle_maps, &mut t.use_maps),
            (self.toggle_hcma, &mut t.use_hcma),
            (self.toggle_text, &mut t.use_text),
        ] {
            if let Some(v) = flag {
                *slot = v;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Prototype bank from `cluster`; clustered from the training split when absent.
    #[arg(long)]
    priors: Option<PathBuf>,
    #[command(flatten)]
    model: ModelFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Subset {
    Train,
    Val,
    Test,
    All,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Partition of the cohort to score, using the checkpoint's split and seed.
    #[arg(long, value_enum, default_value = "test")]
    split: Subset,
    /// Also write per-instance routing weights.
    #[arg(long)]
    dump_attention: bool,
    /// Also write Kaplan–Meier curves of the median risk split (survival only).
    #[arg(long)]
    km: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    model: ModelFlags,
    #[arg(long, default_value_t = 1e-5)]
    threshold: f64,
    #[arg(long, default_value_t = 200)]
    samples: usize,
    #[arg(long, default_value_t = 1e-6)]
    step: f64,
    /// Gaussian perturbation added to the random initialization.
    #[arg(long, default_value_t = 0.0)]
    jitter: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Metric report JSON files.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

/// Gradient check above threshold.
#[derive(Debug)]
struct VerificationFailed(String);

impl fmt::Display for VerificationFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for VerificationFailed {}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    config: Option<String>,
    seed: Option<u64>,
    out: String,
    version: &'a str,
    started_unix: u64,
    finished_unix: u64,
    outputs: Vec<String>,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

struct Run<'a> {
    command: &'a str,
    config: Option<&'a Path>,
    seed: Option<u64>,
    out: &'a Path,
    started: u64,
    outputs: Vec<String>,
}

impl<'a> Run<'a> {
    fn new(command: &'a str, config: Option<&'a Path>, seed: Option<u64>, out: &'a Path) -> Self {
        Self {
            command,
            config,
            seed,
            out,
            started: unix_now(),
            outputs: Vec::new(),
        }
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&self.out.join(name), bytes)?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    fn record(&mut self, path: &Path) {
        let rel = path.strip_prefix(self.out).unwrap_or(path);
        self.outputs.push(rel.display().to_string());
    }

    fn finish(self) -> Result<()> {
        let manifest = RunManifest {
            command: self.command,
            config: self.config.map(|p| p.display().to_string()),
            seed: self.seed,
            out: self.out.display().to_string(),
            version: env!("CARGO_PKG_VERSION"),
            started_unix: self.started,
            finished_unix: unix_now(),
            outputs: self.outputs,
        };
        let json = serde_json::to_vec_pretty(&manifest)?;
        write_atomic(&self.out.join("run_manifest.json"), &json)?;
        Ok(())
    }
}

fn load_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let parsed = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(anyhow::Error::from)
    } else {
        toml::from_str(&text).map_err(anyhow::Error::from)
    };
    parsed.with_context(|| format!("parsing config {}", path.display()))
}

fn to_json<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(v)?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let mut cfg: GeneratorConfig = match &a.config {
        Some(p) => load_config(p)?,
        None => GeneratorConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.scatter |= a.scatter;
    let cohort = generate_cohort(&cfg)?;
    let mut run = Run::new("gen-data", a.config.as_deref(), Some(cfg.seed), &a.out);
    for p in write_cohort(&a.out, &cohort)? {
        run.record(&p);
    }
    println!("wrote {} bags to {}", cohort.len(), a.out.display());
    run.finish()
}

fn cluster(a: &ClusterArgs) -> Result<()> {
    let cohort = read_cohort(&a.data)?;
    let bank = kmeans_with(&cohort.pooled_features(), &KMeansOptions::new(a.k, a.seed))?;
    let mut run = Run::new("cluster", None, Some(a.seed), &a.out);
    let path = a.out.join("prototypes.bin");
    save_prototypes(&bank, &path)?;
    run.record(&path);
    println!("k = {}, inertia = {}", bank.k(), bank.inertia);
    run.finish()
}

fn train_cmd(a: &TrainArgs) -> Result<()> {
    let cfg = a.model.resolve()?;
    let cohort = read_cohort(&a.data)?;
    let (tr, va, _) = partition(&cohort, &cfg)?;
    let teachers = if !cfg.toggles.use_maps {
        None
    } else if let Some(p) = &a.priors {
        Some(load_prototypes(p)?.teachers())
    } else {
        let opts = KMeansOptions::new(cfg.k_sup, cfg.seed);
        Some(kmeans_with(&tr.pooled_features(), &opts)?.teachers())
    };
    let out = train(&tr, &va, teachers.as_ref(), &cfg)?;
    let mut run = Run::new("train", a.model.config.as_deref(), Some(cfg.seed), &a.out);
    run.write("model.ckpt", &out.checkpoint.to_bytes()?)?;
    run.write("history.csv", history_csv(&out.history).as_bytes())?;
    if let Some(d) = &out.diverged {
        eprintln!("warning: training stopped early, {d}; keeping the best checkpoint");
    }
    let best = out
        .checkpoint
        .best_val
        .map_or("none".to_string(), |v| format!("{v:.4}"));
    println!(
        "epochs run {}, best epoch {}, best validation {best}",
        out.history.len(),
        out.best_epoch
    );
    run.finish()
}

fn select(cohort: &Cohort, cfg: &TrainConfig, subset: Subset) -> Result<Cohort> {
    if let Subset::All = subset {
        return Ok(cohort.clone());
    }
    let (tr, va, te) = partition(cohort, cfg)?;
    Ok(match subset {
        Subset::Train => tr,
        Subset::Val => va,
        _ => te,
    })
}

fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let cohort = select(&read_cohort(&a.data)?, &ckpt.config, a.split)?;
    let report = evaluate(&ckpt, &cohort)?;
    let mut run = Run::new("eval", None, Some(ckpt.config.seed), &a.out);
    run.write("metrics.json", &to_json(&report)?)?;
    if a.dump_attention {
        match attention_csv(&ckpt, &cohort)? {
            Some(csv) => run.write("attention.csv", csv.as_bytes())?,
            None => eprintln!("warning: model has no routing stage; no attention written"),
        }
    }
    if a.km {
        match km_by_risk(&ckpt, &cohort)? {
            Some((high, low)) => {
                run.write("km_high.csv", km_csv(&high).as_bytes())?;
                run.write("km_low.csv", km_csv(&low).as_bytes())?;
            }
            None => eprintln!("warning: Kaplan–Meier curves need a survival model and two risk groups"),
        }
    }
    println!("{}", serde_json::to_string(&report)?);
    run.finish()
}

fn gradcheck_cmd(a: &GradcheckArgs) -> Result<()> {
    let cfg = a.model.resolve()?;
    let cohort = generate_cohort(&GeneratorConfig {
        n_bags: 3,
        instances_per_bag: [5, 8],
        dim: cfg.d,
        seed: cfg.seed,
        ..GeneratorConfig::default()
    })?;
    let arch = architecture_for(&cfg, &cohort);
    let teachers = if cfg.toggles.use_maps {
        Some(kmeans_with(&cohort.pooled_features(), &KMeansOptions::new(cfg.k_sup, cfg.seed))?.teachers())
    } else {
        None
    };
    let mut params = ModelParams::init(&arch, None, &mut stream(cfg.seed, "init"))?;
    if a.jitter > 0.0 {
        params = params.jittered(a.jitter, &mut stream(cfg.seed, "jitter"));
    }
    let bags: Vec<_> = cohort.bags.iter().collect();
    let report = check_model_gradient(
        &arch,
        &params,
        teachers.as_ref(),
        &bags,
        &cfg.loss_settings(),
        a.step,
        a.samples,
        cfg.seed,
    )?;
    println!(
        "max relative error {:.3e} at {}[{}] over {} coordinates (threshold {:e})",
        report.max_rel_err, report.worst_array, report.worst_index.1, report.samples, a.threshold
    );
    if let Some(out) = &a.out {
        let mut run = Run::new("gradcheck", a.model.config.as_deref(), Some(cfg.seed), out);
        run.write("gradcheck.json", &to_json(&report)?)?;
        run.finish()?;
    }
    if !report.passes(a.threshold) {
        return Err(VerificationFailed(format!(
            "gradient check failed: {:.3e} ≥ {:e}",
            report.max_rel_err, a.threshold
        ))
        .into());
    }
    Ok(())
}

fn report_cmd(a: &ReportArgs) -> Result<()> {
    let reports = a
        .inputs
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str::<MetricReport>(&text).with_context(|| format!("parsing {}", p.display()))
        })
        .collect::<Result<Vec<_>>>()?;
    let columns: [(&str, fn(&MetricReport) -> Option<f64>); 5] = [
        ("acc", |r| r.acc),
        ("f1_macro", |r| r.f1_macro),
        ("auc", |r| r.auc),
        ("c_index", |r| r.c_index),
        ("logrank_p", |r| r.logrank_p),
    ];
    let mut csv = String::from("metric,n,mean,std\n");
    for (name, get) in columns {
        let vals: Vec<f64> = reports.iter().filter_map(get).collect();
        if vals.is_empty() {
            continue;
        }
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let std = if vals.len() > 1 {
            let ss: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum();
            format!("{}", (ss / (n - 1.0)).sqrt())
        } else {
            String::new()
        };
        csv.push_str(&format!("{name},{},{mean},{std}\n", vals.len()));
    }
    let mut run = Run::new("report", None, None, &a.out);
    run.write("report.csv", csv.as_bytes())?;
    print!("{csv}");
    run.finish()
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<VerificationFailed>().is_some() {
        return 3;
    }
    match e.chain().find_map(|c| c.downcast_ref::<HpdpError>()) {
        Some(HpdpError::NonFinite(_)) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Cluster(a) => cluster(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::Report(a) => report_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
