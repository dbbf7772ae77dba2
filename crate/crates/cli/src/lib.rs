//! Command implementations behind the `finalmlp` binary. Each command writes
//! human-readable output to the supplied writer so tests can capture it.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use finalmlp::config::encode_file;
use finalmlp::gradcheck::GradCheckReport;
use finalmlp::io::write_atomic;
use finalmlp::metrics::{evaluate, EvalReport};
use finalmlp::run::{ablate_run, gradcheck_run, train_run, ABLATION_HEADER};
use finalmlp::train::write_metrics_csv;
use finalmlp::{ModelContainer, RunConfig, Variant};

pub const MODEL_FILE: &str = "model.fmlp";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SCHEMA_FILE: &str = "schema.json";
pub const TEST_SPLIT_FILE: &str = "test_split.csv";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const RESULTS_HEADER: &str = "model,data,auc,logloss,n_instances,n_parameters";
const DEFAULT_OUT_DIR: &str = "runs";

#[derive(Debug, Parser)]
#[command(name = "finalmlp", version, about = "Train and evaluate two-stream MLP click models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write model file, metrics CSV and the test split.
    Train(Common),
    /// Score a labelled CSV with a saved model and report AUC and logloss.
    Eval(EvalArgs),
    /// Write one click probability per input row.
    Predict(PredictArgs),
    /// Compare analytic and finite-difference gradients of the full model.
    Gradcheck(GradcheckArgs),
    /// Train every configured (variant, heads, seed) combination.
    Ablate(Common),
    /// Write the configured synthetic dataset as CSV.
    Generate(GenerateArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Single labelled CSV, split according to `[split]`.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Labelled CSV with the model's field columns.
    #[arg(long)]
    pub data: PathBuf,
    /// Also write the JSON report here.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Append a row to this results CSV.
    #[arg(long)]
    pub results: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Scores file; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub common: Common,
    /// Check this variant instead of the configured one.
    #[arg(long)]
    pub variant: Option<Variant>,
    /// Test hook: double every analytic gradient.
    #[arg(long, hide = true)]
    pub inject_grad_bug: bool,
}

#[derive(Debug, Clone, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub out: PathBuf,
}

/// Loads the configuration and applies command-line overrides.
pub fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &common.out_dir {
        cfg.out_dir = Some(dir.clone());
    }
    if let Some(path) = &common.data {
        cfg.data.synthetic = None;
        cfg.data.train = None;
        cfg.data.valid = None;
        cfg.data.test = None;
        cfg.data.path = Some(path.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

/// Paths of the artifacts written by [`cmd_train`].
#[derive(Debug, Clone)]
pub struct TrainArtifacts {
    pub model: PathBuf,
    pub metrics: PathBuf,
    pub schema: PathBuf,
    pub test_split: PathBuf,
}

pub fn cmd_train(common: &Common, out: &mut dyn Write) -> Result<TrainArtifacts> {
    let cfg = load_config(common)?;
    let dir = out_dir(&cfg)?;
    let run = train_run(&cfg)?;
    let arts = TrainArtifacts {
        model: dir.join(MODEL_FILE),
        metrics: dir.join(METRICS_FILE),
        schema: dir.join(SCHEMA_FILE),
        test_split: dir.join(TEST_SPLIT_FILE),
    };
    run.container.save(&arts.model)?;
    write_metrics_csv(&arts.metrics, &run.history, cfg.train.log_wall_time)?;
    run.prepared.schema.save(&arts.schema)?;
    run.prepared.test_raw.write_csv(&arts.test_split)?;

    let s = run.container.summary.as_ref().expect("trained container has a summary");
    writeln!(
        out,
        "{}: {} epochs, best epoch {}, {} parameters",
        s.variant,
        s.epochs_run,
        s.best_epoch + 1,
        s.parameters.total()
    )?;
    writeln!(out, "val  AUC {}  logloss {:.6}", pct(s.val_auc), s.val_logloss)?;
    writeln!(out, "test AUC {}  logloss {:.6}", pct(s.test_auc), s.test_logloss)?;
    writeln!(out, "wrote {}", arts.model.display())?;
    Ok(arts)
}

fn load_labelled(model: &Path, data: &Path) -> Result<(ModelContainer, finalmlp::data::EncodedDataset)> {
    let container = ModelContainer::load(model)?;
    let (_, encoded) = encode_file(&container.schema, data, true)?;
    let encoded = encoded.expect("labels were required");
    Ok((container, encoded))
}

pub fn cmd_eval(args: &EvalArgs, out: &mut dyn Write) -> Result<EvalReport> {
    let (container, data) = load_labelled(&args.model, &args.data)?;
    let (report, _) = evaluate(&container.model, &data)?;
    let json = serde_json::to_string_pretty(&report)?;
    writeln!(out, "{json}")?;
    writeln!(out, "AUC {}  logloss {:.6}", pct(report.auc), report.logloss)?;
    if let Some(path) = &args.report {
        write_atomic(path, format!("{json}\n").as_bytes())?;
    }
    if let Some(path) = &args.results {
        append_result(path, &args.model, &args.data, &report)?;
    }
    Ok(report)
}

fn append_result(path: &Path, model: &Path, data: &Path, r: &EvalReport) -> Result<()> {
    let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .with_context(|| format!("opening {}", path.display()))?;
    if fresh {
        writeln!(f, "{RESULTS_HEADER}")?;
    }
    writeln!(
        f,
        "{},{},{:.17e},{:.17e},{},{}",
        model.display(),
        data.display(),
        r.auc,
        r.logloss,
        r.n_instances,
        r.n_parameters
    )?;
    Ok(())
}

/// Scores every row; labels are optional. Scores are printed in shortest
/// round-trip decimal form.
pub fn cmd_predict(args: &PredictArgs, out: &mut dyn Write) -> Result<Vec<f64>> {
    let container = ModelContainer::load(&args.model)?;
    let (raw, _) = encode_file(&container.schema, &args.data, false)?;
    let ids = container.schema.encode_rows(raw.rows.iter())?;
    let scores = container.model.predict(ids.view())?.to_vec();
    let mut text = String::with_capacity(scores.len() * 20);
    for s in &scores {
        text.push_str(&format!("{s}\n"));
    }
    match &args.out {
        Some(path) => write_atomic(path, text.as_bytes())?,
        None => out.write_all(text.as_bytes())?,
    }
    Ok(scores)
}

pub fn cmd_gradcheck(args: &GradcheckArgs, out: &mut dyn Write) -> Result<GradCheckReport> {
    let cfg = load_config(&args.common)?;
    let mut mc = cfg.model_config();
    if let Some(v) = args.variant {
        mc.variant = v;
    }
    let report = gradcheck_run(&cfg, &mc, args.inject_grad_bug)?;
    writeln!(
        out,
        "gradcheck {} (eps {:e}, threshold {:e}, batch {})",
        mc.variant, report.eps, report.threshold, cfg.gradcheck.batch_size
    )?;
    for t in &report.tensors {
        writeln!(out, "  {:<28} {:>7} checked  max rel err {:.3e}", t.name, t.checked, t.max_rel_err)?;
    }
    if report.passed {
        writeln!(out, "PASS: max rel err {:.3e}", report.max_rel_err())?;
    } else if let Some(w) = report.worst() {
        writeln!(
            out,
            "FAIL: worst parameter {} index {}: analytic {:e}, numeric {:e}, rel err {:.3e}",
            w.name, w.worst_index, w.analytic, w.numeric, w.max_rel_err
        )?;
    }
    Ok(report)
}

/// Rewrites the results CSV after every finished run, so an aborted sweep
/// leaves the completed rows behind.
pub fn cmd_ablate(common: &Common, out: &mut dyn Write) -> Result<PathBuf> {
    let cfg = load_config(common)?;
    let path = out_dir(&cfg)?.join(ABLATION_FILE);
    let mut text = format!("{ABLATION_HEADER}\n");
    write_atomic(&path, text.as_bytes())?;
    writeln!(out, "{ABLATION_HEADER}")?;
    ablate_run(&cfg, |row| {
        let line = row.csv_line();
        text.push_str(&line);
        text.push('\n');
        // Progress output is best effort; the CSV is the record.
        let _ = writeln!(out, "{line}");
        write_atomic(&path, text.as_bytes())
    })?;
    writeln!(out, "wrote {}", path.display())?;
    Ok(path)
}

pub fn cmd_generate(args: &GenerateArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = load_config(&args.common)?;
    let Some(spec) = cfg.data.synthetic_spec() else {
        bail!("generate needs a [data.synthetic] section, not file inputs");
    };
    let data = spec.generate()?;
    data.table.write_csv(&args.out)?;
    writeln!(out, "wrote {} rows to {}", data.table.len(), args.out.display())?;
    Ok(())
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<i32> {
    match &cli.command {
        Command::Train(c) => cmd_train(c, out).map(|_| 0),
        Command::Eval(a) => cmd_eval(a, out).map(|_| 0),
        Command::Predict(a) => cmd_predict(a, out).map(|_| 0),
        Command::Gradcheck(a) => cmd_gradcheck(a, out).map(|r| i32::from(!r.passed)),
        Command::Ablate(c) => cmd_ablate(c, out).map(|_| 0),
        Command::Generate(a) => cmd_generate(a, out).map(|_| 0),
    }
}
