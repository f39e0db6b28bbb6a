//! `hyptax` command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 validation or data error,
//! 3 numeric failure (non-finite loss or failed gradient check).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use hyptax::dataset::{generate_synthetic, load_tsv, make_batches, Dataset, Split, SynthSpec};
use hyptax::evaluator::{evaluate_all, harmonic_mean, hierarchy_stats, HierarchyStats};
use hyptax::losses::{total_loss, LossConfig, Method};
use hyptax::numerics::{check_gradient, GradCheckError, GradCheckReport};
use hyptax::trainer::{
    encode_batch, initial_checkpoint, load_checkpoint, load_config, save_checkpoint, train, Checkpoint, ParamVars,
    TrainConfig, TrainError, TrainOptions,
};

const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(
    name = "hyptax",
    version,
    about = "Hyperbolic multimodal embeddings for taxonomic hierarchies"
)]
struct Cli {
    /// JSON config: a training config, or synthetic-data settings for gen-data.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the seed in the config.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Worker threads; 1 keeps runs bitwise reproducible.
    #[arg(long, global = true, default_value_t = 1, value_name = "N",
          value_parser = clap::value_parser!(u16).range(1..))]
    threads: u16,
    /// Main output file.
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Progress on standard error; repeat for more.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Writes a synthetic taxonomy dataset as TSV.
    GenData,
    /// Trains encoders and writes a checkpoint and a per-step loss CSV.
    Train(TrainArgs),
    /// Scores retrieval for every rank and task and writes a JSON report.
    Eval(EvalArgs),
    /// Dumps image and DNA embeddings per record as CSV.
    Embed(EmbedArgs),
    /// Compares analytic and central-difference gradients on one batch.
    GradCheck(GradCheckArgs),
    /// Harmonic means of `seen,unseen` rows of a CSV file.
    ReportHm(ReportHmArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset TSV.
    #[arg(long, value_name = "PATH")]
    data: PathBuf,
    /// Overrides the number of epochs.
    #[arg(long, value_name = "N")]
    epochs: Option<u64>,
    /// Per-step loss CSV; defaults to the checkpoint path with `.loss.csv`.
    #[arg(long, value_name = "PATH")]
    log: Option<PathBuf>,
    /// Continue from this checkpoint.
    #[arg(long, value_name = "PATH")]
    resume: Option<PathBuf>,
    /// Skip per-epoch validation retrieval.
    #[arg(long)]
    no_validation: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    /// Dataset TSV.
    #[arg(long, value_name = "PATH")]
    data: PathBuf,
    /// Also write the report as CSV.
    #[arg(long, value_name = "PATH")]
    csv: Option<PathBuf>,
    /// Also write cone-containment statistics of the label embeddings.
    #[arg(long, value_name = "PATH")]
    hierarchy: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EmbedArgs {
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    /// Dataset TSV.
    #[arg(long, value_name = "PATH")]
    data: PathBuf,
    /// Only records of this split.
    #[arg(long, value_name = "SPLIT")]
    split: Option<Split>,
}

#[derive(Args, Debug)]
struct GradCheckArgs {
    /// Dataset TSV; a small synthetic set when absent.
    #[arg(long, value_name = "PATH")]
    data: Option<PathBuf>,
    /// Loss preset used when no config is given.
    #[arg(long, default_value = "sel_cl", value_name = "METHOD")]
    method: String,
    #[arg(long, default_value_t = 8, value_name = "N")]
    batch_size: usize,
    /// Embedding width used when no config is given; the training default
    /// otherwise.
    #[arg(long, value_name = "N")]
    d: Option<usize>,
    /// Relative finite-difference step.
    #[arg(long, default_value_t = 1e-6, value_name = "H")]
    step: f64,
}

#[derive(Args, Debug)]
struct ReportHmArgs {
    /// CSV of `seen,unseen` rows; a non-numeric first row is a header.
    #[arg(long, value_name = "PATH")]
    input: PathBuf,
    /// Digits after the decimal point.
    #[arg(long, default_value_t = 1)]
    digits: usize,
}

/// An error with the exit code it maps to.
#[derive(Debug)]
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        let error = e.into();
        let numeric = matches!(
            error.downcast_ref::<TrainError>(),
            Some(TrainError::NonFiniteLoss { .. })
        ) || matches!(
            error.downcast_ref::<GradCheckError>(),
            Some(GradCheckError::NonFiniteBase(_) | GradCheckError::NonFiniteProbe { .. })
        );
        Failure {
            code: if numeric { 3 } else { 2 },
            error,
        }
    }
}

fn numeric_failure(error: anyhow::Error) -> Failure {
    Failure { code: 3, error }
}

type Outcome = Result<(), Failure>;

struct Ctx {
    config: Option<PathBuf>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    verbose: u8,
}

impl Ctx {
    fn log(&self, level: u8, msg: impl AsRef<str>) {
        if self.verbose >= level {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn out(&self, what: &str) -> anyhow::Result<&Path> {
        self.out.as_deref().ok_or_else(|| anyhow!("{what} needs --out"))
    }

    fn train_config(&self) -> anyhow::Result<TrainConfig> {
        let path = self.config.as_deref().ok_or_else(|| anyhow!("missing --config"))?;
        let mut cfg = load_config(path)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

fn require_file(path: &Path) -> anyhow::Result<()> {
    if !path.is_file() {
        bail!("{}: no such file", path.display());
    }
    Ok(())
}

fn require_parent(path: &Path) -> anyhow::Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() && !p.is_dir() => bail!("{}: directory does not exist", p.display()),
        _ => Ok(()),
    }
}

fn write_text(path: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn gen_data(ctx: &Ctx) -> Outcome {
    let out = ctx.out("gen-data")?;
    require_parent(out)?;
    let mut spec = match &ctx.config {
        Some(path) => {
            require_file(path)?;
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str::<SynthSpec>(&text)
                .with_context(|| format!("{}: not synthetic-data settings", path.display()))?
        }
        None => SynthSpec::default(),
    };
    if let Some(seed) = ctx.seed {
        spec.seed = seed;
    }
    let dataset = generate_synthetic(&spec)?;
    std::fs::write(out, dataset.to_tsv()).with_context(|| format!("writing {}", out.display()))?;
    ctx.log(1, format!("wrote {} records to {}", dataset.len(), out.display()));
    Ok(())
}

fn run_train(ctx: &Ctx, args: &TrainArgs) -> Outcome {
    let out = ctx.out("train")?;
    require_file(&args.data)?;
    require_parent(out)?;
    let log_path = args.log.clone().unwrap_or_else(|| out.with_extension("loss.csv"));
    require_parent(&log_path)?;
    let mut cfg = ctx.train_config()?;
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    cfg.validate()?;
    let resume = match &args.resume {
        Some(p) => {
            require_file(p)?;
            Some(load_checkpoint(p)?)
        }
        None => None,
    };
    let dataset = load_tsv(&args.data)?;
    let options = TrainOptions {
        resume,
        skip_validation: args.no_validation,
        ..TrainOptions::default()
    };
    let outcome = train(&dataset, &cfg, options)?;
    for e in &outcome.epochs {
        let val = e
            .val_species_top1
            .map(|v| format!(" val species top-1 {:.3}/{:.3}/{:.3}", v[0], v[1], v[2]))
            .unwrap_or_default();
        ctx.log(1, format!("epoch {} mean loss {:.5}{val}", e.epoch + 1, e.mean_loss));
    }
    save_checkpoint(out, &outcome.checkpoint)?;
    outcome.write_step_log(&log_path)?;
    ctx.log(1, format!("wrote {} and {}", out.display(), log_path.display()));
    Ok(())
}

fn hierarchy_json(s: &HierarchyStats) -> String {
    let radii: serde_json::Map<String, serde_json::Value> = hyptax::dataset::RANK_NAMES
        .iter()
        .zip(s.mean_origin_distance)
        .map(|(name, d)| (name.to_string(), d.into()))
        .collect();
    let v = serde_json::json!({
        "pairs": s.pairs,
        "violation_rate": s.violation_rate,
        "mean_origin_distance": radii,
    });
    serde_json::to_string_pretty(&v).expect("plain values") + "\n"
}

fn load_inputs(checkpoint: &Path, data: &Path) -> anyhow::Result<(Checkpoint, Dataset)> {
    require_file(checkpoint)?;
    require_file(data)?;
    Ok((load_checkpoint(checkpoint)?, load_tsv(data)?))
}

fn run_eval(ctx: &Ctx, args: &EvalArgs) -> Outcome {
    for p in [ctx.out.as_deref(), args.csv.as_deref(), args.hierarchy.as_deref()]
        .into_iter()
        .flatten()
    {
        require_parent(p)?;
    }
    let (ckpt, dataset) = load_inputs(&args.checkpoint, &args.data)?;
    let report = evaluate_all(&ckpt, &dataset)?;
    write_text(ctx.out.as_deref(), &report.to_json())?;
    if let Some(p) = &args.csv {
        write_text(Some(p), &report.to_csv())?;
    }
    if let Some(p) = &args.hierarchy {
        let stats = hierarchy_stats(&ckpt.params, &dataset, &ckpt.config)?;
        write_text(Some(p), &hierarchy_json(&stats))?;
    }
    Ok(())
}

fn run_embed(ctx: &Ctx, args: &EmbedArgs) -> Outcome {
    if let Some(p) = &ctx.out {
        require_parent(p)?;
    }
    let (ckpt, dataset) = load_inputs(&args.checkpoint, &args.data)?;
    let idx: Vec<usize> = match args.split {
        Some(s) => dataset.indices_in(s),
        None => (0..dataset.len()).collect(),
    };
    let emb = hyptax::trainer::embed_records(&ckpt.params, &dataset, &idx, &ckpt.config)?;
    let width = if idx.is_empty() { 0 } else { emb.image.coords(0).len() };
    let mut s = String::from("id");
    for m in ["img", "dna"] {
        for k in 0..width {
            write!(s, ",{m}_{k}").unwrap();
        }
    }
    s.push('\n');
    for (row, &i) in idx.iter().enumerate() {
        s.push_str(&dataset.records[i].id);
        for x in emb.image.coords(row).into_iter().chain(emb.dna.coords(row)) {
            write!(s, ",{x}").unwrap();
        }
        s.push('\n');
    }
    write_text(ctx.out.as_deref(), &s)?;
    Ok(())
}

fn gradcheck_json(cfg: &TrainConfig, report: &GradCheckReport, step: f64) -> String {
    let per: serde_json::Map<String, serde_json::Value> = report
        .per_parameter
        .iter()
        .map(|(n, e)| (n.clone(), (*e).into()))
        .collect();
    let v = serde_json::json!({
        "method": method_label(&cfg.loss),
        "step": step,
        "tolerance": GRAD_TOLERANCE,
        "max_relative_error": report.max_relative_error,
        "passed": report.max_relative_error < GRAD_TOLERANCE,
        "per_parameter": per,
    });
    serde_json::to_string_pretty(&v).expect("plain values") + "\n"
}

fn method_label(loss: &LossConfig) -> &'static str {
    Method::ALL
        .into_iter()
        .find(|&m| LossConfig::preset(m) == *loss)
        .map_or("custom", Method::name)
}

fn run_grad_check(ctx: &Ctx, args: &GradCheckArgs) -> Outcome {
    if let Some(p) = &ctx.out {
        require_parent(p)?;
    }
    let mut cfg = match &ctx.config {
        Some(_) => ctx.train_config()?,
        None => {
            let method = Method::ALL
                .into_iter()
                .find(|m| m.name() == args.method)
                .ok_or_else(|| anyhow!("unknown method `{}`", args.method))?;
            let mut cfg = TrainConfig::new(LossConfig::preset(method));
            if let Some(d) = args.d {
                cfg.d = d;
            }
            cfg.seed = ctx.seed.unwrap_or(0);
            cfg
        }
    };
    cfg.batch_size = args.batch_size;
    cfg.validate()?;
    let dataset = match &args.data {
        Some(p) => {
            require_file(p)?;
            load_tsv(p)?
        }
        None => generate_synthetic(&SynthSpec {
            branching: vec![2, 2, 2, 2],
            specimens_per_species: 4,
            d_in: cfg.d_in,
            seed: cfg.seed,
            ..SynthSpec::default()
        })?,
    };
    let train_idx = dataset.require(Split::TrainSeen)?;
    let batch = make_batches(&dataset, &train_idx, cfg.batch_size, cfg.seed, 0)?.remove(0);
    let ckpt = initial_checkpoint(&cfg)?;
    let names: Vec<String> = ckpt.params.names().map(str::to_string).collect();
    let params = ckpt.params.clone().into_entries();

    // Encoding errors surface from inside the closure; keep the first one.
    let mut failure: Option<TrainError> = None;
    let report = check_gradient(
        |g, leaves| {
            let vars = ParamVars::from_parts(names.clone(), leaves);
            let loss = encode_batch(g, &vars, &dataset, &batch, &cfg)
                .and_then(|enc| Ok(total_loss(g, &enc.embeddings, vars.log_temperature(), &cfg.loss)?.total));
            match loss {
                Ok(v) => v,
                Err(e) => {
                    failure = Some(e);
                    g.scalar(0.0)
                }
            }
        },
        &params,
        args.step,
    );
    if let Some(e) = failure {
        return Err(e.into());
    }
    let report = report?;
    ctx.log(1, format!("max relative error {:.3e}", report.max_relative_error));
    write_text(ctx.out.as_deref(), &gradcheck_json(&cfg, &report, args.step))?;
    if report.max_relative_error >= GRAD_TOLERANCE {
        return Err(numeric_failure(anyhow!(
            "gradient check failed: max relative error {:.3e} >= {GRAD_TOLERANCE:e}",
            report.max_relative_error
        )));
    }
    Ok(())
}

fn parse_pair(line: &str) -> Option<(f64, f64)> {
    let mut it = line.split(',').map(str::trim);
    let a = it.next()?.parse().ok()?;
    let b = it.next()?.parse().ok()?;
    it.next().is_none().then_some((a, b))
}

fn run_report_hm(ctx: &Ctx, args: &ReportHmArgs) -> Outcome {
    require_file(&args.input)?;
    if let Some(p) = &ctx.out {
        require_parent(p)?;
    }
    let text = std::fs::read_to_string(&args.input).with_context(|| format!("reading {}", args.input.display()))?;
    let mut s = String::from("seen,unseen,hm\n");
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let Some((seen, unseen)) = parse_pair(line) else {
            if n == 0 {
                continue;
            }
            return Err(anyhow!("{}:{}: expected `seen,unseen`", args.input.display(), n + 1).into());
        };
        if !(seen >= 0.0 && unseen >= 0.0 && seen.is_finite() && unseen.is_finite()) {
            return Err(anyhow!("{}:{}: accuracies must be finite and >= 0", args.input.display(), n + 1).into());
        }
        let hm = harmonic_mean(seen, unseen);
        writeln!(s, "{seen},{unseen},{hm:.*}", args.digits).unwrap();
    }
    write_text(ctx.out.as_deref(), &s)?;
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads as usize)
        .build_global()
        .context("starting the worker pool")?;
    let ctx = Ctx {
        config: cli.config,
        seed: cli.seed,
        out: cli.out,
        verbose: cli.verbose,
    };
    if let Some(p) = &ctx.config {
        require_file(p)?;
    }
    match &cli.command {
        Command::GenData => gen_data(&ctx),
        Command::Train(a) => run_train(&ctx, a),
        Command::Eval(a) => run_eval(&ctx, a),
        Command::Embed(a) => run_embed(&ctx, a),
        Command::GradCheck(a) => run_grad_check(&ctx, a),
        Command::ReportHm(a) => run_report_hm(&ctx, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
