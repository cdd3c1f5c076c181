//! `sstp`: generate scenes, pretrain the toy backbone, extract gradient
//! features, select a subset, evaluate, and inspect density histograms.
//!
//! Exit codes: 0 success, 2 usage error, 3 data or contract error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};

use sstp::baselines::{baseline_select, BaselineConfig, BaselineMethod};
use sstp::eval::{self, ExperimentConfig, ExperimentReport};
use sstp::features::{extract_features, read_features, write_features};
use sstp::partition::{self, read_selection, write_selection, PartitionPlan};
use sstp::predictor::{pretrain, read_params, write_params, PredictorConfig, ToyPredictorParams};
use sstp::scene::{generate_synthetic, Dataset, load_dataset, save_dataset, DensityRange, SynthConfig};
use sstp::select::{sstp_select, SelfTerm, SstpConfig};

#[derive(Parser)]
#[command(name = "sstp", version, about = "Density-aware coreset selection for trajectory datasets")]
struct Cli {
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true, env = "SSTP_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic long-tail scene file.
    GenSynth(GenSynthArgs),
    /// Train the toy predictor from a seeded initialization.
    Pretrain(PretrainArgs),
    /// Compute per-scene gradient features.
    Extract(ExtractArgs),
    /// Choose a subset of scenes.
    Select(SelectArgs),
    /// Score a predictor, or train and compare a selection against random.
    Eval(EvalArgs),
    /// Print the density histogram per partition bucket.
    Stats(StatsArgs),
}

#[derive(Args)]
struct GenSynthArgs {
    #[arg(long, default_value_t = 1000)]
    scenes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    t_obs: usize,
    #[arg(long, default_value_t = 12)]
    t_pred: usize,
    /// Probability that a scene draws its density from the dense range.
    #[arg(long, default_value_t = 0.1)]
    tail_weight: f64,
    #[arg(long, value_parser = parse_range, default_value = "2-10")]
    head: DensityRange,
    #[arg(long, value_parser = parse_range, default_value = "40-80")]
    tail: DensityRange,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct ModelArgs {
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    #[arg(long, default_value_t = 32)]
    latent: usize,
    #[arg(long, default_value_t = 6)]
    modes: usize,
}

impl ModelArgs {
    fn config(&self, t_obs: usize, t_pred: usize) -> PredictorConfig {
        PredictorConfig {
            t_obs,
            t_pred,
            hidden_dim: self.hidden,
            latent_dim: self.latent,
            modes: self.modes,
        }
    }
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    params: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Sstp,
    Random,
    Kmeans,
    Herding,
}

#[derive(Args)]
struct SelectArgs {
    /// Feature file (SSTF1).
    #[arg(long)]
    features: PathBuf,
    #[arg(long, value_enum, default_value_t = Method::Sstp)]
    method: Method,
    /// Fraction of scenes to keep, in (0, 1].
    #[arg(long, default_value_t = 0.5, value_parser = parse_alpha)]
    alpha: f64,
    #[arg(long, default_value_t = partition::DEFAULT_TAU, value_parser = parse_positive)]
    tau: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Run a baseline inside each density bucket under the same budgets.
    #[arg(long)]
    per_bucket: bool,
    /// Count each candidate's similarity to itself in the gain.
    #[arg(long)]
    include_self: bool,
    #[arg(long)]
    kmeans_clusters: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Held-out scene file.
    #[arg(long)]
    eval: PathBuf,
    /// Score these params (single mode).
    #[arg(long, conflicts_with_all = ["train", "selection"])]
    params: Option<PathBuf>,
    /// Training scene file (paired mode).
    #[arg(long, requires = "selection")]
    train: Option<PathBuf>,
    /// Selection file naming the subset arm (paired mode).
    #[arg(long, requires = "train")]
    selection: Option<PathBuf>,
    /// Also train on the whole training file.
    #[arg(long)]
    full: bool,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = eval::DEFAULT_MR_THRESHOLD)]
    mr_threshold: f64,
    /// Report path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct StatsArgs {
    /// Scene file or feature file; the format is detected from its header.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    selection: Option<PathBuf>,
    #[arg(long, default_value_t = partition::DEFAULT_TAU, value_parser = parse_positive)]
    tau: usize,
    /// Scenes with at least this many agents count as dense in the summary.
    #[arg(long, default_value_t = 40)]
    dense_from: usize,
}

fn parse_alpha(s: &str) -> Result<f64, String> {
    let a: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    partition::validate_alpha(a).map_err(|e| e.to_string())?;
    Ok(a)
}

fn parse_positive(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(n) if n > 0 => Ok(n),
        _ => Err(format!("expected a positive integer, got `{s}`")),
    }
}

fn parse_range(s: &str) -> Result<DensityRange, String> {
    let (lo, hi) = s.split_once('-').ok_or_else(|| format!("expected MIN-MAX, got `{s}`"))?;
    let lo: usize = lo.trim().parse().map_err(|_| format!("bad minimum in `{s}`"))?;
    let hi: usize = hi.trim().parse().map_err(|_| format!("bad maximum in `{s}`"))?;
    if lo == 0 || lo > hi {
        return Err(format!("need 1 <= MIN <= MAX, got `{s}`"));
    }
    Ok(DensityRange::new(lo, hi))
}

/// A flag combination or path that is wrong before any work starts.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn check_inputs(paths: &[&Path]) -> Result<()> {
    for p in paths {
        if !p.is_file() {
            return Err(usage(format!("input file {} does not exist", p.display())));
        }
    }
    Ok(())
}

fn check_output(path: &Path) -> Result<()> {
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    if !parent.is_dir() {
        return Err(usage(format!("output directory {} does not exist", parent.display())));
    }
    Ok(())
}

fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn gen_synth(a: GenSynthArgs) -> Result<()> {
    check_output(&a.out)?;
    let cfg = SynthConfig {
        num_scenes: a.scenes.max(1),
        t_obs: a.t_obs,
        t_pred: a.t_pred,
        tail_weight: a.tail_weight,
        head: a.head,
        tail: a.tail,
        ..SynthConfig::default()
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let ds = if a.scenes == 0 {
        Dataset::empty(a.t_obs, a.t_pred)?
    } else {
        generate_synthetic(&cfg, a.seed)?
    };
    save_dataset(&ds, &a.out)?;
    eprintln!("wrote {} scenes to {}", ds.len(), a.out.display());
    Ok(())
}

fn pretrain_cmd(a: PretrainArgs) -> Result<()> {
    check_inputs(&[&a.data])?;
    check_output(&a.out)?;
    let ds = load_dataset(&a.data)?;
    let cfg = a.model.config(ds.t_obs, ds.t_pred);
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let init = ToyPredictorParams::init(&cfg, a.model.seed)?;
    let trained = pretrain(&init, &ds, a.model.epochs, a.model.lr, a.model.seed)?;
    write_params(&trained, &a.out)?;
    eprintln!("trained {} epochs on {} scenes", a.model.epochs, ds.len());
    Ok(())
}

fn extract(a: ExtractArgs) -> Result<()> {
    check_inputs(&[&a.data, &a.params])?;
    check_output(&a.out)?;
    let ds = load_dataset(&a.data)?;
    let params = read_params(&a.params)?;
    let fs = extract_features(&params, &ds)?;
    write_features(&fs, &a.out)?;
    eprintln!("wrote {} features of dim {}", fs.len(), fs.dim);
    Ok(())
}

fn select(a: SelectArgs) -> Result<()> {
    check_inputs(&[&a.features])?;
    check_output(&a.out)?;
    let hash = file_hash(&a.features)?;
    let fs = read_features(&a.features)?;
    let method = match a.method {
        Method::Sstp => None,
        Method::Random => Some(BaselineMethod::Random),
        Method::Kmeans => Some(BaselineMethod::Kmeans),
        Method::Herding => Some(BaselineMethod::Herding),
    };
    let sel = match method {
        None => {
            let cfg = SstpConfig {
                alpha: a.alpha,
                tau: a.tau,
                self_term: if a.include_self { SelfTerm::Include } else { SelfTerm::Exclude },
                seed: a.seed,
            };
            sstp_select(&fs, &cfg, &hash)?
        }
        Some(m) => {
            let cfg = BaselineConfig {
                kmeans_clusters: a.kmeans_clusters,
                ..BaselineConfig::new(m, a.seed)
            };
            baseline_select(&fs, a.alpha, a.per_bucket.then_some(a.tau), &cfg, &hash)?
        }
    };
    write_selection(&sel, &a.out)?;
    eprintln!("selected {} of {} scenes", sel.len(), fs.len());
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    check_inputs(&[&a.eval])?;
    for p in a.params.iter().chain(&a.train).chain(&a.selection) {
        check_inputs(&[p])?;
    }
    for p in a.out.iter().chain(&a.csv) {
        check_output(p)?;
    }
    if !(a.mr_threshold > 0.0 && a.mr_threshold.is_finite()) {
        return Err(usage("--mr-threshold must be positive"));
    }
    let eval_set = load_dataset(&a.eval)?;
    let strata = eval::default_strata();
    let report = match (&a.params, &a.train, &a.selection) {
        (Some(p), None, None) => {
            let params = read_params(p)?;
            let r = eval::evaluate(&params, &eval_set, &strata, a.mr_threshold)?;
            eval::single_arm("eval", r, a.mr_threshold)
        }
        (None, Some(train), Some(sel)) => {
            let train = load_dataset(train)?;
            let sel = read_selection(sel)?;
            let ids: Vec<&str> = sel.ids().collect();
            let cfg = ExperimentConfig {
                predictor: Some(a.model.config(train.t_obs, train.t_pred)),
                epochs: a.model.epochs,
                lr: a.model.lr,
                seed: a.model.seed,
                include_full: a.full,
                strata,
                mr_threshold: a.mr_threshold,
                subset_label: sel.provenance.method.clone(),
            };
            eval::run_experiment(&train, &ids, &eval_set, &cfg)?
        }
        _ => return Err(usage("give either --params, or --train with --selection")),
    };
    emit_report(&report, a.out.as_deref(), a.csv.as_deref())
}

fn emit_report(report: &ExperimentReport, out: Option<&Path>, csv: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => eval::write_report(report, p)?,
        None => print!("{}", report.to_text()),
    }
    if let Some(p) = csv {
        fs::write(p, report.to_csv()).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn stats(a: StatsArgs) -> Result<()> {
    check_inputs(&[&a.input])?;
    if let Some(s) = &a.selection {
        check_inputs(&[s])?;
    }
    let bytes = fs::read(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let records: Vec<(String, usize)> = if bytes.starts_with(b"SSTF1") {
        read_features(&a.input)?
            .records
            .into_iter()
            .map(|r| (r.scene_id, r.density))
            .collect()
    } else {
        load_dataset(&a.input)?
            .scenes
            .into_iter()
            .map(|s| {
                let d = s.density();
                (s.scene_id, d)
            })
            .collect()
    };
    let plan = PartitionPlan::from_densities(records.iter().map(|(id, d)| (id.as_str(), *d)), a.tau)?;
    let selected: Option<std::collections::HashSet<String>> = match &a.selection {
        Some(p) => {
            let sel = read_selection(p)?;
            let ids: std::collections::HashSet<String> = sel.ids().map(str::to_owned).collect();
            if let Some(missing) = ids.iter().find(|id| !records.iter().any(|(r, _)| r == *id)) {
                anyhow::bail!("selection names `{missing}`, which is not in {}", a.input.display());
            }
            Some(ids)
        }
        None => None,
    };
    print!("{}", stats_table(&plan, &records, selected.as_ref(), a.dense_from));
    Ok(())
}

fn pct(n: usize, d: usize) -> f64 {
    if d == 0 {
        0.0
    } else {
        100.0 * n as f64 / d as f64
    }
}

fn stats_table(
    plan: &PartitionPlan,
    records: &[(String, usize)],
    selected: Option<&std::collections::HashSet<String>>,
    dense_from: usize,
) -> String {
    use std::fmt::Write as _;
    let total = plan.total();
    let picked_total = selected.map_or(0, |s| s.len());
    let mut out = format!(
        "#STATS tau={} rho_min={} buckets={} scenes={total}",
        plan.tau,
        plan.rho_min,
        plan.k()
    );
    if selected.is_some() {
        let _ = write!(out, " selected={picked_total}");
    }
    out.push('\n');
    out.push_str(if selected.is_some() {
        "bucket\trange\tbefore\tshare\tafter\tshare\n"
    } else {
        "bucket\trange\tbefore\tshare\n"
    });
    for b in &plan.buckets {
        let _ = write!(out, "{}\t[{},{})\t{}\t{:.2}%", b.k, b.lo, b.hi, b.len(), pct(b.len(), total));
        if let Some(sel) = selected {
            let after = b.ids.iter().filter(|id| sel.contains(*id)).count();
            let _ = write!(out, "\t{after}\t{:.2}%", pct(after, picked_total));
        }
        out.push('\n');
    }
    let dense = records.iter().filter(|(_, d)| *d >= dense_from).count();
    let _ = write!(out, "dense(>={dense_from})\t\t{dense}\t{:.2}%", pct(dense, total));
    if let Some(sel) = selected {
        let after = records.iter().filter(|(id, d)| *d >= dense_from && sel.contains(id)).count();
        let _ = write!(out, "\t{after}\t{:.2}%", pct(after, picked_total));
    }
    out.push('\n');
    out
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match cli.command {
        Command::GenSynth(a) => gen_synth(a),
        Command::Pretrain(a) => pretrain_cmd(a),
        Command::Extract(a) => extract(a),
        Command::Select(a) => select(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Stats(a) => stats(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if e.is::<Usage>() { 2 } else { 3 })
        }
    }
}
