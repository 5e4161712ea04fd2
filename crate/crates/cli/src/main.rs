use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use dynperceiver::calibration::{
    budget_sweep, fractions_extended, linspace, solve_q, thresholds_from_fractions, write_curve, CalibrationSet,
};
use dynperceiver::engine::{batch_evaluate, exit_records, flops_profile, write_trace_log, ExitPolicy};
use dynperceiver::model::{check_model, DynPerceiver, ModelConfig};
use dynperceiver::tensor::checkpoint::load_checkpoint;
use dynperceiver::train::{load_idx, train, write_history, Dataset, LossWeights, Split, SyntheticSpec, TrainConfig};
use dynperceiver::{Graph, ParamStore, Tensor};

/// Gradient checks are refused above this many parameters.
const GRADCHECK_PARAM_LIMIT: usize = 200_000;
const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "dynperceiver", version, about = "Train, calibrate and profile a dual-branch early-exit classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct ModelArgs {
    /// Named model preset.
    #[arg(long)]
    preset: Option<String>,
    /// Model config file (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct Common {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory; nothing is written elsewhere.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct DataArgs {
    /// `synthetic:<classes>x<per_class>` or `idx:<images>,<labels>`.
    #[arg(long)]
    data: String,
}

#[derive(Args)]
struct TrainedArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train with self-distillation; writes a checkpoint and history.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 2)]
        warmup_epochs: usize,
        #[arg(long, default_value_t = 0.05)]
        weight_decay: f64,
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        #[arg(long, default_value_t = 0.1)]
        label_smoothing: f64,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
    },
    /// Early-exit evaluation on the evaluation split with fixed thresholds.
    Evaluate {
        #[command(flatten)]
        trained: TrainedArgs,
        /// Four comma-separated thresholds; the last must be 0. Default: run every sample to exit 4.
        #[arg(long)]
        thresholds: Option<String>,
    },
    /// Solve thresholds for one FLOPs budget on the calibration split.
    Calibrate {
        #[command(flatten)]
        trained: TrainedArgs,
        #[arg(long)]
        budget: f64,
    },
    /// Accuracy against cost over a list of budgets.
    Sweep {
        #[command(flatten)]
        trained: TrainedArgs,
        /// `full`, `linspace:<n>` over [C1, CK], or comma-separated FLOPs values.
        #[arg(long, default_value = "linspace:10")]
        budgets: String,
    },
    /// Per-exit cumulative FLOPs and parameter count.
    Profile {
        #[command(flatten)]
        common: Common,
        /// Print JSON instead of a table.
        #[arg(long)]
        json: bool,
        /// Also compare against the runtime FLOPs counter.
        #[arg(long)]
        check: bool,
    },
    /// Finite-difference check of every parameter gradient.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        /// Negative control: perturb the GELU backward rule.
        #[arg(long, hide = true)]
        corrupt_gelu_backward: bool,
    },
}

/// Why a command did not succeed.
enum Failure {
    /// A check ran and failed: exit 1.
    Check(String),
    /// Usage, config, file or data problem: exit 2.
    Usage(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Usage(e)
    }
}

impl From<dynperceiver::Error> for Failure {
    fn from(e: dynperceiver::Error) -> Self {
        Failure::Usage(e.into())
    }
}

type CmdResult = Result<(), Failure>;

/// Six significant digits.
fn sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let mag = x.abs().log10().floor() as i32;
    if (-4..6).contains(&mag) {
        format!("{:.*}", (5 - mag) as usize, x)
    } else {
        format!("{x:.5e}")
    }
}

fn load_config(m: &ModelArgs) -> anyhow::Result<ModelConfig> {
    match (&m.preset, &m.config) {
        (Some(name), None) => Ok(ModelConfig::preset(name)?),
        (None, Some(path)) => ModelConfig::load(path).with_context(|| format!("loading {}", path.display())),
        _ => bail!("give exactly one of --preset or --config"),
    }
}

fn parse_data(spec: &str, cfg: &ModelConfig, seed: u64) -> anyhow::Result<Dataset> {
    let data = if let Some(rest) = spec.strip_prefix("synthetic:") {
        let (k, n) = rest.split_once('x').ok_or_else(|| anyhow!("expected synthetic:<classes>x<per_class>, got `{spec}`"))?;
        let (k, n): (usize, usize) = (k.parse()?, n.parse()?);
        if cfg.image.height != cfg.image.width {
            bail!("synthetic data needs a square model input, got {}x{}", cfg.image.height, cfg.image.width);
        }
        let spec = SyntheticSpec { channels: cfg.image.channels, ..SyntheticSpec::new(k, n, cfg.image.height) };
        spec.generate(seed)?
    } else if let Some(rest) = spec.strip_prefix("idx:") {
        let (images, labels) = rest.split_once(',').ok_or_else(|| anyhow!("expected idx:<images>,<labels>, got `{spec}`"))?;
        let mut d = load_idx(Path::new(images), Path::new(labels))?;
        d.assign_holdout(seed);
        d
    } else {
        bail!("unknown data source `{spec}`; use synthetic:<classes>x<per_class> or idx:<images>,<labels>");
    };
    let [c, h, w] = data.image_shape();
    if [c, h, w] != [cfg.image.channels, cfg.image.height, cfg.image.width] {
        bail!("data images are {c}x{h}x{w} but the model expects {}x{}x{}", cfg.image.channels, cfg.image.height, cfg.image.width);
    }
    if data.num_classes > cfg.num_classes {
        bail!("data has {} classes but the model predicts {}", data.num_classes, cfg.num_classes);
    }
    Ok(data)
}

fn create_out(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}

fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> anyhow::Result<()> {
    let path = dir.join(name);
    fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn write_json(dir: &Path, name: &str, value: &serde_json::Value) -> anyhow::Result<()> {
    write_file(dir, name, (serde_json::to_string_pretty(value)? + "\n").as_bytes())
}

fn cmd_train(
    common: &Common,
    data: &DataArgs,
    tc: TrainConfig,
) -> CmdResult {
    let cfg = load_config(&common.model)?;
    let data = parse_data(&data.data, &cfg, common.seed)?;
    create_out(&common.out)?;
    let (net, mut store) = DynPerceiver::build(&cfg, common.seed)?;
    println!(
        "training `{}` ({} parameters) on {} samples, {} held out",
        cfg.name,
        store.count(),
        data.indices(Split::Train).len(),
        data.held_out().len()
    );
    let tc = TrainConfig { seed: common.seed, checkpoint: Some(common.out.join("checkpoint.bin")), ..tc };
    let history = train(&net, &mut store, &data, &tc, |row| {
        let acc: Vec<String> = row
            .accuracy
            .iter()
            .enumerate()
            .filter_map(|(k, a)| a.map(|a| format!("exit{} {}", k + 1, sig6(a))))
            .collect();
        println!("epoch {:>3}  loss {}  {}", row.epoch, sig6(row.loss), acc.join("  "));
    })?;
    let mut buf = Vec::new();
    write_history(&mut buf, &history)?;
    write_file(&common.out, "history.csv", &buf)?;
    write_file(&common.out, "config.toml", cfg.to_toml_string().as_bytes())?;
    if let Some(last) = history.last() {
        for (k, a) in last.accuracy.iter().enumerate() {
            if let Some(a) = a {
                println!("final exit{} accuracy {}", k + 1, sig6(*a));
            }
        }
    }
    Ok(())
}

/// Model with restored parameters plus the dataset with its calibration split tagged.
fn load_trained(args: &TrainedArgs) -> anyhow::Result<(ModelConfig, DynPerceiver, ParamStore, Dataset)> {
    let cfg = load_config(&args.common.model)?;
    let ckpt = load_checkpoint(&args.checkpoint).with_context(|| format!("reading checkpoint {}", args.checkpoint.display()))?;
    let (net, mut store) = DynPerceiver::build(&cfg, args.common.seed)?;
    ckpt.restore(&mut store, cfg.hash())?;
    let mut data = parse_data(&args.data.data, &cfg, args.common.seed)?;
    data.assign_calibration(args.common.seed);
    Ok((cfg, net, store, data))
}

fn split_of(data: &Dataset, split: Split) -> anyhow::Result<(Tensor, Vec<usize>)> {
    let idx = data.indices(split);
    if idx.is_empty() {
        bail!("the {split:?} split is empty");
    }
    Ok(data.gather(&idx)?)
}

fn parse_thresholds(text: &str) -> anyhow::Result<ExitPolicy> {
    let v: Vec<f64> = text.split(',').map(|s| s.trim().parse::<f64>()).collect::<Result<_, _>>()?;
    let th: [f64; 4] = v.try_into().map_err(|v: Vec<f64>| anyhow!("expected 4 thresholds, got {}", v.len()))?;
    Ok(ExitPolicy::new(th)?)
}

fn cmd_evaluate(args: &TrainedArgs, thresholds: Option<&str>) -> CmdResult {
    let (_, net, store, data) = load_trained(args)?;
    let policy = match thresholds {
        Some(t) => parse_thresholds(t)?,
        None => ExitPolicy::full(),
    };
    let (images, labels) = split_of(&data, Split::Eval)?;
    let ev = batch_evaluate(&net, &store, &images, &labels, &policy)?;
    let out = &args.common.out;
    create_out(out)?;
    let mut buf = Vec::new();
    write_trace_log(&mut buf, &ev.traces)?;
    write_file(out, "traces.csv", &buf)?;
    write_json(
        out,
        "evaluate.json",
        &json!({
            "thresholds": policy.thresholds(),
            "accuracy": ev.accuracy,
            "mean_flops": ev.mean_flops,
            "exit_histogram": ev.exit_histogram,
            "samples": labels.len(),
        }),
    )?;
    println!("accuracy {}  mean FLOPs {}  exits {:?}", sig6(ev.accuracy), sig6(ev.mean_flops), ev.exit_histogram);
    Ok(())
}

fn calibration_set(net: &DynPerceiver, store: &ParamStore, data: &Dataset) -> anyhow::Result<CalibrationSet> {
    let (images, labels) = split_of(data, Split::Cal)?;
    let records = exit_records(net, store, &images, 32)?;
    Ok(CalibrationSet::from_records(&records, &labels, net.config.exits, &flops_profile(&net.config))?)
}

fn budget_error(e: dynperceiver::Error) -> Failure {
    match e {
        dynperceiver::Error::Budget { budget, min, max } => Failure::Usage(anyhow!(
            "budget {} is outside the feasible range [C1, CK] = [{}, {}]",
            sig6(budget),
            sig6(min),
            sig6(max)
        )),
        other => other.into(),
    }
}

fn cmd_calibrate(args: &TrainedArgs, budget: f64) -> CmdResult {
    let (_, net, store, data) = load_trained(args)?;
    let cal = calibration_set(&net, &store, &data)?;
    let q = solve_q(&cal.costs, budget, false).map_err(budget_error)?;
    let p = fractions_extended(q, cal.num_exits())?;
    let th = thresholds_from_fractions(&cal, &p)?;
    let policy = cal.policy(&th)?;
    let (cal_flops, cal_acc, _) = cal.evaluate(&th);
    let (images, labels) = split_of(&data, Split::Eval)?;
    let ev = batch_evaluate(&net, &store, &images, &labels, &policy)?;
    let out = &args.common.out;
    create_out(out)?;
    write_json(
        out,
        "calibration.json",
        &json!({
            "budget": budget,
            "q": q,
            "fractions": p,
            "thresholds": policy.thresholds(),
            "cal_mean_flops": cal_flops,
            "cal_accuracy": cal_acc,
            "mean_flops": ev.mean_flops,
            "accuracy": ev.accuracy,
        }),
    )?;
    let shown: Vec<String> = policy.thresholds().iter().map(|t| sig6(*t)).collect();
    println!("q {}  thresholds [{}]", sig6(q), shown.join(", "));
    println!("calibration: mean FLOPs {}  accuracy {}", sig6(cal_flops), sig6(cal_acc));
    println!("evaluation:  mean FLOPs {}  accuracy {}", sig6(ev.mean_flops), sig6(ev.accuracy));
    Ok(())
}

fn parse_budgets(text: &str, lo: f64, hi: f64) -> anyhow::Result<Vec<f64>> {
    if text == "full" {
        return Ok(vec![hi]);
    }
    if let Some(n) = text.strip_prefix("linspace:") {
        let n: usize = n.parse()?;
        if n == 0 {
            bail!("linspace needs at least one point");
        }
        return Ok(linspace(lo, hi, n));
    }
    Ok(text.split(',').map(|s| s.trim().parse::<f64>()).collect::<Result<_, _>>()?)
}

fn cmd_sweep(args: &TrainedArgs, budgets: &str) -> CmdResult {
    let (cfg, net, store, data) = load_trained(args)?;
    let cal = calibration_set(&net, &store, &data)?;
    let (c1, ck) = flops_profile(&cfg).range(cfg.exits);
    let budgets = parse_budgets(budgets, c1 as f64, ck as f64)?;
    let (images, labels) = split_of(&data, Split::Eval)?;
    let rows = budget_sweep(&cal, &budgets, |p| batch_evaluate(&net, &store, &images, &labels, p)).map_err(budget_error)?;
    let out = &args.common.out;
    create_out(out)?;
    let mut buf = Vec::new();
    write_curve(&mut buf, &rows)?;
    write_file(out, "curve.csv", &buf)?;
    for r in &rows {
        println!(
            "budget {}  mean FLOPs {}  accuracy {}  (calibration {} / {})",
            sig6(r.budget),
            sig6(r.mean_flops),
            sig6(r.accuracy),
            sig6(r.cal_mean_flops),
            sig6(r.cal_accuracy)
        );
    }
    let (first, last) = (&rows[0], &rows[rows.len() - 1]);
    println!(
        "endpoints: budget {} -> accuracy {}, budget {} -> accuracy {}; feasible range [{}, {}]",
        sig6(first.budget),
        sig6(first.accuracy),
        sig6(last.budget),
        sig6(last.accuracy),
        c1,
        ck
    );
    Ok(())
}

/// Runtime FLOPs counted by the graph while advancing one random image to each exit.
fn counted_flops(cfg: &ModelConfig, seed: u64) -> anyhow::Result<[u64; 4]> {
    let (net, store) = DynPerceiver::build(cfg, seed)?;
    let shape = [1, cfg.image.channels, cfg.image.height, cfg.image.width];
    let n: usize = shape.iter().product();
    let mut r = dynperceiver::tensor::rng::stream(seed, "profile.image");
    let image = Tensor::new(shape.to_vec(), dynperceiver::tensor::rng::standard_normal(&mut r, n))?;
    let mut out = [0u64; 4];
    for (k, slot) in out.iter_mut().enumerate() {
        let mut g = Graph::inference();
        let x = g.constant(image.clone());
        let mut exe = net.start(&store, &mut g, x)?;
        exe.advance_to_exit(k + 1)?;
        *slot = exe.graph_ref().flops();
    }
    Ok(out)
}

fn cmd_profile(common: &Common, as_json: bool, check: bool) -> CmdResult {
    let cfg = load_config(&common.model)?;
    let (_, store) = DynPerceiver::build(&cfg, common.seed)?;
    let profile = flops_profile(&cfg);
    let counted = if check { Some(counted_flops(&cfg, common.seed)?) } else { None };
    let matches = counted.map(|c| c == profile.cumulative);
    if as_json {
        let value = json!({
            "config": cfg.name,
            "params": store.count(),
            "exits": cfg.exits,
            "cumulative_flops": profile.cumulative,
            "segments": profile.segments.iter().map(|s| json!({"name": s.name, "flops": s.flops})).collect::<Vec<_>>(),
            "counted_flops": counted,
            "check_passed": matches,
        });
        println!("{}", serde_json::to_string_pretty(&value).map_err(anyhow::Error::from)?);
    } else {
        println!("config {}  parameters {}", cfg.name, store.count());
        println!("{:<6} {:>16} {:>10}", "exit", "cumulative FLOPs", "enabled");
        for k in 0..4 {
            println!("{:<6} {:>16} {:>10}", k + 1, profile.cumulative[k], cfg.exits[k]);
        }
        if let Some(c) = counted {
            println!("runtime counter {:?}: {}", c, if matches == Some(true) { "match" } else { "MISMATCH" });
        }
    }
    if matches == Some(false) {
        return Err(Failure::Check(format!(
            "closed-form FLOPs {:?} differ from the runtime counter {:?}",
            profile.cumulative,
            counted.unwrap_or_default()
        )));
    }
    Ok(())
}

fn cmd_gradcheck(common: &Common, eps: f64, corrupt: bool) -> CmdResult {
    let cfg = load_config(&common.model)?;
    let (_, store) = DynPerceiver::build(&cfg, common.seed)?;
    if store.count() >= GRADCHECK_PARAM_LIMIT {
        return Err(Failure::Usage(anyhow!(
            "refusing to gradient-check `{}`: {} parameters (limit {}); a full finite-difference pass needs two forward passes per parameter",
            cfg.name,
            store.count(),
            GRADCHECK_PARAM_LIMIT
        )));
    }
    let outcome = check_model(&cfg, common.seed, eps, corrupt)?;
    let r = &outcome.report;
    let worst = r.worst.as_ref().map(|(p, i)| format!("{p}[{i}]")).unwrap_or_else(|| "-".into());
    println!(
        "checked {} parameters  max relative error {}  worst {}  (analytic {}, numeric {})",
        r.checked,
        sig6(r.max_relative_error),
        worst,
        sig6(r.worst_pair.0),
        sig6(r.worst_pair.1)
    );
    if r.max_relative_error < GRADCHECK_TOLERANCE {
        println!("gradient check passed (< {GRADCHECK_TOLERANCE:e})");
        Ok(())
    } else {
        Err(Failure::Check(format!("max relative error {} is not below {GRADCHECK_TOLERANCE:e}", sig6(r.max_relative_error))))
    }
}

fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Train {
            common,
            data,
            epochs,
            batch_size,
            lr,
            warmup_epochs,
            weight_decay,
            alpha,
            label_smoothing,
            temperature,
        } => {
            let tc = TrainConfig {
                epochs,
                batch_size,
                lr,
                warmup_epochs,
                weight_decay,
                loss: LossWeights { alpha, label_smoothing, temperature },
                ..TrainConfig::default()
            };
            cmd_train(&common, &data, tc)
        }
        Command::Evaluate { trained, thresholds } => cmd_evaluate(&trained, thresholds.as_deref()),
        Command::Calibrate { trained, budget } => cmd_calibrate(&trained, budget),
        Command::Sweep { trained, budgets } => cmd_sweep(&trained, &budgets),
        Command::Profile { common, json, check } => cmd_profile(&common, json, check),
        Command::Gradcheck { common, eps, corrupt_gelu_backward } => cmd_gradcheck(&common, eps, corrupt_gelu_backward),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = run(cli);
    let _ = std::io::stdout().flush();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
