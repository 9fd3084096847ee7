//! `dynprice`: simulate transactions, fit the two-stage and direct
//! estimators, compare them, and quote prices.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dynprice_core::config::RunConfig;
use dynprice_core::dglm::{write_trace, PosteriorExport};
use dynprice_core::direct::{write_training_log, DirectExport};
use dynprice_core::features::{combo_design, load_csv, save_csv, Dataset};
use dynprice_core::firststage::{load_predictions, save_predictions};
use dynprice_core::metrics::{
    build_report, combo_sensitivities, read_truth, write_alpha_trace, write_truth, MethodResult, TruthTable,
};
use dynprice_core::pipeline::{evaluate, first_stage, first_stage_grouped, run_direct, second_stage, simulate_dataset, truth_table};
use dynprice_core::policy::{expected_margin, price, price_grid, MarginKind, PricingContext};
use dynprice_core::{Error, Result};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

#[derive(Parser, Debug)]
#[command(name = "dynprice", version, about = "Price-sensitivity estimation and pricing for airline transaction data")]
struct Cli {
    /// TOML configuration file; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one setting, e.g. `--set sim.capacity=80`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE", global = true)]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a transaction history and write it as CSV.
    Simulate(SimulateArgs),
    /// Cross-fit the price and demand nuisance models.
    FitFirstStage(FirstStageArgs),
    /// Run the sequential Bayesian second stage.
    FitTwoStage(TwoStageArgs),
    /// Train the Wide & Deep direct estimator.
    FitDirect(DirectArgs),
    /// Compare fitted estimators and write the report directory.
    Evaluate(EvaluateArgs),
    /// Quote a price for one (POS, TF) combination.
    Price(PriceArgs),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long)]
    out: PathBuf,
    /// Simulator seed (`sim.rng_seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Also write the true alpha table (pos,tf,alpha).
    #[arg(long)]
    truth_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FirstStageArgs {
    /// Transaction CSV; repeat for several markets. The market id is the file stem.
    #[arg(long = "data", required = true)]
    data: Vec<PathBuf>,
    /// Output predictions CSV, one per `--data`, in the same order.
    #[arg(long = "out", required = true)]
    out: Vec<PathBuf>,
    /// CSV of `market_id,group_id` rows; enables the shared group factor.
    #[arg(long)]
    groups: Option<PathBuf>,
    #[arg(long)]
    folds: Option<usize>,
    /// Fold shuffle seed (`crossfit.shuffle_seed`).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct TwoStageArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    predictions: PathBuf,
    /// Posterior export (JSON).
    #[arg(long)]
    out: PathBuf,
    /// Weekly parameter trace CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Weekly alpha trace per (POS, TF) CSV.
    #[arg(long)]
    alpha_trace: Option<PathBuf>,
    /// `laplace` or `moment_match`.
    #[arg(long)]
    mode: Option<String>,
}

#[derive(Args, Debug)]
struct DirectArgs {
    #[arg(long)]
    data: PathBuf,
    /// Directory for per-run exports and training logs.
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 1)]
    runs: usize,
    /// Seed of the first run (`direct.rng_seed`); run r uses seed + r.
    #[arg(long)]
    seed: Option<u64>,
    /// True alpha table; enables per-run and mean MAPE.
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Transactions used for booking weights and the descriptive CSVs.
    #[arg(long)]
    data: Option<PathBuf>,
    /// `NAME=PATH` of a posterior or direct export. Repeatable.
    #[arg(long = "method", required = true, value_name = "NAME=PATH")]
    methods: Vec<String>,
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct PriceArgs {
    /// Posterior export supplying the slope mean and covariance.
    #[arg(long, conflicts_with = "truth_slope")]
    posterior: Option<PathBuf>,
    /// Use the simulator's true slope for the combination, with no uncertainty.
    #[arg(long)]
    truth_slope: bool,
    #[arg(long)]
    policy: Option<String>,
    #[arg(long)]
    quantile: Option<f64>,
    #[arg(long)]
    pos: Option<u8>,
    #[arg(long)]
    tf: Option<u8>,
    #[arg(long)]
    cost: Option<f64>,
    #[arg(long)]
    lb: Option<f64>,
    #[arg(long)]
    ub: Option<f64>,
    /// Seed for the Thompson draw (`policy.seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Write expected margins over the price grid to this CSV.
    #[arg(long)]
    margin_curve: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut overrides = cli.overrides.clone();
    let mut push = |key: &str, v: Option<String>| {
        if let Some(v) = v {
            overrides.push(format!("{key}={v}"));
        }
    };
    match &cli.command {
        Command::Simulate(a) => push("sim.rng_seed", a.seed.map(|s| s.to_string())),
        Command::FitFirstStage(a) => {
            push("crossfit.n_folds", a.folds.map(|s| s.to_string()));
            push("crossfit.shuffle_seed", a.seed.map(|s| s.to_string()));
        }
        Command::FitTwoStage(a) => push("dglm.mode", a.mode.as_ref().map(|m| toml_string(&m.replace('-', "_")))),
        Command::FitDirect(a) => push("direct.rng_seed", a.seed.map(|s| s.to_string())),
        Command::Evaluate(_) => {}
        Command::Price(a) => {
            push("policy.kind", a.policy.as_ref().map(|p| toml_string(&p.replace('-', "_"))));
            push("policy.quantile", a.quantile.map(|v| v.to_string()));
            push("policy.pos", a.pos.map(|v| v.to_string()));
            push("policy.tf", a.tf.map(|v| v.to_string()));
            push("policy.cost", a.cost.map(float_literal));
            push("policy.p_lb", a.lb.map(float_literal));
            push("policy.p_ub", a.ub.map(float_literal));
            push("policy.seed", a.seed.map(|s| s.to_string()));
        }
    }
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;

    match cli.command {
        Command::Simulate(a) => simulate(&cfg, &a),
        Command::FitFirstStage(a) => fit_first_stage(&cfg, &a),
        Command::FitTwoStage(a) => fit_two_stage(&cfg, &a),
        Command::FitDirect(a) => fit_direct(&cfg, &a),
        Command::Evaluate(a) => evaluate_cmd(&cfg, &a),
        Command::Price(a) => price_cmd(&cfg, &a),
    }
}

fn toml_string(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

/// Keeps integral values typed as floats when parsed back as TOML.
fn float_literal(v: f64) -> String {
    if v.is_finite() && v.fract() == 0.0 {
        format!("{v:.1}")
    } else {
        v.to_string()
    }
}

fn require_input(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("input file {} does not exist", path.display())))
    }
}

fn require_output(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() && !dir.is_dir() => Err(Error::Config(format!(
            "output directory {} does not exist",
            dir.display()
        ))),
        _ => Ok(()),
    }
}

fn sidecar_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".provenance.json");
    PathBuf::from(s)
}

/// Writes `<out>.provenance.json` with the effective configuration, its
/// SHA-256 and the seed that drove the command.
fn write_provenance(out: &Path, command: &str, cfg: &RunConfig, seed: Option<u64>, inputs: &[&Path]) -> Result<()> {
    let text = cfg.to_toml_string()?;
    let hash: String = Sha256::digest(text.as_bytes()).iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    });
    let doc = serde_json::json!({
        "command": command,
        "config_sha256": hash,
        "seed": seed,
        "inputs": inputs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        "config": text,
    });
    let mut f = std::fs::File::create(sidecar_path(out))?;
    serde_json::to_writer_pretty(&mut f, &doc)?;
    f.write_all(b"\n")?;
    Ok(())
}

fn simulate(cfg: &RunConfig, a: &SimulateArgs) -> Result<()> {
    require_output(&a.out)?;
    if let Some(t) = &a.truth_out {
        require_output(t)?;
    }
    let ds = simulate_dataset(cfg)?;
    save_csv(&ds, &a.out)?;
    write_provenance(&a.out, "simulate", cfg, Some(cfg.sim.rng_seed), &[])?;
    if let Some(t) = &a.truth_out {
        write_truth(&truth_table(&cfg.sim), std::fs::File::create(t)?)?;
    }
    let bookings: u64 = ds.records.iter().map(|r| r.bookings as u64).sum();
    println!(
        "wrote {} records ({} departures, {bookings} bookings) to {}",
        ds.len(),
        cfg.sim.num_departure_days,
        a.out.display()
    );
    Ok(())
}

fn read_group_map(path: &Path) -> Result<HashMap<String, u32>> {
    let text = std::fs::read_to_string(path)?;
    let mut map = HashMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (n == 0 && line.starts_with("market")) {
            continue;
        }
        let parse_err = |msg: &str| Error::Parse {
            line: n as u64 + 1,
            msg: msg.to_string(),
        };
        let (m, g) = line.split_once(',').ok_or_else(|| parse_err("expected market_id,group_id"))?;
        let g: u32 = g.trim().parse().map_err(|_| parse_err("group_id is not an integer"))?;
        map.insert(m.trim().to_string(), g);
    }
    Ok(map)
}

fn fit_first_stage(cfg: &RunConfig, a: &FirstStageArgs) -> Result<()> {
    if a.data.len() != a.out.len() {
        return Err(Error::Config(format!(
            "{} --data files but {} --out files",
            a.data.len(),
            a.out.len()
        )));
    }
    for p in &a.data {
        require_input(p)?;
    }
    for p in &a.out {
        require_output(p)?;
    }
    if let Some(g) = &a.groups {
        require_input(g)?;
    }
    if a.groups.is_none() && a.data.len() > 1 {
        return Err(Error::Config("several markets need a --groups map".into()));
    }

    let datasets: Vec<Dataset> = a.data.iter().map(|p| load_csv(p, &cfg.schema)).collect::<Result<_>>()?;
    let preds = match &a.groups {
        Some(g) => first_stage_grouped(&datasets, &read_group_map(g)?, &cfg.crossfit, &cfg.forest)?,
        None => vec![first_stage(&datasets[0], &cfg.crossfit, &cfg.forest)?],
    };
    for ((p, out), data) in preds.iter().zip(&a.out).zip(&a.data) {
        save_predictions(p, out)?;
        let mut inputs = vec![data.as_path()];
        if let Some(g) = &a.groups {
            inputs.push(g);
        }
        write_provenance(out, "fit-first-stage", cfg, Some(cfg.crossfit.shuffle_seed), &inputs)?;
        println!("wrote {} predictions to {}", p.len(), out.display());
    }
    Ok(())
}

fn fit_two_stage(cfg: &RunConfig, a: &TwoStageArgs) -> Result<()> {
    require_input(&a.data)?;
    require_input(&a.predictions)?;
    for p in [Some(&a.out), a.trace.as_ref(), a.alpha_trace.as_ref()].into_iter().flatten() {
        require_output(p)?;
    }
    let ds = load_csv(&a.data, &cfg.schema)?;
    let preds = load_predictions(&a.predictions)?;
    preds.check_alignment(&ds)?;
    let fit = second_stage(&ds, &preds, &cfg.dglm)?;

    PosteriorExport::new(&fit, &cfg.dglm).save(&a.out)?;
    write_provenance(&a.out, "fit-two-stage", cfg, None, &[&a.data, &a.predictions])?;
    if let Some(t) = &a.trace {
        write_trace(&fit.trace, &fit.names, std::io::BufWriter::new(std::fs::File::create(t)?))?;
    }
    if let Some(t) = &a.alpha_trace {
        write_alpha_trace(&fit.trace, &ds.schema, std::io::BufWriter::new(std::fs::File::create(t)?))?;
    }
    println!("posterior over {} parameters written to {}", fit.names.len(), a.out.display());
    print_alphas(&fit.state.theta_mean(), cfg, None)?;
    Ok(())
}

fn print_alphas(theta: &[f64], cfg: &RunConfig, truth: Option<&TruthTable>) -> Result<()> {
    for e in combo_sensitivities(theta, &cfg.schema, truth)? {
        let alpha = e.alpha.map_or("undefined".to_string(), |a| format!("{a:.3}"));
        match e.ape {
            Some(ape) => println!("  pos {} tf {}: alpha {alpha} (APE {ape:.2}%)", e.pos, e.tf),
            None => println!("  pos {} tf {}: alpha {alpha}", e.pos, e.tf),
        }
    }
    Ok(())
}

fn load_truth(path: &Path, cfg: &RunConfig) -> Result<TruthTable> {
    read_truth(std::fs::File::open(path)?, &cfg.schema)
}

fn fit_direct(cfg: &RunConfig, a: &DirectArgs) -> Result<()> {
    require_input(&a.data)?;
    if let Some(t) = &a.truth {
        require_input(t)?;
    }
    if a.runs == 0 {
        return Err(Error::Config("--runs must be at least 1".into()));
    }
    std::fs::create_dir_all(&a.out_dir)?;
    let ds = load_csv(&a.data, &cfg.schema)?;
    let truth = a.truth.as_deref().map(|t| load_truth(t, cfg)).transpose()?;

    let results = run_direct(&ds, &cfg.direct, a.runs)?;
    let mut summary = String::from("run,seed,best_epoch,mape,wmape\n");
    let (mut m_sum, mut w_sum) = (0.0, 0.0);
    for (r, res) in results.iter().enumerate() {
        let seed = cfg.direct.rng_seed.wrapping_add(r as u64);
        let export = DirectExport::new(res, ds.schema.design_names(), &cfg.direct);
        let json = a.out_dir.join(format!("direct_run{r}.json"));
        export.save(&json)?;
        let mut run_cfg = cfg.clone();
        run_cfg.direct.rng_seed = seed;
        write_provenance(&json, "fit-direct", &run_cfg, Some(seed), &[&a.data])?;
        let log = std::fs::File::create(a.out_dir.join(format!("training_log_run{r}.csv")))?;
        write_training_log(&res.log, std::io::BufWriter::new(log))?;

        match &truth {
            Some(t) => {
                let ev = evaluate(&export.theta, &ds, t)?;
                m_sum += ev.mape;
                w_sum += ev.wmape;
                let _ = writeln!(summary, "{r},{seed},{},{},{}", res.best_epoch, ev.mape, ev.wmape);
                println!("run {r} (seed {seed}): MAPE {:.3}% wMAPE {:.3}%", ev.mape, ev.wmape);
            }
            None => {
                let _ = writeln!(summary, "{r},{seed},{},,", res.best_epoch);
                println!("run {r} (seed {seed}): best epoch {}", res.best_epoch);
            }
        }
    }
    if truth.is_some() {
        let n = results.len() as f64;
        println!("mean over {} runs: MAPE {:.3}% wMAPE {:.3}%", results.len(), m_sum / n, w_sum / n);
    }
    std::fs::write(a.out_dir.join("runs.csv"), summary)?;
    Ok(())
}

/// θ̂ from either export format.
fn load_theta(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path)?;
    if let Ok(p) = serde_json::from_str::<PosteriorExport>(&text) {
        return Ok(p.mu[..p.dim_theta].to_vec());
    }
    let d: DirectExport = serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("{} is neither a posterior nor a direct export: {e}", path.display())))?;
    Ok(d.theta)
}

fn evaluate_cmd(cfg: &RunConfig, a: &EvaluateArgs) -> Result<()> {
    let mut methods = Vec::new();
    for spec in &a.methods {
        let (name, path) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--method '{spec}' is not NAME=PATH")))?;
        require_input(Path::new(path))?;
        methods.push((name.to_string(), PathBuf::from(path)));
    }
    if let Some(p) = &a.data {
        require_input(p)?;
    }
    if let Some(p) = &a.truth {
        require_input(p)?;
    }

    let ds = a.data.as_deref().map(|p| load_csv(p, &cfg.schema)).transpose()?;
    let truth = a.truth.as_deref().map(|t| load_truth(t, cfg)).transpose()?;
    let results: Vec<MethodResult> = methods
        .iter()
        .map(|(name, path)| {
            Ok(MethodResult {
                name: name.clone(),
                theta: load_theta(path)?,
                trace: Vec::new(),
            })
        })
        .collect::<Result<_>>()?;
    let summaries = build_report(&a.out_dir, &cfg.schema, &results, truth.as_ref(), ds.as_ref())?;
    for s in &summaries {
        match (s.mape, s.wmape) {
            (Some(m), Some(w)) => println!("{}: MAPE {m:.3}% wMAPE {w:.3}%", s.name),
            (Some(m), None) => println!("{}: MAPE {m:.3}%", s.name),
            _ if truth.is_some() => println!("{}: MAPE undefined, some alpha estimate has the wrong sign", s.name),
            _ => println!("{}: no truth supplied", s.name),
        }
    }
    println!("report written to {}", a.out_dir.display());
    Ok(())
}

fn price_cmd(cfg: &RunConfig, a: &PriceArgs) -> Result<()> {
    let pc = &cfg.policy;
    if let Some(p) = &a.posterior {
        require_input(p)?;
    }
    if let Some(p) = &a.margin_curve {
        require_output(p)?;
    }
    let w = combo_design(pc.pos, pc.tf, &cfg.schema)?.values;
    let d = w.len();
    let (mu, sigma) = match (&a.posterior, a.truth_slope) {
        (Some(path), _) => {
            let post = PosteriorExport::load(path)?;
            let state = post.to_state()?;
            if post.dim_theta != d {
                return Err(Error::Dimension {
                    expected: d,
                    got: post.dim_theta,
                });
            }
            (state.theta_mean(), state.sigma.view((0, 0), (d, d)).into_owned())
        }
        (None, true) => {
            let mut mu = vec![0.0; d];
            mu[0] = -cfg.sim.theta(pc.pos as usize, pc.tf as usize);
            (mu, DMatrix::zeros(d, d))
        }
        (None, false) => return Err(Error::Config("price needs --posterior or --truth-slope".into())),
    };
    let ctx = PricingContext::new(w, pc.cost, pc.p_lb, pc.p_ub, mu, sigma)?;
    let mut rng = ChaCha8Rng::seed_from_u64(pc.seed);
    let p = price(pc.kind, &ctx, pc.quantile, pc.grid_points, &mut rng)?;
    println!("{p}");

    if let Some(path) = &a.margin_curve {
        let mut out = String::from("price,margin_taylor,margin_tn\n");
        for q in price_grid(&ctx, pc.grid_points)? {
            let taylor = expected_margin(MarginKind::Taylor, q, &ctx)?;
            // the truncated form needs a strictly positive slope variance
            let tn = expected_margin(MarginKind::Tn, q, &ctx).map_or(String::new(), |v| v.to_string());
            let _ = writeln!(out, "{q},{taylor},{tn}");
        }
        std::fs::write(path, out)?;
    }
    Ok(())
}
