//! Command-line front end: synthetic data generation, raster inspection,
//! training, evaluation, prediction dumps, gradient verification, and the
//! feature-toggle ablation ladder.
//!
//! Exit codes: 0 success, 2 missing or unreadable input, 3 bad
//! configuration, 4 checkpoint/model mismatch, 5 verification failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use trajcast_core::baselines::{baseline_predict, BaselineKind};
use trajcast_core::config::Config;
use trajcast_core::gradcheck::{run_full_suite, CheckConfig};
use trajcast_core::map::{rasterize, EgoPose};
use trajcast_core::metrics::{append_csv_rows, MetricReport, PredictionSet, PREDICTIONS_CSV_HEADER};
use trajcast_core::params::ParamStore;
use trajcast_core::prednet::PredNet;
use trajcast_core::scene::{
    generate_synthetic, load_scenario_dir, load_scenario_json, save_scenario_json, Scenario,
    SyntheticSpec, Template,
};
use trajcast_core::train::{evaluate_model, predict_scenario, train, TrainError, EVAL_NOISE_STEP};

const EXIT_MISSING_INPUT: u8 = 2;
const EXIT_CONFIG: u8 = 3;
const EXIT_CHECKPOINT: u8 = 4;
const EXIT_VERIFY: u8 = 5;

struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn missing(message: String) -> Self {
        CliError {
            code: EXIT_MISSING_INPUT,
            message,
        }
    }

    fn config(message: String) -> Self {
        CliError {
            code: EXIT_CONFIG,
            message,
        }
    }

    fn checkpoint(message: String) -> Self {
        CliError {
            code: EXIT_CHECKPOINT,
            message,
        }
    }

    fn verify(message: String) -> Self {
        CliError {
            code: EXIT_VERIFY,
            message,
        }
    }

    fn runtime(message: String) -> Self {
        CliError { code: 1, message }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NoData => CliError::missing("no scenarios to work with".into()),
            other => CliError::runtime(other.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "trajcast",
    version,
    about = "Multi-agent trajectory forecasting: generate, train, evaluate"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scenarios into a directory
    Gen(GenArgs),
    /// Render a scenario's map raster as a PGM image
    Rasterize(RasterizeArgs),
    /// Train a model and write a run directory
    Train(TrainArgs),
    /// Evaluate a checkpoint or a closed-form baseline
    Eval(EvalArgs),
    /// Dump per-modality predictions as CSV
    Predict(PredictArgs),
    /// Check analytic gradients against finite differences
    Gradcheck(GradcheckArgs),
    /// Train and evaluate every feature-toggle combination
    Ablate(AblateArgs),
}

/// Shared configuration flags: an optional JSON file plus key overrides.
#[derive(Args)]
struct ConfigArgs {
    /// JSON config file; defaults apply when omitted
    #[arg(long)]
    config: Option<PathBuf>,

    /// Override a config key, e.g. --set model.d_embed=32 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<Config, CliError> {
        let base = match &self.config {
            Some(path) => {
                if !path.is_file() {
                    return Err(CliError::missing(format!(
                        "config file {} not found",
                        path.display()
                    )));
                }
                Config::load(path).map_err(|e| CliError::config(e.to_string()))?
            }
            None => Config::default(),
        };
        let cfg = base
            .with_overrides(&self.set)
            .map_err(|e| CliError::config(e.to_string()))?;
        cfg.validate().map_err(|e| CliError::config(e.to_string()))?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct GenArgs {
    /// Scenario template: crossing, lane, or ego
    #[arg(long, default_value = "crossing")]
    template: String,

    /// Number of scenarios to generate
    #[arg(long, default_value_t = 8)]
    count: usize,

    /// Pedestrians per crossing scenario
    #[arg(long, default_value_t = 4)]
    pedestrians: usize,

    /// Observed frames per scenario
    #[arg(long = "t-obs", default_value_t = 6)]
    t_obs: usize,

    /// Total frames per scenario (observed + predicted)
    #[arg(long = "t-pred", default_value_t = 12)]
    t_pred: usize,

    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Output directory for scenario JSON files
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RasterizeArgs {
    /// Scenario JSON file with a map
    #[arg(long)]
    scenario: PathBuf,

    /// Output PGM file
    #[arg(long)]
    out: PathBuf,

    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory of scenario JSON files
    #[arg(long)]
    data: PathBuf,

    /// Run directory for config snapshot, log, and checkpoints
    #[arg(long = "run-dir")]
    run_dir: PathBuf,

    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct EvalSource {
    /// Trained checkpoint to evaluate
    #[arg(long)]
    checkpoint: Option<PathBuf>,

    /// Closed-form baseline: linear or kalman_cv
    #[arg(long)]
    baseline: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of scenario JSON files
    #[arg(long)]
    data: PathBuf,

    #[command(flatten)]
    source: EvalSource,

    /// Optional per-scenario metrics CSV
    #[arg(long)]
    out: Option<PathBuf>,

    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct PredictArgs {
    /// Directory of scenario JSON files
    #[arg(long)]
    data: PathBuf,

    /// Trained checkpoint
    #[arg(long)]
    checkpoint: PathBuf,

    /// Output CSV of per-modality trajectories
    #[arg(long)]
    out: PathBuf,

    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Relative tolerance for gradient agreement
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,

    /// Finite-difference step
    #[arg(long, default_value_t = 1e-5)]
    step: f64,

    /// Flip the sign of one backward rule; the check must catch it
    #[arg(long = "inject-fault")]
    inject_fault: bool,
}

#[derive(Args)]
struct AblateArgs {
    /// Directory of training scenario JSON files
    #[arg(long)]
    data: PathBuf,

    /// Held-out scenarios for evaluation; defaults to --data
    #[arg(long = "eval-data")]
    eval_data: Option<PathBuf>,

    /// Parent directory; each toggle combination trains into a subdirectory
    #[arg(long = "run-dir")]
    run_dir: PathBuf,

    #[command(flatten)]
    config: ConfigArgs,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(args) => cmd_gen(&args),
        Command::Rasterize(args) => cmd_rasterize(&args),
        Command::Train(args) => cmd_train(&args),
        Command::Eval(args) => cmd_eval(&args),
        Command::Predict(args) => cmd_predict(&args),
        Command::Gradcheck(args) => cmd_gradcheck(&args),
        Command::Ablate(args) => cmd_ablate(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn load_data(dir: &Path) -> Result<Vec<Scenario>, CliError> {
    if !dir.is_dir() {
        return Err(CliError::missing(format!(
            "data directory {} not found",
            dir.display()
        )));
    }
    let scenarios = load_scenario_dir(dir)
        .map_err(|e| CliError::missing(format!("cannot load scenarios from {}: {e}", dir.display())))?;
    if scenarios.is_empty() {
        return Err(CliError::missing(format!(
            "no scenarios in {}",
            dir.display()
        )));
    }
    Ok(scenarios)
}

/// Load a checkpoint and bind it to the configured model. Name or shape
/// disagreements mean the checkpoint was trained under a different config.
fn load_checkpoint(cfg: &Config, path: &Path) -> Result<ParamStore, CliError> {
    if !path.is_file() {
        return Err(CliError::missing(format!(
            "checkpoint {} not found",
            path.display()
        )));
    }
    let loaded = ParamStore::load(path)
        .map_err(|e| CliError::checkpoint(format!("cannot read {}: {e}", path.display())))?;
    let mut expected = ParamStore::new();
    PredNet::register(&mut expected, &cfg.model, cfg.train.seed);
    expected.assign_from(&loaded).map_err(|e| {
        CliError::checkpoint(format!(
            "checkpoint {} does not fit the configured model: {e}",
            path.display()
        ))
    })?;
    Ok(expected)
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| CliError::runtime(format!("cannot create {}: {e}", parent.display())))?;
        }
    }
    std::fs::write(path, text)
        .map_err(|e| CliError::runtime(format!("cannot write {}: {e}", path.display())))
}

fn cmd_gen(args: &GenArgs) -> Result<(), CliError> {
    let template: Template = args
        .template
        .parse()
        .map_err(|e: trajcast_core::scene::SceneError| CliError::config(e.to_string()))?;
    if args.t_obs < 2 || args.t_pred <= args.t_obs {
        return Err(CliError::config(format!(
            "need t_obs >= 2 and t_pred > t_obs, got {} and {}",
            args.t_obs, args.t_pred
        )));
    }
    let spec = SyntheticSpec {
        template,
        count: args.count,
        t_obs: args.t_obs,
        t_pred: args.t_pred,
        pedestrians: args.pedestrians,
        ..SyntheticSpec::default()
    };
    let scenarios = generate_synthetic(&spec, args.seed);
    for s in &scenarios {
        save_scenario_json(s, &args.out).map_err(|e| CliError::runtime(e.to_string()))?;
    }
    println!(
        "wrote {} {} scenarios to {}",
        scenarios.len(),
        args.template,
        args.out.display()
    );
    Ok(())
}

fn cmd_rasterize(args: &RasterizeArgs) -> Result<(), CliError> {
    let cfg = args.config.resolve()?;
    if !args.scenario.is_file() {
        return Err(CliError::missing(format!(
            "scenario {} not found",
            args.scenario.display()
        )));
    }
    let scenario =
        load_scenario_json(&args.scenario).map_err(|e| CliError::missing(e.to_string()))?;
    let map = scenario.map.as_ref().ok_or_else(|| {
        CliError::missing(format!("scenario {} has no map", scenario.id))
    })?;
    // Center where the model would: on the ego at the last observed frame.
    let pose = scenario
        .ego_track()
        .and_then(|t| t.position_at(scenario.t_obs))
        .map(|p| EgoPose::at(p[0], p[1]))
        .unwrap_or(EgoPose::at(0.0, 0.0));
    let image = rasterize(map, &pose, &cfg.raster);
    write_file(&args.out, &image.to_pgm())?;
    println!(
        "wrote {}x{} raster to {}",
        image.width,
        image.height,
        args.out.display()
    );
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<(), CliError> {
    let cfg = args.config.resolve()?;
    let scenarios = load_data(&args.data)?;
    let outcome = train(&cfg, &scenarios, &args.run_dir)?;
    let s = &outcome.summary;
    println!(
        "trained {} steps on {} scenarios: loss {:.6}, train ADE/FDE {:.3}/{:.3}",
        s.steps, s.scenarios, s.final_loss, s.final_train_ade, s.final_train_fde
    );
    println!("checksum {}  run dir {}", s.checksum, outcome.run_dir.display());
    Ok(())
}

fn eval_baseline(cfg: &Config, name: &str, scenarios: &[Scenario]) -> Result<MetricReport, CliError> {
    let kind = match name {
        "linear" => BaselineKind::Linear,
        "kalman_cv" | "kalman" => BaselineKind::KalmanCv,
        other => {
            return Err(CliError::config(format!(
                "unknown baseline {other}; expected linear or kalman_cv"
            )))
        }
    };
    let sets: Vec<PredictionSet> = scenarios
        .iter()
        .map(|s| {
            let (agent_ids, tracks) = baseline_predict(kind, s);
            PredictionSet {
                scenario_id: s.id.clone(),
                agent_ids,
                t_obs: s.t_obs,
                horizon: s.t_pred - s.t_obs,
                trajectories: vec![tracks],
            }
        })
        .collect();
    let items: Vec<(&PredictionSet, &Scenario)> = sets.iter().zip(scenarios).collect();
    Ok(MetricReport::evaluate(&items, cfg.metric, cfg.variety_min))
}

fn cmd_eval(args: &EvalArgs) -> Result<(), CliError> {
    let cfg = args.config.resolve()?;
    let scenarios = load_data(&args.data)?;
    let report = match (&args.source.checkpoint, &args.source.baseline) {
        (Some(path), None) => {
            let store = load_checkpoint(&cfg, path)?;
            evaluate_model(&cfg, &store, &scenarios)?
        }
        (None, Some(name)) => eval_baseline(&cfg, name, &scenarios)?,
        _ => unreachable!("clap enforces exactly one source"),
    };
    let agents: usize = report.rows.iter().map(|r| r.agents).sum();
    println!(
        "{} scenarios, {} agents, {} modalities, rule {}",
        report.rows.len(),
        agents,
        report.modalities,
        report.eval_rule
    );
    println!("ADE {:.6}  FDE {:.6}", report.ade, report.fde);
    if let Some(out) = &args.out {
        write_file(out, &report.to_csv())?;
        println!("wrote per-scenario metrics to {}", out.display());
    }
    Ok(())
}

fn cmd_predict(args: &PredictArgs) -> Result<(), CliError> {
    let cfg = args.config.resolve()?;
    let scenarios = load_data(&args.data)?;
    let store = load_checkpoint(&cfg, &args.checkpoint)?;
    let net = PredNet::attach(&cfg.model);
    let mut out = String::from(PREDICTIONS_CSV_HEADER);
    out.push('\n');
    let mut rows = 0usize;
    for s in &scenarios {
        let set = predict_scenario(&cfg, &net, &store, s, EVAL_NOISE_STEP)?;
        rows += set.agent_ids.len() * set.modalities() * set.horizon;
        append_csv_rows(&mut out, &set);
    }
    write_file(&args.out, &out)?;
    println!(
        "wrote {} prediction rows for {} scenarios to {}",
        rows,
        scenarios.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<(), CliError> {
    let check = CheckConfig {
        step: args.step,
        rel_tol: args.tol,
        ..CheckConfig::default()
    };
    if args.inject_fault {
        println!("injecting a sign fault into one backward rule");
        trajcast_core::tensor::fault::set_matmul_backward_sign_fault(true);
    }
    let suite = run_full_suite(&check);
    trajcast_core::tensor::fault::set_matmul_backward_sign_fault(false);
    for op in &suite.ops {
        println!("{}", op.summary());
    }
    println!();
    for group in &suite.model.groups {
        println!("{}", group.summary());
    }
    println!("{}", suite.model.overall.summary());
    if args.inject_fault {
        if suite.pass() {
            return Err(CliError::verify(
                "injected fault was NOT detected; the checker is broken".into(),
            ));
        }
        return Err(CliError::verify(
            "injected fault detected as expected; failing to prove it".into(),
        ));
    }
    if !suite.pass() {
        return Err(CliError::verify("gradient verification failed".into()));
    }
    println!("all gradients agree with finite differences");
    Ok(())
}

fn toggle_names(t: &trajcast_core::config::Toggles) -> String {
    let flags = [
        (t.pf, "PF"),
        (t.tf, "TF"),
        (t.emf, "EMF"),
        (t.etf, "ETF"),
        (t.ef, "EF"),
    ];
    let on: Vec<&str> = flags.iter().filter(|(f, _)| *f).map(|&(_, n)| n).collect();
    if on.is_empty() {
        "-".to_string()
    } else {
        on.join("+")
    }
}

fn cmd_ablate(args: &AblateArgs) -> Result<(), CliError> {
    let cfg = args.config.resolve()?;
    let scenarios = load_data(&args.data)?;
    let eval_scenarios = match &args.eval_data {
        Some(dir) => load_data(dir)?,
        None => scenarios.clone(),
    };
    std::fs::create_dir_all(&args.run_dir)
        .map_err(|e| CliError::runtime(format!("cannot create {}: {e}", args.run_dir.display())))?;

    // Same widths and modality count for every row; only feature toggles move.
    let mut csv = String::from("name,toggles,final_loss,ade,fde\n");
    println!(
        "{:12} {:24} {:>12} {:>10} {:>10}",
        "name", "toggles", "final_loss", "ade", "fde"
    );
    for (name, toggles) in trajcast_core::config::ablation_rows() {
        let mut row_cfg = cfg.clone();
        row_cfg.toggles = toggles;
        let outcome = train(&row_cfg, &scenarios, &args.run_dir.join(name))?;
        let report = evaluate_model(&row_cfg, &outcome.final_params, &eval_scenarios)?;
        let toggle_col = toggle_names(&toggles);
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            name, toggle_col, outcome.summary.final_loss, report.ade, report.fde
        ));
        println!(
            "{:12} {:24} {:>12.6} {:>10.3} {:>10.3}",
            name, toggle_col, outcome.summary.final_loss, report.ade, report.fde
        );
    }
    let csv_path = args.run_dir.join("ablation.csv");
    write_file(&csv_path, &csv)?;
    println!("wrote {}", csv_path.display());
    Ok(())
}
