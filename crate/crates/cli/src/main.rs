//! `ems`: headless driver for every pipeline stage and experiment.
//!
//! Exit codes: 0 ok, 1 engine error, 2 usage, 3 non-convergence or
//! infeasibility. Errors go to stderr as a JSON document.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ems_core::attack::{design_attack, evaluate_consequence, AttackScenario, DesignOptions, Snapshot};
use ems_core::config::EmsConfig;
use ems_core::detector::{
    calibrate_with, designed_attacks, detect, evaluate_detector, generate_history_with, group_loads,
    zscore_localize, CalibrationOptions, EvaluationOptions, HistoryMatrix, HistoryOptions, LoadGrouping,
    DEFAULT_WINDOW_S,
};
use ems_core::error::{AttackError, EstimationError, LpError, PowerFlowError, ScedError};
use ems_core::estimation::{estimate_with_bdd, estimated_loads, read_snapshot, write_snapshot, MeasurementPlan};
use ems_core::grid::{GridCase, Network};
use ems_core::powerflow::solve;
use ems_core::session::{
    report_text, ArmRequest, CaseSource, DetectorSettings, LoadSeries, PlanChoice, Session, SessionSpec,
    StageState, StepRequest,
};
use ems_core::EmsError;
use serde::Serialize;
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "ems", version, about = "EMS emulator: power flow, estimation, security, attacks and detection")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Bundled case name or path to a case document.
    #[arg(long, global = true, default_value = "case14")]
    case: String,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output file (directory for `pipeline`); stdout when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for contingency screening and sweeps.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Engine settings document (JSON); missing keys keep their defaults.
    #[arg(long, global = true)]
    settings: Option<PathBuf>,
    /// Measurement placement: standard or full.
    #[arg(long, global = true, default_value = "standard")]
    plan: String,
}

#[derive(Subcommand)]
enum Command {
    /// Physical AC power flow; writes the power-flow report.
    Pf(StageArgs),
    /// State estimation with bad-data detection.
    Se(SeArgs),
    /// Contingency analysis of the operator's view.
    Rtca(StageArgs),
    /// Security-constrained dispatch.
    Sced(StageArgs),
    /// Runs the whole loop over a load scenario and writes the event log.
    Pipeline(PipelineArgs),
    #[command(subcommand)]
    Attack(AttackCmd),
    #[command(subcommand)]
    Detector(DetectorCmd),
    #[command(subcommand)]
    History(HistoryCmd),
    /// Starts the HTTP service.
    Serve(ems_service::ServeArgs),
}

#[derive(Args)]
struct StageArgs {
    /// Scales every load before solving.
    #[arg(long)]
    scale: Option<f64>,
}

#[derive(Args)]
struct SeArgs {
    #[arg(long)]
    scale: Option<f64>,
    /// Estimate from this telemetry snapshot instead of simulating one.
    #[arg(long)]
    telemetry: Option<PathBuf>,
    /// Also write the simulated telemetry snapshot here.
    #[arg(long, conflicts_with = "telemetry")]
    save_telemetry: Option<PathBuf>,
}

#[derive(Args)]
struct PipelineArgs {
    /// Load scenario in the history file format; one tick per row.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Detector history file.
    #[arg(long, conflicts_with = "history_days")]
    history: Option<PathBuf>,
    /// Generate this many days of detector history instead.
    #[arg(long)]
    history_days: Option<usize>,
    /// Attack scenario document, or an arm request with a `kind` field.
    #[arg(long)]
    attack: Option<PathBuf>,
    /// Tick at which the attack is armed.
    #[arg(long, default_value_t = 0)]
    attack_tick: u64,
    /// Ticks to run; defaults to the scenario length, or 24.
    #[arg(long)]
    ticks: Option<u64>,
    #[arg(long, default_value_t = 0.02)]
    fa_budget: f64,
    #[arg(long, default_value_t = 5)]
    group_size: usize,
}

#[derive(Subcommand)]
enum AttackCmd {
    /// Designs a load-redistribution attack against the base case.
    Design(AttackArgs),
    /// Designs the attack, then runs the operator's loop on it and
    /// compares the operator's view with the physical system.
    Evaluate(AttackArgs),
}

#[derive(Args)]
struct AttackArgs {
    /// Attack scenario document.
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long)]
    max_evals: Option<usize>,
}

#[derive(Subcommand)]
enum DetectorCmd {
    /// Groups the loads and sets per-group thresholds from a history file.
    Calibrate(CalibrateArgs),
    /// Checks load vectors (history file format) against a calibrated grouping.
    Detect(DetectArgs),
    /// Detection probability of designed attacks over held-out history.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    history: PathBuf,
    #[arg(long, default_value_t = 0.02)]
    fa_budget: f64,
    #[arg(long, default_value_t = 5)]
    group_size: usize,
    /// Rows closer than this many seconds are left out of each other's
    /// calibration distances.
    #[arg(long, default_value_t = DEFAULT_WINDOW_S)]
    window_s: u64,
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    history: PathBuf,
    /// Calibrated grouping from `detector calibrate`.
    #[arg(long)]
    grouping: PathBuf,
    /// Load vectors to check.
    #[arg(long)]
    loads: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    history: PathBuf,
    #[arg(long)]
    held_out: PathBuf,
    #[arg(long, default_value_t = 5)]
    group_size: usize,
    #[arg(long, default_value_t = 1)]
    target_branch: u32,
    /// Load-shift limits of the designed attacks.
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 0.05, 0.1, 0.3, 0.5])]
    shifts: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.01, 0.02, 0.05, 0.1])]
    fa_budgets: Vec<f64>,
    #[arg(long, default_value_t = 500)]
    trials: usize,
    #[arg(long, default_value_t = DEFAULT_WINDOW_S)]
    window_s: u64,
    /// Write the surface as CSV rather than JSON.
    #[arg(long)]
    csv: bool,
}

#[derive(Subcommand)]
enum HistoryCmd {
    /// Synthetic hourly load history in the history file format.
    Generate(GenerateArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = 30)]
    days: usize,
    /// Generate and drop this many days first.
    #[arg(long, default_value_t = 0)]
    skip_days: usize,
    /// True loads, without measurement noise.
    #[arg(long)]
    clean: bool,
}

/// An error with its exit code.
struct Failure {
    code: u8,
    kind: &'static str,
    message: String,
}

impl Failure {
    fn input(message: impl Into<String>) -> Failure {
        Failure { code: 1, kind: "input", message: message.into() }
    }
}

impl From<EmsError> for Failure {
    fn from(e: EmsError) -> Failure {
        let hard = matches!(
            &e,
            EmsError::PowerFlow(PowerFlowError::NotConverged | PowerFlowError::SlackInfeasible { .. })
                | EmsError::Estimation(
                    EstimationError::Diverged { .. }
                        | EstimationError::Unobservable
                        | EstimationError::InsufficientRedundancy { .. }
                        | EstimationError::BadDataUnresolvable { .. }
                )
                | EmsError::Lp(LpError::Infeasible { .. } | LpError::Unbounded { .. } | LpError::IterationLimit(_))
                | EmsError::Sced(ScedError::Lp(_) | ScedError::BaseNotConverged)
                | EmsError::Attack(AttackError::Infeasible(_))
        );
        let kind = match &e {
            EmsError::Case(_) => "case",
            EmsError::Input(_) | EmsError::Io(_) | EmsError::Json(_) | EmsError::NotFound(_) => "input",
            _ if hard => "infeasible",
            _ => "engine",
        };
        Failure { code: if hard { 3 } else { 1 }, kind, message: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Failure {
        Failure::input(e.to_string())
    }
}

type Res<T> = Result<T, Failure>;

fn read(path: &Path) -> Res<String> {
    fs::read_to_string(path).map_err(|e| Failure::input(format!("{}: {e}", path.display())))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Res<T> {
    serde_json::from_str(&read(path)?).map_err(|e| Failure::input(format!("{}: {e}", path.display())))
}

fn read_history(path: &Path) -> Res<HistoryMatrix> {
    HistoryMatrix::read_csv(read(path)?.as_bytes()).map_err(|e| Failure::from(EmsError::from(e)))
}

fn emit(out: &Option<PathBuf>, text: &str) -> Res<()> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| Failure::input(format!("{}: {e}", p.display()))),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn emit_json<T: Serialize>(out: &Option<PathBuf>, doc: &T) -> Res<()> {
    let mut text = serde_json::to_string_pretty(doc).map_err(|e| Failure::input(e.to_string()))?;
    text.push('\n');
    emit(out, &text)
}

impl Common {
    /// A path that exists is read as a case document; anything else names
    /// a bundled case.
    fn case_source(&self) -> Res<CaseSource> {
        let p = Path::new(&self.case);
        if p.is_file() {
            let text = read(p)?;
            // Syntax errors keep their location.
            ems_core::grid::parse_case(&text).map_err(|e| Failure::from(EmsError::from(e)))?;
            let doc: Value = serde_json::from_str(&text).map_err(|e| Failure::input(e.to_string()))?;
            Ok(CaseSource::Document(doc))
        } else {
            Ok(CaseSource::Bundled(self.case.clone()))
        }
    }

    fn case(&self) -> Res<GridCase> {
        Ok(self.case_source()?.load()?)
    }

    fn config(&self) -> Res<EmsConfig> {
        let cfg: EmsConfig = match &self.settings {
            Some(p) => read_json(p)?,
            None => EmsConfig::default(),
        };
        Ok(cfg.with_jobs(self.jobs()))
    }

    fn jobs(&self) -> usize {
        self.jobs.unwrap_or(1).max(1)
    }

    fn plan_choice(&self) -> Res<PlanChoice> {
        match self.plan.as_str() {
            "standard" => Ok(PlanChoice::Standard),
            "full" => Ok(PlanChoice::Full),
            other => Err(Failure::input(format!("unknown measurement plan `{other}`; use standard or full"))),
        }
    }

    fn spec(&self) -> Res<SessionSpec> {
        let mut spec = SessionSpec::new(self.case_source()?);
        spec.seed = self.seed;
        spec.config = self.config()?;
        spec.plan = self.plan_choice()?;
        Ok(spec)
    }

    fn snapshot(&self) -> Res<Snapshot> {
        let case = self.case()?;
        let plan = match self.plan_choice()? {
            PlanChoice::Standard => MeasurementPlan::standard(&case),
            PlanChoice::Full => MeasurementPlan::full(&case),
        };
        Ok(Snapshot::with_plan(case, self.config()?, plan)?)
    }
}

/// Exit code for a failed pipeline stage: the loop stages fail by not
/// converging or being infeasible.
fn stage_code(stage: &str) -> u8 {
    match stage {
        "attack" | "detector" | "loads" => 1,
        _ => 3,
    }
}

/// Runs one session tick and writes `stage`'s report, byte for byte as
/// the service serves it.
fn stage_report(common: &Common, stage: &str, scale: Option<f64>) -> Res<Session> {
    let mut session = Session::new("cli", &common.spec()?)?;
    let run = session.step(&StepRequest { scale, ..Default::default() })?;
    match run.status(stage) {
        Some(StageState::Ok) => {}
        _ => {
            let failed = run.stages.iter().find(|s| s.status == StageState::Failed);
            return Err(match failed {
                Some(f) => Failure {
                    code: stage_code(&f.stage),
                    kind: "stage_failed",
                    message: format!("{}: {}", f.stage, f.message.clone().unwrap_or_default()),
                },
                None => Failure { code: 1, kind: "stage_skipped", message: format!("{stage} did not run") },
            });
        }
    }
    emit(&common.out, &report_text(session.report(stage, run.tick)?))?;
    Ok(session)
}

fn se(common: &Common, args: &SeArgs) -> Res<()> {
    let Some(path) = &args.telemetry else {
        let session = stage_report(common, "se", args.scale)?;
        if let Some(save) = &args.save_telemetry {
            let body = &session.report("telemetry", 0)?.body;
            let set = serde_json::from_value(body.clone()).map_err(|e| Failure::input(e.to_string()))?;
            fs::write(save, write_snapshot(&set))?;
        }
        return Ok(());
    };
    let case = common.case()?;
    let net = Network::build(&case).map_err(EmsError::from)?;
    let cfg = common.config()?;
    let set = read_snapshot(&read(path)?, 0).map_err(EmsError::from)?;
    let outcome = estimate_with_bdd(&case, &net, &set, &cfg.se).map_err(EmsError::from)?;
    let pf = solve(&case, &net, &cfg.pf);
    let loads = estimated_loads(&case, &net, &outcome.estimate, &pf.gen_p);
    emit_json(&common.out, &json!({ "outcome": outcome, "loads": loads }))
}

fn arm_request(path: &Path, jobs: usize) -> Res<ArmRequest> {
    let doc: Value = read_json(path)?;
    let parsed = if doc.get("kind").is_some() {
        serde_json::from_value(doc)
    } else {
        serde_json::from_value::<AttackScenario>(doc)
            .map(|scenario| ArmRequest::Designed { scenario, options: DesignOptions { jobs, ..Default::default() } })
    };
    parsed.map_err(|e| Failure::input(format!("{}: {e}", path.display())))
}

fn pipeline(common: &Common, args: &PipelineArgs) -> Res<()> {
    let mut spec = common.spec()?;
    spec.detector = DetectorSettings { fa_budget: args.fa_budget, group_size: args.group_size, ..Default::default() };
    if let Some(p) = &args.scenario {
        spec.scenario = Some(LoadSeries::Csv(read(p)?));
    }
    if let Some(p) = &args.history {
        spec.history = Some(LoadSeries::Csv(read(p)?));
    } else if let Some(days) = args.history_days {
        spec.history = Some(LoadSeries::Generate(ems_core::session::GenerateSeries {
            days,
            seed: common.seed,
            ..Default::default()
        }));
    }
    let attack = args.attack.as_deref().map(|p| arm_request(p, common.jobs())).transpose()?;
    let mut session = Session::new("pipeline", &spec)?;
    let scenario_rows = session.info().scenario_rows as u64;
    let ticks = args.ticks.unwrap_or(if scenario_rows > 0 { scenario_rows } else { 24 });

    let mut runs = Vec::new();
    for t in 0..ticks {
        if t == args.attack_tick {
            if let Some(a) = &attack {
                session.arm(a.clone())?;
            }
        }
        runs.push(session.step(&StepRequest::default())?);
    }

    let log = session.log().to_jsonl();
    match &common.out {
        None => emit(&None, &log)?,
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join("events.jsonl"), &log)?;
            let mut summary = String::new();
            for r in &runs {
                summary.push_str(&serde_json::to_string(&r.without_durations()).expect("runs serialize"));
                summary.push('\n');
            }
            fs::write(dir.join("runs.jsonl"), summary)?;
            for t in 0..ticks {
                let record = session.record(t).expect("stepped ticks are recorded");
                let tick_dir = dir.join(format!("tick-{t:04}"));
                fs::create_dir_all(&tick_dir)?;
                for (stage, artifact) in &record.artifacts {
                    fs::write(tick_dir.join(format!("{stage}.json")), report_text(artifact))?;
                }
            }
        }
    }
    let alarms = runs.iter().filter(|r| r.alarms.detector_alarm == Some(true)).count();
    let bdd_fail = runs.iter().filter(|r| r.alarms.bdd_pass == Some(false)).count();
    eprintln!("{ticks} ticks: {alarms} detector alarms, {bdd_fail} bad-data alarms");
    if let Some(f) = runs.iter().find_map(|r| r.stages.iter().find(|s| s.status == StageState::Failed).map(|s| (r.tick, s))) {
        let (tick, s) = f;
        return Err(Failure {
            code: stage_code(&s.stage),
            kind: "stage_failed",
            message: format!("tick {tick}, {}: {}", s.stage, s.message.clone().unwrap_or_default()),
        });
    }
    Ok(())
}

fn attack(common: &Common, cmd: &AttackCmd) -> Res<()> {
    let (args, evaluate) = match cmd {
        AttackCmd::Design(a) => (a, false),
        AttackCmd::Evaluate(a) => (a, true),
    };
    let scenario: AttackScenario = read_json(&args.scenario)?;
    let snap = common.snapshot()?;
    let mut opts = DesignOptions { jobs: common.jobs(), ..Default::default() };
    if let Some(m) = args.max_evals {
        opts.max_evals = m;
    }
    let design = design_attack(&snap, &scenario, &opts)?;
    if !evaluate {
        return emit_json(&common.out, &design);
    }
    let outcome = evaluate_consequence(&snap, &design.attack, &scenario, common.seed);
    emit_json(&common.out, &json!({ "design": design, "outcome": outcome }))
}

fn detector(common: &Common, cmd: &DetectorCmd) -> Res<()> {
    match cmd {
        DetectorCmd::Calibrate(a) => {
            let case = common.case()?;
            let net = Network::build(&case).map_err(EmsError::from)?;
            let history = read_history(&a.history)?;
            history.check(&case).map_err(EmsError::from)?;
            let grouping = group_loads(&case, &net, a.group_size.max(1));
            let opts = CalibrationOptions { window_s: a.window_s, jobs: common.jobs() };
            let g = calibrate_with(&history, &grouping, a.fa_budget, &opts).map_err(EmsError::from)?;
            emit_json(&common.out, &g)
        }
        DetectorCmd::Detect(a) => {
            let history = read_history(&a.history)?;
            let grouping: LoadGrouping = read_json(&a.grouping)?;
            let rows = read_history(&a.loads)?;
            let mut out = Vec::new();
            for row in &rows.rows {
                let mut v = detect(&row.p, &history, &grouping).map_err(EmsError::from)?;
                if v.anomalous {
                    v.zscores = Some(zscore_localize(&row.p, &history, &v));
                }
                out.push(json!({ "timestamp": row.timestamp, "verdict": v }));
            }
            emit_json(&common.out, &out)
        }
        DetectorCmd::Evaluate(a) => {
            let snap = common.snapshot()?;
            let history = read_history(&a.history)?;
            let held_out = read_history(&a.held_out)?;
            let grouping = group_loads(&snap.case, &snap.net, a.group_size.max(1));
            let design = DesignOptions { jobs: common.jobs(), ..Default::default() };
            let attacks = designed_attacks(&snap, a.target_branch, &a.shifts, &design)?;
            let opts = EvaluationOptions {
                fa_budgets: a.fa_budgets.clone(),
                trials: a.trials,
                seed: common.seed,
                jobs: common.jobs(),
                window_s: a.window_s,
            };
            let surface = evaluate_detector(&snap.case, &history, &held_out, &grouping, &attacks, &opts)?;
            if a.csv {
                let mut buf = Vec::new();
                surface.write_csv(&mut buf).map_err(EmsError::from)?;
                emit(&common.out, &String::from_utf8(buf).expect("CSV output is UTF-8"))
            } else {
                emit_json(&common.out, &surface)
            }
        }
    }
}

fn history(common: &Common, cmd: &HistoryCmd) -> Res<()> {
    let HistoryCmd::Generate(a) = cmd;
    let case = common.case()?;
    let base = HistoryOptions::default();
    let opts = if a.clean { base.clean() } else { base };
    let all = generate_history_with(&case, a.skip_days + a.days, common.seed, &opts);
    let h = all.slice(a.skip_days * 24..all.n_h());
    let mut buf = Vec::new();
    h.write_csv(&mut buf).map_err(EmsError::from)?;
    emit(&common.out, &String::from_utf8(buf).expect("CSV output is UTF-8"))
}

fn serve(common: &Common, args: &ems_service::ServeArgs) -> Res<()> {
    let mut args = args.clone();
    args.jobs = args.jobs.or(common.jobs);
    let cfg = args.resolve().map_err(Failure::input)?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(ems_service::serve(cfg))?;
    Ok(())
}

fn run(cli: &Cli) -> Res<()> {
    let c = &cli.common;
    match &cli.command {
        Command::Pf(a) => stage_report(c, "pf", a.scale).map(drop),
        Command::Se(a) => se(c, a),
        Command::Rtca(a) => stage_report(c, "rtca", a.scale).map(drop),
        Command::Sced(a) => stage_report(c, "sced", a.scale).map(drop),
        Command::Pipeline(a) => pipeline(c, a),
        Command::Attack(a) => attack(c, a),
        Command::Detector(a) => detector(c, a),
        Command::History(a) => history(c, a),
        Command::Serve(a) => serve(c, a),
    }
}

fn main() -> ExitCode {
    // clap exits with 2 on usage errors and 0 on --help.
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let doc = json!({ "error": { "kind": f.kind, "message": f.message, "exit_code": f.code } });
            eprintln!("{doc}");
            ExitCode::from(f.code)
        }
    }
}
