//! Operator sessions. A session holds a physical system and the operator's
//! view of it and steps both through the control-room loop one tick at a
//! time: physical power flow, telemetry, optional forgery, estimation with
//! bad-data and load-anomaly detection, contingency screening, dispatch,
//! and application of the dispatch to the physical system.

mod log;

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub use log::{content_hash, Event, EventLog};

use crate::attack::consequence::{pairs, worst};
use crate::attack::{design_attack, forge_measurements, AttackScenario, DesignOptions, Snapshot, StateAttack};
use crate::config::EmsConfig;
use crate::detector::{
    calibrate_with, detect, generate_history_with, group_loads, zscore_localize, CalibrationOptions, HistoryMatrix,
    HistoryOptions, LoadGrouping, ZScore, DEFAULT_WINDOW_S,
};
use crate::error::EmsError;
use crate::estimation::{estimate_with_bdd, estimated_loads, generate_telemetry, MeasurementPlan, MeasurementSet};
use crate::grid::{parse_case, Generator, GridCase, Load, Network};
use crate::powerflow::{solve_from, BusState, PowerFlowSolution};
use crate::rtca::run_rtca;
use crate::sced::dispatch_pipeline;
use crate::{attack::ViolationSummary, cases};

/// Stage names in pipeline order.
pub const STAGES: &[&str] = &["loads", "pf", "telemetry", "attack", "se", "detector", "rtca", "sced", "comparison"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CaseSource {
    /// A bundled case name.
    Bundled(String),
    /// A full case document.
    Document(Value),
}

impl CaseSource {
    pub fn load(&self) -> Result<GridCase, EmsError> {
        match self {
            CaseSource::Bundled(name) => {
                let text = cases::bundled(name).ok_or_else(|| {
                    EmsError::Input(format!("unknown bundled case `{name}`; known: {}", cases::NAMES.join(", ")))
                })?;
                Ok(parse_case(text)?)
            }
            CaseSource::Document(doc) => Ok(parse_case(&serde_json::to_string_pretty(doc)?)?),
        }
    }
}

/// Per-load series source, in the history file format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoadSeries {
    Csv(String),
    Generate(GenerateSeries),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerateSeries {
    pub days: usize,
    pub seed: u64,
    /// Days generated and dropped first, so that a series can continue
    /// another generated with the same seed.
    pub skip_days: usize,
    /// Leave out measurement noise (true loads rather than estimates).
    pub clean: bool,
    pub options: HistoryOptions,
}

impl Default for GenerateSeries {
    fn default() -> Self {
        GenerateSeries { days: 1, seed: 0, skip_days: 0, clean: false, options: HistoryOptions::default() }
    }
}

impl LoadSeries {
    pub fn load(&self, case: &GridCase) -> Result<HistoryMatrix, EmsError> {
        let h = match self {
            LoadSeries::Csv(text) => HistoryMatrix::read_csv(text.as_bytes())?,
            LoadSeries::Generate(g) => {
                let opts = if g.clean { g.options.clean() } else { g.options.clone() };
                let all = generate_history_with(case, g.skip_days + g.days, g.seed, &opts);
                all.slice(g.skip_days * 24..all.n_h())
            }
        };
        h.check(case)?;
        Ok(h)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanChoice {
    #[default]
    Standard,
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorSettings {
    pub fa_budget: f64,
    pub group_size: usize,
    pub window_s: u64,
}

impl Default for DetectorSettings {
    fn default() -> Self {
        DetectorSettings { fa_budget: 0.02, group_size: 5, window_s: DEFAULT_WINDOW_S }
    }
}

/// Everything needed to build a session.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionSpec {
    pub case: CaseSource,
    #[serde(default)]
    pub config: EmsConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub plan: PlanChoice,
    /// Trusted load history; the detector is calibrated on it at creation.
    #[serde(default)]
    pub history: Option<LoadSeries>,
    /// True loads per tick.
    #[serde(default)]
    pub scenario: Option<LoadSeries>,
    #[serde(default)]
    pub detector: DetectorSettings,
}

impl SessionSpec {
    pub fn new(case: CaseSource) -> Self {
        SessionSpec {
            case,
            config: EmsConfig::default(),
            seed: 0,
            plan: PlanChoice::Standard,
            history: None,
            scenario: None,
            detector: DetectorSettings::default(),
        }
    }

    /// A bundled case with 90 days of generated history and the following
    /// day of true loads as the scenario, one hourly row per tick.
    pub fn demo(case: &str, seed: u64) -> Self {
        let mut s = SessionSpec::new(CaseSource::Bundled(case.into()));
        s.seed = seed;
        s.config.sced.dispatch_interval = 60.0;
        s.history = Some(LoadSeries::Generate(GenerateSeries { days: 90, seed, ..Default::default() }));
        s.scenario =
            Some(LoadSeries::Generate(GenerateSeries { days: 1, seed, skip_days: 90, clean: true, ..Default::default() }));
        s
    }
}

/// Where the next tick's true loads come from. The first field set wins;
/// with none set the next scenario row is used, or base loads without a
/// scenario.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StepRequest {
    pub loads: Option<Vec<f64>>,
    pub row: Option<usize>,
    pub scale: Option<f64>,
}

/// Attack to apply at the telemetry boundary of the next tick.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArmRequest {
    /// Stealthy attack that shifts per-load MW by `load_change`.
    LoadShift {
        load_change: Vec<f64>,
        #[serde(default)]
        measurement_budget: Option<usize>,
    },
    /// Stealthy attack from a bus-angle shift vector (radians, bus order).
    State {
        u: Vec<f64>,
        #[serde(default)]
        measurement_budget: Option<usize>,
    },
    /// Attack designed against the current system for the given scenario.
    Designed {
        scenario: AttackScenario,
        #[serde(default)]
        options: DesignOptions,
    },
    /// Naive corruption: `count` measurements pushed `sigmas` standard
    /// deviations off.
    Random { count: usize, sigmas: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Armed {
    State { attack: StateAttack, budget: Option<usize> },
    Random { count: usize, sigmas: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmedAttack {
    pub request: ArmRequest,
    pub resolved: Armed,
    /// Tick the attack will be applied on.
    pub tick: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrateRequest {
    pub history: Option<LoadSeries>,
    pub fa_budget: Option<f64>,
    pub group_size: Option<usize>,
    pub window_s: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageState {
    Ok,
    Failed,
    Skipped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageStatus {
    pub stage: String,
    pub status: StageState,
    pub message: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Alarms {
    /// Kind of attack applied on this tick.
    pub attack: Option<String>,
    pub bdd_pass: Option<bool>,
    pub eliminated: Vec<u32>,
    pub detector_alarm: Option<bool>,
    pub alarmed_groups: Vec<usize>,
    /// Highest Z-scores among loads in alarmed groups.
    pub top_zscores: Vec<ZScore>,
    pub rtca_critical: Option<usize>,
    pub rtca_violations: Option<usize>,
    /// Dispatch needed no slack variables.
    pub sced_clean: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineRun {
    pub tick: u64,
    pub stages: Vec<StageStatus>,
    pub alarms: Alarms,
    /// Wall-clock stage times. Not part of any report or log entry.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub durations_ms: BTreeMap<String, f64>,
}

impl PipelineRun {
    pub fn status(&self, stage: &str) -> Option<StageState> {
        self.stages.iter().find(|s| s.stage == stage).map(|s| s.status)
    }

    pub fn failed(&self) -> bool {
        self.stages.iter().any(|s| s.status == StageState::Failed)
    }

    /// Same run without timings.
    pub fn without_durations(&self) -> PipelineRun {
        PipelineRun { durations_ms: BTreeMap::new(), ..self.clone() }
    }
}

/// Immutable stage output, stamped with its tick and chained to its input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub stage: String,
    pub tick: u64,
    pub hash: String,
    pub input: Option<String>,
    pub body: Value,
}

/// The canonical text of an artifact: pretty JSON and a trailing newline.
/// Every front end writes reports through this.
pub fn report_text(a: &Artifact) -> String {
    let mut s = serde_json::to_string_pretty(a).expect("artifacts serialize");
    s.push('\n');
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    pub tick: u64,
    pub run: PipelineRun,
    pub artifacts: BTreeMap<String, Artifact>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GraphBus {
    pub id: u32,
    pub kind: crate::grid::BusType,
    pub base_kv: f64,
    pub load_p: f64,
    pub gen_p: f64,
    pub v_mag: Option<f64>,
    pub v_ang_deg: Option<f64>,
    pub est_v_mag: Option<f64>,
    pub est_v_ang_deg: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GraphBranch {
    pub id: u32,
    pub from: u32,
    pub to: u32,
    pub r: f64,
    pub x: f64,
    pub rating: f64,
    pub rating_emergency: f64,
    pub in_service: bool,
    pub p_from: Option<f64>,
    pub mva: Option<f64>,
    pub loading_percent: Option<f64>,
    pub violated: bool,
}

/// Buses and branches with the latest physical values, for drawing.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GraphView {
    pub case: String,
    /// Tick the values come from; `None` before the first step.
    pub tick: Option<u64>,
    pub buses: Vec<GraphBus>,
    pub branches: Vec<GraphBranch>,
    pub generators: Vec<Generator>,
    pub loads: Vec<Load>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SessionInfo {
    pub id: String,
    pub case: String,
    pub next_tick: u64,
    pub ticks: Vec<u64>,
    pub armed: Option<ArmedAttack>,
    pub detector: Option<LoadGrouping>,
    pub history_rows: usize,
    pub scenario_rows: usize,
    pub last_run: Option<PipelineRun>,
    pub events: usize,
    pub log_head: Option<String>,
}

struct Live {
    tick: u64,
    truth: GridCase,
    pf: PowerFlowSolution,
    estimate: Option<BusState>,
}

pub struct Session {
    pub id: String,
    base: GridCase,
    net: Network,
    config: EmsConfig,
    plan: MeasurementPlan,
    seed: u64,
    next_tick: u64,
    /// Generator set-points on the physical system.
    schedule: Vec<f64>,
    truth_state: Option<BusState>,
    history: Option<HistoryMatrix>,
    scenario: Option<HistoryMatrix>,
    grouping: Option<LoadGrouping>,
    detector: DetectorSettings,
    armed: Option<ArmedAttack>,
    records: BTreeMap<u64, Arc<TickRecord>>,
    live: Option<Live>,
    log: EventLog,
}

fn mix(seed: u64, tick: u64, salt: u64) -> u64 {
    seed ^ tick.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt
}

fn state_of(pf: &PowerFlowSolution) -> BusState {
    BusState { v_mag: pf.v_mag.clone(), v_ang: pf.v_ang.clone() }
}

/// Collects one tick's artifacts, statuses and log events.
struct TickBuilder {
    tick: u64,
    artifacts: BTreeMap<String, Artifact>,
    stages: Vec<StageStatus>,
    alarms: Alarms,
    durations: BTreeMap<String, f64>,
    events: Vec<(String, String, Option<String>, Option<String>, Value)>,
    clock: Instant,
}

impl TickBuilder {
    fn new(tick: u64) -> Self {
        TickBuilder {
            tick,
            artifacts: BTreeMap::new(),
            stages: Vec::new(),
            alarms: Alarms::default(),
            durations: BTreeMap::new(),
            events: Vec::new(),
            clock: Instant::now(),
        }
    }

    fn lap(&mut self, stage: &str) {
        self.durations.insert(stage.into(), self.clock.elapsed().as_secs_f64() * 1e3);
        self.clock = Instant::now();
    }

    fn publish<T: Serialize>(&mut self, stage: &str, input: Option<&str>, body: &T, detail: Value) -> String {
        self.lap(stage);
        let body = serde_json::to_value(body).expect("artifacts serialize");
        let hash = content_hash(&json!({ "stage": stage, "tick": self.tick, "input": input, "body": body }));
        self.artifacts.insert(
            stage.into(),
            Artifact { stage: stage.into(), tick: self.tick, hash: hash.clone(), input: input.map(Into::into), body },
        );
        self.stages.push(StageStatus { stage: stage.into(), status: StageState::Ok, message: None });
        self.events.push((stage.into(), "ok".into(), Some(hash.clone()), input.map(Into::into), detail));
        hash
    }

    fn fail(&mut self, stage: &str, input: Option<&str>, message: String) {
        self.lap(stage);
        self.stages.push(StageStatus { stage: stage.into(), status: StageState::Failed, message: Some(message.clone()) });
        self.events.push((stage.into(), "failed".into(), None, input.map(Into::into), json!({ "message": message })));
    }

    fn skip(&mut self, stage: &str, why: &str) {
        self.stages.push(StageStatus { stage: stage.into(), status: StageState::Skipped, message: Some(why.into()) });
        self.events.push((stage.into(), "skipped".into(), None, None, json!({ "message": why })));
    }

    /// Marks every stage not yet reported as skipped.
    fn halt(&mut self) {
        for s in STAGES {
            if !self.stages.iter().any(|x| x.stage == *s) {
                self.skip(s, "halted by an earlier failure");
            }
        }
    }
}

impl Session {
    pub fn new(id: impl Into<String>, spec: &SessionSpec) -> Result<Session, EmsError> {
        let base = spec.case.load()?;
        let net = Network::build(&base)?;
        let plan = match spec.plan {
            PlanChoice::Standard => MeasurementPlan::standard(&base),
            PlanChoice::Full => MeasurementPlan::full(&base),
        };
        let history = spec.history.as_ref().map(|h| h.load(&base)).transpose()?;
        let scenario = spec.scenario.as_ref().map(|h| h.load(&base)).transpose()?;
        let mut s = Session {
            id: id.into(),
            schedule: base.generators.iter().map(|g| g.p).collect(),
            base,
            net,
            config: spec.config.clone(),
            plan,
            seed: spec.seed,
            next_tick: 0,
            truth_state: None,
            history: None,
            scenario,
            grouping: None,
            detector: spec.detector.clone(),
            armed: None,
            records: BTreeMap::new(),
            live: None,
            log: EventLog::default(),
        };
        s.log.append(
            None,
            "session",
            "created",
            None,
            None,
            json!({
                "case": s.base.name,
                "seed": s.seed,
                "buses": s.base.n_buses(),
                "loads": s.base.loads.len(),
                "measurements": s.plan.entries.len(),
                "scenario_rows": s.scenario.as_ref().map_or(0, |h| h.n_h()),
            }),
        );
        if let Some(h) = history {
            s.calibrate_on(h, spec.detector.clone())?;
        }
        Ok(s)
    }

    pub fn case(&self) -> &GridCase {
        &self.base
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn config(&self) -> &EmsConfig {
        &self.config
    }

    pub fn log(&self) -> &EventLog {
        &self.log
    }

    pub fn grouping(&self) -> Option<&LoadGrouping> {
        self.grouping.as_ref()
    }

    pub fn history(&self) -> Option<&HistoryMatrix> {
        self.history.as_ref()
    }

    pub fn armed(&self) -> Option<&ArmedAttack> {
        self.armed.as_ref()
    }

    pub fn next_tick(&self) -> u64 {
        self.next_tick
    }

    pub fn record(&self, tick: u64) -> Option<Arc<TickRecord>> {
        self.records.get(&tick).cloned()
    }

    pub fn info(&self) -> SessionInfo {
        SessionInfo {
            id: self.id.clone(),
            case: self.base.name.clone(),
            next_tick: self.next_tick,
            ticks: self.records.keys().copied().collect(),
            armed: self.armed.clone(),
            detector: self.grouping.clone(),
            history_rows: self.history.as_ref().map_or(0, |h| h.n_h()),
            scenario_rows: self.scenario.as_ref().map_or(0, |h| h.n_h()),
            last_run: self.records.values().next_back().map(|r| r.run.clone()),
            events: self.log.events.len(),
            log_head: self.log.events.last().map(|e| e.hash.clone()),
        }
    }

    fn calibrate_on(&mut self, history: HistoryMatrix, settings: DetectorSettings) -> Result<&LoadGrouping, EmsError> {
        let groups = group_loads(&self.base, &self.net, settings.group_size);
        let opts = CalibrationOptions { window_s: settings.window_s, jobs: self.config.rtca.jobs.max(1) };
        let g = calibrate_with(&history, &groups, settings.fa_budget, &opts)?;
        self.log.append(
            None,
            "detector",
            "calibrated",
            None,
            None,
            json!({
                "history_rows": history.n_h(),
                "fa_budget": settings.fa_budget,
                "groups": g.groups.iter().map(|g| json!({ "loads": g.loads, "threshold": g.threshold, "floored": g.floored })).collect::<Vec<_>>(),
            }),
        );
        self.history = Some(history);
        self.detector = settings;
        self.grouping = Some(g);
        Ok(self.grouping.as_ref().expect("just set"))
    }

    pub fn calibrate(&mut self, req: &CalibrateRequest) -> Result<&LoadGrouping, EmsError> {
        let history = match &req.history {
            Some(h) => h.load(&self.base)?,
            None => self.history.clone().ok_or_else(|| EmsError::Input("no history attached to this session".into()))?,
        };
        let d = &self.detector;
        let settings = DetectorSettings {
            fa_budget: req.fa_budget.unwrap_or(d.fa_budget),
            group_size: req.group_size.unwrap_or(d.group_size),
            window_s: req.window_s.unwrap_or(d.window_s),
        };
        if !(0.0..=1.0).contains(&settings.fa_budget) {
            return Err(EmsError::Input(format!("fa_budget {} is outside [0, 1]", settings.fa_budget)));
        }
        self.calibrate_on(history, settings)
    }

    /// The physical system as it would be solved on the next tick with base
    /// or latest loads.
    fn current_truth(&self) -> GridCase {
        match &self.live {
            Some(l) => l.truth.clone(),
            None => self.base.with_dispatch(&self.schedule),
        }
    }

    pub fn arm(&mut self, req: ArmRequest) -> Result<&ArmedAttack, EmsError> {
        let case = &self.base;
        let resolved = match &req {
            ArmRequest::LoadShift { load_change, measurement_budget } => {
                if load_change.len() != case.loads.len() {
                    return Err(EmsError::Input(format!(
                        "load_change has {} entries, case has {} loads",
                        load_change.len(),
                        case.loads.len()
                    )));
                }
                Armed::State {
                    attack: StateAttack::from_load_change(case, &self.net, load_change)?,
                    budget: *measurement_budget,
                }
            }
            ArmRequest::State { u, measurement_budget } => {
                if u.len() != case.n_buses() {
                    return Err(EmsError::Input(format!("u has {} entries, case has {} buses", u.len(), case.n_buses())));
                }
                Armed::State { attack: StateAttack::new(case, &self.net, u.clone())?, budget: *measurement_budget }
            }
            ArmRequest::Designed { scenario, options } => {
                let snap = Snapshot::with_plan(self.current_truth(), self.config.clone(), self.plan.clone())?;
                let d = design_attack(&snap, scenario, options)?;
                Armed::State { attack: d.attack, budget: scenario.measurement_budget }
            }
            ArmRequest::Random { count, sigmas } => {
                if *count == 0 || *count > self.plan.entries.len() || !sigmas.is_finite() {
                    return Err(EmsError::Input(format!(
                        "random corruption needs 1..={} measurements and a finite size",
                        self.plan.entries.len()
                    )));
                }
                Armed::Random { count: *count, sigmas: *sigmas }
            }
        };
        let armed = ArmedAttack { request: req, resolved, tick: self.next_tick };
        self.log.append(Some(self.next_tick), "attack", "armed", None, None, serde_json::to_value(&armed)?);
        self.armed = Some(armed);
        Ok(self.armed.as_ref().expect("just set"))
    }

    pub fn disarm(&mut self) -> Option<ArmedAttack> {
        let a = self.armed.take();
        if a.is_some() {
            self.log.append(Some(self.next_tick), "attack", "disarmed", None, None, Value::Null);
        }
        a
    }

    fn loads_for(&self, tick: u64, req: &StepRequest) -> Result<Vec<f64>, EmsError> {
        let n = self.base.loads.len();
        if let Some(p) = &req.loads {
            if p.len() != n || p.iter().any(|v| !v.is_finite()) {
                return Err(EmsError::Input(format!("loads must be {n} finite values")));
            }
            return Ok(p.clone());
        }
        if let Some(r) = req.row {
            let s = self.scenario.as_ref().ok_or_else(|| EmsError::Input("session has no scenario".into()))?;
            return s.rows.get(r).map(|r| r.p.clone()).ok_or_else(|| EmsError::NotFound(format!("scenario row {r}")));
        }
        if let Some(f) = req.scale {
            if !(f.is_finite() && f >= 0.0) {
                return Err(EmsError::Input(format!("bad load scale {f}")));
            }
            return Ok(self.base.loads.iter().map(|l| l.p * f).collect());
        }
        Ok(match &self.scenario {
            Some(s) if s.n_h() > 0 => s.rows[(tick % s.n_h() as u64) as usize].p.clone(),
            _ => self.base.loads.iter().map(|l| l.p).collect(),
        })
    }

    /// Runs one tick. Input errors leave the session untouched; stage
    /// failures are recorded in the run and halt the tick.
    pub fn step(&mut self, req: &StepRequest) -> Result<PipelineRun, EmsError> {
        let tick = self.next_tick;
        let loads = self.loads_for(tick, req)?;
        self.next_tick += 1;
        let mut tb = TickBuilder::new(tick);
        self.run_tick(&mut tb, loads);
        tb.halt();

        let run = PipelineRun { tick, stages: tb.stages, alarms: tb.alarms, durations_ms: tb.durations };
        let summary = run.without_durations();
        let mut artifacts = tb.artifacts;
        let run_body = serde_json::to_value(&summary)?;
        let run_hash = content_hash(&json!({ "stage": "run", "tick": tick, "body": run_body }));
        artifacts.insert("run".into(), Artifact { stage: "run".into(), tick, hash: run_hash.clone(), input: None, body: run_body });
        for (stage, status, artifact, input, detail) in tb.events {
            self.log.append(Some(tick), &stage, &status, artifact, input, detail);
        }
        self.log.append(Some(tick), "run", if run.failed() { "failed" } else { "ok" }, Some(run_hash), None, json!(summary.alarms));
        self.records.insert(tick, Arc::new(TickRecord { tick, run: summary, artifacts }));
        Ok(run)
    }

    fn run_tick(&mut self, tb: &mut TickBuilder, loads: Vec<f64>) {
        let cfg = self.config.clone();
        let net = &self.net;
        let tick = tb.tick;
        let truth = self.base.with_dispatch(&self.schedule).with_load_p(&loads);
        let h_loads = tb.publish(
            "loads",
            None,
            &json!({ "loads": loads, "schedule": self.schedule }),
            json!({ "total_load_mw": truth.total_load() }),
        );

        let pf = solve_from(&truth, net, &cfg.pf, self.truth_state.as_ref());
        if !pf.converged() {
            tb.fail("pf", Some(&h_loads), "physical power flow did not converge".into());
            return;
        }
        let x = state_of(&pf);
        let h_pf = tb.publish(
            "pf",
            Some(&h_loads),
            &pf,
            json!({ "iterations": pf.islands.iter().map(|i| i.iterations).sum::<usize>(), "loss_mw": pf.total_loss_mw }),
        );
        self.live = Some(Live { tick, truth: truth.clone(), pf: pf.clone(), estimate: None });

        let z = generate_telemetry(&truth, net, &x, &self.plan, &cfg.noise, mix(self.seed, tick, 0), tick);
        let h_z = tb.publish("telemetry", Some(&h_pf), &z, json!({ "measurements": z.measurements.len() }));

        let (set, h_set) = match self.armed.take() {
            None => {
                tb.skip("attack", "no attack armed");
                (z, h_z)
            }
            Some(armed) => match apply_attack(&truth, net, &z, &x, &armed.resolved, mix(self.seed, tick, 1)) {
                Ok((forged, changed)) => {
                    let kind = match armed.resolved {
                        Armed::State { .. } => "state",
                        Armed::Random { .. } => "random",
                    };
                    tb.alarms.attack = Some(kind.into());
                    let h = tb.publish(
                        "attack",
                        Some(&h_z),
                        &json!({ "armed": armed, "changed": changed, "measurements": forged }),
                        json!({ "kind": kind, "changed": changed.len() }),
                    );
                    (forged, h)
                }
                Err(e) => {
                    tb.fail("attack", Some(&h_z), e.to_string());
                    return;
                }
            },
        };

        let se = match estimate_with_bdd(&truth, net, &set, &cfg.se) {
            Ok(se) => se,
            Err(e) => {
                tb.fail("se", Some(&h_set), e.to_string());
                return;
            }
        };
        let bdd_pass = se.eliminated.is_empty() && se.bdd.pass;
        tb.alarms.bdd_pass = Some(bdd_pass);
        tb.alarms.eliminated = se.eliminated.clone();
        let cyber_loads = estimated_loads(&truth, net, &se.estimate, &pf.gen_p);
        let h_se = tb.publish(
            "se",
            Some(&h_set),
            &json!({ "outcome": se, "loads": cyber_loads }),
            json!({ "bdd_pass": bdd_pass, "eliminated": se.eliminated, "objective": se.estimate.objective }),
        );
        if let Some(l) = self.live.as_mut() {
            l.estimate = Some(se.estimate.state());
        }

        match (&self.history, &self.grouping) {
            (Some(h), Some(g)) => match detect(&cyber_loads, h, g) {
                Ok(mut v) => {
                    if v.anomalous {
                        v.zscores = Some(zscore_localize(&cyber_loads, h, &v));
                    }
                    tb.alarms.detector_alarm = Some(v.anomalous);
                    tb.alarms.alarmed_groups = v.alarmed_groups();
                    tb.alarms.top_zscores = v.zscores.iter().flatten().take(3).cloned().collect();
                    tb.publish(
                        "detector",
                        Some(&h_se),
                        &v,
                        json!({ "anomalous": v.anomalous, "alarmed_groups": v.alarmed_groups() }),
                    );
                }
                Err(e) => tb.fail("detector", Some(&h_se), e.to_string()),
            },
            _ => tb.skip("detector", "detector not calibrated"),
        }

        let cyber = truth.with_load_p(&cyber_loads);
        let est_state = se.estimate.state();
        let cyber_pf = solve_from(&cyber, net, &cfg.pf, Some(&est_state));
        if !cyber_pf.converged() {
            tb.fail("rtca", Some(&h_se), "operator power flow did not converge".into());
            return;
        }
        let rtca = run_rtca(&cyber, net, &cyber_pf, &cfg.rtca);
        tb.alarms.rtca_critical = Some(rtca.critical.len());
        tb.alarms.rtca_violations = Some(rtca.n_violations());
        let h_rtca = tb.publish(
            "rtca",
            Some(&h_se),
            &json!({ "pf": cyber_pf, "report": rtca, "table": rtca.table() }),
            json!({ "critical": rtca.critical, "violations": rtca.n_violations(), "base_violations": rtca.base_violations.len() }),
        );

        let plan = match dispatch_pipeline(&cyber, net, &cyber_pf, &rtca, &cfg.sced, &cfg.pf) {
            Ok((plan, _)) => plan,
            Err(e) => {
                tb.fail("sced", Some(&h_rtca), e.to_string());
                return;
            }
        };
        tb.alarms.sced_clean = Some(plan.clean);
        let h_sced = tb.publish(
            "sced",
            Some(&h_rtca),
            &plan,
            json!({ "clean": plan.clean, "objective": plan.objective, "p_set": plan.p_set }),
        );
        self.schedule = plan.p_set.clone();

        // Both worlds after the dispatch.
        let phys_case = plan.applied_case(&truth);
        let phys_pf = solve_from(&phys_case, net, &cfg.pf, Some(&x));
        let cyber_after = solve_from(&plan.applied_case(&cyber), net, &cfg.pf, Some(&state_of(&cyber_pf)));
        if !phys_pf.converged() || !cyber_after.converged() {
            tb.fail("comparison", Some(&h_sced), "post-dispatch power flow did not converge".into());
            return;
        }
        self.truth_state = Some(state_of(&phys_pf));
        let phys_rtca = run_rtca(&phys_case, net, &phys_pf, &cfg.rtca);
        let cyber_rtca = run_rtca(&plan.applied_case(&cyber), net, &cyber_after, &cfg.rtca);
        let summary = ViolationSummary {
            cyber_base_violations: cyber_rtca.base_violations.len(),
            cyber_post_violations: cyber_rtca.n_violations(),
            physical_base_violations: phys_rtca.base_violations.len(),
            physical_post_violations: phys_rtca.n_violations(),
            worst_cyber_post_percent: worst(&cyber_rtca),
            worst_physical_post_percent: worst(&phys_rtca),
        };
        tb.publish(
            "comparison",
            Some(&h_sced),
            &json!({ "summary": summary, "pairs": pairs(&truth, &cyber_rtca, &phys_rtca) }),
            json!(summary),
        );
    }

    pub fn report(&self, stage: &str, tick: u64) -> Result<&Artifact, EmsError> {
        let rec = self.records.get(&tick).ok_or_else(|| EmsError::NotFound(format!("tick {tick}")))?;
        if stage != "run" && !STAGES.contains(&stage) {
            return Err(EmsError::NotFound(format!("stage `{stage}`; known: run, {}", STAGES.join(", "))));
        }
        rec.artifacts.get(stage).ok_or_else(|| EmsError::NotFound(format!("no `{stage}` artifact for tick {tick}")))
    }

    pub fn graph(&self) -> GraphView {
        let c = &self.base;
        let live = self.live.as_ref();
        let (bus_p, _) = live.map_or_else(|| c.bus_load(), |l| l.truth.bus_load());
        let mut gen_p = vec![0.0; c.n_buses()];
        for (k, g) in c.generators.iter().enumerate() {
            if g.status {
                gen_p[c.generator_bus(k)] += live.map_or(self.schedule[k], |l| l.pf.gen_p[k]);
            }
        }
        let buses = c
            .buses
            .iter()
            .enumerate()
            .map(|(b, bus)| GraphBus {
                id: bus.id,
                kind: bus.kind,
                base_kv: bus.base_kv,
                load_p: bus_p[b],
                gen_p: gen_p[b],
                v_mag: live.map(|l| l.pf.v_mag[b]),
                v_ang_deg: live.map(|l| l.pf.v_ang[b].to_degrees()),
                est_v_mag: live.and_then(|l| l.estimate.as_ref()).map(|e| e.v_mag[b]),
                est_v_ang_deg: live.and_then(|l| l.estimate.as_ref()).map(|e| e.v_ang[b].to_degrees()),
            })
            .collect();
        let branches = c
            .branches
            .iter()
            .enumerate()
            .map(|(k, br)| {
                let flow = live.map(|l| &l.pf.branches[k]);
                let loading = flow.map(|f| 100.0 * f.mva() / br.s_max);
                GraphBranch {
                    id: br.id,
                    from: br.from_bus,
                    to: br.to_bus,
                    r: br.r,
                    x: br.x,
                    rating: br.s_max,
                    rating_emergency: br.s_max_emergency,
                    in_service: br.status,
                    p_from: flow.map(|f| f.p_from),
                    mva: flow.map(|f| f.mva()),
                    loading_percent: loading,
                    violated: loading.is_some_and(|p| p > 100.0),
                }
            })
            .collect();
        GraphView {
            case: c.name.clone(),
            tick: live.map(|l| l.tick),
            buses,
            branches,
            generators: c.generators.clone(),
            loads: c.loads.clone(),
        }
    }
}

/// Forges `z` per the armed attack. Returns the forged set and the ids of
/// the measurements that changed.
fn apply_attack(
    case: &GridCase,
    net: &Network,
    z: &MeasurementSet,
    x: &BusState,
    armed: &Armed,
    seed: u64,
) -> Result<(MeasurementSet, Vec<u32>), EmsError> {
    let forged = match armed {
        Armed::State { attack, budget } => forge_measurements(case, net, z, x, attack, *budget)?,
        Armed::Random { count, sigmas } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut out = z.clone();
            let mut picks = sample(&mut rng, out.measurements.len(), *count).into_vec();
            picks.sort_unstable();
            for i in picks {
                let m = &mut out.measurements[i];
                m.value += sigmas * m.sigma;
            }
            out
        }
    };
    let changed = z
        .measurements
        .iter()
        .zip(&forged.measurements)
        .filter(|(a, b)| a.value.to_bits() != b.value.to_bits())
        .map(|(a, _)| a.id)
        .collect();
    Ok((forged, changed))
}
