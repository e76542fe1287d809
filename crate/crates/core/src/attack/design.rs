use std::collections::VecDeque;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{footprint_size, implied_bus_change, split_by_load, AttackObjective, AttackScenario, ResponseModel, StateAttack};
use crate::config::EmsConfig;
use crate::error::{AttackError, EmsError, PowerFlowError};
use crate::estimation::{injections, MeasurementPlan};
use crate::grid::{find_radial_branches, GridCase, Network};
use crate::lp::{solve as lp_solve, LpProblem, SimplexOptions};
use crate::powerflow::{solve_from, BusState, PowerFlowSolution};
use crate::rtca::{run_rtca, RtcaReport};
use crate::sced::{build_problem, dispatch_pipeline, solve_problem, ScedOptions};

/// What the attacker knows: the true case at its current schedule, the
/// solved base case, the operator's contingency report and meter layout.
#[derive(Clone, Debug)]
pub struct Snapshot {
    pub case: GridCase,
    pub net: Network,
    pub base: PowerFlowSolution,
    pub rtca: RtcaReport,
    pub plan: MeasurementPlan,
    pub config: EmsConfig,
}

impl Snapshot {
    pub fn new(case: GridCase, config: EmsConfig) -> Result<Snapshot, EmsError> {
        let plan = MeasurementPlan::standard(&case);
        Snapshot::with_plan(case, config, plan)
    }

    pub fn with_plan(case: GridCase, config: EmsConfig, plan: MeasurementPlan) -> Result<Snapshot, EmsError> {
        let net = Network::build(&case)?;
        let base = crate::powerflow::solve(&case, &net, &config.pf);
        if !base.converged() {
            return Err(PowerFlowError::NotConverged.into());
        }
        let rtca = run_rtca(&case, &net, &base, &config.rtca);
        Ok(Snapshot { case, net, base, rtca, plan, config })
    }

    pub fn state(&self) -> BusState {
        BusState { v_mag: self.base.v_mag.clone(), v_ang: self.base.v_ang.clone() }
    }

    fn empty_rtca(&self) -> RtcaReport {
        RtcaReport {
            warn_frac: self.config.rtca.warn_frac,
            results: Vec::new(),
            critical: Vec::new(),
            base_flows: self.base.branches.clone(),
            base_violations: Vec::new(),
        }
    }
}

/// Loading of the target branch, in the base case or after `outage`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetReading {
    pub branch: u32,
    pub outage: Option<u32>,
    /// MW in the DC model, MVA (worse end) in the AC model.
    pub flow: f64,
    pub rating: f64,
    pub percent: f64,
}

impl TargetReading {
    fn new(branch: u32, outage: Option<u32>, flow: f64, rating: f64) -> Self {
        TargetReading { branch, outage, flow, rating, percent: 100.0 * flow / rating }
    }
}

/// Attacker's prediction for one candidate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelResponse {
    pub reading: TargetReading,
    pub dispatch_cost: f64,
    pub p_set: Vec<f64>,
    /// Upper-level value before the c₁ᵀu term.
    pub consequence: f64,
    /// Whether the operator's post-dispatch screen is violation-free; only
    /// computed under the SCED response.
    pub cyber_secure: Option<bool>,
}

/// The attacker's model of the operator and of the physical system.
pub struct AttackModel<'a> {
    pub snap: &'a Snapshot,
    pub scenario: &'a AttackScenario,
    target: usize,
    contingencies: Vec<usize>,
}

impl<'a> AttackModel<'a> {
    pub fn new(snap: &'a Snapshot, scenario: &'a AttackScenario) -> Result<Self, AttackError> {
        scenario.validate(&snap.case)?;
        let case = &snap.case;
        let target = case.branch_index(scenario.target_branch).ok_or(AttackError::UnknownTarget(scenario.target_branch))?;
        let radial = find_radial_branches(case, &snap.net.idx);
        let contingencies = (0..case.n_branches())
            .filter(|&k| k != target && case.branches[k].status && !radial.contains(&case.branches[k].id))
            .collect();
        Ok(AttackModel { snap, scenario, target, contingencies })
    }

    /// Upper-level objective: consequence minus c₁ᵀu.
    pub fn objective(&self, attack: &StateAttack) -> Result<(f64, ModelResponse), EmsError> {
        let r = self.respond(attack)?;
        let v = r.consequence - self.scenario.attack_cost_of(&self.snap.case, &attack.u);
        Ok((v, r))
    }

    pub fn respond(&self, attack: &StateAttack) -> Result<ModelResponse, EmsError> {
        match self.scenario.assumed_response {
            ResponseModel::Dcopf => self.respond_dc(attack),
            ResponseModel::Sced => self.respond_ac(attack),
        }
    }

    fn consequence(&self, reading: &TargetReading, cost: f64) -> f64 {
        match self.scenario.objective {
            AttackObjective::MaxCost => cost,
            _ => reading.flow,
        }
    }

    /// DCOPF on the falsified loads, then DC flows with the true loads.
    fn respond_dc(&self, attack: &StateAttack) -> Result<ModelResponse, EmsError> {
        let snap = self.snap;
        let case = &snap.case;
        let cyber = case.with_load_p(&attack.cyber_loads(case));
        let opts = dcopf_options(&snap.config.sced);
        let prob = build_problem(&cyber, &snap.net, &snap.base, &snap.empty_rtca(), &opts)?;
        let plan = solve_problem(&cyber, &prob)?;
        let physical = plan.applied_case(case);

        let mut inj = physical.bus_generation();
        let (load, _) = physical.bus_load();
        for b in 0..case.n_buses() {
            inj[b] -= load[b] + plan.virtual_loads[b];
        }
        let ptdf = &snap.net.mats.ptdf;
        let flow = |k: usize| (0..case.n_buses()).map(|j| ptdf[(k, j)] * inj[j]).sum::<f64>();
        let t = self.target;
        let id = case.branches[t].id;
        let reading = match self.scenario.objective {
            AttackObjective::MaxPostcontingencyFlow => {
                let ft = flow(t);
                let mut best = TargetReading::new(id, None, ft.abs(), case.branches[t].s_max_emergency);
                for &k in &self.contingencies {
                    let post = (ft + snap.net.mats.lodf[(t, k)] * flow(k)).abs();
                    if post > best.flow || best.outage.is_none() {
                        best = TargetReading::new(id, Some(case.branches[k].id), post, case.branches[t].s_max_emergency);
                    }
                }
                best
            }
            _ => TargetReading::new(id, None, flow(t).abs(), case.branches[t].s_max),
        };
        Ok(ModelResponse {
            consequence: self.consequence(&reading, plan.objective),
            reading,
            dispatch_cost: plan.objective,
            p_set: plan.p_set,
            cyber_secure: None,
        })
    }

    /// Full replica of the operator's loop on the falsified view, then the
    /// AC power flow and contingency screen of the true system.
    fn respond_ac(&self, attack: &StateAttack) -> Result<ModelResponse, EmsError> {
        let snap = self.snap;
        let case = &snap.case;
        let cfg = &snap.config;
        let shifted = attack.shifted_state(&snap.state());
        let cyber = case.with_load_p(&ac_cyber_loads(case, &snap.net, &snap.base.gen_p, &shifted));
        let cyber_pf = solve_from(&cyber, &snap.net, &cfg.pf, Some(&shifted));
        if !cyber_pf.converged() {
            return Err(PowerFlowError::NotConverged.into());
        }
        let cyber_rtca = run_rtca(&cyber, &snap.net, &cyber_pf, &cfg.rtca);
        let (plan, cyber_after) = dispatch_pipeline(&cyber, &snap.net, &cyber_pf, &cyber_rtca, &cfg.sced, &cfg.pf)?;
        let cyber_secure = self.scenario.require_cyber_secure.then(|| {
            cyber_after.converged() && run_rtca(&plan.applied_case(&cyber), &snap.net, &cyber_after, &cfg.rtca).is_secure()
        });
        let physical = plan.applied_case(case);
        let phys_pf = solve_from(&physical, &snap.net, &cfg.pf, Some(&snap.state()));
        if !phys_pf.converged() {
            return Err(PowerFlowError::NotConverged.into());
        }
        let t = self.target;
        let br = &case.branches[t];
        let reading = match self.scenario.objective {
            AttackObjective::MaxPostcontingencyFlow => {
                let rtca = run_rtca(&physical, &snap.net, &phys_pf, &cfg.rtca);
                worst_post_contingency(case, &rtca, t)
                    .unwrap_or_else(|| TargetReading::new(br.id, None, phys_pf.branches[t].mva(), br.s_max_emergency))
            }
            _ => TargetReading::new(br.id, None, phys_pf.branches[t].mva(), br.s_max),
        };
        Ok(ModelResponse {
            consequence: self.consequence(&reading, plan.objective),
            reading,
            dispatch_cost: plan.objective,
            p_set: plan.p_set,
            cyber_secure,
        })
    }
}

/// Highest post-contingency loading of branch `t` over converged outages.
pub(super) fn worst_post_contingency(case: &GridCase, rtca: &RtcaReport, t: usize) -> Option<TargetReading> {
    let br = &case.branches[t];
    rtca.results
        .iter()
        .filter(|r| r.converged && r.outage != br.id)
        .map(|r| TargetReading::new(br.id, Some(r.outage), r.flows[t].mva(), br.s_max_emergency))
        .max_by(|a, b| a.flow.total_cmp(&b.flow))
}

/// Per-load MW an estimator would report at state `x` with generation known.
pub(super) fn ac_cyber_loads(case: &GridCase, net: &Network, gen_p: &[f64], x: &BusState) -> Vec<f64> {
    let inj = injections(net, x);
    let mut bus = vec![0.0; case.n_buses()];
    for (k, g) in case.generators.iter().enumerate() {
        if g.status {
            bus[case.generator_bus(k)] += gen_p[k];
        }
    }
    for (b, v) in bus.iter_mut().enumerate() {
        *v -= inj[b].0 * case.base_mva;
    }
    split_by_load(case, &bus)
}

/// DC-OPF with the operator's penalties and loss placement.
fn dcopf_options(sced: &ScedOptions) -> ScedOptions {
    ScedOptions {
        loss_option: sced.loss_option,
        penalty_load_shed: sced.penalty_load_shed,
        penalty_gen_min_slack: sced.penalty_gen_min_slack,
        penalty_overflow: sced.penalty_overflow,
        penalty_reserve_shortfall: sced.penalty_reserve_shortfall,
        ..ScedOptions::dcopf()
    }
}

/// Buses the attacker may perturb: all energized non-reference buses when
/// the budget is unlimited, otherwise a breadth-first neighborhood of the
/// target grown while the measurement footprint fits the budget.
pub fn select_support(snap: &Snapshot, scenario: &AttackScenario) -> Result<Vec<usize>, AttackError> {
    let case = &snap.case;
    let net = &snap.net;
    let eligible = |b: usize| matches!(net.reference_of(b), Some(r) if r != b);
    let all: Vec<usize> = (0..case.n_buses()).filter(|&b| eligible(b)).collect();
    let Some(budget) = scenario.measurement_budget else { return Ok(all) };
    if footprint_size(case, net, &snap.plan.entries, &all) <= budget {
        return Ok(all);
    }
    let t = case.branch_index(scenario.target_branch).ok_or(AttackError::UnknownTarget(scenario.target_branch))?;
    let (f, to) = case.terminals(t);
    let mut seen = vec![false; case.n_buses()];
    let mut queue = VecDeque::new();
    for b in [f, to] {
        if !seen[b] {
            seen[b] = true;
            queue.push_back(b);
        }
    }
    let mut support = Vec::new();
    while let Some(b) = queue.pop_front() {
        if eligible(b) {
            support.push(b);
            if footprint_size(case, net, &snap.plan.entries, &support) > budget {
                support.pop();
            }
        }
        let mut next: Vec<usize> = net.idx.adjacency(b).iter().map(|l| l.far).filter(|&n| !seen[n]).collect();
        next.sort_unstable();
        next.dedup();
        for n in next {
            seen[n] = true;
            queue.push_back(n);
        }
    }
    support.sort_unstable();
    Ok(support)
}

/// Orthonormal basis (over bus positions) of angle perturbations supported
/// on `support` whose implied injection change vanishes at every bus
/// without load.
pub fn feasible_directions(case: &GridCase, net: &Network, support: &[usize]) -> Vec<Vec<f64>> {
    let n = case.n_buses();
    let s = support.len();
    if s == 0 {
        return Vec::new();
    }
    let mut has_load = vec![false; n];
    for l in 0..case.loads.len() {
        has_load[case.load_bus(l)] = true;
    }
    let dense = net.mats.b_prime.to_dense();
    let rows: Vec<usize> = (0..n).filter(|&j| !has_load[j] && support.iter().any(|&b| dense[(j, b)] != 0.0)).collect();
    let c = DMatrix::from_fn(rows.len(), s, |i, k| dense[(rows[i], support[k])]);
    let ctc = c.transpose() * &c;
    let eig = SymmetricEigen::new(ctc);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, &v| a.max(v.abs()));
    let mut order: Vec<usize> = (0..s).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let mut dirs = Vec::new();
    for k in order {
        if eig.eigenvalues[k].abs() > 1e-10 * scale {
            continue;
        }
        let v = eig.eigenvectors.column(k);
        let mut d = vec![0.0; n];
        for (i, &b) in support.iter().enumerate() {
            d[b] = v[i];
        }
        // Fix the sign so the basis is reproducible.
        let lead = d.iter().copied().find(|x| x.abs() > 1e-12).unwrap_or(1.0);
        if lead < 0.0 {
            d.iter_mut().for_each(|x| *x = -*x);
        }
        dirs.push(d);
    }
    dirs
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DesignOptions {
    pub max_evals: usize,
    /// First trial step as a fraction of the full load-shift range.
    pub initial_step: f64,
    pub min_step: f64,
    pub jobs: usize,
}

impl Default for DesignOptions {
    fn default() -> Self {
        DesignOptions { max_evals: 800, initial_step: 0.5, min_step: 1.0 / 64.0, jobs: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignResult {
    pub attack: StateAttack,
    /// Upper-level value of the returned attack.
    pub objective: f64,
    /// Upper-level value with no attack.
    pub baseline: f64,
    pub response: ModelResponse,
    pub baseline_response: ModelResponse,
    pub support: Vec<u32>,
    /// Measurements the returned attack rewrites.
    pub footprint: usize,
    pub directions: usize,
    pub evaluations: usize,
    /// Best value after each sweep.
    pub trace: Vec<f64>,
}

struct Search<'m, 'a> {
    model: &'m AttackModel<'a>,
    /// Per direction: implied per-load MW change for a unit step.
    load_dirs: Vec<Vec<f64>>,
    dirs: Vec<Vec<f64>>,
    bounds: Vec<f64>,
    evals: usize,
    jobs: usize,
}

impl Search<'_, '_> {
    fn attack_at(&self, alpha: &[f64]) -> Option<StateAttack> {
        let n = self.model.snap.case.n_buses();
        let mut u = vec![0.0; n];
        for (a, d) in alpha.iter().zip(&self.dirs) {
            for b in 0..n {
                u[b] += a * d[b];
            }
        }
        StateAttack::new(&self.model.snap.case, &self.model.snap.net, u).ok()
    }

    fn load_change(&self, alpha: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.bounds.len()];
        for (a, ld) in alpha.iter().zip(&self.load_dirs) {
            for (o, v) in out.iter_mut().zip(ld) {
                *o += a * v;
            }
        }
        out
    }

    /// Longest step t ≥ 0 along `dir` (in α space) that keeps every load
    /// within its shift bound.
    fn max_step(&self, alpha: &[f64], dir: &[f64]) -> f64 {
        let cur = self.load_change(alpha);
        let rate = self.load_change(dir);
        let mut t = f64::INFINITY;
        for l in 0..cur.len() {
            if rate[l] > 1e-15 {
                t = t.min((self.bounds[l] - cur[l]) / rate[l]);
            } else if rate[l] < -1e-15 {
                t = t.min((-self.bounds[l] - cur[l]) / rate[l]);
            }
        }
        t.max(0.0)
    }

    fn evaluate(&mut self, candidates: &[Vec<f64>]) -> Vec<Option<(f64, StateAttack, ModelResponse)>> {
        self.evals += candidates.len();
        let run = |alpha: &Vec<f64>| {
            let attack = self.attack_at(alpha)?;
            let (v, r) = self.model.objective(&attack).ok()?;
            (v.is_finite() && r.cyber_secure != Some(false)).then_some((v, attack, r))
        };
        if self.jobs <= 1 || candidates.len() < 2 {
            return candidates.iter().map(run).collect();
        }
        let chunk = candidates.len().div_ceil(self.jobs);
        std::thread::scope(|s| {
            let handles: Vec<_> =
                candidates.chunks(chunk).map(|c| s.spawn(move || c.iter().map(run).collect::<Vec<_>>())).collect();
            handles.into_iter().flat_map(|h| h.join().expect("attack evaluation panicked")).collect()
        })
    }

    /// Move maximizing the finite-difference slope over the shift box and a
    /// per-direction trust region of `step` (unbounded when infinite).
    fn sensitivity_move(&self, alpha: &[f64], slope: &[f64], step: f64) -> Option<Vec<f64>> {
        if slope.iter().all(|g| g.abs() < 1e-12) {
            return None;
        }
        let m = alpha.len();
        let mut lp = LpProblem::default();
        for &g in slope {
            lp.add_col(-g, -step, step);
        }
        let cur = self.load_change(alpha);
        for l in 0..cur.len() {
            let coefs: Vec<(usize, f64)> =
                (0..m).filter(|&j| self.load_dirs[j][l] != 0.0).map(|j| (j, self.load_dirs[j][l])).collect();
            if coefs.is_empty() {
                continue;
            }
            lp.add_row(coefs, -self.bounds[l] - cur[l], self.bounds[l] - cur[l]);
        }
        let sol = lp_solve(&lp, &SimplexOptions::default()).ok()?;
        Some(alpha.iter().zip(&sol.x).map(|(a, d)| a + d).collect())
    }
}

/// Projected pattern search on the attack's feasible directions with the
/// attacker's lower level solved exactly at every trial point. Starts from
/// no attack and only accepts improvements, so the result never scores
/// below the unattacked system.
pub fn design_attack(
    snap: &Snapshot,
    scenario: &AttackScenario,
    opts: &DesignOptions,
) -> Result<DesignResult, EmsError> {
    let model = AttackModel::new(snap, scenario)?;
    let case = &snap.case;
    let zero = StateAttack::zero(case);
    let (baseline, baseline_response) = model.objective(&zero)?;

    let support = select_support(snap, scenario)?;
    let dirs = if scenario.load_shift_limit > 0.0 { feasible_directions(case, &snap.net, &support) } else { Vec::new() };
    let support_ids: Vec<u32> = support.iter().map(|&b| case.buses[b].id).collect();
    if dirs.is_empty() && scenario.load_shift_limit > 0.0 {
        return Err(AttackError::Infeasible(format!(
            "no load-redistributing perturbation fits a budget of {:?} measurements",
            scenario.measurement_budget
        ))
        .into());
    }

    let bounds: Vec<f64> = case.loads.iter().map(|l| scenario.load_shift_limit * l.p.abs()).collect();
    // Scale each direction so a unit step reaches the shift limit.
    let mut scaled = Vec::new();
    let mut load_dirs = Vec::new();
    for d in dirs {
        let ld = split_by_load(case, &implied_bus_change(case, &snap.net, &d));
        let reach = ld
            .iter()
            .zip(&bounds)
            .filter(|(v, _)| v.abs() > 1e-12)
            .map(|(v, b)| v.abs() / b.max(1e-12))
            .fold(0.0, f64::max);
        if reach <= 0.0 {
            continue;
        }
        scaled.push(d.iter().map(|x| x / reach).collect::<Vec<_>>());
        load_dirs.push(ld.iter().map(|x| x / reach).collect::<Vec<_>>());
    }
    let m = scaled.len();
    let mut search = Search { model: &model, load_dirs, dirs: scaled, bounds, evals: 1, jobs: opts.jobs.max(1) };

    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let mut alpha = vec![0.0; m];
    let mut best = (baseline, zero, baseline_response.clone());
    let mut step = opts.initial_step;
    let mut trace = vec![baseline];
    while m > 0 && step >= opts.min_step && search.evals < opts.max_evals {
        let mut order: Vec<usize> = (0..m).collect();
        order.shuffle(&mut rng);
        let mut cands: Vec<Vec<f64>> = Vec::new();
        let mut probes: Vec<(usize, f64)> = Vec::new();
        for &j in &order {
            for sign in [1.0, -1.0] {
                let mut e = vec![0.0; m];
                e[j] = sign;
                let reach = search.max_step(&alpha, &e);
                if reach <= 1e-12 {
                    continue;
                }
                let t = step.min(reach);
                let mut a = alpha.clone();
                a[j] += sign * t;
                cands.push(a);
                probes.push((j, sign * t));
                if reach > step && reach.is_finite() {
                    let mut a = alpha.clone();
                    a[j] += sign * reach;
                    cands.push(a);
                    probes.push((j, sign * reach));
                }
            }
        }
        let results = search.evaluate(&cands);

        // Finite-difference slope per direction from the probe results.
        let mut slope = vec![0.0; m];
        let mut count = vec![0usize; m];
        for ((j, t), r) in probes.iter().zip(&results) {
            if let Some((v, _, _)) = r {
                slope[*j] += (v - best.0) / t;
                count[*j] += 1;
            }
        }
        for j in 0..m {
            if count[j] > 0 {
                slope[j] /= count[j] as f64;
            }
        }
        let mut pool: Vec<(Vec<f64>, Option<(f64, StateAttack, ModelResponse)>)> = cands.into_iter().zip(results).collect();
        // Linearized moves: one inside the trust region, one out to the
        // far vertex of the shift box.
        let moves: Vec<Vec<f64>> =
            [step, f64::INFINITY].iter().filter_map(|&s| search.sensitivity_move(&alpha, &slope, s)).collect();
        let results = search.evaluate(&moves);
        pool.extend(moves.into_iter().zip(results));

        let mut improved = false;
        for (a, r) in pool {
            if let Some((v, attack, resp)) = r {
                if v > best.0 + 1e-9 * best.0.abs().max(1.0) {
                    best = (v, attack, resp);
                    alpha = a;
                    improved = true;
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
        trace.push(best.0);
    }

    let footprint = footprint_size(
        case,
        &snap.net,
        &snap.plan.entries,
        &(0..case.n_buses()).filter(|&b| best.1.u[b] != 0.0).collect::<Vec<_>>(),
    );
    Ok(DesignResult {
        objective: best.0,
        attack: best.1,
        response: best.2,
        baseline,
        baseline_response,
        support: support_ids,
        footprint,
        directions: m,
        evaluations: search.evals,
        trace,
    })
}
