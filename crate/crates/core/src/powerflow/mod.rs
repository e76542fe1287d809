//! Fast-decoupled AC power flow.
//!
//! Each energized island is solved on its own with alternating P-θ and Q-V
//! half-iterations against constant B′/B″ factors (XB scheme). B″ is only
//! refactorized when generator VAR limiting moves a bus between the PV and
//! PQ sets. Slack distribution is an outer loop around [`solve`].

mod slack;

use nalgebra::DVector;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::grid::{branch_admittances, BusType, GridCase, Network};

pub use slack::{allocate_slack, distribute_slack, solve_with_slack, SlackAllocation};

/// Lowest mismatch (pu) before VAR limits are examined. Flat-start
/// reactive outputs are meaningless, so early checks only cause churn.
const VAR_CHECK_MISMATCH: f64 = 1e-2;
/// Per-bus cap on PV↔PQ transitions within one solve.
const MAX_VAR_SWITCHES: u32 = 3;
const DIVERGENCE_MISMATCH: f64 = 1e4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SlackShareRule {
    #[default]
    ProportionalPmax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PowerFlowOptions {
    /// Convergence threshold on max |ΔP|, |ΔQ| in per unit.
    pub tol: f64,
    /// Maximum P-θ/Q-V half-iteration pairs.
    pub max_iter: usize,
    pub distribute_slack: bool,
    pub slack_share_rule: SlackShareRule,
    pub var_limits: bool,
}

impl Default for PowerFlowOptions {
    fn default() -> Self {
        PowerFlowOptions {
            tol: 1e-6,
            max_iter: 60,
            distribute_slack: false,
            slack_share_rule: SlackShareRule::ProportionalPmax,
            var_limits: true,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BranchFlow {
    pub p_from: f64,
    pub q_from: f64,
    pub p_to: f64,
    pub q_to: f64,
}

impl BranchFlow {
    /// Apparent power at the more loaded end, MVA.
    pub fn mva(&self) -> f64 {
        self.p_from.hypot(self.q_from).max(self.p_to.hypot(self.q_to))
    }

    pub fn loss(&self) -> f64 {
        self.p_from + self.p_to
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IslandStatus {
    pub island: usize,
    pub buses: Vec<u32>,
    /// `None` for a dead island (no generation), which is left unsolved.
    pub reference: Option<u32>,
    pub converged: bool,
    pub iterations: usize,
    /// Max |ΔP|, |ΔQ| at the returned state, pu.
    pub max_mismatch: f64,
}

impl IslandStatus {
    pub fn is_dead(&self) -> bool {
        self.reference.is_none()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub island: usize,
    pub iteration: usize,
    pub max_dp: f64,
    pub max_dq: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarSwitchEvent {
    pub iteration: usize,
    pub bus: u32,
    /// "pv_to_pq_max", "pv_to_pq_min" or "pq_to_pv".
    pub kind: String,
    pub q_mvar: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlackShare {
    pub generator: u32,
    pub share_mw: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerFlowSolution {
    pub v_mag: Vec<f64>,
    /// Radians.
    pub v_ang: Vec<f64>,
    pub branches: Vec<BranchFlow>,
    pub gen_p: Vec<f64>,
    pub gen_q: Vec<f64>,
    pub islands: Vec<IslandStatus>,
    pub total_loss_mw: f64,
    pub trace: Vec<IterationRecord>,
    pub var_events: Vec<VarSwitchEvent>,
    pub slack_shares: Vec<SlackShare>,
}

impl PowerFlowSolution {
    /// True when every island was solved and converged.
    pub fn converged(&self) -> bool {
        self.islands.iter().all(|i| i.converged)
    }

    pub fn has_dead_island(&self) -> bool {
        self.islands.iter().any(IslandStatus::is_dead)
    }

    pub fn max_mismatch(&self) -> f64 {
        self.islands.iter().map(|i| i.max_mismatch).fold(0.0, f64::max)
    }
}

/// Complex bus injections S = V ∘ conj(Y V), per unit.
pub fn bus_injections(net: &Network, v_mag: &[f64], v_ang: &[f64]) -> Vec<Complex64> {
    let v: Vec<Complex64> = v_mag.iter().zip(v_ang).map(|(&m, &a)| Complex64::from_polar(m, a)).collect();
    let i = net.mats.ybus.mul_vec(&v);
    v.iter().zip(&i).map(|(vk, ik)| vk * ik.conj()).collect()
}

/// Branch flows (MW/MVAr) at the given state. Out-of-service branches are zero.
pub fn branch_flows(case: &GridCase, net: &Network, v_mag: &[f64], v_ang: &[f64]) -> Vec<BranchFlow> {
    (0..case.n_branches())
        .map(|k| {
            if !net.idx.branch_in_service(k) {
                return BranchFlow::default();
            }
            let (f, t) = case.terminals(k);
            let [yff, yft, ytf, ytt] = branch_admittances(case, k);
            let vf = Complex64::from_polar(v_mag[f], v_ang[f]);
            let vt = Complex64::from_polar(v_mag[t], v_ang[t]);
            let sf = vf * (yff * vf + yft * vt).conj() * case.base_mva;
            let st = vt * (ytf * vf + ytt * vt).conj() * case.base_mva;
            BranchFlow { p_from: sf.re, q_from: sf.im, p_to: st.re, q_to: st.im }
        })
        .collect()
}

/// Initial bus state: a supplied warm state, otherwise flat start with
/// generator voltage set-points.
#[derive(Clone, Debug, PartialEq)]
pub struct BusState {
    pub v_mag: Vec<f64>,
    pub v_ang: Vec<f64>,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Role {
    Reference,
    Pv,
    Pq,
    /// PV bus held at its reactive limit.
    Clamped,
}

struct GenBusData {
    q_min: f64,
    q_max: f64,
    v_set: f64,
}

/// Solves every island of `case` from a flat start.
pub fn solve(case: &GridCase, net: &Network, opts: &PowerFlowOptions) -> PowerFlowSolution {
    solve_from(case, net, opts, None)
}

/// Solves every island, optionally from a warm state.
pub fn solve_from(
    case: &GridCase,
    net: &Network,
    opts: &PowerFlowOptions,
    start: Option<&BusState>,
) -> PowerFlowSolution {
    let n = case.n_buses();
    let base = case.base_mva;
    let (load_p, load_q) = case.bus_load();

    // Regulating generator data per bus.
    let mut gen_bus: Vec<Option<GenBusData>> = (0..n).map(|_| None).collect();
    let mut fixed_gen_q = vec![0.0; n];
    let mut sched_gen_p = vec![0.0; n];
    for (k, g) in case.generators.iter().enumerate() {
        if !g.status {
            continue;
        }
        let b = case.generator_bus(k);
        sched_gen_p[b] += g.p;
        if case.buses[b].kind == BusType::Pq {
            fixed_gen_q[b] += g.q;
            continue;
        }
        let entry = gen_bus[b].get_or_insert(GenBusData { q_min: 0.0, q_max: 0.0, v_set: case.buses[b].v_mag });
        entry.q_min += g.q_min;
        entry.q_max += g.q_max;
    }

    let mut v_mag: Vec<f64> = match start {
        Some(s) => s.v_mag.clone(),
        None => (0..n).map(|b| gen_bus[b].as_ref().map_or(1.0, |g| g.v_set)).collect(),
    };
    let mut v_ang: Vec<f64> = match start {
        Some(s) => s.v_ang.clone(),
        None => vec![0.0; n],
    };
    for b in 0..n {
        if let Some(g) = &gen_bus[b] {
            v_mag[b] = g.v_set;
        } else if !(v_mag[b] > 0.1) {
            // Warm state from a de-energized bus.
            v_mag[b] = 1.0;
        }
    }

    let mut islands = Vec::new();
    let mut trace = Vec::new();
    let mut var_events = Vec::new();

    for (island, members) in net.idx.islands().iter().enumerate() {
        let ids = members.iter().map(|&b| case.buses[b].id).collect();
        let Some(reference) = net.mats.references[island] else {
            for &b in members {
                v_mag[b] = 0.0;
                v_ang[b] = 0.0;
            }
            islands.push(IslandStatus {
                island,
                buses: ids,
                reference: None,
                converged: false,
                iterations: 0,
                max_mismatch: f64::NAN,
            });
            continue;
        };
        if start.is_none() {
            for &b in members {
                v_ang[b] = 0.0;
            }
        } else {
            let shift = v_ang[reference];
            for &b in members {
                v_ang[b] -= shift;
            }
        }
        let mut solver = IslandSolver {
            case,
            net,
            members,
            reference,
            roles: vec![Role::Pq; n],
            p_sched: vec![0.0; n],
            q_sched: vec![0.0; n],
            switches: vec![0; n],
            gen_bus: &gen_bus,
            load_q: &load_q,
            island,
        };
        for &b in members {
            solver.roles[b] = if b == reference {
                Role::Reference
            } else if gen_bus[b].is_some() {
                Role::Pv
            } else {
                Role::Pq
            };
            solver.p_sched[b] = (sched_gen_p[b] - load_p[b]) / base;
            solver.q_sched[b] = (fixed_gen_q[b] - load_q[b]) / base;
        }
        let status = solver.run(opts, &mut v_mag, &mut v_ang, &mut trace, &mut var_events, ids);
        islands.push(status);
    }

    finish(case, net, v_mag, v_ang, islands, trace, var_events, &gen_bus)
}

struct IslandSolver<'a> {
    case: &'a GridCase,
    net: &'a Network,
    members: &'a [usize],
    reference: usize,
    roles: Vec<Role>,
    p_sched: Vec<f64>,
    q_sched: Vec<f64>,
    switches: Vec<u32>,
    gen_bus: &'a [Option<GenBusData>],
    load_q: &'a [f64],
    island: usize,
}

impl IslandSolver<'_> {
    fn p_buses(&self) -> Vec<usize> {
        self.members.iter().copied().filter(|&b| b != self.reference).collect()
    }

    fn q_buses(&self) -> Vec<usize> {
        self.members
            .iter()
            .copied()
            .filter(|&b| matches!(self.roles[b], Role::Pq | Role::Clamped))
            .collect()
    }

    fn mismatch(&self, s: &[Complex64], p_buses: &[usize], q_buses: &[usize]) -> (Vec<f64>, Vec<f64>) {
        let dp = p_buses.iter().map(|&b| self.p_sched[b] - s[b].re).collect();
        let dq = q_buses.iter().map(|&b| self.q_sched[b] - s[b].im).collect();
        (dp, dq)
    }

    fn run(
        &mut self,
        opts: &PowerFlowOptions,
        v_mag: &mut [f64],
        v_ang: &mut [f64],
        trace: &mut Vec<IterationRecord>,
        events: &mut Vec<VarSwitchEvent>,
        ids: Vec<u32>,
    ) -> IslandStatus {
        let p_buses = self.p_buses();
        let b_prime = self.net.mats.b_prime.submatrix(&p_buses, &p_buses).lu();
        let mut q_buses = self.q_buses();
        let mut b_dprime = self.net.mats.b_double_prime.submatrix(&q_buses, &q_buses).lu();

        let max_abs = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let mut iterations = 0;
        let mut converged = false;
        let mut last;

        loop {
            let s = bus_injections(self.net, v_mag, v_ang);
            let (dp, dq) = self.mismatch(&s, &p_buses, &q_buses);
            let (mp, mq) = (max_abs(&dp), max_abs(&dq));
            trace.push(IterationRecord { island: self.island, iteration: iterations, max_dp: mp, max_dq: mq });
            last = mp.max(mq);
            if !last.is_finite() || last > DIVERGENCE_MISMATCH {
                break;
            }
            if last <= opts.tol {
                if opts.var_limits && self.check_var_limits(&s, v_mag, iterations, events) {
                    q_buses = self.q_buses();
                    b_dprime = self.net.mats.b_double_prime.submatrix(&q_buses, &q_buses).lu();
                    continue;
                }
                converged = true;
                break;
            }
            if iterations >= opts.max_iter {
                break;
            }
            iterations += 1;

            // P-θ half-iteration.
            if !p_buses.is_empty() {
                let rhs = DVector::from_iterator(p_buses.len(), p_buses.iter().zip(&dp).map(|(&b, d)| d / v_mag[b]));
                let Some(dtheta) = b_prime.solve(&rhs) else { break };
                for (k, &b) in p_buses.iter().enumerate() {
                    v_ang[b] += dtheta[k];
                }
            }

            // Q-V half-iteration.
            let s = bus_injections(self.net, v_mag, v_ang);
            if !q_buses.is_empty() {
                let (_, dq) = self.mismatch(&s, &p_buses, &q_buses);
                let rhs = DVector::from_iterator(q_buses.len(), q_buses.iter().zip(&dq).map(|(&b, d)| d / v_mag[b]));
                let Some(dv) = b_dprime.solve(&rhs) else { break };
                for (k, &b) in q_buses.iter().enumerate() {
                    v_mag[b] += dv[k];
                }
            }

            if opts.var_limits && last < VAR_CHECK_MISMATCH {
                let s = bus_injections(self.net, v_mag, v_ang);
                if self.check_var_limits(&s, v_mag, iterations, events) {
                    q_buses = self.q_buses();
                    b_dprime = self.net.mats.b_double_prime.submatrix(&q_buses, &q_buses).lu();
                }
            }
        }

        IslandStatus {
            island: self.island,
            buses: ids,
            reference: Some(self.case.buses[self.reference].id),
            converged,
            iterations,
            max_mismatch: last,
        }
    }

    /// Moves PV buses outside their reactive range to PQ at the violated
    /// limit, and returns clamped buses to PV once their voltage error shows
    /// relief. Returns whether any bus changed role.
    fn check_var_limits(
        &mut self,
        s: &[Complex64],
        v_mag: &mut [f64],
        iteration: usize,
        events: &mut Vec<VarSwitchEvent>,
    ) -> bool {
        let base = self.case.base_mva;
        let mut changed = false;
        for &b in self.members {
            let Some(g) = &self.gen_bus[b] else { continue };
            if self.switches[b] >= MAX_VAR_SWITCHES {
                continue;
            }
            let id = self.case.buses[b].id;
            match self.roles[b] {
                Role::Pv => {
                    let q_gen = s[b].im * base + self.load_q[b];
                    let limit = if q_gen > g.q_max {
                        Some((g.q_max, "pv_to_pq_max"))
                    } else if q_gen < g.q_min {
                        Some((g.q_min, "pv_to_pq_min"))
                    } else {
                        None
                    };
                    if let Some((q, kind)) = limit {
                        self.roles[b] = Role::Clamped;
                        self.q_sched[b] = (q - self.load_q[b]) / base;
                        self.switches[b] += 1;
                        events.push(VarSwitchEvent { iteration, bus: id, kind: kind.into(), q_mvar: q });
                        changed = true;
                    }
                }
                Role::Clamped => {
                    let q_gen = self.q_sched[b] * base + self.load_q[b];
                    let at_max = (q_gen - g.q_max).abs() <= (q_gen - g.q_min).abs();
                    let relief = if at_max { v_mag[b] > g.v_set } else { v_mag[b] < g.v_set };
                    if relief {
                        self.roles[b] = Role::Pv;
                        v_mag[b] = g.v_set;
                        self.switches[b] += 1;
                        events.push(VarSwitchEvent { iteration, bus: id, kind: "pq_to_pv".into(), q_mvar: q_gen });
                        changed = true;
                    }
                }
                _ => {}
            }
        }
        changed
    }
}

#[allow(clippy::too_many_arguments)]
fn finish(
    case: &GridCase,
    net: &Network,
    v_mag: Vec<f64>,
    v_ang: Vec<f64>,
    islands: Vec<IslandStatus>,
    trace: Vec<IterationRecord>,
    var_events: Vec<VarSwitchEvent>,
    gen_bus: &[Option<GenBusData>],
) -> PowerFlowSolution {
    let base = case.base_mva;
    let s = bus_injections(net, &v_mag, &v_ang);
    let (load_p, load_q) = case.bus_load();
    let live = |b: usize| net.mats.references[net.idx.island_of(b)].is_some();

    let mut gen_p = vec![0.0; case.generators.len()];
    let mut gen_q = vec![0.0; case.generators.len()];
    // Share bus totals among units: P differences on reference buses by
    // p_max, Q on regulating buses by reactive range.
    let mut by_bus: Vec<Vec<usize>> = vec![Vec::new(); case.n_buses()];
    for (k, g) in case.generators.iter().enumerate() {
        if g.status {
            by_bus[case.generator_bus(k)].push(k);
        }
    }
    for (b, units) in by_bus.iter().enumerate() {
        if units.is_empty() || !live(b) {
            continue;
        }
        let p_total = s[b].re * base + load_p[b];
        let q_total = s[b].im * base + load_q[b];
        let sched: f64 = units.iter().map(|&k| case.generators[k].p).sum();
        let is_ref = net.reference_of(b) == Some(b);
        let pmax_sum: f64 = units.iter().map(|&k| case.generators[k].p_max).sum();
        for &k in units {
            let g = &case.generators[k];
            gen_p[k] = if is_ref {
                let w = if pmax_sum > 0.0 { g.p_max / pmax_sum } else { 1.0 / units.len() as f64 };
                g.p + (p_total - sched) * w
            } else {
                g.p
            };
        }
        if gen_bus[b].is_some() {
            let range_sum: f64 = units.iter().map(|&k| case.generators[k].q_max - case.generators[k].q_min).sum();
            for &k in units {
                let g = &case.generators[k];
                let w = if range_sum > 0.0 { (g.q_max - g.q_min) / range_sum } else { 1.0 / units.len() as f64 };
                gen_q[k] = q_total * w;
            }
        } else {
            for &k in units {
                gen_q[k] = case.generators[k].q;
            }
        }
    }

    let branches = branch_flows(case, net, &v_mag, &v_ang);
    let total_gen: f64 = gen_p.iter().sum();
    let served_load: f64 = (0..case.n_buses()).filter(|&b| live(b)).map(|b| load_p[b]).sum();

    PowerFlowSolution {
        v_mag,
        v_ang,
        branches,
        gen_p,
        gen_q,
        islands,
        total_loss_mw: total_gen - served_load,
        trace,
        var_events,
        slack_shares: Vec::new(),
    }
}

/// Max |ΔP|, |ΔQ| (pu) of a solution recomputed from scratch, using the
/// final generator outputs. Used as a convergence certificate.
pub fn recompute_mismatch(case: &GridCase, net: &Network, sol: &PowerFlowSolution) -> f64 {
    let base = case.base_mva;
    let s = bus_injections(net, &sol.v_mag, &sol.v_ang);
    let (load_p, load_q) = case.bus_load();
    let mut gp = vec![0.0; case.n_buses()];
    let mut gq = vec![0.0; case.n_buses()];
    for (k, g) in case.generators.iter().enumerate() {
        if g.status {
            let b = case.generator_bus(k);
            gp[b] += sol.gen_p[k];
            gq[b] += sol.gen_q[k];
        }
    }
    let mut worst = 0.0f64;
    for b in 0..case.n_buses() {
        if net.mats.references[net.idx.island_of(b)].is_none() {
            continue;
        }
        worst = worst.max(((gp[b] - load_p[b]) / base - s[b].re).abs());
        worst = worst.max(((gq[b] - load_q[b]) / base - s[b].im).abs());
    }
    worst
}
