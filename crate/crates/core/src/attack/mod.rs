//! Load-redistribution attacks against state estimation: forging
//! unobservable telemetry from a state perturbation, designing the
//! perturbation against a modeled dispatch response, and measuring what
//! the operator sees against what physically happens.

pub(crate) mod consequence;
mod design;
#[cfg(test)]
mod tests;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::AttackError;
use crate::estimation::{h_eval, Measurement, MeasurementKind, MeasurementSet};
use crate::grid::{GridCase, Network};
use crate::powerflow::BusState;

pub use consequence::{evaluate_consequence, AttackOutcome, FlowPair, ViolationSummary};
pub use design::{
    design_attack, feasible_directions, select_support, AttackModel, DesignOptions, DesignResult, Snapshot,
    TargetReading,
};

/// Implied load changes below this many MW count as zero.
pub const LOAD_TOL_MW: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttackObjective {
    #[default]
    MaxBaseFlow,
    MaxPostcontingencyFlow,
    MaxCost,
}

/// What the attacker assumes the operator runs after state estimation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ResponseModel {
    #[default]
    Dcopf,
    Sced,
}

fn default_shift() -> f64 {
    0.10
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackScenario {
    pub target_branch: u32,
    #[serde(default)]
    pub objective: AttackObjective,
    /// Largest fractional change of any single load.
    #[serde(default = "default_shift")]
    pub load_shift_limit: f64,
    /// Measurements the attacker can overwrite; unlimited when absent.
    #[serde(default)]
    pub measurement_budget: Option<usize>,
    #[serde(default)]
    pub assumed_response: ResponseModel,
    #[serde(default)]
    pub seed: u64,
    /// Linear cost on the attack vector as (bus id, cost per radian).
    #[serde(default)]
    pub attack_cost: Vec<(u32, f64)>,
    /// Under the SCED response, discard candidates whose re-dispatch leaves
    /// violations in the operator's own contingency screen.
    #[serde(default = "default_true")]
    pub require_cyber_secure: bool,
}

fn default_true() -> bool {
    true
}

impl AttackScenario {
    pub fn new(target_branch: u32, objective: AttackObjective, assumed_response: ResponseModel) -> Self {
        AttackScenario {
            target_branch,
            objective,
            load_shift_limit: default_shift(),
            measurement_budget: None,
            assumed_response,
            seed: 0,
            attack_cost: Vec::new(),
            require_cyber_secure: true,
        }
    }

    pub fn validate(&self, case: &GridCase) -> Result<(), AttackError> {
        let k = case.branch_index(self.target_branch).ok_or(AttackError::UnknownTarget(self.target_branch))?;
        if !case.branches[k].status {
            return Err(AttackError::InvalidScenario(format!("target branch {} is out of service", self.target_branch)));
        }
        if !(0.0..1.0).contains(&self.load_shift_limit) {
            return Err(AttackError::InvalidScenario(format!(
                "load_shift_limit {} outside [0, 1)",
                self.load_shift_limit
            )));
        }
        for &(bus, _) in &self.attack_cost {
            if case.bus_index(bus).is_none() {
                return Err(AttackError::InvalidScenario(format!("attack_cost names unknown bus {bus}")));
            }
        }
        Ok(())
    }

    /// c₁ᵀu with c₁ from `attack_cost`.
    pub fn attack_cost_of(&self, case: &GridCase, u: &[f64]) -> f64 {
        self.attack_cost.iter().map(|&(bus, c)| c * case.bus_index(bus).map_or(0.0, |b| u[b])).sum()
    }
}

/// Per-bus angle perturbation with the load redistribution it implies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateAttack {
    /// Radians per bus position.
    pub u: Vec<f64>,
    /// Bus ids with a nonzero entry.
    pub support: Vec<u32>,
    /// MW change per bus seen by the operator, −(B′u)·base.
    pub bus_load_change: Vec<f64>,
    /// MW change per load, bus change split by nominal share.
    pub load_change: Vec<f64>,
    pub net_change: f64,
}

impl StateAttack {
    pub fn zero(case: &GridCase) -> StateAttack {
        StateAttack {
            u: vec![0.0; case.n_buses()],
            support: Vec::new(),
            bus_load_change: vec![0.0; case.n_buses()],
            load_change: vec![0.0; case.loads.len()],
            net_change: 0.0,
        }
    }

    /// Validates `u` and derives the implied load changes.
    pub fn new(case: &GridCase, net: &Network, u: Vec<f64>) -> Result<StateAttack, AttackError> {
        let n = case.n_buses();
        if u.len() != n {
            return Err(AttackError::InvalidScenario(format!("u has {} entries, case has {n} buses", u.len())));
        }
        for (b, &v) in u.iter().enumerate() {
            if v == 0.0 {
                continue;
            }
            if !v.is_finite() {
                return Err(AttackError::InvalidScenario(format!("u at bus {} is not finite", case.buses[b].id)));
            }
            match net.reference_of(b) {
                Some(r) if r == b => return Err(AttackError::TouchesReference(case.buses[b].id)),
                Some(_) => {}
                None => {
                    return Err(AttackError::InvalidScenario(format!(
                        "bus {} lies in a de-energized island",
                        case.buses[b].id
                    )))
                }
            }
        }
        let bus_load_change = implied_bus_change(case, net, &u);
        let load_change = split_by_load(case, &bus_load_change);
        let net_change: f64 = load_change.iter().sum();
        if net_change.abs() > LOAD_TOL_MW {
            return Err(AttackError::NetLoadChange(net_change));
        }
        let mut has_load = vec![false; n];
        for l in 0..case.loads.len() {
            has_load[case.load_bus(l)] = true;
        }
        for b in 0..n {
            if !has_load[b] && bus_load_change[b].abs() > LOAD_TOL_MW {
                return Err(AttackError::NonLoadInjection(case.buses[b].id));
            }
        }
        let support = (0..n).filter(|&b| u[b] != 0.0).map(|b| case.buses[b].id).collect();
        Ok(StateAttack { u, support, bus_load_change, load_change, net_change })
    }

    /// Attack whose implied per-bus load change is `bus_delta_mw`; each
    /// island's changes must sum to zero.
    pub fn from_bus_load_change(
        case: &GridCase,
        net: &Network,
        bus_delta_mw: &[f64],
    ) -> Result<StateAttack, AttackError> {
        let n = case.n_buses();
        let mut u = vec![0.0; n];
        let b_prime = net.mats.b_prime.to_dense();
        for (island, members) in net.idx.islands().iter().enumerate() {
            let Some(r) = net.mats.references[island] else {
                if members.iter().any(|&b| bus_delta_mw[b].abs() > LOAD_TOL_MW) {
                    return Err(AttackError::InvalidScenario("load change in a de-energized island".into()));
                }
                continue;
            };
            let sum: f64 = members.iter().map(|&b| bus_delta_mw[b]).sum();
            if sum.abs() > LOAD_TOL_MW {
                return Err(AttackError::NetLoadChange(sum));
            }
            let rest: Vec<usize> = members.iter().copied().filter(|&b| b != r).collect();
            if rest.is_empty() {
                continue;
            }
            let m = DMatrix::from_fn(rest.len(), rest.len(), |i, j| b_prime[(rest[i], rest[j])]);
            // Load up is injection down: B′u = −Δ/base.
            let rhs = DVector::from_iterator(rest.len(), rest.iter().map(|&b| -bus_delta_mw[b] / case.base_mva));
            let theta = m.lu().solve(&rhs).ok_or_else(|| AttackError::InvalidScenario("singular B′ block".into()))?;
            for (i, &b) in rest.iter().enumerate() {
                u[b] = theta[i];
            }
        }
        StateAttack::new(case, net, u)
    }

    /// Same as [`from_bus_load_change`](Self::from_bus_load_change) with changes given per load.
    pub fn from_load_change(case: &GridCase, net: &Network, load_delta_mw: &[f64]) -> Result<StateAttack, AttackError> {
        let mut bus = vec![0.0; case.n_buses()];
        for (l, d) in load_delta_mw.iter().enumerate() {
            bus[case.load_bus(l)] += d;
        }
        StateAttack::from_bus_load_change(case, net, &bus)
    }

    pub fn is_zero(&self) -> bool {
        self.u.iter().all(|&v| v == 0.0)
    }

    /// Largest |ΔP_l| / P_l over loads with positive nominal MW.
    pub fn max_shift_fraction(&self, case: &GridCase) -> f64 {
        case.loads
            .iter()
            .zip(&self.load_change)
            .map(|(l, d)| if l.p.abs() > 1e-12 { d.abs() / l.p.abs() } else if d.abs() > LOAD_TOL_MW { f64::INFINITY } else { 0.0 })
            .fold(0.0, f64::max)
    }

    /// Loads as the operator would estimate them.
    pub fn cyber_loads(&self, case: &GridCase) -> Vec<f64> {
        case.loads.iter().zip(&self.load_change).map(|(l, d)| l.p + d).collect()
    }

    pub fn shifted_state(&self, x: &BusState) -> BusState {
        BusState { v_mag: x.v_mag.clone(), v_ang: x.v_ang.iter().zip(&self.u).map(|(a, b)| a + b).collect() }
    }
}

/// −(B′u)·base per bus.
pub fn implied_bus_change(case: &GridCase, net: &Network, u: &[f64]) -> Vec<f64> {
    (0..case.n_buses())
        .map(|i| -net.mats.b_prime.row(i).iter().map(|&(j, v)| v * u[j]).sum::<f64>() * case.base_mva)
        .collect()
}

/// Splits bus changes over the bus's loads by nominal MW (equally when the
/// nominal total is zero).
pub fn split_by_load(case: &GridCase, bus_change: &[f64]) -> Vec<f64> {
    let (nominal, _) = case.bus_load();
    let mut count = vec![0usize; case.n_buses()];
    for l in 0..case.loads.len() {
        count[case.load_bus(l)] += 1;
    }
    case.loads
        .iter()
        .enumerate()
        .map(|(l, ld)| {
            let b = case.load_bus(l);
            let share = if nominal[b].abs() > 1e-12 { ld.p / nominal[b] } else { 1.0 / count[b] as f64 };
            bus_change[b] * share
        })
        .collect()
}

/// Whether a measurement's model value depends on the angle of any bus
/// flagged in `touched`. Voltage magnitudes never do.
pub fn depends_on(case: &GridCase, net: &Network, kind: MeasurementKind, element: u32, touched: &[bool]) -> bool {
    if kind.is_branch() {
        let Some(k) = case.branch_index(element) else { return false };
        if !net.idx.branch_in_service(k) {
            return false;
        }
        let (f, t) = case.terminals(k);
        return touched[f] || touched[t];
    }
    if kind == MeasurementKind::BusVMag {
        return false;
    }
    let Some(b) = case.bus_index(element) else { return false };
    touched[b] || net.idx.adjacency(b).iter().any(|l| touched[l.far])
}

/// Number of `entries` whose value depends on the angles of `buses`.
pub fn footprint_size(case: &GridCase, net: &Network, entries: &[(MeasurementKind, u32)], buses: &[usize]) -> usize {
    let mut touched = vec![false; case.n_buses()];
    for &b in buses {
        touched[b] = true;
    }
    entries.iter().filter(|&&(kind, el)| depends_on(case, net, kind, el, &touched)).count()
}

/// Ids of measurements in `set` that the attack rewrites.
pub fn footprint(case: &GridCase, net: &Network, set: &MeasurementSet, attack: &StateAttack) -> Vec<u32> {
    let touched: Vec<bool> = attack.u.iter().map(|&v| v != 0.0).collect();
    set.measurements.iter().filter(|m| depends_on(case, net, m.kind, m.element, &touched)).map(|m| m.id).collect()
}

/// z̄ = h(x+u) + e with e = z − h(x) kept from the original snapshot.
/// Measurements outside the footprint are copied unchanged.
pub fn forge_measurements(
    case: &GridCase,
    net: &Network,
    z: &MeasurementSet,
    x: &BusState,
    attack: &StateAttack,
    budget: Option<usize>,
) -> Result<MeasurementSet, AttackError> {
    let checked = StateAttack::new(case, net, attack.u.clone())?;
    let ids = footprint(case, net, z, &checked);
    if let Some(budget) = budget {
        if ids.len() > budget {
            return Err(AttackError::OverBudget { footprint: ids.len(), budget });
        }
    }
    let mut out = z.clone();
    if ids.is_empty() {
        return Ok(out);
    }
    let rows: Vec<Measurement> = z.measurements.iter().filter(|m| ids.contains(&m.id)).cloned().collect();
    let h_true = h_eval(case, net, &rows, x);
    let h_forged = h_eval(case, net, &rows, &checked.shifted_state(x));
    for ((m, ht), hf) in rows.iter().zip(h_true).zip(h_forged) {
        let pos = out.position(m.id).expect("footprint ids come from the set");
        out.measurements[pos].value = hf + (m.value - ht);
    }
    Ok(out)
}
