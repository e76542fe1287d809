//! Security-constrained economic dispatch.
//!
//! A DC LP over generator cost segments, reserves and penalized slacks,
//! with three AC corrections: branch limits derated by reactive flow,
//! losses placed as virtual loads, and flows anchored on the AC base case
//! so that only the re-dispatch is linearized.

mod build;
mod plan;

use serde::{Deserialize, Serialize};

use crate::grid::GridCase;
use crate::powerflow::PowerFlowSolution;

pub use build::{build_problem, ColumnRole, FlowExpr, RowRole, ScedProblem};
pub use plan::{dispatch_pipeline, solve_problem, BindingConstraint, DispatchPlan, FlowComparison, ObjectiveBreakdown};

/// Fraction of the rating kept when reactive flow alone exceeds it.
pub const DERATE_FLOOR: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossOption {
    #[default]
    LoadBuses,
    GenBuses,
    BranchReceiving,
    BranchSending,
    BranchHalfHalf,
}

impl LossOption {
    pub const ALL: [LossOption; 5] = [
        LossOption::LoadBuses,
        LossOption::GenBuses,
        LossOption::BranchReceiving,
        LossOption::BranchSending,
        LossOption::BranchHalfHalf,
    ];
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReserveRequirement {
    None,
    Fixed(f64),
    /// Remaining units' reserve covers the loss of any one unit.
    #[default]
    LargestOnlineUnit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FlowModel {
    /// AC base flows plus PTDF times the change in injections.
    #[default]
    AcAnchored,
    /// Plain PTDF times injections with losses as virtual loads.
    Dc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScedOptions {
    pub loss_option: LossOption,
    pub penalty_load_shed: f64,
    pub penalty_gen_min_slack: f64,
    pub penalty_overflow: f64,
    pub penalty_reserve_shortfall: f64,
    pub reserve_requirement: ReserveRequirement,
    /// Minutes.
    pub dispatch_interval: f64,
    /// Minutes of ramp that count toward spinning reserve.
    pub reserve_ramp_minutes: f64,
    pub enforce_ramp: bool,
    /// Add constraint blocks for critical contingencies.
    pub security: bool,
    pub flow_model: FlowModel,
    /// Derate MW limits by reactive flow.
    pub derate: bool,
    /// Use emergency ratings in base rows instead of normal ratings.
    pub base_uses_emergency: bool,
    /// Fraction of each rating held back from the MW limit.
    pub limit_margin: f64,
}

impl Default for ScedOptions {
    fn default() -> Self {
        ScedOptions {
            loss_option: LossOption::LoadBuses,
            penalty_load_shed: 5000.0,
            penalty_gen_min_slack: 10000.0,
            penalty_overflow: 20000.0,
            penalty_reserve_shortfall: 2000.0,
            reserve_requirement: ReserveRequirement::LargestOnlineUnit,
            dispatch_interval: 5.0,
            reserve_ramp_minutes: 10.0,
            enforce_ramp: true,
            security: true,
            flow_model: FlowModel::AcAnchored,
            derate: true,
            base_uses_emergency: false,
            limit_margin: 0.01,
        }
    }
}

impl ScedOptions {
    /// Plain DC optimal power flow: base-case limits only, no reserve or ramp.
    pub fn dcopf() -> Self {
        ScedOptions {
            reserve_requirement: ReserveRequirement::None,
            enforce_ramp: false,
            security: false,
            flow_model: FlowModel::Dc,
            derate: false,
            limit_margin: 0.0,
            ..Default::default()
        }
    }

    /// Smallest penalty must exceed every marginal generation cost.
    pub fn check_penalties(&self, case: &GridCase) -> bool {
        let max_cost = case.generators.iter().map(|g| g.max_marginal_cost() + g.reserve_cost).fold(0.0, f64::max);
        [self.penalty_load_shed, self.penalty_gen_min_slack, self.penalty_overflow, self.penalty_reserve_shortfall]
            .iter()
            .all(|&p| p > max_cost)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeratedLimit {
    pub limit_mw: f64,
    pub floored: bool,
}

/// Real-power limit left after reactive flow at the worse end:
/// √(S² − max(Q_f², Q_t²)), floored at `DERATE_FLOOR`·S.
pub fn derate_branch(s_max: f64, q_from: f64, q_to: f64) -> DeratedLimit {
    let q = q_from.abs().max(q_to.abs());
    let floor = DERATE_FLOOR * s_max;
    if q >= s_max {
        return DeratedLimit { limit_mw: floor, floored: true };
    }
    let p = (s_max * s_max - q * q).sqrt();
    if p < floor {
        DeratedLimit { limit_mw: floor, floored: true }
    } else {
        DeratedLimit { limit_mw: p, floored: false }
    }
}

fn spread(total: f64, weights: &[f64]) -> Vec<f64> {
    let sum: f64 = weights.iter().sum();
    if sum <= 0.0 {
        return vec![0.0; weights.len()];
    }
    let mut out: Vec<f64> = weights.iter().map(|w| total * w / sum).collect();
    // Put the rounding residue on the largest share so the sum is exact.
    let residue = total - out.iter().sum::<f64>();
    if let Some(k) = (0..out.len()).max_by(|&a, &b| out[a].abs().partial_cmp(&out[b].abs()).unwrap()) {
        out[k] += residue;
    }
    out
}

/// Per-bus virtual loads (MW) summing to the solution's total loss.
///
/// Branch options place each branch's series loss per the rule and then
/// scale to the total, which also covers shunt conductance losses.
pub fn distribute_losses(case: &GridCase, sol: &PowerFlowSolution, option: LossOption) -> Vec<f64> {
    let n = case.n_buses();
    let total = sol.total_loss_mw;
    if total == 0.0 {
        return vec![0.0; n];
    }
    let by_load = || {
        let (p, _) = case.bus_load();
        p.into_iter().map(|v| v.max(0.0)).collect::<Vec<_>>()
    };
    let weights: Vec<f64> = match option {
        LossOption::LoadBuses => by_load(),
        LossOption::GenBuses => {
            let mut w = vec![0.0; n];
            for (k, g) in case.generators.iter().enumerate() {
                if g.status {
                    w[case.generator_bus(k)] += g.p_max;
                }
            }
            w
        }
        LossOption::BranchReceiving | LossOption::BranchSending | LossOption::BranchHalfHalf => {
            let mut w = vec![0.0; n];
            for (k, f) in sol.branches.iter().enumerate() {
                if !case.branches[k].status {
                    continue;
                }
                let loss = f.loss().max(0.0);
                let (from, to) = case.terminals(k);
                let (send, recv) = if f.p_from >= 0.0 { (from, to) } else { (to, from) };
                match option {
                    LossOption::BranchReceiving => w[recv] += loss,
                    LossOption::BranchSending => w[send] += loss,
                    _ => {
                        w[from] += 0.5 * loss;
                        w[to] += 0.5 * loss;
                    }
                }
            }
            if w.iter().sum::<f64>() <= 0.0 {
                by_load()
            } else {
                w
            }
        }
    };
    spread(total, &weights)
}
