use serde::{Deserialize, Serialize};

use super::build::{build_problem, ColumnRole, RowRole, ScedProblem};
use super::ScedOptions;
use crate::error::ScedError;
use crate::grid::{GridCase, Network};
use crate::lp::{solve, SimplexOptions};
use crate::powerflow::{solve_from, BusState, PowerFlowOptions, PowerFlowSolution};
use crate::rtca::RtcaReport;

/// Slack activity below this many MW counts as zero.
const SLACK_EPS: f64 = 1e-6;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveBreakdown {
    pub energy: f64,
    pub reserve: f64,
    pub load_shed: f64,
    pub gen_min_slack: f64,
    pub overflow: f64,
    pub reserve_shortfall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BindingConstraint {
    pub row: usize,
    pub role: RowRole,
    /// $/MWh per MW of the active bound.
    pub shadow_price: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowComparison {
    pub branch: u32,
    pub outage: Option<u32>,
    pub predicted_mw: f64,
    pub limit_mw: f64,
    /// Post-dispatch AC flow (from end); base case only.
    pub realized_mw: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DispatchPlan {
    pub p_set: Vec<f64>,
    pub reserve: Vec<f64>,
    pub p_prev: Vec<f64>,
    pub objective: f64,
    pub dual_objective: f64,
    pub breakdown: ObjectiveBreakdown,
    pub shed_base: Vec<f64>,
    pub shed_contingency: Vec<(u32, Vec<f64>)>,
    pub gen_min_slack: Vec<f64>,
    pub overflow_mw: f64,
    pub reserve_shortfall: f64,
    pub binding: Vec<BindingConstraint>,
    pub flows: Vec<FlowComparison>,
    pub interfaces: Vec<FlowComparison>,
    pub derate_floored: Vec<u32>,
    pub virtual_loads: Vec<f64>,
    pub total_loss_mw: f64,
    pub contingencies: Vec<u32>,
    /// All slack variables zero.
    pub clean: bool,
    /// Load could not be fully served.
    pub load_shed: bool,
    /// Committed minimum output exceeds what the system can absorb.
    pub overcommitted: bool,
    /// The post-dispatch AC power flow failed.
    pub ac_infeasible: bool,
    pub n_rows: usize,
    pub n_cols: usize,
    pub lp_iterations: usize,
    pub notes: Vec<String>,
}

impl DispatchPlan {
    /// Case with set-points applied and base-case shedding removed from loads.
    pub fn applied_case(&self, case: &GridCase) -> GridCase {
        let loads: Vec<f64> = case.loads.iter().zip(&self.shed_base).map(|(l, s)| l.p - s).collect();
        case.with_dispatch(&self.p_set).with_load_p(&loads)
    }

    pub fn predicted_base_flow(&self, branch: u32) -> Option<f64> {
        self.flows.iter().find(|f| f.branch == branch && f.outage.is_none()).map(|f| f.predicted_mw)
    }
}

pub fn solve_problem(case: &GridCase, prob: &ScedProblem) -> Result<DispatchPlan, ScedError> {
    let sol = solve(&prob.lp, &SimplexOptions::default())?;
    let x = &sol.x;
    let p_set = prob.gen_output(case, x);
    let pick = |c: Option<usize>| c.map_or(0.0, |j| x[j]);
    let reserve: Vec<f64> = prob.reserve.iter().map(|&c| pick(c)).collect();
    let gen_min_slack: Vec<f64> = prob.gen_min_slack.iter().map(|&c| pick(c)).collect();
    let shed_base: Vec<f64> = prob.shed_base.iter().map(|&c| pick(c)).collect();
    let shed_contingency: Vec<(u32, Vec<f64>)> =
        prob.shed_contingency.iter().map(|(o, cols)| (*o, cols.iter().map(|&c| pick(c)).collect())).collect();

    let mut breakdown = ObjectiveBreakdown::default();
    let mut overflow_mw = 0.0;
    let mut reserve_shortfall = 0.0;
    for (j, role) in prob.columns.iter().enumerate() {
        let cost = prob.lp.cost[j] * x[j];
        match role {
            ColumnRole::Segment { .. } => breakdown.energy += cost,
            ColumnRole::Reserve { .. } => breakdown.reserve += cost,
            ColumnRole::ShedBase { .. } | ColumnRole::ShedContingency { .. } => breakdown.load_shed += cost,
            ColumnRole::GenMinSlack { .. } => breakdown.gen_min_slack += cost,
            ColumnRole::OverflowUp { .. } | ColumnRole::OverflowDown { .. } => {
                breakdown.overflow += cost;
                overflow_mw += x[j];
            }
            ColumnRole::ReserveShortfall => {
                breakdown.reserve_shortfall += cost;
                reserve_shortfall += x[j];
            }
            ColumnRole::ReferenceBackdown { .. } => {}
        }
    }

    let binding = sol
        .row_duals
        .iter()
        .enumerate()
        .filter(|(_, y)| y.abs() > 1e-9)
        .map(|(row, &y)| BindingConstraint { row, role: prob.rows[row].clone(), shadow_price: y })
        .collect();
    let flows = prob
        .flows
        .iter()
        .map(|f| FlowComparison {
            branch: f.branch,
            outage: f.outage,
            predicted_mw: f.eval(x),
            limit_mw: f.limit_mw,
            realized_mw: None,
        })
        .collect();
    let interfaces = prob
        .interfaces
        .iter()
        .map(|f| FlowComparison {
            branch: f.branch,
            outage: None,
            predicted_mw: f.eval(x),
            limit_mw: f.limit_mw,
            realized_mw: None,
        })
        .collect();
    let mut derate_floored: Vec<u32> = prob.flows.iter().filter(|f| f.derate_floored).map(|f| f.branch).collect();
    derate_floored.sort_unstable();
    derate_floored.dedup();

    let shed_total: f64 =
        shed_base.iter().sum::<f64>() + shed_contingency.iter().flat_map(|(_, v)| v.iter()).sum::<f64>();
    let load_shed = shed_total > SLACK_EPS;
    let overcommitted = gen_min_slack.iter().sum::<f64>() > SLACK_EPS;
    let clean = !load_shed && !overcommitted && overflow_mw <= SLACK_EPS && reserve_shortfall <= SLACK_EPS;

    Ok(DispatchPlan {
        p_set,
        reserve,
        p_prev: prob.p_prev.clone(),
        objective: sol.objective,
        dual_objective: sol.dual_objective,
        breakdown,
        shed_base,
        shed_contingency,
        gen_min_slack,
        overflow_mw,
        reserve_shortfall,
        binding,
        flows,
        interfaces,
        derate_floored,
        virtual_loads: prob.virtual_loads.clone(),
        total_loss_mw: prob.total_loss_mw,
        contingencies: prob.contingencies.clone(),
        clean,
        load_shed,
        overcommitted,
        ac_infeasible: false,
        n_rows: prob.lp.n_rows(),
        n_cols: prob.lp.n_cols(),
        lp_iterations: sol.iterations,
        notes: prob.notes.clone(),
    })
}

/// Build, solve, and verify the plan with an AC power flow at the new
/// set-points. Returns the plan and the verification solution.
pub fn dispatch_pipeline(
    case: &GridCase,
    net: &Network,
    base: &PowerFlowSolution,
    rtca: &RtcaReport,
    opts: &ScedOptions,
    pf: &PowerFlowOptions,
) -> Result<(DispatchPlan, PowerFlowSolution), ScedError> {
    if !base.converged() {
        return Err(ScedError::BaseNotConverged);
    }
    let prob = build_problem(case, net, base, rtca, opts)?;
    let mut plan = solve_problem(case, &prob)?;
    let applied = plan.applied_case(case);
    let warm = BusState { v_mag: base.v_mag.clone(), v_ang: base.v_ang.clone() };
    let realized = solve_from(&applied, net, pf, Some(&warm));
    plan.ac_infeasible = !realized.converged();
    if !plan.ac_infeasible {
        for f in plan.flows.iter_mut().filter(|f| f.outage.is_none()) {
            let k = case.branch_index(f.branch).expect("plan references case branches");
            f.realized_mw = Some(realized.branches[k].p_from);
        }
    }
    Ok((plan, realized))
}
