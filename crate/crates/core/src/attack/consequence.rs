use serde::{Deserialize, Serialize};

use super::design::worst_post_contingency;
use super::{forge_measurements, AttackModel, AttackScenario, Snapshot, StateAttack, TargetReading};
use crate::estimation::{estimate_with_bdd, estimated_loads, generate_telemetry, MeasurementSet};
use crate::grid::GridCase;
use crate::powerflow::{solve_from, BusState, PowerFlowSolution};
use crate::rtca::{run_rtca, RtcaReport};
use crate::sced::dispatch_pipeline;

/// One branch loading as the operator sees it and as it physically is.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowPair {
    pub outage: Option<u32>,
    pub branch: u32,
    /// Percent of the normal rating in the base case, of the emergency
    /// rating after an outage.
    pub cyber_percent: f64,
    pub physical_percent: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ViolationSummary {
    pub cyber_base_violations: usize,
    pub cyber_post_violations: usize,
    pub physical_base_violations: usize,
    pub physical_post_violations: usize,
    pub worst_cyber_post_percent: Option<f64>,
    pub worst_physical_post_percent: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackOutcome {
    pub attack: StateAttack,
    pub falsified: Option<MeasurementSet>,
    pub bdd_pass: Option<bool>,
    pub eliminated: Vec<u32>,
    /// Loads the operator's estimator reported.
    pub cyber_loads: Vec<f64>,
    /// Attacker's own prediction under its assumed response.
    pub predicted: Option<TargetReading>,
    /// Physical base-case loading of the target after re-dispatch.
    pub realized: Option<TargetReading>,
    /// Worst physical post-contingency loading of the target.
    pub realized_post: Option<TargetReading>,
    pub p_set: Vec<f64>,
    pub plan_clean: Option<bool>,
    /// Contingency screen of the operator's view after re-dispatch.
    pub cyber_rtca: Option<RtcaReport>,
    /// Contingency screen of the true system after re-dispatch.
    pub physical_rtca: Option<RtcaReport>,
    pub pairs: Vec<FlowPair>,
    pub summary: ViolationSummary,
    /// Stage failures, in pipeline order.
    pub errors: Vec<String>,
}

pub(crate) fn pairs(case: &GridCase, cyber: &RtcaReport, physical: &RtcaReport) -> Vec<FlowPair> {
    let mut out = Vec::new();
    for (k, br) in case.branches.iter().enumerate() {
        if br.status {
            out.push(FlowPair {
                outage: None,
                branch: br.id,
                cyber_percent: 100.0 * cyber.base_flows[k].mva() / br.s_max,
                physical_percent: 100.0 * physical.base_flows[k].mva() / br.s_max,
            });
        }
    }
    for (c, p) in cyber.results.iter().zip(&physical.results) {
        if !c.converged || !p.converged {
            continue;
        }
        for (k, br) in case.branches.iter().enumerate() {
            if br.status && br.id != c.outage {
                out.push(FlowPair {
                    outage: Some(c.outage),
                    branch: br.id,
                    cyber_percent: 100.0 * c.flows[k].mva() / br.s_max_emergency,
                    physical_percent: 100.0 * p.flows[k].mva() / br.s_max_emergency,
                });
            }
        }
    }
    out
}

pub(crate) fn worst(r: &RtcaReport) -> Option<f64> {
    r.results.iter().filter_map(|c| c.worst_percent).fold(None, |a, v| Some(a.map_or(v, |a: f64| a.max(v))))
}

/// Runs the operator's loop on forged telemetry (estimate, screen,
/// dispatch), applies the dispatch to the true system, and screens both
/// the operator's view and the physical system afterwards. A pure
/// function of the snapshot, the attack and `seed`.
pub fn evaluate_consequence(snap: &Snapshot, attack: &StateAttack, scenario: &AttackScenario, seed: u64) -> AttackOutcome {
    let case = &snap.case;
    let net = &snap.net;
    let cfg = &snap.config;
    let mut out = AttackOutcome {
        attack: attack.clone(),
        falsified: None,
        bdd_pass: None,
        eliminated: Vec::new(),
        cyber_loads: Vec::new(),
        predicted: None,
        realized: None,
        realized_post: None,
        p_set: Vec::new(),
        plan_clean: None,
        cyber_rtca: None,
        physical_rtca: None,
        pairs: Vec::new(),
        summary: ViolationSummary::default(),
        errors: Vec::new(),
    };
    match AttackModel::new(snap, scenario).map_err(Into::into).and_then(|m| m.respond(attack)) {
        Ok(r) => out.predicted = Some(r.reading),
        Err(e) => out.errors.push(format!("attacker model: {e}")),
    }

    let x = snap.state();
    let z = generate_telemetry(case, net, &x, &snap.plan, &cfg.noise, seed, 0);
    let forged = match forge_measurements(case, net, &z, &x, attack, scenario.measurement_budget) {
        Ok(f) => f,
        Err(e) => {
            out.errors.push(format!("forge: {e}"));
            return out;
        }
    };
    out.falsified = Some(forged.clone());
    let se = match estimate_with_bdd(case, net, &forged, &cfg.se) {
        Ok(se) => se,
        Err(e) => {
            out.errors.push(format!("state estimation: {e}"));
            return out;
        }
    };
    out.bdd_pass = Some(se.eliminated.is_empty() && se.bdd.pass);
    out.eliminated = se.eliminated.clone();
    out.cyber_loads = estimated_loads(case, net, &se.estimate, &snap.base.gen_p);

    let cyber = case.with_load_p(&out.cyber_loads);
    let est_state = se.estimate.state();
    let cyber_pf = solve_from(&cyber, net, &cfg.pf, Some(&est_state));
    if !cyber_pf.converged() {
        out.errors.push("operator power flow did not converge".into());
        return out;
    }
    let cyber_rtca = run_rtca(&cyber, net, &cyber_pf, &cfg.rtca);
    let plan = match dispatch_pipeline(&cyber, net, &cyber_pf, &cyber_rtca, &cfg.sced, &cfg.pf) {
        Ok((plan, _)) => plan,
        Err(e) => {
            out.errors.push(format!("dispatch: {e}"));
            return out;
        }
    };
    out.p_set = plan.p_set.clone();
    out.plan_clean = Some(plan.clean);

    let screen = |c: &GridCase, warm: &BusState| -> Option<(PowerFlowSolution, RtcaReport)> {
        let pf = solve_from(c, net, &cfg.pf, Some(warm));
        pf.converged().then(|| {
            let r = run_rtca(c, net, &pf, &cfg.rtca);
            (pf, r)
        })
    };
    let cyber_after = screen(&plan.applied_case(&cyber), &BusState { v_mag: cyber_pf.v_mag.clone(), v_ang: cyber_pf.v_ang.clone() });
    let physical_after = screen(&plan.applied_case(case), &x);
    let (Some((_, cyber_rtca)), Some((phys_pf, phys_rtca))) = (cyber_after, physical_after) else {
        out.errors.push("post-dispatch power flow did not converge".into());
        return out;
    };

    let t = case.branch_index(scenario.target_branch);
    if let Some(t) = t {
        let br = &case.branches[t];
        out.realized = Some(TargetReading {
            branch: br.id,
            outage: None,
            flow: phys_pf.branches[t].mva(),
            rating: br.s_max,
            percent: 100.0 * phys_pf.branches[t].mva() / br.s_max,
        });
        out.realized_post = worst_post_contingency(case, &phys_rtca, t);
    }
    out.pairs = pairs(case, &cyber_rtca, &phys_rtca);
    out.summary = ViolationSummary {
        cyber_base_violations: cyber_rtca.base_violations.len(),
        cyber_post_violations: cyber_rtca.n_violations(),
        physical_base_violations: phys_rtca.base_violations.len(),
        physical_post_violations: phys_rtca.n_violations(),
        worst_cyber_post_percent: worst(&cyber_rtca),
        worst_physical_post_percent: worst(&phys_rtca),
    };
    out.cyber_rtca = Some(cyber_rtca);
    out.physical_rtca = Some(phys_rtca);
    out
}
