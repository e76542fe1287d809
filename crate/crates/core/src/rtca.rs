//! N-1 contingency analysis over branch outages.

use serde::{Deserialize, Serialize};

use crate::grid::{find_radial_branches, GridCase, Network};
use crate::powerflow::{solve_from, BranchFlow, BusState, PowerFlowOptions, PowerFlowSolution};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RtcaOptions {
    /// Fraction of the emergency rating where warnings begin.
    pub warn_frac: f64,
    pub pf: PowerFlowOptions,
    /// Worker threads for the contingency solves.
    pub jobs: usize,
}

impl Default for RtcaOptions {
    fn default() -> Self {
        RtcaOptions { warn_frac: 0.9, pf: PowerFlowOptions::default(), jobs: 1 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ContingencyList {
    pub branches: Vec<u32>,
}

/// In-service, non-radial branches in case order.
pub fn build_contingency_list(case: &GridCase, net: &Network) -> ContingencyList {
    let radial = find_radial_branches(case, &net.idx);
    let branches = case
        .branches
        .iter()
        .filter(|b| b.status && !radial.contains(&b.id))
        .map(|b| b.id)
        .collect();
    ContingencyList { branches }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LimitRecord {
    pub branch: u32,
    pub flow_mva: f64,
    pub rating: f64,
    pub percent: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContingencyResult {
    pub outage: u32,
    pub converged: bool,
    /// A de-energized island still carries load.
    pub dead_island: bool,
    pub violations: Vec<LimitRecord>,
    pub warnings: Vec<LimitRecord>,
    pub is_critical: bool,
    /// Highest loading over monitored branches, percent of emergency rating;
    /// absent when the solve failed.
    pub worst_percent: Option<f64>,
    /// Post-contingency flows in case branch order (zero on the outaged branch).
    pub flows: Vec<BranchFlow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RtcaReport {
    pub warn_frac: f64,
    pub results: Vec<ContingencyResult>,
    /// Outage ids of critical contingencies, in list order.
    pub critical: Vec<u32>,
    pub base_flows: Vec<BranchFlow>,
    /// Base-case flows above the normal rating.
    pub base_violations: Vec<LimitRecord>,
}

impl RtcaReport {
    pub fn result(&self, outage: u32) -> Option<&ContingencyResult> {
        self.results.iter().find(|r| r.outage == outage)
    }

    pub fn n_violations(&self) -> usize {
        self.results.iter().map(|r| r.violations.len()).sum()
    }

    /// True when no contingency produced a violation, non-convergence or dead island.
    pub fn is_secure(&self) -> bool {
        self.results.iter().all(|r| r.violations.is_empty() && r.converged && !r.dead_island)
            && self.base_violations.is_empty()
    }

    pub fn table(&self) -> Vec<RtcaRow> {
        self.results
            .iter()
            .map(|r| RtcaRow {
                outage: r.outage,
                status: if !r.converged {
                    "not_converged"
                } else if r.dead_island {
                    "dead_island"
                } else if !r.violations.is_empty() {
                    "violation"
                } else if !r.warnings.is_empty() {
                    "warning"
                } else {
                    "ok"
                }
                .to_string(),
                worst_percent: r.worst_percent,
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RtcaRow {
    pub outage: u32,
    pub status: String,
    pub worst_percent: Option<f64>,
}

/// Classifies `flows` against `rating(k)`; returns (violations, warnings, worst %).
fn screen(
    case: &GridCase,
    flows: &[BranchFlow],
    skip: Option<usize>,
    warn_frac: f64,
    rating: impl Fn(usize) -> f64,
) -> (Vec<LimitRecord>, Vec<LimitRecord>, f64) {
    let mut violations = Vec::new();
    let mut warnings = Vec::new();
    let mut worst = 0.0f64;
    for (k, f) in flows.iter().enumerate() {
        if Some(k) == skip || !case.branches[k].status {
            continue;
        }
        let r = rating(k);
        if !(r > 0.0) || !r.is_finite() {
            continue;
        }
        let mva = f.mva();
        let rec = LimitRecord { branch: case.branches[k].id, flow_mva: mva, rating: r, percent: 100.0 * mva / r };
        worst = worst.max(rec.percent);
        if mva > r {
            violations.push(rec);
        } else if mva >= warn_frac * r {
            warnings.push(rec);
        }
    }
    (violations, warnings, worst)
}

/// Solves one outage warm-started from `base` and screens emergency ratings.
pub fn evaluate_contingency(
    case: &GridCase,
    base: &PowerFlowSolution,
    outage: usize,
    opts: &RtcaOptions,
) -> ContingencyResult {
    let post = case.with_outages(&[outage]);
    let id = case.branches[outage].id;
    let Ok(net) = Network::build(&post) else {
        return ContingencyResult {
            outage: id,
            converged: false,
            dead_island: false,
            violations: Vec::new(),
            warnings: Vec::new(),
            is_critical: true,
            worst_percent: None,
            flows: vec![BranchFlow::default(); case.n_branches()],
        };
    };
    let warm = BusState { v_mag: base.v_mag.clone(), v_ang: base.v_ang.clone() };
    let sol = solve_from(&post, &net, &opts.pf, Some(&warm));
    let (load_p, _) = post.bus_load();
    let mut converged = true;
    let mut dead_island = false;
    for isl in &sol.islands {
        if isl.is_dead() {
            let idx: Vec<usize> = isl.buses.iter().map(|&b| post.bus_index(b).unwrap()).collect();
            dead_island |= idx.iter().any(|&b| load_p[b].abs() > 1e-9);
        } else {
            converged &= isl.converged;
        }
    }
    let (violations, warnings, worst) = if converged {
        let (v, w, worst) =
            screen(&post, &sol.branches, Some(outage), opts.warn_frac, |k| post.branches[k].s_max_emergency);
        (v, w, Some(worst))
    } else {
        (Vec::new(), Vec::new(), None)
    };
    let is_critical = !converged || dead_island || !violations.is_empty() || !warnings.is_empty();
    ContingencyResult {
        outage: id,
        converged,
        dead_island,
        violations,
        warnings,
        is_critical,
        worst_percent: worst,
        flows: sol.branches,
    }
}

/// Runs every entry of `list`; results follow list order regardless of `jobs`.
pub fn run_rtca_list(
    case: &GridCase,
    base: &PowerFlowSolution,
    list: &ContingencyList,
    opts: &RtcaOptions,
) -> RtcaReport {
    let positions: Vec<usize> = list.branches.iter().filter_map(|&id| case.branch_index(id)).collect();
    let jobs = opts.jobs.max(1).min(positions.len().max(1));
    let results: Vec<ContingencyResult> = if jobs == 1 {
        positions.iter().map(|&k| evaluate_contingency(case, base, k, opts)).collect()
    } else {
        let chunk = positions.len().div_ceil(jobs);
        std::thread::scope(|s| {
            let handles: Vec<_> = positions
                .chunks(chunk)
                .map(|part| s.spawn(move || part.iter().map(|&k| evaluate_contingency(case, base, k, opts)).collect::<Vec<_>>()))
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("contingency worker panicked")).collect()
        })
    };
    let critical = results.iter().filter(|r| r.is_critical).map(|r| r.outage).collect();
    let (base_violations, _, _) = screen(case, &base.branches, None, 1.0, |k| case.branches[k].s_max);
    RtcaReport { warn_frac: opts.warn_frac, results, critical, base_flows: base.branches.clone(), base_violations }
}

pub fn run_rtca(case: &GridCase, net: &Network, base: &PowerFlowSolution, opts: &RtcaOptions) -> RtcaReport {
    let list = build_contingency_list(case, net);
    run_rtca_list(case, base, &list, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cases;
    use crate::powerflow::solve;

    /// case14 with the schedule spread so every single outage solves.
    fn spread14() -> GridCase {
        cases::case14().with_dispatch(&[0.0, 80.0, 30.0, 20.0, 20.0])
    }

    fn base(case: &GridCase) -> (Network, PowerFlowSolution) {
        let net = Network::build(case).unwrap();
        let sol = solve(case, &net, &PowerFlowOptions::default());
        assert!(sol.converged());
        (net, sol)
    }

    #[test]
    fn two_bus_list_is_empty() {
        let case = cases::case2();
        let (net, _) = base(&case);
        assert!(build_contingency_list(&case, &net).branches.is_empty());
    }

    #[test]
    fn triangle_lists_every_branch() {
        let case = cases::case3ring();
        let (net, _) = base(&case);
        assert_eq!(build_contingency_list(&case, &net).branches.len(), 3);
    }

    #[test]
    fn generous_ratings_give_no_criticals() {
        let mut case = spread14();
        for b in &mut case.branches {
            b.s_max = 1e4;
            b.s_max_emergency = 1e4;
        }
        let (net, sol) = base(&case);
        let rep = run_rtca(&case, &net, &sol, &RtcaOptions::default());
        assert!(rep.critical.is_empty());
        assert_eq!(rep.results.len(), build_contingency_list(&case, &net).branches.len());
    }

    #[test]
    fn load_pocket_outage_is_critical() {
        // Branch 7-8 feeds bus 8 radially; give bus 8 load and no generation.
        let mut case = cases::case14();
        let k = case.branches.iter().position(|b| b.from_bus == 7 && b.to_bus == 8).unwrap();
        case.loads.push(crate::grid::Load { id: 999, bus: 8, p: 5.0, q: 1.0, sheddable: true });
        for g in case.generators.iter_mut().filter(|g| g.bus == 8) {
            g.status = false;
        }
        let case = case.to_document().into_case().unwrap();
        let (_, sol) = base(&case);
        let list = ContingencyList { branches: vec![case.branches[k].id] };
        let rep = run_rtca_list(&case, &sol, &list, &RtcaOptions::default());
        assert!(rep.results[0].dead_island);
        assert!(rep.results[0].is_critical);
    }

    #[test]
    fn parallel_workers_keep_order() {
        let case = spread14();
        let (net, sol) = base(&case);
        let a = run_rtca(&case, &net, &sol, &RtcaOptions::default());
        let b = run_rtca(&case, &net, &sol, &RtcaOptions { jobs: 4, ..Default::default() });
        assert_eq!(a, b);
    }
}
