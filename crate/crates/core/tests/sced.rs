mod support;

use ems_core::cases;
use ems_core::grid::{GridCase, Network};
use ems_core::lp::{solve, SimplexOptions};
use ems_core::powerflow::{solve as pf_solve, PowerFlowOptions, PowerFlowSolution};
use ems_core::rtca::{run_rtca, RtcaOptions, RtcaReport};
use ems_core::sced::{
    build_problem, dispatch_pipeline, distribute_losses, solve_problem, ColumnRole, LossOption, ScedOptions,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn upstream(case: &GridCase) -> (Network, PowerFlowSolution, RtcaReport) {
    let net = Network::build(case).unwrap();
    let sol = pf_solve(case, &net, &PowerFlowOptions::default());
    assert!(sol.converged());
    let rtca = run_rtca(case, &net, &sol, &RtcaOptions::default());
    (net, sol, rtca)
}

/// case14 with loads and schedule perturbed.
fn perturbed14(seed: u64, spread: f64) -> GridCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let case = cases::case14();
    let scale = rng.gen_range(1.0 - spread..1.0 + spread);
    let loads: Vec<f64> = case.loads.iter().map(|l| l.p * scale * rng.gen_range(0.95..1.05)).collect();
    let dispatch: Vec<f64> = case.generators.iter().map(|g| (g.p * rng.gen_range(0.9..1.1)).min(g.p_max)).collect();
    case.with_load_p(&loads).with_dispatch(&dispatch)
}

#[test]
fn randomized_case14_objectives_match_second_solver() {
    for seed in 0..20 {
        let case = perturbed14(seed, 0.15);
        let (net, sol, rtca) = upstream(&case);
        if !sol.converged() {
            continue;
        }
        let prob = build_problem(&case, &net, &sol, &rtca, &ScedOptions::default()).unwrap();
        let ours = solve(&prob.lp, &SimplexOptions::default()).unwrap();
        let oracle = support::minilp_objective(&prob.lp).unwrap();
        let rel = (ours.objective - oracle).abs() / oracle.abs().max(1.0);
        assert!(rel <= 1e-6, "seed {seed}: {} vs {oracle}", ours.objective);
        let gap = (ours.objective - ours.dual_objective).abs() / ours.objective.abs().max(1.0);
        assert!(gap <= 1e-8, "seed {seed}: duality gap {gap}");
    }
}

#[test]
fn loss_options_conserve_total_loss() {
    let case = cases::case14();
    let (net, sol, rtca) = upstream(&case);
    for opt in LossOption::ALL {
        let v = distribute_losses(&case, &sol, opt);
        let sum: f64 = v.iter().sum();
        assert!((sum - sol.total_loss_mw).abs() <= 1e-9, "{opt:?}: {sum} vs {}", sol.total_loss_mw);
        assert!(v.iter().all(|&x| x >= 0.0));

        let opts = ScedOptions { loss_option: opt, ..Default::default() };
        let prob = build_problem(&case, &net, &sol, &rtca, &opts).unwrap();
        let plan = solve_problem(&case, &prob).unwrap();
        let served: f64 = case.loads.iter().zip(&plan.shed_base).map(|(l, s)| l.p - s).sum();
        let gen: f64 = plan.p_set.iter().sum();
        assert!((gen - served - sol.total_loss_mw).abs() <= 1e-7, "{opt:?}");
    }
}

#[test]
fn loss_placement_follows_option() {
    let case = cases::case14();
    let (_, sol, _) = upstream(&case);
    let gen_buses: Vec<usize> = (0..case.generators.len()).map(|g| case.generator_bus(g)).collect();
    let v = distribute_losses(&case, &sol, LossOption::GenBuses);
    for (b, x) in v.iter().enumerate() {
        assert_eq!(*x > 0.0, gen_buses.contains(&b), "bus {b}");
    }
    let (load_p, _) = case.bus_load();
    let v = distribute_losses(&case, &sol, LossOption::LoadBuses);
    for (b, x) in v.iter().enumerate() {
        assert_eq!(*x > 0.0, load_p[b] > 0.0, "bus {b}");
    }
}

#[test]
fn bundled_case_dispatch_is_clean_and_secure() {
    let case = cases::case14();
    let (net, sol, rtca) = upstream(&case);
    assert!(rtca.is_secure(), "{:?}", rtca.table());
    let pf = PowerFlowOptions::default();
    let (plan, realized) = dispatch_pipeline(&case, &net, &sol, &rtca, &ScedOptions::default(), &pf).unwrap();
    assert!(plan.clean, "{:?}", plan.breakdown);
    assert!(!plan.ac_infeasible);
    let applied = plan.applied_case(&case);
    let post = run_rtca(&applied, &net, &realized, &RtcaOptions::default());
    assert_eq!(post.n_violations(), 0, "{:?}", post.table());
    assert!(post.base_violations.is_empty());
}

#[test]
fn problem_size_matches_counting_formula() {
    let case = cases::case14();
    let (net, sol, mut rtca) = upstream(&case);
    rtca.critical = vec![rtca.results[0].outage, rtca.results[1].outage];

    let n_gen = case.generators.iter().filter(|g| g.status).count();
    let segments: usize = case.generators.iter().filter(|g| g.status).map(|g| g.cost_curve.len()).sum();
    let min_slacks = case.generators.iter().filter(|g| g.status && g.p_min > 0.0).count();
    let sheddable = case.loads.iter().filter(|l| l.sheddable && l.p > 0.0).count();
    let monitored = case.branches.iter().filter(|b| b.status).count();
    let n_c = 2;
    let cols = segments + min_slacks + n_gen + sheddable + 1 + 2 * monitored + n_c * (sheddable + 1 + 2 * (monitored - 1));
    let rows = 1 + n_gen + n_gen + n_gen + monitored + n_c * (1 + (monitored - 1));

    let prob = build_problem(&case, &net, &sol, &rtca, &ScedOptions::default()).unwrap();
    assert_eq!(prob.lp.n_cols(), cols);
    assert_eq!(prob.lp.n_rows(), rows);

    rtca.critical.clear();
    let prob = build_problem(&case, &net, &sol, &rtca, &ScedOptions::default()).unwrap();
    assert_eq!(prob.lp.n_rows(), 1 + 3 * n_gen + monitored);
    assert!(prob.contingencies.is_empty());
}

#[test]
fn critical_list_drives_contingency_blocks() {
    let case = cases::case14();
    let (net, sol, rtca) = upstream(&case);
    let prob = build_problem(&case, &net, &sol, &rtca, &ScedOptions::default()).unwrap();
    assert_eq!(prob.contingencies, rtca.critical);
    let mut outages: Vec<u32> = prob.flows.iter().filter_map(|f| f.outage).collect();
    outages.dedup();
    assert_eq!(outages, rtca.critical);
}

#[test]
fn slacks_stay_zero_whenever_avoidable() {
    for seed in 0..15 {
        let case = perturbed14(100 + seed, 0.25);
        let (net, sol, rtca) = upstream(&case);
        let prob = build_problem(&case, &net, &sol, &rtca, &ScedOptions::default()).unwrap();
        let plan = solve_problem(&case, &prob).unwrap();
        // Same LP with every slack pinned at zero.
        let mut strict = prob.lp.clone();
        for (j, role) in prob.columns.iter().enumerate() {
            if !matches!(role, ColumnRole::Segment { .. } | ColumnRole::Reserve { .. } | ColumnRole::ReferenceBackdown { .. }) {
                strict.col_hi[j] = 0.0;
            }
        }
        if solve(&strict, &SimplexOptions::default()).is_ok() {
            assert!(plan.clean, "seed {seed}: feasible without slacks but plan uses them");
        } else {
            assert!(!plan.clean, "seed {seed}");
        }
    }
}

#[test]
fn plan_respects_unit_limits() {
    let case = perturbed14(7, 0.2);
    let (net, sol, rtca) = upstream(&case);
    let opts = ScedOptions::default();
    let prob = build_problem(&case, &net, &sol, &rtca, &opts).unwrap();
    let plan = solve_problem(&case, &prob).unwrap();
    for (g, gen) in case.generators.iter().enumerate() {
        let p = plan.p_set[g];
        assert!(p >= gen.p_min - plan.gen_min_slack[g] - 1e-9 && p <= gen.p_max + 1e-9);
        assert!(plan.reserve[g] <= gen.ramp_rate * opts.reserve_ramp_minutes + 1e-9);
        assert!(p + plan.reserve[g] <= gen.p_max + 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn ramp_limits_hold(seed in 0u64..10_000, interval in 1.0f64..15.0) {
        let case = perturbed14(seed, 0.2);
        let (net, sol, rtca) = upstream(&case);
        let opts = ScedOptions { dispatch_interval: interval, ..Default::default() };
        let prob = build_problem(&case, &net, &sol, &rtca, &opts).unwrap();
        let plan = solve_problem(&case, &prob).unwrap();
        for (g, gen) in case.generators.iter().enumerate() {
            let step = (plan.p_set[g] - plan.p_prev[g]).abs();
            prop_assert!(step <= gen.ramp_rate * interval + 1e-7, "gen {} moved {step}", gen.id);
        }
    }
}
