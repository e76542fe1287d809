use serde::{Deserialize, Serialize};

use super::{solve_from, BusState, PowerFlowOptions, PowerFlowSolution, SlackShare};
use crate::error::PowerFlowError;
use crate::grid::{GridCase, Network};

/// Outer slack-distribution passes around the inner solve.
const MAX_SLACK_PASSES: usize = 5;

/// Result of spreading an MW deviation over a generator fleet.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlackAllocation {
    /// Per-unit MW share, same order as the input.
    pub shares: Vec<f64>,
    /// MW that no unit could take without crossing a limit.
    pub unabsorbed: f64,
}

/// Spreads `deviation` MW over units `(p, p_min, p_max)` in proportion to
/// p_max. Units that would cross a limit are pinned at it and the
/// remainder is re-proportioned over the rest.
pub fn allocate_slack(deviation: f64, units: &[(f64, f64, f64)]) -> SlackAllocation {
    let mut shares = vec![0.0; units.len()];
    let headroom = |k: usize| -> f64 {
        let (p, lo, hi) = units[k];
        if deviation >= 0.0 {
            (hi - p).max(0.0)
        } else {
            (p - lo).max(0.0)
        }
    };
    let mut active: Vec<usize> = (0..units.len()).filter(|&k| headroom(k) > 0.0 && units[k].2 > 0.0).collect();
    let mut remaining = deviation;
    while remaining != 0.0 && !active.is_empty() {
        let weight: f64 = active.iter().map(|&k| units[k].2).sum();
        let mut pinned = Vec::new();
        for &k in &active {
            let want = remaining * units[k].2 / weight;
            if want.abs() >= headroom(k) {
                pinned.push(k);
            }
        }
        if pinned.is_empty() {
            for &k in &active {
                shares[k] = remaining * units[k].2 / weight;
            }
            remaining = 0.0;
            break;
        }
        for &k in &pinned {
            shares[k] = headroom(k).copysign(deviation);
            remaining -= shares[k];
        }
        active.retain(|k| !pinned.contains(k));
    }
    SlackAllocation { shares, unabsorbed: remaining }
}

/// One distribution pass: moves each island's reference-unit deviation onto
/// the island's in-service fleet and re-solves from the given state.
pub fn distribute_slack(
    case: &GridCase,
    net: &Network,
    sol: &PowerFlowSolution,
    opts: &PowerFlowOptions,
) -> Result<(GridCase, PowerFlowSolution), PowerFlowError> {
    let threshold = 10.0 * opts.tol * case.base_mva;
    let mut schedule: Vec<f64> = case.generators.iter().map(|g| g.p).collect();
    let mut moved = false;
    let mut shares = Vec::new();

    for status in &sol.islands {
        let Some(ref_id) = status.reference else { continue };
        if !status.converged {
            continue;
        }
        let reference = case.bus_index(ref_id).expect("reference bus exists");
        let island = net.idx.island_of(reference);
        let fleet: Vec<usize> = (0..case.generators.len())
            .filter(|&k| case.generators[k].status && net.idx.island_of(case.generator_bus(k)) == island)
            .collect();
        let deviation: f64 = fleet
            .iter()
            .filter(|&&k| case.generator_bus(k) == reference)
            .map(|&k| sol.gen_p[k] - case.generators[k].p)
            .sum();
        if deviation.abs() <= threshold {
            continue;
        }
        let units: Vec<(f64, f64, f64)> = fleet
            .iter()
            .map(|&k| {
                let g = &case.generators[k];
                (g.p, g.p_min, g.p_max)
            })
            .collect();
        let alloc = allocate_slack(deviation, &units);
        if alloc.unabsorbed.abs() > threshold {
            return Err(PowerFlowError::SlackInfeasible { unabsorbed_mw: alloc.unabsorbed });
        }
        for (&k, &s) in fleet.iter().zip(&alloc.shares) {
            schedule[k] += s;
            shares.push(SlackShare { generator: case.generators[k].id, share_mw: s });
        }
        moved = true;
    }

    if !moved {
        return Ok((case.clone(), sol.clone()));
    }
    let updated = case.with_dispatch(&schedule);
    let warm = BusState { v_mag: sol.v_mag.clone(), v_ang: sol.v_ang.clone() };
    let mut next = solve_from(&updated, net, opts, Some(&warm));
    next.slack_shares = shares;
    Ok((updated, next))
}

/// Solve with proportional slack distribution as an outer loop. Returns the
/// case carrying the final generator schedules together with the solution.
pub fn solve_with_slack(
    case: &GridCase,
    net: &Network,
    opts: &PowerFlowOptions,
    start: Option<&BusState>,
) -> Result<(GridCase, PowerFlowSolution), PowerFlowError> {
    let mut current = case.clone();
    let mut sol = solve_from(case, net, opts, start);
    if !opts.distribute_slack {
        return Ok((current, sol));
    }
    let mut totals: Vec<f64> = vec![0.0; case.generators.len()];
    for _ in 0..MAX_SLACK_PASSES {
        if !sol.converged() && !sol.islands.iter().any(|i| i.converged) {
            break;
        }
        let before: Vec<f64> = current.generators.iter().map(|g| g.p).collect();
        let (next_case, next_sol) = distribute_slack(&current, net, &sol, opts)?;
        let after: Vec<f64> = next_case.generators.iter().map(|g| g.p).collect();
        let unchanged = before == after;
        for (t, (a, b)) in totals.iter_mut().zip(after.iter().zip(&before)) {
            *t += a - b;
        }
        current = next_case;
        sol = next_sol;
        if unchanged {
            break;
        }
    }
    sol.slack_shares = current
        .generators
        .iter()
        .zip(&totals)
        .filter(|(_, &t)| t != 0.0)
        .map(|(g, &t)| SlackShare { generator: g.id, share_mw: t })
        .collect();
    Ok((current, sol))
}
