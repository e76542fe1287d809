//! Numerical observability on the decoupled DC model: zero pivots of the
//! P-θ gain matrix mark unobservable directions, and branches that carry
//! flow in the resulting null-space solution are unobservable.

use std::collections::{BTreeSet, VecDeque};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{Measurement, MeasurementKind, MeasurementSet};
use crate::grid::{GridCase, Network};

const PIVOT_TOL: f64 = 1e-9;
const FLOW_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservabilityResult {
    /// Observable islands as bus positions, ordered by first bus.
    pub islands: Vec<Vec<usize>>,
    /// Island index per bus position.
    pub island_of: Vec<usize>,
    pub unobservable_branches: Vec<u32>,
    /// Active measurements that cannot contribute (they straddle islands).
    pub irrelevant: Vec<u32>,
}

impl ObservabilityResult {
    pub fn is_fully_observable(&self) -> bool {
        self.islands.len() == 1
    }

    /// Whether measurement `m` lies inside one observable island.
    pub fn is_relevant(&self, m: &Measurement) -> bool {
        !self.irrelevant.contains(&m.id)
    }
}

fn dc_row(case: &GridCase, net: &Network, m: &Measurement) -> Option<Vec<(usize, f64)>> {
    match m.kind {
        MeasurementKind::BranchPFrom | MeasurementKind::BranchPTo => {
            let k = case.branch_index(m.element)?;
            if !net.idx.branch_in_service(k) {
                return None;
            }
            let (f, t) = case.terminals(k);
            let s = 1.0 / case.branches[k].x;
            Some(vec![(f, s), (t, -s)])
        }
        MeasurementKind::BusPInj => {
            let i = case.bus_index(m.element)?;
            Some(net.mats.b_prime.row(i).to_vec())
        }
        _ => None,
    }
}

pub fn observability_analysis(case: &GridCase, net: &Network, set: &MeasurementSet) -> ObservabilityResult {
    let n = case.n_buses();
    let active: Vec<&Measurement> = set.measurements.iter().filter(|m| m.is_active()).collect();
    let mut dead_injection: BTreeSet<usize> = BTreeSet::new();
    let mut unobservable: BTreeSet<usize> = BTreeSet::new();

    loop {
        let mut g = DMatrix::<f64>::zeros(n, n);
        for m in &active {
            if m.kind == MeasurementKind::BusPInj {
                if let Some(i) = case.bus_index(m.element) {
                    if dead_injection.contains(&i) {
                        continue;
                    }
                }
            }
            let Some(row) = dc_row(case, net, m) else { continue };
            for &(a, va) in &row {
                for &(b, vb) in &row {
                    g[(a, b)] += va * vb;
                }
            }
        }
        let theta = null_space_angles(g);

        let mut found = false;
        for k in 0..case.n_branches() {
            if !net.idx.branch_in_service(k) || unobservable.contains(&k) {
                continue;
            }
            let (f, t) = case.terminals(k);
            if (theta[f] - theta[t]).abs() > FLOW_TOL {
                unobservable.insert(k);
                dead_injection.insert(f);
                dead_injection.insert(t);
                found = true;
            }
        }
        if !found {
            break;
        }
    }

    // Islands: components over observable in-service branches.
    let mut island_of = vec![usize::MAX; n];
    let mut islands = Vec::new();
    for s in 0..n {
        if island_of[s] != usize::MAX {
            continue;
        }
        let id = islands.len();
        let mut members = vec![s];
        island_of[s] = id;
        let mut queue = VecDeque::from([s]);
        while let Some(u) = queue.pop_front() {
            for link in net.idx.adjacency(u) {
                if unobservable.contains(&link.branch) || island_of[link.far] != usize::MAX {
                    continue;
                }
                island_of[link.far] = id;
                members.push(link.far);
                queue.push_back(link.far);
            }
        }
        members.sort_unstable();
        islands.push(members);
    }

    let irrelevant = active
        .iter()
        .filter(|m| match m.kind {
            k if k.is_branch() => case
                .branch_index(m.element)
                .map_or(true, |b| !net.idx.branch_in_service(b) || unobservable.contains(&b)),
            MeasurementKind::BusPInj | MeasurementKind::BusQInj => {
                case.bus_index(m.element).map_or(true, |i| dead_injection.contains(&i))
            }
            _ => false,
        })
        .map(|m| m.id)
        .collect();

    ObservabilityResult {
        islands,
        island_of,
        unobservable_branches: unobservable.iter().map(|&k| case.branches[k].id).collect(),
        irrelevant,
    }
}

/// Factorizes the gain matrix in bus order, replacing zero pivots by one
/// and assigning them distinct angles 0, 1, 2, ...; returns the solution
/// of the modified system.
fn null_space_angles(mut g: DMatrix<f64>) -> DVector<f64> {
    let n = g.nrows();
    let scale = (0..n).map(|i| g[(i, i)]).fold(0.0f64, f64::max).max(1.0);
    let mut rhs = DVector::zeros(n);
    let mut next = 0.0;
    for p in 0..n {
        if g[(p, p)].abs() <= PIVOT_TOL * scale {
            // Remaining row/column is numerically zero for a PSD matrix.
            for j in p..n {
                g[(p, j)] = 0.0;
                g[(j, p)] = 0.0;
            }
            g[(p, p)] = 1.0;
            rhs[p] = next;
            next += 1.0;
            continue;
        }
        for i in p + 1..n {
            let l = g[(i, p)] / g[(p, p)];
            if l == 0.0 {
                continue;
            }
            for j in p..n {
                g[(i, j)] -= l * g[(p, j)];
            }
            rhs[i] -= l * rhs[p];
        }
    }
    let mut theta = DVector::zeros(n);
    for p in (0..n).rev() {
        let mut acc = rhs[p];
        for j in p + 1..n {
            acc -= g[(p, j)] * theta[j];
        }
        theta[p] = acc / g[(p, p)];
    }
    theta
}
