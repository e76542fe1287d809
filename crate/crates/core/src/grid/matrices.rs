//! Linear network matrices: Ybus, the fast-decoupled B′/B″ pair, and the
//! DC sensitivities PTDF and LODF.
//!
//! PTDF and LODF are stored dense (branches × buses and branches ×
//! branches). At desk scale that is a few kilobytes; memory and build time
//! grow as O(branches × buses) per island.

use nalgebra::DMatrix;
use num_complex::Complex64;

use super::{select_reference_bus, GridCase, LinkNet, SparseMatrix};
use crate::error::TopologyError;

#[derive(Clone, Debug)]
pub struct NetworkMatrices {
    pub ybus: SparseMatrix<Complex64>,
    /// Series-susceptance matrix (1/x, no resistance, shunts or taps).
    pub b_prime: SparseMatrix<f64>,
    /// Negated imaginary part of Ybus over all buses; the solver extracts
    /// the PQ-bus block.
    pub b_double_prime: SparseMatrix<f64>,
    /// Slack-referenced branch flow per unit bus injection (both in pu).
    pub ptdf: DMatrix<f64>,
    /// Post-outage flow change on branch ℓ per unit pre-outage flow on k.
    /// Diagonal is −1; columns of radial or out-of-service branches are 0.
    pub lodf: DMatrix<f64>,
    /// Reference bus per island (`None` for dead islands).
    pub references: Vec<Option<usize>>,
}

impl NetworkMatrices {
    pub fn reference_of_bus(&self, idx: &LinkNet, bus: usize) -> Option<usize> {
        self.references[idx.island_of(bus)]
    }

    /// Sensitivity of flow on `monitored` to bus injections after `outaged`
    /// trips: PTDF(ℓ) + LODF(ℓ,k)·PTDF(k).
    pub fn post_outage_ptdf_row(&self, monitored: usize, outaged: usize) -> Vec<f64> {
        let l = self.lodf[(monitored, outaged)];
        (0..self.ptdf.ncols())
            .map(|j| self.ptdf[(monitored, j)] + l * self.ptdf[(outaged, j)])
            .collect()
    }
}

/// Series admittance and the four two-port admittances (ff, ft, tf, tt) of a
/// branch in per unit.
pub fn branch_admittances(case: &GridCase, k: usize) -> [Complex64; 4] {
    let br = &case.branches[k];
    let ys = Complex64::new(br.r, br.x).inv();
    let bc = Complex64::new(0.0, br.b_charging / 2.0);
    let a = br.tap_ratio;
    let ytt = ys + bc;
    let yff = ytt / (a * a);
    let yft = -ys / a;
    let ytf = -ys / a;
    [yff, yft, ytf, ytt]
}

pub fn build_ybus(case: &GridCase, idx: &LinkNet) -> SparseMatrix<Complex64> {
    let n = case.n_buses();
    let mut y = SparseMatrix::zeros(n, n);
    for k in 0..case.n_branches() {
        if !idx.branch_in_service(k) {
            continue;
        }
        let (f, t) = case.terminals(k);
        let [yff, yft, ytf, ytt] = branch_admittances(case, k);
        y.add(f, f, yff);
        y.add(f, t, yft);
        y.add(t, f, ytf);
        y.add(t, t, ytt);
    }
    for (i, bus) in case.buses.iter().enumerate() {
        if bus.g_shunt != 0.0 || bus.b_shunt != 0.0 {
            y.add(i, i, Complex64::new(bus.g_shunt, bus.b_shunt) / case.base_mva);
        }
    }
    y
}

pub fn build_b_prime(case: &GridCase, idx: &LinkNet) -> SparseMatrix<f64> {
    let n = case.n_buses();
    let mut b = SparseMatrix::zeros(n, n);
    for k in 0..case.n_branches() {
        if !idx.branch_in_service(k) {
            continue;
        }
        let (f, t) = case.terminals(k);
        let s = 1.0 / case.branches[k].x;
        b.add(f, f, s);
        b.add(t, t, s);
        b.add(f, t, -s);
        b.add(t, f, -s);
    }
    b
}

fn build_b_double_prime(ybus: &SparseMatrix<Complex64>) -> SparseMatrix<f64> {
    let n = ybus.n_rows();
    let mut b = SparseMatrix::zeros(n, n);
    for i in 0..n {
        for &(j, v) in ybus.row(i) {
            b.add(i, j, -v.im);
        }
    }
    b
}

/// Builds every matrix for the topology in `idx`. Dead islands get no
/// reference and zero sensitivities; at least one island must be solvable.
pub fn build_matrices(case: &GridCase, idx: &LinkNet) -> Result<NetworkMatrices, TopologyError> {
    let ybus = build_ybus(case, idx);
    let b_prime = build_b_prime(case, idx);
    let b_double_prime = build_b_double_prime(&ybus);

    let n = case.n_buses();
    let m = case.n_branches();
    let mut references = Vec::with_capacity(idx.n_islands());
    let mut ptdf = DMatrix::zeros(m, n);

    for (island, members) in idx.islands().iter().enumerate() {
        let reference = match select_reference_bus(idx, case, island) {
            Ok(r) => r,
            Err(TopologyError::DeadIsland { .. }) => {
                references.push(None);
                continue;
            }
            Err(e) => return Err(e),
        };
        references.push(Some(reference));
        let others: Vec<usize> = members.iter().copied().filter(|&b| b != reference).collect();
        if others.is_empty() {
            continue;
        }
        let reduced = b_prime.submatrix(&others, &others);
        let inv = reduced
            .lu()
            .try_inverse()
            .ok_or(TopologyError::DegenerateIsland { island })?;
        // Angle sensitivity per island bus, zero row at the reference.
        let mut pos = vec![usize::MAX; n];
        for (p, &b) in others.iter().enumerate() {
            pos[b] = p;
        }
        for k in 0..m {
            if !idx.branch_in_service(k) {
                continue;
            }
            let (f, t) = case.terminals(k);
            if idx.island_of(f) != island {
                continue;
            }
            let x = case.branches[k].x;
            for (col, &bus) in others.iter().enumerate() {
                let tf = if pos[f] != usize::MAX { inv[(pos[f], col)] } else { 0.0 };
                let tt = if pos[t] != usize::MAX { inv[(pos[t], col)] } else { 0.0 };
                ptdf[(k, bus)] = (tf - tt) / x;
            }
        }
    }
    if references.iter().all(Option::is_none) {
        return Err(TopologyError::NoSolvableIsland);
    }

    let mut lodf = DMatrix::zeros(m, m);
    for k in 0..m {
        if !idx.branch_in_service(k) {
            continue;
        }
        let (f, t) = case.terminals(k);
        let self_sens = ptdf[(k, f)] - ptdf[(k, t)];
        let denom = 1.0 - self_sens;
        lodf[(k, k)] = -1.0;
        if denom.abs() < 1e-9 {
            continue;
        }
        for l in 0..m {
            if l != k && idx.branch_in_service(l) {
                lodf[(l, k)] = (ptdf[(l, f)] - ptdf[(l, t)]) / denom;
            }
        }
    }

    Ok(NetworkMatrices { ybus, b_prime, b_double_prime, ptdf, lodf, references })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cases;
    use crate::grid::build_linknet;

    #[test]
    fn two_bus_b_prime_and_ptdf() {
        let case = cases::case2();
        let idx = build_linknet(&case);
        let mats = build_matrices(&case, &idx).unwrap();
        assert!((mats.b_prime.get(0, 1) + 10.0).abs() < 1e-12);
        assert!((mats.b_prime.get(0, 0) - 10.0).abs() < 1e-12);
        assert!((mats.b_prime.get(1, 1) - 10.0).abs() < 1e-12);
        // Branch 1→2; an injection at bus 2 flows 1 pu toward the slack.
        assert!((mats.ptdf[(0, 1)] + 1.0).abs() < 1e-12);
        assert_eq!(mats.ptdf[(0, 0)], 0.0);
    }

    #[test]
    fn triangle_ptdf_by_direct_solve() {
        let case = cases::case3ring();
        let idx = build_linknet(&case);
        let mats = build_matrices(&case, &idx).unwrap();
        // Oracle: with bus 1 as reference and x = 0.1 everywhere, the reduced
        // system is [[20,-10],[-10,20]] θ = e₂, giving θ₂ = 2/30, θ₃ = 1/30.
        let (t2, t3) = (2.0 / 30.0, 1.0 / 30.0);
        let b2 = case.bus_index(2).unwrap();
        for (k, br) in case.branches.iter().enumerate() {
            let theta = |id: u32| match id {
                2 => t2,
                3 => t3,
                _ => 0.0,
            };
            let expect = (theta(br.from_bus) - theta(br.to_bus)) / br.x;
            assert!((mats.ptdf[(k, b2)] - expect).abs() < 1e-12);
        }
        let k21 = case.branches.iter().position(|b| (b.from_bus, b.to_bus) == (2, 1)).unwrap();
        assert!((mats.ptdf[(k21, b2)] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn b_prime_symmetric_and_lodf_diagonal() {
        let case = cases::case14();
        let idx = build_linknet(&case);
        let mats = build_matrices(&case, &idx).unwrap();
        assert!(mats.b_prime.is_symmetric(0.0));
        let slack = mats.references[0].unwrap();
        assert!(mats.ptdf.column(slack).iter().all(|&v| v == 0.0));
        for k in 0..case.n_branches() {
            assert_eq!(mats.lodf[(k, k)], -1.0);
        }
    }

    #[test]
    fn ybus_rows_sum_to_shunt_without_taps() {
        let case = cases::case3ring();
        let idx = build_linknet(&case);
        let y = build_ybus(&case, &idx);
        for i in 0..3 {
            let s: Complex64 = y.row(i).iter().map(|&(_, v)| v).sum();
            let charging: f64 = case
                .branches
                .iter()
                .enumerate()
                .filter(|(k, _)| {
                    let (f, t) = case.terminals(*k);
                    f == i || t == i
                })
                .map(|(_, b)| b.b_charging / 2.0)
                .sum();
            assert!((s - Complex64::new(0.0, charging)).norm() < 1e-12);
        }
    }
}
