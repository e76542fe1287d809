//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use std::collections::{BTreeSet, VecDeque};

use ems_core::grid::{BusType, GridCase};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

/// Dense Ybus assembled straight from the branch table (π model, tap on the
/// from side, shunts in MW/MVAr at 1 pu).
pub fn dense_ybus(case: &GridCase) -> DMatrix<Complex64> {
    let n = case.buses.len();
    let pos = |id: u32| case.buses.iter().position(|b| b.id == id).unwrap();
    let mut y = DMatrix::from_element(n, n, Complex64::new(0.0, 0.0));
    for br in case.branches.iter().filter(|b| b.status) {
        let (f, t) = (pos(br.from_bus), pos(br.to_bus));
        let ys = Complex64::new(1.0, 0.0) / Complex64::new(br.r, br.x);
        let bc = Complex64::new(0.0, br.b_charging / 2.0);
        let a = br.tap_ratio;
        y[(f, f)] += (ys + bc) / (a * a);
        y[(t, t)] += ys + bc;
        y[(f, t)] -= ys / a;
        y[(t, f)] -= ys / a;
    }
    for (k, b) in case.buses.iter().enumerate() {
        y[(k, k)] += Complex64::new(b.g_shunt, b.b_shunt) / case.base_mva;
    }
    y
}

pub fn injections(y: &DMatrix<Complex64>, vm: &[f64], va: &[f64]) -> Vec<Complex64> {
    let v = DVector::from_iterator(vm.len(), vm.iter().zip(va).map(|(&m, &a)| Complex64::from_polar(m, a)));
    let i = y * &v;
    (0..vm.len()).map(|k| v[k] * i[k].conj()).collect()
}

/// Full Newton-Raphson in polar coordinates with an analytic Jacobian
/// (dS/dθ, dS/d|V|). Single island; `reference` is a bus position.
pub struct NewtonResult {
    pub vm: Vec<f64>,
    pub va: Vec<f64>,
    pub converged: bool,
}

pub fn newton_pf(case: &GridCase, reference: usize, var_limits: bool) -> NewtonResult {
    let n = case.buses.len();
    let base = case.base_mva;
    let y = dense_ybus(case);
    let pos = |id: u32| case.buses.iter().position(|b| b.id == id).unwrap();

    let mut p_sched = vec![0.0; n];
    let mut q_sched = vec![0.0; n];
    let mut load_q = vec![0.0; n];
    for l in &case.loads {
        p_sched[pos(l.bus)] -= l.p / base;
        q_sched[pos(l.bus)] -= l.q / base;
        load_q[pos(l.bus)] += l.q;
    }
    // Per-bus reactive range of regulating units.
    let mut qlim: Vec<Option<(f64, f64)>> = vec![None; n];
    for g in case.generators.iter().filter(|g| g.status) {
        let b = pos(g.bus);
        p_sched[b] += g.p / base;
        if case.buses[b].kind == BusType::Pq {
            q_sched[b] += g.q / base;
        } else {
            let e = qlim[b].get_or_insert((0.0, 0.0));
            e.0 += g.q_min;
            e.1 += g.q_max;
        }
    }
    let v_set: Vec<f64> = case.buses.iter().map(|b| b.v_mag).collect();
    let mut pv: Vec<bool> = (0..n).map(|b| b != reference && qlim[b].is_some()).collect();
    let mut clamped: Vec<Option<f64>> = vec![None; n];
    let mut switches = vec![0u32; n];

    let mut vm: Vec<f64> = (0..n).map(|b| if qlim[b].is_some() { v_set[b] } else { 1.0 }).collect();
    let mut va = vec![0.0; n];

    for _outer in 0..20 {
        let mut qs = q_sched.clone();
        for b in 0..n {
            if let Some(q) = clamped[b] {
                qs[b] = (q - load_q[b]) / base;
            }
        }
        let converged = newton_inner(&y, reference, &pv, &p_sched, &qs, &mut vm, &mut va);
        if !converged {
            return NewtonResult { vm, va, converged: false };
        }
        if !var_limits {
            return NewtonResult { vm, va, converged: true };
        }
        let s = injections(&y, &vm, &va);
        let mut changed = false;
        for b in 0..n {
            let Some((lo, hi)) = qlim[b] else { continue };
            if b == reference || switches[b] >= 3 {
                continue;
            }
            if pv[b] {
                let q = s[b].im * base + load_q[b];
                let lim = if q > hi {
                    Some(hi)
                } else if q < lo {
                    Some(lo)
                } else {
                    None
                };
                if let Some(l) = lim {
                    pv[b] = false;
                    clamped[b] = Some(l);
                    switches[b] += 1;
                    changed = true;
                }
            } else if let Some(q) = clamped[b] {
                let at_max = (q - hi).abs() <= (q - lo).abs();
                let relief = if at_max { vm[b] > v_set[b] } else { vm[b] < v_set[b] };
                if relief {
                    pv[b] = true;
                    clamped[b] = None;
                    vm[b] = v_set[b];
                    switches[b] += 1;
                    changed = true;
                }
            }
        }
        if !changed {
            return NewtonResult { vm, va, converged: true };
        }
    }
    NewtonResult { vm, va, converged: false }
}

fn newton_inner(
    y: &DMatrix<Complex64>,
    reference: usize,
    pv: &[bool],
    p_sched: &[f64],
    q_sched: &[f64],
    vm: &mut [f64],
    va: &mut [f64],
) -> bool {
    let n = vm.len();
    let pvpq: Vec<usize> = (0..n).filter(|&b| b != reference).collect();
    let pq: Vec<usize> = (0..n).filter(|&b| b != reference && !pv[b]).collect();
    let j = Complex64::new(0.0, 1.0);
    for _ in 0..50 {
        let s = injections(y, vm, va);
        let mut f = Vec::with_capacity(pvpq.len() + pq.len());
        for &b in &pvpq {
            f.push(s[b].re - p_sched[b]);
        }
        for &b in &pq {
            f.push(s[b].im - q_sched[b]);
        }
        if f.iter().all(|x| x.abs() < 1e-13) {
            return true;
        }
        let v = DVector::from_iterator(n, (0..n).map(|k| Complex64::from_polar(vm[k], va[k])));
        let ibus = y * &v;
        let diag_v = DMatrix::from_diagonal(&v);
        let diag_i = DMatrix::from_diagonal(&ibus);
        let vnorm = DVector::from_iterator(n, (0..n).map(|k| v[k] / vm[k]));
        let diag_vn = DMatrix::from_diagonal(&vnorm);
        let ds_dva = (&diag_v * (&diag_i - y * &diag_v).map(|c| c.conj())) * j;
        let ds_dvm = &diag_v * (y * &diag_vn).map(|c| c.conj()) + diag_i.map(|c| c.conj()) * &diag_vn;

        let m = pvpq.len() + pq.len();
        let mut jac = DMatrix::zeros(m, m);
        for (r, &br) in pvpq.iter().enumerate() {
            for (c, &bc) in pvpq.iter().enumerate() {
                jac[(r, c)] = ds_dva[(br, bc)].re;
            }
            for (c, &bc) in pq.iter().enumerate() {
                jac[(r, pvpq.len() + c)] = ds_dvm[(br, bc)].re;
            }
        }
        for (r, &br) in pq.iter().enumerate() {
            for (c, &bc) in pvpq.iter().enumerate() {
                jac[(pvpq.len() + r, c)] = ds_dva[(br, bc)].im;
            }
            for (c, &bc) in pq.iter().enumerate() {
                jac[(pvpq.len() + r, pvpq.len() + c)] = ds_dvm[(br, bc)].im;
            }
        }
        let rhs = DVector::from_vec(f);
        let Some(dx) = jac.lu().solve(&rhs) else { return false };
        for (k, &b) in pvpq.iter().enumerate() {
            va[b] -= dx[k];
        }
        for (k, &b) in pq.iter().enumerate() {
            vm[b] -= dx[pvpq.len() + k];
        }
    }
    false
}

/// Connected components over in-service branches, ignoring `skip`.
pub fn count_components(case: &GridCase, skip: Option<usize>) -> usize {
    component_labels(case, skip).into_iter().collect::<BTreeSet<_>>().len()
}

pub fn component_labels(case: &GridCase, skip: Option<usize>) -> Vec<usize> {
    let n = case.buses.len();
    let pos = |id: u32| case.buses.iter().position(|b| b.id == id).unwrap();
    let mut adj = vec![Vec::new(); n];
    for (k, br) in case.branches.iter().enumerate() {
        if !br.status || Some(k) == skip {
            continue;
        }
        adj[pos(br.from_bus)].push(pos(br.to_bus));
        adj[pos(br.to_bus)].push(pos(br.from_bus));
    }
    let mut label = vec![usize::MAX; n];
    let mut next = 0;
    for s in 0..n {
        if label[s] != usize::MAX {
            continue;
        }
        let mut q = VecDeque::from([s]);
        label[s] = next;
        while let Some(u) = q.pop_front() {
            for &w in &adj[u] {
                if label[w] == usize::MAX {
                    label[w] = next;
                    q.push_back(w);
                }
            }
        }
        next += 1;
    }
    label
}

/// Bridges by removal: branches whose outage raises the component count.
pub fn bridges_by_removal(case: &GridCase) -> BTreeSet<u32> {
    let before = count_components(case, None);
    case.branches
        .iter()
        .enumerate()
        .filter(|(k, br)| br.status && count_components(case, Some(*k)) > before)
        .map(|(_, br)| br.id)
        .collect()
}

/// DC flows from a direct reduced solve of B′θ = P (series 1/x only).
pub fn dc_flows(case: &GridCase, p_inj: &[f64], reference: usize) -> Vec<f64> {
    let n = case.buses.len();
    let pos = |id: u32| case.buses.iter().position(|b| b.id == id).unwrap();
    let mut b = DMatrix::zeros(n, n);
    for br in case.branches.iter().filter(|b| b.status) {
        let (f, t) = (pos(br.from_bus), pos(br.to_bus));
        let s = 1.0 / br.x;
        b[(f, f)] += s;
        b[(t, t)] += s;
        b[(f, t)] -= s;
        b[(t, f)] -= s;
    }
    let keep: Vec<usize> = (0..n).filter(|&k| k != reference).collect();
    let red = DMatrix::from_fn(keep.len(), keep.len(), |r, c| b[(keep[r], keep[c])]);
    let rhs = DVector::from_iterator(keep.len(), keep.iter().map(|&k| p_inj[k]));
    let th = red.lu().solve(&rhs).expect("connected network");
    let mut theta = vec![0.0; n];
    for (i, &k) in keep.iter().enumerate() {
        theta[k] = th[i];
    }
    case.branches
        .iter()
        .map(|br| if br.status { (theta[pos(br.from_bus)] - theta[pos(br.to_bus)]) / br.x } else { 0.0 })
        .collect()
}

/// Numerical rank by SVD with a relative tolerance.
pub fn rank(m: &DMatrix<f64>) -> usize {
    let sv = m.clone().svd(false, false).singular_values;
    let top = sv.iter().cloned().fold(0.0, f64::max);
    sv.iter().filter(|&&s| s > top * 1e-9).count()
}

/// Two-proportion z statistic.
pub fn two_proportion_z(x1: usize, n1: usize, x2: usize, n2: usize) -> f64 {
    let p1 = x1 as f64 / n1 as f64;
    let p2 = x2 as f64 / n2 as f64;
    let p = (x1 + x2) as f64 / (n1 + n2) as f64;
    let se = (p * (1.0 - p) * (1.0 / n1 as f64 + 1.0 / n2 as f64)).sqrt();
    if se == 0.0 {
        0.0
    } else {
        (p1 - p2) / se
    }
}

/// Measurement values from complex branch currents and the dense Ybus.
pub fn h_oracle(case: &GridCase, ms: &[ems_core::estimation::Measurement], vm: &[f64], va: &[f64]) -> Vec<f64> {
    use ems_core::estimation::MeasurementKind as K;
    let y = dense_ybus(case);
    let s = injections(&y, vm, va);
    let pos = |id: u32| case.buses.iter().position(|b| b.id == id).unwrap();
    let v = |k: usize| Complex64::from_polar(vm[k], va[k]);
    ms.iter()
        .map(|m| match m.kind {
            K::BusPInj => s[pos(m.element)].re,
            K::BusQInj => s[pos(m.element)].im,
            K::BusVMag => vm[pos(m.element)],
            kind => {
                let br = case.branches.iter().find(|b| b.id == m.element).unwrap();
                if !br.status {
                    return 0.0;
                }
                let (f, t) = (pos(br.from_bus), pos(br.to_bus));
                let ys = Complex64::new(1.0, 0.0) / Complex64::new(br.r, br.x);
                let bc = Complex64::new(0.0, br.b_charging / 2.0);
                let a = br.tap_ratio;
                // Ideal transformer a:1 on the from side.
                let vf = v(f) / a;
                let i_series = (vf - v(t)) * ys;
                let if_ = (i_series + vf * bc) / a;
                let it = -i_series + v(t) * bc;
                let sf = v(f) * if_.conj();
                let st = v(t) * it.conj();
                match kind {
                    K::BranchPFrom => sf.re,
                    K::BranchQFrom => sf.im,
                    K::BranchPTo => st.re,
                    _ => st.im,
                }
            }
        })
        .collect()
}

/// WLS by Gauss-Newton on the normal equations with a Cholesky solve, all
/// states except the angle at `reference`.
pub fn cholesky_wls(
    case: &GridCase,
    net: &ems_core::grid::Network,
    ms: &[ems_core::estimation::Measurement],
    reference: usize,
) -> (Vec<f64>, Vec<f64>) {
    use ems_core::estimation::{h_eval, jacobian};
    use ems_core::powerflow::BusState;
    let n = case.buses.len();
    let cols: Vec<usize> = (0..2 * n).filter(|&c| c != reference).collect();
    let mut st = BusState { v_mag: vec![1.0; n], v_ang: vec![0.0; n] };
    for _ in 0..50 {
        let h = h_eval(case, net, ms, &st);
        let full = jacobian(case, net, ms, &st);
        let m = ms.len();
        let hm = DMatrix::from_fn(m, cols.len(), |r, c| full[(r, cols[c])]);
        let w = DMatrix::from_diagonal(&DVector::from_iterator(m, ms.iter().map(|x| 1.0 / (x.sigma * x.sigma))));
        let r = DVector::from_iterator(m, ms.iter().zip(&h).map(|(x, hv)| x.value - hv));
        let g = hm.transpose() * &w * &hm;
        let rhs = hm.transpose() * &w * r;
        let dx = g.cholesky().expect("positive definite gain").solve(&rhs);
        for (k, &c) in cols.iter().enumerate() {
            if c < n {
                st.v_ang[c] += dx[k];
            } else {
                st.v_mag[c - n] += dx[k];
            }
        }
        if dx.amax() < 1e-12 {
            break;
        }
    }
    (st.v_mag, st.v_ang)
}

/// Objective of `prob` solved by minilp; ranged rows become two inequalities.
pub fn minilp_objective(prob: &ems_core::lp::LpProblem) -> Result<f64, minilp::Error> {
    use minilp::{ComparisonOp, OptimizationDirection, Problem};
    let mut p = Problem::new(OptimizationDirection::Minimize);
    let vars: Vec<_> = (0..prob.n_cols())
        .map(|j| p.add_var(prob.cost[j], (prob.col_lo[j], prob.col_hi[j])))
        .collect();
    for row in &prob.rows {
        let expr: Vec<_> = row.coefs.iter().map(|&(j, v)| (vars[j], v)).collect();
        if row.lo == row.hi {
            p.add_constraint(expr.as_slice(), ComparisonOp::Eq, row.lo);
            continue;
        }
        if row.lo.is_finite() {
            p.add_constraint(expr.as_slice(), ComparisonOp::Ge, row.lo);
        }
        if row.hi.is_finite() {
            p.add_constraint(expr.as_slice(), ComparisonOp::Le, row.hi);
        }
    }
    p.solve().map(|s| s.objective())
}

/// Apparent power at the more loaded end of every branch, MVA.
pub fn branch_mva_oracle(case: &GridCase, vm: &[f64], va: &[f64]) -> Vec<f64> {
    let pos = |id: u32| case.buses.iter().position(|b| b.id == id).unwrap();
    let v = |k: usize| Complex64::from_polar(vm[k], va[k]);
    case.branches
        .iter()
        .map(|br| {
            if !br.status {
                return 0.0;
            }
            let (f, t) = (pos(br.from_bus), pos(br.to_bus));
            let ys = Complex64::new(1.0, 0.0) / Complex64::new(br.r, br.x);
            let bc = Complex64::new(0.0, br.b_charging / 2.0);
            let vf = v(f) / br.tap_ratio;
            let i_series = (vf - v(t)) * ys;
            let sf = v(f) * ((i_series + vf * bc) / br.tap_ratio).conj();
            let st = v(t) * (-i_series + v(t) * bc).conj();
            sf.norm().max(st.norm()) * case.base_mva
        })
        .collect()
}
