//! Measurement functions h(x) and their analytic Jacobian.

use nalgebra::DMatrix;

use super::{Measurement, MeasurementKind};
use crate::grid::{branch_admittances, GridCase, Network};
use crate::powerflow::BusState;

/// Element position resolved once per measurement.
#[derive(Clone, Copy, Debug)]
enum Site {
    Branch { k: usize, f: usize, t: usize, live: bool },
    Bus(usize),
}

fn site(case: &GridCase, net: &Network, m: &Measurement) -> Site {
    if m.kind.is_branch() {
        let k = case.branch_index(m.element).expect("validated measurement element");
        let (f, t) = case.terminals(k);
        Site::Branch { k, f, t, live: net.idx.branch_in_service(k) }
    } else {
        Site::Bus(case.bus_index(m.element).expect("validated measurement element"))
    }
}

/// Flow at one branch end. `near`/`far` are bus positions and (g_nn, b_nn),
/// (g_nf, b_nf) the matching two-port admittances.
struct EndTerms {
    vn: f64,
    vf: f64,
    cos: f64,
    sin: f64,
    g_nn: f64,
    b_nn: f64,
    g: f64,
    b: f64,
}

impl EndTerms {
    fn new(case: &GridCase, k: usize, from_end: bool, state: &BusState, f: usize, t: usize) -> (Self, usize, usize) {
        let [yff, yft, ytf, ytt] = branch_admittances(case, k);
        let (near, far, ynn, ynf) = if from_end { (f, t, yff, yft) } else { (t, f, ytt, ytf) };
        let th = state.v_ang[near] - state.v_ang[far];
        (
            EndTerms {
                vn: state.v_mag[near],
                vf: state.v_mag[far],
                cos: th.cos(),
                sin: th.sin(),
                g_nn: ynn.re,
                b_nn: ynn.im,
                g: ynf.re,
                b: ynf.im,
            },
            near,
            far,
        )
    }

    fn p(&self) -> f64 {
        self.g_nn * self.vn * self.vn + self.vn * self.vf * (self.g * self.cos + self.b * self.sin)
    }

    fn q(&self) -> f64 {
        -self.b_nn * self.vn * self.vn + self.vn * self.vf * (self.g * self.sin - self.b * self.cos)
    }
}

/// Model values h(x) for every measurement of `set` (active or not), per unit.
pub fn h_eval(case: &GridCase, net: &Network, measurements: &[Measurement], state: &BusState) -> Vec<f64> {
    let inj = injections(net, state);
    measurements
        .iter()
        .map(|m| match (m.kind, site(case, net, m)) {
            (_, Site::Branch { live: false, .. }) => 0.0,
            (kind, Site::Branch { k, f, t, .. }) => {
                let from_end = matches!(kind, MeasurementKind::BranchPFrom | MeasurementKind::BranchQFrom);
                let (e, _, _) = EndTerms::new(case, k, from_end, state, f, t);
                if kind.is_active_power() {
                    e.p()
                } else {
                    e.q()
                }
            }
            (MeasurementKind::BusPInj, Site::Bus(i)) => inj[i].0,
            (MeasurementKind::BusQInj, Site::Bus(i)) => inj[i].1,
            (MeasurementKind::BusVMag, Site::Bus(i)) => state.v_mag[i],
            _ => unreachable!("kind/element consistency is validated"),
        })
        .collect()
}

/// Bus (P, Q) injections from the polar power-balance sums.
pub fn injections(net: &Network, state: &BusState) -> Vec<(f64, f64)> {
    let y = &net.mats.ybus;
    (0..y.n_rows())
        .map(|i| {
            let mut p = 0.0;
            let mut q = 0.0;
            for &(j, yij) in y.row(i) {
                let th = state.v_ang[i] - state.v_ang[j];
                let (s, c) = th.sin_cos();
                p += state.v_mag[j] * (yij.re * c + yij.im * s);
                q += state.v_mag[j] * (yij.re * s - yij.im * c);
            }
            (state.v_mag[i] * p, state.v_mag[i] * q)
        })
        .collect()
}

/// Full Jacobian dh/dx with columns [θ_0..θ_{n-1}, V_0..V_{n-1}].
pub fn jacobian(case: &GridCase, net: &Network, measurements: &[Measurement], state: &BusState) -> DMatrix<f64> {
    let n = case.n_buses();
    let inj = injections(net, state);
    let y = &net.mats.ybus;
    let mut h = DMatrix::zeros(measurements.len(), 2 * n);
    for (r, m) in measurements.iter().enumerate() {
        match (m.kind, site(case, net, m)) {
            (_, Site::Branch { live: false, .. }) => {}
            (kind, Site::Branch { k, f, t, .. }) => {
                let from_end = matches!(kind, MeasurementKind::BranchPFrom | MeasurementKind::BranchQFrom);
                let (e, near, far) = EndTerms::new(case, k, from_end, state, f, t);
                let gc_bs = e.g * e.cos + e.b * e.sin;
                let gs_bc = e.g * e.sin - e.b * e.cos;
                if kind.is_active_power() {
                    let d_th = e.vn * e.vf * (-e.g * e.sin + e.b * e.cos);
                    h[(r, near)] += d_th;
                    h[(r, far)] -= d_th;
                    h[(r, n + near)] += 2.0 * e.g_nn * e.vn + e.vf * gc_bs;
                    h[(r, n + far)] += e.vn * gc_bs;
                } else {
                    let d_th = e.vn * e.vf * gc_bs;
                    h[(r, near)] += d_th;
                    h[(r, far)] -= d_th;
                    h[(r, n + near)] += -2.0 * e.b_nn * e.vn + e.vf * gs_bc;
                    h[(r, n + far)] += e.vn * gs_bc;
                }
            }
            (MeasurementKind::BusPInj, Site::Bus(i)) => {
                let (pi, qi) = inj[i];
                let vi = state.v_mag[i];
                for &(j, yij) in y.row(i) {
                    if j == i {
                        h[(r, i)] += -qi - yij.im * vi * vi;
                        h[(r, n + i)] += pi / vi + yij.re * vi;
                    } else {
                        let (s, c) = (state.v_ang[i] - state.v_ang[j]).sin_cos();
                        h[(r, j)] += vi * state.v_mag[j] * (yij.re * s - yij.im * c);
                        h[(r, n + j)] += vi * (yij.re * c + yij.im * s);
                    }
                }
            }
            (MeasurementKind::BusQInj, Site::Bus(i)) => {
                let (pi, qi) = inj[i];
                let vi = state.v_mag[i];
                for &(j, yij) in y.row(i) {
                    if j == i {
                        h[(r, i)] += pi - yij.re * vi * vi;
                        h[(r, n + i)] += qi / vi - yij.im * vi;
                    } else {
                        let (s, c) = (state.v_ang[i] - state.v_ang[j]).sin_cos();
                        h[(r, j)] += -vi * state.v_mag[j] * (yij.re * c + yij.im * s);
                        h[(r, n + j)] += vi * (yij.re * s - yij.im * c);
                    }
                }
            }
            (MeasurementKind::BusVMag, Site::Bus(i)) => h[(r, n + i)] = 1.0,
            _ => unreachable!("kind/element consistency is validated"),
        }
    }
    h
}
