//! Gauss-Newton WLS solved by row-wise Givens rotations on the weighted
//! Jacobian, the χ² detector, and largest-normalized-residual elimination.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::{h_eval, injections, jacobian, observability_analysis, Measurement, MeasurementSet, ObservabilityResult};
use crate::error::EstimationError;
use crate::grid::{GridCase, Network};
use crate::powerflow::BusState;

/// Above this many active measurements, normalized residuals fall back to
/// r/σ (diagonal R) instead of the full residual covariance.
const FULL_OMEGA_LIMIT: usize = 5000;
const GIVENS_PIVOT_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SeOptions {
    pub max_iter: usize,
    /// Convergence threshold on max |Δx|.
    pub tol: f64,
    pub confidence: f64,
    pub max_eliminations: usize,
}

impl Default for SeOptions {
    fn default() -> Self {
        SeOptions { max_iter: 50, tol: 1e-6, confidence: 0.99, max_eliminations: 25 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualRow {
    pub id: u32,
    pub kind: String,
    pub element: u32,
    pub measured: f64,
    pub estimated: f64,
    pub residual: f64,
    /// |r| / √Ω_ii; zero for critical measurements.
    pub normalized: f64,
    pub critical: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateEstimate {
    pub v_mag: Vec<f64>,
    /// Radians, zero at each observable island's reference.
    pub v_ang: Vec<f64>,
    /// Bus positions that no estimable island covers; their state is left at flat.
    pub unestimated: Vec<usize>,
    pub residuals: Vec<ResidualRow>,
    pub objective: f64,
    pub n_states: usize,
    pub n_measurements: usize,
    pub chi2_threshold: Option<f64>,
    pub bdd_pass: Option<bool>,
    /// Observable islands as bus ids.
    pub observable_islands: Vec<Vec<u32>>,
    pub eliminated: Vec<u32>,
    pub iterations: usize,
    /// Reference bus position per estimated island.
    pub references: Vec<usize>,
    /// Whether the diagonal-R approximation was used for normalized residuals.
    pub approximate_lnr: bool,
}

impl StateEstimate {
    pub fn state(&self) -> BusState {
        BusState { v_mag: self.v_mag.clone(), v_ang: self.v_ang.clone() }
    }

    pub fn dof(&self) -> i64 {
        self.n_measurements as i64 - self.n_states as i64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BddResult {
    pub pass: bool,
    pub objective: f64,
    pub threshold: f64,
    pub dof: usize,
}

pub fn chi2_threshold(dof: usize, confidence: f64) -> f64 {
    ChiSquared::new(dof as f64).expect("positive dof").inverse_cdf(confidence)
}

/// χ² test of J(x̂) at the given confidence with dof = m − n.
pub fn chi2_bdd(est: &StateEstimate, confidence: f64) -> Result<BddResult, EstimationError> {
    if est.dof() <= 0 {
        return Err(EstimationError::InsufficientRedundancy { measurements: est.n_measurements, states: est.n_states });
    }
    let dof = est.dof() as usize;
    let threshold = chi2_threshold(dof, confidence);
    Ok(BddResult { pass: est.objective <= threshold, objective: est.objective, threshold, dof })
}

/// Column layout of the estimated state.
struct StateMap {
    /// Column of θ_b (None at references and unestimated buses).
    theta: Vec<Option<usize>>,
    vmag: Vec<Option<usize>>,
    n: usize,
    references: Vec<usize>,
    unestimated: Vec<usize>,
}

fn state_map(case: &GridCase, net: &Network, obs: &ObservabilityResult, rows: &[Measurement]) -> StateMap {
    let nb = case.n_buses();
    let mut theta = vec![None; nb];
    let mut vmag = vec![None; nb];
    let mut references = Vec::new();
    let mut unestimated = Vec::new();
    let mut n = 0;
    for island in &obs.islands {
        let has_v = rows.iter().any(|m| {
            m.kind == super::MeasurementKind::BusVMag
                && case.bus_index(m.element).is_some_and(|b| obs.island_of[b] == obs.island_of[island[0]])
        });
        if !has_v {
            unestimated.extend_from_slice(island);
            continue;
        }
        let reference = island
            .iter()
            .copied()
            .find(|&b| net.reference_of(b) == Some(b))
            .unwrap_or(island[0]);
        references.push(reference);
        for &b in island {
            if b != reference {
                theta[b] = Some(n);
                n += 1;
            }
        }
        for &b in island {
            vmag[b] = Some(n);
            n += 1;
        }
    }
    StateMap { theta, vmag, n, references, unestimated }
}

/// Upper-triangular factor of the weighted Jacobian built one row at a time.
struct GivensQr {
    r: DMatrix<f64>,
    d: DVector<f64>,
    residual_ss: f64,
}

impl GivensQr {
    fn new(n: usize) -> Self {
        GivensQr { r: DMatrix::zeros(n, n), d: DVector::zeros(n), residual_ss: 0.0 }
    }

    fn add_row(&mut self, mut a: Vec<f64>, mut b: f64) {
        let n = a.len();
        for j in 0..n {
            if a[j] == 0.0 {
                continue;
            }
            let rjj = self.r[(j, j)];
            let h = rjj.hypot(a[j]);
            let (c, s) = (rjj / h, a[j] / h);
            for k in j..n {
                let rjk = self.r[(j, k)];
                self.r[(j, k)] = c * rjk + s * a[k];
                a[k] = -s * rjk + c * a[k];
            }
            let dj = self.d[j];
            self.d[j] = c * dj + s * b;
            b = -s * dj + c * b;
        }
        self.residual_ss += b * b;
    }

    fn is_singular(&self) -> bool {
        let n = self.r.nrows();
        let scale = (0..n).map(|j| self.r[(j, j)].abs()).fold(0.0f64, f64::max).max(1.0);
        (0..n).any(|j| self.r[(j, j)].abs() <= GIVENS_PIVOT_TOL * scale)
    }

    fn back_substitute(&self) -> DVector<f64> {
        let n = self.r.nrows();
        let mut x = DVector::zeros(n);
        for j in (0..n).rev() {
            let mut acc = self.d[j];
            for k in j + 1..n {
                acc -= self.r[(j, k)] * x[k];
            }
            x[j] = acc / self.r[(j, j)];
        }
        x
    }

    /// ‖R⁻ᵀ h‖², i.e. h G⁻¹ hᵀ with G = RᵀR.
    fn projected_norm(&self, h: &[f64]) -> f64 {
        let n = self.r.nrows();
        let mut v = vec![0.0; n];
        for j in 0..n {
            let mut acc = h[j];
            for k in 0..j {
                acc -= self.r[(k, j)] * v[k];
            }
            v[j] = acc / self.r[(j, j)];
        }
        v.iter().map(|x| x * x).sum()
    }
}

fn reduced_row(full: &DMatrix<f64>, r: usize, map: &StateMap) -> Vec<f64> {
    let nb = map.theta.len();
    let mut row = vec![0.0; map.n];
    for b in 0..nb {
        if let Some(c) = map.theta[b] {
            row[c] = full[(r, b)];
        }
        if let Some(c) = map.vmag[b] {
            row[c] = full[(r, nb + b)];
        }
    }
    row
}

fn factorize(full: &DMatrix<f64>, rows: &[Measurement], resid: &[f64], map: &StateMap) -> GivensQr {
    let mut qr = GivensQr::new(map.n);
    for (r, m) in rows.iter().enumerate() {
        let w = 1.0 / m.sigma;
        let a: Vec<f64> = reduced_row(full, r, map).into_iter().map(|v| v * w).collect();
        qr.add_row(a, resid[r] * w);
    }
    qr
}

/// Gauss-Newton WLS from a flat start on every estimable observable island.
pub fn wls_estimate(
    case: &GridCase,
    net: &Network,
    set: &MeasurementSet,
    obs: &ObservabilityResult,
    opts: &SeOptions,
) -> Result<StateEstimate, EstimationError> {
    set.validate(case)?;
    let nb = case.n_buses();
    let rows: Vec<Measurement> =
        set.measurements.iter().filter(|m| m.is_active() && obs.is_relevant(m)).cloned().collect();
    let map = state_map(case, net, obs, &rows);
    // Measurements touching only unestimated buses carry no information.
    let rows: Vec<Measurement> = rows
        .into_iter()
        .filter(|m| {
            let bus = if m.kind.is_branch() {
                case.terminals(case.branch_index(m.element).unwrap()).0
            } else {
                case.bus_index(m.element).unwrap()
            };
            map.vmag[bus].is_some()
        })
        .collect();
    if map.n == 0 {
        return Err(EstimationError::Unobservable);
    }

    let mut state = BusState { v_mag: vec![1.0; nb], v_ang: vec![0.0; nb] };
    let z: Vec<f64> = rows.iter().map(|m| m.value).collect();
    let mut iterations = 0;
    let mut last_step = f64::INFINITY;
    loop {
        if iterations >= opts.max_iter {
            return Err(EstimationError::Diverged {
                iterations,
                last_step,
                last_state: state.v_mag.iter().chain(&state.v_ang).copied().collect(),
            });
        }
        iterations += 1;
        let h = h_eval(case, net, &rows, &state);
        let resid: Vec<f64> = z.iter().zip(&h).map(|(a, b)| a - b).collect();
        let full = jacobian(case, net, &rows, &state);
        let qr = factorize(&full, &rows, &resid, &map);
        if qr.is_singular() {
            return Err(EstimationError::Unobservable);
        }
        let dx = qr.back_substitute();
        for b in 0..nb {
            if let Some(c) = map.theta[b] {
                state.v_ang[b] += dx[c];
            }
            if let Some(c) = map.vmag[b] {
                state.v_mag[b] += dx[c];
            }
        }
        last_step = dx.amax();
        if !last_step.is_finite() {
            return Err(EstimationError::Diverged { iterations, last_step, last_state: Vec::new() });
        }
        if last_step < opts.tol {
            break;
        }
    }

    // Residuals and normalized residuals at the final state.
    let h = h_eval(case, net, &rows, &state);
    let resid: Vec<f64> = z.iter().zip(&h).map(|(a, b)| a - b).collect();
    let full = jacobian(case, net, &rows, &state);
    let qr = factorize(&full, &rows, &resid, &map);
    let approximate = rows.len() > FULL_OMEGA_LIMIT;
    let mut objective = 0.0;
    let residuals: Vec<ResidualRow> = rows
        .iter()
        .enumerate()
        .map(|(r, m)| {
            let ri = resid[r];
            objective += (ri / m.sigma).powi(2);
            let (normalized, critical) = if approximate {
                ((ri / m.sigma).abs(), false)
            } else {
                let hrow = reduced_row(&full, r, &map);
                let omega = m.sigma * m.sigma - qr.projected_norm(&hrow);
                if omega <= 1e-10 * m.sigma * m.sigma {
                    (0.0, true)
                } else {
                    (ri.abs() / omega.sqrt(), false)
                }
            };
            ResidualRow {
                id: m.id,
                kind: m.kind.as_str().into(),
                element: m.element,
                measured: m.value,
                estimated: h[r],
                residual: ri,
                normalized,
                critical,
            }
        })
        .collect();

    let n_states = map.n;
    let dof = rows.len() as i64 - n_states as i64;
    let (chi2, pass) = if dof > 0 {
        let t = chi2_threshold(dof as usize, opts.confidence);
        (Some(t), Some(objective <= t))
    } else {
        (None, None)
    };
    Ok(StateEstimate {
        v_mag: state.v_mag,
        v_ang: state.v_ang,
        unestimated: map.unestimated,
        residuals,
        objective,
        n_states,
        n_measurements: rows.len(),
        chi2_threshold: chi2,
        bdd_pass: pass,
        observable_islands: obs
            .islands
            .iter()
            .map(|isl| isl.iter().map(|&b| case.buses[b].id).collect())
            .collect(),
        eliminated: set.eliminated_ids(),
        iterations,
        references: map.references,
        approximate_lnr: approximate,
    })
}

/// Marks the measurement with the largest normalized residual eliminated.
/// Refuses when that would remove all redundancy or split an observable
/// island.
pub fn eliminate_worst(
    case: &GridCase,
    net: &Network,
    est: &StateEstimate,
    set: &MeasurementSet,
) -> Result<MeasurementSet, EstimationError> {
    let worst = est
        .residuals
        .iter()
        .filter(|r| !r.critical)
        .max_by(|a, b| a.normalized.total_cmp(&b.normalized).then(b.id.cmp(&a.id)));
    let Some(worst) = worst else {
        return Err(EstimationError::BadDataUnresolvable { candidate: 0, eliminated: set.eliminated_ids() });
    };
    let unresolvable =
        || EstimationError::BadDataUnresolvable { candidate: worst.id, eliminated: set.eliminated_ids() };
    if est.dof() - 1 <= 0 {
        return Err(unresolvable());
    }
    let next = set.with_eliminated(worst.id);
    let before = observability_analysis(case, net, set);
    let after = observability_analysis(case, net, &next);
    if after.islands.len() > before.islands.len() {
        return Err(unresolvable());
    }
    Ok(next)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeOutcome {
    pub estimate: StateEstimate,
    pub bdd: BddResult,
    /// Final measurement set with eliminated measurements marked.
    pub set: MeasurementSet,
    /// Eliminated ids in elimination order.
    pub eliminated: Vec<u32>,
}

/// OA → WLS → χ² test, eliminating the worst measurement until the test
/// passes.
pub fn estimate_with_bdd(
    case: &GridCase,
    net: &Network,
    set: &MeasurementSet,
    opts: &SeOptions,
) -> Result<SeOutcome, EstimationError> {
    let mut current = set.clone();
    let mut eliminated = Vec::new();
    loop {
        let obs = observability_analysis(case, net, &current);
        let estimate = wls_estimate(case, net, &current, &obs, opts)?;
        let bdd = chi2_bdd(&estimate, opts.confidence)?;
        if bdd.pass {
            return Ok(SeOutcome { estimate, bdd, set: current, eliminated });
        }
        if eliminated.len() >= opts.max_eliminations {
            return Err(EstimationError::BadDataUnresolvable { candidate: 0, eliminated });
        }
        let next = eliminate_worst(case, net, &estimate, &current)?;
        let newly: Vec<u32> = next.eliminated_ids().into_iter().filter(|id| !current.eliminated_ids().contains(id)).collect();
        eliminated.extend(newly);
        current = next;
    }
}

/// Per-load MW implied by the estimate: bus load = known generation − estimated
/// injection, split over the bus's loads in proportion to their nominal MW.
pub fn estimated_loads(case: &GridCase, net: &Network, est: &StateEstimate, gen_p: &[f64]) -> Vec<f64> {
    let inj = injections(net, &est.state());
    let mut gen_bus = vec![0.0; case.n_buses()];
    for (k, g) in case.generators.iter().enumerate() {
        if g.status {
            gen_bus[case.generator_bus(k)] += gen_p[k];
        }
    }
    let (nominal, _) = case.bus_load();
    let mut count = vec![0usize; case.n_buses()];
    for k in 0..case.loads.len() {
        count[case.load_bus(k)] += 1;
    }
    case.loads
        .iter()
        .enumerate()
        .map(|(k, ld)| {
            let b = case.load_bus(k);
            let bus_load = gen_bus[b] - inj[b].0 * case.base_mva;
            let share = if nominal[b].abs() > 1e-9 { ld.p / nominal[b] } else { 1.0 / count[b] as f64 };
            bus_load * share
        })
        .collect()
}
