//! Bounded-variable revised simplex.
//!
//! Solves `min cᵀx` subject to `lo_i ≤ a_i·x ≤ hi_i` and `l ≤ x ≤ u`. Each
//! row gets a logical variable `s_i = a_i·x` carrying the row bounds, so the
//! working system is `[A −I] (x, s) = 0` with every variable bounded. The
//! basis inverse is kept dense and updated in product form between periodic
//! refactorizations. Phase one adds one artificial per initially violated
//! row and minimizes their sum.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::LpError;

const FEAS_TOL: f64 = 1e-9;
const OPT_TOL: f64 = 1e-9;
const PIVOT_TOL: f64 = 1e-9;
const REFACTOR_EVERY: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LpRow {
    pub coefs: Vec<(usize, f64)>,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LpProblem {
    pub cost: Vec<f64>,
    pub col_lo: Vec<f64>,
    pub col_hi: Vec<f64>,
    pub rows: Vec<LpRow>,
}

impl LpProblem {
    pub fn add_col(&mut self, cost: f64, lo: f64, hi: f64) -> usize {
        self.cost.push(cost);
        self.col_lo.push(lo);
        self.col_hi.push(hi);
        self.cost.len() - 1
    }

    pub fn add_row(&mut self, coefs: Vec<(usize, f64)>, lo: f64, hi: f64) -> usize {
        self.rows.push(LpRow { coefs, lo, hi });
        self.rows.len() - 1
    }

    pub fn n_cols(&self) -> usize {
        self.cost.len()
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    fn check(&self) -> Result<(), LpError> {
        let n = self.n_cols();
        if self.col_lo.len() != n || self.col_hi.len() != n {
            return Err(LpError::Malformed("bound vectors do not match cost length".into()));
        }
        for (j, (&l, &u)) in self.col_lo.iter().zip(&self.col_hi).enumerate() {
            if l > u || l.is_nan() || u.is_nan() || l == f64::INFINITY || u == f64::NEG_INFINITY {
                return Err(LpError::Malformed(format!("column {j} has bounds [{l}, {u}]")));
            }
        }
        for (i, r) in self.rows.iter().enumerate() {
            if r.lo > r.hi || r.lo.is_nan() || r.hi.is_nan() {
                return Err(LpError::Malformed(format!("row {i} has bounds [{}, {}]", r.lo, r.hi)));
            }
            if r.coefs.iter().any(|&(j, v)| j >= n || !v.is_finite()) {
                return Err(LpError::Malformed(format!("row {i} has a bad coefficient")));
            }
        }
        if self.cost.iter().any(|c| !c.is_finite()) {
            return Err(LpError::Malformed("non-finite cost".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimplexOptions {
    pub max_iter: usize,
    /// Consecutive degenerate pivots before switching to Bland's rule.
    pub bland_after: usize,
}

impl Default for SimplexOptions {
    fn default() -> Self {
        SimplexOptions { max_iter: 100_000, bland_after: 1000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LpSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    /// a_i·x per row.
    pub row_activity: Vec<f64>,
    /// ∂objective/∂(active row bound); zero for slack rows.
    pub row_duals: Vec<f64>,
    pub reduced_costs: Vec<f64>,
    /// Σ over nonbasic variables of reduced cost × bound.
    pub dual_objective: f64,
    pub iterations: usize,
    pub bland_used: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Kind {
    Structural(usize),
    Logical(usize),
    Artificial { row: usize, sign: f64 },
}

struct Tableau<'a> {
    prob: &'a LpProblem,
    kinds: Vec<Kind>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    x: Vec<f64>,
    basis: Vec<usize>,
    /// Position in `basis` for basic variables.
    in_basis: Vec<Option<usize>>,
    binv: DMatrix<f64>,
    since_refactor: usize,
    /// Structural columns by row.
    cols: Vec<Vec<(usize, f64)>>,
}

impl<'a> Tableau<'a> {
    fn m(&self) -> usize {
        self.prob.n_rows()
    }

    /// Column of variable `j` in the working system as (row, value) pairs.
    fn column(&self, j: usize) -> Vec<(usize, f64)> {
        match self.kinds[j] {
            Kind::Structural(c) => self.cols[c].clone(),
            Kind::Logical(i) => vec![(i, -1.0)],
            Kind::Artificial { row, sign } => vec![(row, sign)],
        }
    }

    fn ftran(&self, j: usize) -> Vec<f64> {
        let m = self.m();
        let mut out = vec![0.0; m];
        for (r, v) in self.column(j) {
            for i in 0..m {
                out[i] += self.binv[(i, r)] * v;
            }
        }
        out
    }

    fn refactor(&mut self) -> Result<(), LpError> {
        let m = self.m();
        let mut b = DMatrix::zeros(m, m);
        for (k, &j) in self.basis.iter().enumerate() {
            for (r, v) in self.column(j) {
                b[(r, k)] = v;
            }
        }
        self.binv = b.try_inverse().ok_or(LpError::SingularBasis)?;
        self.since_refactor = 0;
        self.recompute_basics();
        Ok(())
    }

    /// x_B = B⁻¹ (−N x_N).
    fn recompute_basics(&mut self) {
        let m = self.m();
        let mut rhs = vec![0.0; m];
        for j in 0..self.kinds.len() {
            if self.in_basis[j].is_some() || self.x[j] == 0.0 {
                continue;
            }
            for (r, v) in self.column(j) {
                rhs[r] -= v * self.x[j];
            }
        }
        for k in 0..m {
            let mut acc = 0.0;
            for r in 0..m {
                acc += self.binv[(k, r)] * rhs[r];
            }
            self.x[self.basis[k]] = acc;
        }
    }

    fn duals(&self, cost: &[f64]) -> Vec<f64> {
        let m = self.m();
        let mut y = vec![0.0; m];
        for (k, &j) in self.basis.iter().enumerate() {
            let cb = cost[j];
            if cb == 0.0 {
                continue;
            }
            for r in 0..m {
                y[r] += cb * self.binv[(k, r)];
            }
        }
        y
    }

    fn reduced_cost(&self, cost: &[f64], y: &[f64], j: usize) -> f64 {
        cost[j] - self.column(j).iter().map(|&(r, v)| y[r] * v).sum::<f64>()
    }

    /// Runs simplex iterations on `cost` until optimal.
    fn optimize(&mut self, cost: &[f64], opts: &SimplexOptions, iters: &mut usize, bland_used: &mut bool) -> Result<(), LpError> {
        let mut degenerate_run = 0usize;
        loop {
            if *iters >= opts.max_iter {
                return Err(LpError::IterationLimit(opts.max_iter));
            }
            let bland = degenerate_run >= opts.bland_after;
            *bland_used |= bland;
            let y = self.duals(cost);

            // Pricing.
            let mut enter: Option<(usize, f64, f64)> = None; // (var, reduced cost, direction)
            for j in 0..self.kinds.len() {
                if self.in_basis[j].is_some() || self.lo[j] == self.hi[j] {
                    continue;
                }
                let d = self.reduced_cost(cost, &y, j);
                let at_lo = self.x[j] <= self.lo[j];
                let at_hi = self.x[j] >= self.hi[j];
                let dir = if d < -OPT_TOL && !at_hi {
                    1.0
                } else if d > OPT_TOL && !at_lo {
                    -1.0
                } else {
                    continue;
                };
                if bland {
                    enter = Some((j, d, dir));
                    break;
                }
                if enter.map_or(true, |(_, best, _)| d.abs() > best.abs()) {
                    enter = Some((j, d, dir));
                }
            }
            let Some((q, _, dir)) = enter else { return Ok(()) };
            *iters += 1;

            // Ratio test.
            let alpha = self.ftran(q);
            let mut theta = self.hi[q] - self.lo[q];
            let mut leave: Option<usize> = None;
            let mut best_pivot = 0.0;
            for (k, &a) in alpha.iter().enumerate() {
                if a.abs() <= PIVOT_TOL {
                    continue;
                }
                let j = self.basis[k];
                // x_j changes by −dir·a·t.
                let rate = -dir * a;
                let limit = if rate < 0.0 {
                    if self.lo[j] == f64::NEG_INFINITY {
                        continue;
                    }
                    ((self.x[j] - self.lo[j]) / -rate).max(0.0)
                } else {
                    if self.hi[j] == f64::INFINITY {
                        continue;
                    }
                    ((self.hi[j] - self.x[j]) / rate).max(0.0)
                };
                let better = match leave {
                    None => limit < theta,
                    Some(cur) => {
                        if bland {
                            limit < theta - FEAS_TOL || (limit <= theta + FEAS_TOL && j < self.basis[cur])
                        } else {
                            limit < theta - FEAS_TOL || (limit <= theta + FEAS_TOL && a.abs() > best_pivot)
                        }
                    }
                };
                if better {
                    theta = limit.min(theta);
                    leave = Some(k);
                    best_pivot = a.abs();
                }
            }
            if theta == f64::INFINITY {
                return Err(LpError::Unbounded { column: q });
            }
            if theta <= 1e-12 {
                degenerate_run += 1;
            } else {
                degenerate_run = 0;
            }

            // Move along the edge.
            self.x[q] += dir * theta;
            for (k, &a) in alpha.iter().enumerate() {
                let j = self.basis[k];
                self.x[j] -= dir * a * theta;
            }

            let Some(r) = leave else {
                // Bound flip: snap the entering variable onto its bound.
                self.x[q] = if dir > 0.0 { self.hi[q] } else { self.lo[q] };
                continue;
            };
            let out = self.basis[r];
            // Snap the leaving variable onto the bound it reached.
            let rate = -dir * alpha[r];
            self.x[out] = if rate < 0.0 { self.lo[out] } else { self.hi[out] };

            // Product-form update of B⁻¹.
            let m = self.m();
            let piv = alpha[r];
            for c in 0..m {
                self.binv[(r, c)] /= piv;
            }
            for i in 0..m {
                if i == r || alpha[i] == 0.0 {
                    continue;
                }
                let f = alpha[i];
                for c in 0..m {
                    let v = self.binv[(r, c)];
                    self.binv[(i, c)] -= f * v;
                }
            }
            self.basis[r] = q;
            self.in_basis[q] = Some(r);
            self.in_basis[out] = None;
            self.since_refactor += 1;
            if self.since_refactor >= REFACTOR_EVERY {
                self.refactor()?;
            }
        }
    }
}

fn initial_value(lo: f64, hi: f64) -> f64 {
    if lo.is_finite() {
        lo
    } else if hi.is_finite() {
        hi
    } else {
        0.0
    }
}

pub fn solve(prob: &LpProblem, opts: &SimplexOptions) -> Result<LpSolution, LpError> {
    prob.check()?;
    let n = prob.n_cols();
    let m = prob.n_rows();
    let mut cols = vec![Vec::new(); n];
    for (i, row) in prob.rows.iter().enumerate() {
        for &(j, v) in &row.coefs {
            if v != 0.0 {
                cols[j].push((i, v));
            }
        }
    }

    let mut kinds: Vec<Kind> = (0..n).map(Kind::Structural).collect();
    let mut lo = prob.col_lo.clone();
    let mut hi = prob.col_hi.clone();
    let mut x: Vec<f64> = (0..n).map(|j| initial_value(lo[j], hi[j])).collect();
    for (i, row) in prob.rows.iter().enumerate() {
        kinds.push(Kind::Logical(i));
        lo.push(row.lo);
        hi.push(row.hi);
        x.push(0.0);
    }
    let mut basis = Vec::with_capacity(m);
    let activity: Vec<f64> = prob
        .rows
        .iter()
        .map(|row| row.coefs.iter().map(|&(j, v)| v * x[j]).sum())
        .collect();
    for (i, row) in prob.rows.iter().enumerate() {
        let s = n + i;
        let a = activity[i];
        if a >= row.lo - FEAS_TOL && a <= row.hi + FEAS_TOL {
            basis.push(s);
        } else {
            // Logical rests on the violated bound; an artificial takes up the gap.
            let b = if a < row.lo { row.lo } else { row.hi };
            x[s] = b;
            let sign = if b > a { 1.0 } else { -1.0 };
            kinds.push(Kind::Artificial { row: i, sign });
            lo.push(0.0);
            hi.push(f64::INFINITY);
            x.push(0.0);
            basis.push(kinds.len() - 1);
        }
    }
    let total = kinds.len();
    let mut in_basis = vec![None; total];
    for (k, &j) in basis.iter().enumerate() {
        in_basis[j] = Some(k);
    }
    let mut t = Tableau {
        prob,
        kinds,
        lo,
        hi,
        x,
        basis,
        in_basis,
        binv: DMatrix::identity(m, m),
        since_refactor: 0,
        cols,
    };
    t.refactor()?;

    let mut iterations = 0;
    let mut bland_used = false;
    let has_artificials = total > n + m;
    if has_artificials {
        let phase1: Vec<f64> = t.kinds.iter().map(|k| if matches!(k, Kind::Artificial { .. }) { 1.0 } else { 0.0 }).collect();
        t.optimize(&phase1, opts, &mut iterations, &mut bland_used)?;
        t.refactor()?;
        let residual: f64 = (n + m..total).map(|j| t.x[j].abs()).sum();
        let scale = 1.0 + prob.rows.iter().map(|r| r.lo.abs().min(r.hi.abs())).filter(|v| v.is_finite()).fold(0.0, f64::max);
        if residual > 1e-7 * scale {
            return Err(LpError::Infeasible { residual });
        }
        for j in n + m..total {
            t.lo[j] = 0.0;
            t.hi[j] = 0.0;
            if t.in_basis[j].is_none() {
                t.x[j] = 0.0;
            }
        }
    }

    let mut cost = prob.cost.clone();
    cost.resize(total, 0.0);
    t.optimize(&cost, opts, &mut iterations, &mut bland_used)?;
    t.refactor()?;

    let y = t.duals(&cost);
    let xs: Vec<f64> = t.x[..n].to_vec();
    let objective: f64 = prob.cost.iter().zip(&xs).map(|(c, v)| c * v).sum();
    let row_activity: Vec<f64> = prob.rows.iter().map(|row| row.coefs.iter().map(|&(j, v)| v * xs[j]).sum()).collect();
    let reduced_costs: Vec<f64> = (0..n).map(|j| if t.in_basis[j].is_some() { 0.0 } else { t.reduced_cost(&cost, &y, j) }).collect();

    // Dual objective from the bounds the nonbasic variables rest on.
    let mut dual_objective = 0.0;
    for j in 0..total {
        if t.in_basis[j].is_some() {
            continue;
        }
        let d = t.reduced_cost(&cost, &y, j);
        let bound = if t.lo[j] == t.hi[j] {
            t.lo[j]
        } else if (t.x[j] - t.lo[j]).abs() <= (t.x[j] - t.hi[j]).abs() {
            t.lo[j]
        } else {
            t.hi[j]
        };
        if bound.is_finite() {
            dual_objective += d * bound;
        }
    }
    // Row dual = reduced cost of its logical.
    let row_duals: Vec<f64> = (0..m).map(|i| if t.in_basis[n + i].is_some() { 0.0 } else { y[i] }).collect();

    Ok(LpSolution { x: xs, objective, row_activity, row_duals, reduced_costs, dual_objective, iterations, bland_used })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lp(cost: &[f64], bounds: &[(f64, f64)], rows: &[(&[(usize, f64)], f64, f64)]) -> LpProblem {
        let mut p = LpProblem::default();
        for (c, (l, u)) in cost.iter().zip(bounds) {
            p.add_col(*c, *l, *u);
        }
        for (coefs, l, u) in rows {
            p.add_row(coefs.to_vec(), *l, *u);
        }
        p
    }

    #[test]
    fn single_generator_serves_load() {
        let p = lp(&[20.0], &[(0.0, 100.0)], &[(&[(0, 1.0)], 50.0, 50.0)]);
        let s = solve(&p, &SimplexOptions::default()).unwrap();
        assert!((s.x[0] - 50.0).abs() < 1e-9);
        assert!((s.objective - 1000.0).abs() < 1e-9);
        assert!((s.row_duals[0] - 20.0).abs() < 1e-9);
    }

    #[test]
    fn merit_order_split() {
        let p = lp(&[20.0, 30.0], &[(0.0, 100.0), (0.0, 100.0)], &[(&[(0, 1.0), (1, 1.0)], 120.0, 120.0)]);
        let s = solve(&p, &SimplexOptions::default()).unwrap();
        assert!((s.x[0] - 100.0).abs() < 1e-9);
        assert!((s.x[1] - 20.0).abs() < 1e-9);
        assert!((s.objective - 2600.0).abs() < 1e-9);
        assert!((s.dual_objective - s.objective).abs() < 1e-9);
    }

    #[test]
    fn infeasible_and_unbounded_are_reported() {
        let p = lp(&[1.0], &[(0.0, 10.0)], &[(&[(0, 1.0)], 20.0, 30.0)]);
        assert!(matches!(solve(&p, &SimplexOptions::default()), Err(LpError::Infeasible { .. })));
        let p = lp(&[-1.0], &[(0.0, f64::INFINITY)], &[]);
        assert!(matches!(solve(&p, &SimplexOptions::default()), Err(LpError::Unbounded { .. })));
    }

    #[test]
    fn free_variables_and_ranges() {
        // min x + 2y, x - y ∈ [-1, 1], x + y ≥ 4, x, y free.
        let inf = f64::INFINITY;
        let p = lp(
            &[1.0, 2.0],
            &[(-inf, inf), (-inf, inf)],
            &[(&[(0, 1.0), (1, -1.0)], -1.0, 1.0), (&[(0, 1.0), (1, 1.0)], 4.0, inf)],
        );
        let s = solve(&p, &SimplexOptions::default()).unwrap();
        assert!((s.x[0] - 2.5).abs() < 1e-9 && (s.x[1] - 1.5).abs() < 1e-9, "{:?}", s.x);
        assert!((s.objective - 5.5).abs() < 1e-9);
        assert!((s.dual_objective - 5.5).abs() < 1e-9);
    }

    #[test]
    fn malformed_bounds_rejected() {
        let p = lp(&[1.0], &[(2.0, 1.0)], &[]);
        assert!(matches!(solve(&p, &SimplexOptions::default()), Err(LpError::Malformed(_))));
    }
}
