use serde::{Deserialize, Serialize};

use super::{derate_branch, distribute_losses, DeratedLimit, FlowModel, ReserveRequirement, ScedOptions};
use crate::error::ScedError;
use crate::grid::{GridCase, Network};
use crate::lp::LpProblem;
use crate::powerflow::{BranchFlow, PowerFlowSolution};
use crate::rtca::RtcaReport;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ColumnRole {
    Segment { gen: usize, segment: usize },
    GenMinSlack { gen: usize },
    Reserve { gen: usize },
    ShedBase { load: usize },
    ShedContingency { load: usize, outage: u32 },
    ReferenceBackdown { outage: u32 },
    OverflowUp { row: usize },
    OverflowDown { row: usize },
    ReserveShortfall,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RowRole {
    Balance { island: usize },
    Ramp { gen: usize },
    Headroom { gen: usize },
    /// `lost_gen` is set for the per-unit rows of the largest-unit rule.
    ReserveCover { lost_gen: Option<usize> },
    Flow { branch: u32, outage: Option<u32> },
    ContingencyBalance { outage: u32 },
    Interface { id: u32 },
}

/// Modeled MW flow `constant + Σ coef·x` with its limit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowExpr {
    /// Branch id, or interface id for interface rows.
    pub branch: u32,
    pub outage: Option<u32>,
    pub constant: f64,
    pub coefs: Vec<(usize, f64)>,
    pub limit_mw: f64,
    pub derate_floored: bool,
    pub row: usize,
}

impl FlowExpr {
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.constant + self.coefs.iter().map(|&(j, v)| v * x[j]).sum::<f64>()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScedProblem {
    pub lp: LpProblem,
    pub columns: Vec<ColumnRole>,
    pub rows: Vec<RowRole>,
    pub flows: Vec<FlowExpr>,
    pub interfaces: Vec<FlowExpr>,
    /// Per gen: segment columns, gen-min slack and reserve columns.
    pub gen_segments: Vec<Vec<usize>>,
    pub gen_min_slack: Vec<Option<usize>>,
    pub reserve: Vec<Option<usize>>,
    pub shed_base: Vec<Option<usize>>,
    /// Per critical outage: shed column per load.
    pub shed_contingency: Vec<(u32, Vec<Option<usize>>)>,
    pub shortfall: Option<usize>,
    /// Output before re-dispatch, MW.
    pub p_prev: Vec<f64>,
    pub virtual_loads: Vec<f64>,
    pub total_loss_mw: f64,
    pub contingencies: Vec<u32>,
    pub notes: Vec<String>,
}

impl ScedProblem {
    /// Generator outputs implied by a column vector.
    pub fn gen_output(&self, case: &GridCase, x: &[f64]) -> Vec<f64> {
        case.generators
            .iter()
            .enumerate()
            .map(|(g, gen)| {
                if !gen.status {
                    return 0.0;
                }
                let seg: f64 = self.gen_segments[g].iter().map(|&j| x[j]).sum();
                let slack = self.gen_min_slack[g].map_or(0.0, |j| x[j]);
                gen.p_min + seg - slack
            })
            .collect()
    }

    /// Column vector reproducing the pre-dispatch outputs with no slacks;
    /// at this point every anchored flow equals its AC value.
    pub fn anchor_point(&self, case: &GridCase) -> Vec<f64> {
        let mut x = vec![0.0; self.lp.n_cols()];
        for (g, gen) in case.generators.iter().enumerate() {
            if !gen.status {
                continue;
            }
            let mut rest = self.p_prev[g] - gen.p_min;
            if rest < 0.0 {
                if let Some(j) = self.gen_min_slack[g] {
                    x[j] = -rest;
                }
                rest = 0.0;
            }
            for &j in &self.gen_segments[g] {
                // The last segment absorbs any remainder beyond the curve.
                let take = if j == *self.gen_segments[g].last().unwrap() { rest } else { rest.min(self.lp.col_hi[j]) };
                x[j] = take;
                rest -= take;
            }
        }
        x
    }
}

struct Builder {
    lp: LpProblem,
    columns: Vec<ColumnRole>,
    rows: Vec<RowRole>,
}

impl Builder {
    fn col(&mut self, role: ColumnRole, cost: f64, lo: f64, hi: f64) -> usize {
        self.columns.push(role);
        self.lp.add_col(cost, lo, hi)
    }

    fn row(&mut self, role: RowRole, coefs: Vec<(usize, f64)>, lo: f64, hi: f64) -> usize {
        self.rows.push(role);
        self.lp.add_row(coefs, lo, hi)
    }
}

/// Linear injection at each bus: constant MW plus (column, coefficient) terms.
struct Injections {
    constant: Vec<f64>,
    terms: Vec<Vec<(usize, f64)>>,
}

impl Injections {
    fn flow(&self, sens: &[f64], base: f64) -> (f64, Vec<(usize, f64)>) {
        let mut constant = base;
        let mut coefs: Vec<(usize, f64)> = Vec::new();
        for (j, &s) in sens.iter().enumerate() {
            if s == 0.0 {
                continue;
            }
            constant += s * self.constant[j];
            for &(c, v) in &self.terms[j] {
                coefs.push((c, s * v));
            }
        }
        coefs.sort_by_key(|t| t.0);
        coefs.dedup_by(|a, b| {
            if a.0 == b.0 {
                b.1 += a.1;
                true
            } else {
                false
            }
        });
        coefs.retain(|t| t.1.abs() > 1e-14);
        (constant, coefs)
    }
}

/// MW limit for the modeled from-end flow. Anchored rows also give up the
/// branch's present loss so the receiving end stays within the rating.
fn line_limit(rating: f64, f: &BranchFlow, opts: &ScedOptions) -> DeratedLimit {
    let rating = rating * (1.0 - opts.limit_margin);
    let mut limit = if opts.derate {
        derate_branch(rating, f.q_from, f.q_to)
    } else {
        DeratedLimit { limit_mw: rating, floored: false }
    };
    if opts.flow_model == FlowModel::AcAnchored {
        limit.limit_mw = (limit.limit_mw - f.loss().abs()).max(super::DERATE_FLOOR * rating);
    }
    limit
}

pub fn build_problem(
    case: &GridCase,
    net: &Network,
    base: &PowerFlowSolution,
    rtca: &RtcaReport,
    opts: &ScedOptions,
) -> Result<ScedProblem, ScedError> {
    let n = case.n_buses();
    let anchored = opts.flow_model == FlowModel::AcAnchored;
    let mut b = Builder { lp: LpProblem::default(), columns: Vec::new(), rows: Vec::new() };
    let mut notes = vec![
        "energy priced per convex cost segment above p_min".to_string(),
        "losses enter the balance as per-bus virtual loads".to_string(),
        "contingency rows are preventive; per-contingency shedding is matched by reference-unit back-down".to_string(),
        "spinning reserve is a single system product bounded by headroom and ramp".to_string(),
        "branch and interface rows carry penalized overflow slacks so the LP is always feasible".to_string(),
    ];

    let p_prev: Vec<f64> = case
        .generators
        .iter()
        .enumerate()
        .map(|(g, gen)| if gen.status { base.gen_p.get(g).copied().unwrap_or(gen.p) } else { 0.0 })
        .collect();

    // Generator columns.
    let n_gen = case.generators.len();
    let mut gen_segments = vec![Vec::new(); n_gen];
    let mut gen_min_slack = vec![None; n_gen];
    for (g, gen) in case.generators.iter().enumerate() {
        if !gen.status {
            continue;
        }
        for (s, (width, cost)) in gen.segment_widths().into_iter().enumerate() {
            gen_segments[g].push(b.col(ColumnRole::Segment { gen: g, segment: s }, cost, 0.0, width));
        }
        if gen.p_min > 0.0 {
            gen_min_slack[g] =
                Some(b.col(ColumnRole::GenMinSlack { gen: g }, opts.penalty_gen_min_slack, 0.0, gen.p_min));
        }
    }
    let gen_terms = |g: usize| -> Vec<(usize, f64)> {
        let mut t: Vec<(usize, f64)> = gen_segments[g].iter().map(|&j| (j, 1.0)).collect();
        if let Some(j) = gen_min_slack[g] {
            t.push((j, -1.0));
        }
        t
    };

    let with_reserve = opts.reserve_requirement != ReserveRequirement::None;
    let mut reserve = vec![None; n_gen];
    if with_reserve {
        for (g, gen) in case.generators.iter().enumerate() {
            if gen.status {
                let cap = (gen.p_max - gen.p_min).min(gen.ramp_rate * opts.reserve_ramp_minutes).max(0.0);
                reserve[g] = Some(b.col(ColumnRole::Reserve { gen: g }, gen.reserve_cost, 0.0, cap));
            }
        }
    }

    let sheddable = |l: usize| case.loads[l].sheddable && case.loads[l].p > 0.0;
    let mut shed_base = vec![None; case.loads.len()];
    for l in 0..case.loads.len() {
        if sheddable(l) {
            shed_base[l] = Some(b.col(ColumnRole::ShedBase { load: l }, opts.penalty_load_shed, 0.0, case.loads[l].p));
        }
    }

    // Balance per energized island.
    let virtual_loads = distribute_losses(case, base, opts.loss_option);
    let (load_p, _) = case.bus_load();
    for (island, members) in net.idx.islands().iter().enumerate() {
        if net.mats.references[island].is_none() {
            continue;
        }
        let mut coefs = Vec::new();
        let mut rhs = 0.0;
        for &bus in members {
            rhs += load_p[bus] + virtual_loads[bus];
        }
        for (g, gen) in case.generators.iter().enumerate() {
            if gen.status && net.idx.island_of(case.generator_bus(g)) == island {
                coefs.extend(gen_terms(g));
                rhs -= gen.p_min;
            }
        }
        for (l, col) in shed_base.iter().enumerate() {
            if let Some(j) = *col {
                if net.idx.island_of(case.load_bus(l)) == island {
                    coefs.push((j, 1.0));
                }
            }
        }
        b.row(RowRole::Balance { island }, coefs, rhs, rhs);
    }

    if opts.enforce_ramp {
        for (g, gen) in case.generators.iter().enumerate() {
            if !gen.status {
                continue;
            }
            let r = gen.ramp_rate * opts.dispatch_interval;
            let lo = (p_prev[g] - r).clamp(0.0, gen.p_max);
            let hi = (p_prev[g] + r).clamp(lo, gen.p_max);
            b.row(RowRole::Ramp { gen: g }, gen_terms(g), lo - gen.p_min, hi - gen.p_min);
        }
    }

    let mut shortfall = None;
    if with_reserve {
        for (g, gen) in case.generators.iter().enumerate() {
            if let Some(r) = reserve[g] {
                let mut coefs = gen_terms(g);
                coefs.push((r, 1.0));
                b.row(RowRole::Headroom { gen: g }, coefs, f64::NEG_INFINITY, gen.p_max - gen.p_min);
            }
        }
        let s = b.col(ColumnRole::ReserveShortfall, opts.penalty_reserve_shortfall, 0.0, f64::INFINITY);
        shortfall = Some(s);
        match opts.reserve_requirement {
            ReserveRequirement::Fixed(mw) => {
                let mut coefs: Vec<(usize, f64)> = reserve.iter().flatten().map(|&j| (j, 1.0)).collect();
                coefs.push((s, 1.0));
                b.row(RowRole::ReserveCover { lost_gen: None }, coefs, mw, f64::INFINITY);
            }
            ReserveRequirement::LargestOnlineUnit => {
                for (g, gen) in case.generators.iter().enumerate() {
                    if !gen.status {
                        continue;
                    }
                    let mut coefs: Vec<(usize, f64)> = reserve
                        .iter()
                        .enumerate()
                        .filter(|&(h, _)| h != g)
                        .filter_map(|(_, r)| r.map(|j| (j, 1.0)))
                        .collect();
                    coefs.extend(gen_terms(g).into_iter().map(|(j, v)| (j, -v)));
                    coefs.push((s, 1.0));
                    b.row(RowRole::ReserveCover { lost_gen: Some(g) }, coefs, gen.p_min, f64::INFINITY);
                }
            }
            ReserveRequirement::None => unreachable!(),
        }
    }

    // Injection model per bus.
    let mut inj = Injections { constant: vec![0.0; n], terms: vec![Vec::new(); n] };
    for (g, gen) in case.generators.iter().enumerate() {
        if !gen.status {
            continue;
        }
        let bus = case.generator_bus(g);
        inj.constant[bus] += if anchored { gen.p_min - p_prev[g] } else { gen.p_min };
        inj.terms[bus].extend(gen_terms(g));
    }
    for (l, col) in shed_base.iter().enumerate() {
        if let Some(j) = *col {
            inj.terms[case.load_bus(l)].push((j, 1.0));
        }
    }
    if !anchored {
        for bus in 0..n {
            inj.constant[bus] -= load_p[bus] + virtual_loads[bus];
        }
    }

    let monitored = |k: usize, rating: f64| case.branches[k].status && rating > 0.0 && rating.is_finite();
    let mut flows = Vec::new();
    let mut add_flow_row = |b: &mut Builder,
                            branch: usize,
                            outage: Option<u32>,
                            constant: f64,
                            coefs: Vec<(usize, f64)>,
                            limit: DeratedLimit| {
        let row_index = b.rows.len();
        let up = b.col(ColumnRole::OverflowUp { row: row_index }, opts.penalty_overflow, 0.0, f64::INFINITY);
        let down = b.col(ColumnRole::OverflowDown { row: row_index }, opts.penalty_overflow, 0.0, f64::INFINITY);
        let mut row_coefs = coefs.clone();
        row_coefs.push((up, -1.0));
        row_coefs.push((down, 1.0));
        let id = case.branches[branch].id;
        let row = b.row(
            RowRole::Flow { branch: id, outage },
            row_coefs,
            -limit.limit_mw - constant,
            limit.limit_mw - constant,
        );
        flows.push(FlowExpr {
            branch: id,
            outage,
            constant,
            coefs,
            limit_mw: limit.limit_mw,
            derate_floored: limit.floored,
            row,
        });
    };

    // Base-case flow rows.
    let mut base_exprs: Vec<Option<(f64, Vec<(usize, f64)>)>> = vec![None; case.n_branches()];
    for k in 0..case.n_branches() {
        let br = &case.branches[k];
        let rating = if opts.base_uses_emergency { br.s_max_emergency } else { br.s_max };
        if !case.branches[k].status {
            continue;
        }
        let sens: Vec<f64> = net.mats.ptdf.row(k).iter().copied().collect();
        let anchor = if anchored { base.branches[k].p_from } else { 0.0 };
        let (constant, coefs) = inj.flow(&sens, anchor);
        base_exprs[k] = Some((constant, coefs.clone()));
        if !monitored(k, rating) {
            continue;
        }
        let f = &base.branches[k];
        let limit = line_limit(rating, f, opts);
        add_flow_row(&mut b, k, None, constant, coefs, limit);
    }

    // Contingency blocks for critical outages only.
    let mut shed_contingency = Vec::new();
    let mut contingencies = Vec::new();
    if opts.security {
        for &outage in &rtca.critical {
            let o = case.branch_index(outage).ok_or(ScedError::UnknownBranch(outage))?;
            let result = rtca.result(outage).ok_or(ScedError::UnknownBranch(outage))?;
            if result.flows.len() != case.n_branches() {
                return Err(ScedError::UnknownBranch(outage));
            }
            if !case.branches[o].status {
                continue;
            }
            contingencies.push(outage);
            let island = net.idx.island_of(case.terminals(o).0);
            let ac_ok = result.converged && !result.dead_island;
            if !ac_ok {
                notes.push(format!("outage {outage}: AC solve failed, contingency flows anchored on LODF estimates"));
            }

            // Corrective shedding balanced by the reference unit.
            let mut cols = vec![None; case.loads.len()];
            let mut terms = inj.terms.clone();
            let mut coefs = Vec::new();
            for l in 0..case.loads.len() {
                if sheddable(l) && net.idx.island_of(case.load_bus(l)) == island {
                    let j = b.col(
                        ColumnRole::ShedContingency { load: l, outage },
                        opts.penalty_load_shed,
                        0.0,
                        case.loads[l].p,
                    );
                    cols[l] = Some(j);
                    terms[case.load_bus(l)].push((j, 1.0));
                    coefs.push((j, 1.0));
                }
            }
            let ref_cap: f64 = net.mats.references[island]
                .map(|r| {
                    case.generators
                        .iter()
                        .enumerate()
                        .filter(|(g, gen)| gen.status && case.generator_bus(*g) == r)
                        .map(|(_, gen)| gen.p_max)
                        .sum()
                })
                .unwrap_or(0.0);
            let rho = b.col(ColumnRole::ReferenceBackdown { outage }, 0.0, 0.0, ref_cap);
            coefs.push((rho, -1.0));
            b.row(RowRole::ContingencyBalance { outage }, coefs, 0.0, 0.0);
            shed_contingency.push((outage, cols));
            let inj_c = Injections { constant: inj.constant.clone(), terms };

            for k in 0..case.n_branches() {
                let rating = case.branches[k].s_max_emergency;
                if k == o || !monitored(k, rating) {
                    continue;
                }
                let sens = net.mats.post_outage_ptdf_row(k, o);
                let (anchor, reactive) = if !anchored {
                    (0.0, &base.branches[k])
                } else if ac_ok {
                    (result.flows[k].p_from, &result.flows[k])
                } else {
                    let f = &base.branches[k];
                    (f.p_from + net.mats.lodf[(k, o)] * base.branches[o].p_from, f)
                };
                let (constant, coefs) = inj_c.flow(&sens, anchor);
                let limit = line_limit(rating, reactive, opts);
                add_flow_row(&mut b, k, Some(outage), constant, coefs, limit);
            }
        }
    }

    // Interfaces on base-case modeled flows.
    let mut interfaces = Vec::new();
    for def in &case.interfaces {
        let mut constant = 0.0;
        let mut coefs: Vec<(usize, f64)> = Vec::new();
        for &(id, sign) in &def.branches {
            let k = case.branch_index(id).ok_or(ScedError::UnknownBranch(id))?;
            if let Some((c, terms)) = &base_exprs[k] {
                constant += sign * c;
                coefs.extend(terms.iter().map(|&(j, v)| (j, sign * v)));
            }
        }
        let row_index = b.rows.len();
        let up = b.col(ColumnRole::OverflowUp { row: row_index }, opts.penalty_overflow, 0.0, f64::INFINITY);
        let down = b.col(ColumnRole::OverflowDown { row: row_index }, opts.penalty_overflow, 0.0, f64::INFINITY);
        let mut row_coefs = coefs.clone();
        row_coefs.push((up, -1.0));
        row_coefs.push((down, 1.0));
        let row = b.row(
            RowRole::Interface { id: def.id },
            row_coefs,
            -def.limit_mw - constant,
            def.limit_mw - constant,
        );
        interfaces.push(FlowExpr {
            branch: def.id,
            outage: None,
            constant,
            coefs,
            limit_mw: def.limit_mw,
            derate_floored: false,
            row,
        });
    }

    Ok(ScedProblem {
        lp: b.lp,
        columns: b.columns,
        rows: b.rows,
        flows,
        interfaces,
        gen_segments,
        gen_min_slack,
        reserve,
        shed_base,
        shed_contingency,
        shortfall,
        p_prev,
        virtual_loads,
        total_loss_mw: base.total_loss_mw,
        contingencies,
        notes,
    })
}
