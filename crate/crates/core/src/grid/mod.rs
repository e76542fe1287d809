//! Static network model.
//!
//! A [`GridCase`] is parsed once from a case document and never mutated
//! afterwards. Topology changes (outages, switched-off units) are expressed
//! as derived indices ([`LinkNet`]) or as modified copies produced by the
//! `with_*` helpers.

mod matrices;
mod parse;
mod sparse;
mod topology;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub use matrices::{branch_admittances, build_b_prime, build_matrices, build_ybus, NetworkMatrices};
pub use parse::{parse_case, CaseDocument, SCHEMA_VERSION};
pub use sparse::SparseMatrix;
pub use topology::{build_linknet, find_radial_branches, select_reference_bus, Link, LinkNet};

/// Fallback emergency rating as a multiple of the normal rating.
pub const DEFAULT_EMERGENCY_FACTOR: f64 = 1.15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BusType {
    Slack,
    Pv,
    Pq,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Bus {
    pub id: u32,
    pub base_kv: f64,
    pub kind: BusType,
    /// Voltage magnitude (pu). Acts as the set-point at generator buses.
    pub v_mag: f64,
    /// Voltage angle in radians.
    pub v_ang: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub area: u32,
    /// Shunt conductance, MW consumed at 1.0 pu.
    pub g_shunt: f64,
    /// Shunt susceptance, MVAr injected at 1.0 pu.
    pub b_shunt: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Branch {
    pub id: u32,
    pub from_bus: u32,
    pub to_bus: u32,
    pub r: f64,
    pub x: f64,
    pub b_charging: f64,
    /// Off-nominal turns ratio at the from end; 1.0 for lines.
    pub tap_ratio: f64,
    pub status: bool,
    pub s_max: f64,
    pub s_max_emergency: f64,
}

/// One block of a convex piece-wise linear cost curve: output up to
/// `breakpoint` MW is priced at `marginal_cost`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CostSegment {
    pub breakpoint: f64,
    pub marginal_cost: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Generator {
    pub id: u32,
    pub bus: u32,
    /// Scheduled active output, MW.
    pub p: f64,
    /// Reactive output used when the unit is held at a limit, MVAr.
    pub q: f64,
    pub p_min: f64,
    pub p_max: f64,
    pub q_min: f64,
    pub q_max: f64,
    /// MW per minute.
    pub ramp_rate: f64,
    pub cost_curve: Vec<CostSegment>,
    pub reserve_cost: f64,
    pub status: bool,
}

impl Generator {
    /// Widths (MW) of each cost block starting at `p_min`. The last block is
    /// stretched or trimmed so the blocks exactly cover `[p_min, p_max]`.
    pub fn segment_widths(&self) -> Vec<(f64, f64)> {
        let mut out = Vec::with_capacity(self.cost_curve.len());
        let mut lo = self.p_min;
        for (k, seg) in self.cost_curve.iter().enumerate() {
            let last = k + 1 == self.cost_curve.len();
            let hi = if last { self.p_max } else { seg.breakpoint.min(self.p_max) };
            out.push(((hi - lo).max(0.0), seg.marginal_cost));
            lo = hi.max(lo);
        }
        out
    }

    /// Cost in $/h of producing `p` MW on the convex curve, measured from `p_min`.
    pub fn incremental_cost(&self, p: f64) -> f64 {
        let mut remaining = (p - self.p_min).max(0.0);
        let mut cost = 0.0;
        for (width, mc) in self.segment_widths() {
            let used = remaining.min(width);
            cost += used * mc;
            remaining -= used;
        }
        cost
    }

    pub fn max_marginal_cost(&self) -> f64 {
        self.cost_curve
            .iter()
            .map(|s| s.marginal_cost)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Load {
    pub id: u32,
    pub bus: u32,
    pub p: f64,
    pub q: f64,
    pub sheddable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InterfaceDef {
    pub id: u32,
    /// Member branches with their direction sign (+1 or -1).
    pub branches: Vec<(u32, f64)>,
    pub limit_mw: f64,
}

/// Validated static grid model. Element vectors keep file order; internal
/// code addresses elements by position and maps ids with the lookup helpers.
#[derive(Clone, Debug)]
pub struct GridCase {
    pub name: String,
    pub base_mva: f64,
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    pub generators: Vec<Generator>,
    pub loads: Vec<Load>,
    pub interfaces: Vec<InterfaceDef>,
    bus_pos: HashMap<u32, usize>,
    branch_pos: HashMap<u32, usize>,
}

impl GridCase {
    pub(crate) fn assemble(
        name: String,
        base_mva: f64,
        buses: Vec<Bus>,
        branches: Vec<Branch>,
        generators: Vec<Generator>,
        loads: Vec<Load>,
        interfaces: Vec<InterfaceDef>,
    ) -> Self {
        let bus_pos = buses.iter().enumerate().map(|(i, b)| (b.id, i)).collect();
        let branch_pos = branches.iter().enumerate().map(|(i, b)| (b.id, i)).collect();
        GridCase {
            name,
            base_mva,
            buses,
            branches,
            generators,
            loads,
            interfaces,
            bus_pos,
            branch_pos,
        }
    }

    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    pub fn n_branches(&self) -> usize {
        self.branches.len()
    }

    pub fn bus_index(&self, id: u32) -> Option<usize> {
        self.bus_pos.get(&id).copied()
    }

    pub fn branch_index(&self, id: u32) -> Option<usize> {
        self.branch_pos.get(&id).copied()
    }

    /// Positions (from, to) of a branch's terminal buses.
    pub fn terminals(&self, branch: usize) -> (usize, usize) {
        let br = &self.branches[branch];
        (self.bus_pos[&br.from_bus], self.bus_pos[&br.to_bus])
    }

    pub fn generator_bus(&self, gen: usize) -> usize {
        self.bus_pos[&self.generators[gen].bus]
    }

    pub fn load_bus(&self, load: usize) -> usize {
        self.bus_pos[&self.loads[load].bus]
    }

    /// Active and reactive load per bus (MW, MVAr).
    pub fn bus_load(&self) -> (Vec<f64>, Vec<f64>) {
        let mut p = vec![0.0; self.n_buses()];
        let mut q = vec![0.0; self.n_buses()];
        for (k, ld) in self.loads.iter().enumerate() {
            let b = self.load_bus(k);
            p[b] += ld.p;
            q[b] += ld.q;
        }
        (p, q)
    }

    /// Scheduled in-service generation per bus (MW).
    pub fn bus_generation(&self) -> Vec<f64> {
        let mut p = vec![0.0; self.n_buses()];
        for (k, g) in self.generators.iter().enumerate() {
            if g.status {
                p[self.generator_bus(k)] += g.p;
            }
        }
        p
    }

    pub fn total_load(&self) -> f64 {
        self.loads.iter().map(|l| l.p).sum()
    }

    /// Copy of the case with load active powers replaced (order of `self.loads`).
    /// Reactive loads are scaled to keep each load's power factor.
    pub fn with_load_p(&self, p: &[f64]) -> GridCase {
        assert_eq!(p.len(), self.loads.len(), "load vector length mismatch");
        let mut out = self.clone();
        for (ld, &pn) in out.loads.iter_mut().zip(p) {
            if ld.p.abs() > 1e-12 {
                ld.q *= pn / ld.p;
            }
            ld.p = pn;
        }
        out
    }

    /// Copy of the case with every load scaled by `factor`.
    pub fn with_load_scale(&self, factor: f64) -> GridCase {
        let p: Vec<f64> = self.loads.iter().map(|l| l.p * factor).collect();
        self.with_load_p(&p)
    }

    /// Copy of the case with generator schedules replaced (order of `self.generators`).
    pub fn with_dispatch(&self, p: &[f64]) -> GridCase {
        assert_eq!(p.len(), self.generators.len(), "dispatch length mismatch");
        let mut out = self.clone();
        for (g, &pg) in out.generators.iter_mut().zip(p) {
            g.p = pg;
        }
        out
    }

    /// Copy of the case with the given branch positions taken out of service.
    pub fn with_outages(&self, branches: &[usize]) -> GridCase {
        let mut out = self.clone();
        for &k in branches {
            out.branches[k].status = false;
        }
        out
    }

    /// Copy with bus voltage set-points and angles overwritten (warm state).
    pub fn with_bus_state(&self, v_mag: &[f64], v_ang: &[f64]) -> GridCase {
        let mut out = self.clone();
        for (b, (&v, &a)) in out.buses.iter_mut().zip(v_mag.iter().zip(v_ang)) {
            b.v_mag = v;
            b.v_ang = a;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cases;

    #[test]
    fn segment_widths_cover_capacity() {
        let case = cases::case14();
        for g in &case.generators {
            let total: f64 = g.segment_widths().iter().map(|(w, _)| w).sum();
            assert!((total - (g.p_max - g.p_min)).abs() < 1e-9, "gen {}", g.id);
        }
    }

    #[test]
    fn incremental_cost_is_convex_sum() {
        let g = Generator {
            id: 1,
            bus: 1,
            p: 0.0,
            q: 0.0,
            p_min: 10.0,
            p_max: 100.0,
            q_min: -10.0,
            q_max: 10.0,
            ramp_rate: 10.0,
            cost_curve: vec![
                CostSegment { breakpoint: 50.0, marginal_cost: 10.0 },
                CostSegment { breakpoint: 100.0, marginal_cost: 20.0 },
            ],
            reserve_cost: 0.0,
            status: true,
        };
        assert_eq!(g.incremental_cost(10.0), 0.0);
        assert_eq!(g.incremental_cost(50.0), 400.0);
        assert_eq!(g.incremental_cost(70.0), 800.0);
    }

    #[test]
    fn load_replacement_keeps_power_factor() {
        let case = cases::case14();
        let doubled: Vec<f64> = case.loads.iter().map(|l| 2.0 * l.p).collect();
        let c2 = case.with_load_p(&doubled);
        for (a, b) in case.loads.iter().zip(&c2.loads) {
            assert!((b.q - 2.0 * a.q).abs() < 1e-12);
        }
    }
}

/// Topology index and matrices for one switching state of a case.
#[derive(Clone, Debug)]
pub struct Network {
    pub idx: LinkNet,
    pub mats: NetworkMatrices,
}

impl Network {
    pub fn build(case: &GridCase) -> Result<Self, crate::error::TopologyError> {
        let idx = build_linknet(case);
        let mats = build_matrices(case, &idx)?;
        Ok(Network { idx, mats })
    }

    /// Reference bus position for the island containing `bus`.
    pub fn reference_of(&self, bus: usize) -> Option<usize> {
        self.mats.references[self.idx.island_of(bus)]
    }
}
