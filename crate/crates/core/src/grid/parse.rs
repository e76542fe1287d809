use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::{
    Branch, Bus, BusType, CostSegment, Generator, GridCase, InterfaceDef, Load,
    DEFAULT_EMERGENCY_FACTOR,
};
use crate::error::CaseError;

pub const SCHEMA_VERSION: u32 = 1;

/// On-disk case document. Angles are in degrees here and radians in
/// [`GridCase`].
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseDocument {
    pub schema_version: u32,
    #[serde(default)]
    pub name: String,
    pub base_mva: f64,
    pub buses: Vec<BusDoc>,
    pub branches: Vec<BranchDoc>,
    pub generators: Vec<GeneratorDoc>,
    #[serde(default)]
    pub loads: Vec<LoadDoc>,
    #[serde(default)]
    pub interfaces: Vec<InterfaceDoc>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BusDoc {
    pub id: u32,
    pub base_kv: f64,
    #[serde(rename = "type")]
    pub kind: BusType,
    #[serde(default = "one")]
    pub v_mag: f64,
    #[serde(default)]
    pub v_ang: f64,
    #[serde(default = "v_lo")]
    pub v_min: f64,
    #[serde(default = "v_hi")]
    pub v_max: f64,
    #[serde(default = "one_u32")]
    pub area: u32,
    #[serde(default)]
    pub g_shunt: f64,
    #[serde(default)]
    pub b_shunt: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchDoc {
    pub id: u32,
    pub from_bus: u32,
    pub to_bus: u32,
    #[serde(default)]
    pub r: f64,
    pub x: f64,
    #[serde(default)]
    pub b_charging: f64,
    #[serde(default = "one")]
    pub tap_ratio: f64,
    #[serde(default = "yes")]
    pub status: bool,
    pub s_max: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s_max_emergency: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorDoc {
    pub id: u32,
    pub bus: u32,
    #[serde(default)]
    pub p: f64,
    #[serde(default)]
    pub q: f64,
    #[serde(default)]
    pub p_min: f64,
    pub p_max: f64,
    pub q_min: f64,
    pub q_max: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ramp_rate: Option<f64>,
    /// `[breakpoint_mw, marginal_cost]` pairs.
    pub cost_curve: Vec<[f64; 2]>,
    #[serde(default)]
    pub reserve_cost: f64,
    #[serde(default = "yes")]
    pub status: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadDoc {
    pub id: u32,
    pub bus: u32,
    pub p: f64,
    #[serde(default)]
    pub q: f64,
    #[serde(default = "yes")]
    pub sheddable: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterfaceDoc {
    pub id: u32,
    /// `[branch_id, direction]` pairs.
    pub branches: Vec<(u32, f64)>,
    pub limit_mw: f64,
}

fn one() -> f64 {
    1.0
}
fn one_u32() -> u32 {
    1
}
fn v_lo() -> f64 {
    0.9
}
fn v_hi() -> f64 {
    1.1
}
fn yes() -> bool {
    true
}

/// Parses and validates a JSON case document.
pub fn parse_case(text: &str) -> Result<GridCase, CaseError> {
    let doc: CaseDocument = serde_json::from_str(text).map_err(|e| CaseError::Syntax {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    doc.into_case()
}

fn semantic(element: impl Into<String>, message: impl Into<String>) -> CaseError {
    CaseError::Semantic { element: element.into(), message: message.into() }
}

fn finite(element: &str, field: &str, v: f64) -> Result<(), CaseError> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(semantic(element, format!("field `{field}` is not finite")))
    }
}

impl CaseDocument {
    pub fn into_case(self) -> Result<GridCase, CaseError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(CaseError::UnsupportedSchema(self.schema_version));
        }
        if !(self.base_mva > 0.0 && self.base_mva.is_finite()) {
            return Err(semantic("case", "base_mva must be positive"));
        }

        let mut bus_ids = HashSet::new();
        let mut buses = Vec::with_capacity(self.buses.len());
        for b in &self.buses {
            let el = format!("bus {}", b.id);
            if !bus_ids.insert(b.id) {
                return Err(semantic(el, "duplicate bus id"));
            }
            for (f, v) in [("v_mag", b.v_mag), ("v_ang", b.v_ang), ("base_kv", b.base_kv)] {
                finite(&el, f, v)?;
            }
            if b.v_min >= b.v_max {
                return Err(semantic(el, "v_min must be below v_max"));
            }
            buses.push(Bus {
                id: b.id,
                base_kv: b.base_kv,
                kind: b.kind,
                v_mag: b.v_mag,
                v_ang: b.v_ang.to_radians(),
                v_min: b.v_min,
                v_max: b.v_max,
                area: b.area,
                g_shunt: b.g_shunt,
                b_shunt: b.b_shunt,
            });
        }
        if buses.is_empty() {
            return Err(semantic("case", "no buses"));
        }

        let need_bus = |el: &str, id: u32| -> Result<(), CaseError> {
            if bus_ids.contains(&id) {
                Ok(())
            } else {
                Err(semantic(el, format!("references unknown bus {id}")))
            }
        };

        let mut branch_ids = HashSet::new();
        let mut branches = Vec::with_capacity(self.branches.len());
        for br in &self.branches {
            let el = format!("branch {}", br.id);
            if !branch_ids.insert(br.id) {
                return Err(semantic(el, "duplicate branch id"));
            }
            need_bus(&el, br.from_bus)?;
            need_bus(&el, br.to_bus)?;
            if br.from_bus == br.to_bus {
                return Err(semantic(el, "from_bus equals to_bus"));
            }
            for (f, v) in [("r", br.r), ("x", br.x), ("b_charging", br.b_charging)] {
                finite(&el, f, v)?;
            }
            if br.x == 0.0 {
                return Err(semantic(el, "reactance x must be non-zero"));
            }
            if !(br.s_max > 0.0) {
                return Err(semantic(el, "s_max must be positive"));
            }
            let emergency = br.s_max_emergency.unwrap_or(DEFAULT_EMERGENCY_FACTOR * br.s_max);
            if emergency < br.s_max {
                return Err(semantic(el, "s_max_emergency must not be below s_max"));
            }
            let tap = if br.tap_ratio == 0.0 { 1.0 } else { br.tap_ratio };
            branches.push(Branch {
                id: br.id,
                from_bus: br.from_bus,
                to_bus: br.to_bus,
                r: br.r,
                x: br.x,
                b_charging: br.b_charging,
                tap_ratio: tap,
                status: br.status,
                s_max: br.s_max,
                s_max_emergency: emergency,
            });
        }

        let mut gen_ids = HashSet::new();
        let mut generators = Vec::with_capacity(self.generators.len());
        for g in &self.generators {
            let el = format!("generator {}", g.id);
            if !gen_ids.insert(g.id) {
                return Err(semantic(el, "duplicate generator id"));
            }
            need_bus(&el, g.bus)?;
            if g.p_min > g.p_max {
                return Err(semantic(el, "p_min exceeds p_max"));
            }
            if g.q_min > g.q_max {
                return Err(semantic(el, "q_min exceeds q_max"));
            }
            if g.cost_curve.is_empty() {
                return Err(semantic(el, "empty cost curve"));
            }
            let mut prev_bp = g.p_min;
            let mut prev_mc = f64::NEG_INFINITY;
            for (k, [bp, mc]) in g.cost_curve.iter().copied().enumerate() {
                finite(&el, "cost_curve", bp)?;
                finite(&el, "cost_curve", mc)?;
                if k + 1 < g.cost_curve.len() && bp <= prev_bp {
                    return Err(semantic(el, "cost curve breakpoints must increase from p_min"));
                }
                if mc < prev_mc {
                    return Err(semantic(
                        el,
                        "non-convex cost curve: marginal costs must not decrease",
                    ));
                }
                prev_bp = bp;
                prev_mc = mc;
            }
            generators.push(Generator {
                id: g.id,
                bus: g.bus,
                p: g.p,
                q: g.q,
                p_min: g.p_min,
                p_max: g.p_max,
                q_min: g.q_min,
                q_max: g.q_max,
                ramp_rate: g.ramp_rate.unwrap_or(g.p_max.max(1.0)),
                cost_curve: g
                    .cost_curve
                    .iter()
                    .map(|&[breakpoint, marginal_cost]| CostSegment { breakpoint, marginal_cost })
                    .collect(),
                reserve_cost: g.reserve_cost,
                status: g.status,
            });
        }
        if !generators.iter().any(|g| g.status) {
            return Err(semantic("case", "no generator in service"));
        }

        let mut load_ids = HashSet::new();
        let mut loads = Vec::with_capacity(self.loads.len());
        for l in &self.loads {
            let el = format!("load {}", l.id);
            if !load_ids.insert(l.id) {
                return Err(semantic(el, "duplicate load id"));
            }
            need_bus(&el, l.bus)?;
            finite(&el, "p", l.p)?;
            finite(&el, "q", l.q)?;
            loads.push(Load { id: l.id, bus: l.bus, p: l.p, q: l.q, sheddable: l.sheddable });
        }

        let branch_set: HashMap<u32, ()> = branches.iter().map(|b| (b.id, ())).collect();
        let mut interfaces = Vec::with_capacity(self.interfaces.len());
        for itf in &self.interfaces {
            let el = format!("interface {}", itf.id);
            if itf.branches.is_empty() {
                return Err(semantic(el, "empty branch list"));
            }
            if !(itf.limit_mw > 0.0) {
                return Err(semantic(el, "limit_mw must be positive"));
            }
            for &(bid, sign) in &itf.branches {
                if !branch_set.contains_key(&bid) {
                    return Err(semantic(&el, format!("references unknown branch {bid}")));
                }
                if sign != 1.0 && sign != -1.0 {
                    return Err(semantic(&el, "direction must be +1 or -1"));
                }
            }
            interfaces.push(InterfaceDef {
                id: itf.id,
                branches: itf.branches.clone(),
                limit_mw: itf.limit_mw,
            });
        }

        Ok(GridCase::assemble(
            self.name,
            self.base_mva,
            buses,
            branches,
            generators,
            loads,
            interfaces,
        ))
    }
}

impl GridCase {
    /// Serializable document for this case (degrees in-file).
    pub fn to_document(&self) -> CaseDocument {
        CaseDocument {
            schema_version: SCHEMA_VERSION,
            name: self.name.clone(),
            base_mva: self.base_mva,
            buses: self
                .buses
                .iter()
                .map(|b| BusDoc {
                    id: b.id,
                    base_kv: b.base_kv,
                    kind: b.kind,
                    v_mag: b.v_mag,
                    v_ang: b.v_ang.to_degrees(),
                    v_min: b.v_min,
                    v_max: b.v_max,
                    area: b.area,
                    g_shunt: b.g_shunt,
                    b_shunt: b.b_shunt,
                })
                .collect(),
            branches: self
                .branches
                .iter()
                .map(|b| BranchDoc {
                    id: b.id,
                    from_bus: b.from_bus,
                    to_bus: b.to_bus,
                    r: b.r,
                    x: b.x,
                    b_charging: b.b_charging,
                    tap_ratio: b.tap_ratio,
                    status: b.status,
                    s_max: b.s_max,
                    s_max_emergency: Some(b.s_max_emergency),
                })
                .collect(),
            generators: self
                .generators
                .iter()
                .map(|g| GeneratorDoc {
                    id: g.id,
                    bus: g.bus,
                    p: g.p,
                    q: g.q,
                    p_min: g.p_min,
                    p_max: g.p_max,
                    q_min: g.q_min,
                    q_max: g.q_max,
                    ramp_rate: Some(g.ramp_rate),
                    cost_curve: g.cost_curve.iter().map(|s| [s.breakpoint, s.marginal_cost]).collect(),
                    reserve_cost: g.reserve_cost,
                    status: g.status,
                })
                .collect(),
            loads: self
                .loads
                .iter()
                .map(|l| LoadDoc { id: l.id, bus: l.bus, p: l.p, q: l.q, sheddable: l.sheddable })
                .collect(),
            interfaces: self
                .interfaces
                .iter()
                .map(|i| InterfaceDoc { id: i.id, branches: i.branches.clone(), limit_mw: i.limit_mw })
                .collect(),
        }
    }
}
