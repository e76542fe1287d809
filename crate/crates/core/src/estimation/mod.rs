//! Weighted-least-squares state estimation with observability analysis,
//! a χ² bad-data detector and largest-normalized-residual elimination.

mod model;
mod observability;
mod telemetry;
mod wls;

use serde::{Deserialize, Serialize};

use crate::error::EstimationError;
use crate::grid::GridCase;

pub use model::{h_eval, injections, jacobian};
pub use observability::{observability_analysis, ObservabilityResult};
pub use telemetry::{generate_telemetry, read_snapshot, write_snapshot, MeasurementPlan, NoiseModel};
pub use wls::{
    chi2_bdd, chi2_threshold, eliminate_worst, estimate_with_bdd, estimated_loads, wls_estimate, BddResult,
    SeOptions, SeOutcome, StateEstimate,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasurementKind {
    BranchPFrom,
    BranchQFrom,
    BranchPTo,
    BranchQTo,
    BusPInj,
    BusQInj,
    BusVMag,
}

impl MeasurementKind {
    pub const ALL: [MeasurementKind; 7] = [
        MeasurementKind::BranchPFrom,
        MeasurementKind::BranchQFrom,
        MeasurementKind::BranchPTo,
        MeasurementKind::BranchQTo,
        MeasurementKind::BusPInj,
        MeasurementKind::BusQInj,
        MeasurementKind::BusVMag,
    ];

    pub fn is_branch(self) -> bool {
        matches!(
            self,
            MeasurementKind::BranchPFrom | MeasurementKind::BranchQFrom | MeasurementKind::BranchPTo | MeasurementKind::BranchQTo
        )
    }

    pub fn is_active_power(self) -> bool {
        matches!(self, MeasurementKind::BranchPFrom | MeasurementKind::BranchPTo | MeasurementKind::BusPInj)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MeasurementKind::BranchPFrom => "branch_p_from",
            MeasurementKind::BranchQFrom => "branch_q_from",
            MeasurementKind::BranchPTo => "branch_p_to",
            MeasurementKind::BranchQTo => "branch_q_to",
            MeasurementKind::BusPInj => "bus_p_inj",
            MeasurementKind::BusQInj => "bus_q_inj",
            MeasurementKind::BusVMag => "bus_v_mag",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasurementStatus {
    Active,
    Eliminated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub id: u32,
    pub kind: MeasurementKind,
    /// Branch id for flow kinds, bus id otherwise.
    pub element: u32,
    /// Per unit.
    pub value: f64,
    /// Per-unit standard deviation.
    pub sigma: f64,
    pub status: MeasurementStatus,
}

impl Measurement {
    pub fn is_active(&self) -> bool {
        self.status == MeasurementStatus::Active
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasurementSet {
    pub timestamp: u64,
    pub measurements: Vec<Measurement>,
}

impl MeasurementSet {
    pub fn active(&self) -> Vec<Measurement> {
        self.measurements.iter().filter(|m| m.is_active()).cloned().collect()
    }

    pub fn n_active(&self) -> usize {
        self.measurements.iter().filter(|m| m.is_active()).count()
    }

    pub fn position(&self, id: u32) -> Option<usize> {
        self.measurements.iter().position(|m| m.id == id)
    }

    pub fn eliminated_ids(&self) -> Vec<u32> {
        self.measurements.iter().filter(|m| !m.is_active()).map(|m| m.id).collect()
    }

    /// Copy with measurement `id` marked eliminated.
    pub fn with_eliminated(&self, id: u32) -> MeasurementSet {
        let mut out = self.clone();
        if let Some(m) = out.measurements.iter_mut().find(|m| m.id == id) {
            m.status = MeasurementStatus::Eliminated;
        }
        out
    }

    /// Checks ids, sigmas and element references against the case.
    pub fn validate(&self, case: &GridCase) -> Result<(), EstimationError> {
        let mut seen = std::collections::HashSet::new();
        for m in &self.measurements {
            let bad = |message: &str| EstimationError::InvalidMeasurement { id: m.id, message: message.into() };
            if !seen.insert(m.id) {
                return Err(bad("duplicate id"));
            }
            if !(m.sigma > 0.0 && m.sigma.is_finite()) {
                return Err(bad("sigma must be positive"));
            }
            if !m.value.is_finite() {
                return Err(bad("value is not finite"));
            }
            let known = if m.kind.is_branch() {
                case.branch_index(m.element).is_some()
            } else {
                case.bus_index(m.element).is_some()
            };
            if !known {
                return Err(bad("element does not exist in the case"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
