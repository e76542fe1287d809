use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{h_eval, Measurement, MeasurementKind, MeasurementSet, MeasurementStatus};
use crate::error::EstimationError;
use crate::grid::{GridCase, Network};
use crate::powerflow::BusState;

/// Where meters sit: an ordered list of (kind, element id).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasurementPlan {
    pub entries: Vec<(MeasurementKind, u32)>,
}

impl MeasurementPlan {
    /// From-end P/Q on every in-service branch, P/Q injection and |V| at
    /// every bus. Redundancy is about 3 on meshed cases.
    pub fn standard(case: &GridCase) -> Self {
        let mut entries = Vec::new();
        for br in case.branches.iter().filter(|b| b.status) {
            entries.push((MeasurementKind::BranchPFrom, br.id));
            entries.push((MeasurementKind::BranchQFrom, br.id));
        }
        for b in &case.buses {
            entries.push((MeasurementKind::BusPInj, b.id));
            entries.push((MeasurementKind::BusQInj, b.id));
        }
        for b in &case.buses {
            entries.push((MeasurementKind::BusVMag, b.id));
        }
        MeasurementPlan { entries }
    }

    /// Every measurement kind on every in-service element.
    pub fn full(case: &GridCase) -> Self {
        let mut entries = Vec::new();
        for br in case.branches.iter().filter(|b| b.status) {
            for kind in &MeasurementKind::ALL[..4] {
                entries.push((*kind, br.id));
            }
        }
        for b in &case.buses {
            for kind in &MeasurementKind::ALL[4..] {
                entries.push((*kind, b.id));
            }
        }
        MeasurementPlan { entries }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseModel {
    pub sigma_flow: f64,
    pub sigma_injection: f64,
    pub sigma_voltage: f64,
    /// Multiplier on the drawn noise; 0 gives exact telemetry while keeping
    /// the nominal sigmas as weights.
    pub scale: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel { sigma_flow: 0.008, sigma_injection: 0.008, sigma_voltage: 0.004, scale: 1.0 }
    }
}

impl NoiseModel {
    pub fn noiseless() -> Self {
        NoiseModel { scale: 0.0, ..Default::default() }
    }

    pub fn sigma(&self, kind: MeasurementKind) -> f64 {
        match kind {
            MeasurementKind::BusVMag => self.sigma_voltage,
            MeasurementKind::BusPInj | MeasurementKind::BusQInj => self.sigma_injection,
            _ => self.sigma_flow,
        }
    }
}

/// Synthetic SCADA snapshot: true model values at `state` plus seeded
/// Gaussian noise, one draw per measurement in plan order.
pub fn generate_telemetry(
    case: &GridCase,
    net: &Network,
    state: &BusState,
    plan: &MeasurementPlan,
    noise: &NoiseModel,
    seed: u64,
    timestamp: u64,
) -> MeasurementSet {
    let mut measurements: Vec<Measurement> = plan
        .entries
        .iter()
        .enumerate()
        .map(|(k, &(kind, element))| Measurement {
            id: k as u32 + 1,
            kind,
            element,
            value: 0.0,
            sigma: noise.sigma(kind),
            status: MeasurementStatus::Active,
        })
        .collect();
    let truth = h_eval(case, net, &measurements, state);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (m, h) in measurements.iter_mut().zip(truth) {
        let e: f64 = StandardNormal.sample(&mut rng);
        m.value = h + noise.scale * m.sigma * e;
    }
    MeasurementSet { timestamp, measurements }
}

/// Snapshot as CSV with header `id,kind,element,value,sigma,status`.
pub fn write_snapshot(set: &MeasurementSet) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for m in &set.measurements {
        w.serialize(m).expect("in-memory CSV write");
    }
    String::from_utf8(w.into_inner().expect("in-memory CSV flush")).expect("CSV output is UTF-8")
}

pub fn read_snapshot(text: &str, timestamp: u64) -> Result<MeasurementSet, EstimationError> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let measurements = r
        .deserialize()
        .collect::<Result<Vec<Measurement>, _>>()
        .map_err(|e| EstimationError::Format(e.to_string()))?;
    Ok(MeasurementSet { timestamp, measurements })
}
