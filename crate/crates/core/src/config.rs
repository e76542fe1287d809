//! Settings shared by every pipeline stage.

use serde::{Deserialize, Serialize};

use crate::estimation::{NoiseModel, SeOptions};
use crate::powerflow::PowerFlowOptions;
use crate::rtca::RtcaOptions;
use crate::sced::ScedOptions;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmsConfig {
    pub pf: PowerFlowOptions,
    pub se: SeOptions,
    pub rtca: RtcaOptions,
    pub sced: ScedOptions,
    pub noise: NoiseModel,
}

impl EmsConfig {
    /// Same settings with telemetry noise switched off.
    pub fn noiseless(&self) -> EmsConfig {
        EmsConfig { noise: NoiseModel::noiseless(), ..self.clone() }
    }

    /// Sets the contingency worker count.
    pub fn with_jobs(mut self, jobs: usize) -> EmsConfig {
        self.rtca.jobs = jobs.max(1);
        self
    }
}
