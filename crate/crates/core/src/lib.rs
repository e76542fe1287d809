//! Engine for an energy-management-system emulator.
//!
//! The crate follows the control-room loop: a physical AC power flow
//! produces SCADA telemetry, state estimation turns it into an operator
//! view, contingency analysis screens that view, and a security-constrained
//! economic dispatch picks the next generator set-points. On top of the loop
//! sit load-redistribution false-data-injection attacks and a
//! nearest-neighbor detector for them.

pub mod attack;
pub mod cases;
pub mod config;
pub mod detector;
pub mod estimation;
pub mod error;
pub mod grid;
pub mod lp;
pub mod powerflow;
pub mod rtca;
pub mod sced;
pub mod session;

pub use error::EmsError;
