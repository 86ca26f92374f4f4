//! Physics-driven reconstruction toolkit for EIT-based tomographic tactile
//! sensors.

pub mod autodiff;
pub mod classical;
pub mod cli;
pub mod forward;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod phantom;
pub mod phydnn;
pub mod surrogate;
