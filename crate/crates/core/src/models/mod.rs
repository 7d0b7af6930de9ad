//! Concrete state-space models.

pub mod dengue;
pub mod hmm;
pub mod lgss;
pub mod watertank;

pub use dengue::{dengue_counts, dengue_prior, Dengue, SeirParams, SeirState};
pub use hmm::FiniteHmm;
pub use lgss::{Lgss, LgssParam};
pub use watertank::{TankInitial, TankStats, WaterTank};
