//! Online selection of m out of K experts when the experts are strategic.
//!
//! Experts hold private beliefs about a binary outcome and report probabilities;
//! the learner scores reports with the quadratic loss and wants both vanishing
//! regret and incentive compatibility, meaning no expert can raise its chance of
//! being selected next round by misreporting. The crate provides:
//!
//! - weighted-score updates over single experts and over m-subsets ([`wsu`]),
//! - follow-the-perturbed-leader with exponential-family noise ([`ftpl`], [`noise`]),
//! - an online distorted greedy learner for submodular round utilities ([`odg`]),
//! - a strategic-agent simulator and incentive auditor ([`sim`]),
//! - forecast-data ingestion and the NFL-style regret experiment ([`data`]).

mod error;
mod quad;

pub mod data;
pub mod ftpl;
pub mod losses;
pub mod noise;
pub mod odg;
pub mod sim;
pub mod wsu;

pub use error::{Error, Result};
