//! Resource-aware on-device training simulator for a small CTC acoustic model.
//!
//! The crate simulates a phone-like device with scripted RAM and battery
//! trajectories, picks a trainable sub-model (an output-side suffix of the
//! layer stack) from the RAM ratio, and runs CTC training sessions over a
//! synthetic tone-coded speech corpus with battery- and patience-based
//! stopping, best-checkpoint persistence, and multi-round personalisation.
//!
//! Everything is deterministic: fixed seeds reproduce corpora, parameter
//! initialisation, batch order, and therefore byte-identical epoch logs.

pub mod cli;
pub mod corpus;
pub mod ctc;
pub mod ctc_eval;
pub mod device;
pub mod features;
pub mod net;
pub mod seeding;
pub mod session;
pub mod topology;
