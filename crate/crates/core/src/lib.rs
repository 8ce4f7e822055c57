//! Core of a digital ABA therapy platform: VB-MAPP objective ladders, an
//! event-sourced session engine, analytics, reports, access control and
//! de-identified exports.

pub mod access;
pub mod analytics;
pub mod deck;
pub mod domain;
pub mod export;
pub mod privacy;
pub mod report;
pub mod session;
pub mod store;
pub mod synth;
pub mod time;

pub use analytics::{AggregateSummary, TimeWindow};
pub use domain::{CategoryId, Curriculum, PatientId, PatientProgress, StimulusId};
pub use session::{LiveSession, Outcome, SessionError, SessionEvent, SessionHub, SessionId};
pub use time::Timestamp;
