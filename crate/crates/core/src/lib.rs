//! Runtime supervisory engine for candidate-generating policies.
//!
//! A base policy proposes candidate actions; an observer extracts features,
//! evaluates overlay constraints with tunable rigidity, and either executes an
//! admissible candidate, forces regeneration with feedback, or falls back to a
//! predefined safe action. A supervisor gates engagement and switches between
//! activity modes, each with its own overlay pack.
//!
//! Module map:
//!
//! - [`state`]: interaction state, candidate actions, transitions and digests
//! - [`features`]: feature extractors and the builtin lexicon/rule pack
//! - [`condition`]: predicates over features and counters
//! - [`overlay`]: overlays, rigidity, verdicts and the JSON config format
//! - [`observer`]: judging, the regeneration loop, feedback and fallbacks
//! - [`supervisor`]: engagement gating and mode selection
//! - [`lookahead`]: finite-horizon rollout checks
//! - [`ensemble`]: multi-observer arbitration and overlay hot-swap
//! - [`adapters`]: scripted and remote base policies
//! - [`harness`]: scenarios, the turn engine, trajectory logs, metrics, replay

pub mod adapters;
pub mod condition;
pub mod config;
pub mod digest;
pub mod ensemble;
pub mod features;
pub mod harness;
pub mod lookahead;
pub mod observer;
pub mod overlay;
pub mod state;
pub mod supervisor;

pub use digest::Digest64;
pub use features::{FeatureRegistry, FeatureValue};
pub use observer::{ObserverDecision, RejectionReason};
pub use overlay::{Overlay, OverlayPack, OverlayVerdict};
pub use state::{ActionKind, ActionSource, CandidateAction, InteractionState};
