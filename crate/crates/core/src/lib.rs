//! Desk-scale workbench for detecting, explaining, and remediating
//! social-group bias in a transformer credit-decision model.
//!
//! The pipeline runs counterfactual audits over simulated mortgage
//! applicants, extracts per-layer concept directions from contrasting
//! prompt pairs, and injects scaled control vectors to shrink the outcome
//! gap between groups. Everything is seeded and deterministic: the same
//! inputs produce byte-identical reports.
//!
//! Module map:
//! - [`numerics`]: dense linear algebra and seeded sampling primitives
//! - [`grammar`]: EBNF parsing and character-level masking automata
//! - [`model`]: the toy decoder-only transformer, activation capture,
//!   control-vector injection, and the planted-bias fixture
//! - [`scenario`]: applicant simulation and prompt rendering
//! - [`audit`]: counterfactual experiments and discrepancy metrics
//! - [`repeng`]: representation vectors and concept-intensity maps
//! - [`remediation`]: control-scale line search
//! - [`pdpgp`]: Gaussian-process partial dependence curves

pub mod audit;
pub mod grammar;
pub mod model;
pub mod numerics;
pub mod pdpgp;
pub mod remediation;
pub mod repeng;
pub mod scenario;

pub use audit::{AuditRecord, DiscrepancyReport, Outcome};
pub use model::{ControlSetting, LayerActivations, ModelConfig, PlantedFixture, ToyTransformer};
pub use numerics::{Matrix, SeededRng};
pub use repeng::{ContrastPairSet, IntensityMap, RepresentationVector};
pub use scenario::{ApplicantProfile, PromptSpec, SimulationConfig, Treatment};
