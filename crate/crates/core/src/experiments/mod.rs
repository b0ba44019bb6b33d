//! Synthetic bias studies and their audits.

pub mod audit;
pub mod studies;
pub mod synth;

pub use audit::{audit, AuditConfig, BiasAuditReport, MethodAudit};
pub use studies::{
    normalization_shift_experiment, run_blackbox_study, run_concept_study, BlackboxStudyConfig, ConceptOutcome,
    ConceptStudyConfig, GreyStudyConfig, StudyOutcome,
};
pub use synth::{AffineScaling, ConceptDatasetSpec, GreyObjectSpec, SyntheticDatasetSpec};
