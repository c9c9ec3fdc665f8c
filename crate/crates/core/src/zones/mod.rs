//! Behavioral zones of the entropic/probabilistic plane.
//!
//! Four reference conditions (the model's own reasoning, reasoning plus
//! answer, a masked cloze of the answer, the answer copied verbatim) are
//! scored and their normalized centroids become the Reason, Encode, Cloze
//! and Copy zones. Traces are assigned to the nearest centroid.

mod conditions;
mod model;

#[cfg(test)]
pub(crate) use model::fixtures;

use thiserror::Error;

pub use conditions::{build_condition, mask_content_words, ConditionKind, FunctionWords, MASK};
pub use model::{
    calibrate, classify, write_distribution_csv, zone_distribution, AxisScale, DistributionRow,
    PlanePoint, PlaneScale, Zone, ZoneModel, MIN_SAMPLES,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ZoneError {
    #[error("unknown condition `{0}`")]
    UnknownCondition(String),
    #[error("condition {kind} requires {what}")]
    MissingInput {
        kind: ConditionKind,
        what: &'static str,
    },
    #[error("condition {kind} has {found} usable samples, {required} required")]
    InsufficientSamples {
        kind: ConditionKind,
        found: usize,
        required: usize,
    },
    #[error("calibration axis {0} is degenerate (all values equal)")]
    DegenerateAxis(&'static str),
    #[error("scores lack a_ent or a_prob")]
    Unclassifiable,
    #[error("invalid zone model: {0}")]
    InvalidModel(String),
    #[error("{0}")]
    Io(String),
}
