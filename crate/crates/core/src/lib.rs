//! Anchoring analysis for reverse chain-of-thought traces.
//!
//! Given a query, a pre-committed answer and a reasoning trace written to
//! connect them, this crate measures how strongly the answer anchors the
//! trace at three levels:
//!
//! * [`lexical`]: ROUGE-L recall of the answer inside the trace.
//! * [`entropic`]: distortion of step-level information density dynamics.
//! * [`probabilistic`]: per-token PMI bit gain the trace gives the answer.
//!
//! Around the metrics sit the structured-skeleton tooling ([`skeleton`]),
//! behavioral-zone reference conditions and classification ([`zones`]),
//! inference backends with offline replay ([`backend`]), exact toy models
//! for verification ([`oracle`]) and the scoring pipeline and reports
//! ([`pipeline`], [`report`]).

pub mod backend;
pub mod entropic;
pub mod lexical;
pub mod oracle;
pub mod pipeline;
pub mod probabilistic;
pub mod report;
pub mod skeleton;
pub mod trace;
pub mod zones;

mod error;

pub use error::{Error, Result};

pub use entropic::{entropic_anchoring, entropic_breakdown, Degeneracy, EntropicBreakdown};
pub use lexical::{lcs_length, lexical_anchoring, LexicalResult};
pub use probabilistic::{probabilistic_anchoring, PmiResult};
pub use skeleton::{FunctionalTag, Skeleton, SkeletonStep};
pub use trace::{AnchoringScores, Method, QAPair, TokenScore, TraceRecord};
pub use zones::{ConditionKind, Zone, ZoneModel};

/// Default sensitivity of the global-uniformity term.
pub const DEFAULT_TAU_G: f64 = 0.1;
