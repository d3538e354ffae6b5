//! Time-series question answering on synthetic data, end to end: a patching
//! and decomposition pipeline, pattern-based text/series alignment, a small
//! decoder-only backbone, rule-based rewards, and group-relative policy
//! optimization, plus the experiment harness that ties them together.

pub mod alignment;
pub mod backbone;
pub mod grpo;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod par;
pub mod reference;
pub mod rewards;
pub mod ts_pipeline;
