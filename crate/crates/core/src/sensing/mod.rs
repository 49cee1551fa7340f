//! The sensing management function: control side (authorization, node
//! selection, configuration) and processing side (localization, fusion,
//! privacy).

pub mod orchestration;
pub mod processing;

pub use orchestration::{
    authorize, configure_session, meeting_quality, select_pairs, select_ues, ConfigurationPlan, Decision,
    GeometryConfig, OrchestrationError, Pair, SensingSession, SessionState,
};
pub use processing::{
    forward_range, fuse_rounds, generate_measurement, localize, privacy_filter, LocalizerConfig, MeasurementNoise,
    ProcessingError, RoundEstimate, TargetEstimate,
};
