//! Synthetic click environment and Criteo log reader.

mod click;
mod criteo;
mod delay;
mod drift;
mod population;

pub use click::{click_from_uniform, ground_truth_p, oracle_ctr, step, ClickModel, ClickScenario, World};
pub use criteo::{
    criteo_to_features, parse_criteo_line, parse_criteo_line_at, replay_source, CriteoFeatureConfig, CriteoRecord,
    ReplayConfig, ReplayRecord, ReplaySource, CRITEO_CAT_FIELDS, CRITEO_FIELDS, CRITEO_INT_FIELDS,
};
pub use delay::{DelayConfig, DelayedRewardQueue};
pub use drift::{apply_drift, apply_drift_in_place, DriftEvent, DriftKind, DriftSchedule};
pub use population::{sample_context, sample_user, Population, PopulationConfig, PopulationModel, SimUser};
