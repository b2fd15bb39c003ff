//! Verifiers for the class-token propagation bound and the deviation analyses.

pub mod heatmap;
pub mod prop2;

pub use heatmap::{deviation_heatmap, empirical_ratio, EmpiricalRatio};
pub use prop2::{
    epsilon_v, layer_jvp, m_norm_bound, prop2_propagate, prop2_propagate_full, prop2_verify, ratio_bound,
    simplified_bound, Prop2Regime, Prop2Report, Prop2Trial, Propagation,
};
