//! PatternLoom: an orchestration kernel, a two-axis agent-pattern
//! catalog, nine runnable patterns over a deterministic scripted model,
//! and a rule-engine advisor that turns domain constraints into an
//! architecture recommendation.

pub mod advisor;
pub mod catalog;
pub mod descriptor;
pub mod governance;
pub mod kernel;
pub mod model;
pub mod perception;
pub mod reasoning;
pub mod reflection;
