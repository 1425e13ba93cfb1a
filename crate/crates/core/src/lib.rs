//! Motion representation, delayed token layouts, evaluation metrics and
//! procedural paired data for vision-language conditioned egocentric motion
//! generation.

pub mod condition;
pub mod error;
pub mod io;
pub mod kinematics;
pub mod metrics;
pub mod synthdata;
pub mod tokens;

pub use condition::ConditionBundle;
pub use error::{Error, Result};
pub use kinematics::{GlobalMotion, HeadCentricSequence, SkeletonConfig};
pub use tokens::{DelayedGrid, TokenGrid, Vocab};
