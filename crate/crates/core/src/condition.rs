use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Conditioning inputs for one sample: a scene feature vector standing in for
/// the egocentric frame, an instruction over the synthetic vocabulary, and the
/// first head-centric feature frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionBundle {
    pub image_feature: Vec<f32>,
    pub instruction: Vec<u16>,
    pub init_pose: Vec<f32>,
}

impl ConditionBundle {
    pub fn validate(&self, image_dim: usize, max_text_len: usize, pose_dim: usize) -> Result<()> {
        if self.image_feature.len() != image_dim {
            return Err(Error::Shape(format!(
                "image feature has {} values, expected {image_dim}",
                self.image_feature.len()
            )));
        }
        if self.instruction.len() > max_text_len {
            return Err(Error::Shape(format!(
                "instruction has {} tokens, limit is {max_text_len}",
                self.instruction.len()
            )));
        }
        if self.init_pose.len() != pose_dim {
            return Err(Error::Shape(format!(
                "initial pose has {} values, expected {pose_dim}",
                self.init_pose.len()
            )));
        }
        if !self.image_feature.iter().chain(&self.init_pose).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("condition bundle"));
        }
        Ok(())
    }
}
