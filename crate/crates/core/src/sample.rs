use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One agent: assignment value `z`, outcome `y`, optional group label and weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSample {
    pub z: f64,
    pub y: f64,
    pub group: Option<String>,
    pub weight: f64,
}

impl AgentSample {
    pub fn new(z: f64, y: f64) -> Self {
        AgentSample { z, y, group: None, weight: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.z > 0.0 && self.z.is_finite()) {
            return Err(Error::InvalidSample(format!("z must be positive and finite, got {}", self.z)));
        }
        if !self.y.is_finite() {
            return Err(Error::InvalidSample(format!("y must be finite, got {}", self.y)));
        }
        if !(self.weight > 0.0 && self.weight.is_finite()) {
            return Err(Error::InvalidSample(format!("weight must be positive, got {}", self.weight)));
        }
        Ok(())
    }
}

pub fn validate_samples(samples: &[AgentSample]) -> Result<()> {
    for (i, s) in samples.iter().enumerate() {
        s.validate().map_err(|e| Error::InvalidSample(format!("sample {i}: {e}")))?;
    }
    Ok(())
}
