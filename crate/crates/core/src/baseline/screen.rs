use serde::{Deserialize, Serialize};

use super::{BaselineError, SimStats};

/// H2P screening thresholds.
///
/// A branch is an H2P when its baseline accuracy is below
/// `accuracy_threshold` and it mispredicts at least `min_mispredictions`
/// times per `window_instructions` dynamic instructions. The volume
/// requirement is scaled to the trace's instruction count and never drops
/// below `floor_mispredictions`. Without `window_instructions` the volume
/// requirement is `min_mispredictions` as an absolute count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct H2pScreenConfig {
    pub accuracy_threshold: f64,
    pub min_mispredictions: u64,
    pub window_instructions: Option<u64>,
    pub floor_mispredictions: u64,
}

impl Default for H2pScreenConfig {
    fn default() -> Self {
        Self {
            accuracy_threshold: 0.99,
            min_mispredictions: 1000,
            window_instructions: Some(30_000_000),
            floor_mispredictions: 100,
        }
    }
}

impl H2pScreenConfig {
    pub fn validate(&self) -> Result<(), BaselineError> {
        if !(self.accuracy_threshold > 0.0 && self.accuracy_threshold < 1.0) {
            return Err(BaselineError::Config(
                "accuracy_threshold must lie in (0, 1)".into(),
            ));
        }
        if self.window_instructions == Some(0) {
            return Err(BaselineError::Config(
                "window_instructions must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Minimum misprediction count for a trace of `instruction_count`
    /// instructions.
    pub fn required_mispredictions(
        &self,
        instruction_count: Option<u64>,
    ) -> Result<u64, BaselineError> {
        match self.window_instructions {
            None => Ok(self.min_mispredictions),
            Some(window) => {
                let n = instruction_count.ok_or(BaselineError::MissingInstructionCount)?;
                let scaled = (self.min_mispredictions as u128 * n as u128).div_ceil(window as u128);
                Ok((scaled as u64).max(self.floor_mispredictions))
            }
        }
    }
}

/// Static branches that qualify as H2Ps, in ip order.
pub fn screen_h2ps(
    stats: &SimStats,
    instruction_count: Option<u64>,
    cfg: &H2pScreenConfig,
) -> Result<Vec<u64>, BaselineError> {
    cfg.validate()?;
    let required = cfg.required_mispredictions(instruction_count)?;
    Ok(stats
        .per_ip
        .iter()
        .filter(|(_, s)| s.accuracy() < cfg.accuracy_threshold && s.mispredictions >= required)
        .map(|(&ip, _)| ip)
        .collect())
}
