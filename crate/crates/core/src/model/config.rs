use serde::{Deserialize, Serialize};

use crate::data::{FUTURE_LEN, HISTORY_LEN};
use crate::error::{Error, Result};

pub const SUPPORTED_HIDDEN: [usize; 4] = [16, 32, 64, 128];
pub const SUPPORTED_HEADS: [usize; 3] = [2, 4, 8];
pub const GAT_LAYERS: usize = 2;
/// Per-vehicle state features `[x, y, s, a]`.
pub const STATE_DIM: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden: usize,
    pub heads: usize,
    pub latent: usize,
    pub history_len: usize,
    pub future_len: usize,
    pub kernel: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: 64,
            heads: 4,
            latent: 64,
            history_len: HISTORY_LEN,
            future_len: FUTURE_LEN,
            kernel: 3,
        }
    }
}

impl ModelConfig {
    /// Latent dimension follows the hidden dimension.
    pub fn new(hidden: usize, heads: usize) -> Result<Self> {
        let config = ModelConfig {
            hidden,
            heads,
            latent: hidden,
            ..Default::default()
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if !SUPPORTED_HIDDEN.contains(&self.hidden) {
            return Err(Error::Invalid(format!(
                "hidden dimension {} not in {SUPPORTED_HIDDEN:?}",
                self.hidden
            )));
        }
        if !SUPPORTED_HEADS.contains(&self.heads) {
            return Err(Error::Invalid(format!(
                "head count {} not in {SUPPORTED_HEADS:?}",
                self.heads
            )));
        }
        if self.latent == 0 {
            return Err(Error::Invalid("latent dimension must be positive".into()));
        }
        if self.history_len != HISTORY_LEN || self.future_len != FUTURE_LEN {
            return Err(Error::Invalid(format!(
                "window must be {HISTORY_LEN} + {FUTURE_LEN} steps, got {} + {}",
                self.history_len, self.future_len
            )));
        }
        if self.kernel.is_multiple_of(2) || self.kernel > self.history_len {
            return Err(Error::Invalid(format!(
                "conv kernel {} must be odd and at most {}",
                self.kernel, self.history_len
            )));
        }
        Ok(())
    }
}
