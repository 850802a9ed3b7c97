use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters. Config files may use either the field
/// names or the short symbols (`D`, `P`, `T`, `C`, `K_total`, `T_ctx`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    #[serde(alias = "D")]
    pub d_model: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_blocks: usize,
    /// Cross-attention blocks in the memory encoder.
    pub mem_layers: usize,
    #[serde(alias = "P")]
    pub patch_len: usize,
    pub patch_hop: usize,
    #[serde(alias = "T")]
    pub window_len: usize,
    #[serde(alias = "C")]
    pub channels: usize,
    /// Unified state count across all granularity levels.
    #[serde(alias = "K_total")]
    pub num_states: usize,
    #[serde(alias = "T_ctx")]
    pub context_len: usize,
    pub dropout: f64,
    pub n_neg_max: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            heads: 2,
            enc_layers: 3,
            dec_blocks: 6,
            mem_layers: 1,
            patch_len: 16,
            patch_hop: 8,
            window_len: 256,
            channels: 3,
            num_states: 8,
            context_len: 256,
            dropout: 0.1,
            n_neg_max: 3,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.d_model % 2 != 0 {
            return fail(format!("d_model must be even and positive, got {}", self.d_model));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return fail(format!("d_model {} is not divisible by {} heads", self.d_model, self.heads));
        }
        if self.patch_hop == 0 || self.patch_hop > self.patch_len || self.patch_len > self.window_len {
            return fail(format!(
                "need 1 <= patch_hop <= patch_len <= window_len, got hop={} P={} T={}",
                self.patch_hop, self.patch_len, self.window_len
            ));
        }
        // the context window is patched like a series window
        if self.context_len < self.patch_len {
            return fail(format!(
                "context_len {} is shorter than patch_len {}",
                self.context_len, self.patch_len
            ));
        }
        if self.channels == 0 || self.num_states == 0 {
            return fail("channels and num_states must be positive".into());
        }
        if self.dec_blocks == 0 {
            return fail("dec_blocks must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Patch count for a window of this config's length.
    pub fn num_patches(&self) -> usize {
        super::patch::patch_starts(self.window_len, self.patch_len, self.patch_hop).len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.num_patches(), 31);
    }

    #[test]
    fn rejects_bad_shapes() {
        let bad = [
            ModelConfig { d_model: 7, heads: 1, ..Default::default() },
            ModelConfig { heads: 3, ..Default::default() },
            ModelConfig { patch_len: 300, ..Default::default() },
            ModelConfig { patch_hop: 0, ..Default::default() },
            ModelConfig { context_len: 8, ..Default::default() },
            ModelConfig { dropout: 1.0, ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate().unwrap_err().is_config(), "{c:?}");
        }
    }
}
