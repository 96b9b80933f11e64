use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Widths and depths of the encoder, denoiser and scorer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub t_p: usize,
    pub t_f: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub dropout: f64,
    pub d_c: usize,
    pub encoder_layers: usize,
    /// Width of per-lane feature vectors; lanes are ignored when unset.
    pub lane_dim: Option<usize>,
    pub denoiser_layers: usize,
    pub scorer_heads: usize,
    pub scorer_d_head: usize,
    pub scorer_d: usize,
    pub scorer_mlp: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            t_p: 8,
            t_f: 12,
            d_model: 128,
            heads: 4,
            ffn_mult: 4,
            dropout: 0.1,
            d_c: 128,
            encoder_layers: 2,
            lane_dim: None,
            denoiser_layers: 5,
            scorer_heads: 4,
            scorer_d_head: 32,
            scorer_d: 128,
            scorer_mlp: 128,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("t_f", self.t_f),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("ffn_mult", self.ffn_mult),
            ("d_c", self.d_c),
            ("denoiser_layers", self.denoiser_layers),
            ("scorer_heads", self.scorer_heads),
            ("scorer_d_head", self.scorer_d_head),
            ("scorer_d", self.scorer_d),
            ("scorer_mlp", self.scorer_mlp),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if self.t_p < 2 {
            return Err(Error::Config("model.t_p must be at least 2".into()));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "model.d_model {} is not divisible by model.heads {}",
                self.d_model, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("model.dropout {} outside [0, 1)", self.dropout)));
        }
        if self.lane_dim == Some(0) {
            return Err(Error::Config("model.lane_dim must be positive when set".into()));
        }
        Ok(())
    }
}
