use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::positioning::PositionMode;

/// Named layer schedules, or an explicit per-layer list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Linear positions in every layer.
    Rope,
    /// Constant positions in every layer.
    Nope,
    /// Every three layers: linear, linear, constant.
    R2n1,
    /// Every three layers: constant, constant, linear.
    N2r1,
    /// Linear below `repo_start_layer`, learned from there on.
    Repo,
    Custom(Vec<PositionMode>),
}

fn default_rope_base() -> f64 {
    10_000.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Width of the position representation; must be below `d_model`.
    pub d_p: usize,
    /// Hidden width of the gated feed-forward block.
    pub d_ff: usize,
    pub schedule: Schedule,
    /// First layer (0-based) using learned positions under [`Schedule::Repo`].
    #[serde(default)]
    pub repo_start_layer: usize,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    pub max_seq_len: usize,
    /// One position projection per layer instead of one per head.
    #[serde(default)]
    pub share_fphi_across_heads: bool,
    /// Position used by constant layers.
    #[serde(default)]
    pub constant_position: f64,
}

impl ModelConfig {
    /// Small default used for the synthetic reversal experiments.
    pub fn toy(vocab_size: usize, schedule: Schedule) -> Self {
        Self {
            vocab_size,
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            d_p: 8,
            d_ff: 128,
            schedule,
            repo_start_layer: 0,
            rope_base: default_rope_base(),
            max_seq_len: 80,
            share_fphi_across_heads: true,
            constant_position: 0.0,
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    /// Resolve the schedule into one mode per layer.
    pub fn layer_modes(&self) -> Vec<PositionMode> {
        let constant = PositionMode::Constant {
            value: self.constant_position,
        };
        let n = self.n_layers;
        match &self.schedule {
            Schedule::Rope => vec![PositionMode::Linear; n],
            Schedule::Nope => vec![constant; n],
            Schedule::R2n1 => (0..n)
                .map(|i| if i % 3 == 2 { constant } else { PositionMode::Linear })
                .collect(),
            Schedule::N2r1 => (0..n)
                .map(|i| if i % 3 == 2 { PositionMode::Linear } else { constant })
                .collect(),
            Schedule::Repo => (0..n)
                .map(|i| {
                    if i < self.repo_start_layer {
                        PositionMode::Linear
                    } else {
                        PositionMode::Learned
                    }
                })
                .collect(),
            Schedule::Custom(modes) => modes.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_p", self.d_p),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(
                "n_heads",
                format!("d_model {} is not divisible by {} heads", self.d_model, self.n_heads),
            ));
        }
        if self.d_head() % 2 != 0 {
            return Err(Error::config(
                "n_heads",
                format!("head width {} must be even for rotary encoding", self.d_head()),
            ));
        }
        if self.d_p >= self.d_model {
            return Err(Error::config(
                "d_p",
                format!("{} must be smaller than d_model {}", self.d_p, self.d_model),
            ));
        }
        if !(self.rope_base.is_finite() && self.rope_base > 0.0) {
            return Err(Error::config("rope_base", "must be a positive number"));
        }
        if !self.constant_position.is_finite() {
            return Err(Error::config("constant_position", "must be finite"));
        }
        if let Schedule::Custom(modes) = &self.schedule {
            if modes.len() != self.n_layers {
                return Err(Error::config(
                    "schedule",
                    format!("{} modes for {} layers", modes.len(), self.n_layers),
                ));
            }
            if modes.iter().any(|m| matches!(m, PositionMode::Constant { value } if !value.is_finite())) {
                return Err(Error::config("schedule", "constant positions must be finite"));
            }
        }
        if self.schedule == Schedule::Repo && self.repo_start_layer >= self.n_layers {
            return Err(Error::config(
                "repo_start_layer",
                format!("{} is not below n_layers {}", self.repo_start_layer, self.n_layers),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use PositionMode::{Learned, Linear};

    const C: PositionMode = PositionMode::Constant { value: 0.0 };

    fn cfg(n_layers: usize, schedule: Schedule) -> ModelConfig {
        ModelConfig {
            n_layers,
            ..ModelConfig::toy(32, schedule)
        }
    }

    #[test]
    fn named_schedules() {
        assert_eq!(cfg(6, Schedule::R2n1).layer_modes(), vec![Linear, Linear, C, Linear, Linear, C]);
        assert_eq!(cfg(6, Schedule::N2r1).layer_modes(), vec![C, C, Linear, C, C, Linear]);
        let mut c = cfg(4, Schedule::Repo);
        c.repo_start_layer = 2;
        assert_eq!(c.layer_modes(), vec![Linear, Linear, Learned, Learned]);
        assert_eq!(cfg(3, Schedule::Nope).layer_modes(), vec![C; 3]);
        assert_eq!(cfg(2, Schedule::Rope).layer_modes(), vec![Linear; 2]);
    }

    #[test]
    fn validation_names_the_field() {
        let mut c = cfg(4, Schedule::Repo);
        c.repo_start_layer = 4;
        assert!(c.validate().unwrap_err().to_string().contains("repo_start_layer"));
        let mut c = cfg(4, Schedule::Rope);
        c.n_heads = 3;
        assert!(c.validate().unwrap_err().to_string().contains("n_heads"));
        let mut c = cfg(4, Schedule::Rope);
        c.d_p = 64;
        assert!(c.validate().unwrap_err().to_string().contains("d_p"));
        let c = cfg(4, Schedule::Custom(vec![Linear; 3]));
        assert!(c.validate().unwrap_err().to_string().contains("schedule"));
        // d_head = 64 / 32 = 2 is fine, 64 / 64 = 1 is odd
        let mut c = cfg(4, Schedule::Rope);
        c.n_heads = 64;
        assert!(c.validate().is_err());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let mut v = serde_json::to_value(cfg(2, Schedule::Rope)).unwrap();
        v["d_modle"] = 3.into();
        let err = serde_json::from_value::<ModelConfig>(v).unwrap_err().to_string();
        assert!(err.contains("d_modle"), "{err}");
    }

    #[test]
    fn schedule_json_forms() {
        let s: Schedule = serde_json::from_str("\"repo\"").unwrap();
        assert_eq!(s, Schedule::Repo);
        let s: Schedule =
            serde_json::from_str(r#"{"custom":["linear",{"constant":{"value":1.5}},"learned"]}"#).unwrap();
        assert_eq!(
            s,
            Schedule::Custom(vec![Linear, PositionMode::Constant { value: 1.5 }, Learned])
        );
    }
}
