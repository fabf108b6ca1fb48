use crate::error::{Error, Result};
use crate::kv::KeyValues;

/// Architecture hyperparameters of the cascaded network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetworkConfig {
    /// Number of cascaded U-nets, T.
    pub iterations: usize,
    /// Encoder/decoder depth. Only 3 is supported.
    pub levels: usize,
    /// Channels of the first encoder level, C.
    pub base_channels: usize,
    pub dropout_rate: f64,
    /// Always false: every iteration owns its parameters.
    pub share_weights: bool,
    /// Feed the previous iteration's decoder outputs into the encoders.
    pub reverse_concat: bool,
    /// Gated recurrent bottleneck; a plain conv block when false.
    pub recurrent_module: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            iterations: 4,
            levels: 3,
            base_channels: 16,
            dropout_rate: 0.05,
            share_weights: false,
            reverse_concat: true,
            recurrent_module: true,
        }
    }
}

pub(crate) const NETWORK_KEYS: &[&str] = &[
    "iterations",
    "levels",
    "base_channels",
    "dropout_rate",
    "share_weights",
    "reverse_concat",
    "recurrent_module",
];

impl NetworkConfig {
    pub fn tiny(iterations: usize, base_channels: usize) -> Self {
        NetworkConfig { iterations, base_channels, dropout_rate: 0.0, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::config("iterations must be at least 1"));
        }
        if self.levels != 3 {
            return Err(Error::config(format!("levels must be 3, got {}", self.levels)));
        }
        if self.base_channels == 0 {
            return Err(Error::config("base_channels must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config(format!("dropout_rate {} outside [0, 1)", self.dropout_rate)));
        }
        if self.share_weights {
            return Err(Error::config("share_weights is not supported; iterations own their parameters"));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.insert("iterations", self.iterations);
        kv.insert("levels", self.levels);
        kv.insert("base_channels", self.base_channels);
        kv.insert("dropout_rate", self.dropout_rate);
        kv.insert("share_weights", self.share_weights);
        kv.insert("reverse_concat", self.reverse_concat);
        kv.insert("recurrent_module", self.recurrent_module);
        kv
    }

    /// Reads the network keys of `kv`, falling back to defaults. Other keys
    /// are ignored here; callers check for unknown keys.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let d = Self::default();
        let cfg = NetworkConfig {
            iterations: kv.parsed_or("iterations", d.iterations)?,
            levels: kv.parsed_or("levels", d.levels)?,
            base_channels: kv.parsed_or("base_channels", d.base_channels)?,
            dropout_rate: kv.parsed_or("dropout_rate", d.dropout_rate)?,
            share_weights: kv.parsed_or("share_weights", d.share_weights)?,
            reverse_concat: kv.parsed_or("reverse_concat", d.reverse_concat)?,
            recurrent_module: kv.parsed_or("recurrent_module", d.recurrent_module)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub(crate) fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn invalid_configs_rejected() {
        for cfg in [
            NetworkConfig { iterations: 0, ..Default::default() },
            NetworkConfig { levels: 4, ..Default::default() },
            NetworkConfig { base_channels: 0, ..Default::default() },
            NetworkConfig { dropout_rate: 1.0, ..Default::default() },
            NetworkConfig { share_weights: true, ..Default::default() },
        ] {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        }
        NetworkConfig::default().validate().unwrap();
    }

    #[test]
    fn kv_round_trip() {
        let cfg = NetworkConfig { iterations: 3, base_channels: 5, dropout_rate: 0.125, reverse_concat: false, ..Default::default() };
        assert_eq!(NetworkConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
    }
}
