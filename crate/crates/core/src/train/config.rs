//! Estimation run configuration with per-model defaults.
//!
//! A user config is a partial JSON object; [`EstimationConfig::from_json`]
//! deep-merges it over the defaults of the chosen regime and rejects unknown
//! keys.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::models::{ModelId, Regime};
use crate::sim::{NoiseSpec, DEFAULT_TRANSIENT_MS};
use crate::spectral::DcPolicy;

use super::optim::LrSchedule;
use super::residual::ResidualScaling;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FftConfig {
    /// Energy threshold in percent.
    pub p: f64,
    #[serde(default)]
    pub dc: DcPolicy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub widths: Vec<usize>,
    pub rwf_mu: f64,
    pub rwf_sigma: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage1Config {
    pub lr0: f64,
    pub decay_factor: f64,
    pub decay_every: u64,
    pub iters: u64,
    pub batch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BalanceConfig {
    pub alpha: f64,
    pub eps: f64,
    pub update_every: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage2Config {
    pub lr0_theta: f64,
    pub decay_every: u64,
    pub decay_factor: f64,
    pub lr_lambda: f64,
    pub iters: u64,
    pub batch: usize,
    pub balance: BalanceConfig,
    /// Keep training the voltage network with the data misfit added.
    pub train_v: bool,
    /// Weight of the data misfit when `train_v` is set.
    pub data_weight: f64,
    /// Window ends, in ms, excluded from the collocation set.
    pub edge_trim_ms: f64,
    pub residual_scaling: ResidualScaling,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolConfig {
    /// Simulated and discarded before the observation window.
    pub transient_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimationConfig {
    pub model: String,
    pub regime: String,
    pub noise: NoiseSpec,
    pub fft: FftConfig,
    pub net: NetConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    /// A regime name or "ones".
    pub init_guess: String,
    pub protocol: ProtocolConfig,
    /// Seed of the mini-batch sampler.
    pub batch_seed: u64,
    /// Loss-history sampling interval.
    pub log_every: u64,
}

impl EstimationConfig {
    /// Paper-scale defaults for a regime.
    pub fn defaults_for(regime: Regime) -> Self {
        let model = regime.model();
        let (p, widths, batch) = match model {
            ModelId::Sml => (95.0, vec![50, 50], 500),
            ModelId::Bml => (99.0, vec![50, 50, 50], 1000),
            _ => (99.92, vec![50, 50, 50], 1000),
        };
        let (lr0_theta, decay_every, lr_lambda, iters) = match model {
            ModelId::Sml => (1e-4, 100_000, 1e-4, 800_000),
            ModelId::Bml => (1e-4, 100_000, 1e-4, 1_000_000),
            _ => (1e-3, 25_000, 1e-3, 200_000),
        };
        EstimationConfig {
            model: model.as_str().to_string(),
            regime: regime.as_str().to_string(),
            noise: NoiseSpec::relative(0.01, 1),
            fft: FftConfig { p, dc: DcPolicy::Include },
            net: NetConfig {
                widths,
                rwf_mu: 0.5,
                rwf_sigma: 0.1,
                seed: 2,
            },
            stage1: Stage1Config {
                lr0: 1e-3,
                decay_factor: 0.5,
                decay_every: 10_000,
                iters: 20_000,
                batch,
            },
            stage2: Stage2Config {
                lr0_theta,
                decay_every,
                decay_factor: 0.5,
                lr_lambda,
                iters,
                batch,
                balance: BalanceConfig {
                    alpha: 0.9,
                    eps: 1e-6,
                    update_every: 1000,
                },
                train_v: false,
                data_weight: 1.0,
                edge_trim_ms: 2.0,
                residual_scaling: ResidualScaling::Timescale,
            },
            init_guess: "ones".to_string(),
            protocol: ProtocolConfig {
                transient_ms: DEFAULT_TRANSIENT_MS,
            },
            batch_seed: 3,
            log_every: 100,
        }
    }

    /// Merges a partial config over the defaults of its regime. The object
    /// must name a `regime`, or a `model` whose default regime is used.
    pub fn from_json(user: &Value) -> Result<Self> {
        let obj = user
            .as_object()
            .ok_or_else(|| Error::contract("config must be a JSON object"))?;
        let regime = match (obj.get("regime"), obj.get("model")) {
            (Some(r), _) => Regime::parse(r.as_str().ok_or_else(|| Error::contract("regime must be a string"))?)?,
            (None, Some(m)) => {
                let id = ModelId::parse(m.as_str().ok_or_else(|| Error::contract("model must be a string"))?)?;
                Regime::default_for(id)?
            }
            (None, None) => return Err(Error::contract("config needs a regime or a model")),
        };
        let mut merged = serde_json::to_value(Self::defaults_for(regime))?;
        merge(&mut merged, user);
        let cfg: EstimationConfig =
            serde_json::from_value(merged).map_err(|e| Error::contract(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn regime(&self) -> Result<Regime> {
        Regime::parse(&self.regime)
    }

    pub fn validate(&self) -> Result<()> {
        let regime = self.regime()?;
        let model = ModelId::parse(&self.model)?;
        if regime.model() != model {
            return Err(Error::contract(format!(
                "regime {} belongs to model {}, not {}",
                self.regime,
                regime.model(),
                self.model
            )));
        }
        if self.init_guess != "ones" {
            let init = Regime::parse(&self.init_guess)?;
            if init.model() != model {
                return Err(Error::contract(format!(
                    "initial guess {} is not a {} regime",
                    self.init_guess, self.model
                )));
            }
        }
        if !(self.noise.level >= 0.0) {
            return Err(Error::contract("noise level must be non-negative"));
        }
        if !(self.fft.p > 0.0 && self.fft.p < 100.0) {
            return Err(Error::contract("fft.p must lie in (0, 100)"));
        }
        if self.net.widths.is_empty() || self.net.widths.contains(&0) {
            return Err(Error::contract("net.widths must be non-empty and positive"));
        }
        if !(self.net.rwf_sigma >= 0.0) {
            return Err(Error::contract("net.rwf_sigma must be non-negative"));
        }
        if self.stage1.batch == 0 || self.stage2.batch == 0 {
            return Err(Error::contract("batch sizes must be positive"));
        }
        self.stage1_schedule().validate()?;
        self.theta_schedule().validate()?;
        LrSchedule::constant(self.stage2.lr_lambda).validate()?;
        let b = &self.stage2.balance;
        if !(0.0..=1.0).contains(&b.alpha) || !(b.eps > 0.0) || b.update_every == 0 {
            return Err(Error::contract("balance needs alpha in [0, 1], eps > 0, update_every > 0"));
        }
        if !(self.stage2.edge_trim_ms >= 0.0) {
            return Err(Error::contract("stage2.edge_trim_ms must be non-negative"));
        }
        if !(self.protocol.transient_ms >= 0.0) {
            return Err(Error::contract("protocol.transient_ms must be non-negative"));
        }
        if self.log_every == 0 {
            return Err(Error::contract("log_every must be positive"));
        }
        Ok(())
    }

    pub fn stage1_schedule(&self) -> LrSchedule {
        LrSchedule {
            initial: self.stage1.lr0,
            decay_factor: self.stage1.decay_factor,
            decay_every: self.stage1.decay_every,
        }
    }

    pub fn theta_schedule(&self) -> LrSchedule {
        LrSchedule {
            initial: self.stage2.lr0_theta,
            decay_factor: self.stage2.decay_factor,
            decay_every: self.stage2.decay_every,
        }
    }
}

/// Recursive object merge; non-object values in `patch` replace `base`.
pub fn merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn defaults_follow_the_model() {
        let c = EstimationConfig::defaults_for(Regime::Hopf);
        assert_eq!(c.stage2.iters, 800_000);
        assert_eq!(c.stage1.batch, 500);
        let p = EstimationConfig::defaults_for(Regime::PbcDefault);
        assert_eq!(p.stage2.lr_lambda, 1e-3);
        assert_eq!(p.fft.p, 99.92);
        assert_eq!(p.net.widths, vec![50, 50, 50]);
    }

    #[test]
    fn partial_config_merges() {
        let c = EstimationConfig::from_json(&json!({
            "regime": "elliptic",
            "stage2": {"iters": 10, "balance": {"alpha": 0.5}},
            "noise": {"level": 0.05}
        }))
        .unwrap();
        assert_eq!(c.model, "bml");
        assert_eq!(c.stage2.iters, 10);
        assert_eq!(c.stage2.balance.alpha, 0.5);
        assert_eq!(c.stage2.balance.update_every, 1000);
        assert_eq!(c.noise.level, 0.05);
        assert_eq!(c.stage2.lr_lambda, 1e-4);
    }

    #[test]
    fn rejects_bad_configs() {
        for bad in [
            json!({"regime": "hopf", "stage9": {}}),
            json!({"regime": "hopf", "model": "bml"}),
            json!({"regime": "hopf", "init_guess": "elliptic"}),
            json!({"regime": "hopf", "fft": {"p": 100.0}}),
            json!({"regime": "nowhere"}),
            json!({"stage1": {}}),
            json!([1, 2]),
        ] {
            assert!(EstimationConfig::from_json(&bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn model_only_uses_default_regime() {
        let c = EstimationConfig::from_json(&json!({"model": "pbc"})).unwrap();
        assert_eq!(c.regime, "pbc-default");
    }
}
