//! Muon (with RMS matching and decoupled weight decay), the AdamW baseline and
//! the warmup-stable-decay learning-rate schedule.

mod adamw;
mod muon;
mod schedule;

pub use adamw::{adamw_step, AdamState};
pub use muon::{muon_step, MuonState};
pub use schedule::{wsd_lr, LrSchedule};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::MsignMode;
use crate::param::{OptimState, ParamTensor, Route};
use crate::tensor::Tensor;

/// Serializes `f64::INFINITY` as the string `"inf"` so configs stay valid JSON.
pub mod maybe_inf {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Num {
            F(f64),
            S(String),
        }
        match Num::deserialize(d)? {
            Num::F(x) => Ok(x),
            Num::S(s) if matches!(s.as_str(), "inf" | "infinity" | "+inf") => Ok(f64::INFINITY),
            Num::S(s) => Err(serde::de::Error::custom(format!("expected a number or \"inf\", got {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub eta: f64,
    pub mu: f64,
    pub lambda: f64,
    pub rms_const: f64,
    pub msign_mode: MsignMode,
    #[serde(with = "maybe_inf")]
    pub tau: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            eta: 2e-4,
            mu: 0.95,
            lambda: 0.1,
            rms_const: 0.2,
            msign_mode: MsignMode::default(),
            tau: 100.0,
            adam_beta1: 0.9,
            adam_beta2: 0.95,
            adam_eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("optimizer: {what}")));
        if !(self.eta > 0.0) {
            return bad("eta must be > 0");
        }
        if !(0.0..1.0).contains(&self.mu) {
            return bad("mu must be in [0, 1)");
        }
        if !(self.lambda >= 0.0) {
            return bad("lambda must be >= 0");
        }
        if !(self.tau > 0.0) {
            return bad("tau must be > 0");
        }
        if !(self.rms_const > 0.0) {
            return bad("rms_const must be > 0");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must be in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be > 0");
        }
        self.msign_mode.validate()
    }
}

/// Root-mean-square entry of an update matrix.
pub fn update_rms(o: &Tensor) -> Result<f64> {
    if o.is_empty() {
        return Err(Error::Contract("update_rms of an empty tensor".into()));
    }
    Ok((o.sum_squares() / o.len() as f64).sqrt())
}

/// Applies one optimizer step to `param` using its stored gradient and state.
/// Returns the RMS of the update direction (before learning rate and decay).
pub fn step_param(param: &mut ParamTensor, cfg: &OptimizerConfig, lr: f64) -> Result<f64> {
    let ParamTensor {
        value, grad, state, ..
    } = param;
    let direction = match state {
        OptimState::Muon(s) => muon_step(value, grad, s, cfg, lr)?,
        OptimState::Adam(s) => adamw_step(value, grad, s, cfg, lr)?,
    };
    update_rms(&direction)
}

/// Routes each parameter to its optimizer for a run of kind `use_muon`.
pub fn route_for(param: &ParamTensor, use_muon: bool) -> Route {
    if use_muon && param.muon_eligible {
        Route::Muon
    } else {
        Route::AdamW
    }
}
