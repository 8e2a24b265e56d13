//! Run configuration.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Fedavg,
    DrfaClient,
    DrfaGroup,
    Fmda,
    FmdaM,
    Inda,
}

impl Algorithm {
    pub const ALL: [Algorithm; 6] = [
        Algorithm::Fedavg,
        Algorithm::DrfaClient,
        Algorithm::DrfaGroup,
        Algorithm::Fmda,
        Algorithm::FmdaM,
        Algorithm::Inda,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Fedavg => "fedavg",
            Algorithm::DrfaClient => "drfa_client",
            Algorithm::DrfaGroup => "drfa_group",
            Algorithm::Fmda => "fmda",
            Algorithm::FmdaM => "fmda_m",
            Algorithm::Inda => "inda",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown algorithm `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LambdaInit {
    /// `λ_{i,k} = n^u_{i,k} / n`.
    #[default]
    SizeProportional,
    Uniform,
}

fn default_beta() -> f64 {
    0.4
}
fn default_batch() -> usize {
    50
}
fn default_radius() -> f64 {
    0.1
}

/// Hyperparameters of one training run. Field names match the JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    /// Local iterations per round.
    #[serde(rename = "E")]
    pub local_iters: usize,
    /// Communication rounds.
    #[serde(rename = "R")]
    pub rounds: usize,
    /// Clients sampled per round.
    #[serde(rename = "K")]
    pub clients_per_round: usize,
    pub eta: f64,
    pub gamma: f64,
    #[serde(default = "default_beta")]
    pub beta_theta: f64,
    #[serde(default = "default_beta")]
    pub beta_lambda: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_batch")]
    pub loss_batch: usize,
    #[serde(default = "default_radius")]
    pub ind_radius: f64,
    #[serde(default)]
    pub lambda_init: LambdaInit,
    pub seed: u64,
}

impl RunConfig {
    /// A config with the default hyperparameters for `algorithm`.
    pub fn new(algorithm: Algorithm, local_iters: usize, rounds: usize, clients_per_round: usize) -> Self {
        RunConfig {
            algorithm,
            local_iters,
            rounds,
            clients_per_round,
            eta: 1e-2,
            gamma: 1e-2,
            beta_theta: default_beta(),
            beta_lambda: default_beta(),
            batch_size: default_batch(),
            loss_batch: default_batch(),
            ind_radius: default_radius(),
            lambda_init: LambdaInit::SizeProportional,
            seed: 0,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks the scalar invariants (`E, R ≥ 1`, `K ≥ 1`, `η > 0`, `γ ≥ 0`, momentum ranges).
    pub fn validate(&self) -> Result<()> {
        self.validate_steps()?;
        if self.rounds == 0 {
            return Err(Error::Config("R must be >= 1".into()));
        }
        Ok(())
    }

    pub(crate) fn validate_steps(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.local_iters == 0 {
            return fail("E must be >= 1");
        }
        if self.clients_per_round == 0 {
            return fail("K must be >= 1");
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return fail("eta must be > 0");
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return fail("gamma must be >= 0");
        }
        if !(0.0..1.0).contains(&self.beta_theta) {
            return fail("beta_theta must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.beta_lambda) {
            return fail("beta_lambda must lie in [0, 1]");
        }
        if self.batch_size == 0 || self.loss_batch == 0 {
            return fail("batch sizes must be >= 1");
        }
        if !(self.ind_radius >= 0.0 && self.ind_radius.is_finite()) {
            return fail("ind_radius must be >= 0");
        }
        Ok(())
    }

    /// Checks `K ≤ N` against the number of clients.
    pub fn validate_for(&self, client_count: usize) -> Result<()> {
        self.validate_steps()?;
        if self.clients_per_round > client_count {
            return Err(Error::Config(format!(
                "K = {} exceeds the client count {client_count}",
                self.clients_per_round
            )));
        }
        Ok(())
    }

    /// Momentum coefficients actually applied by the variant.
    pub fn effective_momentum(&self) -> (f64, f64) {
        match self.algorithm {
            Algorithm::FmdaM | Algorithm::Inda => (self.beta_theta, self.beta_lambda),
            Algorithm::Fmda => (0.0, 0.0),
            Algorithm::Fedavg | Algorithm::DrfaClient | Algorithm::DrfaGroup => (0.0, 1.0),
        }
    }

    /// SHA-256 of the config with `R` cleared, so a checkpoint can be resumed
    /// with a longer horizon.
    pub fn digest(&self) -> String {
        let text = serde_json::to_string(&RunConfig { rounds: 0, ..self.clone() }).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FULL: &str = r#"{"algorithm":"fmda_m","E":10,"R":5,"K":2,"eta":0.01,"gamma":0.01,
        "beta_theta":0.4,"beta_lambda":0.4,"batch_size":50,"loss_batch":50,"ind_radius":0.1,
        "lambda_init":"uniform","seed":42}"#;

    #[test]
    fn parses_documented_fields() {
        let cfg = RunConfig::from_json(FULL).unwrap();
        assert_eq!(cfg.algorithm, Algorithm::FmdaM);
        assert_eq!((cfg.local_iters, cfg.rounds, cfg.clients_per_round), (10, 5, 2));
        assert_eq!(cfg.lambda_init, LambdaInit::Uniform);
    }

    #[test]
    fn rejects_unknown_fields() {
        let text = FULL.replace("\"seed\":42", "\"seed\":42,\"extra\":1");
        assert!(matches!(RunConfig::from_json(&text), Err(Error::Config(_))));
    }

    #[test]
    fn rejects_out_of_range_values() {
        for (from, to) in
            [("\"E\":10", "\"E\":0"), ("\"eta\":0.01", "\"eta\":0"), ("\"beta_lambda\":0.4", "\"beta_lambda\":1.5")]
        {
            assert!(RunConfig::from_json(&FULL.replace(from, to)).is_err(), "{to}");
        }
        let cfg = RunConfig::from_json(FULL).unwrap();
        assert!(cfg.validate_for(1).is_err());
        assert!(cfg.validate_for(2).is_ok());
    }

    #[test]
    fn algorithm_names_round_trip() {
        for a in Algorithm::ALL {
            assert_eq!(a.name().parse::<Algorithm>().unwrap(), a);
        }
    }
}
