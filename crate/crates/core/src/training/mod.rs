//! Losses, the Adam optimizer and the alternating segmenter/discriminator
//! training loop.

mod adam;
mod loss;
mod trainer;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use loss::{combined_loss, cross_entropy_loss, disc_loss, gen_adv_loss};
pub use trainer::{generator_objective, train_loop, GeneratorObjective, Trainer};

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::NetworkError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("empty training set")]
    EmptyDataset,
    #[error(
        "non-finite loss at iteration {iteration}: L_cls={l_cls} L_Gen={l_gen} L_Disc={l_disc}{}",
        if detail.is_empty() { String::new() } else { format!(" ({detail})") }
    )]
    NonFinite {
        iteration: usize,
        l_cls: f64,
        l_gen: f64,
        l_disc: f64,
        detail: String,
    },
    #[error("{0}")]
    Callback(String),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

/// Tag under which samples without a domain tag are counted.
pub const UNTAGGED: &str = "untagged";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    /// λ in `L_cls + λ · L_Gen`.
    pub adv_weight: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Per-domain loss weights α_d; unlisted domains weigh 1.
    pub domain_weights: BTreeMap<String, f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub disc_steps_per_gen: usize,
    /// Save a checkpoint every this many iterations; 0 saves only the final
    /// one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            learning_rate: adam.learning_rate,
            iterations: 2000,
            adv_weight: 0.001,
            batch_size: 4,
            seed: 0,
            domain_weights: BTreeMap::new(),
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_eps: adam.eps,
            disc_steps_per_gen: 1,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.adam().validate()?;
        if !(self.adv_weight >= 0.0 && self.adv_weight.is_finite()) {
            return Err(TrainError::Config(format!(
                "adversarial weight must be non-negative, got {}",
                self.adv_weight
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch size must be positive".into()));
        }
        if self.disc_steps_per_gen == 0 {
            return Err(TrainError::Config("disc_steps_per_gen must be at least 1".into()));
        }
        if let Some((d, w)) = self.domain_weights.iter().find(|(_, w)| !(**w >= 0.0 && w.is_finite())) {
            return Err(TrainError::Config(format!("domain weight for {d} must be non-negative, got {w}")));
        }
        Ok(())
    }

    pub fn domain_weight(&self, tag: Option<&str>) -> f64 {
        tag.and_then(|t| self.domain_weights.get(t)).copied().unwrap_or(1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossReport {
    pub iteration: usize,
    pub l_cls: f64,
    pub l_gen: f64,
    pub l_disc: f64,
    /// `l_cls + λ · l_gen`
    pub l_total: f64,
    pub domain_counts: BTreeMap<String, usize>,
}

impl LossReport {
    /// CSV header with one count column per domain in `domains`.
    pub fn csv_header(domains: &[String]) -> String {
        let mut out = String::from("iteration,l_cls,l_gen,l_disc,l_total");
        for d in domains {
            write!(out, ",n_{d}").unwrap();
        }
        out
    }

    pub fn csv_row(&self, domains: &[String]) -> String {
        let mut out = format!(
            "{},{},{},{},{}",
            self.iteration, self.l_cls, self.l_gen, self.l_disc, self.l_total
        );
        for d in domains {
            write!(out, ",{}", self.domain_counts.get(d).copied().unwrap_or(0)).unwrap();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = TrainConfig::default();
        assert_eq!(c.learning_rate, 0.001);
        assert_eq!(c.iterations, 2000);
        assert_eq!(c.adv_weight, 0.001);
        assert_eq!((c.beta1, c.beta2, c.adam_eps), (0.9, 0.999, 1e-8));
        assert_eq!(c.disc_steps_per_gen, 1);
        assert_eq!(c.domain_weight(Some("ct")), 1.0);
        c.validate().unwrap();
    }

    #[test]
    fn validation() {
        let bad = |f: fn(&mut TrainConfig)| {
            let mut c = TrainConfig::default();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(|c| c.learning_rate = 0.0));
        assert!(bad(|c| c.adv_weight = -1.0));
        assert!(bad(|c| c.batch_size = 0));
        assert!(bad(|c| {
            c.domain_weights.insert("mr".into(), -0.5);
        }));
        assert!(!bad(|c| c.adv_weight = 0.0));
    }

    #[test]
    fn csv_layout() {
        let r = LossReport {
            iteration: 3,
            l_cls: 0.5,
            l_gen: 0.25,
            l_disc: 1.0,
            l_total: 0.50025,
            domain_counts: [("ct".to_string(), 3)].into_iter().collect(),
        };
        let domains = vec!["ct".to_string(), "mr".to_string()];
        assert_eq!(LossReport::csv_header(&domains), "iteration,l_cls,l_gen,l_disc,l_total,n_ct,n_mr");
        assert_eq!(r.csv_row(&domains), "3,0.5,0.25,1,0.50025,3,0");
    }

    #[test]
    fn config_json_uses_defaults() {
        let c: TrainConfig = serde_json::from_str(r#"{"iterations": 10}"#).unwrap();
        assert_eq!(c.iterations, 10);
        assert_eq!(c.learning_rate, 0.001);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"iteration": 10}"#).is_err());
    }
}
