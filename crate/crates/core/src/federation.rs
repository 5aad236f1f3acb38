//! Federated coordinator: every global round dispatches the current aggregate
//! to all sites, trains each site independently (in parallel), and replaces
//! the aggregate with the sample-size-weighted average of the site models.
//!
//! Aggregation always reduces in site-index order, so results are the same
//! whether sites ran serially or concurrently.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::{ParamSet, Tensor};
use crate::representation::TrainSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Representation,
    Phenotype,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FedConfig {
    pub num_sites: usize,
    pub global_rounds: usize,
    pub local_spec: TrainSpec,
    pub stage: Stage,
    /// Silo size skew for partitioning; 0 gives a balanced split.
    #[serde(default)]
    pub silo_skew: f64,
}

impl FedConfig {
    /// Stage-1 defaults: 10 sites, 20 rounds of five local epochs.
    pub fn representation_default() -> Self {
        FedConfig {
            num_sites: 10,
            global_rounds: 20,
            local_spec: TrainSpec {
                epochs_per_round: 5,
                lr: 0.5,
                batch_size: 32,
                seed: 0,
            },
            stage: Stage::Representation,
            silo_skew: 0.0,
        }
    }

    /// Stage-2 defaults: 3 sites, 100 rounds of one local epoch.
    pub fn phenotype_default() -> Self {
        FedConfig {
            num_sites: 3,
            global_rounds: 100,
            local_spec: TrainSpec {
                epochs_per_round: 1,
                lr: 4.0,
                batch_size: 32,
                seed: 0,
            },
            stage: Stage::Phenotype,
            silo_skew: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_sites == 0 {
            return Err(Error::config("num_sites", "must be at least 1"));
        }
        if self.global_rounds == 0 {
            return Err(Error::config("global_rounds", "must be at least 1"));
        }
        if !(self.silo_skew.is_finite() && self.silo_skew >= 0.0) {
            return Err(Error::config("silo_skew", "must be finite and >= 0"));
        }
        self.local_spec.validate()
    }

    /// Epochs a centralized run needs to match this federation's total.
    pub fn total_epochs(&self) -> usize {
        self.global_rounds * self.local_spec.epochs_per_round
    }
}

/// Which epochs a local training call covers. Shuffle orders are derived from
/// `(seed, site, first_epoch + e)`, so a single call over `T * E` epochs
/// replays exactly the epochs of `T` rounds of `E`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpochWindow {
    pub site: usize,
    pub first_epoch: usize,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalOutcome {
    pub params: ParamSet,
    /// Mean training loss over the last epoch of the window.
    pub loss: f64,
}

/// Site-local training for one model family.
pub trait LocalTrainer: Sync {
    type Data: Sync;

    fn sample_count(&self, data: &Self::Data) -> usize;

    fn train(
        &self,
        init: &ParamSet,
        data: &Self::Data,
        spec: &TrainSpec,
        window: EpochWindow,
    ) -> Result<LocalOutcome>;
}

/// `sum_k (n_k / N) * W_k` with `N = sum_k n_k`, reduced in input order.
///
/// Each output value is clamped into the range spanned by its inputs, which
/// it lies in exactly; the clamp only removes rounding overshoot, so equal
/// inputs average to themselves bit for bit.
pub fn weighted_average(models: &[ParamSet], counts: &[usize]) -> Result<ParamSet> {
    let first = models
        .first()
        .ok_or_else(|| Error::Weight("no models to aggregate".into()))?;
    if models.len() != counts.len() {
        return Err(Error::Weight(format!(
            "{} models but {} sample counts",
            models.len(),
            counts.len()
        )));
    }
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Weight(format!("site {k} reports zero samples")));
    }
    for m in &models[1..] {
        first.ensure_congruent(m)?;
    }
    if models.len() == 1 {
        return Ok(first.clone());
    }

    let total: usize = counts.iter().sum();
    let weights: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
    let mut entries = Vec::with_capacity(first.len());
    for (ti, (name, tensor)) in first.iter().enumerate() {
        let inputs: Vec<&[f64]> = models
            .iter()
            .map(|m| m.tensors().nth(ti).expect("congruent").data())
            .collect();
        let data = (0..tensor.len())
            .map(|i| {
                let mut acc = 0.0;
                let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
                for (x, &w) in inputs.iter().zip(&weights) {
                    acc += w * x[i];
                    lo = lo.min(x[i]);
                    hi = hi.max(x[i]);
                }
                if lo == hi {
                    inputs[0][i]
                } else {
                    acc.clamp(lo, hi)
                }
            })
            .collect();
        entries.push((name.to_string(), Tensor::new(tensor.shape().to_vec(), data)?));
    }
    ParamSet::new(entries)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    pub sample_counts: Vec<usize>,
    pub site_losses: Vec<f64>,
    /// Hex SHA-256 of the aggregate's checkpoint bytes.
    pub digest: String,
}

#[derive(Serialize)]
struct RoundLogLine<'a> {
    round: usize,
    site: usize,
    n_k: usize,
    loss: f64,
    digest: &'a str,
}

impl RoundLog {
    /// One JSON object per (round, site).
    pub fn write_lines<W: Write>(logs: &[RoundLog], mut out: W) -> std::io::Result<()> {
        for log in logs {
            for (site, (&n_k, &loss)) in log.sample_counts.iter().zip(&log.site_losses).enumerate()
            {
                let line = RoundLogLine {
                    round: log.round,
                    site,
                    n_k,
                    loss,
                    digest: &log.digest,
                };
                serde_json::to_writer(&mut out, &line)?;
                out.write_all(b"\n")?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FedOutcome {
    pub params: ParamSet,
    pub logs: Vec<RoundLog>,
}

/// Runs `cfg.global_rounds` rounds over `sites` (site `k` is `sites[k]`).
/// Any site failure aborts the run with that site's index; there is no
/// partial aggregation.
pub fn run_federated<T: LocalTrainer>(
    sites: &[T::Data],
    cfg: &FedConfig,
    init: &ParamSet,
    trainer: &T,
) -> Result<FedOutcome> {
    cfg.validate()?;
    if sites.len() != cfg.num_sites {
        return Err(Error::config(
            "num_sites",
            format!("configured {} sites but {} were given", cfg.num_sites, sites.len()),
        ));
    }
    let counts: Vec<usize> = sites.iter().map(|s| trainer.sample_count(s)).collect();
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Site {
            site: k,
            source: Box::new(Error::Data("site holds no samples".into())),
        });
    }

    let epochs = cfg.local_spec.epochs_per_round;
    let mut current = init.clone();
    let mut logs = Vec::with_capacity(cfg.global_rounds);
    for round in 0..cfg.global_rounds {
        let results: Vec<Result<LocalOutcome>> = sites
            .par_iter()
            .enumerate()
            .map(|(site, data)| {
                let window = EpochWindow {
                    site,
                    first_epoch: round * epochs,
                    epochs,
                };
                let out = trainer.train(&current, data, &cfg.local_spec, window)?;
                current.ensure_congruent(&out.params)?;
                Ok(out)
            })
            .collect();

        let mut models = Vec::with_capacity(sites.len());
        let mut losses = Vec::with_capacity(sites.len());
        for (site, r) in results.into_iter().enumerate() {
            let out = r.map_err(|e| Error::Site {
                site,
                source: Box::new(e),
            })?;
            models.push(out.params);
            losses.push(out.loss);
        }
        current = weighted_average(&models, &counts)?;
        logs.push(RoundLog {
            round: round + 1,
            sample_counts: counts.clone(),
            site_losses: losses,
            digest: current.digest(),
        });
    }
    Ok(FedOutcome {
        params: current,
        logs,
    })
}

/// The centralized counterpart of [`run_federated`]: one site holding all
/// data, trained for the federation's total number of epochs in one call.
pub fn run_centralized<T: LocalTrainer>(
    data: &T::Data,
    cfg: &FedConfig,
    init: &ParamSet,
    trainer: &T,
) -> Result<LocalOutcome> {
    cfg.validate()?;
    let window = EpochWindow {
        site: 0,
        first_epoch: 0,
        epochs: cfg.total_epochs(),
    };
    let out = trainer.train(init, data, &cfg.local_spec, window)?;
    init.ensure_congruent(&out.params)?;
    Ok(out)
}
