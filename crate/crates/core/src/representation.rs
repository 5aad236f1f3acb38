//! Stage 1: supervised DAN pre-training on code labels and frozen-encoder
//! representation extraction.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{ConceptDoc, PatientRecord, Silo};
use crate::error::{Error, Result};
use crate::federation::{EpochWindow, LocalOutcome, LocalTrainer};
use crate::neural::{dan_forward, Activation, DanGrads, DanParams, ParamSet};
use crate::seed::{self, stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    pub epochs_per_round: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.epochs_per_round == 0 {
            return Err(Error::config("epochs_per_round", "must be at least 1"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config("lr", format!("{} must be positive", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        Ok(())
    }
}

/// Shuffled sample order for one epoch, derived from the spec seed, the site
/// and the global epoch index only.
pub(crate) fn epoch_order(n: usize, spec_seed: u64, site: usize, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(
        spec_seed,
        &[stream::SHUFFLE, site as u64, epoch as u64],
    ));
    order
}

fn check_records(records: &[PatientRecord], p: &DanParams) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Data("silo holds no records".into()));
    }
    for r in records {
        let codes = r.code_labels.as_ref().ok_or_else(|| {
            Error::Data(format!("patient {} has no code labels", r.patient_id))
        })?;
        if codes.len() != p.outputs() {
            return Err(Error::Data(format!(
                "patient {} has {} code labels, model has {} outputs",
                r.patient_id,
                codes.len(),
                p.outputs()
            )));
        }
        if r.doc.is_empty() {
            return Err(Error::Data(format!("patient {} has an empty document", r.patient_id)));
        }
        r.doc.check_vocab(p.vocab_size())?;
    }
    Ok(())
}

/// Minibatch SGD on the summed BCE, averaged over each batch.
fn train_window(
    init: &DanParams,
    records: &[PatientRecord],
    spec: &TrainSpec,
    act: Activation,
    window: EpochWindow,
) -> Result<(DanParams, f64)> {
    spec.validate()?;
    check_records(records, init)?;
    let mut params = init.clone();
    let mut grads = DanGrads::new(&params);
    let mut last_loss = f64::NAN;
    for e in 0..window.epochs {
        let order = epoch_order(records.len(), spec.seed, window.site, window.first_epoch + e);
        let mut total = 0.0;
        for batch in order.chunks(spec.batch_size) {
            grads.clear();
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let r = &records[i];
                let labels = r.code_labels.as_deref().expect("checked");
                total += grads.accumulate(&params, &r.doc, labels, act, scale)?;
            }
            grads.apply_sgd(&mut params, spec.lr);
        }
        params.check_finite()?;
        last_loss = total / records.len() as f64;
    }
    Ok((params, last_loss))
}

/// Trains `epochs_per_round` epochs on one silo, starting from `p`.
pub fn train_local_dan(
    p: &DanParams,
    silo: &Silo,
    spec: &TrainSpec,
    act: Activation,
) -> Result<DanParams> {
    let window = EpochWindow {
        site: silo.site_id,
        first_epoch: 0,
        epochs: spec.epochs_per_round,
    };
    train_window(p, &silo.records, spec, act, window).map(|(p, _)| p)
}

/// [`LocalTrainer`] for the DAN over silos of code-labelled records.
#[derive(Debug, Clone, Copy, Default)]
pub struct DanTrainer {
    pub activation: Activation,
}

impl LocalTrainer for DanTrainer {
    type Data = Silo;

    fn sample_count(&self, data: &Silo) -> usize {
        data.sample_count()
    }

    fn train(
        &self,
        init: &ParamSet,
        data: &Silo,
        spec: &TrainSpec,
        window: EpochWindow,
    ) -> Result<LocalOutcome> {
        let p = DanParams::from_param_set(init)?;
        let (trained, loss) = train_window(&p, &data.records, spec, self.activation, window)?;
        Ok(LocalOutcome {
            params: trained.to_param_set(),
            loss,
        })
    }
}

/// Mean summed-BCE of a model over records (no parameter updates).
pub fn mean_code_loss(p: &DanParams, records: &[PatientRecord], act: Activation) -> Result<f64> {
    check_records(records, p)?;
    let mut total = 0.0;
    for r in records {
        let out = dan_forward(p, &r.doc, act)?;
        total += crate::neural::bce_loss(&out.probs, r.code_labels.as_deref().expect("checked"))?;
    }
    Ok(total / records.len() as f64)
}

/// A trained DAN whose dense layer serves as a fixed feature extractor.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenEncoder {
    params: DanParams,
    activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderMeta {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub outputs: usize,
    pub activation: Activation,
    /// Hex SHA-256 of the training configuration text.
    pub config_digest: String,
}

pub const ENCODER_CHECKPOINT: &str = "encoder.ckpt";
pub const ENCODER_META: &str = "encoder.json";

impl FrozenEncoder {
    pub fn new(params: DanParams, activation: Activation) -> Result<Self> {
        params.check_finite()?;
        Ok(FrozenEncoder { params, activation })
    }

    pub fn params(&self) -> &DanParams {
        &self.params
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn hidden_dim(&self) -> usize {
        self.params.hidden_dim()
    }

    pub fn meta(&self, config_text: &str) -> EncoderMeta {
        EncoderMeta {
            vocab_size: self.params.vocab_size(),
            embed_dim: self.params.embed_dim(),
            hidden_dim: self.params.hidden_dim(),
            outputs: self.params.outputs(),
            activation: self.activation,
            config_digest: hex::encode(Sha256::digest(config_text.as_bytes())),
        }
    }

    /// Writes `encoder.ckpt` and the `encoder.json` sidecar into `dir`.
    pub fn save(&self, dir: &Path, config_text: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.params.to_param_set().save(&dir.join(ENCODER_CHECKPOINT))?;
        let meta = serde_json::to_string_pretty(&self.meta(config_text))?;
        let path = dir.join(ENCODER_META);
        fs::write(&path, meta + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let params = DanParams::from_param_set(&ParamSet::load(&dir.join(ENCODER_CHECKPOINT))?)?;
        let path = dir.join(ENCODER_META);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: EncoderMeta = serde_json::from_str(&text)?;
        let dims = (
            params.vocab_size(),
            params.embed_dim(),
            params.hidden_dim(),
            params.outputs(),
        );
        if dims != (meta.vocab_size, meta.embed_dim, meta.hidden_dim, meta.outputs) {
            return Err(Error::format(
                path.display().to_string(),
                format!("metadata dimensions disagree with checkpoint {dims:?}"),
            ));
        }
        FrozenEncoder::new(params, meta.activation)
    }
}

/// The dense-layer activations of the frozen model for `doc`.
pub fn extract_representation(enc: &FrozenEncoder, doc: &ConceptDoc) -> Result<Vec<f64>> {
    Ok(dan_forward(&enc.params, doc, enc.activation)?.hidden)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, SynthConfig};
    use crate::neural::init_params;

    fn spec(lr: f64, epochs: usize) -> TrainSpec {
        TrainSpec {
            epochs_per_round: epochs,
            lr,
            batch_size: 16,
            seed: 4,
        }
    }

    fn small_silo(noise: f64) -> (SynthConfig, Silo) {
        let cfg = SynthConfig {
            vocab_size: 120,
            num_codes: 5,
            num_diseases: 3,
            signature_block: 10,
            patients_pretrain: 300,
            patients_phenotype: 10,
            latent_noise: noise,
            prevalence: 0.3,
            ..SynthConfig::default()
        };
        let corpus = generate_corpus(&cfg).unwrap();
        (cfg, Silo::new(0, corpus.pretrain))
    }

    #[test]
    fn tiny_rate_leaves_params_unchanged() {
        let (cfg, silo) = small_silo(0.2);
        let p = init_params(cfg.vocab_size, 8, 8, cfg.num_codes, 1).unwrap();
        let out = train_local_dan(&p, &silo, &spec(1e-15, 1), Activation::Relu).unwrap();
        for (a, b) in p.to_param_set().tensors().zip(out.to_param_set().tensors()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn noise_free_training_reduces_loss() {
        let (cfg, silo) = small_silo(0.0);
        let p0 = init_params(cfg.vocab_size, 16, 16, cfg.num_codes, 1).unwrap();
        let before = mean_code_loss(&p0, &silo.records, Activation::Relu).unwrap();
        let mut p = p0;
        let mut history = Vec::new();
        for _ in 0..30 {
            p = train_local_dan(&p, &silo, &spec(0.5, 1), Activation::Relu).unwrap();
            let now = mean_code_loss(&p, &silo.records, Activation::Relu).unwrap();
            history.push(now);
        }
        let after = *history.last().unwrap();
        assert!(after <= 0.1 * before, "loss {before} -> {after}");
        assert!(history.windows(5).all(|w| w[4] < w[0]), "{history:?}");
    }

    #[test]
    fn training_is_deterministic() {
        let (cfg, silo) = small_silo(0.3);
        let p = init_params(cfg.vocab_size, 8, 8, cfg.num_codes, 2).unwrap();
        let a = train_local_dan(&p, &silo, &spec(0.3, 2), Activation::Relu).unwrap();
        let b = train_local_dan(&p, &silo, &spec(0.3, 2), Activation::Relu).unwrap();
        assert_eq!(a.to_param_set().to_bytes(), b.to_param_set().to_bytes());
    }

    #[test]
    fn missing_codes_is_a_data_error() {
        let (cfg, mut silo) = small_silo(0.3);
        silo.records[5].code_labels = None;
        let p = init_params(cfg.vocab_size, 4, 4, cfg.num_codes, 2).unwrap();
        assert!(matches!(
            train_local_dan(&p, &silo, &spec(0.1, 1), Activation::Relu),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn extraction_matches_forward_and_is_order_invariant() {
        let p = init_params(30, 6, 5, 3, 9).unwrap();
        let enc = FrozenEncoder::new(p.clone(), Activation::Relu).unwrap();
        let doc = ConceptDoc::new(vec![4, 9, 9, 20, 1]);
        let rep = extract_representation(&enc, &doc).unwrap();
        assert_eq!(rep, dan_forward(&p, &doc, Activation::Relu).unwrap().hidden);

        let mut shuffled = doc.tokens.clone();
        shuffled.reverse();
        assert_eq!(rep, extract_representation(&enc, &ConceptDoc::new(shuffled)).unwrap());
        let doubled: Vec<u32> = doc.tokens.iter().chain(&doc.tokens).copied().collect();
        assert_eq!(rep, extract_representation(&enc, &ConceptDoc::new(doubled)).unwrap());

        let zero = FrozenEncoder::new(DanParams::zeros(30, 6, 5, 3).unwrap(), Activation::Relu)
            .unwrap();
        assert!(extract_representation(&zero, &doc).unwrap().iter().all(|&h| h == 0.0));
        assert!(matches!(
            extract_representation(&enc, &ConceptDoc::default()),
            Err(Error::Inference(_))
        ));
    }

    #[test]
    fn trained_encoder_separates_diseases() {
        let (cfg, silo) = small_silo(0.0);
        let mut p = init_params(cfg.vocab_size, 16, 16, cfg.num_codes, 3).unwrap();
        for _ in 0..30 {
            p = train_local_dan(&p, &silo, &spec(0.5, 1), Activation::Relu).unwrap();
        }
        let enc = FrozenEncoder::new(p, Activation::Relu).unwrap();

        // Patients with exactly one active condition, keyed by that condition.
        let single: Vec<(usize, Vec<f64>)> = silo
            .records
            .iter()
            .filter_map(|r| {
                let codes = r.code_labels.as_ref().unwrap();
                let active: Vec<usize> = (0..codes.len()).filter(|&c| codes[c]).collect();
                (active.len() == 1)
                    .then(|| (active[0], extract_representation(&enc, &r.doc).unwrap()))
            })
            .collect();
        let cos = |a: &[f64], b: &[f64]| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            dot / (na * nb).max(1e-300)
        };
        let (mut same, mut n_same, mut diff, mut n_diff) = (0.0, 0, 0.0, 0);
        for (i, (ci, a)) in single.iter().enumerate() {
            for (cj, b) in &single[i + 1..] {
                if ci == cj {
                    same += cos(a, b);
                    n_same += 1;
                } else {
                    diff += cos(a, b);
                    n_diff += 1;
                }
            }
        }
        assert!(n_same > 20 && n_diff > 20);
        let (same, diff) = (same / n_same as f64, diff / n_diff as f64);
        assert!(same > diff, "same-disease {same} vs different {diff}");
    }

    #[test]
    fn encoder_persistence() {
        let dir = tempfile::tempdir().unwrap();
        let enc = FrozenEncoder::new(init_params(10, 3, 4, 2, 0).unwrap(), Activation::Tanh).unwrap();
        enc.save(dir.path(), "cfg").unwrap();
        let back = FrozenEncoder::load(dir.path()).unwrap();
        assert_eq!(back, enc);
        assert_eq!(enc.meta("cfg").config_digest.len(), 64);
    }
}
