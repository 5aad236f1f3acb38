//! The seven-way ablation: {no pre-training, centralized, federated} stage 1
//! crossed with {centralized, federated, single-source} stage 2.
//!
//! Every experiment id shares the corpus, the per-seed train/test split and
//! the per-seed stage-2 silos, so reports for different ids are comparable.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    filter_codes, filter_patients, generate_corpus, partition_silos_skewed, Corpus, DiseaseId,
    PatientRecord, Silo, SynthConfig, DEFAULT_MAX_TOKENS,
};
use crate::error::{Error, Result};
use crate::federation::{run_centralized, run_federated, FedConfig, RoundLog};
use crate::metrics::{aggregate_report, MetricsReport, Prf};
use crate::neural::{init_params, Activation, DanParams, ParamSet};
use crate::phenotype::{
    evaluate, prepare_dataset_with, FeatureSource, FeatureTable, PhenotypeDataset, SvmModel,
    SvmTrainer, DEFAULT_MIN_CLASS_COUNT,
};
use crate::representation::{DanTrainer, FrozenEncoder};
use crate::seed::{self, stream};
use crate::vocab::fit_idf;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepresentationMode {
    None,
    Centralized,
    Federated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhenotypingMode {
    Centralized,
    Federated,
    SingleSource,
}

pub const EXPERIMENT_IDS: std::ops::RangeInclusive<u8> = 1..=7;

/// The fixed id to mode table.
pub fn modes_for(id: u8) -> Result<(RepresentationMode, PhenotypingMode)> {
    use PhenotypingMode as P;
    use RepresentationMode as R;
    Ok(match id {
        1 => (R::None, P::Centralized),
        2 => (R::None, P::Federated),
        3 => (R::None, P::SingleSource),
        4 => (R::Centralized, P::Centralized),
        5 => (R::Centralized, P::Federated),
        6 => (R::Federated, P::Centralized),
        7 => (R::Federated, P::Federated),
        _ => return Err(Error::config("id", format!("{id} is not an experiment id (1..=7)"))),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub activation: Activation,
    /// Stage-1 code columns with fewer positive patients are dropped; 0 keeps all.
    pub min_code_frequency: usize,
    pub max_tokens: usize,
    pub min_class_count: usize,
    pub test_fraction: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 64,
            hidden_dim: 64,
            activation: Activation::Relu,
            min_code_frequency: 0,
            max_tokens: DEFAULT_MAX_TOKENS,
            min_class_count: DEFAULT_MIN_CLASS_COUNT,
            test_fraction: 0.2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(Error::config("model.embed_dim", "must be at least 1"));
        }
        if self.hidden_dim == 0 {
            return Err(Error::config("model.hidden_dim", "must be at least 1"));
        }
        if self.max_tokens == 0 {
            return Err(Error::config("model.max_tokens", "must be at least 1"));
        }
        if self.min_class_count == 0 {
            return Err(Error::config("model.min_class_count", "must be at least 1"));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::config("model.test_fraction", "must lie strictly between 0 and 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub id: u8,
    pub representation: RepresentationMode,
    pub phenotyping: PhenotypingMode,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub corpus: SynthConfig,
    /// Stage-1 schedule; absent exactly when there is no pre-training.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fed1: Option<FedConfig>,
    #[serde(default = "FedConfig::phenotype_default")]
    pub fed2: FedConfig,
}

pub const DEFAULT_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

impl ExperimentSpec {
    pub fn for_id(id: u8) -> Result<Self> {
        let (representation, phenotyping) = modes_for(id)?;
        Ok(ExperimentSpec {
            id,
            representation,
            phenotyping,
            seeds: DEFAULT_SEEDS.to_vec(),
            model: ModelConfig::default(),
            corpus: SynthConfig::default(),
            fed1: (representation != RepresentationMode::None)
                .then(FedConfig::representation_default),
            fed2: FedConfig::phenotype_default(),
        })
    }

    /// Overlays a partial TOML document on the defaults for its `id`
    /// (or `default_id` when the document has none).
    pub fn from_toml(text: &str, default_id: Option<u8>) -> Result<Self> {
        let overlay: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::format("config", e.to_string()))?;
        let id = match overlay.get("id") {
            Some(v) => v
                .as_integer()
                .and_then(|i| u8::try_from(i).ok())
                .ok_or_else(|| Error::config("id", "must be an integer in 1..=7"))?,
            None => default_id.ok_or_else(|| Error::config("id", "missing"))?,
        };
        let mut base = toml::Table::try_from(ExperimentSpec::for_id(id)?)
            .map_err(|e| Error::format("config", e.to_string()))?;
        merge(&mut base, overlay);
        let spec: ExperimentSpec = base
            .try_into()
            .map_err(|e: toml::de::Error| Error::format("config", e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serializes to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        let (representation, phenotyping) = modes_for(self.id)?;
        if (representation, phenotyping) != (self.representation, self.phenotyping) {
            return Err(Error::config(
                "representation/phenotyping",
                format!(
                    "experiment {} runs {representation:?}/{phenotyping:?}, not {:?}/{:?}",
                    self.id, self.representation, self.phenotyping
                ),
            ));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return Err(Error::config("seeds", "seeds must be distinct"));
        }
        self.model.validate()?;
        self.corpus.validate()?;
        match (&self.fed1, representation) {
            (Some(_), RepresentationMode::None) => {
                return Err(Error::config(
                    "fed1",
                    "set, but this experiment has no representation learning",
                ))
            }
            (None, RepresentationMode::Centralized | RepresentationMode::Federated) => {
                return Err(Error::config("fed1", "required for representation learning"))
            }
            (Some(f), _) => f.validate()?,
            (None, _) => {}
        }
        self.fed2.validate()
    }
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (key, value) in overlay {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

/// The per-seed held-out test set: a random `test_fraction` of patients,
/// shared by every disease and every experiment id.
pub fn split_test_ids(records: &[PatientRecord], test_fraction: f64, seed: u64) -> BTreeSet<u64> {
    let mut ids: Vec<u64> = records.iter().map(|r| r.patient_id).collect();
    ids.shuffle(&mut seed::rng(seed, &[stream::SPLIT]));
    let n_test = ((records.len() as f64) * test_fraction).round() as usize;
    ids.truncate(n_test.clamp(1, records.len().saturating_sub(1)));
    ids.into_iter().collect()
}

/// Stage-1 records after the token and code-frequency filters.
pub fn pretrain_records(corpus: &Corpus, model: &ModelConfig) -> Result<Vec<PatientRecord>> {
    let records = filter_patients(corpus.pretrain.clone(), model.max_tokens);
    if model.min_code_frequency == 0 {
        return Ok(records);
    }
    filter_codes(&records, model.min_code_frequency).map(|(r, _)| r)
}

pub struct Pretrained {
    pub encoder: FrozenEncoder,
    pub logs: Vec<RoundLog>,
}

/// Trains the stage-1 DAN from a seeded initialization, either on all
/// records or federated over `fed.num_sites` random silos.
pub fn pretrain(
    records: &[PatientRecord],
    vocab_size: usize,
    model: &ModelConfig,
    fed: &FedConfig,
    federated: bool,
    seed: u64,
) -> Result<Pretrained> {
    let outputs = records
        .first()
        .and_then(|r| r.code_labels.as_ref())
        .map(Vec::len)
        .ok_or_else(|| Error::Data("no code-labelled pre-training records".into()))?;
    let init = init_params(vocab_size, model.embed_dim, model.hidden_dim, outputs, seed)?
        .to_param_set();
    let mut fed = fed.clone();
    fed.local_spec.seed = seed::derive(seed, &[stream::SHUFFLE, 1]);
    let trainer = DanTrainer {
        activation: model.activation,
    };
    let (params, logs) = if federated {
        let silos = partition_silos_skewed(
            records,
            fed.num_sites,
            seed::derive(seed, &[stream::PARTITION, 1]),
            fed.silo_skew,
        )?;
        let out = run_federated(&silos, &fed, &init, &trainer)?;
        (out.params, out.logs)
    } else {
        let all = Silo::new(0, records.to_vec());
        (run_centralized(&all, &fed, &init, &trainer)?.params, Vec::new())
    };
    Ok(Pretrained {
        encoder: FrozenEncoder::new(DanParams::from_param_set(&params)?, model.activation)?,
        logs,
    })
}

/// One trained stage-2 model; `site` is set for single-source models.
#[derive(Debug, Clone)]
pub struct TrainedSvm {
    pub disease: DiseaseId,
    pub site: Option<usize>,
    pub model: SvmModel,
}

#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub report: MetricsReport,
    pub encoder: Option<FrozenEncoder>,
    pub stage1_logs: Vec<RoundLog>,
    pub svms: Vec<TrainedSvm>,
    pub stage2_logs: BTreeMap<DiseaseId, Vec<RoundLog>>,
}

#[derive(Debug, Clone)]
struct DiseaseRun {
    prf: Prf,
    svms: Vec<TrainedSvm>,
    logs: Vec<RoundLog>,
}

#[allow(clippy::too_many_arguments)]
fn phenotype_disease(
    model_cfg: &ModelConfig,
    mode: PhenotypingMode,
    disease: DiseaseId,
    records: &[PatientRecord],
    table: &FeatureTable,
    test_ids: &BTreeSet<u64>,
    silo_ids: &[BTreeSet<u64>],
    fed: &FedConfig,
) -> Result<DiseaseRun> {
    let full = prepare_dataset_with(records, table, disease, model_cfg.min_class_count)?;
    let test = full.subset(|e| test_ids.contains(&e.patient_id));
    let train = full.subset(|e| !test_ids.contains(&e.patient_id));
    let trainer = SvmTrainer::for_dataset(&full);
    let init = SvmModel::zeros(full.classes.clone(), full.dims, full.feature_kind)?.to_param_set();
    let to_model = |p: &ParamSet| SvmModel::from_param_set(p, full.classes.clone(), full.feature_kind);
    let silo_data = || -> Vec<PhenotypeDataset> {
        silo_ids
            .iter()
            .map(|ids| train.subset(|e| ids.contains(&e.patient_id)))
            .collect()
    };

    let single = |model: SvmModel, site| TrainedSvm {
        disease,
        site,
        model,
    };
    match mode {
        PhenotypingMode::Centralized => {
            let model = to_model(&run_centralized(&train, fed, &init, &trainer)?.params)?;
            let prf = evaluate(&model, &test)?.1;
            Ok(DiseaseRun {
                prf,
                svms: vec![single(model, None)],
                logs: Vec::new(),
            })
        }
        PhenotypingMode::Federated => {
            let out = run_federated(&silo_data(), fed, &init, &trainer)?;
            let model = to_model(&out.params)?;
            let prf = evaluate(&model, &test)?.1;
            Ok(DiseaseRun {
                prf,
                svms: vec![single(model, None)],
                logs: out.logs,
            })
        }
        PhenotypingMode::SingleSource => {
            let mut svms = Vec::new();
            let mut rows = Vec::new();
            for (site, data) in silo_data().iter().enumerate() {
                let model = to_model(&run_centralized(data, fed, &init, &trainer)?.params)
                    .map_err(|e| Error::Site {
                        site,
                        source: Box::new(e),
                    })?;
                rows.push(evaluate(&model, &test)?.1);
                svms.push(single(model, Some(site)));
            }
            let n = rows.len() as f64;
            let prf = Prf {
                precision: rows.iter().map(|r| r.precision).sum::<f64>() / n,
                recall: rows.iter().map(|r| r.recall).sum::<f64>() / n,
                f1: rows.iter().map(|r| r.f1).sum::<f64>() / n,
            };
            Ok(DiseaseRun {
                prf,
                svms,
                logs: Vec::new(),
            })
        }
    }
}

/// Stage-2 result for one seed: a report plus every trained model.
#[derive(Debug, Clone)]
pub struct PhenotypeRun {
    pub report: MetricsReport,
    pub svms: Vec<TrainedSvm>,
    pub logs: BTreeMap<DiseaseId, Vec<RoundLog>>,
}

/// Splits the cohort by `seed`, featurizes it (TF-IDF fitted on the training
/// split, or the frozen encoder), and trains and evaluates one SVM family per
/// disease under `mode`. Silos for federated and single-source training are
/// a seeded partition of the training split.
pub fn run_phenotyping(
    records: &[PatientRecord],
    encoder: Option<&FrozenEncoder>,
    vocab_size: usize,
    model_cfg: &ModelConfig,
    mode: PhenotypingMode,
    fed2: &FedConfig,
    seed: u64,
) -> Result<PhenotypeRun> {
    model_cfg.validate()?;
    let records = filter_patients(records.to_vec(), model_cfg.max_tokens);
    if records.len() < 2 {
        return Err(Error::Data("phenotype cohort needs at least two patients".into()));
    }
    let num_diseases = records[0]
        .phenotype_labels
        .as_ref()
        .map(Vec::len)
        .ok_or_else(|| Error::Data("records carry no phenotype labels".into()))?;
    let test_ids = split_test_ids(&records, model_cfg.test_fraction, seed);
    let train_records: Vec<PatientRecord> = records
        .iter()
        .filter(|r| !test_ids.contains(&r.patient_id))
        .cloned()
        .collect();

    let table = match encoder {
        None => {
            let docs: Vec<_> = train_records.iter().map(|r| &r.doc).collect();
            let idf = fit_idf(&docs, vocab_size)?;
            FeatureTable::build(&records, &FeatureSource::TfIdf(&idf))?
        }
        Some(enc) => FeatureTable::build(&records, &FeatureSource::Representation(enc))?,
    };

    let mut fed2 = fed2.clone();
    fed2.local_spec.seed = seed::derive(seed, &[stream::SHUFFLE, 2]);
    let silo_ids: Vec<BTreeSet<u64>> = partition_silos_skewed(
        &train_records,
        fed2.num_sites,
        seed::derive(seed, &[stream::PARTITION, 2]),
        fed2.silo_skew,
    )?
    .into_iter()
    .map(|s| s.records.iter().map(|r| r.patient_id).collect())
    .collect();

    let runs: Vec<DiseaseRun> = (0..num_diseases)
        .into_par_iter()
        .map(|d| {
            phenotype_disease(model_cfg, mode, d, &records, &table, &test_ids, &silo_ids, &fed2)
        })
        .collect::<Result<_>>()?;

    let rows: Vec<(DiseaseId, Prf)> = runs.iter().enumerate().map(|(d, r)| (d, r.prf)).collect();
    let mut svms = Vec::new();
    let mut logs = BTreeMap::new();
    for (d, run) in runs.into_iter().enumerate() {
        svms.extend(run.svms);
        if !run.logs.is_empty() {
            logs.insert(d, run.logs);
        }
    }
    Ok(PhenotypeRun {
        report: aggregate_report(&rows)?,
        svms,
        logs,
    })
}

/// One seed of an experiment on an already generated corpus.
pub fn run_seed(spec: &ExperimentSpec, corpus: &Corpus, seed: u64) -> Result<SeedRun> {
    spec.validate()?;
    let (encoder, stage1_logs) = match (spec.representation, &spec.fed1) {
        (RepresentationMode::None, _) => (None, Vec::new()),
        (mode, Some(fed1)) => {
            let pre = pretrain_records(corpus, &spec.model)?;
            let out = pretrain(
                &pre,
                spec.corpus.vocab_size,
                &spec.model,
                fed1,
                mode == RepresentationMode::Federated,
                seed,
            )?;
            (Some(out.encoder), out.logs)
        }
        (_, None) => return Err(Error::config("fed1", "required for representation learning")),
    };
    let stage2 = run_phenotyping(
        &corpus.phenotype,
        encoder.as_ref(),
        spec.corpus.vocab_size,
        &spec.model,
        spec.phenotyping,
        &spec.fed2,
        seed,
    )?;
    Ok(SeedRun {
        seed,
        report: stage2.report,
        encoder,
        stage1_logs,
        svms: stage2.svms,
        stage2_logs: stage2.logs,
    })
}

/// Mean and sample standard deviation of per-seed reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub id: u8,
    pub representation: RepresentationMode,
    pub phenotyping: PhenotypingMode,
    pub seeds: Vec<u64>,
    pub mean: MetricsReport,
    pub std: MetricsReport,
    pub seed_f1: BTreeMap<u64, f64>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn summarize_prf(rows: &[Prf]) -> (Prf, Prf) {
    let col = |f: fn(&Prf) -> f64| mean_std(&rows.iter().map(f).collect::<Vec<_>>());
    let (p, r, f) = (col(|x| x.precision), col(|x| x.recall), col(|x| x.f1));
    (
        Prf { precision: p.0, recall: r.0, f1: f.0 },
        Prf { precision: p.1, recall: r.1, f1: f.1 },
    )
}

pub fn summarize(spec: &ExperimentSpec, runs: &[SeedRun]) -> Result<SeedSummary> {
    if runs.is_empty() {
        return Err(Error::Data("no seed runs to summarize".into()));
    }
    let diseases: Vec<DiseaseId> = runs[0].report.per_disease.keys().copied().collect();
    let mut mean = BTreeMap::new();
    let mut std = BTreeMap::new();
    for d in diseases {
        let rows = runs
            .iter()
            .map(|r| {
                r.report
                    .per_disease
                    .get(&d)
                    .copied()
                    .ok_or_else(|| Error::Data(format!("seed {} lacks disease {d}", r.seed)))
            })
            .collect::<Result<Vec<_>>>()?;
        let (m, s) = summarize_prf(&rows);
        mean.insert(d, m);
        std.insert(d, s);
    }
    let averages: Vec<Prf> = runs.iter().map(|r| r.report.average).collect();
    let (avg_mean, avg_std) = summarize_prf(&averages);
    Ok(SeedSummary {
        id: spec.id,
        representation: spec.representation,
        phenotyping: spec.phenotyping,
        seeds: runs.iter().map(|r| r.seed).collect(),
        mean: MetricsReport {
            per_disease: mean,
            average: avg_mean,
        },
        std: MetricsReport {
            per_disease: std,
            average: avg_std,
        },
        seed_f1: runs.iter().map(|r| (r.seed, r.report.average.f1)).collect(),
    })
}

pub struct ExperimentRun {
    pub spec: ExperimentSpec,
    pub runs: Vec<SeedRun>,
    pub summary: SeedSummary,
}

/// Generates the corpus and runs every seed (in parallel; each seed is
/// deterministic on its own).
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentRun> {
    spec.validate()?;
    let corpus = generate_corpus(&spec.corpus)?;
    run_experiment_on(spec, &corpus)
}

/// [`run_experiment`] over a corpus generated by the caller.
pub fn run_experiment_on(spec: &ExperimentSpec, corpus: &Corpus) -> Result<ExperimentRun> {
    spec.validate()?;
    let runs = spec
        .seeds
        .par_iter()
        .map(|&s| run_seed(spec, corpus, s))
        .collect::<Result<Vec<_>>>()?;
    let summary = summarize(spec, &runs)?;
    Ok(ExperimentRun {
        spec: spec.clone(),
        runs,
        summary,
    })
}

pub const SUMMARY_FILE: &str = "summary.json";

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_logs(path: &Path, logs: &[RoundLog]) -> Result<()> {
    let mut buf = Vec::new();
    RoundLog::write_lines(logs, &mut buf).map_err(|e| Error::io(path, e))?;
    write_file(path, buf)
}

impl ExperimentRun {
    /// Layout:
    ///
    /// ```text
    /// config.toml  summary.json  report.csv  report_std.csv
    /// seed_<s>/report.csv  seed_<s>/report.json
    /// seed_<s>/encoder.ckpt  seed_<s>/encoder.json  seed_<s>/stage1_rounds.jsonl
    /// seed_<s>/svm_d<d>[_site<k>].ckpt|.json  seed_<s>/stage2_rounds_d<d>.jsonl
    /// ```
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let config = self.spec.to_toml();
        write_file(&dir.join("config.toml"), &config)?;
        write_file(
            &dir.join(SUMMARY_FILE),
            serde_json::to_string_pretty(&self.summary)? + "\n",
        )?;
        write_file(&dir.join("report.csv"), self.summary.mean.to_csv())?;
        write_file(&dir.join("report_std.csv"), self.summary.std.to_csv())?;
        for run in &self.runs {
            let sd = dir.join(format!("seed_{}", run.seed));
            fs::create_dir_all(&sd).map_err(|e| Error::io(&sd, e))?;
            write_file(&sd.join("report.csv"), run.report.to_csv())?;
            write_file(&sd.join("report.json"), run.report.to_json() + "\n")?;
            if let Some(enc) = &run.encoder {
                enc.save(&sd, &config)?;
            }
            if !run.stage1_logs.is_empty() {
                write_logs(&sd.join("stage1_rounds.jsonl"), &run.stage1_logs)?;
            }
            for svm in &run.svms {
                let stem = match svm.site {
                    None => format!("svm_d{}", svm.disease),
                    Some(k) => format!("svm_d{}_site{k}", svm.disease),
                };
                svm.model.save(&sd, &stem, svm.disease)?;
            }
            for (d, logs) in &run.stage2_logs {
                write_logs(&sd.join(format!("stage2_rounds_d{d}.jsonl")), logs)?;
            }
        }
        Ok(())
    }
}

/// Reads `summary.json` from a run directory.
pub fn read_summary(dir: &Path) -> Result<SeedSummary> {
    let path = dir.join(SUMMARY_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}
