//! Patient and silo data model, the synthetic multi-site corpus generator,
//! cohort filters and random silo partitioning.
//!
//! The generator draws a latent binary condition vector per patient. Condition
//! `c` owns the disjoint signature block
//! `[c * signature_block, (c + 1) * signature_block)` of concept IDs. Each
//! document position is a uniform noise token with probability
//! `latent_noise`, otherwise a signature token of one of the active
//! conditions (assigned round-robin in shuffled order, so every active
//! condition gets its share). Patients with no active condition draw
//! non-noise tokens from the background IDs after the last block. Code bit
//! `c` is the latent bit itself; the first `num_diseases` conditions double as
//! phenotype diseases.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{self, stream};

pub type ConceptId = u32;
pub type DiseaseId = usize;

/// Documents longer than this are excluded from the cohort by default.
pub const DEFAULT_MAX_TOKENS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ConceptDoc {
    pub tokens: Vec<ConceptId>,
}

impl ConceptDoc {
    pub fn new(tokens: Vec<ConceptId>) -> Self {
        ConceptDoc { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Fails with a vocabulary error on the first token `>= dims`.
    pub fn check_vocab(&self, dims: usize) -> Result<()> {
        match self.tokens.iter().find(|&&t| t as usize >= dims) {
            Some(&t) => Err(Error::Vocabulary {
                token: t as usize,
                dims,
            }),
            None => Ok(()),
        }
    }
}

impl From<Vec<ConceptId>> for ConceptDoc {
    fn from(tokens: Vec<ConceptId>) -> Self {
        ConceptDoc { tokens }
    }
}

/// Phenotype annotation. The derive order (Absent, Present, Questionable) is
/// the canonical class order used by datasets and models.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum ClassLabel {
    Absent,
    Present,
    Questionable,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 3] = [
        ClassLabel::Absent,
        ClassLabel::Present,
        ClassLabel::Questionable,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ClassLabel::Absent => "absent",
            ClassLabel::Present => "present",
            ClassLabel::Questionable => "questionable",
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ClassLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "absent" => Ok(ClassLabel::Absent),
            "present" => Ok(ClassLabel::Present),
            "questionable" => Ok(ClassLabel::Questionable),
            other => Err(Error::Label(format!("unknown class label `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatientRecord {
    pub patient_id: u64,
    pub doc: ConceptDoc,
    /// Multi-hot code vector; one entry per configured code.
    pub code_labels: Option<Vec<bool>>,
    /// Indexed by disease id; one entry per configured disease.
    pub phenotype_labels: Option<Vec<ClassLabel>>,
}

impl PatientRecord {
    pub fn phenotype(&self, disease: DiseaseId) -> Option<ClassLabel> {
        self.phenotype_labels
            .as_ref()
            .and_then(|labels| labels.get(disease).copied())
    }
}

/// One simulated provider's private records.
#[derive(Debug, Clone, PartialEq)]
pub struct Silo {
    pub site_id: usize,
    pub records: Vec<PatientRecord>,
}

impl Silo {
    pub fn new(site_id: usize, records: Vec<PatientRecord>) -> Self {
        Silo { site_id, records }
    }

    pub fn sample_count(&self) -> usize {
        self.records.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub vocab_size: usize,
    pub num_codes: usize,
    pub num_diseases: usize,
    pub patients_pretrain: usize,
    pub patients_phenotype: usize,
    pub doc_length_range: (usize, usize),
    /// Probability that a document position is a uniform noise token.
    pub latent_noise: f64,
    /// Probability that an Absent phenotype label is flipped to Questionable.
    pub questionable_rate: f64,
    /// Per-condition probability of being active.
    pub prevalence: f64,
    /// Concept IDs owned by each condition.
    pub signature_block: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            vocab_size: 500,
            num_codes: 20,
            num_diseases: 8,
            patients_pretrain: 2000,
            patients_phenotype: 600,
            doc_length_range: (10, 30),
            latent_noise: 0.5,
            questionable_rate: 0.01,
            prevalence: 0.1,
            signature_block: 20,
            seed: 20_190_717,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("num_codes", self.num_codes),
            ("num_diseases", self.num_diseases),
            ("patients_pretrain", self.patients_pretrain),
            ("patients_phenotype", self.patients_phenotype),
            ("signature_block", self.signature_block),
        ];
        for (field, value) in positive {
            if value == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        let (min, max) = self.doc_length_range;
        if min == 0 {
            return Err(Error::config("doc_length_range", "minimum must be positive"));
        }
        if min > max {
            return Err(Error::config(
                "doc_length_range",
                format!("minimum {min} exceeds maximum {max}"),
            ));
        }
        for (field, value) in [
            ("latent_noise", self.latent_noise),
            ("questionable_rate", self.questionable_rate),
            ("prevalence", self.prevalence),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(Error::config(field, format!("{value} is outside [0, 1]")));
            }
        }
        if self.num_diseases > self.num_codes {
            return Err(Error::config(
                "num_diseases",
                format!("{} exceeds num_codes {}", self.num_diseases, self.num_codes),
            ));
        }
        if self.num_codes * self.signature_block > self.vocab_size {
            return Err(Error::config(
                "signature_block",
                format!(
                    "{} codes x {} tokens do not fit a vocabulary of {}",
                    self.num_codes, self.signature_block, self.vocab_size
                ),
            ));
        }
        Ok(())
    }

    /// Signature block of a condition as a half-open concept ID range.
    pub fn signature_range(&self, condition: usize) -> std::ops::Range<ConceptId> {
        let start = (condition * self.signature_block) as ConceptId;
        start..start + self.signature_block as ConceptId
    }

    /// Condition whose signature block contains `token`, if any.
    pub fn condition_of(&self, token: ConceptId) -> Option<usize> {
        let c = token as usize / self.signature_block;
        (c < self.num_codes).then_some(c)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub pretrain: Vec<PatientRecord>,
    pub phenotype: Vec<PatientRecord>,
}

pub fn generate_corpus(cfg: &SynthConfig) -> Result<Corpus> {
    cfg.validate()?;
    let mut rng = seed::rng(cfg.seed, &[stream::CORPUS_PRETRAIN]);
    let pretrain = (0..cfg.patients_pretrain)
        .map(|i| {
            let (latent, doc) = sample_patient(cfg, &mut rng);
            PatientRecord {
                patient_id: i as u64,
                doc,
                code_labels: Some(latent),
                phenotype_labels: None,
            }
        })
        .collect();

    let mut rng = seed::rng(cfg.seed, &[stream::CORPUS_PHENOTYPE]);
    let phenotype = (0..cfg.patients_phenotype)
        .map(|i| {
            let (latent, doc) = sample_patient(cfg, &mut rng);
            let labels = latent[..cfg.num_diseases]
                .iter()
                .map(|&active| {
                    if active {
                        ClassLabel::Present
                    } else if rng.gen_bool(cfg.questionable_rate) {
                        ClassLabel::Questionable
                    } else {
                        ClassLabel::Absent
                    }
                })
                .collect();
            PatientRecord {
                patient_id: (cfg.patients_pretrain + i) as u64,
                doc,
                code_labels: None,
                phenotype_labels: Some(labels),
            }
        })
        .collect();

    Ok(Corpus {
        pretrain,
        phenotype,
    })
}

fn sample_patient<R: Rng>(cfg: &SynthConfig, rng: &mut R) -> (Vec<bool>, ConceptDoc) {
    let latent: Vec<bool> = (0..cfg.num_codes)
        .map(|_| rng.gen_bool(cfg.prevalence))
        .collect();
    let mut active: Vec<usize> = (0..cfg.num_codes).filter(|&c| latent[c]).collect();
    active.shuffle(rng);

    let (min, max) = cfg.doc_length_range;
    // Long enough that, without noise, every active condition is represented.
    let len = rng.gen_range(min..=max).max(active.len());
    let mut tokens = Vec::with_capacity(len);
    let mut next_signal = 0;
    for _ in 0..len {
        if rng.gen_bool(cfg.latent_noise) {
            tokens.push(rng.gen_range(0..cfg.vocab_size) as ConceptId);
        } else if active.is_empty() {
            tokens.push(background_token(cfg, rng));
        } else {
            let condition = active[next_signal % active.len()];
            next_signal += 1;
            tokens.push(rng.gen_range(cfg.signature_range(condition)));
        }
    }
    tokens.shuffle(rng);
    (latent, ConceptDoc::new(tokens))
}

/// Healthy patients draw their non-noise tokens from the concept IDs beyond
/// the signature blocks; when the blocks fill the vocabulary, uniformly.
fn background_token<R: Rng>(cfg: &SynthConfig, rng: &mut R) -> ConceptId {
    let start = cfg.num_codes * cfg.signature_block;
    if start < cfg.vocab_size {
        rng.gen_range(start..cfg.vocab_size) as ConceptId
    } else {
        rng.gen_range(0..cfg.vocab_size) as ConceptId
    }
}

/// Keeps records whose documents have at most `max_tokens` concepts.
pub fn filter_patients(records: Vec<PatientRecord>, max_tokens: usize) -> Vec<PatientRecord> {
    records
        .into_iter()
        .filter(|r| r.doc.len() <= max_tokens)
        .collect()
}

/// Drops code columns with fewer than `min_frequency` positive patients.
/// Returns the filtered records and the original indices of the kept codes.
/// A threshold of 0 or 1 keeps every code that could ever be learned from.
pub fn filter_codes(
    records: &[PatientRecord],
    min_frequency: usize,
) -> Result<(Vec<PatientRecord>, Vec<usize>)> {
    let num_codes = match records.first().and_then(|r| r.code_labels.as_ref()) {
        Some(codes) => codes.len(),
        None => return Err(Error::Data("records carry no code labels".into())),
    };
    let mut freq = vec![0usize; num_codes];
    for r in records {
        let codes = r.code_labels.as_ref().ok_or_else(|| {
            Error::Data(format!("patient {} has no code labels", r.patient_id))
        })?;
        if codes.len() != num_codes {
            return Err(Error::Data(format!(
                "patient {} has {} code labels, expected {num_codes}",
                r.patient_id,
                codes.len()
            )));
        }
        for (f, &bit) in freq.iter_mut().zip(codes) {
            *f += bit as usize;
        }
    }
    let kept: Vec<usize> = (0..num_codes)
        .filter(|&c| freq[c] >= min_frequency)
        .collect();
    if kept.is_empty() {
        return Err(Error::Data(format!(
            "no code reaches the minimum frequency {min_frequency}"
        )));
    }
    let filtered = records
        .iter()
        .map(|r| {
            let codes = r.code_labels.as_ref().expect("checked above");
            PatientRecord {
                code_labels: Some(kept.iter().map(|&c| codes[c]).collect()),
                ..r.clone()
            }
        })
        .collect();
    Ok((filtered, kept))
}

/// Random permutation by `seed`, then a near-equal split: silo sizes differ by
/// at most one and the first `N mod K` silos get the larger size.
pub fn partition_silos(records: &[PatientRecord], k: usize, seed: u64) -> Result<Vec<Silo>> {
    partition_silos_skewed(records, k, seed, 0.0)
}

/// Like [`partition_silos`], but with `skew > 0` silo `i` receives a share
/// proportional to `(1 + skew)^-i` (every silo keeps at least one record).
pub fn partition_silos_skewed(
    records: &[PatientRecord],
    k: usize,
    seed: u64,
    skew: f64,
) -> Result<Vec<Silo>> {
    let n = records.len();
    if k == 0 {
        return Err(Error::Partition("number of sites must be at least 1".into()));
    }
    if n == 0 {
        return Err(Error::Partition("cannot partition an empty record list".into()));
    }
    if k > n {
        return Err(Error::Partition(format!(
            "{k} sites requested for only {n} records"
        )));
    }
    if !(skew.is_finite() && skew >= 0.0) {
        return Err(Error::Partition(format!("invalid skew {skew}")));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed, &[stream::PARTITION, k as u64]));

    let sizes = if skew == 0.0 {
        balanced_sizes(n, k)
    } else {
        skewed_sizes(n, k, skew)
    };
    let mut silos = Vec::with_capacity(k);
    let mut start = 0;
    for (site_id, size) in sizes.into_iter().enumerate() {
        let records = order[start..start + size]
            .iter()
            .map(|&i| records[i].clone())
            .collect();
        silos.push(Silo::new(site_id, records));
        start += size;
    }
    Ok(silos)
}

fn balanced_sizes(n: usize, k: usize) -> Vec<usize> {
    (0..k).map(|i| n / k + usize::from(i < n % k)).collect()
}

fn skewed_sizes(n: usize, k: usize, skew: f64) -> Vec<usize> {
    let shares: Vec<f64> = (0..k).map(|i| (1.0 + skew).powi(-(i as i32))).collect();
    let total: f64 = shares.iter().sum();
    let spare = n - k;
    let mut sizes: Vec<usize> = shares
        .iter()
        .map(|s| 1 + (s / total * spare as f64).floor() as usize)
        .collect();
    let mut assigned: usize = sizes.iter().sum();
    let mut i = 0;
    while assigned < n {
        sizes[i % k] += 1;
        assigned += 1;
        i += 1;
    }
    sizes
}

// Line format: patient_id \t tokens \t code bits \t disease:label,...
// Absent optional fields are written as empty columns.

pub fn write_records<W: Write>(mut out: W, records: &[PatientRecord]) -> std::io::Result<()> {
    for r in records {
        let tokens: Vec<String> = r.doc.tokens.iter().map(|t| t.to_string()).collect();
        let codes: String = r
            .code_labels
            .as_ref()
            .map(|c| c.iter().map(|&b| if b { '1' } else { '0' }).collect())
            .unwrap_or_default();
        let labels: Vec<String> = r
            .phenotype_labels
            .as_ref()
            .map(|l| {
                l.iter()
                    .enumerate()
                    .map(|(d, label)| format!("{d}:{label}"))
                    .collect()
            })
            .unwrap_or_default();
        writeln!(
            out,
            "{}\t{}\t{}\t{}",
            r.patient_id,
            tokens.join(" "),
            codes,
            labels.join(",")
        )?;
    }
    Ok(())
}

pub fn read_records<R: BufRead>(input: R, source: &str) -> Result<Vec<PatientRecord>> {
    let mut records = Vec::new();
    for (lineno, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::io(source, e))?;
        if line.is_empty() {
            continue;
        }
        let at = || format!("{source}:{}", lineno + 1);
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::format(
                at(),
                format!("expected 4 tab-separated fields, found {}", fields.len()),
            ));
        }
        let patient_id = fields[0]
            .parse()
            .map_err(|_| Error::format(at(), format!("bad patient id `{}`", fields[0])))?;
        let tokens = fields[1]
            .split_ascii_whitespace()
            .map(|t| {
                t.parse()
                    .map_err(|_| Error::format(at(), format!("bad concept id `{t}`")))
            })
            .collect::<Result<Vec<ConceptId>>>()?;
        let code_labels = if fields[2].is_empty() {
            None
        } else {
            Some(
                fields[2]
                    .chars()
                    .map(|c| match c {
                        '0' => Ok(false),
                        '1' => Ok(true),
                        other => Err(Error::format(at(), format!("bad code bit `{other}`"))),
                    })
                    .collect::<Result<Vec<bool>>>()?,
            )
        };
        let phenotype_labels = if fields[3].is_empty() {
            None
        } else {
            let mut labels = Vec::new();
            for (expected, item) in fields[3].split(',').enumerate() {
                let (disease, label) = item
                    .split_once(':')
                    .ok_or_else(|| Error::format(at(), format!("bad label entry `{item}`")))?;
                let disease: usize = disease
                    .parse()
                    .map_err(|_| Error::format(at(), format!("bad disease id `{disease}`")))?;
                if disease != expected {
                    return Err(Error::format(
                        at(),
                        format!("disease {disease} out of order, expected {expected}"),
                    ));
                }
                labels.push(label.parse().map_err(|e: Error| Error::format(at(), e.to_string()))?);
            }
            Some(labels)
        };
        records.push(PatientRecord {
            patient_id,
            doc: ConceptDoc::new(tokens),
            code_labels,
            phenotype_labels,
        });
    }
    Ok(records)
}
