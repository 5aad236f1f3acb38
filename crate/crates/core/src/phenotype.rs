//! Stage 2: per-disease linear SVMs over TF-IDF vectors or frozen-encoder
//! representations.
//!
//! Multi-class tasks use one-vs-rest hinge loss trained by plain minibatch
//! SGD from zero weights with no regularization term. Classes with fewer than
//! `min_class_count` examples in the cohort are dropped before training, which
//! typically turns a sparse Questionable class into a binary
//! Present/Absent task.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{ClassLabel, ConceptDoc, DiseaseId, PatientRecord};
use crate::error::{Error, Result};
use crate::federation::{EpochWindow, LocalOutcome, LocalTrainer};
use crate::metrics::{confusion, prf, Averaging, ConfusionTable, Prf};
use crate::neural::{ParamSet, Tensor};
use crate::representation::{epoch_order, extract_representation, FrozenEncoder, TrainSpec};
use crate::vocab::{tfidf_vector, IdfTable, SparseVector};

pub const DEFAULT_MIN_CLASS_COUNT: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    TfIdf,
    Representation,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FeatureVector {
    Dense(Vec<f64>),
    Sparse(SparseVector),
}

impl FeatureVector {
    pub fn dims(&self) -> usize {
        match self {
            FeatureVector::Dense(v) => v.len(),
            FeatureVector::Sparse(v) => v.dims(),
        }
    }

    pub fn dot(&self, w: &[f64]) -> f64 {
        match self {
            FeatureVector::Dense(v) => v.iter().zip(w).map(|(a, b)| a * b).sum(),
            FeatureVector::Sparse(v) => v.dot_dense(w),
        }
    }

    /// `w += scale * self`
    pub fn add_scaled_to(&self, w: &mut [f64], scale: f64) {
        match self {
            FeatureVector::Dense(v) => {
                for (x, &a) in w.iter_mut().zip(v) {
                    *x += scale * a;
                }
            }
            FeatureVector::Sparse(v) => v.add_scaled_to(w, scale),
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            FeatureVector::Dense(v) => v.iter().all(|x| x.is_finite()),
            FeatureVector::Sparse(v) => v.entries().iter().all(|(_, x)| x.is_finite()),
        }
    }

    /// Elementwise product with `c`.
    pub fn scaled(&self, c: f64) -> FeatureVector {
        match self {
            FeatureVector::Dense(v) => FeatureVector::Dense(v.iter().map(|x| x * c).collect()),
            FeatureVector::Sparse(v) => FeatureVector::Sparse(
                SparseVector::from_pairs(v.dims(), v.entries().iter().map(|&(i, x)| (i, x * c)).collect())
                    .expect("indices already valid"),
            ),
        }
    }
}

/// Maps documents to L2-normalized feature vectors.
#[derive(Debug, Clone, Copy)]
pub enum FeatureSource<'a> {
    TfIdf(&'a IdfTable),
    Representation(&'a FrozenEncoder),
}

impl FeatureSource<'_> {
    pub fn kind(&self) -> FeatureKind {
        match self {
            FeatureSource::TfIdf(_) => FeatureKind::TfIdf,
            FeatureSource::Representation(_) => FeatureKind::Representation,
        }
    }

    pub fn dims(&self) -> usize {
        match self {
            FeatureSource::TfIdf(t) => t.dims(),
            FeatureSource::Representation(e) => e.hidden_dim(),
        }
    }

    pub fn featurize(&self, doc: &ConceptDoc) -> Result<FeatureVector> {
        match self {
            FeatureSource::TfIdf(t) => Ok(FeatureVector::Sparse(tfidf_vector(doc, t)?)),
            FeatureSource::Representation(e) => {
                let mut h = extract_representation(e, doc)?;
                let norm = h.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 0.0 {
                    h.iter_mut().for_each(|x| *x /= norm);
                }
                Ok(FeatureVector::Dense(h))
            }
        }
    }
}

/// Features for a list of records, computed once and shared across diseases.
#[derive(Debug, Clone)]
pub struct FeatureTable {
    pub kind: FeatureKind,
    pub dims: usize,
    pub vectors: Vec<FeatureVector>,
}

impl FeatureTable {
    pub fn build(records: &[PatientRecord], source: &FeatureSource) -> Result<Self> {
        Ok(FeatureTable {
            kind: source.kind(),
            dims: source.dims(),
            vectors: records
                .iter()
                .map(|r| source.featurize(&r.doc))
                .collect::<Result<_>>()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub patient_id: u64,
    pub features: FeatureVector,
    pub label: ClassLabel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhenotypeDataset {
    pub disease: DiseaseId,
    /// Surviving classes in canonical order; the model's class order.
    pub classes: Vec<ClassLabel>,
    pub dims: usize,
    pub feature_kind: FeatureKind,
    pub examples: Vec<Example>,
}

impl PhenotypeDataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Examples satisfying `keep`, with the class list unchanged.
    pub fn subset(&self, mut keep: impl FnMut(&Example) -> bool) -> PhenotypeDataset {
        PhenotypeDataset {
            examples: self.examples.iter().filter(|e| keep(e)).cloned().collect(),
            classes: self.classes.clone(),
            ..*self
        }
    }

    pub fn labels(&self) -> Vec<ClassLabel> {
        self.examples.iter().map(|e| e.label).collect()
    }
}

/// Counts per class in canonical order (Absent, Present, Questionable).
pub fn class_counts(records: &[PatientRecord], disease: DiseaseId) -> Result<[usize; 3]> {
    let mut counts = [0usize; 3];
    for r in records {
        let label = r.phenotype(disease).ok_or_else(|| {
            Error::Data(format!(
                "patient {} has no phenotype label for disease {disease}",
                r.patient_id
            ))
        })?;
        counts[label as usize] += 1;
    }
    Ok(counts)
}

/// Classes with at least `min_class_count` examples; fewer than two survivors
/// is a dataset error.
pub fn surviving_classes(counts: [usize; 3], min_class_count: usize) -> Result<Vec<ClassLabel>> {
    let classes: Vec<ClassLabel> = ClassLabel::ALL
        .into_iter()
        .filter(|&c| counts[c as usize] >= min_class_count)
        .collect();
    if classes.len() < 2 {
        return Err(Error::Dataset(format!(
            "counts {counts:?} leave {} class(es) at minimum {min_class_count}",
            classes.len()
        )));
    }
    Ok(classes)
}

pub fn prepare_dataset(
    records: &[PatientRecord],
    disease: DiseaseId,
    features: &FeatureSource,
    min_class_count: usize,
) -> Result<PhenotypeDataset> {
    let table = FeatureTable::build(records, features)?;
    prepare_dataset_with(records, &table, disease, min_class_count)
}

/// [`prepare_dataset`] over precomputed features aligned with `records`.
pub fn prepare_dataset_with(
    records: &[PatientRecord],
    table: &FeatureTable,
    disease: DiseaseId,
    min_class_count: usize,
) -> Result<PhenotypeDataset> {
    if min_class_count == 0 {
        return Err(Error::config("min_class_count", "must be at least 1"));
    }
    if table.vectors.len() != records.len() {
        return Err(Error::Shape(format!(
            "{} feature vectors for {} records",
            table.vectors.len(),
            records.len()
        )));
    }
    let classes = surviving_classes(class_counts(records, disease)?, min_class_count)?;
    let examples = records
        .iter()
        .zip(&table.vectors)
        .filter_map(|(r, x)| {
            let label = r.phenotype(disease).expect("counted above");
            classes.contains(&label).then(|| Example {
                patient_id: r.patient_id,
                features: x.clone(),
                label,
            })
        })
        .collect();
    Ok(PhenotypeDataset {
        disease,
        classes,
        dims: table.dims,
        feature_kind: table.kind,
        examples,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvmModel {
    pub classes: Vec<ClassLabel>,
    /// `[num_classes, D]`
    pub weights: Tensor,
    /// `[num_classes]`
    pub biases: Tensor,
    pub feature_kind: FeatureKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmMeta {
    pub disease: DiseaseId,
    pub classes: Vec<ClassLabel>,
    pub feature_kind: FeatureKind,
}

impl SvmModel {
    pub fn zeros(classes: Vec<ClassLabel>, dims: usize, feature_kind: FeatureKind) -> Result<Self> {
        if !(2..=3).contains(&classes.len()) {
            return Err(Error::Shape(format!("{} classes; expected 2 or 3", classes.len())));
        }
        let k = classes.len();
        Ok(SvmModel {
            classes,
            weights: Tensor::zeros(vec![k, dims])?,
            biases: Tensor::zeros(vec![k])?,
            feature_kind,
        })
    }

    pub fn dims(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn to_param_set(&self) -> ParamSet {
        ParamSet::new(vec![
            ("weights".into(), self.weights.clone()),
            ("biases".into(), self.biases.clone()),
        ])
        .expect("fixed unique names")
    }

    pub fn from_param_set(
        ps: &ParamSet,
        classes: Vec<ClassLabel>,
        feature_kind: FeatureKind,
    ) -> Result<Self> {
        let (Some(weights), Some(biases), 2) = (ps.get("weights"), ps.get("biases"), ps.len())
        else {
            return Err(Error::Shape("expected SVM parameters [weights, biases]".into()));
        };
        let k = classes.len();
        if weights.shape().len() != 2 || weights.shape()[0] != k || biases.shape() != [k] {
            return Err(Error::Shape(format!(
                "SVM shapes {:?}/{:?} do not fit {k} classes",
                weights.shape(),
                biases.shape()
            )));
        }
        let mut m = SvmModel::zeros(classes, weights.shape()[1], feature_kind)?;
        m.weights = weights.clone();
        m.biases = biases.clone();
        Ok(m)
    }

    /// `w_c . x + b_c` for every class, in class order.
    pub fn scores(&self, x: &FeatureVector) -> Result<Vec<f64>> {
        let d = self.dims();
        if x.dims() != d {
            return Err(Error::Shape(format!("feature dimension {} vs model {d}", x.dims())));
        }
        let w = self.weights.data();
        Ok(self
            .biases
            .data()
            .iter()
            .enumerate()
            .map(|(c, &b)| x.dot(&w[c * d..(c + 1) * d]) + b)
            .collect())
    }

    /// Writes `<stem>.ckpt` and `<stem>.json` (class order and feature kind).
    pub fn save(&self, dir: &Path, stem: &str, disease: DiseaseId) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.to_param_set().save(&dir.join(format!("{stem}.ckpt")))?;
        let meta = SvmMeta {
            disease,
            classes: self.classes.clone(),
            feature_kind: self.feature_kind,
        };
        let path = dir.join(format!("{stem}.json"));
        fs::write(&path, serde_json::to_string_pretty(&meta)? + "\n")
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(dir: &Path, stem: &str) -> Result<(DiseaseId, Self)> {
        let ps = ParamSet::load(&dir.join(format!("{stem}.ckpt")))?;
        let path = dir.join(format!("{stem}.json"));
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: SvmMeta = serde_json::from_str(&text)?;
        Ok((
            meta.disease,
            SvmModel::from_param_set(&ps, meta.classes, meta.feature_kind)?,
        ))
    }
}

/// Highest-scoring class; ties go to the class listed first.
pub fn predict(m: &SvmModel, x: &FeatureVector) -> Result<ClassLabel> {
    let scores = m.scores(x)?;
    let mut best = 0;
    for (c, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = c;
        }
    }
    Ok(m.classes[best])
}

fn check_dataset(ds: &PhenotypeDataset) -> Result<()> {
    if ds.classes.len() < 2 {
        return Err(Error::Dataset("fewer than two classes".into()));
    }
    for e in &ds.examples {
        if e.features.dims() != ds.dims {
            return Err(Error::Shape(format!(
                "patient {} has {} features, dataset {}",
                e.patient_id,
                e.features.dims(),
                ds.dims
            )));
        }
        if !e.features.is_finite() {
            return Err(Error::Data(format!("patient {} has non-finite features", e.patient_id)));
        }
        if !ds.classes.contains(&e.label) {
            return Err(Error::Label(format!(
                "patient {} labelled `{}` outside {:?}",
                e.patient_id, e.label, ds.classes
            )));
        }
    }
    Ok(())
}

fn train_window(
    init: &SvmModel,
    ds: &PhenotypeDataset,
    spec: &TrainSpec,
    window: EpochWindow,
) -> Result<(SvmModel, f64)> {
    spec.validate()?;
    check_dataset(ds)?;
    if ds.is_empty() {
        return Err(Error::Data("no training examples".into()));
    }
    if init.classes != ds.classes || init.dims() != ds.dims {
        return Err(Error::Shape("model and dataset disagree on classes or dimension".into()));
    }
    let (k, d) = (ds.classes.len(), ds.dims);
    let mut model = init.clone();
    let mut grad_w = vec![0.0; k * d];
    let mut grad_b = vec![0.0; k];
    let mut last_loss = f64::NAN;
    for e in 0..window.epochs {
        let order = epoch_order(ds.len(), spec.seed, window.site, window.first_epoch + e);
        let mut total = 0.0;
        for batch in order.chunks(spec.batch_size) {
            grad_w.fill(0.0);
            grad_b.fill(0.0);
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let ex = &ds.examples[i];
                let scores = model.scores(&ex.features)?;
                for (c, &class) in ds.classes.iter().enumerate() {
                    let y = if ex.label == class { 1.0 } else { -1.0 };
                    let margin = y * scores[c];
                    if margin < 1.0 {
                        total += 1.0 - margin;
                        ex.features
                            .add_scaled_to(&mut grad_w[c * d..(c + 1) * d], -y * scale);
                        grad_b[c] -= y * scale;
                    }
                }
            }
            for (w, g) in model.weights.data_mut().iter_mut().zip(&grad_w) {
                *w -= spec.lr * g;
            }
            for (b, g) in model.biases.data_mut().iter_mut().zip(&grad_b) {
                *b -= spec.lr * g;
            }
        }
        model.weights.check_finite("svm weights")?;
        model.biases.check_finite("svm biases")?;
        last_loss = total / ds.len() as f64;
    }
    Ok((model, last_loss))
}

/// Trains from zero weights for `epochs_per_round` epochs.
pub fn train_svm(ds: &PhenotypeDataset, spec: &TrainSpec) -> Result<SvmModel> {
    let init = SvmModel::zeros(ds.classes.clone(), ds.dims, ds.feature_kind)?;
    let window = EpochWindow {
        site: 0,
        first_epoch: 0,
        epochs: spec.epochs_per_round,
    };
    train_window(&init, ds, spec, window).map(|(m, _)| m)
}

/// [`LocalTrainer`] for one disease's SVM; every site shares the class list.
#[derive(Debug, Clone)]
pub struct SvmTrainer {
    pub classes: Vec<ClassLabel>,
    pub feature_kind: FeatureKind,
}

impl SvmTrainer {
    pub fn for_dataset(ds: &PhenotypeDataset) -> Self {
        SvmTrainer {
            classes: ds.classes.clone(),
            feature_kind: ds.feature_kind,
        }
    }
}

impl LocalTrainer for SvmTrainer {
    type Data = PhenotypeDataset;

    fn sample_count(&self, data: &PhenotypeDataset) -> usize {
        data.len()
    }

    fn train(
        &self,
        init: &ParamSet,
        data: &PhenotypeDataset,
        spec: &TrainSpec,
        window: EpochWindow,
    ) -> Result<LocalOutcome> {
        let model = SvmModel::from_param_set(init, self.classes.clone(), self.feature_kind)?;
        let (trained, loss) = train_window(&model, data, spec, window)?;
        Ok(LocalOutcome {
            params: trained.to_param_set(),
            loss,
        })
    }
}

/// Confusion table and macro scores of `m` on `ds`.
pub fn evaluate(m: &SvmModel, ds: &PhenotypeDataset) -> Result<(ConfusionTable, Prf)> {
    let predicted = ds
        .examples
        .iter()
        .map(|e| predict(m, &e.features))
        .collect::<Result<Vec<_>>>()?;
    let table = confusion(&ds.labels(), &predicted, &m.classes)?;
    let scores = prf(&table, Averaging::Macro);
    Ok((table, scores))
}
