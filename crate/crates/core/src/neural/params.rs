use sha2::{Digest, Sha256};

use super::Tensor;
use crate::error::{Error, Result};

/// Ordered, uniquely named collection of tensors; the unit exchanged between
/// the coordinator and the sites.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new(entries: Vec<(String, Tensor)>) -> Result<Self> {
        for (i, (name, _)) in entries.iter().enumerate() {
            if entries[..i].iter().any(|(other, _)| other == name) {
                return Err(Error::Shape(format!("duplicate parameter name `{name}`")));
            }
        }
        Ok(ParamSet { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub(crate) fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn into_entries(self) -> Vec<(String, Tensor)> {
        self.entries
    }

    /// Same names and shapes, pairwise in order.
    pub fn is_congruent(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((na, ta), (nb, tb))| na == nb && ta.same_shape(tb))
    }

    pub fn ensure_congruent(&self, other: &ParamSet) -> Result<()> {
        if self.is_congruent(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "incongruent parameter sets: {:?} vs {:?}",
                self.signature(),
                other.signature()
            )))
        }
    }

    fn signature(&self) -> Vec<(String, Vec<usize>)> {
        self.entries
            .iter()
            .map(|(n, t)| (n.clone(), t.shape().to_vec()))
            .collect()
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, t) in &self.entries {
            t.check_finite(name)?;
        }
        Ok(())
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Hex SHA-256 of the checkpoint encoding.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    /// Same names and shapes, every value zero.
    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| {
                    (
                        n.clone(),
                        Tensor::zeros(t.shape().to_vec()).expect("shape already valid"),
                    )
                })
                .collect(),
        }
    }
}

/// `params - lr * grads`, elementwise. A zero rate returns the parameters
/// unchanged.
pub fn sgd_step(params: &ParamSet, grads: &ParamSet, lr: f64) -> Result<ParamSet> {
    params.ensure_congruent(grads)?;
    if !(lr.is_finite() && lr >= 0.0) {
        return Err(Error::config("lr", format!("learning rate {lr} must be >= 0")));
    }
    let mut out = params.clone();
    for (p, g) in out.tensors_mut().zip(grads.tensors()) {
        for (x, &d) in p.data_mut().iter_mut().zip(g.data()) {
            *x -= lr * d;
        }
    }
    out.check_finite()?;
    Ok(out)
}
