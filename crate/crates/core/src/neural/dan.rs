use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ParamSet, Tensor};
use crate::corpus::ConceptDoc;
use crate::error::{Error, Result};
use crate::seed::{self, stream};

/// Lower/upper clamp applied to probabilities before taking logs.
const PROB_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation and the output.
    fn derivative(self, pre: f64, out: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - out * out,
        }
    }
}

/// Embedding `[V, E]` → mean pooling → dense `[E, H]` + bias → activation →
/// output `[H, M]` + bias → sigmoid.
#[derive(Debug, Clone, PartialEq)]
pub struct DanParams {
    pub embed: Tensor,
    pub dense_w: Tensor,
    pub dense_b: Tensor,
    pub out_w: Tensor,
    pub out_b: Tensor,
}

const NAMES: [&str; 5] = ["embed", "dense_w", "dense_b", "out_w", "out_b"];

impl DanParams {
    pub fn zeros(vocab: usize, embed_dim: usize, hidden: usize, outputs: usize) -> Result<Self> {
        Ok(DanParams {
            embed: Tensor::zeros(vec![vocab, embed_dim])?,
            dense_w: Tensor::zeros(vec![embed_dim, hidden])?,
            dense_b: Tensor::zeros(vec![hidden])?,
            out_w: Tensor::zeros(vec![hidden, outputs])?,
            out_b: Tensor::zeros(vec![outputs])?,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.embed.shape()[0]
    }

    pub fn embed_dim(&self) -> usize {
        self.embed.shape()[1]
    }

    pub fn hidden_dim(&self) -> usize {
        self.dense_b.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.out_b.shape()[0]
    }

    fn tensors(&self) -> [&Tensor; 5] {
        [&self.embed, &self.dense_w, &self.dense_b, &self.out_w, &self.out_b]
    }

    pub fn to_param_set(&self) -> ParamSet {
        ParamSet::new(
            NAMES
                .iter()
                .zip(self.tensors())
                .map(|(n, t)| (n.to_string(), t.clone()))
                .collect(),
        )
        .expect("fixed unique names")
    }

    pub fn from_param_set(ps: &ParamSet) -> Result<Self> {
        let names: Vec<&str> = ps.iter().map(|(n, _)| n).collect();
        if names != NAMES {
            return Err(Error::Shape(format!(
                "expected DAN parameters {NAMES:?}, found {names:?}"
            )));
        }
        let mut it = ps.tensors().cloned();
        let mut next = || it.next().expect("five tensors");
        let p = DanParams {
            embed: next(),
            dense_w: next(),
            dense_b: next(),
            out_w: next(),
            out_b: next(),
        };
        p.check_schema()?;
        Ok(p)
    }

    fn check_schema(&self) -> Result<()> {
        let ok = self.embed.shape().len() == 2
            && self.dense_w.shape().len() == 2
            && self.dense_b.shape().len() == 1
            && self.out_w.shape().len() == 2
            && self.out_b.shape().len() == 1
            && self.dense_w.shape()[0] == self.embed.shape()[1]
            && self.dense_w.shape()[1] == self.dense_b.shape()[0]
            && self.out_w.shape()[0] == self.dense_b.shape()[0]
            && self.out_w.shape()[1] == self.out_b.shape()[0];
        if ok {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "inconsistent DAN shapes: {:?}",
                self.tensors().map(|t| t.shape().to_vec())
            )))
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, t) in NAMES.iter().zip(self.tensors()) {
            t.check_finite(name)?;
        }
        Ok(())
    }
}

/// Glorot-uniform weights (`s = sqrt(6 / (fan_in + fan_out))` per tensor),
/// zero biases.
pub fn init_params(
    vocab: usize,
    embed_dim: usize,
    hidden: usize,
    outputs: usize,
    seed: u64,
) -> Result<DanParams> {
    for (field, v) in [
        ("vocab_size", vocab),
        ("embed_dim", embed_dim),
        ("hidden_dim", hidden),
        ("outputs", outputs),
    ] {
        if v == 0 {
            return Err(Error::config(field, "must be at least 1"));
        }
    }
    let mut rng = seed::rng(seed, &[stream::INIT]);
    let mut glorot = |rows: usize, cols: usize| {
        let s = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.gen_range(-s..=s)).collect();
        Tensor::new(vec![rows, cols], data)
    };
    Ok(DanParams {
        embed: glorot(vocab, embed_dim)?,
        dense_w: glorot(embed_dim, hidden)?,
        dense_b: Tensor::zeros(vec![hidden])?,
        out_w: glorot(hidden, outputs)?,
        out_b: Tensor::zeros(vec![outputs])?,
    })
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DanOutput {
    /// Dense-layer activations: the patient representation.
    pub hidden: Vec<f64>,
    pub probs: Vec<f64>,
}

/// Intermediate values of one forward pass, kept for the backward pass.
pub(crate) struct Trace {
    /// Distinct tokens with pooling weight `count / len`, ascending by token.
    pooled: Vec<(usize, f64)>,
    avg: Vec<f64>,
    pre: Vec<f64>,
    pub(crate) hidden: Vec<f64>,
    pub(crate) probs: Vec<f64>,
}

/// Pooling weights per distinct token. Accumulating in sorted-token order
/// makes the pooled vector exactly invariant to token order and to repeating
/// the whole document.
fn pool_weights(doc: &ConceptDoc, vocab: usize) -> Result<Vec<(usize, f64)>> {
    if doc.is_empty() {
        return Err(Error::Inference("empty document".into()));
    }
    doc.check_vocab(vocab)?;
    let mut tokens: Vec<usize> = doc.tokens.iter().map(|&t| t as usize).collect();
    tokens.sort_unstable();
    let mut counts: Vec<(usize, usize)> = Vec::new();
    for t in tokens {
        match counts.last_mut() {
            Some(last) if last.0 == t => last.1 += 1,
            _ => counts.push((t, 1)),
        }
    }
    let len = doc.len() as f64;
    Ok(counts
        .into_iter()
        .map(|(t, c)| (t, c as f64 / len))
        .collect())
}

pub(crate) fn trace(p: &DanParams, doc: &ConceptDoc, act: Activation) -> Result<Trace> {
    let (e_dim, h_dim, m_dim) = (p.embed_dim(), p.hidden_dim(), p.outputs());
    let pooled = pool_weights(doc, p.vocab_size())?;

    let embed = p.embed.data();
    let mut avg = vec![0.0; e_dim];
    for &(t, w) in &pooled {
        let row = &embed[t * e_dim..(t + 1) * e_dim];
        for (a, &x) in avg.iter_mut().zip(row) {
            *a += w * x;
        }
    }

    let mut pre = p.dense_b.data().to_vec();
    let dense_w = p.dense_w.data();
    for (e, &a) in avg.iter().enumerate() {
        let row = &dense_w[e * h_dim..(e + 1) * h_dim];
        for (z, &w) in pre.iter_mut().zip(row) {
            *z += a * w;
        }
    }
    let hidden: Vec<f64> = pre.iter().map(|&z| act.apply(z)).collect();

    let mut logits = p.out_b.data().to_vec();
    let out_w = p.out_w.data();
    for (h, &x) in hidden.iter().enumerate() {
        let row = &out_w[h * m_dim..(h + 1) * m_dim];
        for (z, &w) in logits.iter_mut().zip(row) {
            *z += x * w;
        }
    }
    let probs = logits.into_iter().map(sigmoid).collect();

    Ok(Trace {
        pooled,
        avg,
        pre,
        hidden,
        probs,
    })
}

pub fn dan_forward(p: &DanParams, doc: &ConceptDoc, act: Activation) -> Result<DanOutput> {
    let t = trace(p, doc, act)?;
    Ok(DanOutput {
        hidden: t.hidden,
        probs: t.probs,
    })
}

/// Summed binary cross-entropy over outputs. Probabilities are clamped to
/// `[1e-12, 1 - 1e-12]` before the logarithm.
pub fn bce_loss(probs: &[f64], labels: &[bool]) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} probabilities vs {} labels",
            probs.len(),
            labels.len()
        )));
    }
    Ok(probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            if y {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum())
}

/// Gradient accumulator with the DAN's shapes. Embedding rows are tracked so
/// clearing and applying only touch rows a batch actually used.
#[derive(Debug, Clone)]
pub struct DanGrads {
    embed_dim: usize,
    embed: Vec<f64>,
    touched: Vec<usize>,
    is_touched: Vec<bool>,
    dense_w: Vec<f64>,
    dense_b: Vec<f64>,
    out_w: Vec<f64>,
    out_b: Vec<f64>,
}

impl DanGrads {
    pub fn new(p: &DanParams) -> Self {
        DanGrads {
            embed_dim: p.embed_dim(),
            embed: vec![0.0; p.embed.len()],
            touched: Vec::new(),
            is_touched: vec![false; p.vocab_size()],
            dense_w: vec![0.0; p.dense_w.len()],
            dense_b: vec![0.0; p.dense_b.len()],
            out_w: vec![0.0; p.out_w.len()],
            out_b: vec![0.0; p.out_b.len()],
        }
    }

    pub fn clear(&mut self) {
        let e = self.embed_dim;
        for &row in &self.touched {
            self.embed[row * e..(row + 1) * e].fill(0.0);
            self.is_touched[row] = false;
        }
        self.touched.clear();
        for buf in [
            &mut self.dense_w,
            &mut self.dense_b,
            &mut self.out_w,
            &mut self.out_b,
        ] {
            buf.fill(0.0);
        }
    }

    /// Adds `scale` times the gradient of the summed BCE at one example.
    /// Returns the example's loss.
    pub fn accumulate(
        &mut self,
        p: &DanParams,
        doc: &ConceptDoc,
        labels: &[bool],
        act: Activation,
        scale: f64,
    ) -> Result<f64> {
        let m_dim = p.outputs();
        if labels.len() != m_dim {
            return Err(Error::Shape(format!(
                "{} labels for {m_dim} outputs",
                labels.len()
            )));
        }
        let t = trace(p, doc, act)?;
        let loss = bce_loss(&t.probs, labels)?;
        let (e_dim, h_dim) = (p.embed_dim(), p.hidden_dim());

        // d loss / d logit = prob - label for sigmoid + BCE.
        let d_logits: Vec<f64> = t
            .probs
            .iter()
            .zip(labels)
            .map(|(&q, &y)| q - if y { 1.0 } else { 0.0 })
            .collect();

        let out_w = p.out_w.data();
        let mut d_pre = vec![0.0; h_dim];
        for h in 0..h_dim {
            let row = &out_w[h * m_dim..(h + 1) * m_dim];
            let g_row = &mut self.out_w[h * m_dim..(h + 1) * m_dim];
            let mut d_hidden = 0.0;
            for m in 0..m_dim {
                g_row[m] += scale * t.hidden[h] * d_logits[m];
                d_hidden += row[m] * d_logits[m];
            }
            d_pre[h] = d_hidden * act.derivative(t.pre[h], t.hidden[h]);
        }
        for (g, &d) in self.out_b.iter_mut().zip(&d_logits) {
            *g += scale * d;
        }
        for (g, &d) in self.dense_b.iter_mut().zip(&d_pre) {
            *g += scale * d;
        }

        let dense_w = p.dense_w.data();
        let mut d_avg = vec![0.0; e_dim];
        for e in 0..e_dim {
            let row = &dense_w[e * h_dim..(e + 1) * h_dim];
            let g_row = &mut self.dense_w[e * h_dim..(e + 1) * h_dim];
            let mut acc = 0.0;
            for h in 0..h_dim {
                g_row[h] += scale * t.avg[e] * d_pre[h];
                acc += row[h] * d_pre[h];
            }
            d_avg[e] = acc;
        }

        for &(tok, w) in &t.pooled {
            if !self.is_touched[tok] {
                self.is_touched[tok] = true;
                self.touched.push(tok);
            }
            let g_row = &mut self.embed[tok * e_dim..(tok + 1) * e_dim];
            for (g, &d) in g_row.iter_mut().zip(&d_avg) {
                *g += scale * w * d;
            }
        }
        Ok(loss)
    }

    /// In-place `p -= lr * grads`, visiting only touched embedding rows.
    pub fn apply_sgd(&self, p: &mut DanParams, lr: f64) {
        let e = self.embed_dim;
        let embed = p.embed.data_mut();
        for &row in &self.touched {
            for (x, &g) in embed[row * e..(row + 1) * e]
                .iter_mut()
                .zip(&self.embed[row * e..(row + 1) * e])
            {
                *x -= lr * g;
            }
        }
        for (t, g) in [
            (&mut p.dense_w, &self.dense_w),
            (&mut p.dense_b, &self.dense_b),
            (&mut p.out_w, &self.out_w),
            (&mut p.out_b, &self.out_b),
        ] {
            for (x, &d) in t.data_mut().iter_mut().zip(g) {
                *x -= lr * d;
            }
        }
    }

    pub fn to_param_set(&self, p: &DanParams) -> ParamSet {
        let shaped = |like: &Tensor, data: &[f64]| {
            Tensor::new(like.shape().to_vec(), data.to_vec()).expect("gradient shape")
        };
        DanParams {
            embed: shaped(&p.embed, &self.embed),
            dense_w: shaped(&p.dense_w, &self.dense_w),
            dense_b: shaped(&p.dense_b, &self.dense_b),
            out_w: shaped(&p.out_w, &self.out_w),
            out_b: shaped(&p.out_b, &self.out_b),
        }
        .to_param_set()
    }
}

/// Exact gradient of the summed BCE for one example, congruent with `p`.
pub fn dan_backward(
    p: &DanParams,
    doc: &ConceptDoc,
    labels: &[bool],
    act: Activation,
) -> Result<ParamSet> {
    let mut g = DanGrads::new(p);
    g.accumulate(p, doc, labels, act, 1.0)?;
    Ok(g.to_param_set(p))
}
