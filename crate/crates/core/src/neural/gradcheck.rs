use rand::seq::index;
use rand::Rng;

use super::dan::{bce_loss, dan_backward, dan_forward, init_params, Activation, DanParams};
use super::ParamSet;
use crate::corpus::ConceptDoc;
use crate::error::{Error, Result};
use crate::seed::{self, stream};

/// Below this magnitude (of both gradients) the absolute error is used.
pub const GRAD_CHECK_ABS_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Worst error per tensor, in schema order.
    pub per_tensor: Vec<(String, f64)>,
    pub coords_checked: usize,
}

/// Compares analytic gradients against central differences on a random
/// subsample of coordinates (`coords_per_tensor` each, or all of them for
/// smaller tensors). Embedding coordinates are drawn mostly from rows the
/// document uses, since all other rows have a zero gradient.
pub fn grad_check(
    p: &DanParams,
    doc: &ConceptDoc,
    labels: &[bool],
    act: Activation,
    h: f64,
    coords_per_tensor: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    if !(h.is_finite() && h > 0.0) {
        return Err(Error::config("h", format!("step {h} must be positive and finite")));
    }
    let analytic = dan_backward(p, doc, labels, act)?;
    let base = p.to_param_set();
    let mut rng = seed::rng(seed, &[stream::GRADCHECK]);

    // Per-output loss terms. Differencing term by term before summing keeps
    // the rounding error of the quotient at the scale of one term rather
    // than of the whole loss.
    let terms_at = |ps: &ParamSet| -> Result<Vec<f64>> {
        let q = DanParams::from_param_set(ps)?;
        let probs = dan_forward(&q, doc, act)?.probs;
        probs
            .iter()
            .zip(labels)
            .map(|(&p, &y)| bce_loss(&[p], &[y]))
            .collect()
    };

    let mut doc_rows: Vec<usize> = doc.tokens.iter().map(|&t| t as usize).collect();
    doc_rows.sort_unstable();
    doc_rows.dedup();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        per_tensor: Vec::new(),
        coords_checked: 0,
    };
    for (ti, (name, tensor)) in base.iter().enumerate() {
        let n = tensor.len();
        let coords: Vec<usize> = if n <= coords_per_tensor {
            (0..n).collect()
        } else if name == "embed" {
            let cols = tensor.shape()[1];
            let in_doc = doc_rows.len() * cols;
            let from_doc = (coords_per_tensor * 3 / 4).min(in_doc);
            let mut picked: Vec<usize> = index::sample(&mut rng, in_doc, from_doc)
                .into_iter()
                .map(|k| doc_rows[k / cols] * cols + k % cols)
                .collect();
            while picked.len() < coords_per_tensor {
                let k = rng.gen_range(0..n);
                if !picked.contains(&k) {
                    picked.push(k);
                }
            }
            picked
        } else {
            index::sample(&mut rng, n, coords_per_tensor).into_vec()
        };

        let mut worst: f64 = 0.0;
        for &k in &coords {
            let numeric = {
                let mut plus = base.clone();
                let mut minus = base.clone();
                plus.tensors_mut().nth(ti).expect("tensor").data_mut()[k] += h;
                minus.tensors_mut().nth(ti).expect("tensor").data_mut()[k] -= h;
                let (up, down) = (terms_at(&plus)?, terms_at(&minus)?);
                up.iter().zip(&down).map(|(u, d)| u - d).sum::<f64>() / (2.0 * h)
            };
            let exact = analytic.tensors().nth(ti).expect("tensor").data()[k];
            worst = worst.max(relative_error(exact, numeric));
        }
        report.coords_checked += coords.len();
        report.max_rel_error = report.max_rel_error.max(worst);
        report.per_tensor.push((name.to_string(), worst));
    }
    Ok(report)
}

/// Shape of one randomly drawn network in [`random_grad_checks`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradCheckShape {
    pub vocab: usize,
    pub embed: usize,
    pub hidden: usize,
    pub outputs: usize,
    pub doc_len: usize,
}

/// Runs [`grad_check`] on `configs` random networks, documents and labels.
/// Shapes are drawn so that every tensor holds at least 100 values; biases
/// are randomized as well so hidden units sit on both sides of the kink.
pub fn random_grad_checks(
    configs: usize,
    coords_per_tensor: usize,
    seed: u64,
    act: Activation,
    h: f64,
) -> Result<Vec<(GradCheckShape, GradCheckReport)>> {
    (0..configs)
        .map(|c| {
            let mut rng = seed::rng(seed, &[stream::GRADCHECK, 1, c as u64]);
            let shape = GradCheckShape {
                vocab: rng.gen_range(150..300),
                embed: rng.gen_range(8..24),
                hidden: rng.gen_range(100..128),
                outputs: rng.gen_range(100..120),
                doc_len: rng.gen_range(1..40),
            };
            let mut p = init_params(
                shape.vocab,
                shape.embed,
                shape.hidden,
                shape.outputs,
                rng.gen(),
            )?;
            for b in p.dense_b.data_mut().iter_mut().chain(p.out_b.data_mut()) {
                *b = rng.gen_range(-0.5..0.5);
            }
            let doc = ConceptDoc::new(
                (0..shape.doc_len)
                    .map(|_| rng.gen_range(0..shape.vocab as u32))
                    .collect(),
            );
            let labels: Vec<bool> = (0..shape.outputs).map(|_| rng.gen_bool(0.3)).collect();
            let report = grad_check(&p, &doc, &labels, act, h, coords_per_tensor, rng.gen())?;
            Ok((shape, report))
        })
        .collect()
}

fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < GRAD_CHECK_ABS_FLOOR {
        (a - b).abs()
    } else {
        (a - b).abs() / scale
    }
}
