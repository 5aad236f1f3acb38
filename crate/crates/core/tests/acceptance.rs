//! Acceptance gate. Each test prints one `ACCEPTANCE <n> PASS|FAIL` line and
//! then asserts the same condition.

#![allow(clippy::needless_range_loop)]

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fedpheno::cli;
use fedpheno::corpus::{generate_corpus, ClassLabel, ConceptDoc, PatientRecord, Silo, SynthConfig};
use fedpheno::experiment::{run_experiment_on, ExperimentSpec, EXPERIMENT_IDS};
use fedpheno::federation::{run_centralized, run_federated, weighted_average, FedConfig};
use fedpheno::metrics::{confusion, prf, Averaging};
use fedpheno::neural::{bce_loss, init_params, random_grad_checks, Activation, ParamSet, Tensor};
use fedpheno::phenotype::{
    prepare_dataset, FeatureSource, SvmModel, SvmTrainer, DEFAULT_MIN_CLASS_COUNT,
};
use fedpheno::representation::DanTrainer;
use fedpheno::vocab::{fit_idf, tfidf_vector, IdfTable};

const FEDAVG_TOL: f64 = 1e-12;
const FEDAVG_CASES: usize = 1_000;
const FEDAVG_BUDGET: Duration = Duration::from_secs(1);
const DEGENERATE_BUDGET: Duration = Duration::from_secs(30);
const GRAD_TOL: f64 = 1e-4;
const GRAD_STEP: f64 = 1e-5;
const GRAD_CONFIGS: usize = 10;
const GRAD_COORDS: usize = 100;
const GRAD_BUDGET: Duration = Duration::from_secs(30);
const ORACLE_TOL: f64 = 1e-9;
const ORACLE_TRIALS: usize = 1_000;
const FED_GAP_TOL: f64 = 0.05;
const SUITE_BUDGET: Duration = Duration::from_secs(600);
const CHECKPOINT_MODELS: usize = 100;
const DETERMINISM_SEED: &str = "11";

/// Writes straight to the process stdout so the line survives output capture.
fn verdict(n: u32, pass: bool, what: &str, detail: &str) {
    let line = format!(
        "ACCEPTANCE {n} {}: {what} ({detail})\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
}

fn random_param_set(rng: &mut ChaCha8Rng, shapes: &[Vec<usize>], scale: f64) -> ParamSet {
    ParamSet::new(
        shapes
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let n = s.iter().product();
                let data = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
                (format!("t{i}"), Tensor::new(s.clone(), data).unwrap())
            })
            .collect(),
    )
    .unwrap()
}

fn values(p: &ParamSet) -> Vec<f64> {
    p.tensors().flat_map(|t| t.data().iter().copied()).collect()
}

#[test]
fn criterion_1_fedavg_algebra() {
    let start = Instant::now();
    let mut worst_hand: f64 = 0.0;
    let scalar = |v: f64| ParamSet::new(vec![("w".into(), Tensor::scalar(v).unwrap())]).unwrap();
    for (models, counts, expected) in [
        (vec![0.0, 4.0], vec![1, 3], 3.0),
        (vec![1.0, 2.0, 6.0], vec![5, 5, 5], 3.0),
        (vec![10.0, -10.0], vec![3, 1], 5.0),
        (vec![0.5, 0.25, 1.0, 2.0], vec![4, 4, 1, 1], 0.6),
        (vec![7.0], vec![9], 7.0),
    ] {
        let ps: Vec<ParamSet> = models.iter().map(|&v| scalar(v)).collect();
        let got = weighted_average(&ps, &counts).unwrap();
        worst_hand = worst_hand.max((got.get("w").unwrap().data()[0] - expected).abs());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst_oracle, mut worst_perm, mut hull_violations): (f64, f64, usize) = (0.0, 0.0, 0);
    for _ in 0..FEDAVG_CASES {
        let k = rng.gen_range(1..=8);
        let shapes = vec![vec![rng.gen_range(1..5), rng.gen_range(1..4)], vec![rng.gen_range(1..6)]];
        let models: Vec<ParamSet> = (0..k).map(|_| random_param_set(&mut rng, &shapes, 10.0)).collect();
        let counts: Vec<usize> = (0..k).map(|_| rng.gen_range(1..1000)).collect();
        let avg = values(&weighted_average(&models, &counts).unwrap());

        let total: usize = counts.iter().sum();
        let flat: Vec<Vec<f64>> = models.iter().map(values).collect();
        for (i, &a) in avg.iter().enumerate() {
            let oracle: f64 = flat
                .iter()
                .zip(&counts)
                .map(|(m, &n)| m[i] * n as f64)
                .sum::<f64>()
                / total as f64;
            worst_oracle = worst_oracle.max((a - oracle).abs());
            let lo = flat.iter().map(|m| m[i]).fold(f64::INFINITY, f64::min);
            let hi = flat.iter().map(|m| m[i]).fold(f64::NEG_INFINITY, f64::max);
            if a < lo || a > hi {
                hull_violations += 1;
            }
        }

        let mut perm: Vec<usize> = (0..k).collect();
        for i in (1..k).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let pm: Vec<ParamSet> = perm.iter().map(|&i| models[i].clone()).collect();
        let pc: Vec<usize> = perm.iter().map(|&i| counts[i]).collect();
        let permuted = values(&weighted_average(&pm, &pc).unwrap());
        for (a, b) in avg.iter().zip(&permuted) {
            worst_perm = worst_perm.max((a - b).abs());
        }
    }
    let elapsed = start.elapsed();
    let pass = worst_hand <= FEDAVG_TOL
        && worst_oracle <= FEDAVG_TOL
        && worst_perm <= FEDAVG_TOL
        && hull_violations == 0
        && elapsed < FEDAVG_BUDGET;
    verdict(
        1,
        pass,
        "weighted averaging algebra",
        &format!(
            "hand err {worst_hand:.1e}, oracle err {worst_oracle:.1e}, permutation err {worst_perm:.1e}, \
             hull violations {hull_violations}, {FEDAVG_CASES} cases in {elapsed:.2?}"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_2_single_site_federation_equals_centralized() {
    let start = Instant::now();
    let cfg = SynthConfig {
        patients_pretrain: 300,
        patients_phenotype: 200,
        prevalence: 0.3,
        ..SynthConfig::default()
    };
    let corpus = generate_corpus(&cfg).unwrap();

    let mut fed = FedConfig::representation_default();
    fed.num_sites = 1;
    fed.global_rounds = 4;
    fed.local_spec.epochs_per_round = 2;
    fed.local_spec.seed = 5;
    let init = init_params(cfg.vocab_size, 16, 16, cfg.num_codes, 3).unwrap().to_param_set();
    let trainer = DanTrainer {
        activation: Activation::Relu,
    };
    let silo = Silo::new(0, corpus.pretrain.clone());
    let federated = run_federated(std::slice::from_ref(&silo), &fed, &init, &trainer).unwrap();
    let central = run_centralized(&silo, &fed, &init, &trainer).unwrap();
    let dan_equal = federated.params == central.params
        && federated.params.to_bytes() == central.params.to_bytes();

    let docs: Vec<&ConceptDoc> = corpus.phenotype.iter().map(|r| &r.doc).collect();
    let idf = fit_idf(&docs, cfg.vocab_size).unwrap();
    let ds = prepare_dataset(&corpus.phenotype, 0, &FeatureSource::TfIdf(&idf), DEFAULT_MIN_CLASS_COUNT)
        .unwrap();
    let mut fed2 = FedConfig::phenotype_default();
    fed2.num_sites = 1;
    fed2.global_rounds = 6;
    fed2.local_spec.epochs_per_round = 2;
    fed2.local_spec.seed = 8;
    let svm_init = SvmModel::zeros(ds.classes.clone(), ds.dims, ds.feature_kind)
        .unwrap()
        .to_param_set();
    let svm_trainer = SvmTrainer::for_dataset(&ds);
    let svm_fed = run_federated(std::slice::from_ref(&ds), &fed2, &svm_init, &svm_trainer).unwrap();
    let svm_central = run_centralized(&ds, &fed2, &svm_init, &svm_trainer).unwrap();
    let svm_equal = svm_fed.params.to_bytes() == svm_central.params.to_bytes();
    let moved = svm_central.params != svm_init && central.params != init;

    let elapsed = start.elapsed();
    let pass = dan_equal && svm_equal && moved && elapsed < DEGENERATE_BUDGET;
    verdict(
        2,
        pass,
        "K=1 federation is bit-identical to centralized training",
        &format!(
            "DAN identical {dan_equal}, SVM identical {svm_equal}, training moved params {moved}, {elapsed:.2?}"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_3_gradient_check() {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut min_coords = usize::MAX;
    for (i, act) in [Activation::Relu, Activation::Tanh].into_iter().enumerate() {
        for (_, r) in random_grad_checks(GRAD_CONFIGS, GRAD_COORDS, 100 + i as u64, act, GRAD_STEP).unwrap() {
            worst = worst.max(r.max_rel_error);
            min_coords = min_coords.min(r.coords_checked / r.per_tensor.len());
        }
    }
    let elapsed = start.elapsed();
    let pass = worst < GRAD_TOL && min_coords >= GRAD_COORDS && elapsed < GRAD_BUDGET;
    verdict(
        3,
        pass,
        "analytic DAN gradients match central differences",
        &format!(
            "max rel err {worst:.2e} over {GRAD_CONFIGS} configs per activation, \
             >= {min_coords} coords per tensor, {elapsed:.2?}"
        ),
    );
    assert!(pass);
}

fn bce_oracle(probs: &[f64], labels: &[bool]) -> f64 {
    let mut total = 0.0;
    for i in 0..probs.len() {
        let p = probs[i].clamp(1e-12, 1.0 - 1e-12);
        let y = if labels[i] { 1.0 } else { 0.0 };
        total -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
    }
    total
}

fn tfidf_oracle(corpus: &[Vec<u32>], doc: &[u32], dims: usize) -> Vec<f64> {
    let n = corpus.len() as f64;
    let mut out = vec![0.0; dims];
    for term in 0..dims {
        let tf = doc.iter().filter(|&&t| t as usize == term).count() as f64;
        if tf == 0.0 {
            continue;
        }
        let df = corpus.iter().filter(|d| d.contains(&(term as u32))).count() as f64;
        out[term] = tf * (((1.0 + n) / (1.0 + df)).ln() + 1.0);
    }
    let norm = out.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in &mut out {
            *x /= norm;
        }
    }
    out
}

fn prf_oracle(truth: &[usize], pred: &[usize], k: usize) -> (f64, f64, f64) {
    let (mut sp, mut sr, mut sf) = (0.0, 0.0, 0.0);
    for c in 0..k {
        let mut tp = 0.0;
        let mut fp = 0.0;
        let mut fneg = 0.0;
        for i in 0..truth.len() {
            if pred[i] == c && truth[i] == c {
                tp += 1.0;
            } else if pred[i] == c {
                fp += 1.0;
            } else if truth[i] == c {
                fneg += 1.0;
            }
        }
        let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let r = if tp + fneg > 0.0 { tp / (tp + fneg) } else { 0.0 };
        let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        sp += p;
        sr += r;
        sf += f;
    }
    (sp / k as f64, sr / k as f64, sf / k as f64)
}

#[test]
fn criterion_4_loss_and_metric_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut bce_err: f64 = 0.0;
    for _ in 0..ORACLE_TRIALS {
        let m = rng.gen_range(1..12);
        let probs: Vec<f64> = (0..m)
            .map(|_| match rng.gen_range(0..6) {
                0 => 0.0,
                1 => 1.0,
                _ => rng.gen::<f64>(),
            })
            .collect();
        let labels: Vec<bool> = (0..m).map(|_| rng.gen()).collect();
        let got = bce_loss(&probs, &labels).unwrap();
        let want = bce_oracle(&probs, &labels);
        bce_err = bce_err.max((got - want).abs() / want.abs().max(1.0));
    }

    let mut tfidf_err: f64 = 0.0;
    for _ in 0..ORACLE_TRIALS {
        let dims = rng.gen_range(1..15);
        let docs: Vec<Vec<u32>> = (0..rng.gen_range(1..6))
            .map(|_| (0..rng.gen_range(1..10)).map(|_| rng.gen_range(0..dims as u32)).collect())
            .collect();
        let concept_docs: Vec<ConceptDoc> = docs.iter().map(|d| ConceptDoc::new(d.clone())).collect();
        let refs: Vec<&ConceptDoc> = concept_docs.iter().collect();
        let idf: IdfTable = fit_idf(&refs, dims).unwrap();
        let query: Vec<u32> = (0..rng.gen_range(1..10)).map(|_| rng.gen_range(0..dims as u32)).collect();
        let got = tfidf_vector(&ConceptDoc::new(query.clone()), &idf).unwrap().to_dense();
        let want = tfidf_oracle(&docs, &query, dims);
        for (a, b) in got.iter().zip(&want) {
            tfidf_err = tfidf_err.max((a - b).abs());
        }
    }

    let mut prf_err: f64 = 0.0;
    for _ in 0..ORACLE_TRIALS {
        let k = rng.gen_range(2..=3);
        let classes = &ClassLabel::ALL[..k];
        let n = rng.gen_range(0..30);
        let truth: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let t: Vec<ClassLabel> = truth.iter().map(|&i| classes[i]).collect();
        let p: Vec<ClassLabel> = pred.iter().map(|&i| classes[i]).collect();
        let got = prf(&confusion(&t, &p, classes).unwrap(), Averaging::Macro);
        let (wp, wr, wf) = prf_oracle(&truth, &pred, k);
        prf_err = prf_err
            .max((got.precision - wp).abs())
            .max((got.recall - wr).abs())
            .max((got.f1 - wf).abs());
    }

    let pass = bce_err <= ORACLE_TOL && tfidf_err <= ORACLE_TOL && prf_err <= ORACLE_TOL;
    verdict(
        4,
        pass,
        "bce_loss, TF-IDF and prf match brute-force oracles",
        &format!(
            "{ORACLE_TRIALS} trials each; max err bce {bce_err:.1e}, tfidf {tfidf_err:.1e}, prf {prf_err:.1e}"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_5_ordinal_ablation() {
    let start = Instant::now();
    let base = ExperimentSpec::for_id(1).unwrap();
    let corpus = generate_corpus(&base.corpus).unwrap();
    let mut f1 = BTreeMap::new();
    for id in EXPERIMENT_IDS {
        let spec = ExperimentSpec::for_id(id).unwrap();
        assert_eq!(spec.corpus, base.corpus);
        let run = run_experiment_on(&spec, &corpus).unwrap();
        let avg = run.summary.mean.average;
        println!(
            "  exp{id}: precision {:.4} recall {:.4} f1 {:.4} (std {:.4})",
            avg.precision, avg.recall, avg.f1, run.summary.std.average.f1
        );
        f1.insert(id, avg.f1);
    }
    let elapsed = start.elapsed();
    let checks = [
        ("exp3 < exp1", f1[&3] < f1[&1]),
        ("|exp1 - exp2| <= 0.05", (f1[&1] - f1[&2]).abs() <= FED_GAP_TOL),
        ("exp4 > exp1", f1[&4] > f1[&1]),
        ("|exp4 - exp7| <= 0.05", (f1[&4] - f1[&7]).abs() <= FED_GAP_TOL),
        ("runtime < 10 min", elapsed < SUITE_BUDGET),
    ];
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    let pass = failed.is_empty();
    verdict(
        5,
        pass,
        "ordinal ordering of the seven experiments",
        &format!(
            "f1 {}; {} seeds, {elapsed:.1?}{}",
            f1.iter()
                .map(|(id, v)| format!("exp{id}={v:.4}"))
                .collect::<Vec<_>>()
                .join(" "),
            base.seeds.len(),
            if pass {
                String::new()
            } else {
                format!("; failed: {}", failed.join(", "))
            }
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_6_questionable_class_rule() {
    use ClassLabel::{Absent as A, Present as P, Questionable as Q};
    let cases: &[([usize; 3], Option<&[ClassLabel]>)] = &[
        ([86, 596, 0], Some(&[A, P])),
        ([391, 265, 5], Some(&[A, P])),
        ([300, 200, 9], Some(&[A, P])),
        ([300, 200, 10], Some(&[A, P, Q])),
        ([40, 60, 25], Some(&[A, P, Q])),
        ([12, 0, 30], Some(&[A, Q])),
        ([5, 5, 5], None),
        ([500, 9, 3], None),
    ];
    let idf = {
        let d = ConceptDoc::new((0..8).collect());
        fit_idf(&[&d], 8).unwrap()
    };
    let mut mismatches = Vec::new();
    for (counts, expected) in cases {
        let mut records = Vec::new();
        for (label, &n) in ClassLabel::ALL.iter().zip(counts) {
            for _ in 0..n {
                let id = records.len() as u64;
                records.push(PatientRecord {
                    patient_id: id,
                    doc: ConceptDoc::new(vec![(id % 8) as u32]),
                    code_labels: None,
                    phenotype_labels: Some(vec![*label]),
                });
            }
        }
        let got = prepare_dataset(&records, 0, &FeatureSource::TfIdf(&idf), DEFAULT_MIN_CLASS_COUNT);
        let ok = match (&got, expected) {
            (Ok(ds), Some(want)) => {
                let kept: usize = want.iter().map(|&c| counts[c as usize]).sum();
                ds.classes == *want && ds.len() == kept
            }
            (Err(_), None) => true,
            _ => false,
        };
        if !ok {
            mismatches.push(format!("{counts:?}"));
        }
    }
    let pass = mismatches.is_empty();
    verdict(
        6,
        pass,
        "classes below the minimum count are dropped",
        &format!("{} table rows, mismatches: {mismatches:?}", cases.len()),
    );
    assert!(pass);
}

#[test]
fn criterion_7_checkpoint_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let dir = tempfile::tempdir().unwrap();
    let mut failures = 0;
    for i in 0..CHECKPOINT_MODELS {
        let shapes: Vec<Vec<usize>> = (0..rng.gen_range(1..6))
            .map(|_| (0..rng.gen_range(1..4)).map(|_| rng.gen_range(1..7)).collect())
            .collect();
        let mut model = random_param_set(&mut rng, &shapes, 1.0);
        // Mix in extreme magnitudes and signed zeros.
        let scaled: Vec<(String, Tensor)> = model
            .clone()
            .into_entries()
            .into_iter()
            .map(|(name, t)| {
                let data = t
                    .data()
                    .iter()
                    .map(|&x| match rng.gen_range(0..5) {
                        0 => x * 1e300,
                        1 => x * 1e-300,
                        2 => -0.0,
                        _ => x,
                    })
                    .collect();
                (name, Tensor::new(t.shape().to_vec(), data).unwrap())
            })
            .collect();
        model = ParamSet::new(scaled).unwrap();
        let path = dir.path().join(format!("m{i}.ckpt"));
        model.save(&path).unwrap();
        let back = ParamSet::load(&path).unwrap();
        let bits = |p: &ParamSet| values(p).iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        let names = |p: &ParamSet| {
            p.iter()
                .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
                .collect::<Vec<_>>()
        };
        if bits(&back) != bits(&model) || names(&back) != names(&model) || back.to_bytes() != model.to_bytes() {
            failures += 1;
        }
    }
    let pass = failures == 0;
    verdict(
        7,
        pass,
        "checkpoint save/load is bit-exact",
        &format!("{CHECKPOINT_MODELS} random models, {failures} mismatches"),
    );
    assert!(pass);
}

fn dir_contents(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                out.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn criterion_8_cli_runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let mut differing = Vec::new();
    let mut reports_seen = 0;
    for id in EXPERIMENT_IDS {
        let mut runs = Vec::new();
        for rep in 0..2 {
            let out = tmp.path().join(format!("exp{id}_{rep}"));
            let argv = [
                "fedpheno",
                "experiment",
                "--id",
                &id.to_string(),
                "--seed",
                DETERMINISM_SEED,
                "--out",
                out.to_str().unwrap(),
            ];
            let mut stdout = Vec::new();
            let mut stderr = Vec::new();
            let code = cli::run(argv, &mut stdout, &mut stderr);
            assert_eq!(code, 0, "{}", String::from_utf8_lossy(&stderr));
            runs.push(dir_contents(&out));
        }
        reports_seen += runs[0].keys().filter(|k| k.contains("report")).count();
        if runs[0] != runs[1] || runs[0].is_empty() {
            differing.push(id);
        }
    }
    let pass = differing.is_empty() && reports_seen > 0;
    verdict(
        8,
        pass,
        "repeated `experiment --id N --seed s` runs write identical files",
        &format!("ids 1..=7, {reports_seen} report files per run set, differing ids {differing:?}"),
    );
    assert!(pass);
}
