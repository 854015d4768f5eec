//! Measurements behind the acceptance criteria. Each returns the observed
//! numbers so callers can apply their own thresholds and report them.

use std::fs;
use std::path::Path;

use hsomrl::config::RunConfig;
use hsomrl::contrastive::{contrastive_loss, hardness_neg, hardness_pos, LossVariant};
use hsomrl::diffcore::Matrix;
use hsomrl::encoder::{EncoderDims, EncoderParams};
use hsomrl::eval::{alignment, uniformity, QualityBucket};
use hsomrl::iql::{IqlBatch, IqlConfig, IqlDims, IqlTrainer};
use hsomrl::pipeline::{self, RunLayout, Split};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checks::transitions;
use super::{oracle, random_labels, random_matrix, unit_rows};

/// Largest |library − brute force| over `batches` random batches per variant.
pub fn loss_oracle_error(batches: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for variant in LossVariant::ALL {
        for _ in 0..batches {
            let labels = random_labels(4, 4, &mut rng);
            let d = rng.gen_range(2..8);
            let w = unit_rows(labels.len(), d, &mut rng);
            let beta = rng.gen_range(0.1..1.0);
            let ours = contrastive_loss(&w, &labels, variant, beta).unwrap();
            let reference = oracle::contrastive(&w, &labels, variant, beta);
            worst = worst.max((ours - reference).abs());
        }
    }
    worst
}

/// Largest gap between a hardness variant and SCL when every within-set dot
/// product is equal: each task sits on its own basis vector, so positives
/// all score 1 and negatives all score 0.
pub fn uniform_hardness_gap(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let labels = random_labels(4, 4, &mut rng);
        let d = 4 + rng.gen_range(0..3);
        let rows: Vec<Vec<f64>> = labels
            .iter()
            .map(|&l| (0..d).map(|j| if j == l { 1.0 } else { 0.0 }).collect())
            .collect();
        let w = Matrix::from_rows(&rows).unwrap();
        let beta = rng.gen_range(0.1..1.0);
        let scl = contrastive_loss(&w, &labels, LossVariant::Scl, beta).unwrap();
        for variant in [LossVariant::Hg, LossVariant::Hp, LossVariant::Hphg] {
            worst = worst.max((contrastive_loss(&w, &labels, variant, beta).unwrap() - scl).abs());
        }
    }
    worst
}

pub struct HardnessReport {
    pub max_sum_error: f64,
    pub reversal_failures: usize,
}

/// ω^neg and ω^pos on the same anchor and vectors: sums and pairwise order.
pub fn hardness_properties(cases: usize, seed: u64) -> HardnessReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = HardnessReport {
        max_sum_error: 0.0,
        reversal_failures: 0,
    };
    for _ in 0..cases {
        let d = rng.gen_range(2..8);
        let n = rng.gen_range(1..12);
        let anchor = unit_rows(1, d, &mut rng);
        let others = random_matrix(n, d, 2.0, &mut rng);
        let set: Vec<&[f64]> = (0..n).map(|i| others.row(i)).collect();
        let neg = hardness_neg(anchor.row(0), &set).unwrap();
        let pos = hardness_pos(anchor.row(0), &set).unwrap();
        for ws in [&neg, &pos] {
            report.max_sum_error = report.max_sum_error.max((ws.iter().sum::<f64>() - 1.0).abs());
        }
        let dots: Vec<f64> = set.iter().map(|v| v.iter().zip(anchor.row(0)).map(|(a, b)| a * b).sum()).collect();
        let mut by_neg: Vec<usize> = (0..n).collect();
        by_neg.sort_by(|&i, &j| neg[j].total_cmp(&neg[i]).then(i.cmp(&j)));
        let mut by_pos: Vec<usize> = (0..n).collect();
        by_pos.sort_by(|&i, &j| pos[i].total_cmp(&pos[j]).then(i.cmp(&j)));
        let distinct = dots.iter().enumerate().all(|(i, a)| dots[i + 1..].iter().all(|b| a != b));
        if distinct && by_neg != by_pos {
            report.reversal_failures += 1;
        }
    }
    report
}

/// Trains V on a one-step bandit (r = 2 + a, a ~ U(-1, 1), every transition
/// terminal) and returns (V(s), brute-force τ-expectile of the rewards).
pub fn bandit_expectile(tau: f64, steps: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 256;
    let actions: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let rewards: Vec<f64> = actions.iter().map(|a| 2.0 + a).collect();
    let cfg = IqlConfig {
        expectile: tau,
        learning_rate: 1e-3,
        hidden: vec![32, 32],
        batch_size: n,
        ..IqlConfig::default()
    };
    let dims = IqlDims { obs: 1, context: 1, action: 1 };
    let mut trainer = IqlTrainer::new(dims, cfg.clone(), seed).unwrap();
    let batch = IqlBatch {
        s: Matrix::filled(n, 1, 0.5),
        z: Matrix::filled(n, 1, 1.0),
        a: Matrix::new(n, 1, actions).unwrap(),
        r: Matrix::new(n, 1, rewards.clone()).unwrap(),
        s_next: Matrix::filled(n, 1, 0.5),
        done: Matrix::filled(n, 1, 1.0),
    };
    for _ in 0..steps {
        trainer.update(&batch).unwrap();
    }
    let v = trainer.params.value.apply(&Matrix::from_rows(&[[0.5, 1.0]]).unwrap()).unwrap().item();
    (v, oracle::expectile(&rewards, tau))
}

pub struct EncoderReport {
    pub max_norm_error: f64,
    pub permutation_failures: usize,
}

/// Norms of z and w, and bitwise equality of the pooled embedding under a
/// shuffle of the transition embeddings, on `segments` random segments.
pub fn encoder_invariants(segments: usize, seed: u64) -> EncoderReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = EncoderParams::new(EncoderDims::with_input(7), seed);
    let mut report = EncoderReport {
        max_norm_error: 0.0,
        permutation_failures: 0,
    };
    for _ in 0..segments {
        let len = rng.gen_range(1..=60);
        let seg = transitions(len, 2, 2, &mut rng);
        let (z, w) = params.encode_trajectory(&seg).unwrap();
        for v in [&z.0, &w.0] {
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            report.max_norm_error = report.max_norm_error.max((norm - 1.0).abs());
        }
        let mut v_list: Vec<Vec<f64>> = seg.iter().map(|t| params.encode_transition(t).unwrap()).collect();
        let pooled = params.aggregate(&v_list).unwrap();
        v_list.shuffle(&mut rng);
        let shuffled = params.aggregate(&v_list).unwrap();
        let same = pooled.0.iter().zip(&shuffled.0).all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            report.permutation_failures += 1;
        }
    }
    report
}

pub struct MetricReport {
    pub uniformity_error: f64,
    pub alignment_error: f64,
    pub identical_uniformity: f64,
    pub antipodal_alignment: f64,
}

/// Library metrics against the brute-force pair loops, plus the two closed forms.
pub fn metric_oracles(cases: usize, seed: u64) -> MetricReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = MetricReport {
        uniformity_error: 0.0,
        alignment_error: 0.0,
        identical_uniformity: 0.0,
        antipodal_alignment: 0.0,
    };
    for _ in 0..cases {
        let n = rng.gen_range(2..40);
        let d = rng.gen_range(2..16);
        let a = unit_rows(n, d, &mut rng);
        let b = unit_rows(n, d, &mut rng);
        let t = rng.gen_range(0.5..4.0);
        let u = uniformity(&a, t).unwrap();
        report.uniformity_error = report.uniformity_error.max((u - oracle::uniformity(&a, t)).abs());
        let al = alignment(&a, &b).unwrap();
        report.alignment_error = report.alignment_error.max((al - oracle::alignment(&a, &b)).abs());
    }
    let same = Matrix::from_rows(&[[0.6, 0.8]; 5]).unwrap();
    report.identical_uniformity = uniformity(&same, 2.0).unwrap();
    let x = Matrix::from_rows(&[[0.6, 0.8]]).unwrap();
    let minus_x = Matrix::from_rows(&[[-0.6, -0.8]]).unwrap();
    report.antipodal_alignment = alignment(&x, &minus_x).unwrap();
    report
}

pub fn tiny_run_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig {
        seed,
        train_tasks: 3,
        test_tasks: 2,
        ..RunConfig::default()
    };
    cfg.data.n_per_level = 3;
    cfg.encoder.steps = 5;
    cfg.encoder.loss.batch_size = 8;
    cfg.encoder.hidden_width = Some(8);
    cfg.iql.steps = 5;
    cfg.iql.batch_size = 16;
    cfg.iql.hidden = vec![8, 8];
    cfg.eval.episodes = 2;
    cfg
}

/// Drops the timing column from a `step,variant,loss,wallclock_ms` CSV.
pub fn without_wallclock(csv: &str) -> String {
    csv.lines()
        .map(|line| line.rsplit_once(',').map_or(line, |(head, _)| head))
        .collect::<Vec<_>>()
        .join("\n")
}

fn run_all_stages(cfg: &RunConfig, root: &Path) -> Vec<(String, Vec<u8>)> {
    let layout = RunLayout::new(root);
    pipeline::gen_data(cfg, &layout).unwrap();
    let enc = pipeline::train_encoder_stage(cfg, &layout).unwrap();
    let pol = pipeline::train_policy_stage(cfg, &layout, &enc).unwrap();
    pipeline::eval_stage(cfg, &layout, &enc, &pol, QualityBucket::LOW).unwrap();
    let z = root.join("z.csv");
    pipeline::export_embeddings_stage(cfg, &layout, &enc, Split::Test, None, 2, &z).unwrap();
    pipeline::metrics_stage(cfg, &z, &root.join("metrics.json")).unwrap();

    let variant = cfg.encoder.loss.variant;
    let mut files = Vec::new();
    for split in [Split::Train, Split::Test] {
        let dir = layout.dataset(split);
        let mut names: Vec<_> = fs::read_dir(&dir).unwrap().map(|e| e.unwrap().file_name()).collect();
        names.sort();
        for name in names {
            let path = dir.join(&name);
            files.push((format!("{}/{}", split.name(), name.to_string_lossy()), fs::read(path).unwrap()));
        }
    }
    let encoder_csv = fs::read_to_string(layout.encoder_loss(variant, cfg.seed)).unwrap();
    files.push(("encoder loss history".into(), without_wallclock(&encoder_csv).into_bytes()));
    for (name, path) in [
        ("encoder checkpoint", enc.clone()),
        ("policy checkpoint", pol.clone()),
        ("policy loss history", layout.policy_loss(variant, cfg.seed)),
        ("eval report", layout.report(variant, QualityBucket::LOW, cfg.seed)),
        ("embeddings", z),
        ("metrics", root.join("metrics.json")),
    ] {
        files.push((name.into(), fs::read(path).unwrap()));
    }
    files
}

/// Runs every stage twice in fresh directories; returns the number of
/// artifacts compared and the names of those that differ.
pub fn pipeline_rerun_differences(cfg: &RunConfig) -> (usize, Vec<String>) {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = run_all_stages(cfg, a.path());
    let second = run_all_stages(cfg, b.path());
    let differing = first
        .iter()
        .zip(&second)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.clone())
        .collect();
    (first.len(), differing)
}
