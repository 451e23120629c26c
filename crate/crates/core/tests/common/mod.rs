//! Shared oracles and generators for the integration tests.

#![allow(dead_code)]

use fairfpr::encoder::{self, EncoderParams};
use fairfpr::losses::{self, fpr_weight, LogitsBatch, LossConfig, LossKind, PenaltyState};
use fairfpr::numerics::{l2_normalize_columns, Matrix, Rng};
use fairfpr::thresholding::{self, ThresholdEstimate};

pub const FD_STEP: f64 = 1e-6;

/// `||a - b|| / max(||a||, ||b||)`, zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(numeric.iter().map(|b| b * b).sum::<f64>().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Central differences of `f` at every coordinate of `x`.
pub fn central_differences(x: &mut [f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + FD_STEP;
            let up = f(x);
            x[i] = orig - FD_STEP;
            let down = f(x);
            x[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Weighted instance FPRs recomputed from a frozen mask: the brute-force
/// sum of `F(cos)` over masked entries, divided by `c - 1`.
pub fn state_with_frozen_mask(batch: &LogitsBatch, frozen: &PenaltyState, p: f64) -> PenaltyState {
    let c = batch.num_classes();
    let weighted = (0..batch.batch_size())
        .map(|i| {
            batch.cosines.row(i).iter().zip(&frozen.mask[i]).filter(|(_, m)| **m).map(|(v, _)| fpr_weight(*v, p)).sum::<f64>()
                / (c - 1) as f64
        })
        .collect();
    PenaltyState {
        weighted_instance_fpr: weighted,
        ..frozen.clone()
    }
}

/// Loss at `batch` with the iteration's mask held fixed.
pub fn frozen_loss(batch: &LogitsBatch, cfg: &LossConfig, frozen: Option<&PenaltyState>) -> f64 {
    match frozen {
        Some(st) => losses::loss_forward_with_state(batch, cfg, state_with_frozen_mask(batch, st, cfg.p)).unwrap().loss,
        None => losses::loss_forward(batch, cfg, None).unwrap().loss,
    }
}

pub struct GradCase {
    pub cfg: LossConfig,
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub encoder: EncoderParams,
    pub raw_weights: Matrix,
}

pub fn random_grad_case(seed: u64, kind: LossKind, p: f64) -> GradCase {
    let mut rng = Rng::new(seed);
    let n = 2 + rng.below(7);
    let c = 2 + rng.below(15);
    let d = 2 + rng.below(15);
    let raw = 2 + rng.below(8);
    let hidden: Vec<usize> = (0..rng.below(3)).map(|_| 2 + rng.below(8)).collect();
    let cfg = LossConfig {
        kind,
        s: 1.0 + 7.0 * rng.uniform(),
        m: 0.1 + 0.4 * rng.uniform(),
        alpha: 0.1 + 1.9 * rng.uniform(),
        p,
        gamma_u: 0.05 + 0.3 * rng.uniform(),
    };
    let features = Matrix::new(n, raw, rng.standard_normal(n * raw)).unwrap();
    let labels = (0..n).map(|_| rng.below(c)).collect();
    // Resample until no row collapses to zero and no hidden unit sits within
    // finite-difference reach of the ReLU kink.
    let encoder = (0u64..)
        .map(|k| EncoderParams::init(raw, &hidden, d, seed ^ 0x5eed ^ (k << 32)).unwrap())
        .find(|enc| match encoder::forward(enc, &features) {
            Ok(t) => t.pre_activations.iter().take(hidden.len()).all(|z| z.data().iter().all(|v| v.abs() > 1e-4)),
            Err(_) => false,
        })
        .unwrap();
    let raw_weights = Matrix::new(d, c, rng.standard_normal(d * c)).unwrap();
    GradCase {
        cfg,
        features,
        labels,
        encoder,
        raw_weights,
    }
}

fn chain_loss(case: &GradCase, enc: &EncoderParams, raw_w: &Matrix, frozen: Option<&PenaltyState>) -> f64 {
    let emb = encoder::embed(enc, &case.features).unwrap();
    let batch = losses::cosine_logits(&emb, &l2_normalize_columns(raw_w).unwrap(), &case.labels).unwrap();
    frozen_loss(&batch, &case.cfg, frozen)
}

/// Worst relative error between analytic and central-difference gradients,
/// per block: cosines, raw class weights, and each encoder parameter.
pub fn gradient_errors(case: &GradCase) -> Vec<(String, f64)> {
    let emb_trace = encoder::forward(&case.encoder, &case.features).unwrap();
    let w_hat = l2_normalize_columns(&case.raw_weights).unwrap();
    let batch = losses::cosine_logits(&emb_trace.embeddings, &w_hat, &case.labels).unwrap();
    let threshold: Option<ThresholdEstimate> =
        case.cfg.kind.is_penalty().then(|| thresholding::estimate_threshold(&batch, case.cfg.gamma_u).unwrap());
    let out = losses::loss_forward(&batch, &case.cfg, threshold.as_ref()).unwrap();
    let frozen = out.penalty_state.clone();
    let mut errors = Vec::new();

    let mut cos = batch.cosines.data().to_vec();
    let (n, c) = batch.cosines.shape();
    let numeric = central_differences(&mut cos, |v| {
        let b = LogitsBatch::new(Matrix::new(n, c, v.to_vec()).unwrap(), case.labels.clone()).unwrap();
        frozen_loss(&b, &case.cfg, frozen.as_ref())
    });
    errors.push(("cosines".to_string(), relative_error(out.grad_wrt_cosines.data(), &numeric)));

    let (grad_w, grad_emb) = losses::classifier_grads(&emb_trace.embeddings, &case.raw_weights, &out.grad_wrt_cosines).unwrap();
    let mut w = case.raw_weights.data().to_vec();
    let (d, _) = case.raw_weights.shape();
    let numeric = central_differences(&mut w, |v| chain_loss(case, &case.encoder, &Matrix::new(d, c, v.to_vec()).unwrap(), frozen.as_ref()));
    errors.push(("class_weights".to_string(), relative_error(grad_w.data(), &numeric)));

    let (grads, _) = encoder::backward(&case.encoder, &emb_trace, &grad_emb).unwrap();
    for l in 0..case.encoder.num_layers() {
        let shape = case.encoder.layer_weights[l].shape();
        let mut wl = case.encoder.layer_weights[l].data().to_vec();
        let numeric = central_differences(&mut wl, |v| {
            let mut enc = case.encoder.clone();
            enc.layer_weights[l] = Matrix::new(shape.0, shape.1, v.to_vec()).unwrap();
            chain_loss(case, &enc, &case.raw_weights, frozen.as_ref())
        });
        errors.push((format!("w{l}"), relative_error(grads.weights[l].data(), &numeric)));

        let mut bl = case.encoder.layer_biases[l].clone();
        let numeric = central_differences(&mut bl, |v| {
            let mut enc = case.encoder.clone();
            enc.layer_biases[l] = v.to_vec();
            chain_loss(case, &enc, &case.raw_weights, frozen.as_ref())
        });
        errors.push((format!("b{l}"), relative_error(&grads.biases[l], &numeric)));
    }
    errors
}

/// Loss and every analytic gradient block of `case`, flattened.
pub fn analytic_gradients(case: &GradCase) -> (f64, Vec<(String, Vec<f64>)>) {
    let trace = encoder::forward(&case.encoder, &case.features).unwrap();
    let w_hat = l2_normalize_columns(&case.raw_weights).unwrap();
    let batch = losses::cosine_logits(&trace.embeddings, &w_hat, &case.labels).unwrap();
    let threshold = case.cfg.kind.is_penalty().then(|| thresholding::estimate_threshold(&batch, case.cfg.gamma_u).unwrap());
    let out = losses::loss_forward(&batch, &case.cfg, threshold.as_ref()).unwrap();
    let grad_cos = losses::loss_backward(&batch, &case.cfg, &out).unwrap();
    let (grad_w, grad_emb) = losses::classifier_grads(&trace.embeddings, &case.raw_weights, &grad_cos).unwrap();
    let (grads, _) = encoder::backward(&case.encoder, &trace, &grad_emb).unwrap();
    let mut blocks = vec![
        ("cosines".to_string(), grad_cos.into_data()),
        ("class_weights".to_string(), grad_w.into_data()),
    ];
    for (l, (w, b)) in grads.weights.into_iter().zip(grads.biases).enumerate() {
        blocks.push((format!("w{l}"), w.into_data()));
        blocks.push((format!("b{l}"), b));
    }
    (out.loss, blocks)
}

/// Random cosines in (-0.95, 0.95) with random labels.
pub fn random_batch(rng: &mut Rng, n: usize, c: usize) -> LogitsBatch {
    let cos: Vec<f64> = (0..n * c).map(|_| 1.9 * rng.uniform() - 0.95).collect();
    let labels = (0..n).map(|_| rng.below(c)).collect();
    LogitsBatch::new(Matrix::new(n, c, cos).unwrap(), labels).unwrap()
}

use fairfpr::metrics::{GroupedScores, RocPoint};

/// Random grouped scores; with `coarse`, similarities come from a small grid
/// so ties are common.
pub fn random_scores(rng: &mut Rng, max_pairs: usize, coarse: bool) -> GroupedScores {
    let groups = 2 + rng.below(4);
    let total = 8 * groups + rng.below(max_pairs.saturating_sub(8 * groups).max(1));
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for i in 0..total {
        let g = format!("g{}", i % groups);
        let shift = 0.1 * (i % groups) as f64;
        let draw = |rng: &mut Rng| {
            if coarse {
                (rng.below(21) as f64 - 10.0) / 10.0
            } else {
                2.0 * rng.uniform() - 1.0
            }
        };
        // first two pairs of each group are forced to one of each kind
        let positive = if i < 2 * groups { i < groups } else { rng.uniform() < 0.3 };
        if positive {
            pos.push(((draw(rng) + 0.5).min(1.0), g));
        } else {
            neg.push(((draw(rng) + shift).min(1.0), g));
        }
    }
    GroupedScores::from_pairs(pos, neg)
}

fn scores_of(pairs: &[fairfpr::metrics::ScoredPair], group: Option<&str>) -> Vec<f64> {
    pairs.iter().filter(|p| group.is_none_or(|g| p.group == g)).map(|p| p.similarity).collect()
}

pub fn oracle_fpr(s: &GroupedScores, t: f64, group: Option<&str>) -> f64 {
    let neg = scores_of(&s.negatives, group);
    neg.iter().filter(|&&v| v > t).count() as f64 / neg.len() as f64
}

pub fn oracle_fnr(s: &GroupedScores, t: f64, group: Option<&str>) -> f64 {
    let pos = scores_of(&s.positives, group);
    pos.iter().filter(|&&v| v < t).count() as f64 / pos.len() as f64
}

/// Smallest observed negative score `t` with `#{s > t} / N <= num / den`,
/// compared in integers.
pub fn oracle_threshold(s: &GroupedScores, num: u64, den: u64) -> f64 {
    let mut neg = scores_of(&s.negatives, None);
    neg.sort_by(f64::total_cmp);
    let n = neg.len() as u64;
    for &t in &neg {
        let above = neg.iter().filter(|&&v| v > t).count() as u64;
        if above * den <= num * n {
            return t;
        }
    }
    unreachable!("the largest negative always qualifies")
}

/// Bias degree straight from its definition, at the scanned threshold.
pub fn oracle_bias_degree(s: &GroupedScores, num: u64, den: u64) -> f64 {
    let t = oracle_threshold(s, num, den);
    let overall = oracle_fpr(s, t, None);
    let groups: Vec<&String> = s.group_set.iter().filter(|g| s.negatives.iter().any(|p| &p.group == *g)).collect();
    let rates: Vec<f64> = groups.iter().map(|g| oracle_fpr(s, t, Some(g))).collect();
    let mu = rates.iter().sum::<f64>() / rates.len() as f64;
    let ss: f64 = rates.iter().map(|r| ((r - mu) / overall).powi(2)).sum();
    ss.sqrt() / rates.len() as f64
}

/// Exhaustive threshold scan: accepts `s >= t`, rejects `s < t` (so a
/// negative at exactly `t` counts as correctly rejected iff `s <= t`).
pub fn oracle_accuracy(s: &GroupedScores, group: Option<&str>) -> (f64, f64) {
    let pos = scores_of(&s.positives, group);
    let neg = scores_of(&s.negatives, group);
    let mut cands: Vec<f64> = pos.iter().chain(&neg).copied().collect();
    cands.sort_by(f64::total_cmp);
    let mut best = (0usize, f64::NAN);
    for &t in &cands {
        let correct = pos.iter().filter(|&&v| v >= t).count() + neg.iter().filter(|&&v| v <= t).count();
        if correct > best.0 {
            best = (correct, t);
        }
    }
    (best.0 as f64 / (pos.len() + neg.len()) as f64, best.1)
}

/// ROC from a full sort and direct counting.
pub fn oracle_roc(s: &GroupedScores, group: Option<&str>, points: usize) -> Vec<RocPoint> {
    let mut neg = scores_of(&s.negatives, group);
    let pos = scores_of(&s.positives, group);
    neg.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let all: Vec<f64> = neg.iter().chain(&pos).copied().collect();
    let lo = all.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (0..points)
        .map(|i| {
            let t = match i {
                0 => lo - 1e-9,
                _ if i == points - 1 => hi + 1e-9,
                _ => neg[((i as f64 / (points - 1) as f64) * (neg.len() - 1) as f64).round() as usize],
            };
            RocPoint {
                threshold: t,
                fpr: oracle_fpr(s, t, group),
                tpr: 1.0 - oracle_fnr(s, t, group),
            }
        })
        .collect()
}

/// `|a - b| <= tol · max(1, |a|, |b|)`.
pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * 1f64.max(a.abs()).max(b.abs())
}

/// Checks every metric against its oracle on one instance; returns the
/// first disagreement.
pub fn check_metric_instance(s: &GroupedScores, num: u64, den: u64, tol: f64) -> Result<(), String> {
    use fairfpr::metrics;
    let gamma = num as f64 / den as f64;
    let groups: Vec<Option<&str>> = std::iter::once(None).chain(s.group_set.iter().map(|g| Some(g.as_str()))).collect();
    let mut probes: Vec<f64> = s.negatives.iter().chain(&s.positives).map(|p| p.similarity).take(25).collect();
    probes.extend([-2.0, 2.0, 0.0]);
    for &g in &groups {
        for &t in &probes {
            let (a, b) = (metrics::fpr_at(s, t, g).unwrap(), oracle_fpr(s, t, g));
            if !close(a, b, tol) {
                return Err(format!("fpr_at({t}, {g:?}) = {a}, oracle {b}"));
            }
            let (a, b) = (metrics::fnr_at(s, t, g).unwrap(), oracle_fnr(s, t, g));
            if !close(a, b, tol) {
                return Err(format!("fnr_at({t}, {g:?}) = {a}, oracle {b}"));
            }
        }
        let (a, b) = (metrics::verification_accuracy(s, g).unwrap(), oracle_accuracy(s, g));
        if !close(a.0, b.0, tol) || a.1 != b.1 {
            return Err(format!("verification_accuracy({g:?}) = {a:?}, oracle {b:?}"));
        }
        let (a, b) = (metrics::roc(s, g, 11).unwrap(), oracle_roc(s, g, 11));
        for (x, y) in a.iter().zip(&b) {
            if x.threshold != y.threshold || !close(x.fpr, y.fpr, tol) || !close(x.tpr, y.tpr, tol) {
                return Err(format!("roc({g:?}) point {x:?}, oracle {y:?}"));
            }
        }
    }
    let t = metrics::threshold_for_overall_fpr(s, gamma).unwrap();
    let t_oracle = oracle_threshold(s, num, den);
    if t != t_oracle {
        return Err(format!("threshold_for_overall_fpr({gamma}) = {t}, oracle {t_oracle}"));
    }
    match metrics::bias_degree(s, gamma) {
        Ok(d) => {
            let o = oracle_bias_degree(s, num, den);
            if !close(d, o, tol) {
                return Err(format!("bias_degree({gamma}) = {d}, oracle {o}"));
            }
        }
        // zero overall FPR at the threshold: the oracle divides by zero too
        Err(_) => {
            if oracle_fpr(s, t_oracle, None) != 0.0 {
                return Err(format!("bias_degree({gamma}) failed with positive overall FPR"));
            }
        }
    }
    Ok(())
}

/// Runs the built `fairfpr` binary.
pub fn fairfpr(args: &[&str]) -> std::process::Output {
    std::process::Command::new(env!("CARGO_BIN_EXE_fairfpr"))
        .args(args)
        .output()
        .expect("binary runs")
}

/// Runs the binary and panics with its stderr unless it exits 0.
pub fn fairfpr_ok(args: &[&str]) -> String {
    let out = fairfpr(args);
    assert!(out.status.success(), "fairfpr {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

pub fn path_str(p: &std::path::Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

/// The shipped benchmark run config.
pub fn benchmark_config_path() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/benchmark.json")
}

pub fn benchmark_config() -> fairfpr::cli::config::RunConfig {
    fairfpr::cli::config::load(Some(&benchmark_config_path())).unwrap()
}

/// Writes `cfg` as a config file at `path`.
pub fn write_config<T: serde::Serialize>(cfg: &T, path: &std::path::Path) {
    std::fs::write(path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
}
