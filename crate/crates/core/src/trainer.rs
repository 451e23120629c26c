//! Mini-batch SGD over encoder and cosine classifier.
//!
//! One iteration: draw a batch from the epoch permutation, embed it, take
//! cosines against freshly normalized class weights, estimate the batch
//! threshold from the non-target logits, run the loss forward/backward,
//! backpropagate through the classifier and encoder, then apply SGD with
//! momentum and weight decay. Telemetry records the instance-FPR picture of
//! every batch for every loss kind, so baseline and penalty runs compare
//! on the same footing.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::encoder::{self, EncoderParams, ParamGrads};
use crate::error::{Error, Result};
use crate::losses::{self, LossConfig, PenaltyState};
use crate::metrics::{self, FairnessReport};
use crate::numerics::{l2_normalize_columns, mean, population_std, Matrix, Rng, Stream};
use crate::synthdata::Dataset;
use crate::thresholding::{self, ThresholdEstimate};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// `(epoch, factor)`: from that 0-based epoch on, divide the rate by `factor`.
    pub lr_schedule: Vec<(usize, f64)>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub threshold_momentum: f64,
    pub telemetry_every: usize,
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            epochs: 30,
            batch_size: 64,
            learning_rate: 0.01,
            lr_schedule: vec![(15, 10.0), (24, 10.0)],
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
            threshold_momentum: 0.0,
            telemetry_every: 1,
            hidden_dims: encoder::DEFAULT_HIDDEN.to_vec(),
            embed_dim: encoder::DEFAULT_EMBED_DIM,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.threshold_momentum) {
            return bad(format!("threshold_momentum must lie in [0, 1), got {}", self.threshold_momentum));
        }
        if self.lr_schedule.iter().any(|(_, f)| !(*f > 0.0)) {
            return bad("learning-rate schedule factors must be positive".into());
        }
        if self.telemetry_every == 0 {
            return bad("telemetry_every must be at least 1".into());
        }
        Ok(())
    }

    /// Learning rate in effect during 0-based `epoch`.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.lr_schedule
            .iter()
            .filter(|(e, _)| epoch >= *e)
            .fold(self.learning_rate, |lr, (_, f)| lr / f)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub encoder: EncoderParams,
    /// `d x c`, stored unnormalized; columns are normalized in the forward pass.
    pub class_weights: Matrix,
    pub encoder_velocity: ParamGrads,
    pub class_weight_velocity: Matrix,
    pub epoch: usize,
    pub iteration: u64,
    pub previous_threshold: Option<f64>,
    pub seed: u64,
    rng: Rng,
}

impl TrainState {
    pub fn init(dataset: &Dataset, cfg: &TrainConfig) -> Result<Self> {
        let encoder = EncoderParams::init(dataset.raw_dim(), &cfg.hidden_dims, cfg.embed_dim, cfg.seed)?;
        let c = dataset.num_classes();
        let mut wrng = Rng::stream(cfg.seed, Stream::ClassWeights);
        let raw = Matrix::new(cfg.embed_dim, c, wrng.standard_normal(cfg.embed_dim * c))?;
        let class_weights = l2_normalize_columns(&raw)?;
        Ok(Self {
            encoder_velocity: ParamGrads::zeros_like(&encoder),
            class_weight_velocity: Matrix::zeros(cfg.embed_dim, c),
            encoder,
            class_weights,
            epoch: 0,
            iteration: 0,
            previous_threshold: None,
            seed: cfg.seed,
            rng: Rng::stream(cfg.seed, Stream::Shuffle),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_weights.cols()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(self.encoder.clone(), Some(self.class_weights.clone()), self.seed, self.epoch, self.iteration)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryRecord {
    pub iteration: u64,
    pub epoch: usize,
    pub learning_rate: f64,
    pub loss: f64,
    pub t_u: f64,
    /// Fraction of the batch's non-target logits above `t_u`.
    pub realized_fpr: f64,
    /// Mean instance FPR of the batch samples in each group.
    pub group_instance_fpr: BTreeMap<String, f64>,
    pub mean_instance_fpr: f64,
    pub std_instance_fpr: f64,
    /// Fraction of samples with instance FPR > 0.
    pub fraction_nonzero_fpr: f64,
}

/// Per-iteration statistics from a batch's penalty state.
pub fn telemetry_snapshot(
    iteration: u64,
    epoch: usize,
    learning_rate: f64,
    loss: f64,
    penalty_state: &PenaltyState,
    group_labels: &[String],
) -> TelemetryRecord {
    let fprs = &penalty_state.instance_fpr;
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (g, f) in group_labels.iter().zip(fprs) {
        let e = sums.entry(g.clone()).or_default();
        e.0 += f;
        e.1 += 1;
    }
    let nonzero = fprs.iter().filter(|f| **f > 0.0).count();
    TelemetryRecord {
        iteration,
        epoch,
        learning_rate,
        loss,
        t_u: penalty_state.threshold.t_u,
        realized_fpr: penalty_state.threshold.realized_fpr,
        group_instance_fpr: sums.into_iter().map(|(g, (s, n))| (g, s / n as f64)).collect(),
        mean_instance_fpr: mean(fprs),
        std_instance_fpr: population_std(fprs),
        fraction_nonzero_fpr: if fprs.is_empty() { 0.0 } else { nonzero as f64 / fprs.len() as f64 },
    }
}

/// Aggregates over all iterations of one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_t_u: f64,
    pub mean_std_instance_fpr: f64,
    pub mean_fraction_nonzero_fpr: f64,
    /// Instance FPR averaged over every sample of the group seen this epoch.
    pub group_instance_fpr: BTreeMap<String, f64>,
    /// Population std of `group_instance_fpr` across groups.
    pub group_fpr_std: f64,
}

#[derive(Default)]
struct EpochAccumulator {
    losses: Vec<f64>,
    thresholds: Vec<f64>,
    stds: Vec<f64>,
    nonzero: Vec<f64>,
    group: BTreeMap<String, (f64, usize)>,
}

impl EpochAccumulator {
    fn push(&mut self, loss: f64, state: &PenaltyState, groups: &[String]) {
        let fprs = &state.instance_fpr;
        self.losses.push(loss);
        self.thresholds.push(state.threshold.t_u);
        self.stds.push(population_std(fprs));
        self.nonzero.push(fprs.iter().filter(|f| **f > 0.0).count() as f64 / fprs.len() as f64);
        for (g, f) in groups.iter().zip(fprs) {
            let e = self.group.entry(g.clone()).or_default();
            e.0 += f;
            e.1 += 1;
        }
    }

    fn finish(self, epoch: usize) -> EpochSummary {
        let group_instance_fpr: BTreeMap<String, f64> = self.group.into_iter().map(|(g, (s, n))| (g, s / n as f64)).collect();
        let rates: Vec<f64> = group_instance_fpr.values().copied().collect();
        EpochSummary {
            epoch,
            mean_loss: mean(&self.losses),
            mean_t_u: mean(&self.thresholds),
            mean_std_instance_fpr: mean(&self.stds),
            mean_fraction_nonzero_fpr: mean(&self.nonzero),
            group_fpr_std: population_std(&rates),
            group_instance_fpr,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub telemetry: Vec<TelemetryRecord>,
    pub epochs: Vec<EpochSummary>,
}

pub fn train(dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_observed(dataset, cfg, |_| {})
}

/// [`train`], handing each telemetry record to `observer` as it is produced,
/// so a caller still holds the records preceding a divergence.
pub fn train_observed(dataset: &Dataset, cfg: &TrainConfig, mut observer: impl FnMut(&TelemetryRecord)) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("training dataset is empty".into()));
    }
    if cfg.batch_size > dataset.len() {
        return Err(Error::InvalidArgument(format!(
            "batch_size {} exceeds dataset size {}",
            cfg.batch_size,
            dataset.len()
        )));
    }
    if dataset.num_classes() < 2 {
        return Err(Error::InvalidArgument("training needs at least 2 classes".into()));
    }
    let mut state = TrainState::init(dataset, cfg)?;
    let mut telemetry = Vec::new();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let batches_per_epoch = dataset.len() / cfg.batch_size;
    let mut order: Vec<usize> = (0..dataset.len()).collect();

    for epoch in 0..cfg.epochs {
        state.epoch = epoch;
        let lr = cfg.learning_rate_at(epoch);
        state.rng.shuffle(&mut order);
        let mut acc = EpochAccumulator::default();
        for b in 0..batches_per_epoch {
            let idx = &order[b * cfg.batch_size..(b + 1) * cfg.batch_size];
            let (loss, pstate) = step(&mut state, dataset, idx, cfg, lr)?;
            let groups: Vec<String> = idx.iter().map(|&i| dataset.group_labels[i].clone()).collect();
            acc.push(loss, &pstate, &groups);
            if state.iteration % cfg.telemetry_every as u64 == 0 {
                let rec = telemetry_snapshot(state.iteration, epoch, lr, loss, &pstate, &groups);
                observer(&rec);
                telemetry.push(rec);
            }
            state.iteration += 1;
        }
        epochs.push(acc.finish(epoch));
        state.epoch = epoch + 1;
    }
    Ok(TrainOutcome { state, telemetry, epochs })
}

/// One SGD iteration; returns the batch loss and the instance-FPR state.
fn step(state: &mut TrainState, dataset: &Dataset, idx: &[usize], cfg: &TrainConfig, lr: f64) -> Result<(f64, PenaltyState)> {
    let x = dataset.features.select_rows(idx);
    let labels: Vec<usize> = idx.iter().map(|&i| dataset.identity_labels[i]).collect();
    let diverged = |reason: String| Error::Diverged {
        iteration: state.iteration,
        reason,
    };

    let trace = encoder::forward(&state.encoder, &x).map_err(|e| diverged(e.to_string()))?;
    let w_hat = l2_normalize_columns(&state.class_weights).map_err(|e| diverged(e.to_string()))?;
    let batch = losses::cosine_logits(&trace.embeddings, &w_hat, &labels)?;

    let estimate = thresholding::estimate_threshold(&batch, cfg.loss.gamma_u)?;
    let t_u = thresholding::smoothed_threshold(state.previous_threshold, &estimate, cfg.threshold_momentum)?;
    state.previous_threshold = Some(t_u);
    let threshold = ThresholdEstimate {
        t_u,
        realized_fpr: realized_fraction(&batch, t_u, estimate.pool_size),
        ..estimate
    };

    let out = losses::loss_forward(&batch, &cfg.loss, Some(&threshold)).map_err(|e| diverged(e.to_string()))?;
    if !out.loss.is_finite() {
        return Err(diverged(format!("loss is {}", out.loss)));
    }
    let pstate = match out.penalty_state.clone() {
        Some(s) => s,
        None => losses::instance_fpr(&batch, &threshold, cfg.loss.p)?,
    };

    let (grad_w, grad_emb) = losses::classifier_grads(&trace.embeddings, &state.class_weights, &out.grad_wrt_cosines)?;
    let (grad_enc, _) = encoder::backward(&state.encoder, &trace, &grad_emb)?;

    let (mu, wd) = (cfg.momentum, cfg.weight_decay);
    sgd_update(&mut state.class_weights, &mut state.class_weight_velocity, &grad_w, lr, mu, wd);
    for l in 0..state.encoder.num_layers() {
        sgd_update(
            &mut state.encoder.layer_weights[l],
            &mut state.encoder_velocity.weights[l],
            &grad_enc.weights[l],
            lr,
            mu,
            wd,
        );
        for ((p, v), g) in state.encoder.layer_biases[l]
            .iter_mut()
            .zip(state.encoder_velocity.biases[l].iter_mut())
            .zip(&grad_enc.biases[l])
        {
            *v = mu * *v + g;
            *p -= lr * *v;
        }
    }
    if !state.class_weights.is_finite() || state.encoder.layer_weights.iter().any(|w| !w.is_finite()) {
        return Err(diverged("parameters became non-finite".into()));
    }
    Ok((out.loss, pstate))
}

fn realized_fraction(batch: &losses::LogitsBatch, t_u: f64, pool_size: usize) -> f64 {
    let above = thresholding::non_target_pool(batch).into_iter().filter(|v| *v > t_u).count();
    above as f64 / pool_size as f64
}

/// `v <- mu·v + g + wd·p`, `p <- p - lr·v`.
fn sgd_update(param: &mut Matrix, velocity: &mut Matrix, grad: &Matrix, lr: f64, mu: f64, wd: f64) {
    for ((p, v), g) in param.data_mut().iter_mut().zip(velocity.data_mut()).zip(grad.data()) {
        *v = mu * *v + g + wd * *p;
        *p -= lr * *v;
    }
}

/// Evaluation settings for [`evaluate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub max_pairs_per_group: usize,
    pub pair_seed: u64,
    pub roc_points: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            max_pairs_per_group: 50_000,
            pair_seed: 0,
            roc_points: 101,
        }
    }
}

/// Unit-norm embeddings of every sample of `dataset`.
pub fn embed_dataset(encoder: &EncoderParams, dataset: &Dataset) -> Result<Matrix> {
    encoder::embed(encoder, &dataset.features)
}

pub fn scores_for(encoder: &EncoderParams, dataset: &Dataset, opts: &EvalOptions) -> Result<metrics::GroupedScores> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("evaluation dataset is empty".into()));
    }
    let emb = embed_dataset(encoder, dataset)?;
    metrics::build_pairs(&emb, &dataset.identity_labels, &dataset.group_labels, opts.max_pairs_per_group, opts.pair_seed)
}

/// Embeds `eval_set`, builds grouped pairs and computes the full report at
/// each overall FPR level in `gammas`.
pub fn evaluate(encoder: &EncoderParams, eval_set: &Dataset, gammas: &[f64], opts: &EvalOptions) -> Result<FairnessReport> {
    if eval_set.raw_dim() != encoder.raw_dim() {
        return Err(Error::dims("evaluate input width", encoder.raw_dim(), eval_set.raw_dim()));
    }
    let scores = scores_for(encoder, eval_set, opts)?;
    metrics::fairness_report(&scores, gammas, opts.roc_points)
}
