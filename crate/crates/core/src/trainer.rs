//! The semi-supervised loop: batch composition, the labeled and unlabeled
//! losses, warm-up, the learning-rate schedule and SGD.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{self, AugmentKey, AugmentKind, AugmentPlan, AugmentationPolicy};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{init_parameters, Mode, ModelConfig, ModelState};
use crate::rng;
use crate::ssl_core::{self, InstantiationConfig, Method, PseudoLabelOutcome, Strategy, UnlabeledTarget};
use crate::tensorlab::{log_softmax, BatchStats, softmax, LossTerm, Tape, Target, Tensor, Var};
use crate::views::{batch_tensor, VideoClip, ViewKind, ViewSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    /// Enabled views in order; the first must be RGB.
    pub views: Vec<ViewKind>,
    pub instantiation: InstantiationConfig,
    pub strategy: Strategy,
    /// Unlabeled clips per labeled clip in a batch.
    pub mu: usize,
    pub lambda_u: f64,
    pub epochs: usize,
    /// Leading epochs that see labeled data only.
    pub warmup_epochs: usize,
    pub lr_base: f64,
    pub lr_ramp_epochs: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Labeled clips per batch.
    pub batch_labeled: usize,
    pub seed: u64,
    pub crop: usize,
    pub flip_prob: f64,
    /// Evaluation protocol and cadence (0 evaluates after the last epoch only).
    pub eval: EvalProtocol,
    pub eval_every: usize,
    /// Run the pseudo-labeling pass with batch statistics and dropout instead
    /// of running statistics.
    pub weak_branch_train_mode: bool,
    pub bn_groups: BnGroups,
}

/// How a training batch is split into batch-norm batches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BnGroups {
    /// All rows share one set of batch statistics.
    Batch,
    /// One forward per view, each with its own batch statistics.
    View,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        TrainConfig {
            crop: model.height,
            views: ViewKind::ALL.to_vec(),
            instantiation: InstantiationConfig::new(Method::FixMatch),
            strategy: Strategy::aggregated(3, false),
            mu: 4,
            lambda_u: 1.0,
            epochs: 60,
            warmup_epochs: 0,
            lr_base: 0.8,
            lr_ramp_epochs: 34.0,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_labeled: 4,
            seed: 0,
            flip_prob: 0.5,
            eval: EvalProtocol::default(),
            eval_every: 0,
            weak_branch_train_mode: false,
            bn_groups: BnGroups::View,
            model,
        }
    }
}

/// Augmentation policies for the three branches, seeded from the run seed.
#[derive(Clone, Debug, PartialEq)]
pub struct Policies {
    pub labeled: AugmentationPolicy,
    pub unlabeled_weak: AugmentationPolicy,
    pub unlabeled_strong: AugmentationPolicy,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.instantiation.validate()?;
        self.strategy.validate(self.views.len())?;
        if self.views.first() != Some(&ViewKind::Rgb) {
            return Err(Error::Config("views must start with rgb".into()));
        }
        let mut seen = self.views.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.views.len() {
            return Err(Error::Config("views are listed twice".into()));
        }
        if self.epochs == 0 || self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "need W < epochs, got W = {} and {} epochs",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.batch_labeled == 0 {
            return Err(Error::Config("labeled batch size must be positive".into()));
        }
        if !(self.lambda_u >= 0.0 && self.lambda_u.is_finite()) {
            return Err(Error::Config("lambda_u must be non-negative".into()));
        }
        if !(self.lr_base > 0.0 && self.lr_ramp_epochs >= 0.0) {
            return Err(Error::Config("learning rate and ramp must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config("momentum must be in [0, 1) and weight decay non-negative".into()));
        }
        if self.model.height != self.crop || self.model.width != self.crop {
            return Err(Error::Config(format!(
                "model input {}x{} does not match crop {}",
                self.model.height, self.model.width, self.crop
            )));
        }
        self.eval.validate()?;
        self.policies().labeled.validate()
    }

    pub fn policies(&self) -> Policies {
        let make = |kind: AugmentKind, label: &str| {
            let mut p = match kind {
                AugmentKind::Strong => AugmentationPolicy::strong(self.crop, 0),
                _ => AugmentationPolicy::weak(self.crop, 0),
            };
            p.seed = rng::derive_seed(self.seed, label, &[]);
            p.flip_prob = self.flip_prob;
            p
        };
        let strong = match self.instantiation.method.learner_augmentation() {
            AugmentKind::Strong => make(AugmentKind::Strong, "unlabeled-strong"),
            _ => make(AugmentKind::Weak, "unlabeled-weak"),
        };
        Policies {
            labeled: make(AugmentKind::Weak, "labeled-weak"),
            unlabeled_weak: make(AugmentKind::Weak, "unlabeled-weak"),
            unlabeled_strong: strong,
        }
    }

    /// Number of batch-norm groups a training batch is split into.
    pub fn bn_group_count(&self) -> usize {
        match self.bn_groups {
            BnGroups::Batch => 1,
            BnGroups::View => self.views.len(),
        }
    }

    pub fn unlabeled_batch(&self) -> usize {
        self.mu * self.batch_labeled
    }
}

/// One clip as the trainer sees it. `label` on unlabeled examples is only
/// used for diagnostics.
#[derive(Clone, Copy, Debug)]
pub struct Example<'a> {
    pub id: u64,
    pub views: &'a ViewSet,
    pub label: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct TrainData<'a> {
    pub labeled: Vec<Example<'a>>,
    pub unlabeled: Vec<Example<'a>>,
}

impl<'a> TrainData<'a> {
    /// Labeled subset and the whole training split (as the unlabeled pool)
    /// of a dataset; `viewsets` is index-aligned with the dataset clips.
    pub fn from_dataset(ds: &Dataset, viewsets: &'a [ViewSet]) -> Self {
        let example = |i: usize| Example {
            id: ds.manifest.clips[i].id,
            views: &viewsets[i],
            label: Some(ds.label(i)),
        };
        TrainData {
            labeled: ds.manifest.labeled_indices().into_iter().map(example).collect(),
            unlabeled: ds.manifest.train_indices().into_iter().map(example).collect(),
        }
    }
}

/// Temporal window for training: a random `frames`-long window when the clip
/// is longer than the model input.
fn train_window(vs: &ViewSet, frames: usize, seed: u64, id: u64, step: u64) -> Result<ViewSet> {
    let t = vs.rgb.frames();
    if t == frames {
        return Ok(vs.clone());
    }
    if t < frames {
        return Err(Error::invalid(format!("clip {id} has {t} frames, model needs {frames}")));
    }
    let start = rng::stream(seed, "window", &[id, step]).gen_range(0..=t - frames);
    vs.map(|_, v| v.window(start, frames))
}

fn augmented_views(ex: &Example, cfg: &TrainConfig, policy: &AugmentationPolicy, step: u64) -> Result<Vec<VideoClip>> {
    let vs = train_window(ex.views, cfg.model.frames, cfg.seed, ex.id, step)?;
    let plan = augment::draw_plan(policy, vs.rgb.height(), vs.rgb.width(), AugmentKey { clip: ex.id, step })?;
    augment::augment_views(&vs, &cfg.views, &plan)
}

/// Weakly augmented inputs of a labeled batch, rows ordered clip-major, view-minor.
pub fn labeled_rows(batch: &[Example], cfg: &TrainConfig, step: u64) -> Result<(Vec<VideoClip>, Vec<usize>)> {
    let policy = cfg.policies().labeled;
    let mut rows = Vec::with_capacity(batch.len() * cfg.views.len());
    let mut labels = Vec::with_capacity(rows.capacity());
    for ex in batch {
        let label = ex
            .label
            .ok_or_else(|| Error::invalid(format!("labeled clip {} has no label", ex.id)))?;
        if label >= cfg.model.classes {
            return Err(Error::invalid(format!("label {label} outside [0, {})", cfg.model.classes)));
        }
        for v in augmented_views(ex, cfg, &policy, step)? {
            rows.push(v);
            labels.push(label);
        }
    }
    Ok((rows, labels))
}

/// Pseudo-labels for an unlabeled batch plus the learner-branch inputs.
#[derive(Clone, Debug)]
pub struct UnlabeledBatch {
    /// Learner inputs, clip-major, view-minor.
    pub rows: Vec<VideoClip>,
    pub targets: Vec<UnlabeledTarget>,
    pub outcomes: Vec<PseudoLabelOutcome>,
    /// Per view: pseudo-labels matching the hidden label, and how many had one.
    pub correct: Vec<usize>,
    pub with_truth: usize,
}

impl UnlabeledBatch {
    pub fn included(&self) -> usize {
        self.targets.iter().filter(|t| t.include).count()
    }
}

const PREDICT_CHUNK: usize = 64;

fn predict_rows(state: &ModelState, rows: &[VideoClip], cfg: &TrainConfig, step: u64) -> Result<Vec<Vec<f64>>> {
    if cfg.weak_branch_train_mode {
        // batch statistics couple the rows, so no chunking here
        let seed = rng::derive_seed(cfg.seed, "weak-dropout", &[step]);
        let groups = cfg.bn_group_count();
        let mut out = vec![Vec::new(); rows.len()];
        for g in 0..groups {
            let part: Vec<VideoClip> = rows.iter().skip(g).step_by(groups).cloned().collect();
            let seed = if groups == 1 { seed } else { rng::derive_seed(seed, "bn-group", &[g as u64]) };
            for (k, z) in forward_logits(state, &part, Mode::Train { seed })?.iter().enumerate() {
                out[k * groups + g] = softmax(z);
            }
        }
        return Ok(out);
    }
    let mut out = Vec::with_capacity(rows.len());
    for chunk in rows.chunks(PREDICT_CHUNK) {
        let refs: Vec<&VideoClip> = chunk.iter().collect();
        out.extend(state.predict_distribution(&batch_tensor(&refs)?)?);
    }
    Ok(out)
}

/// Weak views, eval-mode predictions, strategy, targets. The prediction pass
/// records nothing for backpropagation and runs in eval mode unless
/// `weak_branch_train_mode` is set.
pub fn pseudo_label_batch(state: &ModelState, batch: &[Example], cfg: &TrainConfig, step: u64) -> Result<UnlabeledBatch> {
    let m = cfg.views.len();
    let policies = cfg.policies();
    let learner_weak = cfg.instantiation.method.learner_augmentation() == AugmentKind::Weak;
    let mut weak_rows = Vec::with_capacity(batch.len() * m);
    let mut rows = Vec::with_capacity(batch.len() * m);
    for ex in batch {
        let vs = train_window(ex.views, cfg.model.frames, cfg.seed, ex.id, step)?;
        let (h, w) = (vs.rgb.height(), vs.rgb.width());
        let key = AugmentKey { clip: ex.id, step };
        let weak_plan = augment::draw_plan(&policies.unlabeled_weak, h, w, key)?;
        let weak = augment::augment_views(&vs, &cfg.views, &weak_plan)?;
        if learner_weak {
            rows.extend(weak.iter().cloned());
        } else {
            let plan: AugmentPlan = augment::draw_plan(&policies.unlabeled_strong, h, w, key)?;
            rows.extend(augment::augment_views(&vs, &cfg.views, &plan)?);
        }
        weak_rows.extend(weak);
    }
    let preds = predict_rows(state, &weak_rows, cfg, step)?;
    let mut targets = Vec::with_capacity(rows.len());
    let mut outcomes = Vec::with_capacity(batch.len());
    let mut correct = vec![0; m];
    let mut with_truth = 0;
    for (i, ex) in batch.iter().enumerate() {
        let q = &preds[i * m..(i + 1) * m];
        let draw = rng::derive_seed(cfg.seed, "pseudo-label", &[ex.id, step]);
        let outcome = ssl_core::generate_pseudolabels(q, &cfg.strategy, cfg.instantiation.tau, draw)?;
        targets.extend(ssl_core::unlabeled_targets(&outcome, &cfg.instantiation)?);
        if let Some(y) = ex.label {
            with_truth += 1;
            for (v, pl) in outcome.views.iter().enumerate() {
                correct[v] += usize::from(pl.label == y);
            }
        }
        outcomes.push(outcome);
    }
    Ok(UnlabeledBatch {
        rows,
        targets,
        outcomes,
        correct,
        with_truth,
    })
}

/// Cross-entropy of one row of logits against a target.
pub fn row_cross_entropy(logits: &[f64], target: &Target) -> f64 {
    let ls = log_softmax(logits);
    match target {
        Target::Class(k) => -ls[*k],
        Target::Soft(t) => -t.iter().zip(&ls).map(|(a, b)| if *a == 0.0 { 0.0 } else { a * b }).sum::<f64>(),
    }
}

fn forward_logits(state: &ModelState, rows: &[VideoClip], mode: Mode) -> Result<Vec<Vec<f64>>> {
    if rows.is_empty() {
        return Ok(Vec::new());
    }
    let refs: Vec<&VideoClip> = rows.iter().collect();
    let mut tape = Tape::no_grad();
    let pass = state.forward(&mut tape, &batch_tensor(&refs)?, mode)?;
    let c = state.config.classes;
    Ok(tape.value(pass.logits).data().chunks(c).map(<[f64]>::to_vec).collect())
}

/// `1/(N_l M) sum_i sum_m H(y_i, f(A(x_i^m)))` for one labeled batch.
pub fn supervised_loss(state: &ModelState, batch: &[Example], cfg: &TrainConfig, step: u64, mode: Mode) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("empty labeled batch"));
    }
    let (rows, labels) = labeled_rows(batch, cfg, step)?;
    let logits = forward_logits(state, &rows, mode)?;
    let total: f64 = logits
        .iter()
        .zip(&labels)
        .map(|(z, &y)| row_cross_entropy(z, &Target::Class(y)))
        .sum();
    Ok(total / rows.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnsupervisedLoss {
    pub loss: f64,
    pub included: usize,
    pub total: usize,
}

impl UnsupervisedLoss {
    pub fn mask_rate(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.included as f64 / self.total as f64
        }
    }
}

/// `1/(mu N_l M) sum_i sum_m 1[max s >= tau] H(target, f(A_hat(u_i^m)))`.
pub fn unsupervised_loss(state: &ModelState, batch: &[Example], cfg: &TrainConfig, step: u64, mode: Mode) -> Result<UnsupervisedLoss> {
    let ub = pseudo_label_batch(state, batch, cfg, step)?;
    let logits = forward_logits(state, &ub.rows, mode)?;
    let sum: f64 = logits
        .iter()
        .zip(&ub.targets)
        .filter(|(_, t)| t.include)
        .map(|(z, t)| row_cross_entropy(z, &t.target))
        .sum();
    let total = ub.rows.len();
    Ok(UnsupervisedLoss {
        loss: if total == 0 { 0.0 } else { sum / total as f64 },
        included: ub.included(),
        total,
    })
}

/// Linear ramp to `eta` over `n_ramp` iterations, then the half-period cosine.
pub fn lr_at(n: usize, n_max: usize, n_ramp: usize, eta: f64) -> f64 {
    if n < n_ramp {
        eta * (n + 1) as f64 / n_ramp as f64
    } else {
        eta * 0.5 * ((n as f64 / n_max as f64 * std::f64::consts::PI).cos() + 1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub eta: f64,
    pub iters_per_epoch: usize,
    pub n_ramp: usize,
    pub n_max: usize,
}

impl Schedule {
    pub fn new(cfg: &TrainConfig, labeled: usize) -> Self {
        let iters_per_epoch = labeled.div_ceil(cfg.batch_labeled).max(1);
        Schedule {
            eta: cfg.lr_base,
            iters_per_epoch,
            n_ramp: (cfg.lr_ramp_epochs * iters_per_epoch as f64).round() as usize,
            n_max: cfg.epochs * iters_per_epoch,
        }
    }

    pub fn lr(&self, n: usize) -> f64 {
        lr_at(n.min(self.n_max), self.n_max, self.n_ramp, self.eta)
    }
}

/// SGD with momentum. Weight decay is added to the step (not folded into
/// the momentum buffer) and only for tensors flagged as decaying.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(state: &ModelState, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: state.parameters().iter().map(|(t, _)| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn step(&mut self, state: &mut ModelState, grads: &[Tensor], lr: f64) -> Result<()> {
        let decay: Vec<bool> = state.parameters().iter().map(|(_, d)| *d).collect();
        let params = state.parameters_mut();
        if grads.len() != params.len() {
            return Err(Error::invalid(format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let wd = if decay[i] { self.weight_decay } else { 0.0 };
            let v = &mut self.velocity[i];
            for ((w, g), v) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                *v = self.momentum * *v + g;
                *w -= lr * (*v + wd * *w);
            }
        }
        Ok(())
    }
}

/// Model plus optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: ModelState,
    pub optimizer: Sgd,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let model = init_parameters(&cfg.model, rng::derive_seed(cfg.seed, "init", &[]))?;
        let optimizer = Sgd::new(&model, cfg.momentum, cfg.weight_decay);
        Ok(TrainState { model, optimizer })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub step: u64,
    pub lr: f64,
    pub loss_s: f64,
    pub loss_u: f64,
    pub loss_total: f64,
    /// Included unlabeled (clip, view) pairs over all pairs; `None` without an unlabeled pass.
    pub mask_rate: Option<f64>,
    /// Per view: pseudo-label accuracy against the hidden labels.
    pub view_accuracy: Vec<Option<f64>>,
    pub(crate) counts: (usize, usize, Vec<usize>, usize),
}

/// Labeled batch `b` of `epoch`: the epoch's shuffled order, wrapping around
/// so every batch has exactly `N_l` clips.
fn labeled_batch<'a>(data: &TrainData<'a>, cfg: &TrainConfig, epoch: usize, b: usize) -> Vec<Example<'a>> {
    let mut order: Vec<usize> = (0..data.labeled.len()).collect();
    order.shuffle(&mut rng::stream(cfg.seed, "labeled-order", &[epoch as u64]));
    (0..cfg.batch_labeled)
        .map(|j| data.labeled[order[(b * cfg.batch_labeled + j) % order.len()]])
        .collect()
}

/// Unlabeled batch for global step `n`: consecutive slices of a pool order
/// reshuffled on every pass.
fn unlabeled_batch<'a>(data: &TrainData<'a>, cfg: &TrainConfig, n: usize) -> Vec<Example<'a>> {
    let size = cfg.unlabeled_batch();
    let pool = data.unlabeled.len();
    let mut cached: Option<(usize, Vec<usize>)> = None;
    (0..size)
        .map(|j| {
            let pos = n * size + j;
            let pass = pos / pool;
            if cached.as_ref().is_none_or(|(p, _)| *p != pass) {
                let mut order: Vec<usize> = (0..pool).collect();
                order.shuffle(&mut rng::stream(cfg.seed, "unlabeled-order", &[pass as u64]));
                cached = Some((pass, order));
            }
            data.unlabeled[cached.as_ref().expect("just set").1[pos % pool]]
        })
        .collect()
}

/// Inputs and weighted loss terms of one training batch, fixed before the
/// forward pass.
#[derive(Clone, Debug)]
pub struct StepBatch {
    pub rows: Vec<VideoClip>,
    pub terms: Vec<LossTerm>,
    /// Rows `..labeled` are labeled; the rest are unlabeled learner inputs.
    pub labeled: usize,
    pub unlabeled: Option<UnlabeledBatch>,
}

/// Composes the batch of global iteration `n`: `N_l` labeled clips and, once
/// warm-up is over, `mu N_l` unlabeled clips with their pseudo-labels.
pub fn compose_batch(state: &ModelState, data: &TrainData, cfg: &TrainConfig, epoch: usize, n: usize, schedule: &Schedule) -> Result<StepBatch> {
    let step = n as u64;
    let labeled = labeled_batch(data, cfg, epoch, n % schedule.iters_per_epoch);
    let (mut rows, labels) = labeled_rows(&labeled, cfg, step)?;
    let n_sup = rows.len();
    let weight_s = 1.0 / n_sup as f64;
    let mut terms: Vec<LossTerm> = labels
        .iter()
        .enumerate()
        .map(|(r, &y)| LossTerm {
            row: r,
            target: Target::Class(y),
            weight: weight_s,
        })
        .collect();
    let mut unlabeled = None;
    if epoch >= cfg.warmup_epochs && cfg.mu > 0 && !data.unlabeled.is_empty() {
        let batch = unlabeled_batch(data, cfg, n);
        let ub = pseudo_label_batch(state, &batch, cfg, step)?;
        let weight_u = cfg.lambda_u / ub.rows.len() as f64;
        for (k, t) in ub.targets.iter().enumerate() {
            if t.include {
                terms.push(LossTerm {
                    row: n_sup + k,
                    target: t.target.clone(),
                    weight: weight_u,
                });
            }
        }
        rows.extend(ub.rows.iter().cloned());
        unlabeled = Some(ub);
    }
    Ok(StepBatch {
        rows,
        terms,
        labeled: n_sup,
        unlabeled,
    })
}

/// Train-mode loss of a composed batch, its gradients in parameter order,
/// the per-row logits and the batch-norm statistics.
pub struct BatchLoss {
    pub loss: f64,
    pub grads: Vec<Tensor>,
    pub logits: Vec<Vec<f64>>,
    /// Per BN group, per batch-norm layer.
    pub batch_stats: Vec<Vec<BatchStats>>,
}

pub fn batch_loss(state: &ModelState, batch: &StepBatch, groups: usize, dropout_seed: u64) -> Result<BatchLoss> {
    if groups == 0 || !batch.rows.len().is_multiple_of(groups) {
        return Err(Error::invalid("rows do not split into BN groups"));
    }
    let c = state.config.classes;
    let mut tape = Tape::new();
    let mut total: Option<Var> = None;
    let mut passes = Vec::with_capacity(groups);
    for g in 0..groups {
        // row r belongs to group r % groups; rows are view-minor
        let refs: Vec<&VideoClip> = batch.rows.iter().skip(g).step_by(groups).collect();
        let terms: Vec<LossTerm> = batch
            .terms
            .iter()
            .filter(|t| t.row % groups == g)
            .map(|t| LossTerm {
                row: t.row / groups,
                ..t.clone()
            })
            .collect();
        let seed = if groups == 1 { dropout_seed } else { rng::derive_seed(dropout_seed, "bn-group", &[g as u64]) };
        let pass = state.forward(&mut tape, &batch_tensor(&refs)?, Mode::Train { seed })?;
        let loss = tape.cross_entropy_terms(pass.logits, &terms)?;
        total = Some(match total {
            Some(t) => tape.add(t, loss)?,
            None => loss,
        });
        passes.push(pass);
    }
    let loss = total.expect("at least one group");
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite("training loss"));
    }
    let mut grads = tape.backward(loss)?;
    let mut summed: Vec<Tensor> = Vec::new();
    for pass in &passes {
        for (i, &p) in pass.params.iter().enumerate() {
            let g = grads.take(p).ok_or_else(|| Error::invalid("missing parameter gradient"))?;
            match summed.get_mut(i) {
                Some(acc) => acc.add_assign(&g),
                None => summed.push(g),
            }
        }
    }
    let mut logits = vec![Vec::new(); batch.rows.len()];
    for (g, pass) in passes.iter().enumerate() {
        for (k, row) in tape.value(pass.logits).data().chunks(c).enumerate() {
            logits[k * groups + g] = row.to_vec();
        }
    }
    Ok(BatchLoss {
        loss: value,
        grads: summed,
        logits,
        batch_stats: passes.into_iter().map(|p| p.batch_stats).collect(),
    })
}

/// Layer-wise mean of the statistics of each BN group, so the running
/// estimates track every view equally.
fn mean_stats(groups: &[Vec<BatchStats>]) -> Vec<BatchStats> {
    let k = groups.len() as f64;
    (0..groups[0].len())
        .map(|layer| {
            let avg = |f: fn(&BatchStats) -> &Vec<f64>| {
                let mut acc = vec![0.0; f(&groups[0][layer]).len()];
                for g in groups {
                    for (a, v) in acc.iter_mut().zip(f(&g[layer])) {
                        *a += v / k;
                    }
                }
                acc
            };
            BatchStats {
                mean: avg(|s| &s.mean),
                var: avg(|s| &s.var),
            }
        })
        .collect()
}

/// One SGD step on global iteration `n`.
pub fn train_step(state: &mut TrainState, data: &TrainData, cfg: &TrainConfig, epoch: usize, n: usize, schedule: &Schedule) -> Result<LossReport> {
    let step = n as u64;
    let m = cfg.views.len();
    let batch = compose_batch(&state.model, data, cfg, epoch, n, schedule)?;
    let out = batch_loss(&state.model, &batch, cfg.bn_group_count(), rng::derive_seed(cfg.seed, "dropout", &[step]))?;
    let n_sup = batch.labeled;
    let loss_s = batch.terms[..n_sup]
        .iter()
        .map(|t| row_cross_entropy(&out.logits[t.row], &t.target))
        .sum::<f64>()
        / n_sup as f64;
    let (loss_u, mask_rate, view_accuracy, counts) = match &batch.unlabeled {
        Some(ub) => {
            let sum: f64 = batch.terms[n_sup..]
                .iter()
                .map(|t| row_cross_entropy(&out.logits[t.row], &t.target))
                .sum();
            let acc = ub
                .correct
                .iter()
                .map(|&k| (ub.with_truth > 0).then(|| k as f64 / ub.with_truth as f64))
                .collect();
            (
                sum / ub.rows.len() as f64,
                Some(ub.included() as f64 / ub.rows.len() as f64),
                acc,
                (ub.included(), ub.rows.len(), ub.correct.clone(), ub.with_truth),
            )
        }
        None => (0.0, None, vec![None; m], (0, 0, vec![0; m], 0)),
    };
    let lr = schedule.lr(n);
    state.optimizer.step(&mut state.model, &out.grads, lr)?;
    state.model.update_running_stats(&mean_stats(&out.batch_stats));
    state.model.step += 1;
    Ok(LossReport {
        step,
        lr,
        loss_s,
        loss_u,
        loss_total: loss_s + cfg.lambda_u * loss_u,
        mask_rate,
        view_accuracy,
        counts,
    })
}

/// All iterations of `epoch` (epochs count passes over the labeled data).
pub fn train_epoch(state: &mut TrainState, data: &TrainData, cfg: &TrainConfig, epoch: usize) -> Result<Vec<LossReport>> {
    if data.labeled.is_empty() {
        return Err(Error::invalid("no labeled training clips"));
    }
    let schedule = Schedule::new(cfg, data.labeled.len());
    (0..schedule.iters_per_epoch)
        .map(|b| train_step(state, data, cfg, epoch, epoch * schedule.iters_per_epoch + b, &schedule))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalProtocol {
    /// Temporal clips per video.
    pub clips: usize,
    /// Spatial crops per clip.
    pub crops: usize,
    /// Shorter side is resized to `scale * crop` before cropping.
    pub scale: f64,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        EvalProtocol {
            clips: 2,
            crops: 1,
            scale: 256.0 / 224.0,
        }
    }
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.clips == 0 || self.crops == 0 || !(self.scale >= 1.0) {
            return Err(Error::Config("evaluation needs clips, crops >= 1 and scale >= 1".into()));
        }
        Ok(())
    }
}

/// Anything that maps a `[N, T, H, W, C]` batch to class distributions.
pub trait Predictor {
    fn predict(&self, batch: &Tensor) -> Result<Vec<Vec<f64>>>;
}

impl Predictor for ModelState {
    fn predict(&self, batch: &Tensor) -> Result<Vec<Vec<f64>>> {
        self.predict_distribution(batch)
    }
}

/// Mean of the distributions and its argmax (lowest index on ties).
pub fn aggregate_predictions(preds: &[Vec<f64>]) -> (Vec<f64>, usize) {
    let mut mean = vec![0.0; preds[0].len()];
    for p in preds {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v / preds.len() as f64;
        }
    }
    let k = ssl_core::argmax(&mean);
    (mean, k)
}

/// Evaluation inputs for one video: `clips` evenly spaced windows times
/// `crops` spatial crops.
pub fn eval_inputs(video: &VideoClip, frames: usize, crop: usize, protocol: &EvalProtocol) -> Result<Vec<VideoClip>> {
    let t = video.frames();
    if t < frames {
        return Err(Error::invalid(format!("video {} has {t} frames, model needs {frames}", video.id)));
    }
    let span = t - frames;
    let mut out = Vec::with_capacity(protocol.clips * protocol.crops);
    for i in 0..protocol.clips {
        let start = if protocol.clips == 1 {
            span / 2
        } else {
            (i as f64 * span as f64 / (protocol.clips - 1) as f64).round() as usize
        };
        let w = video.window(start, frames)?;
        out.extend(augment::eval_crops(&w, crop, protocol.crops, protocol.scale)?);
    }
    Ok(out)
}

/// Top-1 accuracy over labeled RGB videos.
pub fn evaluate<P: Predictor>(model: &P, videos: &[(&VideoClip, usize)], frames: usize, crop: usize, protocol: &EvalProtocol) -> Result<f64> {
    protocol.validate()?;
    if videos.is_empty() {
        return Err(Error::invalid("empty evaluation set"));
    }
    let per_video = protocol.clips * protocol.crops;
    let mut correct = 0;
    let group = (PREDICT_CHUNK / per_video).max(1);
    for chunk in videos.chunks(group) {
        let mut rows = Vec::with_capacity(chunk.len() * per_video);
        for (v, _) in chunk {
            rows.extend(eval_inputs(v, frames, crop, protocol)?);
        }
        let refs: Vec<&VideoClip> = rows.iter().collect();
        let preds = model.predict(&batch_tensor(&refs)?)?;
        for (i, (_, label)) in chunk.iter().enumerate() {
            let (_, k) = aggregate_predictions(&preds[i * per_video..(i + 1) * per_video]);
            correct += usize::from(k == *label);
        }
    }
    Ok(correct as f64 / videos.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub loss_s: f64,
    pub loss_u: f64,
    pub mask_rate: Option<f64>,
    pub view_accuracy: Vec<Option<f64>>,
    pub top1: Option<f64>,
}

impl EpochMetrics {
    fn from_reports(epoch: usize, reports: &[LossReport], m: usize) -> Self {
        let n = reports.len() as f64;
        let (mut inc, mut tot, mut correct, mut truth) = (0, 0, vec![0; m], 0);
        for r in reports {
            inc += r.counts.0;
            tot += r.counts.1;
            for (c, k) in correct.iter_mut().zip(&r.counts.2) {
                *c += k;
            }
            truth += r.counts.3;
        }
        EpochMetrics {
            epoch,
            lr: reports.first().map_or(0.0, |r| r.lr),
            loss_s: reports.iter().map(|r| r.loss_s).sum::<f64>() / n,
            loss_u: reports.iter().map(|r| r.loss_u).sum::<f64>() / n,
            mask_rate: (tot > 0).then(|| inc as f64 / tot as f64),
            view_accuracy: correct
                .iter()
                .map(|&k| (truth > 0).then(|| k as f64 / truth as f64))
                .collect(),
            top1: None,
        }
    }
}

pub fn metrics_header(views: &[ViewKind]) -> String {
    let mut h = String::from("epoch,lr,loss_s,loss_u,mask_rate");
    for v in views {
        let _ = write!(h, ",pl_acc_{}", v.name());
    }
    h.push_str(",top1");
    h
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn metrics_row(m: &EpochMetrics) -> String {
    let mut row = format!("{},{},{},{},{}", m.epoch, m.lr, m.loss_s, m.loss_u, opt(m.mask_rate));
    for a in &m.view_accuracy {
        let _ = write!(row, ",{}", opt(*a));
    }
    let _ = write!(row, ",{}", opt(m.top1));
    row
}

pub fn metrics_csv(views: &[ViewKind], rows: &[EpochMetrics]) -> String {
    let mut out = metrics_header(views);
    out.push('\n');
    for r in rows {
        out.push_str(&metrics_row(r));
        out.push('\n');
    }
    out
}

/// Full run: fresh state, `cfg.epochs` epochs, periodic evaluation on `eval`.
/// `on_epoch` sees every finished epoch.
pub fn train(
    cfg: &TrainConfig,
    data: &TrainData,
    eval: &[(&VideoClip, usize)],
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<(TrainState, Vec<EpochMetrics>)> {
    cfg.validate()?;
    let mut state = TrainState::new(cfg)?;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let reports = train_epoch(&mut state, data, cfg, epoch)?;
        let mut metrics = EpochMetrics::from_reports(epoch, &reports, cfg.views.len());
        let last = epoch + 1 == cfg.epochs;
        let due = cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0;
        if !eval.is_empty() && (last || due) {
            metrics.top1 = Some(evaluate(&state.model, eval, cfg.model.frames, cfg.crop, &cfg.eval)?);
        }
        on_epoch(&metrics);
        history.push(metrics);
    }
    Ok((state, history))
}
