//! First-order alternating optimisation of weights and architecture
//! parameters, and plain weight training of a discrete network.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{random_crop, StereoSample};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::rng;
use crate::stereo::{full_forward_in, StereoNet, SuperNet};
use crate::tensor::{ParamGroup, ParamId, ParamStore};
use crate::trellis::input_divisor;

#[derive(Clone, Debug, PartialEq)]
pub struct SearchSchedule {
    pub total_epochs: usize,
    /// Leading epochs that update weights only.
    pub warmup_epochs: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub arch_optimizer: ArchOptimizer,
    pub arch_lr: f64,
    /// Momentum for SGD, first-moment decay for Adam.
    pub arch_momentum: f64,
    pub crop: (usize, usize),
    pub batch_size: usize,
}

impl Default for SearchSchedule {
    fn default() -> Self {
        Self {
            total_epochs: 10,
            warmup_epochs: 3,
            lr_start: 0.025,
            lr_end: 0.001,
            momentum: 0.9,
            weight_decay: 3e-4,
            arch_optimizer: ArchOptimizer::Adam,
            arch_lr: 3e-3,
            arch_momentum: 0.9,
            crop: (24, 48),
            batch_size: 1,
        }
    }
}

impl SearchSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_epochs >= self.total_epochs {
            return Err(Error::Config(format!(
                "warm-up epochs ({}) must be fewer than total epochs ({})",
                self.warmup_epochs, self.total_epochs
            )));
        }
        check_lr(self.lr_start, self.lr_end)?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

fn check_lr(start: f64, end: f64) -> Result<()> {
    if !(end < start) || !(end >= 0.0) {
        return Err(Error::Config(format!(
            "learning rate must decay: start {start}, end {end}"
        )));
    }
    Ok(())
}

/// Cosine decay from `lr_start` at epoch 0 to `lr_end` at `total_epochs`.
/// Both endpoints are reproduced exactly.
pub fn cosine_lr(epoch: usize, total_epochs: usize, lr_start: f64, lr_end: f64) -> f64 {
    let w = 0.5 * (1.0 + (PI * epoch as f64 / total_epochs as f64).cos());
    lr_start * w + lr_end * (1.0 - w)
}

/// `v ← μ·v + g + λ·p; p ← p − lr·v`.
pub fn sgd_step(
    param: &mut [f64],
    grad: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if param.len() != grad.len() || param.len() != velocity.len() {
        return Err(Error::Shape(format!(
            "sgd step over {} values with {} gradients and {} velocities",
            param.len(),
            grad.len(),
            velocity.len()
        )));
    }
    for ((p, g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v + g + weight_decay * *p;
        *p -= lr * *v;
    }
    Ok(())
}

/// SGD with momentum over a fixed list of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub ids: Vec<ParamId>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(store: &ParamStore, ids: Vec<ParamId>, momentum: f64, weight_decay: f64) -> Self {
        let velocity = ids.iter().map(|&id| vec![0.0; store.tensor(id).numel()]).collect();
        Self {
            ids,
            momentum,
            weight_decay,
            velocity,
        }
    }

    /// Applies one step from the accumulated gradients, then clears them.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        for (k, &id) in self.ids.iter().enumerate() {
            let t = store.tensor_mut(id);
            let (values, grad) = t.split_grad();
            let zeros;
            let grad = match grad {
                Some(g) => g,
                None => {
                    zeros = vec![0.0; values.len()];
                    &zeros
                }
            };
            sgd_step(
                values,
                grad,
                &mut self.velocity[k],
                lr,
                self.momentum,
                self.weight_decay,
            )?;
            t.zero_grad();
        }
        Ok(())
    }
}

/// Update rule for α and β. Neither decays the logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArchOptimizer {
    Sgd,
    Adam,
}

impl fmt::Display for ArchOptimizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ArchOptimizer::Sgd => "sgd",
            ArchOptimizer::Adam => "adam",
        })
    }
}

impl FromStr for ArchOptimizer {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(ArchOptimizer::Sgd),
            "adam" => Ok(ArchOptimizer::Adam),
            _ => Err(Error::Config(format!("unknown architecture optimizer `{s}` (sgd|adam)"))),
        }
    }
}

const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Adam without weight decay. Its step length does not depend on the
/// gradient scale, which for β is tiny at toy resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub ids: Vec<ParamId>,
    pub beta1: f64,
    pub steps: u32,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, ids: Vec<ParamId>, beta1: f64) -> Self {
        let zeros: Vec<Vec<f64>> = ids.iter().map(|&id| vec![0.0; store.tensor(id).numel()]).collect();
        Self {
            ids,
            beta1,
            steps: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    /// Applies one bias-corrected step from the accumulated gradients, then
    /// clears them.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        self.steps += 1;
        let c1 = 1.0 - self.beta1.powi(self.steps as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(self.steps as i32);
        for (k, &id) in self.ids.iter().enumerate() {
            let t = store.tensor_mut(id);
            let (values, grad) = t.split_grad();
            if let Some(grad) = grad {
                let (m, v) = (&mut self.first[k], &mut self.second[k]);
                for i in 0..values.len() {
                    m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                    v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * grad[i] * grad[i];
                    values[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
                }
            }
            t.zero_grad();
        }
        Ok(())
    }
}

enum ArchStep {
    Sgd(Sgd),
    Adam(Adam),
}

impl ArchStep {
    fn new(store: &ParamStore, ids: Vec<ParamId>, schedule: &SearchSchedule) -> Self {
        match schedule.arch_optimizer {
            ArchOptimizer::Sgd => ArchStep::Sgd(Sgd::new(store, ids, schedule.arch_momentum, 0.0)),
            ArchOptimizer::Adam => ArchStep::Adam(Adam::new(store, ids, schedule.arch_momentum)),
        }
    }

    fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        match self {
            ArchStep::Sgd(o) => o.step(store, lr),
            ArchStep::Adam(o) => o.step(store, lr),
        }
    }
}

/// Index sets into a sample list: weights train on `train_i`, architecture
/// parameters on `train_ii`, and `held_out` is never touched by either.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitDataset {
    pub train_i: Vec<usize>,
    pub train_ii: Vec<usize>,
    pub held_out: Vec<usize>,
}

impl SplitDataset {
    /// Halves `train` (first half → `train_i`).
    pub fn halves(train: std::ops::Range<usize>, held_out: std::ops::Range<usize>) -> Result<Self> {
        let mid = train.start + train.len() / 2;
        let s = Self {
            train_i: (train.start..mid).collect(),
            train_ii: (mid..train.end).collect(),
            held_out: held_out.collect(),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_i.is_empty() || self.train_ii.is_empty() {
            return Err(Error::Dataset("both training subsets need samples".into()));
        }
        let mut all: Vec<usize> = self
            .train_i
            .iter()
            .chain(&self.train_ii)
            .chain(&self.held_out)
            .copied()
            .collect();
        all.sort_unstable();
        if all.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Dataset("dataset subsets overlap".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SearchMode {
    /// Feature and matching architecture parameters are updated together.
    Joint,
    /// The first half of the post-warm-up epochs updates the feature
    /// architecture only, the second half the matching architecture only.
    Separate,
}

impl FromStr for SearchMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "joint" => Ok(Self::Joint),
            "separate" => Ok(Self::Separate),
            _ => Err(format!("search mode must be `joint` or `separate`, got `{s}`")),
        }
    }
}

impl fmt::Display for SearchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Joint => "joint",
            Self::Separate => "separate",
        })
    }
}

/// One optimiser step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerRecord {
    pub epoch: usize,
    /// `warmup`, `weight`, `arch`, `arch_feature`, `arch_matching` or `train`.
    pub phase: String,
    pub batch: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Architecture parameters at the end of an epoch, by parameter name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchSnapshot {
    pub epoch: usize,
    pub params: Vec<(String, Vec<f64>)>,
}

impl ArchSnapshot {
    pub fn capture(store: &ParamStore, epoch: usize) -> Self {
        Self {
            epoch,
            params: store
                .iter()
                .filter(|(_, p)| p.group.is_arch())
                .map(|(_, p)| (p.name.clone(), p.tensor.values().to_vec()))
                .collect(),
        }
    }

    /// Writes the snapshot's values into a store with the same parameter names.
    pub fn restore(&self, store: &mut ParamStore) -> Result<()> {
        for (name, values) in &self.params {
            let id = store
                .find(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown architecture parameter `{name}`")))?;
            let t = store.tensor_mut(id);
            if t.numel() != values.len() {
                return Err(Error::Checkpoint(format!(
                    "`{name}` has {} values, snapshot has {}",
                    t.numel(),
                    values.len()
                )));
            }
            t.values_mut().copy_from_slice(values);
        }
        Ok(())
    }
}

/// Shuffled, cropped mini-batches of `indices` for one epoch.
fn epoch_batches(
    samples: &[StereoSample],
    indices: &[usize],
    crop: (usize, usize),
    batch_size: usize,
    seed: u64,
    epoch: usize,
    tag: u64,
) -> Result<Vec<Vec<StereoSample>>> {
    let mut order = indices.to_vec();
    order.shuffle(&mut rng::for_epoch(seed, rng::STREAM_SHUFFLE + (tag << 8), epoch));
    let mut crop_rng = rng::for_epoch(seed, rng::STREAM_CROP + (tag << 8), epoch);
    let div = input_divisor(crate::trellis::DOWNSAMPLING.len());
    let cropped = order
        .iter()
        .map(|&i| random_crop(&samples[i], crop.0, crop.1, div, &mut crop_rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(cropped.chunks(batch_size).map(<[StereoSample]>::to_vec).collect())
}

/// Forward, backward into the gradients of `groups`, and a finiteness check.
fn loss_and_grads(
    net: &impl StereoNet,
    store: &mut ParamStore,
    batch: &[StereoSample],
    groups: &[ParamGroup],
    max_disparity: usize,
    at: (usize, &str, usize),
) -> Result<f64> {
    let refs: Vec<&StereoSample> = batch.iter().collect();
    let pass = full_forward_in(Graph::with_trainable(groups), net, store, &refs, max_disparity)?;
    let loss = pass.loss_value();
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            epoch: at.0,
            phase: at.1.to_string(),
            batch: at.2,
        });
    }
    pass.graph.backward(pass.loss, store)?;
    Ok(loss)
}

/// Everything the search produces besides the updated store.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchOutcome {
    pub ledger: Vec<LedgerRecord>,
    pub history: Vec<ArchSnapshot>,
}

#[allow(clippy::too_many_arguments)]
pub fn bilevel_search(
    net: &SuperNet,
    store: &mut ParamStore,
    samples: &[StereoSample],
    split: &SplitDataset,
    schedule: &SearchSchedule,
    mode: SearchMode,
    max_disparity: usize,
    seed: u64,
    mut on_record: impl FnMut(&LedgerRecord) -> Result<()>,
) -> Result<SearchOutcome> {
    schedule.validate()?;
    split.validate()?;
    let weight_ids = store.ids_in(|g| g == ParamGroup::Weight);
    let mut w_opt = Sgd::new(store, weight_ids, schedule.momentum, schedule.weight_decay);
    let feature_arch = net.feature_arch_ids();
    let matching_arch = net.matching_arch_ids();
    let mut joint_opt = ArchStep::new(
        store,
        feature_arch.iter().chain(&matching_arch).copied().collect(),
        schedule,
    );
    let mut feature_opt = ArchStep::new(store, feature_arch, schedule);
    let mut matching_opt = ArchStep::new(store, matching_arch, schedule);
    let search_epochs = schedule.total_epochs - schedule.warmup_epochs;
    let mut outcome = SearchOutcome {
        ledger: Vec::new(),
        history: Vec::new(),
    };
    let mut record = |r: LedgerRecord, out: &mut SearchOutcome| -> Result<()> {
        on_record(&r)?;
        out.ledger.push(r);
        Ok(())
    };
    let weights = [ParamGroup::Weight];
    for epoch in 0..schedule.total_epochs {
        let lr = cosine_lr(epoch, schedule.total_epochs, schedule.lr_start, schedule.lr_end);
        let w_batches = epoch_batches(
            samples,
            &split.train_i,
            schedule.crop,
            schedule.batch_size,
            seed,
            epoch,
            0,
        )?;
        if epoch < schedule.warmup_epochs {
            for (b, batch) in w_batches.iter().enumerate() {
                let loss = loss_and_grads(net, store, batch, &weights, max_disparity, (epoch, "warmup", b))?;
                w_opt.step(store, lr)?;
                record(
                    LedgerRecord {
                        epoch,
                        phase: "warmup".into(),
                        batch: b,
                        loss,
                        lr,
                    },
                    &mut outcome,
                )?;
            }
        } else {
            let a_batches = epoch_batches(
                samples,
                &split.train_ii,
                schedule.crop,
                schedule.batch_size,
                seed,
                epoch,
                1,
            )?;
            let (phase, arch_groups, arch_opt): (&str, Vec<ParamGroup>, &mut ArchStep) = match mode {
                SearchMode::Joint => (
                    "arch",
                    vec![ParamGroup::FeatureArch, ParamGroup::MatchingArch],
                    &mut joint_opt,
                ),
                SearchMode::Separate if epoch - schedule.warmup_epochs < search_epochs.div_ceil(2) => {
                    ("arch_feature", vec![ParamGroup::FeatureArch], &mut feature_opt)
                }
                SearchMode::Separate => (
                    "arch_matching",
                    vec![ParamGroup::MatchingArch],
                    &mut matching_opt,
                ),
            };
            for b in 0..w_batches.len().max(a_batches.len()) {
                if let Some(batch) = w_batches.get(b) {
                    let loss = loss_and_grads(net, store, batch, &weights, max_disparity, (epoch, "weight", b))?;
                    w_opt.step(store, lr)?;
                    record(
                        LedgerRecord {
                            epoch,
                            phase: "weight".into(),
                            batch: b,
                            loss,
                            lr,
                        },
                        &mut outcome,
                    )?;
                }
                if let Some(batch) = a_batches.get(b) {
                    let loss = loss_and_grads(net, store, batch, &arch_groups, max_disparity, (epoch, phase, b))?;
                    arch_opt.step(store, schedule.arch_lr)?;
                    record(
                        LedgerRecord {
                            epoch,
                            phase: phase.into(),
                            batch: b,
                            loss,
                            lr: schedule.arch_lr,
                        },
                        &mut outcome,
                    )?;
                }
            }
        }
        outcome.history.push(ArchSnapshot::capture(store, epoch));
    }
    Ok(outcome)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub crop: (usize, usize),
    pub batch_size: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr_start: 0.025,
            lr_end: 0.001,
            momentum: 0.9,
            weight_decay: 3e-4,
            crop: (24, 48),
            batch_size: 1,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("training needs at least one epoch and batch".into()));
        }
        check_lr(self.lr_start, self.lr_end)
    }
}

/// Trains every weight of `net` on `indices` for epochs
/// `start_epoch..end_epoch`, continuing from `opt`'s velocity.
#[allow(clippy::too_many_arguments)]
pub fn train_weights(
    net: &impl StereoNet,
    store: &mut ParamStore,
    opt: &mut Sgd,
    samples: &[StereoSample],
    indices: &[usize],
    schedule: &TrainSchedule,
    epochs: std::ops::Range<usize>,
    max_disparity: usize,
    seed: u64,
    mut on_record: impl FnMut(&LedgerRecord) -> Result<()>,
) -> Result<Vec<LedgerRecord>> {
    schedule.validate()?;
    let mut ledger = Vec::new();
    for epoch in epochs {
        let lr = cosine_lr(epoch, schedule.epochs, schedule.lr_start, schedule.lr_end);
        let batches = epoch_batches(
            samples,
            indices,
            schedule.crop,
            schedule.batch_size,
            seed,
            epoch,
            2,
        )?;
        for (b, batch) in batches.iter().enumerate() {
            let loss = loss_and_grads(net, store, batch, &[ParamGroup::Weight], max_disparity, (epoch, "train", b))?;
            opt.step(store, lr)?;
            let r = LedgerRecord {
                epoch,
                phase: "train".into(),
                batch: b,
                loss,
                lr,
            };
            on_record(&r)?;
            ledger.push(r);
        }
    }
    Ok(ledger)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn cosine_endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0, 10, 0.025, 0.001), 0.025);
        assert_eq!(cosine_lr(10, 10, 0.025, 0.001), 0.001);
        assert!((cosine_lr(5, 10, 0.025, 0.001) - 0.013).abs() < 1e-15);
    }

    #[test]
    fn sgd_closed_forms() {
        let mut p = [1.0];
        let mut v = [0.0];
        sgd_step(&mut p, &[1.0], &mut v, 0.1, 0.0, 0.0).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-15);
        let mut p = [0.0];
        let mut v = [0.0];
        sgd_step(&mut p, &[1.0], &mut v, 0.1, 0.9, 0.0).unwrap();
        sgd_step(&mut p, &[1.0], &mut v, 0.1, 0.9, 0.0).unwrap();
        assert!((p[0] + 0.29).abs() < 1e-15);
        assert!(sgd_step(&mut p, &[1.0, 2.0], &mut v, 0.1, 0.9, 0.0).is_err());
    }

    #[test]
    fn adam_steps_by_lr_regardless_of_scale() {
        let mut store = ParamStore::new();
        let id = store.add("b", ParamGroup::MatchingArch, Tensor::zeros(vec![2]));
        let mut opt = Adam::new(&store, vec![id], 0.9);
        for _ in 0..3 {
            store.tensor_mut(id).accumulate_grad(&[1e-4, -10.0]);
            opt.step(&mut store, 0.01).unwrap();
        }
        let v = store.tensor(id).values();
        assert!((v[0] + 0.03).abs() < 1e-4 && (v[1] - 0.03).abs() < 1e-9);
        assert!(store.tensor(id).grad().unwrap().iter().all(|&g| g == 0.0));
        assert_eq!("adam".parse::<ArchOptimizer>().unwrap(), ArchOptimizer::Adam);
        assert!("rmsprop".parse::<ArchOptimizer>().is_err());
    }

    #[test]
    fn descends_a_quadratic_bowl() {
        let mut p = [3.0, -2.0];
        let mut v = [0.0; 2];
        let loss = |p: &[f64; 2]| p[0] * p[0] + 4.0 * p[1] * p[1];
        let mut last = loss(&p);
        for _ in 0..10 {
            let g = [2.0 * p[0], 8.0 * p[1]];
            // Overdamped on both axes: lr·8 < (1 − √0.9)².
            sgd_step(&mut p, &g, &mut v, 2e-4, 0.9, 0.0).unwrap();
            let now = loss(&p);
            assert!(now < last);
            last = now;
        }
    }

    #[test]
    fn weight_decay_pulls_toward_zero() {
        let mut p = [2.0];
        let mut v = [0.0];
        sgd_step(&mut p, &[0.0], &mut v, 0.1, 0.0, 0.5).unwrap();
        assert!((p[0] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn split_halves_are_disjoint() {
        let s = SplitDataset::halves(0..160, 160..200).unwrap();
        assert_eq!(s.train_i.len(), 80);
        assert_eq!(s.train_ii.len(), 80);
        assert_eq!(s.train_i.last(), Some(&79));
        assert_eq!(s.train_ii.first(), Some(&80));
        let overlap = SplitDataset {
            train_i: vec![0, 1],
            train_ii: vec![1, 2],
            held_out: vec![],
        };
        assert!(overlap.validate().is_err());
    }

    #[test]
    fn schedule_rejects_inverted_settings() {
        let mut s = SearchSchedule::default();
        s.warmup_epochs = 10;
        assert!(s.validate().is_err());
        let mut s = SearchSchedule::default();
        s.lr_end = 0.05;
        assert!(s.validate().is_err());
    }
}
