//! Loss-trapped training, backdoor isolation, and gradient-ascent unlearning.
//!
//! All training modes run through one mini-batch engine that differs only in
//! how it assigns per-example loss weights:
//!
//! - standard training uses weight +1 everywhere,
//! - local gradient ascent (LGA) uses `sign(loss - gamma)`, trapping every
//!   example's loss near `gamma` and letting only the easily-learned
//!   (poisoned) examples escape downward,
//! - global gradient ascent (GGA) uses +1 on the kept set and -1 on the
//!   isolated set, unlearning whatever the isolated examples have in common.
//!
//! After every epoch the engine runs a frozen full-dataset evaluation pass
//! and records each example's loss, which drives isolation and all of the
//! training-dynamics analyses.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{self, Report};
use crate::nn::{self, Network, OptimizerState};
use crate::rng::{derive_seed, Rng};
use crate::util::ceil_rate;
use crate::attacks::{build_backdoor_testset, PoisonSpec};

/// Per-epoch learning-rate table plus the fixed optimizer hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub lr_table: Vec<f64>,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl TrainSchedule {
    pub fn constant(epochs: usize, lr: f64, batch_size: usize, seed: u64) -> Self {
        Self {
            lr_table: vec![lr; epochs],
            batch_size,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed,
        }
    }

    /// Step schedule: base learning rate divided by 10 at 20% and at 70% of
    /// the budget, the classic two-milestone recipe scaled to `epochs`.
    pub fn with_milestones(epochs: usize, base_lr: f64, batch_size: usize, seed: u64) -> Self {
        let table = milestone_lr_table(epochs, base_lr);
        Self {
            lr_table: table,
            batch_size,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed,
        }
    }

    pub fn epochs(&self) -> usize {
        self.lr_table.len()
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        if self.lr_table.iter().any(|&lr| lr <= 0.0) {
            return Err(Error::config("all learning rates must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("weight decay must be non-negative"));
        }
        Ok(())
    }
}

/// Divide-by-10 milestones at 20% and 70% of the budget.
pub fn milestone_lr_table(epochs: usize, base_lr: f64) -> Vec<f64> {
    let first = epochs as f64 * 0.2;
    let second = epochs as f64 * 0.7;
    (0..epochs)
        .map(|e| {
            let e = e as f64;
            if e >= second {
                base_lr / 100.0
            } else if e >= first {
                base_lr / 10.0
            } else {
                base_lr
            }
        })
        .collect()
}

/// Per-example, per-epoch record of frozen evaluation losses.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTrace {
    ids: Vec<u64>,
    epochs: Vec<Vec<f64>>,
}

impl LossTrace {
    pub fn new(ids: Vec<u64>) -> Self {
        Self {
            ids,
            epochs: Vec::new(),
        }
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn epochs_recorded(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    /// Losses of one epoch, paired with example ids.
    pub fn epoch_pairs(&self, epoch: usize) -> Vec<(u64, f64)> {
        self.ids
            .iter()
            .copied()
            .zip(self.epochs[epoch].iter().copied())
            .collect()
    }

    pub fn last_epoch_pairs(&self) -> Option<Vec<(u64, f64)>> {
        if self.epochs.is_empty() {
            None
        } else {
            Some(self.epoch_pairs(self.epochs.len() - 1))
        }
    }

    pub(crate) fn push_epoch(&mut self, losses: Vec<f64>) {
        debug_assert_eq!(losses.len(), self.ids.len());
        self.epochs.push(losses);
    }

    /// Appends all epochs of another trace over the same ids.
    pub fn extend(&mut self, other: &LossTrace) -> Result<()> {
        if other.ids != self.ids {
            return Err(Error::config("cannot extend a trace over different ids"));
        }
        self.epochs.extend(other.epochs.iter().cloned());
        Ok(())
    }
}

/// Mean of `sign(loss_i - gamma) * loss_i` with `sign(0) = +1`: the
/// loss-trapping objective evaluated on a batch of losses.
pub fn lga_loss_value(per_example_losses: &[f64], gamma: f64) -> f64 {
    if per_example_losses.is_empty() {
        return 0.0;
    }
    per_example_losses
        .iter()
        .map(|&l| if l < gamma { -l } else { l })
        .sum::<f64>()
        / per_example_losses.len() as f64
}

/// Per-example weight assignment for one engine pass.
enum WeightRule {
    /// All weights +1: plain cross-entropy descent. The engine skips the
    /// extra per-batch forward pass in this mode; the parameter trajectory
    /// is identical to a trap rule with gamma = 0.
    Plain,
    /// `sign(loss - gamma)` with `sign(0) = +1`.
    TrapSign { gamma: f64 },
    /// Signed subset-mean weights realizing `E_kept[loss] - E_isolated[loss]`
    /// over mixed mini-batches. Ascent is frozen to 0 while an example's
    /// loss exceeds `ceiling` (it resumes if the loss falls back below).
    Signed {
        negative_ids: BTreeSet<u64>,
        ceiling: Option<f64>,
        scheme: GgaWeights,
        /// Full-dataset subset sizes, used by the expectation scheme.
        kept_total: usize,
        isolated_total: usize,
    },
}

/// How the two subset means of the unlearning objective are realized as
/// per-example weights inside a mixed mini-batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GgaWeights {
    /// Per-batch stratification: with `k` isolated members in a batch of
    /// `m`, isolated examples weigh `-m/k` and the rest `+m/(m-k)`. Each
    /// batch is its own unbiased-per-subset estimate and the ascent kick
    /// stays bounded by the learning rate.
    Stratified,
    /// Fixed dataset-level weights `+n/|kept|` and `-n/|isolated|`. Every
    /// isolated example carries its full expectation share on each visit,
    /// which makes single-batch ascent kicks large when the isolated set is
    /// small.
    Expectation,
}

impl WeightRule {
    fn needs_losses(&self) -> bool {
        match self {
            WeightRule::Plain => false,
            WeightRule::TrapSign { .. } => true,
            WeightRule::Signed { ceiling, .. } => ceiling.is_some(),
        }
    }

    /// Per-batch weights. `losses` is present iff [`Self::needs_losses`].
    fn batch_weights(&self, ids: &[u64], losses: Option<&[f64]>) -> Vec<f64> {
        match self {
            WeightRule::Plain => vec![1.0; ids.len()],
            WeightRule::TrapSign { gamma } => losses
                .expect("trap rule needs losses")
                .iter()
                .map(|&l| if l < *gamma { -1.0 } else { 1.0 })
                .collect(),
            WeightRule::Signed {
                negative_ids,
                ceiling,
                scheme,
                kept_total,
                isolated_total,
            } => {
                let (positive, negative) = match scheme {
                    GgaWeights::Stratified => {
                        let m = ids.len() as f64;
                        let k =
                            ids.iter().filter(|id| negative_ids.contains(id)).count() as f64;
                        let positive = if k < ids.len() as f64 { m / (m - k) } else { 0.0 };
                        (positive, -m / k.max(1.0))
                    }
                    GgaWeights::Expectation => {
                        let n = (*kept_total + *isolated_total) as f64;
                        (
                            n / (*kept_total).max(1) as f64,
                            -n / (*isolated_total).max(1) as f64,
                        )
                    }
                };
                ids.iter()
                    .enumerate()
                    .map(|(i, id)| {
                        if negative_ids.contains(id) {
                            match (ceiling, losses) {
                                (Some(c), Some(ls)) if ls[i] > *c => 0.0,
                                _ => negative,
                            }
                        } else {
                            positive
                        }
                    })
                    .collect()
            }
        }
    }
}

/// Frozen full-pass evaluation: per-example cross-entropy in dataset order.
pub(crate) fn eval_losses(net: &Network, data: &Dataset) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.examples().chunks(512) {
        let images: Vec<_> = chunk.iter().map(|e| &e.image).collect();
        let labels: Vec<_> = chunk.iter().map(|e| e.label).collect();
        let logits = net.forward(&images)?;
        let loss = nn::cross_entropy_per_example(&logits, &labels)?;
        out.extend(loss.per_example);
    }
    Ok(out)
}

/// The single mini-batch training engine. Trains `net` on `train_on`; when a
/// trace is requested, the frozen evaluation runs over `trace_over` (usually
/// the full training set) after every epoch.
fn train_epochs(
    net: &mut Network,
    train_on: &Dataset,
    schedule: &TrainSchedule,
    rule: &WeightRule,
    mut trace: Option<(&Dataset, &mut LossTrace)>,
) -> Result<()> {
    schedule.validate()?;
    if train_on.is_empty() && schedule.epochs() > 0 {
        return Err(Error::input("cannot train on an empty dataset"));
    }
    let mut state = OptimizerState::new(
        net,
        schedule.lr_table.first().copied().unwrap_or(1.0),
        schedule.momentum,
        schedule.weight_decay,
    )?;
    let mut rng = Rng::new(schedule.seed);
    let n = train_on.len();
    let mut order: Vec<usize> = (0..n).collect();

    for (epoch, &lr) in schedule.lr_table.iter().enumerate() {
        state.learning_rate = lr;
        rng.shuffle(&mut order);
        for chunk in order.chunks(schedule.batch_size) {
            let images: Vec<_> = chunk.iter().map(|&i| &train_on.examples()[i].image).collect();
            let labels: Vec<_> = chunk.iter().map(|&i| train_on.examples()[i].label).collect();

            let ids: Vec<u64> = chunk.iter().map(|&i| train_on.examples()[i].id).collect();
            let weights = if rule.needs_losses() {
                let logits = net.forward(&images)?;
                let loss = nn::cross_entropy_per_example(&logits, &labels)?;
                if loss.per_example.iter().any(|l| !l.is_finite()) {
                    return Err(Error::Training {
                        epoch,
                        message: "non-finite batch loss".to_string(),
                    });
                }
                rule.batch_weights(&ids, Some(&loss.per_example))
            } else {
                rule.batch_weights(&ids, None)
            };

            let grads = net.backward_weighted(&images, &labels, &weights)?;
            nn::sgd_step(net, &grads, &mut state).map_err(|e| match e {
                Error::Training { message, .. } => Error::Training { epoch, message },
                other => other,
            })?;
        }

        if let Some((eval_data, trace)) = trace.as_mut() {
            let losses = eval_losses(net, eval_data)?;
            if losses.iter().any(|l| !l.is_finite()) {
                return Err(Error::Training {
                    epoch,
                    message: "non-finite evaluation loss".to_string(),
                });
            }
            trace.push_epoch(losses);
        }
    }
    Ok(())
}

fn trace_for(data: &Dataset) -> LossTrace {
    LossTrace::new(data.examples().iter().map(|e| e.id).collect())
}

/// Plain cross-entropy training with per-epoch loss tracing.
pub fn train_standard(
    net: Network,
    train: &Dataset,
    schedule: &TrainSchedule,
) -> Result<(Network, LossTrace)> {
    let mut net = net;
    let mut trace = trace_for(train);
    train_epochs(&mut net, train, schedule, &WeightRule::Plain, Some((train, &mut trace)))?;
    Ok((net, trace))
}

/// Loss-trapped training: per mini-batch, weights are `sign(loss - gamma)`.
/// With `gamma = 0` the trajectory is identical to [`train_standard`].
pub fn train_lga(
    net: Network,
    train: &Dataset,
    gamma: f64,
    schedule: &TrainSchedule,
) -> Result<(Network, LossTrace)> {
    if gamma < 0.0 {
        return Err(Error::config("gamma must be non-negative"));
    }
    let mut net = net;
    let mut trace = trace_for(train);
    let rule = if gamma == 0.0 {
        WeightRule::Plain
    } else {
        WeightRule::TrapSign { gamma }
    };
    train_epochs(&mut net, train, schedule, &rule, Some((train, &mut trace)))?;
    Ok((net, trace))
}

/// Which examples were isolated as suspected backdoor data.
#[derive(Debug, Clone, PartialEq)]
pub struct IsolationResult {
    pub isolated_ids: BTreeSet<u64>,
    pub remaining_ids: BTreeSet<u64>,
    /// Ranking losses, ascending (loss, then id on ties).
    pub ranking: Vec<(u64, f64)>,
}

impl IsolationResult {
    /// Splits a dataset into (kept, isolated) per this result.
    pub fn split(&self, data: &Dataset) -> Result<(Dataset, Dataset)> {
        let mut kept = Vec::new();
        let mut isolated = Vec::new();
        for e in data.examples() {
            if self.isolated_ids.contains(&e.id) {
                isolated.push(e.clone());
            } else {
                kept.push(e.clone());
            }
        }
        Ok((
            Dataset::with_shape(kept, data.class_count(), data.shape())?,
            Dataset::with_shape(isolated, data.class_count(), data.shape())?,
        ))
    }
}

/// Ranks examples by loss ascending (ties by ascending id) and isolates the
/// lowest `ceil(p * n)`.
pub fn isolate(losses: &[(u64, f64)], p: f64) -> Result<IsolationResult> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::config("isolation rate must lie in (0, 1)"));
    }
    if losses.is_empty() {
        return Err(Error::input("cannot isolate from an empty loss table"));
    }
    if losses.iter().any(|(_, l)| !l.is_finite() || *l < 0.0) {
        return Err(Error::input("losses must be finite and non-negative"));
    }
    let count = ceil_rate(p, losses.len());
    let mut ranking: Vec<(u64, f64)> = losses.to_vec();
    ranking.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    let isolated_ids: BTreeSet<u64> = ranking.iter().take(count).map(|(id, _)| *id).collect();
    let remaining_ids: BTreeSet<u64> = ranking.iter().skip(count).map(|(id, _)| *id).collect();
    Ok(IsolationResult {
        isolated_ids,
        remaining_ids,
        ranking,
    })
}

/// Global gradient ascent: minimizes `E_kept[loss] - E_isolated[loss]` over
/// mixed mini-batches, realized as subset-mean weights `+n/|kept|` and
/// `-n/|isolated|` so each subset contributes through its own expectation.
/// Per-example ascent is frozen once that example's loss exceeds `ceiling`
/// and resumes below it.
pub fn train_gga(
    net: Network,
    clean: &Dataset,
    isolated: &Dataset,
    schedule: &TrainSchedule,
    ceiling: Option<f64>,
    scheme: GgaWeights,
) -> Result<Network> {
    let (combined, rule) = gga_setup(clean, isolated, ceiling, scheme)?;
    let mut net = net;
    train_epochs(&mut net, &combined, schedule, &rule, None)?;
    Ok(net)
}

/// Like [`train_gga`] but also traces frozen evaluation losses over
/// `trace_over` after each epoch.
pub fn train_gga_traced(
    net: Network,
    clean: &Dataset,
    isolated: &Dataset,
    schedule: &TrainSchedule,
    ceiling: Option<f64>,
    scheme: GgaWeights,
    trace_over: &Dataset,
) -> Result<(Network, LossTrace)> {
    let (combined, rule) = gga_setup(clean, isolated, ceiling, scheme)?;
    let mut net = net;
    let mut trace = trace_for(trace_over);
    train_epochs(&mut net, &combined, schedule, &rule, Some((trace_over, &mut trace)))?;
    Ok((net, trace))
}

fn gga_setup(
    clean: &Dataset,
    isolated: &Dataset,
    ceiling: Option<f64>,
    scheme: GgaWeights,
) -> Result<(Dataset, WeightRule)> {
    if isolated.is_empty() {
        return Err(Error::input("isolated set must be non-empty"));
    }
    if clean.is_empty() {
        return Err(Error::input("kept set must be non-empty"));
    }
    let mut examples = clean.examples().to_vec();
    examples.extend(isolated.examples().iter().cloned());
    let combined = Dataset::with_shape(examples, clean.class_count(), clean.shape())?;
    let rule = WeightRule::Signed {
        negative_ids: isolated.examples().iter().map(|e| e.id).collect(),
        ceiling,
        scheme,
        kept_total: clean.len(),
        isolated_total: isolated.len(),
    };
    Ok((combined, rule))
}

/// How the ascent ceiling for GGA is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CeilingRule {
    /// `2 * ln(class_count)`.
    Auto,
    Fixed(f64),
    /// No ceiling: plain signed ascent.
    Off,
}

impl CeilingRule {
    pub fn resolve(&self, class_count: usize) -> Option<f64> {
        match self {
            CeilingRule::Auto => Some(2.0 * (class_count as f64).ln()),
            CeilingRule::Fixed(v) => Some(*v),
            CeilingRule::Off => None,
        }
    }
}

/// Hyperparameters of the full three-phase pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblConfig {
    /// LGA loss threshold.
    pub gamma: f64,
    /// Epochs of LGA before isolation.
    pub turning_epoch: usize,
    /// Fraction of lowest-loss examples isolated.
    pub isolation_rate: f64,
    pub total_epochs: usize,
    pub mid_stage_epochs: usize,
    pub unlearn_epochs: usize,
    pub isolation_lr: f64,
    pub unlearn_lr: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub hidden_dims: Vec<usize>,
    pub ascent_ceiling: CeilingRule,
    /// How the unlearning objective's subset means are weighted.
    pub gga_weights: GgaWeights,
    /// Whether mid-stage training keeps the isolated examples in the set.
    pub include_isolated_mid_stage: bool,
    pub seed: u64,
}

impl Default for AblConfig {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            turning_epoch: 10,
            isolation_rate: 0.01,
            total_epochs: 50,
            mid_stage_epochs: 30,
            unlearn_epochs: 10,
            isolation_lr: 0.1,
            unlearn_lr: 1e-4,
            batch_size: 32,
            momentum: 0.9,
            weight_decay: 1e-4,
            hidden_dims: vec![64],
            ascent_ceiling: CeilingRule::Auto,
            gga_weights: GgaWeights::Expectation,
            include_isolated_mid_stage: true,
            seed: 0,
        }
    }
}

impl AblConfig {
    pub fn validate(&self, train_len: usize) -> Result<()> {
        if self.gamma < 0.0 {
            return Err(Error::config("gamma must be non-negative"));
        }
        if self.turning_epoch == 0 || self.turning_epoch >= self.total_epochs {
            return Err(Error::config("turning epoch must satisfy 0 < T_te < total epochs"));
        }
        if self.turning_epoch + self.mid_stage_epochs + self.unlearn_epochs != self.total_epochs {
            return Err(Error::config(
                "phase epochs must sum to the total epoch budget".to_string(),
            ));
        }
        if !(self.isolation_rate > 0.0 && self.isolation_rate < 1.0) {
            return Err(Error::config("isolation rate must lie in (0, 1)"));
        }
        if self.isolation_rate * (train_len as f64) < 1.0 - 1e-9 {
            return Err(Error::config(format!(
                "isolation rate {} isolates less than one of {train_len} examples",
                self.isolation_rate
            )));
        }
        if self.isolation_lr <= 0.0 || self.unlearn_lr <= 0.0 {
            return Err(Error::config("learning rates must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        if self.hidden_dims.iter().any(|&d| d == 0) {
            return Err(Error::config("hidden dimensions must be positive"));
        }
        Ok(())
    }

    pub fn network_dims(&self, input_dim: usize, class_count: usize) -> Vec<usize> {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(class_count);
        dims
    }

    fn schedule(&self, epochs: usize, lr_table: Vec<f64>, tag: &str) -> TrainSchedule {
        debug_assert_eq!(lr_table.len(), epochs);
        TrainSchedule {
            lr_table,
            batch_size: self.batch_size,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            seed: derive_seed(self.seed, tag),
        }
    }

    /// Phase-1 schedule (LGA at the isolation learning rate).
    pub fn isolation_schedule(&self) -> TrainSchedule {
        self.schedule(
            self.turning_epoch,
            vec![self.isolation_lr; self.turning_epoch],
            "phase1-lga",
        )
    }

    /// Phase-2 schedule: the two-milestone table of the full budget,
    /// restricted to the mid-stage epochs.
    pub fn mid_stage_schedule(&self) -> TrainSchedule {
        let full = milestone_lr_table(self.total_epochs, self.isolation_lr);
        let table = full[self.turning_epoch..self.turning_epoch + self.mid_stage_epochs].to_vec();
        self.schedule(self.mid_stage_epochs, table, "phase2-recover")
    }

    /// Phase-3 schedule (GGA at the unlearning rate).
    pub fn unlearn_schedule(&self) -> TrainSchedule {
        self.schedule(
            self.unlearn_epochs,
            vec![self.unlearn_lr; self.unlearn_epochs],
            "phase3-gga",
        )
    }
}

/// Everything a pipeline run produces besides the network.
#[derive(Debug, Clone)]
pub struct AblOutcome {
    pub report: Report,
    pub isolation: IsolationResult,
    pub trace: LossTrace,
}

/// Runs the full pipeline on an (already poisoned) training set:
/// LGA for `turning_epoch` epochs, isolation of the lowest-loss fraction,
/// standard training on the full set to recover accuracy, then GGA
/// unlearning with the isolated subset.
pub fn run_abl(
    train: &Dataset,
    test: &Dataset,
    poison_spec: &PoisonSpec,
    config: &AblConfig,
) -> Result<(Network, AblOutcome)> {
    config.validate(train.len())?;
    let dims = config.network_dims(train.input_dim(), train.class_count());
    let net = nn::init_network(&dims, config.seed)?;

    // Phase 1: loss-trapped training, then isolation at the turning epoch.
    let (net, mut trace) = train_lga(net, train, config.gamma, &config.isolation_schedule())?;
    let turning_losses = trace
        .last_epoch_pairs()
        .ok_or_else(|| Error::config("turning epoch recorded no losses"))?;
    let isolation = isolate(&turning_losses, config.isolation_rate)?;
    let (kept, isolated) = isolation.split(train)?;

    // Phase 2: standard training to recover clean accuracy. The isolated
    // examples stay in the set unless explicitly excluded.
    let mut net = net;
    {
        let mid_schedule = config.mid_stage_schedule();
        let train_on: &Dataset = if config.include_isolated_mid_stage {
            train
        } else {
            &kept
        };
        let mut mid_trace = trace_for(train);
        train_epochs(
            &mut net,
            train_on,
            &mid_schedule,
            &WeightRule::Plain,
            Some((train, &mut mid_trace)),
        )?;
        trace.extend(&mid_trace)?;
    }

    // Phase 3: unlearning.
    let ceiling = config.ascent_ceiling.resolve(train.class_count());
    let (net, gga_trace) = train_gga_traced(
        net,
        &kept,
        &isolated,
        &config.unlearn_schedule(),
        ceiling,
        config.gga_weights,
        train,
    )?;
    trace.extend(&gga_trace)?;

    let backdoor_test = build_backdoor_testset(test, poison_spec)?;
    let report = Report {
        asr: metrics::attack_success_rate(&net, &backdoor_test, poison_spec.target_label)?,
        clean_accuracy: metrics::clean_accuracy(&net, test)?,
        isolation_precision: Some(metrics::isolation_precision(&isolation, train)?),
        loss_curves: metrics::loss_curves(&trace, train)?,
        seed: config.seed,
        config_echo: serde_json::to_value(config).ok(),
    };
    Ok((
        net,
        AblOutcome {
            report,
            isolation,
            trace,
        },
    ))
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::LossTrace;

    pub(crate) fn push_epoch(trace: &mut LossTrace, losses: Vec<f64>) {
        trace.push_epoch(losses);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SyntheticSpec};
    use crate::nn::init_network;

    fn tiny_spec() -> SyntheticSpec {
        SyntheticSpec {
            class_count: 4,
            height: 4,
            width: 4,
            channels: 1,
            contrast: 0.6,
            noise_sigma: 0.15,
            train_size: 200,
            test_size: 80,
            seed: 9,
        }
    }

    fn tiny_net(input_dim: usize, classes: usize, seed: u64) -> Network {
        init_network(&[input_dim, 16, classes], seed).unwrap()
    }

    #[test]
    fn lga_loss_value_examples() {
        assert!((lga_loss_value(&[0.2, 0.8], 0.5) - 0.3).abs() < 1e-12);
        // every loss exactly at gamma: boundary descends, mean = gamma
        assert!((lga_loss_value(&[0.5, 0.5, 0.5], 0.5) - 0.5).abs() < 1e-12);
        // gamma = 0 degenerates to the plain mean
        assert!((lga_loss_value(&[0.1, 0.7], 0.0) - 0.4).abs() < 1e-12);
        assert_eq!(lga_loss_value(&[], 0.5), 0.0);
    }

    #[test]
    fn zero_epochs_leaves_net_unchanged() {
        let (train, _) = gen_synthetic(&tiny_spec()).unwrap();
        let net = tiny_net(16, 4, 1);
        let before = net.clone();
        let schedule = TrainSchedule::constant(0, 0.1, 16, 0);
        let (after, trace) = train_standard(net, &train, &schedule).unwrap();
        assert_eq!(after, before);
        assert!(trace.is_empty());
    }

    #[test]
    fn training_is_seed_deterministic() {
        let (train, _) = gen_synthetic(&tiny_spec()).unwrap();
        let schedule = TrainSchedule::constant(2, 0.05, 16, 3);
        let (net_a, trace_a) =
            train_standard(tiny_net(16, 4, 1), &train, &schedule).unwrap();
        let (net_b, trace_b) =
            train_standard(tiny_net(16, 4, 1), &train, &schedule).unwrap();
        assert_eq!(net_a, net_b);
        assert_eq!(trace_a, trace_b);
    }

    #[test]
    fn lga_with_zero_gamma_matches_standard_exactly() {
        let (train, _) = gen_synthetic(&tiny_spec()).unwrap();
        let schedule = TrainSchedule::constant(3, 0.05, 16, 5);
        let (std_net, std_trace) =
            train_standard(tiny_net(16, 4, 2), &train, &schedule).unwrap();
        let (lga_net, lga_trace) =
            train_lga(tiny_net(16, 4, 2), &train, 0.0, &schedule).unwrap();
        assert_eq!(std_net, lga_net);
        assert_eq!(std_trace, lga_trace);
    }

    #[test]
    fn lga_step_raises_loss_of_sub_gamma_example() {
        // A single example whose loss sits below gamma must be pushed up by
        // one LGA step (local gradient ascent).
        let (train, _) = gen_synthetic(&tiny_spec()).unwrap();
        // Pretrain a few epochs so some example has loss < 0.5.
        let schedule = TrainSchedule::constant(4, 0.05, 16, 7);
        let (net, trace) = train_standard(tiny_net(16, 4, 3), &train, &schedule).unwrap();
        let pairs = trace.last_epoch_pairs().unwrap();
        let (low_id, low_loss) = pairs
            .iter()
            .copied()
            .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .unwrap();
        assert!(low_loss < 0.5, "pretraining left no low-loss example");

        let one = Dataset::with_shape(
            train
                .examples()
                .iter()
                .filter(|e| e.id == low_id)
                .cloned()
                .collect(),
            train.class_count(),
            train.shape(),
        )
        .unwrap();
        let mut step = TrainSchedule::constant(1, 0.05, 1, 0);
        step.momentum = 0.0;
        step.weight_decay = 0.0;
        let (after, after_trace) = train_lga(net, &one, 0.5, &step).unwrap();
        let _ = after;
        let new_loss = after_trace.last_epoch_pairs().unwrap()[0].1;
        assert!(
            new_loss > low_loss,
            "LGA step should raise the loss: {low_loss} -> {new_loss}"
        );
    }

    #[test]
    fn isolate_picks_lowest_losses() {
        let losses = vec![(0u64, 0.1), (1u64, 0.9), (2u64, 0.05), (3u64, 0.7)];
        let r = isolate(&losses, 0.25).unwrap();
        assert_eq!(r.isolated_ids.iter().copied().collect::<Vec<_>>(), vec![2]);
        let r = isolate(&losses, 0.5).unwrap();
        assert_eq!(
            r.isolated_ids.iter().copied().collect::<Vec<_>>(),
            vec![0, 2]
        );
        // partition invariants
        assert!(r.isolated_ids.is_disjoint(&r.remaining_ids));
        assert_eq!(r.isolated_ids.len() + r.remaining_ids.len(), 4);
    }

    #[test]
    fn isolate_breaks_ties_by_ascending_id() {
        let losses = vec![(3u64, 0.5), (1u64, 0.5), (2u64, 0.5), (0u64, 0.5)];
        let r = isolate(&losses, 0.25).unwrap();
        assert_eq!(r.isolated_ids.iter().copied().collect::<Vec<_>>(), vec![0]);
    }

    #[test]
    fn isolate_rejects_bad_rate() {
        let losses = vec![(0u64, 0.1)];
        assert!(matches!(isolate(&losses, 0.0), Err(Error::Config(_))));
        assert!(matches!(isolate(&losses, 1.0), Err(Error::Config(_))));
    }

    #[test]
    fn gga_requires_isolated_examples() {
        let (train, _) = gen_synthetic(&tiny_spec()).unwrap();
        let empty = Dataset::with_shape(Vec::new(), train.class_count(), train.shape()).unwrap();
        let schedule = TrainSchedule::constant(1, 0.01, 16, 0);
        let err = train_gga(tiny_net(16, 4, 0), &train, &empty, &schedule, None, GgaWeights::Stratified)
            .unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }

    #[test]
    fn gga_update_is_clean_minus_isolated_gradient() {
        // One clean and one isolated example, momentum 0, no decay, no
        // ceiling: the objective is loss_c - loss_b, so the step must be
        // exactly -lr * (grad_clean - grad_isolated).
        let (train, _) = gen_synthetic(&tiny_spec()).unwrap();
        let clean_one = Dataset::with_shape(
            vec![train.examples()[0].clone()],
            train.class_count(),
            train.shape(),
        )
        .unwrap();
        let isolated_one = Dataset::with_shape(
            vec![train.examples()[1].clone()],
            train.class_count(),
            train.shape(),
        )
        .unwrap();
        let net = tiny_net(16, 4, 4);
        let lr = 0.01;

        let gc = net
            .backward_weighted(
                &[&clean_one.examples()[0].image],
                &[clean_one.examples()[0].label],
                &[1.0],
            )
            .unwrap();
        let gb = net
            .backward_weighted(
                &[&isolated_one.examples()[0].image],
                &[isolated_one.examples()[0].label],
                &[1.0],
            )
            .unwrap();

        let mut schedule = TrainSchedule::constant(1, lr, 2, 0);
        schedule.momentum = 0.0;
        schedule.weight_decay = 0.0;
        let after = train_gga(
            net.clone(),
            &clean_one,
            &isolated_one,
            &schedule,
            None,
            GgaWeights::Stratified,
        )
        .unwrap();

        for k in 0..net.layers().len() {
            for p in 0..net.layers()[k].weights.len() {
                let expected = net.layers()[k].weights[p]
                    - lr * (gc.layers[k].weights[p] - gb.layers[k].weights[p]);
                let got = after.layers()[k].weights[p];
                assert!(
                    (expected - got).abs() < 1e-12,
                    "layer {k} weight {p}: {expected} vs {got}"
                );
            }
        }
    }

    #[test]
    fn gga_gradient_matches_finite_differences_of_signed_objective() {
        // Objective on a mixed batch of one clean + one isolated example:
        // E_kept - E_isolated = loss_c - loss_b, realized through subset-mean
        // weights +2/-2. The applied gradient must match central finite
        // differences of that objective.
        let (train, _) = gen_synthetic(&tiny_spec()).unwrap();
        let c = &train.examples()[0];
        let b = &train.examples()[1];
        let mut net = tiny_net(16, 4, 8);

        let objective = |net: &Network| {
            let logits = net.forward(&[&c.image, &b.image]).unwrap();
            let loss = nn::cross_entropy_per_example(&logits, &[c.label, b.label]).unwrap();
            loss.per_example[0] - loss.per_example[1]
        };

        let grads = net
            .backward_weighted(&[&c.image, &b.image], &[c.label, b.label], &[2.0, -2.0])
            .unwrap();

        let h = 1e-5;
        for k in 0..net.layers().len() {
            for p in (0..net.layers()[k].weights.len()).step_by(7) {
                let orig = net.layers()[k].weights[p];
                net.layers_mut()[k].weights[p] = orig + h;
                let up = objective(&net);
                net.layers_mut()[k].weights[p] = orig - h;
                let down = objective(&net);
                net.layers_mut()[k].weights[p] = orig;
                let fd = (up - down) / (2.0 * h);
                let an = grads.layers[k].weights[p];
                let denom = fd.abs().max(an.abs()).max(1e-8);
                assert!(
                    (fd - an).abs() / denom < 1e-6,
                    "layer {k} weight {p}: {fd} vs {an}"
                );
            }
        }
    }

    #[test]
    fn abl_config_validation_catches_bad_budgets() {
        let mut config = AblConfig::default();
        config.total_epochs = 10;
        assert!(config.validate(1000).is_err());

        let mut config = AblConfig::default();
        config.isolation_rate = 0.002; // 0.002 * 500 = 1, exactly one example
        assert!(config.validate(500).is_ok());
        config.isolation_rate = 0.001; // 0.001 * 500 = 0.5 < 1
        assert!(matches!(config.validate(500), Err(Error::Config(_))));
    }

    #[test]
    fn milestone_table_scales_paper_proportions() {
        let table = milestone_lr_table(50, 0.1);
        assert_eq!(table.len(), 50);
        assert!((table[0] - 0.1).abs() < 1e-15);
        assert!((table[9] - 0.1).abs() < 1e-15);
        assert!((table[10] - 0.01).abs() < 1e-15);
        assert!((table[34] - 0.01).abs() < 1e-15);
        assert!((table[35] - 0.001).abs() < 1e-15);
        assert!((table[49] - 0.001).abs() < 1e-15);
    }
}
