//! Alternative isolation and unlearning strategies used as comparison arms.
//!
//! Isolation alternatives: the flooding objective (gradient-identical to the
//! loss trap, only the reported loss value differs) and confidence ranking
//! under label-smoothed training. Unlearning alternatives: image noise,
//! label corruption, relabeling, finetuning, and retraining arms, with the
//! gradient-ascent unlearner as the reference.

use serde::{Deserialize, Serialize};

use crate::abl::{
    self, isolate, train_gga, train_lga, train_standard, GgaWeights, IsolationResult, LossTrace,
    TrainSchedule,
};
use crate::data::{Dataset, Example, Image};
use crate::error::{Error, Result};
use crate::nn::{self, Network, OptimizerState};
use crate::rng::{derive_seed, Rng};
use crate::util::ceil_rate;

/// How suspected backdoor examples are picked during early training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum IsolationMethod {
    Lga { gamma: f64 },
    Flooding { level: f64 },
    LabelSmoothingConfidence { smoothing: f64 },
}

/// Mean of `|loss_i - b| + b`, the flooding objective on a batch of losses.
pub fn flooding_loss_value(per_example_losses: &[f64], b: f64) -> f64 {
    if per_example_losses.is_empty() {
        return b;
    }
    per_example_losses
        .iter()
        .map(|&l| (l - b).abs() + b)
        .sum::<f64>()
        / per_example_losses.len() as f64
}

/// Flooding training. The gradient of `|loss - b| + b` is
/// `sign(loss - b) * grad(loss)` (with `sign(0) = +1`), exactly the loss-trap
/// weight rule, so this shares the LGA trajectory for `b = gamma`.
pub fn train_flooding(
    net: Network,
    train: &Dataset,
    level: f64,
    schedule: &TrainSchedule,
) -> Result<(Network, LossTrace)> {
    if level < 0.0 {
        return Err(Error::config("flooding level must be non-negative"));
    }
    train_lga(net, train, level, schedule)
}

/// Ranks training examples by the softmax probability of their assigned
/// label, descending (ties by ascending id), and isolates the top fraction.
pub fn isolate_by_confidence(net: &Network, train: &Dataset, p: f64) -> Result<IsolationResult> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::config("isolation rate must lie in (0, 1)"));
    }
    if train.is_empty() {
        return Err(Error::input("cannot isolate from an empty dataset"));
    }
    let mut confidences: Vec<(u64, f64)> = Vec::with_capacity(train.len());
    for chunk in train.examples().chunks(512) {
        let images: Vec<_> = chunk.iter().map(|e| &e.image).collect();
        let logits = net.forward(&images)?;
        for (e, row) in chunk.iter().zip(&logits) {
            let mut probs = vec![0.0; row.len()];
            nn::softmax_into(row, &mut probs);
            confidences.push((e.id, probs[e.label]));
        }
    }
    let count = ceil_rate(p, train.len());
    let mut ranking = confidences;
    ranking.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let isolated_ids = ranking.iter().take(count).map(|(id, _)| *id).collect();
    let remaining_ids = ranking.iter().skip(count).map(|(id, _)| *id).collect();
    Ok(IsolationResult {
        isolated_ids,
        remaining_ids,
        ranking,
    })
}

/// Smoothed one-hot target: `1 - eps` on the label plus `eps / C` everywhere.
fn smoothed_target(label: usize, class_count: usize, eps: f64) -> Vec<f64> {
    let mut t = vec![eps / class_count as f64; class_count];
    t[label] += 1.0 - eps;
    t
}

/// Trains with label-smoothed cross-entropy, tracing plain per-example
/// cross-entropy after each epoch like the other training modes.
pub fn train_label_smoothing(
    net: Network,
    train: &Dataset,
    smoothing: f64,
    schedule: &TrainSchedule,
) -> Result<(Network, LossTrace)> {
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::config("smoothing must lie in [0, 1)"));
    }
    let mut net = net;
    let mut trace = LossTrace::new(train.examples().iter().map(|e| e.id).collect());
    let mut state = OptimizerState::new(
        &net,
        schedule.lr_table.first().copied().unwrap_or(1.0),
        schedule.momentum,
        schedule.weight_decay,
    )?;
    let mut rng = Rng::new(schedule.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let class_count = train.class_count();

    for (epoch, &lr) in schedule.lr_table.iter().enumerate() {
        state.learning_rate = lr;
        rng.shuffle(&mut order);
        for chunk in order.chunks(schedule.batch_size) {
            let images: Vec<_> = chunk.iter().map(|&i| &train.examples()[i].image).collect();
            let targets: Vec<Vec<f64>> = chunk
                .iter()
                .map(|&i| smoothed_target(train.examples()[i].label, class_count, smoothing))
                .collect();
            let weights = vec![1.0; chunk.len()];
            let grads = net.backward_soft_weighted(&images, &targets, &weights)?;
            nn::sgd_step(&mut net, &grads, &mut state).map_err(|e| match e {
                Error::Training { message, .. } => Error::Training { epoch, message },
                other => other,
            })?;
        }
        trace.push_epoch(abl::eval_losses(&net, train)?);
    }
    Ok((net, trace))
}

/// Runs the early-training phase under the chosen isolation method and
/// isolates a `p` fraction: loss-trap and flooding isolate the lowest
/// evaluation losses, label smoothing isolates the highest confidences.
pub fn run_isolation_phase(
    net: Network,
    train: &Dataset,
    method: &IsolationMethod,
    p: f64,
    schedule: &TrainSchedule,
) -> Result<(Network, LossTrace, IsolationResult)> {
    match method {
        IsolationMethod::Lga { gamma } => {
            let (net, trace) = train_lga(net, train, *gamma, schedule)?;
            let losses = trace
                .last_epoch_pairs()
                .ok_or_else(|| Error::config("isolation phase must run at least one epoch"))?;
            let result = isolate(&losses, p)?;
            Ok((net, trace, result))
        }
        IsolationMethod::Flooding { level } => {
            let (net, trace) = train_flooding(net, train, *level, schedule)?;
            let losses = trace
                .last_epoch_pairs()
                .ok_or_else(|| Error::config("isolation phase must run at least one epoch"))?;
            let result = isolate(&losses, p)?;
            Ok((net, trace, result))
        }
        IsolationMethod::LabelSmoothingConfidence { smoothing } => {
            let (net, trace) = train_label_smoothing(net, train, *smoothing, schedule)?;
            let result = isolate_by_confidence(&net, train, p)?;
            Ok((net, trace, result))
        }
    }
}

/// The unlearning comparison arms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum UnlearnMethod {
    /// Gaussian noise on every pixel of the isolated images, then training
    /// on the perturbed union.
    PixelNoise { sigma: f64 },
    /// Gaussian noise on the quarter of pixels per isolated image with the
    /// largest input-gradient magnitude, then training on the union.
    GradNoise { sigma: f64 },
    /// Random permutation of the isolated labels, then training on the union.
    LabelShuffling,
    /// Uniform random class on each isolated label, then training on the
    /// union.
    LabelUniform,
    /// Smoothed targets on the isolated set, hard targets elsewhere.
    LabelSmoothingRelabel { smoothing: f64 },
    /// Relabel the isolated set with a model trained from scratch on the
    /// kept set, then train on the union.
    SelfLearning,
    /// Finetune all layers on the kept set only.
    FinetuneAll,
    /// Finetune only the final dense layer on the kept set only.
    FinetuneLast,
    /// Fresh initialization trained on the kept set only.
    RetrainScratch,
    /// Global gradient ascent on the isolated set (the reference method).
    AblGga,
}

impl UnlearnMethod {
    /// Whether the method trains without ever reading the isolated examples.
    pub fn discards_isolated(&self) -> bool {
        matches!(
            self,
            UnlearnMethod::FinetuneAll | UnlearnMethod::FinetuneLast | UnlearnMethod::RetrainScratch
        )
    }
}

/// Shared knobs for the unlearning arms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlearnOpts {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Ascent ceiling for the gradient-ascent arm; `None` disables it.
    pub ascent_ceiling: Option<f64>,
    /// Subset-mean weighting for the gradient-ascent arm.
    pub gga_weights: GgaWeights,
    pub seed: u64,
}

impl Default for UnlearnOpts {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 0.01,
            batch_size: 32,
            momentum: 0.9,
            weight_decay: 1e-4,
            ascent_ceiling: None,
            gga_weights: GgaWeights::Expectation,
            seed: 0,
        }
    }
}

impl UnlearnOpts {
    fn train_schedule(&self, tag: &str) -> TrainSchedule {
        TrainSchedule {
            lr_table: vec![self.lr; self.epochs],
            batch_size: self.batch_size,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            seed: derive_seed(self.seed, tag),
        }
    }
}

/// Documented seeded permutation used by the label-shuffling arm: labels are
/// collected in dataset order and passed through the Fisher–Yates shuffle of
/// `Rng::new(seed)`.
pub fn shuffle_labels(labels: &[usize], seed: u64) -> Vec<usize> {
    let mut out = labels.to_vec();
    Rng::new(seed).shuffle(&mut out);
    out
}

fn union(kept: &Dataset, modified: Vec<Example>) -> Result<Dataset> {
    let mut examples = kept.examples().to_vec();
    examples.extend(modified);
    Dataset::with_shape(examples, kept.class_count(), kept.shape())
}

fn noisy_image(image: &Image, sigma: f64, rng: &mut Rng) -> Image {
    let pixels = image
        .pixels
        .iter()
        .map(|&p| (p + sigma * rng.standard_normal()).clamp(0.0, 1.0))
        .collect();
    Image {
        height: image.height,
        width: image.width,
        channels: image.channels,
        pixels,
    }
}

/// Applies one unlearning arm to a backdoored network given the isolation
/// split. Methods that discard the isolated set never read it.
pub fn unlearn(
    method: &UnlearnMethod,
    net: Network,
    kept: &Dataset,
    isolated: &Dataset,
    opts: &UnlearnOpts,
) -> Result<Network> {
    if !method.discards_isolated() && isolated.is_empty() {
        return Err(Error::input("isolated set must be non-empty"));
    }
    let schedule = opts.train_schedule("unlearn-train");
    match method {
        UnlearnMethod::PixelNoise { sigma } => {
            if *sigma < 0.0 {
                return Err(Error::config("noise sigma must be non-negative"));
            }
            let mut rng = Rng::new(opts.seed);
            let modified = isolated
                .examples()
                .iter()
                .map(|e| e.with_image(noisy_image(&e.image, *sigma, &mut rng)))
                .collect();
            let data = union(kept, modified)?;
            Ok(train_standard(net, &data, &schedule)?.0)
        }
        UnlearnMethod::GradNoise { sigma } => {
            if *sigma < 0.0 {
                return Err(Error::config("noise sigma must be non-negative"));
            }
            let mut rng = Rng::new(opts.seed);
            let images: Vec<_> = isolated.examples().iter().map(|e| &e.image).collect();
            let labels: Vec<_> = isolated.examples().iter().map(|e| e.label).collect();
            let grads = net.input_gradients(&images, &labels)?;
            let modified = isolated
                .examples()
                .iter()
                .zip(&grads)
                .map(|(e, g)| {
                    let mut order: Vec<usize> = (0..g.len()).collect();
                    order.sort_by(|&a, &b| g[b].abs().partial_cmp(&g[a].abs()).unwrap());
                    let count = (g.len() / 4).max(1);
                    let mut image = e.image.clone();
                    for &idx in order.iter().take(count) {
                        image.pixels[idx] =
                            (image.pixels[idx] + sigma * rng.standard_normal()).clamp(0.0, 1.0);
                    }
                    e.with_image(image)
                })
                .collect();
            let data = union(kept, modified)?;
            Ok(train_standard(net, &data, &schedule)?.0)
        }
        UnlearnMethod::LabelShuffling => {
            let labels: Vec<usize> = isolated.examples().iter().map(|e| e.label).collect();
            let permuted = shuffle_labels(&labels, opts.seed);
            let modified = isolated
                .examples()
                .iter()
                .zip(&permuted)
                .map(|(e, &label)| e.with_label(label))
                .collect();
            let data = union(kept, modified)?;
            Ok(train_standard(net, &data, &schedule)?.0)
        }
        UnlearnMethod::LabelUniform => {
            let mut rng = Rng::new(opts.seed);
            let class_count = isolated.class_count();
            let modified = isolated
                .examples()
                .iter()
                .map(|e| e.with_label(rng.below(class_count as u64) as usize))
                .collect();
            let data = union(kept, modified)?;
            Ok(train_standard(net, &data, &schedule)?.0)
        }
        UnlearnMethod::LabelSmoothingRelabel { smoothing } => {
            if !(0.0..1.0).contains(smoothing) {
                return Err(Error::config("smoothing must lie in [0, 1)"));
            }
            let data = union(kept, isolated.examples().to_vec())?;
            train_soft_mixed(net, &data, &isolated_ids(isolated), *smoothing, &schedule)
        }
        UnlearnMethod::SelfLearning => {
            let dims = network_dims(&net);
            let scratch = nn::init_network(&dims, derive_seed(opts.seed, "self-scratch-init"))?;
            let scratch_schedule = opts.train_schedule("self-scratch-train");
            let (scratch, _) = train_standard(scratch, kept, &scratch_schedule)?;
            let modified = isolated
                .examples()
                .iter()
                .map(|e| {
                    let label = crate::metrics::predict(&scratch, &e.image)?;
                    Ok(e.with_label(label))
                })
                .collect::<Result<Vec<_>>>()?;
            let data = union(kept, modified)?;
            Ok(train_standard(net, &data, &schedule)?.0)
        }
        UnlearnMethod::FinetuneAll => Ok(train_standard(net, kept, &schedule)?.0),
        UnlearnMethod::FinetuneLast => finetune_last_layer(net, kept, &schedule),
        UnlearnMethod::RetrainScratch => {
            let dims = network_dims(&net);
            let fresh = nn::init_network(&dims, derive_seed(opts.seed, "scratch-init"))?;
            Ok(train_standard(fresh, kept, &schedule)?.0)
        }
        UnlearnMethod::AblGga => train_gga(
            net,
            kept,
            isolated,
            &schedule,
            opts.ascent_ceiling,
            opts.gga_weights,
        ),
    }
}

fn isolated_ids(isolated: &Dataset) -> std::collections::BTreeSet<u64> {
    isolated.examples().iter().map(|e| e.id).collect()
}

fn network_dims(net: &Network) -> Vec<usize> {
    let mut dims = vec![net.input_dim()];
    dims.extend(net.layers().iter().map(|l| l.out_dim));
    dims
}

/// Training with smoothed targets on a marked subset and hard targets
/// elsewhere.
fn train_soft_mixed(
    net: Network,
    data: &Dataset,
    smoothed_ids: &std::collections::BTreeSet<u64>,
    smoothing: f64,
    schedule: &TrainSchedule,
) -> Result<Network> {
    let mut net = net;
    let mut state = OptimizerState::new(
        &net,
        schedule.lr_table.first().copied().unwrap_or(1.0),
        schedule.momentum,
        schedule.weight_decay,
    )?;
    let mut rng = Rng::new(schedule.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let class_count = data.class_count();

    for (epoch, &lr) in schedule.lr_table.iter().enumerate() {
        state.learning_rate = lr;
        rng.shuffle(&mut order);
        for chunk in order.chunks(schedule.batch_size) {
            let images: Vec<_> = chunk.iter().map(|&i| &data.examples()[i].image).collect();
            let targets: Vec<Vec<f64>> = chunk
                .iter()
                .map(|&i| {
                    let e = &data.examples()[i];
                    let eps = if smoothed_ids.contains(&e.id) { smoothing } else { 0.0 };
                    smoothed_target(e.label, class_count, eps)
                })
                .collect();
            let weights = vec![1.0; chunk.len()];
            let grads = net.backward_soft_weighted(&images, &targets, &weights)?;
            nn::sgd_step(&mut net, &grads, &mut state).map_err(|e| match e {
                Error::Training { message, .. } => Error::Training { epoch, message },
                other => other,
            })?;
        }
    }
    Ok(net)
}

/// Finetunes only the final dense layer; earlier layers stay frozen, with
/// neither gradient nor weight-decay updates applied to them.
fn finetune_last_layer(net: Network, data: &Dataset, schedule: &TrainSchedule) -> Result<Network> {
    if net.layers().len() < 2 {
        return Err(Error::config(
            "finetuning the last layer requires at least two layers".to_string(),
        ));
    }
    let mut net = net;
    let mut rng = Rng::new(schedule.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let last = net.layers().len() - 1;
    let mut vel_w = vec![0.0; net.layers()[last].weights.len()];
    let mut vel_b = vec![0.0; net.layers()[last].bias.len()];

    for (epoch, &lr) in schedule.lr_table.iter().enumerate() {
        rng.shuffle(&mut order);
        for chunk in order.chunks(schedule.batch_size) {
            let images: Vec<_> = chunk.iter().map(|&i| &data.examples()[i].image).collect();
            let labels: Vec<_> = chunk.iter().map(|&i| data.examples()[i].label).collect();
            let weights = vec![1.0; chunk.len()];
            let grads = net.backward_weighted(&images, &labels, &weights)?;
            let lg = &grads.layers[last];
            if !lg.weights.iter().all(|v| v.is_finite()) {
                return Err(Error::Training {
                    epoch,
                    message: "non-finite gradient".to_string(),
                });
            }
            let layer = &mut net.layers_mut()[last];
            for ((p, g), v) in layer.weights.iter_mut().zip(&lg.weights).zip(&mut vel_w) {
                *v = schedule.momentum * *v + *g + schedule.weight_decay * *p;
                *p -= lr * *v;
            }
            for ((p, g), v) in layer.bias.iter_mut().zip(&lg.bias).zip(&mut vel_b) {
                *v = schedule.momentum * *v + *g + schedule.weight_decay * *p;
                *p -= lr * *v;
            }
        }
    }
    Ok(net)
}
